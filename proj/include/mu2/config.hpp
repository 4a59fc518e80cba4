// SPDX-License-Identifier: Apache-2.0
//
// Application configuration read from a JSON file. Unknown keys are
// rejected; command-line flags are applied on top by the caller.

#pragma once

#include "mu2/dpo.hpp"
#include "mu2/jsonl.hpp"
#include "mu2/tokenizer.hpp"

#include <set>

namespace mu2 {

struct ClientConfig {
    std::string kind = "mock";  // mock | echo | replay | http
    std::string base_url = "http://localhost:8000";
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4o-mini";
    std::string token_env = "MU2_API_TOKEN";
    double temperature = 0.0;
    int timeout_seconds = 60;
    int max_retries = 3;
    int backoff_ms = 1000;
    std::string transcript;
};

struct AppConfig {
    Mu2Config model = Mu2Config::desk();
    std::uint64_t seed = 7;
    double noise_sigma = 0.0;
    std::size_t max_inflight = 1;
    std::size_t vocab_size = 4096;
    double beta = dpo::kDefaultBeta;
    std::size_t n_candidates = 8;
    std::string scorer = "mock";
    std::string scorer_template;
    std::string vocab_path;
    std::string params_path;
    ClientConfig client;

    void validate() const {
        model.validate();
        dpo::validate_beta(beta);
        require(noise_sigma >= 0.0, "config: noise_sigma must be non-negative");
        require(max_inflight >= 1, "config: max_inflight must be >= 1");
        require(n_candidates >= 2, "config: n_candidates must be >= 2");
        require(vocab_size >= 1, "config: vocab_size must be >= 1");
        require(scorer == "mock" || scorer == "remote", "config: scorer must be mock or remote");
        static const std::set<std::string> kinds{"mock", "echo", "replay", "http"};
        require(kinds.count(client.kind) == 1, "config: client.kind must be mock, echo, replay or http");
        require(client.kind != "replay" || !client.transcript.empty(), "config: replay client needs client.transcript");
        require(client.timeout_seconds > 0, "config: client.timeout_seconds must be positive");
        require(client.max_retries >= 0, "config: client.max_retries must be non-negative");
        require(client.backoff_ms >= 0, "config: client.backoff_ms must be non-negative");
        require(client.temperature >= 0.0, "config: client.temperature must be non-negative");
    }
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    require(j.is_object(), "config: " + where + " must be an object");
    for (const auto& [k, _] : j.items()) {
        if (!allowed.count(k)) throw ValidationError("config: unknown key '" + where + k + "'");
    }
}

template <class V>
void read_opt(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ValidationError("config: key '" + where + key + "' has the wrong type");
    }
}

inline Mu2Config model_from_json(const json& j) {
    check_keys(j,
               {"preset", "frames", "patch", "embed_dim", "hidden", "heads", "svr_layers", "tta_layers", "top_k", "k",
                "queries", "n_queries", "max_distance", "text_len", "n_q", "pool_kernels"},
               "model.");
    std::string preset = "desk";
    read_opt(j, "preset", preset, "model.");
    Mu2Config c;
    if (preset == "desk") {
        c = Mu2Config::desk();
    } else if (preset == "paper") {
        c = Mu2Config::paper();
    } else {
        throw ValidationError("config: model.preset must be desk or paper");
    }
    if (j.contains("frames")) {
        std::vector<std::size_t> f;
        read_opt(j, "frames", f, "model.");
        require(f.size() == 4, "config: model.frames must be [T, K, H, W]");
        c.frames = {f[0], f[1], f[2], f[3]};
    }
    if (j.contains("patch")) {
        std::vector<std::size_t> p;
        read_opt(j, "patch", p, "model.");
        require(p.size() == 3, "config: model.patch must be [depth, height, width]");
        c.patch = {p[0], p[1], p[2]};
    }
    read_opt(j, "embed_dim", c.embed_dim, "model.");
    read_opt(j, "hidden", c.embed_dim, "model.");
    read_opt(j, "heads", c.heads, "model.");
    read_opt(j, "svr_layers", c.svr_layers, "model.");
    read_opt(j, "tta_layers", c.tta_layers, "model.");
    read_opt(j, "top_k", c.top_k, "model.");
    read_opt(j, "k", c.top_k, "model.");
    read_opt(j, "queries", c.queries, "model.");
    read_opt(j, "n_queries", c.queries, "model.");
    read_opt(j, "max_distance", c.max_distance, "model.");
    read_opt(j, "text_len", c.text_len, "model.");
    read_opt(j, "n_q", c.text_len, "model.");
    read_opt(j, "pool_kernels", c.pool_kernels, "model.");
    return c;
}

}  // namespace detail

inline AppConfig config_from_json(const json& j) {
    detail::check_keys(j,
                       {"model", "seed", "noise_sigma", "max_inflight", "vocab_size", "beta", "n_candidates", "scorer",
                        "scorer_template", "paths", "vocab_path", "params_path", "client"},
                       "");
    AppConfig c;
    if (j.contains("model")) c.model = detail::model_from_json(j.at("model"));
    detail::read_opt(j, "seed", c.seed, "");
    detail::read_opt(j, "noise_sigma", c.noise_sigma, "");
    detail::read_opt(j, "max_inflight", c.max_inflight, "");
    detail::read_opt(j, "vocab_size", c.vocab_size, "");
    detail::read_opt(j, "beta", c.beta, "");
    detail::read_opt(j, "n_candidates", c.n_candidates, "");
    detail::read_opt(j, "scorer", c.scorer, "");
    detail::read_opt(j, "scorer_template", c.scorer_template, "");
    detail::read_opt(j, "vocab_path", c.vocab_path, "");
    detail::read_opt(j, "params_path", c.params_path, "");
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        detail::check_keys(p, {"vocab", "params"}, "paths.");
        detail::read_opt(p, "vocab", c.vocab_path, "paths.");
        detail::read_opt(p, "params", c.params_path, "paths.");
    }
    if (j.contains("client")) {
        const json& cl = j.at("client");
        detail::check_keys(cl,
                           {"kind", "base_url", "path", "model", "token_env", "temperature", "timeout_seconds",
                            "max_retries", "backoff_ms", "transcript"},
                           "client.");
        detail::read_opt(cl, "kind", c.client.kind, "client.");
        detail::read_opt(cl, "base_url", c.client.base_url, "client.");
        detail::read_opt(cl, "path", c.client.path, "client.");
        detail::read_opt(cl, "model", c.client.model, "client.");
        detail::read_opt(cl, "token_env", c.client.token_env, "client.");
        detail::read_opt(cl, "temperature", c.client.temperature, "client.");
        detail::read_opt(cl, "timeout_seconds", c.client.timeout_seconds, "client.");
        detail::read_opt(cl, "max_retries", c.client.max_retries, "client.");
        detail::read_opt(cl, "backoff_ms", c.client.backoff_ms, "client.");
        detail::read_opt(cl, "transcript", c.client.transcript, "client.");
    }
    c.validate();
    return c;
}

inline AppConfig load_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError("config " + path + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace mu2

// SPDX-License-Identifier: Apache-2.0
//
// Best/worst-of-n preference pairs: candidates for each prompt are scored
// against the reference report and the extremes become (chosen, rejected).

#pragma once

#include "mu2/chat.hpp"
#include "mu2/dpo.hpp"
#include "mu2/metrics.hpp"
#include "mu2/parallel.hpp"

#include <mutex>
#include <regex>

namespace mu2::pref {

struct PromptItem {
    std::string volume;
    std::string question;
    std::string reference;
};

struct ScoredCandidate {
    std::string text;
    double score = 0.0;
    std::string scorer_summary;
};

class CandidateGenerator {
  public:
    virtual ~CandidateGenerator() = default;
    virtual std::vector<std::string> generate(const PromptItem& prompt, std::size_t n) = 0;
};

class ReportScorer {
  public:
    virtual ~ReportScorer() = default;
    /// Score in [0, 1] of `candidate` against `reference`, with a summary.
    virtual ScoredCandidate score(const std::string& reference, const std::string& candidate) = 0;
};

inline std::vector<PromptItem> read_prompts(const std::string& path) {
    std::vector<PromptItem> out;
    for (const auto& j : read_jsonl(path)) {
        try {
            out.push_back({j.value("volume", std::string()), j.at("question").get<std::string>(),
                           j.at("reference").get<std::string>()});
        } catch (const json::exception& e) {
            throw ValidationError(path + ": " + e.what());
        }
    }
    return out;
}

/// Seeded sentence dropout and shuffling of the reference report. The
/// stream for a prompt depends only on the seed and the prompt content.
class PerturbationGenerator : public CandidateGenerator {
  public:
    explicit PerturbationGenerator(std::uint64_t seed, double drop_prob = 0.3, double shuffle_prob = 0.5)
        : seed_(seed), drop_prob_(drop_prob), shuffle_prob_(shuffle_prob) {
        require(drop_prob >= 0.0 && drop_prob < 1.0, "perturbation: drop probability must lie in [0, 1)");
        require(shuffle_prob >= 0.0 && shuffle_prob <= 1.0, "perturbation: shuffle probability must lie in [0, 1]");
    }

    std::vector<std::string> generate(const PromptItem& p, std::size_t n) override {
        const auto sentences = chat::report_sentences(p.reference);
        require(!sentences.empty(), "perturbation: reference has no sentences");
        const std::uint64_t key = std::stoull(content_hash(p.volume + '\n' + p.question + '\n' + p.reference), nullptr, 16);
        std::mt19937_64 rng(seed_ ^ key);
        std::bernoulli_distribution drop(drop_prob_);
        std::bernoulli_distribution shuffle(shuffle_prob_);
        std::vector<std::string> out;
        for (std::size_t c = 0; c < n; ++c) {
            std::vector<std::string> kept;
            for (const auto& s : sentences)
                if (!drop(rng)) kept.push_back(s);
            if (kept.empty()) kept.push_back(sentences[std::uniform_int_distribution<std::size_t>(0, sentences.size() - 1)(rng)]);
            if (shuffle(rng)) std::shuffle(kept.begin(), kept.end(), rng);
            std::string text;
            for (std::size_t i = 0; i < kept.size(); ++i) text += (i ? " " : "") + kept[i] + ".";
            out.push_back(std::move(text));
        }
        return out;
    }

  private:
    std::uint64_t seed_;
    double drop_prob_;
    double shuffle_prob_;
};

/// Offline scorer: ROUGE-1 F1.
class RougeScorer : public ReportScorer {
  public:
    ScoredCandidate score(const std::string& reference, const std::string& candidate) override {
        const auto r = metrics::rouge1(candidate, reference);
        return {candidate, r.f1, "rouge1 f1"};
    }
};

inline constexpr std::string_view kDefaultGreenTemplate =
    "Compare the candidate radiology report with the reference report. Count clinically significant and "
    "insignificant errors in the candidate, then reply with a single line 'Score: <x>' where x is a number "
    "between 0 and 1 (1 means no errors), followed by a short summary.\n\n"
    "Reference report:\n```\n{reference}\n```\n\nCandidate report:\n```\n{candidate}\n```\n";

/// First decimal number in the text that lies in [0, 1].
inline std::optional<double> parse_unit_score(const std::string& reply) {
    static const std::regex number(R"((?:\d+(?:\.\d*)?|\.\d+))");
    for (auto it = std::sregex_iterator(reply.begin(), reply.end(), number); it != std::sregex_iterator(); ++it) {
        const double v = std::stod(it->str());
        if (v >= 0.0 && v <= 1.0) return v;
    }
    return std::nullopt;
}

/// Scores through a chat model with a configurable template holding
/// {reference} and {candidate}.
class RemoteScorer : public ReportScorer {
  public:
    RemoteScorer(std::shared_ptr<chat::ChatClient> client, std::string tpl = std::string(kDefaultGreenTemplate))
        : client_(std::move(client)), template_(std::move(tpl)) {
        const auto names = prompts::placeholders_of(template_);
        require(names.size() == 2 && std::count(names.begin(), names.end(), "reference") == 1 &&
                    std::count(names.begin(), names.end(), "candidate") == 1,
                "remote scorer: template must use exactly {reference} and {candidate}");
    }

    ScoredCandidate score(const std::string& reference, const std::string& candidate) override {
        const prompts::PromptTemplate tpl{prompts::Stage::Custom, "scorer", template_,
                                          prompts::placeholders_of(template_)};
        const std::string reply = client_->complete(prompts::render(tpl, {{"reference", reference}, {"candidate", candidate}}));
        const auto v = parse_unit_score(reply);
        if (!v) throw RuntimeError("remote scorer: no score in [0,1] found in reply");
        return {candidate, *v, trim(reply)};
    }

  private:
    std::shared_ptr<chat::ChatClient> client_;
    std::string template_;
};

/// Memoizes another scorer by content hash; `save` writes entries sorted
/// by key so the cache file is independent of evaluation order.
class CachedScorer : public ReportScorer {
  public:
    explicit CachedScorer(std::shared_ptr<ReportScorer> inner) : inner_(std::move(inner)) {}

    void load(const std::string& path) {
        std::lock_guard<std::mutex> lock(mu_);
        for (const auto& j : read_jsonl_if_exists(path)) {
            cache_[j.at("key").get<std::string>()] = {j.at("score").get<double>(), j.at("summary").get<std::string>()};
        }
    }

    void save(const std::string& path) const {
        std::lock_guard<std::mutex> lock(mu_);
        std::vector<json> rows;
        for (const auto& [k, v] : cache_) rows.push_back(json{{"key", k}, {"score", v.first}, {"summary", v.second}});
        write_jsonl(path, rows);
    }

    ScoredCandidate score(const std::string& reference, const std::string& candidate) override {
        const std::string key = content_hash(reference + '\0' + candidate);
        {
            std::lock_guard<std::mutex> lock(mu_);
            const auto it = cache_.find(key);
            if (it != cache_.end()) return {candidate, it->second.first, it->second.second};
        }
        ScoredCandidate s = inner_->score(reference, candidate);
        std::lock_guard<std::mutex> lock(mu_);
        cache_[key] = {s.score, s.scorer_summary};
        return s;
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> lock(mu_);
        return cache_.size();
    }

  private:
    std::shared_ptr<ReportScorer> inner_;
    mutable std::mutex mu_;
    std::map<std::string, std::pair<double, std::string>> cache_;
};

/// Memoizes generated candidate lists by prompt content and n.
class CachedGenerator : public CandidateGenerator {
  public:
    explicit CachedGenerator(std::shared_ptr<CandidateGenerator> inner) : inner_(std::move(inner)) {}

    void load(const std::string& path) {
        std::lock_guard<std::mutex> lock(mu_);
        for (const auto& j : read_jsonl_if_exists(path)) {
            cache_[j.at("key").get<std::string>()] = j.at("candidates").get<std::vector<std::string>>();
        }
    }

    void save(const std::string& path) const {
        std::lock_guard<std::mutex> lock(mu_);
        std::vector<json> rows;
        for (const auto& [k, v] : cache_) rows.push_back(json{{"key", k}, {"candidates", v}});
        write_jsonl(path, rows);
    }

    std::vector<std::string> generate(const PromptItem& p, std::size_t n) override {
        const std::string key =
            content_hash(p.volume + '\0' + p.question + '\0' + p.reference + '\0' + std::to_string(n));
        {
            std::lock_guard<std::mutex> lock(mu_);
            const auto it = cache_.find(key);
            if (it != cache_.end()) return it->second;
        }
        auto out = inner_->generate(p, n);
        std::lock_guard<std::mutex> lock(mu_);
        cache_[key] = out;
        return out;
    }

  private:
    std::shared_ptr<CandidateGenerator> inner_;
    mutable std::mutex mu_;
    std::map<std::string, std::vector<std::string>> cache_;
};

struct Failure {
    std::size_t index = 0;
    std::string reason;
};

struct BuildResult {
    std::vector<dpo::PreferencePair> pairs;
    std::size_t skipped_equal = 0;
    std::vector<Failure> failures;
};

/// Index of the best (`want_max`) or worst candidate; ties go to the
/// lexicographically smallest text.
inline std::size_t extreme_index(const std::vector<ScoredCandidate>& c, bool want_max) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < c.size(); ++i) {
        const bool better = want_max ? c[i].score > c[best].score : c[i].score < c[best].score;
        if (better || (c[i].score == c[best].score && c[i].text < c[best].text)) best = i;
    }
    return best;
}

namespace detail {

struct Outcome {
    std::optional<dpo::PreferencePair> pair;
    bool skipped_equal = false;
    std::string failure;
};

}  // namespace detail

/// One pair per prompt whose candidate scores are not all equal, in prompt
/// order. Generator and scorer failures skip the prompt with a reason.
inline BuildResult build_pairs(const std::vector<PromptItem>& prompts, CandidateGenerator& generator,
                               ReportScorer& scorer, std::size_t n_candidates, std::size_t max_inflight = 1) {
    require(n_candidates >= 2, "pref-build: n_candidates must be at least 2");
    std::vector<std::size_t> order(prompts.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto outcomes = parallel_map(order, max_inflight, [&](std::size_t i) {
        detail::Outcome o;
        const PromptItem& p = prompts[i];
        try {
            const auto texts = generator.generate(p, n_candidates);
            if (texts.size() < 2) {
                o.failure = "generator returned fewer than 2 candidates";
                return o;
            }
            std::vector<ScoredCandidate> scored;
            for (const auto& t : texts) {
                ScoredCandidate s = scorer.score(p.reference, t);
                if (!(s.score >= 0.0 && s.score <= 1.0)) throw RuntimeError("scorer returned a score outside [0,1]");
                s.text = t;
                scored.push_back(std::move(s));
            }
            const std::size_t w = extreme_index(scored, true);
            const std::size_t l = extreme_index(scored, false);
            if (!(scored[w].score > scored[l].score)) {
                o.skipped_equal = true;
                return o;
            }
            o.pair = dpo::PreferencePair{p.volume, p.question, scored[w].text, scored[l].text, scored[w].score,
                                         scored[l].score};
        } catch (const std::exception& e) {
            o.failure = e.what();
        }
        return o;
    });
    BuildResult r;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        auto& o = outcomes[i];
        if (o.pair) r.pairs.push_back(std::move(*o.pair));
        if (o.skipped_equal) ++r.skipped_equal;
        if (!o.failure.empty()) r.failures.push_back({i, o.failure});
    }
    return r;
}

}  // namespace mu2::pref

// SPDX-License-Identifier: Apache-2.0
//
// mu2: command-line entry point.
//
// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure
// (I/O, remote client, or a failing gradient check).

#include "CLI11.hpp"

#include "mu2/checkpoint.hpp"
#include "mu2/config.hpp"
#include "mu2/grad_ops.hpp"
#include "mu2/http_client.hpp"
#include "mu2/metrics.hpp"
#include "mu2/pref_builder.hpp"
#include "mu2/synthesis.hpp"
#include "mu2/volume.hpp"

#include <cstdio>
#include <iostream>

namespace {

using namespace mu2;

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> max_inflight;
};

AppConfig resolve_config(const CommonFlags& flags) {
    AppConfig cfg = flags.config.empty() ? AppConfig{} : load_config(flags.config);
    if (flags.seed) cfg.seed = *flags.seed;
    if (flags.max_inflight) cfg.max_inflight = *flags.max_inflight;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* sub, CommonFlags& flags) {
    sub->add_option("--config", flags.config, "JSON configuration file");
    sub->add_option("--seed", flags.seed, "Seed for every stochastic component");
    sub->add_option("--max-inflight", flags.max_inflight, "Concurrent requests or prompts");
}

std::string json_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void emit(const std::string& out_path, const std::string& text) {
    if (out_path.empty() || out_path == "-") {
        std::cout << text;
    } else {
        write_file_atomic(out_path, text);
    }
}

std::shared_ptr<chat::ChatClient> make_client(const ClientConfig& c) {
    std::shared_ptr<chat::ChatClient> base;
    if (c.kind == "mock") {
        base = std::make_shared<chat::MockClient>();
    } else if (c.kind == "echo") {
        base = std::make_shared<chat::EchoClient>();
    } else if (c.kind == "replay") {
        return std::make_shared<chat::ReplayClient>(chat::ReplayClient::from_file(c.transcript));
    } else {
        chat::HttpSettings s;
        s.base_url = c.base_url;
        s.path = c.path;
        s.model = c.model;
        s.token_env = c.token_env;
        s.temperature = c.temperature;
        s.timeout_seconds = c.timeout_seconds;
        base = std::make_shared<chat::RetryingClient>(
            std::make_shared<chat::HttpChatClient>(s),
            chat::RetryPolicy{c.max_retries, std::chrono::milliseconds(c.backoff_ms)});
    }
    return base;
}

/// Wraps the client in a recorder when a transcript path is configured.
struct ClientSession {
    std::shared_ptr<chat::ChatClient> client;
    std::shared_ptr<chat::RecordingClient> recorder;
    std::string transcript;

    explicit ClientSession(const ClientConfig& c) : client(make_client(c)) {
        if (c.kind != "replay" && !c.transcript.empty()) {
            recorder = std::make_shared<chat::RecordingClient>(client);
            client = recorder;
            transcript = c.transcript;
        }
    }
    void finish() const {
        if (recorder) recorder->save(transcript);
    }
};

struct ClientFlags {
    std::optional<std::string> kind;
    std::optional<std::string> transcript;
    std::optional<std::string> base_url;
    std::optional<std::string> model;
};

void add_client_flags(CLI::App* sub, ClientFlags& f) {
    sub->add_option("--client", f.kind, "mock | echo | replay | http")->check(CLI::IsMember({"mock", "echo", "replay", "http"}));
    sub->add_option("--transcript", f.transcript, "Transcript file (recorded, or served by replay)");
    sub->add_option("--base-url", f.base_url, "Chat completion endpoint base URL");
    sub->add_option("--model", f.model, "Remote model name");
}

ClientConfig apply_client_flags(ClientConfig c, const ClientFlags& f) {
    if (f.kind) c.kind = *f.kind;
    if (f.transcript) c.transcript = *f.transcript;
    if (f.base_url) c.base_url = *f.base_url;
    if (f.model) c.model = *f.model;
    require(c.kind != "replay" || !c.transcript.empty(), "replay client needs --transcript");
    return c;
}

// ---------------------------------------------------------------------------

int run_ingest(const AppConfig& cfg, const std::string& in, const std::string& out, std::optional<double> sigma) {
    const Volume v = read_volume(in);
    const FrameStack fs = ingest(v, cfg.model.frames, sigma.value_or(cfg.noise_sigma), cfg.seed);
    write_frames(out, fs);
    std::cerr << "ingest: " << v.depth << "x" << v.height << "x" << v.width << " -> " << fs.frames << " frames of "
              << fs.slices_per_frame << "x" << fs.height << "x" << fs.width << "\n";
    return 0;
}

template <typename T>
CompactTokens<T> tokenize_with(const AppConfig& cfg, const FrameStack& fs, const std::string& question) {
    const Vocab vocab = cfg.vocab_path.empty() ? Vocab::build({question}, cfg.vocab_size) : Vocab::load(cfg.vocab_path);
    Mu2Params<T> params = Mu2Params<T>::init(cfg.model, vocab.rows(), cfg.seed);
    if (!cfg.params_path.empty()) load_checkpoint(params, cfg.params_path);
    return tokenize(fs, question, cfg.model, params, vocab);
}

int run_tokenize(const AppConfig& cfg, const std::string& frames, const std::string& question, const std::string& out,
                 const std::string& precision) {
    const FrameStack fs = read_frames(frames);
    const auto& t = cfg.model.frames;
    if (fs.frames != t.frames || fs.slices_per_frame != t.slices_per_frame || fs.height != t.height ||
        fs.width != t.width) {
        throw ValidationError("tokenize: frame file does not match the configured frame target");
    }
    std::vector<Mat<double>> mats;
    if (precision == "float") {
        const auto ct = tokenize_with<float>(cfg, fs, question);
        mats = {ct.tokens.cast<double>(), ct.provenance.cast<double>()};
    } else {
        const auto ct = tokenize_with<double>(cfg, fs, question);
        mats = {ct.tokens, ct.provenance};
    }
    write_matrices(out, mats);
    std::cerr << "tokenize: " << mats[0].rows() << "x" << mats[0].cols() << " compact tokens\n";
    return 0;
}

int run_grad_check(const std::vector<std::string>& ops, std::uint64_t seed, double tol, double step, bool sweep) {
    bool ok = true;
    for (const auto& op : ops) {
        if (sweep) {
            for (double h : {1e-3, 1e-4, 1e-5}) std::cout << grad::check_op(op, seed, tol, h).to_line() << '\n';
            continue;
        }
        const auto rep = grad::check_op(op, seed, tol, step);
        std::cout << rep.to_line() << '\n';
        if (!rep.pass) {
            ok = false;
            std::cerr << "grad-check: " << op << " failed for";
            for (const auto& n : rep.failing()) std::cerr << ' ' << n;
            std::cerr << '\n';
        }
    }
    return ok ? 0 : 2;
}

int run_dpo_loss(const AppConfig& cfg, const std::string& pairs_path, double beta, std::size_t steps, double lr) {
    dpo::validate_beta(beta);
    const auto rows = read_jsonl(pairs_path);
    require(!rows.empty(), "dpo-loss: " + pairs_path + " has no pairs");
    std::vector<dpo::PreferencePair> pairs;
    std::vector<dpo::ScoredPair> scored;
    bool all_precomputed = true;
    for (const auto& j : rows) {
        pairs.push_back(dpo::pair_from_json(j));
        if (auto s = dpo::precomputed_scores(j)) {
            scored.push_back(*s);
        } else {
            all_precomputed = false;
        }
    }
    json out{{"pairs", pairs.size()}, {"beta", beta}};
    if (all_precomputed && steps == 0) {
        out["provider"] = "precomputed";
        out["loss"] = dpo::batch_dpo_loss(scored, beta);
    } else {
        std::vector<std::pair<std::string, std::string>> corpus;
        for (const auto& p : pairs) {
            corpus.emplace_back(dpo::pair_prompt(p), p.chosen);
            corpus.emplace_back(dpo::pair_prompt(p), p.rejected);
        }
        const auto reference = dpo::BigramLM::fit(corpus);
        auto policy = reference;
        out["provider"] = "bigram";
        const auto history = dpo::train_policy(policy, reference, pairs, beta, lr, steps);
        out["loss"] = history.front();
        if (steps > 0) {
            out["history"] = history;
            out["final_loss"] = history.back();
        }
    }
    (void)cfg;
    std::cout << out.dump() << '\n';
    return 0;
}

int run_pref_build(const AppConfig& cfg, const std::string& in, const std::string& out, const std::string& cache_dir,
                   const ClientConfig& client_cfg) {
    const auto prompts = pref::read_prompts(in);
    auto generator = std::make_shared<pref::CachedGenerator>(std::make_shared<pref::PerturbationGenerator>(cfg.seed));
    std::shared_ptr<pref::ReportScorer> base;
    std::optional<ClientSession> session;
    if (cfg.scorer == "remote") {
        session.emplace(client_cfg);
        base = cfg.scorer_template.empty() ? std::make_shared<pref::RemoteScorer>(session->client)
                                           : std::make_shared<pref::RemoteScorer>(session->client, cfg.scorer_template);
    } else {
        base = std::make_shared<pref::RougeScorer>();
    }
    auto scorer = std::make_shared<pref::CachedScorer>(base);
    std::string gen_cache, score_cache;
    if (!cache_dir.empty()) {
        std::filesystem::create_directories(cache_dir);
        gen_cache = (std::filesystem::path(cache_dir) / "candidates.jsonl").string();
        score_cache = (std::filesystem::path(cache_dir) / "scores.jsonl").string();
        generator->load(gen_cache);
        scorer->load(score_cache);
    }
    const auto result = pref::build_pairs(prompts, *generator, *scorer, cfg.n_candidates, cfg.max_inflight);
    std::vector<json> rows;
    for (const auto& p : result.pairs) rows.push_back(dpo::to_json(p));
    write_jsonl(out, rows);
    if (!cache_dir.empty()) {
        generator->save(gen_cache);
        scorer->save(score_cache);
    }
    if (session) session->finish();
    json failures = json::array();
    for (const auto& f : result.failures) {
        failures.push_back(json{{"index", f.index}, {"reason", f.reason}});
        std::cerr << "pref-build: prompt " << f.index << " skipped: " << f.reason << '\n';
    }
    std::cout << json{{"prompts", prompts.size()},
                      {"pairs", result.pairs.size()},
                      {"skipped_equal", result.skipped_equal},
                      {"failures", failures}}
                     .dump()
              << '\n';
    return 0;
}

int run_eval(const std::string& pred_path, const std::string& ref_path, const std::string& out) {
    const auto pred = read_lines(pred_path);
    const auto ref = read_lines(ref_path);
    if (pred.size() != ref.size()) {
        throw ValidationError("eval: " + std::to_string(pred.size()) + " predictions but " +
                              std::to_string(ref.size()) + " references");
    }
    std::vector<metrics::MetricReport> reports;
    std::string text;
    auto line = [](const metrics::MetricReport& r) {
        return "\"bleu\":" + json_number(r.bleu) + ",\"rouge1_precision\":" + json_number(r.rouge1_precision) +
               ",\"rouge1_recall\":" + json_number(r.rouge1_recall) + ",\"rouge1_f1\":" + json_number(r.rouge1_f1);
    };
    for (std::size_t i = 0; i < pred.size(); ++i) {
        reports.push_back(metrics::evaluate(pred[i], ref[i]));
        text += "{\"index\":" + std::to_string(i) + "," + line(reports.back()) + "}\n";
    }
    text += "{\"mean\":{" + line(metrics::mean_report(reports)) + "},\"count\":" + std::to_string(reports.size()) + "}\n";
    emit(out, text);
    return 0;
}

int run_synth(const AppConfig& cfg, const std::string& stage, const std::string& in, const std::string& out_dir,
              bool resume, const ClientConfig& client_cfg) {
    std::vector<synth::StageId> stages;
    if (stage == "all") {
        stages = {synth::StageId::Questions, synth::StageId::Answers, synth::StageId::Filter, synth::StageId::Refine,
                  synth::StageId::Fuse};
    } else {
        stages = {synth::stage_from_string(stage)};
    }
    std::vector<synth::Report> reports;
    if (std::find(stages.begin(), stages.end(), synth::StageId::Questions) != stages.end()) {
        require(!in.empty(), "synth: --in is required for the questions stage");
        reports = synth::read_reports(in);
    }
    ClientSession session(client_cfg);
    synth::PipelineOptions opt;
    opt.out_dir = out_dir;
    opt.resume = resume;
    opt.max_inflight = cfg.max_inflight;
    const auto summary = synth::run_pipeline(reports, *session.client, opt, stages);
    session.finish();
    std::cout << synth::to_json(summary).dump() << '\n';
    return 0;
}

int run_rewrite(const std::string& in, const std::string& examples, const std::string& out,
                const ClientConfig& client_cfg) {
    ClientSession session(client_cfg);
    const std::string ex = examples.empty() ? std::string() : trim(read_text_file(examples));
    const std::string text = synth::rewrite_report(trim(read_text_file(in)), ex, *session.client);
    session.finish();
    emit(out, text + "\n");
    return 0;
}

int run_translate(const std::string& in, const std::string& from, const std::string& to, const std::string& out,
                  const ClientConfig& client_cfg) {
    ClientSession session(client_cfg);
    const std::string text = synth::translate_report(trim(read_text_file(in)), from, to, *session.client);
    session.finish();
    emit(out, text + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mu2: volumetric report-generation tooling"};
    app.require_subcommand(1);

    CommonFlags common;
    ClientFlags client_flags;
    std::string in, out, frames_path, question, precision = "double", pred, ref, pairs_path, cache_dir, out_dir,
                                          stage = "all", examples, from, to, op;
    std::optional<double> sigma;
    std::vector<std::size_t> target;
    std::string params_path, vocab_path;
    double tol = 1e-4, step = 1e-5, lr = 0.5;
    std::optional<double> beta_flag;
    std::optional<std::size_t> n_candidates;
    std::optional<std::string> scorer;
    std::size_t steps = 0;
    bool all = false, sweep = false, resume = false;

    auto* c_ingest = app.add_subcommand("ingest", "Normalize, resample and frame a volume");
    add_common(c_ingest, common);
    c_ingest->add_option("--in", in, "Volume file")->required();
    c_ingest->add_option("--out", out, "Frame stack file")->required();
    c_ingest->add_option("--sigma,--noise-sigma", sigma, "Gaussian noise standard deviation");
    c_ingest->add_option("--target", target, "Frame target T,K,H,W")->delimiter(',')->expected(4);

    auto* c_tok = app.add_subcommand("tokenize", "Compress a frame stack into compact tokens");
    add_common(c_tok, common);
    c_tok->add_option("--frames,--volume", frames_path, "Frame stack file written by ingest")->required();
    c_tok->add_option("--params", params_path, "Checkpoint directory (default: seeded initialization)");
    c_tok->add_option("--vocab", vocab_path, "Vocabulary file (default: built from the question)");
    c_tok->add_option("--question", question, "Question text")->required();
    c_tok->add_option("--out", out, "Token file")->required();
    c_tok->add_option("--precision", precision, "float | double")->check(CLI::IsMember({"float", "double"}));

    auto* c_grad = app.add_subcommand("grad-check", "Compare analytic gradients with central differences");
    c_grad->add_option("--op", op, "Operator id");
    c_grad->add_flag("--all", all, "Check every registered operator");
    c_grad->add_option("--tol", tol, "Relative tolerance");
    c_grad->add_option("--step", step, "Finite-difference step");
    c_grad->add_option("--seed", common.seed, "Seed for the random instance");
    c_grad->add_flag("--sweep", sweep, "Report errors at h = 1e-3, 1e-4, 1e-5");
    c_grad->add_flag("--list", [&](std::int64_t) {
        for (const auto& name : grad::registered_ops()) std::cout << name << '\n';
        throw CLI::Success();
    }, "List operator ids");

    auto* c_dpo = app.add_subcommand("dpo-loss", "Mean DPO loss of a preference file");
    add_common(c_dpo, common);
    c_dpo->add_option("--pairs", pairs_path, "Preference pairs")->required();
    c_dpo->add_option("--beta", beta_flag, "Inverse temperature in (0.1, 0.5)");
    c_dpo->add_option("--train-steps", steps, "Gradient steps on the bigram policy");
    c_dpo->add_option("--lr", lr, "Learning rate for --train-steps");

    auto* c_pref = app.add_subcommand("pref-build", "Build best/worst preference pairs");
    add_common(c_pref, common);
    add_client_flags(c_pref, client_flags);
    c_pref->add_option("--in", in, "Prompt records")->required();
    c_pref->add_option("--out", out, "Pair records")->required();
    c_pref->add_option("--n", n_candidates, "Candidates per prompt");
    c_pref->add_option("--scorer", scorer, "mock | remote")->check(CLI::IsMember({"mock", "remote"}));
    c_pref->add_option("--cache-dir", cache_dir, "Candidate and score cache directory");

    auto* c_eval = app.add_subcommand("eval", "BLEU and ROUGE-1 per line and corpus means");
    c_eval->add_option("--pred", pred, "Predictions, one per line")->required();
    c_eval->add_option("--ref", ref, "References, one per line")->required();
    c_eval->add_option("--out", out, "Output file (default: standard output)");

    auto* c_synth = app.add_subcommand("synth", "Reasoning synthesis stages");
    add_common(c_synth, common);
    add_client_flags(c_synth, client_flags);
    c_synth->add_option("stage", stage, "all | questions | answers | filter | refine | fuse")
        ->check(CLI::IsMember({"all", "questions", "answers", "filter", "refine", "fuse"}));
    c_synth->add_option("--in", in, "Report records {report_id, report_text}");
    c_synth->add_option("--out-dir", out_dir, "Stage file directory")->required();
    c_synth->add_flag("--resume", resume, "Reuse completed records");

    auto* c_rew = app.add_subcommand("rewrite", "Paraphrase a report");
    add_common(c_rew, common);
    add_client_flags(c_rew, client_flags);
    c_rew->add_option("--in", in, "Report text file")->required();
    c_rew->add_option("--examples", examples, "Style examples text file");
    c_rew->add_option("--out", out, "Output file (default: standard output)");

    auto* c_tr = app.add_subcommand("translate", "Translate a report");
    add_common(c_tr, common);
    add_client_flags(c_tr, client_flags);
    c_tr->add_option("--in", in, "Text file")->required();
    c_tr->add_option("--from", from, "Source language")->required();
    c_tr->add_option("--to", to, "Target language")->required();
    c_tr->add_option("--out", out, "Output file (default: standard output)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (c_grad->parsed()) {
            std::vector<std::string> ops;
            if (all) {
                require(op.empty(), "grad-check: use either --op or --all");
                ops = grad::registered_ops();
            } else {
                require(!op.empty(), "grad-check: --op or --all is required");
                ops = {op};
                (void)grad::make_op_problem(op, 0);
            }
            return run_grad_check(ops, common.seed.value_or(7), tol, step, sweep);
        }
        if (c_eval->parsed()) return run_eval(pred, ref, out);

        AppConfig cfg = resolve_config(common);
        if (!target.empty()) {
            cfg.model.frames = {target[0], target[1], target[2], target[3]};
            cfg.validate();
        }
        if (!params_path.empty()) cfg.params_path = params_path;
        if (!vocab_path.empty()) cfg.vocab_path = vocab_path;
        if (c_ingest->parsed()) return run_ingest(cfg, in, out, sigma);
        if (c_tok->parsed()) return run_tokenize(cfg, frames_path, question, out, precision);
        if (c_dpo->parsed()) return run_dpo_loss(cfg, pairs_path, beta_flag.value_or(cfg.beta), steps, lr);
        const ClientConfig client_cfg = apply_client_flags(cfg.client, client_flags);
        if (c_pref->parsed()) {
            if (n_candidates) cfg.n_candidates = *n_candidates;
            if (scorer) cfg.scorer = *scorer;
            cfg.validate();
            return run_pref_build(cfg, in, out, cache_dir, client_cfg);
        }
        if (c_synth->parsed()) return run_synth(cfg, stage, in, out_dir, resume, client_cfg);
        if (c_rew->parsed()) return run_rewrite(in, examples, out, client_cfg);
        if (c_tr->parsed()) return run_translate(in, from, to, out, client_cfg);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

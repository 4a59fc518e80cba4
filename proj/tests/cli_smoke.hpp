// SPDX-License-Identifier: Apache-2.0
//
// Drives the mu2 binary through a desk-scale end-to-end run.

#pragma once

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

namespace cli_smoke {

inline const std::filesystem::path kBinary{MU2_CLI_PATH};
inline const std::filesystem::path kSource{MU2_SOURCE_DIR};

inline std::string quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out.push_back(c);
    }
    return out + "'";
}

/// Runs mu2 with `args`, sending stdout and stderr to the given files.
inline int run(const std::vector<std::string>& args, const std::filesystem::path& out = "/dev/null",
               const std::filesystem::path& err = "/dev/null") {
    std::string cmd = quote(kBinary.string());
    for (const auto& a : args) cmd += " " + quote(a);
    cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
    const int status = std::system(cmd.c_str());
    if (status == -1 || !WIFEXITED(status)) return -1;
    return WEXITSTATUS(status);
}

inline std::string data(const std::string& name) { return (kSource / "data" / name).string(); }

struct Step {
    std::string name;
    int code;
};

/// Artifacts written into `dir` by `run_all`.
inline const std::vector<std::string> kArtifacts{
    "frames.bin",       "tokens.bin",        "metrics.jsonl", "pairs.jsonl",  "pref.json",
    "dpo.json",         "synth/questions.jsonl", "synth/qa.jsonl", "synth/accepted.jsonl",
    "synth/refined.jsonl", "synth/traces.jsonl", "synth/datapoints.jsonl", "synth/summary.json",
    "rewrite.txt",      "translate.txt"};

/// ingest -> tokenize -> eval, then pref-build -> dpo-loss and the synthesis
/// commands, all with the mock client.
inline std::vector<Step> run_all(const std::filesystem::path& dir, const std::string& seed) {
    std::filesystem::create_directories(dir);
    const std::string cfg = data("desk.json");
    auto p = [&](const std::string& f) { return (dir / f).string(); };
    std::vector<Step> steps;
    steps.push_back({"ingest", run({"ingest", "--config", cfg, "--seed", seed, "--sigma", "0.05", "--in",
                                    data("sample_volume.bin"), "--out", p("frames.bin")})});
    steps.push_back({"tokenize", run({"tokenize", "--config", cfg, "--seed", seed, "--frames", p("frames.bin"),
                                      "--question", "Is there a pleural effusion?", "--out", p("tokens.bin")})});
    steps.push_back({"eval", run({"eval", "--pred", data("sample_preds.txt"), "--ref", data("sample_refs.txt"),
                                  "--out", p("metrics.jsonl")})});
    steps.push_back({"pref-build", run({"pref-build", "--config", cfg, "--seed", seed, "--in",
                                        data("sample_prompts.jsonl"), "--out", p("pairs.jsonl")},
                                       p("pref.json"))});
    steps.push_back({"dpo-loss", run({"dpo-loss", "--config", cfg, "--pairs", p("pairs.jsonl"), "--train-steps", "5"},
                                     p("dpo.json"))});
    steps.push_back({"synth", run({"synth", "all", "--config", cfg, "--seed", seed, "--client", "mock", "--in",
                                   data("sample_reports.jsonl"), "--out-dir", p("synth")})});
    steps.push_back({"rewrite", run({"rewrite", "--config", cfg, "--client", "mock", "--in", data("sample_report.txt"),
                                     "--examples", data("style_examples.txt"), "--out", p("rewrite.txt")})});
    steps.push_back({"translate", run({"translate", "--config", cfg, "--client", "mock", "--in",
                                       data("sample_report.txt"), "--from", "English", "--to", "German", "--out",
                                       p("translate.txt")})});
    return steps;
}

}  // namespace cli_smoke

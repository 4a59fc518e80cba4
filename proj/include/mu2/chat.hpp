// SPDX-License-Identifier: Apache-2.0
//
// Single-turn chat completion clients: offline mocks, transcript replay and
// recording, and a retry decorator. The HTTP client lives in http_client.hpp.

#pragma once

#include "mu2/jsonl.hpp"
#include "mu2/prompts.hpp"
#include "mu2/text.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

namespace mu2::chat {

/// Failed completion request. Transient failures are retried by RetryingClient.
class ChatError : public RuntimeError {
  public:
    ChatError(const std::string& what, bool transient = true) : RuntimeError(what), transient_(transient) {}
    bool transient() const { return transient_; }

  private:
    bool transient_;
};

/// Implementations must be safe to call from several threads.
class ChatClient {
  public:
    virtual ~ChatClient() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

/// Contents of the last ``` fenced block, without the fence lines.
inline std::optional<std::string> last_fenced_block(std::string_view text) {
    const std::size_t close = text.rfind("\n```");
    if (close == std::string_view::npos || close == 0) return std::nullopt;
    const std::size_t open = text.rfind("```\n", close - 1);
    if (open == std::string_view::npos) return std::nullopt;
    const std::size_t begin = open + 4;
    if (begin > close) return std::string();
    return std::string(text.substr(begin, close - begin));
}

/// Returns the last fenced block of the prompt, or the whole prompt.
class EchoClient : public ChatClient {
  public:
    std::string complete(const std::string& prompt) override {
        if (auto block = last_fenced_block(prompt)) return *block;
        return prompt;
    }
};

/// Sentences of a report, split at newlines and at a '.' followed by
/// whitespace or the end of text; trimmed, without the terminator.
inline std::vector<std::string> report_sentences(std::string_view report) {
    std::vector<std::string> out;
    std::string cur;
    for (std::size_t i = 0; i < report.size(); ++i) {
        const char c = report[i];
        const bool stop = c == '.' && (i + 1 == report.size() || std::isspace(static_cast<unsigned char>(report[i + 1])));
        if (stop || c == '\n') {
            std::string s = trim(cur);
            if (!word_tokens(s).empty()) out.push_back(std::move(s));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    std::string s = trim(cur);
    if (!word_tokens(s).empty()) out.push_back(std::move(s));
    return out;
}

/// Deterministic offline stand-in for a language model. It recognizes each
/// synthesis template and answers from the bound report text alone.
class MockClient : public ChatClient {
  public:
    std::string complete(const std::string& prompt) override {
        const auto found = prompts::identify(prompt);
        if (!found) throw ChatError("mock: prompt matches no known template", false);
        const auto& [stage, b] = *found;
        switch (stage) {
            case prompts::Stage::Questions: return questions(b.at("report"));
            case prompts::Stage::Answer: return answer(b.at("report"), b.at("question"));
            case prompts::Stage::Filter: return verdict(b.at("report"), b.at("question"), b.at("answer"));
            case prompts::Stage::Refine: return refine(b.at("report"));
            case prompts::Stage::Fuse: return fuse(b.at("thinking_before"));
            case prompts::Stage::Rewrite: return collapse_spaces(b.at(""));
            case prompts::Stage::Translate: {
                const std::string& text = b.at("source_input");
                if (b.at("source_lang") == b.at("target_lang")) return text;
                return "[" + b.at("target_lang") + "] " + text;
            }
            case prompts::Stage::Custom: break;
        }
        throw ChatError("mock: unhandled stage", false);
    }

    static std::string questions(const std::string& report) {
        std::string out = "Here are the questions:\n";
        std::size_t n = 0;
        for (const auto& s : report_sentences(report)) {
            out += std::to_string(++n) + ". What does the image show regarding: " + lowercase(s) + "?\n";
        }
        out += std::to_string(++n) + ". What is the patient's name?\n";
        return out;
    }

    static std::string best_sentence(const std::string& report, const std::string& question) {
        const auto q = word_tokens(question);
        std::string best;
        std::size_t best_overlap = 0;
        for (const auto& s : report_sentences(report)) {
            std::size_t overlap = 0;
            for (const auto& w : word_tokens(s)) overlap += std::count(q.begin(), q.end(), w) > 0 ? 1 : 0;
            if (best.empty() || overlap > best_overlap) {
                best = s;
                best_overlap = overlap;
            }
        }
        return best;
    }

    static std::string answer(const std::string& report, const std::string& question) {
        const std::string s = best_sentence(report, question);
        return "Thinking: The report states that " + lowercase(s) +
               ". Reviewing each region in turn, I compare the relevant structures with their expected "
               "appearance before settling on an answer.\n\nAnswer: " +
               s + ".";
    }

    static std::string verdict(const std::string& report, const std::string& question, const std::string& answer) {
        if (lowercase(question).find("name") != std::string::npos) return "No";
        const auto r = word_tokens(report);
        for (const auto& w : word_tokens(answer))
            if (std::find(r.begin(), r.end(), w) != r.end()) return "Yes";
        return "No";
    }

    static std::string refine(const std::string& narrative) {
        std::string out = replace_all(narrative, "The report states that", "The image shows that");
        out = replace_all(out, "the report states that", "the image shows that");
        out = replace_all(out, "report", "image");
        return out;
    }

    static std::string fuse(const std::string& thinking_before) {
        std::vector<std::string> steps;
        for (const auto& line : split_lines(thinking_before)) {
            if (line.rfind("Thinking: ", 0) == 0) steps.push_back(line.substr(10));
        }
        std::string out = "**Thinking progress**\n";
        for (std::size_t i = 0; i < steps.size(); ++i) {
            out += (i == 0 ? "First, " : (i + 1 == steps.size() ? "Finally, " : "Next, ")) + steps[i];
            out += '\n';
        }
        return out;
    }

    static std::string replace_all(std::string s, std::string_view from, std::string_view to) {
        for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
            s.replace(pos, from.size(), to);
        }
        return s;
    }

    static std::string collapse_spaces(std::string_view s) {
        std::string out;
        for (char c : s) {
            if (c == ' ' && !out.empty() && out.back() == ' ') continue;
            out.push_back(c);
        }
        return out;
    }
};

struct TranscriptEntry {
    std::string hash;
    std::string prompt;
    std::string response;
};

inline std::vector<TranscriptEntry> read_transcript(const std::string& path) {
    std::vector<TranscriptEntry> out;
    for (const auto& j : read_jsonl_if_exists(path)) {
        try {
            out.push_back({j.at("hash").get<std::string>(), j.at("prompt").get<std::string>(),
                           j.at("response").get<std::string>()});
        } catch (const json::exception& e) {
            throw ValidationError("transcript " + path + ": " + e.what());
        }
    }
    return out;
}

/// Serves responses recorded in a transcript, keyed by prompt hash.
class ReplayClient : public ChatClient {
  public:
    explicit ReplayClient(const std::vector<TranscriptEntry>& entries) {
        for (const auto& e : entries) responses_[e.hash] = e.response;
    }
    static ReplayClient from_file(const std::string& path) { return ReplayClient(read_transcript(path)); }

    std::string complete(const std::string& prompt) override {
        const auto it = responses_.find(content_hash(prompt));
        if (it == responses_.end()) throw ChatError("replay: no transcript entry for prompt " + content_hash(prompt), false);
        return it->second;
    }

  private:
    std::map<std::string, std::string> responses_;
};

/// Records every exchange of the wrapped client. `save` merges with the file
/// on disk and writes entries sorted by hash, so the transcript does not
/// depend on request completion order.
class RecordingClient : public ChatClient {
  public:
    explicit RecordingClient(std::shared_ptr<ChatClient> inner) : inner_(std::move(inner)) {}

    std::string complete(const std::string& prompt) override {
        std::string response = inner_->complete(prompt);
        std::lock_guard<std::mutex> lock(mu_);
        entries_[content_hash(prompt)] = {content_hash(prompt), prompt, response};
        return response;
    }

    std::vector<TranscriptEntry> entries() const {
        std::lock_guard<std::mutex> lock(mu_);
        std::vector<TranscriptEntry> out;
        for (const auto& [_, e] : entries_) out.push_back(e);
        return out;
    }

    void save(const std::string& path) const {
        std::map<std::string, TranscriptEntry> merged;
        for (auto& e : read_transcript(path)) merged[e.hash] = e;
        for (auto& e : entries()) merged[e.hash] = e;
        std::vector<json> rows;
        for (const auto& [h, e] : merged) rows.push_back(json{{"hash", h}, {"prompt", e.prompt}, {"response", e.response}});
        write_jsonl(path, rows);
    }

  private:
    std::shared_ptr<ChatClient> inner_;
    mutable std::mutex mu_;
    std::map<std::string, TranscriptEntry> entries_;
};

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds base_delay{1000};
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// Retries transient ChatErrors with delays base, 2*base, 4*base, ...
class RetryingClient : public ChatClient {
  public:
    RetryingClient(std::shared_ptr<ChatClient> inner, RetryPolicy policy,
                   Sleeper sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })
        : inner_(std::move(inner)), policy_(policy), sleep_(std::move(sleep)) {
        require(policy.max_retries >= 0, "retry: max_retries must be non-negative");
    }

    std::string complete(const std::string& prompt) override {
        for (int attempt = 0;; ++attempt) {
            try {
                return inner_->complete(prompt);
            } catch (const ChatError& e) {
                if (!e.transient() || attempt >= policy_.max_retries) {
                    throw ChatError(std::string(e.what()) + " (after " + std::to_string(attempt + 1) + " attempt" +
                                        (attempt == 0 ? "" : "s") + ")",
                                    false);
                }
                sleep_(policy_.base_delay * (1LL << attempt));
            }
        }
    }

  private:
    std::shared_ptr<ChatClient> inner_;
    RetryPolicy policy_;
    Sleeper sleep_;
};

}  // namespace mu2::chat

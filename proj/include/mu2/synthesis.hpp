// SPDX-License-Identifier: Apache-2.0
//
// Five-stage reasoning synthesis over radiology reports (questions, answers,
// filtering, refinement, fusion) plus report rewriting and translation.
// Every stage persists one JSON record per line; reruns with `resume` reuse
// completed records and only redo missing or failed work.

#pragma once

#include "mu2/chat.hpp"
#include "mu2/jsonl.hpp"
#include "mu2/parallel.hpp"
#include "mu2/prompts.hpp"
#include "mu2/text.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <set>

namespace mu2::synth {

inline constexpr std::string_view kQuestionPattern = R"(.*?\d\. ?([^\n]*))";
/// The question pattern as printed alongside the template. The escaped caret
/// turns the negated class into the set {'^', '\n'}; kQuestionPattern is used.
inline constexpr std::string_view kQuestionPatternPrinted = R"(.*?\d\. ?([\^\n]*))";
inline constexpr std::string_view kThinkingPattern = R"(Thinking: ?([^\n]*))";
inline constexpr std::string_view kAnswerPattern = R"(Answer: ?([^\n]*))";

enum class Status { Generated, FilteredOut, Accepted, Refined };

inline std::string to_string(Status s) {
    switch (s) {
        case Status::Generated: return "generated";
        case Status::FilteredOut: return "filtered_out";
        case Status::Accepted: return "accepted";
        case Status::Refined: return "refined";
    }
    return "generated";
}

inline Status status_from_string(const std::string& s) {
    if (s == "generated") return Status::Generated;
    if (s == "filtered_out") return Status::FilteredOut;
    if (s == "accepted") return Status::Accepted;
    if (s == "refined") return Status::Refined;
    throw ValidationError("unknown record status '" + s + "'");
}

/// generated -> (filtered_out | accepted) -> refined, and staying put.
inline bool transition_allowed(Status from, Status to) {
    if (from == to) return true;
    switch (from) {
        case Status::Generated: return to == Status::FilteredOut || to == Status::Accepted;
        case Status::Accepted: return to == Status::Refined;
        default: return false;
    }
}

struct Report {
    std::string id;
    std::string text;
};

struct QARecord {
    std::string id;
    std::string report_id;
    std::size_t index = 0;
    std::string question;
    std::string thinking;
    std::string answer;
    Status status = Status::Generated;
    std::string rejection_reason;
    std::string raw_reply;
    std::string note;
    std::string error;
};

inline json to_json(const QARecord& r) {
    json j{{"id", r.id},         {"report_id", r.report_id}, {"index", r.index},
           {"question", r.question}, {"thinking", r.thinking}, {"answer", r.answer},
           {"status", to_string(r.status)}};
    if (!r.rejection_reason.empty()) j["rejection_reason"] = r.rejection_reason;
    if (!r.raw_reply.empty()) j["raw_reply"] = r.raw_reply;
    if (!r.note.empty()) j["note"] = r.note;
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

inline QARecord qa_from_json(const json& j) {
    try {
        QARecord r;
        r.id = j.at("id").get<std::string>();
        r.report_id = j.at("report_id").get<std::string>();
        r.index = j.at("index").get<std::size_t>();
        r.question = j.at("question").get<std::string>();
        r.thinking = j.value("thinking", std::string());
        r.answer = j.value("answer", std::string());
        r.status = status_from_string(j.at("status").get<std::string>());
        r.rejection_reason = j.value("rejection_reason", std::string());
        r.raw_reply = j.value("raw_reply", std::string());
        r.note = j.value("note", std::string());
        r.error = j.value("error", std::string());
        return r;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("qa record: ") + e.what());
    }
}

struct ReasoningTrace {
    std::string report_id;
    std::string thinking_before;
    std::string narrative;
    std::vector<std::string> sources;
};

// ---------------------------------------------------------------------------
// Extraction

inline const std::regex& question_regex() {
    static const std::regex re{std::string(kQuestionPattern)};
    return re;
}

/// Applies the question pattern to every line of the reply on its own.
inline std::vector<std::string> extract_questions(const std::string& reply) {
    std::vector<std::string> out;
    for (const auto& line : split_lines(reply)) {
        std::smatch m;
        if (!std::regex_search(line, m, question_regex())) continue;
        std::string q = trim(m[1].str());
        if (!q.empty()) out.push_back(std::move(q));
    }
    return out;
}

inline std::optional<std::string> first_capture(const std::string& text, std::string_view pattern) {
    const std::regex re{std::string(pattern)};
    std::smatch m;
    if (!std::regex_search(text, m, re)) return std::nullopt;
    return m[1].str();
}

struct AnswerExtraction {
    std::optional<std::string> thinking;
    std::optional<std::string> answer;
    bool complete() const { return thinking.has_value() && answer.has_value(); }
};

inline AnswerExtraction extract_answer(const std::string& reply) {
    return {first_capture(reply, kThinkingPattern), first_capture(reply, kAnswerPattern)};
}

// ---------------------------------------------------------------------------
// Stage operations

inline std::vector<std::string> gen_questions(const std::string& report, chat::ChatClient& client) {
    require(!trim(report).empty(), "gen_questions: report is empty");
    return extract_questions(client.complete(prompts::render(prompts::Stage::Questions, {{"report", report}})));
}

struct AnswerResult {
    std::string raw_reply;
    AnswerExtraction extraction;
};

inline AnswerResult gen_answer(const std::string& report, const std::string& question, chat::ChatClient& client) {
    require(!trim(question).empty(), "gen_answer: question is empty");
    std::string reply = client.complete(prompts::render(prompts::Stage::Answer, {{"report", report}, {"question", question}}));
    AnswerExtraction ex = extract_answer(reply);
    return {std::move(reply), std::move(ex)};
}

struct Verdict {
    bool accepted = false;
    std::string reason;
};

/// Strict verdict: "yes" or "no" after trimming and case folding.
inline Verdict parse_verdict(const std::string& reply) {
    const std::string v = lowercase(trim(reply));
    if (v == "yes") return {true, ""};
    if (v == "no") return {false, "rejected by filter"};
    return {false, "non-conforming verdict"};
}

inline Verdict filter_qa(const std::string& report, const std::string& question, const std::string& answer,
                         chat::ChatClient& client) {
    require(!trim(report).empty() && !trim(question).empty() && !trim(answer).empty(),
            "filter_qa: report, question and answer must be non-empty");
    return parse_verdict(client.complete(
        prompts::render(prompts::Stage::Filter, {{"report", report}, {"question", question}, {"answer", answer}})));
}

/// Refined thinking, or nullopt when the reply is blank.
inline std::optional<std::string> refine_thinking(const std::string& thinking, chat::ChatClient& client) {
    std::string reply = trim(client.complete(prompts::render(prompts::Stage::Refine, {{"report", thinking}})));
    if (reply.empty()) return std::nullopt;
    return reply;
}

/// "Q: ...\nThinking: ...\nAnswer: ..." blocks joined by blank lines.
inline std::string thinking_before(const std::vector<QARecord>& records) {
    std::string out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (i) out += "\n\n";
        out += "Q: " + records[i].question + "\nThinking: " + records[i].thinking + "\nAnswer: " + records[i].answer;
    }
    return out;
}

inline ReasoningTrace fuse_traces(const std::vector<QARecord>& records, chat::ChatClient& client) {
    require(!records.empty(), "fuse_traces: no refined records");
    ReasoningTrace t;
    t.report_id = records.front().report_id;
    for (const auto& r : records) {
        require(r.status == Status::Refined, "fuse_traces: record " + r.id + " is not refined");
        t.sources.push_back(r.id);
    }
    t.thinking_before = thinking_before(records);
    t.narrative = client.complete(prompts::render(prompts::Stage::Fuse, {{"thinking_before", t.thinking_before}}));
    return t;
}

inline std::string rewrite_report(const std::string& report, const std::string& style_examples,
                                  chat::ChatClient& client) {
    require(!trim(report).empty(), "rewrite_report: report is empty");
    return trim(client.complete(
        prompts::render(prompts::Stage::Rewrite, {{"SOME EXAMPLES OF DATASETS", style_examples}, {"", report}})));
}

inline std::string translate_report(const std::string& text, const std::string& source_lang,
                                    const std::string& target_lang, chat::ChatClient& client) {
    require(!trim(text).empty(), "translate_report: text is empty");
    require(!source_lang.empty() && !target_lang.empty(), "translate_report: languages must be named");
    return trim(client.complete(prompts::render(
        prompts::Stage::Translate,
        {{"source_lang", source_lang}, {"target_lang", target_lang}, {"source_input", text}})));
}

// ---------------------------------------------------------------------------
// Heuristic screening of generated reasoning

/// Returns a rejection reason, or nullopt to keep the record.
using Rule = std::function<std::optional<std::string>(const QARecord&)>;

struct Heuristics {
    double min_ascii_ratio = 0.95;
    std::size_t min_thinking_tokens = 20;
    std::vector<Rule> rules;
};

inline double ascii_ratio(std::string_view s) {
    if (s.empty()) return 1.0;
    std::size_t ascii = 0;
    for (unsigned char c : s) ascii += c < 0x80 ? 1 : 0;
    return static_cast<double>(ascii) / static_cast<double>(s.size());
}

inline std::optional<std::string> screen(const QARecord& r, const Heuristics& h) {
    if (ascii_ratio(r.thinking) < h.min_ascii_ratio) return std::string("non-english thinking");
    if (word_tokens(r.thinking).size() < h.min_thinking_tokens) return std::string("vacuous thinking");
    for (const auto& rule : h.rules)
        if (auto reason = rule(r)) return reason;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Persistent pipeline

enum class StageId { Questions, Answers, Filter, Refine, Fuse };

inline StageId stage_from_string(const std::string& s) {
    if (s == "questions") return StageId::Questions;
    if (s == "answers") return StageId::Answers;
    if (s == "filter") return StageId::Filter;
    if (s == "refine") return StageId::Refine;
    if (s == "fuse") return StageId::Fuse;
    throw ValidationError("unknown synthesis stage '" + s + "'");
}

struct PipelineOptions {
    std::string out_dir;
    bool resume = false;
    std::size_t max_inflight = 1;
    Heuristics heuristics;
};

struct Files {
    std::filesystem::path dir;
    std::string questions() const { return (dir / "questions.jsonl").string(); }
    std::string qa() const { return (dir / "qa.jsonl").string(); }
    std::string accepted() const { return (dir / "accepted.jsonl").string(); }
    std::string refined() const { return (dir / "refined.jsonl").string(); }
    std::string traces() const { return (dir / "traces.jsonl").string(); }
    std::string datapoints() const { return (dir / "datapoints.jsonl").string(); }
    std::string summary() const { return (dir / "summary.json").string(); }
};

inline std::vector<Report> read_reports(const std::string& path) {
    std::vector<Report> out;
    std::set<std::string> ids;
    for (const auto& j : read_jsonl(path)) {
        Report r;
        try {
            r.id = j.at("report_id").get<std::string>();
            r.text = j.at("report_text").get<std::string>();
        } catch (const json::exception& e) {
            throw ValidationError(path + ": " + e.what());
        }
        require(!r.id.empty(), path + ": empty report_id");
        require(ids.insert(r.id).second, path + ": duplicate report_id '" + r.id + "'");
        out.push_back(std::move(r));
    }
    return out;
}

namespace detail {

inline std::string record_id(const std::string& report_id, std::size_t index) {
    return report_id + "#" + std::to_string(index);
}

template <class T, class KeyFn>
std::map<std::string, T> index_by(const std::vector<T>& items, KeyFn key) {
    std::map<std::string, T> out;
    for (const auto& it : items) out.emplace(key(it), it);
    return out;
}

inline std::vector<QARecord> read_records(const std::string& path) {
    std::vector<QARecord> out;
    for (const auto& j : read_jsonl(path)) out.push_back(qa_from_json(j));
    return out;
}

inline std::vector<QARecord> read_records_if_exists(const std::string& path) {
    if (!std::filesystem::exists(path)) return {};
    return read_records(path);
}

inline void write_records(const std::string& path, const std::vector<QARecord>& records) {
    std::vector<json> rows;
    rows.reserve(records.size());
    for (const auto& r : records) rows.push_back(to_json(r));
    write_jsonl(path, rows);
}

inline std::vector<json> require_stage_input(const std::string& path, const char* producer) {
    if (!std::filesystem::exists(path)) {
        throw ValidationError("missing " + path + "; run the '" + std::string(producer) + "' stage first");
    }
    return read_jsonl(path);
}

inline std::map<std::string, std::string> report_texts(const std::vector<json>& question_rows) {
    std::map<std::string, std::string> out;
    for (const auto& q : question_rows) out[q.at("report_id").get<std::string>()] = q.at("report").get<std::string>();
    return out;
}

}  // namespace detail

/// Stage 1. One row per report: {report_id, report, status, questions, error?}
/// with status ok, extraction-miss or error.
inline void stage_questions(const std::vector<Report>& reports, chat::ChatClient& client, const PipelineOptions& opt) {
    const Files f{opt.out_dir};
    std::map<std::string, json> previous;
    if (opt.resume) {
        for (auto& j : read_jsonl_if_exists(f.questions())) previous[j.at("report_id").get<std::string>()] = j;
    }
    auto rows = parallel_map(reports, opt.max_inflight, [&](const Report& r) {
        const auto it = previous.find(r.id);
        if (it != previous.end() && it->second.at("report") == r.text && it->second.at("status") != "error") {
            return it->second;
        }
        json row{{"report_id", r.id}, {"report", r.text}};
        try {
            auto qs = gen_questions(r.text, client);
            row["status"] = qs.empty() ? "extraction-miss" : "ok";
            row["questions"] = qs;
        } catch (const RuntimeError& e) {
            row["status"] = "error";
            row["questions"] = json::array();
            row["error"] = std::string("questions/") + r.id + ": " + e.what();
        } catch (const ValidationError& e) {
            row["status"] = "error";
            row["questions"] = json::array();
            row["error"] = std::string("questions/") + r.id + ": " + e.what();
        }
        return row;
    });
    write_jsonl(f.questions(), rows);
}

/// Stage 2. Answers every extracted question; screening and extraction
/// misses move records to filtered_out, client failures leave them
/// generated with an error for a later resume.
inline void stage_answers(chat::ChatClient& client, const PipelineOptions& opt) {
    const Files f{opt.out_dir};
    const auto qrows = detail::require_stage_input(f.questions(), "questions");
    std::vector<QARecord> pending;
    for (const auto& q : qrows) {
        const auto rid = q.at("report_id").get<std::string>();
        const auto questions = q.at("questions").get<std::vector<std::string>>();
        for (std::size_t i = 0; i < questions.size(); ++i) {
            QARecord r;
            r.id = detail::record_id(rid, i + 1);
            r.report_id = rid;
            r.index = i + 1;
            r.question = questions[i];
            pending.push_back(std::move(r));
        }
    }
    const auto texts = detail::report_texts(qrows);
    const auto previous = opt.resume ? detail::index_by(detail::read_records_if_exists(f.qa()),
                                                        [](const QARecord& r) { return r.id; })
                                     : std::map<std::string, QARecord>{};
    auto out = parallel_map(pending, opt.max_inflight, [&](const QARecord& in) {
        const auto it = previous.find(in.id);
        if (it != previous.end() && it->second.question == in.question && it->second.error.empty()) return it->second;
        QARecord r = in;
        try {
            const AnswerResult a = gen_answer(texts.at(r.report_id), r.question, client);
            if (!a.extraction.complete()) {
                r.status = Status::FilteredOut;
                r.rejection_reason = "extraction-miss";
                r.raw_reply = a.raw_reply;
                return r;
            }
            r.thinking = trim(*a.extraction.thinking);
            r.answer = trim(*a.extraction.answer);
            if (auto reason = screen(r, opt.heuristics)) {
                r.status = Status::FilteredOut;
                r.rejection_reason = *reason;
            }
        } catch (const std::exception& e) {
            r.error = std::string("answers/") + r.report_id + ": " + e.what();
        }
        return r;
    });
    detail::write_records(f.qa(), out);
}

/// Stage 3. Every record of the answer stage, with filter verdicts applied.
inline void stage_filter(chat::ChatClient& client, const PipelineOptions& opt) {
    const Files f{opt.out_dir};
    const auto texts = detail::report_texts(detail::require_stage_input(f.questions(), "questions"));
    detail::require_stage_input(f.qa(), "answers");
    const auto input = detail::read_records(f.qa());
    const auto previous = opt.resume ? detail::index_by(detail::read_records_if_exists(f.accepted()),
                                                        [](const QARecord& r) { return r.id; })
                                     : std::map<std::string, QARecord>{};
    auto out = parallel_map(input, opt.max_inflight, [&](const QARecord& in) {
        if (in.status != Status::Generated || !in.error.empty()) return in;
        const auto it = previous.find(in.id);
        if (it != previous.end() && it->second.error.empty() && it->second.question == in.question &&
            it->second.thinking == in.thinking && it->second.answer == in.answer) {
            return it->second;
        }
        QARecord r = in;
        try {
            const Verdict v = filter_qa(texts.at(r.report_id), r.question, r.answer, client);
            r.status = v.accepted ? Status::Accepted : Status::FilteredOut;
            r.rejection_reason = v.reason;
        } catch (const std::exception& e) {
            r.error = std::string("filter/") + r.report_id + ": " + e.what();
        }
        return r;
    });
    detail::write_records(f.accepted(), out);
}

/// Stage 4. Accepted records get refined thinking; a blank reply keeps the
/// original thinking with note refinement-miss.
inline void stage_refine(chat::ChatClient& client, const PipelineOptions& opt) {
    const Files f{opt.out_dir};
    detail::require_stage_input(f.accepted(), "filter");
    const auto input = detail::read_records(f.accepted());
    const auto previous = opt.resume ? detail::index_by(detail::read_records_if_exists(f.refined()),
                                                        [](const QARecord& r) { return r.id; })
                                     : std::map<std::string, QARecord>{};
    auto out = parallel_map(input, opt.max_inflight, [&](const QARecord& in) {
        if (in.status != Status::Accepted || !in.error.empty()) return in;
        const auto it = previous.find(in.id);
        if (it != previous.end() && it->second.status == Status::Refined && it->second.question == in.question &&
            it->second.answer == in.answer) {
            return it->second;
        }
        QARecord r = in;
        try {
            if (auto refined = refine_thinking(r.thinking, client)) {
                r.thinking = *refined;
                r.status = Status::Refined;
            } else {
                r.note = "refinement-miss";
            }
        } catch (const std::exception& e) {
            r.error = std::string("refine/") + r.report_id + ": " + e.what();
        }
        return r;
    });
    detail::write_records(f.refined(), out);
}

/// Stage 5. One trace per report that has refined records, in report order.
inline void stage_fuse(chat::ChatClient& client, const PipelineOptions& opt) {
    const Files f{opt.out_dir};
    const auto qrows = detail::require_stage_input(f.questions(), "questions");
    detail::require_stage_input(f.refined(), "refine");
    const auto records = detail::read_records(f.refined());
    std::vector<std::pair<std::string, std::vector<QARecord>>> groups;
    for (const auto& q : qrows) {
        std::vector<QARecord> mine;
        const auto rid = q.at("report_id").get<std::string>();
        for (const auto& r : records)
            if (r.report_id == rid && r.status == Status::Refined) mine.push_back(r);
        if (!mine.empty()) groups.emplace_back(rid, std::move(mine));
    }
    std::map<std::string, json> previous;
    if (opt.resume) {
        for (auto& j : read_jsonl_if_exists(f.traces())) previous[j.at("report_id").get<std::string>()] = j;
    }
    auto rows = parallel_map(groups, opt.max_inflight, [&](const auto& g) {
        const auto it = previous.find(g.first);
        if (it != previous.end() && it->second.at("status") == "ok" &&
            it->second.at("thinking_before") == thinking_before(g.second)) {
            return it->second;
        }
        json row{{"report_id", g.first}};
        try {
            const ReasoningTrace t = fuse_traces(g.second, client);
            row["status"] = "ok";
            row["thinking_before"] = t.thinking_before;
            row["narrative"] = t.narrative;
            row["sources"] = t.sources;
        } catch (const std::exception& e) {
            row["status"] = "error";
            row["thinking_before"] = thinking_before(g.second);
            row["sources"] = json::array();
            row["error"] = std::string("fuse/") + g.first + ": " + e.what();
        }
        return row;
    });
    write_jsonl(f.traces(), rows);
}

/// Final records {report_id, report, qa, trace} for reports with a trace.
inline void write_datapoints(const PipelineOptions& opt) {
    const Files f{opt.out_dir};
    const auto qrows = read_jsonl_if_exists(f.questions());
    const auto traces = read_jsonl_if_exists(f.traces());
    const auto records = detail::read_records_if_exists(f.refined());
    std::vector<json> out;
    for (const auto& q : qrows) {
        const auto rid = q.at("report_id").get<std::string>();
        const json* trace = nullptr;
        for (const auto& t : traces)
            if (t.at("report_id") == rid && t.at("status") == "ok") trace = &t;
        if (!trace) continue;
        json qa = json::array();
        for (const auto& r : records) {
            if (r.report_id == rid && (r.status == Status::Accepted || r.status == Status::Refined)) {
                qa.push_back(json{{"question", r.question}, {"answer", r.answer}});
            }
        }
        out.push_back(json{{"report_id", rid}, {"report", q.at("report")}, {"qa", qa}, {"trace", trace->at("narrative")}});
    }
    write_jsonl(f.datapoints(), out);
}

struct Summary {
    std::size_t reports = 0;
    std::size_t questions = 0;
    std::size_t question_errors = 0;
    std::size_t extraction_misses = 0;
    std::size_t generated = 0;
    std::size_t pending = 0;
    std::size_t filtered_out = 0;
    std::size_t accepted = 0;
    std::size_t refined = 0;
    std::size_t refinement_misses = 0;
    std::size_t record_errors = 0;
    std::size_t traces = 0;
    std::size_t reports_without_trace = 0;
    std::size_t datapoints = 0;
};

inline json to_json(const Summary& s) {
    return json{{"reports", s.reports},
                {"questions", s.questions},
                {"question_errors", s.question_errors},
                {"extraction_misses", s.extraction_misses},
                {"generated", s.generated},
                {"pending", s.pending},
                {"filtered_out", s.filtered_out},
                {"accepted", s.accepted},
                {"refined", s.refined},
                {"refinement_misses", s.refinement_misses},
                {"record_errors", s.record_errors},
                {"traces", s.traces},
                {"reports_without_trace", s.reports_without_trace},
                {"datapoints", s.datapoints}};
}

/// Counts over whatever stage files exist. `generated` counts answered
/// questions, `accepted` those the filter passed; `pending`, `filtered_out`
/// and `refined` come from the furthest stage file present.
inline Summary summarize(const std::string& out_dir) {
    const Files f{out_dir};
    Summary s;
    const auto qrows = read_jsonl_if_exists(f.questions());
    s.reports = qrows.size();
    for (const auto& q : qrows) {
        const auto st = q.at("status").get<std::string>();
        if (st == "error") ++s.question_errors;
        if (st == "extraction-miss") ++s.extraction_misses;
        s.questions += q.at("questions").size();
    }
    std::vector<QARecord> latest;
    for (const auto& p : {f.refined(), f.accepted(), f.qa()}) {
        if (std::filesystem::exists(p)) {
            latest = detail::read_records(p);
            break;
        }
    }
    s.generated = detail::read_records_if_exists(f.qa()).size();
    for (const auto& r : detail::read_records_if_exists(f.accepted()))
        if (r.status == Status::Accepted) ++s.accepted;
    for (const auto& r : latest) {
        switch (r.status) {
            case Status::Generated: ++s.pending; break;
            case Status::FilteredOut: ++s.filtered_out; break;
            case Status::Accepted: break;
            case Status::Refined: ++s.refined; break;
        }
        if (r.rejection_reason == "extraction-miss") ++s.extraction_misses;
        if (r.note == "refinement-miss") ++s.refinement_misses;
        if (!r.error.empty()) ++s.record_errors;
    }
    for (const auto& t : read_jsonl_if_exists(f.traces()))
        if (t.at("status") == "ok") ++s.traces;
    s.reports_without_trace = s.reports - std::min(s.reports, s.traces);
    s.datapoints = read_jsonl_if_exists(f.datapoints()).size();
    return s;
}

/// Runs `stages` in order (all five by default), then writes datapoints and
/// the summary. Missing stage inputs raise ValidationError; per-record
/// failures are persisted on the record.
inline Summary run_pipeline(const std::vector<Report>& reports, chat::ChatClient& client, const PipelineOptions& opt,
                            std::vector<StageId> stages = {StageId::Questions, StageId::Answers, StageId::Filter,
                                                           StageId::Refine, StageId::Fuse}) {
    require(!opt.out_dir.empty(), "synth: output directory is required");
    std::filesystem::create_directories(opt.out_dir);
    for (StageId s : stages) {
        switch (s) {
            case StageId::Questions: stage_questions(reports, client, opt); break;
            case StageId::Answers: stage_answers(client, opt); break;
            case StageId::Filter: stage_filter(client, opt); break;
            case StageId::Refine: stage_refine(client, opt); break;
            case StageId::Fuse: stage_fuse(client, opt); break;
        }
    }
    write_datapoints(opt);
    const Summary s = summarize(opt.out_dir);
    write_file_atomic(Files{opt.out_dir}.summary(), to_json(s).dump(2) + "\n");
    return s;
}

/// Violations of the status order across the persisted stage files, and
/// trace sources that are not refined. Empty when consistent.
inline std::vector<std::string> check_status_transitions(const std::string& out_dir) {
    const Files f{out_dir};
    std::vector<std::string> problems;
    std::map<std::string, Status> last;
    for (const auto& path : {f.qa(), f.accepted(), f.refined()}) {
        for (const auto& r : detail::read_records_if_exists(path)) {
            const auto it = last.find(r.id);
            if (it != last.end() && !transition_allowed(it->second, r.status)) {
                problems.push_back(r.id + ": " + to_string(it->second) + " -> " + to_string(r.status) + " in " + path);
            }
            last[r.id] = r.status;
        }
    }
    for (const auto& t : read_jsonl_if_exists(f.traces())) {
        for (const auto& src : t.value("sources", json::array())) {
            const auto it = last.find(src.get<std::string>());
            if (it == last.end() || it->second != Status::Refined) {
                problems.push_back("trace " + t.at("report_id").get<std::string>() + ": source " +
                                   src.get<std::string>() + " is not refined");
            }
        }
    }
    return problems;
}

}  // namespace mu2::synth

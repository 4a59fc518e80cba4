// SPDX-License-Identifier: Apache-2.0

#include "mu2/synthesis.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <atomic>

using namespace mu2;
using namespace mu2::synth;

namespace {

const std::filesystem::path kSource{MU2_SOURCE_DIR};

/// Returns a fixed reply and keeps the last prompt.
class CannedClient : public chat::ChatClient {
  public:
    explicit CannedClient(std::string reply) : reply_(std::move(reply)) {}
    std::string complete(const std::string& prompt) override {
        last = prompt;
        return reply_;
    }
    std::string last;

  private:
    std::string reply_;
};

class CountingClient : public chat::ChatClient {
  public:
    explicit CountingClient(std::shared_ptr<chat::ChatClient> inner) : inner_(std::move(inner)) {}
    std::string complete(const std::string& prompt) override {
        ++calls;
        return inner_->complete(prompt);
    }
    std::atomic<std::size_t> calls{0};

  private:
    std::shared_ptr<chat::ChatClient> inner_;
};

/// Fails every request whose prompt contains `needle`.
class FailingOnClient : public chat::ChatClient {
  public:
    explicit FailingOnClient(std::string needle) : needle_(std::move(needle)) {}
    std::string complete(const std::string& prompt) override {
        if (prompt.find(needle_) != std::string::npos) throw chat::ChatError("endpoint unavailable", false);
        return mock_.complete(prompt);
    }

  private:
    std::string needle_;
    chat::MockClient mock_;
};

QARecord refined(const std::string& rid, std::size_t i, const std::string& q, const std::string& t,
                 const std::string& a) {
    QARecord r;
    r.id = rid + "#" + std::to_string(i);
    r.report_id = rid;
    r.index = i;
    r.question = q;
    r.thinking = t;
    r.answer = a;
    r.status = Status::Refined;
    return r;
}

const std::vector<std::string> kStageFiles{"questions.jsonl", "qa.jsonl",         "accepted.jsonl", "refined.jsonl",
                                           "traces.jsonl",    "datapoints.jsonl", "summary.json"};

std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& f : kStageFiles) out[f] = testing_support::slurp(dir / f);
    return out;
}

}  // namespace

TEST(Patterns, LiteralsAreByteExact) {
    EXPECT_EQ(kQuestionPattern, std::string_view(".*?\\d\\. ?([^\\n]*)"));
    EXPECT_EQ(kThinkingPattern, std::string_view("Thinking: ?([^\\n]*)"));
    EXPECT_EQ(kAnswerPattern, std::string_view("Answer: ?([^\\n]*)"));
    EXPECT_EQ(kQuestionPatternPrinted, std::string_view(".*?\\d\\. ?([\\^\\n]*)"));
}

TEST(Patterns, PrintedQuestionClassWouldStopAtFirstLetter) {
    // The escaped caret class matches only '^', '\' and 'n'.
    const std::regex printed{std::string(kQuestionPatternPrinted)};
    const std::string line = "1. What is shown?";
    std::smatch m;
    ASSERT_TRUE(std::regex_search(line, m, printed));
    EXPECT_EQ(m[1].str(), "");
    EXPECT_EQ(extract_questions("1. What is shown?"), std::vector<std::string>{"What is shown?"});
}

TEST(Questions, NumberedLinesAreExtracted) {
    EXPECT_EQ(extract_questions("1. What is the liver density?\n2. Any pleural effusion?"),
              (std::vector<std::string>{"What is the liver density?", "Any pleural effusion?"}));
}

TEST(Questions, NoNumberedLinesGivesNothing) {
    EXPECT_TRUE(extract_questions("I cannot help with that.\nPlease send a report.").empty());
}

TEST(Questions, PreambleAndNotesAreSkipped) {
    EXPECT_EQ(extract_questions("Sure!\n 1. Q-one\nnote\n2. Q-two"), (std::vector<std::string>{"Q-one", "Q-two"}));
}

TEST(Questions, RendersReportIntoPrompt) {
    CannedClient client("1. A?\n2. B?");
    EXPECT_EQ(gen_questions("Liver normal.", client), (std::vector<std::string>{"A?", "B?"}));
    EXPECT_EQ(client.last, prompts::render(prompts::Stage::Questions, {{"report", "Liver normal."}}));
    EXPECT_THROW(gen_questions("  ", client), ValidationError);
}

TEST(Answers, ThinkingAndAnswerExtracted) {
    CannedClient client("Thinking: step A; step B\n\nAnswer: No effusion.");
    const auto a = gen_answer("report", "Effusion?", client);
    ASSERT_TRUE(a.extraction.complete());
    EXPECT_EQ(*a.extraction.thinking, "step A; step B");
    EXPECT_EQ(*a.extraction.answer, "No effusion.");
}

TEST(Answers, MissingAnswerIsAMiss) {
    const auto ex = extract_answer("Thinking: looked everywhere");
    EXPECT_TRUE(ex.thinking.has_value());
    EXPECT_FALSE(ex.answer.has_value());
    EXPECT_FALSE(ex.complete());
}

TEST(Answers, FirstLabelWins) {
    const auto ex = extract_answer("Preface Thinking:first\nThinking: second\nAnswer:yes\nAnswer: no");
    EXPECT_EQ(*ex.thinking, "first");
    EXPECT_EQ(*ex.answer, "yes");
}

TEST(Filter, StrictVerdicts) {
    EXPECT_TRUE(parse_verdict("Yes").accepted);
    EXPECT_TRUE(parse_verdict("  yes\n").accepted);
    const auto no = parse_verdict("No");
    EXPECT_FALSE(no.accepted);
    EXPECT_EQ(no.reason, "rejected by filter");
    const auto odd = parse_verdict("Yes, because the answer is supported.");
    EXPECT_FALSE(odd.accepted);
    EXPECT_EQ(odd.reason, "non-conforming verdict");
}

TEST(Filter, RejectsEmptyInputs) {
    CannedClient client("Yes");
    EXPECT_TRUE(filter_qa("r", "q", "a", client).accepted);
    EXPECT_THROW(filter_qa("r", "q", " ", client), ValidationError);
}

TEST(Refine, MockRemovesReportReferences) {
    chat::MockClient mock;
    const auto out = refine_thinking("The report states that the liver is normal; the report is brief.", mock);
    ASSERT_TRUE(out.has_value());
    EXPECT_EQ(lowercase(*out).find("report"), std::string::npos);
}

TEST(Refine, EchoKeepsImageGroundedText) {
    chat::EchoClient echo;
    const std::string t = "The image shows a small right pleural effusion.";
    EXPECT_EQ(refine_thinking(t, echo), t);
}

TEST(Refine, BlankReplyIsAMiss) {
    CannedClient client("   \n");
    EXPECT_FALSE(refine_thinking("anything", client).has_value());
}

TEST(Fuse, SingleRecord) {
    chat::EchoClient echo;
    const auto t = fuse_traces({refined("r", 1, "Q1?", "T1", "A1")}, echo);
    EXPECT_EQ(t.thinking_before, "Q: Q1?\nThinking: T1\nAnswer: A1");
    EXPECT_EQ(t.sources, std::vector<std::string>{"r#1"});
}

TEST(Fuse, BlocksKeepInputOrderAndEchoReturnsThem) {
    const std::vector<QARecord> recs{refined("r", 1, "Q1?", "T1", "A1"), refined("r", 2, "Q2?", "T2", "A2"),
                                     refined("r", 3, "Q3?", "T3", "A3")};
    std::string want;
    for (int i = 1; i <= 3; ++i) {
        if (i > 1) want += "\n\n";
        const auto s = std::to_string(i);
        want += "Q: Q" + s + "?\nThinking: T" + s + "\nAnswer: A" + s;
    }
    CannedClient canned("narrative");
    const auto t = fuse_traces(recs, canned);
    EXPECT_EQ(t.thinking_before, want);
    EXPECT_EQ(t.narrative, "narrative");
    chat::EchoClient echo;
    EXPECT_EQ(fuse_traces(recs, echo).narrative, thinking_before(recs));
}

TEST(Fuse, RequiresRefinedRecords) {
    chat::EchoClient echo;
    EXPECT_THROW(fuse_traces({}, echo), ValidationError);
    auto r = refined("r", 1, "q", "t", "a");
    r.status = Status::Accepted;
    EXPECT_THROW(fuse_traces({r}, echo), ValidationError);
}

TEST(Rewrite, EchoReturnsOriginal) {
    chat::EchoClient echo;
    EXPECT_EQ(rewrite_report("Liver normal. No effusion.", "Example one.", echo), "Liver normal. No effusion.");
    EXPECT_THROW(rewrite_report("  ", "x", echo), ValidationError);
}

TEST(Translate, SameLanguageIsIdentity) {
    chat::MockClient mock;
    EXPECT_EQ(translate_report("No effusion.", "English", "English", mock), "No effusion.");
    EXPECT_EQ(translate_report("No effusion.", "English", "German", mock), "[German] No effusion.");
    EXPECT_THROW(translate_report("", "English", "German", mock), ValidationError);
}

TEST(Replay, GoldenRewriteAndTranslate) {
    const auto dir = kSource / "tests" / "golden" / "replay";
    auto replay = chat::ReplayClient::from_file((dir / "transcript.jsonl").string());
    const std::string report = trim(read_text_file((kSource / "data" / "sample_report.txt").string()));
    const std::string examples = trim(read_text_file((kSource / "data" / "style_examples.txt").string()));
    EXPECT_EQ(rewrite_report(report, examples, replay) + "\n", testing_support::slurp(dir / "rewrite.txt"));
    EXPECT_EQ(translate_report(report, "English", "German", replay) + "\n",
              testing_support::slurp(dir / "translate.txt"));
}

TEST(Templates, MatchGoldenFiles) {
    const std::vector<std::pair<prompts::Stage, std::string>> stages{
        {prompts::Stage::Rewrite, "rewrite"}, {prompts::Stage::Questions, "questions"},
        {prompts::Stage::Answer, "answer"},   {prompts::Stage::Filter, "filter"},
        {prompts::Stage::Refine, "refine"},   {prompts::Stage::Fuse, "fuse"},
        {prompts::Stage::Translate, "translate"}};
    for (const auto& [stage, name] : stages) {
        const auto& tpl = prompts::get(stage);
        EXPECT_EQ(tpl.id, name);
        EXPECT_EQ(std::string(tpl.text), testing_support::slurp(kSource / "tests" / "golden" / "prompts" / (name + ".txt")))
            << name;
    }
}

TEST(Templates, RenderIsStrict) {
    EXPECT_THROW(prompts::render(prompts::Stage::Questions, {}), ValidationError);
    EXPECT_THROW(prompts::render(prompts::Stage::Questions, {{"report", "r"}, {"extra", "x"}}), ValidationError);
    const auto p = prompts::render(prompts::Stage::Translate,
                                   {{"source_lang", "{target_lang}"}, {"target_lang", "German"}, {"source_input", "t"}});
    EXPECT_NE(p.find("This is an {target_lang} to German"), std::string::npos);
}

TEST(Templates, IdentifyInvertsRender) {
    const prompts::Bindings b{{"report", "Liver normal."}, {"question", "Liver?"}, {"answer", "Normal."}};
    const auto found = prompts::identify(prompts::render(prompts::Stage::Filter, b));
    ASSERT_TRUE(found.has_value());
    EXPECT_EQ(found->first, prompts::Stage::Filter);
    EXPECT_EQ(found->second, b);
    EXPECT_FALSE(prompts::identify("hello").has_value());
}

TEST(Retry, BackoffDoublesFromBase) {
    class Flaky : public chat::ChatClient {
      public:
        int failures = 3;
        std::string complete(const std::string&) override {
            if (failures-- > 0) throw chat::ChatError("timeout");
            return "ok";
        }
    };
    std::vector<long long> delays;
    auto flaky = std::make_shared<Flaky>();
    chat::RetryingClient client(flaky, {}, [&](std::chrono::milliseconds d) { delays.push_back(d.count()); });
    EXPECT_EQ(client.complete("p"), "ok");
    EXPECT_EQ(delays, (std::vector<long long>{1000, 2000, 4000}));

    flaky->failures = 4;
    delays.clear();
    EXPECT_THROW(client.complete("p"), chat::ChatError);
    EXPECT_EQ(delays.size(), 3u);
}

TEST(Retry, PermanentErrorsAreNotRetried) {
    class Broken : public chat::ChatClient {
      public:
        std::string complete(const std::string&) override { throw chat::ChatError("401", false); }
    };
    int sleeps = 0;
    chat::RetryingClient client(std::make_shared<Broken>(), {}, [&](std::chrono::milliseconds) { ++sleeps; });
    EXPECT_THROW(client.complete("p"), chat::ChatError);
    EXPECT_EQ(sleeps, 0);
}

TEST(Heuristics, AsciiAndLength) {
    QARecord r;
    r.thinking = "word ";
    EXPECT_EQ(screen(r, {}), std::optional<std::string>("vacuous thinking"));
    r.thinking = "\xC3\xA9\xC3\xA9\xC3\xA9 ok";
    EXPECT_EQ(screen(r, {}), std::optional<std::string>("non-english thinking"));
    r.thinking.clear();
    for (int i = 0; i < 20; ++i) r.thinking += "token ";
    EXPECT_FALSE(screen(r, {}).has_value());
}

TEST(Status, TransitionOrder) {
    EXPECT_TRUE(transition_allowed(Status::Generated, Status::Accepted));
    EXPECT_TRUE(transition_allowed(Status::Generated, Status::FilteredOut));
    EXPECT_TRUE(transition_allowed(Status::Accepted, Status::Refined));
    EXPECT_FALSE(transition_allowed(Status::FilteredOut, Status::Refined));
    EXPECT_FALSE(transition_allowed(Status::Refined, Status::Accepted));
    EXPECT_FALSE(transition_allowed(Status::Generated, Status::Refined));
    for (auto s : {Status::Generated, Status::FilteredOut, Status::Accepted, Status::Refined})
        EXPECT_EQ(status_from_string(to_string(s)), s);
}

TEST(Pipeline, GoldenRunIsByteExact) {
    const auto dir = testing_support::scratch_dir("synth_golden");
    chat::MockClient mock;
    PipelineOptions opt;
    opt.out_dir = dir.string();
    opt.max_inflight = 3;
    run_pipeline(read_reports((kSource / "data" / "sample_reports.jsonl").string()), mock, opt);
    const auto golden = kSource / "tests" / "golden" / "synth";
    for (const auto& f : kStageFiles) EXPECT_EQ(testing_support::slurp(dir / f), testing_support::slurp(golden / f)) << f;
    EXPECT_TRUE(check_status_transitions(dir.string()).empty());
}

TEST(Pipeline, ResumeChangesNothingAndCallsNobody) {
    const auto dir = testing_support::scratch_dir("synth_resume");
    const auto reports = read_reports((kSource / "data" / "sample_reports.jsonl").string());
    auto mock = std::make_shared<chat::MockClient>();
    CountingClient first(mock);
    PipelineOptions opt;
    opt.out_dir = dir.string();
    run_pipeline(reports, first, opt);
    EXPECT_GT(first.calls.load(), 0u);
    const auto before = snapshot(dir);

    CountingClient second(mock);
    opt.resume = true;
    run_pipeline(reports, second, opt);
    EXPECT_EQ(second.calls.load(), 0u);
    EXPECT_EQ(snapshot(dir), before);
}

TEST(Pipeline, TwoRunsAreIdentical) {
    const auto a = testing_support::scratch_dir("synth_a");
    const auto b = testing_support::scratch_dir("synth_b");
    const auto reports = read_reports((kSource / "data" / "sample_reports.jsonl").string());
    chat::MockClient mock;
    PipelineOptions opt;
    opt.out_dir = a.string();
    opt.max_inflight = 1;
    run_pipeline(reports, mock, opt);
    opt.out_dir = b.string();
    opt.max_inflight = 4;
    run_pipeline(reports, mock, opt);
    EXPECT_EQ(snapshot(a), snapshot(b));
}

TEST(Pipeline, StatusInvariantsOverPersistedRecords) {
    const auto dir = testing_support::scratch_dir("synth_status");
    chat::MockClient mock;
    PipelineOptions opt;
    opt.out_dir = dir.string();
    const auto s = run_pipeline(read_reports((kSource / "data" / "sample_reports.jsonl").string()), mock, opt);
    EXPECT_TRUE(check_status_transitions(dir.string()).empty());
    const Files f{dir};
    for (const auto& j : read_jsonl(f.refined())) {
        const auto r = qa_from_json(j);
        EXPECT_TRUE(r.status == Status::Refined || r.status == Status::FilteredOut) << r.id;
        if (r.status == Status::Refined) {
            EXPECT_TRUE(r.rejection_reason.empty()) << r.id;
        }
    }
    EXPECT_GT(s.refined, 0u);
    EXPECT_GT(s.filtered_out, 0u);
    EXPECT_EQ(s.traces, 2u);
    EXPECT_EQ(s.datapoints, 2u);
}

TEST(Pipeline, TamperedFileIsReported) {
    const auto dir = testing_support::scratch_dir("synth_tamper");
    chat::MockClient mock;
    PipelineOptions opt;
    opt.out_dir = dir.string();
    run_pipeline(read_reports((kSource / "data" / "sample_reports.jsonl").string()), mock, opt);
    const Files f{dir};
    auto rows = read_jsonl(f.refined());
    for (auto& j : rows)
        if (j.at("status") == "filtered_out") j["status"] = "refined";
    write_jsonl(f.refined(), rows);
    EXPECT_FALSE(check_status_transitions(dir.string()).empty());
}

TEST(Pipeline, FilterDecisionsReplayFromTranscript) {
    const auto dir = testing_support::scratch_dir("synth_replay");
    const auto reports = read_reports((kSource / "data" / "sample_reports.jsonl").string());
    chat::RecordingClient recorder(std::make_shared<chat::MockClient>());
    PipelineOptions opt;
    opt.out_dir = dir.string();
    run_pipeline(reports, recorder, opt);
    chat::ReplayClient replay(recorder.entries());
    std::map<std::string, std::string> texts;
    for (const auto& r : reports) texts[r.id] = r.text;
    std::size_t accepted = 0;
    for (const auto& j : read_jsonl(Files{dir}.accepted())) {
        const auto r = qa_from_json(j);
        if (r.status != Status::Accepted) continue;
        ++accepted;
        EXPECT_TRUE(filter_qa(texts.at(r.report_id), r.question, r.answer, replay).accepted) << r.id;
    }
    EXPECT_GT(accepted, 0u);
}

TEST(Pipeline, ClientFailureIsIsolatedAndResumed) {
    const auto dir = testing_support::scratch_dir("synth_failure");
    const auto reports = read_reports((kSource / "data" / "sample_reports.jsonl").string());
    FailingOnClient flaky("hypodense");
    PipelineOptions opt;
    opt.out_dir = dir.string();
    const auto s = run_pipeline(reports, flaky, opt);
    EXPECT_EQ(s.question_errors, 1u);
    EXPECT_EQ(s.traces, 1u);
    EXPECT_EQ(s.reports_without_trace, 1u);

    chat::MockClient mock;
    opt.resume = true;
    run_pipeline(reports, mock, opt);
    const auto golden = kSource / "tests" / "golden" / "synth";
    for (const auto& f : kStageFiles) EXPECT_EQ(testing_support::slurp(dir / f), testing_support::slurp(golden / f)) << f;
}

TEST(Pipeline, StageNeedsItsInput) {
    const auto dir = testing_support::scratch_dir("synth_missing");
    chat::MockClient mock;
    PipelineOptions opt;
    opt.out_dir = dir.string();
    EXPECT_THROW(run_pipeline({}, mock, opt, {StageId::Filter}), ValidationError);
    EXPECT_THROW(stage_from_string("polish"), ValidationError);
}

TEST(Pipeline, DuplicateReportIdsRejected) {
    const auto dir = testing_support::scratch_dir("synth_dup");
    write_jsonl((dir / "in.jsonl").string(), {json{{"report_id", "a"}, {"report_text", "x."}},
                                              json{{"report_id", "a"}, {"report_text", "y."}}});
    EXPECT_THROW(read_reports((dir / "in.jsonl").string()), ValidationError);
}

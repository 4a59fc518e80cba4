// SPDX-License-Identifier: Apache-2.0
//
// Prompt templates for the report synthesis stages and a strict renderer.
// Template bodies are kept byte for byte, including trailing spaces and the
// line-continuation backslash in the translation prompt.

#pragma once

#include "mu2/tensor.hpp"

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace mu2::prompts {

enum class Stage { Rewrite, Questions, Answer, Filter, Refine, Fuse, Translate, Custom };

inline constexpr std::string_view kRewriteTemplate = R"PROMPT(You are an expert radiologists. And your task is to paraphrase a given radiology report. 
You need to:
1. Take the following 3 examples for style of writing.
2. You MUST NOT change any meaning of the original report, nor add or remove any information, not event correction.
3. Give out the paraphrased report directly, without any other content.
4. In English only.

Here are some examples of CT reports:
{SOME EXAMPLES OF DATASETS}

The original report:
```
{}
```)PROMPT";

inline constexpr std::string_view kQuestionsTemplate = R"PROMPT(Here is a medical radiology report for a CT image.
```
{report}
```

Imagine you are assessing a student who is looking at a CT image, you are going to ask a list of questions. Don't mention the report, just list out as the form of questions, and questions only, in sequenced list.)PROMPT";

inline constexpr std::string_view kAnswerTemplate = R"PROMPT(You are a radiology medicine expert.
Your task is to answer the following radiology medicine question, using the patient's medical record report provided below.
When writing your thought process, imagine you are directly reviewing the patient's radiology images (do not mention the report), and describe your logical reasoning step by step as an expert would.
Then, provide your final, correct answer to the question.
Your response will be used to guide and improve the training of a multimodal large language model for radiology medicine images.
And here is the radiology report that you can see:
```
{report}
```

Now we have a question:
```
{question}
```

Please consider and answer the question in the following format:

Thinking: <thought process>

Answer: <answer to the question>)PROMPT";

inline constexpr std::string_view kFilterTemplate = R"PROMPT(You are an expert in radiology. Now you are reviewing a some questions and answers made by another expert.
You need to determine if the question is proper for a radiology exam, and the answer is correct.

If the question is proper for a radiology exam, and the answer is correct, return "Yes".
If the question is not proper for a radiology exam, or the answer is incorrect, return "No".
Do not return anything else.

The Report:
```
{report}
```
Question: {question}
Answer: {answer})PROMPT";

inline constexpr std::string_view kRefineTemplate = R"PROMPT(Help me edit the narrative below:
- If the narrative refers to a report, you change it as if you see it from the radiology image
- Edit only the places mentioned above, leave all other text the same 
- Do not add/remove/change any other information
- Directly output the result text

**The narrative:**
```
{report}
```)PROMPT";

inline constexpr std::string_view kFuseTemplate = R"PROMPT(ou are a radiology medicine expert. Now you are looking at a radiology image.
Here is your self talk when viewing the image:
```
{thinking_before}
```

Please paraphrase the self talk text and output it as **thinking progress**. Remember:
- Do not add/remove/alter any information
- Mind the coherence and fluence of output
- Deductions are prefered
- Directly output the result text

Your output:)PROMPT";

inline constexpr std::string_view kTranslateTemplate = R"PROMPT(This is an {source_lang} to {target_lang} translation, please provide the {target_lang} translation for this text. \
Do not provide any explanations or text apart from the translation.
{source_lang}: {source_input})PROMPT";

struct PromptTemplate {
    Stage stage;
    std::string_view id;
    std::string_view text;
    std::vector<std::string> placeholders;
};

/// Names of every `{name}` placeholder in order of first appearance. `{}` is
/// the placeholder with the empty name.
inline std::vector<std::string> placeholders_of(std::string_view text) {
    std::vector<std::string> names;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] != '{') continue;
        const std::size_t close = text.find_first_of("{}\n", i + 1);
        if (close == std::string_view::npos || text[close] != '}') continue;
        std::string name(text.substr(i + 1, close - i - 1));
        if (seen.insert(name).second) names.push_back(name);
        i = close;
    }
    return names;
}

inline const PromptTemplate& get(Stage stage) {
    static const std::vector<PromptTemplate> all = [] {
        std::vector<PromptTemplate> v;
        auto add = [&](Stage s, std::string_view id, std::string_view text) {
            v.push_back({s, id, text, placeholders_of(text)});
        };
        add(Stage::Rewrite, "rewrite", kRewriteTemplate);
        add(Stage::Questions, "questions", kQuestionsTemplate);
        add(Stage::Answer, "answer", kAnswerTemplate);
        add(Stage::Filter, "filter", kFilterTemplate);
        add(Stage::Refine, "refine", kRefineTemplate);
        add(Stage::Fuse, "fuse", kFuseTemplate);
        add(Stage::Translate, "translate", kTranslateTemplate);
        return v;
    }();
    return all.at(static_cast<std::size_t>(stage));
}

using Bindings = std::map<std::string, std::string>;

/// Substitutes every placeholder in one pass; substituted text is not
/// rescanned. Throws when a placeholder has no binding or a binding names no
/// placeholder.
inline std::string render(const PromptTemplate& tpl, const Bindings& values) {
    for (const auto& name : tpl.placeholders) {
        if (!values.count(name)) {
            throw ValidationError("prompt '" + std::string(tpl.id) + "': unbound placeholder {" + name + "}");
        }
    }
    for (const auto& [name, _] : values) {
        bool known = false;
        for (const auto& p : tpl.placeholders) known = known || p == name;
        if (!known) throw ValidationError("prompt '" + std::string(tpl.id) + "': unknown placeholder {" + name + "}");
    }
    const std::string_view text = tpl.text;
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '{') {
            const std::size_t close = text.find_first_of("{}\n", i + 1);
            if (close != std::string_view::npos && text[close] == '}') {
                out += values.at(std::string(text.substr(i + 1, close - i - 1)));
                i = close;
                continue;
            }
        }
        out.push_back(text[i]);
    }
    return out;
}

inline std::string render(Stage stage, const Bindings& values) { return render(get(stage), values); }

namespace detail {

struct Piece {
    bool placeholder;
    std::string text;
};

inline std::vector<Piece> split_template(std::string_view text) {
    std::vector<Piece> pieces;
    std::string lit;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '{') {
            const std::size_t close = text.find_first_of("{}\n", i + 1);
            if (close != std::string_view::npos && text[close] == '}') {
                pieces.push_back({false, lit});
                lit.clear();
                pieces.push_back({true, std::string(text.substr(i + 1, close - i - 1))});
                i = close;
                continue;
            }
        }
        lit.push_back(text[i]);
    }
    pieces.push_back({false, lit});
    return pieces;
}

}  // namespace detail

/// Inverse of render: recovers the bindings from a rendered prompt, or
/// nullopt when `prompt` was not produced from `tpl`. Each value ends at the
/// first occurrence of the literal text that follows it.
inline std::optional<Bindings> parse(const PromptTemplate& tpl, std::string_view prompt) {
    const auto pieces = detail::split_template(tpl.text);
    Bindings out;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        const auto& pc = pieces[i];
        if (!pc.placeholder) {
            if (prompt.substr(pos, pc.text.size()) != pc.text) return std::nullopt;
            pos += pc.text.size();
            continue;
        }
        const std::string& next = pieces[i + 1].text;
        std::size_t end;
        if (i + 2 == pieces.size()) {
            if (prompt.size() < pos + next.size() || prompt.substr(prompt.size() - next.size()) != next) return std::nullopt;
            end = prompt.size() - next.size();
        } else {
            end = prompt.find(next, pos);
        }
        if (end == std::string_view::npos || end < pos) return std::nullopt;
        std::string value(prompt.substr(pos, end - pos));
        const auto [it, inserted] = out.emplace(pc.text, value);
        if (!inserted && it->second != value) return std::nullopt;
        pos = end;
    }
    if (pos != prompt.size()) return std::nullopt;
    return out;
}

/// The stage whose template produced `prompt`, if any.
inline std::optional<std::pair<Stage, Bindings>> identify(std::string_view prompt) {
    for (int s = 0; s <= static_cast<int>(Stage::Translate); ++s) {
        const auto stage = static_cast<Stage>(s);
        if (auto b = parse(get(stage), prompt)) return std::make_pair(stage, *b);
    }
    return std::nullopt;
}

}  // namespace mu2::prompts

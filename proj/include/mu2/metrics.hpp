// SPDX-License-Identifier: Apache-2.0
//
// Single-reference lexical overlap metrics on lowercased word tokens.

#pragma once

#include "mu2/text.hpp"

#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace mu2::metrics {

struct Rouge1 {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct MetricReport {
    double bleu = 0.0;
    double rouge1_precision = 0.0;
    double rouge1_recall = 0.0;
    double rouge1_f1 = 0.0;
};

using WarningSink = std::function<void(const std::string&)>;

/// Receives degenerate-input warnings; writes to stderr unless replaced.
inline WarningSink& warning_sink() {
    static WarningSink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return sink;
}

namespace detail {

using Gram = std::vector<std::string>;

inline std::map<Gram, std::size_t> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
    std::map<Gram, std::size_t> counts;
    if (toks.size() < n) return counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[Gram(toks.begin() + i, toks.begin() + i + n)];
    return counts;
}

/// Sum over candidate n-grams of min(count_cand, count_ref).
inline std::size_t clipped_matches(const std::map<Gram, std::size_t>& cand, const std::map<Gram, std::size_t>& ref) {
    std::size_t m = 0;
    for (const auto& [g, c] : cand) {
        const auto it = ref.find(g);
        if (it != ref.end()) m += std::min(c, it->second);
    }
    return m;
}

inline bool degenerate(const std::vector<std::string>& cand, const std::vector<std::string>& ref, const char* metric) {
    if (!cand.empty() && !ref.empty()) return false;
    warning_sink()(std::string(metric) + ": " + (cand.empty() ? "candidate" : "reference") +
                   " has no tokens; scoring 0");
    return true;
}

}  // namespace detail

inline Rouge1 rouge1_tokens(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    if (detail::degenerate(cand, ref, "rouge1")) return {};
    const double overlap =
        static_cast<double>(detail::clipped_matches(detail::ngram_counts(cand, 1), detail::ngram_counts(ref, 1)));
    Rouge1 r;
    r.precision = overlap / static_cast<double>(cand.size());
    r.recall = overlap / static_cast<double>(ref.size());
    r.f1 = (r.precision + r.recall) > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

inline Rouge1 rouge1(const std::string& candidate, const std::string& reference) {
    return rouge1_tokens(word_tokens(candidate), word_tokens(reference));
}

/// Clipped n-gram precisions combined geometrically. An order with no match
/// uses (m + 1) / (c + 1) for n >= 2, which makes orders longer than the
/// candidate contribute 1. A zero unigram precision gives 0.
inline double bleu_tokens(const std::vector<std::string>& cand, const std::vector<std::string>& ref,
                          std::size_t max_n = 4) {
    if (detail::degenerate(cand, ref, "bleu")) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        const auto cc = detail::ngram_counts(cand, n);
        const std::size_t total = cand.size() >= n ? cand.size() - n + 1 : 0;
        const std::size_t m = detail::clipped_matches(cc, detail::ngram_counts(ref, n));
        double p;
        if (m > 0) {
            p = static_cast<double>(m) / static_cast<double>(total);
        } else if (n == 1) {
            return 0.0;
        } else {
            p = 1.0 / static_cast<double>(total + 1);
        }
        log_sum += std::log(p);
    }
    const double c = static_cast<double>(cand.size());
    const double r = static_cast<double>(ref.size());
    const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
    return bp * std::exp(log_sum / static_cast<double>(max_n));
}

inline double bleu(const std::string& candidate, const std::string& reference, std::size_t max_n = 4) {
    return bleu_tokens(word_tokens(candidate), word_tokens(reference), max_n);
}

inline MetricReport evaluate(const std::string& candidate, const std::string& reference) {
    const auto c = word_tokens(candidate);
    const auto r = word_tokens(reference);
    const Rouge1 ro = rouge1_tokens(c, r);
    return {bleu_tokens(c, r), ro.precision, ro.recall, ro.f1};
}

/// Field-wise arithmetic mean.
inline MetricReport mean_report(const std::vector<MetricReport>& reports) {
    MetricReport m;
    if (reports.empty()) return m;
    for (const auto& r : reports) {
        m.bleu += r.bleu;
        m.rouge1_precision += r.rouge1_precision;
        m.rouge1_recall += r.rouge1_recall;
        m.rouge1_f1 += r.rouge1_f1;
    }
    const double n = static_cast<double>(reports.size());
    m.bleu /= n;
    m.rouge1_precision /= n;
    m.rouge1_recall /= n;
    m.rouge1_f1 /= n;
    return m;
}

}  // namespace mu2::metrics

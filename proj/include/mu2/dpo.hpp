// SPDX-License-Identifier: Apache-2.0
//
// Direct preference optimization over scored report pairs.
//
//   z    = beta * [(log pi(y_w|x) - log ref(y_w|x)) - (log pi(y_l|x) - log ref(y_l|x))]
//   loss = -log sigmoid(z) = softplus(-z)
//
// Sequence log-probabilities come from a provider; a character bigram model
// is bundled so the objective can be optimized end to end without an LLM.

#pragma once

#include "mu2/jsonl.hpp"
#include "mu2/tensor.hpp"

#include <array>
#include <numeric>
#include <optional>

namespace mu2::dpo {

inline constexpr double kDefaultBeta = 0.3;

struct SequenceScore {
    double logprob_policy = 0.0;
    double logprob_reference = 0.0;
};

struct PreferencePair {
    std::string volume;
    std::string question;
    std::string chosen;
    std::string rejected;
    double score_chosen = 0.0;
    double score_rejected = 0.0;
};

inline void validate_beta(double beta) {
    if (!(beta > 0.1 && beta < 0.5)) {
        throw ValidationError("dpo: beta must lie in the open interval (0.1, 0.5), got " + std::to_string(beta));
    }
}

inline double margin(const SequenceScore& chosen, const SequenceScore& rejected, double beta) {
    return beta * ((chosen.logprob_policy - chosen.logprob_reference) -
                   (rejected.logprob_policy - rejected.logprob_reference));
}

inline double dpo_loss(const SequenceScore& chosen, const SequenceScore& rejected, double beta = kDefaultBeta) {
    validate_beta(beta);
    for (double v : {chosen.logprob_policy, chosen.logprob_reference, rejected.logprob_policy, rejected.logprob_reference}) {
        require(std::isfinite(v), "dpo: log-probabilities must be finite");
    }
    return softplus(-margin(chosen, rejected, beta));
}

/// dL/d(log-probability) for each of the four inputs.
struct LossGrad {
    double policy_chosen = 0.0;
    double reference_chosen = 0.0;
    double policy_rejected = 0.0;
    double reference_rejected = 0.0;
};

inline LossGrad dpo_loss_grad(const SequenceScore& chosen, const SequenceScore& rejected, double beta = kDefaultBeta) {
    validate_beta(beta);
    const double dz = -sigmoid(-margin(chosen, rejected, beta));  // d softplus(-z) / dz
    return {beta * dz, -beta * dz, -beta * dz, beta * dz};
}

using ScoredPair = std::pair<SequenceScore, SequenceScore>;

/// Mean per-pair loss, summed in index order.
inline double batch_dpo_loss(const std::vector<ScoredPair>& pairs, double beta = kDefaultBeta) {
    require(!pairs.empty(), "dpo: batch is empty");
    double sum = 0.0;
    for (const auto& [w, l] : pairs) sum += dpo_loss(w, l, beta);
    return sum / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Log-probability providers

class LogProbProvider {
  public:
    virtual ~LogProbProvider() = default;
    /// Natural-log probability of `response` given `prompt`.
    virtual double logprob(const std::string& prompt, const std::string& response) const = 0;
};

inline SequenceScore score_response(const LogProbProvider& policy, const LogProbProvider& reference,
                                    const std::string& prompt, const std::string& response) {
    return {policy.logprob(prompt, response), reference.logprob(prompt, response)};
}

/// Byte-level bigram language model. Context 256 is the start symbol, next
/// symbol 256 is end-of-sequence. The first context of a response is the last
/// byte of the prompt, or the start symbol for an empty prompt.
class BigramLM : public LogProbProvider {
  public:
    static constexpr std::size_t kSymbols = 257;
    static constexpr std::size_t kBoundary = 256;

    BigramLM() : logits_(Mat<double>::Zero(kSymbols, kSymbols)) {}

    /// Add-alpha smoothed maximum likelihood fit: softmax of each logit row
    /// reproduces the smoothed conditional distribution.
    static BigramLM fit(const std::vector<std::pair<std::string, std::string>>& corpus, double alpha = 1.0) {
        require(alpha > 0.0, "bigram: smoothing alpha must be positive");
        Mat<double> counts = Mat<double>::Constant(kSymbols, kSymbols, alpha);
        for (const auto& [prompt, text] : corpus) {
            for_each_transition(prompt, text, [&](std::size_t c, std::size_t n) { counts(c, n) += 1.0; });
        }
        BigramLM lm;
        for (Eigen::Index r = 0; r < counts.rows(); ++r) {
            const double total = counts.row(r).sum();
            lm.logits_.row(r) = (counts.row(r).array() / total).log();
        }
        return lm;
    }

    double logprob(const std::string& prompt, const std::string& response) const override {
        double lp = 0.0;
        for_each_transition(prompt, response, [&](std::size_t c, std::size_t n) {
            const auto row = logits_.row(static_cast<Eigen::Index>(c));
            const double mx = row.maxCoeff();
            const double lse = mx + std::log((row.array() - mx).exp().sum());
            lp += logits_(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n)) - lse;
        });
        return lp;
    }

    /// grad += scale * d logprob(prompt, response) / d logits
    void accumulate_grad(const std::string& prompt, const std::string& response, double scale, Mat<double>& grad) const {
        for_each_transition(prompt, response, [&](std::size_t c, std::size_t n) {
            const auto r = static_cast<Eigen::Index>(c);
            Mat<double> p = logits_.row(r);
            softmax_rows(p);
            grad.row(r) -= scale * p;
            grad(r, static_cast<Eigen::Index>(n)) += scale;
        });
    }

    Mat<double>& logits() { return logits_; }
    const Mat<double>& logits() const { return logits_; }

    template <class F>
    static void for_each_transition(const std::string& prompt, const std::string& response, F&& f) {
        std::size_t ctx = prompt.empty() ? kBoundary : static_cast<unsigned char>(prompt.back());
        for (unsigned char ch : response) {
            f(ctx, static_cast<std::size_t>(ch));
            ctx = ch;
        }
        f(ctx, kBoundary);
    }

  private:
    Mat<double> logits_;
};

/// Prompt text conditioning both policy and reference.
inline std::string pair_prompt(const PreferencePair& p) { return p.question; }

inline std::vector<ScoredPair> score_pairs(const std::vector<PreferencePair>& pairs, const LogProbProvider& policy,
                                           const LogProbProvider& reference) {
    std::vector<ScoredPair> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        const std::string prompt = pair_prompt(p);
        out.emplace_back(score_response(policy, reference, prompt, p.chosen),
                         score_response(policy, reference, prompt, p.rejected));
    }
    return out;
}

/// Gradient-descent steps on the policy bigram with the reference frozen.
/// Returns the batch loss before every step and after the last one.
inline std::vector<double> train_policy(BigramLM& policy, const BigramLM& reference,
                                        const std::vector<PreferencePair>& pairs, double beta, double learning_rate,
                                        std::size_t steps) {
    validate_beta(beta);
    require(!pairs.empty(), "dpo: training set is empty");
    require(learning_rate > 0.0, "dpo: learning rate must be positive");
    std::vector<double> history;
    for (std::size_t step = 0; step <= steps; ++step) {
        const auto scored = score_pairs(pairs, policy, reference);
        history.push_back(batch_dpo_loss(scored, beta));
        if (step == steps) break;
        Mat<double> grad = Mat<double>::Zero(policy.logits().rows(), policy.logits().cols());
        const double inv_n = 1.0 / static_cast<double>(pairs.size());
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const LossGrad g = dpo_loss_grad(scored[i].first, scored[i].second, beta);
            const std::string prompt = pair_prompt(pairs[i]);
            policy.accumulate_grad(prompt, pairs[i].chosen, g.policy_chosen * inv_n, grad);
            policy.accumulate_grad(prompt, pairs[i].rejected, g.policy_rejected * inv_n, grad);
        }
        policy.logits() -= learning_rate * grad;
    }
    return history;
}

// ---------------------------------------------------------------------------
// Preference dataset records

inline json to_json(const PreferencePair& p) {
    return json{{"volume", p.volume},   {"question", p.question},         {"chosen", p.chosen},
                {"rejected", p.rejected}, {"score_chosen", p.score_chosen}, {"score_rejected", p.score_rejected}};
}

inline PreferencePair pair_from_json(const json& j) {
    PreferencePair p;
    try {
        p.volume = j.value("volume", std::string());
        p.question = j.at("question").get<std::string>();
        p.chosen = j.at("chosen").get<std::string>();
        p.rejected = j.at("rejected").get<std::string>();
        p.score_chosen = j.at("score_chosen").get<double>();
        p.score_rejected = j.at("score_rejected").get<double>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("preference record: ") + e.what());
    }
    require(p.score_chosen >= p.score_rejected, "preference record: score_chosen < score_rejected");
    require(p.chosen != p.rejected, "preference record: chosen and rejected are identical");
    return p;
}

/// Precomputed log-probabilities carried on a record, when all four are present.
inline std::optional<ScoredPair> precomputed_scores(const json& j) {
    static constexpr std::array<const char*, 4> keys{"logp_policy_chosen", "logp_reference_chosen",
                                                     "logp_policy_rejected", "logp_reference_rejected"};
    for (const char* k : keys)
        if (!j.contains(k)) return std::nullopt;
    return ScoredPair{{j.at(keys[0]).get<double>(), j.at(keys[1]).get<double>()},
                      {j.at(keys[2]).get<double>(), j.at(keys[3]).get<double>()}};
}

}  // namespace mu2::dpo

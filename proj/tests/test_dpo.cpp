// SPDX-License-Identifier: Apache-2.0

#include "mu2/dpo.hpp"
#include "mu2/grad_oracle.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mu2;
using namespace mu2::dpo;

namespace {

ScoredPair random_pair(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> lp(-40.0, -0.5);
    return {{lp(rng), lp(rng)}, {lp(rng), lp(rng)}};
}

}  // namespace

TEST(DpoLoss, EqualPoliciesGiveLnTwo) {
    EXPECT_NEAR(dpo_loss({-3.0, -3.0}, {-7.5, -7.5}, 0.3), 0.693147180559945309, 1e-9);
}

TEST(DpoLoss, KnownMarginValue) {
    // chosen log-ratio +1, rejected log-ratio -1
    EXPECT_NEAR(dpo_loss({-1.0, -2.0}, {-3.0, -2.0}, 0.3), 0.43748795048588562645, 1e-9);
}

TEST(DpoLoss, LargeMarginsStayFiniteAndVanish) {
    double prev = dpo_loss({0.0, 0.0}, {0.0, 0.0});
    for (double m = 1.0; m <= 1e3; m *= 10.0) {
        const double l = dpo_loss({0.0, -m}, {0.0, 0.0});
        EXPECT_LT(l, prev);
        EXPECT_GE(l, 0.0);
        prev = l;
    }
    EXPECT_LT(prev, 1e-100);
    EXPECT_EQ(dpo_loss({0.0, -1e6}, {0.0, 0.0}), 0.0);
    EXPECT_NEAR(dpo_loss({-1e6, 0.0}, {0.0, 0.0}), 0.3e6, 1e-6);
}

TEST(DpoLoss, MonotoneInPolicyLogProbs) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> step(1e-3, 1.0);
    for (int i = 0; i < 100; ++i) {
        const auto [w, l] = random_pair(rng);
        const double base = dpo_loss(w, l);
        const double d = step(rng);
        EXPECT_LT(dpo_loss({w.logprob_policy + d, w.logprob_reference}, l), base);
        EXPECT_GT(dpo_loss(w, {l.logprob_policy + d, l.logprob_reference}), base);
        const auto g = dpo_loss_grad(w, l);
        EXPECT_LT(g.policy_chosen, 0.0);
        EXPECT_GT(g.policy_rejected, 0.0);
    }
}

TEST(DpoLoss, ReferenceShiftInvariance) {
    // Dyadic values keep every difference exact.
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> q(-4096, 0);
    for (int i = 0; i < 100; ++i) {
        const SequenceScore w{q(rng) / 64.0, q(rng) / 64.0};
        const SequenceScore l{q(rng) / 64.0, q(rng) / 64.0};
        const double c = q(rng) / 8.0;
        EXPECT_EQ(dpo_loss(w, l), dpo_loss({w.logprob_policy + c, w.logprob_reference + c},
                                           {l.logprob_policy + c, l.logprob_reference + c}));
    }
}

TEST(DpoLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const auto [w, l] = random_pair(rng);
        const grad::ScalarFn f = [](const grad::Vector& x) { return dpo_loss({x[0], x[1]}, {x[2], x[3]}, 0.25); };
        const auto num = grad::central_difference(f, {w.logprob_policy, w.logprob_reference, l.logprob_policy,
                                                      l.logprob_reference});
        const auto g = dpo_loss_grad(w, l, 0.25);
        const double ana[4] = {g.policy_chosen, g.reference_chosen, g.policy_rejected, g.reference_rejected};
        for (int k = 0; k < 4; ++k) EXPECT_LE(grad::relative_error(ana[k], num[k]), 1e-6) << k;
    }
}

TEST(DpoLoss, BetaOutsideOpenIntervalRejected) {
    for (double b : {0.1, 0.5, 0.0, -0.2, 0.7}) EXPECT_THROW(dpo_loss({0, 0}, {0, 0}, b), ValidationError) << b;
    EXPECT_NO_THROW(dpo_loss({0, 0}, {0, 0}, 0.11));
    EXPECT_NO_THROW(dpo_loss({0, 0}, {0, 0}, 0.49));
}

TEST(DpoLoss, NonFiniteLogProbRejected) {
    EXPECT_THROW(dpo_loss({std::nan(""), 0}, {0, 0}), ValidationError);
}

TEST(BatchLoss, IdenticalPairsEqualSingleLoss) {
    const ScoredPair p{{-2.0, -2.5}, {-4.0, -3.0}};
    EXPECT_DOUBLE_EQ(batch_dpo_loss({p, p, p}), dpo_loss(p.first, p.second));
}

TEST(BatchLoss, TwoPairsAverage) {
    const ScoredPair a{{-2.0, -2.5}, {-4.0, -3.0}};
    const ScoredPair b{{-1.0, -1.0}, {-1.0, -1.0}};
    EXPECT_DOUBLE_EQ(batch_dpo_loss({a, b}), (dpo_loss(a.first, a.second) + dpo_loss(b.first, b.second)) / 2.0);
}

TEST(BatchLoss, MatchesNaiveSummation) {
    std::mt19937_64 rng(4);
    std::vector<ScoredPair> pairs;
    for (int i = 0; i < 100; ++i) pairs.push_back(random_pair(rng));
    long double sum = 0.0L;
    for (const auto& [w, l] : pairs) {
        const long double z = 0.3L * ((static_cast<long double>(w.logprob_policy) - w.logprob_reference) -
                                      (static_cast<long double>(l.logprob_policy) - l.logprob_reference));
        sum += std::log1p(std::exp(-z));
    }
    EXPECT_NEAR(batch_dpo_loss(pairs), static_cast<double>(sum / 100.0L), 1e-12);
}

TEST(BatchLoss, EmptyBatchRejected) { EXPECT_THROW(batch_dpo_loss({}), ValidationError); }

TEST(Bigram, LogProbIsNormalized) {
    const BigramLM lm = BigramLM::fit({{"q", "ab"}, {"q", "ba"}}, 0.5);
    // Sum over every one-byte response and the empty response exceeds neither 1.
    double total = std::exp(lm.logprob("q", ""));
    for (int c = 0; c < 256; ++c) total += std::exp(lm.logprob("q", std::string(1, static_cast<char>(c))));
    EXPECT_LT(total, 1.0);
    EXPECT_GT(total, 0.0);
    EXPECT_LT(lm.logprob("q", "ab"), 0.0);
}

TEST(Bigram, GradientMatchesFiniteDifferencesOnUsedRows) {
    BigramLM lm = BigramLM::fit({{"x", "abc"}}, 1.0);
    const std::string prompt = "x", response = "abca";
    Mat<double> g = Mat<double>::Zero(BigramLM::kSymbols, BigramLM::kSymbols);
    lm.accumulate_grad(prompt, response, 1.0, g);
    // Rows visited: 'x', 'a', 'b', 'c'; spot-check a band of columns in each.
    for (int row : {int('x'), int('a'), int('b'), int('c')}) {
        for (int col : {0, int('a'), int('b'), int('c'), 200, 256}) {
            double& cell = lm.logits()(row, col);
            const double orig = cell;
            const grad::ScalarFn f = [&](const grad::Vector& x) {
                cell = x[0];
                const double v = lm.logprob(prompt, response);
                cell = orig;
                return v;
            };
            const double num = grad::central_difference(f, {orig})[0];
            EXPECT_LE(grad::relative_error(g(row, col), num), 1e-6) << row << "," << col;
        }
    }
    EXPECT_EQ(g.row('z').cwiseAbs().maxCoeff(), 0.0);
}

TEST(Training, PolicyLossDecreases) {
    std::vector<PreferencePair> pairs{
        {"v1", "Is there an effusion?", "small left pleural effusion", "no abnormality", 0.8, 0.2},
        {"v2", "Any nodules?", "a 4 mm nodule in the right upper lobe", "lungs are clear", 0.7, 0.3},
    };
    std::vector<std::pair<std::string, std::string>> corpus;
    for (const auto& p : pairs) {
        corpus.emplace_back(p.question, p.chosen);
        corpus.emplace_back(p.question, p.rejected);
    }
    const BigramLM reference = BigramLM::fit(corpus);
    BigramLM policy = reference;
    const auto history = train_policy(policy, reference, pairs, 0.3, 0.5, 30);
    ASSERT_EQ(history.size(), 31u);
    EXPECT_NEAR(history.front(), std::log(2.0), 1e-12);
    EXPECT_LT(history.back(), history.front() - 0.05);
    for (std::size_t i = 1; i < history.size(); ++i) EXPECT_LE(history[i], history[i - 1] + 1e-12);
}

TEST(Records, JsonRoundTripAndValidation) {
    const PreferencePair p{"v", "q", "a", "b", 0.9, 0.1};
    const PreferencePair back = pair_from_json(to_json(p));
    EXPECT_EQ(back.chosen, "a");
    EXPECT_EQ(back.score_rejected, 0.1);
    json bad = to_json(p);
    bad["score_chosen"] = 0.0;
    EXPECT_THROW(pair_from_json(bad), ValidationError);
    bad = to_json(p);
    bad["rejected"] = "a";
    EXPECT_THROW(pair_from_json(bad), ValidationError);
}

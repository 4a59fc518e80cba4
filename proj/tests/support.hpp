// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations used as test oracles. They are written from the
// definitions with plain loops and share no code with the library kernels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace oracle {

using Grid = std::vector<std::vector<double>>;  // rows x cols

inline Grid zeros(std::size_t r, std::size_t c) { return Grid(r, std::vector<double>(c, 0.0)); }

/// Copies any matrix type exposing rows(), cols() and operator()(i, j).
template <class M>
Grid to_grid(const M& m) {
    Grid g = zeros(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < g[i].size(); ++j) g[i][j] = static_cast<double>(m(i, j));
    return g;
}

template <class M>
std::vector<double> first_row(const M& m) {
    return to_grid(m).at(0);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Grid add(const Grid& a, const Grid& b) {
    Grid out = a;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] += b[i][j];
    return out;
}

inline Grid matmul(const Grid& a, const Grid& b) {
    Grid out = zeros(a.size(), b.empty() ? 0 : b[0].size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
}

inline void softmax_row(std::vector<double>& row) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : row) v /= sum;
}

/// x W + b for plain arrays.
inline Grid affine(const Grid& x, const Grid& w, const std::vector<double>* b) {
    Grid out = matmul(x, w);
    if (b)
        for (auto& row : out)
            for (std::size_t j = 0; j < row.size(); ++j) row[j] += (*b)[j];
    return out;
}

/// Single-group multi-head attention with an optional additive bias that
/// depends on (head, i - j).
template <class Bias>
Grid attention(const Grid& xq, const Grid& xkv, const Grid& wq, const std::vector<double>* bq, const Grid& wk,
               const Grid& wv, const std::vector<double>* bv, const Grid& wo, const std::vector<double>* bo,
               std::size_t heads, Bias bias) {
    const Grid q = affine(xq, wq, bq);
    const Grid k = affine(xkv, wk, nullptr);
    const Grid v = affine(xkv, wv, bv);
    const std::size_t e = q[0].size();
    const std::size_t d = e / heads;
    Grid ctx = zeros(xq.size(), e);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < xq.size(); ++i) {
            std::vector<double> s(xkv.size());
            for (std::size_t j = 0; j < xkv.size(); ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) dot += q[i][h * d + c] * k[j][h * d + c];
                s[j] = dot / std::sqrt(static_cast<double>(d)) + bias(h, static_cast<long>(i) - static_cast<long>(j));
            }
            softmax_row(s);
            for (std::size_t j = 0; j < xkv.size(); ++j)
                for (std::size_t c = 0; c < d; ++c) ctx[i][h * d + c] += s[j] * v[j][h * d + c];
        }
    }
    return affine(ctx, wo, bo);
}

/// Two-layer GELU perceptron.
inline Grid mlp(const Grid& x, const Grid& w1, const std::vector<double>& b1, const Grid& w2,
                const std::vector<double>* b2) {
    Grid h = affine(x, w1, &b1);
    for (auto& row : h)
        for (double& v : row) v = gelu(v);
    return affine(h, w2, b2);
}

/// Trilinear sample of a D x H x W array at fractional coordinates with edge
/// clamping; coordinates are in voxel-centre units.
inline double trilinear(const std::vector<double>& vol, std::size_t D, std::size_t H, std::size_t W, double z,
                        double y, double x) {
    auto clampd = [](double v, double hi) { return std::min(std::max(v, 0.0), hi); };
    z = clampd(z, static_cast<double>(D - 1));
    y = clampd(y, static_cast<double>(H - 1));
    x = clampd(x, static_cast<double>(W - 1));
    const std::size_t z0 = static_cast<std::size_t>(std::floor(z)), y0 = static_cast<std::size_t>(std::floor(y)),
                      x0 = static_cast<std::size_t>(std::floor(x));
    const std::size_t z1 = std::min(z0 + 1, D - 1), y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
    const double fz = z - z0, fy = y - y0, fx = x - x0;
    auto at = [&](std::size_t a, std::size_t b, std::size_t c) { return vol[(a * H + b) * W + c]; };
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
                acc += w * at(dz ? z1 : z0, dy ? y1 : y0, dx ? x1 : x0);
            }
    return acc;
}

// Lexical metrics from first principles over pre-split tokens.

inline std::size_t count_of(const std::vector<std::string>& gram, const std::vector<std::string>& toks) {
    std::size_t c = 0;
    const std::size_t n = gram.size();
    for (std::size_t i = 0; i + n <= toks.size(); ++i)
        if (std::equal(gram.begin(), gram.end(), toks.begin() + static_cast<long>(i))) ++c;
    return c;
}

/// Clipped matches counted by scanning every candidate n-gram position and
/// consuming reference occurrences.
inline std::size_t clipped(const std::vector<std::string>& cand, const std::vector<std::string>& ref, std::size_t n) {
    std::map<std::vector<std::string>, std::size_t> used;
    std::size_t m = 0;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
        std::vector<std::string> g(cand.begin() + static_cast<long>(i), cand.begin() + static_cast<long>(i + n));
        if (used[g] < count_of(g, ref)) {
            ++used[g];
            ++m;
        }
    }
    return m;
}

inline std::vector<double> rouge1(const std::vector<std::string>& c, const std::vector<std::string>& r) {
    if (c.empty() || r.empty()) return {0, 0, 0};
    const double m = static_cast<double>(clipped(c, r, 1));
    const double p = m / c.size(), rc = m / r.size();
    return {p, rc, p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0};
}

inline double bleu(const std::vector<std::string>& c, const std::vector<std::string>& r) {
    if (c.empty() || r.empty()) return 0.0;
    double prod = 1.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const std::size_t total = c.size() >= n ? c.size() - n + 1 : 0;
        const std::size_t m = clipped(c, r, n);
        if (n == 1 && m == 0) return 0.0;
        prod *= m > 0 ? static_cast<double>(m) / total : 1.0 / (total + 1.0);
    }
    const double bp = c.size() < r.size() ? std::exp(1.0 - static_cast<double>(r.size()) / c.size()) : 1.0;
    return bp * std::pow(prod, 0.25);
}

inline std::vector<std::string> random_tokens(std::mt19937_64& rng, std::size_t max_len, std::size_t vocab) {
    std::uniform_int_distribution<std::size_t> len(1, max_len), word(0, vocab - 1);
    std::vector<std::string> out(len(rng));
    for (auto& w : out) w = "w" + std::to_string(word(rng));
    return out;
}

inline std::string join(const std::vector<std::string>& toks) {
    std::string s;
    for (std::size_t i = 0; i < toks.size(); ++i) s += (i ? " " : "") + toks[i];
    return s;
}

}  // namespace oracle

namespace testing_support {

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

/// Fresh empty directory under the system temporary directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("mu2_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing_support

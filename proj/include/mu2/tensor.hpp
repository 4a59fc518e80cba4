// SPDX-License-Identifier: Apache-2.0
//
// Dense array aliases, error types and small numeric kernels shared by every
// module of the tokenizer.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mu2 {

/// Row-major dynamic matrix; rows are tokens, columns are channels.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row vector.
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Precondition or configuration violated by the caller.
class ValidationError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Failure while executing an otherwise valid request (I/O, numerics, remote).
class RuntimeError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

template <typename T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

/// Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] initialization.
template <typename T>
void init_uniform(Mat<T>& m, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

template <typename T>
void init_uniform(RowVec<T>& v, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(dist(rng));
}

/// In-place max-subtracted softmax over each row.
template <typename T>
void softmax_rows(Mat<T>& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        auto row = s.row(i);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
    }
}

/// Backward of a row softmax: given probabilities P and dL/dP, returns dL/dScores.
template <typename T>
Mat<T> softmax_rows_backward(const Mat<T>& p, const Mat<T>& dp) {
    Mat<T> ds(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const T dot = p.row(i).dot(dp.row(i));
        ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
    }
    return ds;
}

/// Softmax of a plain vector.
template <typename T>
std::vector<T> softmax(const std::vector<T>& x) {
    std::vector<T> out(x.size());
    if (x.empty()) return out;
    T mx = x[0];
    for (T v : x) mx = std::max(mx, v);
    T sum = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        sum += out[i];
    }
    for (T& v : out) v /= sum;
    return out;
}

// Exact (erf) GELU.
template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
    return cdf + x * pdf;
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace mu2

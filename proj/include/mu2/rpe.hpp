// SPDX-License-Identifier: Apache-2.0
//
// Relative positional bias: one learned scalar per head and clipped offset,
// added to attention scores.

#pragma once

#include "mu2/tensor.hpp"

#include <algorithm>

namespace mu2 {

template <typename T>
struct RelBiasTable {
    std::size_t max_distance = 0;
    Mat<T> values;  // heads x (2 * max_distance + 1); column c holds offset c - max_distance

    RelBiasTable() = default;
    RelBiasTable(std::size_t heads, std::size_t max_dist)
        : max_distance(max_dist), values(Mat<T>::Zero(static_cast<Eigen::Index>(heads),
                                                      static_cast<Eigen::Index>(2 * max_dist + 1))) {}

    std::size_t heads() const { return static_cast<std::size_t>(values.rows()); }

    /// Column holding the bias for offset i - j; total on all integer offsets.
    Eigen::Index column(long long offset) const {
        const auto d = static_cast<long long>(max_distance);
        return static_cast<Eigen::Index>(std::clamp(offset, -d, d) + d);
    }

    T at(std::size_t head, long long offset) const {
        return values(static_cast<Eigen::Index>(head), column(offset));
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".table", self.values);
    }
};

/// B[i, j] = table[head][clip(i - j, -D, D)]; Toeplitz by construction.
template <typename T>
Mat<T> rpe_bias_matrix(std::size_t n, const RelBiasTable<T>& table, std::size_t head) {
    require(n >= 1, "rpe_bias_matrix: n must be >= 1");
    require(head < table.heads(), "rpe_bias_matrix: head index out of range");
    const auto size = static_cast<Eigen::Index>(n);
    Mat<T> b(size, size);
    for (Eigen::Index i = 0; i < size; ++i) {
        for (Eigen::Index j = 0; j < size; ++j) {
            b(i, j) = table.at(head, static_cast<long long>(i) - static_cast<long long>(j));
        }
    }
    return b;
}

/// Scatter-adds dL/dB for one head back onto the table entries it was read from.
template <typename T>
void rpe_bias_accumulate(const Mat<T>& dbias, std::size_t head, RelBiasTable<T>& grad) {
    const auto h = static_cast<Eigen::Index>(head);
    for (Eigen::Index i = 0; i < dbias.rows(); ++i) {
        for (Eigen::Index j = 0; j < dbias.cols(); ++j) {
            grad.values(h, grad.column(static_cast<long long>(i) - static_cast<long long>(j))) += dbias(i, j);
        }
    }
}

}  // namespace mu2

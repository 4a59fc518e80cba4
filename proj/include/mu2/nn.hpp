// SPDX-License-Identifier: Apache-2.0
//
// Layers with hand-written backward passes: affine maps, the GELU
// feed-forward block, grouped multi-head attention with an optional relative
// bias, and the head-averaged aggregation attention whose value path is the
// identity.
//
// Parameter structs expose `static visit(self, prefix, f)` which calls
// f(name, Mat<T>&) for every tensor; `for_each_param` dispatches on it.

#pragma once

#include "mu2/rpe.hpp"
#include "mu2/tensor.hpp"

#include <string>
#include <type_traits>
#include <vector>

namespace mu2 {

template <class P, class F>
void for_each_param(P& params, const std::string& prefix, F&& f) {
    std::remove_const_t<P>::visit(params, prefix, f);
}

/// Same structure as `params`, every tensor zeroed.
template <class P>
P zeros_like(const P& params) {
    P out = params;
    for_each_param(out, "", [](const std::string&, auto& m) { m.setZero(); });
    return out;
}

template <class P>
std::size_t param_count(const P& params) {
    std::size_t n = 0;
    for_each_param(params, "", [&](const std::string&, const auto& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

template <typename T>
struct Linear {
    Mat<T> weight;  // in x out
    Mat<T> bias;    // 1 x out

    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool with_bias = true)
        : weight(Mat<T>::Zero(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out))),
          bias(Mat<T>::Zero(with_bias ? 1 : 0, static_cast<Eigen::Index>(out))) {}

    bool has_bias() const { return bias.rows() == 1; }

    void init(std::mt19937_64& rng) {
        const auto fan_in = static_cast<std::size_t>(weight.rows());
        init_uniform(weight, fan_in, rng);
        if (has_bias()) init_uniform(bias, fan_in, rng);
    }

    Mat<T> forward(const Mat<T>& x) const {
        Mat<T> y = x * weight;
        if (has_bias()) y.rowwise() += bias.row(0);
        return y;
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, Linear& grad) const {
        grad.weight.noalias() += x.transpose() * dy;
        if (has_bias()) grad.bias += dy.colwise().sum();
        return dy * weight.transpose();
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".weight", self.weight);
        if (self.has_bias()) f(prefix + ".bias", self.bias);
    }
};

/// Two-layer perceptron x -> W2 * gelu(W1 * x + b1) + b2.
template <typename T>
struct FeedForward {
    Linear<T> up;
    Linear<T> down;

    struct Cache {
        Mat<T> x;
        Mat<T> pre;
        Mat<T> act;
    };

    FeedForward() = default;
    FeedForward(std::size_t dim, std::size_t hidden) : up(dim, hidden), down(hidden, dim) {}
    FeedForward(std::size_t in, std::size_t hidden, std::size_t out) : up(in, hidden), down(hidden, out) {}

    void init(std::mt19937_64& rng) {
        up.init(rng);
        down.init(rng);
    }

    Mat<T> forward(const Mat<T>& x, Cache* cache = nullptr) const {
        Mat<T> pre = up.forward(x);
        Mat<T> act = pre.unaryExpr([](T v) { return gelu(v); });
        Mat<T> y = down.forward(act);
        if (cache != nullptr) *cache = {x, std::move(pre), std::move(act)};
        return y;
    }

    Mat<T> backward(const Cache& c, const Mat<T>& dy, FeedForward& grad) const {
        Mat<T> dact = down.backward(c.act, dy, grad.down);
        Mat<T> dpre = dact.array() * c.pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
        return up.backward(c.x, dpre, grad.up);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        Linear<T>::visit(self.up, prefix + ".up", f);
        Linear<T>::visit(self.down, prefix + ".down", f);
    }
};

/// Query rows attend to key rows; every group is an independent attention problem.
struct AttentionGroup {
    std::vector<Eigen::Index> queries;
    std::vector<Eigen::Index> keys;
};

namespace detail {

template <typename T>
Mat<T> gather_block(const Mat<T>& src, const std::vector<Eigen::Index>& rows, Eigen::Index col, Eigen::Index width) {
    Mat<T> out(static_cast<Eigen::Index>(rows.size()), width);
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = src.row(rows[r]).segment(col, width);
    return out;
}

template <typename T>
void scatter_add_block(Mat<T>& dst, const std::vector<Eigen::Index>& rows, Eigen::Index col, const Mat<T>& block) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
        dst.row(rows[r]).segment(col, block.cols()) += block.row(static_cast<Eigen::Index>(r));
    }
}

}  // namespace detail

/// Multi-head scaled dot-product attention
///   A_h = softmax(Q_h K_h^T / sqrt(d) + B_h),  out = concat_h(A_h V_h) Wo + bo
/// The key projection has no bias: a key bias shifts every score of a row
/// equally and never changes the output.
/// evaluated independently per AttentionGroup. When a relative bias table is
/// supplied, B_h is its Toeplitz matrix over each group's positions (groups
/// must then be square).
template <typename T>
struct MultiHeadAttention {
    std::size_t heads = 1;
    Linear<T> q;
    Linear<T> k;
    Linear<T> v;
    Linear<T> o;

    struct Cache {
        Mat<T> xq;
        Mat<T> xkv;
        Mat<T> qp;
        Mat<T> kp;
        Mat<T> vp;
        Mat<T> ctx;
        std::vector<Mat<T>> probs;  // group-major, then head
    };

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t num_heads)
        : heads(num_heads), q(dim, dim), k(dim, dim, false), v(dim, dim), o(dim, dim) {
        require(num_heads >= 1 && dim % num_heads == 0, "attention dim must be divisible by the head count");
    }

    void init(std::mt19937_64& rng) {
        q.init(rng);
        k.init(rng);
        v.init(rng);
        o.init(rng);
    }

    Eigen::Index head_dim() const { return q.weight.cols() / static_cast<Eigen::Index>(heads); }

    Mat<T> forward(const Mat<T>& xq, const Mat<T>& xkv, const std::vector<AttentionGroup>& groups,
                   const RelBiasTable<T>* rel, Cache* cache = nullptr) const {
        const Eigen::Index d = head_dim();
        const T scale = T(1) / std::sqrt(static_cast<T>(d));
        Mat<T> qp = q.forward(xq);
        Mat<T> kp = k.forward(xkv);
        Mat<T> vp = v.forward(xkv);
        Mat<T> ctx = Mat<T>::Zero(xq.rows(), qp.cols());
        std::vector<Mat<T>> probs;
        if (cache != nullptr) probs.reserve(groups.size() * heads);

        // Every group in a pass has the same length, so bias matrices are built once per head.
        std::vector<Mat<T>> bias;
        std::size_t bias_n = 0;
        for (const auto& g : groups) {
            if (rel != nullptr) {
                require(g.queries.size() == g.keys.size(), "relative bias requires square attention groups");
                if (bias.empty() || bias_n != g.queries.size()) {
                    bias_n = g.queries.size();
                    bias.clear();
                    for (std::size_t h = 0; h < heads; ++h) bias.push_back(rpe_bias_matrix(bias_n, *rel, h));
                }
            }
            for (std::size_t h = 0; h < heads; ++h) {
                const Eigen::Index col = static_cast<Eigen::Index>(h) * d;
                const Mat<T> qh = detail::gather_block(qp, g.queries, col, d);
                const Mat<T> kh = detail::gather_block(kp, g.keys, col, d);
                const Mat<T> vh = detail::gather_block(vp, g.keys, col, d);
                Mat<T> s = (qh * kh.transpose()) * scale;
                if (rel != nullptr) s += bias[h];
                softmax_rows(s);
                const Mat<T> out = s * vh;
                for (std::size_t r = 0; r < g.queries.size(); ++r) {
                    ctx.row(g.queries[r]).segment(col, d) = out.row(static_cast<Eigen::Index>(r));
                }
                if (cache != nullptr) probs.push_back(std::move(s));
            }
        }
        Mat<T> y = o.forward(ctx);
        if (cache != nullptr) {
            *cache = {xq, xkv, std::move(qp), std::move(kp), std::move(vp), std::move(ctx), std::move(probs)};
        }
        return y;
    }

    /// Accumulates parameter (and optional bias-table) gradients; writes dL/dxq and dL/dxkv.
    void backward(const Cache& c, const Mat<T>& dy, const std::vector<AttentionGroup>& groups,
                  MultiHeadAttention& grad, RelBiasTable<T>* rel_grad, Mat<T>& dxq, Mat<T>& dxkv) const {
        const Eigen::Index d = head_dim();
        const T scale = T(1) / std::sqrt(static_cast<T>(d));
        const Mat<T> dctx = o.backward(c.ctx, dy, grad.o);
        Mat<T> dqp = Mat<T>::Zero(c.qp.rows(), c.qp.cols());
        Mat<T> dkp = Mat<T>::Zero(c.kp.rows(), c.kp.cols());
        Mat<T> dvp = Mat<T>::Zero(c.vp.rows(), c.vp.cols());
        std::size_t idx = 0;
        for (const auto& g : groups) {
            for (std::size_t h = 0; h < heads; ++h, ++idx) {
                const Eigen::Index col = static_cast<Eigen::Index>(h) * d;
                const Mat<T>& p = c.probs[idx];
                const Mat<T> qh = detail::gather_block(c.qp, g.queries, col, d);
                const Mat<T> kh = detail::gather_block(c.kp, g.keys, col, d);
                const Mat<T> vh = detail::gather_block(c.vp, g.keys, col, d);
                const Mat<T> dout = detail::gather_block(dctx, g.queries, col, d);
                const Mat<T> dp = dout * vh.transpose();
                detail::scatter_add_block<T>(dvp, g.keys, col, p.transpose() * dout);
                const Mat<T> ds = softmax_rows_backward(p, dp);
                if (rel_grad != nullptr) rpe_bias_accumulate(ds, h, *rel_grad);
                detail::scatter_add_block<T>(dqp, g.queries, col, (ds * kh) * scale);
                detail::scatter_add_block<T>(dkp, g.keys, col, (ds.transpose() * qh) * scale);
            }
        }
        dxq = q.backward(c.xq, dqp, grad.q);
        dxkv = k.backward(c.xkv, dkp, grad.k);
        dxkv += v.backward(c.xkv, dvp, grad.v);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        Linear<T>::visit(self.q, prefix + ".q", f);
        Linear<T>::visit(self.k, prefix + ".k", f);
        Linear<T>::visit(self.v, prefix + ".v", f);
        Linear<T>::visit(self.o, prefix + ".o", f);
    }
};

/// Aggregation attention with no value projection:
///   A = mean_h softmax(Q_h K_h^T / sqrt(d)),  out = A * X
/// where Q = queries * Wq + bq and K = X * Wk. Every output row is a
/// convex combination of the rows of X.
template <typename T>
struct AggregationAttention {
    std::size_t heads = 1;
    Linear<T> q;
    Linear<T> k;

    struct Cache {
        Mat<T> queries;
        Mat<T> source;
        Mat<T> qp;
        Mat<T> kp;
        std::vector<Mat<T>> probs;
        Mat<T> weights;
    };

    AggregationAttention() = default;
    AggregationAttention(std::size_t dim, std::size_t num_heads) : heads(num_heads), q(dim, dim), k(dim, dim, false) {
        require(num_heads >= 1 && dim % num_heads == 0, "attention dim must be divisible by the head count");
    }

    void init(std::mt19937_64& rng) {
        q.init(rng);
        k.init(rng);
    }

    Eigen::Index head_dim() const { return q.weight.cols() / static_cast<Eigen::Index>(heads); }

    /// Returns the row-stochastic weight matrix A (queries x source rows).
    Mat<T> weights(const Mat<T>& queries, const Mat<T>& source, Cache* cache = nullptr) const {
        const Eigen::Index d = head_dim();
        const T scale = T(1) / std::sqrt(static_cast<T>(d));
        Mat<T> qp = q.forward(queries);
        Mat<T> kp = k.forward(source);
        Mat<T> a = Mat<T>::Zero(queries.rows(), source.rows());
        std::vector<Mat<T>> probs;
        for (std::size_t h = 0; h < heads; ++h) {
            const Eigen::Index col = static_cast<Eigen::Index>(h) * d;
            Mat<T> s = (qp.middleCols(col, d) * kp.middleCols(col, d).transpose()) * scale;
            softmax_rows(s);
            a += s;
            if (cache != nullptr) probs.push_back(std::move(s));
        }
        a /= static_cast<T>(heads);
        if (cache != nullptr) *cache = {queries, source, std::move(qp), std::move(kp), std::move(probs), a};
        return a;
    }

    /// Given dL/dout, writes dL/dqueries and dL/dsource (both value and key paths).
    void backward(const Cache& c, const Mat<T>& dout, AggregationAttention& grad, Mat<T>& dqueries,
                  Mat<T>& dsource) const {
        const Eigen::Index d = head_dim();
        const T scale = T(1) / std::sqrt(static_cast<T>(d));
        const Mat<T> da = (dout * c.source.transpose()) / static_cast<T>(heads);
        dsource = c.weights.transpose() * dout;
        Mat<T> dqp = Mat<T>::Zero(c.qp.rows(), c.qp.cols());
        Mat<T> dkp = Mat<T>::Zero(c.kp.rows(), c.kp.cols());
        for (std::size_t h = 0; h < heads; ++h) {
            const Eigen::Index col = static_cast<Eigen::Index>(h) * d;
            const Mat<T> ds = softmax_rows_backward(c.probs[h], da);
            dqp.middleCols(col, d) = (ds * c.kp.middleCols(col, d)) * scale;
            dkp.middleCols(col, d) = (ds.transpose() * c.qp.middleCols(col, d)) * scale;
        }
        dqueries = q.backward(c.queries, dqp, grad.q);
        dsource += k.backward(c.source, dkp, grad.k);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        Linear<T>::visit(self.q, prefix + ".q", f);
        Linear<T>::visit(self.k, prefix + ".k", f);
    }
};

}  // namespace mu2

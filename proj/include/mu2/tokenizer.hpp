// SPDX-License-Identifier: Apache-2.0
//
// The multi-scale multi-modal tokenizer:
//
//   frames --encode--> V (T x N_v x E)
//          --SVR x L (alternating spatial / temporal attention with relative bias)-->
//          --DTS  (k soft tokens, each a softmax-weighted sum of all T*N_v tokens)-->
//          --DMTP (average pooling at kernels S, softmax-weighted per scale)-->
//          --TTA x L (text-conditioned query aggregation, identity value path)-->
//   compact tokens V' (M x E)
//
// DTS, DMTP and TTA only ever form convex combinations of visual tokens, so
// every compact token is a convex combination of refined visual tokens.

#pragma once

#include "mu2/encoder.hpp"
#include "mu2/nn.hpp"
#include "mu2/rpe.hpp"

#include <numeric>
#include <sstream>

namespace mu2 {

struct Mu2Config {
    FrameTarget frames{8, 32, 256, 256};
    PatchShape patch{4, 16, 16};
    std::size_t embed_dim = 768;
    std::size_t heads = 8;
    std::size_t svr_layers = 4;
    std::size_t tta_layers = 4;
    std::size_t top_k = 1024;
    std::size_t queries = 1024;
    std::size_t max_distance = 32;
    std::size_t text_len = 32;
    std::vector<std::size_t> pool_kernels{1, 2, 4};

    /// Full-size configuration: 4 + 4 layers, 8 heads, k = 1024, 1024 queries, E = 768.
    static Mu2Config paper() { return Mu2Config{}; }

    /// Small configuration used by tests and the bundled sample.
    static Mu2Config desk() {
        Mu2Config c;
        c.frames = {2, 2, 4, 4};
        c.patch = {2, 2, 2};
        c.embed_dim = 16;
        c.heads = 4;
        c.top_k = 8;
        c.queries = 4;
        c.max_distance = 32;
        c.text_len = 8;
        return c;
    }

    std::size_t tokens_per_frame() const {
        return patches_per_frame(frames.slices_per_frame, frames.height, frames.width, patch) + 1;
    }

    std::size_t pooled_length() const {
        std::size_t l = 0;
        for (std::size_t s : pool_kernels) l += top_k / s;
        return l;
    }

    void validate() const {
        require(embed_dim >= 2, "config: embed_dim must be >= 2");
        require(heads >= 1, "config: heads must be >= 1");
        if (embed_dim % heads != 0) {
            throw ValidationError("config: hidden size " + std::to_string(embed_dim) +
                                  " is not divisible by heads " + std::to_string(heads));
        }
        require(top_k >= 1, "config: k must be >= 1");
        require(queries >= 1, "config: n_queries must be >= 1");
        require(text_len >= 1, "config: n_q must be >= 1");
        require(!pool_kernels.empty(), "config: pool_kernels must not be empty");
        require(std::is_sorted(pool_kernels.begin(), pool_kernels.end()) &&
                    std::adjacent_find(pool_kernels.begin(), pool_kernels.end()) == pool_kernels.end(),
                "config: pool_kernels must be strictly ascending");
        require(pool_kernels.front() == 1, "config: pool_kernels must contain 1");
        const std::size_t kmax = pool_kernels.back();
        if (top_k % kmax != 0) {
            throw ValidationError("config: k=" + std::to_string(top_k) +
                                  " is not divisible by the largest pool kernel " + std::to_string(kmax));
        }
        require(frames.frames >= 1 && frames.slices_per_frame >= 1 && frames.height >= 1 && frames.width >= 1,
                "config: frame target dimensions must be positive");
        (void)tokens_per_frame();  // throws on indivisible patching
    }
};

// ---------------------------------------------------------------------------
// SVR: spatio-temporal refinement

enum class SvrPass { spatial, temporal };

/// Layers alternate spatial (within a frame) and temporal (same token slot across frames).
inline SvrPass svr_pass_for_layer(std::size_t layer) { return layer % 2 == 0 ? SvrPass::spatial : SvrPass::temporal; }

inline std::vector<AttentionGroup> svr_groups(std::size_t frames, std::size_t tokens_per_frame, SvrPass pass) {
    std::vector<AttentionGroup> groups;
    if (pass == SvrPass::spatial) {
        for (std::size_t t = 0; t < frames; ++t) {
            AttentionGroup g;
            for (std::size_t j = 0; j < tokens_per_frame; ++j) g.queries.push_back(static_cast<Eigen::Index>(t * tokens_per_frame + j));
            g.keys = g.queries;
            groups.push_back(std::move(g));
        }
    } else {
        for (std::size_t j = 0; j < tokens_per_frame; ++j) {
            AttentionGroup g;
            for (std::size_t t = 0; t < frames; ++t) g.queries.push_back(static_cast<Eigen::Index>(t * tokens_per_frame + j));
            g.keys = g.queries;
            groups.push_back(std::move(g));
        }
    }
    return groups;
}

/// x' = x + MHA_rel(x), y = x' + FFN(x')
template <typename T>
struct SvrLayer {
    MultiHeadAttention<T> attn;
    RelBiasTable<T> rel;
    FeedForward<T> ffn;

    struct Cache {
        typename MultiHeadAttention<T>::Cache attn;
        typename FeedForward<T>::Cache ffn;
    };

    SvrLayer() = default;
    SvrLayer(std::size_t dim, std::size_t heads, std::size_t max_distance)
        : attn(dim, heads), rel(heads, max_distance), ffn(dim, 2 * dim) {}

    void init(std::mt19937_64& rng) {
        attn.init(rng);
        init_uniform(rel.values, static_cast<std::size_t>(rel.values.cols()), rng);
        ffn.init(rng);
    }

    Mat<T> forward(const Mat<T>& x, const std::vector<AttentionGroup>& groups, Cache* cache = nullptr) const {
        Mat<T> mid = x + attn.forward(x, x, groups, &rel, cache ? &cache->attn : nullptr);
        Mat<T> out = ffn.forward(mid, cache ? &cache->ffn : nullptr);
        out += mid;
        return out;
    }

    Mat<T> backward(const Cache& c, const Mat<T>& dy, const std::vector<AttentionGroup>& groups, SvrLayer& grad) const {
        const Mat<T> dmid = dy + ffn.backward(c.ffn, dy, grad.ffn);
        Mat<T> dxq;
        Mat<T> dxkv;
        attn.backward(c.attn, dmid, groups, grad.attn, &grad.rel, dxq, dxkv);
        return dmid + dxq + dxkv;
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        MultiHeadAttention<T>::visit(self.attn, prefix + ".attn", f);
        RelBiasTable<T>::visit(self.rel, prefix + ".rel", f);
        FeedForward<T>::visit(self.ffn, prefix + ".ffn", f);
    }
};

// ---------------------------------------------------------------------------
// DTS: differentiable soft token selection

template <typename T>
struct SoftTokenSet {
    Mat<T> tokens;   // k x E
    Mat<T> weights;  // k x (T * N_v), row-stochastic
};

/// alpha_r = softmax_i(V_flat(i) . W_s[:, r]) over all T*N_v tokens;
/// token r = sum_i alpha_r(i) V_flat(i).
template <typename T>
SoftTokenSet<T> dts(const Mat<T>& v_flat, const Mat<T>& selector) {
    require(selector.cols() >= 1, "dts: k must be >= 1");
    require(selector.rows() == v_flat.cols(), "dts: selector rows must equal the embedding dim");
    Mat<T> scores = (v_flat * selector).transpose();  // k x n
    if (!scores.allFinite()) throw RuntimeError("dts: non-finite selection scores");
    softmax_rows(scores);
    SoftTokenSet<T> out;
    out.tokens = scores * v_flat;
    out.weights = std::move(scores);
    return out;
}

/// Returns dL/dV_flat; accumulates dL/dW_s into `dselector`.
template <typename T>
Mat<T> dts_backward(const Mat<T>& v_flat, const Mat<T>& selector, const SoftTokenSet<T>& st, const Mat<T>& dtokens,
                    Mat<T>& dselector) {
    Mat<T> dv = st.weights.transpose() * dtokens;
    const Mat<T> dweights = dtokens * v_flat.transpose();             // k x n
    const Mat<T> dscores = softmax_rows_backward(st.weights, dweights);  // k x n
    dv.noalias() += dscores.transpose() * selector.transpose();
    dselector.noalias() += v_flat.transpose() * dscores.transpose();
    return dv;
}

// ---------------------------------------------------------------------------
// DMTP: dynamic multi-scale pooling

template <typename T>
struct PooledTokens {
    Mat<T> tokens;  // L x E, blocks in ascending kernel order
    std::vector<T> scale_weights;
    std::vector<std::size_t> kernels;
};

template <typename T>
struct DmtpCache {
    std::vector<Mat<T>> pooled;  // y_s
    Mat<T> means;                // |S| x E, row s = mean over tokens of y_s
    typename FeedForward<T>::Cache gate;
};

/// Non-overlapping average pooling along the token axis (stride = kernel).
template <typename T>
Mat<T> avg_pool_tokens(const Mat<T>& x, std::size_t kernel) {
    require(kernel >= 1 && static_cast<std::size_t>(x.rows()) % kernel == 0,
            "avg_pool_tokens: token count is not divisible by the kernel");
    const auto s = static_cast<Eigen::Index>(kernel);
    Mat<T> out(x.rows() / s, x.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = x.middleRows(i * s, s).colwise().mean();
    return out;
}

/// Gate g: E -> E/2 -> 1 (GELU) scoring the mean pooled token of each scale.
/// The scalar output has no bias since the scale softmax ignores a common shift.
template <typename T>
FeedForward<T> make_pool_gate(std::size_t embed_dim) {
    FeedForward<T> g(embed_dim, std::max<std::size_t>(1, embed_dim / 2), 1);
    g.down = Linear<T>(g.down.weight.rows(), 1, false);
    return g;
}

template <typename T>
PooledTokens<T> dmtp(const Mat<T>& soft, const std::vector<std::size_t>& kernels, const FeedForward<T>& gate,
                     DmtpCache<T>* cache = nullptr) {
    require(!kernels.empty(), "dmtp: kernel list is empty");
    const auto k = static_cast<std::size_t>(soft.rows());
    for (std::size_t s : kernels) {
        if (s == 0 || k % s != 0) {
            throw ValidationError("dmtp: k=" + std::to_string(k) + " is not divisible by kernel " + std::to_string(s));
        }
    }
    std::vector<Mat<T>> pooled;
    Mat<T> means(static_cast<Eigen::Index>(kernels.size()), soft.cols());
    for (std::size_t i = 0; i < kernels.size(); ++i) {
        pooled.push_back(avg_pool_tokens(soft, kernels[i]));
        means.row(static_cast<Eigen::Index>(i)) = pooled.back().colwise().mean();
    }
    typename FeedForward<T>::Cache gate_cache;
    const Mat<T> logits = gate.forward(means, cache ? &gate_cache : nullptr);
    std::vector<T> logit_vec(kernels.size());
    for (std::size_t i = 0; i < kernels.size(); ++i) logit_vec[i] = logits(static_cast<Eigen::Index>(i), 0);
    PooledTokens<T> out;
    out.scale_weights = softmax(logit_vec);
    out.kernels = kernels;
    Eigen::Index total = 0;
    for (const auto& y : pooled) total += y.rows();
    out.tokens.resize(total, soft.cols());
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
        out.tokens.middleRows(row, pooled[i].rows()) = pooled[i] * out.scale_weights[i];
        row += pooled[i].rows();
    }
    if (cache != nullptr) *cache = {std::move(pooled), std::move(means), std::move(gate_cache)};
    return out;
}

/// Returns dL/dsoft; accumulates gate gradients.
template <typename T>
Mat<T> dmtp_backward(const Mat<T>& soft, const PooledTokens<T>& out, const FeedForward<T>& gate,
                     const DmtpCache<T>& cache, const Mat<T>& dpooled, FeedForward<T>& gate_grad) {
    const std::size_t ns = out.kernels.size();
    std::vector<Mat<T>> dy(ns);
    std::vector<T> dw(ns);
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < ns; ++i) {
        const auto rows = cache.pooled[i].rows();
        const auto block = dpooled.middleRows(row, rows);
        dy[i] = block * out.scale_weights[i];
        dw[i] = (block.array() * cache.pooled[i].array()).sum();
        row += rows;
    }
    T dot = 0;
    for (std::size_t i = 0; i < ns; ++i) dot += out.scale_weights[i] * dw[i];
    Mat<T> dlogits(static_cast<Eigen::Index>(ns), 1);
    for (std::size_t i = 0; i < ns; ++i) dlogits(static_cast<Eigen::Index>(i), 0) = out.scale_weights[i] * (dw[i] - dot);
    const Mat<T> dmeans = gate.backward(cache.gate, dlogits, gate_grad);

    Mat<T> dsoft = Mat<T>::Zero(soft.rows(), soft.cols());
    for (std::size_t i = 0; i < ns; ++i) {
        const auto s = static_cast<Eigen::Index>(out.kernels[i]);
        dy[i].rowwise() += dmeans.row(static_cast<Eigen::Index>(i)) / static_cast<T>(dy[i].rows());
        for (Eigen::Index r = 0; r < soft.rows(); ++r) dsoft.row(r) += dy[i].row(r / s) / static_cast<T>(s);
    }
    return dsoft;
}

// ---------------------------------------------------------------------------
// TTA: text-conditioned token aggregation

/// U~ = U + MHA(U, text); U^ = U~ + FFN(U~); A = mean_h softmax(U^ Wq, P Wk); out = A P.
template <typename T>
struct TtaLayer {
    MultiHeadAttention<T> text_attn;
    FeedForward<T> ffn;
    AggregationAttention<T> aggregate;

    struct Cache {
        typename MultiHeadAttention<T>::Cache text_attn;
        typename FeedForward<T>::Cache ffn;
        typename AggregationAttention<T>::Cache aggregate;
    };

    TtaLayer() = default;
    TtaLayer(std::size_t dim, std::size_t heads) : text_attn(dim, heads), ffn(dim, 2 * dim), aggregate(dim, heads) {}

    void init(std::mt19937_64& rng) {
        text_attn.init(rng);
        ffn.init(rng);
        aggregate.init(rng);
    }

    static std::vector<AttentionGroup> text_groups(Eigen::Index queries, Eigen::Index text_rows) {
        AttentionGroup g;
        for (Eigen::Index i = 0; i < queries; ++i) g.queries.push_back(i);
        for (Eigen::Index i = 0; i < text_rows; ++i) g.keys.push_back(i);
        return {std::move(g)};
    }

    /// `text` holds only the unmasked text rows. Writes the aggregation weights to `weights` when given.
    Mat<T> forward(const Mat<T>& u, const Mat<T>& text, const Mat<T>& pooled, Cache* cache = nullptr,
                   Mat<T>* weights = nullptr) const {
        require(text.rows() >= 1, "tta: text has no unmasked positions");
        const auto groups = text_groups(u.rows(), text.rows());
        Mat<T> cond = u + text_attn.forward(u, text, groups, nullptr, cache ? &cache->text_attn : nullptr);
        Mat<T> state = ffn.forward(cond, cache ? &cache->ffn : nullptr);
        state += cond;
        Mat<T> a = aggregate.weights(state, pooled, cache ? &cache->aggregate : nullptr);
        Mat<T> out = a * pooled;
        if (weights != nullptr) *weights = std::move(a);
        return out;
    }

    void backward(const Cache& c, const Mat<T>& dout, TtaLayer& grad, Mat<T>& du, Mat<T>& dtext, Mat<T>& dpooled) const {
        Mat<T> dstate;
        aggregate.backward(c.aggregate, dout, grad.aggregate, dstate, dpooled);
        const Mat<T> dcond = dstate + ffn.backward(c.ffn, dstate, grad.ffn);
        Mat<T> dq;
        const auto groups = text_groups(c.text_attn.xq.rows(), c.text_attn.xkv.rows());
        text_attn.backward(c.text_attn, dcond, groups, grad.text_attn, nullptr, dq, dtext);
        du = dcond + dq;
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        MultiHeadAttention<T>::visit(self.text_attn, prefix + ".text_attn", f);
        FeedForward<T>::visit(self.ffn, prefix + ".ffn", f);
        AggregationAttention<T>::visit(self.aggregate, prefix + ".aggregate", f);
    }
};

template <typename T>
struct CompactTokens {
    Mat<T> tokens;      // M x E
    Mat<T> provenance;  // M x L, row-stochastic weights over pooled tokens
};

// ---------------------------------------------------------------------------
// Full parameter set

template <typename T>
struct Mu2Params {
    EncoderParams<T> encoder;
    TextEmbedParams<T> text;
    std::vector<SvrLayer<T>> svr;
    Mat<T> selector;  // E x k
    FeedForward<T> pool_gate;
    Mat<T> queries;  // M x E
    std::vector<TtaLayer<T>> tta;

    /// Zero-valued parameters of the right shapes.
    static Mu2Params zeros(const Mu2Config& cfg, std::size_t vocab_rows) {
        cfg.validate();
        Mu2Params p;
        const std::size_t e = cfg.embed_dim;
        p.encoder = EncoderParams<T>(cfg.patch, e);
        p.text = TextEmbedParams<T>(vocab_rows, e, cfg.text_len);
        for (std::size_t i = 0; i < cfg.svr_layers; ++i) p.svr.emplace_back(e, cfg.heads, cfg.max_distance);
        p.selector = Mat<T>::Zero(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(cfg.top_k));
        p.pool_gate = make_pool_gate<T>(e);
        p.queries = Mat<T>::Zero(static_cast<Eigen::Index>(cfg.queries), static_cast<Eigen::Index>(e));
        for (std::size_t i = 0; i < cfg.tta_layers; ++i) p.tta.emplace_back(e, cfg.heads);
        return p;
    }

    /// Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] initialization from one seed.
    static Mu2Params init(const Mu2Config& cfg, std::size_t vocab_rows, std::uint64_t seed) {
        Mu2Params p = zeros(cfg, vocab_rows);
        std::mt19937_64 rng(seed);
        p.encoder.init(rng);
        p.text.init(rng);
        for (auto& l : p.svr) l.init(rng);
        init_uniform(p.selector, cfg.embed_dim, rng);
        p.pool_gate.init(rng);
        init_uniform(p.queries, cfg.embed_dim, rng);
        for (auto& l : p.tta) l.init(rng);
        return p;
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        EncoderParams<T>::visit(self.encoder, prefix + "encoder", f);
        TextEmbedParams<T>::visit(self.text, prefix + "text", f);
        for (std::size_t i = 0; i < self.svr.size(); ++i) SvrLayer<T>::visit(self.svr[i], prefix + "svr." + std::to_string(i), f);
        f(prefix + "dts.selector", self.selector);
        FeedForward<T>::visit(self.pool_gate, prefix + "dmtp.gate", f);
        f(prefix + "tta.queries", self.queries);
        for (std::size_t i = 0; i < self.tta.size(); ++i) TtaLayer<T>::visit(self.tta[i], prefix + "tta." + std::to_string(i), f);
    }
};

/// Intermediate results of one tokenize call.
template <typename T>
struct TokenizerTrace {
    TokenGrid<T> visual;
    Mat<T> refined;
    SoftTokenSet<T> soft;
    PooledTokens<T> pooled;
    Mat<T> text;
};

template <typename T>
Mat<T> svr_stack(const Mat<T>& tokens, std::size_t frames, std::size_t tokens_per_frame,
                 const std::vector<SvrLayer<T>>& layers) {
    Mat<T> x = tokens;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto groups = svr_groups(frames, tokens_per_frame, svr_pass_for_layer(i));
        x = layers[i].forward(x, groups);
        if (!x.allFinite()) throw RuntimeError("svr layer " + std::to_string(i) + " produced non-finite activations");
    }
    return x;
}

template <typename T>
CompactTokens<T> tta_stack(const Mat<T>& queries, const Mat<T>& text, const Mat<T>& pooled,
                           const std::vector<TtaLayer<T>>& layers) {
    CompactTokens<T> out;
    out.tokens = queries;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        out.tokens = layers[i].forward(out.tokens, text, pooled, nullptr, &out.provenance);
        if (!out.tokens.allFinite()) throw RuntimeError("tta layer " + std::to_string(i) + " produced non-finite activations");
    }
    return out;
}

namespace detail {

template <class F>
auto run_stage(const char* stage, F&& f) {
    try {
        return f();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("tokenize/") + stage + ": " + e.what());
    } catch (const std::exception& e) {
        throw RuntimeError(std::string("tokenize/") + stage + ": " + e.what());
    }
}

}  // namespace detail

/// encode -> SVR stack -> DTS -> DMTP -> TTA stack.
template <typename T>
CompactTokens<T> tokenize(const FrameStack& fs, const std::string& question, const Mu2Config& cfg,
                          const Mu2Params<T>& params, const Vocab& vocab, TokenizerTrace<T>* trace = nullptr) {
    cfg.validate();
    require(cfg.tta_layers >= 1, "tokenize: at least one TTA layer is required");
    auto visual = detail::run_stage("encoder", [&] { return encode_frames(fs, cfg.patch, params.encoder); });
    auto text = detail::run_stage("text", [&] { return embed_text(question, vocab, params.text).active_rows(); });
    auto refined = detail::run_stage("svr", [&] {
        return svr_stack(visual.tokens, visual.frames, visual.tokens_per_frame, params.svr);
    });
    auto soft = detail::run_stage("dts", [&] { return dts(refined, params.selector); });
    auto pooled = detail::run_stage("dmtp", [&] { return dmtp(soft.tokens, cfg.pool_kernels, params.pool_gate); });
    auto out = detail::run_stage("tta", [&] { return tta_stack(params.queries, text, pooled.tokens, params.tta); });
    if (trace != nullptr) {
        *trace = {std::move(visual), std::move(refined), std::move(soft), std::move(pooled), std::move(text)};
    }
    return out;
}

}  // namespace mu2

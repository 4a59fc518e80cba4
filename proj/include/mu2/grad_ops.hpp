// SPDX-License-Identifier: Apache-2.0
//
// Registry of differentiable ops for gradient checking. Each entry builds a
// random 64-bit instance at desk shapes, projects the op output onto a fixed
// random tensor R (objective <R, op(...)>), and hands the objective plus the
// analytic gradient to the finite-difference oracle.

#pragma once

#include "mu2/dpo.hpp"
#include "mu2/grad_oracle.hpp"
#include "mu2/tokenizer.hpp"

#include <map>

namespace mu2::grad {

namespace detail {

template <class State>
std::vector<NamedTensor> pack(const State& s) {
    std::vector<NamedTensor> out;
    for_each_param(s, "", [&](const std::string& name, const Mat<double>& m) {
        out.push_back({name, Vector(m.data(), m.data() + m.size())});
    });
    return out;
}

template <class State>
void unpack(State& s, const std::vector<Vector>& flat) {
    std::size_t i = 0;
    for_each_param(s, "", [&](const std::string&, Mat<double>& m) {
        std::copy(flat[i].begin(), flat[i].end(), m.data());
        ++i;
    });
}

template <class State>
std::vector<Vector> flatten(const State& s) {
    std::vector<Vector> out;
    for (auto& t : pack(s)) out.push_back(std::move(t.values));
    return out;
}

/// objective(state, grad_or_null) -> value; when grad is non-null it must be
/// filled with d value / d state (grad arrives zeroed).
template <class State, class Objective>
Problem make_problem(std::string op, State s0, Objective objective) {
    Problem p;
    p.op = std::move(op);
    p.point = pack(s0);
    p.value = [s0, objective](const std::vector<Vector>& flat) {
        State s = s0;
        unpack(s, flat);
        return objective(s, static_cast<State*>(nullptr));
    };
    p.gradient = [s0, objective](const std::vector<Vector>& flat) {
        State s = s0;
        unpack(s, flat);
        State g = zeros_like(s);
        objective(s, &g);
        return flatten(g);
    };
    return p;
}

inline Mat<double> random_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Mat<double> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

inline double project(const Mat<double>& r, const Mat<double>& y) { return (r.array() * y.array()).sum(); }

struct AttentionState {
    MultiHeadAttention<double> attn;
    RelBiasTable<double> rel;
    Mat<double> x;

    template <class Self, class F>
    static void visit(Self& self, const std::string&, F&& f) {
        MultiHeadAttention<double>::visit(self.attn, "attn", f);
        RelBiasTable<double>::visit(self.rel, "rel", f);
        f("input.x", self.x);
    }
};

inline Problem rpe_attention(std::mt19937_64& rng) {
    const std::size_t n = 6, e = 8, heads = 2, dmax = 2;
    AttentionState s{MultiHeadAttention<double>(e, heads), RelBiasTable<double>(heads, dmax), random_normal(n, e, rng)};
    s.attn.init(rng);
    init_uniform(s.rel.values, 2, rng);
    const Mat<double> r = random_normal(n, e, rng);
    AttentionGroup g;
    for (std::size_t i = 0; i < n; ++i) g.queries.push_back(static_cast<Eigen::Index>(i));
    g.keys = g.queries;
    const std::vector<AttentionGroup> groups{g};
    return make_problem("rpe_attention", s, [r, groups](const AttentionState& st, AttentionState* grad) {
        MultiHeadAttention<double>::Cache cache;
        const Mat<double> y = st.attn.forward(st.x, st.x, groups, &st.rel, grad ? &cache : nullptr);
        if (grad != nullptr) {
            Mat<double> dxq;
            Mat<double> dxkv;
            st.attn.backward(cache, r, groups, grad->attn, &grad->rel, dxq, dxkv);
            grad->x = dxq + dxkv;
        }
        return project(r, y);
    });
}

struct SvrState {
    SvrLayer<double> layer;
    Mat<double> x;

    template <class Self, class F>
    static void visit(Self& self, const std::string&, F&& f) {
        SvrLayer<double>::visit(self.layer, "svr", f);
        f("input.x", self.x);
    }
};

inline Problem svr_layer(std::mt19937_64& rng, SvrPass pass) {
    const std::size_t frames = 3, per_frame = 4, e = 8, heads = 2, dmax = 2;
    SvrState s{SvrLayer<double>(e, heads, dmax), random_normal(frames * per_frame, e, rng)};
    s.layer.init(rng);
    const Mat<double> r = random_normal(frames * per_frame, e, rng);
    const auto groups = svr_groups(frames, per_frame, pass);
    const std::string name = pass == SvrPass::spatial ? "svr_layer_spatial" : "svr_layer_temporal";
    return make_problem(name, s, [r, groups](const SvrState& st, SvrState* grad) {
        SvrLayer<double>::Cache cache;
        const Mat<double> y = st.layer.forward(st.x, groups, grad ? &cache : nullptr);
        if (grad != nullptr) grad->x = st.layer.backward(cache, r, groups, grad->layer);
        return project(r, y);
    });
}

struct DtsState {
    Mat<double> selector;
    Mat<double> v;

    template <class Self, class F>
    static void visit(Self& self, const std::string&, F&& f) {
        f("dts.selector", self.selector);
        f("input.v_flat", self.v);
    }
};

inline Problem dts_op(std::mt19937_64& rng) {
    const std::size_t n = 3, e = 2, k = 2;
    DtsState s{random_normal(e, k, rng), random_normal(n, e, rng)};
    const Mat<double> r = random_normal(k, e, rng);
    return make_problem("dts", s, [r](const DtsState& st, DtsState* grad) {
        const auto out = dts(st.v, st.selector);
        if (grad != nullptr) grad->v = dts_backward(st.v, st.selector, out, r, grad->selector);
        return project(r, out.tokens);
    });
}

struct DmtpState {
    FeedForward<double> gate;
    Mat<double> soft;

    template <class Self, class F>
    static void visit(Self& self, const std::string&, F&& f) {
        FeedForward<double>::visit(self.gate, "dmtp.gate", f);
        f("input.soft_tokens", self.soft);
    }
};

inline Problem dmtp_op(std::mt19937_64& rng) {
    const std::size_t k = 4, e = 6;
    const std::vector<std::size_t> kernels{1, 2};
    DmtpState s{make_pool_gate<double>(e), random_normal(k, e, rng)};
    s.gate.init(rng);
    std::size_t l = 0;
    for (auto kk : kernels) l += k / kk;
    const Mat<double> r = random_normal(static_cast<Eigen::Index>(l), e, rng);
    return make_problem("dmtp", s, [r, kernels](const DmtpState& st, DmtpState* grad) {
        DmtpCache<double> cache;
        const auto out = dmtp(st.soft, kernels, st.gate, grad ? &cache : nullptr);
        if (grad != nullptr) grad->soft = dmtp_backward(st.soft, out, st.gate, cache, r, grad->gate);
        return project(r, out.tokens);
    });
}

// The gate sees the per-scale mean tokens; with non-overlapping pooling these
// coincide, so it is also checked on independent inputs.
inline Problem dmtp_gate_op(std::mt19937_64& rng) {
    const std::size_t scales = 3, e = 6;
    DmtpState s{make_pool_gate<double>(e), random_normal(scales, e, rng)};
    s.gate.init(rng);
    const Mat<double> r = random_normal(scales, 1, rng);
    return make_problem("dmtp_gate", s, [r](const DmtpState& st, DmtpState* grad) {
        FeedForward<double>::Cache cache;
        const Mat<double> y = st.gate.forward(st.soft, grad ? &cache : nullptr);
        if (grad != nullptr) grad->soft = st.gate.backward(cache, r, grad->gate);
        return project(r, y);
    });
}

struct TtaState {
    TtaLayer<double> layer;
    Mat<double> u;
    Mat<double> text;
    Mat<double> pooled;

    template <class Self, class F>
    static void visit(Self& self, const std::string&, F&& f) {
        TtaLayer<double>::visit(self.layer, "tta", f);
        f("input.queries", self.u);
        f("input.text", self.text);
        f("input.pooled", self.pooled);
    }
};

inline Problem tta_layer(std::mt19937_64& rng) {
    const std::size_t m = 3, nt = 4, l = 5, e = 8, heads = 2;
    TtaState s{TtaLayer<double>(e, heads), random_normal(m, e, rng), random_normal(nt, e, rng), random_normal(l, e, rng)};
    s.layer.init(rng);
    const Mat<double> r = random_normal(m, e, rng);
    return make_problem("tta_layer", s, [r](const TtaState& st, TtaState* grad) {
        TtaLayer<double>::Cache cache;
        const Mat<double> y = st.layer.forward(st.u, st.text, st.pooled, grad ? &cache : nullptr);
        if (grad != nullptr) st.layer.backward(cache, r, grad->layer, grad->u, grad->text, grad->pooled);
        return project(r, y);
    });
}

struct EncoderState {
    EncoderParams<double> enc;
    Mat<double> voxels;

    template <class Self, class F>
    static void visit(Self& self, const std::string&, F&& f) {
        EncoderParams<double>::visit(self.enc, "encoder", f);
        f("input.voxels", self.voxels);
    }
};

inline Problem encoder_op(std::mt19937_64& rng) {
    const PatchShape patch{2, 2, 2};
    const std::size_t frames = 2, k = 2, h = 4, w = 4, e = 6;
    EncoderState s{EncoderParams<double>(patch, e), random_normal(1, frames * k * h * w, rng)};
    s.enc.init(rng);
    const std::size_t per_frame = patches_per_frame(k, h, w, patch) + 1;
    const Mat<double> r = random_normal(frames * per_frame, e, rng);
    auto frames_of = [=](const Mat<double>& vox) {
        FrameStack fs;
        fs.frames = frames;
        fs.slices_per_frame = k;
        fs.height = h;
        fs.width = w;
        fs.data.assign(vox.data(), vox.data() + vox.size());
        return fs;
    };
    return make_problem("encoder", s, [r, patch, frames_of](const EncoderState& st, EncoderState* grad) {
        const FrameStack fs = frames_of(st.voxels);
        EncoderCache<double> cache;
        const auto grid = encode_frames(fs, patch, st.enc, grad ? &cache : nullptr);
        if (grad != nullptr) {
            TokenGrid<double> dgrid = grid;
            dgrid.tokens = r;
            const auto dvox = encode_frames_backward(fs, patch, st.enc, cache, dgrid, grad->enc);
            grad->voxels = Eigen::Map<const Mat<double>>(dvox.data(), 1, static_cast<Eigen::Index>(dvox.size()));
        }
        return project(r, grid.tokens);
    });
}

struct LogProbState {
    Mat<double> values;  // policy_w, reference_w, policy_l, reference_l

    template <class Self, class F>
    static void visit(Self& self, const std::string&, F&& f) {
        f("input.logprobs", self.values);
    }
};

inline Problem dpo_loss_op(std::mt19937_64& rng) {
    LogProbState s{random_normal(1, 4, rng, 2.0)};
    s.values = s.values.array() - 5.0;
    return make_problem("dpo_loss", s, [](const LogProbState& st, LogProbState* grad) {
        const dpo::SequenceScore w{st.values(0, 0), st.values(0, 1)};
        const dpo::SequenceScore l{st.values(0, 2), st.values(0, 3)};
        if (grad != nullptr) {
            const auto g = dpo::dpo_loss_grad(w, l, dpo::kDefaultBeta);
            grad->values << g.policy_chosen, g.reference_chosen, g.policy_rejected, g.reference_rejected;
        }
        return dpo::dpo_loss(w, l, dpo::kDefaultBeta);
    });
}

}  // namespace detail

using ProblemFactory = std::function<Problem(std::mt19937_64&)>;

inline const std::map<std::string, ProblemFactory>& registry() {
    static const std::map<std::string, ProblemFactory> ops{
        {"rpe_attention", detail::rpe_attention},
        {"svr_layer_spatial", [](std::mt19937_64& rng) { return detail::svr_layer(rng, SvrPass::spatial); }},
        {"svr_layer_temporal", [](std::mt19937_64& rng) { return detail::svr_layer(rng, SvrPass::temporal); }},
        {"dts", detail::dts_op},
        {"dmtp", detail::dmtp_op},
        {"dmtp_gate", detail::dmtp_gate_op},
        {"tta_layer", detail::tta_layer},
        {"encoder", detail::encoder_op},
        {"dpo_loss", detail::dpo_loss_op},
    };
    return ops;
}

inline std::vector<std::string> registered_ops() {
    std::vector<std::string> names;
    for (const auto& [name, _] : registry()) names.push_back(name);
    return names;
}

/// Random 64-bit instance of a registered op, reproducible from `seed`.
inline Problem make_op_problem(const std::string& op, std::uint64_t seed) {
    const auto it = registry().find(op);
    if (it == registry().end()) throw ValidationError("grad-check: unregistered op '" + op + "'");
    std::mt19937_64 rng(seed);
    return it->second(rng);
}

inline GradCheckReport check_op(const std::string& op, std::uint64_t seed, double tolerance = 1e-4, double step = 1e-5) {
    return check(make_op_problem(op, seed), step, tolerance, seed);
}

}  // namespace mu2::grad

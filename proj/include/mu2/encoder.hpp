// SPDX-License-Identifier: Apache-2.0
//
// Stand-in frame encoder and question embedding.
//
// A frame of K x H x W voxels is cut into non-overlapping p_d x p_h x p_w
// patches (raster order: depth, then rows, then columns). Each flattened patch
// is projected to E channels; a per-frame global token is a second projection
// of the mean patch token. Token 0 of every frame is the global token, tokens
// 1..N_v-1 are the patches.

#pragma once

#include "mu2/nn.hpp"
#include "mu2/text.hpp"
#include "mu2/volume.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <unordered_map>

namespace mu2 {

struct PatchShape {
    std::size_t depth = 4;
    std::size_t height = 16;
    std::size_t width = 16;

    std::size_t volume() const { return depth * height * width; }
};

/// Visual tokens V, stored frame-major as a (T * N_v) x E matrix.
template <typename T>
struct TokenGrid {
    std::size_t frames = 0;
    std::size_t tokens_per_frame = 0;
    Mat<T> tokens;

    std::size_t embed_dim() const { return static_cast<std::size_t>(tokens.cols()); }
    Eigen::Index row(std::size_t frame, std::size_t token) const {
        return static_cast<Eigen::Index>(frame * tokens_per_frame + token);
    }
};

template <typename T>
struct EncoderParams {
    Linear<T> patch_proj;   // patch volume -> E
    Linear<T> global_proj;  // E -> E

    EncoderParams() = default;
    EncoderParams(const PatchShape& patch, std::size_t embed_dim)
        : patch_proj(patch.volume(), embed_dim), global_proj(embed_dim, embed_dim) {}

    void init(std::mt19937_64& rng) {
        patch_proj.init(rng);
        global_proj.init(rng);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        Linear<T>::visit(self.patch_proj, prefix + ".patch_proj", f);
        Linear<T>::visit(self.global_proj, prefix + ".global_proj", f);
    }
};

inline std::size_t patches_per_frame(std::size_t k, std::size_t h, std::size_t w, const PatchShape& p) {
    const std::array<std::pair<const char*, std::pair<std::size_t, std::size_t>>, 3> axes{{
        {"slices (K)", {k, p.depth}},
        {"height (H)", {h, p.height}},
        {"width (W)", {w, p.width}},
    }};
    for (const auto& [name, dims] : axes) {
        if (dims.second == 0 || dims.first % dims.second != 0) {
            throw ValidationError(std::string("patching: ") + name + " extent " + std::to_string(dims.first) +
                                  " is not divisible by patch size " + std::to_string(dims.second));
        }
    }
    return (k / p.depth) * (h / p.height) * (w / p.width);
}

/// Flattened patches of every frame: (T * patches) x patch volume.
template <typename T>
Mat<T> extract_patches(const FrameStack& fs, const PatchShape& p) {
    const std::size_t per_frame = patches_per_frame(fs.slices_per_frame, fs.height, fs.width, p);
    const std::size_t nz = fs.slices_per_frame / p.depth;
    const std::size_t ny = fs.height / p.height;
    const std::size_t nx = fs.width / p.width;
    Mat<T> out(static_cast<Eigen::Index>(fs.frames * per_frame), static_cast<Eigen::Index>(p.volume()));
    for (std::size_t t = 0; t < fs.frames; ++t) {
        for (std::size_t pz = 0; pz < nz; ++pz)
            for (std::size_t py = 0; py < ny; ++py)
                for (std::size_t px = 0; px < nx; ++px) {
                    const auto r = static_cast<Eigen::Index>(t * per_frame + (pz * ny + py) * nx + px);
                    Eigen::Index c = 0;
                    for (std::size_t dz = 0; dz < p.depth; ++dz)
                        for (std::size_t dy = 0; dy < p.height; ++dy)
                            for (std::size_t dx = 0; dx < p.width; ++dx) {
                                out(r, c++) = static_cast<T>(
                                    fs.at(t, pz * p.depth + dz, py * p.height + dy, px * p.width + dx));
                            }
                }
    }
    return out;
}

/// Adjoint of extract_patches: maps per-patch gradients back onto voxels.
template <typename T>
std::vector<T> scatter_patches(const Mat<T>& dpatches, const FrameStack& shape, const PatchShape& p) {
    const std::size_t per_frame = patches_per_frame(shape.slices_per_frame, shape.height, shape.width, p);
    const std::size_t nz = shape.slices_per_frame / p.depth;
    const std::size_t ny = shape.height / p.height;
    const std::size_t nx = shape.width / p.width;
    std::vector<T> out(shape.frames * shape.frame_size(), T(0));
    for (std::size_t t = 0; t < shape.frames; ++t) {
        for (std::size_t pz = 0; pz < nz; ++pz)
            for (std::size_t py = 0; py < ny; ++py)
                for (std::size_t px = 0; px < nx; ++px) {
                    const auto r = static_cast<Eigen::Index>(t * per_frame + (pz * ny + py) * nx + px);
                    Eigen::Index c = 0;
                    for (std::size_t dz = 0; dz < p.depth; ++dz)
                        for (std::size_t dy = 0; dy < p.height; ++dy)
                            for (std::size_t dx = 0; dx < p.width; ++dx) {
                                const std::size_t z = pz * p.depth + dz;
                                const std::size_t y = py * p.height + dy;
                                const std::size_t x = px * p.width + dx;
                                out[((t * shape.slices_per_frame + z) * shape.height + y) * shape.width + x] +=
                                    dpatches(r, c++);
                            }
                }
    }
    return out;
}

template <typename T>
struct EncoderCache {
    Mat<T> patches;
    Mat<T> means;  // T x E mean patch token per frame
};

template <typename T>
TokenGrid<T> encode_frames(const FrameStack& fs, const PatchShape& patch, const EncoderParams<T>& params,
                           EncoderCache<T>* cache = nullptr) {
    require(fs.frames >= 1, "encode_frames: frame stack is empty");
    const std::size_t per_frame = patches_per_frame(fs.slices_per_frame, fs.height, fs.width, patch);
    require(static_cast<std::size_t>(params.patch_proj.weight.rows()) == patch.volume(),
            "encode_frames: patch projection input size does not match the patch volume");
    Mat<T> patches = extract_patches<T>(fs, patch);
    const Mat<T> patch_tokens = params.patch_proj.forward(patches);
    const Eigen::Index e = patch_tokens.cols();
    const auto np = static_cast<Eigen::Index>(per_frame);

    Mat<T> means(static_cast<Eigen::Index>(fs.frames), e);
    for (std::size_t t = 0; t < fs.frames; ++t) {
        means.row(static_cast<Eigen::Index>(t)) =
            patch_tokens.middleRows(static_cast<Eigen::Index>(t) * np, np).colwise().mean();
    }
    const Mat<T> globals = params.global_proj.forward(means);

    TokenGrid<T> grid;
    grid.frames = fs.frames;
    grid.tokens_per_frame = per_frame + 1;
    grid.tokens.resize(static_cast<Eigen::Index>(fs.frames * grid.tokens_per_frame), e);
    for (std::size_t t = 0; t < fs.frames; ++t) {
        grid.tokens.row(grid.row(t, 0)) = globals.row(static_cast<Eigen::Index>(t));
        grid.tokens.middleRows(grid.row(t, 1), np) = patch_tokens.middleRows(static_cast<Eigen::Index>(t) * np, np);
    }
    if (cache != nullptr) *cache = {std::move(patches), std::move(means)};
    return grid;
}

/// Gradients of encode_frames w.r.t. its parameters (accumulated) and voxels (returned).
template <typename T>
std::vector<T> encode_frames_backward(const FrameStack& fs, const PatchShape& patch, const EncoderParams<T>& params,
                                      const EncoderCache<T>& cache, const TokenGrid<T>& dgrid,
                                      EncoderParams<T>& grad) {
    const auto np = static_cast<Eigen::Index>(dgrid.tokens_per_frame - 1);
    const Eigen::Index e = dgrid.tokens.cols();
    Mat<T> dglobals(static_cast<Eigen::Index>(dgrid.frames), e);
    Mat<T> dpatch_tokens(static_cast<Eigen::Index>(dgrid.frames) * np, e);
    for (std::size_t t = 0; t < dgrid.frames; ++t) {
        dglobals.row(static_cast<Eigen::Index>(t)) = dgrid.tokens.row(dgrid.row(t, 0));
        dpatch_tokens.middleRows(static_cast<Eigen::Index>(t) * np, np) = dgrid.tokens.middleRows(dgrid.row(t, 1), np);
    }
    const Mat<T> dmeans = params.global_proj.backward(cache.means, dglobals, grad.global_proj);
    for (std::size_t t = 0; t < dgrid.frames; ++t) {
        const RowVec<T> share = dmeans.row(static_cast<Eigen::Index>(t)) / static_cast<T>(np);
        dpatch_tokens.middleRows(static_cast<Eigen::Index>(t) * np, np).rowwise() += share;
    }
    const Mat<T> dpatches = params.patch_proj.backward(cache.patches, dpatch_tokens, grad.patch_proj);
    return scatter_patches<T>(dpatches, fs, patch);
}

// ---------------------------------------------------------------------------
// Question embedding

/// Word vocabulary. Index 0 is reserved for unknown words; word i of the
/// token list has embedding row i + 1.
class Vocab {
  public:
    Vocab() = default;
    explicit Vocab(std::vector<std::string> words) : words_(std::move(words)) {
        for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], i + 1);
    }

    /// Most frequent lowercased words of a corpus; ties broken alphabetically.
    static Vocab build(const std::vector<std::string>& corpus, std::size_t max_size, std::size_t min_count = 1) {
        std::map<std::string, std::size_t> counts;
        for (const auto& line : corpus)
            for (auto& w : word_tokens(line)) ++counts[w];
        std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        std::vector<std::string> words;
        for (const auto& [w, c] : ranked) {
            if (c < min_count || words.size() >= max_size) break;
            words.push_back(w);
        }
        return Vocab(std::move(words));
    }

    static Vocab load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ValidationError("cannot open vocabulary " + path);
        std::vector<std::string> words;
        std::string line;
        while (std::getline(is, line)) {
            line = trim(line);
            if (!line.empty()) words.push_back(line);
        }
        return Vocab(std::move(words));
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw RuntimeError("cannot write vocabulary " + path);
        for (const auto& w : words_) os << w << '\n';
    }

    std::size_t size() const { return words_.size(); }
    std::size_t rows() const { return words_.size() + 1; }
    std::size_t lookup(const std::string& word) const {
        const auto it = index_.find(word);
        return it == index_.end() ? 0 : it->second;
    }
    const std::vector<std::string>& words() const { return words_; }

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct TextEmbedParams {
    std::size_t max_len = 32;
    Mat<T> table;  // vocab rows x E; row 0 is the unknown-word embedding

    TextEmbedParams() = default;
    TextEmbedParams(std::size_t vocab_rows, std::size_t embed_dim, std::size_t n_q)
        : max_len(n_q), table(Mat<T>::Zero(static_cast<Eigen::Index>(vocab_rows), static_cast<Eigen::Index>(embed_dim))) {}

    void init(std::mt19937_64& rng) { init_uniform(table, static_cast<std::size_t>(table.cols()), rng); }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".table", self.table);
    }
};

/// Q: N_q x E with a validity mask; masked rows are exactly zero.
template <typename T>
struct TextEmbedding {
    Mat<T> tokens;
    std::vector<bool> mask;

    std::size_t active() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }

    /// The unmasked rows, in order.
    Mat<T> active_rows() const {
        Mat<T> out(static_cast<Eigen::Index>(active()), tokens.cols());
        Eigen::Index r = 0;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) out.row(r++) = tokens.row(static_cast<Eigen::Index>(i));
        return out;
    }
};

template <typename T>
TextEmbedding<T> embed_text(const std::string& question, const Vocab& vocab, const TextEmbedParams<T>& params) {
    require(!trim(question).empty(), "embed_text: question is empty");
    require(static_cast<std::size_t>(params.table.rows()) == vocab.rows(),
            "embed_text: embedding table rows do not match the vocabulary size");
    require(params.max_len >= 1, "embed_text: n_q must be >= 1");
    const auto words = word_tokens(question);
    require(!words.empty(), "embed_text: question contains no word tokens");
    TextEmbedding<T> out;
    out.tokens = Mat<T>::Zero(static_cast<Eigen::Index>(params.max_len), params.table.cols());
    out.mask.assign(params.max_len, false);
    const std::size_t n = std::min(words.size(), params.max_len);
    for (std::size_t i = 0; i < n; ++i) {
        out.tokens.row(static_cast<Eigen::Index>(i)) = params.table.row(static_cast<Eigen::Index>(vocab.lookup(words[i])));
        out.mask[i] = true;
    }
    return out;
}

}  // namespace mu2

// SPDX-License-Identifier: Apache-2.0
//
// CT volume ingest: min-max normalization, trilinear resampling with center
// crop, framing into T blocks of K slices, and additive Gaussian noise.
//
// Binary volume container (little-endian):
//   int32 D, int32 H, int32 W, float64 spacing[3], float32 voxels[D*H*W]
// with voxels stored D-major (x fastest).
//
// Frame stack container (little-endian):
//   int32 T, int32 K, int32 H, int32 W, float64 data[T*K*H*W]

#pragma once

#include "mu2/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mu2 {

static_assert(std::endian::native == std::endian::little,
              "binary containers are read and written as native little-endian");

struct Volume {
    std::size_t depth = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<double> voxels;

    Volume() = default;
    Volume(std::size_t d, std::size_t h, std::size_t w, double fill = 0.0)
        : depth(d), height(h), width(w), voxels(d * h * w, fill) {}

    std::size_t size() const { return voxels.size(); }
    double& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[(z * height + y) * width + x]; }
    double at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[(z * height + y) * width + x]; }
};

struct FrameTarget {
    std::size_t frames = 8;
    std::size_t slices_per_frame = 32;
    std::size_t height = 256;
    std::size_t width = 256;

    std::size_t depth() const { return frames * slices_per_frame; }
};

/// T frames of K slices each; frame t covers depth slices [t*K, (t+1)*K).
struct FrameStack {
    std::size_t frames = 0;
    std::size_t slices_per_frame = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    std::size_t frame_size() const { return slices_per_frame * height * width; }
    std::size_t depth() const { return frames * slices_per_frame; }
    double at(std::size_t t, std::size_t k, std::size_t y, std::size_t x) const {
        return data[((t * slices_per_frame + k) * height + y) * width + x];
    }
    const double* frame(std::size_t t) const { return data.data() + t * frame_size(); }
};

inline void validate_volume(const Volume& v) {
    require(v.depth >= 1 && v.height >= 1 && v.width >= 1, "volume dimensions must be >= 1");
    require(v.voxels.size() == v.depth * v.height * v.width, "volume voxel count does not match its dimensions");
}

/// (x - min) / (max - min); a constant volume maps to all zeros.
inline Volume min_max_normalize(const Volume& v) {
    validate_volume(v);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        if (!std::isfinite(v.voxels[i])) {
            std::ostringstream os;
            os << "non-finite voxel at flat index " << i;
            throw ValidationError(os.str());
        }
    }
    const auto [lo_it, hi_it] = std::minmax_element(v.voxels.begin(), v.voxels.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    Volume out = v;
    if (hi == lo) {
        std::fill(out.voxels.begin(), out.voxels.end(), 0.0);
        return out;
    }
    const double range = hi - lo;
    for (double& x : out.voxels) x = (x - lo) / range;
    return out;
}

namespace detail {

struct AxisSample {
    std::size_t lo;
    std::size_t hi;
    double frac;
};

// Half-pixel-centre mapping from an output grid of `out` samples over an
// input axis of `in` samples, clamped to the edges. `offset` shifts the output
// window inside a virtual grid of `virt` samples (center crop).
inline std::vector<AxisSample> axis_samples(std::size_t in, std::size_t virt, std::size_t out, std::size_t offset) {
    std::vector<AxisSample> s(out);
    const double scale = static_cast<double>(in) / static_cast<double>(virt);
    for (std::size_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i + offset) + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(src));
        const std::size_t hi = std::min(lo + 1, in - 1);
        s[i] = {lo, hi, src - static_cast<double>(lo)};
    }
    return s;
}

inline double lerp(double a, double b, double f) { return f == 0.0 ? a : a + (b - a) * f; }

}  // namespace detail

/// Splits a volume whose depth is exactly T*K into T contiguous frames.
inline FrameStack partition_frames(Volume v, std::size_t frames, std::size_t slices_per_frame) {
    validate_volume(v);
    require(frames >= 1 && slices_per_frame >= 1, "frame count and slices per frame must be >= 1");
    if (v.depth != frames * slices_per_frame) {
        std::ostringstream os;
        os << "depth " << v.depth << " cannot be divided into " << frames << " frames of " << slices_per_frame
           << " slices";
        throw ValidationError(os.str());
    }
    FrameStack fs;
    fs.frames = frames;
    fs.slices_per_frame = slices_per_frame;
    fs.height = v.height;
    fs.width = v.width;
    fs.data = std::move(v.voxels);
    return fs;
}

/// Trilinear resample to the target grid. Depth is resized to T*K directly;
/// the in-plane axes are scaled by one common factor so that both cover the
/// target, and the overshooting axis is center-cropped.
inline Volume resample(const Volume& v, const FrameTarget& target) {
    validate_volume(v);
    require(target.frames >= 1 && target.slices_per_frame >= 1 && target.height >= 1 && target.width >= 1,
            "target dimensions must be positive");
    const std::size_t out_d = target.depth();
    const double scale = std::max(static_cast<double>(target.height) / static_cast<double>(v.height),
                                  static_cast<double>(target.width) / static_cast<double>(v.width));
    const auto virt_h = std::max(target.height, static_cast<std::size_t>(std::llround(v.height * scale)));
    const auto virt_w = std::max(target.width, static_cast<std::size_t>(std::llround(v.width * scale)));

    const auto zs = detail::axis_samples(v.depth, out_d, out_d, 0);
    const auto ys = detail::axis_samples(v.height, virt_h, target.height, (virt_h - target.height) / 2);
    const auto xs = detail::axis_samples(v.width, virt_w, target.width, (virt_w - target.width) / 2);

    Volume out(out_d, target.height, target.width);
    out.spacing = {v.spacing[0] * static_cast<double>(v.depth) / static_cast<double>(out_d),
                   v.spacing[1] * static_cast<double>(v.height) / static_cast<double>(virt_h),
                   v.spacing[2] * static_cast<double>(v.width) / static_cast<double>(virt_w)};
    for (std::size_t z = 0; z < out_d; ++z) {
        const auto& sz = zs[z];
        for (std::size_t y = 0; y < target.height; ++y) {
            const auto& sy = ys[y];
            for (std::size_t x = 0; x < target.width; ++x) {
                const auto& sx = xs[x];
                const double c00 = detail::lerp(v.at(sz.lo, sy.lo, sx.lo), v.at(sz.lo, sy.lo, sx.hi), sx.frac);
                const double c01 = detail::lerp(v.at(sz.lo, sy.hi, sx.lo), v.at(sz.lo, sy.hi, sx.hi), sx.frac);
                const double c10 = detail::lerp(v.at(sz.hi, sy.lo, sx.lo), v.at(sz.hi, sy.lo, sx.hi), sx.frac);
                const double c11 = detail::lerp(v.at(sz.hi, sy.hi, sx.lo), v.at(sz.hi, sy.hi, sx.hi), sx.frac);
                const double c0 = detail::lerp(c00, c01, sy.frac);
                const double c1 = detail::lerp(c10, c11, sy.frac);
                out.at(z, y, x) = detail::lerp(c0, c1, sz.frac);
            }
        }
    }
    return out;
}

inline FrameStack resample_and_frame(const Volume& v, const FrameTarget& target) {
    return partition_frames(resample(v, target), target.frames, target.slices_per_frame);
}

/// Adds i.i.d. N(0, sigma^2) noise; sigma == 0 returns the input unchanged.
inline FrameStack add_noise(const FrameStack& fs, double sigma, std::uint64_t seed) {
    require(sigma >= 0.0 && std::isfinite(sigma), "noise sigma must be a finite non-negative number");
    FrameStack out = fs;
    if (sigma == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& x : out.data) x += noise(rng);
    return out;
}

/// Full ingest chain used by the CLI and the tokenizer front end.
inline FrameStack ingest(const Volume& v, const FrameTarget& target, double sigma = 0.0, std::uint64_t seed = 0) {
    return add_noise(resample_and_frame(min_max_normalize(v), target), sigma, seed);
}

// ---------------------------------------------------------------------------
// Binary containers

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T value{};
    if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
        throw ValidationError(std::string("truncated container while reading ") + what);
    }
    return value;
}

}  // namespace detail

inline void write_volume(const std::string& path, const Volume& v) {
    validate_volume(v);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeError("cannot open " + path + " for writing");
    detail::write_pod<std::int32_t>(os, static_cast<std::int32_t>(v.depth));
    detail::write_pod<std::int32_t>(os, static_cast<std::int32_t>(v.height));
    detail::write_pod<std::int32_t>(os, static_cast<std::int32_t>(v.width));
    for (double s : v.spacing) detail::write_pod<double>(os, s);
    std::vector<float> buf(v.voxels.begin(), v.voxels.end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!os) throw RuntimeError("write failed for " + path);
}

inline Volume read_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open volume " + path);
    const auto d = detail::read_pod<std::int32_t>(is, "depth");
    const auto h = detail::read_pod<std::int32_t>(is, "height");
    const auto w = detail::read_pod<std::int32_t>(is, "width");
    require(d >= 1 && h >= 1 && w >= 1, "volume header has non-positive dimensions in " + path);
    Volume v(static_cast<std::size_t>(d), static_cast<std::size_t>(h), static_cast<std::size_t>(w));
    for (double& s : v.spacing) s = detail::read_pod<double>(is, "spacing");
    for (double s : v.spacing) require(s > 0.0 && std::isfinite(s), "volume spacing must be positive in " + path);
    std::vector<float> buf(v.size());
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
        throw ValidationError("truncated voxel payload in " + path);
    }
    std::copy(buf.begin(), buf.end(), v.voxels.begin());
    return v;
}

inline void write_frames(const std::string& path, const FrameStack& fs) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeError("cannot open " + path + " for writing");
    for (std::size_t d : {fs.frames, fs.slices_per_frame, fs.height, fs.width}) {
        detail::write_pod<std::int32_t>(os, static_cast<std::int32_t>(d));
    }
    os.write(reinterpret_cast<const char*>(fs.data.data()), static_cast<std::streamsize>(fs.data.size() * sizeof(double)));
    if (!os) throw RuntimeError("write failed for " + path);
}

inline FrameStack read_frames(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open frame stack " + path);
    FrameStack fs;
    std::array<std::int32_t, 4> dims{};
    for (auto& d : dims) {
        d = detail::read_pod<std::int32_t>(is, "frame header");
        require(d >= 1, "frame stack header has non-positive dimensions in " + path);
    }
    fs.frames = static_cast<std::size_t>(dims[0]);
    fs.slices_per_frame = static_cast<std::size_t>(dims[1]);
    fs.height = static_cast<std::size_t>(dims[2]);
    fs.width = static_cast<std::size_t>(dims[3]);
    fs.data.resize(fs.frames * fs.frame_size());
    if (!is.read(reinterpret_cast<char*>(fs.data.data()), static_cast<std::streamsize>(fs.data.size() * sizeof(double)))) {
        throw ValidationError("truncated frame payload in " + path);
    }
    return fs;
}

}  // namespace mu2

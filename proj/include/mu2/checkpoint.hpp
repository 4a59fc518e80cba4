// SPDX-License-Identifier: Apache-2.0
//
// Parameter checkpoints: a directory holding params.bin (concatenated
// little-endian float64 tensors in visit order) and manifest.txt with one
// "name rows cols offset" line per tensor.

#pragma once

#include "mu2/nn.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace mu2 {

template <class P>
void save_checkpoint(const P& params, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    std::string blob;
    std::size_t offset = 0;
    for_each_param(params, "", [&](const std::string& name, const auto& m) {
        manifest << name << ' ' << m.rows() << ' ' << m.cols() << ' ' << offset << '\n';
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double v = static_cast<double>(m.data()[i]);
            blob.append(reinterpret_cast<const char*>(&v), sizeof v);
        }
        offset += static_cast<std::size_t>(m.size());
    });
    const std::filesystem::path d(dir);
    std::ofstream(d / "params.bin", std::ios::binary | std::ios::trunc) << blob;
    std::ofstream(d / "manifest.txt", std::ios::trunc) << manifest.str();
}

/// Fills `params`, whose shapes must already match the checkpoint.
template <class P>
void load_checkpoint(P& params, const std::string& dir) {
    const std::filesystem::path d(dir);
    std::ifstream man(d / "manifest.txt");
    std::ifstream bin(d / "params.bin", std::ios::binary);
    if (!man || !bin) throw ValidationError("checkpoint: cannot open " + dir);
    for_each_param(params, "", [&](const std::string& name, auto& m) {
        std::string got;
        Eigen::Index rows = 0, cols = 0;
        std::size_t offset = 0;
        if (!(man >> got >> rows >> cols >> offset)) throw ValidationError("checkpoint: manifest ends before " + name);
        if (got != name || rows != m.rows() || cols != m.cols()) {
            throw ValidationError("checkpoint: expected " + name + " " + std::to_string(m.rows()) + "x" +
                                  std::to_string(m.cols()) + ", found " + got + " " + std::to_string(rows) + "x" +
                                  std::to_string(cols));
        }
        bin.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            double v = 0.0;
            if (!bin.read(reinterpret_cast<char*>(&v), sizeof v)) throw ValidationError("checkpoint: params.bin truncated at " + name);
            m.data()[i] = static_cast<std::remove_reference_t<decltype(m.data()[0])>>(v);
        }
    });
    std::string extra;
    if (man >> extra) throw ValidationError("checkpoint: unexpected tensor " + extra);
}

/// Matrix list file: int32 count, then per matrix int32 rows, int32 cols
/// and rows*cols float64 values in row-major order.
inline void write_matrices(const std::string& path, const std::vector<Mat<double>>& mats) {
    std::ostringstream os;
    auto put_i32 = [&](std::int64_t v) {
        const auto x = static_cast<std::int32_t>(v);
        os.write(reinterpret_cast<const char*>(&x), sizeof x);
    };
    put_i32(static_cast<std::int64_t>(mats.size()));
    for (const auto& m : mats) {
        put_i32(m.rows());
        put_i32(m.cols());
        os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot open " + path + " for writing");
    out << os.str();
}

inline std::vector<Mat<double>> read_matrices(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open " + path);
    auto get_i32 = [&]() {
        std::int32_t x = 0;
        if (!is.read(reinterpret_cast<char*>(&x), sizeof x) || x < 0) throw ValidationError(path + ": malformed header");
        return static_cast<Eigen::Index>(x);
    };
    const Eigen::Index count = get_i32();
    std::vector<Mat<double>> out;
    for (Eigen::Index i = 0; i < count; ++i) {
        const Eigen::Index r = get_i32();
        const Eigen::Index c = get_i32();
        Mat<double> m(r, c);
        if (!is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
            throw ValidationError(path + ": truncated data");
        }
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace mu2

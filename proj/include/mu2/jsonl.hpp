// SPDX-License-Identifier: Apache-2.0
//
// Line-delimited JSON records, stable content hashes, and atomic file writes.

#pragma once

#include "json.hpp"
#include "mu2/tensor.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace mu2 {

using json = nlohmann::json;

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
inline std::string content_hash(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open " + path);
    std::vector<json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

/// Reads a JSONL file if it exists; a missing file is an empty record set.
inline std::vector<json> read_jsonl_if_exists(const std::string& path) {
    if (!std::filesystem::exists(path)) return {};
    return read_jsonl(path);
}

/// Writes `contents` to a sibling temporary file and renames it over `path`.
inline void write_file_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw RuntimeError("cannot open " + tmp + " for writing");
        os << contents;
        if (!os) throw RuntimeError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::string to_jsonl(const std::vector<json>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.dump();
        out += '\n';
    }
    return out;
}

inline void write_jsonl(const std::string& path, const std::vector<json>& records) {
    write_file_atomic(path, to_jsonl(records));
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

/// Lines of a text file with trailing carriage returns removed.
inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        out.push_back(line);
    }
    return out;
}

}  // namespace mu2

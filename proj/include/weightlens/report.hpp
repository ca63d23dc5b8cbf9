// SPDX-License-Identifier: Apache-2.0
//
// Machine-readable report envelope shared by every CLI subcommand, plus the
// small utilities behind it: FNV-1a 64-bit file digests for provenance,
// RFC 4180 CSV output and a deterministic indexed parallel-for.

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "weightlens/tensor_io.hpp"
#include "weightlens/version.hpp"

namespace weightlens::report {

// FNV-1a, 64-bit: offset basis 0xcbf29ce484222325, prime 0x100000001b3.
inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::byte b : bytes) {
        h ^= std::to_integer<std::uint8_t>(b);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io::IoError("cannot open for digest: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        const auto n = static_cast<std::size_t>(in.gcount());
        for (std::size_t i = 0; i < n; ++i) {
            h ^= static_cast<std::uint8_t>(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (in.eof()) break;
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return std::string("fnv1a64:") + hex;
}

struct Envelope {
    std::string command;
    std::vector<std::pair<std::string, std::string>> inputs;  // path, digest
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    std::vector<std::string> warnings;
    nlohmann::ordered_json extra;  // command-specific summary values

    void add_input(const std::filesystem::path& p) {
        inputs.emplace_back(p.string(), file_digest(p));
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["tool_version"] = kToolVersion;
        j["schema_version"] = kReportSchemaVersion;
        j["command"] = command;
        auto ins = nlohmann::ordered_json::array();
        for (const auto& [p, d] : inputs) {
            nlohmann::ordered_json e;
            e["path"] = p;
            e["digest"] = d;
            ins.push_back(std::move(e));
        }
        j["inputs"] = std::move(ins);
        j["rows"] = rows;
        j["warnings"] = warnings;
        if (!extra.is_null()) j["extra"] = extra;
        return j;
    }
};

inline std::string csv_escape(const std::string& s) {
    bool need_quotes = false;
    for (char c : s) {
        if (c == ',' || c == '"' || c == '\n' || c == '\r') {
            need_quotes = true;
            break;
        }
    }
    if (!need_quotes) return s;
    std::string out;
    out.reserve(s.size() + 2);
    out.push_back('"');
    for (char c : s) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline std::string csv_cell(const nlohmann::ordered_json& v) {
    if (v.is_null()) return "";
    if (v.is_string()) return csv_escape(v.get<std::string>());
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_structured()) return csv_escape(v.dump());  // arrays/objects carry commas
    return v.dump();
}

// Rows must be homogeneous objects; the header comes from the first row's
// key order. Records end with CRLF per RFC 4180.
inline std::string rows_to_csv(const nlohmann::ordered_json& rows) {
    std::ostringstream out;
    if (!rows.is_array() || rows.empty()) return "";
    std::vector<std::string> keys;
    for (const auto& [k, v] : rows.front().items()) keys.push_back(k);
    for (std::size_t i = 0; i < keys.size(); ++i)
        out << (i ? "," : "") << csv_escape(keys[i]);
    out << "\r\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < keys.size(); ++i) {
            out << (i ? "," : "");
            if (row.contains(keys[i])) out << csv_cell(row.at(keys[i]));
        }
        out << "\r\n";
    }
    return out.str();
}

// Fixed-width text rendering of the same rows, for terminals.
inline std::string rows_to_table(const nlohmann::ordered_json& rows) {
    if (!rows.is_array() || rows.empty()) return "(no rows)\n";
    std::vector<std::string> keys;
    for (const auto& [k, v] : rows.front().items()) keys.push_back(k);
    std::vector<std::vector<std::string>> cells;
    cells.emplace_back(keys);
    for (const auto& row : rows) {
        std::vector<std::string> line;
        for (const auto& k : keys)
            line.push_back(row.contains(k) ? csv_cell(row.at(k)) : "");
        cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(keys.size(), 0);
    for (const auto& line : cells)
        for (std::size_t i = 0; i < line.size(); ++i)
            width[i] = std::max(width[i], line[i].size());
    std::ostringstream out;
    for (const auto& line : cells) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            out << line[i] << std::string(width[i] - line[i].size(), ' ');
            out << (i + 1 == line.size() ? "" : "  ");
        }
        out << "\n";
    }
    return out.str();
}

// Number of worker threads: WEIGHTLENS_THREADS, clamped to [1, hardware].
inline unsigned thread_count_from_env() {
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("WEIGHTLENS_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return std::min<unsigned>(static_cast<unsigned>(v), hw);
    }
    return 1;  // deterministic by default; output never depends on this
}

// Runs fn(i) for i in [0, n). Work items must be independent; each writes
// only to its own output slot, so scheduling cannot change any result.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const unsigned threads = std::min<std::size_t>(thread_count_from_env(), n ? n : 1);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex err_mutex;
    std::atomic<std::size_t> next{0};
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace weightlens::report

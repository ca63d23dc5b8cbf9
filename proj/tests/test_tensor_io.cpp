// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "weightlens/rng.hpp"
#include "weightlens/tensor_io.hpp"

using namespace weightlens;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "weightlens_io_tests";
        fs::create_directories(d);
        return d;
    }();
    return dir / name;
}

// Independent reference writer: byte layout assembled by hand.
void write_raw_file(const fs::path& path, const std::string& header_json,
                    const std::vector<std::uint8_t>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const std::uint64_t n = header_json.size();
    char len[8];
    for (int i = 0; i < 8; ++i) len[i] = static_cast<char>((n >> (8 * i)) & 0xFF);
    out.write(len, 8);
    out.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
}

std::vector<std::uint8_t> le_bytes_f32(const std::vector<float>& vals) {
    std::vector<std::uint8_t> out(vals.size() * 4);
    std::memcpy(out.data(), vals.data(), out.size());  // little-endian host
    return out;
}

std::vector<std::uint8_t> read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("read_header parses a hand-built file") {
    const auto path = temp_file("hand.safetensors");
    write_raw_file(path, R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})",
                   le_bytes_f32({1.0f, 2.0f}));

    const auto idx = io::read_header(path);
    REQUIRE(idx.metas().size() == 1);
    const auto& m = idx.metas()[0];
    CHECK(m.name == "t");
    CHECK(m.dtype.tag == io::DTypeTag::F32);
    CHECK(m.shape == std::vector<std::uint64_t>{2});
    CHECK(m.begin == 0);
    CHECK(m.end == 8);

    const auto rec = io::load_tensor(idx, "t");
    CHECK(rec.values == std::vector<double>{1.0, 2.0});
    CHECK_FALSE(rec.has_nonfinite);
}

TEST_CASE("metadata-only file yields empty metas") {
    const auto path = temp_file("meta_only.safetensors");
    write_raw_file(path, R"({"__metadata__":{"k":"v"}})", {});
    const auto idx = io::read_header(path);
    CHECK(idx.metas().empty());
    REQUIRE(idx.metadata().count("k") == 1);
    CHECK(idx.metadata().at("k") == "v");
}

TEST_CASE("malformed headers are rejected with the offending tensor named") {
    SECTION("offsets beyond end of file") {
        const auto path = temp_file("past_eof.safetensors");
        write_raw_file(path, R"({"big":{"dtype":"F32","shape":[100],"data_offsets":[0,400]}})",
                       le_bytes_f32({1.0f}));
        CHECK_THROWS_MATCHES(io::read_header(path), io::MalformedHeader,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("big")));
    }
    SECTION("declared header length exceeds file") {
        const auto path = temp_file("bad_len.safetensors");
        std::ofstream out(path, std::ios::binary);
        const char bytes[9] = {'\xff', '\xff', 0, 0, 0, 0, 0, 0, '{'};
        out.write(bytes, 9);
        out.close();
        CHECK_THROWS_AS(io::read_header(path), io::MalformedHeader);
    }
    SECTION("invalid JSON") {
        const auto path = temp_file("bad_json.safetensors");
        write_raw_file(path, "{not json", {});
        CHECK_THROWS_AS(io::read_header(path), io::MalformedHeader);
    }
    SECTION("overlapping ranges") {
        const auto path = temp_file("overlap.safetensors");
        write_raw_file(path,
                       R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
                       R"("b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
                       le_bytes_f32({1, 2, 3}));
        CHECK_THROWS_AS(io::read_header(path), io::MalformedHeader);
    }
    SECTION("byte range inconsistent with shape") {
        const auto path = temp_file("bad_range.safetensors");
        write_raw_file(path, R"({"t":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})",
                       le_bytes_f32({1, 2}));
        CHECK_THROWS_AS(io::read_header(path), io::MalformedHeader);
    }
}

TEST_CASE("load_tensor error paths") {
    const auto path = temp_file("errors.safetensors");
    write_raw_file(path,
                   R"({"f":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
                   R"("i":{"dtype":"I64","shape":[1],"data_offsets":[4,12]}})",
                   std::vector<std::uint8_t>(12, 0));
    const auto idx = io::read_header(path);
    CHECK_THROWS_AS(io::load_tensor(idx, "missing"), io::UnknownTensor);
    CHECK_THROWS_AS(io::load_tensor(idx, "i"), io::UnsupportedDType);
    CHECK_NOTHROW(io::load_tensor(idx, "f"));
}

TEST_CASE("16-bit payloads decode per IEEE") {
    const auto path = temp_file("halfs.safetensors");
    // f16 0x3C00 = 1.0, bf16 0x3F80 = 1.0
    write_raw_file(path,
                   R"({"h":{"dtype":"F16","shape":[1],"data_offsets":[0,2]},)"
                   R"("b":{"dtype":"BF16","shape":[1],"data_offsets":[2,4]}})",
                   {0x00, 0x3C, 0x80, 0x3F});
    const auto idx = io::read_header(path);
    CHECK(io::load_tensor(idx, "h").values == std::vector<double>{1.0});
    CHECK(io::load_tensor(idx, "b").values == std::vector<double>{1.0});
}

TEST_CASE("nonfinite payloads set the flag and writer policy rejects them") {
    io::TensorRecord rec;
    rec.name = "t";
    rec.shape = {2};
    rec.values = {1.0, std::numeric_limits<double>::quiet_NaN()};
    rec.source_dtype = io::DType::f32();

    const auto path = temp_file("nan.safetensors");
    io::write_model({rec}, {io::DType::f32()}, path);
    const auto idx = io::read_header(path);
    CHECK(io::load_tensor(idx, "t").has_nonfinite);

    CHECK_THROWS_AS(io::write_model({rec}, {io::DType::f32()}, path, /*forbid_nonfinite=*/true),
                    io::NonFiniteValue);
}

TEST_CASE("write then read round-trips values and header order") {
    std::vector<io::TensorRecord> recs(3);
    recs[0] = {"zz_first", {2, 2}, {1.0, -2.5, 3.25, 0.125}, io::DType::f32(), false};
    recs[1] = {"aa_second", {3}, {-0.5, 0.5, 99.0}, io::DType::f64(), false};
    recs[2] = {"mm_third", {1}, {42.0}, io::DType::f32(), false};

    const auto path = temp_file("order.safetensors");
    io::write_model(recs, {io::DType::f32(), io::DType::f64(), io::DType::f32()}, path);

    const auto idx = io::read_header(path);
    REQUIRE(idx.metas().size() == 3);
    CHECK(idx.metas()[0].name == "zz_first");   // insertion order, not sorted
    CHECK(idx.metas()[1].name == "aa_second");
    CHECK(idx.metas()[2].name == "mm_third");
    CHECK(io::load_tensor(idx, "zz_first").values == recs[0].values);
    CHECK(io::load_tensor(idx, "aa_second").values == recs[1].values);
    CHECK(io::load_tensor(idx, "mm_third").values == recs[2].values);
}

TEST_CASE("1024-element random f32 tensor round-trips bit-exactly") {
    rng::Xoshiro256pp r(99);
    io::TensorRecord rec;
    rec.name = "rand";
    rec.shape = {1024};
    rec.source_dtype = io::DType::f32();
    for (int i = 0; i < 1024; ++i)
        rec.values.push_back(io::decode_f32(io::encode_f32(r.gaussian())));

    const auto p1 = temp_file("rt1.safetensors");
    const auto p2 = temp_file("rt2.safetensors");
    io::write_model({rec}, {io::DType::f32()}, p1);
    const auto idx = io::read_header(p1);
    const auto back = io::load_tensor(idx, "rand");
    CHECK(back.values == rec.values);

    // Write what was read: the files must be byte-identical.
    io::write_model({back}, {io::DType::f32()}, p2);
    CHECK(read_all(p1) == read_all(p2));
}

TEST_CASE("write/read round trip across mixed dtypes is byte-stable") {
    rng::Xoshiro256pp r(4242);
    const io::DType dtypes[3] = {io::DType::f32(), io::DType::f16(), io::DType::bf16()};
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<io::TensorRecord> recs;
        std::vector<io::DType> targets;
        const int n_tensors = 1 + static_cast<int>(r.next() % 6);
        for (int t = 0; t < n_tensors; ++t) {
            const auto& dt = dtypes[r.next() % 3];
            io::TensorRecord rec;
            rec.name = "t" + std::to_string(trial) + "_" + std::to_string(t);
            const auto rows = 1 + r.next() % 8, cols = 1 + r.next() % 8;
            rec.shape = {rows, cols};
            rec.source_dtype = dt;
            for (std::uint64_t i = 0; i < rows * cols; ++i) {
                // Start from a value already on the target grid.
                double v = r.gaussian();
                if (dt.tag == io::DTypeTag::F16) v = io::decode_f16(io::encode_f16(v));
                else if (dt.tag == io::DTypeTag::BF16) v = io::decode_bf16(io::encode_bf16(v));
                else v = io::decode_f32(io::encode_f32(v));
                rec.values.push_back(v);
            }
            recs.push_back(std::move(rec));
            targets.push_back(dt);
        }
        const auto p1 = temp_file("mixed1.safetensors");
        const auto p2 = temp_file("mixed2.safetensors");
        io::write_model(recs, targets, p1);
        const auto idx = io::read_header(p1);
        std::vector<io::TensorRecord> back;
        std::vector<io::DType> back_targets;
        for (const auto& m : idx.metas()) {
            back.push_back(io::load_tensor(idx, m.name));
            back_targets.push_back(m.dtype);
        }
        io::write_model(back, back_targets, p2);
        REQUIRE(read_all(p1) == read_all(p2));
    }
}

TEST_CASE("iter_tensors filters in header order and reports skips") {
    const auto path = temp_file("iter.safetensors");
    write_raw_file(path,
                   R"({"a.attn.q":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
                   R"("a.mlp.up":{"dtype":"F32","shape":[1],"data_offsets":[4,8]},)"
                   R"("b.attn.k":{"dtype":"F32","shape":[1],"data_offsets":[8,12]},)"
                   R"("counts":{"dtype":"I64","shape":[1],"data_offsets":[12,20]}})",
                   std::vector<std::uint8_t>(20, 0));
    const auto idx = io::read_header(path);

    SECTION("pattern filter preserves header order") {
        std::vector<std::string> seen;
        io::iter_tensors(idx, std::string(".*attn.*"), [&](io::TensorEntry e) {
            seen.push_back(std::get<io::TensorRecord>(e).name);
        });
        CHECK(seen == std::vector<std::string>{"a.attn.q", "b.attn.k"});
    }
    SECTION("no pattern yields all tensors with a skip notice for I64") {
        std::vector<std::string> records, skips;
        io::iter_tensors(idx, std::nullopt, [&](io::TensorEntry e) {
            if (std::holds_alternative<io::TensorRecord>(e))
                records.push_back(std::get<io::TensorRecord>(e).name);
            else
                skips.push_back(std::get<io::SkipNotice>(e).dtype_name);
        });
        CHECK(records == std::vector<std::string>{"a.attn.q", "a.mlp.up", "b.attn.k"});
        CHECK(skips == std::vector<std::string>{"I64"});
    }
    SECTION("pattern matching only the I64 tensor yields just the notice") {
        std::vector<io::SkipNotice> skips;
        io::iter_tensors(idx, std::string("counts"), [&](io::TensorEntry e) {
            REQUIRE(std::holds_alternative<io::SkipNotice>(e));
            skips.push_back(std::get<io::SkipNotice>(e));
        });
        REQUIRE(skips.size() == 1);
        CHECK(skips[0].name == "counts");
        CHECK(skips[0].dtype_name == "I64");
    }
}

TEST_CASE("metadata survives a write/read cycle") {
    io::ModelWriter w;
    w.set_metadata({{"format", "pt"}, {"producer", "weightlens"}});
    io::TensorRecord rec{"x", {1}, {3.5}, io::DType::f64(), false};
    w.add(rec, io::DType::f64());
    const auto path = temp_file("withmeta.safetensors");
    w.write_file(path);
    const auto idx = io::read_header(path);
    CHECK(idx.metadata().at("format") == "pt");
    CHECK(idx.metadata().at("producer") == "weightlens");
    CHECK(io::load_tensor(idx, "x").values == std::vector<double>{3.5});
}

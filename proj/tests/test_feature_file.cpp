#include <doctest.h>

#include <cstring>
#include <fstream>

#include "evai/errors.hpp"
#include "evai/feature_batch.hpp"
#include "evai/feature_file.hpp"
#include "evai/hash.hpp"
#include "support.hpp"

using namespace evai;

namespace {

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

FeatureBatch random_batch(std::size_t n, std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
    FeatureBatch b;
    b.n = n;
    b.h = h;
    b.w = w;
    b.c = c;
    b.backbone_id = "resnext50";
    b.layer = "layer4";
    for (std::size_t i = 0; i < n * h * w * c; ++i) b.values.push_back(static_cast<float>(rng.normal()));
    for (std::size_t i = 0; i < n; ++i) b.image_ids.push_back("ISIC_" + std::to_string(i));
    return b;
}

}  // namespace

TEST_CASE("smallest tensor roundtrips bit-exact") {
    test::TempDir dir;
    FeatureBatch b;
    b.n = b.h = b.w = b.c = 1;
    b.values = {3.5f};
    b.image_ids = {"only"};
    b.backbone_id = "stub";
    b.layer = "conv";
    auto back = feature_file_roundtrip(b, dir / "one.features");
    CHECK(back.n == 1);
    CHECK(back.values.size() == 1);
    CHECK(back.values[0] == 3.5f);
    CHECK(back.image_ids == b.image_ids);
    CHECK(back.backbone_id == "stub");
    CHECK(back.layer == "conv");
}

TEST_CASE("4x7x7x16 batch roundtrips and has the documented size") {
    test::TempDir dir;
    Rng rng(7);
    auto b = random_batch(4, 7, 7, 16, rng);
    auto back = feature_file_roundtrip(b, dir / "b.features");
    CHECK(bit_equal(back.values, b.values));
    CHECK(back.image_ids == b.image_ids);

    // Header is 16 + 4·ndim bytes; the trailer is preceded by its u64 length.
    TensorFile bare;
    bare.dims = {4, 7, 7, 16};
    bare.values = b.values;
    write_tensor_file(dir / "bare.bin", bare);
    CHECK(tensor_header_size(4) == 32);
    CHECK(std::filesystem::file_size(dir / "bare.bin") == 32 + 4 * 7 * 7 * 16 * 4 + 8);

    const auto trailer = nlohmann::json{{"backbone_id", b.backbone_id}, {"layer", b.layer}, {"image_ids", b.image_ids}}.dump();
    CHECK(std::filesystem::file_size(dir / "b.features") == 32 + 4 * 7 * 7 * 16 * 4 + 8 + trailer.size());
}

TEST_CASE("header bytes follow the little-endian layout") {
    TensorFile t;
    t.dims = {2, 3};
    t.values = {1, 2, 3, 4, 5, 6};
    auto bytes = encode_tensor(t);
    REQUIRE(bytes.size() == 24 + 24 + 8);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "EVAI");
    CHECK(bytes[4] == 1);
    CHECK(bytes[8] == 2);
    CHECK(bytes[12] == 2);
    CHECK(bytes[16] == 3);
    CHECK(bytes[20] == 0);
    float first;
    std::memcpy(&first, bytes.data() + 24, 4);
    CHECK(first == 1.0f);
    for (std::size_t i = bytes.size() - 8; i < bytes.size(); ++i) CHECK(bytes[i] == 0);
}

TEST_CASE("corrupted files raise FormatError with an offset") {
    TensorFile t;
    t.dims = {3};
    t.values = {1, 2, 3};
    t.trailer = {{"a", 1}};
    const auto good = encode_tensor(t);

    SUBCASE("magic") {
        auto bytes = good;
        bytes[1] = 'X';
        try {
            decode_tensor(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 0);
        }
    }
    SUBCASE("version") {
        auto bytes = good;
        bytes[4] = 2;
        try {
            decode_tensor(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 4);
        }
    }
    SUBCASE("dtype") {
        auto bytes = good;
        bytes[16] = 1;
        CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    }
    SUBCASE("truncated payload") {
        std::vector<std::uint8_t> bytes(good.begin(), good.begin() + 26);
        try {
            decode_tensor(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 20);
        }
    }
    SUBCASE("truncated trailer") {
        std::vector<std::uint8_t> bytes(good.begin(), good.end() - 1);
        CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    }
    SUBCASE("extra bytes") {
        auto bytes = good;
        bytes.push_back(0);
        CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    }
    SUBCASE("malformed trailer json") {
        auto bytes = good;
        bytes[bytes.size() - 1] = '!';
        CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    }
    SUBCASE("empty input") { CHECK_THROWS_AS(decode_tensor(std::vector<std::uint8_t>{}), FormatError); }
}

TEST_CASE("empty trailer decodes to null") {
    TensorFile t;
    t.dims = {1};
    t.values = {0.25f};
    auto back = decode_tensor(encode_tensor(t));
    CHECK(back.trailer.is_null());
    CHECK(back.values == t.values);
}

TEST_CASE("special float values survive bit-exact") {
    TensorFile t;
    t.dims = {5};
    t.values = {-0.0f, std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max(),
                std::numeric_limits<float>::infinity(), std::numeric_limits<float>::quiet_NaN()};
    auto back = decode_tensor(encode_tensor(t));
    CHECK(bit_equal(back.values, t.values));
}

TEST_CASE("missing file is an IOError") {
    CHECK_THROWS_AS(read_tensor_file("/nonexistent/evai/x.features"), IOError);
}

TEST_CASE("validate rejects inconsistent batches") {
    Rng rng(1);
    auto b = random_batch(2, 2, 2, 3, rng);
    CHECK_NOTHROW(b.validate());
    auto short_ids = b;
    short_ids.image_ids.pop_back();
    CHECK_THROWS_AS(short_ids.validate(), ShapeError);
    auto nonfinite = b;
    nonfinite.values[3] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(nonfinite.validate(), DomainError);
    FeatureBatch empty;
    CHECK_THROWS_AS(empty.validate(), ShapeError);
}

TEST_CASE("flatten and pool agree with direct indexing") {
    Rng rng(3);
    auto b = random_batch(3, 2, 4, 5, rng);
    auto flat = flatten_locations(b);
    CHECK(flat.rows() == 24);
    CHECK(flat.cols() == 5);
    CHECK(flat(9, 2) == doctest::Approx(b.at(1, 0, 1, 2)));
    auto pooled = pooled_features(b);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t ch = 0; ch < 5; ++ch) {
            double s = 0;
            for (std::size_t y = 0; y < 2; ++y)
                for (std::size_t x = 0; x < 4; ++x) s += b.at(i, y, x, ch);
            CHECK(pooled(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch)) == doctest::Approx(s / 8).epsilon(1e-12));
        }
    std::vector<std::size_t> pick{2, 0};
    auto s = slice(b, pick);
    CHECK(s.n == 2);
    CHECK(s.image_ids == std::vector<std::string>{"ISIC_2", "ISIC_0"});
    CHECK(s.at(0, 1, 3, 4) == b.at(2, 1, 3, 4));
}

TEST_CASE("sha256 and base64 known answers") {
    CHECK(sha256_hex(std::string_view("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const std::string text = "Man";
    CHECK(base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size())) == "TWFu");
    const std::string two = "Ma";
    CHECK(base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(two.data()), two.size())) == "TWE=");
}

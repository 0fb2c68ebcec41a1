#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "tinyvlm/bytes.hpp"
#include "tinyvlm/embedstore.hpp"
#include "tinyvlm/error.hpp"

using namespace tinyvlm;

namespace {

const std::vector<std::size_t> kLadder{16, 32, 64, 128, 256};

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorCode::InvalidArgument;
}

std::vector<PromptedClass> random_classes(std::mt19937_64& rng, std::size_t k, std::size_t d, std::size_t templates = 4) {
    std::normal_distribution<double> g;
    std::vector<PromptedClass> out;
    for (std::size_t c = 0; c < k; ++c) {
        PromptedClass pc{"class_" + std::to_string(c), {}};
        for (std::size_t t = 0; t < templates; ++t) {
            std::vector<double> e(d);
            for (auto& x : e) x = g(rng);
            pc.template_embeddings.push_back(std::move(e));
        }
        out.push_back(std::move(pc));
    }
    return out;
}

}  // namespace

TEST(AverageTemplates, SingleAndRepeated) {
    const std::vector<double> v{3.0, 4.0};
    const auto one = average_templates({"a", {v}});
    EXPECT_NEAR(one[0], 0.6, 1e-15);
    EXPECT_NEAR(one[1], 0.8, 1e-15);
    const auto two = average_templates({"a", {v, v}});
    EXPECT_EQ(one, two);
}

TEST(AverageTemplates, OrthonormalPair) {
    const auto r = average_templates({"a", {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}}});
    const double s = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(r[0], s, 1e-15);
    EXPECT_NEAR(r[1], s, 1e-15);
    EXPECT_EQ(r[2], 0.0);
}

TEST(AverageTemplates, Errors) {
    EXPECT_EQ(code_of([] { average_templates({"a", {}}); }), ErrorCode::EmptyTemplates);
    EXPECT_EQ(code_of([] { average_templates({"a", {{1.0, 2.0}, {1.0}}}); }), ErrorCode::DimensionMismatch);
}

TEST(SelectDim, WorkedExamples) {
    EXPECT_EQ(select_dim(80, 10240, 1, kLadder), 128u);
    EXPECT_EQ(select_dim(80, 5120, 1, kLadder), 64u);
    EXPECT_EQ(select_dim(80, 80 * 16, 1, kLadder), 16u);
    EXPECT_EQ(select_dim(80, 1u << 30, 1, kLadder), 256u);
    EXPECT_EQ(code_of([] { select_dim(1000, 8000, 1, kLadder); }), ErrorCode::NoFeasibleDimension);
    const std::vector<std::size_t> unsorted{64, 16};
    EXPECT_EQ(code_of([&] { select_dim(1, 100, 1, unsorted); }), ErrorCode::InvalidArgument);
}

TEST(SelectDim, MonotoneInBudget) {
    for (std::size_t k : {1u, 7u, 80u, 1000u}) {
        std::size_t prev = 0;
        for (std::size_t budget = 0; budget < 300000; budget += 997) {
            std::size_t d = 0;
            try {
                d = select_dim(k, budget, 1, kLadder);
            } catch (const Error&) {
                d = 0;
            }
            EXPECT_GE(d, prev);
            prev = d;
        }
    }
}

TEST(PayloadAccounting, MatchesPrecisionTable) {
    EXPECT_EQ(payload_bytes(80, 64, Precision::F32), 20480u);
    EXPECT_EQ(payload_bytes(80, 64, Precision::F16), 10240u);
    EXPECT_EQ(payload_bytes(80, 64, Precision::I8), 5120u);
    EXPECT_EQ(payload_bytes(80, 64, Precision::I4), 2560u);
    EXPECT_EQ(payload_bytes(3, 3, Precision::I4), 5u);
}

TEST(BuildTable, PayloadForEachPrecision) {
    std::mt19937_64 rng(42);
    const auto classes = random_classes(rng, 80, 64);
    EXPECT_EQ(build_table(classes, Precision::I8).payload_bytes(), 5120u);
    EXPECT_EQ(build_table(classes, Precision::F32).payload_bytes(), 20480u);
    EXPECT_EQ(build_table(classes, Precision::F16).payload_bytes(), 10240u);
    EXPECT_EQ(build_table(classes, Precision::I4).payload_bytes(), 2560u);
}

TEST(BuildTable, RowsUseFullCodeRange) {
    std::mt19937_64 rng(1);
    const auto classes = random_classes(rng, 12, 32);
    const auto t = build_table(classes);
    for (std::size_t k = 0; k < t.size(); ++k) {
        int m = 0;
        for (auto c : t.code_row(k)) m = std::max(m, std::abs(int(c)));
        EXPECT_EQ(m, 127);
        EXPECT_GT(t.scales()[k], 0.0f);
        // Dequantized row approximates the normalized template mean.
        const auto ref = average_templates(classes[k]);
        const auto row = t.dequantized_row(k);
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_LE(std::abs(row[i] - ref[i]), t.scales()[k] * 0.5001);
    }
}

TEST(BuildTable, SingleClassIdenticalTemplates) {
    const auto t = build_table(std::vector<PromptedClass>{{"cat", {{0.2, -0.4}, {0.2, -0.4}}}});
    EXPECT_EQ(t.size(), 1u);
    EXPECT_EQ(t.code_row(0)[1], -127);
}

TEST(BuildTable, Rejections) {
    EXPECT_EQ(code_of([] { build_table(std::vector<PromptedClass>{}); }), ErrorCode::EmptyInput);
    const std::vector<PromptedClass> dup{{"a", {{1.0}}}, {"a", {{2.0}}}};
    EXPECT_EQ(code_of([&] { build_table(dup); }), ErrorCode::DuplicateClass);
    const std::vector<PromptedClass> mixed{{"a", {{1.0, 0.0}}}, {"b", {{2.0}}}};
    EXPECT_EQ(code_of([&] { build_table(mixed); }), ErrorCode::DimensionMismatch);
}

TEST(TruncateTable, IdentityAndSingleCode) {
    std::mt19937_64 rng(2);
    const auto t = build_table(random_classes(rng, 5, 16));
    EXPECT_EQ(truncate_table(t, 16), t);
    const auto one = truncate_table(t, 1);
    EXPECT_EQ(one.dim(), 1u);
    for (std::size_t k = 0; k < one.size(); ++k) EXPECT_EQ(std::abs(int(one.code_row(k)[0])), 127);
    EXPECT_EQ(code_of([&] { truncate_table(t, 17); }), ErrorCode::DimensionTooLarge);
}

TEST(TruncateTable, PrefixesKeepFullRangeAndTrackPrefix) {
    std::mt19937_64 rng(3);
    const auto t = build_table(random_classes(rng, 10, 64));
    for (std::size_t d : {8u, 16u, 32u}) {
        const auto p = truncate_table(t, d);
        for (std::size_t k = 0; k < p.size(); ++k) {
            int m = 0;
            for (auto c : p.code_row(k)) m = std::max(m, std::abs(int(c)));
            EXPECT_EQ(m, 127);
            const auto full = t.dequantized_row(k);
            const auto row = p.dequantized_row(k);
            for (std::size_t i = 0; i < d; ++i) EXPECT_LE(std::abs(row[i] - full[i]), p.scales()[k] * 0.5001);
        }
    }
}

TEST(Float16, RoundTripsRepresentableValues) {
    for (float f : {0.0f, 1.0f, -2.5f, 65504.0f, 6.103515625e-05f, 5.960464477539063e-08f}) {
        EXPECT_EQ(f16_bits_to_f32(f32_to_f16_bits(f)), f);
    }
    EXPECT_EQ(f32_to_f16_bits(1.0f), 0x3C00);
    EXPECT_EQ(f32_to_f16_bits(-2.0f), 0xC000);
    // Round to nearest even: 1 + 2^-11 sits halfway between 1 and 1 + 2^-10.
    EXPECT_EQ(f32_to_f16_bits(1.0f + 0.00048828125f), 0x3C00);
    // Exhaustive: every finite half decodes and re-encodes to itself.
    for (std::uint32_t h = 0; h < 0x10000; ++h) {
        if ((h & 0x7C00) == 0x7C00) continue;
        EXPECT_EQ(f32_to_f16_bits(f16_bits_to_f32(static_cast<std::uint16_t>(h))), h);
    }
}

TEST(PackFormat, RoundTripAllPrecisions) {
    std::mt19937_64 rng(4);
    for (auto p : {Precision::F32, Precision::F16, Precision::I8, Precision::I4}) {
        for (std::size_t d : {1u, 7u, 64u}) {
            const auto t = build_table(random_classes(rng, 9, d, 2), p);
            const auto bytes = pack(t);
            EXPECT_EQ(unpack(bytes), t) << to_string(p) << " d=" << d;
            EXPECT_EQ(pack(unpack(bytes)), bytes);
        }
    }
}

TEST(PackFormat, HeaderLayout) {
    const auto t = build_table(std::vector<PromptedClass>{{"ab", {{1.0, -1.0}}}});
    const auto b = pack(t);
    const std::vector<std::uint8_t> head{'T', 'V', 'E', '1', 1, 0, 1, 0, 0, 0, 2, 0, 2, 2, 0, 'a', 'b'};
    ASSERT_GE(b.size(), head.size());
    EXPECT_TRUE(std::equal(head.begin(), head.end(), b.begin()));
    // 17 header/name bytes + 4 scale + 2 codes + 4 crc.
    EXPECT_EQ(b.size(), 27u);
    EXPECT_EQ(b[21], 127);
    EXPECT_EQ(static_cast<std::int8_t>(b[22]), -127);
}

TEST(PackFormat, EveryByteFlipDetected) {
    std::mt19937_64 rng(5);
    const auto t = build_table(random_classes(rng, 4, 8, 1));
    const auto bytes = pack(t);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        auto bad = bytes;
        bad[i] ^= 0x01;
        EXPECT_THROW(unpack(bad), Error) << "byte " << i;
    }
    auto bad = bytes;
    bad[bad.size() / 2] ^= 0xFF;
    EXPECT_EQ(code_of([&] { unpack(bad); }), ErrorCode::ChecksumMismatch);
    bad = bytes;
    bad[0] = 'Z';
    EXPECT_EQ(code_of([&] { unpack(bad); }), ErrorCode::BadMagic);
    EXPECT_EQ(code_of([&] { unpack(std::span(bytes).first(3)); }), ErrorCode::TruncatedFile);
}

TEST(PackFormat, VersionChecked) {
    const auto t = build_table(std::vector<PromptedClass>{{"a", {{1.0}}}});
    auto bytes = pack(t);
    bytes[4] = 2;
    bytes.resize(bytes.size() - 4);
    const auto c = crc32(bytes);
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(c >> (8 * i)));
    EXPECT_EQ(code_of([&] { unpack(bytes); }), ErrorCode::UnsupportedVersion);
}

TEST(TemplateCsv, GroupsRowsPerClass) {
    std::istringstream in(
        "class,template,e0,e1\n"
        "cat,a photo of a {class},1,0\n"
        "cat,a picture of a {class},0,1\n"
        "\"dog, small\",a photo of a {class},0.5,-0.5\n");
    const auto classes = read_template_csv(in);
    ASSERT_EQ(classes.size(), 2u);
    EXPECT_EQ(classes[0].class_name, "cat");
    EXPECT_EQ(classes[0].template_embeddings.size(), 2u);
    EXPECT_EQ(classes[1].class_name, "dog, small");
    EXPECT_DOUBLE_EQ(classes[1].template_embeddings[0][1], -0.5);
}

TEST(TemplateCsv, Rejections) {
    std::istringstream bad_header("name,template,e0\n");
    EXPECT_EQ(code_of([&] { read_template_csv(bad_header); }), ErrorCode::ParseError);
    std::istringstream split("class,template,e0\ncat,t,1\ndog,t,1\ncat,u,2\n");
    EXPECT_EQ(code_of([&] { read_template_csv(split); }), ErrorCode::DuplicateClass);
    std::istringstream repeat("class,template,e0\ncat,t,1\ncat,t,2\n");
    EXPECT_EQ(code_of([&] { read_template_csv(repeat); }), ErrorCode::DuplicateClass);
    std::istringstream width("class,template,e0,e1\ncat,t,1\n");
    EXPECT_EQ(code_of([&] { read_template_csv(width); }), ErrorCode::DimensionMismatch);
    std::istringstream nan("class,template,e0\ncat,t,abc\n");
    EXPECT_EQ(code_of([&] { read_template_csv(nan); }), ErrorCode::ParseError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "tinyvlm/error.hpp"
#include "tinyvlm/zeroshot.hpp"

using namespace tinyvlm;

namespace {

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

std::vector<double> gaussian(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

EmbeddingTable random_table(std::mt19937_64& rng, std::size_t k, std::size_t d, Precision p) {
    std::vector<PromptedClass> pcs;
    for (std::size_t i = 0; i < k; ++i) pcs.push_back({"c" + std::to_string(i), {gaussian(rng, d)}});
    return build_table(pcs, p);
}

// Brute-force cosine classifier over the float rows.
std::size_t oracle_argmax(std::span<const double> q, const std::vector<std::vector<double>>& rows, std::size_t d) {
    std::size_t best = 0;
    double best_s = -2;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        double dot = 0, nq = 0, np = 0;
        for (std::size_t i = 0; i < d; ++i) {
            dot += q[i] * rows[k][i];
            nq += q[i] * q[i];
            np += rows[k][i] * rows[k][i];
        }
        const double s = dot / std::sqrt(nq * np);
        if (s > best_s) {
            best_s = s;
            best = k;
        }
    }
    return best;
}

}  // namespace

TEST(Classify, PrototypeQueryWins) {
    std::mt19937_64 rng(1);
    const auto t = random_table(rng, 6, 32, Precision::I8);
    const auto row = t.dequantized_row(3);
    const auto p = classify(row, t, 32);
    EXPECT_EQ(p.class_index, 3u);
    EXPECT_EQ(p.class_name, "c3");
    EXPECT_NEAR(p.similarity, 1.0, 1e-2);
    EXPECT_EQ(p.scores.size(), 6u);
}

TEST(Classify, TiesGoToLowerIndex) {
    const std::vector<double> v{0.6, 0.8};
    std::vector<PromptedClass> pcs{{"a", {{1.0, 0.0}}}, {"b", {v}}, {"c", {v}}};
    const auto t = build_table(pcs, Precision::I8);
    EXPECT_EQ(classify(v, t, 2).class_index, 1u);
    EXPECT_EQ(top_k(std::vector<double>{0.5, 0.9, 0.9, 0.1}, 3), (std::vector<std::size_t>{1, 2, 0}));
}

TEST(Classify, Errors) {
    std::mt19937_64 rng(2);
    const auto t = random_table(rng, 3, 8, Precision::I8);
    const std::vector<double> zero(8, 0.0);
    EXPECT_EQ(code_of([&] { classify(zero, t, 8); }), ErrorCode::ZeroNorm);
    const auto q = gaussian(rng, 16);
    EXPECT_EQ(code_of([&] { classify(q, t, 9); }), ErrorCode::DimensionTooLarge);
    EXPECT_EQ(code_of([&] { classify(std::span(q).first(4), t, 8); }), ErrorCode::DimensionTooLarge);
}

TEST(Classify, ScaleInvariantAndBounded) {
    std::mt19937_64 rng(3);
    const auto t = random_table(rng, 12, 64, Precision::I8);
    for (int trial = 0; trial < 50; ++trial) {
        auto q = gaussian(rng, 64);
        const auto a = classify(q, t, 32);
        for (auto& x : q) x *= 37.5;
        const auto b = classify(q, t, 32);
        EXPECT_EQ(a.class_index, b.class_index);
        ASSERT_EQ(a.scores.size(), 12u);
        for (std::size_t k = 0; k < 12; ++k) {
            EXPECT_NEAR(a.scores[k], b.scores[k], 1e-9);
            EXPECT_LE(std::abs(a.scores[k]), 1.0 + 1e-9);
        }
    }
}

TEST(Classify, OnlyPrefixMatters) {
    std::mt19937_64 rng(4);
    const auto t = random_table(rng, 8, 64, Precision::I4);
    for (int trial = 0; trial < 30; ++trial) {
        auto q = gaussian(rng, 64);
        const auto a = classify(q, t, 16);
        for (std::size_t i = 16; i < 64; ++i) q[i] = gaussian(rng, 1)[0] * 100;
        const auto b = classify(q, t, 16);
        EXPECT_EQ(a.scores, b.scores);
        std::vector<double> padded(q.begin(), q.begin() + 16);
        padded.resize(64, 0.0);
        EXPECT_EQ(classify(padded, t, 16).scores, a.scores);
    }
}

TEST(Classify, QuantizedTableAgreesWhenMarginClearsBound) {
    std::mt19937_64 rng(5);
    std::vector<PromptedClass> pcs;
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < 20; ++i) {
        pcs.push_back({"c" + std::to_string(i), {gaussian(rng, 64)}});
        rows.push_back(l2_normalize(pcs.back().template_embeddings[0]));
    }
    for (auto p : {Precision::I8, Precision::I4, Precision::F16}) {
        const auto t = build_table(pcs, p);
        int checked = 0;
        for (int trial = 0; trial < 500; ++trial) {
            const auto q = gaussian(rng, 64);
            const auto pred = classify(q, t, 64);
            const auto top = top_k(pred.scores, 2);
            double bound = 0.0;
            for (std::size_t k = 0; k < t.size(); ++k) bound = std::max(bound, table_score_bound(t, k, 64));
            if (pred.scores[top[0]] - pred.scores[top[1]] > 2 * bound) {
                ++checked;
                EXPECT_EQ(pred.class_index, oracle_argmax(q, rows, 64));
            }
        }
        // The i4 step is coarse enough that few random queries clear the bound.
        if (p != Precision::I4) EXPECT_GT(checked, 50) << to_string(p);
    }
}

TEST(ScoreBound, HoldsForStoredRows) {
    std::mt19937_64 rng(6);
    std::vector<PromptedClass> pcs;
    for (std::size_t i = 0; i < 10; ++i) pcs.push_back({"c" + std::to_string(i), {gaussian(rng, 48)}});
    const auto ti = build_table(pcs, Precision::I4);
    const auto tf = build_table(pcs, Precision::F32);
    for (int trial = 0; trial < 200; ++trial) {
        const auto q = gaussian(rng, 48);
        for (std::size_t d : {8u, 24u, 48u}) {
            const auto a = classify(q, ti, d);
            const auto b = classify(q, tf, d);
            for (std::size_t k = 0; k < 10; ++k)
                EXPECT_LE(std::abs(a.scores[k] - b.scores[k]), table_score_bound(ti, k, d) + 1e-12);
        }
    }
    const std::vector<double> e{3.0, 4.0};
    const std::vector<double> err{0.05, 0.0};
    EXPECT_NEAR(query_score_bound(e, err, 2), 0.02, 1e-15);
}

TEST(Ppm, RoundTripAndErrors) {
    Image img{2, 3, {}};
    for (std::uint8_t i = 0; i < 18; ++i) img.rgb.push_back(static_cast<std::uint8_t>(i * 13));
    const auto bytes = write_ppm(img);
    const auto back = read_ppm(bytes);
    EXPECT_EQ(back.height, 2u);
    EXPECT_EQ(back.width, 3u);
    EXPECT_EQ(back.rgb, img.rgb);

    const std::string commented = "P6\n# made by hand\n1 1\n255\n";
    std::vector<std::uint8_t> c(commented.begin(), commented.end());
    c.insert(c.end(), {1, 2, 3});
    EXPECT_EQ(read_ppm(c).rgb, (std::vector<std::uint8_t>{1, 2, 3}));

    auto bad = bytes;
    bad[1] = '3';
    EXPECT_EQ(code_of([&] { read_ppm(bad); }), ErrorCode::BadMagic);
    EXPECT_EQ(code_of([&] { read_ppm(std::span(bytes).first(bytes.size() - 1)); }), ErrorCode::TruncatedFile);
    const std::string deep = "P6 1 1 65535\n";
    EXPECT_EQ(code_of([&] { read_ppm(std::vector<std::uint8_t>(deep.begin(), deep.end())); }), ErrorCode::ParseError);
}

TEST(Preprocess, NormalisesAndResizes) {
    Image img{1, 2, {0, 0, 0, 255, 255, 255}};
    const auto same = preprocess(img, 1, 2);
    EXPECT_FLOAT_EQ(same.f32_data()[0], -1.0f);
    EXPECT_FLOAT_EQ(same.f32_data()[3], 1.0f);
    // Upsampling a constant image keeps it constant.
    Image flat{3, 3, std::vector<std::uint8_t>(27, 200)};
    const auto up = preprocess(flat, 7, 5);
    for (float v : up.f32_data()) EXPECT_FLOAT_EQ(v, static_cast<float>((200 - 127.5) / 127.5));
    // Downsampling by 2 averages each 2x2 block under half-pixel centres.
    Image grid{2, 2, {0, 0, 0, 100, 100, 100, 50, 50, 50, 150, 150, 150}};
    EXPECT_FLOAT_EQ(preprocess(grid, 1, 1).f32_data()[0], static_cast<float>((75 - 127.5) / 127.5));
}

TEST(Pipeline, ConstantGraphPredictsStoredClass) {
    // Zero weights and a bias equal to e make the encoder output e for every image.
    const std::vector<float> e{0.1f, -0.7f, 0.3f, 0.2f};
    LayerGraph g;
    g.input_shape = {4, 4, 3};
    g.layers = {make_gap(), make_linear(3, 4, std::vector<float>(12, 0.0f), e)};
    std::vector<PromptedClass> pcs{{"other", {{1.0, 0.0, 0.0, 0.0}}},
                                   {"target", {{0.1, -0.7, 0.3, 0.2}}},
                                   {"third", {{0.0, 0.0, 1.0, 0.0}}}};
    const auto t = build_table(pcs, Precision::I8);
    std::mt19937_64 rng(7);
    const auto img = fixtures::smooth_image(rng, 9, 9);
    const auto p = run_pipeline(img, g, t, 4, InferencePath::F32);
    EXPECT_EQ(p.class_name, "target");
    EXPECT_EQ(p.dim_used, 4u);
    EXPECT_EQ(code_of([&] { run_pipeline(img, g, t, 5, InferencePath::F32); }), ErrorCode::DimensionTooLarge);
    EXPECT_EQ(code_of([&] { run_pipeline(img, g, t, 4, InferencePath::I8); }), ErrorCode::NotCalibrated);
}

TEST(Pipeline, FullDimensionEqualsUntruncatedAndIsDeterministic) {
    fixtures::ZeroShotFixture fx(42);
    const auto img = fx.query_image();
    const auto x = preprocess(img, 32, 32);
    const auto full = run_pipeline(img, fx.quantized, fx.table_i8, 256, InferencePath::I8);
    EXPECT_EQ(full.scores, classify(forward_i8(fx.quantized, x), fx.table_i8, 256).scores);
    EXPECT_EQ(full.scores, run_pipeline(img, fx.quantized, fx.table_i8, 256, InferencePath::I8).scores);
    const auto cut = truncate_table(fx.table_i8, 256);
    EXPECT_EQ(run_pipeline(img, fx.quantized, cut, 256, InferencePath::I8).scores, full.scores);
}

TEST(Pipeline, IntegerPathAgreesOnClearMargins) {
    fixtures::ZeroShotFixture fx(123);
    int filtered = 0, agree = 0;
    for (int i = 0; i < 80; ++i) {
        const auto x = preprocess(fx.query_image(), 32, 32);
        const auto f = forward_f32(fx.graph, x);
        const auto oracle = classify(f, fx.table_f32, 256);
        const auto top = top_k(oracle.scores, 2);
        const double margin = oracle.scores[top[0]] - oracle.scores[top[1]];
        const double bound = margin_noise_bound(f, forward_i8_noise_std(fx.quantized, x), fx.table_i8, 256);
        if (margin <= 2 * bound) continue;
        ++filtered;
        agree += run_pipeline(x, fx.quantized, fx.table_i8, 256, InferencePath::I8).class_index == oracle.class_index;
    }
    EXPECT_GE(filtered, 20);
    EXPECT_GE(agree, 0.95 * filtered);
}

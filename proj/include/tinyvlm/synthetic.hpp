#pragma once

// Deterministic synthetic images and a small zero-shot setup, used by the
// demo generator and the tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tinyvlm/embedstore.hpp"
#include "tinyvlm/encoder.hpp"
#include "tinyvlm/train.hpp"
#include "tinyvlm/zeroshot.hpp"

namespace tinyvlm::synthetic {

// Low-frequency colour pattern; different draws give clearly different embeddings.
inline Image smooth_image(std::mt19937_64& rng, std::size_t h = 32, std::size_t w = 32) {
    std::normal_distribution<double> nd;
    double a[3][4];
    for (auto& row : a)
        for (auto& v : row) v = nd(rng);
    Image im{h, w, std::vector<std::uint8_t>(h * w * 3)};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = a[c][0] * std::sin(0.2 * static_cast<double>(x) * (1 + std::abs(a[c][1]))) +
                                 a[c][2] * std::cos(0.2 * static_cast<double>(y) * (1 + std::abs(a[c][3])));
                im.rgb[(y * w + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(127.5 + 60 * v, 0.0, 255.0));
            }
    return im;
}

inline Image blend(const Image& a, const Image& b, double t) {
    Image m = a;
    for (std::size_t i = 0; i < m.rgb.size(); ++i)
        m.rgb[i] = static_cast<std::uint8_t>(std::lround((1 - t) * a.rgb[i] + t * b.rgb[i]));
    return m;
}

// Desk encoder with a final bias that centres embeddings over the calibration
// set, its INT8 calibration, and a 10-class table made from anchor embeddings.
struct ZeroShotSetup {
    LayerGraph graph;
    LayerGraph quantized;
    std::vector<Image> anchors;
    EmbeddingTable table_i8;
    EmbeddingTable table_f32;
    std::vector<PromptedClass> classes;
    std::mt19937_64 rng;

    explicit ZeroShotSetup(std::uint64_t seed = 42, std::size_t class_count = 10) : rng(seed) {
        graph = desk_preset(seed);
        for (std::size_t i = 0; i < class_count; ++i) anchors.push_back(smooth_image(rng));
        std::vector<Tensor> calib;
        for (int i = 0; i < 32; ++i) calib.push_back(preprocess(query_image(), 32, 32));

        const std::size_t dim = graph.output_dim();
        std::vector<double> mean(dim, 0.0);
        for (const auto& x : calib) {
            const auto e = forward_f32(graph, x);
            for (std::size_t k = 0; k < dim; ++k) mean[k] += e[k] / static_cast<double>(calib.size());
        }
        auto& head = graph.layers.back();
        std::vector<float> bias(head.params[1].f32_data().begin(), head.params[1].f32_data().end());
        for (std::size_t k = 0; k < dim; ++k) bias[k] -= static_cast<float>(mean[k]);
        head.params[1] = Tensor::f32({dim}, std::move(bias));

        quantized = calibrate(graph, calib);
        for (std::size_t i = 0; i < anchors.size(); ++i)
            classes.push_back({"class" + std::to_string(i), {forward_f32(graph, preprocess(anchors[i], 32, 32))}});
        table_i8 = build_table(classes, Precision::I8);
        table_f32 = build_table(classes, Precision::F32);
    }

    // Blend of two anchors with weight in [0, 0.5] on the second.
    Image query_image() {
        std::uniform_int_distribution<std::size_t> pick(0, anchors.size() - 1);
        std::uniform_real_distribution<double> t(0.0, 0.5);
        const auto a = pick(rng);
        const auto b = pick(rng);
        return blend(anchors[a], anchors[b], t(rng));
    }
};

// 64 training and 128 validation pairs from a frozen synthetic teacher, plus a
// seeded student with a 64-wide hidden layer.
struct ToyTrainingSetup {
    MatryoshkaConfig cfg;
    BatchPair train;
    BatchPair val;
    StudentModel init;
    TrainOptions opt;

    explicit ToyTrainingSetup(std::uint64_t seed, double alpha_mat = 0.5) {
        cfg.alpha_mat = alpha_mat;
        const auto teacher = SyntheticTeacher::create(cfg.teacher_dim, seed);
        std::mt19937_64 rng(seed);
        train = teacher.sample(64, rng);
        val = teacher.sample(128, rng);
        std::mt19937_64 init_rng(seed);
        init = StudentModel::random(32, 64, cfg, init_rng);
        opt.seed = seed;
    }
};

}  // namespace tinyvlm::synthetic

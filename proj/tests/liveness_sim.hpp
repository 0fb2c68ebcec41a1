#pragma once

// Random sequential graphs and an independent step-through liveness simulator
// used to check the planner's peak activation figure.

#include <algorithm>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "tinyvlm/encoder.hpp"

namespace testing_graphs {

using namespace tinyvlm;

// Step-through liveness simulator. Buffers are produced by one op and stay live
// until their last consumer has run; an op's footprint is everything live then.
struct Sim {
    struct Op {
        std::vector<std::size_t> inputs;
        std::size_t output;
    };
    std::vector<std::uint64_t> bytes;
    std::vector<Op> ops;

    std::size_t buffer(std::uint64_t b) {
        bytes.push_back(b);
        return bytes.size() - 1;
    }

    std::uint64_t peak() const {
        const std::size_t nb = bytes.size();
        std::vector<long> born(nb, -1), last(nb, -1);
        for (std::size_t t = 0; t < ops.size(); ++t) {
            if (born[ops[t].output] < 0 && ops[t].output != 0) born[ops[t].output] = static_cast<long>(t);
            for (const auto b : ops[t].inputs) last[b] = std::max(last[b], static_cast<long>(t));
            last[ops[t].output] = std::max(last[ops[t].output], static_cast<long>(t));
        }
        std::uint64_t peak = 0;
        for (std::size_t t = 0; t < ops.size(); ++t) {
            std::uint64_t live = 0;
            for (std::size_t b = 0; b < nb; ++b)
                if (born[b] <= static_cast<long>(t) && last[b] >= static_cast<long>(t)) live += bytes[b];
            peak = std::max(peak, live);
        }
        return peak;
    }
};

inline std::size_t conv_out(std::size_t n, std::size_t k, std::size_t s, std::size_t p) { return (n + 2 * p - k) / s + 1; }

// Random valid sequential graph plus the simulator program describing it.
// force_head always appends GlobalAvgPool + Linear so the graph is a full encoder.
inline std::pair<LayerGraph, Sim> random_graph(std::mt19937_64& rng, std::size_t eb, bool force_head = false) {
    auto uni = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    LayerGraph g;
    std::size_t h = uni(1, 12), w = uni(1, 12), c = uni(1, 6);
    g.input_shape = {h, w, c};
    Sim sim;
    std::size_t cur = sim.buffer(h * w * c * eb);
    auto step = [&](std::size_t in, std::uint64_t out_bytes) {
        const std::size_t out = sim.buffer(out_bytes);
        sim.ops.push_back({{in}, out});
        return out;
    };
    const std::size_t n_layers = uni(1, 7);
    for (std::size_t i = 0; i < n_layers; ++i) {
        switch (uni(0, 4)) {
            case 0: {
                const std::size_t k = uni(0, 1) ? 3 : 1, s = uni(1, 2), p = k / 2, out = uni(1, 8);
                g.layers.push_back(make_conv2d(c, out, k, s, p, std::vector<float>(out * k * k * c), std::vector<float>(out)));
                h = conv_out(h, k, s, p);
                w = conv_out(w, k, s, p);
                c = out;
                cur = step(cur, h * w * c * eb);
                break;
            }
            case 1: {
                const std::size_t s = uni(1, 2);
                g.layers.push_back(make_depthwise(c, 3, s, 1, std::vector<float>(9 * c), std::vector<float>(c)));
                h = conv_out(h, 3, s, 1);
                w = conv_out(w, 3, s, 1);
                cur = step(cur, h * w * c * eb);
                break;
            }
            case 2: {
                const std::size_t out = uni(1, 8);
                g.layers.push_back(make_pointwise(c, out, std::vector<float>(out * c), std::vector<float>(out)));
                c = out;
                cur = step(cur, h * w * c * eb);
                break;
            }
            case 3: {
                const std::size_t e = uni(1, 4), s = uni(1, 2), out = uni(0, 1) ? c : uni(1, 8);
                g.layers.push_back(make_inverted_residual(c, out, e, s));
                const std::size_t block_in = cur;
                std::size_t x = cur;
                if (e > 1) x = step(x, h * w * c * e * eb);
                h = conv_out(h, 3, s, 1);
                w = conv_out(w, 3, s, 1);
                x = step(x, h * w * c * e * eb);
                x = step(x, h * w * out * eb);
                if (s == 1 && out == c) sim.ops.push_back({{block_in, x}, x});
                c = out;
                cur = x;
                break;
            }
            default:
                g.layers.push_back(make_relu6());
                cur = step(cur, h * w * c * eb);
                break;
        }
    }
    if (force_head || uni(0, 1)) {
        g.layers.push_back(make_gap());
        cur = step(cur, c * eb);
        const std::size_t out = uni(1, 16);
        g.layers.push_back(make_linear(c, out, std::vector<float>(out * c), std::vector<float>(out)));
        cur = step(cur, out * eb);
    }
    return {g, sim};
}

}  // namespace testing_graphs

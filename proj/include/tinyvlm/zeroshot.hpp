#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tinyvlm/embedstore.hpp"
#include "tinyvlm/encoder.hpp"

namespace tinyvlm {

struct Prediction {
    std::size_t class_index = 0;
    std::string class_name;
    double similarity = 0.0;
    std::vector<double> scores;
    std::size_t dim_used = 0;
};

// Cosine of the query prefix against every dequantized prototype prefix; argmax
// with the lowest index winning ties. A prototype whose prefix dequantizes to
// all zeros scores 0.
Prediction classify(std::span<const double> embedding, const EmbeddingTable& table, std::size_t d);

// Indices of the n best scores, best first, ties by lower index.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t n);

// Largest possible change of cos(q, p_k[:d]) caused by the table storing p_k with
// rounding error: each coordinate is off by at most scale/2 (zero for f32, half an
// f16 ulp bound for f16), so ||delta|| <= sqrt(d) * step/2 and the cosine moves
// by at most 2 ||delta|| / ||p_k[:d]||.
double table_score_bound(const EmbeddingTable& table, std::size_t k, std::size_t d);
// Same bound for a perturbation of the query with per-coordinate magnitudes err.
double query_score_bound(std::span<const double> embedding, std::span<const double> err, std::size_t d);

// Noise bound on the top-2 margin of classify(embedding, table, d) when the query
// carries independent per-coordinate noise with standard deviations sigma. To
// first order the margin moves by delta . (g_a - g_b) / ||e|| with
// g_k = p_k_hat - s_k e_hat, so its standard deviation is the sigma-weighted norm
// of that direction. Returns z times that deviation plus the table storage bounds
// of the two leading classes.
double margin_noise_bound(std::span<const double> embedding, std::span<const double> sigma,
                          const EmbeddingTable& table, std::size_t d, double z = 3.0);

// 8-bit RGB image, row-major HWC.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> rgb;
};

Image read_ppm(std::span<const std::uint8_t> bytes);
Image read_ppm_file(const std::string& path);
std::vector<std::uint8_t> write_ppm(const Image& img);

// Bilinear resize (half-pixel centres, edge clamp) to out_h x out_w, then
// p -> (p - 127.5) / 127.5. Returns an f32 (out_h, out_w, 3) tensor.
Tensor preprocess(const Image& img, std::size_t out_h, std::size_t out_w);

enum class InferencePath { I8, F32 };
const char* to_string(InferencePath p) noexcept;

// Encode -> truncate to d -> classify. The input is an already preprocessed
// tensor matching the graph input.
Prediction run_pipeline(const Tensor& input, const LayerGraph& g, const EmbeddingTable& table, std::size_t d,
                        InferencePath path);
Prediction run_pipeline(const Image& image, const LayerGraph& g, const EmbeddingTable& table, std::size_t d,
                        InferencePath path);

}  // namespace tinyvlm

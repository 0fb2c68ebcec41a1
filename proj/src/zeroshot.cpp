#include "tinyvlm/zeroshot.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "tinyvlm/bytes.hpp"
#include "tinyvlm/error.hpp"

namespace tinyvlm {

namespace {

void check_dim(const EmbeddingTable& table, std::size_t embedding_len, std::size_t d) {
    if (d == 0) throw Error(ErrorCode::InvalidArgument, "dimension must be positive");
    if (d > table.dim())
        throw Error(ErrorCode::DimensionTooLarge,
                    "dimension " + std::to_string(d) + " exceeds table dimension " + std::to_string(table.dim()));
    if (d > embedding_len)
        throw Error(ErrorCode::DimensionTooLarge,
                    "dimension " + std::to_string(d) + " exceeds embedding length " + std::to_string(embedding_len));
}

// Worst-case per-coordinate storage error of row k.
double storage_step(const EmbeddingTable& table, std::size_t k, std::span<const double> row) {
    switch (table.precision()) {
        case Precision::I8:
        case Precision::I4:
            return table.scales()[k] / 2;
        case Precision::F16: {
            // 11 significant bits for normals; subnormal spacing is 2^-24.
            return max_abs(row) * std::ldexp(1.0, -11) + std::ldexp(1.0, -25);
        }
        case Precision::F32:
            return 0.0;
    }
    return 0.0;
}

}  // namespace

Prediction classify(std::span<const double> embedding, const EmbeddingTable& table, std::size_t d) {
    check_dim(table, embedding.size(), d);
    if (table.size() == 0) throw Error(ErrorCode::EmptyInput, "table has no classes");
    const auto q = embedding.first(d);
    const double qn = l2_norm(q);
    if (!(qn > kNormEpsilon)) throw Error(ErrorCode::ZeroNorm, "query embedding prefix has zero norm");

    Prediction p;
    p.dim_used = d;
    p.scores.resize(table.size());
    for (std::size_t k = 0; k < table.size(); ++k) {
        const auto row = table.dequantized_row(k);
        const auto pre = std::span<const double>(row).first(d);
        const double pn = l2_norm(pre);
        p.scores[k] = pn > 0.0 ? std::clamp(dot(q, pre) / (qn * pn), -1.0, 1.0) : 0.0;
    }
    p.class_index = top_k(p.scores, 1)[0];
    p.class_name = table.class_names()[p.class_index];
    p.similarity = p.scores[p.class_index];
    return p;
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t n) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(std::min(n, idx.size()));
    return idx;
}

double table_score_bound(const EmbeddingTable& table, std::size_t k, std::size_t d) {
    check_dim(table, table.dim(), d);
    const auto row = table.dequantized_row(k);
    const auto pre = std::span<const double>(row).first(d);
    const double pn = l2_norm(pre);
    const double delta = std::sqrt(static_cast<double>(d)) * storage_step(table, k, row);
    if (!(pn > 0.0)) return 2.0;
    return std::min(2.0, 2.0 * delta / pn);
}

double query_score_bound(std::span<const double> embedding, std::span<const double> err, std::size_t d) {
    if (d > embedding.size() || d > err.size()) throw Error(ErrorCode::DimensionTooLarge, "dimension too large");
    const double en = l2_norm(embedding.first(d));
    const double delta = l2_norm(err.first(d));
    if (!(en > 0.0)) return 2.0;
    return std::min(2.0, 2.0 * delta / en);
}

double margin_noise_bound(std::span<const double> embedding, std::span<const double> sigma,
                          const EmbeddingTable& table, std::size_t d, double z) {
    if (sigma.size() < d) throw Error(ErrorCode::DimensionTooLarge, "noise vector shorter than dimension");
    const auto pred = classify(embedding, table, d);
    if (table.size() < 2) return 0.0;
    const auto top = top_k(pred.scores, 2);
    const auto e = l2_normalize(embedding.first(d));
    const double en = l2_norm(embedding.first(d));
    const auto pa = table.dequantized_row(top[0]);
    const auto pb = table.dequantized_row(top[1]);
    const double na = l2_norm(std::span<const double>(pa).first(d));
    const double nb = l2_norm(std::span<const double>(pb).first(d));
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double ga = (na > 0.0 ? pa[i] / na : 0.0) - pred.scores[top[0]] * e[i];
        const double gb = (nb > 0.0 ? pb[i] / nb : 0.0) - pred.scores[top[1]] * e[i];
        const double dir = (ga - gb) / en;
        var += sigma[i] * sigma[i] * dir * dir;
    }
    return z * std::sqrt(var) + table_score_bound(table, top[0], d) + table_score_bound(table, top[1], d);
}

namespace {

std::size_t ppm_number(ByteReader& r) {
    // Skip whitespace and '#' comments, then read decimal digits.
    for (;;) {
        if (r.remaining() == 0) throw Error(ErrorCode::TruncatedFile, "PPM header truncated");
        const auto c = r.rest()[0];
        if (std::isspace(c)) {
            r.take(1);
        } else if (c == '#') {
            while (r.remaining() > 0 && r.u8() != '\n') {
            }
        } else {
            break;
        }
    }
    std::size_t v = 0;
    std::size_t digits = 0;
    while (r.remaining() > 0 && std::isdigit(r.rest()[0])) {
        v = v * 10 + (r.u8() - '0');
        if (++digits > 9) throw Error(ErrorCode::ParseError, "PPM header number too large");
    }
    if (digits == 0) throw Error(ErrorCode::ParseError, "PPM header expects a number");
    return v;
}

}  // namespace

Image read_ppm(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("P6");
    Image img;
    img.width = ppm_number(r);
    img.height = ppm_number(r);
    const std::size_t maxval = ppm_number(r);
    if (img.width == 0 || img.height == 0) throw Error(ErrorCode::ParseError, "PPM image is empty");
    if (maxval != 255) throw Error(ErrorCode::ParseError, "only 8-bit PPM (maxval 255) is supported");
    if (r.remaining() == 0 || !std::isspace(r.u8())) throw Error(ErrorCode::ParseError, "PPM header not terminated");
    const auto px = r.take(img.width * img.height * 3);
    img.rgb.assign(px.begin(), px.end());
    return img;
}

Image read_ppm_file(const std::string& path) { return read_ppm(read_file_bytes(path)); }

std::vector<std::uint8_t> write_ppm(const Image& img) {
    if (img.rgb.size() != img.width * img.height * 3) throw Error(ErrorCode::ShapeMismatch, "image size mismatch");
    const std::string header =
        "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.rgb.begin(), img.rgb.end());
    return out;
}

Tensor preprocess(const Image& img, std::size_t out_h, std::size_t out_w) {
    if (img.height == 0 || img.width == 0 || img.rgb.size() != img.height * img.width * 3)
        throw Error(ErrorCode::ShapeMismatch, "image size mismatch");
    if (out_h == 0 || out_w == 0) throw Error(ErrorCode::InvalidArgument, "output size must be positive");
    std::vector<float> out(out_h * out_w * 3);
    const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
    auto src = [&](std::size_t y, std::size_t x, std::size_t c) {
        return static_cast<double>(img.rgb[(y * img.width + x) * 3 + c]);
    };
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        const double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = src(y0, x0, c) * (1 - wx) + src(y0, x1, c) * wx;
                const double bot = src(y1, x0, c) * (1 - wx) + src(y1, x1, c) * wx;
                const double p = top * (1 - wy) + bot * wy;
                out[(oy * out_w + ox) * 3 + c] = static_cast<float>((p - 127.5) / 127.5);
            }
        }
    }
    return Tensor::f32({out_h, out_w, 3}, std::move(out));
}

const char* to_string(InferencePath p) noexcept { return p == InferencePath::I8 ? "i8" : "f32"; }

Prediction run_pipeline(const Tensor& input, const LayerGraph& g, const EmbeddingTable& table, std::size_t d,
                        InferencePath path) {
    check_dim(table, g.output_dim(), d);
    const auto emb = path == InferencePath::I8 ? forward_i8(g, input) : forward_f32(g, input);
    return classify(emb, table, d);
}

Prediction run_pipeline(const Image& image, const LayerGraph& g, const EmbeddingTable& table, std::size_t d,
                        InferencePath path) {
    if (g.input_shape.c != 3) throw Error(ErrorCode::ShapeMismatch, "graph input must have 3 channels for images");
    return run_pipeline(preprocess(image, g.input_shape.h, g.input_shape.w), g, table, d, path);
}

}  // namespace tinyvlm

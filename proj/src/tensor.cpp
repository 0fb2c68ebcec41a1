#include "tinyvlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "tinyvlm/bytes.hpp"
#include "tinyvlm/error.hpp"

namespace tinyvlm {

namespace {

constexpr std::string_view kTensorMagic = "TVT1";

void require_same_size(std::size_t a, std::size_t b, const char* what) {
    if (a != b)
        throw Error(ErrorCode::DimensionMismatch,
                    std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b));
}

}  // namespace

const char* to_string(Precision p) noexcept {
    switch (p) {
        case Precision::F32: return "f32";
        case Precision::F16: return "f16";
        case Precision::I8: return "i8";
        case Precision::I4: return "i4";
    }
    return "?";
}

Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::F32;
    if (s == "f16") return Precision::F16;
    if (s == "i8") return Precision::I8;
    if (s == "i4") return Precision::I4;
    throw Error(ErrorCode::InvalidArgument, "unknown precision '" + s + "' (expected f32|f16|i8|i4)");
}

std::size_t bytes_per_value(Precision p) noexcept {
    switch (p) {
        case Precision::F32: return 4;
        case Precision::F16: return 2;
        default: return 1;
    }
}

std::size_t shape_numel(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, std::variant<std::vector<float>, std::vector<std::int8_t>> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_)
        if (e == 0) throw Error(ErrorCode::ShapeMismatch, "tensor extents must be positive");
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, data_);
    if (n != shape_numel(shape_))
        throw Error(ErrorCode::ShapeMismatch,
                    "shape holds " + std::to_string(shape_numel(shape_)) + " elements, got " + std::to_string(n));
}

Tensor Tensor::f32(std::vector<std::size_t> shape, std::vector<float> values) {
    return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::i8(std::vector<std::size_t> shape, std::vector<std::int8_t> values) {
    return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::zeros_f32(std::vector<std::size_t> shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
}

std::size_t Tensor::numel() const noexcept { return shape_.empty() ? 0 : shape_numel(shape_); }

std::span<const float> Tensor::f32_data() const {
    if (auto* v = std::get_if<std::vector<float>>(&data_)) return *v;
    throw Error(ErrorCode::InvalidArgument, "tensor is not f32");
}

std::span<const std::int8_t> Tensor::i8_data() const {
    if (auto* v = std::get_if<std::vector<std::int8_t>>(&data_)) return *v;
    throw Error(ErrorCode::InvalidArgument, "tensor is not i8");
}

bool operator==(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_ || a.dtype() != b.dtype()) return false;
    if (a.dtype() == DType::I8) return std::ranges::equal(a.i8_data(), b.i8_data());
    auto fa = a.f32_data();
    auto fb = b.f32_data();
    return std::memcmp(fa.data(), fb.data(), fa.size_bytes()) == 0;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    if (t.rank() == 0 || t.rank() > 255) throw Error(ErrorCode::ShapeMismatch, "tensor rank must be 1..255");
    ByteWriter w;
    w.magic(kTensorMagic);
    w.u8(static_cast<std::uint8_t>(t.dtype()));
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) {
        if (e > std::numeric_limits<std::uint32_t>::max()) throw Error(ErrorCode::ShapeMismatch, "extent too large");
        w.u32(static_cast<std::uint32_t>(e));
    }
    if (t.dtype() == DType::F32) {
        for (float f : t.f32_data()) w.f32(f);
    } else {
        for (auto q : t.i8_data()) w.i8(q);
    }
    return w.take();
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t* consumed) {
    ByteReader r(bytes);
    r.expect_magic(kTensorMagic);
    const auto tag = r.u8();
    if (tag > 1) throw Error(ErrorCode::UnsupportedVersion, "unknown dtype tag " + std::to_string(tag));
    const auto rank = r.u8();
    if (rank == 0) throw Error(ErrorCode::ShapeMismatch, "rank 0 tensor");
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) {
        e = r.u32();
        if (e == 0) throw Error(ErrorCode::ShapeMismatch, "zero extent");
    }
    // Guard against absurd extents before allocating.
    long double total = 1;
    for (auto e : shape) total *= static_cast<long double>(e);
    const std::size_t elem = tag == 0 ? 4 : 1;
    if (total * elem > static_cast<long double>(r.remaining()))
        throw Error(ErrorCode::TruncatedFile, "tensor payload shorter than its shape");
    const auto n = shape_numel(shape);
    Tensor out;
    if (tag == 0) {
        std::vector<float> v(n);
        for (auto& f : v) f = r.f32();
        out = Tensor::f32(std::move(shape), std::move(v));
    } else {
        auto raw = r.take(n);
        std::vector<std::int8_t> v(n);
        std::memcpy(v.data(), raw.data(), n);
        out = Tensor::i8(std::move(shape), std::move(v));
    }
    if (consumed) *consumed = r.position();
    return out;
}

void write_tensor_file(const std::string& path, const Tensor& t) { write_file_bytes(path, encode_tensor(t)); }

Tensor read_tensor_file(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    std::size_t used = 0;
    auto t = decode_tensor(bytes, &used);
    if (used != bytes.size()) throw Error(ErrorCode::ParseError, "trailing bytes after tensor in " + path);
    return t;
}

std::int32_t round_clamp(double x, std::int32_t limit) {
    const double r = std::round(x);
    if (r > limit) return limit;
    if (r < -limit) return -limit;
    return static_cast<std::int32_t>(r);
}

QuantizedVector quantize_symmetric(std::span<const double> v) { return quantize_symmetric(v, kInt8Max); }

QuantizedVector quantize_symmetric(std::span<const double> v, std::int32_t limit) {
    if (limit < 1 || limit > kInt8Max) throw Error(ErrorCode::InvalidArgument, "code limit must be in 1..127");
    if (v.empty()) throw Error(ErrorCode::EmptyInput, "cannot quantize an empty vector");
    const double m = max_abs(v);
    if (!(m > 0.0)) throw Error(ErrorCode::AllZeroVector, "vector has max|v| = 0");
    QuantizedVector out;
    out.codes.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out.codes[i] = static_cast<std::int8_t>(round_clamp(v[i] / m * limit, limit));
    out.params.scale = m / limit;
    return out;
}

std::vector<double> dequantize(std::span<const std::int8_t> q, const QuantParams& params) {
    if (!(params.scale > 0.0)) throw Error(ErrorCode::InvalidArgument, "quantization scale must be positive");
    std::vector<double> out(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = (q[i] - params.zero_point) * params.scale;
    return out;
}

std::int32_t dot_i8(std::span<const std::int8_t> a, std::span<const std::int8_t> b) {
    require_same_size(a.size(), b.size(), "dot_i8");
    std::int64_t acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<std::int32_t>(a[i]) * b[i];
    if (acc > std::numeric_limits<std::int32_t>::max() || acc < std::numeric_limits<std::int32_t>::min())
        throw Error(ErrorCode::AccumulatorOverflow, "int8 dot product exceeds int32 accumulator");
    return static_cast<std::int32_t>(acc);
}

double dot(std::span<const double> a, std::span<const double> b) {
    require_same_size(a.size(), b.size(), "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    require_same_size(a.size(), b.size(), "cosine_similarity");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na < kNormEpsilon || nb < kNormEpsilon) throw Error(ErrorCode::ZeroNorm, "cosine of a zero-norm vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::vector<double> l2_normalize(std::span<const double> v) {
    const double n = l2_norm(v);
    if (n < kNormEpsilon) throw Error(ErrorCode::ZeroNorm, "cannot normalize a zero-norm vector");
    std::vector<double> out(v.begin(), v.end());
    for (auto& x : out) x /= n;
    return out;
}

std::vector<double> add(std::span<const double> a, std::span<const double> b) {
    require_same_size(a.size(), b.size(), "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

std::vector<double> mul(std::span<const double> a, std::span<const double> b) {
    require_same_size(a.size(), b.size(), "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) return {};
    const double m = *std::ranges::max_element(logits);
    std::vector<double> out(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) z += out[i] = std::exp(logits[i] - m);
    for (auto& x : out) x /= z;
    return out;
}

double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) throw Error(ErrorCode::ShapeMismatch, "matrix data size does not match shape");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::left_cols(std::size_t cols) const {
    if (cols > cols_) throw Error(ErrorCode::DimensionTooLarge, "prefix wider than matrix");
    Matrix out(rows_, cols);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols; ++c) out(r, c) = (*this)(r, c);
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw Error(ErrorCode::ShapeMismatch, "matmul inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw Error(ErrorCode::ShapeMismatch, "matmul_bt inner dimensions differ");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorCode::ShapeMismatch, "add shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorCode::ShapeMismatch, "sub shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    for (auto& x : out.data()) x *= s;
    return out;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto p = softmax(logits.row(r));
        std::ranges::copy(p, out.row(r).begin());
    }
    return out;
}

Matrix normalize_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto n = l2_normalize(a.row(r));
        std::ranges::copy(n, out.row(r).begin());
    }
    return out;
}

double frobenius_norm(const Matrix& a) { return l2_norm(a.data()); }

}  // namespace tinyvlm

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace tinyvlm {

enum class DType : std::uint8_t { F32 = 0, I8 = 1 };

// Storage precision for weights and prototype tables.
enum class Precision : std::uint8_t { F32 = 0, F16 = 1, I8 = 2, I4 = 3 };

const char* to_string(Precision p) noexcept;
Precision parse_precision(const std::string& s);
// Bytes per stored value for whole-byte precisions; I4 reports 1 (two codes share it).
std::size_t bytes_per_value(Precision p) noexcept;

// Dense row-major tensor over one of two element domains. Immutable once built.
class Tensor {
public:
    Tensor() = default;

    static Tensor f32(std::vector<std::size_t> shape, std::vector<float> values);
    static Tensor i8(std::vector<std::size_t> shape, std::vector<std::int8_t> values);
    static Tensor zeros_f32(std::vector<std::size_t> shape);

    DType dtype() const noexcept { return std::holds_alternative<std::vector<float>>(data_) ? DType::F32 : DType::I8; }
    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept;

    std::span<const float> f32_data() const;
    std::span<const std::int8_t> i8_data() const;

    // Bitwise comparison: shape, dtype and raw element bytes.
    friend bool operator==(const Tensor& a, const Tensor& b);

private:
    Tensor(std::vector<std::size_t> shape, std::variant<std::vector<float>, std::vector<std::int8_t>> data);

    std::vector<std::size_t> shape_;
    std::variant<std::vector<float>, std::vector<std::int8_t>> data_;
};

std::size_t shape_numel(std::span<const std::size_t> shape);

// TVT1 raw tensor encoding: "TVT1", u8 dtype, u8 rank, rank x u32 LE extents,
// packed little-endian elements.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
// Decodes one tensor starting at the front of bytes; consumed receives the byte count used.
Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr);
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

struct QuantParams {
    double scale = 1.0;
    std::int32_t zero_point = 0;
    std::optional<std::size_t> axis;
};

struct QuantizedVector {
    std::vector<std::int8_t> codes;
    QuantParams params;
};

inline constexpr int kInt8Max = 127;
inline constexpr double kNormEpsilon = 1e-12;

// Round half away from zero (std::round semantics), then clamp to [-limit, limit].
std::int32_t round_clamp(double x, std::int32_t limit);

QuantizedVector quantize_symmetric(std::span<const double> v);
// Same scheme with a narrower code range, e.g. limit 7 for 4-bit storage.
QuantizedVector quantize_symmetric(std::span<const double> v, std::int32_t limit);
std::vector<double> dequantize(std::span<const std::int8_t> q, const QuantParams& params);

// 32-bit accumulation; throws AccumulatorOverflow if the exact sum leaves int32 range.
std::int32_t dot_i8(std::span<const std::int8_t> a, std::span<const std::int8_t> b);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
double cosine_similarity(std::span<const double> a, std::span<const double> b);
std::vector<double> l2_normalize(std::span<const double> v);
std::vector<double> add(std::span<const double> a, std::span<const double> b);
std::vector<double> mul(std::span<const double> a, std::span<const double> b);
// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> logits);
double max_abs(std::span<const double> v);

// Row-major double matrix used by the training and compression kernels.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    // First `cols` columns of every row.
    Matrix left_cols(std::size_t cols) const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materialising the transpose.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix softmax_rows(const Matrix& logits);
Matrix normalize_rows(const Matrix& a);
double frobenius_norm(const Matrix& a);

}  // namespace tinyvlm

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tinyvlm/tensor.hpp"

namespace tinyvlm {

// Stored prototype payload: K*d*b for f32/f16/i8, ceil(K*d/2) for i4.
std::size_t payload_bytes(std::size_t classes, std::size_t dim, Precision p);

std::uint16_t f32_to_f16_bits(float f) noexcept;
float f16_bits_to_f32(std::uint16_t h) noexcept;

struct PromptedClass {
    std::string class_name;
    std::vector<std::vector<double>> template_embeddings;
};

// The flash-resident class prototype table. Rows are L2-normalized prototypes,
// stored either as per-row symmetric integer codes (i8, i4) or as floats (f32, f16).
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    // Integer-coded table; codes is K*dim row-major.
    static EmbeddingTable quantized(Precision p, std::size_t dim, std::vector<std::string> names,
                                    std::vector<std::int8_t> codes, std::vector<float> scales);
    // Float table; values is K*dim row-major (f16 values must already be representable).
    static EmbeddingTable floating(Precision p, std::size_t dim, std::vector<std::string> names,
                                   std::vector<float> values);

    Precision precision() const noexcept { return precision_; }
    bool is_quantized() const noexcept { return precision_ == Precision::I8 || precision_ == Precision::I4; }
    std::size_t size() const noexcept { return names_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    const std::vector<std::string>& class_names() const noexcept { return names_; }
    const std::vector<std::int8_t>& codes() const noexcept { return codes_; }
    const std::vector<float>& scales() const noexcept { return scales_; }
    const std::vector<float>& values() const noexcept { return values_; }

    std::span<const std::int8_t> code_row(std::size_t k) const { return {codes_.data() + k * dim_, dim_}; }
    std::vector<double> dequantized_row(std::size_t k) const;
    // Largest code magnitude representable at this precision (127 for i8, 7 for i4).
    std::int32_t code_limit() const noexcept { return precision_ == Precision::I4 ? 7 : kInt8Max; }
    std::size_t payload_bytes() const { return tinyvlm::payload_bytes(size(), dim_, precision_); }

    friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;

private:
    void validate() const;

    Precision precision_ = Precision::I8;
    std::size_t dim_ = 0;
    std::vector<std::string> names_;
    std::vector<std::int8_t> codes_;
    std::vector<float> scales_;
    std::vector<float> values_;
};

std::vector<double> average_templates(const PromptedClass& pc);

// Largest ladder dimension d with K*d*b <= budget.
std::size_t select_dim(std::size_t classes, std::size_t budget_bytes, std::size_t bytes_per_value,
                       std::span<const std::size_t> ladder);

EmbeddingTable build_table(std::span<const PromptedClass> classes, Precision precision = Precision::I8);

// Keeps the first d values of every prototype, re-quantizing integer rows so
// each row again spans the full code range.
EmbeddingTable truncate_table(const EmbeddingTable& t, std::size_t d);

// TVE1 container: "TVE1", u16 version, u32 K, u16 dim, u8 precision, names
// (u16 length + UTF-8), K f32 scales, payload, CRC32 trailer.
std::vector<std::uint8_t> pack(const EmbeddingTable& t);
EmbeddingTable unpack(std::span<const std::uint8_t> bytes);

// CSV with header class,template,e0..e{d-1}. Rows of one class must be contiguous;
// a class name that reappears later, or a repeated template name, is a DuplicateClass.
std::vector<PromptedClass> read_template_csv(std::istream& in);
std::vector<PromptedClass> read_template_csv_file(const std::string& path);

}  // namespace tinyvlm

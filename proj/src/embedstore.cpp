#include "tinyvlm/embedstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <set>

#include "tinyvlm/bytes.hpp"
#include "tinyvlm/error.hpp"

namespace tinyvlm {

namespace {

constexpr std::string_view kTableMagic = "TVE1";
constexpr std::uint16_t kTableVersion = 1;

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

double parse_double(const std::string& s, std::size_t line_no) {
    // std::from_chars for double is unavailable on older libstdc++; strtod is locale-bound but fine for "C".
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
        throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": bad number '" + s + "'");
    return v;
}

}  // namespace

std::size_t payload_bytes(std::size_t classes, std::size_t dim, Precision p) {
    const std::size_t n = classes * dim;
    return p == Precision::I4 ? (n + 1) / 2 : n * bytes_per_value(p);
}

std::uint16_t f32_to_f16_bits(float f) noexcept {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    const std::uint32_t exp = (x >> 23) & 0xFFu;
    std::uint32_t mant = x & 0x7FFFFFu;
    if (exp == 0xFF) return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0));
    const int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7C00u);
    if (e <= 0) {
        if (e < -10) return static_cast<std::uint16_t>(sign);
        mant |= 0x800000u;
        const int shift = 14 - e;
        std::uint32_t half = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t mid = 1u << (shift - 1);
        if (rem > mid || (rem == mid && (half & 1u))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // carry may roll into the exponent
    return static_cast<std::uint16_t>(sign | half);
}

float f16_bits_to_f32(std::uint16_t h) noexcept {
    const std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    if (exp == 0) {
        if (mant == 0) return std::bit_cast<float>(sign);
        int e = -1;
        do {
            ++e;
            mant <<= 1;
        } while ((mant & 0x400u) == 0);
        mant &= 0x3FFu;
        return std::bit_cast<float>(sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mant << 13));
    }
    if (exp == 31) return std::bit_cast<float>(sign | 0x7F800000u | (mant << 13));
    return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

EmbeddingTable EmbeddingTable::quantized(Precision p, std::size_t dim, std::vector<std::string> names,
                                         std::vector<std::int8_t> codes, std::vector<float> scales) {
    if (p != Precision::I8 && p != Precision::I4)
        throw Error(ErrorCode::InvalidArgument, "quantized table needs i8 or i4 precision");
    EmbeddingTable t;
    t.precision_ = p;
    t.dim_ = dim;
    t.names_ = std::move(names);
    t.codes_ = std::move(codes);
    t.scales_ = std::move(scales);
    t.validate();
    return t;
}

EmbeddingTable EmbeddingTable::floating(Precision p, std::size_t dim, std::vector<std::string> names,
                                        std::vector<float> values) {
    if (p != Precision::F32 && p != Precision::F16)
        throw Error(ErrorCode::InvalidArgument, "floating table needs f32 or f16 precision");
    EmbeddingTable t;
    t.precision_ = p;
    t.dim_ = dim;
    t.names_ = std::move(names);
    t.values_ = std::move(values);
    t.scales_.assign(t.names_.size(), 1.0f);
    t.validate();
    return t;
}

void EmbeddingTable::validate() const {
    if (names_.empty()) throw Error(ErrorCode::EmptyInput, "embedding table needs at least one class");
    if (dim_ == 0) throw Error(ErrorCode::InvalidArgument, "embedding dimension must be positive");
    std::set<std::string> seen;
    for (const auto& n : names_) {
        if (n.empty()) throw Error(ErrorCode::InvalidArgument, "empty class name");
        if (!seen.insert(n).second) throw Error(ErrorCode::DuplicateClass, "duplicate class name '" + n + "'");
    }
    if (scales_.size() != names_.size()) throw Error(ErrorCode::ShapeMismatch, "one scale per class required");
    for (float s : scales_)
        if (!(s > 0.0f) || !std::isfinite(s)) throw Error(ErrorCode::InvalidArgument, "scales must be positive");
    if (is_quantized()) {
        if (codes_.size() != names_.size() * dim_) throw Error(ErrorCode::ShapeMismatch, "codes size != K*dim");
        const auto lim = code_limit();
        for (auto c : codes_)
            if (c > lim || c < -lim) throw Error(ErrorCode::InvalidArgument, "code outside symmetric range");
    } else {
        if (values_.size() != names_.size() * dim_) throw Error(ErrorCode::ShapeMismatch, "values size != K*dim");
    }
}

std::vector<double> EmbeddingTable::dequantized_row(std::size_t k) const {
    if (k >= size()) throw Error(ErrorCode::InvalidArgument, "class index out of range");
    std::vector<double> out(dim_);
    if (is_quantized()) {
        const double s = scales_[k];
        for (std::size_t i = 0; i < dim_; ++i) out[i] = codes_[k * dim_ + i] * s;
    } else {
        for (std::size_t i = 0; i < dim_; ++i) out[i] = values_[k * dim_ + i];
    }
    return out;
}

std::vector<double> average_templates(const PromptedClass& pc) {
    if (pc.template_embeddings.empty())
        throw Error(ErrorCode::EmptyTemplates, "class '" + pc.class_name + "' has no template embeddings");
    const std::size_t d = pc.template_embeddings.front().size();
    if (d == 0) throw Error(ErrorCode::DimensionMismatch, "zero-length template embedding");
    std::vector<double> mean(d, 0.0);
    for (const auto& e : pc.template_embeddings) {
        if (e.size() != d)
            throw Error(ErrorCode::DimensionMismatch, "templates of class '" + pc.class_name + "' differ in length");
        for (std::size_t i = 0; i < d; ++i) mean[i] += e[i];
    }
    for (auto& x : mean) x /= static_cast<double>(pc.template_embeddings.size());
    return l2_normalize(mean);
}

std::size_t select_dim(std::size_t classes, std::size_t budget_bytes, std::size_t bytes_per_value,
                       std::span<const std::size_t> ladder) {
    if (ladder.empty()) throw Error(ErrorCode::InvalidArgument, "dimension ladder is empty");
    if (!std::ranges::is_sorted(ladder)) throw Error(ErrorCode::InvalidArgument, "ladder must be ascending");
    if (classes == 0 || bytes_per_value == 0)
        throw Error(ErrorCode::InvalidArgument, "class count and bytes per value must be positive");
    for (auto it = ladder.rbegin(); it != ladder.rend(); ++it) {
        // K*d*b <= budget, evaluated by division to avoid overflow.
        const std::size_t d = *it;
        if (d == 0) continue;
        if (classes <= budget_bytes / d / bytes_per_value) return d;
    }
    throw Error(ErrorCode::NoFeasibleDimension,
                std::to_string(classes) + " classes at d=" + std::to_string(ladder.front()) + " need " +
                    std::to_string(classes * ladder.front() * bytes_per_value) + " B, budget is " +
                    std::to_string(budget_bytes) + " B");
}

namespace {

EmbeddingTable table_from_rows(Precision precision, std::size_t d, std::vector<std::string> names,
                               const std::vector<std::vector<double>>& rows) {
    if (precision == Precision::I8 || precision == Precision::I4) {
        const std::int32_t limit = precision == Precision::I4 ? 7 : kInt8Max;
        std::vector<std::int8_t> codes;
        std::vector<float> scales;
        codes.reserve(rows.size() * d);
        for (const auto& r : rows) {
            auto q = quantize_symmetric(r, limit);
            codes.insert(codes.end(), q.codes.begin(), q.codes.end());
            scales.push_back(static_cast<float>(q.params.scale));
        }
        return EmbeddingTable::quantized(precision, d, std::move(names), std::move(codes), std::move(scales));
    }
    std::vector<float> values;
    values.reserve(rows.size() * d);
    for (const auto& r : rows)
        for (double x : r) {
            const float f = static_cast<float>(x);
            values.push_back(precision == Precision::F16 ? f16_bits_to_f32(f32_to_f16_bits(f)) : f);
        }
    return EmbeddingTable::floating(precision, d, std::move(names), std::move(values));
}

}  // namespace

EmbeddingTable build_table(std::span<const PromptedClass> classes, Precision precision) {
    if (classes.empty()) throw Error(ErrorCode::EmptyInput, "no classes to build a table from");
    std::vector<std::string> names;
    std::vector<std::vector<double>> rows;
    std::set<std::string> seen;
    for (const auto& pc : classes) {
        if (pc.class_name.empty()) throw Error(ErrorCode::InvalidArgument, "empty class name");
        if (!seen.insert(pc.class_name).second)
            throw Error(ErrorCode::DuplicateClass, "duplicate class name '" + pc.class_name + "'");
        rows.push_back(average_templates(pc));
        if (rows.back().size() != rows.front().size())
            throw Error(ErrorCode::DimensionMismatch, "class '" + pc.class_name + "' has a different dimension");
        names.push_back(pc.class_name);
    }
    return table_from_rows(precision, rows.front().size(), std::move(names), rows);
}

EmbeddingTable truncate_table(const EmbeddingTable& t, std::size_t d) {
    if (d == 0) throw Error(ErrorCode::InvalidArgument, "truncation dimension must be positive");
    if (d > t.dim())
        throw Error(ErrorCode::DimensionTooLarge,
                    "requested d=" + std::to_string(d) + " exceeds table dimension " + std::to_string(t.dim()));
    if (d == t.dim()) return t;
    std::vector<std::vector<double>> rows;
    rows.reserve(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) {
        auto r = t.dequantized_row(k);
        r.resize(d);
        rows.push_back(std::move(r));
    }
    if (!t.is_quantized()) {
        std::vector<float> values;
        for (const auto& r : rows)
            for (double x : r) values.push_back(static_cast<float>(x));
        return EmbeddingTable::floating(t.precision(), d, t.class_names(), std::move(values));
    }
    return table_from_rows(t.precision(), d, t.class_names(), rows);
}

std::vector<std::uint8_t> pack(const EmbeddingTable& t) {
    if (t.size() == 0) throw Error(ErrorCode::EmptyInput, "refusing to pack an empty table");
    if (t.dim() > 0xFFFF) throw Error(ErrorCode::InvalidArgument, "dimension exceeds u16");
    ByteWriter w;
    w.magic(kTableMagic);
    w.u16(kTableVersion);
    w.u32(static_cast<std::uint32_t>(t.size()));
    w.u16(static_cast<std::uint16_t>(t.dim()));
    w.u8(static_cast<std::uint8_t>(t.precision()));
    for (const auto& n : t.class_names()) w.str16(n);
    for (float s : t.scales()) w.f32(s);
    switch (t.precision()) {
        case Precision::F32:
            for (float v : t.values()) w.f32(v);
            break;
        case Precision::F16:
            for (float v : t.values()) w.u16(f32_to_f16_bits(v));
            break;
        case Precision::I8:
            for (auto c : t.codes()) w.i8(c);
            break;
        case Precision::I4: {
            const auto& c = t.codes();
            for (std::size_t i = 0; i < c.size(); i += 2) {
                const auto hi = static_cast<std::uint8_t>(c[i] & 0x0F);
                const auto lo = static_cast<std::uint8_t>(i + 1 < c.size() ? (c[i + 1] & 0x0F) : 0);
                w.u8(static_cast<std::uint8_t>((hi << 4) | lo));
            }
            break;
        }
    }
    w.crc32_trailer();
    return w.take();
}

EmbeddingTable unpack(std::span<const std::uint8_t> bytes) {
    ByteReader probe(bytes);
    probe.expect_magic(kTableMagic);
    ByteReader r(check_crc32_trailer(bytes));
    r.expect_magic(kTableMagic);
    const auto version = r.u16();
    if (version != kTableVersion) throw Error(ErrorCode::UnsupportedVersion, "TVE1 version " + std::to_string(version));
    const std::size_t k = r.u32();
    const std::size_t d = r.u16();
    const auto tag = r.u8();
    if (tag > 3) throw Error(ErrorCode::UnsupportedVersion, "unknown precision tag " + std::to_string(tag));
    const auto precision = static_cast<Precision>(tag);
    if (k == 0) throw Error(ErrorCode::EmptyInput, "table has no classes");
    // Every class costs at least 2 (name length) + 4 (scale) bytes.
    if (k > r.remaining() / 6) throw Error(ErrorCode::TruncatedFile, "class count exceeds file size");
    std::vector<std::string> names(k);
    for (auto& n : names) n = r.str16();
    std::vector<float> scales(k);
    for (auto& s : scales) s = r.f32();
    const std::size_t payload = payload_bytes(k, d, precision);
    if (payload != r.remaining())
        throw Error(r.remaining() < payload ? ErrorCode::TruncatedFile : ErrorCode::ParseError,
                    "payload is " + std::to_string(r.remaining()) + " bytes, expected " + std::to_string(payload));
    EmbeddingTable out;
    switch (precision) {
        case Precision::F32:
        case Precision::F16: {
            std::vector<float> values(k * d);
            for (auto& v : values) v = precision == Precision::F32 ? r.f32() : f16_bits_to_f32(r.u16());
            out = EmbeddingTable::floating(precision, d, std::move(names), std::move(values));
            for (float s : scales)
                if (s != 1.0f) throw Error(ErrorCode::ParseError, "float tables carry unit scales");
            break;
        }
        case Precision::I8: {
            std::vector<std::int8_t> codes(k * d);
            for (auto& c : codes) c = r.i8();
            out = EmbeddingTable::quantized(precision, d, std::move(names), std::move(codes), std::move(scales));
            break;
        }
        case Precision::I4: {
            std::vector<std::int8_t> codes(k * d);
            for (std::size_t i = 0; i < codes.size(); i += 2) {
                const auto b = r.u8();
                // Sign-extend each nibble.
                codes[i] = static_cast<std::int8_t>(static_cast<std::int8_t>(b & 0xF0) >> 4);
                if (i + 1 < codes.size())
                    codes[i + 1] = static_cast<std::int8_t>(static_cast<std::int8_t>((b & 0x0F) << 4) >> 4);
                else if ((b & 0x0F) != 0)
                    throw Error(ErrorCode::ParseError, "nonzero padding nibble");
            }
            out = EmbeddingTable::quantized(precision, d, std::move(names), std::move(codes), std::move(scales));
            break;
        }
    }
    return out;
}

std::vector<PromptedClass> read_template_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, "empty CSV");
    const auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "class" || header[1] != "template")
        throw Error(ErrorCode::ParseError, "CSV header must start with class,template,e0");
    const std::size_t d = header.size() - 2;
    for (std::size_t i = 0; i < d; ++i)
        if (header[i + 2] != "e" + std::to_string(i))
            throw Error(ErrorCode::ParseError, "CSV header column " + std::to_string(i + 2) + " should be e" +
                                                   std::to_string(i));
    std::vector<PromptedClass> out;
    std::set<std::string> seen_classes;
    std::set<std::string> templates;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() != d + 2)
            throw Error(ErrorCode::DimensionMismatch, "line " + std::to_string(line_no) + " has " +
                                                          std::to_string(f.size()) + " fields, expected " +
                                                          std::to_string(d + 2));
        std::vector<double> e(d);
        for (std::size_t i = 0; i < d; ++i) e[i] = parse_double(f[i + 2], line_no);
        if (f[0].empty()) throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": empty class name");
        if (out.empty() || out.back().class_name != f[0]) {
            if (!seen_classes.insert(f[0]).second)
                throw Error(ErrorCode::DuplicateClass, "class '" + f[0] + "' appears in two separate blocks (line " +
                                                           std::to_string(line_no) + ")");
            out.push_back(PromptedClass{f[0], {}});
            templates.clear();
        }
        if (!templates.insert(f[1]).second)
            throw Error(ErrorCode::DuplicateClass,
                        "class '" + f[0] + "' repeats template '" + f[1] + "' (line " + std::to_string(line_no) + ")");
        out.back().template_embeddings.push_back(std::move(e));
    }
    if (out.empty()) throw Error(ErrorCode::EmptyInput, "CSV has no data rows");
    return out;
}

std::vector<PromptedClass> read_template_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
    return read_template_csv(in);
}

}  // namespace tinyvlm

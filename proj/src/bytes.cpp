#include "tinyvlm/bytes.hpp"

#include <fstream>
#include <iterator>

#include <zlib.h>

namespace tinyvlm {

void ByteWriter::str16(std::string_view s) {
    if (s.size() > 0xFFFF) throw Error(ErrorCode::InvalidArgument, "string longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
}

void ByteWriter::crc32_trailer() { u32(crc32(out_)); }

void ByteReader::expect_magic(std::string_view m) {
    if (remaining() < m.size()) throw Error(ErrorCode::TruncatedFile, "file shorter than magic");
    auto got = take(m.size());
    if (std::memcmp(got.data(), m.data(), m.size()) != 0)
        throw Error(ErrorCode::BadMagic, "expected magic " + std::string(m));
}

std::string ByteReader::str16() {
    const auto n = u16();
    auto b = take(n);
    return {reinterpret_cast<const char*>(b.data()), b.size()};
}

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
    if (n > remaining())
        throw Error(ErrorCode::TruncatedFile,
                    "need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ", have " +
                        std::to_string(remaining()));
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
}

std::uint64_t ByteReader::get_le(std::size_t n) {
    auto b = take(n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong c = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for very large buffers.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        c = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(c);
}

std::span<const std::uint8_t> check_crc32_trailer(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw Error(ErrorCode::TruncatedFile, "missing checksum trailer");
    auto body = bytes.first(bytes.size() - 4);
    ByteReader tail(bytes.last(4));
    if (tail.u32() != crc32(body)) throw Error(ErrorCode::ChecksumMismatch, "CRC32 does not match payload");
    return body;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path);
}

}  // namespace tinyvlm

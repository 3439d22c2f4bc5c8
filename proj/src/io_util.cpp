#include "pdt/io_util.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "pdt/common.hpp"

namespace pdt {

namespace {

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> t{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}

const std::array<uint32_t, 256>& crc_table() {
  static const auto t = make_crc_table();
  return t;
}

}  // namespace

uint32_t crc32(const void* data, size_t n, uint32_t seed) {
  const auto& t = crc_table();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) c = t[(c ^ p[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

uint32_t crc32_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for hashing: " + path);
  const auto& t = crc_table();
  uint32_t c = 0xFFFFFFFFu;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i)
      c = t[(c ^ static_cast<unsigned char>(buf[i])) & 0xFF] ^ (c >> 8);
  }
  return c ^ 0xFFFFFFFFu;
}

void ByteWriter::u32(uint32_t v) {
  bytes.push_back(static_cast<unsigned char>(v));
  bytes.push_back(static_cast<unsigned char>(v >> 8));
  bytes.push_back(static_cast<unsigned char>(v >> 16));
  bytes.push_back(static_cast<unsigned char>(v >> 24));
}

void ByteWriter::u64(uint64_t v) {
  u32(static_cast<uint32_t>(v));
  u32(static_cast<uint32_t>(v >> 32));
}

void ByteWriter::raw(const void* p, size_t count) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  bytes.insert(bytes.end(), b, b + count);
}

void ByteWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  raw(s.data(), s.size());
}

uint8_t ByteReader::u8() {
  if (off + 1 > n) throw IntegrityError("truncated input");
  return p[off++];
}

uint32_t ByteReader::u32() {
  if (off + 4 > n) throw IntegrityError("truncated input");
  uint32_t v = static_cast<uint32_t>(p[off]) | static_cast<uint32_t>(p[off + 1]) << 8 |
               static_cast<uint32_t>(p[off + 2]) << 16 | static_cast<uint32_t>(p[off + 3]) << 24;
  off += 4;
  return v;
}

uint64_t ByteReader::u64() {
  uint64_t lo = u32();
  uint64_t hi = u32();
  return lo | hi << 32;
}

void ByteReader::raw(void* out, size_t count) {
  if (off + count > n) throw IntegrityError("truncated input");
  std::memcpy(out, p + off, count);
  off += count;
}

std::string ByteReader::str() {
  uint32_t len = u32();
  if (off + len > n) throw IntegrityError("truncated input");
  std::string s(reinterpret_cast<const char*>(p + off), len);
  off += len;
  return s;
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open file: " + path);
  std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> bytes(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw IoError("short read from " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace pdt

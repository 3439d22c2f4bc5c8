#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace pdt {

uint32_t crc32(const void* data, size_t n, uint32_t seed = 0);
uint32_t crc32_file(const std::string& path);

// Little-endian primitives over a growable byte buffer; the checkpoint format
// is assembled in memory so the CRC trailer can cover everything before it.
struct ByteWriter {
  std::vector<unsigned char> bytes;
  void u8(uint8_t v) { bytes.push_back(v); }
  void u32(uint32_t v);
  void u64(uint64_t v);
  void raw(const void* p, size_t n);
  void str(const std::string& s);
};

struct ByteReader {
  const unsigned char* p;
  size_t n;
  size_t off = 0;
  uint8_t u8();
  uint32_t u32();
  uint64_t u64();
  void raw(void* out, size_t count);
  std::string str();
  bool at_end() const { return off == n; }
};

std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes);

}  // namespace pdt

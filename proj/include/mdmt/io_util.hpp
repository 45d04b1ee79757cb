#pragma once

#include <cstdint>
#include <cstring>
#include <iosfwd>
#include <string>
#include <vector>

namespace mdmt {

// CRC-32 (IEEE 802.3, reflected, poly 0xEDB88320). Used by the checkpoint
// container's trailing checksum.
uint32_t crc32(const void* data, size_t len, uint32_t seed = 0);

// Little-endian binary writer that accumulates into a buffer so the CRC can
// be computed over everything after the magic before flushing to disk.
class ByteWriter {
 public:
  void put_bytes(const void* p, size_t n);
  void put_u8(uint8_t v) { put_bytes(&v, 1); }
  void put_u16(uint16_t v);
  void put_u32(uint32_t v);
  void put_u64(uint64_t v);
  void put_f32(float v);
  void put_string(const std::string& s);  // u32 length + bytes

  const std::vector<uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

// Cursor over an in-memory blob with bounds-checked little-endian reads.
class ByteReader {
 public:
  explicit ByteReader(std::vector<uint8_t> data) : data_(std::move(data)) {}

  void get_bytes(void* p, size_t n);
  uint8_t get_u8();
  uint16_t get_u16();
  uint32_t get_u32();
  uint64_t get_u64();
  float get_f32();
  std::string get_string();

  size_t pos() const { return pos_; }
  size_t size() const { return data_.size(); }
  bool at_end() const { return pos_ == data_.size(); }
  const uint8_t* data() const { return data_.data(); }

 private:
  std::vector<uint8_t> data_;
  size_t pos_ = 0;
};

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, size_t len);

// Fixed-format float printing shared by history/report writers so repeated
// runs are byte-comparable.
std::string format_double(double v, int digits = 10);

}  // namespace mdmt

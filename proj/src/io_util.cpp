#include "mdmt/io_util.hpp"

#include <array>
#include <cstdio>
#include <fstream>

#include "mdmt/errors.hpp"

namespace mdmt {

namespace {

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) {
      c = (c & 1) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
    }
    table[i] = c;
  }
  return table;
}

}  // namespace

uint32_t crc32(const void* data, size_t len, uint32_t seed) {
  static const std::array<uint32_t, 256> table = make_crc_table();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < len; ++i) {
    c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  }
  return c ^ 0xFFFFFFFFu;
}

void ByteWriter::put_bytes(const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  buf_.insert(buf_.end(), b, b + n);
}

void ByteWriter::put_u16(uint16_t v) {
  uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
  put_bytes(b, 2);
}

void ByteWriter::put_u32(uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  put_bytes(b, 4);
}

void ByteWriter::put_u64(uint64_t v) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  put_bytes(b, 8);
}

void ByteWriter::put_f32(float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(bits);
}

void ByteWriter::put_string(const std::string& s) {
  put_u32(static_cast<uint32_t>(s.size()));
  put_bytes(s.data(), s.size());
}

void ByteReader::get_bytes(void* p, size_t n) {
  if (pos_ + n > data_.size()) {
    throw IoError("unexpected end of file (need " + std::to_string(n) +
                  " bytes at offset " + std::to_string(pos_) + ")");
  }
  std::memcpy(p, data_.data() + pos_, n);
  pos_ += n;
}

uint8_t ByteReader::get_u8() {
  uint8_t v;
  get_bytes(&v, 1);
  return v;
}

uint16_t ByteReader::get_u16() {
  uint8_t b[2];
  get_bytes(b, 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t ByteReader::get_u32() {
  uint8_t b[4];
  get_bytes(b, 4);
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

uint64_t ByteReader::get_u64() {
  uint8_t b[8];
  get_bytes(b, 8);
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

float ByteReader::get_f32() {
  const uint32_t bits = get_u32();
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::string ByteReader::get_string() {
  const uint32_t n = get_u32();
  if (pos_ + n > data_.size()) {
    throw IoError("string length " + std::to_string(n) +
                  " overruns file at offset " + std::to_string(pos_));
  }
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  in.seekg(0, std::ios::end);
  const auto len = static_cast<size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<uint8_t> data(len);
  if (len > 0) in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(len));
  if (!in) throw IoError("short read on file: " + path);
  return data;
}

void write_file_bytes(const std::string& path, const void* data, size_t len) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open file for writing: " + path);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!out) throw IoError("short write on file: " + path);
}

std::string format_double(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace mdmt

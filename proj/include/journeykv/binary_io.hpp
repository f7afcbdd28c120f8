#ifndef JOURNEYKV_BINARY_IO_HPP
#define JOURNEYKV_BINARY_IO_HPP

// Little-endian primitives for the repository snapshot and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace jkv {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    buffer_.insert(buffer_.end(), p, p + n);
  }

  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }

  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }

  const std::vector<unsigned char>& buffer() const { return buffer_; }

 private:
  std::vector<unsigned char> buffer_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::vector<unsigned char> data) : data_(std::move(data)) {}

  std::size_t offset() const { return offset_; }
  bool at_end() const { return offset_ == data_.size(); }

  void bytes(void* out, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(out, data_.data() + offset_, n);
    offset_ += n;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[offset_ + i]) << (8 * i);
    offset_ += 8;
    return v;
  }

  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  std::string str(const char* what) {
    const std::uint64_t n = u64(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + offset_), n);
    offset_ += n;
    return s;
  }

  /// Guards counts read from the file before allocating for them.
  void expect_available(std::uint64_t n, const char* what) const { need(n, what); }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > data_.size() - offset_) {
      throw FormatError("truncated input at byte offset " + std::to_string(offset_) + " reading " +
                        what + " (" + std::to_string(n) + " bytes needed, " +
                        std::to_string(data_.size() - offset_) + " available)");
    }
  }

  std::vector<unsigned char> data_;
  std::size_t offset_ = 0;
};

std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<unsigned char>& data);

}  // namespace jkv

#endif  // JOURNEYKV_BINARY_IO_HPP

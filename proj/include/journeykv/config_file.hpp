#ifndef JOURNEYKV_CONFIG_FILE_HPP
#define JOURNEYKV_CONFIG_FILE_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace jkv {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Plain `key = value` lines. Blank lines and lines starting with '#' are
/// ignored. Every key must be consumed; `reject_unknown` reports the rest.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& source = "<config>");
  static KeyValueConfig parse_string(const std::string& text, const std::string& source = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.contains(key); }
  void set(const std::string& key, const std::string& value);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws naming the first key no getter asked for.
  void reject_unknown() const;

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };

  const Entry* lookup(const std::string& key) const;
  [[noreturn]] void bad_value(const std::string& key, const Entry& entry, const char* expected) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
  mutable std::set<std::string> used_;
};

}  // namespace jkv

#endif  // JOURNEYKV_CONFIG_FILE_HPP

#include "journeykv/config_file.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace jkv {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::istream& in, const std::string& source) {
  KeyValueConfig config;
  config.source_ = source;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = trim(text.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(number) + ": empty key");
    if (config.entries_.contains(key)) {
      throw ConfigError(source + ":" + std::to_string(number) + ": duplicate key '" + key + "'");
    }
    config.entries_.emplace(key, Entry{trim(text.substr(eq + 1)), number});
  }
  return config;
}

KeyValueConfig KeyValueConfig::parse_string(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  return parse(in, source);
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse(in, path.string());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  entries_.insert_or_assign(key, Entry{value, 0});
}

const KeyValueConfig::Entry* KeyValueConfig::lookup(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

void KeyValueConfig::bad_value(const std::string& key, const Entry& entry, const char* expected) const {
  throw ConfigError(source_ + ":" + std::to_string(entry.line) + ": '" + key + "' expects " + expected +
                    ", got '" + entry.value + "'");
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  const Entry* e = lookup(key);
  return e ? e->value : fallback;
}

namespace {

template <typename T>
bool parse_number(const std::string& text, T& out) {
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  const Entry* e = lookup(key);
  if (!e) return fallback;
  int v = 0;
  if (!parse_number(e->value, v)) bad_value(key, *e, "an integer");
  return v;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  const Entry* e = lookup(key);
  if (!e) return fallback;
  std::uint64_t v = 0;
  if (!parse_number(e->value, v)) bad_value(key, *e, "a non-negative integer");
  return v;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const Entry* e = lookup(key);
  if (!e) return fallback;
  double v = 0;
  if (!parse_number(e->value, v)) bad_value(key, *e, "a number");
  return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const Entry* e = lookup(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1") return true;
  if (e->value == "false" || e->value == "0") return false;
  bad_value(key, *e, "true or false");
}

void KeyValueConfig::reject_unknown() const {
  for (const auto& [key, entry] : entries_) {
    if (!used_.contains(key)) {
      throw ConfigError(source_ + ":" + std::to_string(entry.line) + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace jkv

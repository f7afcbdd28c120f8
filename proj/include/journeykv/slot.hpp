#ifndef JOURNEYKV_SLOT_HPP
#define JOURNEYKV_SLOT_HPP

#include <compare>
#include <string>

namespace jkv {

/// Slot label of a token. Positional slots (POSITION_k) are virtual: the family
/// name plus an index k >= 1, never enumerated in a vocabulary.
struct SlotId {
  std::string name;
  int position = 0;

  static constexpr const char* kPositionFamily = "POSITION";

  static SlotId named(std::string name) { return SlotId{std::move(name), 0}; }
  static SlotId positional(int k) { return SlotId{kPositionFamily, k}; }
  /// Parses "HEAD" or "POSITION_12".
  static SlotId parse(const std::string& text);

  bool is_positional() const { return position > 0; }
  std::string str() const;

  auto operator<=>(const SlotId&) const = default;
  bool operator==(const SlotId&) const = default;
};

inline SlotId SlotId::parse(const std::string& text) {
  const std::string prefix = std::string(kPositionFamily) + "_";
  if (text.size() > prefix.size() && text.compare(0, prefix.size(), prefix) == 0) {
    const std::string digits = text.substr(prefix.size());
    bool numeric = !digits.empty();
    for (char c : digits) numeric = numeric && c >= '0' && c <= '9';
    if (numeric) {
      const int k = std::stoi(digits);
      if (k > 0) return positional(k);
    }
  }
  return named(text);
}

inline std::string SlotId::str() const {
  return is_positional() ? name + "_" + std::to_string(position) : name;
}

}  // namespace jkv

#endif  // JOURNEYKV_SLOT_HPP

#pragma once

// Line-oriented key=value configuration. '#' starts a comment; blank lines
// are ignored; later keys override earlier ones.

#include <cstdint>
#include <map>
#include <string>

#include "cvvnet/backbone.hpp"

namespace cvvnet {

class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  /// Keys never read through get(); used to reject typos.
  std::vector<std::string> unread() const;
  const std::map<std::string, std::string>& values() const { return values_; }
  /// Sorted "key=value" lines.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> read_;
};

Index parse_index(const std::string& key, const std::string& value);
double parse_real(const std::string& key, const std::string& value);
std::uint64_t parse_u64(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
std::vector<Index> parse_index_list(const std::string& key, const std::string& value);

/// Shortest text that parses back to the same double.
std::string format_real(double v);

/// FNV-1a 64-bit.
std::uint64_t fnv1a(const std::string& text);

void write_backbone(KeyValues& kv, const BackboneConfig& c, const std::string& prefix = "model.");
/// Fields absent from kv keep the values already in c.
void read_backbone(const KeyValues& kv, BackboneConfig& c, const std::string& prefix = "model.");

}  // namespace cvvnet

#include "cvvnet/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace cvvnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string join(const std::vector<Index>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    kv.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const std::string& KeyValues::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
  read_[key] = true;
  return it->second;
}

std::string KeyValues::get(const std::string& key, const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

std::vector<std::string> KeyValues::unread() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!read_.count(k)) out.push_back(k);
  return out;
}

std::string KeyValues::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

Index parse_index(const std::string& key, const std::string& value) {
  Index v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    throw ConfigError("key '" + key + "': expected an integer, got '" + value + "'");
  return v;
}

double parse_real(const std::string& key, const std::string& value) {
  double v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    throw ConfigError("key '" + key + "': expected a real number, got '" + value + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + value + "'");
}

std::vector<Index> parse_index_list(const std::string& key, const std::string& value) {
  std::vector<Index> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_index(key, trim(item)));
  if (out.empty()) throw ConfigError("key '" + key + "': expected a comma-separated list");
  return out;
}

std::string format_real(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_backbone(KeyValues& kv, const BackboneConfig& c, const std::string& prefix) {
  kv.set(prefix + "in_channels", std::to_string(c.in_channels));
  kv.set(prefix + "input_height", std::to_string(c.input_height));
  kv.set(prefix + "input_width", std::to_string(c.input_width));
  kv.set(prefix + "stage_channels", join(c.stage_channels));
  kv.set(prefix + "blocks_per_stage", join(c.blocks_per_stage));
  kv.set(prefix + "stage_strides", join(c.stage_strides));
  std::string pos;
  for (std::size_t i = 0; i < c.msaga_positions.size(); ++i)
    pos += (i ? ";" : "") + std::to_string(c.msaga_positions[i].first) + ":" +
           std::to_string(c.msaga_positions[i].second);
  kv.set(prefix + "msaga_positions", pos.empty() ? "none" : pos);
  kv.set(prefix + "hpp_bins", join(c.hpp_bins));
  kv.set(prefix + "embed_dim", std::to_string(c.embed_dim));
  kv.set(prefix + "num_classes", std::to_string(c.num_classes));
  kv.set(prefix + "aggregator", to_string(c.aggregator));
  kv.set(prefix + "extractor", to_string(c.extractor));
  kv.set(prefix + "n_heads", std::to_string(c.n_heads));
  kv.set(prefix + "kv_stride", std::to_string(c.kv_stride));
  kv.set(prefix + "init_seed", std::to_string(c.init_seed));
}

void read_backbone(const KeyValues& kv, BackboneConfig& c, const std::string& prefix) {
  auto idx = [&](const char* name, Index& field) {
    if (kv.has(prefix + name)) field = parse_index(prefix + name, kv.get(prefix + name));
  };
  auto list = [&](const char* name, std::vector<Index>& field) {
    if (kv.has(prefix + name)) field = parse_index_list(prefix + name, kv.get(prefix + name));
  };
  idx("in_channels", c.in_channels);
  idx("input_height", c.input_height);
  idx("input_width", c.input_width);
  list("stage_channels", c.stage_channels);
  list("blocks_per_stage", c.blocks_per_stage);
  list("stage_strides", c.stage_strides);
  if (kv.has(prefix + "msaga_positions")) {
    const std::string key = prefix + "msaga_positions";
    const std::string v = kv.get(key);
    c.msaga_positions.clear();
    if (v != "none") {
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ';')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("key '" + key + "': expected stage:block pairs");
        c.msaga_positions.emplace_back(parse_index(key, trim(item.substr(0, colon))),
                                       parse_index(key, trim(item.substr(colon + 1))));
      }
    }
  }
  list("hpp_bins", c.hpp_bins);
  idx("embed_dim", c.embed_dim);
  idx("num_classes", c.num_classes);
  try {
    if (kv.has(prefix + "aggregator")) c.aggregator = parse_aggregator(kv.get(prefix + "aggregator"));
    if (kv.has(prefix + "extractor")) c.extractor = parse_extractor(kv.get(prefix + "extractor"));
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  idx("n_heads", c.n_heads);
  idx("kv_stride", c.kv_stride);
  if (kv.has(prefix + "init_seed")) c.init_seed = parse_u64(prefix + "init_seed", kv.get(prefix + "init_seed"));
}

}  // namespace cvvnet

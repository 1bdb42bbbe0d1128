#include "cvvnet/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cvvnet/config.hpp"
#include "cvvnet/image_io.hpp"
#include "cvvnet/seeds.hpp"

namespace cvvnet {

namespace fs = std::filesystem;

namespace {

// One record per line: space-separated key=value fields.
std::map<std::string, std::string> parse_record(const std::string& line, int lineno) {
  std::map<std::string, std::string> rec;
  std::istringstream in(line);
  std::string field;
  while (in >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos || eq == 0)
      throw FormatError("line " + std::to_string(lineno) + ": expected key=value, got '" + field + "'");
    rec[field.substr(0, eq)] = field.substr(eq + 1);
  }
  return rec;
}

const std::string& field(const std::map<std::string, std::string>& rec, const std::string& key, int lineno) {
  const auto it = rec.find(key);
  if (it == rec.end()) throw FormatError("line " + std::to_string(lineno) + ": missing field '" + key + "'");
  return it->second;
}

template <typename F>
void for_each_record(const std::string& text, F&& f) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    f(parse_record(line, lineno), lineno);
  }
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
T parse_field(const std::map<std::string, std::string>& rec, const std::string& key, int lineno) {
  const std::string& v = field(rec, key, lineno);
  try {
    if constexpr (std::is_same_v<T, double>)
      return parse_real(key, v);
    else if constexpr (std::is_same_v<T, std::uint64_t>)
      return parse_u64(key, v);
    else
      return static_cast<T>(parse_index(key, v));
  } catch (const ConfigError& e) {
    throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
  }
}

}  // namespace

std::vector<int> Dataset::identities() const {
  std::vector<int> ids;
  for (const auto& s : sequences) ids.push_back(s.clip.identity);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

Dataset Dataset::filter(const std::function<bool(const Sequence&)>& keep) const {
  Dataset out;
  for (const auto& s : sequences)
    if (keep(s)) out.sequences.push_back(s);
  return out;
}

std::vector<ManifestEntry> make_manifest(const SynthConfig& c) {
  if (c.identities < 1 || c.sequences_per_cell < 1 || c.n_frames < 1)
    throw ConfigError("synthetic dataset sizes must be positive");
  std::vector<ManifestEntry> entries;
  for (int id = 0; id < c.identities; ++id) {
    const std::uint64_t identity_seed = derive_seed(c.seed, {1, static_cast<std::uint64_t>(id)});
    for (ViewGroup v : kViewGroups)
      for (Condition cond : kConditions)
        for (int s = 0; s < c.sequences_per_cell; ++s) {
          ManifestEntry e;
          e.identity = id;
          e.identity_seed = identity_seed;
          e.condition = cond;
          e.n_frames = c.n_frames;
          e.sequence_index = s;
          const std::uint64_t cell = derive_seed(c.seed, {2, static_cast<std::uint64_t>(id),
                                                          static_cast<std::uint64_t>(v), static_cast<std::uint64_t>(cond),
                                                          static_cast<std::uint64_t>(s)});
          std::mt19937_64 rng(cell);
          const double u = unit_real(rng);
          e.vertical_angle_deg = v == ViewGroup::Low ? c.low_angle_deg : v == ViewGroup::Mid ? 30.0 + 30.0 * u : 60.0 + 20.0 * u;
          e.noise_seed = rng();
          entries.push_back(e);
        }
  }
  return entries;
}

std::string format_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out = "# synthetic walker manifest: one sequence per line\n";
  for (const auto& e : entries)
    out += "identity=" + std::to_string(e.identity) + " identity_seed=" + std::to_string(e.identity_seed) +
           " vertical_angle_deg=" + format_real(e.vertical_angle_deg) + " condition=" + to_string(e.condition) +
           " n_frames=" + std::to_string(e.n_frames) + " noise_seed=" + std::to_string(e.noise_seed) +
           " sequence_index=" + std::to_string(e.sequence_index) + "\n";
  return out;
}

std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> entries;
  for_each_record(text, [&](const auto& rec, int lineno) {
    ManifestEntry e;
    e.identity = parse_field<int>(rec, "identity", lineno);
    e.identity_seed = parse_field<std::uint64_t>(rec, "identity_seed", lineno);
    e.vertical_angle_deg = parse_field<double>(rec, "vertical_angle_deg", lineno);
    e.condition = parse_condition(field(rec, "condition", lineno));
    e.n_frames = parse_field<Index>(rec, "n_frames", lineno);
    e.noise_seed = parse_field<std::uint64_t>(rec, "noise_seed", lineno);
    e.sequence_index = parse_field<int>(rec, "sequence_index", lineno);
    entries.push_back(e);
  });
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << format_manifest(entries);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) { return parse_manifest(slurp(path)); }

std::string sequence_name(const ManifestEntry& e) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "id%03d_%s_%s_%02d", e.identity, to_string(view_group_for_angle(e.vertical_angle_deg)).c_str(),
                to_string(e.condition).c_str(), e.sequence_index);
  return buf;
}

Sequence render_entry(const ManifestEntry& e, std::int64_t sequence_id) {
  const WalkerSpec spec = WalkerSpec::from_seed(e.identity_seed);
  SilhouetteClip raw = synthesize_walker_clip(spec, e.vertical_angle_deg, e.condition, e.n_frames, e.noise_seed, e.identity);
  Sequence s;
  s.name = sequence_name(e);
  s.sequence_id = sequence_id;
  s.sequence_index = e.sequence_index;
  s.clip = raw;
  s.clip.frames.clear();
  for (const auto& f : raw.frames) s.clip.frames.push_back(preprocess_silhouette(f));
  return s;
}

Dataset render_manifest(const std::vector<ManifestEntry>& entries) {
  Dataset d;
  for (std::size_t i = 0; i < entries.size(); ++i)
    d.sequences.push_back(render_entry(entries[i], static_cast<std::int64_t>(i)));
  return d;
}

void write_dataset(const std::string& dir, const Dataset& data, const std::string& ext) {
  if (ext != "pgm" && ext != "png") throw ConfigError("frame format must be pgm or png");
  fs::create_directories(dir);
  std::ofstream index(fs::path(dir) / "index.txt");
  if (!index) throw FormatError("cannot write index in '" + dir + "'");
  index << "# one record per sequence\n";
  for (const auto& s : data.sequences) {
    const fs::path seq_dir = fs::path(dir) / s.name;
    fs::create_directories(seq_dir);
    for (std::size_t f = 0; f < s.clip.frames.size(); ++f) {
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.%s", f, ext.c_str());
      write_mask((seq_dir / name).string(), s.clip.frames[f].mask);
    }
    index << "name=" << s.name << " sequence_id=" << s.sequence_id << " identity=" << s.clip.identity
          << " view_group=" << to_string(s.clip.view_group) << " condition=" << to_string(s.clip.condition)
          << " vertical_angle_deg=" << format_real(s.clip.vertical_angle_deg)
          << " sequence_index=" << s.sequence_index << "\n";
  }
}

Dataset read_dataset(const std::string& dir) {
  Dataset d;
  for_each_record(slurp((fs::path(dir) / "index.txt").string()), [&](const auto& rec, int lineno) {
    Sequence s;
    s.name = field(rec, "name", lineno);
    s.sequence_id = parse_field<std::int64_t>(rec, "sequence_id", lineno);
    s.sequence_index = parse_field<int>(rec, "sequence_index", lineno);
    s.clip.identity = parse_field<int>(rec, "identity", lineno);
    s.clip.view_group = parse_view_group(field(rec, "view_group", lineno));
    s.clip.condition = parse_condition(field(rec, "condition", lineno));
    s.clip.vertical_angle_deg = parse_field<double>(rec, "vertical_angle_deg", lineno);
    if (view_group_for_angle(s.clip.vertical_angle_deg) != s.clip.view_group)
      throw FormatError("line " + std::to_string(lineno) + ": view_group disagrees with vertical_angle_deg");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(fs::path(dir) / s.name)) {
      const auto ext = entry.path().extension();
      if (ext == ".pgm" || ext == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw EmptyInput("sequence '" + s.name + "' has no frames");
    for (const auto& p : files) {
      SilhouetteFrame f;
      f.mask = read_mask(p.string());
      f.source_size = {f.height(), f.width()};
      if (f.height() != kFrameHeight || f.width() != kFrameWidth) f = preprocess_silhouette(f);
      s.clip.frames.push_back(std::move(f));
    }
    d.sequences.push_back(std::move(s));
  });
  return d;
}

}  // namespace cvvnet

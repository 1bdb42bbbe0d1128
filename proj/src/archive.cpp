#include "cvvnet/archive.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace cvvnet {

static_assert(std::endian::native == std::endian::little, "archives are written in native little-endian order");

namespace {

constexpr const char* kMagic = "cvvnet-archive 1";

std::string read_line(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("'" + path + "' ended inside its header");
  return line;
}

}  // namespace

const TensorF& Archive::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("archive has no tensor '" + name + "'");
}

bool Archive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void save_archive(const std::string& path, const Archive& archive) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << kMagic << "\nmanifest " << archive.manifest.size() << "\n" << archive.manifest << "\n";
  out << "tensors " << archive.tensors.size() << "\n";
  for (const auto& [name, t] : archive.tensors) {
    if (name.find_first_of(" \n") != std::string::npos) throw FormatError("tensor name '" + name + "' has whitespace");
    out << name << ' ' << t.rank();
    for (Index d : t.shape()) out << ' ' << d;
    out << '\n';
  }
  out << "data\n";
  for (const auto& [name, t] : archive.tensors)
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!out) throw FormatError("failed writing '" + path + "'");
}

Archive load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  if (read_line(in, path) != kMagic) throw FormatError("'" + path + "' is not a cvvnet archive");
  Archive a;
  std::size_t mlen = 0, count = 0;
  {
    std::istringstream hdr(read_line(in, path));
    std::string key;
    if (!(hdr >> key >> mlen) || key != "manifest") throw FormatError("'" + path + "': bad manifest line");
  }
  a.manifest.resize(mlen);
  in.read(a.manifest.data(), static_cast<std::streamsize>(mlen));
  read_line(in, path);
  {
    std::istringstream hdr(read_line(in, path));
    std::string key;
    if (!(hdr >> key >> count) || key != "tensors") throw FormatError("'" + path + "': bad tensor count");
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream row(read_line(in, path));
    std::string name;
    Index rank = 0;
    if (!(row >> name >> rank) || rank < 0) throw FormatError("'" + path + "': bad tensor row");
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& d : shape)
      if (!(row >> d) || d < 0) throw FormatError("'" + path + "': bad shape for '" + name + "'");
    a.tensors.emplace_back(name, TensorF(shape));
  }
  if (read_line(in, path) != "data") throw FormatError("'" + path + "': missing data marker");
  for (auto& [name, t] : a.tensors) {
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw FormatError("'" + path + "': payload of '" + name + "' is truncated");
  }
  return a;
}

Archive model_archive(CvvNet<float>& model, const KeyValues& extra) {
  KeyValues kv = extra;
  write_backbone(kv, model.config());
  Archive a;
  a.manifest = kv.dump();
  model.visit([&](const std::string& name, Parameter<float>& p) { a.tensors.emplace_back(name, p.value); });
  model.visit_buffers([&](const std::string& name, TensorF& t) { a.tensors.emplace_back(name, t); });
  return a;
}

void save_model(const std::string& path, CvvNet<float>& model, const KeyValues& extra) {
  save_archive(path, model_archive(model, extra));
}

void restore_model(const Archive& archive, CvvNet<float>& model) {
  auto copy = [&](const std::string& name, TensorF& dst) {
    const TensorF& src = archive.at(name);
    if (src.shape() != dst.shape())
      throw FormatError("tensor '" + name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                        shape_str(dst.shape()));
    dst = src;
  };
  model.visit([&](const std::string& name, Parameter<float>& p) { copy(name, p.value); });
  model.visit_buffers(copy);
}

CvvNet<float> load_model(const std::string& path) {
  const Archive a = load_archive(path);
  BackboneConfig c;
  read_backbone(KeyValues::parse(a.manifest), c);
  CvvNet<float> model(c);
  restore_model(a, model);
  return model;
}

}  // namespace cvvnet

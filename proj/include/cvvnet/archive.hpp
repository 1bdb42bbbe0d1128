#pragma once

// Named-tensor container: a text header (format line, manifest, tensor
// table) followed by raw little-endian float32 payloads in table order.

#include <string>
#include <utility>
#include <vector>

#include "cvvnet/backbone.hpp"
#include "cvvnet/config.hpp"

namespace cvvnet {

struct Archive {
  std::string manifest;  // free text, conventionally key=value lines
  std::vector<std::pair<std::string, TensorF>> tensors;

  const TensorF& at(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_archive(const std::string& path, const Archive& archive);
Archive load_archive(const std::string& path);

/// Parameters and normalization buffers under their visitor names, plus the
/// configuration needed to rebuild the module graph.
Archive model_archive(CvvNet<float>& model, const KeyValues& extra = {});
void save_model(const std::string& path, CvvNet<float>& model, const KeyValues& extra = {});
/// Throws FormatError if a parameter or buffer is missing or misshapen.
void restore_model(const Archive& archive, CvvNet<float>& model);
CvvNet<float> load_model(const std::string& path);

}  // namespace cvvnet

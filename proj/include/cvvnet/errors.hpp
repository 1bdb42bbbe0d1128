#pragma once

#include <stdexcept>
#include <string>

namespace cvvnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CVVNET_DEFINE_ERROR(Name)                               \
  class Name : public Error {                                   \
   public:                                                      \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  };

CVVNET_DEFINE_ERROR(ShapeMismatch)
CVVNET_DEFINE_ERROR(IndivisibleSpatial)
CVVNET_DEFINE_ERROR(IndivisibleHeight)
CVVNET_DEFINE_ERROR(EmptyFrame)
CVVNET_DEFINE_ERROR(DegenerateFrame)
CVVNET_DEFINE_ERROR(EmptyInput)
CVVNET_DEFINE_ERROR(InvalidAngle)
CVVNET_DEFINE_ERROR(InsufficientIdentities)
CVVNET_DEFINE_ERROR(LabelOutOfRange)
CVVNET_DEFINE_ERROR(StepOutOfRange)
CVVNET_DEFINE_ERROR(NonFiniteLoss)
CVVNET_DEFINE_ERROR(EmptyGalleryAfterExclusion)
CVVNET_DEFINE_ERROR(MissingLabels)
CVVNET_DEFINE_ERROR(UnknownLayer)
CVVNET_DEFINE_ERROR(ConfigError)
CVVNET_DEFINE_ERROR(FormatError)

#undef CVVNET_DEFINE_ERROR

}  // namespace cvvnet

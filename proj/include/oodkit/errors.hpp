#pragma once

#include <stdexcept>
#include <string>

namespace ood {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define OOD_DEFINE_ERROR(Name)                         \
  struct Name : Error {                                \
    explicit Name(const std::string& msg)              \
        : Error(std::string(#Name) + ": " + msg) {}    \
  }

OOD_DEFINE_ERROR(TruncatedFile);
OOD_DEFINE_ERROR(NonFiniteValue);
OOD_DEFINE_ERROR(ParseError);
OOD_DEFINE_ERROR(UnknownCategory);
OOD_DEFINE_ERROR(DimensionMismatch);
OOD_DEFINE_ERROR(IoError);
OOD_DEFINE_ERROR(EmptyTarget);
OOD_DEFINE_ERROR(DegenerateIntensity);
OOD_DEFINE_ERROR(DetectorFailure);
OOD_DEFINE_ERROR(EmptyDatabaseClass);
OOD_DEFINE_ERROR(DegenerateData);
OOD_DEFINE_ERROR(MissingLayer);
OOD_DEFINE_ERROR(MissingAnchorIndex);
OOD_DEFINE_ERROR(NonIntegerScale);
OOD_DEFINE_ERROR(NonFiniteActivation);
OOD_DEFINE_ERROR(NonFiniteGradient);
OOD_DEFINE_ERROR(EmptySamples);
OOD_DEFINE_ERROR(InsufficientSamples);
OOD_DEFINE_ERROR(SingleClassSet);
OOD_DEFINE_ERROR(EmptyStratum);
OOD_DEFINE_ERROR(EmptyThresholds);
OOD_DEFINE_ERROR(ConfigError);

#undef OOD_DEFINE_ERROR

}  // namespace ood

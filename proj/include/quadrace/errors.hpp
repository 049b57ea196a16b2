#pragma once

#include <stdexcept>
#include <string>

namespace quadrace {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define QUADRACE_DEFINE_ERROR(Name)                       \
  class Name : public Error {                             \
   public:                                                \
    explicit Name(const std::string& what) : Error(what) {} \
  }

// Pitch angle too close to +-pi/2 for the Euler-rate kinematics.
QUADRACE_DEFINE_ERROR(NearGimbalLock);
// Integration produced NaN/Inf.
QUADRACE_DEFINE_ERROR(NonFiniteState);
QUADRACE_DEFINE_ERROR(InvalidParams);
QUADRACE_DEFINE_ERROR(AlreadyDone);
QUADRACE_DEFINE_ERROR(InvalidScheme);
QUADRACE_DEFINE_ERROR(CorruptCheckpoint);
QUADRACE_DEFINE_ERROR(NonFiniteLoss);
QUADRACE_DEFINE_ERROR(RankDeficient);
QUADRACE_DEFINE_ERROR(InsufficientExcitation);
QUADRACE_DEFINE_ERROR(IoError);

#undef QUADRACE_DEFINE_ERROR

}  // namespace quadrace

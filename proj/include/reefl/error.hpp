// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace reefl {

enum class ErrorKind {
  kDimension,
  kIndex,
  kDivergence,
  kNonFinite,
  kConfig,
  kBudget,
  kSchedule,
  kState,
  kTrace,
  kInput,
  kAggregation,
  kFormat,
  kPartition,
  kSplit,
  kIo,
};

const char* to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` distinguishes the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace reefl

// SPDX-License-Identifier: Apache-2.0
#include "reefl/error.hpp"

namespace reefl {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kIndex: return "index";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kNonFinite: return "non-finite";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kBudget: return "budget";
    case ErrorKind::kSchedule: return "schedule";
    case ErrorKind::kState: return "state";
    case ErrorKind::kTrace: return "trace";
    case ErrorKind::kInput: return "input";
    case ErrorKind::kAggregation: return "aggregation";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kPartition: return "partition";
    case ErrorKind::kSplit: return "split";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

}  // namespace reefl

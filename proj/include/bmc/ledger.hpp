// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace bmc {

// Exact operation counts. Reallocation copies and new-row writes are kept
// apart so either "copies only" or "copies + concat" totals can be reported.
struct CostLedger {
  std::uint64_t realloc_copy_elems = 0;
  std::uint64_t append_write_elems = 0;
  std::uint64_t sdpa_macs = 0;
  std::uint64_t alloc_events = 0;
  std::uint64_t alloc_bytes = 0;

  // Elements moved per decode step as the iterative-allocation analysis
  // counts them: old rows copied plus the freshly concatenated row.
  std::uint64_t moved_elems() const noexcept {
    return realloc_copy_elems + append_write_elems;
  }

  CostLedger& operator+=(const CostLedger& o) noexcept {
    realloc_copy_elems += o.realloc_copy_elems;
    append_write_elems += o.append_write_elems;
    sdpa_macs += o.sdpa_macs;
    alloc_events += o.alloc_events;
    alloc_bytes += o.alloc_bytes;
    return *this;
  }

  friend CostLedger operator+(CostLedger a, const CostLedger& b) noexcept {
    a += b;
    return a;
  }

  friend bool operator==(const CostLedger&, const CostLedger&) = default;
};

}  // namespace bmc

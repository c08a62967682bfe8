// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>

#include "bmc/errors.hpp"

namespace bmc {

// Shape of a decoder stack as seen by the KV cache.
//
// `groups` is the number of query heads that share one key/value head, so
// kv_heads() == heads / groups and groups == 1 is plain multi-head attention.
struct ModelDims {
  std::size_t batch = 1;
  std::size_t layers = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  std::size_t max_context = 1;
  std::size_t groups = 1;

  std::size_t hidden() const noexcept { return heads * head_dim; }
  std::size_t kv_heads() const noexcept { return heads / groups; }
  std::size_t kv_hidden() const noexcept { return kv_heads() * head_dim; }
  // Leading dimension of a per-layer K or V buffer.
  std::size_t kv_rows() const noexcept { return batch * kv_heads(); }
  // Leading dimension of a query tensor.
  std::size_t q_rows() const noexcept { return batch * heads; }

  void validate() const {
    if (batch == 0 || layers == 0 || heads == 0 || head_dim == 0 ||
        max_context == 0 || groups == 0) {
      throw DimensionError("model dimensions must all be positive");
    }
    if (groups > heads || heads % groups != 0) {
      throw DimensionError("heads (" + std::to_string(heads) +
                           ") must be a multiple of groups (" +
                           std::to_string(groups) + ")");
    }
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

namespace policy {

// Reallocate and copy on every token.
struct Iterative {
  friend bool operator==(Iterative, Iterative) = default;
};

// Allocate max_context rows once.
struct Upfront {
  friend bool operator==(Upfront, Upfront) = default;
};

// Grow by `chunk` zero-padded rows whenever the buffer is full.
struct Bmc {
  std::size_t chunk = 1;
  friend bool operator==(Bmc, Bmc) = default;
};

}  // namespace policy

using AllocationPolicy = std::variant<policy::Iterative, policy::Upfront, policy::Bmc>;

inline bool is_bmc(const AllocationPolicy& p) noexcept {
  return std::holds_alternative<policy::Bmc>(p);
}

inline std::string policy_name(const AllocationPolicy& p) {
  if (std::holds_alternative<policy::Iterative>(p)) return "iterative";
  if (std::holds_alternative<policy::Upfront>(p)) return "upfront";
  return "bmc";
}

inline void validate_policy(const AllocationPolicy& p, const ModelDims& dims) {
  if (const auto* b = std::get_if<policy::Bmc>(&p)) {
    if (b->chunk == 0 || b->chunk > dims.max_context) {
      throw BoundsError("bmc chunk must lie in [1, max_context], got " +
                        std::to_string(b->chunk));
    }
  }
}

// Number of allocations T a policy performs over `tokens` appended rows.
inline std::size_t allocation_count(const AllocationPolicy& p, std::size_t tokens) {
  if (std::holds_alternative<policy::Iterative>(p)) return tokens;
  if (std::holds_alternative<policy::Upfront>(p)) return 1;
  const auto r = std::get<policy::Bmc>(p).chunk;
  return tokens == 0 ? 1 : (tokens + r - 1) / r;
}

}  // namespace bmc

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "bmc/dims.hpp"
#include "bmc/errors.hpp"
#include "bmc/ledger.hpp"

namespace bmc {

namespace detail {

// Uninitialised float storage. The cache decides what to zero; a
// std::vector would clear the whole block on every reallocation.
class FloatBuffer {
 public:
  FloatBuffer() = default;
  explicit FloatBuffer(std::size_t n)
      : data_(n ? std::make_unique_for_overwrite<float[]>(n) : nullptr), size_(n) {}

  FloatBuffer(const FloatBuffer& o) : FloatBuffer(o.size_) {
    if (size_) std::memcpy(data_.get(), o.data_.get(), size_ * sizeof(float));
  }
  FloatBuffer& operator=(const FloatBuffer& o) {
    if (this != &o) *this = FloatBuffer(o);
    return *this;
  }
  FloatBuffer(FloatBuffer&&) noexcept = default;
  FloatBuffer& operator=(FloatBuffer&&) noexcept = default;

  float* data() noexcept { return data_.get(); }
  const float* data() const noexcept { return data_.get(); }
  std::size_t size() const noexcept { return size_; }

 private:
  std::unique_ptr<float[]> data_;
  std::size_t size_ = 0;
};

}  // namespace detail

// Per-layer K/V storage driven by an allocation policy.
//
// Layout of every per-layer buffer is row-major [kv_rows, capacity, head_dim]
// where kv_rows = batch * kv_heads. Rows [0, valid_len) are committed, rows
// [valid_len, valid_len + staged) hold uncommitted speculative entries and
// every row past that is zero.
//
// Not thread-safe for mutation: one writer per cache.
class KvCache {
 public:
  KvCache(const ModelDims& dims, AllocationPolicy policy, std::size_t prompt_len = 0,
          std::size_t element_size = 4)
      : dims_(dims), policy_(policy), element_size_(element_size) {
    dims_.validate();
    validate_policy(policy_, dims_);
    if (element_size_ == 0) throw DimensionError("element size must be positive");
    if (prompt_len > dims_.max_context) {
      throw CapacityExceeded("prompt of " + std::to_string(prompt_len) +
                             " rows exceeds max context " +
                             std::to_string(dims_.max_context));
    }
    keys_.resize(dims_.layers);
    values_.resize(dims_.layers);
    reallocate(initial_capacity(prompt_len));
    valid_len_ = prompt_len;
  }

  const ModelDims& dims() const noexcept { return dims_; }
  const AllocationPolicy& policy() const noexcept { return policy_; }
  std::size_t element_size() const noexcept { return element_size_; }
  std::size_t valid_len() const noexcept { return valid_len_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t staged() const noexcept { return staged_; }
  // Padded rows that hold neither committed nor staged data.
  std::size_t free_rows() const noexcept { return capacity_ - valid_len_ - staged_; }
  const CostLedger& ledger() const noexcept { return ledger_; }

  std::span<const float> keys(std::size_t layer) const {
    check_layer(layer);
    return {keys_[layer].data(), keys_[layer].size()};
  }
  std::span<const float> values(std::size_t layer) const {
    check_layer(layer);
    return {values_[layer].data(), values_[layer].size()};
  }

  std::span<const float> key_row(std::size_t layer, std::size_t kv_row, std::size_t row) const {
    return keys(layer).subspan(offset(kv_row, row), dims_.head_dim);
  }
  std::span<const float> value_row(std::size_t layer, std::size_t kv_row, std::size_t row) const {
    return values(layer).subspan(offset(kv_row, row), dims_.head_dim);
  }

  // Appends one token. `k` and `v` are laid out [layers, kv_rows, head_dim].
  // Returns true when the append had to reallocate.
  bool append_token(std::span<const float> k, std::span<const float> v) {
    const std::size_t per_layer = dims_.kv_rows() * dims_.head_dim;
    if (k.size() != dims_.layers * per_layer || v.size() != k.size()) {
      throw DimensionError("append_token expects layers*kv_rows*head_dim values per tensor");
    }
    const bool realloc = open_row();
    const std::size_t row = valid_len_ - 1;
    for (std::size_t l = 0; l < dims_.layers; ++l) {
      write_row(l, row, k.subspan(l * per_layer, per_layer), v.subspan(l * per_layer, per_layer));
    }
    return realloc;
  }

  // Commits one zero row at index valid_len(), growing first if full. The
  // caller fills it layer by layer with write_row(). Returns true on realloc.
  bool open_row() {
    if (staged_ != 0) throw PlacementError("cannot append while speculative rows are staged");
    if (valid_len_ == dims_.max_context) {
      throw CapacityExceeded("cache already holds max context of " +
                             std::to_string(dims_.max_context) + " rows");
    }
    bool realloc = false;
    if (valid_len_ == capacity_) realloc = grow();
    ++valid_len_;
    return realloc;
  }

  // Writes the K/V rows ([kv_rows, head_dim] each) for one layer at `row`,
  // which must be committed or staged.
  void write_row(std::size_t layer, std::size_t row, std::span<const float> k,
                 std::span<const float> v) {
    check_layer(layer);
    const std::size_t d = dims_.head_dim;
    if (k.size() != dims_.kv_rows() * d || v.size() != k.size()) {
      throw DimensionError("write_row expects kv_rows*head_dim values per tensor");
    }
    if (row >= valid_len_ + staged_) {
      throw BoundsError("row " + std::to_string(row) + " is neither committed nor staged");
    }
    for (std::size_t kr = 0; kr < dims_.kv_rows(); ++kr) {
      std::memcpy(keys_[layer].data() + offset(kr, row), k.data() + kr * d, d * sizeof(float));
      std::memcpy(values_[layer].data() + offset(kr, row), v.data() + kr * d, d * sizeof(float));
    }
    ledger_.append_write_elems += 2 * dims_.kv_rows() * d;
  }

  // Reallocates a full buffer per the policy. Returns false when there was
  // still room. Throws CapacityExceeded when the policy cannot grow further.
  bool grow() {
    if (valid_len_ + staged_ < capacity_) return false;
    if (staged_ != 0) throw PlacementError("cannot grow while speculative rows are staged");
    if (capacity_ >= dims_.max_context) {
      throw CapacityExceeded("cannot grow past max context " + std::to_string(dims_.max_context));
    }
    std::size_t next = capacity_ + 1;
    if (const auto* b = std::get_if<policy::Bmc>(&policy_)) {
      next = std::min(capacity_ + b->chunk, dims_.max_context);
    } else if (std::holds_alternative<policy::Upfront>(policy_)) {
      next = dims_.max_context;
    }
    reallocate(next);
    return true;
  }

  // Reserves `count` padded rows right after the committed prefix for
  // speculative entries. Returns the first reserved row. Never reallocates.
  std::size_t stage_rows(std::size_t count) {
    if (count > free_rows()) {
      throw PlacementError("cannot stage " + std::to_string(count) + " rows, only " +
                           std::to_string(free_rows()) + " padded rows free");
    }
    const std::size_t first = valid_len_ + staged_;
    staged_ += count;
    return first;
  }

  // Commits the staged rows listed in `accepted` (indices relative to the
  // staged region, strictly increasing) in that order, then re-zeroes every
  // remaining staged row. Rows that move are charged as writes.
  void commit_staged(std::span<const std::size_t> accepted) {
    for (std::size_t j = 0; j < accepted.size(); ++j) {
      if (accepted[j] >= staged_) {
        throw ConsistencyError("accepted row " + std::to_string(accepted[j]) +
                               " was never staged");
      }
      if (j > 0 && accepted[j] <= accepted[j - 1]) {
        throw ConsistencyError("accepted rows must be strictly increasing");
      }
    }
    const std::size_t d = dims_.head_dim;
    for (std::size_t j = 0; j < accepted.size(); ++j) {
      const std::size_t src = valid_len_ + accepted[j];
      const std::size_t dst = valid_len_ + j;
      if (src == dst) continue;
      for (std::size_t l = 0; l < dims_.layers; ++l) {
        for (std::size_t kr = 0; kr < dims_.kv_rows(); ++kr) {
          std::memcpy(keys_[l].data() + offset(kr, dst), keys_[l].data() + offset(kr, src),
                      d * sizeof(float));
          std::memcpy(values_[l].data() + offset(kr, dst), values_[l].data() + offset(kr, src),
                      d * sizeof(float));
        }
      }
      ledger_.append_write_elems += 2 * dims_.layers * dims_.kv_rows() * d;
    }
    const std::size_t end = valid_len_ + staged_;
    valid_len_ += accepted.size();
    staged_ = 0;
    zero_rows(valid_len_, end);
  }

  void discard_staged() { commit_staged({}); }

  // Adds costs computed outside the cache (e.g. attention MACs).
  void charge(const CostLedger& extra) noexcept { ledger_ += extra; }

 private:
  std::size_t initial_capacity(std::size_t prompt_len) const {
    if (std::holds_alternative<policy::Iterative>(policy_)) return prompt_len;
    if (std::holds_alternative<policy::Upfront>(policy_)) return dims_.max_context;
    const std::size_t r = std::get<policy::Bmc>(policy_).chunk;
    const std::size_t rows = std::max<std::size_t>(prompt_len, 1);
    return std::min(dims_.max_context, r * ((rows + r - 1) / r));
  }

  std::size_t offset(std::size_t kv_row, std::size_t row) const {
    if (kv_row >= dims_.kv_rows() || row >= capacity_) {
      throw BoundsError("row index out of range");
    }
    return (kv_row * capacity_ + row) * dims_.head_dim;
  }

  void check_layer(std::size_t layer) const {
    if (layer >= dims_.layers) throw BoundsError("layer " + std::to_string(layer) + " out of range");
  }

  // Moves the committed prefix into fresh buffers of `new_capacity` rows and
  // zeroes the rest.
  void reallocate(std::size_t new_capacity) {
    const std::size_t d = dims_.head_dim;
    const std::size_t kv_rows = dims_.kv_rows();
    const std::size_t keep = valid_len_;
    for (std::size_t l = 0; l < dims_.layers; ++l) {
      for (auto* tensor : {&keys_[l], &values_[l]}) {
        detail::FloatBuffer fresh(kv_rows * new_capacity * d);
        for (std::size_t kr = 0; kr < kv_rows; ++kr) {
          float* dst = fresh.data() + kr * new_capacity * d;
          if (keep) std::memcpy(dst, tensor->data() + kr * capacity_ * d, keep * d * sizeof(float));
          std::fill(dst + keep * d, dst + new_capacity * d, 0.0f);
        }
        *tensor = std::move(fresh);
      }
    }
    ledger_.realloc_copy_elems += 2 * dims_.layers * kv_rows * keep * d;
    if (new_capacity > 0) {
      ledger_.alloc_events += dims_.layers;
      ledger_.alloc_bytes += 2 * dims_.layers * kv_rows * new_capacity * d * element_size_;
    }
    capacity_ = new_capacity;
  }

  void zero_rows(std::size_t begin, std::size_t end) {
    const std::size_t d = dims_.head_dim;
    for (std::size_t l = 0; l < dims_.layers; ++l) {
      for (std::size_t kr = 0; kr < dims_.kv_rows(); ++kr) {
        for (auto* tensor : {&keys_[l], &values_[l]}) {
          float* base = tensor->data() + kr * capacity_ * d;
          std::fill(base + begin * d, base + end * d, 0.0f);
        }
      }
    }
  }

  ModelDims dims_;
  AllocationPolicy policy_;
  std::size_t element_size_;
  std::vector<detail::FloatBuffer> keys_;
  std::vector<detail::FloatBuffer> values_;
  std::size_t valid_len_ = 0;
  std::size_t capacity_ = 0;
  std::size_t staged_ = 0;
  CostLedger ledger_;
};

// Total elements moved (reallocation copies plus new-row writes, K and V)
// when appending max_context tokens to an empty cache.
//
//   Iterative: B*L*N*(N+1)*D/G
//   Upfront:   2*B*L*N*D/G
//   Bmc{r}:    B*L*D*N*(T-1)/G + 2*B*L*N*D/G,  T = N/r
inline std::uint64_t copy_total_closed_form(const AllocationPolicy& policy, const ModelDims& dims) {
  dims.validate();
  validate_policy(policy, dims);
  const std::uint64_t n = dims.max_context;
  const std::uint64_t scale = std::uint64_t{dims.batch} * dims.layers * dims.kv_hidden();
  const std::uint64_t writes = 2 * scale * n;
  if (std::holds_alternative<policy::Iterative>(policy)) return scale * n * (n + 1);
  if (std::holds_alternative<policy::Upfront>(policy)) return writes;
  const std::uint64_t r = std::get<policy::Bmc>(policy).chunk;
  if (n % r != 0) {
    throw DivisibilityError("chunk " + std::to_string(r) + " does not divide N=" + std::to_string(n));
  }
  const std::uint64_t t = n / r;
  return scale * n * (t - 1) + writes;
}

}  // namespace bmc

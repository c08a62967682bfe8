// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bmc/dims.hpp"
#include "bmc/errors.hpp"
#include "bmc/kv_cache.hpp"
#include "bmc/ledger.hpp"

namespace bmc {

// Additive bias for masked-out score columns. After row-max subtraction
// exp(-1e9) is exactly 0 in fp32.
inline constexpr float kMaskValue = -1e9f;

// Additive pre-softmax bias over the capacity columns of one layer's K.
// The same mask serves every layer and every batch*head row.
struct BiasMask {
  std::vector<float> values;
  std::size_t valid_len = 0;

  std::size_t capacity() const noexcept { return values.size(); }
};

inline BiasMask build_bias_mask(std::size_t valid_len, std::size_t capacity) {
  if (valid_len > capacity) {
    throw BoundsError("mask valid_len " + std::to_string(valid_len) + " exceeds capacity " +
                      std::to_string(capacity));
  }
  BiasMask m;
  m.valid_len = valid_len;
  m.values.assign(capacity, kMaskValue);
  std::fill(m.values.begin(), m.values.begin() + static_cast<std::ptrdiff_t>(valid_len), 0.0f);
  return m;
}

// Query rows laid out [batch*heads, rows, head_dim]. rows == 1 for plain
// auto-regressive decoding, rows == k when verifying k speculative tokens.
struct AttentionQuery {
  std::span<const float> q;
  std::size_t rows = 1;
  float scale = 1.0f;

  static AttentionQuery make(std::span<const float> q, std::size_t rows, std::size_t head_dim) {
    return {q, rows, 1.0f / std::sqrt(static_cast<float>(head_dim))};
  }
};

namespace detail {

// In-place softmax with row-max subtraction. Sequential reductions keep the result independent of trailing masked
// columns: exp underflows to exactly 0 and adding 0 is exact.
inline void softmax_inplace(std::span<float> scores) {
  float mx = -INFINITY;
  for (float s : scores) {
    if (s > mx) mx = s;
  }
  float sum = 0.0f;
  for (float& s : scores) {
    s = std::exp(s - mx);
    sum += s;
  }
  const float inv = 1.0f / sum;
  for (float& s : scores) s *= inv;
}

}  // namespace detail

// softmax(q K^T * scale + mask + extra_mask) V for one layer, computed over
// all capacity rows of the cache, padded rows included.
//
// extra_mask, when given, is [rows, capacity] and carries causal or tree
// structure. Query head h reads key/value head h / groups. Adds
// 2 * B * H * rows * capacity * head_dim to ledger.sdpa_macs.
//
// If `probs` is non-null it receives the post-softmax weights
// [batch*heads, rows, capacity].
inline std::vector<float> sdpa(const AttentionQuery& query, const KvCache& cache, std::size_t layer,
                               const BiasMask& mask, std::optional<std::span<const float>> extra_mask,
                               CostLedger& ledger, std::vector<float>* probs = nullptr) {
  const ModelDims& dims = cache.dims();
  const std::size_t d = dims.head_dim;
  const std::size_t cap = cache.capacity();
  const std::size_t t = query.rows;
  if (t == 0) throw DimensionError("query must have at least one row");
  if (!(query.scale > 0.0f)) throw DimensionError("attention scale must be positive");
  if (query.q.size() != dims.q_rows() * t * d) {
    throw DimensionError("query has " + std::to_string(query.q.size()) + " values, expected " +
                         std::to_string(dims.q_rows() * t * d));
  }
  if (mask.capacity() != cap) {
    throw DimensionError("bias mask covers " + std::to_string(mask.capacity()) +
                         " columns but cache capacity is " + std::to_string(cap));
  }
  if (extra_mask && extra_mask->size() != t * cap) {
    throw DimensionError("extra mask must be [rows, capacity]");
  }

  const auto keys = cache.keys(layer);
  const auto values = cache.values(layer);
  std::vector<float> out(dims.q_rows() * t * d, 0.0f);
  std::vector<float> scores(cap);
  if (probs) probs->assign(dims.q_rows() * t * cap, 0.0f);

  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t h = 0; h < dims.heads; ++h) {
      const std::size_t qrow = b * dims.heads + h;
      const std::size_t kvrow = b * dims.kv_heads() + h / dims.groups;
      const float* kbase = keys.data() + kvrow * cap * d;
      const float* vbase = values.data() + kvrow * cap * d;
      for (std::size_t i = 0; i < t; ++i) {
        const float* qv = query.q.data() + (qrow * t + i) * d;
        for (std::size_t j = 0; j < cap; ++j) {
          const float* kv = kbase + j * d;
          float dot = 0.0f;
          for (std::size_t c = 0; c < d; ++c) dot += qv[c] * kv[c];
          float s = dot * query.scale + mask.values[j];
          if (extra_mask) s += (*extra_mask)[i * cap + j];
          scores[j] = s;
        }
        detail::softmax_inplace(scores);
        float* o = out.data() + (qrow * t + i) * d;
        for (std::size_t j = 0; j < cap; ++j) {
          const float p = scores[j];
          const float* vv = vbase + j * d;
          for (std::size_t c = 0; c < d; ++c) o[c] += p * vv[c];
        }
        if (probs) {
          std::copy(scores.begin(), scores.end(),
                    probs->begin() + static_cast<std::ptrdiff_t>((qrow * t + i) * cap));
        }
      }
    }
  }
  ledger.sdpa_macs += 2 * std::uint64_t{dims.q_rows()} * t * cap * d;
  return out;
}

// Total attention MACs for decoding max_context tokens one at a time from an
// empty cache, with `rows` query rows per step.
//
//   Iterative: L*B*N*(N+1)*D
//   Upfront:   2*L*B*N^2*D
//   Bmc{r}:    L*B*N*(N+r)*D
inline std::uint64_t sdpa_flops_closed_form(const AllocationPolicy& policy, const ModelDims& dims,
                                            std::size_t rows = 1) {
  dims.validate();
  validate_policy(policy, dims);
  const std::uint64_t n = dims.max_context;
  const std::uint64_t scale = std::uint64_t{dims.layers} * dims.batch * dims.hidden() * rows;
  if (std::holds_alternative<policy::Iterative>(policy)) return scale * n * (n + 1);
  if (std::holds_alternative<policy::Upfront>(policy)) return 2 * scale * n * n;
  const std::uint64_t r = std::get<policy::Bmc>(policy).chunk;
  if (n % r != 0) {
    throw DivisibilityError("chunk " + std::to_string(r) + " does not divide N=" + std::to_string(n));
  }
  return scale * n * (n + r);
}

}  // namespace bmc

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bmc/attention.hpp"
#include "bmc/dims.hpp"
#include "bmc/errors.hpp"
#include "bmc/kv_cache.hpp"
#include "bmc/spec_decode.hpp"

namespace bmc {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based uniform draw in [-0.1, 0.1]: a pure function of
// (seed, tensor, index), so weights never depend on generation order.
inline float weight_at(std::uint64_t seed, std::uint64_t tensor, std::uint64_t index) noexcept {
  const std::uint64_t h = splitmix64(splitmix64(seed ^ (tensor * 0xd1342543de82ef95ULL)) + index);
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;  // [0, 1)
  return static_cast<float>(0.2 * u - 0.1);
}

inline std::vector<float> make_weights(std::uint64_t seed, std::uint64_t tensor, std::size_t n) {
  std::vector<float> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = weight_at(seed, tensor, i);
  return w;
}

// y[out] += sum_i x[i] * w[i][out], accumulated in increasing i.
inline void matvec_acc(std::span<const float> x, const std::vector<float>& w, std::span<float> y) {
  const std::size_t out = y.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float xi = x[i];
    const float* row = w.data() + i * out;
    for (std::size_t o = 0; o < out; ++o) y[o] += xi * row[o];
  }
}

}  // namespace detail

// Deterministic decoder-only transformer used to drive the cache end to end.
//
// Weight matrices are stored input-major ([in][out]) so projections
// accumulate over contiguous rows. Key/value projections produce
// kv_heads * head_dim features; with groups == 1 they are [D, D].
struct ToyModel {
  struct Layer {
    std::vector<float> wq, wk, wv, wo;  // [D, D], [D, Dkv], [D, Dkv], [D, D]
    std::vector<float> w1, w2;          // [D, 4D], [4D, D]
  };

  ModelDims dims;
  std::size_t vocab = 0;
  std::uint64_t seed = 0;
  std::vector<Layer> layers;
  std::vector<float> embed;    // [vocab, D]
  std::vector<float> unembed;  // [vocab, D]

  static constexpr float kLogitClamp = 1e4f;

  static ToyModel create(const ModelDims& dims, std::size_t vocab, std::uint64_t seed) {
    dims.validate();
    if (vocab < 2) throw DimensionError("vocabulary needs at least two tokens");
    ToyModel m;
    m.dims = dims;
    m.vocab = vocab;
    m.seed = seed;
    const std::size_t d = dims.hidden();
    const std::size_t dkv = dims.kv_hidden();
    m.embed = detail::make_weights(seed, 0, vocab * d);
    m.unembed = detail::make_weights(seed, 1, vocab * d);
    for (std::size_t l = 0; l < dims.layers; ++l) {
      const std::uint64_t base = 16 + 8 * l;
      m.layers.push_back({detail::make_weights(seed, base + 0, d * d),
                          detail::make_weights(seed, base + 1, d * dkv),
                          detail::make_weights(seed, base + 2, d * dkv),
                          detail::make_weights(seed, base + 3, d * d),
                          detail::make_weights(seed, base + 4, d * 4 * d),
                          detail::make_weights(seed, base + 5, 4 * d * d)});
    }
    return m;
  }

  // Token embedding plus a sinusoidal position code.
  std::vector<float> embed_token(TokenId token, std::size_t position) const {
    const std::size_t d = dims.hidden();
    if (token < 0 || static_cast<std::size_t>(token) >= vocab) {
      throw BoundsError("token " + std::to_string(token) + " outside vocabulary");
    }
    std::vector<float> x(embed.begin() + static_cast<std::ptrdiff_t>(token * d),
                         embed.begin() + static_cast<std::ptrdiff_t>((token + 1) * d));
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i / 2 * 2) / static_cast<double>(d));
      const double angle = static_cast<double>(position) * freq;
      x[i] += static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
    return x;
  }

  // Attention-free tail of a layer: h += Wo * attn; h += W2 * relu(W1 * h).
  void finish_layer(std::size_t l, std::span<const float> attn, std::span<float> h) const {
    const std::size_t d = dims.hidden();
    std::vector<float> proj(d, 0.0f);
    detail::matvec_acc(attn, layers[l].wo, proj);
    for (std::size_t i = 0; i < d; ++i) h[i] += proj[i];
    std::vector<float> up(4 * d, 0.0f);
    detail::matvec_acc(h, layers[l].w1, up);
    for (float& u : up) u = u > 0.0f ? u : 0.0f;
    std::vector<float> down(d, 0.0f);
    detail::matvec_acc(up, layers[l].w2, down);
    for (std::size_t i = 0; i < d; ++i) h[i] += down[i];
  }

  // Clamped logits; throws NumericFailure on non-finite values.
  std::vector<float> logits(std::span<const float> h, std::size_t iteration) const {
    const std::size_t d = dims.hidden();
    std::vector<float> out(vocab);
    for (std::size_t v = 0; v < vocab; ++v) {
      const float* row = unembed.data() + v * d;
      float acc = 0.0f;
      for (std::size_t i = 0; i < d; ++i) acc += row[i] * h[i];
      if (!std::isfinite(acc)) throw NumericFailure(iteration, "non-finite logit");
      out[v] = std::clamp(acc, -kLogitClamp, kLogitClamp);
    }
    return out;
  }
};

// First index of the maximum.
inline TokenId argmax(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

// One forward pass of `model` over `t` new tokens per batch lane.
//
// tokens is [batch, t]; node j sits at sequence position positions[j] and
// its K/V rows are written to cache row rows[j], which must already be
// committed (open_row) or staged (stage_rows). The bias mask and optional
// [t, capacity] extra mask must describe the cache after those rows were
// opened. Returns the last hidden state [batch, t, D]; attention MACs go to
// `attn_ledger`.
inline std::vector<float> forward(const ToyModel& model, KvCache& cache,
                                  std::span<const TokenId> tokens,
                                  std::span<const std::size_t> positions,
                                  std::span<const std::size_t> rows, const BiasMask& mask,
                                  std::optional<std::span<const float>> extra_mask,
                                  CostLedger& attn_ledger) {
  const ModelDims& dims = model.dims;
  if (!(cache.dims() == dims)) throw DimensionError("cache and model dimensions differ");
  const std::size_t t = positions.size();
  const std::size_t d = dims.hidden();
  const std::size_t hd = dims.head_dim;
  const std::size_t dkv = dims.kv_hidden();
  if (rows.size() != t || tokens.size() != dims.batch * t) {
    throw DimensionError("forward expects batch*t tokens and one row per position");
  }

  std::vector<float> hidden(dims.batch * t * d);
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t j = 0; j < t; ++j) {
      const auto x = model.embed_token(tokens[b * t + j], positions[j]);
      std::copy(x.begin(), x.end(), hidden.begin() + static_cast<std::ptrdiff_t>((b * t + j) * d));
    }
  }

  std::vector<float> q(dims.q_rows() * t * hd);
  std::vector<float> krow(dims.kv_rows() * hd);
  std::vector<float> vrow(dims.kv_rows() * hd);
  std::vector<float> kv_k(dims.batch * t * dkv);
  std::vector<float> kv_v(dims.batch * t * dkv);
  std::vector<float> qv(d);

  for (std::size_t l = 0; l < dims.layers; ++l) {
    const auto& layer = model.layers[l];
    std::fill(kv_k.begin(), kv_k.end(), 0.0f);
    std::fill(kv_v.begin(), kv_v.end(), 0.0f);
    for (std::size_t b = 0; b < dims.batch; ++b) {
      for (std::size_t j = 0; j < t; ++j) {
        std::span<const float> h(hidden.data() + (b * t + j) * d, d);
        std::fill(qv.begin(), qv.end(), 0.0f);
        detail::matvec_acc(h, layer.wq, qv);
        detail::matvec_acc(h, layer.wk, std::span<float>(kv_k.data() + (b * t + j) * dkv, dkv));
        detail::matvec_acc(h, layer.wv, std::span<float>(kv_v.data() + (b * t + j) * dkv, dkv));
        for (std::size_t head = 0; head < dims.heads; ++head) {
          std::copy_n(qv.data() + head * hd, hd,
                      q.data() + ((b * dims.heads + head) * t + j) * hd);
        }
      }
    }
    for (std::size_t j = 0; j < t; ++j) {
      for (std::size_t b = 0; b < dims.batch; ++b) {
        std::copy_n(kv_k.data() + (b * t + j) * dkv, dkv, krow.data() + b * dkv);
        std::copy_n(kv_v.data() + (b * t + j) * dkv, dkv, vrow.data() + b * dkv);
      }
      cache.write_row(l, rows[j], krow, vrow);
    }

    const auto attn = sdpa(AttentionQuery::make(q, t, hd), cache, l, mask, extra_mask, attn_ledger);

    std::vector<float> merged(d);
    for (std::size_t b = 0; b < dims.batch; ++b) {
      for (std::size_t j = 0; j < t; ++j) {
        for (std::size_t head = 0; head < dims.heads; ++head) {
          std::copy_n(attn.data() + ((b * dims.heads + head) * t + j) * hd, hd,
                      merged.data() + head * hd);
        }
        model.finish_layer(l, merged, std::span<float>(hidden.data() + (b * t + j) * d, d));
      }
    }
  }
  return hidden;
}

}  // namespace bmc

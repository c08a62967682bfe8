// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bmc/attention.hpp"
#include "bmc/dims.hpp"
#include "bmc/errors.hpp"
#include "bmc/kv_cache.hpp"
#include "bmc/ledger.hpp"
#include "bmc/spec_decode.hpp"
#include "bmc/toy_model.hpp"

namespace bmc {

// Attention over exactly the given rows, no padding and no mask. q is one
// query row [d]; k_rows/v_rows are [n, d] with n >= 1. Accumulates in double
// so it stays an independent reference for the fp32 masked kernel.
inline std::vector<float> exact_reference_attention(std::span<const float> q,
                                                    std::span<const float> k_rows,
                                                    std::span<const float> v_rows, float scale) {
  const std::size_t d = q.size();
  if (d == 0 || k_rows.empty() || k_rows.size() % d != 0 || v_rows.size() != k_rows.size()) {
    throw DimensionError("reference attention needs n >= 1 rows of the query width");
  }
  const std::size_t n = k_rows.size() / d;
  std::vector<double> s(n);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) {
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += double{q[c]} * double{k_rows[j * d + c]};
    s[j] = dot * scale;
    mx = std::max(mx, s[j]);
  }
  double sum = 0.0;
  for (auto& x : s) {
    x = std::exp(x - mx);
    sum += x;
  }
  std::vector<double> acc(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t c = 0; c < d; ++c) acc[c] += s[j] / sum * double{v_rows[j * d + c]};
  }
  return {acc.begin(), acc.end()};
}

struct IterationRecord {
  std::size_t index = 0;
  double wall_s = 0.0;
  bool realloc = false;
  std::size_t accepted = 1;  // tokens emitted by this target iteration
};

struct DecodeReport {
  ModelDims dims;
  AllocationPolicy policy;
  std::uint64_t seed = 0;
  std::vector<std::vector<TokenId>> tokens;  // [batch][generated]
  std::vector<IterationRecord> per_iteration;
  CostLedger cache_ledger;      // copies, writes and allocations
  CostLedger attention_ledger;  // attention MACs
  CostLedger ledger;            // cache_ledger + attention_ledger
  double wall_s = 0.0;
};

namespace detail {

inline void check_prompts(const ModelDims& dims, const std::vector<std::vector<TokenId>>& prompts,
                          std::size_t steps) {
  if (prompts.size() != dims.batch) {
    throw DimensionError("expected one prompt per batch lane");
  }
  const std::size_t p = prompts.front().size();
  if (p == 0) throw DimensionError("prompts must hold at least one token");
  for (const auto& pr : prompts) {
    if (pr.size() != p) throw DimensionError("all prompts must have the same length");
  }
  // The final emitted token is never written back, so rows = p - 1 + steps.
  if (p - 1 + steps > dims.max_context) {
    throw CapacityExceeded("prompt of " + std::to_string(p) + " tokens plus " +
                           std::to_string(steps) + " steps exceeds max context " +
                           std::to_string(dims.max_context));
  }
}

// Feeds every prompt token except the last through the model with a causal
// mask. The last prompt token becomes the first pending token.
inline void prefill(const ToyModel& model, KvCache& cache,
                    const std::vector<std::vector<TokenId>>& prompts, CostLedger& attn) {
  const std::size_t n = cache.valid_len();
  if (n == 0) return;
  const std::size_t cap = cache.capacity();
  std::vector<TokenId> toks;
  for (const auto& pr : prompts) toks.insert(toks.end(), pr.begin(), pr.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<std::size_t> pos(n);
  for (std::size_t j = 0; j < n; ++j) pos[j] = j;
  std::vector<float> causal(n * cap, kMaskValue);
  for (std::size_t i = 0; i < n; ++i) std::fill_n(causal.begin() + static_cast<std::ptrdiff_t>(i * cap), i + 1, 0.0f);
  forward(model, cache, toks, pos, pos, build_bias_mask(n, cap), std::span<const float>(causal), attn);
}

inline std::vector<TokenId> lane_argmax(const ToyModel& model, std::span<const float> hidden,
                                        std::size_t t, std::size_t j, std::size_t iteration) {
  const std::size_t d = model.dims.hidden();
  std::vector<TokenId> out(model.dims.batch);
  for (std::size_t b = 0; b < model.dims.batch; ++b) {
    out[b] = argmax(model.logits(hidden.subspan((b * t + j) * d, d), iteration));
  }
  return out;
}

inline void finish(DecodeReport& r, const KvCache& cache, const CostLedger& attn) {
  r.cache_ledger = cache.ledger();
  r.attention_ledger = attn;
  r.ledger = r.cache_ledger + r.attention_ledger;
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace detail

// Greedy decoding of `steps` tokens per lane. prompts is [batch][p], p >= 1.
// The seed is only echoed into the report; greedy decoding is deterministic.
inline DecodeReport generate(const ToyModel& model, const AllocationPolicy& policy,
                             const std::vector<std::vector<TokenId>>& prompts, std::size_t steps,
                             std::uint64_t seed = 0) {
  const ModelDims& dims = model.dims;
  detail::check_prompts(dims, prompts, steps);
  const auto t_start = detail::Clock::now();

  DecodeReport report{dims, policy, seed, std::vector<std::vector<TokenId>>(dims.batch), {}, {}, {}, {}, 0.0};
  KvCache cache(dims, policy, prompts.front().size() - 1);
  CostLedger attn;
  detail::prefill(model, cache, prompts, attn);

  std::vector<TokenId> pending(dims.batch);
  for (std::size_t b = 0; b < dims.batch; ++b) pending[b] = prompts[b].back();

  for (std::size_t it = 0; it < steps; ++it) {
    const auto t0 = detail::Clock::now();
    const bool realloc = cache.open_row();
    const std::size_t row = cache.valid_len() - 1;
    const std::size_t rows[1] = {row};
    const auto hidden = forward(model, cache, pending, rows, rows,
                                build_bias_mask(cache.valid_len(), cache.capacity()), std::nullopt, attn);
    pending = detail::lane_argmax(model, hidden, 1, 0, it);
    for (std::size_t b = 0; b < dims.batch; ++b) report.tokens[b].push_back(pending[b]);
    report.per_iteration.push_back({it, detail::seconds_since(t0), realloc, 1});
  }
  detail::finish(report, cache, attn);
  report.wall_s = detail::seconds_since(t_start);
  return report;
}

// What a proposer sees at the start of a speculative iteration.
struct ProposalContext {
  const ToyModel& model;
  const KvCache& cache;
  const std::vector<TokenId>& pending;                   // per lane, not yet in the cache
  const std::vector<std::vector<TokenId>>& emitted;      // per lane
  std::size_t remaining;                                 // tokens still to emit
};

// Source of candidate trees. Node 0 must be a root carrying the pending
// tokens; the rest are guesses for what follows.
class Proposer {
 public:
  virtual ~Proposer() = default;
  virtual SpeculationTree propose(const ProposalContext& ctx) = 0;
};

// Replays a known continuation so every iteration accepts exactly
// `accept_len` tokens: the first accept_len - 1 guesses are correct and the
// rest deliberately wrong. Chains of `tree_size` nodes.
class ScriptedProposer : public Proposer {
 public:
  ScriptedProposer(std::size_t accept_len, std::size_t tree_size,
                   std::vector<std::vector<TokenId>> reference, std::size_t vocab)
      : accept_len_(accept_len), tree_size_(tree_size), reference_(std::move(reference)), vocab_(vocab) {
    if (accept_len_ == 0 || tree_size_ == 0) throw BoundsError("scripted proposer needs m, k >= 1");
  }

  SpeculationTree propose(const ProposalContext& ctx) override {
    std::vector<std::vector<TokenId>> chain{ctx.pending};
    const std::size_t base = ctx.emitted.front().size();
    for (std::size_t j = 1; j < tree_size_; ++j) {
      std::vector<TokenId> guess(ctx.pending.size());
      for (std::size_t b = 0; b < guess.size(); ++b) {
        const std::size_t at = base + j - 1;
        const TokenId truth = at < reference_[b].size() ? reference_[b][at] : 0;
        guess[b] = j < accept_len_ ? truth : static_cast<TokenId>((truth + 1) % static_cast<TokenId>(vocab_));
      }
      chain.push_back(std::move(guess));
    }
    return SpeculationTree::chain(chain);
  }

 private:
  std::size_t accept_len_;
  std::size_t tree_size_;
  std::vector<std::vector<TokenId>> reference_;
  std::size_t vocab_;
};

// Layer-skipping self-speculation: drafts `depth` tokens greedily with the
// first `draft_layers` layers of the target model, reading the target's
// committed K/V for those layers. Proposes a chain of depth + 1 nodes.
class SelfDraftProposer : public Proposer {
 public:
  explicit SelfDraftProposer(std::size_t depth, std::size_t draft_layers = 1)
      : depth_(depth), draft_layers_(draft_layers) {
    if (draft_layers_ == 0) throw BoundsError("draft needs at least one layer");
  }

  SpeculationTree propose(const ProposalContext& ctx) override {
    const ToyModel& model = ctx.model;
    const ModelDims& dims = model.dims;
    const std::size_t layers = std::min(draft_layers_, dims.layers);
    const std::size_t drafts = std::min(depth_, ctx.remaining > 0 ? ctx.remaining - 1 : 0);
    std::vector<std::vector<TokenId>> chain{ctx.pending};
    chain.resize(drafts + 1, std::vector<TokenId>(dims.batch));
    for (std::size_t b = 0; b < dims.batch; ++b) {
      draft_lane(ctx, b, layers, drafts, chain);
    }
    return SpeculationTree::chain(chain);
  }

 private:
  void draft_lane(const ProposalContext& ctx, std::size_t b, std::size_t layers, std::size_t drafts,
                  std::vector<std::vector<TokenId>>& chain) const {
    const ToyModel& model = ctx.model;
    const ModelDims& dims = model.dims;
    const std::size_t d = dims.hidden();
    const std::size_t hd = dims.head_dim;
    const std::size_t dkv = dims.kv_hidden();
    const std::size_t committed = ctx.cache.valid_len();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    // scratch[l][kv_head] holds K then V rows of the drafted tokens.
    std::vector<std::vector<std::vector<float>>> sk(layers, std::vector<std::vector<float>>(dims.kv_heads()));
    auto sv = sk;

    TokenId tok = ctx.pending[b];
    for (std::size_t j = 0; j < drafts; ++j) {
      auto h = model.embed_token(tok, committed + j);
      for (std::size_t l = 0; l < layers; ++l) {
        const auto& layer = model.layers[l];
        std::vector<float> q(d, 0.0f), k(dkv, 0.0f), v(dkv, 0.0f);
        detail::matvec_acc(h, layer.wq, q);
        detail::matvec_acc(h, layer.wk, k);
        detail::matvec_acc(h, layer.wv, v);
        for (std::size_t g = 0; g < dims.kv_heads(); ++g) {
          sk[l][g].insert(sk[l][g].end(), k.begin() + static_cast<std::ptrdiff_t>(g * hd),
                          k.begin() + static_cast<std::ptrdiff_t>((g + 1) * hd));
          sv[l][g].insert(sv[l][g].end(), v.begin() + static_cast<std::ptrdiff_t>(g * hd),
                          v.begin() + static_cast<std::ptrdiff_t>((g + 1) * hd));
        }
        std::vector<float> merged(d);
        for (std::size_t head = 0; head < dims.heads; ++head) {
          const std::size_t g = head / dims.groups;
          const std::size_t kv_row = b * dims.kv_heads() + g;
          std::vector<float> keys, values;
          for (std::size_t row = 0; row < committed; ++row) {
            const auto kr = ctx.cache.key_row(l, kv_row, row);
            const auto vr = ctx.cache.value_row(l, kv_row, row);
            keys.insert(keys.end(), kr.begin(), kr.end());
            values.insert(values.end(), vr.begin(), vr.end());
          }
          keys.insert(keys.end(), sk[l][g].begin(), sk[l][g].end());
          values.insert(values.end(), sv[l][g].begin(), sv[l][g].end());
          const auto out = exact_reference_attention(
              std::span<const float>(q.data() + head * hd, hd), keys, values, scale);
          std::copy(out.begin(), out.end(), merged.begin() + static_cast<std::ptrdiff_t>(head * hd));
        }
        model.finish_layer(l, merged, h);
      }
      tok = argmax(model.logits(h, 0));
      chain[j + 1][b] = tok;
    }
  }

  std::size_t depth_;
  std::size_t draft_layers_;
};

// Speculative greedy decoding over a padded cache. Each iteration grows the
// cache only if no padded row is left, then admits, stages and verifies a
// candidate tree in one batched pass and commits the longest accepted chain
// (shortest across lanes). Emits exactly the tokens generate() would.
inline DecodeReport generate_speculative(const ToyModel& model, const AllocationPolicy& policy,
                                         const std::vector<std::vector<TokenId>>& prompts,
                                         std::size_t steps, Proposer& proposer,
                                         std::uint64_t seed = 0) {
  const ModelDims& dims = model.dims;
  if (!is_bmc(policy)) throw BoundsError("speculative decoding runs on the bmc policy");
  detail::check_prompts(dims, prompts, steps);
  const auto t_start = detail::Clock::now();

  DecodeReport report{dims, policy, seed, std::vector<std::vector<TokenId>>(dims.batch), {}, {}, {}, {}, 0.0};
  KvCache cache(dims, policy, prompts.front().size() - 1);
  CostLedger attn;
  detail::prefill(model, cache, prompts, attn);

  std::vector<TokenId> pending(dims.batch);
  for (std::size_t b = 0; b < dims.batch; ++b) pending[b] = prompts[b].back();

  std::size_t emitted = 0;
  for (std::size_t it = 0; emitted < steps; ++it) {
    const auto t0 = detail::Clock::now();
    const bool realloc = cache.free_rows() == 0 ? cache.grow() : false;

    SpeculationTree tree = proposer.propose({model, cache, pending, report.tokens, steps - emitted});
    if (tree.empty() || tree.nodes.front().parent != kRootParent || tree.nodes.front().tokens != pending) {
      throw ConsistencyError("proposer must put the pending tokens at root node 0");
    }
    if (tree.size() > steps - emitted) tree.nodes.resize(steps - emitted);
    tree = admit_candidates(cache, std::move(tree));

    const std::size_t committed = cache.valid_len();
    const std::size_t first = cache.stage_rows(tree.size());
    std::vector<std::size_t> rows(tree.size()), positions(tree.size());
    std::vector<TokenId> toks(dims.batch * tree.size());
    for (std::size_t j = 0; j < tree.size(); ++j) {
      rows[j] = first + j;
      positions[j] = committed + tree.depth(j) - 1;
      for (std::size_t b = 0; b < dims.batch; ++b) toks[b * tree.size() + j] = tree.nodes[j].tokens[b];
    }
    const auto extra = tree_mask(tree, committed, cache.capacity());
    const auto hidden =
        forward(model, cache, toks, positions, rows,
                build_bias_mask(committed + tree.size(), cache.capacity()), std::span<const float>(extra), attn);

    std::vector<std::vector<TokenId>> predicted(tree.size());
    for (std::size_t j = 0; j < tree.size(); ++j) {
      predicted[j] = detail::lane_argmax(model, hidden, tree.size(), j, it);
    }
    const AcceptanceResult result = greedy_accept(tree, predicted);
    verify_and_commit(cache, tree, result);

    for (auto node : result.accepted_path) {
      for (std::size_t b = 0; b < dims.batch; ++b) report.tokens[b].push_back(predicted[node][b]);
    }
    pending = predicted[result.accepted_path.back()];
    emitted += result.m();
    report.per_iteration.push_back({it, detail::seconds_since(t0), realloc, result.m()});
  }
  detail::finish(report, cache, attn);
  report.wall_s = detail::seconds_since(t_start);
  return report;
}

}  // namespace bmc

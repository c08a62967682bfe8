// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdint>
#include <cstring>
#include <random>
#include <vector>

#include "bmc/kv_cache.hpp"

namespace {

using bmc::AllocationPolicy;
using bmc::KvCache;
using bmc::ModelDims;
namespace policy = bmc::policy;

ModelDims unit_dims(std::size_t n) {
  ModelDims d;
  d.max_context = n;
  return d;
}

std::vector<float> rows_for(const ModelDims& d, float base) {
  std::vector<float> v(d.layers * d.kv_rows() * d.head_dim);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = base + 0.001f * static_cast<float>(i);
  return v;
}

// Counts what each policy must do per append, written from the allocation
// rules alone (no buffers).
bmc::CostLedger simulate_ledger(const AllocationPolicy& p, const ModelDims& d, std::size_t appends) {
  bmc::CostLedger l;
  const std::uint64_t row = 2 * d.layers * d.kv_rows() * d.head_dim;
  std::size_t cap = 0;
  if (std::holds_alternative<policy::Upfront>(p)) cap = d.max_context;
  if (const auto* b = std::get_if<policy::Bmc>(&p)) cap = std::min(b->chunk, d.max_context);
  const std::uint64_t bytes_per_row = 2 * d.layers * d.kv_rows() * d.head_dim * sizeof(float);
  if (cap) {
    l.alloc_events += d.layers;
    l.alloc_bytes += bytes_per_row * cap;
  }
  for (std::size_t n = 0; n < appends; ++n) {
    if (n == cap) {
      cap = std::holds_alternative<policy::Iterative>(p)
                ? cap + 1
                : std::min(cap + std::get<policy::Bmc>(p).chunk, d.max_context);
      l.realloc_copy_elems += row * n;
      l.alloc_events += d.layers;
      l.alloc_bytes += bytes_per_row * cap;
    }
    l.append_write_elems += row;
  }
  return l;
}

TEST(KvCacheNew, CapacityPerPolicy) {
  EXPECT_EQ(KvCache(unit_dims(8), policy::Bmc{2}, 3).capacity(), 4u);
  EXPECT_EQ(KvCache(unit_dims(8), policy::Bmc{2}, 3).valid_len(), 3u);
  EXPECT_EQ(KvCache(unit_dims(8), policy::Upfront{}, 0).capacity(), 8u);
  EXPECT_EQ(KvCache(unit_dims(8), policy::Iterative{}, 3).capacity(), 3u);
  // Bmc never starts below one chunk and never above N.
  EXPECT_EQ(KvCache(unit_dims(8), policy::Bmc{4}, 0).capacity(), 4u);
  EXPECT_EQ(KvCache(unit_dims(10), policy::Bmc{4}, 9).capacity(), 10u);
}

TEST(KvCacheNew, RejectsOversizedPrompt) {
  EXPECT_THROW(KvCache(unit_dims(8), policy::Upfront{}, 9), bmc::CapacityExceeded);
}

TEST(KvCacheNew, RejectsBadDims) {
  ModelDims d = unit_dims(8);
  d.heads = 6;
  d.groups = 4;
  EXPECT_THROW(KvCache(d, policy::Upfront{}), bmc::DimensionError);
  EXPECT_THROW(KvCache(unit_dims(8), policy::Bmc{9}), bmc::BoundsError);
  EXPECT_THROW(KvCache(unit_dims(8), policy::Bmc{0}), bmc::BoundsError);
}

TEST(KvCacheNew, PrefillAllocationLedger) {
  ModelDims d = unit_dims(16);
  d.layers = 3;
  KvCache c(d, policy::Bmc{4}, 5);
  EXPECT_EQ(c.ledger().alloc_events, 3u);
  EXPECT_EQ(c.ledger().alloc_bytes, 2u * 3 * 8 * 4);
  EXPECT_EQ(c.ledger().realloc_copy_elems, 0u);
}

TEST(KvCacheAppend, IterativeMovesTriangularSum) {
  KvCache c(unit_dims(4), policy::Iterative{});
  for (int i = 0; i < 4; ++i) c.append_token(std::vector<float>{1.0f}, std::vector<float>{2.0f});
  EXPECT_EQ(c.ledger().moved_elems(), 20u);
  EXPECT_EQ(c.capacity(), 4u);
}

TEST(KvCacheAppend, BmcChunkOfTwo) {
  KvCache c(unit_dims(4), policy::Bmc{2});
  std::vector<bool> reallocs;
  for (int i = 0; i < 4; ++i) {
    reallocs.push_back(c.append_token(std::vector<float>{1.0f}, std::vector<float>{2.0f}));
  }
  EXPECT_EQ(c.ledger().realloc_copy_elems, 4u);
  EXPECT_EQ(c.ledger().append_write_elems, 8u);
  EXPECT_EQ(c.ledger().alloc_events, 2u);
  EXPECT_EQ(reallocs, (std::vector<bool>{false, false, true, false}));
}

TEST(KvCacheAppend, UpfrontNeverCopies) {
  ModelDims d = unit_dims(8);
  d.batch = 2;
  d.heads = 2;
  d.head_dim = 3;
  d.layers = 2;
  KvCache c(d, policy::Upfront{});
  for (int i = 0; i < 4; ++i) c.append_token(rows_for(d, 1.0f), rows_for(d, 2.0f));
  EXPECT_EQ(c.ledger().realloc_copy_elems, 0u);
  EXPECT_EQ(c.ledger().alloc_events, 2u);
}

TEST(KvCacheAppend, FullCacheThrows) {
  for (AllocationPolicy p : {AllocationPolicy{policy::Iterative{}}, AllocationPolicy{policy::Upfront{}},
                             AllocationPolicy{policy::Bmc{3}}}) {
    KvCache c(unit_dims(4), p);
    for (int i = 0; i < 4; ++i) c.append_token(std::vector<float>{1.0f}, std::vector<float>{1.0f});
    EXPECT_THROW(c.append_token(std::vector<float>{1.0f}, std::vector<float>{1.0f}), bmc::CapacityExceeded);
  }
}

TEST(KvCacheAppend, WrongRowShapeThrows) {
  KvCache c(unit_dims(4), policy::Upfront{});
  EXPECT_THROW(c.append_token(std::vector<float>{1.0f, 2.0f}, std::vector<float>{1.0f}), bmc::DimensionError);
}

TEST(KvCacheAppend, RaggedLastChunk) {
  KvCache c(unit_dims(10), policy::Bmc{4});
  for (int i = 0; i < 10; ++i) c.append_token(std::vector<float>{1.0f}, std::vector<float>{1.0f});
  EXPECT_EQ(c.capacity(), 10u);
  // reallocations at 4 and 8 rows, last one only adds 2
  EXPECT_EQ(c.ledger().realloc_copy_elems, 2u * (4 + 8));
  EXPECT_THROW(bmc::copy_total_closed_form(policy::Bmc{4}, unit_dims(10)), bmc::DivisibilityError);
}

TEST(CopyClosedForm, Examples) {
  EXPECT_EQ(bmc::copy_total_closed_form(policy::Iterative{}, unit_dims(4)), 20u);
  EXPECT_EQ(bmc::copy_total_closed_form(policy::Bmc{2}, unit_dims(4)), 12u);
  EXPECT_EQ(bmc::copy_total_closed_form(policy::Bmc{4}, unit_dims(4)), 8u);
  EXPECT_EQ(bmc::copy_total_closed_form(policy::Upfront{}, unit_dims(4)), 8u);
}

TEST(CopyClosedForm, GroupedKvHeads) {
  ModelDims d = unit_dims(8);
  d.heads = 4;
  d.head_dim = 2;
  d.groups = 2;
  // D/G = 4
  EXPECT_EQ(bmc::copy_total_closed_form(policy::Iterative{}, d), 4u * 8 * 9);
  KvCache c(d, policy::Iterative{});
  for (int i = 0; i < 8; ++i) c.append_token(rows_for(d, 0.5f), rows_for(d, 0.25f));
  EXPECT_EQ(c.ledger().moved_elems(), 4u * 8 * 9);
}

// Ledger totals after N appends equal the closed form for every policy and
// every chunk dividing N.
TEST(KvCacheProperty, LedgerMatchesClosedForm) {
  std::mt19937 rng(11);
  for (std::size_t n = 1; n <= 256; n += (n < 32 ? 1 : 17)) {
    ModelDims d = unit_dims(n);
    d.batch = 1 + rng() % 2;
    d.layers = 1 + rng() % 2;
    d.heads = 2;
    d.head_dim = 1 + rng() % 3;
    d.groups = 1 + rng() % 2;
    std::vector<AllocationPolicy> pols{policy::Iterative{}, policy::Upfront{}};
    for (std::size_t r = 1; r <= n; ++r) {
      if (n % r == 0) pols.push_back(policy::Bmc{r});
    }
    const auto k = rows_for(d, 0.0f);
    for (const auto& p : pols) {
      KvCache c(d, p);
      for (std::size_t i = 0; i < n; ++i) c.append_token(k, k);
      ASSERT_EQ(c.ledger().moved_elems(), bmc::copy_total_closed_form(p, d))
          << "n=" << n << " policy=" << bmc::policy_name(p);
      ASSERT_EQ(c.ledger(), simulate_ledger(p, d, n)) << "n=" << n;
    }
  }
}

// Capacity law and zero-pad law after every append, plus bitwise content
// equality of the committed prefix across policies.
TEST(KvCacheProperty, CapacityZeroPadAndContent) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (int trial = 0; trial < 20; ++trial) {
    ModelDims d;
    d.batch = 1 + rng() % 3;
    d.layers = 1 + rng() % 3;
    d.heads = 2;
    d.groups = 1 + rng() % 2;
    d.head_dim = 1 + rng() % 4;
    d.max_context = 5 + rng() % 40;
    const std::size_t r = 1 + rng() % d.max_context;
    const std::size_t prompt = rng() % 4;
    KvCache it(d, policy::Iterative{}, prompt);
    KvCache up(d, policy::Upfront{}, prompt);
    KvCache bm(d, policy::Bmc{r}, prompt);
    std::vector<float> k(d.layers * d.kv_rows() * d.head_dim), v(k.size());
    for (std::size_t n = prompt; n < d.max_context; ++n) {
      for (auto& x : k) x = u(rng);
      for (auto& x : v) x = u(rng);
      for (auto* c : {&it, &up, &bm}) c->append_token(k, v);
      ASSERT_EQ(it.capacity(), it.valid_len());
      ASSERT_EQ(up.capacity(), d.max_context);
      ASSERT_LT(bm.capacity() - bm.valid_len(), r);
      for (auto* c : {&it, &up, &bm}) {
        for (std::size_t l = 0; l < d.layers; ++l) {
          for (std::size_t kr = 0; kr < d.kv_rows(); ++kr) {
            for (std::size_t row = c->valid_len(); row < c->capacity(); ++row) {
              for (float x : c->key_row(l, kr, row)) ASSERT_EQ(x, 0.0f);
              for (float x : c->value_row(l, kr, row)) ASSERT_EQ(x, 0.0f);
            }
            for (std::size_t row = 0; row < c->valid_len(); ++row) {
              const auto a = it.key_row(l, kr, row);
              const auto b = c->key_row(l, kr, row);
              ASSERT_EQ(0, std::memcmp(a.data(), b.data(), a.size_bytes()));
              const auto av = it.value_row(l, kr, row);
              const auto bv = c->value_row(l, kr, row);
              ASSERT_EQ(0, std::memcmp(av.data(), bv.data(), av.size_bytes()));
            }
          }
        }
      }
    }
  }
}

TEST(KvCacheProperty, PolicyDegeneration) {
  const ModelDims d = unit_dims(32);
  KvCache bmc_n(d, policy::Bmc{32});
  KvCache upfront(d, policy::Upfront{});
  KvCache bmc_1(d, policy::Bmc{1});
  KvCache iter(d, policy::Iterative{});
  for (int i = 0; i < 32; ++i) {
    const std::vector<float> x{static_cast<float>(i)};
    bmc_n.append_token(x, x);
    upfront.append_token(x, x);
    bmc_1.append_token(x, x);
    iter.append_token(x, x);
    ASSERT_EQ(bmc_n.ledger(), upfront.ledger());
    ASSERT_EQ(bmc_1.ledger().alloc_events, iter.ledger().alloc_events);
  }
}

TEST(KvCacheProperty, LedgerMergeIsAssociativeAndCommutative) {
  std::mt19937_64 rng(3);
  auto draw = [&] {
    return bmc::CostLedger{rng() % 1000, rng() % 1000, rng() % 1000, rng() % 1000, rng() % 1000};
  };
  for (int i = 0; i < 100; ++i) {
    const auto a = draw(), b = draw(), c = draw();
    ASSERT_EQ((a + b) + c, a + (b + c));
    ASSERT_EQ(a + b, b + a);
  }
}

TEST(KvCacheStaging, StageCommitAndDiscard) {
  ModelDims d = unit_dims(8);
  KvCache c(d, policy::Bmc{8}, 2);
  EXPECT_EQ(c.free_rows(), 6u);
  const auto first = c.stage_rows(3);
  EXPECT_EQ(first, 2u);
  for (std::size_t j = 0; j < 3; ++j) {
    const std::vector<float> x{10.0f + static_cast<float>(j)};
    c.write_row(0, first + j, x, x);
  }
  EXPECT_EQ(c.free_rows(), 3u);
  EXPECT_THROW(c.stage_rows(4), bmc::PlacementError);
  EXPECT_THROW(c.open_row(), bmc::PlacementError);
  const std::size_t keep[] = {0, 2};
  c.commit_staged(keep);
  EXPECT_EQ(c.valid_len(), 4u);
  EXPECT_EQ(c.staged(), 0u);
  EXPECT_EQ(c.key_row(0, 0, 2)[0], 10.0f);
  EXPECT_EQ(c.key_row(0, 0, 3)[0], 12.0f);
  EXPECT_EQ(c.key_row(0, 0, 4)[0], 0.0f);
  c.stage_rows(2);
  EXPECT_THROW(c.write_row(0, 6, std::vector<float>{1.0f}, std::vector<float>{1.0f}), bmc::BoundsError);
  c.discard_staged();
  EXPECT_EQ(c.valid_len(), 4u);
  EXPECT_EQ(c.free_rows(), 4u);
}

TEST(KvCacheStaging, CommitRejectsUnstagedOrUnordered) {
  KvCache c(unit_dims(8), policy::Bmc{8}, 1);
  c.stage_rows(2);
  const std::size_t bad[] = {2};
  EXPECT_THROW(c.commit_staged(bad), bmc::ConsistencyError);
  const std::size_t unordered[] = {1, 0};
  EXPECT_THROW(c.commit_staged(unordered), bmc::ConsistencyError);
}

}  // namespace

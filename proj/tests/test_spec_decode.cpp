// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <vector>

#include "bmc/decode_sim.hpp"
#include "bmc/spec_decode.hpp"

namespace {

using bmc::KvCache;
using bmc::ModelDims;
using bmc::SpeculationTree;
namespace policy = bmc::policy;

ModelDims small(std::size_t n) {
  ModelDims d;
  d.max_context = n;
  d.layers = 2;
  d.heads = 2;
  d.head_dim = 3;
  return d;
}

std::size_t row_width(const ModelDims& d) { return d.layers * d.kv_rows() * d.head_dim; }

std::vector<float> random_rows(std::mt19937& rng, std::size_t count) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(count);
  for (auto& x : v) x = u(rng);
  return v;
}

SpeculationTree chain_of(std::size_t n) {
  std::vector<std::vector<bmc::TokenId>> toks;
  for (std::size_t i = 0; i < n; ++i) toks.push_back({static_cast<bmc::TokenId>(i)});
  return SpeculationTree::chain(toks);
}

// Root 0 with a two-node branch and a one-node branch.
SpeculationTree figure_tree() {
  SpeculationTree t;
  t.nodes = {{bmc::kRootParent, {10}}, {0, {11}}, {0, {21}}, {1, {12}}};
  return t;
}

void place_random(KvCache& c, const SpeculationTree& t, std::mt19937& rng) {
  const auto k = random_rows(rng, t.size() * row_width(c.dims()));
  const auto v = random_rows(rng, k.size());
  bmc::place_candidates(c, t, k, v);
}

void expect_padding_zero(const KvCache& c) {
  const auto& d = c.dims();
  for (std::size_t l = 0; l < d.layers; ++l) {
    for (std::size_t kr = 0; kr < d.kv_rows(); ++kr) {
      for (std::size_t row = c.valid_len(); row < c.capacity(); ++row) {
        for (float x : c.key_row(l, kr, row)) ASSERT_EQ(x, 0.0f);
        for (float x : c.value_row(l, kr, row)) ASSERT_EQ(x, 0.0f);
      }
    }
  }
}

TEST(Admit, FigureScenarioWastedRows) {
  std::mt19937 rng(1);
  const auto d = small(16);
  KvCache c(d, policy::Bmc{8}, 1);
  ASSERT_EQ(bmc::wasted_rows(c), 7u);

  auto t = bmc::admit_candidates(c, figure_tree());
  EXPECT_EQ(t.size(), 4u);
  place_random(c, t, rng);
  EXPECT_EQ(bmc::wasted_rows(c), 3u);
  bmc::verify_and_commit(c, t, {{0, 1}});
  EXPECT_EQ(c.valid_len(), 3u);
  EXPECT_EQ(bmc::wasted_rows(c), 5u);

  t = bmc::admit_candidates(c, figure_tree());
  EXPECT_EQ(t.size(), 4u);
  place_random(c, t, rng);
  EXPECT_EQ(bmc::wasted_rows(c), 1u);
  bmc::verify_and_commit(c, t, {{0}});

  t = bmc::admit_candidates(c, figure_tree());
  place_random(c, t, rng);
  EXPECT_EQ(bmc::wasted_rows(c), 0u);
  EXPECT_EQ(c.capacity(), 8u);
  EXPECT_EQ(c.ledger().alloc_events, 2u);
}

TEST(Admit, TruncatesToFreeRows) {
  KvCache c(small(16), policy::Bmc{8}, 6);
  const auto t = bmc::admit_candidates(c, figure_tree());
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.nodes[1].parent, 0);
  KvCache full(small(16), policy::Bmc{8}, 8);
  EXPECT_TRUE(bmc::admit_candidates(full, figure_tree()).empty());
  KvCache it(small(16), policy::Iterative{}, 3);
  EXPECT_THROW(bmc::admit_candidates(it, figure_tree()), bmc::PlacementError);
}

TEST(Place, EmptyAndSingle) {
  std::mt19937 rng(2);
  KvCache c(small(16), policy::Bmc{8}, 2);
  const auto before = c.ledger();
  bmc::place_candidates(c, SpeculationTree{}, {}, {});
  EXPECT_EQ(c.staged(), 0u);
  EXPECT_EQ(c.ledger(), before);
  place_random(c, chain_of(1), rng);
  EXPECT_EQ(c.staged(), 1u);
  EXPECT_EQ(bmc::wasted_rows(c), c.capacity() - c.valid_len() - 1);
}

TEST(Place, BfsOrderAndOverflow) {
  SpeculationTree t;
  t.nodes = {{bmc::kRootParent, {0}}, {0, {1}}, {1, {2}}, {0, {3}}};
  const auto b = t.bfs_ordered();
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b.nodes[1].tokens[0], 1);
  EXPECT_EQ(b.nodes[2].tokens[0], 3);
  EXPECT_EQ(b.nodes[3].tokens[0], 2);
  EXPECT_EQ(b.nodes[3].parent, 1);

  std::mt19937 rng(3);
  KvCache c(small(16), policy::Bmc{8}, 6);
  const auto k = random_rows(rng, 4 * row_width(c.dims()));
  EXPECT_THROW(bmc::place_candidates(c, t, k, k), bmc::PlacementError);
  EXPECT_THROW(bmc::place_candidates(c, chain_of(1), k, k), bmc::DimensionError);
  SpeculationTree bad;
  bad.nodes = {{1, {0}}, {bmc::kRootParent, {0}}};
  EXPECT_THROW(bad.validate(), bmc::ConsistencyError);
}

TEST(TreeMask, Examples) {
  const float m = bmc::kMaskValue;
  EXPECT_EQ(bmc::tree_mask(chain_of(2), 2, 8),
            (std::vector<float>{0, 0, 0, m, m, m, m, m,  //
                                0, 0, 0, 0, m, m, m, m}));
  EXPECT_EQ(bmc::tree_mask(chain_of(1), 3, 4), (std::vector<float>{0, 0, 0, 0}));
  SpeculationTree siblings;
  siblings.nodes = {{bmc::kRootParent, {1}}, {bmc::kRootParent, {2}}};
  EXPECT_EQ(bmc::tree_mask(siblings, 1, 3), (std::vector<float>{0, 0, m, 0, m, 0}));
  EXPECT_THROW(bmc::tree_mask(chain_of(3), 2, 4), bmc::BoundsError);
}

TEST(GreedyAccept, LongestMatchingChain) {
  const auto t = figure_tree();
  // After root predict 21 -> take branch 2, which has no children.
  EXPECT_EQ(bmc::greedy_accept(t, {{21}, {0}, {0}, {0}}).accepted_path, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(bmc::greedy_accept(t, {{11}, {12}, {0}, {0}}).accepted_path,
            (std::vector<std::size_t>{0, 1, 3}));
  EXPECT_EQ(bmc::greedy_accept(t, {{5}, {0}, {0}, {0}}).m(), 1u);
  EXPECT_EQ(bmc::greedy_accept(SpeculationTree{}, {}).m(), 0u);
}

TEST(Commit, FullRejectionOnlyZeroesStaged) {
  std::mt19937 rng(4);
  KvCache c(small(16), policy::Bmc{8});
  const auto row = random_rows(rng, row_width(c.dims()));
  c.append_token(row, row);
  const KvCache snapshot = c;
  place_random(c, figure_tree(), rng);
  bmc::verify_and_commit(c, figure_tree(), {});
  EXPECT_EQ(c.valid_len(), 1u);
  EXPECT_EQ(c.staged(), 0u);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto a = c.keys(l), b = snapshot.keys(l);
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size_bytes()));
  }
}

TEST(Commit, RejectsBrokenPaths) {
  std::mt19937 rng(5);
  KvCache c(small(16), policy::Bmc{8});
  place_random(c, figure_tree(), rng);
  EXPECT_THROW(bmc::verify_and_commit(c, figure_tree(), {{0, 3}}), bmc::ConsistencyError);
  EXPECT_THROW(bmc::verify_and_commit(c, figure_tree(), {{1}}), bmc::ConsistencyError);
  EXPECT_THROW(bmc::verify_and_commit(c, figure_tree(), {{0, 9}}), bmc::ConsistencyError);
}

// Random tree, random accepted chain. The committed prefix must match a cache
// built by plain appends, staged rows must be zero afterwards, and capacity
// and allocation count stay put.
TEST(SpecProperty, CommitEquivalenceHygieneNoRealloc) {
  std::mt19937 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    ModelDims d = small(24);
    d.batch = 1 + rng() % 2;
    const std::size_t r = 4 + rng() % 9;
    KvCache c(d, policy::Bmc{r});
    KvCache oracle(d, policy::Iterative{});
    const std::size_t pre = rng() % r;
    for (std::size_t i = 0; i < pre; ++i) {
      const auto row = random_rows(rng, row_width(d));
      c.append_token(row, row);
      oracle.append_token(row, row);
    }
    SpeculationTree t;
    const std::size_t n = 1 + rng() % 8;
    for (std::size_t j = 0; j < n; ++j) {
      const std::int64_t parent = j == 0 ? bmc::kRootParent : static_cast<std::int64_t>(rng() % j);
      t.nodes.push_back({parent, std::vector<bmc::TokenId>(d.batch, static_cast<bmc::TokenId>(j))});
    }
    t = bmc::admit_candidates(c, t.bfs_ordered());
    const auto cap = c.capacity();
    const auto allocs = c.ledger().alloc_events;
    const auto k = random_rows(rng, t.size() * row_width(d));
    const auto v = random_rows(rng, k.size());
    bmc::place_candidates(c, t, k, v);

    bmc::AcceptanceResult acc;
    if (!t.empty() && rng() % 5) {
      std::size_t node = rng() % t.size();
      for (auto cur = static_cast<std::int64_t>(node); cur != bmc::kRootParent; cur = t.nodes[std::size_t(cur)].parent) {
        acc.accepted_path.insert(acc.accepted_path.begin(), std::size_t(cur));
      }
    }
    bmc::verify_and_commit(c, t, acc);
    const std::size_t w = row_width(d);
    for (auto node : acc.accepted_path) {
      oracle.append_token(std::span<const float>(k.data() + node * w, w), std::span<const float>(v.data() + node * w, w));
    }
    ASSERT_EQ(c.capacity(), cap);
    ASSERT_EQ(c.ledger().alloc_events, allocs);
    ASSERT_EQ(c.valid_len(), oracle.valid_len());
    for (std::size_t l = 0; l < d.layers; ++l) {
      for (std::size_t kr = 0; kr < d.kv_rows(); ++kr) {
        for (std::size_t row = 0; row < c.valid_len(); ++row) {
          const auto a = c.key_row(l, kr, row), b = oracle.key_row(l, kr, row);
          ASSERT_EQ(0, std::memcmp(a.data(), b.data(), a.size_bytes()));
          const auto av = c.value_row(l, kr, row), bv = oracle.value_row(l, kr, row);
          ASSERT_EQ(0, std::memcmp(av.data(), bv.data(), av.size_bytes()));
        }
      }
    }
    expect_padding_zero(c);
  }
}

// Each node's output under tree + padding masks equals exact attention over
// the committed prefix, its ancestors and itself.
TEST(SpecProperty, MaskSoundness) {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    ModelDims d;
    d.max_context = 32;
    d.head_dim = 1 + rng() % 8;
    const std::size_t r = 8 + rng() % 9;
    KvCache c(d, policy::Bmc{r});
    const std::size_t pre = rng() % 8;
    for (std::size_t i = 0; i < pre; ++i) {
      const auto row = random_rows(rng, d.head_dim);
      const auto vrow = random_rows(rng, d.head_dim);
      c.append_token(row, vrow);
    }
    SpeculationTree t;
    const std::size_t n = 1 + rng() % 8;
    for (std::size_t j = 0; j < n; ++j) {
      t.nodes.push_back({j == 0 ? bmc::kRootParent : static_cast<std::int64_t>(rng() % j), {0}});
    }
    t = bmc::admit_candidates(c, t);
    if (t.empty()) continue;
    const auto k = random_rows(rng, t.size() * d.head_dim);
    const auto v = random_rows(rng, k.size());
    const std::size_t committed = c.valid_len();
    bmc::place_candidates(c, t, k, v);
    const auto q = random_rows(rng, t.size() * d.head_dim);
    const auto extra = bmc::tree_mask(t, committed, c.capacity());
    bmc::CostLedger l;
    const auto out = bmc::sdpa(bmc::AttentionQuery::make(q, t.size(), d.head_dim), c, 0,
                               bmc::build_bias_mask(committed + t.size(), c.capacity()),
                               std::span<const float>(extra), l);
    const float scale = 1.0f / std::sqrt(static_cast<float>(d.head_dim));
    for (std::size_t j = 0; j < t.size(); ++j) {
      std::vector<float> ks, vs;
      for (std::size_t row = 0; row < committed + t.size(); ++row) {
        if (row >= committed && !t.is_ancestor_or_self(row - committed, j)) continue;
        const auto kr = c.key_row(0, 0, row), vr = c.value_row(0, 0, row);
        ks.insert(ks.end(), kr.begin(), kr.end());
        vs.insert(vs.end(), vr.begin(), vr.end());
      }
      const auto ref = bmc::exact_reference_attention(
          std::span<const float>(q.data() + j * d.head_dim, d.head_dim), ks, vs, scale);
      for (std::size_t x = 0; x < d.head_dim; ++x) ASSERT_NEAR(out[j * d.head_dim + x], ref[x], 1e-5);
    }
  }
}

}  // namespace

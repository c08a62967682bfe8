// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "bmc/attention.hpp"
#include "bmc/errors.hpp"
#include "bmc/kv_cache.hpp"

namespace bmc {

using TokenId = std::int32_t;

inline constexpr std::int64_t kRootParent = -1;

struct TreeNode {
  std::int64_t parent = kRootParent;  // kRootParent: attaches to the last committed token
  std::vector<TokenId> tokens;        // one id per batch lane
};

// Candidate tokens proposed for one verification pass, stored in placement
// order: node j goes to cache row valid_len + j. Parents precede children.
struct SpeculationTree {
  std::vector<TreeNode> nodes;

  std::size_t size() const noexcept { return nodes.size(); }
  bool empty() const noexcept { return nodes.empty(); }

  void validate() const {
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      const auto p = nodes[j].parent;
      if (p != kRootParent && (p < 0 || static_cast<std::size_t>(p) >= j)) {
        throw ConsistencyError("tree node " + std::to_string(j) + " must come after its parent");
      }
    }
  }

  bool is_ancestor_or_self(std::size_t ancestor, std::size_t node) const {
    std::int64_t cur = static_cast<std::int64_t>(node);
    while (cur != kRootParent) {
      if (static_cast<std::size_t>(cur) == ancestor) return true;
      cur = nodes[static_cast<std::size_t>(cur)].parent;
    }
    return false;
  }

  std::size_t depth(std::size_t node) const {
    std::size_t d = 0;
    for (auto cur = static_cast<std::int64_t>(node); cur != kRootParent;
         cur = nodes[static_cast<std::size_t>(cur)].parent) {
      ++d;
    }
    return d;
  }

  // Single chain: node j is the parent of node j + 1.
  static SpeculationTree chain(const std::vector<std::vector<TokenId>>& tokens) {
    SpeculationTree t;
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      t.nodes.push_back({j == 0 ? kRootParent : static_cast<std::int64_t>(j - 1), tokens[j]});
    }
    return t;
  }

  // Same tree re-indexed breadth first (roots first, siblings contiguous).
  SpeculationTree bfs_ordered() const {
    validate();
    std::vector<std::vector<std::size_t>> children(nodes.size());
    std::deque<std::size_t> queue;
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      if (nodes[j].parent == kRootParent) {
        queue.push_back(j);
      } else {
        children[static_cast<std::size_t>(nodes[j].parent)].push_back(j);
      }
    }
    std::vector<std::int64_t> new_index(nodes.size(), kRootParent);
    SpeculationTree out;
    while (!queue.empty()) {
      const std::size_t j = queue.front();
      queue.pop_front();
      new_index[j] = static_cast<std::int64_t>(out.nodes.size());
      TreeNode n = nodes[j];
      if (n.parent != kRootParent) n.parent = new_index[static_cast<std::size_t>(n.parent)];
      out.nodes.push_back(std::move(n));
      for (auto c : children[j]) queue.push_back(c);
    }
    return out;
  }
};

// Root-to-node chain of accepted tree nodes.
struct AcceptanceResult {
  std::vector<std::size_t> accepted_path;

  std::size_t m() const noexcept { return accepted_path.size(); }
};

// Padded rows that take part in the attention matmul without holding data.
inline std::size_t wasted_rows(const KvCache& cache) { return cache.free_rows(); }

// Truncates `tree` to the padded rows currently free. Never reallocates; a
// full cache yields an empty tree and the caller grows it by committing.
inline SpeculationTree admit_candidates(const KvCache& cache, SpeculationTree tree) {
  if (std::holds_alternative<policy::Iterative>(cache.policy())) {
    throw PlacementError("speculative rows need a padded policy, not iterative allocation");
  }
  tree.validate();
  const std::size_t room = cache.free_rows();
  if (tree.size() > room) tree.nodes.resize(room);
  return tree;
}

// Writes candidate rows into the padded region without committing them.
// `k_rows`/`v_rows` are [nodes, layers, kv_rows, head_dim]. Returns the first
// staged row index.
inline std::size_t place_candidates(KvCache& cache, const SpeculationTree& tree,
                                    std::span<const float> k_rows, std::span<const float> v_rows) {
  const ModelDims& dims = cache.dims();
  const std::size_t per_layer = dims.kv_rows() * dims.head_dim;
  const std::size_t per_node = dims.layers * per_layer;
  if (k_rows.size() != tree.size() * per_node || v_rows.size() != k_rows.size()) {
    throw DimensionError("candidate rows must be [nodes, layers, kv_rows, head_dim]");
  }
  if (tree.size() > cache.free_rows()) {
    throw PlacementError("tree of " + std::to_string(tree.size()) + " nodes overflows " +
                         std::to_string(cache.free_rows()) + " padded rows");
  }
  const std::size_t first = cache.stage_rows(tree.size());
  for (std::size_t j = 0; j < tree.size(); ++j) {
    for (std::size_t l = 0; l < dims.layers; ++l) {
      const std::size_t off = j * per_node + l * per_layer;
      cache.write_row(l, first + j, k_rows.subspan(off, per_layer), v_rows.subspan(off, per_layer));
    }
  }
  return first;
}

// Verification mask [nodes, capacity]: node j sees the committed prefix, its
// ancestors and itself; every other column gets kMaskValue.
inline std::vector<float> tree_mask(const SpeculationTree& tree, std::size_t valid_len,
                                    std::size_t capacity) {
  if (valid_len + tree.size() > capacity) {
    throw BoundsError("tree does not fit between valid_len and capacity");
  }
  std::vector<float> mask(tree.size() * capacity, kMaskValue);
  for (std::size_t j = 0; j < tree.size(); ++j) {
    float* row = mask.data() + j * capacity;
    std::fill(row, row + valid_len, 0.0f);
    for (std::int64_t a = static_cast<std::int64_t>(j); a != kRootParent;
         a = tree.nodes[static_cast<std::size_t>(a)].parent) {
      row[valid_len + static_cast<std::size_t>(a)] = 0.0f;
    }
  }
  return mask;
}

// Picks the longest chain whose every non-root node matches, in all lanes,
// the greedy prediction made at its parent. predicted[j][lane] is the
// argmax token after node j. The root must be node 0 and is always accepted.
inline AcceptanceResult greedy_accept(const SpeculationTree& tree,
                                      const std::vector<std::vector<TokenId>>& predicted) {
  AcceptanceResult res;
  if (tree.empty()) return res;
  if (predicted.size() != tree.size()) throw DimensionError("one prediction per node required");
  std::size_t cur = 0;
  res.accepted_path.push_back(cur);
  for (;;) {
    bool advanced = false;
    for (std::size_t c = cur + 1; c < tree.size(); ++c) {
      if (tree.nodes[c].parent != static_cast<std::int64_t>(cur)) continue;
      if (tree.nodes[c].tokens == predicted[cur]) {
        cur = c;
        res.accepted_path.push_back(c);
        advanced = true;
        break;
      }
    }
    if (!advanced) break;
  }
  return res;
}

// Commits the accepted path (compacting rows when the path skips siblings)
// and re-zeroes every other staged row.
inline void verify_and_commit(KvCache& cache, const SpeculationTree& tree,
                              const AcceptanceResult& result) {
  const auto& path = result.accepted_path;
  for (std::size_t j = 0; j < path.size(); ++j) {
    if (path[j] >= tree.size() || path[j] >= cache.staged()) {
      throw ConsistencyError("accepted node " + std::to_string(path[j]) + " is not staged");
    }
    const auto expected = j == 0 ? kRootParent : static_cast<std::int64_t>(path[j - 1]);
    if (tree.nodes[path[j]].parent != expected) {
      throw ConsistencyError("accepted path is not a root-to-node chain");
    }
  }
  cache.commit_staged(path);
}

}  // namespace bmc

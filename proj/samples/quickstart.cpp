// SPDX-License-Identifier: Apache-2.0
//
// Decodes a few tokens with each allocation policy and prints the ledgers.

#include <cstdio>

#include "bmc/bmc.hpp"

int main() {
  bmc::ModelDims dims;
  dims.batch = 1;
  dims.layers = 2;
  dims.heads = 4;
  dims.head_dim = 16;
  dims.max_context = 64;

  const auto model = bmc::ToyModel::create(dims, 256, 42);
  const auto prompts = bmc::make_prompts(dims.batch, 4, model.vocab, 42);

  const auto advice = bmc::optimal_T(bmc::CostParams::from_cprime(dims.max_context, 0.1));
  const std::size_t chunk = dims.max_context / advice.rounded;
  std::printf("advised T=%llu (T*=%.3f), chunk r=%zu\n",
              static_cast<unsigned long long>(advice.rounded), advice.continuous, chunk);

  const bmc::AllocationPolicy policies[] = {bmc::policy::Iterative{}, bmc::policy::Upfront{},
                                            bmc::policy::Bmc{chunk}};
  for (const auto& p : policies) {
    const auto r = bmc::generate(model, p, prompts, 48);
    std::printf("%-9s copies=%-8llu writes=%-6llu macs=%-9llu allocs=%-3llu first tokens:",
                bmc::policy_name(p).c_str(),
                static_cast<unsigned long long>(r.ledger.realloc_copy_elems),
                static_cast<unsigned long long>(r.ledger.append_write_elems),
                static_cast<unsigned long long>(r.ledger.sdpa_macs),
                static_cast<unsigned long long>(r.ledger.alloc_events));
    for (std::size_t i = 0; i < 8; ++i) std::printf(" %d", r.tokens[0][i]);
    std::printf("\n");
  }
}

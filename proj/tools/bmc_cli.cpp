// SPDX-License-Identifier: Apache-2.0
//
// bmc: calibration, sweeps and allocation advice for chunked KV caches.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bmc/bmc.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void print_calibration(const bmc::Calibration& c) {
  std::printf("alpha_bw=%.6g bytes/s\nbeta_c=%.6g MAC/s\ncprime=%.6g\n", c.alpha_bw, c.beta_c, c.cprime);
}

struct AdviseArgs {
  std::uint64_t n = 0;
  std::optional<double> cprime;
  bool calibrate = false;
  double duration = 1.0;
  std::optional<double> spec_k;
  std::optional<double> spec_m;
  double beta_prime_ratio = 1.0;
};

int run_advise(const AdviseArgs& a) {
  double cprime = 0.0;
  if (a.cprime) {
    cprime = *a.cprime;
  } else if (a.calibrate) {
    const auto c = bmc::cmd_calibrate(a.duration);
    print_calibration(c);
    cprime = c.cprime;
  } else {
    std::cerr << "advise: need --cprime or --calibrate\n";
    return kExitUsage;
  }
  if (!(cprime > 0.0)) {
    std::cerr << "advise: --cprime must be positive\n";
    return kExitUsage;
  }
  auto p = bmc::CostParams::from_cprime(a.n, cprime);
  const auto opt = bmc::optimal_T(p);
  std::printf("N=%llu cprime=%g\n", static_cast<unsigned long long>(a.n), cprime);
  std::printf("T*=%.6f\n", opt.continuous);
  std::printf("T=%llu, r=%llu\n", static_cast<unsigned long long>(opt.rounded),
              static_cast<unsigned long long>((a.n + opt.rounded - 1) / opt.rounded));
  if (a.spec_k || a.spec_m) {
    p.k = a.spec_k.value_or(1.0);
    p.m = a.spec_m.value_or(1.0);
    p.beta_prime_c = p.beta_c * a.beta_prime_ratio;
    const auto sd = bmc::optimal_T_sd(p);
    std::printf("speculative k=%g m=%g: T*=%.6f\n", p.k, p.m, sd.continuous);
    std::printf("speculative T=%llu, r=%llu\n", static_cast<unsigned long long>(sd.rounded),
                static_cast<unsigned long long>((a.n + sd.rounded - 1) / sd.rounded));
  }
  return 0;
}

struct SweepArgs {
  std::string policy = "bmc";
  std::string allocs = "auto";
  std::optional<std::uint64_t> chunk;
  std::size_t batch = 1, layers = 2, heads = 4, head_dim = 16, groups = 1, seq_len = 128;
  std::size_t vocab = 256, prompt_len = 1;
  std::optional<std::size_t> steps;
  std::string spec = "off";
  std::uint64_t seed = 0;
  std::size_t reps = 1;
  std::string format = "json";
  std::string out;
  double cprime = 0.1;
  double beta_c = 1e9;
};

int run_sweep(const SweepArgs& a) {
  bmc::SweepSpec s;
  s.policies = split(a.policy, ',');
  if (a.allocs != "auto") {
    for (const auto& t : split(a.allocs, ',')) {
      try {
        s.allocs.push_back(std::stoull(t));
      } catch (const std::exception&) {
        std::cerr << "sweep: bad --allocs entry '" << t << "'\n";
        return kExitUsage;
      }
    }
  }
  s.chunk = a.chunk;
  s.dims = {a.batch, a.layers, a.heads, a.head_dim, a.seq_len, a.groups};
  s.vocab = a.vocab;
  s.prompt_len = a.prompt_len;
  s.steps = a.steps;
  s.reps = a.reps;
  s.spec = bmc::SpeculationConfig::parse(a.spec);
  s.seed = a.seed;
  s.cprime = a.cprime;
  s.beta_c = a.beta_c;
  if (s.prompt_len == 0 || s.prompt_len > s.dims.max_context) {
    std::cerr << "sweep: --prompt-len must lie in [1, seq-len]\n";
    return kExitUsage;
  }

  const auto outcome = bmc::cmd_sweep(s);
  const std::string text = a.format == "csv" ? bmc::report_to_csv(outcome.report)
                                             : bmc::report_to_json(outcome.report);
  if (a.out.empty()) {
    std::cout << text;
  } else {
    bmc::write_atomically(a.out, text);
  }
  if (outcome.error) {
    std::cerr << "sweep: " << *outcome.error << "\n";
    return kExitUsage;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chunked KV-cache allocation: calibrate, sweep, advise"};
  app.require_subcommand(1);

  double cal_duration = 1.0;
  double cal_elem_bytes = 4.0;
  auto* calibrate = app.add_subcommand("calibrate", "Measure copy bandwidth and attention MAC rate");
  calibrate->add_option("--duration", cal_duration, "Seconds to spend measuring")->check(CLI::PositiveNumber);
  calibrate->add_option("--elem-bytes", cal_elem_bytes, "Bytes per cached element")->check(CLI::PositiveNumber);

  AdviseArgs adv;
  auto* advise = app.add_subcommand("advise", "Recommend the number of allocations T");
  advise->add_option("--n,--seq-len", adv.n, "Maximum context N")->required()->check(CLI::PositiveNumber);
  advise->add_option("--cprime", adv.cprime, "Platform constant C' (T* = sqrt(C' N))");
  advise->add_flag("--calibrate", adv.calibrate, "Measure C' instead of taking --cprime");
  advise->add_option("--duration", adv.duration, "Calibration seconds")->check(CLI::PositiveNumber);
  advise->add_option("--spec-k", adv.spec_k, "Speculative candidates per iteration");
  advise->add_option("--spec-m", adv.spec_m, "Mean accepted tokens per iteration");
  advise->add_option("--beta-prime-ratio", adv.beta_prime_ratio,
                     "Verification GEMM rate relative to decode attention rate")
      ->check(CLI::PositiveNumber);

  SweepArgs sw;
  auto* sweep = app.add_subcommand("sweep", "Run decode simulations over policies and T");
  sweep->add_option("--policy", sw.policy, "Comma list of iterative|upfront|bmc");
  auto* allocs = sweep->add_option("--allocs", sw.allocs, "Comma list of T values, or auto");
  auto* chunk = sweep->add_option("--chunk", sw.chunk, "Fixed chunk size r");
  allocs->excludes(chunk);
  sweep->add_option("--batch", sw.batch)->check(CLI::PositiveNumber);
  sweep->add_option("--layers", sw.layers)->check(CLI::PositiveNumber);
  sweep->add_option("--heads", sw.heads)->check(CLI::PositiveNumber);
  sweep->add_option("--head-dim", sw.head_dim)->check(CLI::PositiveNumber);
  sweep->add_option("--groups", sw.groups, "Query heads per KV head")->check(CLI::PositiveNumber);
  sweep->add_option("--seq-len", sw.seq_len, "Maximum context N")->check(CLI::PositiveNumber);
  sweep->add_option("--vocab", sw.vocab)->check(CLI::Range(2, 1 << 20));
  sweep->add_option("--prompt-len", sw.prompt_len);
  sweep->add_option("--steps", sw.steps, "Tokens to generate (default fills the context)");
  sweep->add_option("--spec", sw.spec, "off | script:<m> | self:<depth>");
  sweep->add_option("--seed", sw.seed);
  sweep->add_option("--reps", sw.reps)->check(CLI::PositiveNumber);
  sweep->add_option("--format", sw.format)->check(CLI::IsMember({"json", "csv"}));
  sweep->add_option("--out", sw.out, "Output path (default stdout)");
  sweep->add_option("--cprime", sw.cprime, "C' for the analytical column")->check(CLI::PositiveNumber);
  sweep->add_option("--beta-c", sw.beta_c, "MAC/s for the analytical column")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*calibrate) {
      print_calibration(bmc::cmd_calibrate(cal_duration, cal_elem_bytes));
      return 0;
    }
    if (*advise) return run_advise(adv);
    return run_sweep(sw);
  } catch (const bmc::NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

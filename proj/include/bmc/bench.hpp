// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bmc/attention.hpp"
#include "bmc/cost_model.hpp"
#include "bmc/decode_sim.hpp"
#include "bmc/errors.hpp"
#include "bmc/kv_cache.hpp"
#include "bmc/report.hpp"

namespace bmc {

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Smallest observable steady_clock increment.
inline double clock_tick_seconds() {
  double best = 1.0;
  for (int i = 0; i < 16; ++i) {
    const auto t0 = Clock::now();
    auto t1 = Clock::now();
    while (t1 == t0) t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

// q-quantile (0 <= q <= 1) by nearest rank.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1) + 0.5);
  return v[std::min(idx, v.size() - 1)];
}

// Rates are reported at the 90th percentile: interference only ever slows a
// sample down, so the upper tail is the stable estimate of the platform rate.
inline constexpr double kRateQuantile = 0.9;

}  // namespace detail

// Large-buffer copy throughput in bytes/s (bytes copied, not read + written).
inline double measure_copy_bandwidth(double seconds, std::size_t bytes = std::size_t{64} << 20) {
  std::vector<char> src(bytes, 1), dst(bytes, 0);
  std::memcpy(dst.data(), src.data(), bytes);  // fault pages in
  std::vector<double> rates;
  const auto deadline = detail::Clock::now() + std::chrono::duration<double>(seconds);
  do {
    const auto t0 = detail::Clock::now();
    std::memcpy(dst.data(), src.data(), bytes);
    const double dt = detail::seconds_since(t0);
    if (dt > 0.0) rates.push_back(static_cast<double>(bytes) / dt);
    src[rates.size() % bytes] ^= dst[bytes / 2];  // keep the copies observable
  } while (detail::Clock::now() < deadline || rates.size() < 3);
  return detail::quantile(rates, detail::kRateQuantile);
}

// MAC rate of the masked attention kernel on a padded single-layer cache.
inline double measure_mac_rate(double seconds) {
  ModelDims dims;
  dims.heads = 8;
  dims.head_dim = 64;
  dims.max_context = 1024;
  KvCache cache(dims, policy::Upfront{}, 0);
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> k(dims.kv_rows() * dims.head_dim), v(k.size());
  for (std::size_t i = 0; i < dims.max_context; ++i) {
    for (auto& x : k) x = u(rng);
    for (auto& x : v) x = u(rng);
    cache.append_token(k, v);
  }
  std::vector<float> q(dims.q_rows() * dims.head_dim);
  for (auto& x : q) x = u(rng);
  const auto mask = build_bias_mask(cache.valid_len(), cache.capacity());

  std::vector<double> rates;
  float sink = 0.0f;
  const auto deadline = detail::Clock::now() + std::chrono::duration<double>(seconds);
  do {
    CostLedger l;
    const auto t0 = detail::Clock::now();
    const auto out = sdpa(AttentionQuery::make(q, 1, dims.head_dim), cache, 0, mask, std::nullopt, l);
    const double dt = detail::seconds_since(t0);
    sink += out[0];
    if (dt > 0.0) rates.push_back(static_cast<double>(l.sdpa_macs) / dt);
    q[0] = sink * 1e-30f;
  } while (detail::Clock::now() < deadline || rates.size() < 3);
  return detail::quantile(rates, detail::kRateQuantile);
}

// Measures copy bandwidth and attention MAC rate, spending about `seconds`
// in total. C' is reported for fp32 buffers.
inline Calibration cmd_calibrate(double seconds, double elem_bytes = 4.0) {
  if (!(seconds > 0.0)) throw CalibrationError("calibration duration must be positive");
  const double tick = detail::clock_tick_seconds();
  if (tick * 1000.0 > seconds) {
    throw CalibrationError("timer resolution " + std::to_string(tick) + " s is too coarse for a " +
                           std::to_string(seconds) + " s calibration");
  }
  CostParams p;
  p.elem_bytes = elem_bytes;
  return calibrate(measure_copy_bandwidth(seconds / 2), measure_mac_rate(seconds / 2), p);
}

struct SpeculationConfig {
  enum class Kind { Off, Scripted, Self };
  Kind kind = Kind::Off;
  std::size_t value = 0;  // accepted length (scripted) or draft depth (self)
  std::size_t tree_size = 0;  // scripted only; 0 = value + 2

  static SpeculationConfig parse(const std::string& s) {
    SpeculationConfig c;
    if (s == "off") return c;
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw BoundsError("bad --spec value '" + s + "'");
    const std::string kind = s.substr(0, colon);
    std::size_t v = 0;
    try {
      v = std::stoul(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw BoundsError("bad --spec value '" + s + "'");
    }
    if (v == 0) throw BoundsError("--spec needs a positive count");
    if (kind == "script") {
      c.kind = Kind::Scripted;
    } else if (kind == "self") {
      c.kind = Kind::Self;
    } else {
      throw BoundsError("bad --spec kind '" + kind + "'");
    }
    c.value = v;
    return c;
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::Scripted: return "script:" + std::to_string(value);
      case Kind::Self: return "self:" + std::to_string(value);
      default: return "off";
    }
  }
};

struct SweepSpec {
  std::vector<std::string> policies{"bmc"};
  std::vector<std::uint64_t> allocs;  // empty: powers of two from 1 to N
  std::optional<std::uint64_t> chunk;
  ModelDims dims;
  std::size_t vocab = 256;
  std::size_t prompt_len = 1;
  std::optional<std::size_t> steps;  // default: fill the context
  std::size_t reps = 1;
  SpeculationConfig spec;
  std::uint64_t seed = 0;
  double cprime = 0.1;
  double beta_c = 1e9;  // MAC/s used to put model_time_s in seconds

  std::size_t decode_steps() const {
    return steps.value_or(dims.max_context + 1 - prompt_len);
  }

  nlohmann::json to_json() const {
    return {{"policies", policies},
            {"allocs", allocs},
            {"chunk", chunk ? nlohmann::json(*chunk) : nlohmann::json(nullptr)},
            {"dims", dims_to_json(dims)},
            {"vocab", vocab},
            {"prompt_len", prompt_len},
            {"steps", decode_steps()},
            {"reps", reps},
            {"spec", spec.to_string()},
            {"seed", seed},
            {"cprime", cprime},
            {"beta_c", beta_c}};
  }
};

// Deterministic prompts of `len` tokens per lane.
inline std::vector<std::vector<TokenId>> make_prompts(std::size_t batch, std::size_t len,
                                                      std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab - 1));
  std::vector<std::vector<TokenId>> prompts(batch, std::vector<TokenId>(len));
  for (auto& p : prompts) {
    for (auto& t : p) t = pick(rng);
  }
  return prompts;
}

struct SweepOutcome {
  SweepReport report;
  std::optional<std::string> error;  // first invalid point; earlier points are kept
};

// Analytical parameters for a sweep: unit C' scaled to the run's shape.
inline CostParams sweep_params(const SweepSpec& s) {
  CostParams p = CostParams::from_cprime(s.dims.max_context, s.cprime);
  p.c1 = static_cast<double>(s.dims.batch * s.dims.layers * s.dims.hidden());
  p.beta_c = s.beta_c;
  p.beta_prime_c = s.beta_c;
  p.alpha_bw = 2.0 * s.cprime * s.beta_c;
  return p;
}

// Runs every (policy, T) point of the sweep. Points are evaluated in order;
// the first invalid one stops the sweep and is reported in `error`.
inline SweepOutcome cmd_sweep(const SweepSpec& s) {
  SweepOutcome outcome;
  outcome.report.config = s.to_json();
  s.dims.validate();
  if (s.reps == 0) throw BoundsError("repetitions must be >= 1");
  const std::uint64_t n = s.dims.max_context;
  const std::size_t steps = s.decode_steps();
  const auto model = ToyModel::create(s.dims, s.vocab, s.seed);
  const auto prompts = make_prompts(s.dims.batch, s.prompt_len, s.vocab, s.seed);
  const CostParams params = sweep_params(s);

  struct Point {
    AllocationPolicy policy;
    std::uint64_t T, r;
  };
  std::vector<Point> points;
  std::optional<std::string> invalid;
  for (const auto& name : s.policies) {
    if (name == "iterative") {
      points.push_back({policy::Iterative{}, n, 1});
    } else if (name == "upfront") {
      points.push_back({policy::Upfront{}, 1, n});
    } else if (name == "bmc") {
      if (s.chunk) {
        const auto r = *s.chunk;
        if (r == 0 || r > n) {
          invalid = "invalid point bmc r=" + std::to_string(r) + ": chunk must lie in [1, " + std::to_string(n) + "]";
          break;
        }
        points.push_back({policy::Bmc{r}, (n + r - 1) / r, r});
        continue;
      }
      std::vector<std::uint64_t> ts = s.allocs;
      if (ts.empty()) {
        for (std::uint64_t t = 1; t <= n; t *= 2) ts.push_back(t);
      }
      for (auto t : ts) {
        if (t == 0 || t > n || n % t != 0) {
          invalid = "invalid point bmc T=" + std::to_string(t) + ": T must divide N=" + std::to_string(n);
          break;
        }
        points.push_back({policy::Bmc{n / t}, t, n / t});
      }
      if (invalid) break;
    } else {
      invalid = "unknown policy '" + name + "'";
      break;
    }
  }

  std::optional<std::vector<std::vector<TokenId>>> reference;
  for (const auto& pt : points) {
    std::vector<double> walls;
    std::optional<CostLedger> ledger;
    double mean_accept = 1.0;
    for (std::size_t rep = 0; rep < s.reps; ++rep) {
      DecodeReport rr;
      if (s.spec.kind != SpeculationConfig::Kind::Off && is_bmc(pt.policy)) {
        if (s.spec.kind == SpeculationConfig::Kind::Self) {
          SelfDraftProposer prop(s.spec.value);
          rr = generate_speculative(model, pt.policy, prompts, steps, prop, s.seed);
        } else {
          if (!reference) reference = generate(model, policy::Upfront{}, prompts, steps, s.seed).tokens;
          const std::size_t k = s.spec.tree_size ? s.spec.tree_size : s.spec.value + 2;
          ScriptedProposer prop(s.spec.value, k, *reference, s.vocab);
          rr = generate_speculative(model, pt.policy, prompts, steps, prop, s.seed);
        }
        mean_accept = static_cast<double>(steps) / static_cast<double>(std::max<std::size_t>(rr.per_iteration.size(), 1));
      } else {
        rr = generate(model, pt.policy, prompts, steps, s.seed);
      }
      if (ledger && !(*ledger == rr.ledger)) throw Error("ledger changed between repetitions");
      ledger = rr.ledger;
      walls.push_back(rr.wall_s);
    }
    SweepPoint row;
    row.policy = policy_name(pt.policy);
    row.T = pt.T;
    row.r = pt.r;
    row.wall_s = detail::median(walls);
    row.copy_elems = ledger->realloc_copy_elems;
    row.append_elems = ledger->append_write_elems;
    row.sdpa_macs = ledger->sdpa_macs;
    row.alloc_events = ledger->alloc_events;
    row.tokens_per_s = row.wall_s > 0.0 ? static_cast<double>(steps * s.dims.batch) / row.wall_s : 0.0;
    if (mean_accept > 1.0) {
      CostParams sd = params;
      sd.m = mean_accept;
      sd.k = std::max(mean_accept, static_cast<double>(s.spec.kind == SpeculationConfig::Kind::Self
                                                          ? s.spec.value + 1
                                                          : (s.spec.tree_size ? s.spec.tree_size : s.spec.value + 2)));
      row.model_time_s = total_time_sd(static_cast<double>(pt.T), sd);
    } else {
      row.model_time_s = total_time(static_cast<double>(pt.T), params);
    }
    outcome.report.points.push_back(row);
  }
  outcome.error = invalid;
  return outcome;
}

}  // namespace bmc

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "bmc/errors.hpp"

namespace bmc {

// Constants of the analytical decode-time model.
//
// Copy traffic is modelled in bytes: a chunk reallocation at index i moves
// 2 * elem_bytes * c1 * (i+1) * r bytes (K and V). Attention work is in MACs.
// alpha_bw_norm() folds the byte width and the GQA/quantisation divisor into
// one effective rate so the summed model reads
//   2*c1*N*(T+1)/alpha' + T*c0 + c1*N^2*(1 + 1/T)/beta_c.
// With elem_bytes == 2 (fp16) and groups == quant == 1, alpha' == alpha_bw.
struct CostParams {
  double c1 = 1.0;            // B * L * D
  double alpha_bw = 1.0;      // achieved copy bandwidth, bytes/s
  double beta_c = 1.0;        // achieved attention MAC rate, MAC/s
  double c0 = 0.0;            // fixed cost per allocation, s
  double elem_bytes = 2.0;
  std::uint64_t n = 1;        // max context
  double k = 1.0;             // speculative candidates per iteration
  double m = 1.0;             // mean accepted tokens per iteration
  double beta_prime_c = 1.0;  // MAC rate of the batched verification GEMM
  double groups = 1.0;        // query heads per KV head
  double quant = 1.0;         // KV compression factor

  double alpha_bw_norm() const noexcept { return 2.0 * alpha_bw * groups * quant / elem_bytes; }

  // T* = sqrt(C' * N).
  double cprime() const noexcept { return alpha_bw_norm() / (2.0 * beta_c); }

  void validate() const {
    auto positive = [](double x) { return std::isfinite(x) && x > 0.0; };
    if (!positive(c1) || !positive(alpha_bw) || !positive(beta_c) || !positive(beta_prime_c) ||
        !positive(elem_bytes)) {
      throw BoundsError("cost model scales and rates must be strictly positive");
    }
    if (!(c0 >= 0.0) || n == 0) throw BoundsError("c0 must be >= 0 and N >= 1");
    if (!(m >= 1.0) || !(k >= m)) throw BoundsError("speculation needs 1 <= m <= k");
    if (!(quant >= 1.0) || !(groups >= 1.0)) throw BoundsError("groups and quant must be >= 1");
  }

  // Unit-scale parameters (c1 = 1, beta_c = 1, fp16) with the given C'.
  static CostParams from_cprime(std::uint64_t n, double cprime) {
    CostParams p;
    p.n = n;
    p.alpha_bw = 2.0 * cprime;
    p.beta_prime_c = p.beta_c;
    return p;
  }
};

// KV copy time when the i-th chunk reallocation builds (i+1)*r rows.
// Charges all (i+1)*r rows, not just the i*r that hold data.
inline double chunk_copy_time(std::uint64_t i, std::uint64_t r, const CostParams& p) {
  return 2.0 * p.elem_bytes * p.c1 * static_cast<double>((i + 1) * r) /
         (p.alpha_bw * p.groups * p.quant);
}

// Attention time of one decode step while the buffer holds (i+1)*r rows.
inline double sdpa_time(std::uint64_t i, std::uint64_t r, const CostParams& p) {
  return 2.0 * p.c1 * static_cast<double>((i + 1) * r) / p.beta_c;
}

// Time of the r steps served by chunk i: one copy, one allocation, r steps.
inline double chunk_time(std::uint64_t i, std::uint64_t r, const CostParams& p) {
  return chunk_copy_time(i, r, p) + p.c0 + static_cast<double>(r) * sdpa_time(i, r, p);
}

// Closed-form decode time for N steps with T allocations.
inline double total_time(double t, const CostParams& p) {
  const double n = static_cast<double>(p.n);
  const double a = p.alpha_bw_norm();
  return 2.0 * p.c1 * n * t / a + 2.0 * p.c1 * n / a + t * p.c0 + p.c1 * n * n / p.beta_c +
         p.c1 * n * n / (p.beta_c * t);
}

// Explicit sum of chunk_time over T chunks; needs T | N.
inline double chunk_sum_time(std::uint64_t t, const CostParams& p) {
  if (t == 0 || p.n % t != 0) {
    throw DivisibilityError("T=" + std::to_string(t) + " does not divide N=" + std::to_string(p.n));
  }
  const std::uint64_t r = p.n / t;
  double sum = 0.0;
  for (std::uint64_t i = 0; i < t; ++i) sum += chunk_time(i, r, p);
  return sum;
}

// Decode time with speculative verification of k candidates per step and m
// accepted on average.
inline double total_time_sd(double t, const CostParams& p) {
  const double n = static_cast<double>(p.n);
  const double a = p.alpha_bw_norm();
  return 2.0 * p.c1 * n * (t + 1.0) / a + t * p.c0 +
         p.c1 * p.k * (n * n / p.m) * (1.0 + 1.0 / t) / p.beta_prime_c;
}

struct OptimalT {
  double continuous = 1.0;
  std::uint64_t rounded = 1;
};

// Nearest power of two to sqrt(square) in log space, clamped to [1, n].
// Works on the square so the geometric midpoint 2^k * sqrt(2) is an exact
// comparison; ties go up.
inline std::uint64_t round_pow2_from_square(double square, std::uint64_t n) {
  std::uint64_t result = 1;
  if (square >= 1.0) {
    double p = 1.0;
    while (4.0 * p * p <= square) p *= 2.0;
    const double pick = square >= 2.0 * p * p ? 2.0 * p : p;
    result = pick >= static_cast<double>(n) ? n : static_cast<std::uint64_t>(pick);
  }
  return result < 1 ? 1 : result;
}

// Smallest integer T in [1, n] minimising f.
template <typename F>
std::uint64_t integer_argmin(F&& f, std::uint64_t n) {
  std::uint64_t best = 1;
  double best_val = f(1.0);
  for (std::uint64_t t = 2; t <= n; ++t) {
    const double v = f(static_cast<double>(t));
    if (v < best_val) {
      best_val = v;
      best = t;
    }
  }
  return best;
}

// Stationary point of total_time with c0 ignored: sqrt(N * alpha' / (2 beta_c)).
// With c0 > 0 the closed form no longer holds and the integer argmin is used.
inline OptimalT optimal_T(const CostParams& p) {
  p.validate();
  OptimalT out;
  if (p.c0 > 0.0) {
    const auto best = integer_argmin([&](double t) { return total_time(t, p); }, p.n);
    out.continuous = static_cast<double>(best);
    out.rounded = round_pow2_from_square(out.continuous * out.continuous, p.n);
    return out;
  }
  const double square = static_cast<double>(p.n) * p.alpha_bw_norm() / (2.0 * p.beta_c);
  out.continuous = std::sqrt(square);
  out.rounded = round_pow2_from_square(square, p.n);
  return out;
}

// Speculative variant: sqrt(N * k * alpha' / (2 * m * beta_prime_c)).
inline OptimalT optimal_T_sd(const CostParams& p) {
  p.validate();
  OptimalT out;
  if (p.c0 > 0.0) {
    const auto best = integer_argmin([&](double t) { return total_time_sd(t, p); }, p.n);
    out.continuous = static_cast<double>(best);
    out.rounded = round_pow2_from_square(out.continuous * out.continuous, p.n);
    return out;
  }
  const double square =
      static_cast<double>(p.n) * p.k * p.alpha_bw_norm() / (2.0 * p.m * p.beta_prime_c);
  out.continuous = std::sqrt(square);
  out.rounded = round_pow2_from_square(square, p.n);
  return out;
}

struct Calibration {
  double alpha_bw = 0.0;  // bytes/s
  double beta_c = 0.0;    // MAC/s
  double cprime = 0.0;
};

// Installs measured rates into `p` and reports the derived C'.
inline Calibration calibrate(double measured_copy_bw, double measured_mac_rate, CostParams& p) {
  if (!std::isfinite(measured_copy_bw) || !(measured_copy_bw > 0.0) ||
      !std::isfinite(measured_mac_rate) || !(measured_mac_rate > 0.0)) {
    throw CalibrationError("calibration measurements must be positive and finite");
  }
  p.alpha_bw = measured_copy_bw;
  p.beta_c = measured_mac_rate;
  return {p.alpha_bw, p.beta_c, p.cprime()};
}

}  // namespace bmc

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gdnsq/quantizer.hpp"
#include "gdnsq/rng.hpp"

namespace gdnsq {

// Outcome of one oracle check. passed == (|statistic - expected| <= tolerance)
// unless the check is inconclusive (degenerate input), in which case passed is
// false but the check is not counted as a failure.
struct OracleReport {
  std::string name;
  std::size_t trials = 0;
  double statistic = 0.0;
  double expected = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  bool inconclusive = false;
  std::string details;

  bool failed() const { return !passed && !inconclusive; }
  // "PASS name statistic=... expected=... tol=... trials=... details"
  std::string line() const;
};

OracleReport make_report(std::string name, std::size_t trials, double statistic, double expected, double tolerance,
                         std::string details = {});

// Monte-Carlo check that E round(x + d) - E round(x - d) = 2d for x uniform on
// [l, u) with integer l < u and 0 < d < 1/2 (fd_delta). Also reports the two
// component means against (l + u)/2 +- d. Throws DomainError outside the
// hypotheses.
std::vector<OracleReport> lemma_fd_round(long l, long u, double fd_delta, std::size_t m, std::uint64_t seed);

// Moments of the rounding residual r(q(x)) of `fq` for inputs drawn from
// `sample`: mean 0 within 4 sigma/sqrt(m) and variance 1/12 within 2%.
std::vector<OracleReport> noise_uniformity(const FakeQuantizer& fq, const std::function<double(Rng&)>& sample,
                                           std::size_t m, std::uint64_t seed, const std::string& label = "input");

// Sum over bits of J(Q(b_j), Q(b~_j)) for a binary asymmetric channel equals
// jeffreys_delta * hamming(b, b~). p0 = P(1 | 0), p1 = P(0 | 1).
std::vector<OracleReport> jeffreys_hamming(double p0, double p1, std::size_t n, std::size_t trials,
                                           std::uint64_t seed);

// Binary symmetric channel identities J = 2 KL and J = 2 H(Q0, Q1) - 2 H(Q0).
std::vector<OracleReport> bsc_reduction(double p);

// Clamp-path gradients (x, l, u) against central differences away from kinks,
// and exact equality of the full fake-quant x-gradient with the clamp-only one.
std::vector<OracleReport> ste_gradient_check(std::size_t trials, std::uint64_t seed);

// Autodiff against central differences for every parameter of randomly built
// networks (dense, conv, batch norm, softplus, exp/log, relu, log-softmax).
std::vector<OracleReport> graph_gradient_check(std::size_t models, std::uint64_t seed);

// Variance of batch means of the variance-matched Bernoulli proxy against
// (1/12)/m, plus a variance-ratio comparison with uniform residuals.
std::vector<OracleReport> bernoulli_clt_check(std::size_t m, std::size_t trials, std::uint64_t seed);

// bitwidth() after set_range(l, u, omega) returns omega, and dense sweeps over
// [l, u] hit exactly 2^omega integer levels.
std::vector<OracleReport> bitwidth_algebra(std::size_t trials, std::uint64_t seed);

// The full default suite; `filter` keeps reports whose name contains it.
std::vector<OracleReport> run_oracle_suite(const std::string& filter = {}, std::uint64_t seed = 20240601);

}  // namespace gdnsq

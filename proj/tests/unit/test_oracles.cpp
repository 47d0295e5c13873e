#include <gtest/gtest.h>

#include <cmath>

#include "gdnsq/errors.hpp"
#include "gdnsq/oracles.hpp"

namespace gdnsq {
namespace {

const OracleReport& find(const std::vector<OracleReport>& reports, const std::string& fragment) {
  for (const auto& r : reports) {
    if (r.name.find(fragment) != std::string::npos) return r;
  }
  throw std::runtime_error("no report named like " + fragment);
}

void expect_all_pass(const std::vector<OracleReport>& reports) {
  ASSERT_FALSE(reports.empty());
  for (const auto& r : reports) EXPECT_TRUE(r.passed) << r.line();
}

TEST(OracleReport, PassedMatchesTolerance) {
  EXPECT_TRUE(make_report("a", 1, 1.0, 1.05, 0.1).passed);
  EXPECT_FALSE(make_report("a", 1, 1.0, 1.2, 0.1).passed);
  EXPECT_TRUE(make_report("edge", 1, 1.0, 1.5, 0.5).passed);
  auto r = make_report("n", 10, 0.0, 1.0, 0.1, "note");
  EXPECT_TRUE(r.failed());
  EXPECT_EQ(r.line().rfind("FAIL n", 0), 0u);
  EXPECT_NE(r.line().find("note"), std::string::npos);
}

TEST(OracleReport, InvariantHoldsAcrossSuite) {
  for (const auto& r : run_oracle_suite()) {
    if (r.inconclusive) continue;
    EXPECT_EQ(r.passed, std::abs(r.statistic - r.expected) <= r.tolerance) << r.line();
  }
}

TEST(LemmaFdRound, CentredDifferenceVanishes) {
  auto reports = lemma_fd_round(0, 4, 0.25, 1000000, 1);
  expect_all_pass(reports);
  bool found_component = false;
  for (const auto& r : reports) {
    if (std::abs(r.expected - 2.25) < 1e-15) found_component = true;
  }
  EXPECT_TRUE(found_component);
  expect_all_pass(lemma_fd_round(-3, 5, 0.49, 200000, 2));
}

TEST(LemmaFdRound, HypothesesEnforced) {
  EXPECT_THROW(lemma_fd_round(0, 4, 0.5, 10, 1), DomainError);
  EXPECT_THROW(lemma_fd_round(0, 4, 0.0, 10, 1), DomainError);
  EXPECT_THROW(lemma_fd_round(4, 4, 0.2, 10, 1), DomainError);
}

TEST(NoiseUniformity, GaussianThroughFourBits) {
  FakeQuantizer fq(SiteKind::activation, BoundsMode::free);
  fq.set_range(-3.0, 3.0, 4.0);
  expect_all_pass(noise_uniformity(fq, [](Rng& r) { return r.normal(); }, 100000, 3, "gaussian"));
}

TEST(NoiseUniformity, OnGridInputIsInconclusive) {
  FakeQuantizer fq(SiteKind::activation, BoundsMode::free);
  fq.set_range(0.0, 3.0, 2.0);
  auto reports = noise_uniformity(fq, [](Rng& r) { return static_cast<double>(r.index(4)); }, 1000, 1, "grid");
  bool inconclusive = false;
  for (const auto& r : reports) {
    EXPECT_FALSE(r.failed()) << r.line();
    inconclusive = inconclusive || r.inconclusive;
  }
  EXPECT_TRUE(inconclusive);
}

TEST(JeffreysHamming, ProportionalToHammingDistance) {
  auto reports = jeffreys_hamming(0.1, 0.1, 1, 1, 5);
  expect_all_pass(reports);
  expect_all_pass(jeffreys_hamming(0.2, 0.05, 64, 1000, 6));
  EXPECT_THROW(jeffreys_hamming(0.0, 0.1, 8, 1, 1), DomainError);
  EXPECT_THROW(jeffreys_hamming(0.1, 1.0, 8, 1, 1), DomainError);
}

TEST(BscReduction, Identities) {
  expect_all_pass(bsc_reduction(0.1));
  expect_all_pass(bsc_reduction(0.3));
  auto half = bsc_reduction(0.5);
  expect_all_pass(half);
  for (const auto& r : half) EXPECT_EQ(r.statistic, 0.0);
}

TEST(SteGradientCheck, Passes) { expect_all_pass(ste_gradient_check(200, 7)); }

TEST(GraphGradientCheck, Passes) { expect_all_pass(graph_gradient_check(3, 8)); }

TEST(BernoulliClt, BatchMeanVariance) {
  auto reports = bernoulli_clt_check(100, 10000, 9);
  expect_all_pass(reports);
  const auto& var = find(reports, "variance");
  EXPECT_NEAR(var.expected, 1.0 / 1200.0, 1e-15);
  auto single = bernoulli_clt_check(1, 10000, 10);
  EXPECT_NEAR(find(single, "variance").expected, 1.0 / 12.0, 1e-15);
}

TEST(BitwidthAlgebra, Passes) { expect_all_pass(bitwidth_algebra(100, 11)); }

TEST(Suite, DeterministicAndFilterable) {
  auto a = run_oracle_suite("bsc");
  auto b = run_oracle_suite("bsc");
  ASSERT_FALSE(a.empty());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NE(a[i].name.find("bsc"), std::string::npos);
    EXPECT_EQ(a[i].line(), b[i].line());
  }
  EXPECT_TRUE(run_oracle_suite("no-such-check").empty());
}

}  // namespace
}  // namespace gdnsq

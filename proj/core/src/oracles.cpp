#include "gdnsq/oracles.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "gdnsq/errors.hpp"
#include "gdnsq/losses.hpp"
#include "gdnsq/nn_ops.hpp"

namespace gdnsq {

namespace {

// Scalar arithmetic kept separate from the library's quantizer and loss code.
double ref_round(double v) { return std::floor(v + 0.5); }
double ref_clamp(double x, double l, double u) { return std::max(l, std::min(u, x)); }

double ref_kl(double p0, double p1, double q0, double q1) { return p0 * std::log(p0 / q0) + p1 * std::log(p1 / q1); }
double ref_cross_entropy(double p0, double p1, double q0, double q1) { return -(p0 * std::log(q0) + p1 * std::log(q1)); }

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // unbiased
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(v.size() - 1);
  return m;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace

std::string OracleReport::line() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s %s statistic=%.9g expected=%.9g tol=%.3g trials=%zu",
                inconclusive ? "INCONCLUSIVE" : (passed ? "PASS" : "FAIL"), name.c_str(), statistic, expected,
                tolerance, trials);
  std::string out = buf;
  if (!details.empty()) out += " (" + details + ")";
  return out;
}

OracleReport make_report(std::string name, std::size_t trials, double statistic, double expected, double tolerance,
                         std::string details) {
  OracleReport r;
  r.name = std::move(name);
  r.trials = trials;
  r.statistic = statistic;
  r.expected = expected;
  r.tolerance = tolerance;
  r.passed = std::abs(statistic - expected) <= tolerance;
  r.details = std::move(details);
  return r;
}

// ---- finite-difference rounding lemma -------------------------------------------

std::vector<OracleReport> lemma_fd_round(long l, long u, double fd_delta, std::size_t m, std::uint64_t seed) {
  if (!(fd_delta > 0.0 && fd_delta < 0.5)) {
    throw DomainError("lemma_fd_round: fd_delta must lie in (0, 1/2), got " + std::to_string(fd_delta));
  }
  if (l >= u) throw DomainError("lemma_fd_round: need integer l < u");
  if (m < 2) throw DomainError("lemma_fd_round: need at least two samples");
  Rng rng = Rng::derived(seed, 0x4c454d4d41ULL);
  double sum_plus = 0.0, sum_minus = 0.0, sum_diff = 0.0, sq_plus = 0.0, sq_minus = 0.0, sq_diff = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double x = rng.uniform(static_cast<double>(l), static_cast<double>(u));
    const double plus = ref_round(x + fd_delta);
    const double minus = ref_round(x - fd_delta);
    const double diff = plus - minus - 2.0 * fd_delta;
    sum_plus += plus;
    sum_minus += minus;
    sum_diff += diff;
    sq_plus += plus * plus;
    sq_minus += minus * minus;
    sq_diff += diff * diff;
  }
  const double n = static_cast<double>(m);
  auto sd = [n](double s, double sq) { return std::sqrt(std::max(0.0, (sq - s * s / n) / (n - 1.0))); };
  const double mid = 0.5 * static_cast<double>(l + u);
  char label[96];
  std::snprintf(label, sizeof label, "[l=%ld,u=%ld,fd_delta=%g]", l, u, fd_delta);
  std::vector<OracleReport> out;
  out.push_back(make_report(std::string("lemma_fd_round") + label, m, sum_diff / n, 0.0,
                            4.0 * sd(sum_diff, sq_diff) / std::sqrt(n), "V = E round(x+d) - E round(x-d) - 2d"));
  out.push_back(make_report(std::string("lemma_fd_round.mean_plus") + label, m, sum_plus / n, mid + fd_delta,
                            4.0 * sd(sum_plus, sq_plus) / std::sqrt(n), "E round(x+d) = (l+u)/2 + d"));
  out.push_back(make_report(std::string("lemma_fd_round.mean_minus") + label, m, sum_minus / n, mid - fd_delta,
                            4.0 * sd(sum_minus, sq_minus) / std::sqrt(n), "E round(x-d) = (l+u)/2 - d"));
  return out;
}

// ---- residual moments -------------------------------------------------------------

std::vector<OracleReport> noise_uniformity(const FakeQuantizer& fq, const std::function<double(Rng&)>& sample,
                                           std::size_t m, std::uint64_t seed, const std::string& label) {
  if (m < 2) throw DomainError("noise_uniformity: need at least two samples");
  Rng rng = Rng::derived(seed, 0x554e49464fULL);
  std::vector<double> x(m);
  for (auto& v : x) v = sample(rng);
  Tensor out;
  {
    NoGradGuard no_grad;
    out = fq.forward(Tensor::from(x, {m}), nullptr);
  }
  const double l = fq.lower_value(), u = fq.upper_value(), s = fq.scale_value();
  std::vector<double> r(m);
  for (std::size_t i = 0; i < m; ++i) r[i] = (out[i] - ref_clamp(x[i], l, u)) / s;
  const Moments mo = moments(r);
  const double n = static_cast<double>(m);
  const std::string base = "noise_uniformity[" + label + "]";
  auto mean_report = make_report(base + ".mean", m, mo.mean, 0.0, 4.0 * std::sqrt(1.0 / 12.0 / n));
  auto var_report = make_report(base + ".variance", m, mo.var, 1.0 / 12.0, 0.02 / 12.0, "relative 2%");
  if (mo.var < 1e-18) {
    for (auto* rep : {&mean_report, &var_report}) {
      rep->passed = false;
      rep->inconclusive = true;
      rep->details = "degenerate input: every residual is zero";
    }
  }
  return {mean_report, var_report};
}

// ---- Jeffreys divergence on binary channels -------------------------------------------

std::vector<OracleReport> jeffreys_hamming(double p0, double p1, std::size_t n, std::size_t trials,
                                           std::uint64_t seed) {
  if (!(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0)) {
    throw DomainError("jeffreys_hamming: channel probabilities must lie in (0, 1)");
  }
  // Q(0) = (1 - p0, p0), Q(1) = (p1, 1 - p1) over the observed bit.
  const double jeffreys_delta = ref_kl(1 - p0, p0, p1, 1 - p1) + ref_kl(p1, 1 - p1, 1 - p0, p0);
  const Distribution q0({1 - p0, p0}), q1({p1, 1 - p1});
  const Distribution* q[2] = {&q0, &q1};
  Rng rng = Rng::derived(seed, 0x4a45464652ULL);
  double worst = 0.0;
  double worst_identical = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    double total = 0.0, same = 0.0;
    std::size_t hamming = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const int b = rng.coin() ? 1 : 0;
      const int bt = rng.coin() ? 1 : 0;
      total += jeffreys(*q[b], *q[bt]);
      same += jeffreys(*q[b], *q[b]);
      hamming += b != bt ? 1 : 0;
    }
    worst = std::max(worst, std::abs(total - jeffreys_delta * static_cast<double>(hamming)));
    worst_identical = std::max(worst_identical, std::abs(same));
  }
  char label[80];
  std::snprintf(label, sizeof label, "[p0=%g,p1=%g,n=%zu]", p0, p1, n);
  std::vector<OracleReport> out;
  out.push_back(make_report(std::string("jeffreys_hamming") + label, trials, worst, 0.0, 1e-9,
                            "max |sum J - jeffreys_delta * d_H|, jeffreys_delta=" + fmt("%.12g", jeffreys_delta)));
  out.push_back(make_report(std::string("jeffreys_hamming.b1_constant") + label, 1, jeffreys(q1, q0), jeffreys_delta,
                            1e-9, "J(Q(1), Q(0)) equals J(Q(0), Q(1))"));
  out.push_back(make_report(std::string("jeffreys_hamming.identical") + label, trials, worst_identical, 0.0, 1e-9,
                            "b == b~ gives zero"));
  return out;
}

std::vector<OracleReport> bsc_reduction(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("bsc_reduction: p must lie in (0, 1)");
  char label[40];
  std::snprintf(label, sizeof label, "[p=%g]", p);
  const Distribution q0({1 - p, p}), q1({p, 1 - p});
  const double j = jeffreys(q0, q1);
  if (p == 0.5) {
    auto r = make_report(std::string("bsc_reduction") + label, 1, j, 0.0, 1e-12, "identical distributions, J = 0");
    return {r};
  }
  const double kl01 = ref_kl(1 - p, p, p, 1 - p);
  const double ce = ref_cross_entropy(1 - p, p, p, 1 - p);
  const double h = ref_cross_entropy(1 - p, p, 1 - p, p);
  return {make_report(std::string("bsc_reduction.kl") + label, 1, j, 2.0 * kl01, 1e-12, "J = 2 KL"),
          make_report(std::string("bsc_reduction.cross_entropy") + label, 1, j, 2.0 * ce - 2.0 * h, 1e-12,
                      "J = 2 H(Q0, Q1) - 2 H(Q0)")};
}

// ---- straight-through gradients ---------------------------------------------------

std::vector<OracleReport> ste_gradient_check(std::size_t trials, std::uint64_t seed) {
  constexpr double kKink = 1e-3;
  constexpr double h = 1e-6;
  constexpr std::size_t n = 64;
  Rng rng = Rng::derived(seed, 0x535445ULL);
  double err_x = 0.0, err_l = 0.0, err_u = 0.0, noise_x = 0.0, full_vs_clamp = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const double l = rng.uniform(-2.0, 0.0);
    const double u = l + rng.uniform(0.5, 3.0);
    std::vector<double> x(n);
    for (auto& v : x) {
      do {
        v = rng.uniform(l - 1.0, u + 1.0);
      } while (std::abs(v - l) < kKink || std::abs(v - u) < kKink);
    }
    const auto w = random_vector(rng, n);

    Tensor X = Tensor::from(x, {n}, true);
    Tensor L = Tensor::scalar(l, true), U = Tensor::scalar(u, true);
    Tensor W = Tensor::from(w, {n});
    sum(mul(clamp(X, L, U), W)).backward();

    auto f = [&](double dx_index_shift, std::size_t idx, double dl, double du) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += w[i] * ref_clamp(x[i] + (i == idx ? dx_index_shift : 0.0), l + dl, u + du);
      return s;
    };
    for (std::size_t i = 0; i < n; ++i) {
      const double fd = (f(h, i, 0, 0) - f(-h, i, 0, 0)) / (2 * h);
      err_x = std::max(err_x, std::abs(X.grad()[i] - fd));
    }
    err_l = std::max(err_l, std::abs(L.grad()[0] - (f(0, n, h, 0) - f(0, n, -h, 0)) / (2 * h)));
    err_u = std::max(err_u, std::abs(U.grad()[0] - (f(0, n, 0, h) - f(0, n, 0, -h)) / (2 * h)));

    // full fake quantizer versus its clamp path alone
    FakeQuantizer fq(SiteKind::weight, BoundsMode::free, NoiseMode::bernoulli);
    fq.set_range(l, u, 1.0 + static_cast<double>(t % 8));
    Rng noise_rng = Rng::derived(seed, t);
    Tensor X1 = Tensor::from(x, {n}, true);
    sum(mul(fq.forward(X1, &noise_rng), W)).backward();
    Tensor X2 = Tensor::from(x, {n}, true);
    sum(mul(clamp(X2, fq.lower(), fq.upper()), W)).backward();
    Tensor X3 = Tensor::from(x, {n}, true);
    sum(mul(sub(fq.forward(X3, &noise_rng), clamp(X3, fq.lower(), fq.upper())), W)).backward();
    for (std::size_t i = 0; i < n; ++i) {
      full_vs_clamp = std::max(full_vs_clamp, std::abs(X1.grad()[i] - X2.grad()[i]));
      noise_x = std::max(noise_x, std::abs(X3.grad()[i]));
    }
  }
  return {make_report("ste_gradient_check.clamp_x", trials, err_x, 0.0, 1e-6, "max abs error vs central difference"),
          make_report("ste_gradient_check.clamp_lower", trials, err_l, 0.0, 1e-6, "max abs error vs central difference"),
          make_report("ste_gradient_check.clamp_upper", trials, err_u, 0.0, 1e-6, "max abs error vs central difference"),
          make_report("ste_gradient_check.noise_x_zero", trials, noise_x, 0.0, 0.0, "max |d(s r)/dx|"),
          make_report("ste_gradient_check.full_equals_clamp", trials, full_vs_clamp, 0.0, 0.0,
                      "max |dD/dx - dclamp/dx|")};
}

// ---- whole-graph gradients --------------------------------------------------------

std::vector<OracleReport> graph_gradient_check(std::size_t models, std::uint64_t seed) {
  constexpr double h = 1e-5;
  constexpr double kFloor = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  std::string worst_where;
  for (std::size_t mi = 0; mi < models; ++mi) {
    Rng rng = Rng::derived(seed, 0x47524144ULL + mi);
    const std::size_t kind = mi % 3;
    std::vector<Tensor> leaves;
    std::function<Tensor()> build;
    if (kind == 0) {
      // dense -> softplus -> dense -> batch norm -> relu -> log-softmax
      const std::size_t b = 3 + rng.index(4), d = 2 + rng.index(4), hdim = 2 + rng.index(5), c = 2 + rng.index(3);
      Tensor x = Tensor::from(random_vector(rng, b * d), {b, d}, true);
      Tensor w1 = Tensor::from(random_vector(rng, d * hdim, 0.7), {d, hdim}, true);
      Tensor b1 = Tensor::from(random_vector(rng, hdim, 0.1), {hdim}, true);
      Tensor w2 = Tensor::from(random_vector(rng, hdim * c, 0.7), {hdim, c}, true);
      Tensor gamma = Tensor::from(random_vector(rng, c, 0.3), {c}, true);
      Tensor beta = Tensor::from(random_vector(rng, c, 0.3), {c}, true);
      Tensor r = Tensor::from(random_vector(rng, b * c), {b, c});
      for (std::size_t i = 0; i < c; ++i) gamma.mutable_data()[i] += 1.0;
      leaves = {x, w1, b1, w2, gamma, beta};
      build = [=] {
        Tensor hdn = softplus(add_bias(matmul(x, w1), b1));
        Tensor y = relu(batch_norm_train(matmul(hdn, w2), gamma, beta, 1e-5, nullptr));
        return sum(mul(log_softmax(y), r));
      };
    } else if (kind == 1) {
      // conv via im2col -> bias -> relu -> reshape -> mean
      const std::size_t b = 2, hw = 3 + rng.index(3), cin = 1 + rng.index(2), cout = 2 + rng.index(2);
      const std::size_t stride = 1 + rng.index(2);
      Tensor x = Tensor::from(random_vector(rng, b * hw * hw * cin), {b, hw, hw, cin}, true);
      Tensor w = Tensor::from(random_vector(rng, 9 * cin * cout, 0.5), {9 * cin, cout}, true);
      Tensor bias = Tensor::from(random_vector(rng, cout, 0.1), {cout}, true);
      const std::size_t oh = conv_out_size(hw, 3, stride, 1);
      Tensor r = Tensor::from(random_vector(rng, b * oh * oh * cout), {b, oh, oh, cout});
      leaves = {x, w, bias};
      build = [=] {
        Tensor y = relu(add_bias(matmul(im2col(x, 3, stride, 1), w), bias));
        return mean(mul(reshape(y, {b, oh, oh, cout}), r));
      };
    } else {
      // elementwise algebra: exp, log, maximum/minimum, scalar ops
      const std::size_t n = 3 + rng.index(6);
      Tensor a = Tensor::from(random_vector(rng, n), {n}, true);
      Tensor bnd = Tensor::scalar(rng.normal(), true);
      Tensor c = Tensor::from(random_vector(rng, n), {n}, true);
      leaves = {a, bnd, c};
      build = [=] {
        Tensor e = log(add(exp(mul(a, 0.5)), 1.0));
        Tensor m = minimum(maximum(c, bnd), add(bnd, 1.5));
        return sum(sub(mul(e, m), mul(neg(a), 0.25))) * 0.5;
      };
    }
    for (auto& leaf : leaves) leaf.zero_grad();
    build().backward();
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      auto& leaf = leaves[li];
      const auto analytic = std::vector<double>(leaf.grad().begin(), leaf.grad().end());
      for (std::size_t i = 0; i < leaf.numel(); ++i) {
        NoGradGuard no_grad;
        const double v = leaf[i];
        leaf.mutable_data()[i] = v + h;
        const double fp = build().item();
        leaf.mutable_data()[i] = v - h;
        const double fm = build().item();
        leaf.mutable_data()[i] = v;
        const double numeric = (fp - fm) / (2 * h);
        const double rel =
            std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), kFloor});
        ++checked;
        if (rel > worst) {
          worst = rel;
          worst_where = "model " + std::to_string(mi) + " leaf " + std::to_string(li) + " element " + std::to_string(i);
        }
      }
    }
  }
  return {make_report("graph_gradient_check", models, worst, 0.0, 1e-4,
                      "max relative error over " + std::to_string(checked) + " coordinates" +
                          (worst_where.empty() ? "" : ", worst at " + worst_where))};
}

// ---- mini-batch noise ------------------------------------------------------------

std::vector<OracleReport> bernoulli_clt_check(std::size_t m, std::size_t trials, std::uint64_t seed) {
  if (m == 0 || trials < 2) throw DomainError("bernoulli_clt_check: need m >= 1 and at least two trials");
  Rng rng = Rng::derived(seed, 0x434c54ULL + m);
  std::vector<double> proxy(trials), uniform(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    double sp = 0.0, su = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      sp += sample_scale_gradient(NoiseMode::bernoulli_variance_matched, 0.0, rng);
      su += rng.uniform() - 0.5;
    }
    proxy[t] = sp / static_cast<double>(m);
    uniform[t] = su / static_cast<double>(m);
  }
  const Moments mp = moments(proxy), mu = moments(uniform);
  const double expected = 1.0 / 12.0 / static_cast<double>(m);
  const std::string label = "[m=" + std::to_string(m) + "]";
  return {make_report("bernoulli_clt_check.variance" + label, trials, mp.var, expected, 0.05 * expected,
                      "relative 5%"),
          make_report("bernoulli_clt_check.mean" + label, trials, mp.mean, 0.0,
                      4.0 * std::sqrt(expected / static_cast<double>(trials))),
          make_report("bernoulli_clt_check.uniform_ratio" + label, trials, mp.var / mu.var, 1.0, 0.1,
                      "var(proxy means) / var(uniform means)")};
}

// ---- bit-width algebra --------------------------------------------------------------

std::vector<OracleReport> bitwidth_algebra(std::size_t trials, std::uint64_t seed) {
  Rng rng = Rng::derived(seed, 0x4249545357ULL);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const double omega = rng.uniform(1.0, 16.0);
    const double l = rng.uniform(-10.0, 10.0);
    const double u = l + std::exp(rng.uniform(std::log(1e-3), std::log(1e3)));
    FakeQuantizer fq(SiteKind::weight, BoundsMode::free);
    fq.set_range(l, u, omega);
    // s := (u - l) / (2^omega - 1) must give back omega
    const double s = (u - l) / (std::exp2(omega) - 1.0);
    worst = std::max(worst, std::abs(fq.bitwidth_value() - omega));
    worst = std::max(worst, std::abs(fq.bitwidth().item() - omega));
    worst = std::max(worst, std::abs(std::log2((u - l) / s + 1.0) - omega));
  }
  std::vector<OracleReport> out;
  out.push_back(make_report("bitwidth_algebra.roundtrip", trials, worst, 0.0, 1e-12, "max |bitwidth() - omega|"));
  for (int omega : {1, 2, 3, 4, 8, 10}) {
    const double l = rng.uniform(-3.0, 0.0);
    const double u = l + rng.uniform(0.5, 4.0);
    FakeQuantizer fq(SiteKind::weight, BoundsMode::free);
    fq.set_range(l, u, omega);
    const std::size_t points = (std::size_t{1} << omega) * 64 + 1;
    std::vector<double> sweep(points);
    for (std::size_t i = 0; i < points; ++i) {
      sweep[i] = l + (u - l) * static_cast<double>(i) / static_cast<double>(points - 1);
    }
    const auto levels = fq.quantize_levels(sweep);
    const std::set<std::int64_t> distinct(levels.begin(), levels.end());
    out.push_back(make_report("bitwidth_algebra.levels[omega=" + std::to_string(omega) + "]", points,
                              static_cast<double>(distinct.size()), std::exp2(omega), 0.0,
                              "distinct levels on a dense sweep of [l, u]"));
  }
  return out;
}

// ---- suite ----------------------------------------------------------------------------

std::vector<OracleReport> run_oracle_suite(const std::string& filter, std::uint64_t seed) {
  std::vector<OracleReport> all;
  auto wanted = [&](const std::string& group) {
    return filter.empty() || group.find(filter) != std::string::npos || filter.find(group) != std::string::npos;
  };
  auto append = [&](std::vector<OracleReport> reports) {
    for (auto& r : reports) {
      const std::string group = r.name.substr(0, r.name.find_first_of(".["));
      if (filter.empty() || r.name.find(filter) != std::string::npos || group.find(filter) != std::string::npos) {
        all.push_back(std::move(r));
      }
    }
  };
  if (wanted("lemma_fd_round")) {
    append(lemma_fd_round(0, 4, 0.25, 1'000'000, seed));
    append(lemma_fd_round(-3, 2, 0.1, 1'000'000, seed));
    append(lemma_fd_round(0, 1, 0.49, 1'000'000, seed));
  }
  if (wanted("noise_uniformity")) {
    FakeQuantizer gauss(SiteKind::activation, BoundsMode::free, NoiseMode::bernoulli);
    gauss.set_range(-3.0, 3.0, 4.0);
    append(noise_uniformity(gauss, [](Rng& r) { return r.normal(); }, 100'000, seed, "gaussian,4bit,+-3sigma"));
    FakeQuantizer unit(SiteKind::activation, BoundsMode::free, NoiseMode::bernoulli);
    unit.set_range(-4.0, 4.0, 4.0);
    unit.set_scale(1.0);
    append(noise_uniformity(unit, [](Rng& r) { return r.uniform(-4.0, 4.0); }, 100'000, seed, "uniform,integer-range"));
  }
  if (wanted("jeffreys_hamming")) {
    append(jeffreys_hamming(0.1, 0.1, 64, 1000, seed));
    append(jeffreys_hamming(0.2, 0.05, 64, 1000, seed));
    append(jeffreys_hamming(0.4, 0.3, 64, 1000, seed));
  }
  if (wanted("bsc_reduction")) {
    append(bsc_reduction(0.1));
    append(bsc_reduction(0.3));
  }
  if (wanted("ste_gradient_check")) append(ste_gradient_check(200, seed));
  if (wanted("graph_gradient_check")) append(graph_gradient_check(100, seed));
  if (wanted("bernoulli_clt_check")) {
    append(bernoulli_clt_check(100, 20'000, seed));
    append(bernoulli_clt_check(1, 20'000, seed));
  }
  if (wanted("bitwidth_algebra")) append(bitwidth_algebra(1000, seed));
  return all;
}

}  // namespace gdnsq

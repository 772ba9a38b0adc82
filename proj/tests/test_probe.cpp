#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "probegeo/metrics.hpp"
#include "probegeo/probe.hpp"
#include "probegeo/synthgen.hpp"
#include "probegeo/transfer.hpp"

using namespace probegeo;

namespace {

double pairwise_auroc(const std::vector<double>& s, const std::vector<double>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] > 0 && y[j] < 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

struct Problem {
  Matrix x;
  Vector y;
};

Problem random_problem(std::uint64_t seed, Eigen::Index n, Eigen::Index d, double noise = 1.0) {
  auto rng = make_rng(seed, "test/problem");
  std::normal_distribution<double> normal;
  Problem p{Matrix(n, d), Vector(n)};
  Vector w(d);
  for (auto& v : w) v = normal(rng);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) p.x(i, j) = normal(rng) * (1.0 + j);
    p.y[i] = p.x.row(i).dot(w) + noise * normal(rng) > 0 ? 1.0 : -1.0;
  }
  p.y[0] = 1;
  p.y[1] = -1;
  return p;
}

template <typename F>
double max_rel_fd_error(F f, const Vector& w, double h = 1e-6) {
  Vector g;
  f(w, &g);
  double worst = 0;
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    Vector a = w, b = w;
    a[j] += h;
    b[j] -= h;
    const double fd = (f(a, nullptr) - f(b, nullptr)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g[j]) / std::max(1.0, std::abs(g[j])));
  }
  return worst;
}

LabeledSet synthetic_set(const SyntheticSpec& s) { return labeled(generate(s)); }

}  // namespace

TEST(Auroc, TrivialCases) {
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{2, 1}, std::vector<double>{1, -1}), 1.0);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{3, 3, 3, 3}, std::vector<double>{1, -1, 1, -1}), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<double>{1, 1}), DataError);
}

TEST(Auroc, MatchesPairwiseOracleWithTies) {
  std::mt19937_64 rng(42);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> s(30), y(30);
    for (int i = 0; i < 30; ++i) {
      s[i] = static_cast<double>(rng() % 7);  // plenty of ties
      y[i] = rng() % 2 ? 1.0 : -1.0;
    }
    y[0] = 1;
    y[1] = -1;
    EXPECT_NEAR(auroc(s, y), pairwise_auroc(s, y), 1e-12);
  }
}

TEST(Auroc, NegationAndMonotoneTransforms) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  std::vector<double> s(80), y(80), neg(80), affine(80), cubic(80);
  for (int i = 0; i < 80; ++i) {
    s[i] = normal(rng);
    y[i] = i % 3 ? 1.0 : -1.0;
    neg[i] = -s[i];
    affine[i] = 3 * s[i] + 7;
    cubic[i] = s[i] * s[i] * s[i];
  }
  EXPECT_NEAR(auroc(s, y) + auroc(neg, y), 1.0, 1e-12);
  EXPECT_NEAR(auroc(s, y), auroc(affine, y), 1e-12);
  EXPECT_NEAR(auroc(s, y), auroc(cubic, y), 1e-12);
}

TEST(FprRecall, Infinities) {
  const std::vector<double> s = {1, 2, 3, 4}, y = {1, -1, 1, -1};
  const auto hi = fpr_recall(s, y, std::numeric_limits<double>::infinity());
  EXPECT_EQ(hi.fpr, 0.0);
  EXPECT_EQ(hi.recall, 0.0);
  const auto lo = fpr_recall(s, y, -std::numeric_limits<double>::infinity());
  EXPECT_EQ(lo.fpr, 1.0);
  EXPECT_EQ(lo.recall, 1.0);
}

TEST(FprRecall, EightPointHandCase) {
  // Accepted at tau = 0.5: scores 0.9, 0.8 (pos), 0.7 (neg), 0.6 (pos); 0.5 is a tie and rejected.
  const std::vector<double> s = {0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2};
  const std::vector<double> y = {1, 1, -1, 1, -1, 1, -1, -1};
  const auto r = fpr_recall(s, y, 0.5);
  EXPECT_DOUBLE_EQ(r.fpr, 1.0 / 4.0);
  EXPECT_DOUBLE_EQ(r.recall, 3.0 / 4.0);
}

TEST(FprRecall, NonIncreasingInTau) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  std::vector<double> s(60), y(60);
  for (int i = 0; i < 60; ++i) {
    s[i] = normal(rng);
    y[i] = i % 2 ? 1.0 : -1.0;
  }
  FprRecall prev{1.0, 1.0};
  for (double tau = -3; tau <= 3; tau += 0.05) {
    const auto r = fpr_recall(s, y, tau);
    EXPECT_LE(r.fpr, prev.fpr);
    EXPECT_LE(r.recall, prev.recall);
    prev = r;
  }
}

TEST(Pearson, IdentityAndTenPointOracle) {
  const std::vector<double> x = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto same = pearson(x, x);
  EXPECT_NEAR(same.r, 1.0, 1e-12);
  EXPECT_LT(same.p_value, 1e-12);

  const std::vector<double> y = {2.1, 3.9, 6.2, 7.8, 9.7, 12.5, 13.1, 16.4, 18.0, 19.6};
  double mx = 0, my = 0;
  for (int i = 0; i < 10; ++i) {
    mx += x[i] / 10;
    my += y[i] / 10;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 10; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  const auto c = pearson(x, y);
  EXPECT_NEAR(c.r, sxy / std::sqrt(sxx * syy), 1e-12);
  EXPECT_NEAR(c.r_squared, c.r * c.r, 1e-12);
  EXPECT_EQ(c.n_pairs, 10u);
}

TEST(Pearson, KnownPValueAndErrors) {
  // r = 0.5 over n = 12: t = 0.5 sqrt(10 / 0.75) = 1.8257, two-sided p = 0.0979 (10 df).
  const std::vector<double> x = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  std::vector<double> y(12);
  // y = 0.5 * z(x) + sqrt(0.75) * z(e) with e orthogonal to x gives r = 0.5 exactly.
  std::vector<double> e = {1, -1, -1, 1, 1, -1, -1, 1, 1, -1, -1, 1};
  const double mx = 6.5;
  double sx = 0, se = 0, sxe = 0;
  for (int i = 0; i < 12; ++i) {
    sx += (x[i] - mx) * (x[i] - mx);
    sxe += (x[i] - mx) * e[i];
  }
  for (int i = 0; i < 12; ++i) e[i] -= sxe / sx * (x[i] - mx);
  for (double v : e) se += v * v;
  for (int i = 0; i < 12; ++i) y[i] = 0.5 * (x[i] - mx) / std::sqrt(sx) + std::sqrt(0.75) * e[i] / std::sqrt(se);
  const auto c = pearson(x, y);
  EXPECT_NEAR(c.r, 0.5, 1e-12);
  EXPECT_NEAR(c.p_value, 0.0979, 5e-4);
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), DataError);
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), DataError);
}

TEST(Objectives, L2GradientMatchesFiniteDifferences) {
  const auto p = random_problem(1, 40, 5);
  for (int k = 0; k < 5; ++k) {
    auto rng = make_rng(10, "point", k);
    std::normal_distribution<double> normal;
    Vector w(6);
    for (auto& v : w) v = normal(rng);
    const double err = max_rel_fd_error(
        [&](const Vector& v, Vector* g) { return logistic_l2_objective(p.x, p.y, 0.3, v, g); }, w);
    EXPECT_LT(err, 1e-5);
  }
}

TEST(Objectives, SmoothPartOfL1GradientMatchesFiniteDifferences) {
  const auto p = random_problem(2, 40, 4);
  Vector w = Vector::LinSpaced(5, -1, 1);
  EXPECT_LT(max_rel_fd_error([&](const Vector& v, Vector* g) { return logistic_loss(p.x, p.y, v, g); }, w), 1e-5);
}

TEST(Objectives, SpanGradientMatchesFiniteDifferences) {
  const auto p = random_problem(3, 30, 6);
  Matrix basis = Matrix::Random(6, 3);
  Vector w = Vector::LinSpaced(4, -0.5, 0.5);
  EXPECT_LT(max_rel_fd_error([&](const Vector& v, Vector* g) { return span_objective(p.x, p.y, basis, 0.2, v, g); }, w),
            1e-5);
}

TEST(TrainL2, StrongRegularizationGivesBaseRate) {
  auto p = random_problem(4, 200, 3);
  const auto probe = train_l2(p.x, p.y, 1e6, TrainOptions{.standardize = false});
  const double rate = (p.y.array() > 0).cast<double>().mean();
  EXPECT_LE(probe.theta.norm(), 1e-3);
  EXPECT_NEAR(probe.bias, std::log(rate / (1 - rate)), 1e-3);
}

TEST(TrainL2, OneDimensionalGridOracle) {
  Matrix x(2, 1);
  x << -1, 1;
  Vector y(2);
  y << -1, 1;
  const auto probe = train_l2(x, y, 1.0, TrainOptions{.standardize = false});
  // Dense grid over (theta, b) in [-5, 5]^2 at resolution 1e-3, refined around the coarse optimum.
  auto obj = [&](double t, double b) {
    return 0.5 * (std::log1p(std::exp(-(t + b))) + std::log1p(std::exp(-(t - b)))) + 0.5 * t * t;
  };
  double best = 1e300, bt = 0, bb = 0;
  for (int i = -500; i <= 500; ++i)
    for (int j = -500; j <= 500; ++j) {
      const double t = i * 1e-2, b = j * 1e-2, v = obj(t, b);
      if (v < best) best = v, bt = t, bb = b;
    }
  const double ct = bt, cb = bb;
  for (int i = -10; i <= 10; ++i)
    for (int j = -10; j <= 10; ++j) {
      const double t = ct + i * 1e-3, b = cb + j * 1e-3, v = obj(t, b);
      if (v < best) best = v, bt = t, bb = b;
    }
  EXPECT_NEAR(probe.theta[0], bt, 2e-3);
  EXPECT_NEAR(probe.bias, bb, 2e-3);
}

TEST(TrainL2, RestartsAgree) {
  const auto p = random_problem(5, 120, 6, 2.0);
  std::vector<double> objs;
  for (std::uint64_t s : {1, 2, 3}) objs.push_back(train_l2(p.x, p.y, 0.05, TrainOptions{.init_seed = s}).meta.objective);
  for (double o : objs) EXPECT_NEAR(o, objs.front(), 1e-6);
}

TEST(TrainL2, StandardizationContract) {
  const auto p = random_problem(6, 150, 4);
  const Matrix shifted = (p.x.array() * 5.0 + 3.0).matrix();
  const auto with = train_l2(shifted, p.y, 0.1, TrainOptions{.standardize = true});
  const auto st = Standardizer::fit(shifted);
  const auto manual = train_l2(st.apply(shifted), p.y, 0.1, TrainOptions{.standardize = false});
  const Vector a = score(with, shifted), b = score(manual, st.apply(shifted));
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-9 * std::max(1.0, a.cwiseAbs().maxCoeff()) + 1e-7);
  EXPECT_NEAR(with.raw_weights().dot(shifted.row(3)) + with.raw_bias(), a[3], 1e-9);
}

TEST(TrainL2, ErrorsAndNonConvergence) {
  Matrix x = Matrix::Random(4, 2);
  Vector one(4);
  one << 1, 1, 1, 1;
  EXPECT_THROW(train_l2(x, one, 1.0), DataError);
  Vector y(4);
  y << 1, -1, 1, -1;
  Matrix bad = x;
  bad(0, 0) = std::nan("");
  EXPECT_THROW(train_l2(bad, y, 1.0), DataError);
  const auto p = random_problem(7, 100, 5);
  TrainOptions o;
  o.solver.max_iters = 1;
  o.solver.tol = 1e-14;
  try {
    train_l2(p.x, p.y, 1e-3, o);
    FAIL() << "expected non-convergence";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.last_iterate().size(), 6u);
  }
}

TEST(TrainL1, ZeroAboveCriticalLambda) {
  const auto p = random_problem(8, 200, 8);
  const Matrix xs = Standardizer::fit(p.x).apply(p.x);
  const double crit = critical_lambda1(xs, p.y);
  const auto at = train_l1(p.x, p.y, crit * 1.0001);
  EXPECT_EQ(at.nnz(), 0u);
  const auto above = train_l1(p.x, p.y, crit * 3);
  for (Eigen::Index j = 0; j < above.theta.size(); ++j) EXPECT_EQ(above.theta[j], 0.0);
  EXPECT_GT(train_l1(p.x, p.y, crit * 0.5).nnz(), 0u);
}

// Largest KKT violation of an L1 solution in the standardized space.
double kkt_violation(const Matrix& xs, const Vector& y, const LinearProbe& p, double lambda) {
  Vector w(p.theta.size() + 1);
  w << p.theta, p.bias;
  Vector g;
  logistic_loss(xs, y, w, &g);
  double worst = std::abs(g[p.theta.size()]);
  for (Eigen::Index j = 0; j < p.theta.size(); ++j)
    worst = std::max(worst, p.theta[j] != 0.0 ? std::abs(g[j] + lambda * (p.theta[j] > 0 ? 1 : -1))
                                              : std::max(0.0, std::abs(g[j]) - lambda));
  return worst;
}

TEST(TrainL1, LadderSolutionsAreOptimal) {
  const auto set = synthetic_set(SyntheticSpec{.d = 40, .tasks = 1, .n_per_task = 400, .margin = 1.5, .seed = 2});
  const Matrix xs = Standardizer::fit(set.x).apply(set.x);
  const double crit = critical_lambda1(xs, set.y);
  const auto ladder = default_l1_ladder(crit);
  EXPECT_EQ(ladder.back(), crit);
  for (double l : ladder) EXPECT_LT(kkt_violation(xs, set.y, train_l1(set.x, set.y, l), l), 1e-6) << "lambda " << l;
  EXPECT_EQ(train_l1(set.x, set.y, ladder.back()).nnz(), 0u);
  EXPECT_GT(train_l1(set.x, set.y, ladder.front()).nnz(), train_l1(set.x, set.y, ladder[5]).nnz());
}

// The exact L1-logistic path need not be monotone in nnz: on this instance one
// coordinate is zero at ladder[2] and active again at ladder[3], at certified optima.
TEST(TrainL1, SupportCanReenterAlongThePath) {
  const auto set = synthetic_set(SyntheticSpec{.d = 40, .tasks = 1, .n_per_task = 400, .margin = 1.5, .seed = 2});
  const Matrix xs = Standardizer::fit(set.x).apply(set.x);
  const auto ladder = default_l1_ladder(critical_lambda1(xs, set.y));
  const auto lo = train_l1(set.x, set.y, ladder[2]), hi = train_l1(set.x, set.y, ladder[3]);
  EXPECT_LT(kkt_violation(xs, set.y, lo, ladder[2]), 1e-7);
  EXPECT_LT(kkt_violation(xs, set.y, hi, ladder[3]), 1e-7);
  EXPECT_EQ(lo.nnz(), 39u);
  EXPECT_EQ(hi.nnz(), 40u);
}

TEST(TrainL1, TinyLambdaMatchesL2) {
  const auto p = random_problem(9, 150, 4, 1.5);
  const auto l1 = train_l1(p.x, p.y, 1e-8);
  const auto l2 = train_l2(p.x, p.y, 1e-8);
  EXPECT_NEAR(auroc(score(l1, p.x), p.y), auroc(score(l2, p.x), p.y), 0.01);
}

TEST(TrainL1, RestartsAgree) {
  const auto p = random_problem(10, 120, 5, 1.0);
  std::vector<double> objs;
  for (std::uint64_t s : {1, 2, 3}) objs.push_back(train_l1(p.x, p.y, 0.01, TrainOptions{.init_seed = s}).meta.objective);
  for (double o : objs) EXPECT_NEAR(o, objs.front(), 1e-6);
}

TEST(Tuning, SingleValueGridIsChosen) {
  const auto p = random_problem(11, 100, 3);
  EXPECT_EQ(tune_l2(p.x, p.y, 5, {0.37}).selected, 0.37);
  EXPECT_EQ(tune_l1(p.x, p.y, p.x, p.y, {0.02}).selected, 0.02);
}

TEST(Tuning, TiesGoToLargestLambda) {
  // Perfectly separable 1-D data: every lambda ranks the folds perfectly.
  Matrix x(40, 1);
  Vector y(40);
  for (int i = 0; i < 40; ++i) {
    y[i] = i % 2 ? 1 : -1;
    x(i, 0) = y[i] * (1 + i);
  }
  EXPECT_EQ(tune_l2(x, y, 4, {1e-3, 1.0, 10.0}).selected, 10.0);
  EXPECT_EQ(tune_l1(x, y, x, y, {1e-4, 1e-3, 1e-2}).selected, 1e-2);
}

TEST(Tuning, SeparableSyntheticReachesHighAuroc) {
  const auto set = synthetic_set(SyntheticSpec{.d = 16, .tasks = 1, .n_per_task = 300, .margin = 3, .seed = 6});
  const auto t2 = tune_l2(set.x, set.y);
  EXPECT_GE(auroc(score(t2.probe, set.x), set.y), 0.99);
  const auto val = synthetic_set(SyntheticSpec{.d = 16, .tasks = 1, .n_per_task = 200, .margin = 3, .seed = 6});
  const auto t1 = tune_l1(set.x, set.y, val.x, val.y);
  EXPECT_GE(auroc(score(t1.probe, set.x), set.y), 0.99);
}

TEST(Span, TargetInSpanReproducesAuroc) {
  const auto set = synthetic_set(SyntheticSpec{.d = 12, .tasks = 1, .n_per_task = 200, .margin = 2, .seed = 7});
  const auto base = train_l2(set.x, set.y, 0.01);
  const auto coef = fit_span({base}, set.x, set.y, 1e-8);
  const auto probe = span_probe(coef, {base});
  EXPECT_NEAR(auroc(score(probe, set.x), set.y), auroc(score(base, set.x), set.y), 1e-6);
  EXPECT_GT(coef.alpha[0], 0.0);
}

TEST(Span, DegenerateBaseIsAnError) {
  LinearProbe zero;
  zero.theta = Vector::Zero(3);
  Matrix x = Matrix::Random(10, 3);
  Vector y = Vector::Ones(10);
  y.head(5).setConstant(-1);
  EXPECT_THROW(fit_span({zero, zero}, x, y, 0.1), DataError);
}

TEST(Span, ObjectiveBoundedByBiasOnlyAndUnconstrained) {
  const auto p = random_problem(12, 150, 6, 1.0);
  std::vector<LinearProbe> base;
  for (int k = 0; k < 2; ++k) {
    auto q = random_problem(20 + k, 100, 6, 1.0);
    base.push_back(train_l2(q.x, q.y, 0.1, TrainOptions{.standardize = false}));
  }
  const double lambda = 0.05;
  const auto coef = fit_span(base, p.x, p.y, lambda);
  const Matrix basis = span_basis(base);
  Vector bias_only = Vector::Zero(3);
  bias_only[2] = std::log((p.y.array() > 0).cast<double>().mean() / (p.y.array() < 0).cast<double>().mean());
  EXPECT_LE(coef.objective, span_objective(p.x, p.y, basis, lambda, bias_only, nullptr) + 1e-12);
  Vector ab(3);
  ab << coef.alpha, coef.bias;
  EXPECT_NEAR(span_objective(p.x, p.y, basis, lambda, ab, nullptr), coef.objective, 1e-12);
  // Restarts of the span fit land on the same optimum.
  TrainOptions o{.standardize = false, .init_seed = 4};
  EXPECT_NEAR(train_l2(p.x * basis, p.y, lambda, o).meta.objective, coef.objective, 1e-6);
}

TEST(SumProbes, IdentityNegationAndRawFold) {
  const auto p = random_problem(13, 80, 3);
  const auto a = train_l2(p.x, p.y, 0.1);
  const auto one = sum_probes({a});
  EXPECT_EQ(one.theta, a.theta);
  EXPECT_EQ(one.bias, a.bias);
  LinearProbe neg = a;
  neg.theta = -a.theta;
  neg.bias = -a.bias;
  const auto zero = sum_probes({a, neg});
  EXPECT_EQ(zero.theta.norm(), 0.0);
  EXPECT_EQ(zero.bias, 0.0);
  const auto q = random_problem(14, 80, 3);
  const auto b = train_l2((q.x.array() * 4).matrix(), q.y, 0.1);
  const auto s = sum_probes({a, b});
  const Vector expect = score(a, p.x) + score(b, p.x);
  EXPECT_LT((score(s, p.x) - expect).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Score, ZeroProbeAndPlantedMargin) {
  LinearProbe zero;
  zero.theta = Vector::Zero(4);
  zero.bias = 0.7;
  Matrix x = Matrix::Random(5, 4);
  EXPECT_TRUE((score(zero, x).array() == 0.7).all());

  SyntheticSpec s{.d = 10, .tasks = 1, .n_per_task = 50, .margin = 2.0, .noise_sigma = 0.0, .seed = 2};
  const auto set = synthetic_set(s);
  LinearProbe planted;
  planted.theta = planted_directions(s)[0];
  planted.bias = -planted.theta.dot(planted_centers(s)[0]);
  const Vector sc = score(planted, set.x);
  double pos = 0, neg = 0;
  for (Eigen::Index i = 0; i < sc.size(); ++i) (set.y[i] > 0 ? pos : neg) = sc[i];
  EXPECT_NEAR(pos - neg, 2 * s.margin, 1e-5);
}

TEST(Score, RowOrderInvariant) {
  const auto p = random_problem(15, 30, 3);
  const auto probe = train_l2(p.x, p.y, 0.1);
  const Matrix rev = p.x.colwise().reverse();
  const Vector a = score(probe, p.x), b = score(probe, rev);
  for (Eigen::Index i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[a.size() - 1 - i]);
}

TEST(ProbeJson, RoundTrip) {
  const auto p = random_problem(16, 60, 3);
  auto probe = train_l2(p.x, p.y, 0.1, TrainOptions{.tasks = {"t"}, .seed = 4});
  const auto back = probe_from_json(to_json(probe));
  EXPECT_EQ(to_json(back), to_json(probe));
  EXPECT_EQ(score(back, p.x), score(probe, p.x));
}

#pragma once

// Linear truthfulness probes: L2 and L1 logistic regression, hyperparameter
// tuning, span-constrained refitting over other probes, and parameter summation.
//
// Objectives (bias b never penalized):
//   L2:   (1/N) sum log(1 + exp(-y_i (theta.h_i + b))) + (lambda/2) |theta|^2
//   L1:   (1/N) sum log(1 + exp(-y_i (theta.h_i + b))) + lambda |theta|_1
//   span: the L2 objective over (alpha, b) with theta = sum_i alpha_i theta_i,
//         i.e. L2 logistic regression on the projected features g_i = (theta_k . h_i)_k.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "probegeo/dataset.hpp"
#include "probegeo/error.hpp"
#include "probegeo/metrics.hpp"
#include "probegeo/optim.hpp"
#include "probegeo/rng.hpp"

namespace probegeo {

// Per-dimension affine map fitted on training rows: (h - mean) / scale.
struct Standardizer {
  Vector mean;
  Vector scale;

  static Standardizer fit(const Matrix& x) {
    Standardizer s;
    s.mean = x.colwise().mean().transpose();
    s.scale.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - s.mean[j]).square().mean();
      const double sd = std::sqrt(var);
      s.scale[j] = sd > 1e-12 ? sd : 1.0;  // constant dimension
    }
    return s;
  }

  Matrix apply(const Matrix& x) const {
    return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }

  bool operator==(const Standardizer& o) const {
    return mean.size() == o.mean.size() && mean == o.mean && scale == o.scale;
  }
};

enum class Penalty { l2, l1 };

inline std::string_view to_string(Penalty p) { return p == Penalty::l2 ? "l2" : "l1"; }

struct Regularization {
  Penalty kind = Penalty::l2;
  double lambda = 1.0;
};

struct TrainMeta {
  std::vector<std::string> tasks;
  std::uint64_t seed = 0;
  int iterations = 0;
  double objective = 0;
  std::vector<std::string> sources;  // for combined probes
};

struct LinearProbe {
  Vector theta;
  double bias = 0;
  Regularization reg;
  std::optional<Standardizer> standardizer;
  TrainMeta meta;

  std::size_t dim() const { return static_cast<std::size_t>(theta.size()); }

  std::size_t nnz() const {
    return static_cast<std::size_t>((theta.array() != 0.0).count());
  }

  // Direction in raw activation space: score(h) = raw_weights . h + raw_bias.
  Vector raw_weights() const {
    if (!standardizer) return theta;
    return theta.cwiseQuotient(standardizer->scale);
  }

  double raw_bias() const {
    if (!standardizer) return bias;
    return bias - raw_weights().dot(standardizer->mean);
  }
};

struct TrainOptions {
  bool standardize = true;
  SolverOptions solver{};
  ProximalOptions prox{};
  std::optional<std::uint64_t> init_seed;  // random initial point instead of the bias-only start
  std::optional<Vector> warm_start;        // (theta; b) in the training feature space
  std::vector<std::string> tasks;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Objectives. Parameter vector w = (theta_1..theta_d, b).

namespace detail {

inline double softplus(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

inline void require_training_data(const Matrix& x, const Vector& y) {
  if (x.rows() != y.size()) throw DataError("row count does not match label count");
  if (x.rows() < 2) throw DataError("training needs at least 2 rows");
  bool pos = false, neg = false;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y[i] == 1.0) pos = true;
    else if (y[i] == -1.0) neg = true;
    else throw DataError("row " + std::to_string(i) + ": label not in {-1,+1}");
  }
  if (!pos || !neg) throw DataError("training data contains a single class");
  if (!x.allFinite()) throw DataError("training data contains non-finite values");
}

inline double base_rate_logit(const Vector& y) {
  const double p = (y.array() > 0).cast<double>().mean();
  return std::log(p / (1.0 - p));
}

}  // namespace detail

// Mean logistic loss and its gradient with respect to w.
inline double logistic_loss(const Matrix& x, const Vector& y, const Vector& w, Vector* grad) {
  const Eigen::Index d = x.cols();
  const double n = static_cast<double>(x.rows());
  const Vector z = (x * w.head(d)).array() + w[d];
  double loss = 0;
  Vector r(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double m = y[i] * z[i];
    loss += detail::softplus(-m);
    r[i] = -y[i] / (1.0 + std::exp(m));  // d loss_i / d z_i
  }
  if (grad) {
    grad->resize(d + 1);
    grad->head(d).noalias() = x.transpose() * r / n;
    (*grad)[d] = r.sum() / n;
  }
  return loss / n;
}

inline double logistic_l2_objective(const Matrix& x, const Vector& y, double lambda2,
                                    const Vector& w, Vector* grad) {
  const Eigen::Index d = x.cols();
  double v = logistic_loss(x, y, w, grad) + 0.5 * lambda2 * w.head(d).squaredNorm();
  if (grad) grad->head(d) += lambda2 * w.head(d);
  return v;
}

inline double logistic_l1_objective(const Matrix& x, const Vector& y, double lambda1,
                                    const Vector& w) {
  return logistic_loss(x, y, w, nullptr) + lambda1 * w.head(x.cols()).lpNorm<1>();
}

// Smallest lambda1 at which theta = 0 is optimal: the KKT bound at the bias-only solution.
inline double critical_lambda1(const Matrix& x, const Vector& y) {
  detail::require_training_data(x, y);
  Vector w = Vector::Zero(x.cols() + 1);
  w[x.cols()] = detail::base_rate_logit(y);
  Vector g;
  logistic_loss(x, y, w, &g);
  return g.head(x.cols()).cwiseAbs().maxCoeff();
}

inline std::vector<double> logspace(double lo, double hi, std::size_t count) {
  std::vector<double> out(count);
  if (count == 1) {
    out[0] = lo;
    return out;
  }
  const double a = std::log10(lo), b = std::log10(hi);
  for (std::size_t i = 0; i < count; ++i)
    out[i] = std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
  out.front() = lo;  // exact endpoints: the top of the L1 ladder is the critical lambda itself
  out.back() = hi;
  return out;
}

inline std::vector<double> default_l2_grid() { return logspace(1e-4, 1e2, 10); }

inline std::vector<double> default_l1_ladder(double lambda_crit) {
  return logspace(1e-4 * lambda_crit, lambda_crit, 10);
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

inline Vector initial_point(const Matrix& x, const Vector& y, const TrainOptions& opts) {
  const Eigen::Index d = x.cols();
  if (opts.warm_start) {
    if (opts.warm_start->size() != d + 1) throw DataError("warm start has wrong dimension");
    return *opts.warm_start;
  }
  Vector w = Vector::Zero(d + 1);
  if (opts.init_seed) {
    auto rng = make_rng(*opts.init_seed, "probe/init");
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index j = 0; j <= d; ++j) w[j] = normal(rng);
  } else {
    w[d] = base_rate_logit(y);
  }
  return w;
}

inline LinearProbe make_probe(const Vector& w, Regularization reg, std::optional<Standardizer> st,
                              const TrainOptions& opts, int iterations, double objective) {
  LinearProbe p;
  const Eigen::Index d = w.size() - 1;
  p.theta = w.head(d);
  p.bias = w[d];
  p.reg = reg;
  p.standardizer = std::move(st);
  p.meta.tasks = opts.tasks;
  p.meta.seed = opts.seed;
  p.meta.iterations = iterations;
  p.meta.objective = objective;
  return p;
}

}  // namespace detail

inline LinearProbe train_l2(const Matrix& x, const Vector& y, double lambda2,
                            const TrainOptions& opts = {}) {
  detail::require_training_data(x, y);
  if (!(lambda2 > 0)) throw ConfigError("lambda2 must be positive");
  std::optional<Standardizer> st;
  if (opts.standardize) st = Standardizer::fit(x);
  const Matrix xs = st ? st->apply(x) : x;
  auto f = [&](const Vector& w, Vector& g) { return logistic_l2_objective(xs, y, lambda2, w, &g); };
  const auto res = minimize_lbfgs(f, detail::initial_point(xs, y, opts), opts.solver);
  return detail::make_probe(res.x, {Penalty::l2, lambda2}, std::move(st), opts, res.iterations,
                            res.value);
}

inline LinearProbe train_l1(const Matrix& x, const Vector& y, double lambda1,
                            const TrainOptions& opts = {}) {
  detail::require_training_data(x, y);
  if (!(lambda1 > 0)) throw ConfigError("lambda1 must be positive");
  std::optional<Standardizer> st;
  if (opts.standardize) st = Standardizer::fit(x);
  const Matrix xs = st ? st->apply(x) : x;
  std::vector<bool> penalized(static_cast<std::size_t>(xs.cols() + 1), true);
  penalized.back() = false;
  auto f = [&](const Vector& w, Vector& g) { return logistic_loss(xs, y, w, &g); };
  const auto res =
      minimize_proximal(f, detail::initial_point(xs, y, opts), lambda1, penalized, opts.prox);
  return detail::make_probe(res.x, {Penalty::l1, lambda1}, std::move(st), opts, res.iterations,
                            res.value);
}

// score(h) = theta . standardize(h) + b, one value per row.
inline Vector score(const LinearProbe& probe, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != probe.dim())
    throw DataError("score: input dimension " + std::to_string(x.cols()) +
                    " does not match probe dimension " + std::to_string(probe.dim()));
  if (!x.allFinite()) throw DataError("score: input contains non-finite values");
  if (probe.standardizer) return (probe.standardizer->apply(x) * probe.theta).array() + probe.bias;
  return (x * probe.theta).array() + probe.bias;
}

// ---------------------------------------------------------------------------
// Tuning

struct TunedProbe {
  LinearProbe probe;
  std::vector<double> grid;    // in the order evaluated (descending)
  std::vector<double> scores;  // mean validation AUROC per grid value
  double selected = 0;
};

// Stratified k-fold assignment by label.
inline std::vector<int> stratified_folds(const Vector& y, int folds, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (Eigen::Index i = 0; i < y.size(); ++i) (y[i] > 0 ? pos : neg).push_back(static_cast<std::size_t>(i));
  if (pos.size() < static_cast<std::size_t>(folds) || neg.size() < static_cast<std::size_t>(folds))
    throw DataError("cross-validation: each class needs at least " + std::to_string(folds) + " rows");
  auto rng = make_rng(seed, "cv/folds");
  shuffle_in_place(pos, rng);
  shuffle_in_place(neg, rng);
  std::vector<int> fold(static_cast<std::size_t>(y.size()));
  for (std::size_t i = 0; i < pos.size(); ++i) fold[pos[i]] = static_cast<int>(i % folds);
  for (std::size_t i = 0; i < neg.size(); ++i) fold[neg[i]] = static_cast<int>((pos.size() + i) % folds);
  return fold;
}

namespace detail {

inline std::vector<double> descending(std::vector<double> grid) {
  if (grid.empty()) throw ConfigError("regularization grid is empty");
  for (double l : grid)
    if (!(l > 0)) throw ConfigError("regularization grid values must be positive");
  std::sort(grid.begin(), grid.end(), std::greater<>());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

inline std::pair<Matrix, Vector> take_rows(const Matrix& x, const Vector& y,
                                           const std::vector<std::size_t>& rows) {
  Matrix xs(static_cast<Eigen::Index>(rows.size()), x.cols());
  Vector ys(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    xs.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(rows[r]));
    ys[static_cast<Eigen::Index>(r)] = y[static_cast<Eigen::Index>(rows[r])];
  }
  return {std::move(xs), std::move(ys)};
}

// Index of the best score; ties (within 1e-12) go to the earliest entry,
// which on a descending grid is the strongest regularization.
inline std::size_t argmax_first(const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best] + 1e-12) best = i;
  return best;
}

}  // namespace detail

// Picks lambda2 by mean validation AUROC over stratified folds, then refits on all rows.
inline TunedProbe tune_l2(const Matrix& x, const Vector& y, int folds = 5,
                          std::vector<double> grid = default_l2_grid(),
                          const TrainOptions& opts = {}) {
  detail::require_training_data(x, y);
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  grid = detail::descending(std::move(grid));
  TunedProbe out;
  out.grid = grid;
  out.scores.assign(grid.size(), 0.0);
  if (grid.size() > 1) {
    const auto fold = stratified_folds(y, folds, opts.seed);
    for (int f = 0; f < folds; ++f) {
      std::vector<std::size_t> tr, va;
      for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == f ? va : tr).push_back(i);
      const auto [xtr, ytr] = detail::take_rows(x, y, tr);
      const auto [xva, yva] = detail::take_rows(x, y, va);
      TrainOptions o = opts;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        const auto p = train_l2(xtr, ytr, grid[g], o);
        o.warm_start = Vector(p.theta.size() + 1);
        *o.warm_start << p.theta, p.bias;
        out.scores[g] += auroc(score(p, xva), yva) / folds;
      }
    }
  }
  const auto best = detail::argmax_first(out.scores);
  out.selected = grid[best];
  TrainOptions o = opts;
  o.warm_start.reset();
  out.probe = train_l2(x, y, out.selected, o);
  return out;
}

// Picks lambda1 by validation AUROC on a held-out set; the returned probe is the
// train-set fit at the selected lambda. An empty grid means the default ladder
// anchored at the critical lambda of the (standardized) training data.
inline TunedProbe tune_l1(const Matrix& xtr, const Vector& ytr, const Matrix& xva,
                          const Vector& yva, std::vector<double> grid = {},
                          const TrainOptions& opts = {}) {
  detail::require_training_data(xtr, ytr);
  if (grid.empty()) {
    const Matrix xs = opts.standardize ? Standardizer::fit(xtr).apply(xtr) : xtr;
    grid = default_l1_ladder(critical_lambda1(xs, ytr));
  }
  grid = detail::descending(std::move(grid));
  TunedProbe out;
  out.grid = grid;
  std::vector<LinearProbe> fits;
  TrainOptions o = opts;
  for (double l : grid) {
    auto p = train_l1(xtr, ytr, l, o);
    o.warm_start = Vector(p.theta.size() + 1);
    *o.warm_start << p.theta, p.bias;
    out.scores.push_back(auroc(score(p, xva), yva));
    fits.push_back(std::move(p));
  }
  const auto best = detail::argmax_first(out.scores);
  out.selected = grid[best];
  out.probe = std::move(fits[best]);
  return out;
}

// ---------------------------------------------------------------------------
// Span-constrained refit

struct SpanCoefficients {
  Vector alpha;
  double bias = 0;
  double lambda2 = 0;
  std::vector<std::string> base_probe_ids;
  double objective = 0;
};

// Columns are the raw-space directions of the base probes.
inline Matrix span_basis(const std::vector<LinearProbe>& base) {
  if (base.empty()) throw ConfigError("span fit needs at least one base probe");
  const auto d = base.front().dim();
  Matrix w(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(base.size()));
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (base[i].dim() != d) throw DataError("span fit: base probes differ in dimension");
    w.col(static_cast<Eigen::Index>(i)) = base[i].raw_weights();
  }
  return w;
}

inline double span_objective(const Matrix& x, const Vector& y, const Matrix& basis,
                             double lambda2, const Vector& alpha_b, Vector* grad) {
  const Matrix g = x * basis;
  return logistic_l2_objective(g, y, lambda2, alpha_b, grad);
}

inline SpanCoefficients fit_span(const std::vector<LinearProbe>& base, const Matrix& x,
                                 const Vector& y, double lambda2,
                                 const SolverOptions& solver = {}) {
  const Matrix basis = span_basis(base);
  if (basis.cwiseAbs().maxCoeff() == 0.0) throw DataError("degenerate span: all base probes are zero");
  if (x.cols() != basis.rows()) throw DataError("span fit: data dimension does not match probes");
  TrainOptions o;
  o.standardize = false;
  o.solver = solver;
  const auto p = train_l2(x * basis, y, lambda2, o);
  SpanCoefficients s;
  s.alpha = p.theta;
  s.bias = p.bias;
  s.lambda2 = lambda2;
  s.objective = p.meta.objective;
  for (const auto& b : base) {
    std::string id;
    for (const auto& t : b.meta.tasks) id += (id.empty() ? "" : "+") + t;
    s.base_probe_ids.push_back(id);
  }
  return s;
}

// Materializes theta_alpha = sum alpha_i theta_i as a raw-space probe.
inline LinearProbe span_probe(const SpanCoefficients& s, const std::vector<LinearProbe>& base) {
  LinearProbe p;
  p.theta = span_basis(base) * s.alpha;
  p.bias = s.bias;
  p.reg = {Penalty::l2, s.lambda2};
  p.meta.sources = s.base_probe_ids;
  p.meta.objective = s.objective;
  return p;
}

// Cross-validated lambda for the span fit, reusing the L2 tuner on projected features.
inline SpanCoefficients tune_span(const std::vector<LinearProbe>& base, const Matrix& x,
                                  const Vector& y, int folds = 5,
                                  std::vector<double> grid = default_l2_grid(),
                                  std::uint64_t seed = 0) {
  const Matrix basis = span_basis(base);
  if (basis.cwiseAbs().maxCoeff() == 0.0) throw DataError("degenerate span: all base probes are zero");
  TrainOptions o;
  o.standardize = false;
  o.seed = seed;
  const auto tuned = tune_l2(x * basis, y, folds, std::move(grid), o);
  return fit_span(base, x, y, tuned.selected);
}

// ---------------------------------------------------------------------------
// Parameter summation

// theta = sum theta_i, b = sum b_i. Probes sharing one standardizer (or none) are
// summed in that space; otherwise each is folded into raw activation space first,
// which sums the score functions exactly.
inline LinearProbe sum_probes(const std::vector<LinearProbe>& probes) {
  if (probes.empty()) throw ConfigError("sum_probes needs at least one probe");
  const auto d = probes.front().dim();
  bool shared = true;
  for (const auto& p : probes) {
    if (p.dim() != d) throw DataError("sum_probes: dimension mismatch");
    const auto& a = p.standardizer;
    const auto& b = probes.front().standardizer;
    if (a.has_value() != b.has_value() || (a && !(*a == *b))) shared = false;
  }
  LinearProbe out;
  out.theta = Vector::Zero(static_cast<Eigen::Index>(d));
  out.reg = probes.front().reg;
  if (shared) out.standardizer = probes.front().standardizer;
  for (const auto& p : probes) {
    out.theta += shared ? p.theta : p.raw_weights();
    out.bias += shared ? p.bias : p.raw_bias();
    std::string id;
    for (const auto& t : p.meta.tasks) id += (id.empty() ? "" : "+") + t;
    out.meta.sources.push_back(id);
    for (const auto& t : p.meta.tasks)
      if (std::find(out.meta.tasks.begin(), out.meta.tasks.end(), t) == out.meta.tasks.end())
        out.meta.tasks.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const LinearProbe& p) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["d"] = p.dim();
  j["theta"] = vec(p.theta);
  j["bias"] = p.bias;
  j["reg"] = {{"kind", std::string(to_string(p.reg.kind))}, {"lambda", p.reg.lambda}};
  if (p.standardizer)
    j["standardizer"] = {{"mean", vec(p.standardizer->mean)}, {"scale", vec(p.standardizer->scale)}};
  else
    j["standardizer"] = nullptr;
  j["train_meta"] = {{"tasks", p.meta.tasks},
                     {"seed", p.meta.seed},
                     {"iterations", p.meta.iterations},
                     {"objective", p.meta.objective},
                     {"sources", p.meta.sources}};
  return j;
}

inline LinearProbe probe_from_json(const nlohmann::json& j) {
  auto vec = [](const nlohmann::json& a) {
    const auto v = a.get<std::vector<double>>();
    return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  LinearProbe p;
  try {
    const auto d = j.at("d").get<std::size_t>();
    p.theta = vec(j.at("theta"));
    if (static_cast<std::size_t>(p.theta.size()) != d) throw FormatError("probe: theta length != d");
    p.bias = j.at("bias").get<double>();
    const auto kind = j.at("reg").at("kind").get<std::string>();
    p.reg.kind = kind == "l1" ? Penalty::l1 : Penalty::l2;
    p.reg.lambda = j.at("reg").at("lambda").get<double>();
    if (!j.at("standardizer").is_null()) {
      Standardizer s{vec(j["standardizer"].at("mean")), vec(j["standardizer"].at("scale"))};
      if (static_cast<std::size_t>(s.mean.size()) != d || static_cast<std::size_t>(s.scale.size()) != d)
        throw FormatError("probe: standardizer length != d");
      if ((s.scale.array() <= 0).any()) throw FormatError("probe: standardizer scale must be > 0");
      p.standardizer = std::move(s);
    }
    const auto& m = j.at("train_meta");
    p.meta.tasks = m.value("tasks", std::vector<std::string>{});
    p.meta.seed = m.value("seed", std::uint64_t{0});
    p.meta.iterations = m.value("iterations", 0);
    p.meta.objective = m.value("objective", 0.0);
    p.meta.sources = m.value("sources", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad probe bundle: ") + e.what());
  }
  if (!p.theta.allFinite()) throw FormatError("probe: theta is not finite");
  return p;
}

inline nlohmann::json to_json(const SpanCoefficients& s) {
  return {{"alpha", std::vector<double>(s.alpha.data(), s.alpha.data() + s.alpha.size())},
          {"bias", s.bias},
          {"lambda2", s.lambda2},
          {"base_probe_ids", s.base_probe_ids},
          {"objective", s.objective}};
}

inline SpanCoefficients span_from_json(const nlohmann::json& j) {
  SpanCoefficients s;
  try {
    const auto a = j.at("alpha").get<std::vector<double>>();
    s.alpha = Eigen::Map<const Vector>(a.data(), static_cast<Eigen::Index>(a.size()));
    s.bias = j.at("bias").get<double>();
    s.lambda2 = j.at("lambda2").get<double>();
    s.base_probe_ids = j.at("base_probe_ids").get<std::vector<std::string>>();
    s.objective = j.value("objective", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad span coefficients: ") + e.what());
  }
  if (s.alpha.size() < 1) throw FormatError("span coefficients: alpha is empty");
  return s;
}

}  // namespace probegeo

#pragma once

// Mixture of probes: a softmax gating layer over E expert scorers, each a
// 2-layer ReLU network. Trained by mini-batch SGD on the logistic loss plus
// weight decay and a Switch-style load-balancing term
//   L_aux = E * sum_e f_e * P_e,
// f_e = fraction of batch rows whose argmax gate is e (held constant in the
// backward pass), P_e = mean gate probability of expert e.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "probegeo/dataset.hpp"
#include "probegeo/error.hpp"
#include "probegeo/metrics.hpp"
#include "probegeo/probe.hpp"
#include "probegeo/rng.hpp"

namespace probegeo {

struct MoeHyper {
  int experts = 16;
  int hidden = 64;
  double lr = 1e-2;
  double weight_decay = 0.0;
  double aux_coef = 0.0;
  int epochs = 50;
  int batch = 128;
  int patience = 5;  // epochs without validation improvement before stopping
  std::uint64_t seed = 0;
  bool top1 = false;  // hard routing with straight-through gate gradients
  // W1 init sd as a multiple of sqrt(2/d). Small, so directions the training data
  // never excites stay near zero instead of keeping random He-scale projections.
  double init_scale = 0.01;
  bool standardize = true;
};

// All parameters live in one flat vector; the accessors below are views into it.
// Layout: gate_w (d x E, column-major) | gate_b (E) | w1 (d x E*H) | b1 (E*H) | w2 (E*H) | b2 (E)
struct MixtureModel {
  std::size_t d = 0;
  MoeHyper hyper;
  Vector params;
  std::optional<Standardizer> standardizer;

  Eigen::Index E() const { return hyper.experts; }
  Eigen::Index H() const { return hyper.hidden; }
  Eigen::Index D() const { return static_cast<Eigen::Index>(d); }

  static Eigen::Index param_count(std::size_t d, int experts, int hidden) {
    const Eigen::Index D = static_cast<Eigen::Index>(d), E = experts, EH = E * hidden;
    return D * E + E + D * EH + EH + EH + E;
  }

  Eigen::Map<Matrix> gate_w() { return {params.data(), D(), E()}; }
  Eigen::Map<const Matrix> gate_w() const { return {params.data(), D(), E()}; }
  Eigen::Map<Vector> gate_b() { return {params.data() + off_gb(), E()}; }
  Eigen::Map<const Vector> gate_b() const { return {params.data() + off_gb(), E()}; }
  Eigen::Map<Matrix> w1() { return {params.data() + off_w1(), D(), E() * H()}; }
  Eigen::Map<const Matrix> w1() const { return {params.data() + off_w1(), D(), E() * H()}; }
  Eigen::Map<Vector> b1() { return {params.data() + off_b1(), E() * H()}; }
  Eigen::Map<const Vector> b1() const { return {params.data() + off_b1(), E() * H()}; }
  Eigen::Map<Vector> w2() { return {params.data() + off_w2(), E() * H()}; }
  Eigen::Map<const Vector> w2() const { return {params.data() + off_w2(), E() * H()}; }
  Eigen::Map<Vector> b2() { return {params.data() + off_b2(), E()}; }
  Eigen::Map<const Vector> b2() const { return {params.data() + off_b2(), E()}; }

  Eigen::Index off_gb() const { return D() * E(); }
  Eigen::Index off_w1() const { return off_gb() + E(); }
  Eigen::Index off_b1() const { return off_w1() + D() * E() * H(); }
  Eigen::Index off_w2() const { return off_b1() + E() * H(); }
  Eigen::Index off_b2() const { return off_w2() + E() * H(); }
};

inline MixtureModel init_mixture(std::size_t d, const MoeHyper& hyper) {
  if (hyper.experts < 1 || hyper.hidden < 1) throw ConfigError("mixture needs E >= 1 and H >= 1");
  if (d < 1) throw ConfigError("mixture needs d >= 1");
  MixtureModel m;
  m.d = d;
  m.hyper = hyper;
  m.params = Vector::Zero(MixtureModel::param_count(d, hyper.experts, hyper.hidden));
  auto rng = make_rng(hyper.seed, "moe/init");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double gate_sd = 0.01;
  if (!(hyper.init_scale >= 0.0)) throw ConfigError("mixture init_scale must be non-negative");
  const double w1_sd = hyper.init_scale * std::sqrt(2.0 / static_cast<double>(d));
  const double w2_sd = std::sqrt(1.0 / static_cast<double>(hyper.hidden));
  for (Eigen::Index i = 0; i < m.gate_w().size(); ++i) m.gate_w().data()[i] = gate_sd * normal(rng);
  for (Eigen::Index i = 0; i < m.w1().size(); ++i) m.w1().data()[i] = w1_sd * normal(rng);
  for (Eigen::Index i = 0; i < m.w2().size(); ++i) m.w2()[i] = w2_sd * normal(rng);
  return m;
}

struct MoeForward {
  Vector scores;        // per row
  Matrix gate_probs;    // n x E, rows sum to 1
  Matrix expert_scores; // n x E
  Matrix hidden_pre;    // n x E*H (pre-activation)
};

namespace detail {

inline Matrix softmax_rows(const Matrix& z) {
  Matrix p = z.colwise() - z.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

inline Matrix routing_weights(const MixtureModel& m, const Matrix& probs) {
  if (!m.hyper.top1) return probs;
  Matrix one = Matrix::Zero(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index e = 0;
    probs.row(i).maxCoeff(&e);
    one(i, e) = 1.0;
  }
  return one;
}

// Forward pass on already-transformed inputs.
inline MoeForward forward_transformed(const MixtureModel& m, const Matrix& x) {
  MoeForward f;
  const Eigen::Index E = m.E(), H = m.H();
  f.gate_probs = softmax_rows((x * m.gate_w()).rowwise() + m.gate_b().transpose());
  f.hidden_pre = (x * m.w1()).rowwise() + m.b1().transpose();
  const Matrix relu = f.hidden_pre.cwiseMax(0.0);
  f.expert_scores.resize(x.rows(), E);
  for (Eigen::Index e = 0; e < E; ++e)
    f.expert_scores.col(e) = (relu.middleCols(e * H, H) * m.w2().segment(e * H, H)).array() + m.b2()[e];
  f.scores = routing_weights(m, f.gate_probs).cwiseProduct(f.expert_scores).rowwise().sum();
  return f;
}

inline Matrix transform(const MixtureModel& m, const Matrix& x) {
  return m.standardizer ? m.standardizer->apply(x) : x;
}

}  // namespace detail

// score(h) = sum_e softmax(gate(h))_e * expert_e(h); top-1 routing uses the argmax expert only.
inline MoeForward moe_forward(const MixtureModel& m, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != m.d)
    throw DataError("moe_forward: input dimension does not match model");
  if (!x.allFinite()) throw DataError("moe_forward: non-finite input");
  if (!m.params.allFinite()) throw NumericalError("moe_forward: non-finite parameters");
  return detail::forward_transformed(m, detail::transform(m, x));
}

// Fraction of rows whose argmax gate is e.
inline Vector argmax_fractions(const Matrix& probs) {
  Vector f = Vector::Zero(probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index e = 0;
    probs.row(i).maxCoeff(&e);
    f[e] += 1.0;
  }
  return f / static_cast<double>(probs.rows());
}

inline double aux_balance_loss(const Matrix& probs) {
  const Vector f = argmax_fractions(probs);
  const Vector P = probs.colwise().mean().transpose();
  return static_cast<double>(probs.cols()) * f.dot(P);
}

// Full training loss on already-transformed inputs; fills grad (same layout as params)
// when requested. The argmax fractions f_e are treated as constants.
inline double moe_loss(const MixtureModel& m, const Matrix& x, const Vector& y, double aux_coef,
                       Vector* grad = nullptr) {
  if (x.rows() == 0) throw DataError("moe_loss: empty batch");
  const Eigen::Index B = x.rows(), E = m.E(), H = m.H();
  const auto f = detail::forward_transformed(m, x);
  double loss = 0;
  Vector dscore(B);
  for (Eigen::Index i = 0; i < B; ++i) {
    const double margin = y[i] * f.scores[i];
    loss += detail::softplus(-margin);
    dscore[i] = -y[i] / (1.0 + std::exp(margin)) / static_cast<double>(B);
  }
  loss /= static_cast<double>(B);
  const Vector frac = argmax_fractions(f.gate_probs);
  const Vector mean_p = f.gate_probs.colwise().mean().transpose();
  loss += 0.5 * m.hyper.weight_decay * m.params.squaredNorm();
  loss += aux_coef * static_cast<double>(E) * frac.dot(mean_p);
  if (!grad) return loss;

  MixtureModel g = m;
  g.params.setZero();
  const Matrix route = detail::routing_weights(m, f.gate_probs);

  // Expert side.
  const Matrix dS = route.array().colwise() * dscore.array();  // B x E
  const Matrix relu = f.hidden_pre.cwiseMax(0.0);
  Matrix dA(B, E * H);
  for (Eigen::Index e = 0; e < E; ++e) {
    g.b2()[e] = dS.col(e).sum();
    g.w2().segment(e * H, H) = relu.middleCols(e * H, H).transpose() * dS.col(e);
    dA.middleCols(e * H, H) = dS.col(e) * m.w2().segment(e * H, H).transpose();
  }
  dA = dA.cwiseProduct((f.hidden_pre.array() > 0.0).cast<double>().matrix());
  g.w1() = x.transpose() * dA;
  g.b1() = dA.colwise().sum().transpose();

  // Gate side: dL/dp_ie = dscore_i * s_ie + aux * E * f_e / B, then softmax backprop.
  Matrix dP = f.expert_scores.array().colwise() * dscore.array();
  dP.rowwise() += (aux_coef * static_cast<double>(E) / static_cast<double>(B)) * frac.transpose();
  const Vector inner = f.gate_probs.cwiseProduct(dP).rowwise().sum();
  const Matrix dZ = f.gate_probs.cwiseProduct(dP.colwise() - inner);
  g.gate_w() = x.transpose() * dZ;
  g.gate_b() = dZ.colwise().sum().transpose();

  *grad = g.params + m.hyper.weight_decay * m.params;
  return loss;
}

// ---------------------------------------------------------------------------
// Training

struct HyperGrid {
  std::vector<double> lr = {1e-3, 1e-2, 1e-1};
  std::vector<double> weight_decay = {0.0, 1e-4, 1e-2};
  std::vector<double> aux_coef = {0.0, 0.01, 0.1};

  std::size_t size() const { return lr.size() * weight_decay.size() * aux_coef.size(); }
};

enum class MoeSelection { validation, oracle };

struct MoeGridRow {
  std::size_t gridpoint = 0;
  double lr = 0, weight_decay = 0, aux_coef = 0;
  double val_auroc = std::numeric_limits<double>::quiet_NaN();
  double test_auroc = std::numeric_limits<double>::quiet_NaN();
  int epochs = 0;
  std::string status = "ok";
};

struct MoeTrainResult {
  MixtureModel model;  // chosen under the requested selection
  MoeSelection selection = MoeSelection::validation;
  std::size_t selected = 0;
  std::size_t selected_validation = 0;
  std::optional<std::size_t> selected_oracle;
  std::vector<MoeGridRow> report;
  std::vector<MixtureModel> models;  // one per gridpoint (empty params on failure)
};

struct MoeRun {
  MixtureModel model;
  double best_val = -1;
  int epochs = 0;
  double first_epoch_start_loss = 0;
  double first_epoch_end_loss = 0;
};

// One SGD run with early stopping on validation AUROC; returns the best-validation weights.
inline MoeRun train_mixture(const Matrix& xtr, const Vector& ytr, const Matrix& xva,
                            const Vector& yva, const MoeHyper& hyper) {
  detail::require_training_data(xtr, ytr);
  MoeRun run;
  run.model = init_mixture(static_cast<std::size_t>(xtr.cols()), hyper);
  if (hyper.standardize) run.model.standardizer = Standardizer::fit(xtr);
  const Matrix xs = detail::transform(run.model, xtr);
  const Matrix vs = detail::transform(run.model, xva);
  const Eigen::Index n = xs.rows();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(hyper.seed, "moe/batches");
  const Eigen::Index bs = std::max(1, hyper.batch);
  run.first_epoch_start_loss = moe_loss(run.model, xs, ytr, hyper.aux_coef);
  Vector best = run.model.params;
  int stale = 0;
  Vector grad;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (Eigen::Index start = 0; start < n; start += bs) {
      const Eigen::Index m = std::min(bs, n - start);
      Matrix xb(m, xs.cols());
      Vector yb(m);
      for (Eigen::Index r = 0; r < m; ++r) {
        xb.row(r) = xs.row(order[static_cast<std::size_t>(start + r)]);
        yb[r] = ytr[order[static_cast<std::size_t>(start + r)]];
      }
      const double l = moe_loss(run.model, xb, yb, hyper.aux_coef, &grad);
      if (!std::isfinite(l) || !grad.allFinite())
        throw NumericalError("mixture training diverged (loss is not finite)");
      run.model.params -= hyper.lr * grad;
    }
    if (epoch == 0) run.first_epoch_end_loss = moe_loss(run.model, xs, ytr, hyper.aux_coef);
    run.epochs = epoch + 1;
    const double val = auroc(detail::forward_transformed(run.model, vs).scores, yva);
    if (!std::isfinite(val)) throw NumericalError("mixture validation score is not finite");
    if (val > run.best_val + 1e-12) {
      run.best_val = val;
      best = run.model.params;
      stale = 0;
    } else if (++stale >= hyper.patience) {
      break;
    }
  }
  run.model.params = best;
  return run;
}

// Grid search over (lr, weight_decay, aux_coef). Each gridpoint trains with an
// independent seed stream; a diverged gridpoint is recorded and skipped.
inline MoeTrainResult moe_train(const Matrix& xtr, const Vector& ytr, const Matrix& xva,
                                const Vector& yva, const HyperGrid& grid, const MoeHyper& base,
                                MoeSelection selection = MoeSelection::validation,
                                const Matrix* xte = nullptr, const Vector* yte = nullptr,
                                unsigned threads = 1) {
  if (grid.size() == 0) throw ConfigError("mixture hyperparameter grid is empty");
  if (selection == MoeSelection::oracle && (!xte || !yte))
    throw ConfigError("oracle selection needs test data");
  detail::require_training_data(xtr, ytr);

  std::vector<MoeHyper> points;
  for (double lr : grid.lr)
    for (double wd : grid.weight_decay)
      for (double aux : grid.aux_coef) {
        MoeHyper h = base;
        h.lr = lr;
        h.weight_decay = wd;
        h.aux_coef = aux;
        h.seed = derive_seed(base.seed, "moe/gridpoint", points.size());
        points.push_back(h);
      }

  MoeTrainResult res;
  res.selection = selection;
  res.report.resize(points.size());
  res.models.resize(points.size());
  parallel_for(points.size(), threads, [&](std::size_t g) {
    auto& row = res.report[g];
    row.gridpoint = g;
    row.lr = points[g].lr;
    row.weight_decay = points[g].weight_decay;
    row.aux_coef = points[g].aux_coef;
    try {
      auto run = train_mixture(xtr, ytr, xva, yva, points[g]);
      row.val_auroc = run.best_val;
      row.epochs = run.epochs;
      if (xte && yte) row.test_auroc = auroc(moe_forward(run.model, *xte).scores, *yte);
      res.models[g] = std::move(run.model);
    } catch (const NumericalError& e) {
      row.status = std::string("failed: ") + e.what();
    }
  });

  auto pick = [&](auto metric) -> std::optional<std::size_t> {
    std::optional<std::size_t> best;
    for (std::size_t g = 0; g < res.report.size(); ++g) {
      if (res.report[g].status != "ok") continue;
      if (!best || metric(res.report[g]) > metric(res.report[*best]) + 1e-12) best = g;
    }
    return best;
  };
  const auto by_val = pick([](const MoeGridRow& r) { return r.val_auroc; });
  if (!by_val) throw NumericalError("every mixture gridpoint failed");
  res.selected_validation = *by_val;
  if (xte && yte) res.selected_oracle = pick([](const MoeGridRow& r) { return r.test_auroc; });
  res.selected = selection == MoeSelection::oracle ? *res.selected_oracle : *by_val;
  res.model = res.models[res.selected];
  return res;
}

// ---------------------------------------------------------------------------
// Bundle: "APMX" | u32 version=1 | u32 header length | JSON header | f64 LE params

inline void save_mixture(const MixtureModel& m, const std::filesystem::path& path) {
  nlohmann::json h;
  h["d"] = m.d;
  h["experts"] = m.hyper.experts;
  h["hidden"] = m.hyper.hidden;
  h["hyper"] = {{"lr", m.hyper.lr},       {"weight_decay", m.hyper.weight_decay},
                {"aux_coef", m.hyper.aux_coef}, {"epochs", m.hyper.epochs},
                {"batch", m.hyper.batch}, {"patience", m.hyper.patience},
                {"seed", m.hyper.seed},   {"top1", m.hyper.top1},
                {"init_scale", m.hyper.init_scale}};
  h["param_count"] = m.params.size();
  if (m.standardizer) {
    const auto& s = *m.standardizer;
    h["standardizer"] = {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
                         {"scale", std::vector<double>(s.scale.data(), s.scale.data() + s.scale.size())}};
  } else {
    h["standardizer"] = nullptr;
  }
  const std::string header = h.dump();
  std::string out = "APMX";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (Eigen::Index i = 0; i < m.params.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(m.params[i]);
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xFF));
  }
  detail::write_file(path, out);
}

inline MixtureModel load_mixture(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || bytes.compare(0, 4, "APMX") != 0) throw FormatError("not a mixture bundle");
  if (detail::get_u32(p + 4) != 1) throw FormatError("unsupported mixture bundle version");
  const std::size_t hlen = detail::get_u32(p + 8);
  if (bytes.size() < 12 + hlen) throw FormatError("truncated mixture header");
  MixtureModel m;
  try {
    const auto h = nlohmann::json::parse(bytes.substr(12, hlen));
    m.d = h.at("d").get<std::size_t>();
    m.hyper.experts = h.at("experts").get<int>();
    m.hyper.hidden = h.at("hidden").get<int>();
    const auto& hy = h.at("hyper");
    m.hyper.lr = hy.at("lr").get<double>();
    m.hyper.weight_decay = hy.at("weight_decay").get<double>();
    m.hyper.aux_coef = hy.at("aux_coef").get<double>();
    m.hyper.epochs = hy.at("epochs").get<int>();
    m.hyper.batch = hy.at("batch").get<int>();
    m.hyper.patience = hy.at("patience").get<int>();
    m.hyper.seed = hy.at("seed").get<std::uint64_t>();
    m.hyper.top1 = hy.at("top1").get<bool>();
    m.hyper.init_scale = hy.value("init_scale", MoeHyper{}.init_scale);
    if (!h.at("standardizer").is_null()) {
      const auto mean = h["standardizer"].at("mean").get<std::vector<double>>();
      const auto scale = h["standardizer"].at("scale").get<std::vector<double>>();
      m.standardizer = Standardizer{
          Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size())),
          Eigen::Map<const Vector>(scale.data(), static_cast<Eigen::Index>(scale.size()))};
    }
    const auto count = h.at("param_count").get<std::size_t>();
    if (static_cast<Eigen::Index>(count) != MixtureModel::param_count(m.d, m.hyper.experts, m.hyper.hidden))
      throw FormatError("mixture bundle: param_count does not match shape");
    if (bytes.size() != 12 + hlen + 8 * count) throw FormatError("mixture bundle: payload length mismatch");
    m.params.resize(static_cast<Eigen::Index>(count));
    const unsigned char* q = p + 12 + hlen;
    for (std::size_t i = 0; i < count; ++i, q += 8) {
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= std::uint64_t(q[k]) << (8 * k);
      m.params[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(bits);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad mixture header: ") + e.what());
  }
  return m;
}

}  // namespace probegeo

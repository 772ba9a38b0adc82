#pragma once

// Grid-valued results (train task x eval task) and the cross-task protocols
// that produce them.

#include <cmath>
#include <cstdint>
#include <map>
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

// values(i, j): row i = evaluation task, column j = training task.
struct TransferMatrix {
  std::vector<std::string> eval_tasks;
  std::vector<std::string> train_tasks;
  Matrix values;
  Matrix stddev;
  std::string metric = "auroc";
  int replicates = 1;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
};

inline TransferMatrix make_matrix(std::vector<std::string> eval_tasks,
                                  std::vector<std::string> train_tasks, std::string metric) {
  TransferMatrix m;
  m.values = Matrix::Zero(static_cast<Eigen::Index>(eval_tasks.size()),
                          static_cast<Eigen::Index>(train_tasks.size()));
  m.stddev = Matrix::Zero(m.values.rows(), m.values.cols());
  m.eval_tasks = std::move(eval_tasks);
  m.train_tasks = std::move(train_tasks);
  m.metric = std::move(metric);
  return m;
}

// Element-wise mean and sample standard deviation over replicate matrices.
inline TransferMatrix average(const std::vector<TransferMatrix>& reps) {
  if (reps.empty()) throw ConfigError("no replicates to average");
  TransferMatrix out = make_matrix(reps.front().eval_tasks, reps.front().train_tasks,
                                   reps.front().metric);
  const double r = static_cast<double>(reps.size());
  for (const auto& m : reps) out.values += m.values / r;
  if (reps.size() > 1) {
    for (const auto& m : reps) out.stddev.array() += (m.values - out.values).array().square();
    out.stddev = (out.stddev / (r - 1)).cwiseSqrt();
  }
  out.replicates = static_cast<int>(reps.size());
  return out;
}

// One evaluation set per task.
struct LabeledSet {
  Matrix x;
  Vector y;
};

inline LabeledSet labeled(const ActivationDataset& ds) { return {ds.vectors_f64(), ds.labels_f64()}; }

// Cell (i, j) = AUROC of probe j on evaluation set i.
inline TransferMatrix transfer_matrix(const std::vector<LinearProbe>& probes,
                                      const std::vector<LabeledSet>& eval_sets,
                                      const std::vector<std::string>& task_names) {
  if (probes.size() != task_names.size() || eval_sets.size() != task_names.size())
    throw ConfigError("transfer_matrix: probe, dataset and task lists must align");
  auto m = make_matrix(task_names, task_names, "auroc");
  for (std::size_t i = 0; i < eval_sets.size(); ++i)
    for (std::size_t j = 0; j < probes.size(); ++j)
      m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          auroc(score(probes[j], eval_sets[i].x), eval_sets[i].y);
  return m;
}

// Cell (i, j) = tm[i, i] - tm[i, j]: how much worse the task-j probe does on task i
// than the task-i probe.
inline TransferMatrix difference_matrix(const TransferMatrix& tm) {
  if (tm.rows() != tm.cols()) throw ConfigError("difference_matrix needs a square matrix");
  TransferMatrix out = tm;
  out.metric = tm.metric + "_difference";
  for (Eigen::Index i = 0; i < tm.rows(); ++i)
    for (Eigen::Index j = 0; j < tm.cols(); ++j)
      out.values(i, j) = tm.values(i, i) - tm.values(i, j);
  out.stddev.setZero();
  return out;
}

// Off-diagonal cells in row-major order.
inline std::vector<double> off_diagonal(const Matrix& m) {
  std::vector<double> out;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (i != j) out.push_back(m(i, j));
  return out;
}

// Correlation between probe alignment and transfer. The sign convention is
// "positive r = more aligned probes lose less AUROC": x = cosine, y = -difference.
inline CorrelationReport correlate_auroc_cosine(const std::vector<double>& diff_cells,
                                                const std::vector<double>& cosine_cells) {
  if (diff_cells.size() != cosine_cells.size())
    throw DataError("correlate_auroc_cosine: samples must be paired");
  std::vector<double> retained(diff_cells.size());
  for (std::size_t i = 0; i < diff_cells.size(); ++i) retained[i] = -diff_cells[i];
  return pearson(cosine_cells, retained);
}

// ---------------------------------------------------------------------------
// Per-task splits and probe training shared by the protocols

struct ProbeTrainingConfig {
  Penalty penalty = Penalty::l2;
  int folds = 5;
  std::vector<double> l2_grid = default_l2_grid();
  std::vector<double> l1_grid;  // empty: default ladder
  bool standardize = true;
};

struct TaskViews {
  std::vector<ActivationDataset> train, validation, calibration, test;
};

// Per-task train/validation/calibration/test views for one split seed. Tags
// with zero rows leave an empty dataset in place.
inline TaskViews task_views(const ActivationDataset& ds, const SplitAssignment& sp) {
  TaskViews v;
  auto take = [&](std::size_t k, SplitTag tag) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ds.rows(); ++i)
      if (ds.task_ids[i] == k && sp.tags[i] == tag) rows.push_back(i);
    if (rows.empty()) {
      ActivationDataset empty;
      empty.vectors.resize(0, static_cast<Eigen::Index>(ds.dim()));
      empty.task_names = ds.task_names;
      empty.meta = ds.meta;
      return empty;
    }
    return select_rows(ds, rows);
  };
  for (std::size_t k = 0; k < ds.task_count(); ++k) {
    v.train.push_back(take(k, SplitTag::train));
    v.validation.push_back(take(k, SplitTag::validation));
    v.calibration.push_back(take(k, SplitTag::calibration));
    v.test.push_back(take(k, SplitTag::test));
  }
  return v;
}

inline LabeledSet pool(const std::vector<const ActivationDataset*>& parts) {
  Eigen::Index n = 0, d = 0;
  for (const auto* p : parts) {
    n += static_cast<Eigen::Index>(p->rows());
    d = static_cast<Eigen::Index>(p->dim());
  }
  if (n == 0) throw EmptySelectionError("pooled selection is empty");
  LabeledSet out{Matrix(n, d), Vector(n)};
  Eigen::Index r = 0;
  for (const auto* p : parts) {
    const auto m = static_cast<Eigen::Index>(p->rows());
    if (m == 0) continue;
    out.x.middleRows(r, m) = p->vectors.cast<double>();
    out.y.segment(r, m) = p->labels_f64();
    r += m;
  }
  return out;
}

// Tunes and trains one probe. L2 uses k-fold CV on `train`; L1 tunes on `validation`.
inline LinearProbe train_probe(const LabeledSet& train, const LabeledSet* validation,
                               const ProbeTrainingConfig& cfg, std::uint64_t seed,
                               std::vector<std::string> tasks) {
  TrainOptions o;
  o.standardize = cfg.standardize;
  o.seed = seed;
  o.tasks = std::move(tasks);
  if (cfg.penalty == Penalty::l2) return tune_l2(train.x, train.y, cfg.folds, cfg.l2_grid, o).probe;
  if (!validation || validation->x.rows() == 0)
    throw ConfigError("L1 probes need a validation split");
  return tune_l1(train.x, train.y, validation->x, validation->y, cfg.l1_grid, o).probe;
}

// Per-task probes for one replicate.
inline std::vector<LinearProbe> per_task_probes(const ActivationDataset& ds, const TaskViews& v,
                                                const ProbeTrainingConfig& cfg, std::uint64_t seed,
                                                unsigned threads = 1) {
  std::vector<LinearProbe> probes(ds.task_count());
  parallel_for(ds.task_count(), threads, [&](std::size_t k) {
    const auto tr = labeled(v.train[k]);
    const LabeledSet va = v.validation[k].rows() ? labeled(v.validation[k]) : LabeledSet{};
    probes[k] = train_probe(tr, v.validation[k].rows() ? &va : nullptr, cfg,
                            derive_seed(seed, "probe", k), {ds.task_names[k]});
  });
  return probes;
}

struct ReplicatedTransfer {
  TransferMatrix auroc;
  std::vector<std::vector<LinearProbe>> probes;  // [replicate][task]
};

// Cell (i, j) averaged over replicates; each replicate re-splits with seed
// derive_seed(root, "replicate", r) and retrains every per-task probe.
inline ReplicatedTransfer replicated_transfer(const ActivationDataset& ds, int replicates,
                                              std::uint64_t root_seed,
                                              const SplitFractions& fractions,
                                              const ProbeTrainingConfig& cfg,
                                              unsigned threads = 1) {
  if (replicates < 1) throw ConfigError("replicates must be >= 1");
  ReplicatedTransfer out;
  std::vector<TransferMatrix> mats(static_cast<std::size_t>(replicates));
  out.probes.resize(static_cast<std::size_t>(replicates));
  parallel_for(static_cast<std::size_t>(replicates), threads, [&](std::size_t r) {
    const auto seed = derive_seed(root_seed, "replicate", r);
    const auto views = task_views(ds, split(ds, fractions, seed, true));
    out.probes[r] = per_task_probes(ds, views, cfg, seed);
    std::vector<LabeledSet> evals;
    for (const auto& t : views.test) {
      if (t.rows() == 0) throw ConfigError("transfer evaluation needs a test split");
      evals.push_back(labeled(t));
    }
    mats[r] = transfer_matrix(out.probes[r], evals, ds.task_names);
  });
  out.auroc = average(mats);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-task protocols

enum class Protocol { per_task, leave_one_out, all_tasks, param_sum, span_constrained };

inline constexpr std::array<Protocol, 5> kAllProtocols = {
    Protocol::per_task, Protocol::leave_one_out, Protocol::all_tasks, Protocol::param_sum,
    Protocol::span_constrained};

inline std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::per_task: return "per_task";
    case Protocol::leave_one_out: return "leave_one_out";
    case Protocol::all_tasks: return "all_tasks";
    case Protocol::param_sum: return "param_sum";
    case Protocol::span_constrained: return "span_constrained";
  }
  return "?";
}

inline std::optional<Protocol> protocol_from_string(std::string_view s) {
  for (auto p : kAllProtocols)
    if (to_string(p) == s) return p;
  return std::nullopt;
}

struct MultitaskTable {
  std::vector<std::string> tasks;
  std::vector<Protocol> protocols;
  Matrix auroc;   // [task][protocol], mean over replicates
  Matrix stddev;  // sample std over replicates
  int replicates = 1;

  double at(std::size_t task, Protocol p) const {
    for (std::size_t c = 0; c < protocols.size(); ++c)
      if (protocols[c] == p)
        return auroc(static_cast<Eigen::Index>(task), static_cast<Eigen::Index>(c));
    throw ConfigError("protocol not in table: " + std::string(to_string(p)));
  }
};

struct MultitaskOptions {
  ProbeTrainingConfig probe;
  bool balance_tasks = false;  // all_tasks: weight each task equally by subsampling
  int replicates = 1;
  std::uint64_t seed = 0;
  SplitFractions fractions = default_fractions();
  unsigned threads = 1;
};

namespace detail {

// Per-task-balanced pooling: each task contributes min_k |train_k| rows.
inline LabeledSet balanced_pool(const std::vector<const ActivationDataset*>& parts,
                                std::uint64_t seed) {
  std::size_t m = std::numeric_limits<std::size_t>::max();
  for (const auto* p : parts) m = std::min(m, p->rows());
  std::vector<ActivationDataset> trimmed;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    std::vector<std::size_t> rows(parts[k]->rows());
    std::iota(rows.begin(), rows.end(), 0);
    auto rng = make_rng(seed, "balance", k);
    shuffle_in_place(rows, rng);
    rows.resize(m);
    std::sort(rows.begin(), rows.end());
    trimmed.push_back(select_rows(*parts[k], rows));
  }
  std::vector<const ActivationDataset*> ptrs;
  for (const auto& t : trimmed) ptrs.push_back(&t);
  return pool(ptrs);
}

}  // namespace detail

// Target-task test AUROC under each requested protocol, averaged over replicates.
inline MultitaskTable run_multitask_protocol(const ActivationDataset& ds,
                                             const std::vector<Protocol>& protocols,
                                             const MultitaskOptions& opt) {
  const std::size_t K = ds.task_count();
  if (protocols.empty()) throw ConfigError("no multitask protocol requested");
  for (auto p : protocols)
    if (p != Protocol::per_task && K < 2)
      throw ConfigError(std::string(to_string(p)) + " needs at least 2 tasks");
  auto wants = [&](Protocol p) { return std::find(protocols.begin(), protocols.end(), p) != protocols.end(); };

  MultitaskTable table;
  table.tasks = ds.task_names;
  table.protocols = protocols;
  table.replicates = opt.replicates;
  std::vector<Matrix> reps(static_cast<std::size_t>(opt.replicates));

  parallel_for(static_cast<std::size_t>(opt.replicates), opt.threads, [&](std::size_t r) {
    const auto seed = derive_seed(opt.seed, "replicate", r);
    const auto v = task_views(ds, split(ds, opt.fractions, seed, true));
    Matrix res = Matrix::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(protocols.size()));

    const bool need_per_task = wants(Protocol::per_task) || wants(Protocol::param_sum) ||
                               wants(Protocol::span_constrained);
    std::vector<LinearProbe> per_task;
    if (need_per_task) per_task = per_task_probes(ds, v, opt.probe, seed);

    std::optional<LinearProbe> joint, summed;
    if (wants(Protocol::all_tasks)) {
      std::vector<const ActivationDataset*> parts;
      for (const auto& t : v.train) parts.push_back(&t);
      const auto data = opt.balance_tasks ? detail::balanced_pool(parts, seed) : pool(parts);
      std::vector<const ActivationDataset*> vparts;
      for (const auto& t : v.validation) vparts.push_back(&t);
      std::optional<LabeledSet> val;
      if (opt.probe.penalty == Penalty::l1) val = pool(vparts);
      joint = train_probe(data, val ? &*val : nullptr, opt.probe, derive_seed(seed, "joint"),
                          ds.task_names);
    }
    if (wants(Protocol::param_sum)) summed = sum_probes(per_task);

    for (std::size_t t = 0; t < K; ++t) {
      const auto test = labeled(v.test[t]);
      for (std::size_t c = 0; c < protocols.size(); ++c) {
        LinearProbe probe;
        switch (protocols[c]) {
          case Protocol::per_task: probe = per_task[t]; break;
          case Protocol::all_tasks: probe = *joint; break;
          case Protocol::param_sum: probe = *summed; break;
          case Protocol::leave_one_out: {
            std::vector<const ActivationDataset*> parts, vparts;
            std::vector<std::string> names;
            for (std::size_t k = 0; k < K; ++k)
              if (k != t) {
                parts.push_back(&v.train[k]);
                vparts.push_back(&v.validation[k]);
                names.push_back(ds.task_names[k]);
              }
            std::optional<LabeledSet> val;
            if (opt.probe.penalty == Penalty::l1) val = pool(vparts);
            probe = train_probe(pool(parts), val ? &*val : nullptr, opt.probe,
                                derive_seed(seed, "leave_one_out", t), names);
            break;
          }
          case Protocol::span_constrained: {
            std::vector<LinearProbe> base;
            for (std::size_t k = 0; k < K; ++k)
              if (k != t) base.push_back(per_task[k]);
            const auto tr = labeled(v.train[t]);
            const auto coef = tune_span(base, tr.x, tr.y, opt.probe.folds, opt.probe.l2_grid,
                                        derive_seed(seed, "span", t));
            probe = span_probe(coef, base);
            break;
          }
        }
        res(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) =
            auroc(score(probe, test.x), test.y);
      }
    }
    reps[r] = std::move(res);
  });

  table.auroc = Matrix::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(protocols.size()));
  table.stddev = table.auroc;
  const double R = static_cast<double>(reps.size());
  for (const auto& m : reps) table.auroc += m / R;
  if (reps.size() > 1) {
    for (const auto& m : reps) table.stddev.array() += (m - table.auroc).array().square();
    table.stddev = (table.stddev / (R - 1)).cwiseSqrt();
  }
  return table;
}

}  // namespace probegeo

#pragma once

// End-to-end experiment runner behind the command-line tool. Everything is a
// function of (config, root seed); outputs are staged as "<name>.partial" and
// renamed once every requested stage has succeeded.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "probegeo/conformal.hpp"
#include "probegeo/dataset.hpp"
#include "probegeo/error.hpp"
#include "probegeo/geometry.hpp"
#include "probegeo/moe.hpp"
#include "probegeo/probe.hpp"
#include "probegeo/report.hpp"
#include "probegeo/synthgen.hpp"
#include "probegeo/transfer.hpp"

namespace probegeo {

inline constexpr std::string_view kVersion = "0.1.0";

// Analyses selectable in a config, besides the multi-task protocols.
inline const std::vector<std::string>& analysis_names() {
  static const std::vector<std::string> names = {"transfer", "geometry", "correlation", "moe",
                                                 "conformal"};
  return names;
}

struct MoeStageConfig {
  MoeHyper hyper;
  HyperGrid grid;
  std::vector<std::string> targets;  // empty: every task
  int replicates = 1;
};

struct ConformalStageConfig {
  CalibrationOptions options;
  std::vector<CalibrationMethod> methods = {CalibrationMethod::plain, CalibrationMethod::split_cp,
                                            CalibrationMethod::meta_cp};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> datasets;
  std::optional<SyntheticSpec> synthetic;
  std::optional<std::string> token_position;  // stop_token | token_before_stop
  std::optional<int> layer;
  int replicates = 5;
  SplitFractions fractions = default_fractions();
  ProbeTrainingConfig probe;
  std::vector<std::string> protocols;
  MoeStageConfig moe;
  ConformalStageConfig conformal;
  std::string output_dir = "out";
  unsigned threads = 1;

  bool wants(std::string_view p) const {
    return std::find(protocols.begin(), protocols.end(), p) != protocols.end();
  }
};

// Accepts "stop" / "before-stop" as well as the stored tags.
inline std::string normalize_token_position(std::string_view s) {
  if (s == "stop" || s == kTokenStop) return std::string(kTokenStop);
  if (s == "before-stop" || s == kTokenBeforeStop) return std::string(kTokenBeforeStop);
  throw ConfigError("unknown token position '" + std::string(s) + "' (expected stop|before-stop)");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["datasets"] = c.datasets;
  j["synthetic"] = c.synthetic ? to_json(*c.synthetic) : nlohmann::json(nullptr);
  j["token_position"] = c.token_position ? nlohmann::json(*c.token_position) : nlohmann::json(nullptr);
  j["layer"] = c.layer ? nlohmann::json(*c.layer) : nlohmann::json(nullptr);
  j["replicates"] = c.replicates;
  nlohmann::json fr;
  for (const auto& [t, f] : c.fractions) fr[std::string(to_string(t))] = f;
  j["fractions"] = fr;
  j["regularization"] = std::string(to_string(c.probe.penalty));
  j["folds"] = c.probe.folds;
  j["l2_grid"] = c.probe.l2_grid;
  j["l1_grid"] = c.probe.l1_grid;
  j["standardize"] = c.probe.standardize;
  j["protocols"] = c.protocols;
  j["moe"] = {{"experts", c.moe.hyper.experts}, {"hidden", c.moe.hyper.hidden},
              {"epochs", c.moe.hyper.epochs},   {"batch", c.moe.hyper.batch},
              {"patience", c.moe.hyper.patience}, {"top1", c.moe.hyper.top1},
              {"init_scale", c.moe.hyper.init_scale},
              {"lr", c.moe.grid.lr},            {"weight_decay", c.moe.grid.weight_decay},
              {"aux_coef", c.moe.grid.aux_coef}, {"targets", c.moe.targets},
              {"replicates", c.moe.replicates}};
  std::vector<std::string> methods;
  for (auto m : c.conformal.methods) methods.emplace_back(to_string(m));
  j["conformal"] = {{"alpha", c.conformal.options.alpha},
                    {"delta", c.conformal.options.delta},
                    {"subtask_size", c.conformal.options.subtask_size},
                    {"methods", methods}};
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  return j;
}

// Unknown protocol names and malformed values are configuration errors. A manifest
// written by a previous run is accepted too (its "config" member is used).
inline ExperimentConfig config_from_json(const nlohmann::json& root) {
  const nlohmann::json& j = root.contains("config") && root["config"].is_object() ? root["config"] : root;
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("datasets")) c.datasets = j["datasets"].get<std::vector<std::string>>();
    if (j.contains("synthetic") && !j["synthetic"].is_null())
      c.synthetic = synthetic_spec_from_json(j["synthetic"]);
    if (j.contains("token_position") && !j["token_position"].is_null())
      c.token_position = normalize_token_position(j["token_position"].get<std::string>());
    if (j.contains("layer") && !j["layer"].is_null()) c.layer = j["layer"].get<int>();
    c.replicates = j.value("replicates", c.replicates);
    if (j.contains("fractions")) {
      c.fractions.clear();
      for (const auto& [k, v] : j["fractions"].items()) c.fractions[split_tag_from_string(k)] = v.get<double>();
    }
    const auto reg = j.value("regularization", std::string("l2"));
    if (reg != "l1" && reg != "l2") throw ConfigError("regularization must be l1 or l2");
    c.probe.penalty = reg == "l1" ? Penalty::l1 : Penalty::l2;
    c.probe.folds = j.value("folds", c.probe.folds);
    if (j.contains("l2_grid")) c.probe.l2_grid = j["l2_grid"].get<std::vector<double>>();
    if (j.contains("l1_grid")) c.probe.l1_grid = j["l1_grid"].get<std::vector<double>>();
    c.probe.standardize = j.value("standardize", c.probe.standardize);
    if (j.contains("protocols")) c.protocols = j["protocols"].get<std::vector<std::string>>();
    if (j.contains("moe")) {
      const auto& m = j["moe"];
      c.moe.hyper.experts = m.value("experts", c.moe.hyper.experts);
      c.moe.hyper.hidden = m.value("hidden", c.moe.hyper.hidden);
      c.moe.hyper.epochs = m.value("epochs", c.moe.hyper.epochs);
      c.moe.hyper.batch = m.value("batch", c.moe.hyper.batch);
      c.moe.hyper.patience = m.value("patience", c.moe.hyper.patience);
      c.moe.hyper.top1 = m.value("top1", c.moe.hyper.top1);
      c.moe.hyper.init_scale = m.value("init_scale", c.moe.hyper.init_scale);
      if (m.contains("lr")) c.moe.grid.lr = m["lr"].get<std::vector<double>>();
      if (m.contains("weight_decay")) c.moe.grid.weight_decay = m["weight_decay"].get<std::vector<double>>();
      if (m.contains("aux_coef")) c.moe.grid.aux_coef = m["aux_coef"].get<std::vector<double>>();
      if (m.contains("targets")) c.moe.targets = m["targets"].get<std::vector<std::string>>();
      c.moe.replicates = m.value("replicates", c.moe.replicates);
    }
    if (j.contains("conformal")) {
      const auto& m = j["conformal"];
      c.conformal.options.alpha = m.value("alpha", c.conformal.options.alpha);
      c.conformal.options.delta = m.value("delta", c.conformal.options.delta);
      c.conformal.options.subtask_size = m.value("subtask_size", c.conformal.options.subtask_size);
      if (m.contains("methods")) {
        c.conformal.methods.clear();
        for (const auto& s : m["methods"]) {
          const auto method = calibration_method_from_string(s.get<std::string>());
          if (!method) throw ConfigError("unknown calibration method " + s.get<std::string>());
          c.conformal.methods.push_back(*method);
        }
      }
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
  if (c.protocols.empty()) throw ConfigError("config lists no protocols");
  for (const auto& p : c.protocols) {
    const bool known = protocol_from_string(p).has_value() ||
                       std::find(analysis_names().begin(), analysis_names().end(), p) != analysis_names().end();
    if (!known) throw ConfigError("unknown protocol '" + p + "'");
  }
  if (c.datasets.empty() && !c.synthetic) throw ConfigError("config names neither datasets nor a synthetic spec");
  if (c.replicates < 1) throw ConfigError("replicates must be >= 1");
  if (c.probe.folds < 2) throw ConfigError("folds must be >= 2");
  return c;
}

// Loads (or generates) the dataset and applies the token-position / layer filters.
inline ActivationDataset load_experiment_data(const ExperimentConfig& c) {
  std::vector<ActivationDataset> parts;
  if (c.synthetic) parts.push_back(generate(*c.synthetic));
  for (const auto& path : c.datasets) {
    if (!std::filesystem::exists(path)) throw ConfigError("dataset not found: " + path);
    parts.push_back(read_dataset(path));
  }
  std::vector<ActivationDataset> kept;
  for (auto& p : parts) {
    if (c.token_position && p.meta.token_position != *c.token_position) continue;
    if (c.layer && p.meta.layer != *c.layer) continue;
    kept.push_back(std::move(p));
  }
  if (kept.empty()) throw ConfigError("no dataset matches the token-position/layer filters");
  if (kept.size() == 1) return std::move(kept.front());
  return merge_datasets(kept);
}

struct ExperimentOutputs {
  std::map<std::string, std::string> files;  // name -> content, in write order by name
};

namespace detail {

class StagedWriter {
 public:
  explicit StagedWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  void put(const std::string& name, const std::string& content) {
    write_file(dir_ / (name + ".partial"), content);
    names_.push_back(name);
    out_.files[name] = content;
  }

  void commit() {
    for (const auto& n : names_) std::filesystem::rename(dir_ / (n + ".partial"), dir_ / n);
  }

  const ExperimentOutputs& outputs() const { return out_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> names_;
  ExperimentOutputs out_;
};

inline std::vector<std::size_t> moe_targets(const ActivationDataset& ds, const MoeStageConfig& m) {
  std::vector<std::size_t> out;
  if (m.targets.empty()) {
    for (std::size_t k = 0; k < ds.task_count(); ++k) out.push_back(k);
    return out;
  }
  for (const auto& t : m.targets) {
    const int k = ds.task_index(t);
    if (k < 0) throw ConfigError("moe target task not in dataset: " + t);
    out.push_back(static_cast<std::size_t>(k));
  }
  return out;
}

// Calibration rows come from the calibration split, or from validation when no
// calibration share was requested.
inline const ActivationDataset& calibration_view(const TaskViews& v, std::size_t k) {
  return v.calibration[k].rows() ? v.calibration[k] : v.validation[k];
}

}  // namespace detail

// Thrown when a stage fails; carries the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::exception& cause, int code)
      : Error("stage '" + stage + "' failed: " + cause.what()), stage_(std::move(stage)), code_(code) {}
  const std::string& stage() const noexcept { return stage_; }
  int exit_code() const noexcept { return code_; }

 private:
  std::string stage_;
  int code_;
};

inline int exit_code_for(const std::exception& e) {
  if (const auto* s = dynamic_cast<const StageError*>(&e)) return s->exit_code();
  if (dynamic_cast<const ConfigError*>(&e)) return static_cast<int>(ExitCode::config_error);
  if (dynamic_cast<const NumericalError*>(&e)) return static_cast<int>(ExitCode::numerical_failure);
  return static_cast<int>(ExitCode::data_error);
}

inline ExperimentOutputs run_experiment(const ExperimentConfig& c) {
  const auto ds = load_experiment_data(c);
  detail::StagedWriter out(c.output_dir);
  const std::size_t K = ds.task_count();

  auto stage = [&](const std::string& name, auto&& body) {
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e, exit_code_for(e));
    }
  };

  std::optional<ReplicatedTransfer> transfer;
  std::optional<TransferMatrix> diff, cos;
  const bool need_transfer = c.wants("transfer") || c.wants("geometry") || c.wants("correlation");

  if (need_transfer) {
    stage("transfer", [&] {
      transfer = replicated_transfer(ds, c.replicates, c.seed, c.fractions, c.probe, c.threads);
      diff = difference_matrix(transfer->auroc);
      if (c.wants("transfer")) {
        out.put("transfer_auroc.csv", matrix_csv(transfer->auroc));
        out.put("transfer_diff.csv", matrix_csv(*diff));
        out.put("transfer_auroc.svg", render_heatmap(transfer->auroc, "AUROC (rows: eval, cols: train)"));
        out.put("transfer_diff.svg", render_heatmap(*diff, "AUROC difference to in-task probe"));
      }
    });
  }

  if (c.wants("geometry") || c.wants("correlation")) {
    stage("geometry", [&] {
      std::vector<TransferMatrix> cos_reps;
      for (const auto& probes : transfer->probes) cos_reps.push_back(cosine_matrix(probes));
      cos = average(cos_reps);
      cos->eval_tasks = ds.task_names;
      cos->train_tasks = ds.task_names;
      if (!c.wants("geometry")) return;
      out.put("cosine.csv", matrix_csv(*cos));
      out.put("cosine.svg", render_heatmap(*cos, "Cosine similarity between probes"));

      ProbeTrainingConfig l1 = c.probe;
      l1.penalty = Penalty::l1;
      std::vector<TransferMatrix> overlap_reps;
      std::optional<SignedSupport> supports;
      for (int r = 0; r < c.replicates; ++r) {
        const auto seed = derive_seed(c.seed, "replicate", static_cast<std::uint64_t>(r));
        const auto views = task_views(ds, split(ds, c.fractions, seed, true));
        const auto probes = per_task_probes(ds, views, l1, derive_seed(seed, "l1"), c.threads);
        overlap_reps.push_back(support_overlap(probes));
        if (r == 0) supports = signed_support(probes);
      }
      auto overlap = average(overlap_reps);
      overlap.eval_tasks = overlap.train_tasks = ds.task_names;
      out.put("overlap.csv", matrix_csv(overlap));
      out.put("overlap.svg", render_heatmap(overlap, "Support overlap (Jaccard %)"));
      out.put("supports.csv", supports_csv(*supports));
      if (ds.rows() >= 3 && ds.dim() >= 2) out.put("pca.csv", projection_csv(pca_project(ds), ds.task_names));
    });
  }

  if (c.wants("correlation")) {
    stage("correlation", [&] {
      auto rep = correlate_auroc_cosine(off_diagonal(diff->values), off_diagonal(cos->values));
      auto j = to_json(rep);
      j["diagonal_excluded"] = true;
      j["sign_convention"] = "x = probe cosine, y = -(AUROC difference); positive r: aligned probes transfer better";
      out.put("correlation.json", j.dump(2) + "\n");
    });
  }

  std::vector<Protocol> protocols;
  for (const auto& p : c.protocols)
    if (auto pr = protocol_from_string(p)) protocols.push_back(*pr);
  if (!protocols.empty()) {
    stage("multitask", [&] {
      MultitaskOptions o;
      o.probe = c.probe;
      o.replicates = c.replicates;
      o.seed = c.seed;
      o.fractions = c.fractions;
      o.threads = c.threads;
      out.put("multitask.csv", multitask_csv(run_multitask_protocol(ds, protocols, o)));
    });
  }

  if (c.wants("moe")) {
    stage("moe", [&] {
      if (K < 2) throw ConfigError("moe needs at least 2 tasks");
      std::string csv = moe_csv_header();
      for (int r = 0; r < c.moe.replicates; ++r) {
        const auto seed = derive_seed(c.seed, "replicate", static_cast<std::uint64_t>(r));
        const auto v = task_views(ds, split(ds, c.fractions, seed, true));
        for (auto t : detail::moe_targets(ds, c.moe)) {
          std::vector<const ActivationDataset*> tr, va;
          for (std::size_t k = 0; k < K; ++k)
            if (k != t) {
              tr.push_back(&v.train[k]);
              va.push_back(&v.validation[k]);
            }
          const auto train = pool(tr), val = pool(va);
          const auto test = labeled(v.test[t]);
          MoeHyper h = c.moe.hyper;
          h.seed = derive_seed(seed, "moe", t);
          const auto res = moe_train(train.x, train.y, val.x, val.y, c.moe.grid, h, MoeSelection::oracle,
                                     &test.x, &test.y, c.threads);
          csv += moe_csv_rows(ds.task_names[t], static_cast<std::size_t>(r), res);
        }
      }
      out.put("moe.csv", csv);
    });
  }

  if (c.wants("conformal")) {
    stage("conformal", [&] {
      if (K < 2) throw ConfigError("conformal needs at least 2 tasks");
      std::vector<CalibrationScenario> scenarios;
      for (int r = 0; r < c.replicates; ++r) {
        const auto seed = derive_seed(c.seed, "replicate", static_cast<std::uint64_t>(r));
        const auto v = task_views(ds, split(ds, c.fractions, seed, true));
        for (std::size_t t = 0; t < K; ++t) {
          std::vector<const ActivationDataset*> tr;
          std::vector<std::string> names;
          for (std::size_t k = 0; k < K; ++k)
            if (k != t) {
              tr.push_back(&v.train[k]);
              names.push_back(ds.task_names[k]);
            }
          ProbeTrainingConfig pc = c.probe;
          pc.penalty = Penalty::l2;
          const auto probe = train_probe(pool(tr), nullptr, pc, derive_seed(seed, "conformal", t), names);
          CalibrationScenario sc;
          for (std::size_t k = 0; k < K; ++k) {
            if (k == t) continue;
            const auto& cal = detail::calibration_view(v, k);
            if (cal.rows() == 0) throw ConfigError("conformal needs a calibration or validation split");
            const Vector s = score(probe, cal.vectors_f64());
            std::vector<double> neg;
            for (std::size_t i = 0; i < cal.rows(); ++i)
              if (cal.labels[i] < 0) neg.push_back(s[static_cast<Eigen::Index>(i)]);
            sc.cal_negatives.push_back(std::move(neg));
          }
          const auto test = labeled(v.test[t]);
          const Vector s = score(probe, test.x);
          sc.test_tasks.push_back({std::vector<double>(s.data(), s.data() + s.size()),
                                   std::vector<double>(test.y.data(), test.y.data() + test.y.size())});
          scenarios.push_back(std::move(sc));
        }
      }
      const auto rows = calibration_report(scenarios, c.conformal.methods, c.conformal.options,
                                           derive_seed(c.seed, "conformal"));
      out.put("conformal.csv", conformal_csv(rows));
    });
  }

  nlohmann::json manifest;
  manifest["config"] = to_json(c);
  manifest["version"] = {{"probegeo", std::string(kVersion)}, {"dataset_format", "APGT v1"}};
  std::vector<std::uint64_t> rep_seeds;
  for (int r = 0; r < c.replicates; ++r) rep_seeds.push_back(derive_seed(c.seed, "replicate", static_cast<std::uint64_t>(r)));
  manifest["seeds"] = {{"root", c.seed}, {"replicates", rep_seeds}};
  manifest["dataset"] = {{"n", ds.rows()},
                         {"d", ds.dim()},
                         {"tasks", ds.task_names},
                         {"model", ds.meta.model},
                         {"layer", ds.meta.layer},
                         {"token_position", ds.meta.token_position}};
  manifest["standardization"] = c.probe.standardize ? "per-dimension, fitted on training rows" : "off";
  std::vector<std::string> names;
  for (const auto& [n, _] : out.outputs().files) names.push_back(n);
  manifest["outputs"] = names;
  out.put("manifest.json", manifest.dump(2) + "\n");
  out.commit();
  ExperimentOutputs result = out.outputs();
  return result;
}

}  // namespace probegeo

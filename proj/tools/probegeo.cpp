// probegeo command-line tool.
//
//   probegeo synth --spec spec.json --out data.apgt
//   probegeo run config.json [--out dir] [--seed N]
//   probegeo transfer --data a.apgt [--data b.apgt] --out dir
//   probegeo render matrix.csv --out matrix.svg

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "probegeo/probegeo.hpp"

namespace pg = probegeo;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
  std::optional<std::string> token_position;
  std::optional<int> layer;
};

// Shared by the analysis subcommands: either a config file or dataset paths.
struct AnalysisArgs {
  std::string config;
  std::vector<std::string> data;
  std::string synthetic;
  int replicates = 0;
  std::string regularization;
  std::vector<std::string> protocols;
  bool top1 = false;
};

nlohmann::json read_json(const std::string& path) {
  if (!std::filesystem::exists(path)) throw pg::ConfigError("file not found: " + path);
  try {
    return nlohmann::json::parse(pg::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw pg::ConfigError(path + ": " + e.what());
  }
}

void apply_globals(pg::ExperimentConfig& c, const Globals& g) {
  if (g.seed) c.seed = *g.seed;
  if (g.out) c.output_dir = *g.out;
  if (g.threads) c.threads = std::max(1u, *g.threads);
  if (g.token_position) c.token_position = pg::normalize_token_position(*g.token_position);
  if (g.layer) c.layer = *g.layer;
}

pg::ExperimentConfig build_config(const AnalysisArgs& a, const Globals& g,
                                  const std::vector<std::string>& default_protocols) {
  nlohmann::json j = a.config.empty() ? nlohmann::json::object() : read_json(a.config);
  if (j.contains("config") && j["config"].is_object()) j = j["config"];
  if (!a.data.empty()) j["datasets"] = a.data;
  if (!a.synthetic.empty()) j["synthetic"] = read_json(a.synthetic);
  if (a.replicates > 0) j["replicates"] = a.replicates;
  if (!a.regularization.empty()) j["regularization"] = a.regularization;
  if (!a.protocols.empty()) j["protocols"] = a.protocols;
  else if (!default_protocols.empty()) j["protocols"] = default_protocols;
  if (a.top1) j["moe"]["top1"] = true;
  auto c = pg::config_from_json(j);
  apply_globals(c, g);
  return c;
}

void print_matrix(const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) std::printf("%s%8.4f", j ? " " : "", m(i, j));
    std::printf("\n");
  }
}

void report_outputs(const pg::ExperimentOutputs& o, const std::string& dir) {
  for (const auto& [name, _] : o.files) std::printf("wrote %s\n", (std::filesystem::path(dir) / name).c_str());
}

int run_analysis(const AnalysisArgs& a, const Globals& g, const std::vector<std::string>& protocols) {
  const auto c = build_config(a, g, protocols);
  report_outputs(pg::run_experiment(c), c.output_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Truthfulness-probe geometry toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Root seed");
  app.add_option("--out", g.out, "Output path (file for synth/render, directory otherwise)");
  app.add_option("--threads", g.threads, "Worker threads");
  app.add_option("--token-position", g.token_position, "Token position filter")
      ->check(CLI::IsMember({"stop", "before-stop"}));
  app.add_option("--layer", g.layer, "Layer filter");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string spec_path;
  std::optional<std::size_t> sd, sk, sn;
  std::optional<double> srho, smargin, ssigma;
  synth->add_option("--spec", spec_path, "Synthetic spec JSON");
  synth->add_option("--d", sd, "Dimension");
  synth->add_option("--tasks,-K", sk, "Number of tasks");
  synth->add_option("--n", sn, "Rows per task");
  synth->add_option("--rho", srho, "Pairwise cosine of planted directions");
  synth->add_option("--margin", smargin, "Class margin");
  synth->add_option("--sigma", ssigma, "Noise standard deviation");

  // run
  auto* run = app.add_subcommand("run", "Run an experiment config (or a previous manifest.json)");
  std::string run_config;
  run->add_option("config", run_config, "Config JSON")->required();

  // analysis subcommands
  AnalysisArgs aa;
  auto add_analysis = [&](const std::string& name, const std::string& help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", aa.config, "Config JSON (flags override it)");
    s->add_option("--data", aa.data, "APGT dataset file(s)");
    s->add_option("--synthetic", aa.synthetic, "Synthetic spec JSON instead of files");
    s->add_option("--replicates", aa.replicates, "Split replicates");
    s->add_option("--regularization", aa.regularization, "l1 or l2")->check(CLI::IsMember({"l1", "l2"}));
    return s;
  };
  auto* geometry = add_analysis("geometry", "Cosine, support overlap, supports and PCA");
  auto* transfer = add_analysis("transfer", "Cross-task AUROC transfer matrix");
  auto* multitask = add_analysis("multitask", "Multi-task training protocols");
  multitask->add_option("--protocols", aa.protocols, "per_task leave_one_out all_tasks param_sum span_constrained")
      ->delimiter(',');
  auto* moe = add_analysis("moe", "Mixture-of-experts leave-one-out probes");
  moe->add_flag("--top1", aa.top1, "Hard top-1 routing");
  auto* conformal = add_analysis("conformal", "Threshold calibration report");

  // render
  auto* render = app.add_subcommand("render", "Render a matrix CSV as an SVG heatmap");
  std::string render_in, render_title;
  render->add_option("matrix", render_in, "Matrix CSV")->required();
  render->add_option("--title", render_title, "Heatmap title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(pg::ExitCode::config_error);
  }

  try {
    if (*synth) {
      pg::SyntheticSpec spec = spec_path.empty() ? pg::SyntheticSpec{} : pg::synthetic_spec_from_json(read_json(spec_path));
      if (sd) spec.d = *sd;
      if (sk) spec.tasks = *sk;
      if (sn) spec.n_per_task = *sn;
      if (srho) spec.direction_cosine = *srho;
      if (smargin) spec.margin = *smargin;
      if (ssigma) spec.noise_sigma = *ssigma;
      if (g.seed) spec.seed = *g.seed;
      if (g.layer) spec.layer = *g.layer;
      if (g.token_position) spec.token_position = pg::normalize_token_position(*g.token_position);
      spec.validate();
      const auto ds = pg::generate(spec);
      const std::string out = g.out.value_or("synthetic.apgt");
      pg::write_dataset(ds, out);
      const auto dirs = pg::planted_directions(spec);
      Eigen::MatrixXd cos(dirs.size(), dirs.size());
      for (std::size_t i = 0; i < dirs.size(); ++i)
        for (std::size_t j = 0; j < dirs.size(); ++j)
          cos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = dirs[i].dot(dirs[j]);
      std::printf("wrote %s (n=%zu, d=%zu, K=%zu)\nplanted direction cosines:\n", out.c_str(), ds.rows(),
                  ds.dim(), ds.task_count());
      print_matrix(cos);
      return 0;
    }
    if (*run) {
      auto c = pg::config_from_json(read_json(run_config));
      apply_globals(c, g);
      report_outputs(pg::run_experiment(c), c.output_dir);
      return 0;
    }
    if (*geometry) return run_analysis(aa, g, {"geometry"});
    if (*transfer) return run_analysis(aa, g, {"transfer"});
    if (*multitask) return run_analysis(aa, g, {"per_task", "leave_one_out", "all_tasks", "param_sum", "span_constrained"});
    if (*moe) return run_analysis(aa, g, {"moe"});
    if (*conformal) return run_analysis(aa, g, {"conformal"});
    if (*render) {
      const auto m = pg::parse_matrix_csv(pg::read_text(render_in));
      const std::string out = g.out.value_or(std::filesystem::path(render_in).replace_extension(".svg").string());
      pg::write_text(out, pg::render_heatmap(m, render_title));
      std::printf("wrote %s\n", out.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return pg::exit_code_for(e);
  }
  return 0;
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "probegeo/pipeline.hpp"
#include "probegeo/report.hpp"

using namespace probegeo;
namespace fs = std::filesystem;

namespace {

TransferMatrix fixture_2x2() {
  auto m = make_matrix({"gsm8k", "trivia"}, {"gsm8k", "trivia"}, "auroc");
  m.values << 0.9, 0.6, 0.55, 0.85;
  return m;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "probegeo_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PROBEGEO_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json small_config(const fs::path& out, std::vector<std::string> protocols) {
  return {{"seed", 3},
          {"synthetic", {{"d", 12}, {"K", 3}, {"n_per_task", 200}, {"margin", 2.0}, {"seed", 3}}},
          {"replicates", 2},
          {"protocols", protocols},
          {"output_dir", out.string()}};
}

}  // namespace

TEST(FormatNumber, Basics) {
  EXPECT_EQ(format_number(0.5), "0.500000");
  EXPECT_EQ(format_number(-0.0), "0.000000");
  EXPECT_EQ(format_number(kInf), "inf");
  EXPECT_EQ(format_number(-kInf), "-inf");
  EXPECT_EQ(format_number(std::nan("")), "nan");
}

TEST(MatrixCsv, RoundTrip) {
  const auto m = fixture_2x2();
  const auto text = matrix_csv(m);
  EXPECT_EQ(text, "eval\\train,gsm8k,trivia\ngsm8k,0.900000,0.600000\ntrivia,0.550000,0.850000\n");
  const auto back = parse_matrix_csv(text);
  EXPECT_EQ(back.eval_tasks, m.eval_tasks);
  EXPECT_EQ(back.values, m.values);
}

TEST(Heatmap, GoldenFile) {
  const auto svg = render_heatmap(fixture_2x2(), "AUROC");
  const auto golden = read_text(fs::path(PROBEGEO_TEST_DATA_DIR) / "golden" / "heatmap_2x2.svg");
  EXPECT_EQ(svg, golden);
  EXPECT_EQ(svg, render_heatmap(fixture_2x2(), "AUROC"));
}

TEST(Heatmap, SingleCellAndConstant) {
  auto one = make_matrix({"a"}, {"a"}, "auroc");
  one.values << 0.73;
  const auto svg = render_heatmap(one);
  EXPECT_EQ(count(svg, "stroke=\"#cccccc\""), 1u);
  EXPECT_NE(svg.find(">0.73<"), std::string::npos);

  auto flat = make_matrix({"a", "b", "c"}, {"a", "b", "c"}, "auroc");
  flat.values.setConstant(0.5);
  const auto fsvg = render_heatmap(flat);
  EXPECT_EQ(count(fsvg, "stroke=\"#cccccc\""), 9u);
  // No spread: every cell takes the low end of the scale.
  EXPECT_EQ(count(fsvg, "fill=\"#ffffff\" stroke=\"#cccccc\""), 9u);
}

TEST(Heatmap, Errors) {
  EXPECT_THROW(render_heatmap(make_matrix({}, {}, "auroc")), DataError);
  auto bad = fixture_2x2();
  bad.values(0, 1) = std::nan("");
  EXPECT_THROW(render_heatmap(bad), DataError);
}

TEST(Config, ValidationErrors) {
  EXPECT_THROW(config_from_json({{"synthetic", nlohmann::json::object()}, {"protocols", nlohmann::json::array()}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"synthetic", nlohmann::json::object()}, {"protocols", {"nope"}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"protocols", {"transfer"}}}), ConfigError);
  auto c = config_from_json({{"datasets", {"/definitely/missing.apgt"}}, {"protocols", {"transfer"}}});
  EXPECT_THROW(run_experiment(c), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  const auto c = config_from_json(small_config("x", {"per_task", "moe"}));
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
  nlohmann::json manifest = {{"config", to_json(c)}};
  EXPECT_EQ(to_json(config_from_json(manifest)), to_json(c));
}

TEST(Pipeline, SingleTaskPerTask) {
  const auto out = fresh_dir("single");
  auto j = small_config(out, {"per_task"});
  j["synthetic"]["K"] = 1;
  const auto res = run_experiment(config_from_json(j));
  const auto csv = read_text(out / "multitask.csv");
  EXPECT_EQ(count(csv, "\n"), 2u);  // header + one cell
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  EXPECT_TRUE(res.files.count("multitask.csv"));
  for (const auto& e : fs::directory_iterator(out)) EXPECT_NE(e.path().extension(), ".partial");
}

TEST(Pipeline, RerunIsByteIdenticalAndManifestReplays) {
  const auto a = fresh_dir("rerun_a"), b = fresh_dir("rerun_b");
  const std::vector<std::string> protocols = {"transfer", "geometry", "correlation", "per_task", "param_sum",
                                              "conformal"};
  const auto ra = run_experiment(config_from_json(small_config(a, protocols)));
  const auto rb = run_experiment(config_from_json(small_config(a, protocols)));
  EXPECT_EQ(ra.files, rb.files);
  for (const auto& name : {"transfer_auroc.csv", "transfer_diff.csv", "cosine.csv", "overlap.csv",
                           "supports.csv", "correlation.json", "multitask.csv", "conformal.csv",
                           "transfer_auroc.svg", "manifest.json"})
    EXPECT_TRUE(ra.files.count(name)) << name;

  // The manifest alone reproduces every output (written elsewhere).
  auto manifest = nlohmann::json::parse(read_text(a / "manifest.json"));
  manifest["config"]["output_dir"] = b.string();
  const auto rc = run_experiment(config_from_json(manifest));
  for (const auto& [name, content] : ra.files)
    if (name != "manifest.json") EXPECT_EQ(rc.files.at(name), content) << name;
}

TEST(Pipeline, StageFailureNamesStageAndLeavesPartials) {
  const auto out = fresh_dir("failing");
  auto j = small_config(out, {"transfer", "moe"});
  j["moe"] = {{"targets", {"no_such_task"}}};
  try {
    run_experiment(config_from_json(j));
    FAIL() << "expected a stage failure";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "moe");
    EXPECT_EQ(e.exit_code(), static_cast<int>(ExitCode::config_error));
  }
  EXPECT_TRUE(fs::exists(out / "transfer_auroc.csv.partial"));
  EXPECT_FALSE(fs::exists(out / "transfer_auroc.csv"));
  EXPECT_FALSE(fs::exists(out / "manifest.json"));
}

TEST(Cli, SynthIsDeterministicAndLoadable) {
  const auto dir = fresh_dir("cli_synth");
  const auto a = dir / "a.apgt", b = dir / "b.apgt";
  ASSERT_EQ(run_cli("synth --d 16 --tasks 3 --n 50 --rho 0.4 --seed 5 --out " + a.string()), 0);
  ASSERT_EQ(run_cli("synth --d 16 --tasks 3 --n 50 --rho 0.4 --seed 5 --out " + b.string()), 0);
  EXPECT_EQ(read_text(a), read_text(b));
  const auto ds = read_dataset(a);
  EXPECT_EQ(ds.rows(), 150u);
  EXPECT_EQ(ds.dim(), 16u);
}

TEST(Cli, SynthPrintsPlantedCosines) {
  const auto dir = fresh_dir("cli_print");
  const auto log = dir / "stdout.txt";
  const std::string cmd = std::string(PROBEGEO_CLI) + " synth --d 10 --tasks 2 --n 20 --rho 0.3 --out " +
                          (dir / "d.apgt").string() + " > " + log.string();
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  const auto text = read_text(log);
  SyntheticSpec s{.d = 10, .tasks = 2, .n_per_task = 20, .direction_cosine = 0.3};
  const auto v = planted_directions(s);
  char expect[32];
  std::snprintf(expect, sizeof expect, "%8.4f", v[0].dot(v[1]));
  EXPECT_NE(text.find(expect), std::string::npos) << text;
  EXPECT_NE(text.find("  0.3000"), std::string::npos) << text;
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli_codes");
  EXPECT_EQ(run_cli("run " + (dir / "missing.json").string()), 2);
  EXPECT_EQ(run_cli("bogus-subcommand"), 2);
  {
    std::ofstream(dir / "junk.apgt") << "XXXXjunkjunkjunk";
  }
  EXPECT_EQ(run_cli("transfer --data " + (dir / "junk.apgt").string() + " --out " + (dir / "o").string()), 3);
  EXPECT_EQ(run_cli("synth --d 3 --tasks 4 --out " + (dir / "x.apgt").string()), 2);
}

TEST(Cli, RunAndRenderAreDeterministic) {
  const auto dir = fresh_dir("cli_run");
  const auto cfg = dir / "config.json";
  {
    std::ofstream(cfg) << small_config(dir / "unused", {"transfer", "geometry"}).dump();
  }
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out " + (dir / "r1").string()), 0);
  ASSERT_EQ(run_cli("run " + cfg.string() + " --out " + (dir / "r2").string()), 0);
  for (const auto& name : {"transfer_auroc.csv", "cosine.csv", "overlap.csv", "transfer_auroc.svg", "supports.csv"})
    EXPECT_EQ(read_text(dir / "r1" / name), read_text(dir / "r2" / name)) << name;
  ASSERT_EQ(run_cli("render " + (dir / "r1" / "cosine.csv").string() + " --out " + (dir / "c.svg").string()), 0);
  EXPECT_EQ(read_text(dir / "c.svg"), render_heatmap(parse_matrix_csv(read_text(dir / "r1" / "cosine.csv"))));
}

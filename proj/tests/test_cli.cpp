#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "sharedepth/config.hpp"
#include "test_util.hpp"

using namespace sharedepth;

namespace {

struct RunOutput {
  int status = -1;
  std::string text;
};

RunOutput run_cli(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string(SHAREDEPTH_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunOutput out;
  out.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  out.text = ss.str();
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kToy = std::string(SHAREDEPTH_CONFIGS) + "/toy.json";

}  // namespace

TEST(Cli, VerifyLemmaPasses) {
  const auto dir = testutil::temp_dir("cli_lemma");
  const auto r = run_cli("verify-lemma --trials 1000 --seed 1", dir / "log");
  EXPECT_EQ(r.status, 0) << r.text;
  EXPECT_NE(r.text.find("max |residual|"), std::string::npos);
}

TEST(Cli, FullRunOnToyConfig) {
  const auto dir = testutil::temp_dir("cli_full");
  const auto r = run_cli("full-run --config " + kToy + " --out " + (dir / "run").string(), dir / "log");
  ASSERT_EQ(r.status, 0) << r.text;
  const RunDir run(dir / "run");
  const auto sel = read_json(run.latest("selection", "json"));
  const auto cfg = load_config(kToy);
  const auto cs = cfg.run.c_candidates();
  EXPECT_NE(std::find(cs.begin(), cs.end(), sel.at("C").get<int>()), cs.end());
  const double w = sel.at("w_A").get<double>();
  EXPECT_NE(std::find(cfg.run.grid_w.begin(), cfg.run.grid_w.end(), w), cfg.run.grid_w.end());
  const std::string metrics = slurp(run.latest("metrics", "csv"));
  EXPECT_NE(metrics.find('\n'), metrics.rfind('\n'));  // header plus a data row
  EXPECT_TRUE(run.has("config", "json"));
  EXPECT_EQ(run.latest_version("model", "bin"), 2);  // assembled, then refined
  EXPECT_NE(r.text.find("proxy table"), std::string::npos);
}

TEST(Cli, SnapshotRerunIsDeterministicAndVersioned) {
  const auto dir = testutil::temp_dir("cli_rerun");
  ASSERT_EQ(run_cli("full-run --no-refine --config " + kToy + " --out " + (dir / "a").string(), dir / "log1").status, 0);
  const RunDir a(dir / "a");
  const std::string snapshot = a.latest("config", "json").string();
  const auto r = run_cli("full-run --config " + snapshot + " --out " + (dir / "a").string(), dir / "log2");
  ASSERT_EQ(r.status, 0) << r.text;
  EXPECT_EQ(a.latest_version("config", "json"), 2);
  EXPECT_EQ(slurp(a.versioned("model", "bin", 1)), slurp(a.versioned("model", "bin", 2)));
  EXPECT_EQ(slurp(a.versioned("selection", "json", 1)), slurp(a.versioned("selection", "json", 2)));
  EXPECT_EQ(slurp(a.versioned("metrics", "csv", 1)), slurp(a.versioned("metrics", "csv", 2)));
}

TEST(Cli, StepwiseMatchesFullRun) {
  const auto dir = testutil::temp_dir("cli_steps");
  const std::string common = " --no-refine --config " + kToy + " --out " + (dir / "s").string();
  for (const char* step : {"gen-data", "stage1", "search", "stage2", "assemble", "eval"})
    ASSERT_EQ(run_cli(std::string(step) + common, dir / "log").status, 0) << step;
  ASSERT_EQ(run_cli("full-run" + std::string(" --no-refine --config ") + kToy + " --out " + (dir / "f").string(),
                    dir / "log")
                .status,
            0);
  const RunDir s(dir / "s"), f(dir / "f");
  EXPECT_EQ(slurp(s.latest("model", "bin")), slurp(f.latest("model", "bin")));
  EXPECT_EQ(slurp(s.latest("metrics", "csv")), slurp(f.latest("metrics", "csv")));
}

TEST(Cli, MissingArtifactExitCode) {
  const auto dir = testutil::temp_dir("cli_missing");
  const auto r = run_cli("stage2 --out " + (dir / "empty").string(), dir / "log");
  EXPECT_EQ(r.status, exit_code(ErrorKind::missing_artifact)) << r.text;
}

TEST(Cli, ConfigErrorsExitCode) {
  const auto dir = testutil::temp_dir("cli_config");
  std::ofstream(dir / "bad.json") << R"({"data": {"classes": 1}})";
  EXPECT_EQ(run_cli("gen-data --config " + (dir / "bad.json").string() + " --out " + (dir / "r").string(), dir / "log")
                .status,
            exit_code(ErrorKind::config));
  std::ofstream(dir / "unknown.json") << R"({"dta": {}})";
  EXPECT_EQ(run_cli("gen-data --config " + (dir / "unknown.json").string(), dir / "log").status,
            exit_code(ErrorKind::config));
  EXPECT_EQ(run_cli("search --grid-w 0.5,1.5 --out " + (dir / "r").string(), dir / "log").status,
            exit_code(ErrorKind::config));
  EXPECT_EQ(run_cli("no-such-command", dir / "log").status, exit_code(ErrorKind::config));
}

TEST(Cli, IngestionErrorExitCode) {
  const auto dir = testutil::temp_dir("cli_ingest");
  std::ofstream(dir / "data.csv") << "0.1,0.2,0\n0.3,x,1\n";
  std::ofstream(dir / "cfg.json") << R"({"data": {"train_csv": ")" + (dir / "data.csv").string() + R"("}})";
  const auto r = run_cli("gen-data --config " + (dir / "cfg.json").string() + " --out " + (dir / "r").string(),
                         dir / "log");
  EXPECT_EQ(r.status, exit_code(ErrorKind::ingestion)) << r.text;
  EXPECT_NE(r.text.find("line 2"), std::string::npos) << r.text;
}

TEST(Config, JsonRoundTrip) {
  auto c = load_config(kToy);
  c.run.grid_c = {0, 2};
  c.oracle.outcomes = OutcomeSet::all_binary;
  c.sweep_c = 1;
  CommandConfig d;
  apply_json(to_json(c), d);
  EXPECT_EQ(to_json(d), to_json(c));
}

TEST(RunDirectory, VersionsAreAppendOnly) {
  const RunDir dir(testutil::temp_dir("rundir"));
  EXPECT_EQ(dir.latest_version("model", "bin"), 0);
  EXPECT_THROW(dir.latest("model", "bin"), MissingArtifactError);
  std::ofstream(dir.next("model", "bin")) << "a";
  std::ofstream(dir.next("model", "bin")) << "b";
  std::ofstream(dir.root() / "model.v10.bin.bak") << "x";
  EXPECT_EQ(dir.latest("model", "bin").filename(), "model.v2.bin");
  EXPECT_EQ(slurp(dir.versioned("model", "bin", 1)), "a");
}

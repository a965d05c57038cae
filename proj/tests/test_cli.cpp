#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "decaps/cli.hpp"
#include "decaps/config.hpp"
#include "decaps/data.hpp"
#include "decaps/metrics.hpp"

using namespace decaps;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("decaps_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

void set_flag(std::vector<std::string>& args, const std::string& flag,
              const std::string& value) {
  for (size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == flag) {
      args[i + 1] = value;
      return;
    }
  }
  args.push_back(flag);
  args.push_back(value);
}

// Small-but-real training setup shared by the CLI tests.
std::vector<std::string> tiny_train_args(const fs::path& manifest, const fs::path& out,
                                         const std::string& seed = "5") {
  return {"train",
          "--data.manifest", manifest.string(),
          "--model.input", "32",
          "--model.heads", "2",
          "--model.d-l", "16",
          "--model.d-out", "4",
          "--optim.epochs", "1",
          "--optim.batch", "4",
          "--optim.threads", "2",
          "--seed", seed,
          "--out", out.string()};
}

}  // namespace

TEST_CASE("config text parses, echoes, and rejects unknown keys") {
  const std::string text =
      "# comment\n"
      "model.n_iter = 2\n"
      "peekaboo.theta_c = 0.4\n"
      "optim.lr = 0.001\n"
      "seed = 42\n";
  RunConfig cfg = parse_config_text(text);
  CHECK(cfg.model_n_iter == 2);
  CHECK(cfg.peekaboo_theta_c == 0.4);
  CHECK(cfg.optim_lr == 0.001);
  CHECK(cfg.seed == 42);
  // untouched keys keep the reference defaults
  CHECK(cfg.model_heads == 4);
  CHECK(cfg.model_d_l == 64);
  CHECK(cfg.model_d_out == 16);
  CHECK(cfg.loss_m_plus == 0.9);
  CHECK(cfg.loss_m_minus == 0.1);
  CHECK(cfg.loss_lambda == 0.5);
  CHECK(cfg.optim_beta1 == 0.5);
  CHECK(cfg.optim_beta2 == 0.999);
  CHECK(cfg.peekaboo_theta_d == 0.3);
  CHECK(cfg.loss_gamma == 1e-4);

  // the echo reproduces the config exactly
  RunConfig back = parse_config_text(config_echo(cfg));
  CHECK(config_echo(back) == config_echo(cfg));

  CHECK_THROWS_AS(parse_config_text("model.nonsense = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.n_iter: 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("optim.lr = banana\n"), ConfigError);
  try {
    parse_config_text("data.mannifest = x\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("data.mannifest") != std::string::npos);
  }
}

TEST_CASE("gen writes a reproducible dataset and honors --n 0") {
  const fs::path dir = temp_dir("gen");
  const auto args = std::vector<std::string>{
      "gen", "--n", "20", "--seed", "1", "--out", (dir / "a").string()};
  CHECK(cli::run(args) == 0);
  CHECK(fs::exists(dir / "a" / "manifest.jsonl"));
  CHECK(count_lines(dir / "a" / "manifest.jsonl") == 20);

  auto args_b = args;
  set_flag(args_b, "--out", (dir / "b").string());
  CHECK(cli::run(args_b) == 0);
  CHECK(file_hash_hex(dir / "a" / "manifest.jsonl") ==
        file_hash_hex(dir / "b" / "manifest.jsonl"));
  CHECK(file_hash_hex(dir / "a" / "images" / "sample_00007.ppm") ==
        file_hash_hex(dir / "b" / "images" / "sample_00007.ppm"));

  CHECK(cli::run({"gen", "--n", "0", "--out", (dir / "empty").string()}) == 0);
  CHECK(fs::exists(dir / "empty" / "manifest.jsonl"));
  CHECK(count_lines(dir / "empty" / "manifest.jsonl") == 0);
  fs::remove_all(dir);
}

TEST_CASE("train writes checkpoints and one log row per step") {
  const fs::path dir = temp_dir("train");
  REQUIRE(cli::run({"gen", "--n", "12", "--seed", "2", "--image-size", "32",
                    "--min-size", "4", "--max-size", "7", "--out",
                    (dir / "data").string()}) == 0);
  const fs::path manifest = dir / "data" / "manifest.jsonl";

  CHECK(cli::run(tiny_train_args(manifest, dir / "run")) == 0);
  CHECK(fs::exists(dir / "run" / "checkpoint_epoch_001.dkpt"));
  // 12 samples, batch 4 -> 3 steps, plus the header
  CHECK(count_lines(dir / "run" / "loss_log.csv") == 4);
  const std::string log = slurp(dir / "run" / "loss_log.csv");
  CHECK(log.find("step,margin,har,total") == 0);

  // re-running the identical config (the echo embeds the out dir) is
  // reproducible bit-for-bit
  const std::string first_hash = file_hash_hex(dir / "run" / "checkpoint_epoch_001.dkpt");
  CHECK(cli::run(tiny_train_args(manifest, dir / "run")) == 0);
  CHECK(file_hash_hex(dir / "run" / "checkpoint_epoch_001.dkpt") == first_hash);

  // a different seed diverges
  CHECK(cli::run(tiny_train_args(manifest, dir / "run", "6")) == 0);
  CHECK(file_hash_hex(dir / "run" / "checkpoint_epoch_001.dkpt") != first_hash);
  fs::remove_all(dir);
}

TEST_CASE("resume continues the loss trajectory") {
  const fs::path dir = temp_dir("resume");
  REQUIRE(cli::run({"gen", "--n", "8", "--seed", "3", "--image-size", "32",
                    "--min-size", "4", "--max-size", "7", "--out",
                    (dir / "data").string()}) == 0);
  const fs::path manifest = dir / "data" / "manifest.jsonl";

  // straight two-epoch run
  auto full = tiny_train_args(manifest, dir / "full");
  set_flag(full, "--optim.epochs", "2");
  REQUIRE(cli::run(full) == 0);

  // one epoch, then resume for the second
  REQUIRE(cli::run(tiny_train_args(manifest, dir / "half")) == 0);
  auto resume = tiny_train_args(manifest, dir / "half");
  set_flag(resume, "--optim.epochs", "2");
  resume.push_back("--resume");
  resume.push_back((dir / "half" / "checkpoint_epoch_001.dkpt").string());
  REQUIRE(cli::run(resume) == 0);

  // the resumed second epoch reproduces the straight run's losses
  auto read_col = [](const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);  // header
    std::vector<double> totals;
    while (std::getline(in, line)) {
      totals.push_back(std::stod(line.substr(line.rfind(',') + 1)));
    }
    return totals;
  };
  auto t_full = read_col(dir / "full" / "loss_log.csv");
  auto t_resumed = read_col(dir / "half" / "loss_log.csv");
  REQUIRE(t_full.size() == t_resumed.size());
  const size_t first_resumed = t_resumed.size() / 2;
  CHECK(std::abs(t_resumed[first_resumed] - t_full[first_resumed]) <=
        0.05 * std::abs(t_full[first_resumed]));
  fs::remove_all(dir);
}

TEST_CASE("eval writes a report and HAM dumps") {
  const fs::path dir = temp_dir("eval");
  REQUIRE(cli::run({"gen", "--n", "10", "--seed", "4", "--image-size", "32",
                    "--min-size", "4", "--max-size", "7", "--out",
                    (dir / "data").string()}) == 0);
  const fs::path manifest = dir / "data" / "manifest.jsonl";
  REQUIRE(cli::run(tiny_train_args(manifest, dir / "run")) == 0);

  CHECK(cli::run({"eval", "--checkpoint",
                  (dir / "run" / "checkpoint_epoch_001.dkpt").string(), "--manifest",
                  manifest.string(), "--out", (dir / "eval").string(), "--threads",
                  "2"}) == 0);
  const fs::path report_path = dir / "eval" / "report.json";
  REQUIRE(fs::exists(report_path));
  EvalReport report = eval_report_from_json(slurp(report_path));
  CHECK(report.num_samples == 10);
  CHECK(report.mean_auc >= 0.0);
  CHECK(report.mean_auc <= 1.0);
  CHECK(!report.config_echo.empty());

  // localize = eval --dump-hams; 2 heads x 3 classes maps per sample
  CHECK(cli::run({"localize", "--checkpoint",
                  (dir / "run" / "checkpoint_epoch_001.dkpt").string(), "--manifest",
                  manifest.string(), "--out", (dir / "loc").string()}) == 0);
  int pgms = 0;
  for (const auto& entry :
       fs::recursive_directory_iterator(dir / "loc" / "hams")) {
    if (entry.path().extension() == ".pgm") ++pgms;
  }
  CHECK(pgms == 10 * 2 * 3);
  CHECK(fs::exists(dir / "loc" / "hams" / "sample_00000" / "boxes.json"));

  // checkpoint evaluated twice gives byte-identical reports (persistence)
  CHECK(cli::run({"eval", "--checkpoint",
                  (dir / "run" / "checkpoint_epoch_001.dkpt").string(), "--manifest",
                  manifest.string(), "--out", (dir / "eval2").string()}) == 0);
  CHECK(slurp(report_path) == slurp(dir / "eval2" / "report.json"));
  fs::remove_all(dir);
}

TEST_CASE("exit codes distinguish config, data, and usage errors") {
  const fs::path dir = temp_dir("codes");
  // unknown config key -> 2
  CHECK(cli::run({"train", "--data.manifest", "x.jsonl", "--bogus", "1"}) == 2);
  // missing manifest -> 3
  CHECK(cli::run({"train", "--data.manifest", (dir / "absent.jsonl").string(),
                  "--out", (dir / "r").string()}) == 3);
  // config file with a bad key -> 2
  const fs::path cfg_path = dir / "bad.cfg";
  {
    std::ofstream out(cfg_path);
    out << "model.bogus = 1\n";
  }
  CHECK(cli::run({"train", "--config", cfg_path.string()}) == 2);
  // invalid routing value -> 2
  REQUIRE(cli::run({"gen", "--n", "4", "--image-size", "32", "--min-size", "4",
                    "--max-size", "7", "--out", (dir / "d").string()}) == 0);
  CHECK(cli::run({"train", "--data.manifest", (dir / "d" / "manifest.jsonl").string(),
                  "--model.routing", "sideways", "--out", (dir / "r2").string()}) == 2);
  fs::remove_all(dir);
}

TEST_CASE("DECAPS_SEED overrides the configured seed") {
  const fs::path dir = temp_dir("seedenv");
  REQUIRE(cli::run({"gen", "--n", "6", "--seed", "9", "--image-size", "32",
                    "--min-size", "4", "--max-size", "7", "--out",
                    (dir / "data").string()}) == 0);
  const fs::path manifest = dir / "data" / "manifest.jsonl";

  setenv("DECAPS_SEED", "777", 1);
  CHECK(cli::run(tiny_train_args(manifest, dir / "env", "5")) == 0);
  unsetenv("DECAPS_SEED");
  const std::string env_hash = file_hash_hex(dir / "env" / "checkpoint_epoch_001.dkpt");
  const std::string echo = slurp(dir / "env" / "config.echo");
  CHECK(echo.find("seed = 777") != std::string::npos);

  // the same run without the env var but with the effective seed matches
  CHECK(cli::run(tiny_train_args(manifest, dir / "env", "777")) == 0);
  CHECK(file_hash_hex(dir / "env" / "checkpoint_epoch_001.dkpt") == env_hash);
  fs::remove_all(dir);
}

TEST_CASE("baseline routing is recorded in the config echo") {
  const fs::path dir = temp_dir("baseline");
  REQUIRE(cli::run({"gen", "--n", "6", "--seed", "8", "--image-size", "32",
                    "--min-size", "4", "--max-size", "7", "--out",
                    (dir / "data").string()}) == 0);
  auto args = tiny_train_args(dir / "data" / "manifest.jsonl", dir / "run");
  args.push_back("--model.routing");
  args.push_back("baseline");
  CHECK(cli::run(args) == 0);
  const std::string echo = slurp(dir / "run" / "config.echo");
  CHECK(echo.find("model.routing = baseline") != std::string::npos);

  Checkpoint ckpt = load_checkpoint(dir / "run" / "checkpoint_epoch_001.dkpt");
  CHECK(ckpt.config_echo.find("model.routing = baseline") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("ablate emits the five-row grid against one manifest") {
  const fs::path dir = temp_dir("ablate");
  REQUIRE(cli::run({"gen", "--n", "8", "--seed", "11", "--image-size", "32",
                    "--min-size", "4", "--max-size", "7", "--out",
                    (dir / "train").string()}) == 0);
  REQUIRE(cli::run({"gen", "--n", "6", "--seed", "12", "--image-size", "32",
                    "--min-size", "4", "--max-size", "7", "--out",
                    (dir / "test").string()}) == 0);

  CHECK(cli::run({"ablate",
                  "--data.manifest", (dir / "train" / "manifest.jsonl").string(),
                  "--eval-manifest", (dir / "test" / "manifest.jsonl").string(),
                  "--model.input", "32", "--model.heads", "2", "--model.d-l", "16",
                  "--model.d-out", "4", "--optim.epochs", "1", "--optim.batch", "4",
                  "--optim.threads", "2", "--seed", "13", "--out",
                  (dir / "grid").string()}) == 0);

  const fs::path table_path = dir / "grid" / "ablation.json";
  REQUIRE(fs::exists(table_path));
  auto table = nlohmann::json::parse(slurp(table_path));
  REQUIRE(table.size() == 5);
  CHECK(table[0]["name"] == "idr");
  CHECK(table[4]["name"] == "idr+crop+drop+distill");
  const std::string hash = table[0]["manifest_hash"];
  for (const auto& row : table) {
    CHECK(row["manifest_hash"] == hash);
    CHECK(row["mean_auc"].get<double>() >= 0.0);
    CHECK(row["mean_auc"].get<double>() <= 1.0);
  }
  fs::remove_all(dir);
}

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "mecq/cli.hpp"
#include "mecq/linalg.hpp"
#include "mecq/matrix_io.hpp"
#include "mecq/trainer.hpp"
#include "support/schema.hpp"

using namespace mecq;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "mecq");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mecq_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string value_of(const std::string& out, const std::string& key) {
  std::istringstream in(out);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
  return "";
}

fs::path small_config(const fs::path& dir) {
  const fs::path p = dir / "cfg.json";
  std::ofstream(p) << R"({
    "w_bits": 4, "a_bits": 4, "epochs": 3, "batch_size": 32, "lr0": 0.05, "str": 1e-3, "E_warmup": 2,
    "model": {"kind": "mlp", "dims": [8, 16, 16, 4]},
    "data": {"kind": "blobs", "classes": 4, "per_class": 40, "dim": 8, "sep": 8.0, "seed": 3}
  })";
  return p;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("train, eval and diagnose a blob run") {
  const fs::path dir = scratch("run");
  const fs::path cfg = small_config(dir);
  const fs::path run_dir = dir / "run";
  const Result t = run({"train", "--config", cfg.string(), "--set", "str=5", "--set", "E_warmup=50", "--seed", "4",
                        "--out-dir", run_dir.string()});
  INFO(t.err);
  REQUIRE(t.code == cli::kExitOk);
  CHECK(value_of(t.out, "run_dir") == run_dir.string());
  CHECK(fs::exists(run_dir / "metrics.csv"));
  CHECK(fs::exists(run_dir / "steps.csv"));
  CHECK(fs::exists(run_dir / "checkpoints" / "best.bin"));
  CHECK(fs::exists(run_dir / "checkpoints" / "last.bin"));
  CHECK(fs::is_directory(run_dir / "diagnostics"));
  const auto echoed = nlohmann::json::parse(std::ifstream(run_dir / "config.json"));
  CHECK(echoed["str"] == 5.0);
  CHECK(echoed["E_warmup"] == 50);
  CHECK(echoed["seed"] == 4);
  const auto metrics = csv_rows([&] {
    std::ifstream f(run_dir / "metrics.csv");
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  }());
  CHECK(metrics.size() == 4);
  CHECK(metrics[0] == std::vector<std::string>{"epoch", "lr", "lambda", "task", "mec", "total", "val_acc"});

  const std::string best = (run_dir / "checkpoints" / "best.bin").string();
  const Result e1 = run({"eval", "--checkpoint", best});
  const Result e2 = run({"eval", "--checkpoint", best});
  REQUIRE(e1.code == 0);
  const double acc = std::stod(value_of(e1.out, "val_acc"));
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(e1.out == e2.out);

  // wrong shape: 5 features against an 8-input model
  {
    std::ofstream(dir / "wrong.csv") << "label,f0,f1,f2,f3,f4\n0,1,2,3,4,5\n";
  }
  CHECK(run({"eval", "--checkpoint", best, "--dataset", (dir / "wrong.csv").string()}).code == cli::kExitInvalid);

  const Result d = run({"diagnose", "--checkpoint", best, "--samples", "20", "--power-iters", "20", "--probes", "10"});
  INFO(d.err);
  REQUIRE(d.code == 0);
  const fs::path report_path = value_of(d.out, "report");
  CHECK(report_path == run_dir / "diagnostics" / "report.json");
  const auto report = nlohmann::json::parse(std::ifstream(report_path));
  const auto schema = nlohmann::json::parse(std::ifstream(fs::path(MECQ_SOURCE_DIR) / "docs" / "diagnose.schema.json"));
  const auto errors = testing::schema_errors(report, schema);
  for (const auto& e : errors) INFO(e);
  CHECK(errors.empty());
  CHECK(report["samples"] == 20);
  CHECK(fs::exists(run_dir / "diagnostics" / "singular_values.csv"));
  // schema actually rejects broken reports
  auto broken = report;
  broken["entropy"].erase("H");
  broken["extra"] = 1;
  CHECK(testing::schema_errors(broken, schema).size() == 2);

  CHECK(run({"diagnose", "--checkpoint", best}).code == cli::kExitInvalid);  // 500 > 32 val samples
  fs::remove_all(dir);
}

TEST_CASE("config and input errors map to exit 2") {
  const fs::path dir = scratch("errors");
  const fs::path cfg = small_config(dir);
  CHECK(run({"train", "--config", cfg.string(), "--set", "w_bits=1", "--out-dir", (dir / "r").string()}).code ==
        cli::kExitInvalid);
  const Result r = run({"train", "--config", cfg.string(), "--set", "setting=B", "--out-dir", (dir / "r").string()});
  CHECK(r.code == cli::kExitInvalid);
  CHECK(r.err.find("teacher") != std::string::npos);
  // a teacher path that does not exist
  CHECK(run({"train", "--config", cfg.string(), "--set", "setting=B", "--set", "teacher=" + (dir / "nope.bin").string(),
             "--out-dir", (dir / "r").string()})
            .code == cli::kExitInvalid);
  CHECK(run({"train", "--config", (dir / "missing.json").string()}).code == cli::kExitInvalid);
  CHECK(run({"train", "--config", cfg.string(), "--set", "bogus=1"}).code == cli::kExitInvalid);
  {
    std::ofstream(dir / "junk.bin") << "not a checkpoint";
  }
  CHECK(run({"eval", "--checkpoint", (dir / "junk.bin").string()}).code == cli::kExitInvalid);
  CHECK(run({"frobnicate"}).code == cli::kExitInvalid);
  fs::remove_all(dir);
}

TEST_CASE("rank-collapsed checkpoint has entropy near zero") {
  const fs::path dir = scratch("collapse");
  config::TrainConfig c = config::load_file(small_config(dir).string());
  c.full_precision = true;
  auto [tr, va] = train::prepare_data(c);
  train::TrainState s = train::init_state(c, tr);
  // identical hidden units: every feature equals the first one
  model::Layer& hidden = s.model.layers()[1];
  auto w = hidden.weight.matrix();
  for (Index r = 1; r < w.rows(); ++r) w.row(r) = w.row(0);
  hidden.bias.values.setConstant(0.5);
  train::save_checkpoint(dir / "collapsed.bin", train::capture(s));
  const Result d = run({"diagnose", "--checkpoint", (dir / "collapsed.bin").string(), "--samples", "20",
                        "--power-iters", "10", "--probes", "10"});
  INFO(d.err);
  REQUIRE(d.code == 0);
  CHECK(std::stod(value_of(d.out, "entropy")) <= 1e-9);
  CHECK(value_of(d.out, "rank") == "1");
  CHECK(fs::exists(dir / "diagnostics" / "report.json"));
  fs::remove_all(dir);
}

TEST_CASE("mec-probe") {
  const fs::path dir = scratch("probe");
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  Matrix z(12, 6);
  for (Index i = 0; i < z.size(); ++i) z(i) = g(rng);
  Matrix x = z.transpose() * z;
  x *= 0.5 / linalg::spectral_norm(x);
  write_matrix(dir / "x.bin", x);
  const Result r = run({"mec-probe", "--matrix", (dir / "x.bin").string(), "--orders", "1,2,4,8,16"});
  REQUIRE(r.code == 0);
  const auto rows = csv_rows(r.out);
  CHECK(rows[0] == std::vector<std::string>{"method", "order", "point", "value", "abs_error", "converged"});
  std::vector<double> taylor_err;
  for (const auto& row : rows)
    if (row[0] == "taylor") taylor_err.push_back(std::stod(row[4]));
  REQUIRE(taylor_err.size() == 5);
  for (std::size_t i = 1; i < taylor_err.size(); ++i) CHECK(taylor_err[i] < taylor_err[i - 1]);
  CHECK(rows.back()[0] == "moe");

  // X == 3 I: the expert at 3 is exact
  write_matrix(dir / "a.bin", Matrix(3.0 * Matrix::Identity(4, 4)));
  for (const auto& row : csv_rows(run({"mec-probe", "--matrix", (dir / "a.bin").string()}).out))
    if (row[0] == "expert" && row[2] == "3") CHECK(std::stod(row[4]) == doctest::Approx(0.0).scale(1.0));

  // zero matrix: exact, Taylor and the expert at 0 are all 0
  write_matrix(dir / "z.bin", Matrix(Matrix::Zero(3, 3)));
  for (const auto& row : csv_rows(run({"mec-probe", "--matrix", (dir / "z.bin").string()}).out))
    if (row[0] == "exact" || row[0] == "taylor" || (row[0] == "expert" && row[2] == "0")) CHECK(std::stod(row[3]) == 0.0);

  {
    std::ofstream(dir / "bad.bin") << "MECMxx";
  }
  CHECK(run({"mec-probe", "--matrix", (dir / "bad.bin").string()}).code == cli::kExitInvalid);
  write_matrix(dir / "rect.bin", Matrix(Matrix::Zero(2, 3)));
  CHECK(run({"mec-probe", "--matrix", (dir / "rect.bin").string()}).code == cli::kExitInvalid);
  fs::remove_all(dir);
}

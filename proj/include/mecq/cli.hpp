#pragma once

// Subcommands behind the `mecq` executable. Each returns a process exit
// code: 0 success, 2 bad config/input, 3 numerical divergence.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace mecq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitInvalid = 2;
inline constexpr int kExitDiverged = 3;

struct TrainArgs {
  std::string config;  // empty: built-in defaults
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "run";
  int sweep = 0;  // > 0: seeds seed .. seed + sweep - 1 under out_dir/seed_<s>
};

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;  // empty: the checkpoint's own validation split
};

struct DiagnoseArgs {
  std::string checkpoint;
  std::string dataset;
  long samples = 500;
  std::string out_dir;  // empty: the run's diagnostics/ directory
  int power_iters = 100;
  int probes = 100;
  std::uint64_t seed = 0;
};

struct ProbeArgs {
  std::string matrix;  // Gram matrix X as a matrix dump
  std::vector<int> orders{2, 4, 8, 16};
  std::vector<double> points{0.0, 1.0, 3.0, 7.0};
  int expert_order = 2;
  long dim = 0;  // feature dimension d for mu = (m + d) / 2; 0 means d = m
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_diagnose(const DiagnoseArgs& args, std::ostream& out, std::ostream& err);
int cmd_mec_probe(const ProbeArgs& args, std::ostream& out, std::ostream& err);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mecq::cli

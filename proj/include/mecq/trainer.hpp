#pragma once

// Calibrate, train with the composite loss under SGD + cosine decay,
// evaluate, checkpoint.

#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mecq/checkpoint.hpp"
#include "mecq/config.hpp"
#include "mecq/data.hpp"
#include "mecq/losses.hpp"
#include "mecq/model.hpp"

namespace mecq::train {

// Wraps every weighted layer per the config's quant plan (first/last at 8
// bits). Full-precision configs get no quantizers.
model::Model build_quantized_model(const config::TrainConfig& cfg, const Shape& input_shape, int classes);

struct CalibrationReport {
  int degenerate_channels = 0;
  int quantizers = 0;
};

// Weight ranges first, then one forward pass over calib with activation
// observers on. Every quantizer ends frozen in Quantize mode.
CalibrationReport calibrate_model(model::Model& model, const data::Dataset& calib, Index batch_size = 256,
                                  std::ostream* warn = nullptr);

// 0.5 lr0 (1 + cos(pi t / T)).
double cosine_lr(long t, long total, double lr0);

// Top-1 accuracy with quantizers active. Ties go to the lowest class index.
double evaluate(model::Model& model, const data::Dataset& ds, Index batch_size = 256);
std::vector<int> predict(model::Model& model, const data::Dataset& ds, Index batch_size = 256);

// Datasets described by cfg.data: (train, val).
std::pair<data::Dataset, data::Dataset> prepare_data(const config::TrainConfig& cfg);

struct TrainState {
  config::TrainConfig cfg;
  model::Model model;
  Tensor gate_weights;  // (experts, feature_dim)
  // Momentum buffers keyed like parameters(); "gate" for W_g.
  std::vector<std::pair<std::string, Tensor>> velocity;
  int epoch = 0;  // epochs completed
  long step = 0;  // optimizer steps taken
  std::mt19937_64 rng;

  Tensor* find_velocity(const std::string& name);
};

// Builds, calibrates on a stratified subset of train, and zeroes W_g.
TrainState init_state(const config::TrainConfig& cfg, const data::Dataset& train, std::ostream* warn = nullptr);

std::string meta_json(const config::TrainConfig& cfg, const Shape& input_shape, int classes);
Checkpoint capture(const TrainState& state);

struct RestoreOptions {
  bool with_optimizer = true;  // false: inference-only (teacher) load
};
TrainState restore(const Checkpoint& ckpt, RestoreOptions opts = {});

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double lambda = 0.0;
  double task = 0.0;
  double mec = 0.0;
  double total = 0.0;
  double val_acc = 0.0;
};

struct StepRecord {
  long step = 0;
  int epoch = 0;
  losses::LossReport report;
};

struct TrainOptions {
  long max_steps = -1;  // stop early after this many steps (tests)
  model::Model* teacher = nullptr;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  double best_val_acc = -1.0;
  std::vector<EpochMetrics> epochs;
  std::vector<StepRecord> steps;
  bool diverged = false;
  std::string message;
};

// On a non-finite loss the state is rolled back to the last completed
// epoch and the result is flagged as diverged.
TrainResult train(TrainState& state, const data::Dataset& train, const data::Dataset& val,
                  const TrainOptions& opts = {});

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const EpochMetrics& m);

}  // namespace mecq::train

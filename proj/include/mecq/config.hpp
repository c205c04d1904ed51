#pragma once

// Run configuration: a JSON document with every default materialized.
// Unknown keys are rejected with the offending dotted path.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mecq/data.hpp"
#include "mecq/losses.hpp"
#include "mecq/mec.hpp"
#include "mecq/model.hpp"

namespace mecq::config {

using Json = nlohmann::json;

struct DataConfig {
  enum class Kind { Blobs, Cifar10, Csv };
  Kind kind = Kind::Blobs;
  std::string path;      // cifar10: directory; csv: train file
  std::string val_path;  // csv only; empty means split from train
  data::BlobsConfig blobs;
  double val_fraction = 0.2;
  Index subset = 0;      // 0: use everything
  Index calib_size = 100;
  data::Standardization standardization;
  data::AugmentConfig augment{0.5, 4, false};
};

struct TrainConfig {
  int w_bits = 2;
  int a_bits = 4;
  losses::Setting setting = losses::Setting::A;
  int epochs = 30;
  int batch_size = 256;
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  losses::LambdaSchedule schedule{5.0, 50};
  mec::MecConfig mec;
  bool use_moe = true;
  std::uint64_t seed = 0;
  model::ModelSpec model{model::ModelSpec::Kind::SmallCnn, {}, {16, 32, 32}};
  std::string teacher;
  bool baseline_mode = false;
  bool full_precision = false;
  bool learnable_quant = true;
  bool first_last_8bit = true;
  DataConfig data;

  model::QuantPlan quant_plan() const;
};

// Field-level validation; throws ConfigError naming the field.
void validate(const TrainConfig& cfg);

Json to_json(const TrainConfig& cfg);
// Missing keys take defaults; unknown keys throw ConfigError.
TrainConfig from_json(const Json& j);

// Applies `key=value` overrides with dotted paths (mec.points=0,1,3,7).
// Values parse as JSON when possible, comma lists become arrays, anything
// else is a string.
void apply_overrides(Json& j, const std::vector<std::string>& overrides);

// Resolves the single-point ablation (use_moe=false) and default orders.
TrainConfig resolve(TrainConfig cfg);

std::uint64_t fnv1a64(const std::string& bytes);

TrainConfig load_file(const std::string& path, const std::vector<std::string>& overrides = {});

}  // namespace mecq::config

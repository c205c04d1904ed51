#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mecq/tensor.hpp"

namespace mecq::data {

enum class Split { Train, Val, Calib };

std::string split_name(Split s);

// Samples stored as rows of a row-major matrix; sample_shape gives the
// per-sample layout (e.g. {3, 32, 32} for CHW images or {d} for vectors).
struct Dataset {
  Shape sample_shape;
  RowMatrix samples;
  std::vector<int> labels;
  int classes = 0;
  Split split = Split::Train;
  // Row indices into the parent dataset this one was drawn from, if any.
  std::vector<Index> source_rows;

  Index size() const { return samples.rows(); }
  Index sample_numel() const { return samples.cols(); }
  // Throws DataError when labels or shapes break the invariants.
  void validate() const;
  // Gathers rows into a (batch, sample_shape...) tensor.
  Tensor batch(const std::vector<Index>& rows) const;
  Dataset subset(const std::vector<Index>& rows, Split split) const;
};

struct Standardization {
  std::vector<double> mean{0.4914, 0.4822, 0.4465};
  std::vector<double> std{0.2470, 0.2435, 0.2616};
};

// CIFAR-10 binary: 3073-byte records (1 label byte, 3072 CHW pixel bytes).
// Pixels are scaled to [0, 1] and standardized per channel.
Dataset load_cifar10_file(const std::filesystem::path& path, const Standardization& norm, Split split);
// data_batch_1..5.bin for Train, test_batch.bin for Val.
Dataset load_cifar10(const std::filesystem::path& dir, const Standardization& norm, Split split);
// Inverse of the loader: standardized samples back to byte records.
void write_cifar10_file(const std::filesystem::path& path, const Dataset& ds, const Standardization& norm);

// CSV with header `label,f0,f1,...`.
Dataset load_csv(const std::filesystem::path& path, Split split, int classes = 0);
void write_csv(const std::filesystem::path& path, const Dataset& ds);

struct BlobsConfig {
  int classes = 10;
  int per_class = 100;
  int dim = 8;
  double sep = 10.0;
  std::uint64_t seed = 0;
  Shape sample_shape;  // empty: {dim}
};

// Gaussian clusters around random unit-sphere centers scaled by sep.
Dataset synth_blobs(const BlobsConfig& cfg);

// Deterministic shuffle-split into (train, val).
std::pair<Dataset, Dataset> train_val_split(const Dataset& ds, double val_fraction, std::uint64_t seed);

// Uniform sample without replacement, stratified by class when possible.
Dataset calibration_subset(const Dataset& ds, Index n, std::uint64_t seed);

struct AugmentConfig {
  double hflip_prob = 0.5;
  int translate_pad = 4;
  bool enabled = true;
  void validate() const;
};

// Per-sample RNG derived from (seed, epoch, index) so augmentation does not
// depend on iteration order.
std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);

// Flip and reflect-pad + random crop of one CHW sample (flat row).
Eigen::VectorXd augment(const Eigen::VectorXd& sample, const Shape& chw, const AugmentConfig& cfg,
                        std::mt19937_64& rng);

Eigen::VectorXd hflip(const Eigen::VectorXd& sample, const Shape& chw);
// Reflect-pads by pad then crops the window at (dy, dx) in [0, 2 pad]^2.
Eigen::VectorXd pad_crop(const Eigen::VectorXd& sample, const Shape& chw, int pad, int dy, int dx);

}  // namespace mecq::data

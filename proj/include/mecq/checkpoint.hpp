#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mecq/tensor.hpp"

namespace mecq::train {

// Versioned binary container:
//   "MECQCKPT" | u32 version | u64 fnv1a(meta) | meta JSON | u32 epoch |
//   rng state | u32 count | count x (name, u32 rank, u64 dims..., f64 data)
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string meta_json;
  int epoch = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
  void put(std::string name, Tensor t);
  std::uint64_t config_hash() const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
// Parses the whole stream before returning; any damage throws
// CheckpointError and nothing is returned.
Checkpoint read_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_hash = std::nullopt);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_hash = std::nullopt);

}  // namespace mecq::train

#include "mecq/checkpoint.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "mecq/binary_io.hpp"
#include "mecq/config.hpp"
#include "mecq/errors.hpp"

namespace mecq::train {

namespace {
constexpr std::array<char, 8> kMagic = {'M', 'E', 'C', 'Q', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kMaxRank = 8;
}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void Checkpoint::put(std::string name, Tensor t) {
  for (auto& [n, existing] : tensors)
    if (n == name) {
      existing = std::move(t);
      return;
    }
  tensors.emplace_back(std::move(name), std::move(t));
}

std::uint64_t Checkpoint::config_hash() const { return config::fnv1a64(meta_json); }

void write_checkpoint(std::ostream& out, const Checkpoint& c) {
  out.write(kMagic.data(), kMagic.size());
  io::put<std::uint32_t>(out, Checkpoint::kVersion);
  io::put<std::uint64_t>(out, c.config_hash());
  io::put_string(out, c.meta_json);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.epoch));
  io::put_string(out, c.rng_state);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    io::put_string(out, name);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (Index d : t.shape) io::put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  }
}

Checkpoint read_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_hash) {
  try {
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic)
      throw CheckpointError("checkpoint: bad magic bytes");
    const auto version = io::get<std::uint32_t>(in, "checkpoint version");
    if (version != Checkpoint::kVersion)
      throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    const auto stored_hash = io::get<std::uint64_t>(in, "config hash");
    Checkpoint c;
    c.meta_json = io::get_string(in, "config");
    if (config::fnv1a64(c.meta_json) != stored_hash) throw CheckpointError("checkpoint: config hash mismatch");
    if (expected_hash && *expected_hash != stored_hash)
      throw CheckpointError("checkpoint: written for a different configuration");
    c.epoch = static_cast<int>(io::get<std::uint32_t>(in, "epoch"));
    c.rng_state = io::get_string(in, "rng state");
    const auto count = io::get<std::uint32_t>(in, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = io::get_string(in, "tensor name");
      const auto rank = io::get<std::uint32_t>(in, "tensor rank");
      if (rank > kMaxRank) throw CheckpointError("checkpoint: implausible rank for " + name);
      Shape shape;
      for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<Index>(io::get<std::uint64_t>(in, "dim")));
      Tensor t(shape);
      if (t.numel() && !in.read(reinterpret_cast<char*>(t.values.data()),
                                static_cast<std::streamsize>(t.values.size() * sizeof(double))))
        throw CheckpointError("checkpoint: truncated tensor " + name);
      c.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes");
    return c;
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream buf(std::ios::binary);
  write_checkpoint(buf, ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp + " for writing");
    const std::string bytes = buf.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(in, expected_hash);
}

}  // namespace mecq::train

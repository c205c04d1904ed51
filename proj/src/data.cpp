#include "mecq/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "mecq/errors.hpp"

namespace mecq::data {

namespace {

constexpr Index kCifarImage = 3 * 32 * 32;
constexpr Index kCifarRecord = kCifarImage + 1;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void check_norm(const Standardization& norm, Index channels) {
  if (static_cast<Index>(norm.mean.size()) != channels || static_cast<Index>(norm.std.size()) != channels)
    throw ConfigError("standardization constants must have one entry per channel");
  for (double s : norm.std)
    if (!(s > 0.0)) throw ConfigError("standardization std must be positive");
}

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Calib:
      return "calib";
  }
  return "unknown";
}

void Dataset::validate() const {
  if (shape_numel(sample_shape) != samples.cols())
    throw DataError("dataset: sample shape " + shape_str(sample_shape) + " does not match row width " +
                    std::to_string(samples.cols()));
  if (static_cast<Index>(labels.size()) != samples.rows()) throw DataError("dataset: label count != sample count");
  if (classes < 1) throw DataError("dataset: class count must be positive");
  for (int y : labels)
    if (y < 0 || y >= classes) throw DataError("dataset: label " + std::to_string(y) + " out of range");
  if (!samples.allFinite()) throw DataError("dataset: non-finite sample values");
}

Tensor Dataset::batch(const std::vector<Index>& rows) const {
  Shape shape{static_cast<Index>(rows.size())};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor t(shape);
  RowMap m(t.values.data(), static_cast<Index>(rows.size()), sample_numel());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = samples.row(rows[i]);
  return t;
}

Dataset Dataset::subset(const std::vector<Index>& rows, Split s) const {
  Dataset out;
  out.sample_shape = sample_shape;
  out.classes = classes;
  out.split = s;
  out.samples.resize(static_cast<Index>(rows.size()), sample_numel());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.samples.row(static_cast<Index>(i)) = samples.row(rows[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
    out.source_rows.push_back(source_rows.empty() ? rows[i] : source_rows[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

Dataset load_cifar10_file(const std::filesystem::path& path, const Standardization& norm, Split split) {
  check_norm(norm, 3);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw DataError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
  const Index n = static_cast<Index>(bytes.size()) / kCifarRecord;
  Dataset ds;
  ds.sample_shape = {3, 32, 32};
  ds.classes = 10;
  ds.split = split;
  ds.samples.resize(n, kCifarImage);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] > 9) throw DataError(path.string() + ": label " + std::to_string(rec[0]) + " > 9");
    ds.labels[static_cast<std::size_t>(r)] = rec[0];
    for (Index i = 0; i < kCifarImage; ++i) {
      const std::size_t c = static_cast<std::size_t>(i / 1024);
      ds.samples(r, i) = (static_cast<double>(rec[1 + i]) / 255.0 - norm.mean[c]) / norm.std[c];
    }
  }
  return ds;
}

Dataset load_cifar10(const std::filesystem::path& dir, const Standardization& norm, Split split) {
  std::vector<std::filesystem::path> files;
  if (split == Split::Val) {
    files.push_back(dir / "test_batch.bin");
  } else {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  }
  std::vector<Dataset> parts;
  Index total = 0;
  for (const auto& f : files) {
    parts.push_back(load_cifar10_file(f, norm, split));
    total += parts.back().size();
  }
  Dataset ds = parts.front();
  ds.samples.resize(total, kCifarImage);
  ds.labels.clear();
  Index row = 0;
  for (const Dataset& p : parts) {
    ds.samples.middleRows(row, p.size()) = p.samples;
    ds.labels.insert(ds.labels.end(), p.labels.begin(), p.labels.end());
    row += p.size();
  }
  return ds;
}

void write_cifar10_file(const std::filesystem::path& path, const Dataset& ds, const Standardization& norm) {
  check_norm(norm, 3);
  if (ds.sample_shape != Shape{3, 32, 32}) throw DataError("write_cifar10_file: samples must be 3x32x32");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  std::vector<char> rec(static_cast<std::size_t>(kCifarRecord));
  for (Index r = 0; r < ds.size(); ++r) {
    rec[0] = static_cast<char>(ds.labels[static_cast<std::size_t>(r)]);
    for (Index i = 0; i < kCifarImage; ++i) {
      const std::size_t c = static_cast<std::size_t>(i / 1024);
      const double px = std::round((ds.samples(r, i) * norm.std[c] + norm.mean[c]) * 255.0);
      rec[static_cast<std::size_t>(1 + i)] = static_cast<char>(static_cast<unsigned char>(std::clamp(px, 0.0, 255.0)));
    }
    out.write(rec.data(), kCifarRecord);
  }
}

Dataset load_csv(const std::filesystem::path& path, Split split, int classes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty CSV");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header[0] != "label") throw DataError(path.string() + ": header must be label,f0,f1,...");
  const Index width = static_cast<Index>(header.size()) - 1;
  std::vector<double> values;
  std::vector<int> labels;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Index col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (col == 0)
          labels.push_back(std::stoi(cell));
        else
          values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": unparsable cell '" + cell + "'");
      }
      ++col;
    }
    if (col != width + 1)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(width + 1) +
                      " cells");
  }
  Dataset ds;
  ds.sample_shape = {width};
  ds.split = split;
  ds.labels = labels;
  ds.samples = ConstRowMap(values.data(), static_cast<Index>(labels.size()), width);
  ds.classes = classes > 0 ? classes : (labels.empty() ? 1 : *std::max_element(labels.begin(), labels.end()) + 1);
  ds.validate();
  return ds;
}

void write_csv(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "label";
  for (Index j = 0; j < ds.sample_numel(); ++j) out << ",f" << j;
  out << '\n' << std::setprecision(17);
  for (Index r = 0; r < ds.size(); ++r) {
    out << ds.labels[static_cast<std::size_t>(r)];
    for (Index j = 0; j < ds.sample_numel(); ++j) out << ',' << ds.samples(r, j);
    out << '\n';
  }
}

Dataset synth_blobs(const BlobsConfig& cfg) {
  if (cfg.classes < 2) throw ConfigError("synth_blobs: need at least 2 classes");
  if (cfg.per_class < 1 || cfg.dim < 1) throw ConfigError("synth_blobs: per_class and dim must be positive");
  Shape shape = cfg.sample_shape.empty() ? Shape{cfg.dim} : cfg.sample_shape;
  if (shape_numel(shape) != cfg.dim) throw ConfigError("synth_blobs: sample_shape does not multiply to dim");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd centers(cfg.classes, cfg.dim);
  for (int c = 0; c < cfg.classes; ++c) {
    Eigen::VectorXd v(cfg.dim);
    do {
      for (int j = 0; j < cfg.dim; ++j) v(j) = normal(rng);
    } while (v.norm() == 0.0);
    centers.row(c) = cfg.sep * v.normalized().transpose();
  }
  Dataset ds;
  ds.sample_shape = shape;
  ds.classes = cfg.classes;
  ds.samples.resize(static_cast<Index>(cfg.classes) * cfg.per_class, cfg.dim);
  Index row = 0;
  for (int i = 0; i < cfg.per_class; ++i) {
    for (int c = 0; c < cfg.classes; ++c) {
      for (int j = 0; j < cfg.dim; ++j) ds.samples(row, j) = centers(c, j) + normal(rng);
      ds.labels.push_back(c);
      ++row;
    }
  }
  return ds;
}

std::pair<Dataset, Dataset> train_val_split(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0, 1)");
  std::vector<Index> rows(static_cast<std::size_t>(ds.size()));
  std::iota(rows.begin(), rows.end(), Index(0));
  std::mt19937_64 rng(seed ^ 0x5a17ULL);
  std::shuffle(rows.begin(), rows.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(ds.size())));
  std::vector<Index> val(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<Index> train(rows.begin() + static_cast<std::ptrdiff_t>(n_val), rows.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {ds.subset(train, Split::Train), ds.subset(val, Split::Val)};
}

Dataset calibration_subset(const Dataset& ds, Index n, std::uint64_t seed) {
  if (n < 1 || n > ds.size())
    throw DataError("calibration_subset: requested " + std::to_string(n) + " of " + std::to_string(ds.size()) +
                    " samples");
  if (ds.split == Split::Val) throw DataError("calibration_subset: calibration data must come from the train split");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(ds.classes));
  for (Index r = 0; r < ds.size(); ++r) by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(r)])].push_back(r);
  for (auto& rows : by_class) std::shuffle(rows.begin(), rows.end(), rng);
  std::vector<std::size_t> order(by_class.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Index> picked;
  picked.reserve(static_cast<std::size_t>(n));
  for (std::size_t round = 0; static_cast<Index>(picked.size()) < n; ++round) {
    for (std::size_t c : order) {
      if (round < by_class[c].size()) picked.push_back(by_class[c][round]);
      if (static_cast<Index>(picked.size()) == n) break;
    }
  }
  return ds.subset(picked, Split::Calib);
}

void AugmentConfig::validate() const {
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("augment.hflip_prob must be in [0, 1]");
  if (translate_pad < 0) throw ConfigError("augment.translate_pad must be non-negative");
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  return std::mt19937_64(splitmix64(splitmix64(splitmix64(seed) ^ epoch) ^ index));
}

Eigen::VectorXd hflip(const Eigen::VectorXd& sample, const Shape& chw) {
  const Index c = chw.at(0), h = chw.at(1), w = chw.at(2);
  Eigen::VectorXd out(sample.size());
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) out((ch * h + i) * w + j) = sample((ch * h + i) * w + (w - 1 - j));
  return out;
}

Eigen::VectorXd pad_crop(const Eigen::VectorXd& sample, const Shape& chw, int pad, int dy, int dx) {
  const Index c = chw.at(0), h = chw.at(1), w = chw.at(2);
  if (pad >= h || pad >= w) throw ConfigError("augment: translate_pad must be smaller than the image");
  auto reflect = [](Index i, Index n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  Eigen::VectorXd out(sample.size());
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const Index si = reflect(i + dy - pad, h);
        const Index sj = reflect(j + dx - pad, w);
        out((ch * h + i) * w + j) = sample((ch * h + si) * w + sj);
      }
  return out;
}

Eigen::VectorXd augment(const Eigen::VectorXd& sample, const Shape& chw, const AugmentConfig& cfg,
                        std::mt19937_64& rng) {
  if (!cfg.enabled) return sample;
  cfg.validate();
  if (chw.size() != 3) throw ShapeError("augment: expects CHW samples");
  if (cfg.translate_pad >= chw[1] || cfg.translate_pad >= chw[2])
    throw ConfigError("augment: translate_pad must be smaller than the image");
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> offset(0, 2 * cfg.translate_pad);
  Eigen::VectorXd out = coin(rng) < cfg.hflip_prob ? hflip(sample, chw) : sample;
  if (cfg.translate_pad > 0) {
    const int dy = offset(rng);
    const int dx = offset(rng);
    out = pad_crop(out, chw, cfg.translate_pad, dy, dx);
  }
  return out;
}

}  // namespace mecq::data

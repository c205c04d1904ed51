#include "mecq/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "mecq/errors.hpp"

namespace mecq::config {

model::QuantPlan TrainConfig::quant_plan() const {
  model::QuantPlan p;
  p.enabled = !full_precision;
  p.w_bits = w_bits;
  p.a_bits = a_bits;
  p.first_last_8bit = first_last_8bit;
  p.learnable_params = learnable_quant;
  return p;
}

namespace {

void fail(const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); }

// Reads fields of one JSON object, remembering which keys were used so the
// leftovers can be reported as unknown.
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected a JSON object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(field(key), "wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    return Reader(j_.at(key), field(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(field(k), "unknown key");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_data(Reader r, DataConfig& d) {
  std::string kind = "blobs";
  r.get("kind", kind);
  if (kind == "blobs")
    d.kind = DataConfig::Kind::Blobs;
  else if (kind == "cifar10")
    d.kind = DataConfig::Kind::Cifar10;
  else if (kind == "csv")
    d.kind = DataConfig::Kind::Csv;
  else
    fail(r.field("kind"), "must be blobs, cifar10 or csv");
  r.get("path", d.path);
  r.get("val_path", d.val_path);
  r.get("classes", d.blobs.classes);
  r.get("per_class", d.blobs.per_class);
  r.get("dim", d.blobs.dim);
  r.get("sep", d.blobs.sep);
  r.get("seed", d.blobs.seed);
  std::vector<Index> shape;
  r.get("sample_shape", shape);
  if (!shape.empty()) d.blobs.sample_shape = shape;
  r.get("val_fraction", d.val_fraction);
  r.get("subset", d.subset);
  r.get("calib_size", d.calib_size);
  if (r.has("standardization")) {
    Reader s = r.child("standardization");
    s.get("mean", d.standardization.mean);
    s.get("std", d.standardization.std);
    s.finish();
  }
  if (r.has("augment")) {
    Reader a = r.child("augment");
    a.get("enabled", d.augment.enabled);
    a.get("hflip_prob", d.augment.hflip_prob);
    a.get("translate_pad", d.augment.translate_pad);
    a.finish();
  }
  r.finish();
}

Json data_to_json(const DataConfig& d) {
  Json j;
  j["kind"] = d.kind == DataConfig::Kind::Blobs ? "blobs" : d.kind == DataConfig::Kind::Cifar10 ? "cifar10" : "csv";
  j["path"] = d.path;
  j["val_path"] = d.val_path;
  j["classes"] = d.blobs.classes;
  j["per_class"] = d.blobs.per_class;
  j["dim"] = d.blobs.dim;
  j["sep"] = d.blobs.sep;
  j["seed"] = d.blobs.seed;
  j["sample_shape"] = d.blobs.sample_shape;
  j["val_fraction"] = d.val_fraction;
  j["subset"] = d.subset;
  j["calib_size"] = d.calib_size;
  j["standardization"] = {{"mean", d.standardization.mean}, {"std", d.standardization.std}};
  j["augment"] = {{"enabled", d.augment.enabled},
                  {"hflip_prob", d.augment.hflip_prob},
                  {"translate_pad", d.augment.translate_pad}};
  return j;
}

Json parse_override_value(const std::string& v) {
  try {
    return Json::parse(v);
  } catch (const nlohmann::json::exception&) {
  }
  if (v.find(',') != std::string::npos) {
    Json arr = Json::array();
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) arr.push_back(parse_override_value(item));
    return arr;
  }
  return Json(v);
}

}  // namespace

void validate(const TrainConfig& c) {
  auto bits_ok = [](int b) { return b >= 2 && b <= 8; };
  if (!bits_ok(c.w_bits)) fail("w_bits", "must be in [2, 8]");
  if (!bits_ok(c.a_bits)) fail("a_bits", "must be in [2, 8]");
  if (c.epochs < 1) fail("epochs", "must be >= 1");
  if (c.batch_size < 2) fail("batch_size", "must be >= 2");
  if (!(c.lr0 > 0.0)) fail("lr0", "must be positive");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail("momentum", "must be in [0, 1)");
  if (!(c.weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
  if (!(c.schedule.strength > 0.0)) fail("str", "must be positive");
  if (c.schedule.warmup_epochs < 1) fail("E_warmup", "must be a positive integer");
  if (c.setting == losses::Setting::B && c.teacher.empty()) fail("teacher", "Setting B requires a teacher checkpoint");
  if (c.model.kind == model::ModelSpec::Kind::Mlp && c.model.dims.size() < 2) fail("model.dims", "needs >= 2 sizes");
  if (c.model.kind == model::ModelSpec::Kind::SmallCnn && (c.model.channels.empty() || c.model.channels.size() > 4))
    fail("model.channels", "needs 1 to 4 conv blocks");
  try {
    c.mec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(e.what()));
  }
  const DataConfig& d = c.data;
  if (d.kind != DataConfig::Kind::Blobs && d.path.empty()) fail("data.path", "required for cifar10/csv data");
  if (!(d.val_fraction > 0.0 && d.val_fraction < 1.0)) fail("data.val_fraction", "must be in (0, 1)");
  if (d.calib_size < 1) fail("data.calib_size", "must be positive");
  if (d.subset < 0) fail("data.subset", "must be non-negative");
  if (d.kind == DataConfig::Kind::Blobs) {
    if (d.blobs.classes < 2) fail("data.classes", "must be >= 2");
    if (d.blobs.per_class < 1) fail("data.per_class", "must be positive");
    if (d.blobs.dim < 1) fail("data.dim", "must be positive");
    if (!d.blobs.sample_shape.empty() && shape_numel(d.blobs.sample_shape) != d.blobs.dim)
      fail("data.sample_shape", "must multiply to data.dim");
  }
  try {
    d.augment.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("data.") + e.what());
  }
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["w_bits"] = c.w_bits;
  j["a_bits"] = c.a_bits;
  j["setting"] = c.setting == losses::Setting::A ? "A" : "B";
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr0"] = c.lr0;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["str"] = c.schedule.strength;
  j["E_warmup"] = c.schedule.warmup_epochs;
  j["seed"] = c.seed;
  j["teacher"] = c.teacher;
  j["baseline_mode"] = c.baseline_mode;
  j["full_precision"] = c.full_precision;
  j["quant"] = {{"learnable_params", c.learnable_quant}, {"first_last_8bit", c.first_last_8bit}};
  Json m;
  m["kind"] = c.model.kind == model::ModelSpec::Kind::Mlp ? "mlp" : "smallcnn";
  m["dims"] = c.model.dims;
  m["channels"] = c.model.channels;
  j["model"] = m;
  Json mec;
  if (c.mec.eps_sq)
    mec["eps_sq"] = *c.mec.eps_sq;
  else
    mec["eps_sq"] = "adaptive";
  mec["order"] = c.mec.order;
  mec["points"] = c.mec.points;
  mec["use_moe"] = c.use_moe;
  mec["maximize_entropy"] = c.mec.maximize_entropy;
  mec["normalize_columns"] = c.mec.normalize_columns;
  j["mec"] = mec;
  j["data"] = data_to_json(c.data);
  return j;
}

TrainConfig from_json(const Json& j) {
  TrainConfig c;
  Reader r(j, "");
  r.get("w_bits", c.w_bits);
  r.get("a_bits", c.a_bits);
  std::string setting = "A";
  r.get("setting", setting);
  if (setting == "A")
    c.setting = losses::Setting::A;
  else if (setting == "B")
    c.setting = losses::Setting::B;
  else
    fail("setting", "must be \"A\" or \"B\"");
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("lr0", c.lr0);
  r.get("momentum", c.momentum);
  r.get("weight_decay", c.weight_decay);
  r.get("str", c.schedule.strength);
  r.get("E_warmup", c.schedule.warmup_epochs);
  r.get("seed", c.seed);
  r.get("teacher", c.teacher);
  r.get("baseline_mode", c.baseline_mode);
  r.get("full_precision", c.full_precision);
  if (r.has("quant")) {
    Reader q = r.child("quant");
    q.get("learnable_params", c.learnable_quant);
    q.get("first_last_8bit", c.first_last_8bit);
    q.finish();
  }
  if (r.has("model")) {
    Reader m = r.child("model");
    std::string kind = "smallcnn";
    m.get("kind", kind);
    if (kind == "mlp")
      c.model.kind = model::ModelSpec::Kind::Mlp;
    else if (kind == "smallcnn")
      c.model.kind = model::ModelSpec::Kind::SmallCnn;
    else
      fail("model.kind", "must be mlp or smallcnn");
    m.get("dims", c.model.dims);
    m.get("channels", c.model.channels);
    m.finish();
  }
  int order = 0;
  if (r.has("mec")) {
    Reader m = r.child("mec");
    if (m.has("eps_sq")) {
      const Json& e = m.raw("eps_sq");
      if (e.is_string() && e.get<std::string>() == "adaptive")
        c.mec.eps_sq.reset();
      else if (e.is_number())
        c.mec.eps_sq = e.get<double>();
      else
        fail("mec.eps_sq", "must be a positive number or \"adaptive\"");
    }
    m.get("order", order);
    m.get("points", c.mec.points);
    m.get("use_moe", c.use_moe);
    m.get("maximize_entropy", c.mec.maximize_entropy);
    m.get("normalize_columns", c.mec.normalize_columns);
    m.finish();
  }
  c.mec.order = order > 0 ? order : (c.use_moe ? 2 : 4);
  if (order < 0) fail("mec.order", "must be >= 1");
  if (r.has("data")) read_data(r.child("data"), c.data);
  r.finish();
  c = resolve(std::move(c));
  validate(c);
  return c;
}

TrainConfig resolve(TrainConfig c) {
  if (!c.use_moe) c.mec.points = {0.0};
  return c;
}

void apply_overrides(Json& j, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "': expected key=value");
    const std::string key = o.substr(0, eq);
    const Json value = parse_override_value(o.substr(eq + 1));
    Json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      Json& next = (*node)[parts[i]];
      if (next.is_null()) next = Json::object();
      if (!next.is_object()) throw ConfigError("override '" + o + "': " + parts[i] + " is not an object");
      node = &next;
    }
    (*node)[parts.back()] = value;
  }
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

TrainConfig load_file(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  apply_overrides(j, overrides);
  return from_json(j);
}

}  // namespace mecq::config

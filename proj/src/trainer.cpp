#include "mecq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "mecq/errors.hpp"

namespace mecq::train {

namespace {

constexpr std::uint64_t kShuffleSalt = 0x9e3779b97f4a7c15ULL;

std::vector<Index> iota_rows(Index n, Index begin = 0) {
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

bool is_image(const Shape& s) { return s.size() == 3; }

Tensor augmented_batch(const data::Dataset& ds, const std::vector<Index>& rows, const data::AugmentConfig& aug,
                       std::uint64_t seed, int epoch) {
  Tensor x = ds.batch(rows);
  if (!aug.enabled || !is_image(ds.sample_shape)) return x;
  const Index w = ds.sample_numel();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto rng = data::sample_rng(seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(rows[i]));
    Eigen::VectorXd s = x.values.segment(static_cast<Index>(i) * w, w).matrix();
    x.values.segment(static_cast<Index>(i) * w, w) = data::augment(s, ds.sample_shape, aug, rng).array();
  }
  return x;
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

model::Model build_quantized_model(const config::TrainConfig& cfg, const Shape& input_shape, int classes) {
  return model::Model::build(cfg.model, cfg.quant_plan(), input_shape, classes, cfg.seed);
}

CalibrationReport calibrate_model(model::Model& model, const data::Dataset& calib, Index batch_size,
                                  std::ostream* warn) {
  if (calib.size() == 0) throw DataError("calibrate_model: empty calibration set");
  if (batch_size < 1) throw ConfigError("calibrate_model: batch_size must be positive");
  CalibrationReport report;

  for (auto& layer : model.layers()) {
    if (!layer.weight_quant) continue;
    layer.weight_quant->reset_observer();
    layer.weight_quant->observe(layer.weight);
    report.degenerate_channels += layer.weight_quant->freeze();
    ++report.quantizers;
  }
  model.for_each_quantizer([](quant::Quantizer& q, bool is_weight) {
    if (!is_weight) {
      q.reset_observer();
      q.set_mode(quant::Quantizer::Mode::Observe);
    }
  });
  for (Index b = 0; b < calib.size(); b += batch_size) {
    const Index n = std::min(batch_size, calib.size() - b);
    ad::Tape tape;
    model.forward(tape, calib.batch(iota_rows(n, b)), false);
  }
  model.for_each_quantizer([&](quant::Quantizer& q, bool is_weight) {
    if (is_weight) return;
    report.degenerate_channels += q.freeze();
    ++report.quantizers;
  });
  if (warn && report.degenerate_channels > 0)
    *warn << "warning: " << report.degenerate_channels
          << " quantizer channel(s) saw a constant range during calibration; step floored\n";
  return report;
}

double cosine_lr(long t, long total, double lr0) {
  if (total <= 0) throw ConfigError("cosine_lr: total steps must be positive");
  if (t < 0 || t > total) throw ContractError("cosine_lr: step outside [0, total]");
  return 0.5 * lr0 * (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total)));
}

std::vector<int> predict(model::Model& model, const data::Dataset& ds, Index batch_size) {
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be positive");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(ds.size()));
  for (Index b = 0; b < ds.size(); b += batch_size) {
    const Index n = std::min(batch_size, ds.size() - b);
    const Tensor logits = model.predict_logits(ds.batch(iota_rows(n, b)));
    const auto m = logits.matrix();
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      for (Index c = 1; c < m.cols(); ++c)
        if (m(i, c) > m(i, best)) best = c;
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

double evaluate(model::Model& model, const data::Dataset& ds, Index batch_size) {
  if (ds.size() == 0) return 0.0;
  const std::vector<int> pred = predict(model, ds, batch_size);
  Index hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == ds.labels[i];
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

std::pair<data::Dataset, data::Dataset> prepare_data(const config::TrainConfig& cfg) {
  const auto& d = cfg.data;
  using Kind = config::DataConfig::Kind;
  data::Dataset train, val;
  if (d.kind == Kind::Blobs) {
    std::tie(train, val) = data::train_val_split(data::synth_blobs(d.blobs), d.val_fraction, d.blobs.seed);
  } else if (d.kind == Kind::Cifar10) {
    train = data::load_cifar10(d.path, d.standardization, data::Split::Train);
    val = data::load_cifar10(d.path, d.standardization, data::Split::Val);
  } else {
    train = data::load_csv(d.path, data::Split::Train, d.blobs.classes);
    if (d.val_path.empty()) {
      std::tie(train, val) = data::train_val_split(train, d.val_fraction, d.blobs.seed);
    } else {
      val = data::load_csv(d.val_path, data::Split::Val, train.classes);
    }
  }
  if (d.subset > 0 && d.subset < train.size()) {
    data::Dataset sub = data::calibration_subset(train, d.subset, d.blobs.seed);
    std::vector<Index> rows = sub.source_rows;
    std::sort(rows.begin(), rows.end());
    train = train.subset(rows, data::Split::Train);
  }
  if (val.sample_shape != train.sample_shape) throw DataError("validation samples do not match train shape");
  return {std::move(train), std::move(val)};
}

Tensor* TrainState::find_velocity(const std::string& name) {
  for (auto& [n, t] : velocity)
    if (n == name) return &t;
  return nullptr;
}

namespace {

void reset_velocity(TrainState& s) {
  s.velocity.clear();
  for (const auto& p : s.model.parameters())
    if (p.trainable) s.velocity.emplace_back(p.name, Tensor(p.value->shape));
  s.velocity.emplace_back("gate", Tensor(s.gate_weights.shape));
}

}  // namespace

TrainState init_state(const config::TrainConfig& cfg_in, const data::Dataset& train, std::ostream* warn) {
  TrainState s;
  s.cfg = config::resolve(cfg_in);
  config::validate(s.cfg);
  train.validate();
  s.model = build_quantized_model(s.cfg, train.sample_shape, train.classes);
  if (!s.cfg.full_precision) {
    const Index n = std::min(s.cfg.data.calib_size, train.size());
    calibrate_model(s.model, data::calibration_subset(train, n, s.cfg.seed), s.cfg.batch_size, warn);
  }
  s.gate_weights = Tensor({static_cast<Index>(s.cfg.mec.points.size()), s.model.feature_dim()});
  s.rng.seed(s.cfg.seed ^ kShuffleSalt);
  reset_velocity(s);
  return s;
}

std::string meta_json(const config::TrainConfig& cfg, const Shape& input_shape, int classes) {
  config::Json j;
  j["config"] = config::to_json(cfg);
  j["input_shape"] = input_shape;
  j["classes"] = classes;
  return j.dump();
}

Checkpoint capture(const TrainState& s) {
  Checkpoint c;
  auto& m = const_cast<model::Model&>(s.model);
  c.meta_json = meta_json(s.cfg, m.input_shape(), m.classes());
  c.epoch = s.epoch;
  c.rng_state = rng_to_string(s.rng);
  for (const auto& p : m.parameters()) c.put("param/" + p.name, *p.value);
  auto& layers = m.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto put_zp = [&](const std::optional<quant::Quantizer>& q, const char* tag) {
      if (!q || !q->calibrated()) return;
      const auto params = q->params();
      c.put("quant/layer" + std::to_string(i) + "." + tag + ".zero_point",
            Tensor({params.zero_point.size()}, params.zero_point.cast<double>()));
    };
    put_zp(layers[i].weight_quant, "wq");
    put_zp(layers[i].act_quant, "aq");
  }
  c.put("gate", s.gate_weights);
  for (const auto& [name, v] : s.velocity) c.put("momentum/" + name, v);
  c.put("step", Tensor::scalar(static_cast<double>(s.step)));
  return c;
}

TrainState restore(const Checkpoint& c, RestoreOptions opts) {
  config::Json meta;
  try {
    meta = config::Json::parse(c.meta_json);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: unreadable metadata: ") + e.what());
  }
  TrainState s;
  s.cfg = config::resolve(config::from_json(meta.at("config")));
  const Shape input_shape = meta.at("input_shape").get<Shape>();
  const int classes = meta.at("classes").get<int>();
  s.model = build_quantized_model(s.cfg, input_shape, classes);

  // Quantizer state first so steps show up in parameters().
  auto& layers = s.model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto load_q = [&](std::optional<quant::Quantizer>& q, const char* tag) {
      if (!q) return;
      const std::string base = "layer" + std::to_string(i) + "." + tag;
      const Tensor* zp = c.find("quant/" + base + ".zero_point");
      const Tensor* step = c.find("param/" + base + ".step");
      if (!zp && !step) return;
      if (!zp || !step || zp->numel() != step->numel())
        throw CheckpointError("checkpoint: incomplete quantizer state for " + base);
      quant::QuantParams p;
      p.step = step->values;
      p.zero_point = zp->values.round().cast<int>();
      q->set_params(std::move(p));
    };
    load_q(layers[i].weight_quant, "wq");
    load_q(layers[i].act_quant, "aq");
  }
  for (const auto& p : s.model.parameters()) {
    const Tensor* t = c.find("param/" + p.name);
    if (!t) throw CheckpointError("checkpoint: missing tensor " + p.name);
    if (t->shape != p.value->shape)
      throw CheckpointError("checkpoint: " + p.name + " has shape " + shape_str(t->shape) + ", model expects " +
                            shape_str(p.value->shape));
    *p.value = *t;
  }
  const Tensor* gate = c.find("gate");
  s.gate_weights = gate ? *gate : Tensor({static_cast<Index>(s.cfg.mec.points.size()), s.model.feature_dim()});
  s.epoch = c.epoch;
  if (const Tensor* st = c.find("step")) s.step = static_cast<long>(st->item());
  s.rng.seed(s.cfg.seed ^ kShuffleSalt);
  if (!c.rng_state.empty()) {
    std::istringstream is(c.rng_state);
    is >> s.rng;
    if (!is) throw CheckpointError("checkpoint: unreadable RNG state");
  }
  reset_velocity(s);
  if (opts.with_optimizer) {
    for (auto& [name, v] : s.velocity) {
      const Tensor* t = c.find("momentum/" + name);
      if (!t) throw CheckpointError("checkpoint: missing optimizer state for " + name);
      if (t->shape != v.shape) throw CheckpointError("checkpoint: optimizer state shape mismatch for " + name);
      v = *t;
    }
  }
  return s;
}

TrainResult train(TrainState& s, const data::Dataset& train_ds, const data::Dataset& val, const TrainOptions& opts) {
  const config::TrainConfig& cfg = s.cfg;
  train_ds.validate();
  val.validate();
  if (train_ds.sample_shape != s.model.input_shape() || val.sample_shape != s.model.input_shape())
    throw DataError("train: dataset shape does not match the model input " + shape_str(s.model.input_shape()));
  if (train_ds.classes != s.model.classes()) throw DataError("train: class count does not match the model");
  if (cfg.setting == losses::Setting::B && !opts.teacher) throw ConfigError("teacher: Setting B needs a teacher model");
  cfg.data.augment.validate();

  const Index n = train_ds.size();
  const Index bs = std::min<Index>(cfg.batch_size, n);
  // A trailing batch of one sample has no spread to code; fold it in.
  const Index per_epoch = std::max<Index>(1, n / bs);
  const long total_steps = static_cast<long>(per_epoch) * cfg.epochs;
  const bool use_mec = !cfg.baseline_mode;

  TrainResult result;
  Checkpoint last_good = capture(s);
  result.last = last_good;

  for (int epoch = s.epoch; epoch < cfg.epochs; ++epoch) {
    const double lambda = use_mec ? losses::lambda_at(cfg.schedule, epoch) : 0.0;
    std::vector<Index> order = iota_rows(n);
    std::shuffle(order.begin(), order.end(), s.rng);

    EpochMetrics em;
    em.epoch = epoch;
    em.lambda = lambda;
    long steps_in_epoch = 0;
    for (Index b = 0; b < per_epoch; ++b) {
      if (opts.max_steps >= 0 && s.step >= opts.max_steps) break;
      const Index begin = b * bs;
      const Index end = b + 1 == per_epoch ? n : begin + bs;
      std::vector<Index> rows(order.begin() + begin, order.begin() + end);
      const Tensor x = augmented_batch(train_ds, rows, cfg.data.augment, cfg.seed, epoch);
      const double lr = cosine_lr(std::min(s.step, total_steps), total_steps, cfg.lr0);

      ad::Tape tape;
      const auto out = s.model.forward(tape, x, true);
      const ad::Var gate = tape.variable(s.gate_weights);
      losses::Supervision sup;
      if (cfg.setting == losses::Setting::A) {
        losses::Labels y;
        y.y.reserve(rows.size());
        for (Index r : rows) y.y.push_back(train_ds.labels[static_cast<std::size_t>(r)]);
        sup = std::move(y);
      } else {
        sup = losses::Teacher{opts.teacher->predict_logits(x)};
      }
      losses::MecTerm term{use_mec ? &cfg.mec : nullptr, gate};
      losses::TotalLoss loss;
      try {
        loss = losses::total_loss(out.logits, out.features, sup, lambda, term);
      } catch (const DegenerateError&) {
        // all-zero features carry no code length; fall back to the task loss
        loss = losses::total_loss(out.logits, out.features, sup, lambda, losses::MecTerm{});
      }

      if (!std::isfinite(loss.report.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << s.step << " (epoch " << epoch << ")";
        s = restore(last_good);
        result.diverged = true;
        result.message = msg.str();
        result.last = last_good;
        return result;
      }

      const ad::Gradients g = tape.backward(loss.total);
      const auto params = s.model.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (!p.trainable) continue;
        Tensor grad = g[out.params[i]];
        if (p.decay && cfg.weight_decay > 0.0) grad.values += cfg.weight_decay * p.value->values;
        Tensor* v = s.find_velocity(p.name);
        v->values = cfg.momentum * v->values + grad.values;
        p.value->values -= lr * v->values;
        if (p.kind == model::ParamKind::QuantStep) p.value->values = p.value->values.max(quant::kStepFloor);
      }
      if (use_mec) {
        Tensor* v = s.find_velocity("gate");
        v->values = cfg.momentum * v->values + g[gate].values;
        s.gate_weights.values -= lr * v->values;
      }

      StepRecord rec{s.step, epoch, loss.report};
      if (opts.on_step) opts.on_step(rec);
      result.steps.push_back(rec);
      em.lr = lr;
      em.task += loss.report.task_loss;
      em.mec += loss.report.mec_raw;
      em.total += loss.report.total;
      ++steps_in_epoch;
      ++s.step;
    }
    if (steps_in_epoch == 0) break;
    const double k = static_cast<double>(steps_in_epoch);
    em.task /= k;
    em.mec /= k;
    em.total /= k;
    em.val_acc = evaluate(s.model, val, std::max<Index>(cfg.batch_size, 1));
    s.epoch = epoch + 1;
    last_good = capture(s);
    result.last = last_good;
    if (em.val_acc > result.best_val_acc) {
      result.best_val_acc = em.val_acc;
      result.best = last_good;
    }
    result.epochs.push_back(em);
    if (opts.on_epoch) opts.on_epoch(em);
  }
  if (result.best_val_acc < 0.0) result.best = result.last;
  return result;
}

void write_metrics_header(std::ostream& out) { out << "epoch,lr,lambda,task,mec,total,val_acc\n"; }

void write_metrics_row(std::ostream& out, const EpochMetrics& m) {
  out << m.epoch << ',' << std::setprecision(17) << m.lr << ',' << m.lambda << ',' << m.task << ',' << m.mec << ','
      << m.total << ',' << m.val_acc << '\n';
}

}  // namespace mecq::train

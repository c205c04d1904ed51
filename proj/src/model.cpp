#include "mecq/model.hpp"

#include <cmath>
#include <random>

#include "mecq/errors.hpp"

namespace mecq::model {

void wrap_layer(Layer& layer, quant::QuantSpec weight_spec, quant::QuantSpec act_spec) {
  weight_spec.role = quant::Role::Weight;
  weight_spec.granularity = quant::Granularity::PerChannel;
  weight_spec.axis = 0;
  act_spec.role = quant::Role::Activation;
  act_spec.granularity = quant::Granularity::PerTensor;
  if (layer.weight.rank() < 2) throw ShapeError("wrap_layer: layer has no weight matrix");
  layer.weight_quant.emplace(weight_spec);
  layer.act_quant.emplace(act_spec);
}

namespace {

Tensor he_normal(Shape shape, Index fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = normal(rng);
  return t;
}

Layer make_linear(Index in, Index out, bool relu, std::mt19937_64& rng) {
  Layer l;
  l.kind = LayerKind::Linear;
  l.weight = he_normal({out, in}, in, rng);
  l.bias = Tensor({out});
  l.relu = relu;
  return l;
}

Layer make_conv(Index in, Index out, Index stride, std::mt19937_64& rng) {
  Layer l;
  l.kind = LayerKind::Conv;
  l.weight = he_normal({out, in, 3, 3}, in * 9, rng);
  l.gamma = Tensor::filled({out}, 1.0);
  l.beta = Tensor({out});
  l.conv = ad::Conv2dParams{stride, 1};
  l.relu = true;
  return l;
}

}  // namespace

Model Model::build(const ModelSpec& spec, const QuantPlan& plan, const Shape& input_shape, int classes,
                   std::uint64_t seed) {
  if (classes < 2) throw ConfigError("model: need at least 2 classes");
  Model m;
  m.spec_ = spec;
  m.plan_ = plan;
  m.input_shape_ = input_shape;
  m.classes_ = classes;
  std::mt19937_64 rng(seed);

  if (spec.kind == ModelSpec::Kind::Mlp) {
    if (spec.dims.size() < 2) throw ConfigError("model.dims: an MLP needs at least input and output sizes");
    if (spec.dims.front() != shape_numel(input_shape))
      throw ConfigError("model.dims: input size " + std::to_string(spec.dims.front()) + " does not match data width " +
                        std::to_string(shape_numel(input_shape)));
    if (spec.dims.back() != classes)
      throw ConfigError("model.dims: output size " + std::to_string(spec.dims.back()) + " does not match " +
                        std::to_string(classes) + " classes");
    for (int d : spec.dims)
      if (d < 1) throw ConfigError("model.dims: sizes must be positive");
    for (std::size_t i = 0; i + 1 < spec.dims.size(); ++i)
      m.layers_.push_back(make_linear(spec.dims[i], spec.dims[i + 1], i + 2 < spec.dims.size(), rng));
    m.head_start_ = 0;
  } else {
    if (input_shape.size() != 3) throw ConfigError("model: smallcnn needs CHW samples, got " + shape_str(input_shape));
    if (spec.channels.empty() || spec.channels.size() > 4)
      throw ConfigError("model.channels: smallcnn takes 1 to 4 conv blocks");
    Index in = input_shape[0];
    for (std::size_t i = 0; i < spec.channels.size(); ++i) {
      if (spec.channels[i] < 1) throw ConfigError("model.channels: sizes must be positive");
      m.layers_.push_back(make_conv(in, spec.channels[i], i == 0 ? 1 : 2, rng));
      in = spec.channels[i];
    }
    m.head_start_ = m.layers_.size();
    m.layers_.push_back(make_linear(in, classes, false, rng));
  }

  if (plan.enabled) {
    const std::size_t last = m.layers_.size() - 1;
    for (std::size_t i = 0; i < m.layers_.size(); ++i) {
      const bool edge = plan.first_last_8bit && (i == 0 || i == last);
      quant::QuantSpec w;
      w.bits = edge ? 8 : plan.w_bits;
      w.symmetric = plan.symmetric;
      w.learnable_params = plan.learnable_params;
      quant::QuantSpec a = w;
      a.bits = edge ? 8 : plan.a_bits;
      wrap_layer(m.layers_[i], w, a);
    }
  }
  return m;
}

Index Model::feature_dim() const { return layers_.back().weight.dim(1); }

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& l = layers_[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    out.push_back({p + "weight", &l.weight, ParamKind::Weight, true, true});
    if (l.kind == LayerKind::Linear) {
      out.push_back({p + "bias", &l.bias, ParamKind::Bias, true, true});
    } else {
      out.push_back({p + "gamma", &l.gamma, ParamKind::Affine, true, true});
      out.push_back({p + "beta", &l.beta, ParamKind::Affine, true, true});
    }
    auto add_step = [&](std::optional<quant::Quantizer>& q, const char* tag) {
      if (q && q->calibrated())
        out.push_back({p + tag + ".step", &q->step(), ParamKind::QuantStep, q->spec().learnable_params, false});
    };
    add_step(l.weight_quant, "wq");
    add_step(l.act_quant, "aq");
  }
  return out;
}

Index Model::parameter_count() const {
  Index n = 0;
  for (const Layer& l : layers_) n += l.weight.numel() + l.bias.numel() + l.gamma.numel() + l.beta.numel();
  return n;
}

Model::Output Model::forward(ad::Tape& tape, const Tensor& input, bool requires_grad) {
  if (input.rank() != static_cast<Index>(input_shape_.size()) + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), input.shape.begin() + 1))
    throw ShapeError("model: input " + shape_str(input.shape) + " does not match sample shape " +
                     shape_str(input_shape_));
  Output out;
  const std::vector<ParamRef> params = parameters();
  out.params.reserve(params.size());
  for (const ParamRef& p : params)
    out.params.push_back(requires_grad && p.trainable ? tape.variable(*p.value) : tape.constant(*p.value));

  const Index batch = input.shape[0];
  ad::Var x = tape.constant(input);
  if (spec_.kind == ModelSpec::Kind::Mlp && input.rank() != 2) x = ad::reshape(x, {batch, shape_numel(input_shape_)});

  std::size_t k = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& l = layers_[i];
    ad::Var w = out.params[k++];
    ad::Var b1 = out.params[k++];
    ad::Var b2;
    if (l.kind == LayerKind::Conv) b2 = out.params[k++];
    ad::Var wstep, astep;
    if (l.weight_quant && l.weight_quant->calibrated()) wstep = out.params[k++];
    if (l.act_quant && l.act_quant->calibrated()) astep = out.params[k++];

    if (i == head_start_ && spec_.kind == ModelSpec::Kind::SmallCnn) x = ad::global_avg_pool(x);
    if (i + 1 == layers_.size()) out.features = x;

    if (l.act_quant) x = l.act_quant->apply(x, astep);
    if (l.weight_quant) w = l.weight_quant->apply(w, wstep);

    if (l.kind == LayerKind::Linear) {
      x = ad::add_bias(ad::matmul(x, ad::transpose(w)), b1);
    } else {
      x = ad::channel_affine(ad::conv2d(x, w, l.conv), b1, b2);
    }
    if (l.relu) x = ad::relu(x);
  }
  out.logits = x;
  return out;
}

Tensor Model::predict_logits(const Tensor& input) {
  ad::Tape tape;
  return forward(tape, input, false).logits.value();
}

Tensor Model::features(const Tensor& input) {
  ad::Tape tape;
  return forward(tape, input, false).features.value();
}

void Model::for_each_quantizer(const std::function<void(quant::Quantizer&, bool)>& fn) {
  for (Layer& l : layers_) {
    if (l.weight_quant) fn(*l.weight_quant, true);
    if (l.act_quant) fn(*l.act_quant, false);
  }
}

}  // namespace mecq::model

#pragma once

// Model zoo (MLP, small CNN) with fake-quantized weighted layers.
//
// Every weighted layer quantizes its weight per output channel and its input
// activation per tensor. The backbone output (input of the classifier head)
// is exposed for the coding-length regularizer.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mecq/autodiff.hpp"
#include "mecq/quant.hpp"

namespace mecq::model {

enum class LayerKind { Linear, Conv };

struct Layer {
  LayerKind kind = LayerKind::Linear;
  Tensor weight;  // Linear: (out, in); Conv: (O, C, KH, KW)
  Tensor bias;    // Linear only: (out)
  Tensor gamma;   // Conv only: per-channel scale
  Tensor beta;    // Conv only: per-channel shift
  ad::Conv2dParams conv;
  bool relu = true;
  std::optional<quant::Quantizer> weight_quant;
  std::optional<quant::Quantizer> act_quant;

  Index out_channels() const { return weight.dim(0); }
};

// Attaches quantizers to a layer. The weight spec is forced to per-channel
// along axis 0; the activation spec to per-tensor.
void wrap_layer(Layer& layer, quant::QuantSpec weight_spec, quant::QuantSpec act_spec);

struct ModelSpec {
  enum class Kind { Mlp, SmallCnn };
  Kind kind = Kind::Mlp;
  std::vector<int> dims;      // Mlp: input, hidden..., classes
  std::vector<int> channels;  // SmallCnn: conv channels per block
};

struct QuantPlan {
  bool enabled = true;
  int w_bits = 4;
  int a_bits = 4;
  bool first_last_8bit = true;
  bool learnable_params = true;
  bool symmetric = false;
};

enum class ParamKind { Weight, Bias, Affine, QuantStep };

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  ParamKind kind = ParamKind::Weight;
  bool trainable = true;
  bool decay = true;
};

class Model {
 public:
  Model() = default;

  static Model build(const ModelSpec& spec, const QuantPlan& plan, const Shape& input_shape, int classes,
                     std::uint64_t seed);

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  int classes() const { return classes_; }
  const ModelSpec& spec() const { return spec_; }
  const QuantPlan& plan() const { return plan_; }
  // Index of the first fully connected layer; layers before it are convs.
  std::size_t head_start() const { return head_start_; }

  Index feature_dim() const;

  // Weights, biases, affines and learnable quantizer steps, in a fixed order.
  std::vector<ParamRef> parameters();
  // Only the network weights (no quantizer state).
  Index parameter_count() const;

  struct Output {
    ad::Var logits;                 // (batch, classes)
    ad::Var features;               // (batch, feature_dim): backbone output
    std::vector<ad::Var> params;    // aligned with parameters()
  };

  // input: (batch, sample_shape...). Trainable parameters are bound as tape
  // variables when requires_grad is true, otherwise as constants.
  Output forward(ad::Tape& tape, const Tensor& input, bool requires_grad = true);

  // Value-only inference.
  Tensor predict_logits(const Tensor& input);
  Tensor features(const Tensor& input);

  void for_each_quantizer(const std::function<void(quant::Quantizer&, bool is_weight)>& fn);

 private:
  ModelSpec spec_;
  QuantPlan plan_;
  Shape input_shape_;
  int classes_ = 0;
  std::size_t head_start_ = 0;
  std::vector<Layer> layers_;
};

}  // namespace mecq::model

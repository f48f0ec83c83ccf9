//
// Copyright 2026 The bkdp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

// Layers of a feed-forward network.
//
// Trainable parameter groups are exposed as clipping units. A generalized
// linear unit computes s = a W (+ b) after lowering its input to the
// canonical activation a[B, T, d]: linear layers use the input directly
// (T = 1 for flat inputs), convolutions use im2col columns and embeddings use
// a one-hot expansion kept as token indices. Composite layers (LoRA, adapter)
// contribute two generalized linear units. Normalization layers contribute
// one affine unit whose per-sample gradients are always instantiated.

#ifndef BKDP_LAYERS_H_
#define BKDP_LAYERS_H_

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bkdp/tensor.h"

namespace bkdp {

enum class LayerKind {
  kLinear,
  kConv2d,
  kEmbedding,
  kLayerNorm,
  kGroupNorm,
  kLora,
  kAdapter,
  kActivation,
  kPool,
  kFlatten,
  kTokens,
  kAttention,
};

std::string LayerKindName(LayerKind kind);

enum class Activation { kRelu, kGelu, kTanh };

Activation ParseActivation(const std::string& name);
std::string ActivationName(Activation activation);

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
  // Position in Graph::parameters(); assigned when the graph is finalized.
  int id = -1;
};

enum class UnitKind { kGeneralizedLinear, kNormAffine };

// One clippable parameter group. For a generalized linear unit `weight` is
// d x p and `bias` (optional) has p entries. For a normalization unit
// `weight` is the scale and `bias` the shift, both with d = p = channels
// entries, and the activation is the normalized input.
struct UnitSpec {
  UnitKind kind = UnitKind::kGeneralizedLinear;
  std::string name;
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  int64_t T = 1;
  int64_t d = 0;
  int64_t p = 0;
  // Embedding units keep token indices instead of a dense activation.
  bool index_activation = false;
  // Position of the unit in the graph and of its layer.
  int index = -1;
  int layer = -1;
  int slot = 0;
};

// Per-unit storage kept across one training step.
struct UnitBook {
  Tensor activation;               // [B, T, d]
  std::vector<int64_t> token_ids;  // [B * T] for embedding units
  Tensor output_grad;              // [B, T, p]

  // Clipping intermediates.
  Tensor gram_activation;  // [B, T, T]
  Tensor gram_output_grad;
  Tensor per_sample_weight;  // [B, d, p]
  Tensor per_sample_bias;    // [B, p]
  Tensor sq_norms;           // [B]
};

struct LayerBook {
  Shape input_shape;
  std::vector<UnitBook> units;
  // Layer-specific saved state (activation derivatives, pooling argmax,
  // normalization statistics, attention probabilities).
  Tensor saved;
  Tensor saved_aux;
  std::vector<int64_t> saved_index;
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  virtual LayerKind kind() const = 0;
  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

  // Shapes include the leading batch dimension.
  virtual Shape OutputShape(const Shape& input) const = 0;

  // Consumes the input; records whatever the backward pass and the clipping
  // units need in `book`.
  virtual Tensor Forward(Tensor x, LayerBook& book,
                         OpCounters& counters) const = 0;

  // Given the gradient of the loss with respect to the layer output, stores
  // every unit's output gradient in `book` and returns the gradient with
  // respect to the layer input (an absent tensor when not requested).
  virtual Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                          OpCounters& counters) const = 0;

  // Clipping units for an input of the given shape; empty when nothing in
  // the layer is trainable.
  virtual std::vector<UnitSpec> Units(const Shape& /*input*/) const {
    return {};
  }

  std::vector<Parameter*> parameters() const;

  int first_unit() const { return first_unit_; }
  void set_first_unit(int index) { first_unit_ = index; }

 protected:
  Parameter* AddParameter(std::string name, Tensor value, bool trainable);

 private:
  std::string name_;
  std::vector<std::unique_ptr<Parameter>> params_;
  int first_unit_ = 0;
};

// Initialization draws N(0, 1/fan_in) entries; shape-only layers hold
// shape-only parameters.
struct LayerInit {
  SeededRng* rng = nullptr;
  bool shape_only = false;
  bool trainable = true;
};

class LinearLayer : public Layer {
 public:
  LinearLayer(std::string name, int64_t in, int64_t out, bool bias,
              const LayerInit& init);
  LayerKind kind() const override { return LayerKind::kLinear; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
  std::vector<UnitSpec> Units(const Shape& input) const override;

  Parameter& weight() const { return *weight_; }
  Parameter* bias() const { return bias_; }

 private:
  int64_t in_, out_;
  Parameter* weight_;
  Parameter* bias_ = nullptr;
};

class Conv2dLayer : public Layer {
 public:
  Conv2dLayer(std::string name, int64_t in_channels, int64_t out_channels,
              const Conv2dGeometry& geometry, bool bias,
              const LayerInit& init);
  LayerKind kind() const override { return LayerKind::kConv2d; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
  std::vector<UnitSpec> Units(const Shape& input) const override;

  const Conv2dGeometry& geometry() const { return geometry_; }
  // Weight is stored as [C_in * kh * kw, C_out].
  Parameter& weight() const { return *weight_; }
  Parameter* bias() const { return bias_; }

 private:
  int64_t in_channels_, out_channels_;
  Conv2dGeometry geometry_;
  Parameter* weight_;
  Parameter* bias_ = nullptr;
};

// Input holds token ids (as doubles) of shape [B, T].
class EmbeddingLayer : public Layer {
 public:
  EmbeddingLayer(std::string name, int64_t vocab, int64_t dim,
                 const LayerInit& init);
  LayerKind kind() const override { return LayerKind::kEmbedding; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
  std::vector<UnitSpec> Units(const Shape& input) const override;

  int64_t vocab() const { return vocab_; }
  Parameter& weight() const { return *weight_; }

 private:
  int64_t vocab_, dim_;
  Parameter* weight_;
};

// Normalizes the last axis.
class LayerNormLayer : public Layer {
 public:
  LayerNormLayer(std::string name, int64_t dim, const LayerInit& init);
  LayerKind kind() const override { return LayerKind::kLayerNorm; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
  std::vector<UnitSpec> Units(const Shape& input) const override;

 private:
  int64_t dim_;
  Parameter* scale_;
  Parameter* shift_;
};

// Normalizes channel groups of a [B, C, H, W] input.
class GroupNormLayer : public Layer {
 public:
  GroupNormLayer(std::string name, int64_t groups, int64_t channels,
                 const LayerInit& init);
  LayerKind kind() const override { return LayerKind::kGroupNorm; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
  std::vector<UnitSpec> Units(const Shape& input) const override;

 private:
  int64_t groups_, channels_;
  Parameter* scale_;
  Parameter* shift_;
};

// A(x) = x W + x L R with a frozen base weight W.
class LoraLayer : public Layer {
 public:
  LoraLayer(std::string name, int64_t in, int64_t out, int64_t rank,
            const LayerInit& init);
  LayerKind kind() const override { return LayerKind::kLora; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
  std::vector<UnitSpec> Units(const Shape& input) const override;

  Parameter& base() const { return *base_; }
  Parameter& down() const { return *down_; }
  Parameter& up() const { return *up_; }

 private:
  int64_t in_, out_, rank_;
  Parameter* base_;
  Parameter* down_;
  Parameter* up_;
};

// A(x) = act(x D) U + x.
class AdapterLayer : public Layer {
 public:
  AdapterLayer(std::string name, int64_t dim, int64_t rank,
               Activation activation, const LayerInit& init);
  LayerKind kind() const override { return LayerKind::kAdapter; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
  std::vector<UnitSpec> Units(const Shape& input) const override;

  Parameter& down() const { return *down_; }
  Parameter& up() const { return *up_; }

 private:
  int64_t dim_, rank_;
  Activation activation_;
  Parameter* down_;
  Parameter* up_;
};

class ActivationLayer : public Layer {
 public:
  ActivationLayer(std::string name, Activation activation)
      : Layer(std::move(name)), activation_(activation) {}
  LayerKind kind() const override { return LayerKind::kActivation; }
  Shape OutputShape(const Shape& input) const override { return input; }
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
  Activation activation() const { return activation_; }

 private:
  Activation activation_;
};

enum class PoolKind { kMax, kAverage, kGlobalAverage };

// Pooling over [B, C, H, W]; global average pooling yields [B, C].
class PoolLayer : public Layer {
 public:
  PoolLayer(std::string name, PoolKind pool, int64_t kernel, int64_t stride,
            int64_t padding);
  LayerKind kind() const override { return LayerKind::kPool; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;

 private:
  PoolKind pool_;
  Conv2dGeometry geometry_;
};

// [B, ...] -> [B, prod(...)]
class FlattenLayer : public Layer {
 public:
  explicit FlattenLayer(std::string name) : Layer(std::move(name)) {}
  LayerKind kind() const override { return LayerKind::kFlatten; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
};

// [B, C, H, W] -> [B, H * W, C]
class TokensLayer : public Layer {
 public:
  explicit TokensLayer(std::string name) : Layer(std::move(name)) {}
  LayerKind kind() const override { return LayerKind::kTokens; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;
};

// Parameter-free multi-head self-attention over a packed [B, T, 3 * D]
// query/key/value input, producing [B, T, D]. The projections around it are
// ordinary linear layers.
class AttentionLayer : public Layer {
 public:
  AttentionLayer(std::string name, int64_t heads);
  LayerKind kind() const override { return LayerKind::kAttention; }
  Shape OutputShape(const Shape& input) const override;
  Tensor Forward(Tensor x, LayerBook& book,
                 OpCounters& counters) const override;
  Tensor Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                  OpCounters& counters) const override;

 private:
  int64_t heads_;
};

// ---------------------------------------------------------------------------
// Static layer descriptions.

// (T, d, p) of one clippable unit or frozen generalized linear product.
struct LayerShape {
  std::string name;
  LayerKind kind = LayerKind::kLinear;
  UnitKind unit = UnitKind::kGeneralizedLinear;
  int64_t T = 1;
  int64_t d = 0;
  int64_t p = 0;
  int64_t rank = 0;  // LoRA / adapter bottleneck width
  bool trainable = true;
  bool has_bias = false;
};

// Splits an adapter (d = p = width) or LoRA layer into its two generalized
// linear sub-modules.
std::vector<LayerShape> DecomposeComposite(const LayerShape& layer);

// Canonical generalized linear view of a layer applied to `input`.
struct GeneralizedLinearView {
  Tensor activation;  // [B, T, d]; embeddings are expanded to one-hot rows
  Tensor weight;      // [d, p]
};

GeneralizedLinearView LowerToGeneralizedLinear(const Layer& layer,
                                               const Tensor& input,
                                               OpCounters& counters);

// Per-sample [scale, shift] gradients [B, 2 * C] of a normalization unit from
// its normalized input and output gradient, both [B, T, C].
Tensor NormPerSampleGrads(const Tensor& normalized, const Tensor& output_grad,
                          OpCounters& counters);

}  // namespace bkdp

#endif  // BKDP_LAYERS_H_

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

// Reverse-mode differentiation over a feed-forward chain of layers.
//
// Backpropagation is split into its two sub-processes. The output-gradient
// pass propagates dL/ds through the chain and books every clipping unit's
// output gradient next to the activation booked by the forward pass; it
// computes no parameter gradient. Parameter gradients are formed separately
// from the book, either summed over the batch or weighted per sample.

#ifndef BKDP_AUTOGRAD_H_
#define BKDP_AUTOGRAD_H_

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bkdp/layers.h"
#include "bkdp/tensor.h"

namespace bkdp {

// Per-sample losses, reduced by summation.
// kSquaredError: L_i = sum of (s - y)^2 over the sample's outputs.
// kCrossEntropy: L_i = sum over positions of -log softmax(s)[y]; targets are
// class ids of shape [B] or [B, T].
enum class LossKind { kSquaredError, kCrossEntropy };

std::string LossKindName(LossKind loss);

class Graph {
 public:
  // `input_shape` excludes the batch dimension.
  Graph(Shape input_shape, LossKind loss);

  // Appends a layer; shapes are checked against the previous layer's output.
  Layer& Add(std::unique_ptr<Layer> layer);

  template <typename L, typename... Args>
  L& Emplace(Args&&... args) {
    return static_cast<L&>(
        Add(std::make_unique<L>(std::forward<Args>(args)...)));
  }

  const Shape& input_shape() const { return input_shape_; }
  LossKind loss() const { return loss_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  const Layer& layer(int index) const { return *layers_.at(index); }

  // All parameters in layer order; Parameter::id indexes this list.
  const std::vector<Parameter*>& parameters() const { return parameters_; }
  std::vector<Parameter*> trainable_parameters() const;

  // Clipping units in layer order; UnitSpec::index indexes this list.
  const std::vector<UnitSpec>& units() const { return units_; }

  // Shapes with a leading batch dimension.
  Shape LayerInputShape(int index, int64_t batch) const;
  Shape OutputShape(int64_t batch) const;

  // Earliest layer holding a clipping unit, or -1.
  int first_trainable_layer() const;

  // Fingerprint of the unit shapes, used to match reports to graphs.
  std::string Fingerprint() const;

 private:
  Shape input_shape_;
  LossKind loss_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<Shape> layer_inputs_;  // without batch
  Shape output_shape_;
  std::vector<Parameter*> parameters_;
  std::vector<UnitSpec> units_;
};

// Storage for one training step.
class GradBook {
 public:
  std::vector<LayerBook> layers;
  Tensor output;   // model output
  Tensor targets;
  int64_t batch = 0;
  bool has_forward = false;
  bool has_output_grads = false;

  UnitBook& unit(const UnitSpec& spec);
  const UnitBook& unit(const UnitSpec& spec) const;

  // Drops every booked tensor.
  void Clear();
};

// Runs the forward pass, booking activations. Returns the per-sample losses
// [B]. The batch is copied into the counter context.
Tensor Forward(const Graph& graph, const Tensor& batch, const Tensor& targets,
               GradBook& book, OpCounters& counters);

// Called after each layer's backward step with the layer index.
using LayerHook = std::function<void(int layer)>;

// Propagates d(sum_i w_i L_i)/ds down to layer `stop_layer` (default: the
// earliest trainable layer), booking unit output gradients. Layers below the
// stop layer are not visited and the stop layer's input gradient is not
// formed. An empty weight span means w_i = 1.
void BackwardOutputGrads(const Graph& graph, GradBook& book,
                         std::span<const double> loss_weights,
                         OpCounters& counters, int stop_layer = -1,
                         const LayerHook& hook = nullptr);

// a[B, T, d]^T ds[B, T, p] summed over the batch and T as one contraction.
Tensor ParamGrad(const Tensor& activation, const Tensor& output_grad,
                 OpCounters& counters);

// Adds sum_i w_i g_i(unit) into the weight and bias gradient buffers (either
// may be null to skip it). Null `weights` means w_i = 1; shape-only weights
// are counted as weights.
void AccumulateUnitGrads(const UnitSpec& unit, const UnitBook& book,
                         const Tensor* weights, Tensor* weight_grad,
                         Tensor* bias_grad, OpCounters& counters);

// Gradients of sum_i L_i for every trainable parameter, indexed like
// Graph::parameters() (absent entries for frozen parameters). Requires the
// output-gradient pass to have reached the earliest trainable layer.
std::vector<Tensor> AllParamGrads(const Graph& graph, const GradBook& book,
                                  OpCounters& counters);

// A minimal set of trainable parameters whose descendants cover the outputs
// of every trainable layer: the bias of the earliest trainable unit when it
// has one, otherwise its weight. Returns parameter ids.
std::vector<int> SelectOriginParams(const Graph& graph);

}  // namespace bkdp

#endif  // BKDP_AUTOGRAD_H_

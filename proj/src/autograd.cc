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

#include "bkdp/autograd.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "bkdp/status.h"

namespace bkdp {
namespace {

Shape WithBatch(int64_t batch, const Shape& shape) {
  Shape out{batch};
  out.insert(out.end(), shape.begin(), shape.end());
  return out;
}

Shape WithoutBatch(const Shape& shape) {
  return Shape(shape.begin() + 1, shape.end());
}

void CheckTargets(const Graph& graph, const Tensor& output,
                  const Tensor& targets) {
  const Shape& out = output.shape();
  if (graph.loss() == LossKind::kSquaredError) {
    if (targets.shape() != out) {
      throw DimensionError("targets " + ShapeToString(targets.shape()) +
                           " do not match model output " +
                           ShapeToString(out));
    }
    return;
  }
  Shape ids(out.begin(), out.end() - 1);
  if (targets.shape() != ids) {
    throw DimensionError("class targets " + ShapeToString(targets.shape()) +
                         " do not match model output " + ShapeToString(out));
  }
  if (targets.shape_only()) return;
  for (double v : targets.data()) {
    const auto c = static_cast<int64_t>(v);
    if (static_cast<double>(c) != v || c < 0 || c >= out.back()) {
      throw DimensionError("class target " + std::to_string(v) +
                           " outside [0, " + std::to_string(out.back()) + ")");
    }
  }
}

Tensor ComputeLosses(LossKind loss, const Tensor& output,
                     const Tensor& targets, OpCounters& counters) {
  const int64_t batch = output.dim(0);
  const int64_t per = output.numel() / batch;
  counters.AddMulAdds(3 * output.numel());
  Tensor losses = Tensor::Like({batch}, output.shape_only(), &counters);
  if (losses.shape_only()) return losses;
  const double* ps = output.data().data();
  const double* py = targets.data().data();
  if (loss == LossKind::kSquaredError) {
    for (int64_t i = 0; i < batch; ++i) {
      double sum = 0.0;
      for (int64_t j = 0; j < per; ++j) {
        const double r = ps[i * per + j] - py[i * per + j];
        sum += r * r;
      }
      losses[i] = sum;
    }
    return losses;
  }
  const int64_t classes = output.dim(-1);
  const int64_t positions = per / classes;
  for (int64_t i = 0; i < batch; ++i) {
    double sum = 0.0;
    for (int64_t t = 0; t < positions; ++t) {
      const double* row = ps + (i * positions + t) * classes;
      const double mx = *std::max_element(row, row + classes);
      double z = 0.0;
      for (int64_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
      const auto y = static_cast<int64_t>(py[i * positions + t]);
      sum += std::log(z) + mx - row[y];
    }
    losses[i] = sum;
  }
  return losses;
}

Tensor LossGradient(LossKind loss, const Tensor& output, const Tensor& targets,
                    std::span<const double> weights, OpCounters& counters) {
  const int64_t batch = output.dim(0);
  const int64_t per = output.numel() / batch;
  counters.AddMulAdds(3 * output.numel());
  Tensor grad = Tensor::Like(output.shape(), output.shape_only(), &counters);
  if (grad.shape_only()) return grad;
  const double* ps = output.data().data();
  const double* py = targets.data().data();
  double* pg = grad.data().data();
  auto weight = [&](int64_t i) {
    return weights.empty() ? 1.0 : weights[static_cast<size_t>(i)];
  };
  if (loss == LossKind::kSquaredError) {
    for (int64_t i = 0; i < batch; ++i) {
      const double w = 2.0 * weight(i);
      for (int64_t j = 0; j < per; ++j) {
        pg[i * per + j] = w * (ps[i * per + j] - py[i * per + j]);
      }
    }
    return grad;
  }
  const int64_t classes = output.dim(-1);
  const int64_t positions = per / classes;
  for (int64_t i = 0; i < batch; ++i) {
    const double w = weight(i);
    for (int64_t t = 0; t < positions; ++t) {
      const double* row = ps + (i * positions + t) * classes;
      double* grow = pg + (i * positions + t) * classes;
      const double mx = *std::max_element(row, row + classes);
      double z = 0.0;
      for (int64_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
      const auto y = static_cast<int64_t>(py[i * positions + t]);
      for (int64_t c = 0; c < classes; ++c) {
        grow[c] = w * (std::exp(row[c] - mx) / z - (c == y ? 1.0 : 0.0));
      }
    }
  }
  return grad;
}

// Rows of a [B, T, n] tensor, optionally weighted per sample, summed into
// out[n].
void AccumulateColumnSums(const Tensor& x, const Tensor* weights, Tensor& out,
                          OpCounters& counters) {
  const int64_t batch = x.dim(0);
  const int64_t n = x.dim(-1);
  const int64_t rows_per_sample = x.numel() / (batch * n);
  counters.AddMulAdds(2 * x.numel());
  if (x.shape_only() || out.shape_only()) return;
  const double* px = x.data().data();
  double* po = out.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    const double w = weights == nullptr ? 1.0 : (*weights)[i];
    for (int64_t r = 0; r < rows_per_sample; ++r) {
      const double* row = px + (i * rows_per_sample + r) * n;
      for (int64_t j = 0; j < n; ++j) po[j] += w * row[j];
    }
  }
}

}  // namespace

std::string LossKindName(LossKind loss) {
  return loss == LossKind::kSquaredError ? "mse" : "xent";
}

// ---------------------------------------------------------------------------
// Graph

Graph::Graph(Shape input_shape, LossKind loss)
    : input_shape_(std::move(input_shape)), loss_(loss) {
  if (input_shape_.empty()) {
    throw SpecificationError("graph input shape must be non-empty");
  }
  for (int64_t d : input_shape_) {
    if (d <= 0) {
      throw SpecificationError("graph input dimensions must be positive");
    }
  }
  output_shape_ = input_shape_;
}

Layer& Graph::Add(std::unique_ptr<Layer> layer) {
  const Shape input = WithBatch(1, output_shape_);
  const Shape output = layer->OutputShape(input);
  const int index = num_layers();
  layer->set_first_unit(static_cast<int>(units_.size()));
  std::vector<UnitSpec> units = layer->Units(input);
  for (size_t k = 0; k < units.size(); ++k) {
    units[k].index = static_cast<int>(units_.size());
    units[k].layer = index;
    units[k].slot = static_cast<int>(k);
    units_.push_back(units[k]);
  }
  for (Parameter* p : layer->parameters()) {
    p->id = static_cast<int>(parameters_.size());
    parameters_.push_back(p);
  }
  layer_inputs_.push_back(output_shape_);
  output_shape_ = WithoutBatch(output);
  layers_.push_back(std::move(layer));
  return *layers_.back();
}

std::vector<Parameter*> Graph::trainable_parameters() const {
  std::vector<Parameter*> out;
  for (Parameter* p : parameters_) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

Shape Graph::LayerInputShape(int index, int64_t batch) const {
  return WithBatch(batch, layer_inputs_.at(index));
}

Shape Graph::OutputShape(int64_t batch) const {
  return WithBatch(batch, output_shape_);
}

int Graph::first_trainable_layer() const {
  return units_.empty() ? -1 : units_.front().layer;
}

std::string Graph::Fingerprint() const {
  std::ostringstream out;
  out << ShapeToString(input_shape_);
  for (const UnitSpec& u : units_) {
    out << ";" << (u.kind == UnitKind::kNormAffine ? "n" : "g") << u.T << ","
        << u.d << "," << u.p << (u.bias != nullptr ? "b" : "");
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// GradBook

UnitBook& GradBook::unit(const UnitSpec& spec) {
  return layers.at(spec.layer).units.at(spec.slot);
}

const UnitBook& GradBook::unit(const UnitSpec& spec) const {
  return layers.at(spec.layer).units.at(spec.slot);
}

void GradBook::Clear() {
  layers.clear();
  output = Tensor();
  targets = Tensor();
  batch = 0;
  has_forward = false;
  has_output_grads = false;
}

// ---------------------------------------------------------------------------
// Passes

Tensor Forward(const Graph& graph, const Tensor& batch, const Tensor& targets,
               GradBook& book, OpCounters& counters) {
  if (batch.empty() || batch.rank() < 1) {
    throw DimensionError("empty input batch");
  }
  const int64_t b = batch.dim(0);
  if (batch.shape() != WithBatch(b, graph.input_shape())) {
    throw DimensionError("input batch " + ShapeToString(batch.shape()) +
                         " does not match graph input " +
                         ShapeToString(WithBatch(b, graph.input_shape())));
  }
  book.Clear();
  book.batch = b;
  book.layers.resize(static_cast<size_t>(graph.num_layers()));
  Tensor x = batch.CopyTo(counters);
  for (int l = 0; l < graph.num_layers(); ++l) {
    x = graph.layer(l).Forward(std::move(x), book.layers[l], counters);
  }
  CheckTargets(graph, x, targets);
  book.targets = targets.CopyTo(counters);
  Tensor losses = ComputeLosses(graph.loss(), x, book.targets, counters);
  book.output = std::move(x);
  book.has_forward = true;
  return losses;
}

void BackwardOutputGrads(const Graph& graph, GradBook& book,
                         std::span<const double> loss_weights,
                         OpCounters& counters, int stop_layer,
                         const LayerHook& hook) {
  if (!book.has_forward) {
    throw StateError("output gradients requested before a forward pass");
  }
  if (!loss_weights.empty() &&
      static_cast<int64_t>(loss_weights.size()) != book.batch &&
      !book.output.shape_only()) {
    throw DimensionError("expected " + std::to_string(book.batch) +
                         " loss weights, got " +
                         std::to_string(loss_weights.size()));
  }
  if (stop_layer < 0) stop_layer = graph.first_trainable_layer();
  if (stop_layer < 0) stop_layer = 0;
  Tensor grad = LossGradient(graph.loss(), book.output, book.targets,
                             loss_weights, counters);
  for (int l = graph.num_layers() - 1; l >= stop_layer; --l) {
    grad = graph.layer(l).Backward(std::move(grad), book.layers[l],
                                   l > stop_layer, counters);
    if (hook) hook(l);
  }
  book.has_output_grads = true;
}

Tensor ParamGrad(const Tensor& activation, const Tensor& output_grad,
                 OpCounters& counters) {
  if (activation.rank() != 3 || output_grad.rank() != 3 ||
      activation.dim(0) != output_grad.dim(0) ||
      activation.dim(1) != output_grad.dim(1)) {
    throw DimensionError("parameter gradient needs [B, T, d] and [B, T, p], "
                         "got " + ShapeToString(activation.shape()) + " and " +
                         ShapeToString(output_grad.shape()));
  }
  return MatMulTN(activation, output_grad, counters);
}

void AccumulateUnitGrads(const UnitSpec& unit, const UnitBook& book,
                         const Tensor* weights, Tensor* weight_grad,
                         Tensor* bias_grad, OpCounters& counters) {
  CounterScope scope(counters, unit.index);
  const Tensor& ds = book.output_grad;
  if (ds.empty()) {
    throw StateError("unit '" + unit.name + "' has no output gradient");
  }
  const int64_t batch = ds.dim(0);
  const int64_t p = ds.dim(-1);
  const int64_t rows_per_sample = ds.numel() / (batch * p);
  if (weights != nullptr && weights->numel() != batch) {
    throw DimensionError("expected " + std::to_string(batch) +
                         " sample weights, got " +
                         std::to_string(weights->numel()));
  }
  const bool shape_only = ds.shape_only() ||
                          (weights != nullptr && weights->shape_only());
  auto weight = [&](int64_t i) {
    return weights == nullptr ? 1.0 : (*weights)[i];
  };
  if (unit.kind == UnitKind::kNormAffine) {
    if (weight_grad != nullptr) {
      counters.AddMulAdds((weights != nullptr ? 3 : 2) * ds.numel());
      if (!shape_only && !weight_grad->shape_only()) {
        const double* pg = ds.data().data();
        const double* ph = book.activation.data().data();
        double* po = weight_grad->data().data();
        for (int64_t i = 0; i < batch; ++i) {
          const double w = weight(i);
          for (int64_t r = 0; r < rows_per_sample; ++r) {
            const int64_t base = (i * rows_per_sample + r) * p;
            for (int64_t j = 0; j < p; ++j) {
              po[j] += w * ph[base + j] * pg[base + j];
            }
          }
        }
      }
    }
  } else if (weight_grad != nullptr && unit.index_activation) {
    counters.AddMulAdds((weights != nullptr ? 2 : 1) * ds.numel());
    if (!shape_only && !weight_grad->shape_only()) {
      const double* pg = ds.data().data();
      double* po = weight_grad->data().data();
      for (int64_t i = 0; i < batch; ++i) {
        const double w = weight(i);
        for (int64_t r = 0; r < rows_per_sample; ++r) {
          const int64_t row = i * rows_per_sample + r;
          double* dst = po + book.token_ids[static_cast<size_t>(row)] * p;
          for (int64_t j = 0; j < p; ++j) dst[j] += w * pg[row * p + j];
        }
      }
    }
  } else if (weight_grad != nullptr) {
    if (weights == nullptr) {
      MatMulTNAccumulate(book.activation, ds, {}, 0, *weight_grad, counters);
    } else {
      MatMulTNAccumulate(book.activation, ds,
                         shape_only ? std::span<const double>()
                                    : weights->data(),
                         rows_per_sample, *weight_grad, counters);
    }
  }
  if (bias_grad != nullptr) {
    AccumulateColumnSums(ds, shape_only ? nullptr : weights, *bias_grad,
                         counters);
  }
}

std::vector<Tensor> AllParamGrads(const Graph& graph, const GradBook& book,
                                  OpCounters& counters) {
  if (!book.has_output_grads) {
    throw StateError("parameter gradients requested before the output "
                     "gradient pass");
  }
  std::vector<Tensor> grads(graph.parameters().size());
  for (const UnitSpec& u : graph.units()) {
    const bool shape_only = book.unit(u).output_grad.shape_only();
    Tensor* wg = nullptr;
    Tensor* bg = nullptr;
    grads[u.weight->id] =
        Tensor::Like(u.weight->value.shape(), shape_only, &counters);
    wg = &grads[u.weight->id];
    if (u.bias != nullptr) {
      grads[u.bias->id] =
          Tensor::Like(u.bias->value.shape(), shape_only, &counters);
      bg = &grads[u.bias->id];
    }
    AccumulateUnitGrads(u, book.unit(u), nullptr, wg, bg, counters);
  }
  return grads;
}

std::vector<int> SelectOriginParams(const Graph& graph) {
  if (graph.units().empty()) {
    throw ConfigurationError("graph has no trainable parameters");
  }
  const UnitSpec& first = graph.units().front();
  if (first.bias != nullptr && first.bias->trainable) return {first.bias->id};
  return {first.weight->id};
}

}  // namespace bkdp

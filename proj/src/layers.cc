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

#include "bkdp/layers.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "bkdp/status.h"

namespace bkdp {
namespace {

constexpr double kNormEpsilon = 1e-5;

Tensor InitTensor(const Shape& shape, int64_t fan_in, const LayerInit& init) {
  if (init.shape_only) return Tensor::ShapeOnly(shape);
  Tensor t = Tensor::Zeros(shape);
  if (init.rng == nullptr) {
    throw ParameterError("layer initialization needs a random source");
  }
  const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = stddev * init.rng->Normal();
  return t;
}

Tensor ConstantTensor(const Shape& shape, double value,
                      const LayerInit& init) {
  return init.shape_only ? Tensor::ShapeOnly(shape)
                         : Tensor::Filled(shape, value);
}

int UnitScope(const Layer& layer, int slot) {
  return layer.first_unit() + slot;
}

// [B, d] or [B, T, d] -> T.
int64_t SequenceLength(const Shape& input, int64_t width, const Layer& layer) {
  if ((input.size() != 2 && input.size() != 3) || input.back() != width) {
    throw DimensionError("layer '" + layer.name() + "' expects [B, " +
                         std::to_string(width) + "] or [B, T, " +
                         std::to_string(width) + "], got " +
                         ShapeToString(input));
  }
  return input.size() == 3 ? input[1] : 1;
}

void AddBias(Tensor& s, const Parameter* bias, OpCounters& counters) {
  if (bias == nullptr) return;
  counters.AddMulAdds(s.numel());
  if (s.shape_only() || bias->value.shape_only()) return;
  const int64_t p = bias->value.numel();
  auto ps = s.data();
  auto pb = bias->value.data();
  for (size_t i = 0; i < ps.size(); ++i) ps[i] += pb[i % p];
}

double GeluDerivative(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::sqrt(2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

// Replaces x by act(x) and returns act'(x).
Tensor ApplyActivation(Activation activation, Tensor& x,
                       OpCounters& counters) {
  Tensor derivative = Tensor::Like(x.shape(), x.shape_only(), &counters);
  counters.AddMulAdds(2 * x.numel());
  if (x.shape_only()) return derivative;
  auto px = x.data();
  auto pd = derivative.data();
  for (size_t i = 0; i < px.size(); ++i) {
    const double v = px[i];
    switch (activation) {
      case Activation::kRelu:
        pd[i] = v > 0.0 ? 1.0 : 0.0;
        px[i] = v > 0.0 ? v : 0.0;
        break;
      case Activation::kGelu:
        pd[i] = GeluDerivative(v);
        px[i] = v * 0.5 * std::erfc(-v / std::sqrt(2.0));
        break;
      case Activation::kTanh: {
        const double t = std::tanh(v);
        pd[i] = 1.0 - t * t;
        px[i] = t;
        break;
      }
    }
  }
  return derivative;
}

}  // namespace

std::string LayerKindName(LayerKind kind) {
  switch (kind) {
    case LayerKind::kLinear: return "linear";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kEmbedding: return "embedding";
    case LayerKind::kLayerNorm: return "layernorm";
    case LayerKind::kGroupNorm: return "groupnorm";
    case LayerKind::kLora: return "lora";
    case LayerKind::kAdapter: return "adapter";
    case LayerKind::kActivation: return "activation";
    case LayerKind::kPool: return "pool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kTokens: return "tokens";
    case LayerKind::kAttention: return "attention";
  }
  return "unknown";
}

Activation ParseActivation(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  if (name == "tanh") return Activation::kTanh;
  throw SpecificationError("unknown activation '" + name + "'");
}

std::string ActivationName(Activation activation) {
  switch (activation) {
    case Activation::kRelu: return "relu";
    case Activation::kGelu: return "gelu";
    case Activation::kTanh: return "tanh";
  }
  return "unknown";
}

std::vector<Parameter*> Layer::parameters() const {
  std::vector<Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

Parameter* Layer::AddParameter(std::string name, Tensor value,
                               bool trainable) {
  auto param = std::make_unique<Parameter>();
  param->name = name_ + "." + name;
  param->value = std::move(value);
  param->trainable = trainable;
  params_.push_back(std::move(param));
  return params_.back().get();
}

// ---------------------------------------------------------------------------
// Linear

LinearLayer::LinearLayer(std::string name, int64_t in, int64_t out,
                         bool bias, const LayerInit& init)
    : Layer(std::move(name)), in_(in), out_(out) {
  if (in <= 0 || out <= 0) {
    throw SpecificationError("linear widths must be positive");
  }
  weight_ = AddParameter("weight", InitTensor({in, out}, in, init),
                         init.trainable);
  if (bias) {
    bias_ = AddParameter("bias", InitTensor({out}, in, init), init.trainable);
  }
}

Shape LinearLayer::OutputShape(const Shape& input) const {
  SequenceLength(input, in_, *this);
  Shape out = input;
  out.back() = out_;
  return out;
}

std::vector<UnitSpec> LinearLayer::Units(const Shape& input) const {
  if (!weight_->trainable) return {};
  UnitSpec u;
  u.name = name();
  u.weight = weight_;
  u.bias = bias_;
  u.T = SequenceLength(input, in_, *this);
  u.d = in_;
  u.p = out_;
  return {u};
}

Tensor LinearLayer::Forward(Tensor x, LayerBook& book,
                            OpCounters& counters) const {
  const int64_t t = SequenceLength(x.shape(), in_, *this);
  const int64_t batch = x.dim(0);
  book.input_shape = x.shape();
  const bool trainable = weight_->trainable;
  CounterScope scope(counters, trainable ? UnitScope(*this, 0) : kGlobalScope);
  x.Reshape({batch, t, in_});
  Tensor s = MatMul(x, weight_->value, counters);
  AddBias(s, bias_, counters);
  if (trainable) {
    book.units.resize(1);
    book.units[0].activation = std::move(x);
  }
  Shape out = book.input_shape;
  out.back() = out_;
  return std::move(s).Reshaped(out);
}

Tensor LinearLayer::Backward(Tensor grad, LayerBook& book,
                             bool need_input_grad,
                             OpCounters& counters) const {
  const int64_t batch = book.input_shape[0];
  const int64_t t = book.input_shape.size() == 3 ? book.input_shape[1] : 1;
  grad.Reshape({batch, t, out_});
  const bool trainable = weight_->trainable;
  CounterScope scope(counters, trainable ? UnitScope(*this, 0) : kGlobalScope);
  const Tensor* ds = &grad;
  if (trainable) {
    book.units[0].output_grad = std::move(grad);
    ds = &book.units[0].output_grad;
  }
  if (!need_input_grad) return Tensor();
  return MatMulNT(*ds, weight_->value, counters).Reshaped(book.input_shape);
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2dLayer::Conv2dLayer(std::string name, int64_t in_channels,
                         int64_t out_channels, const Conv2dGeometry& geometry,
                         bool bias, const LayerInit& init)
    : Layer(std::move(name)),
      in_channels_(in_channels),
      out_channels_(out_channels),
      geometry_(geometry) {
  if (in_channels <= 0 || out_channels <= 0 || geometry.kernel_h <= 0 ||
      geometry.kernel_w <= 0 || geometry.stride <= 0 || geometry.padding < 0 ||
      geometry.dilation <= 0) {
    throw SpecificationError("invalid convolution '" + this->name() + "'");
  }
  const int64_t d = in_channels * geometry.kernel_h * geometry.kernel_w;
  weight_ = AddParameter("weight", InitTensor({d, out_channels}, d, init),
                         init.trainable);
  if (bias) {
    bias_ = AddParameter("bias", InitTensor({out_channels}, d, init),
                         init.trainable);
  }
}

Shape Conv2dLayer::OutputShape(const Shape& input) const {
  if (input.size() != 4 || input[1] != in_channels_) {
    throw DimensionError("layer '" + name() + "' expects [B, " +
                         std::to_string(in_channels_) + ", H, W], got " +
                         ShapeToString(input));
  }
  const int64_t h = geometry_.OutputSize(input[2], geometry_.kernel_h);
  const int64_t w = geometry_.OutputSize(input[3], geometry_.kernel_w);
  if (h <= 0 || w <= 0) {
    throw DimensionError("layer '" + name() + "': kernel larger than padded "
                         "input " + ShapeToString(input));
  }
  return {input[0], out_channels_, h, w};
}

std::vector<UnitSpec> Conv2dLayer::Units(const Shape& input) const {
  if (!weight_->trainable) return {};
  const Shape out = OutputShape(input);
  UnitSpec u;
  u.name = name();
  u.weight = weight_;
  u.bias = bias_;
  u.T = out[2] * out[3];
  u.d = weight_->value.dim(0);
  u.p = out_channels_;
  return {u};
}

Tensor Conv2dLayer::Forward(Tensor x, LayerBook& book,
                            OpCounters& counters) const {
  const Shape out = OutputShape(x.shape());
  book.input_shape = x.shape();
  const bool trainable = weight_->trainable;
  CounterScope scope(counters, trainable ? UnitScope(*this, 0) : kGlobalScope);
  Tensor columns = Im2Col(x, geometry_, counters);
  x = Tensor();
  Tensor s = MatMul(columns, weight_->value, counters);
  AddBias(s, bias_, counters);
  if (trainable) {
    book.units.resize(1);
    book.units[0].activation = std::move(columns);
  }
  return TokensToChannels(s, out[2], out[3], counters);
}

Tensor Conv2dLayer::Backward(Tensor grad, LayerBook& book,
                             bool need_input_grad,
                             OpCounters& counters) const {
  const bool trainable = weight_->trainable;
  CounterScope scope(counters, trainable ? UnitScope(*this, 0) : kGlobalScope);
  Tensor ds = ChannelsToTokens(grad, counters);
  grad = Tensor();
  const Tensor* ref = &ds;
  if (trainable) {
    book.units[0].output_grad = std::move(ds);
    ref = &book.units[0].output_grad;
  }
  if (!need_input_grad) return Tensor();
  Tensor columns = MatMulNT(*ref, weight_->value, counters);
  return Col2Im(columns, book.input_shape, geometry_, counters);
}

// ---------------------------------------------------------------------------
// Embedding

EmbeddingLayer::EmbeddingLayer(std::string name, int64_t vocab, int64_t dim,
                               const LayerInit& init)
    : Layer(std::move(name)), vocab_(vocab), dim_(dim) {
  if (vocab <= 0 || dim <= 0) {
    throw SpecificationError("embedding sizes must be positive");
  }
  // Unit-variance rows, as if fed by a one-hot input of fan-in 1.
  weight_ = AddParameter("weight", InitTensor({vocab, dim}, 1, init),
                         init.trainable);
}

Shape EmbeddingLayer::OutputShape(const Shape& input) const {
  if (input.size() != 2) {
    throw DimensionError("layer '" + name() + "' expects token ids [B, T], "
                         "got " + ShapeToString(input));
  }
  return {input[0], input[1], dim_};
}

std::vector<UnitSpec> EmbeddingLayer::Units(const Shape& input) const {
  if (!weight_->trainable) return {};
  UnitSpec u;
  u.name = name();
  u.weight = weight_;
  u.T = OutputShape(input)[1];
  u.d = vocab_;
  u.p = dim_;
  u.index_activation = true;
  return {u};
}

Tensor EmbeddingLayer::Forward(Tensor x, LayerBook& book,
                               OpCounters& counters) const {
  const Shape out = OutputShape(x.shape());
  book.input_shape = x.shape();
  Tensor y = Tensor::Like(out, x.shape_only() || weight_->value.shape_only(),
                          &counters);
  std::vector<int64_t> ids;
  if (!x.shape_only()) {
    ids.reserve(static_cast<size_t>(x.numel()));
    for (double v : x.data()) {
      const auto id = static_cast<int64_t>(v);
      if (static_cast<double>(id) != v || id < 0 || id >= vocab_) {
        throw DimensionError("layer '" + name() + "': token id " +
                             std::to_string(v) + " outside vocabulary of " +
                             std::to_string(vocab_));
      }
      ids.push_back(id);
    }
  }
  if (!y.shape_only()) {
    const double* pw = weight_->value.data().data();
    double* py = y.data().data();
    for (size_t r = 0; r < ids.size(); ++r) {
      std::copy(pw + ids[r] * dim_, pw + (ids[r] + 1) * dim_,
                py + static_cast<int64_t>(r) * dim_);
    }
  }
  if (weight_->trainable) {
    book.units.resize(1);
    book.units[0].token_ids = std::move(ids);
  }
  return y;
}

Tensor EmbeddingLayer::Backward(Tensor grad, LayerBook& book,
                                bool need_input_grad,
                                OpCounters& counters) const {
  (void)counters;
  if (need_input_grad) {
    throw StateError("token ids of layer '" + name() +
                     "' have no gradient");
  }
  if (weight_->trainable) book.units[0].output_grad = std::move(grad);
  return Tensor();
}

// ---------------------------------------------------------------------------
// LayerNorm

LayerNormLayer::LayerNormLayer(std::string name, int64_t dim,
                               const LayerInit& init)
    : Layer(std::move(name)), dim_(dim) {
  if (dim <= 0) throw SpecificationError("layernorm width must be positive");
  scale_ = AddParameter("scale", ConstantTensor({dim}, 1.0, init),
                        init.trainable);
  shift_ = AddParameter("shift", ConstantTensor({dim}, 0.0, init),
                        init.trainable);
}

Shape LayerNormLayer::OutputShape(const Shape& input) const {
  SequenceLength(input, dim_, *this);
  return input;
}

std::vector<UnitSpec> LayerNormLayer::Units(const Shape& input) const {
  if (!scale_->trainable) return {};
  UnitSpec u;
  u.kind = UnitKind::kNormAffine;
  u.name = name();
  u.weight = scale_;
  u.bias = shift_;
  u.T = SequenceLength(input, dim_, *this);
  u.d = dim_;
  u.p = dim_;
  return {u};
}

Tensor LayerNormLayer::Forward(Tensor x, LayerBook& book,
                               OpCounters& counters) const {
  const int64_t t = SequenceLength(x.shape(), dim_, *this);
  const int64_t batch = x.dim(0);
  const int64_t rows = batch * t;
  book.input_shape = x.shape();
  const bool trainable = scale_->trainable;
  CounterScope scope(counters, trainable ? UnitScope(*this, 0) : kGlobalScope);
  x.Reshape({batch, t, dim_});
  Tensor inv_std = Tensor::Like({rows}, x.shape_only(), &counters);
  Tensor y = Tensor::Like(x.shape(), x.shape_only(), &counters);
  // Mean, variance, normalization and affine map.
  counters.AddMulAdds(7 * x.numel());
  if (!x.shape_only()) {
    double* px = x.data().data();
    double* py = y.data().data();
    auto gamma = scale_->value.data();
    auto beta = shift_->value.data();
    for (int64_t r = 0; r < rows; ++r) {
      double* row = px + r * dim_;
      double mean = 0.0;
      for (int64_t c = 0; c < dim_; ++c) mean += row[c];
      mean /= static_cast<double>(dim_);
      double var = 0.0;
      for (int64_t c = 0; c < dim_; ++c) {
        var += (row[c] - mean) * (row[c] - mean);
      }
      var /= static_cast<double>(dim_);
      const double inv = 1.0 / std::sqrt(var + kNormEpsilon);
      inv_std[r] = inv;
      for (int64_t c = 0; c < dim_; ++c) {
        row[c] = (row[c] - mean) * inv;
        py[r * dim_ + c] = gamma[static_cast<size_t>(c)] * row[c] +
                           beta[static_cast<size_t>(c)];
      }
    }
  }
  book.saved = std::move(inv_std);
  if (trainable) {
    book.units.resize(1);
    book.units[0].activation = std::move(x);
  } else {
    book.saved_aux = std::move(x);
  }
  return std::move(y).Reshaped(book.input_shape);
}

Tensor LayerNormLayer::Backward(Tensor grad, LayerBook& book,
                                bool need_input_grad,
                                OpCounters& counters) const {
  const bool trainable = scale_->trainable;
  CounterScope scope(counters, trainable ? UnitScope(*this, 0) : kGlobalScope);
  const Tensor& xhat =
      trainable ? book.units[0].activation : book.saved_aux;
  grad.Reshape(xhat.shape());
  const Tensor* g = &grad;
  if (trainable) {
    book.units[0].output_grad = std::move(grad);
    g = &book.units[0].output_grad;
  }
  if (!need_input_grad) return Tensor();
  Tensor dx = Tensor::Like(xhat.shape(), g->shape_only(), &counters);
  counters.AddMulAdds(8 * xhat.numel());
  if (!dx.shape_only()) {
    const int64_t rows = xhat.numel() / dim_;
    const double* pg = g->data().data();
    const double* ph = xhat.data().data();
    double* pdx = dx.data().data();
    auto gamma = scale_->value.data();
    const double n = static_cast<double>(dim_);
    for (int64_t r = 0; r < rows; ++r) {
      double sum = 0.0, dot = 0.0;
      for (int64_t c = 0; c < dim_; ++c) {
        const double gh = pg[r * dim_ + c] * gamma[static_cast<size_t>(c)];
        sum += gh;
        dot += gh * ph[r * dim_ + c];
      }
      const double inv = book.saved[r];
      for (int64_t c = 0; c < dim_; ++c) {
        const double gh = pg[r * dim_ + c] * gamma[static_cast<size_t>(c)];
        pdx[r * dim_ + c] =
            inv / n * (n * gh - sum - ph[r * dim_ + c] * dot);
      }
    }
  }
  return std::move(dx).Reshaped(book.input_shape);
}

// ---------------------------------------------------------------------------
// GroupNorm

GroupNormLayer::GroupNormLayer(std::string name, int64_t groups,
                               int64_t channels, const LayerInit& init)
    : Layer(std::move(name)), groups_(groups), channels_(channels) {
  if (groups <= 0 || channels <= 0 || channels % groups != 0) {
    throw SpecificationError("groupnorm channels must split evenly into "
                             "groups");
  }
  scale_ = AddParameter("scale", ConstantTensor({channels}, 1.0, init),
                        init.trainable);
  shift_ = AddParameter("shift", ConstantTensor({channels}, 0.0, init),
                        init.trainable);
}

Shape GroupNormLayer::OutputShape(const Shape& input) const {
  if (input.size() != 4 || input[1] != channels_) {
    throw DimensionError("layer '" + name() + "' expects [B, " +
                         std::to_string(channels_) + ", H, W], got " +
                         ShapeToString(input));
  }
  return input;
}

std::vector<UnitSpec> GroupNormLayer::Units(const Shape& input) const {
  if (!scale_->trainable) return {};
  OutputShape(input);
  UnitSpec u;
  u.kind = UnitKind::kNormAffine;
  u.name = name();
  u.weight = scale_;
  u.bias = shift_;
  u.T = input[2] * input[3];
  u.d = channels_;
  u.p = channels_;
  return {u};
}

// The normalized input is kept in token layout [B, H * W, C].
Tensor GroupNormLayer::Forward(Tensor x, LayerBook& book,
                               OpCounters& counters) const {
  OutputShape(x.shape());
  book.input_shape = x.shape();
  const bool trainable = scale_->trainable;
  CounterScope scope(counters, trainable ? UnitScope(*this, 0) : kGlobalScope);
  const int64_t batch = x.dim(0), hw = x.dim(2) * x.dim(3);
  const int64_t per_group = channels_ / groups_;
  Tensor inv_std = Tensor::Like({batch * groups_}, x.shape_only(), &counters);
  Tensor y = Tensor::Like(x.shape(), x.shape_only(), &counters);
  counters.AddMulAdds(7 * x.numel());
  if (!x.shape_only()) {
    double* px = x.data().data();
    double* py = y.data().data();
    auto gamma = scale_->value.data();
    auto beta = shift_->value.data();
    const int64_t count = per_group * hw;
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t g = 0; g < groups_; ++g) {
        double* block = px + (b * channels_ + g * per_group) * hw;
        double mean = 0.0;
        for (int64_t i = 0; i < count; ++i) mean += block[i];
        mean /= static_cast<double>(count);
        double var = 0.0;
        for (int64_t i = 0; i < count; ++i) {
          var += (block[i] - mean) * (block[i] - mean);
        }
        var /= static_cast<double>(count);
        const double inv = 1.0 / std::sqrt(var + kNormEpsilon);
        inv_std[b * groups_ + g] = inv;
        for (int64_t i = 0; i < count; ++i) {
          block[i] = (block[i] - mean) * inv;
          const auto c = static_cast<size_t>(g * per_group + i / hw);
          py[(b * channels_ + g * per_group) * hw + i] =
              gamma[c] * block[i] + beta[c];
        }
      }
    }
  }
  book.saved = std::move(inv_std);
  Tensor tokens = ChannelsToTokens(x, counters);
  x = Tensor();
  if (trainable) {
    book.units.resize(1);
    book.units[0].activation = std::move(tokens);
  } else {
    book.saved_aux = std::move(tokens);
  }
  return y;
}

Tensor GroupNormLayer::Backward(Tensor grad, LayerBook& book,
                                bool need_input_grad,
                                OpCounters& counters) const {
  const bool trainable = scale_->trainable;
  CounterScope scope(counters, trainable ? UnitScope(*this, 0) : kGlobalScope);
  const Tensor& xhat =
      trainable ? book.units[0].activation : book.saved_aux;
  Tensor g_tokens = ChannelsToTokens(grad, counters);
  grad = Tensor();
  const Tensor* g = &g_tokens;
  if (trainable) {
    book.units[0].output_grad = std::move(g_tokens);
    g = &book.units[0].output_grad;
  }
  if (!need_input_grad) return Tensor();
  const Shape& shape = book.input_shape;
  Tensor dx = Tensor::Like(shape, g->shape_only(), &counters);
  counters.AddMulAdds(8 * dx.numel());
  if (dx.shape_only()) return dx;
  const int64_t batch = shape[0], hw = shape[2] * shape[3];
  const int64_t per_group = channels_ / groups_;
  const double n = static_cast<double>(per_group * hw);
  auto gamma = scale_->value.data();
  const double* pg = g->data().data();
  const double* ph = xhat.data().data();
  double* pdx = dx.data().data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t grp = 0; grp < groups_; ++grp) {
      double sum = 0.0, dot = 0.0;
      for (int64_t c = grp * per_group; c < (grp + 1) * per_group; ++c) {
        for (int64_t s = 0; s < hw; ++s) {
          const int64_t idx = (b * hw + s) * channels_ + c;
          const double gh = pg[idx] * gamma[static_cast<size_t>(c)];
          sum += gh;
          dot += gh * ph[idx];
        }
      }
      const double inv = book.saved[b * groups_ + grp];
      for (int64_t c = grp * per_group; c < (grp + 1) * per_group; ++c) {
        for (int64_t s = 0; s < hw; ++s) {
          const int64_t idx = (b * hw + s) * channels_ + c;
          const double gh = pg[idx] * gamma[static_cast<size_t>(c)];
          pdx[(b * channels_ + c) * hw + s] =
              inv / n * (n * gh - sum - ph[idx] * dot);
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// LoRA

LoraLayer::LoraLayer(std::string name, int64_t in, int64_t out, int64_t rank,
                     const LayerInit& init)
    : Layer(std::move(name)), in_(in), out_(out), rank_(rank) {
  if (in <= 0 || out <= 0 || rank <= 0) {
    throw SpecificationError("lora sizes must be positive");
  }
  base_ = AddParameter("base", InitTensor({in, out}, in, init), false);
  down_ = AddParameter("down", InitTensor({in, rank}, in, init),
                       init.trainable);
  up_ = AddParameter("up", InitTensor({rank, out}, rank, init),
                     init.trainable);
}

Shape LoraLayer::OutputShape(const Shape& input) const {
  SequenceLength(input, in_, *this);
  Shape out = input;
  out.back() = out_;
  return out;
}

std::vector<UnitSpec> LoraLayer::Units(const Shape& input) const {
  if (!down_->trainable) return {};
  const int64_t t = SequenceLength(input, in_, *this);
  UnitSpec down;
  down.name = name() + ".down";
  down.weight = down_;
  down.T = t;
  down.d = in_;
  down.p = rank_;
  UnitSpec up = down;
  up.name = name() + ".up";
  up.weight = up_;
  up.d = rank_;
  up.p = out_;
  up.slot = 1;
  return {down, up};
}

Tensor LoraLayer::Forward(Tensor x, LayerBook& book,
                          OpCounters& counters) const {
  const int64_t t = SequenceLength(x.shape(), in_, *this);
  const int64_t batch = x.dim(0);
  book.input_shape = x.shape();
  x.Reshape({batch, t, in_});
  Tensor y = MatMul(x, base_->value, counters);
  Tensor u;
  {
    CounterScope scope(counters, UnitScope(*this, 0));
    u = MatMul(x, down_->value, counters);
  }
  {
    CounterScope scope(counters, UnitScope(*this, 1));
    Tensor v = MatMul(u, up_->value, counters);
    AddInPlace(y, v, counters);
  }
  book.units.resize(2);
  book.units[0].activation = std::move(x);
  book.units[1].activation = std::move(u);
  Shape out = book.input_shape;
  out.back() = out_;
  return std::move(y).Reshaped(out);
}

Tensor LoraLayer::Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                           OpCounters& counters) const {
  const int64_t batch = book.input_shape[0];
  const int64_t t = book.input_shape.size() == 3 ? book.input_shape[1] : 1;
  grad.Reshape({batch, t, out_});
  book.units[1].output_grad = std::move(grad);
  const Tensor& g = book.units[1].output_grad;
  {
    CounterScope scope(counters, UnitScope(*this, 1));
    book.units[0].output_grad = MatMulNT(g, up_->value, counters);
  }
  if (!need_input_grad) return Tensor();
  Tensor dx = MatMulNT(g, base_->value, counters);
  {
    CounterScope scope(counters, UnitScope(*this, 0));
    Tensor dx_low = MatMulNT(book.units[0].output_grad, down_->value,
                             counters);
    AddInPlace(dx, dx_low, counters);
  }
  return std::move(dx).Reshaped(book.input_shape);
}

// ---------------------------------------------------------------------------
// Adapter

AdapterLayer::AdapterLayer(std::string name, int64_t dim, int64_t rank,
                           Activation activation, const LayerInit& init)
    : Layer(std::move(name)), dim_(dim), rank_(rank), activation_(activation) {
  if (dim <= 0 || rank <= 0) {
    throw SpecificationError("adapter sizes must be positive");
  }
  down_ = AddParameter("down", InitTensor({dim, rank}, dim, init),
                       init.trainable);
  up_ = AddParameter("up", InitTensor({rank, dim}, rank, init),
                     init.trainable);
}

Shape AdapterLayer::OutputShape(const Shape& input) const {
  SequenceLength(input, dim_, *this);
  return input;
}

std::vector<UnitSpec> AdapterLayer::Units(const Shape& input) const {
  if (!down_->trainable) return {};
  const int64_t t = SequenceLength(input, dim_, *this);
  UnitSpec down;
  down.name = name() + ".down";
  down.weight = down_;
  down.T = t;
  down.d = dim_;
  down.p = rank_;
  UnitSpec up = down;
  up.name = name() + ".up";
  up.weight = up_;
  up.d = rank_;
  up.p = dim_;
  up.slot = 1;
  return {down, up};
}

Tensor AdapterLayer::Forward(Tensor x, LayerBook& book,
                             OpCounters& counters) const {
  const int64_t t = SequenceLength(x.shape(), dim_, *this);
  const int64_t batch = x.dim(0);
  book.input_shape = x.shape();
  x.Reshape({batch, t, dim_});
  Tensor h;
  {
    CounterScope scope(counters, UnitScope(*this, 0));
    h = MatMul(x, down_->value, counters);
    book.saved = ApplyActivation(activation_, h, counters);
  }
  Tensor y;
  {
    CounterScope scope(counters, UnitScope(*this, 1));
    y = MatMul(h, up_->value, counters);
  }
  AddInPlace(y, x, counters);
  book.units.resize(2);
  book.units[0].activation = std::move(x);
  book.units[1].activation = std::move(h);
  return std::move(y).Reshaped(book.input_shape);
}

Tensor AdapterLayer::Backward(Tensor grad, LayerBook& book,
                              bool need_input_grad,
                              OpCounters& counters) const {
  const int64_t batch = book.input_shape[0];
  const int64_t t = book.input_shape.size() == 3 ? book.input_shape[1] : 1;
  grad.Reshape({batch, t, dim_});
  book.units[1].output_grad = std::move(grad);
  const Tensor& g = book.units[1].output_grad;
  {
    CounterScope scope(counters, UnitScope(*this, 1));
    Tensor dz = MatMulNT(g, up_->value, counters);
    MultiplyInPlace(dz, book.saved, counters);
    book.units[0].output_grad = std::move(dz);
  }
  if (!need_input_grad) return Tensor();
  Tensor dx;
  {
    CounterScope scope(counters, UnitScope(*this, 0));
    dx = MatMulNT(book.units[0].output_grad, down_->value, counters);
  }
  AddInPlace(dx, g, counters);
  return std::move(dx).Reshaped(book.input_shape);
}

// ---------------------------------------------------------------------------
// Parameter-free layers

Tensor ActivationLayer::Forward(Tensor x, LayerBook& book,
                                OpCounters& counters) const {
  book.input_shape = x.shape();
  book.saved = ApplyActivation(activation_, x, counters);
  return x;
}

Tensor ActivationLayer::Backward(Tensor grad, LayerBook& book,
                                 bool need_input_grad,
                                 OpCounters& counters) const {
  if (!need_input_grad) return Tensor();
  MultiplyInPlace(grad, book.saved, counters);
  return grad;
}

PoolLayer::PoolLayer(std::string name, PoolKind pool, int64_t kernel,
                     int64_t stride, int64_t padding)
    : Layer(std::move(name)), pool_(pool) {
  geometry_.kernel_h = kernel;
  geometry_.kernel_w = kernel;
  geometry_.stride = stride;
  geometry_.padding = padding;
  if (pool != PoolKind::kGlobalAverage &&
      (kernel <= 0 || stride <= 0 || padding < 0 || 2 * padding > kernel)) {
    throw SpecificationError("invalid pooling window in '" + this->name() +
                             "'");
  }
}

Shape PoolLayer::OutputShape(const Shape& input) const {
  if (input.size() != 4) {
    throw DimensionError("layer '" + name() + "' expects [B, C, H, W], got " +
                         ShapeToString(input));
  }
  if (pool_ == PoolKind::kGlobalAverage) return {input[0], input[1]};
  const int64_t h = geometry_.OutputSize(input[2], geometry_.kernel_h);
  const int64_t w = geometry_.OutputSize(input[3], geometry_.kernel_w);
  if (h <= 0 || w <= 0) {
    throw DimensionError("layer '" + name() + "': window larger than input " +
                         ShapeToString(input));
  }
  return {input[0], input[1], h, w};
}

Tensor PoolLayer::Forward(Tensor x, LayerBook& book,
                          OpCounters& counters) const {
  const Shape out = OutputShape(x.shape());
  book.input_shape = x.shape();
  counters.AddMulAdds(pool_ == PoolKind::kGlobalAverage
                          ? x.numel()
                          : NumElements(out) * geometry_.kernel_h *
                                geometry_.kernel_w);
  Tensor y = Tensor::Like(out, x.shape_only(), &counters);
  if (y.shape_only()) return y;
  const int64_t planes = x.dim(0) * x.dim(1);
  const int64_t h = x.dim(2), w = x.dim(3);
  const double* px = x.data().data();
  double* py = y.data().data();
  if (pool_ == PoolKind::kGlobalAverage) {
    for (int64_t pl = 0; pl < planes; ++pl) {
      double sum = 0.0;
      for (int64_t i = 0; i < h * w; ++i) sum += px[pl * h * w + i];
      py[pl] = sum / static_cast<double>(h * w);
    }
    return y;
  }
  const int64_t oh = out[2], ow = out[3], k = geometry_.kernel_h;
  if (pool_ == PoolKind::kMax) book.saved_index.assign(y.numel(), -1);
  for (int64_t pl = 0; pl < planes; ++pl) {
    for (int64_t oy = 0; oy < oh; ++oy) {
      for (int64_t ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t arg = -1;
        double sum = 0.0;
        for (int64_t ky = 0; ky < k; ++ky) {
          const int64_t iy = oy * geometry_.stride - geometry_.padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t kx = 0; kx < k; ++kx) {
            const int64_t ix = ox * geometry_.stride - geometry_.padding + kx;
            if (ix < 0 || ix >= w) continue;
            const int64_t idx = pl * h * w + iy * w + ix;
            sum += px[idx];
            if (px[idx] > best) {
              best = px[idx];
              arg = idx;
            }
          }
        }
        const int64_t o = (pl * oh + oy) * ow + ox;
        if (pool_ == PoolKind::kMax) {
          py[o] = best;
          book.saved_index[static_cast<size_t>(o)] = arg;
        } else {
          py[o] = sum / static_cast<double>(k * k);
        }
      }
    }
  }
  return y;
}

Tensor PoolLayer::Backward(Tensor grad, LayerBook& book, bool need_input_grad,
                           OpCounters& counters) const {
  if (!need_input_grad) return Tensor();
  const Shape& in = book.input_shape;
  Tensor dx = Tensor::Like(in, grad.shape_only(), &counters);
  counters.AddMulAdds(pool_ == PoolKind::kGlobalAverage
                          ? dx.numel()
                          : grad.numel() * geometry_.kernel_h *
                                geometry_.kernel_w);
  if (dx.shape_only()) return dx;
  const int64_t planes = in[0] * in[1], h = in[2], w = in[3];
  const double* pg = grad.data().data();
  double* pdx = dx.data().data();
  if (pool_ == PoolKind::kGlobalAverage) {
    for (int64_t pl = 0; pl < planes; ++pl) {
      const double v = pg[pl] / static_cast<double>(h * w);
      for (int64_t i = 0; i < h * w; ++i) pdx[pl * h * w + i] = v;
    }
    return dx;
  }
  if (pool_ == PoolKind::kMax) {
    for (size_t o = 0; o < book.saved_index.size(); ++o) {
      pdx[book.saved_index[o]] += pg[o];
    }
    return dx;
  }
  const int64_t oh = grad.dim(2), ow = grad.dim(3), k = geometry_.kernel_h;
  const double scale = 1.0 / static_cast<double>(k * k);
  for (int64_t pl = 0; pl < planes; ++pl) {
    for (int64_t oy = 0; oy < oh; ++oy) {
      for (int64_t ox = 0; ox < ow; ++ox) {
        const double v = pg[(pl * oh + oy) * ow + ox] * scale;
        for (int64_t ky = 0; ky < k; ++ky) {
          const int64_t iy = oy * geometry_.stride - geometry_.padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t kx = 0; kx < k; ++kx) {
            const int64_t ix = ox * geometry_.stride - geometry_.padding + kx;
            if (ix < 0 || ix >= w) continue;
            pdx[pl * h * w + iy * w + ix] += v;
          }
        }
      }
    }
  }
  return dx;
}

Shape FlattenLayer::OutputShape(const Shape& input) const {
  if (input.size() < 2) {
    throw DimensionError("layer '" + name() + "' needs a batch dimension");
  }
  return {input[0], NumElements(input) / input[0]};
}

Tensor FlattenLayer::Forward(Tensor x, LayerBook& book,
                             OpCounters& counters) const {
  (void)counters;
  book.input_shape = x.shape();
  return std::move(x).Reshaped(OutputShape(book.input_shape));
}

Tensor FlattenLayer::Backward(Tensor grad, LayerBook& book,
                              bool need_input_grad,
                              OpCounters& counters) const {
  (void)counters;
  if (!need_input_grad) return Tensor();
  return std::move(grad).Reshaped(book.input_shape);
}

Shape TokensLayer::OutputShape(const Shape& input) const {
  if (input.size() != 4) {
    throw DimensionError("layer '" + name() + "' expects [B, C, H, W], got " +
                         ShapeToString(input));
  }
  return {input[0], input[2] * input[3], input[1]};
}

Tensor TokensLayer::Forward(Tensor x, LayerBook& book,
                            OpCounters& counters) const {
  OutputShape(x.shape());
  book.input_shape = x.shape();
  return ChannelsToTokens(x, counters);
}

Tensor TokensLayer::Backward(Tensor grad, LayerBook& book,
                             bool need_input_grad,
                             OpCounters& counters) const {
  if (!need_input_grad) return Tensor();
  return TokensToChannels(grad, book.input_shape[2], book.input_shape[3],
                          counters);
}

AttentionLayer::AttentionLayer(std::string name, int64_t heads)
    : Layer(std::move(name)), heads_(heads) {
  if (heads <= 0) throw SpecificationError("attention needs heads >= 1");
}

Shape AttentionLayer::OutputShape(const Shape& input) const {
  if (input.size() != 3 || input[2] % (3 * heads_) != 0) {
    throw DimensionError("layer '" + name() + "' expects [B, T, 3 * D] with "
                         "D divisible by " + std::to_string(heads_) +
                         ", got " + ShapeToString(input));
  }
  return {input[0], input[1], input[2] / 3};
}

Tensor AttentionLayer::Forward(Tensor x, LayerBook& book,
                               OpCounters& counters) const {
  const Shape out = OutputShape(x.shape());
  book.input_shape = x.shape();
  const int64_t batch = out[0], t = out[1], dm = out[2];
  const int64_t dh = dm / heads_;
  // Scores, softmax and the weighted sum of values.
  counters.AddMulAdds(4 * batch * heads_ * t * t * dh +
                      3 * batch * heads_ * t * t);
  Tensor probs = Tensor::Like({batch, heads_, t, t}, x.shape_only(),
                              &counters);
  Tensor y = Tensor::Like(out, x.shape_only(), &counters);
  if (!y.shape_only()) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double* px = x.data().data();
    double* pp = probs.data().data();
    double* py = y.data().data();
    const int64_t row = 3 * dm;
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t hd = 0; hd < heads_; ++hd) {
        double* P = pp + (b * heads_ + hd) * t * t;
        for (int64_t i = 0; i < t; ++i) {
          const double* q = px + (b * t + i) * row + hd * dh;
          double mx = -std::numeric_limits<double>::infinity();
          for (int64_t j = 0; j < t; ++j) {
            const double* k = px + (b * t + j) * row + dm + hd * dh;
            double s = 0.0;
            for (int64_t e = 0; e < dh; ++e) s += q[e] * k[e];
            P[i * t + j] = s * scale;
            mx = std::max(mx, P[i * t + j]);
          }
          double z = 0.0;
          for (int64_t j = 0; j < t; ++j) {
            P[i * t + j] = std::exp(P[i * t + j] - mx);
            z += P[i * t + j];
          }
          for (int64_t j = 0; j < t; ++j) P[i * t + j] /= z;
          double* o = py + (b * t + i) * dm + hd * dh;
          for (int64_t j = 0; j < t; ++j) {
            const double* v = px + (b * t + j) * row + 2 * dm + hd * dh;
            for (int64_t e = 0; e < dh; ++e) o[e] += P[i * t + j] * v[e];
          }
        }
      }
    }
  }
  book.saved = std::move(x);
  book.saved_aux = std::move(probs);
  return y;
}

Tensor AttentionLayer::Backward(Tensor grad, LayerBook& book,
                                bool need_input_grad,
                                OpCounters& counters) const {
  if (!need_input_grad) return Tensor();
  const Tensor& x = book.saved;
  const Tensor& probs = book.saved_aux;
  const int64_t batch = grad.dim(0), t = grad.dim(1), dm = grad.dim(2);
  const int64_t dh = dm / heads_;
  counters.AddMulAdds(8 * batch * heads_ * t * t * dh +
                      4 * batch * heads_ * t * t);
  Tensor dx = Tensor::Like(x.shape(), grad.shape_only(), &counters);
  if (dx.shape_only()) return dx;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* px = x.data().data();
  const double* pp = probs.data().data();
  const double* pg = grad.data().data();
  double* pdx = dx.data().data();
  const int64_t row = 3 * dm;
  std::vector<double> dp(static_cast<size_t>(t));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t hd = 0; hd < heads_; ++hd) {
      const double* P = pp + (b * heads_ + hd) * t * t;
      for (int64_t i = 0; i < t; ++i) {
        const double* go = pg + (b * t + i) * dm + hd * dh;
        double weighted = 0.0;
        for (int64_t j = 0; j < t; ++j) {
          const double* v = px + (b * t + j) * row + 2 * dm + hd * dh;
          double* dv = pdx + (b * t + j) * row + 2 * dm + hd * dh;
          double s = 0.0;
          for (int64_t e = 0; e < dh; ++e) {
            s += go[e] * v[e];
            dv[e] += P[i * t + j] * go[e];
          }
          dp[static_cast<size_t>(j)] = s;
          weighted += s * P[i * t + j];
        }
        const double* q = px + (b * t + i) * row + hd * dh;
        double* dq = pdx + (b * t + i) * row + hd * dh;
        for (int64_t j = 0; j < t; ++j) {
          const double ds =
              P[i * t + j] * (dp[static_cast<size_t>(j)] - weighted) * scale;
          const double* k = px + (b * t + j) * row + dm + hd * dh;
          double* dk = pdx + (b * t + j) * row + dm + hd * dh;
          for (int64_t e = 0; e < dh; ++e) {
            dq[e] += ds * k[e];
            dk[e] += ds * q[e];
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Static helpers

std::vector<LayerShape> DecomposeComposite(const LayerShape& layer) {
  if (layer.kind != LayerKind::kLora && layer.kind != LayerKind::kAdapter) {
    throw CapabilityError("layer '" + layer.name + "' of kind " +
                          LayerKindName(layer.kind) +
                          " is not a composite layer");
  }
  if (layer.rank <= 0) {
    throw SpecificationError("composite layer '" + layer.name +
                             "' needs a positive rank");
  }
  LayerShape first = layer;
  first.kind = LayerKind::kLinear;
  first.rank = 0;
  first.has_bias = false;
  first.name = layer.name + ".down";
  first.p = layer.rank;
  LayerShape second = first;
  second.name = layer.name + ".up";
  second.d = layer.rank;
  second.p = layer.p;
  return {first, second};
}

GeneralizedLinearView LowerToGeneralizedLinear(const Layer& layer,
                                               const Tensor& input,
                                               OpCounters& counters) {
  GeneralizedLinearView view;
  switch (layer.kind()) {
    case LayerKind::kLinear: {
      const auto& linear = static_cast<const LinearLayer&>(layer);
      const int64_t d = linear.weight().value.dim(0);
      const int64_t t = SequenceLength(input.shape(), d, layer);
      view.activation = input.CopyTo(counters).Reshaped({input.dim(0), t, d});
      view.weight = linear.weight().value.CopyTo(counters);
      return view;
    }
    case LayerKind::kConv2d: {
      const auto& conv = static_cast<const Conv2dLayer&>(layer);
      conv.OutputShape(input.shape());
      view.activation = Im2Col(input, conv.geometry(), counters);
      view.weight = conv.weight().value.CopyTo(counters);
      return view;
    }
    case LayerKind::kEmbedding: {
      const auto& embedding = static_cast<const EmbeddingLayer&>(layer);
      const Shape out = embedding.OutputShape(input.shape());
      const int64_t vocab = embedding.vocab();
      view.activation = Tensor::Zeros({out[0], out[1], vocab}, &counters);
      for (int64_t r = 0; r < input.numel(); ++r) {
        const auto id = static_cast<int64_t>(input[r]);
        if (id < 0 || id >= vocab) {
          throw DimensionError("token id outside vocabulary");
        }
        view.activation[r * vocab + id] = 1.0;
      }
      view.weight = embedding.weight().value.CopyTo(counters);
      return view;
    }
    case LayerKind::kLora: {
      const auto& lora = static_cast<const LoraLayer&>(layer);
      const int64_t d = lora.down().value.dim(0);
      const int64_t t = SequenceLength(input.shape(), d, layer);
      view.activation = input.CopyTo(counters).Reshaped({input.dim(0), t, d});
      view.weight = lora.down().value.CopyTo(counters);
      return view;
    }
    case LayerKind::kAdapter: {
      const auto& adapter = static_cast<const AdapterLayer&>(layer);
      const int64_t d = adapter.down().value.dim(0);
      const int64_t t = SequenceLength(input.shape(), d, layer);
      view.activation = input.CopyTo(counters).Reshaped({input.dim(0), t, d});
      view.weight = adapter.down().value.CopyTo(counters);
      return view;
    }
    default:
      throw CapabilityError("layer '" + layer.name() + "' of kind " +
                            LayerKindName(layer.kind()) +
                            " is not generalized linear");
  }
}

Tensor NormPerSampleGrads(const Tensor& normalized, const Tensor& output_grad,
                          OpCounters& counters) {
  if (normalized.rank() != 3 || normalized.shape() != output_grad.shape()) {
    throw DimensionError("normalization grads need matching [B, T, C] "
                         "tensors, got " + ShapeToString(normalized.shape()) +
                         " and " + ShapeToString(output_grad.shape()));
  }
  const int64_t batch = normalized.dim(0), t = normalized.dim(1),
                c = normalized.dim(2);
  counters.AddMulAdds(4 * batch * t * c);
  Tensor out = Tensor::Like(
      {batch, 2 * c}, normalized.shape_only() || output_grad.shape_only(),
      &counters);
  if (out.shape_only()) return out;
  const double* ph = normalized.data().data();
  const double* pg = output_grad.data().data();
  double* po = out.data().data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t s = 0; s < t; ++s) {
      for (int64_t j = 0; j < c; ++j) {
        const int64_t idx = (b * t + s) * c + j;
        po[b * 2 * c + j] += ph[idx] * pg[idx];
        po[b * 2 * c + c + j] += pg[idx];
      }
    }
  }
  return out;
}

}  // namespace bkdp

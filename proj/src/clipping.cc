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

#include "bkdp/clipping.h"

#include <algorithm>
#include <cmath>

#include "bkdp/status.h"

namespace bkdp {
namespace {

void CheckPair(const Tensor& a, const Tensor& ds) {
  if (a.rank() != 3 || ds.rank() != 3 || a.dim(0) != ds.dim(0) ||
      a.dim(1) != ds.dim(1)) {
    throw DimensionError("expected activation [B, T, d] and output gradient "
                         "[B, T, p], got " + ShapeToString(a.shape()) +
                         " and " + ShapeToString(ds.shape()));
  }
}

void CheckFactors(const Tensor& factors, int64_t batch) {
  if (factors.rank() != 1 || factors.numel() != batch) {
    throw DimensionError("expected " + std::to_string(batch) +
                         " clipping factors, got " +
                         ShapeToString(factors.shape()));
  }
}

}  // namespace

void ClipFn::Validate() const {
  if (!(radius > 0.0) || !std::isfinite(radius)) {
    throw ParameterError("clipping radius must be positive");
  }
  if (!(stabilizer >= 0.0) || !std::isfinite(stabilizer)) {
    throw ParameterError("stabilizer must be non-negative");
  }
}

ClipVariant ParseClipVariant(const std::string& name) {
  if (name == "abadi") return ClipVariant::kAbadi;
  if (name == "flat") return ClipVariant::kFlat;
  if (name == "automatic") return ClipVariant::kAutomatic;
  throw ConfigurationError("unknown clipping function '" + name +
                           "' (expected abadi, flat or automatic)");
}

std::string ClipVariantName(ClipVariant variant) {
  switch (variant) {
    case ClipVariant::kAbadi: return "abadi";
    case ClipVariant::kFlat: return "flat";
    case ClipVariant::kAutomatic: return "automatic";
  }
  return "unknown";
}

double ClipFactor(double norm, const ClipFn& fn) {
  if (!(norm >= 0.0)) {
    throw ParameterError("gradient norm must be non-negative");
  }
  switch (fn.variant) {
    case ClipVariant::kAbadi:
      return norm == 0.0 ? 1.0 : std::min(fn.radius / norm, 1.0);
    case ClipVariant::kFlat:
      return norm <= fn.radius ? 1.0 : 0.0;
    case ClipVariant::kAutomatic:
      if (norm + fn.stabilizer == 0.0) {
        throw ParameterError("automatic clipping of a zero norm needs a "
                             "positive stabilizer");
      }
      return 1.0 / (norm + fn.stabilizer);
  }
  return 1.0;
}

std::string ClipModeName(ClipMode mode) {
  return mode == ClipMode::kGhost ? "ghost" : "instantiate";
}

ClipMode DecideMode(int64_t T, int64_t p, int64_t d) {
  return 2 * T * T < p * d ? ClipMode::kGhost : ClipMode::kInstantiate;
}

ClipMode ClipPlan::mode(const UnitSpec& unit) const {
  if (!modes.empty()) return modes.at(unit.index);
  if (unit.kind == UnitKind::kNormAffine) return ClipMode::kInstantiate;
  return DecideMode(unit.T, unit.p, unit.d);
}

void ClipPlan::Validate(const Graph& graph) const {
  clip_fn.Validate();
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw ParameterError("noise multiplier must be non-negative");
  }
  if (modes.empty()) return;
  if (modes.size() != graph.units().size()) {
    throw ConfigurationError("plan lists " + std::to_string(modes.size()) +
                             " modes for " +
                             std::to_string(graph.units().size()) + " units");
  }
  for (const UnitSpec& u : graph.units()) {
    if (u.kind == UnitKind::kNormAffine && mode(u) == ClipMode::kGhost) {
      throw ConfigurationError("ghost norm requested for normalization unit '" +
                               u.name + "'");
    }
  }
}

std::vector<ClipMode> DecidedModes(const Graph& graph) {
  ClipPlan plan;
  std::vector<ClipMode> out;
  for (const UnitSpec& u : graph.units()) out.push_back(plan.mode(u));
  return out;
}

// ---------------------------------------------------------------------------

Grams ComputeGrams(const Tensor& activation, const Tensor& output_grad,
                   OpCounters& counters) {
  CheckPair(activation, output_grad);
  const int64_t batch = activation.dim(0);
  Grams grams;
  if (activation.dim(1) == 1) {
    grams.activation =
        RowSquaredNorms(activation, counters).Reshaped({batch, 1, 1});
    grams.output_grad =
        RowSquaredNorms(output_grad, counters).Reshaped({batch, 1, 1});
    return grams;
  }
  grams.activation = BatchedMatMulNT(activation, activation, counters);
  grams.output_grad = BatchedMatMulNT(output_grad, output_grad, counters);
  return grams;
}

Tensor IndexGram(std::span<const int64_t> token_ids, int64_t batch, int64_t T,
                 bool shape_only, OpCounters& counters) {
  if (!shape_only && static_cast<int64_t>(token_ids.size()) != batch * T) {
    throw DimensionError("expected " + std::to_string(batch * T) +
                         " token ids, got " +
                         std::to_string(token_ids.size()));
  }
  counters.AddMulAdds(2 * batch * T * T);
  Tensor gram = Tensor::Like({batch, T, T}, shape_only, &counters);
  if (shape_only) return gram;
  for (int64_t i = 0; i < batch; ++i) {
    for (int64_t t = 0; t < T; ++t) {
      for (int64_t s = 0; s < T; ++s) {
        gram[(i * T + t) * T + s] =
            token_ids[static_cast<size_t>(i * T + t)] ==
                    token_ids[static_cast<size_t>(i * T + s)]
                ? 1.0
                : 0.0;
      }
    }
  }
  return gram;
}

void AccumulateGramInnerProducts(const Grams& grams, Tensor& acc,
                                 OpCounters& counters) {
  const Tensor& ga = grams.activation;
  const Tensor& gs = grams.output_grad;
  if (ga.shape() != gs.shape() || ga.rank() != 3) {
    throw DimensionError("Gram shapes " + ShapeToString(ga.shape()) + " and " +
                         ShapeToString(gs.shape()) + " do not agree");
  }
  const int64_t batch = ga.dim(0);
  CheckFactors(acc, batch);
  const int64_t per = ga.numel() / batch;
  counters.AddMulAdds(2 * ga.numel());
  if (ga.shape_only() || gs.shape_only() || acc.shape_only()) return;
  const double* pa = ga.data().data();
  const double* ps = gs.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    double sum = 0.0;
    for (int64_t k = 0; k < per; ++k) sum += pa[i * per + k] * ps[i * per + k];
    acc[i] += sum;
  }
}

void AccumulateGramEntrySums(const Tensor& gram, Tensor& acc,
                             OpCounters& counters) {
  const int64_t batch = gram.dim(0);
  CheckFactors(acc, batch);
  const int64_t per = gram.numel() / batch;
  counters.AddMulAdds(gram.numel());
  if (gram.shape_only() || acc.shape_only()) return;
  const double* pg = gram.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    double sum = 0.0;
    for (int64_t k = 0; k < per; ++k) sum += pg[i * per + k];
    acc[i] += sum;
  }
}

Tensor GramInnerProducts(const Grams& grams, OpCounters& counters) {
  const int64_t batch = grams.activation.dim(0);
  Tensor out = Tensor::Like(
      {batch},
      grams.activation.shape_only() || grams.output_grad.shape_only(),
      &counters);
  AccumulateGramInnerProducts(grams, out, counters);
  return out;
}

Tensor GramEntrySums(const Tensor& gram, OpCounters& counters) {
  Tensor out = Tensor::Like({gram.dim(0)}, gram.shape_only(), &counters);
  AccumulateGramEntrySums(gram, out, counters);
  return out;
}

Tensor GhostNormSq(const Tensor& activation, const Tensor& output_grad,
                   OpCounters& counters) {
  Grams grams = ComputeGrams(activation, output_grad, counters);
  return GramInnerProducts(grams, counters);
}

Tensor InstantiatePerSampleGrads(const Tensor& activation,
                                 const Tensor& output_grad,
                                 OpCounters& counters) {
  CheckPair(activation, output_grad);
  return BatchedMatMulTN(activation, output_grad, counters);
}

Tensor InstantiateIndexPerSampleGrads(std::span<const int64_t> token_ids,
                                      const Tensor& output_grad,
                                      int64_t vocab, OpCounters& counters) {
  if (output_grad.rank() != 3) {
    throw DimensionError("expected output gradient [B, T, p], got " +
                         ShapeToString(output_grad.shape()));
  }
  const int64_t batch = output_grad.dim(0), T = output_grad.dim(1),
                p = output_grad.dim(2);
  const bool shape_only = output_grad.shape_only();
  if (!shape_only && static_cast<int64_t>(token_ids.size()) != batch * T) {
    throw DimensionError("expected " + std::to_string(batch * T) +
                         " token ids, got " +
                         std::to_string(token_ids.size()));
  }
  counters.AddMulAdds(output_grad.numel());
  Tensor out = Tensor::Like({batch, vocab, p}, shape_only, &counters);
  if (shape_only) return out;
  const double* pg = output_grad.data().data();
  double* po = out.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    for (int64_t t = 0; t < T; ++t) {
      const int64_t id = token_ids[static_cast<size_t>(i * T + t)];
      double* dst = po + (i * vocab + id) * p;
      const double* src = pg + (i * T + t) * p;
      for (int64_t j = 0; j < p; ++j) dst[j] += src[j];
    }
  }
  return out;
}

Tensor ClippedGradBk(const Tensor& activation, const Tensor& output_grad,
                     const Tensor& factors, OpCounters& counters) {
  CheckPair(activation, output_grad);
  CheckFactors(factors, activation.dim(0));
  return WeightedMatMulTN(activation, output_grad, factors.data(),
                          activation.dim(1), factors.shape_only(), counters);
}

void WeightedSumInto(const Tensor& per_sample, const Tensor& factors,
                     Tensor& out, OpCounters& counters) {
  const int64_t batch = per_sample.dim(0);
  CheckFactors(factors, batch);
  const int64_t per = per_sample.numel() / batch;
  if (out.numel() != per) {
    throw DimensionError("weighted sum of " +
                         ShapeToString(per_sample.shape()) + " into " +
                         ShapeToString(out.shape()));
  }
  counters.AddMulAdds(2 * per_sample.numel());
  if (per_sample.shape_only() || factors.shape_only() || out.shape_only()) {
    return;
  }
  const double* pg = per_sample.data().data();
  double* po = out.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    const double c = factors[i];
    for (int64_t k = 0; k < per; ++k) po[k] += c * pg[i * per + k];
  }
}

Tensor WeightedSum(const Tensor& per_sample, const Tensor& factors,
                   OpCounters& counters) {
  Shape shape(per_sample.shape().begin() + 1, per_sample.shape().end());
  if (shape.empty()) shape = {1};
  Tensor out = Tensor::Like(shape,
                            per_sample.shape_only() || factors.shape_only(),
                            &counters);
  WeightedSumInto(per_sample, factors, out, counters);
  return out;
}

}  // namespace bkdp

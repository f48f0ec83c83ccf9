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

#include "bkdp/privacy_engine.h"

#include <algorithm>
#include <cmath>
#include <utility>

#include "bkdp/status.h"

namespace bkdp {
namespace {

struct KindInfo {
  ImplKind kind;
  const char* name;
};

constexpr KindInfo kKinds[] = {
    {ImplKind::kNonDp, "non_dp"},
    {ImplKind::kNaive, "naive"},
    {ImplKind::kOpacus, "opacus"},
    {ImplKind::kOpacusImproved, "opacus_improved"},
    {ImplKind::kFastGradClip, "fast_grad_clip"},
    {ImplKind::kFastGradClipImproved, "fast_grad_clip_improved"},
    {ImplKind::kGhostClip, "ghost_clip"},
    {ImplKind::kMixGhostClip, "mix_ghost_clip"},
    {ImplKind::kBk, "bk"},
    {ImplKind::kBkMixGhostClip, "bk_mix_ghost_clip"},
    {ImplKind::kBkMixOpt, "bk_mix_opt"},
};

bool TwoPass(ImplKind kind) {
  return kind == ImplKind::kFastGradClip || kind == ImplKind::kGhostClip ||
         kind == ImplKind::kMixGhostClip;
}

// Kinds that run only the output-gradient pass and discard the regular
// gradient except for the origin parameters.
bool GhostDifferentiation(ImplKind kind) {
  return kind == ImplKind::kOpacusImproved ||
         kind == ImplKind::kFastGradClipImproved || kind == ImplKind::kBk ||
         kind == ImplKind::kBkMixGhostClip || kind == ImplKind::kBkMixOpt;
}

// Kinds that keep instantiated per-sample gradients for a weighted sum.
bool RetainsInstantiated(ImplKind kind) {
  return kind == ImplKind::kOpacus || kind == ImplKind::kOpacusImproved ||
         kind == ImplKind::kBkMixOpt;
}

Tensor Detached(const Tensor& t) {
  if (t.empty()) return Tensor();
  if (t.shape_only()) return Tensor::ShapeOnly(t.shape());
  return Tensor::FromVector(t.shape(), t.ToVector());
}

Tensor SampleSlice(const Tensor& batch, int64_t i) {
  Shape shape = batch.shape();
  shape[0] = 1;
  if (batch.shape_only()) return Tensor::ShapeOnly(shape);
  const int64_t per = batch.numel() / batch.dim(0);
  auto data = batch.data();
  return Tensor::FromVector(
      shape, std::vector<double>(data.begin() + i * per,
                                 data.begin() + (i + 1) * per));
}

void ZeroFill(Tensor& t) {
  if (t.empty() || t.shape_only()) return;
  std::fill(t.data().begin(), t.data().end(), 0.0);
}

double SquaredSum(const Tensor& t, OpCounters& counters) {
  counters.AddMulAdds(2 * t.numel());
  if (t.shape_only()) return 0.0;
  double sum = 0.0;
  for (double v : t.data()) sum += v * v;
  return sum;
}

bool AnyShapeOnly(const Graph& graph) {
  for (const Parameter* p : graph.parameters()) {
    if (p->value.shape_only()) return true;
  }
  return false;
}

// Allocates zero gradient buffers for the clipping units' parameters.
std::vector<Tensor> GradBuffers(const Graph& graph, bool shape_only,
                                OpCounters& counters) {
  std::vector<Tensor> grads(graph.parameters().size());
  for (const UnitSpec& u : graph.units()) {
    grads[u.weight->id] =
        Tensor::Like(u.weight->value.shape(), shape_only, &counters);
    if (u.bias != nullptr) {
      grads[u.bias->id] =
          Tensor::Like(u.bias->value.shape(), shape_only, &counters);
    }
  }
  return grads;
}

// Clipping factors from squared norms; the squared norms become norms.
Tensor FactorsFromSquaredNorms(Tensor& sq_norms, const ClipFn& fn,
                               OpCounters& counters) {
  counters.AddMulAdds(2 * sq_norms.numel());
  Tensor factors =
      Tensor::Like(sq_norms.shape(), sq_norms.shape_only(), &counters);
  if (factors.shape_only()) return factors;
  for (int64_t i = 0; i < sq_norms.numel(); ++i) {
    sq_norms[i] = std::sqrt(std::max(sq_norms[i], 0.0));
    factors[i] = ClipFactor(sq_norms[i], fn);
  }
  return factors;
}

}  // namespace

std::string ImplKindName(ImplKind kind) {
  for (const KindInfo& k : kKinds) {
    if (k.kind == kind) return k.name;
  }
  return "unknown";
}

ImplKind ParseImplKind(const std::string& name) {
  for (const KindInfo& k : kKinds) {
    if (name == k.name) return k.kind;
  }
  std::string known;
  for (const KindInfo& k : kKinds) {
    known += known.empty() ? "" : ", ";
    known += k.name;
  }
  throw ConfigurationError("unknown implementation '" + name +
                           "' (known: " + known + ")");
}

const std::vector<ImplKind>& AllImplKinds() {
  static const std::vector<ImplKind> kAll = [] {
    std::vector<ImplKind> out;
    for (const KindInfo& k : kKinds) out.push_back(k.kind);
    return out;
  }();
  return kAll;
}

const std::vector<ImplKind>& DpImplKinds() {
  static const std::vector<ImplKind> kDp = [] {
    std::vector<ImplKind> out;
    for (const KindInfo& k : kKinds) {
      if (k.kind != ImplKind::kNonDp) out.push_back(k.kind);
    }
    return out;
  }();
  return kDp;
}

int ExpectedBackwardPasses(ImplKind kind, int64_t batch) {
  if (kind == ImplKind::kNaive) return static_cast<int>(batch);
  return TwoPass(kind) ? 2 : 1;
}

std::vector<ClipMode> EffectiveModes(ImplKind kind, const Graph& graph,
                                     const ClipPlan& plan) {
  plan.Validate(graph);
  std::vector<ClipMode> modes;
  for (const UnitSpec& u : graph.units()) {
    if (u.kind == UnitKind::kNormAffine) {
      modes.push_back(ClipMode::kInstantiate);
      continue;
    }
    switch (kind) {
      case ImplKind::kGhostClip:
      case ImplKind::kBk:
        modes.push_back(ClipMode::kGhost);
        break;
      case ImplKind::kMixGhostClip:
      case ImplKind::kBkMixGhostClip:
      case ImplKind::kBkMixOpt:
        modes.push_back(plan.mode(u));
        break;
      default:
        modes.push_back(ClipMode::kInstantiate);
        break;
    }
  }
  return modes;
}

void AddNoise(Tensor& grad, double sigma, double radius, SeededRng& rng,
              OpCounters& counters) {
  if (!(sigma >= 0.0) || !(radius >= 0.0)) {
    throw ParameterError("noise multiplier and radius must be non-negative");
  }
  if (sigma == 0.0 || radius == 0.0) return;
  // One add per coordinate; drawing the sample is not arithmetic work.
  counters.AddMulAdds(grad.numel());
  if (grad.shape_only()) return;
  const double stddev = sigma * radius;
  for (double& v : grad.data()) v += stddev * rng.Normal();
}

OracleResult NaiveOracleGrad(const Graph& graph, const Tensor& batch,
                             const Tensor& targets, const ClipPlan& plan,
                             OpCounters& counters) {
  plan.clip_fn.Validate();
  if (batch.empty() || batch.dim(0) < 1) {
    throw DimensionError("batch must hold at least one sample");
  }
  if (targets.empty() || targets.dim(0) != batch.dim(0)) {
    throw DimensionError("targets do not match the batch size");
  }
  const int64_t n = batch.dim(0);
  const bool shape_only = batch.shape_only() || AnyShapeOnly(graph);
  OracleResult result;
  result.per_sample_norms = Tensor::Like({n}, shape_only, &counters);
  result.clip_factors = Tensor::Like({n}, shape_only, &counters);
  result.clipped_grads = GradBuffers(graph, shape_only, counters);
  for (int64_t i = 0; i < n; ++i) {
    GradBook book;
    Forward(graph, SampleSlice(batch, i), SampleSlice(targets, i), book,
            counters);
    BackwardOutputGrads(graph, book, {}, counters);
    std::vector<Tensor> g = AllParamGrads(graph, book, counters);
    double sq = 0.0;
    for (const Tensor& t : g) {
      if (!t.empty()) sq += SquaredSum(t, counters);
    }
    double factor = 1.0;
    if (!shape_only) {
      const double norm = std::sqrt(sq);
      factor = ClipFactor(norm, plan.clip_fn);
      result.per_sample_norms[i] = norm;
      result.clip_factors[i] = factor;
    }
    for (size_t id = 0; id < g.size(); ++id) {
      if (!g[id].empty()) {
        AxpyInPlace(result.clipped_grads[id], factor, g[id], counters);
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// PrivacyEngine

PrivacyEngine::PrivacyEngine(Graph& graph, ClipPlan plan,
                             OptimizerConfig optimizer, uint64_t seed)
    : graph_(graph),
      plan_(std::move(plan)),
      optimizer_(optimizer),
      rng_(seed) {
  plan_.Validate(graph_);
  if (!(optimizer_.learning_rate >= 0.0)) {
    throw ParameterError("learning rate must be non-negative");
  }
  for (Parameter* p : graph_.parameters()) p->value.Track(counters_);
}

StepReport PrivacyEngine::Step(ImplKind kind, const Tensor& batch,
                               const Tensor& targets,
                               const StepOptions& options) {
  StepReport report;
  report.kind = kind;
  report.modes = EffectiveModes(kind, graph_, plan_);
  if (graph_.units().empty()) {
    throw ConfigurationError("graph has no trainable parameters");
  }
  if (batch.empty() || batch.dim(0) < 1) {
    throw DimensionError("batch must hold at least one sample");
  }
  report.batch = batch.dim(0);
  report.shape_only = batch.shape_only() || AnyShapeOnly(graph_);
  report.fingerprint = graph_.Fingerprint();
  report.weight_version = weight_version_;

  counters_.ResetPeak();
  const int64_t start = counters_.mul_adds();
  const std::map<int, int64_t> scoped_start = counters_.scoped_mul_adds();
  {
    std::vector<Tensor> grads =
        GradBuffers(graph_, report.shape_only, counters_);
    if (kind == ImplKind::kNaive) {
      RunNaive(batch, targets, grads, report);
    } else {
      RunBatched(kind, batch, targets, grads, report);
    }
    report.mul_adds = counters_.mul_adds() - start;
    for (const auto& [scope, count] : counters_.scoped_mul_adds()) {
      auto it = scoped_start.find(scope);
      const int64_t delta =
          count - (it == scoped_start.end() ? 0 : it->second);
      if (delta != 0) report.unit_mul_adds[scope] = delta;
    }
    if (options.keep_grads) {
      report.clipped_grads.resize(grads.size());
      for (size_t i = 0; i < grads.size(); ++i) {
        report.clipped_grads[i] = Detached(grads[i]);
      }
    }
    StepOptions privatize = options;
    if (kind == ImplKind::kNonDp) privatize.add_noise = false;
    std::vector<Tensor> priv =
        ApplyPrivateGradient(std::move(grads), privatize);
    if (options.keep_grads) {
      report.private_grads.resize(priv.size());
      for (size_t i = 0; i < priv.size(); ++i) {
        report.private_grads[i] = Detached(priv[i]);
      }
    }
  }
  report.peak_live_bytes = counters_.peak_live_bytes();
  return report;
}

void PrivacyEngine::RunNaive(const Tensor& batch, const Tensor& targets,
                             std::vector<Tensor>& grads, StepReport& report) {
  OracleResult oracle =
      NaiveOracleGrad(graph_, batch, targets, plan_, counters_);
  for (size_t id = 0; id < grads.size(); ++id) {
    if (!grads[id].empty()) grads[id] = std::move(oracle.clipped_grads[id]);
  }
  report.backward_passes = static_cast<int>(batch.dim(0));
  report.per_sample_norms = Detached(oracle.per_sample_norms);
  report.clip_factors = Detached(oracle.clip_factors);
}

void PrivacyEngine::RunBatched(ImplKind kind, const Tensor& batch,
                               const Tensor& targets,
                               std::vector<Tensor>& grads,
                               StepReport& report) {
  OpCounters& c = counters_;
  const std::vector<UnitSpec>& units = graph_.units();
  const int64_t n = batch.dim(0);
  const bool shape_only = report.shape_only;
  auto weight_grad = [&](const UnitSpec& u) { return &grads[u.weight->id]; };
  auto bias_grad = [&](const UnitSpec& u) {
    return u.bias == nullptr ? nullptr : &grads[u.bias->id];
  };

  GradBook book;
  {
    Tensor losses = Forward(graph_, batch, targets, book, c);
    report.losses = Detached(losses);
  }
  BackwardOutputGrads(graph_, book, {}, c);
  report.backward_passes = 1;

  if (kind == ImplKind::kNonDp) {
    for (const UnitSpec& u : units) {
      AccumulateUnitGrads(u, book.unit(u), nullptr, weight_grad(u),
                          bias_grad(u), c);
    }
    return;
  }
  if (kind == ImplKind::kOpacus || kind == ImplKind::kGhostClip) {
    // Regular (non-private) gradient, later discarded.
    for (const UnitSpec& u : units) {
      AccumulateUnitGrads(u, book.unit(u), nullptr, weight_grad(u),
                          bias_grad(u), c);
    }
  }
  if (GhostDifferentiation(kind)) {
    const int origin = SelectOriginParams(graph_).front();
    const UnitSpec& first = units.front();
    const bool is_bias = first.bias != nullptr && first.bias->id == origin;
    AccumulateUnitGrads(first, book.unit(first), nullptr,
                        is_bias ? nullptr : weight_grad(first),
                        is_bias ? bias_grad(first) : nullptr, c);
  }

  // Per-sample norm contributions.
  const bool retain_all = RetainsInstantiated(kind);
  for (const UnitSpec& u : units) {
    UnitBook& ub = book.unit(u);
    CounterScope scope(c, u.index);
    const Tensor& ds = ub.output_grad;
    if (report.modes[u.index] == ClipMode::kGhost) {
      if (u.index_activation) {
        ub.gram_activation =
            IndexGram(ub.token_ids, n, u.T, ds.shape_only(), c);
        ub.gram_output_grad =
            u.T == 1 ? RowSquaredNorms(ds, c).Reshaped({n, 1, 1})
                     : BatchedMatMulNT(ds, ds, c);
      } else {
        Grams grams = ComputeGrams(ub.activation, ds, c);
        ub.gram_activation = std::move(grams.activation);
        ub.gram_output_grad = std::move(grams.output_grad);
      }
      continue;
    }
    const bool norm_unit = u.kind == UnitKind::kNormAffine;
    const bool keep = retain_all || (norm_unit && !TwoPass(kind));
    if (norm_unit) {
      ub.per_sample_weight = NormPerSampleGrads(ub.activation, ds, c);
    } else if (u.index_activation) {
      ub.per_sample_weight =
          InstantiateIndexPerSampleGrads(ub.token_ids, ds, u.d, c);
    } else {
      ub.per_sample_weight = InstantiatePerSampleGrads(ub.activation, ds, c);
    }
    if (!norm_unit && u.bias != nullptr) {
      ub.per_sample_bias = SumOverMiddle(ds, c);
    }
    ub.sq_norms = RowSquaredNorms(ub.per_sample_weight, c);
    if (!ub.per_sample_bias.empty()) {
      Tensor bias_sq = RowSquaredNorms(ub.per_sample_bias, c);
      AddInPlace(ub.sq_norms, bias_sq, c);
    }
    if (!keep) {
      ub.per_sample_weight = Tensor();
      ub.per_sample_bias = Tensor();
    }
  }

  // Aggregate across units, then derive the clipping factors.
  Tensor norms = Tensor::Like({n}, shape_only, &c);
  for (const UnitSpec& u : units) {
    UnitBook& ub = book.unit(u);
    CounterScope scope(c, u.index);
    if (report.modes[u.index] == ClipMode::kGhost) {
      Grams grams{std::move(ub.gram_activation),
                  std::move(ub.gram_output_grad)};
      AccumulateGramInnerProducts(grams, norms, c);
      if (u.bias != nullptr) {
        AccumulateGramEntrySums(grams.output_grad, norms, c);
      }
    } else {
      AddInPlace(norms, ub.sq_norms, c);
      ub.sq_norms = Tensor();
    }
  }
  Tensor factors = FactorsFromSquaredNorms(norms, plan_.clip_fn, c);
  report.per_sample_norms = Detached(norms);
  report.clip_factors = Detached(factors);

  for (Tensor& g : grads) ZeroFill(g);
  if (TwoPass(kind)) {
    BackwardOutputGrads(
        graph_, book,
        shape_only ? std::span<const double>() : factors.data(), c);
    report.backward_passes = 2;
    for (const UnitSpec& u : units) {
      AccumulateUnitGrads(u, book.unit(u), nullptr, weight_grad(u),
                          bias_grad(u), c);
    }
    return;
  }
  for (const UnitSpec& u : units) {
    UnitBook& ub = book.unit(u);
    CounterScope scope(c, u.index);
    if (ub.per_sample_weight.empty()) {
      AccumulateUnitGrads(u, ub, &factors, weight_grad(u), bias_grad(u), c);
      continue;
    }
    if (u.kind == UnitKind::kNormAffine) {
      Tensor both = WeightedSum(ub.per_sample_weight, factors, c);
      Tensor& scale = *weight_grad(u);
      Tensor& shift = *bias_grad(u);
      if (!both.shape_only() && !scale.shape_only()) {
        const int64_t ch = scale.numel();
        for (int64_t j = 0; j < ch; ++j) {
          scale[j] += both[j];
          shift[j] += both[ch + j];
        }
      }
    } else {
      WeightedSumInto(ub.per_sample_weight, factors, *weight_grad(u), c);
      if (!ub.per_sample_bias.empty()) {
        WeightedSumInto(ub.per_sample_bias, factors, *bias_grad(u), c);
      }
    }
    ub.per_sample_weight = Tensor();
    ub.per_sample_bias = Tensor();
  }
}

std::vector<Tensor> PrivacyEngine::ApplyPrivateGradient(
    std::vector<Tensor> clipped, const StepOptions& options) {
  if (clipped.size() != graph_.parameters().size()) {
    throw DimensionError("expected one gradient slot per parameter");
  }
  const double sigma = plan_.sigma;
  const double radius = plan_.clip_fn.radius;
  for (size_t id = 0; id < clipped.size(); ++id) {
    Tensor& g = clipped[id];
    if (g.empty()) continue;
    if (g.shape() != graph_.parameters()[id]->value.shape()) {
      throw DimensionError("gradient " + ShapeToString(g.shape()) +
                           " does not match parameter " +
                           graph_.parameters()[id]->name);
    }
    if (!options.add_noise || sigma == 0.0) continue;
    if (options.injected_noise != nullptr) {
      const Tensor& z = options.injected_noise->at(id);
      if (z.shape() != g.shape()) {
        throw DimensionError("injected noise for " +
                             graph_.parameters()[id]->name +
                             " has shape " + ShapeToString(z.shape()));
      }
      counters_.AddMulAdds(g.numel());
      if (g.shape_only() || z.shape_only()) continue;
      const double stddev = sigma * radius;
      for (int64_t k = 0; k < g.numel(); ++k) g[k] += stddev * z[k];
    } else {
      AddNoise(g, sigma, radius, rng_, counters_);
    }
  }
  if (options.apply_update) UpdateWeights(clipped);
  return clipped;
}

void PrivacyEngine::UpdateWeights(const std::vector<Tensor>& grads) {
  const std::vector<Parameter*>& params = graph_.parameters();
  if (optimizer_.kind == OptimizerKind::kSgd) {
    for (size_t id = 0; id < grads.size(); ++id) {
      if (grads[id].empty()) continue;
      AxpyInPlace(params[id]->value, -optimizer_.learning_rate, grads[id],
                  counters_);
    }
  } else {
    if (first_moment_.empty()) {
      first_moment_.resize(params.size());
      second_moment_.resize(params.size());
    }
    ++adam_steps_;
    const double b1 = optimizer_.beta1, b2 = optimizer_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_steps_));
    for (size_t id = 0; id < grads.size(); ++id) {
      const Tensor& g = grads[id];
      if (g.empty()) continue;
      Tensor& w = params[id]->value;
      if (first_moment_[id].empty()) {
        first_moment_[id] = Tensor::Like(w.shape(), w.shape_only(), &counters_);
        second_moment_[id] =
            Tensor::Like(w.shape(), w.shape_only(), &counters_);
      }
      counters_.AddMulAdds(10 * g.numel());
      if (g.shape_only() || w.shape_only()) continue;
      Tensor& m = first_moment_[id];
      Tensor& v = second_moment_[id];
      for (int64_t k = 0; k < g.numel(); ++k) {
        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
        const double m_hat = m[k] / c1;
        const double v_hat = v[k] / c2;
        w[k] -= optimizer_.learning_rate * m_hat /
                (std::sqrt(v_hat) + optimizer_.epsilon);
      }
    }
  }
  ++weight_version_;
}

// ---------------------------------------------------------------------------
// GradientAccumulator

void GradientAccumulator::AddMicrobatch(ImplKind kind, const Tensor& batch,
                                        const Tensor& targets) {
  StepOptions options;
  options.add_noise = false;
  options.apply_update = false;
  Add(engine_.Step(kind, batch, targets, options));
}

void GradientAccumulator::Add(const StepReport& report) {
  if (count_ > 0 && report.weight_version != version_) {
    throw StateError("microbatch computed at weight version " +
                     std::to_string(report.weight_version) +
                     ", accumulator holds version " +
                     std::to_string(version_));
  }
  if (count_ > 0 && report.fingerprint != fingerprint_) {
    throw StateError("microbatch computed on a different graph");
  }
  if (report.clipped_grads.size() != engine_.graph().parameters().size()) {
    throw StateError("microbatch report carries no clipped gradients");
  }
  if (count_ == 0) {
    version_ = report.weight_version;
    fingerprint_ = report.fingerprint;
    sum_.clear();
    for (const Tensor& g : report.clipped_grads) sum_.push_back(Detached(g));
  } else {
    for (size_t id = 0; id < sum_.size(); ++id) {
      if (!sum_[id].empty()) {
        AddInPlace(sum_[id], report.clipped_grads[id], engine_.counters());
      }
    }
  }
  ++count_;
}

std::vector<Tensor> GradientAccumulator::Finish(const StepOptions& options) {
  if (count_ == 0) throw StateError("no microbatches accumulated");
  if (engine_.weight_version() != version_) {
    throw StateError("weights changed since the microbatches were computed");
  }
  std::vector<Tensor> out =
      engine_.ApplyPrivateGradient(std::move(sum_), options);
  sum_.clear();
  count_ = 0;
  return out;
}

}  // namespace bkdp

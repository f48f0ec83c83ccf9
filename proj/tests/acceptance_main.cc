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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "bkdp/arch_spec.h"
#include "bkdp/autograd.h"
#include "bkdp/clipping.h"
#include "bkdp/complexity.h"
#include "bkdp/layers.h"
#include "bkdp/privacy_engine.h"
#include "bkdp/tensor.h"

namespace bkdp {
namespace {

constexpr double kOracleTol = 1e-8;
constexpr double kOracleSeconds = 30.0;
constexpr int kGhostTrials = 200;
constexpr double kGhostTol = 1e-10;
constexpr double kTotalsTol = 0.05;
constexpr double kBkOverNonDpMax = 1.10;
constexpr double kGhostClipOverBkMin = 1.45;
constexpr double kGhostClipOverBkMax = 1.90;
constexpr double kOpacusOverNonDpMin = 1.20;
constexpr double kOpacusOverNonDpMax = 1.45;
constexpr double kRatioSeconds = 60.0;
constexpr double kOpacusOverBkPeakMin = 5.0;
constexpr double kBkGhostClipPeakTol = 0.10;
constexpr double kOverheadTol = 0.20;
constexpr double kNoiseStdTol = 0.05;
constexpr int64_t kNoiseCoordinates = 100000;
constexpr double kFiniteDifferenceStep = 1e-5;
constexpr double kFiniteDifferenceTol = 1e-6;
constexpr double kAccumulationTol = 1e-12;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string Fmt(const char* format, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, value);
  return buf;
}

double Seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

StepOptions GradientsOnly() {
  StepOptions options;
  options.add_noise = false;
  options.apply_update = false;
  return options;
}

double MaxGradDeviation(const std::vector<Tensor>& value,
                        const std::vector<Tensor>& reference) {
  double worst = 0.0;
  for (size_t id = 0; id < reference.size(); ++id) {
    if (reference[id].empty()) continue;
    worst = std::max(worst, MaxRelativeDeviation(value.at(id), reference[id]));
  }
  return worst;
}

Tensor Rows(const Tensor& t, int64_t begin, int64_t end) {
  Shape shape = t.shape();
  const int64_t per = t.numel() / shape[0];
  shape[0] = end - begin;
  return Tensor::FromVector(
      shape, std::vector<double>(t.data().begin() + begin * per,
                                 t.data().begin() + end * per));
}

Outcome OracleEquivalence() {
  const auto start = std::chrono::steady_clock::now();
  ClipPlan plan;
  plan.clip_fn.radius = 0.05;
  double worst = 0.0;
  int runs = 0;
  for (const char* name :
       {"mlp:3x64", "cnn-small", "embed-mlp", "lora-mlp", "adapter-mlp"}) {
    const ArchSpec arch = CatalogArch(name);
    for (int64_t B : {1, 2, 4, 8}) {
      auto graph = BuildGraph(arch, 3);
      SeededRng rng(4 + static_cast<uint64_t>(B));
      const Batch batch = RandomBatch(arch, *graph, B, rng);
      OpCounters counters;
      const OracleResult oracle =
          NaiveOracleGrad(*graph, batch.inputs, batch.targets, plan, counters);
      for (ImplKind kind : DpImplKinds()) {
        PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 5);
        const StepReport r =
            engine.Step(kind, batch.inputs, batch.targets, GradientsOnly());
        worst = std::max(worst, MaxRelativeDeviation(r.per_sample_norms,
                                                     oracle.per_sample_norms));
        worst = std::max(
            worst, MaxGradDeviation(r.clipped_grads, oracle.clipped_grads));
        ++runs;
      }
    }
  }
  const double seconds = Seconds(start);
  return {worst <= kOracleTol && seconds < kOracleSeconds && runs == 200,
          std::to_string(runs) + " runs, max rel dev " + Fmt("%.2e", worst) +
              " (tol 1e-8), " + Fmt("%.2f", seconds) + " s (limit 30 s)"};
}

Outcome GhostNormCorrectness() {
  SeededRng rng(13);
  double worst = 0.0;
  int conv = 0;
  for (int trial = 0; trial < kGhostTrials; ++trial) {
    OpCounters counters;
    Tensor a, ds;
    auto random = [&rng](const Shape& shape) {
      Tensor t = Tensor::Zeros(shape);
      for (double& v : t.data()) v = rng.Normal();
      return t;
    };
    if (trial % 4 == 3) {
      const int64_t B = 1 + trial % 4, C = 1 + trial % 2;
      Conv2dGeometry g;
      g.kernel_h = g.kernel_w = 2;
      g.stride = 1 + trial % 2;
      a = Im2Col(random({B, C, 3, 3}), g, counters);
      ds = random({B, a.dim(1), 1 + trial % 8});
      ++conv;
    } else {
      const int64_t B = 1 + trial % 4, T = 1 + (trial / 4) % 6;
      a = random({B, T, 1 + (trial * 7) % 8});
      ds = random({B, T, 1 + (trial * 5) % 8});
    }
    const Tensor ghost = GhostNormSq(a, ds, counters);
    const Tensor inst =
        RowSquaredNorms(InstantiatePerSampleGrads(a, ds, counters), counters);
    worst = std::max(worst, MaxRelativeDeviation(ghost, inst));
  }
  return {worst <= kGhostTol && conv > 0,
          std::to_string(kGhostTrials) + " instances (" + std::to_string(conv) +
              " via im2col), max rel dev " + Fmt("%.2e", worst) +
              " (tol 1e-10)"};
}

ComplexityReport AnalyzeAt(const std::string& name, int64_t side) {
  const ArchSpec arch = WithInputSize(CatalogArch(name), side);
  auto graph = BuildGraph(arch, 0, true);
  return Analyze(name, *graph, 1);
}

Outcome TableTotals() {
  struct Target {
    const char* arch;
    double mixed, inst, ghost;
  };
  const Target targets[] = {{"resnet18", 1.0e6, 11.5e6, 399e6},
                            {"resnet34", 2.3e6, 21.6e6, 444e6},
                            {"resnet50", 2.8e6, 22.7e6, 528e6}};
  bool pass = true;
  std::ostringstream detail;
  for (const Target& t : targets) {
    const ComplexityReport r = AnalyzeAt(t.arch, 224);
    auto close = [](double v, double target) {
      return std::abs(v - target) <= kTotalsTol * target;
    };
    pass &= close(r.mixed_total, t.mixed) && close(r.inst_total, t.inst) &&
            close(r.ghost_total, t.ghost);
    detail << t.arch << " " << r.mixed_total << "/" << r.inst_total << "/"
           << r.ghost_total << "; ";
  }
  const ComplexityReport r18 = AnalyzeAt("resnet18", 224);
  const AnalyzerRow& conv1 = r18.rows.front();
  const AnalyzerRow& linear = r18.rows.back();
  pass &= conv1.ghost_space == 314703872 && conv1.inst_space == 9408 &&
          linear.ghost_space == 2;
  detail << "conv1 " << conv1.ghost_space << "/" << conv1.inst_space
         << ", linear ghost " << linear.ghost_space;
  return {pass, detail.str()};
}

Outcome DecisionRule() {
  const ComplexityReport small = AnalyzeAt("resnet18", 224);
  bool pattern = true;
  for (const AnalyzerRow& row : small.rows) {
    const std::string& n = row.shape.name;
    const bool early = n == "conv1" || n.rfind("conv2_x", 0) == 0 ||
                       n.rfind("conv3_x", 0) == 0;
    pattern &= row.decision ==
               (early ? ClipMode::kInstantiate : ClipMode::kGhost);
  }
  const int at224 = LastInstantiateRow(small.rows);
  const int at512 = LastInstantiateRow(AnalyzeAt("resnet18", 512).rows);
  return {pattern && at512 > at224,
          "224: conv1..conv3_x instantiate, last instantiate row " +
              std::to_string(at224) + "; 512: last instantiate row " +
              std::to_string(at512)};
}

int64_t WideMlpMulAdds(ImplKind kind) {
  const ArchSpec arch = CatalogArch("mlp:10x1000");
  auto graph = BuildGraph(arch, 0, true);
  SeededRng rng(1);
  const Batch batch = RandomBatch(arch, *graph, 16, rng, true);
  PrivacyEngine engine(*graph, ClipPlan{}, OptimizerConfig{}, 1);
  return engine.Step(kind, batch.inputs, batch.targets, GradientsOnly())
      .mul_adds;
}

Outcome CounterRatios() {
  const auto start = std::chrono::steady_clock::now();
  const double non_dp = WideMlpMulAdds(ImplKind::kNonDp);
  const double bk = WideMlpMulAdds(ImplKind::kBk);
  const double ghost_clip = WideMlpMulAdds(ImplKind::kGhostClip);
  const double opacus = WideMlpMulAdds(ImplKind::kOpacus);
  const double seconds = Seconds(start);
  const double r1 = bk / non_dp, r2 = ghost_clip / bk, r3 = opacus / non_dp;
  const bool pass = r1 <= kBkOverNonDpMax && r2 >= kGhostClipOverBkMin &&
                    r2 <= kGhostClipOverBkMax && r3 >= kOpacusOverNonDpMin &&
                    r3 <= kOpacusOverNonDpMax && seconds < kRatioSeconds;
  return {pass, "bk/non_dp " + Fmt("%.4f", r1) + " (<= 1.10), ghost_clip/bk " +
                    Fmt("%.4f", r2) + " ([1.45, 1.90]), opacus/non_dp " +
                    Fmt("%.4f", r3) + " ([1.20, 1.45]), " +
                    Fmt("%.2f", seconds) + " s (limit 60 s)"};
}

int64_t WideMlpPeak(ImplKind kind) {
  const ArchSpec arch = CatalogArch("mlp:10x1000");
  auto graph = BuildGraph(arch, 0, true);
  SeededRng rng(1);
  const Batch batch = RandomBatch(arch, *graph, 128, rng, true);
  PrivacyEngine engine(*graph, ClipPlan{}, OptimizerConfig{}, 1);
  StepOptions options = GradientsOnly();
  options.keep_grads = false;
  return engine.Step(kind, batch.inputs, batch.targets, options)
      .peak_live_bytes;
}

Outcome MemoryOrdering() {
  const double non_dp = WideMlpPeak(ImplKind::kNonDp);
  const double bk = WideMlpPeak(ImplKind::kBk);
  const double ghost_clip = WideMlpPeak(ImplKind::kGhostClip);
  const double opacus = WideMlpPeak(ImplKind::kOpacus);
  auto graph = BuildGraph(CatalogArch("mlp:10x1000"), 0, true);
  const ComplexityReport report = Analyze("mlp:10x1000", *graph, 128);
  const double predicted = 8.0 * 128 * report.mixed_total;
  const double overhead = bk - non_dp;
  const bool pass = opacus >= kOpacusOverBkPeakMin * bk &&
                    std::abs(bk - ghost_clip) <= kBkGhostClipPeakTol * bk &&
                    std::abs(overhead - predicted) <= kOverheadTol * predicted;
  return {pass, "opacus/bk " + Fmt("%.2f", opacus / bk) +
                    " (>= 5), |bk-ghost_clip|/bk " +
                    Fmt("%.4f", std::abs(bk - ghost_clip) / bk) +
                    " (<= 0.10), bk-non_dp " + Fmt("%.0f", overhead) +
                    " B vs min-sum " + Fmt("%.0f", predicted) +
                    " B (within 20%)"};
}

Outcome BackwardPassCounts() {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 12);
  SeededRng rng(13);
  const int64_t B = 5;
  const Batch batch = RandomBatch(arch, *graph, B, rng);
  const std::map<ImplKind, int> expected = {
      {ImplKind::kNonDp, 1},        {ImplKind::kNaive, static_cast<int>(B)},
      {ImplKind::kOpacus, 1},       {ImplKind::kOpacusImproved, 1},
      {ImplKind::kFastGradClip, 2}, {ImplKind::kFastGradClipImproved, 1},
      {ImplKind::kGhostClip, 2},    {ImplKind::kMixGhostClip, 2},
      {ImplKind::kBk, 1},           {ImplKind::kBkMixGhostClip, 1},
      {ImplKind::kBkMixOpt, 1},
  };
  bool pass = expected.size() == AllImplKinds().size();
  std::ostringstream detail;
  for (ImplKind kind : AllImplKinds()) {
    PrivacyEngine engine(*graph, ClipPlan{}, OptimizerConfig{}, 1);
    const int passes =
        engine.Step(kind, batch.inputs, batch.targets, GradientsOnly())
            .backward_passes;
    pass &= passes == expected.at(kind);
    detail << ImplKindName(kind) << "=" << passes << " ";
  }
  return {pass, detail.str() + "(B=5)"};
}

Outcome NoiseCalibration() {
  SeededRng rng(7);
  OpCounters counters;
  Tensor g = Tensor::Zeros({kNoiseCoordinates});
  AddNoise(g, 2.0, 0.5, rng, counters);
  double mean = 0.0;
  for (double v : g.data()) mean += v;
  mean /= static_cast<double>(g.numel());
  double var = 0.0;
  for (double v : g.data()) var += (v - mean) * (v - mean);
  const double std = std::sqrt(var / static_cast<double>(g.numel() - 1));

  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 8);
  SeededRng data(9);
  const Batch batch = RandomBatch(arch, *graph, 4, data);
  ClipPlan plan;
  plan.sigma = 0.0;
  PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 10);
  StepOptions options;
  options.apply_update = false;
  const StepReport r =
      engine.Step(ImplKind::kBk, batch.inputs, batch.targets, options);
  bool exact = !r.private_grads.empty();
  for (size_t id = 0; id < r.private_grads.size(); ++id) {
    exact &= r.private_grads[id].ToVector() == r.clipped_grads[id].ToVector();
  }
  return {std::abs(std - 1.0) <= kNoiseStdTol && exact,
          "std " + Fmt("%.4f", std) + " over 1e5 coordinates (1.0 +- 5%), " +
              "sigma=0 private == clipped: " + (exact ? "yes" : "no")};
}

Outcome GradientCorrectness() {
  SeededRng rng(11);
  auto graph = std::make_unique<Graph>(Shape{6}, LossKind::kSquaredError);
  LayerInit init;
  init.rng = &rng;
  graph->Emplace<LinearLayer>("fc1", 6, 8, true, init);
  graph->Emplace<ActivationLayer>("tanh1", Activation::kTanh);
  graph->Emplace<LinearLayer>("fc2", 8, 8, true, init);
  graph->Emplace<ActivationLayer>("tanh2", Activation::kTanh);
  graph->Emplace<LinearLayer>("fc3", 8, 3, true, init);
  Tensor x = Tensor::Zeros({4, 6});
  Tensor y = Tensor::Zeros({4, 3});
  for (double& v : x.data()) v = rng.Normal();
  for (double& v : y.data()) v = rng.Normal();

  GradBook book;
  OpCounters counters;
  Forward(*graph, x, y, book, counters);
  BackwardOutputGrads(*graph, book, {}, counters);
  const std::vector<Tensor> grads = AllParamGrads(*graph, book, counters);
  auto loss = [&]() {
    GradBook b;
    OpCounters c;
    const Tensor losses = Forward(*graph, x, y, b, c);
    double total = 0.0;
    for (double v : losses.data()) total += v;
    return total;
  };
  const double h = kFiniteDifferenceStep;
  double worst = 0.0;
  int64_t checked = 0;
  for (Parameter* p : graph->parameters()) {
    for (int64_t j = 0; j < p->value.numel(); ++j) {
      const double saved = p->value[j];
      p->value[j] = saved + h;
      const double up = loss();
      p->value[j] = saved - h;
      const double down = loss();
      p->value[j] = saved;
      worst = std::max(worst,
                       std::abs(grads.at(p->id)[j] - (up - down) / (2 * h)));
      ++checked;
    }
  }
  return {worst <= kFiniteDifferenceTol,
          std::to_string(checked) + " coordinates, max abs dev " +
              Fmt("%.2e", worst) + " (tol 1e-6)"};
}

Outcome AccumulationEquivalence() {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 31);
  SeededRng rng(32);
  const Batch batch = RandomBatch(arch, *graph, 4, rng);
  ClipPlan plan;
  plan.clip_fn.radius = 0.05;
  plan.sigma = 0.0;
  PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 1);
  const StepReport whole =
      engine.Step(ImplKind::kBk, batch.inputs, batch.targets, GradientsOnly());
  GradientAccumulator acc(engine);
  acc.AddMicrobatch(ImplKind::kBk, Rows(batch.inputs, 0, 2),
                    Rows(batch.targets, 0, 2));
  acc.AddMicrobatch(ImplKind::kBk, Rows(batch.inputs, 2, 4),
                    Rows(batch.targets, 2, 4));
  StepOptions options;
  options.apply_update = false;
  const std::vector<Tensor> accumulated = acc.Finish(options);
  const double dev = MaxGradDeviation(accumulated, whole.clipped_grads);
  return {dev <= kAccumulationTol,
          "2 x B=2 vs B=4, max rel dev " + Fmt("%.2e", dev) + " (tol 1e-12)"};
}

}  // namespace
}  // namespace bkdp

int main() {
  using bkdp::Outcome;
  const std::vector<std::pair<std::string, std::function<Outcome()>>>
      criteria = {
          {"oracle equivalence", bkdp::OracleEquivalence},
          {"ghost norm correctness", bkdp::GhostNormCorrectness},
          {"ResNet table totals and spot rows", bkdp::TableTotals},
          {"ResNet18 decision rule", bkdp::DecisionRule},
          {"counter ratios", bkdp::CounterRatios},
          {"memory ordering", bkdp::MemoryOrdering},
          {"backward pass counts", bkdp::BackwardPassCounts},
          {"noise calibration", bkdp::NoiseCalibration},
          {"gradient correctness", bkdp::GradientCorrectness},
          {"accumulation equivalence", bkdp::AccumulationEquivalence},
      };
  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    Outcome outcome;
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    failed += outcome.pass ? 0 : 1;
    std::printf("%s %zu %s: %s\n", outcome.pass ? "PASS" : "FAIL", i + 1,
                criteria[i].first.c_str(), outcome.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n",
              static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}

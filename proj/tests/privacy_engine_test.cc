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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "bkdp/arch_spec.h"
#include "bkdp/status.h"
#include "test_util.h"

namespace bkdp {
namespace {

using ::bkdp::testing::RandomTensor;

ClipPlan SmallRadiusPlan(double radius = 0.05) {
  ClipPlan plan;
  plan.clip_fn.radius = radius;
  return plan;
}

StepOptions GradientsOnly() {
  StepOptions options;
  options.add_noise = false;
  options.apply_update = false;
  return options;
}

// Rows [begin, end) of a batch tensor.
Tensor Rows(const Tensor& t, int64_t begin, int64_t end) {
  Shape shape = t.shape();
  const int64_t per = t.numel() / shape[0];
  shape[0] = end - begin;
  return Tensor::FromVector(
      shape, std::vector<double>(t.data().begin() + begin * per,
                                 t.data().begin() + end * per));
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

struct EquivalenceCase {
  std::string arch;
  int64_t batch;
};

void PrintTo(const EquivalenceCase& c, std::ostream* os) {
  *os << c.arch << " B=" << c.batch;
}

class EquivalenceTest : public ::testing::TestWithParam<EquivalenceCase> {};

TEST_P(EquivalenceTest, EveryKindMatchesTheOracle) {
  const ArchSpec arch = CatalogArch(GetParam().arch);
  auto graph = BuildGraph(arch, 3);
  SeededRng rng(4);
  const Batch batch = RandomBatch(arch, *graph, GetParam().batch, rng);
  const ClipPlan plan = SmallRadiusPlan();
  OpCounters oracle_counters;
  const OracleResult oracle = NaiveOracleGrad(*graph, batch.inputs,
                                              batch.targets, plan,
                                              oracle_counters);
  bool clipped = false;
  for (double c : oracle.clip_factors.data()) clipped |= c < 1.0;
  EXPECT_TRUE(clipped) << "radius too large to exercise clipping";

  for (ImplKind kind : DpImplKinds()) {
    PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 5);
    const StepReport report =
        engine.Step(kind, batch.inputs, batch.targets, GradientsOnly());
    EXPECT_LE(MaxRelativeDeviation(report.per_sample_norms,
                                   oracle.per_sample_norms),
              1e-8)
        << ImplKindName(kind);
    EXPECT_LE(MaxGradDeviation(report.clipped_grads, oracle.clipped_grads),
              1e-8)
        << ImplKindName(kind);
  }
}

std::vector<EquivalenceCase> EquivalenceCases() {
  std::vector<EquivalenceCase> cases;
  for (const char* arch :
       {"mlp:3x64", "cnn-small", "embed-mlp", "lora-mlp", "adapter-mlp"}) {
    for (int64_t b : {1, 2, 4, 8}) cases.push_back({arch, b});
  }
  for (const char* arch : {"ln-mlp", "gn-cnn", "vit-tiny-like"}) {
    cases.push_back({arch, 3});
  }
  return cases;
}

INSTANTIATE_TEST_SUITE_P(
    Catalog, EquivalenceTest, ::testing::ValuesIn(EquivalenceCases()),
    [](const ::testing::TestParamInfo<EquivalenceCase>& info) {
      std::string name = info.param.arch + "_B" +
                         std::to_string(info.param.batch);
      for (char& c : name) {
        if (c == ':' || c == '-') c = '_';
      }
      return name;
    });

TEST(EquivalenceTest, ForcedModesAgree) {
  const ArchSpec arch = CatalogArch("cnn-small");
  auto graph = BuildGraph(arch, 6);
  SeededRng rng(7);
  const Batch batch = RandomBatch(arch, *graph, 3, rng);
  for (ClipMode forced : {ClipMode::kGhost, ClipMode::kInstantiate}) {
    ClipPlan plan = SmallRadiusPlan();
    plan.modes.assign(graph->units().size(), forced);
    OpCounters counters;
    const OracleResult oracle =
        NaiveOracleGrad(*graph, batch.inputs, batch.targets, plan, counters);
    for (ImplKind kind : {ImplKind::kMixGhostClip, ImplKind::kBkMixGhostClip,
                          ImplKind::kBkMixOpt}) {
      PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 1);
      const StepReport report =
          engine.Step(kind, batch.inputs, batch.targets, GradientsOnly());
      for (ClipMode m : report.modes) EXPECT_EQ(m, forced);
      EXPECT_LE(MaxGradDeviation(report.clipped_grads, oracle.clipped_grads),
                1e-8)
          << ImplKindName(kind) << " " << ClipModeName(forced);
    }
  }
}

TEST(EquivalenceTest, InjectedNoiseKeepsKindsIdentical) {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 8);
  SeededRng rng(9);
  const Batch batch = RandomBatch(arch, *graph, 4, rng);
  ClipPlan plan = SmallRadiusPlan(0.3);
  plan.sigma = 1.5;
  std::vector<Tensor> noise;
  for (const Parameter* p : graph->parameters()) {
    noise.push_back(RandomTensor(p->value.shape(), rng));
  }
  OpCounters counters;
  const OracleResult oracle =
      NaiveOracleGrad(*graph, batch.inputs, batch.targets, plan, counters);
  std::vector<Tensor> expected;
  for (size_t id = 0; id < noise.size(); ++id) {
    Tensor e = Tensor::FromVector(oracle.clipped_grads[id].shape(),
                                  oracle.clipped_grads[id].ToVector());
    for (int64_t j = 0; j < e.numel(); ++j) {
      e[j] += plan.sigma * plan.clip_fn.radius * noise[id][j];
    }
    expected.push_back(std::move(e));
  }
  for (ImplKind kind : DpImplKinds()) {
    PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 1);
    StepOptions options;
    options.apply_update = false;
    options.injected_noise = &noise;
    const StepReport report =
        engine.Step(kind, batch.inputs, batch.targets, options);
    EXPECT_LE(MaxGradDeviation(report.private_grads, expected), 1e-8)
        << ImplKindName(kind);
  }
}

TEST(StepTest, SingleUnclippedSampleIsPlainSgd) {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  SeededRng rng(10);
  auto reference = BuildGraph(arch, 11);
  const Batch batch = RandomBatch(arch, *reference, 1, rng);
  ClipPlan plan;
  plan.clip_fn.radius = 1e9;
  PrivacyEngine plain(*reference, plan, OptimizerConfig{}, 1);
  plain.Step(ImplKind::kNonDp, batch.inputs, batch.targets);
  for (ImplKind kind : {ImplKind::kBk, ImplKind::kGhostClip,
                        ImplKind::kOpacus, ImplKind::kNaive}) {
    auto graph = BuildGraph(arch, 11);
    PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 1);
    const StepReport report =
        engine.Step(kind, batch.inputs, batch.targets);
    EXPECT_EQ(report.clip_factors.ToVector(), std::vector<double>{1.0});
    for (size_t id = 0; id < graph->parameters().size(); ++id) {
      EXPECT_EQ(graph->parameters()[id]->value.ToVector(),
                reference->parameters()[id]->value.ToVector())
          << ImplKindName(kind) << " " << graph->parameters()[id]->name;
    }
  }
}

TEST(StepTest, BackwardPassCounts) {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 12);
  SeededRng rng(13);
  const int64_t B = 5;
  const Batch batch = RandomBatch(arch, *graph, B, rng);
  const std::map<ImplKind, int> expected = {
      {ImplKind::kNonDp, 1},          {ImplKind::kNaive, 5},
      {ImplKind::kOpacus, 1},         {ImplKind::kOpacusImproved, 1},
      {ImplKind::kFastGradClip, 2},   {ImplKind::kFastGradClipImproved, 1},
      {ImplKind::kGhostClip, 2},      {ImplKind::kMixGhostClip, 2},
      {ImplKind::kBk, 1},             {ImplKind::kBkMixGhostClip, 1},
      {ImplKind::kBkMixOpt, 1},
  };
  ASSERT_EQ(expected.size(), AllImplKinds().size());
  for (ImplKind kind : AllImplKinds()) {
    PrivacyEngine engine(*graph, SmallRadiusPlan(), OptimizerConfig{}, 1);
    const StepReport report =
        engine.Step(kind, batch.inputs, batch.targets, GradientsOnly());
    EXPECT_EQ(report.backward_passes, expected.at(kind)) << ImplKindName(kind);
    EXPECT_EQ(ExpectedBackwardPasses(kind, B), expected.at(kind));
  }
}

TEST(StepTest, UnknownKindListsChoices) {
  try {
    ParseImplKind("bk_turbo");
    FAIL() << "expected a configuration error";
  } catch (const ConfigurationError& e) {
    EXPECT_NE(std::string(e.what()).find("ghost_clip"), std::string::npos);
  }
  for (ImplKind kind : AllImplKinds()) {
    EXPECT_EQ(ParseImplKind(ImplKindName(kind)), kind);
  }
}

TEST(StepTest, InconsistentPlanFailsBeforeCompute) {
  const ArchSpec arch = CatalogArch("ln-mlp");
  auto graph = BuildGraph(arch, 14);
  SeededRng rng(15);
  const Batch batch = RandomBatch(arch, *graph, 2, rng);
  ClipPlan plan;
  plan.modes.assign(graph->units().size(), ClipMode::kGhost);
  // The plan is checked when the engine is built, before any step runs.
  EXPECT_THROW(PrivacyEngine(*graph, plan, OptimizerConfig{}, 1),
               ConfigurationError);
  plan.modes.clear();
  PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 1);
  const int64_t before = engine.counters().mul_adds();
  EXPECT_NO_THROW(engine.Step(ImplKind::kBk, batch.inputs, batch.targets));
  EXPECT_GT(engine.counters().mul_adds(), before);
}

TEST(NoiseTest, ZeroSigmaLeavesGradientUnchanged) {
  SeededRng rng(18);
  Tensor g = RandomTensor({100}, rng);
  const std::vector<double> before = g.ToVector();
  OpCounters counters;
  AddNoise(g, 0.0, 1.0, rng, counters);
  EXPECT_EQ(g.ToVector(), before);
}

double EmpiricalStd(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / v.size());
}

TEST(NoiseTest, StandardDeviationIsSigmaTimesRadius) {
  for (auto [sigma, radius] : {std::pair{1.0, 1.0}, std::pair{2.0, 0.5}}) {
    SeededRng rng(19);
    Tensor g = Tensor::Zeros({100000});
    OpCounters counters;
    AddNoise(g, sigma, radius, rng, counters);
    EXPECT_NEAR(EmpiricalStd(g.ToVector()), sigma * radius,
                0.05 * sigma * radius);
    EXPECT_EQ(counters.mul_adds(), 100000);
  }
}

TEST(NoiseTest, EngineAddsCalibratedNoiseOnce) {
  const ArchSpec arch = CatalogArch("mlp:3x200");
  auto graph = BuildGraph(arch, 20);
  SeededRng rng(21);
  const Batch batch = RandomBatch(arch, *graph, 2, rng);
  ClipPlan plan;
  plan.clip_fn.radius = 0.5;
  plan.sigma = 2.0;
  PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 22);
  StepOptions options;
  options.apply_update = false;
  const StepReport report =
      engine.Step(ImplKind::kBk, batch.inputs, batch.targets, options);
  std::vector<double> diff;
  for (size_t id = 0; id < report.private_grads.size(); ++id) {
    for (int64_t j = 0; j < report.private_grads[id].numel(); ++j) {
      diff.push_back(report.private_grads[id][j] -
                     report.clipped_grads[id][j]);
    }
  }
  ASSERT_GE(diff.size(), 100000u);
  EXPECT_NEAR(EmpiricalStd(diff), 1.0, 0.05);
}

TEST(NoiseTest, NonPrivateStepHasNoNoise) {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 23);
  SeededRng rng(24);
  const Batch batch = RandomBatch(arch, *graph, 2, rng);
  ClipPlan plan;
  plan.sigma = 3.0;
  PrivacyEngine engine(*graph, plan, OptimizerConfig{}, 1);
  StepOptions options;
  options.apply_update = false;
  const StepReport report =
      engine.Step(ImplKind::kNonDp, batch.inputs, batch.targets, options);
  for (size_t id = 0; id < report.private_grads.size(); ++id) {
    EXPECT_EQ(report.private_grads[id].ToVector(),
              report.clipped_grads[id].ToVector());
  }
}

TEST(OracleTest, SingleSampleNormIsFullGradientNorm) {
  const ArchSpec arch = CatalogArch("cnn-small");
  auto graph = BuildGraph(arch, 25);
  SeededRng rng(26);
  const Batch batch = RandomBatch(arch, *graph, 1, rng);
  GradBook book;
  OpCounters counters;
  Forward(*graph, batch.inputs, batch.targets, book, counters);
  BackwardOutputGrads(*graph, book, {}, counters);
  double sq = 0.0;
  for (const Tensor& g : AllParamGrads(*graph, book, counters)) {
    for (double v : g.data()) sq += v * v;
  }
  const OracleResult oracle = NaiveOracleGrad(
      *graph, batch.inputs, batch.targets, ClipPlan{}, counters);
  EXPECT_NEAR(oracle.per_sample_norms[0], std::sqrt(sq),
              1e-12 * std::sqrt(sq));
}

TEST(OracleTest, DuplicatedSampleHasEqualNorms) {
  const ArchSpec arch = CatalogArch("embed-mlp");
  auto graph = BuildGraph(arch, 27);
  SeededRng rng(28);
  const Batch one = RandomBatch(arch, *graph, 1, rng);
  std::vector<double> x = one.inputs.ToVector();
  x.insert(x.end(), x.begin(), x.end());
  std::vector<double> y = one.targets.ToVector();
  y.insert(y.end(), y.begin(), y.end());
  Shape xs = one.inputs.shape(), ys = one.targets.shape();
  xs[0] = ys[0] = 2;
  OpCounters counters;
  const OracleResult oracle =
      NaiveOracleGrad(*graph, Tensor::FromVector(xs, x),
                      Tensor::FromVector(ys, y), ClipPlan{}, counters);
  EXPECT_EQ(oracle.per_sample_norms[0], oracle.per_sample_norms[1]);
}

TEST(OracleTest, GhostAggregationMatchesOracleNorms) {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 29);
  SeededRng rng(30);
  const Batch batch = RandomBatch(arch, *graph, 4, rng);
  OpCounters counters;
  const OracleResult oracle = NaiveOracleGrad(
      *graph, batch.inputs, batch.targets, ClipPlan{}, counters);
  PrivacyEngine engine(*graph, ClipPlan{}, OptimizerConfig{}, 1);
  const StepReport report =
      engine.Step(ImplKind::kBk, batch.inputs, batch.targets, GradientsOnly());
  EXPECT_LE(MaxRelativeDeviation(report.per_sample_norms,
                                 oracle.per_sample_norms),
            1e-10);
}

class AccumulationTest : public ::testing::Test {
 protected:
  void SetUp() override {
    arch_ = CatalogArch("mlp:3x64");
    graph_ = BuildGraph(arch_, 31);
    SeededRng rng(32);
    batch_ = RandomBatch(arch_, *graph_, 4, rng);
  }

  ArchSpec arch_;
  std::unique_ptr<Graph> graph_;
  Batch batch_;
};

TEST_F(AccumulationTest, TwoMicrobatchesEqualOneBatch) {
  PrivacyEngine engine(*graph_, SmallRadiusPlan(), OptimizerConfig{}, 1);
  const StepReport whole = engine.Step(ImplKind::kBk, batch_.inputs,
                                       batch_.targets, GradientsOnly());
  GradientAccumulator acc(engine);
  acc.AddMicrobatch(ImplKind::kBk, Rows(batch_.inputs, 0, 2),
                    Rows(batch_.targets, 0, 2));
  acc.AddMicrobatch(ImplKind::kBk, Rows(batch_.inputs, 2, 4),
                    Rows(batch_.targets, 2, 4));
  EXPECT_EQ(acc.microbatches(), 2);
  EXPECT_LE(MaxGradDeviation(acc.clipped_sum(), whole.clipped_grads), 1e-12);
}

TEST_F(AccumulationTest, ClipFactorsArePerSample) {
  PrivacyEngine engine(*graph_, SmallRadiusPlan(), OptimizerConfig{}, 1);
  const StepReport whole = engine.Step(ImplKind::kGhostClip, batch_.inputs,
                                       batch_.targets, GradientsOnly());
  const StepReport first =
      engine.Step(ImplKind::kGhostClip, Rows(batch_.inputs, 0, 2),
                  Rows(batch_.targets, 0, 2), GradientsOnly());
  const StepReport second =
      engine.Step(ImplKind::kGhostClip, Rows(batch_.inputs, 2, 4),
                  Rows(batch_.targets, 2, 4), GradientsOnly());
  for (int64_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(first.clip_factors[i], whole.clip_factors[i], 1e-14);
    EXPECT_NEAR(second.clip_factors[i], whole.clip_factors[2 + i], 1e-14);
  }
}

TEST_F(AccumulationTest, OneMicrobatchEqualsStep) {
  auto twin = BuildGraph(arch_, 31);
  ClipPlan plan = SmallRadiusPlan();
  plan.sigma = 0.7;
  PrivacyEngine direct(*twin, plan, OptimizerConfig{}, 9);
  direct.Step(ImplKind::kBk, batch_.inputs, batch_.targets);

  PrivacyEngine engine(*graph_, plan, OptimizerConfig{}, 9);
  GradientAccumulator acc(engine);
  acc.AddMicrobatch(ImplKind::kBk, batch_.inputs, batch_.targets);
  acc.Finish();
  for (size_t id = 0; id < graph_->parameters().size(); ++id) {
    EXPECT_EQ(graph_->parameters()[id]->value.ToVector(),
              twin->parameters()[id]->value.ToVector());
  }
}

TEST_F(AccumulationTest, StaleWeightsAreRejected) {
  PrivacyEngine engine(*graph_, SmallRadiusPlan(), OptimizerConfig{}, 1);
  const StepReport before = engine.Step(ImplKind::kBk, batch_.inputs,
                                        batch_.targets, GradientsOnly());
  engine.Step(ImplKind::kBk, batch_.inputs, batch_.targets);
  const StepReport after = engine.Step(ImplKind::kBk, batch_.inputs,
                                       batch_.targets, GradientsOnly());
  GradientAccumulator acc(engine);
  acc.Add(before);
  EXPECT_THROW(acc.Add(after), StateError);
  EXPECT_THROW(acc.Finish(), StateError);
}

TEST_F(AccumulationTest, EmptyFinishIsRejected) {
  PrivacyEngine engine(*graph_, SmallRadiusPlan(), OptimizerConfig{}, 1);
  GradientAccumulator acc(engine);
  EXPECT_THROW(acc.Finish(), StateError);
}

TEST(OptimizerTest, AdamFirstStepMovesBySignedLearningRate) {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 33);
  SeededRng rng(34);
  const Batch batch = RandomBatch(arch, *graph, 3, rng);
  std::vector<std::vector<double>> start;
  for (const Parameter* p : graph->parameters()) {
    start.push_back(p->value.ToVector());
  }
  OptimizerConfig adam;
  adam.kind = OptimizerKind::kAdam;
  adam.learning_rate = 0.01;
  PrivacyEngine engine(*graph, SmallRadiusPlan(), adam, 1);
  StepOptions options;
  options.add_noise = false;
  const StepReport report =
      engine.Step(ImplKind::kBk, batch.inputs, batch.targets, options);
  for (size_t id = 0; id < start.size(); ++id) {
    const Tensor& g = report.private_grads[id];
    const Tensor& w = graph->parameters()[id]->value;
    for (int64_t j = 0; j < w.numel(); ++j) {
      // Bias-corrected moments equal g and g^2 after one step.
      const double step =
          adam.learning_rate * g[j] / (std::abs(g[j]) + adam.epsilon);
      EXPECT_NEAR(w[j], start[id][j] - step, 1e-12);
    }
  }
  EXPECT_EQ(engine.weight_version(), 1u);
}

TEST(OptimizerTest, SgdUsesPrivateGradient) {
  const ArchSpec arch = CatalogArch("mlp:3x64");
  auto graph = BuildGraph(arch, 35);
  SeededRng rng(36);
  const Batch batch = RandomBatch(arch, *graph, 3, rng);
  std::vector<std::vector<double>> start;
  for (const Parameter* p : graph->parameters()) {
    start.push_back(p->value.ToVector());
  }
  ClipPlan plan = SmallRadiusPlan();
  plan.sigma = 1.0;
  OptimizerConfig sgd;
  sgd.learning_rate = 0.2;
  PrivacyEngine engine(*graph, plan, sgd, 1);
  const StepReport report = engine.Step(ImplKind::kBk, batch.inputs,
                                        batch.targets);
  for (size_t id = 0; id < start.size(); ++id) {
    for (int64_t j = 0; j < graph->parameters()[id]->value.numel(); ++j) {
      EXPECT_NEAR(graph->parameters()[id]->value[j],
                  start[id][j] - 0.2 * report.private_grads[id][j], 1e-15);
    }
  }
}

// Counters on a deep wide MLP with one token per sample.
class CounterOrderingTest : public ::testing::Test {
 protected:
  static int64_t MulAdds(ImplKind kind) {
    const ArchSpec arch = CatalogArch("mlp:10x1000");
    auto graph = BuildGraph(arch, 0, true);
    SeededRng rng(1);
    const Batch batch = RandomBatch(arch, *graph, 16, rng, true);
    PrivacyEngine engine(*graph, ClipPlan{}, OptimizerConfig{}, 1);
    return engine.Step(kind, batch.inputs, batch.targets, GradientsOnly())
        .mul_adds;
  }

  static int64_t PeakBytes(ImplKind kind) {
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
};

TEST_F(CounterOrderingTest, BkCostsAboutAsMuchAsNonPrivate) {
  const double non_dp = MulAdds(ImplKind::kNonDp);
  const double bk = MulAdds(ImplKind::kBk);
  EXPECT_GT(bk, non_dp);
  EXPECT_LE(bk / non_dp, 1.10);
}

TEST_F(CounterOrderingTest, GhostClipOverBkNearTenSixths) {
  const double ratio = static_cast<double>(MulAdds(ImplKind::kGhostClip)) /
                       MulAdds(ImplKind::kBk);
  EXPECT_NEAR(ratio, 10.0 / 6.0, 0.15 * 10.0 / 6.0);
}

TEST_F(CounterOrderingTest, InstantiatingKindsSitBetweenBkAndGhostClip) {
  const int64_t bk = MulAdds(ImplKind::kBk);
  const int64_t ghost_clip = MulAdds(ImplKind::kGhostClip);
  for (ImplKind kind : {ImplKind::kOpacus, ImplKind::kFastGradClip}) {
    const int64_t m = MulAdds(kind);
    EXPECT_GT(m, bk) << ImplKindName(kind);
    EXPECT_LT(m, ghost_clip) << ImplKindName(kind);
  }
}

TEST_F(CounterOrderingTest, MemoryOrdering) {
  const double non_dp = PeakBytes(ImplKind::kNonDp);
  const double bk = PeakBytes(ImplKind::kBk);
  const double ghost_clip = PeakBytes(ImplKind::kGhostClip);
  const double fgc = PeakBytes(ImplKind::kFastGradClip);
  const double opacus = PeakBytes(ImplKind::kOpacus);
  EXPECT_LE(std::abs(bk - non_dp), 0.1 * non_dp);
  EXPECT_LE(std::abs(bk - ghost_clip), 0.1 * bk);
  EXPECT_LT(ghost_clip, fgc);
  EXPECT_LT(fgc, opacus);
  EXPECT_GE(opacus, 5.0 * bk);
}

}  // namespace
}  // namespace bkdp

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

// Private optimization steps for every implementation of per-sample clipping.
//
// All DP kinds compute the same private gradient
//   G^ = sum_i C_i g_i + sigma * R * N(0, I)
// and differ only in how they obtain per-sample norms and the clipped sum,
// which shows up in the counters and the number of backward passes:
//
//   non_dp                   forward, output grads, parameter grads
//   naive                    B single-sample forward/backward passes
//   opacus                   instantiate and keep every per-sample gradient
//                            next to the regular gradient, weighted sum
//   opacus_improved          same without the regular gradient
//   fast_grad_clip           instantiate for norms, second backward pass
//                            with per-sample loss weights C_i
//   fast_grad_clip_improved  instantiate for norms, a^T diag(C) ds
//   ghost_clip               ghost norms, second backward pass
//   mix_ghost_clip           per-unit ghost/instantiate, second backward pass
//   bk                       ghost norms, a^T diag(C) ds from the book
//   bk_mix_ghost_clip        per-unit ghost/instantiate, a^T diag(C) ds
//   bk_mix_opt               ghost units use a^T diag(C) ds, instantiated
//                            units keep per-sample gradients for the
//                            weighted sum
//
// Kinds with a single output-gradient pass that discard regular gradients
// still form the gradient of the origin parameters, which is what keeps
// every layer on the backward path.

#ifndef BKDP_PRIVACY_ENGINE_H_
#define BKDP_PRIVACY_ENGINE_H_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bkdp/autograd.h"
#include "bkdp/clipping.h"
#include "bkdp/tensor.h"

namespace bkdp {

enum class ImplKind {
  kNonDp,
  kNaive,
  kOpacus,
  kOpacusImproved,
  kFastGradClip,
  kFastGradClipImproved,
  kGhostClip,
  kMixGhostClip,
  kBk,
  kBkMixGhostClip,
  kBkMixOpt,
};

std::string ImplKindName(ImplKind kind);
ImplKind ParseImplKind(const std::string& name);
// Every kind, in declaration order.
const std::vector<ImplKind>& AllImplKinds();
// Every kind except non_dp.
const std::vector<ImplKind>& DpImplKinds();

// Backward traversals one step performs.
int ExpectedBackwardPasses(ImplKind kind, int64_t batch);

// Per-unit clipping modes a kind uses under `plan`.
std::vector<ClipMode> EffectiveModes(ImplKind kind, const Graph& graph,
                                     const ClipPlan& plan);

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct StepOptions {
  bool add_noise = true;
  bool apply_update = true;
  // Keep copies of the clipped and private gradients in the report.
  bool keep_grads = true;
  // Standard normal draws indexed by parameter id, used instead of the
  // engine's generator.
  const std::vector<Tensor>* injected_noise = nullptr;
};

struct StepReport {
  ImplKind kind = ImplKind::kNonDp;
  int64_t batch = 0;
  int backward_passes = 0;
  std::vector<ClipMode> modes;
  Tensor losses;
  Tensor per_sample_norms;
  Tensor clip_factors;
  // Indexed by parameter id; absent for frozen parameters.
  std::vector<Tensor> clipped_grads;
  std::vector<Tensor> private_grads;
  int64_t mul_adds = 0;
  int64_t peak_live_bytes = 0;
  // Multiply-adds attributed to each unit index (kGlobalScope for the rest).
  std::map<int, int64_t> unit_mul_adds;
  std::string fingerprint;
  uint64_t weight_version = 0;
  bool shape_only = false;
};

// Exact per-sample norms and clipped sum from B independent single-sample
// passes.
struct OracleResult {
  Tensor per_sample_norms;
  Tensor clip_factors;
  std::vector<Tensor> clipped_grads;  // indexed by parameter id
};

OracleResult NaiveOracleGrad(const Graph& graph, const Tensor& batch,
                             const Tensor& targets, const ClipPlan& plan,
                             OpCounters& counters);

// Adds sigma * R * N(0, I) to `grad` in place. sigma = 0 leaves it unchanged.
void AddNoise(Tensor& grad, double sigma, double radius, SeededRng& rng,
              OpCounters& counters);

class PrivacyEngine {
 public:
  // Attaches the graph's parameters to the engine's counters.
  PrivacyEngine(Graph& graph, ClipPlan plan, OptimizerConfig optimizer,
                uint64_t seed);

  StepReport Step(ImplKind kind, const Tensor& batch, const Tensor& targets,
                  const StepOptions& options = {});

  // Adds noise once to summed clipped gradients (indexed by parameter id)
  // and applies the optimizer. Returns the private gradients.
  std::vector<Tensor> ApplyPrivateGradient(std::vector<Tensor> clipped,
                                           const StepOptions& options);

  const Graph& graph() const { return graph_; }
  const ClipPlan& plan() const { return plan_; }
  OpCounters& counters() { return counters_; }
  SeededRng& rng() { return rng_; }
  uint64_t weight_version() const { return weight_version_; }

 private:
  void RunBatched(ImplKind kind, const Tensor& batch, const Tensor& targets,
                  std::vector<Tensor>& grads, StepReport& report);
  void RunNaive(const Tensor& batch, const Tensor& targets,
                std::vector<Tensor>& grads, StepReport& report);
  void UpdateWeights(const std::vector<Tensor>& grads);

  Graph& graph_;
  ClipPlan plan_;
  OptimizerConfig optimizer_;
  SeededRng rng_;
  OpCounters counters_;
  uint64_t weight_version_ = 0;
  int64_t adam_steps_ = 0;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
};

// Sums clipped gradients of several microbatches taken at the same weights
// and privatizes them once.
class GradientAccumulator {
 public:
  explicit GradientAccumulator(PrivacyEngine& engine) : engine_(engine) {}

  // Runs one microbatch without noise or update and adds its clipped sum.
  void AddMicrobatch(ImplKind kind, const Tensor& batch,
                     const Tensor& targets);
  // Adds an externally computed microbatch report.
  void Add(const StepReport& report);

  int microbatches() const { return count_; }
  const std::vector<Tensor>& clipped_sum() const { return sum_; }

  // Adds noise once, applies the update and resets the accumulator.
  std::vector<Tensor> Finish(const StepOptions& options = {});

 private:
  PrivacyEngine& engine_;
  std::vector<Tensor> sum_;
  int count_ = 0;
  uint64_t version_ = 0;
  std::string fingerprint_;
};

}  // namespace bkdp

#endif  // BKDP_PRIVACY_ENGINE_H_

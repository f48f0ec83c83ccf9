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

// Per-sample clipping primitives: clipping functions, the ghost norm,
// per-sample gradient instantiation and the clipped-gradient contractions.

#ifndef BKDP_CLIPPING_H_
#define BKDP_CLIPPING_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bkdp/autograd.h"
#include "bkdp/tensor.h"

namespace bkdp {

enum class ClipVariant { kAbadi, kFlat, kAutomatic };

// abadi:     C(x) = min(R / x, 1), with C(0) = 1
// flat:      C(x) = 1 if x <= R else 0
// automatic: C(x) = 1 / (x + stabilizer)
struct ClipFn {
  ClipVariant variant = ClipVariant::kAbadi;
  double radius = 1.0;
  double stabilizer = 0.01;

  // Throws ParameterError for a non-positive radius or negative stabilizer.
  void Validate() const;
};

ClipVariant ParseClipVariant(const std::string& name);
std::string ClipVariantName(ClipVariant variant);

double ClipFactor(double norm, const ClipFn& fn);

enum class ClipMode { kGhost, kInstantiate };

std::string ClipModeName(ClipMode mode);

// Ghost norm iff 2 T^2 < p d; ties instantiate.
ClipMode DecideMode(int64_t T, int64_t p, int64_t d);

struct ClipPlan {
  ClipFn clip_fn;
  double sigma = 0.0;
  // Per-unit modes indexed like Graph::units(); empty means DecideMode for
  // generalized linear units and instantiation for normalization units.
  std::vector<ClipMode> modes;

  ClipMode mode(const UnitSpec& unit) const;

  // Throws ConfigurationError when the modes do not fit the graph (wrong
  // count, or ghost mode for a normalization unit).
  void Validate(const Graph& graph) const;
};

// Modes chosen by DecideMode for every unit of the graph.
std::vector<ClipMode> DecidedModes(const Graph& graph);

// ---------------------------------------------------------------------------
// Ghost norm.

struct Grams {
  Tensor activation;   // [B, T, T], a_i a_i^T
  Tensor output_grad;  // [B, T, T], ds_i ds_i^T
};

// For T = 1 the Grams are the 1 x 1 squared row norms.
Grams ComputeGrams(const Tensor& activation, const Tensor& output_grad,
                   OpCounters& counters);
// Gram of one-hot rows: entry (t, s) is 1 when tokens t and s match.
Tensor IndexGram(std::span<const int64_t> token_ids, int64_t batch, int64_t T,
                 bool shape_only, OpCounters& counters);

// <G_a,i, G_ds,i> per sample: the squared Frobenius norm of a_i^T ds_i.
Tensor GramInnerProducts(const Grams& grams, OpCounters& counters);
// 1^T G_ds,i 1 per sample: the squared norm of sum_t ds_it.
Tensor GramEntrySums(const Tensor& gram, OpCounters& counters);
// In-place forms adding into an existing [B] accumulator.
void AccumulateGramInnerProducts(const Grams& grams, Tensor& acc,
                                 OpCounters& counters);
void AccumulateGramEntrySums(const Tensor& gram, Tensor& acc,
                             OpCounters& counters);

// ||a_i^T ds_i||_F^2 without forming a_i^T ds_i.
Tensor GhostNormSq(const Tensor& activation, const Tensor& output_grad,
                   OpCounters& counters);

// ---------------------------------------------------------------------------
// Instantiation.

// [B, d, p] with entry i = a_i^T ds_i.
Tensor InstantiatePerSampleGrads(const Tensor& activation,
                                 const Tensor& output_grad,
                                 OpCounters& counters);
// Embedding form: [B, vocab, p] by scattering output-gradient rows.
Tensor InstantiateIndexPerSampleGrads(std::span<const int64_t> token_ids,
                                      const Tensor& output_grad,
                                      int64_t vocab, OpCounters& counters);

// ---------------------------------------------------------------------------
// Clipped sums.

// sum_i C_i a_i^T ds_i as one contraction.
Tensor ClippedGradBk(const Tensor& activation, const Tensor& output_grad,
                     const Tensor& factors, OpCounters& counters);

// sum_i C_i G_i over per-sample gradients G[B, ...].
Tensor WeightedSum(const Tensor& per_sample, const Tensor& factors,
                   OpCounters& counters);
// out += sum_i C_i G_i, in place.
void WeightedSumInto(const Tensor& per_sample, const Tensor& factors,
                     Tensor& out, OpCounters& counters);

}  // namespace bkdp

#endif  // BKDP_CLIPPING_H_

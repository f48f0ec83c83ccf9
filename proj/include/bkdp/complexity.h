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

// Static cost model: per-module costs, per-implementation totals, the
// layerwise ghost/instantiate decision table, and comparison of predictions
// with instrumented step counters.
//
// Costs count scalar multiply-adds (time) and scalars held (space), using the
// same factor-of-two convention as OpCounters.

#ifndef BKDP_COMPLEXITY_H_
#define BKDP_COMPLEXITY_H_

#include <cstdint>
#include <string>
#include <vector>

#include "bkdp/autograd.h"
#include "bkdp/clipping.h"
#include "bkdp/privacy_engine.h"

namespace bkdp {

struct Cost {
  int64_t time = 0;
  int64_t space = 0;
};

struct ModuleCosts {
  Cost forward;         // 2BTpd, pd + BTd
  Cost output_grad;     // 2BTpd, BT(p + d)
  Cost param_grad;      // 2BTpd, pd
  Cost ghost_norm;      // 2BT^2(p + d), 2BT^2
  Cost instantiation;   // 2BTpd, Bpd
  Cost weighted_sum;    // 2Bpd, 0
};

ModuleCosts ModuleCostsFor(int64_t B, int64_t T, int64_t p, int64_t d);

// One analyzer row: a clipping unit, or a frozen generalized linear product
// that still costs forward and output-gradient work.
struct AnalyzerRow {
  LayerShape shape;
  int unit_index = -1;  // -1 for frozen rows
  int64_t ghost_space = 0;  // 2T^2
  int64_t inst_space = 0;   // pd
  ClipMode decision = ClipMode::kInstantiate;
  int64_t min_space = 0;
};

// Rows in layer order. Normalization rows always decide instantiate.
std::vector<AnalyzerRow> AnalyzerRows(const Graph& graph);

// Cost of one row for one implementation at batch size B. `space` is the
// row's full footprint: pd + 3BTd + BTp plus the clipping overhead.
Cost RowImplCost(const AnalyzerRow& row, int64_t B, ImplKind kind);

// Clipping overhead over non_dp for one row.
int64_t RowExtraSpace(const AnalyzerRow& row, int64_t B, ImplKind kind);

struct KindTotal {
  ImplKind kind = ImplKind::kNonDp;
  Cost cost;
  int64_t extra_space = 0;
};

struct ComplexityReport {
  std::string arch;
  std::string fingerprint;
  int64_t batch = 1;
  std::vector<AnalyzerRow> rows;
  // Over trainable rows, at B = 1.
  int64_t ghost_total = 0;
  int64_t inst_total = 0;
  int64_t mixed_total = 0;
  std::vector<KindTotal> kinds;
};

ComplexityReport Analyze(const std::string& arch_name, const Graph& graph,
                         int64_t batch);

Cost ImplCost(const ComplexityReport& report, ImplKind kind);

// 1-based position, among trainable rows, of the last row deciding
// instantiate; 0 when every row decides ghost.
int LastInstantiateRow(const std::vector<AnalyzerRow>& rows);

struct RowDeviation {
  std::string name;
  int64_t predicted = 0;
  int64_t measured = 0;
  double deviation = 0.0;  // (measured - predicted) / predicted
  bool flagged = false;
};

struct Comparison {
  std::vector<RowDeviation> rows;
  RowDeviation time;
  // Peak bytes against 8 bytes per predicted scalar. The measured peak also
  // holds the gradient buffers, which the row formulas leave out.
  RowDeviation space_bytes;
  // Peak bytes over a non_dp baseline step against the predicted clipping
  // overhead; present only when a baseline is given.
  bool has_overhead = false;
  RowDeviation overhead_bytes;
};

// Throws ComparisonError when the report and step disagree on graph or batch.
Comparison ComparePredictedMeasured(const ComplexityReport& report,
                                    const StepReport& step, double tolerance,
                                    const StepReport* non_dp_baseline =
                                        nullptr);

// Two significant figures: "2", "49", "3.1e8", "1.0e6".
std::string FormatTwoSig(double value);

// Decision table and totals as CSV.
std::string DecisionTableCsv(const ComplexityReport& report);

}  // namespace bkdp

#endif  // BKDP_COMPLEXITY_H_

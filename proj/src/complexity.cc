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

#include "bkdp/complexity.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "bkdp/status.h"

namespace bkdp {
namespace {

bool TwoPassKind(ImplKind kind) {
  return ExpectedBackwardPasses(kind, 1) == 2;
}

AnalyzerRow MakeRow(LayerShape shape, int unit_index) {
  AnalyzerRow row;
  row.shape = std::move(shape);
  row.unit_index = unit_index;
  const LayerShape& s = row.shape;
  row.ghost_space = 2 * s.T * s.T;
  row.inst_space = s.p * s.d;
  if (s.unit == UnitKind::kNormAffine) {
    row.decision = ClipMode::kInstantiate;
  } else {
    row.decision = DecideMode(s.T, s.p, s.d);
  }
  row.min_space = row.decision == ClipMode::kGhost ? row.ghost_space
                                                   : row.inst_space;
  return row;
}

LayerShape UnitShape(const UnitSpec& u, LayerKind kind) {
  LayerShape s;
  s.name = u.name;
  s.kind = kind;
  s.unit = u.kind;
  s.T = u.T;
  s.d = u.d;
  s.p = u.p;
  s.trainable = true;
  s.has_bias = u.bias != nullptr;
  return s;
}

// Frozen generalized linear products of a layer without clipping units.
bool FrozenShape(const Layer& layer, const Shape& input, LayerShape& s) {
  s.name = layer.name();
  s.kind = layer.kind();
  s.trainable = false;
  if (const auto* linear = dynamic_cast<const LinearLayer*>(&layer)) {
    s.d = linear->weight().value.dim(0);
    s.p = linear->weight().value.dim(1);
    s.T = input.size() == 3 ? input[1] : 1;
    return true;
  }
  if (const auto* conv = dynamic_cast<const Conv2dLayer*>(&layer)) {
    const Shape out = conv->OutputShape(input);
    s.d = conv->weight().value.dim(0);
    s.p = conv->weight().value.dim(1);
    s.T = out[2] * out[3];
    return true;
  }
  if (const auto* embedding = dynamic_cast<const EmbeddingLayer*>(&layer)) {
    s.d = embedding->weight().value.dim(0);
    s.p = embedding->weight().value.dim(1);
    s.T = input[1];
    return true;
  }
  return false;
}

double Deviation(int64_t measured, int64_t predicted) {
  if (predicted == 0) return measured == 0 ? 0.0 : INFINITY;
  return static_cast<double>(measured - predicted) /
         static_cast<double>(predicted);
}

RowDeviation MakeDeviation(std::string name, int64_t predicted,
                           int64_t measured, double tolerance) {
  RowDeviation dev;
  dev.name = std::move(name);
  dev.predicted = predicted;
  dev.measured = measured;
  dev.deviation = Deviation(measured, predicted);
  dev.flagged = !(std::abs(dev.deviation) <= tolerance);
  return dev;
}

}  // namespace

ModuleCosts ModuleCostsFor(int64_t B, int64_t T, int64_t p, int64_t d) {
  const int64_t m = B * T * p * d;
  ModuleCosts c;
  c.forward = {2 * m, p * d + B * T * d};
  c.output_grad = {2 * m, B * T * (p + d)};
  c.param_grad = {2 * m, p * d};
  c.ghost_norm = {2 * B * T * T * (p + d), 2 * B * T * T};
  c.instantiation = {2 * m, B * p * d};
  c.weighted_sum = {2 * B * p * d, 0};
  return c;
}

std::vector<AnalyzerRow> AnalyzerRows(const Graph& graph) {
  std::vector<AnalyzerRow> rows;
  const std::vector<UnitSpec>& units = graph.units();
  size_t next = 0;
  for (int l = 0; l < graph.num_layers(); ++l) {
    const Layer& layer = graph.layer(l);
    const Shape input = graph.LayerInputShape(l, 1);
    if (const auto* lora = dynamic_cast<const LoraLayer*>(&layer)) {
      LayerShape base;
      base.name = layer.name() + ".base";
      base.kind = LayerKind::kLora;
      base.trainable = false;
      base.d = lora->base().value.dim(0);
      base.p = lora->base().value.dim(1);
      base.T = input.size() == 3 ? input[1] : 1;
      rows.push_back(MakeRow(base, -1));
    }
    bool has_units = false;
    while (next < units.size() && units[next].layer == l) {
      LayerShape s = UnitShape(units[next], layer.kind());
      if (layer.kind() == LayerKind::kLora ||
          layer.kind() == LayerKind::kAdapter) {
        s.rank = units[next].slot == 0 ? units[next].p : units[next].d;
      }
      rows.push_back(MakeRow(s, units[next].index));
      has_units = true;
      ++next;
    }
    LayerShape frozen;
    if (!has_units && FrozenShape(layer, input, frozen)) {
      rows.push_back(MakeRow(frozen, -1));
    }
  }
  return rows;
}

Cost RowImplCost(const AnalyzerRow& row, int64_t B, ImplKind kind) {
  const LayerShape& s = row.shape;
  const int64_t m = B * s.T * s.p * s.d;
  Cost cost;
  if (!s.trainable) {
    const int64_t passes = TwoPassKind(kind) ? 2 : 1;
    cost.time = 2 * m + 2 * m * passes;
    cost.space = s.p * s.d + B * s.T * (s.d + s.p);
    return cost;
  }
  const int64_t ghost = 2 * B * s.T * s.T * (s.p + s.d);
  const int64_t inst = 2 * m;
  const bool ghost_mode = row.decision == ClipMode::kGhost;
  const bool norm = s.unit == UnitKind::kNormAffine;
  switch (kind) {
    case ImplKind::kNonDp:
    case ImplKind::kNaive:
    case ImplKind::kOpacusImproved:
    case ImplKind::kFastGradClipImproved:
      cost.time = 6 * m;
      break;
    case ImplKind::kOpacus:
    case ImplKind::kFastGradClip:
      cost.time = 8 * m;
      break;
    case ImplKind::kGhostClip:
      cost.time = 10 * m + (norm ? inst : ghost);
      break;
    case ImplKind::kBk:
      cost.time = 6 * m + (norm ? inst : ghost);
      break;
    case ImplKind::kMixGhostClip:
      cost.time = 8 * m + (ghost_mode ? ghost : inst);
      break;
    case ImplKind::kBkMixGhostClip:
      cost.time = 6 * m + (ghost_mode ? ghost : inst);
      break;
    case ImplKind::kBkMixOpt:
      cost.time = 6 * m + (ghost_mode ? ghost : 0);
      break;
  }
  cost.space = s.p * s.d + 3 * B * s.T * s.d + B * s.T * s.p +
               RowExtraSpace(row, B, kind);
  return cost;
}

int64_t RowExtraSpace(const AnalyzerRow& row, int64_t B, ImplKind kind) {
  const LayerShape& s = row.shape;
  if (!s.trainable) return 0;
  const int64_t inst = B * s.p * s.d;
  const int64_t ghost = 2 * B * s.T * s.T;
  const bool norm = s.unit == UnitKind::kNormAffine;
  switch (kind) {
    case ImplKind::kNonDp:
    case ImplKind::kNaive:
      return 0;
    case ImplKind::kOpacus:
    case ImplKind::kOpacusImproved:
    case ImplKind::kFastGradClip:
    case ImplKind::kFastGradClipImproved:
      return inst;
    case ImplKind::kGhostClip:
    case ImplKind::kBk:
      return norm ? inst : ghost;
    case ImplKind::kMixGhostClip:
    case ImplKind::kBkMixGhostClip:
    case ImplKind::kBkMixOpt:
      return B * row.min_space;
  }
  return 0;
}

ComplexityReport Analyze(const std::string& arch_name, const Graph& graph,
                         int64_t batch) {
  if (batch < 1) throw ConfigurationError("batch size must be positive");
  ComplexityReport report;
  report.arch = arch_name;
  report.fingerprint = graph.Fingerprint();
  report.batch = batch;
  report.rows = AnalyzerRows(graph);
  for (const AnalyzerRow& row : report.rows) {
    if (!row.shape.trainable) continue;
    report.ghost_total += row.ghost_space;
    report.inst_total += row.inst_space;
    report.mixed_total += row.min_space;
  }
  for (ImplKind kind : AllImplKinds()) {
    KindTotal total;
    total.kind = kind;
    for (const AnalyzerRow& row : report.rows) {
      const Cost c = RowImplCost(row, batch, kind);
      total.cost.time += c.time;
      total.cost.space += c.space;
      total.extra_space += RowExtraSpace(row, batch, kind);
    }
    report.kinds.push_back(total);
  }
  return report;
}

Cost ImplCost(const ComplexityReport& report, ImplKind kind) {
  for (const KindTotal& total : report.kinds) {
    if (total.kind == kind) return total.cost;
  }
  throw ConfigurationError("no cost for implementation " +
                           ImplKindName(kind));
}

int LastInstantiateRow(const std::vector<AnalyzerRow>& rows) {
  int position = 0;
  int last = 0;
  for (const AnalyzerRow& row : rows) {
    if (!row.shape.trainable) continue;
    ++position;
    if (row.decision == ClipMode::kInstantiate) last = position;
  }
  return last;
}

Comparison ComparePredictedMeasured(const ComplexityReport& report,
                                    const StepReport& step, double tolerance,
                                    const StepReport* non_dp_baseline) {
  if (report.fingerprint != step.fingerprint) {
    throw ComparisonError("step ran on graph " + step.fingerprint +
                          ", report describes " + report.fingerprint);
  }
  if (report.batch != step.batch) {
    throw ComparisonError("step batch " + std::to_string(step.batch) +
                          " differs from report batch " +
                          std::to_string(report.batch));
  }
  Comparison out;
  int64_t predicted_time = 0;
  int64_t predicted_space = 0;
  int64_t predicted_extra = 0;
  for (const AnalyzerRow& row : report.rows) {
    const Cost c = RowImplCost(row, report.batch, step.kind);
    predicted_time += c.time;
    predicted_space += c.space;
    predicted_extra += RowExtraSpace(row, report.batch, step.kind);
    if (row.unit_index < 0) continue;
    auto it = step.unit_mul_adds.find(row.unit_index);
    const int64_t measured = it == step.unit_mul_adds.end() ? 0 : it->second;
    out.rows.push_back(
        MakeDeviation(row.shape.name, c.time, measured, tolerance));
  }
  out.time = MakeDeviation("total", predicted_time, step.mul_adds, tolerance);
  out.space_bytes = MakeDeviation("peak_bytes", 8 * predicted_space,
                                  step.peak_live_bytes, tolerance);
  if (non_dp_baseline != nullptr) {
    if (non_dp_baseline->fingerprint != step.fingerprint ||
        non_dp_baseline->batch != step.batch) {
      throw ComparisonError("baseline step ran on a different configuration");
    }
    out.has_overhead = true;
    out.overhead_bytes = MakeDeviation(
        "overhead_bytes", 8 * predicted_extra,
        step.peak_live_bytes - non_dp_baseline->peak_live_bytes, tolerance);
  }
  return out;
}

std::string FormatTwoSig(double value) {
  if (value == 0.0) return "0";
  const double magnitude = std::abs(value);
  char buffer[64];
  if (magnitude < 100.0) {
    if (value == std::round(value)) {
      std::snprintf(buffer, sizeof(buffer), "%.0f", value);
    } else {
      std::snprintf(buffer, sizeof(buffer), "%.2g", value);
    }
    return buffer;
  }
  int exponent = static_cast<int>(std::floor(std::log10(magnitude)));
  double mantissa = std::round(value / std::pow(10.0, exponent) * 10.0) / 10.0;
  if (std::abs(mantissa) >= 10.0) {
    mantissa /= 10.0;
    ++exponent;
  }
  std::snprintf(buffer, sizeof(buffer), "%.1fe%d", mantissa, exponent);
  return buffer;
}

std::string DecisionTableCsv(const ComplexityReport& report) {
  std::ostringstream out;
  out << "layer,T,d,p,ghost_space,inst_space,decision,min_space\n";
  for (const AnalyzerRow& row : report.rows) {
    if (!row.shape.trainable) continue;
    const LayerShape& s = row.shape;
    out << s.name << "," << s.T << "," << s.d << "," << s.p << ","
        << row.ghost_space << "," << row.inst_space << ","
        << ClipModeName(row.decision) << "," << row.min_space << "\n";
  }
  out << "total,,,," << report.ghost_total << "," << report.inst_total
      << ",mixed," << report.mixed_total << "\n";
  out << "total_2sf,,,," << FormatTwoSig(report.ghost_total) << ","
      << FormatTwoSig(report.inst_total) << ",mixed,"
      << FormatTwoSig(report.mixed_total) << "\n";
  out << "\nkind,batch,time,space,extra_space\n";
  for (const KindTotal& total : report.kinds) {
    out << ImplKindName(total.kind) << "," << report.batch << ","
        << total.cost.time << "," << total.cost.space << ","
        << total.extra_space << "\n";
  }
  return out.str();
}

}  // namespace bkdp

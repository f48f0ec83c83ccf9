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

#include "bkdp/cli.h"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>

#include "bkdp/arch_spec.h"
#include "bkdp/complexity.h"
#include "bkdp/status.h"

namespace bkdp {
namespace {

std::string Sci(double value) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.3e", value);
  return buffer;
}

ArchSpec LoadArch(const RunConfig& config) {
  ArchSpec arch = ResolveArch(config.arch);
  if (config.input > 0) arch = WithInputSize(std::move(arch), config.input);
  return arch;
}

ClipPlan MakePlan(const RunConfig& config) {
  ClipPlan plan;
  plan.clip_fn.variant = ParseClipVariant(config.clip_fn);
  plan.clip_fn.radius = config.radius;
  plan.sigma = config.sigma;
  plan.clip_fn.Validate();
  if (!(config.sigma >= 0.0)) {
    throw ConfigurationError("sigma must be non-negative");
  }
  return plan;
}

int64_t BatchOr(const RunConfig& config, int64_t fallback) {
  if (config.batch < 0) throw ConfigurationError("batch must be positive");
  return config.batch == 0 ? fallback : config.batch;
}

// "layer.param" labels indexed by parameter id.
std::vector<std::string> ParameterLabels(const Graph& graph) {
  std::vector<std::string> labels(graph.parameters().size());
  for (int l = 0; l < graph.num_layers(); ++l) {
    for (const Parameter* p : graph.layer(l).parameters()) {
      labels.at(p->id) = graph.layer(l).name() + "." + p->name;
    }
  }
  return labels;
}

// Runs `body` writing CSV to the configured file or to `out`.
int WithOutput(const RunConfig& config, std::ostream& out,
               const std::function<int(std::ostream&)>& body) {
  if (config.out.empty()) return body(out);
  std::ostringstream buffer;
  const int code = body(buffer);
  std::ofstream file(config.out);
  if (!file) throw ConfigurationError("cannot write '" + config.out + "'");
  file << buffer.str();
  return code;
}

}  // namespace

std::vector<ImplKind> ParseImplList(const std::string& text,
                                    const std::vector<ImplKind>& all_kinds) {
  if (text == "all") return all_kinds;
  std::vector<ImplKind> kinds;
  std::stringstream in(text);
  for (std::string name; std::getline(in, name, ',');) {
    if (name.empty()) continue;
    const ImplKind kind = ParseImplKind(name);
    if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
      kinds.push_back(kind);
    }
  }
  if (kinds.empty()) throw ConfigurationError("no implementation selected");
  return kinds;
}

int CmdVerify(const RunConfig& config, std::ostream& csv, std::ostream& err) {
  const ArchSpec arch = LoadArch(config);
  const int64_t batch_size = BatchOr(config, 8);
  const ClipPlan plan = MakePlan(config);
  const std::vector<ImplKind> kinds = ParseImplList(config.impl, DpImplKinds());
  if (!(config.tol >= 0.0)) throw ConfigurationError("tol must be >= 0");

  std::unique_ptr<Graph> graph = BuildGraph(arch, config.seed);
  SeededRng data_rng(config.seed + 1);
  const Batch batch = RandomBatch(arch, *graph, batch_size, data_rng);
  OpCounters oracle_counters;
  const OracleResult oracle = NaiveOracleGrad(*graph, batch.inputs,
                                              batch.targets, plan,
                                              oracle_counters);
  const std::vector<std::string> labels = ParameterLabels(*graph);

  csv << "kind,max_rel_grad_dev,max_rel_norm_dev,backward_pass_count\n";
  bool failed = false;
  for (ImplKind kind : kinds) {
    PrivacyEngine engine(*graph, plan, OptimizerConfig{}, config.seed);
    StepOptions options;
    options.add_noise = false;
    options.apply_update = false;
    const StepReport report =
        engine.Step(kind, batch.inputs, batch.targets, options);
    double grad_dev = 0.0;
    std::string worst = "-";
    for (size_t id = 0; id < oracle.clipped_grads.size(); ++id) {
      if (oracle.clipped_grads[id].empty()) continue;
      const double dev = MaxRelativeDeviation(report.clipped_grads.at(id),
                                              oracle.clipped_grads[id]);
      if (dev > grad_dev || worst == "-") {
        grad_dev = std::max(grad_dev, dev);
        worst = labels[id];
      }
    }
    const double norm_dev =
        MaxRelativeDeviation(report.per_sample_norms, oracle.per_sample_norms);
    const int expected = ExpectedBackwardPasses(kind, batch_size);
    csv << ImplKindName(kind) << "," << Sci(grad_dev) << "," << Sci(norm_dev)
        << "," << report.backward_passes << "\n";
    const bool ok = grad_dev <= config.tol && norm_dev <= config.tol &&
                    report.backward_passes == expected;
    if (!ok && !failed) {
      failed = true;
      err << "verification failed: kind=" << ImplKindName(kind)
          << " layer=" << worst << " grad_dev=" << Sci(grad_dev)
          << " norm_dev=" << Sci(norm_dev)
          << " backward_passes=" << report.backward_passes << " (expected "
          << expected << ")\n";
    }
  }
  return failed ? kExitVerificationFailed : kExitOk;
}

int CmdAnalyze(const RunConfig& config, std::ostream& csv,
               std::ostream& /*err*/) {
  const ArchSpec arch = LoadArch(config);
  std::unique_ptr<Graph> graph = BuildGraph(arch, config.seed, true);
  const ComplexityReport report =
      Analyze(arch.name, *graph, BatchOr(config, 1));
  csv << DecisionTableCsv(report);
  return kExitOk;
}

int CmdBench(const RunConfig& config, std::ostream& csv, std::ostream& err) {
  const ArchSpec arch = LoadArch(config);
  const int64_t batch_size = BatchOr(config, 16);
  const ClipPlan plan = MakePlan(config);
  const std::vector<ImplKind> kinds =
      ParseImplList(config.impl, AllImplKinds());
  if (config.steps < 1) throw ConfigurationError("steps must be >= 1");
  if (config.mem_budget_bytes <= 0) {
    throw ConfigurationError("memory budget must be positive");
  }

  csv << "kind,steps,mul_adds_total,peak_live_bytes,predicted_time,"
         "predicted_space,deviation_pct\n";
  int ran = 0;
  for (ImplKind kind : kinds) {
    std::unique_ptr<Graph> graph =
        BuildGraph(arch, config.seed, config.shape_only);
    const ComplexityReport report = Analyze(arch.name, *graph, batch_size);
    const Cost predicted = ImplCost(report, kind);
    const int64_t predicted_bytes = 8 * predicted.space;
    if (predicted_bytes > config.mem_budget_bytes) {
      err << "refusing " << ImplKindName(kind) << ": predicted space "
          << predicted_bytes << " bytes exceeds the budget of "
          << config.mem_budget_bytes << " bytes\n";
      continue;
    }
    PrivacyEngine engine(*graph, plan, OptimizerConfig{}, config.seed);
    int64_t mul_adds = 0;
    int64_t peak = 0;
    for (int s = 0; s < config.steps; ++s) {
      SeededRng data_rng(config.seed + 1 + static_cast<uint64_t>(s));
      const Batch batch = RandomBatch(arch, *graph, batch_size, data_rng,
                                      config.shape_only);
      StepOptions options;
      options.add_noise = config.sigma > 0.0;
      options.keep_grads = false;
      const int64_t before = engine.counters().mul_adds();
      const StepReport step =
          engine.Step(kind, batch.inputs, batch.targets, options);
      mul_adds += engine.counters().mul_adds() - before;
      peak = std::max(peak, step.peak_live_bytes);
    }
    const int64_t predicted_time = predicted.time * config.steps;
    const double deviation =
        100.0 * static_cast<double>(mul_adds - predicted_time) /
        static_cast<double>(predicted_time);
    char pct[32];
    std::snprintf(pct, sizeof(pct), "%.2f", deviation);
    csv << ImplKindName(kind) << "," << config.steps << "," << mul_adds << ","
        << peak << "," << predicted_time << "," << predicted_bytes << ","
        << pct << "\n";
    ++ran;
  }
  if (ran == 0) {
    err << "no implementation fits the memory budget\n";
    return kExitConfigError;
  }
  return kExitOk;
}

int RunCli(int argc, const char* const* argv, std::ostream& out,
           std::ostream& err) {
  CLI::App app{"Per-sample clipping for differentially private training"};
  app.require_subcommand(1);
  RunConfig config;

  auto add_flags = [&config](CLI::App* cmd) {
    cmd->add_option("--arch", config.arch,
                    "catalog name (mlp:LxW, resnet18, ...) or spec file");
    cmd->add_option("--input", config.input,
                    "image side or sequence length override");
    cmd->add_option("--batch", config.batch, "batch size")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--impl", config.impl, "comma-separated kinds or all");
    cmd->add_option("--clip-fn", config.clip_fn, "abadi, flat or automatic");
    cmd->add_option("--radius", config.radius, "clipping radius R");
    cmd->add_option("--sigma", config.sigma, "noise multiplier");
    cmd->add_option("--seed", config.seed, "random seed");
    cmd->add_option("--steps", config.steps, "optimization steps");
    cmd->add_option("--tol", config.tol, "relative tolerance");
    cmd->add_option("--out", config.out, "CSV output path");
    cmd->add_option("--mem-budget-bytes", config.mem_budget_bytes,
                    "refuse kinds predicted to need more bytes");
    cmd->add_flag("--shape-only", config.shape_only,
                  "count work and memory without numeric payloads");
  };
  CLI::App* verify =
      app.add_subcommand("verify", "compare every kind with the oracle");
  CLI::App* analyze =
      app.add_subcommand("analyze", "layerwise decision table and costs");
  CLI::App* bench = app.add_subcommand("bench", "instrumented step counters");
  for (CLI::App* cmd : {verify, analyze, bench}) add_flags(cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    if (verify->parsed()) {
      config.command = "verify";
      return WithOutput(config, out, [&](std::ostream& csv) {
        return CmdVerify(config, csv, err);
      });
    }
    if (analyze->parsed()) {
      config.command = "analyze";
      return WithOutput(config, out, [&](std::ostream& csv) {
        return CmdAnalyze(config, csv, err);
      });
    }
    config.command = "bench";
    return WithOutput(config, out, [&](std::ostream& csv) {
      return CmdBench(config, csv, err);
    });
  } catch (const std::invalid_argument& e) {
    err << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::logic_error& e) {
    err << e.what() << "\n";
    return kExitConfigError;
  }
}

}  // namespace bkdp

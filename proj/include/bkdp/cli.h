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

// Command-line front end: verify, analyze and bench.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration error.

#ifndef BKDP_CLI_H_
#define BKDP_CLI_H_

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "bkdp/privacy_engine.h"

namespace bkdp {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerificationFailed = 1;
inline constexpr int kExitConfigError = 2;

struct RunConfig {
  std::string command;
  std::string arch = "mlp:3x64";
  int64_t input = 0;  // 0 keeps the architecture's own input size
  int64_t batch = 0;  // 0 picks the command default
  std::string impl = "all";
  std::string clip_fn = "abadi";
  double radius = 1.0;
  double sigma = 0.0;
  uint64_t seed = 0;
  int steps = 1;
  double tol = 1e-8;
  std::string out;  // empty writes to the output stream
  int64_t mem_budget_bytes = int64_t{2} << 30;
  bool shape_only = false;
};

// Comma-separated kinds or "all"; `all_kinds` is what "all" expands to.
std::vector<ImplKind> ParseImplList(const std::string& text,
                                    const std::vector<ImplKind>& all_kinds);

int CmdVerify(const RunConfig& config, std::ostream& csv, std::ostream& err);
int CmdAnalyze(const RunConfig& config, std::ostream& csv, std::ostream& err);
int CmdBench(const RunConfig& config, std::ostream& csv, std::ostream& err);

// Parses flags and dispatches; library errors become exit code 2.
int RunCli(int argc, const char* const* argv, std::ostream& out,
           std::ostream& err);

}  // namespace bkdp

#endif  // BKDP_CLI_H_

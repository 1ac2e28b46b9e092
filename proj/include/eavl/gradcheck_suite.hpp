// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "eavl/gradcheck.hpp"
#include "eavl/model_config.hpp"

namespace eavl {

struct GradBlockResult {
  std::string block;
  GradCheckReport report;
  double threshold = 1e-4;
  bool passed() const { return report.max_rel_error < threshold; }
};

struct GradSuiteOptions {
  GradCheckOptions check;
  std::uint64_t input_seed = 7;
  /// Adds a block for an output that ignores one parameter, to exercise the
  /// zero-gradient report.
  bool include_unused_probe = false;
};

/// Runs finite-difference checks in double precision on the tiny
/// configuration: a linear stub, each module on its own, and the complete
/// model in every mode.
std::vector<GradBlockResult> run_gradcheck_suite(const GradSuiteOptions& options = {},
                                                 const ModelConfig& config = ModelConfig::tiny());

}  // namespace eavl

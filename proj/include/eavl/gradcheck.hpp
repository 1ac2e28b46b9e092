// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eavl/tape.hpp"

namespace eavl {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  /// Probes skipped because p - eps and p + eps put some ReLU input on
  /// opposite sides of zero.
  std::size_t kink_skipped = 0;
  /// Parameters whose analytic gradient was identically zero.
  std::vector<std::string> zero_gradient;
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Entries probed per parameter; 0 probes all of them. When limited, the
  /// probed indices are drawn with a fixed seed.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0x5eed;
  /// Smallest denominator of the relative error, scaled by max(1, |f|):
  /// central-difference roundoff grows with the magnitude of the output.
  double abs_floor = 1e-6;
};

/// Builds the output of the function under test on a fresh tape. Non-scalar
/// outputs are reduced with a fixed pseudo-random projection.
using GradCheckFn = std::function<Var<double>(Tape<double>&)>;

/// Compares tape gradients with central differences
/// (f(p + eps) - f(p - eps)) / (2 eps) for every probed entry of `params`,
/// skipping probes whose interval crosses a ReLU kink and
/// using relative error |a - n| / max(|a|, |n|, abs_floor).
GradCheckReport grad_check(const GradCheckFn& f, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& options = {});

}  // namespace eavl

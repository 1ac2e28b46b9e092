// SPDX-License-Identifier: Apache-2.0
#include "eavl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "eavl/ops.hpp"

namespace eavl {
namespace {

Var<double> scalarize(Var<double> out, std::uint64_t seed) {
  if (out.value().size() == 1) return ops::reshape(out, {1});
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor<double> w(out.shape());
  for (double& v : w.data()) v = dist(rng);
  return ops::weighted_sum(out, w);
}

double evaluate(const GradCheckFn& f, std::uint64_t seed, std::vector<bool>* signs) {
  signs->clear();
  ops::set_relu_trace(signs);
  Tape<double> tape;
  const double v = scalarize(f(tape), seed).value()[0];
  ops::set_relu_trace(nullptr);
  return v;
}

}  // namespace

GradCheckReport grad_check(const GradCheckFn& f, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  for (Parameter<double>* p : params) p->grad.fill(0.0);
  double floor = options.abs_floor;
  {
    Tape<double> tape;
    Var<double> loss = scalarize(f(tape), options.seed);
    floor *= std::max(1.0, std::abs(loss.value()[0]));
    tape.backward(loss);
  }
  std::mt19937_64 pick(options.seed);
  std::vector<bool> signs_plus, signs_minus;
  for (Parameter<double>* p : params) {
    const Tensor<double> analytic = p->grad;
    if (std::all_of(analytic.data().begin(), analytic.data().end(), [](double g) { return g == 0.0; })) {
      report.zero_gradient.push_back(p->name);
    }
    std::vector<std::size_t> indices(p->value.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.max_entries_per_param != 0 && indices.size() > options.max_entries_per_param) {
      std::shuffle(indices.begin(), indices.end(), pick);
      indices.resize(options.max_entries_per_param);
    }
    for (std::size_t i : indices) {
      const double saved = p->value[i];
      p->value[i] = saved + options.eps;
      const double plus = evaluate(f, options.seed, &signs_plus);
      p->value[i] = saved - options.eps;
      const double minus = evaluate(f, options.seed, &signs_minus);
      p->value[i] = saved;
      if (signs_plus != signs_minus) {
        ++report.kink_skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.entries_checked;
      if (rel > report.max_rel_error || std::isnan(rel)) {
        report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
        report.worst_parameter = p->name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (Parameter<double>* p : params) p->grad.fill(0.0);
  return report;
}

}  // namespace eavl

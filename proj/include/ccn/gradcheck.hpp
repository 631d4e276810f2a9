#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ccn/autodiff.hpp"

namespace ccn {

struct GradCheckOptions {
  double tolerance = 1e-4;   // relative
  double abs_floor = 1e-6;   // absolute errors below this always pass
  double step_scale = 1e-4;  // h = step_scale * max(1, |x|)
};

struct LeafReport {
  std::string name;
  std::size_t coords = 0;
  std::size_t kinks = 0;  // probes that crossed a relu boundary (skipped)
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool non_finite = false;
};

struct GradCheckReport {
  std::vector<LeafReport> leaves;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::size_t kinks = 0;
  bool non_finite = false;

  bool passed(double tolerance) const { return !non_finite && max_rel_error < tolerance; }
};

/// |a - n| scaled by max(|a|, |n|, abs_floor / tolerance). Below `tolerance`
/// exactly when the relative error is below tolerance or the absolute error
/// is below abs_floor.
inline double gradient_error(double analytic, double numeric, const GradCheckOptions& opt) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor / opt.tolerance});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

inline void probe_coordinate(Graph& graph, NodeId root, const Bindings& inputs,
                             const std::vector<bool>& base_sig, double& x, double analytic,
                             const GradCheckOptions& opt, LeafReport& leaf) {
  const double x0 = x;
  const double h = opt.step_scale * std::max(1.0, std::abs(x0));
  const double xp = x0 + h;
  const double xm = x0 - h;
  x = xp;
  const double fp = graph.forward(root, inputs).item();
  const bool kink_p = graph.relu_signature() != base_sig;
  x = xm;
  const double fm = graph.forward(root, inputs).item();
  const bool kink_m = graph.relu_signature() != base_sig;
  x = x0;

  ++leaf.coords;
  if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic)) {
    leaf.non_finite = true;
    return;
  }
  if (kink_p || kink_m) {
    ++leaf.kinks;
    return;
  }
  const double numeric = (fp - fm) / (xp - xm);
  leaf.max_rel_error = std::max(leaf.max_rel_error, gradient_error(analytic, numeric, opt));
  leaf.max_abs_error = std::max(leaf.max_abs_error, std::abs(analytic - numeric));
}

}  // namespace detail

/// Compares reverse-mode gradients of a scalar root against central
/// differences, for every coordinate of every input binding and every entry
/// of `params` the graph reads. Parameters are perturbed in place and
/// restored before returning.
inline GradCheckReport finite_diff_check(Graph& graph, NodeId root, Bindings inputs,
                                         std::span<Parameter* const> params = {},
                                         const GradCheckOptions& opt = {}) {
  graph.forward(root, inputs);
  const std::vector<bool> base_sig = graph.relu_signature();
  const GradStore grads = graph.backward(root);
  const ParamGrads pgrads = collect_param_grads(graph, grads);

  GradCheckReport report;
  for (NodeId i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(i);
    if (n.op != Op::kInput) continue;
    LeafReport leaf;
    leaf.name = "input:" + n.name;
    Tensor& bound = inputs.at(n.name);
    const Tensor analytic = grads.of(i);
    for (std::size_t k = 0; k < bound.size(); ++k) {
      detail::probe_coordinate(graph, root, inputs, base_sig, bound[k], analytic[k], opt,
                               leaf);
    }
    report.leaves.push_back(leaf);
  }

  // Parameter leaves: dense params cover every entry, gathered tables only
  // the rows the graph touched.
  for (Parameter* param : params) {
    const ParamGrad* found = pgrads.find(param);
    if (found == nullptr) continue;
    const ParamGrad& pg = *found;
    Parameter& p = *param;
    LeafReport leaf;
    leaf.name = "param:" + p.name;
    std::vector<std::size_t> rows;
    if (pg.dense) {
      for (std::size_t r = 0; r < p.value.rows; ++r) rows.push_back(r);
    } else {
      for (const auto& kv : pg.rows) rows.push_back(kv.first);
    }
    for (std::size_t r : rows) {
      for (std::size_t c = 0; c < p.value.cols; ++c) {
        detail::probe_coordinate(graph, root, inputs, base_sig, p.value(r, c),
                                 pgrads.at(&p, r, c), opt, leaf);
      }
    }
    report.leaves.push_back(leaf);
  }

  graph.forward(root, inputs);
  for (const LeafReport& leaf : report.leaves) {
    report.max_rel_error = std::max(report.max_rel_error, leaf.max_rel_error);
    report.coords += leaf.coords;
    report.kinks += leaf.kinks;
    report.non_finite = report.non_finite || leaf.non_finite;
  }
  return report;
}

}  // namespace ccn

#pragma once

// Collaborative contrastive learning over the in-page exposure context.
//
// Each (user, trigger, item) triple is projected to a scalar collaborative
// degree s. For a target item, the other items on its page are split by
// click label: context items sharing the target's label form the positive
// set, the rest the negative set. The repulsion loss is an InfoNCE variant
// that pushes s_target away from the negative set; the attraction loss pulls
// it toward the positive set. Both re-weight their set with importance
// weights w_j = softmax(-s'_j / c), which lowers the share of high-degree
// items. The attraction term is scaled by P-/P+, the chance that a random
// same-page pair has different / equal labels.
//
// Range: s = xi * ln(pi * sigmoid(r)) for raw MLP output r, so that
// e^{s/xi} = pi * sigmoid(r) stays inside (0, pi) where cos is monotone.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "ccn/autodiff.hpp"
#include "ccn/error.hpp"
#include "ccn/features.hpp"
#include "ccn/mlp.hpp"

namespace ccn {

// ---------------------------------------------------------------------------
// Collaborative degree

/// E_user (+) (E_item (.) E_trigger).
inline NodeId collaborative_input(Graph& g, NodeId user, NodeId item, NodeId trigger) {
  return g.concat({user, g.mul(item, trigger)});
}

struct CollaborativeDegree {
  NodeId raw = 0;     // MLP output r
  NodeId degree = 0;  // s = xi * ln(pi * sigmoid(r))
};

/// Maps a raw score onto the admissible band: e^{s/xi} in (0, pi).
inline NodeId squash_degree(Graph& g, NodeId raw, double xi) {
  return g.affine(g.log_sigmoid(raw), xi, xi * std::log(std::numbers::pi));
}

inline double squash_degree(double raw, double xi) {
  Graph g;
  const NodeId s = squash_degree(g, g.scalar(raw), xi);
  return g.forward(s).item();
}

inline CollaborativeDegree collaborative_degree(Graph& g, const Mlp& mlp, NodeId user,
                                                NodeId item, NodeId trigger, double xi) {
  CollaborativeDegree out;
  out.raw = g.label(mlp.apply(g, collaborative_input(g, user, item, trigger)), "collab.raw");
  out.degree = squash_degree(g, out.raw, xi);
  return out;
}

/// Degrees for many (user, item, trigger) triples at once: `inputs` are
/// collaborative_input() columns, the result is a k x 1 column of s.
inline NodeId collaborative_degrees(Graph& g, const Mlp& mlp, std::vector<NodeId> inputs,
                                    double xi) {
  const NodeId raw = g.label(mlp.apply_rows(g, g.stack(std::move(inputs))), "collab.raw");
  return squash_degree(g, raw, xi);
}

// ---------------------------------------------------------------------------
// Context split

/// Context indices (0-based, context order) grouped by label agreement with
/// the target.
struct ContextSplit {
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
};

inline ContextSplit split_context_sets(const TrainingSample& sample) {
  ContextSplit split;
  const int y = sample.label();
  for (std::size_t k = 0; k < sample.context_size(); ++k) {
    (sample.context(k).click == y ? split.positive : split.negative).push_back(k);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Importance weights and the two losses

/// w_j = e^{-s_j/c} / sum_k e^{-s_k/c} over a column of degrees.
inline NodeId importance_weights(Graph& g, NodeId degrees, double c) {
  return g.softmax(g.scale(degrees, -1.0 / c));
}

inline std::vector<double> importance_weights(std::span<const double> degrees, double c) {
  if (degrees.empty()) throw Error("importance_weights: empty degree list");
  if (!(c > 0.0)) throw Error("importance_weights: coefficient must be positive");
  Graph g;
  const NodeId w =
      importance_weights(g, g.constant(Tensor::column({degrees.begin(), degrees.end()})), c);
  return g.forward(w).data;
}

/// -log(e^{s/tau} / (e^{s/tau} + M * sum_j w_j e^{s'_j/tau})), with M the
/// negative-set size and w from importance_weights(negatives, tau).
/// Returns nullopt for an empty negative set (contributes nothing).
inline std::optional<NodeId> repulsion_loss(Graph& g, NodeId s_target,
                                            const std::vector<NodeId>& negatives, double tau) {
  if (negatives.empty()) return std::nullopt;
  const double m = static_cast<double>(negatives.size());
  const NodeId negs = g.concat(negatives);
  const NodeId weights = importance_weights(g, negs, tau);
  const NodeId weighted = g.sum(g.mul(weights, g.exp(g.scale(negs, 1.0 / tau))));
  const NodeId s_scaled = g.scale(s_target, 1.0 / tau);
  const NodeId denom = g.add(g.exp(s_scaled), g.scale(weighted, m));
  return g.sub(g.log(denom), s_scaled);
}

/// -log(cos(a - b) / 2 + 1/2) with a = e^{s/xi} and
/// b = sum_j w_j e^{s'_j/xi}, w from importance_weights(positives, xi).
/// Returns nullopt for an empty positive set.
inline std::optional<NodeId> attraction_loss(Graph& g, NodeId s_target,
                                             const std::vector<NodeId>& positives, double xi) {
  if (positives.empty()) return std::nullopt;
  const NodeId pos = g.concat(positives);
  const NodeId weights = importance_weights(g, pos, xi);
  const NodeId b = g.sum(g.mul(weights, g.exp(g.scale(pos, 1.0 / xi))));
  const NodeId a = g.exp(g.scale(s_target, 1.0 / xi));
  return g.scale(g.log(g.affine(g.cos_diff(a, b), 0.5, 0.5)), -1.0);
}

namespace detail {

template <class LossFn>
double scalar_set_loss(double s, std::span<const double> set, double coef, LossFn&& fn) {
  if (!(coef > 0.0)) throw Error("contrastive loss: coefficient must be positive");
  Graph g;
  const NodeId sn = g.scalar(s);
  std::vector<NodeId> nodes;
  for (double v : set) nodes.push_back(g.scalar(v));
  const std::optional<NodeId> loss = fn(g, sn, nodes, coef);
  if (!loss) return 0.0;
  return g.forward(*loss).item();
}

}  // namespace detail

inline double repulsion_loss(double s_target, std::span<const double> negatives, double tau) {
  return detail::scalar_set_loss(
      s_target, negatives, tau,
      [](Graph& g, NodeId s, const std::vector<NodeId>& set, double c) {
        return repulsion_loss(g, s, set, c);
      });
}

inline double attraction_loss(double s_target, std::span<const double> positives, double xi) {
  return detail::scalar_set_loss(
      s_target, positives, xi,
      [](Graph& g, NodeId s, const std::vector<NodeId>& set, double c) {
        return attraction_loss(g, s, set, c);
      });
}

// ---------------------------------------------------------------------------
// Pair-label prior

inline constexpr double kPriorClamp = 1e-3;

struct PairPrior {
  double n0 = 0.0;  // mean unclicked exposures per page
  double n1 = 0.0;  // mean clicked exposures per page
  double p_same = 0.0;
  double p_diff = 0.0;
  double attraction_weight = 0.0;  // P- / max(P+, clamp)
};

inline PairPrior pair_label_prior(double n0, double n1, double clamp = kPriorClamp) {
  if (n0 < 0.0 || n1 < 0.0) throw DataError("pair prior: negative exposure counts");
  const double n = n0 + n1;
  if (!(n > 1.0)) throw DataError("pair prior undefined: N0 + N1 <= 1");
  PairPrior p;
  p.n0 = n0;
  p.n1 = n1;
  p.p_same = (n0 * (n0 - 1.0) + n1 * (n1 - 1.0)) / (n * (n - 1.0));
  p.p_diff = 1.0 - p.p_same;
  p.attraction_weight = p.p_diff / std::max(p.p_same, clamp);
  return p;
}

/// Prior from the dataset-wide mean clicked / unclicked counts per page.
inline PairPrior pair_label_prior(std::span<const ImpressionPage> pages,
                                  double clamp = kPriorClamp) {
  bool has_pair = false;
  double clicked = 0.0;
  double unclicked = 0.0;
  for (const ImpressionPage& p : pages) {
    has_pair = has_pair || p.exposures.size() >= 2;
    for (const Exposure& e : p.exposures) (e.click != 0 ? clicked : unclicked) += 1.0;
  }
  if (!has_pair) throw DataError("pair prior needs a page with at least 2 exposures");
  const double count = static_cast<double>(pages.size());
  return pair_label_prior(unclicked / count, clicked / count, clamp);
}

}  // namespace ccn

#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccn/contrastive.hpp"
#include "ccn/model.hpp"

namespace ccn {

struct LossBreakdown {
  double ce = 0.0;
  double repulsion = 0.0;
  double attraction = 0.0;
  double total = 0.0;
};

/// Batch means of the per-sample contrastive losses. A sample with an empty
/// negative (positive) set adds 0 to the repulsion (attraction) sum but
/// still counts in the batch size.
struct ContrastiveTerms {
  std::optional<NodeId> repulsion;
  std::optional<NodeId> attraction;
};

/// Builds the repulsion and attraction means for the batch. Throws
/// VariantError when the model variant trains without contrastive losses.
inline ContrastiveTerms contrastive_losses(ForwardPass& fp, std::span<const TrainingSample> batch) {
  const Model& m = fp.model();
  if (!m.flags().contrastive()) {
    throw VariantError("variant " + std::string(variant_name(m.variant())) +
                       " does not train contrastive losses");
  }
  Graph& g = fp.graph();
  const double tau = m.hyper().tau;
  const double xi = m.hyper().xi;
  std::vector<NodeId> rep;
  std::vector<NodeId> att;
  for (const TrainingSample& s : batch) {
    const ContextSplit split = split_context_sets(s);
    const NodeId st = fp.degree(*s.page, s.target_index);
    auto degrees = [&](const std::vector<std::size_t>& ks) {
      std::vector<NodeId> out;
      out.reserve(ks.size());
      for (std::size_t k : ks) out.push_back(fp.degree(*s.page, s.context_exposure(k)));
      return out;
    };
    if (m.flags().repulsion) {
      if (auto l = repulsion_loss(g, st, degrees(split.negative), tau)) rep.push_back(*l);
    }
    if (m.flags().attraction) {
      if (auto l = attraction_loss(g, st, degrees(split.positive), xi)) att.push_back(*l);
    }
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  auto mean = [&](std::vector<NodeId>& terms) {
    return terms.empty() ? g.zeros(1, 1) : g.scale(g.sum(g.concat(std::move(terms))), inv_b);
  };
  ContrastiveTerms out;
  if (m.flags().repulsion) out.repulsion = mean(rep);
  if (m.flags().attraction) out.attraction = mean(att);
  return out;
}

/// The full training loss of one mini-batch:
///   L = L_CE + lambda * (L_rep + (P-/P+) * L_att)
/// Terms whose effective weight is zero are not built.
class BatchObjective {
 public:
  /// `reserve_nodes` pre-sizes the tape (e.g. from the previous batch).
  BatchObjective(const Model& model, std::span<const TrainingSample> batch, const PairPrior& prior,
                 std::size_t reserve_nodes = 0)
      : graph_(std::make_unique<Graph>()),
        lambda_(model.hyper().lambda),
        attraction_weight_(prior.attraction_weight) {
    if (batch.empty()) throw DataError("empty batch");
    Graph& g = *graph_;
    g.reserve(reserve_nodes);
    ForwardPass fp(g, model);
    const VariantFlags& f = model.flags();
    const bool want_rep = f.repulsion && lambda_ > 0.0;
    const bool want_att = f.attraction && lambda_ > 0.0 && attraction_weight_ > 0.0;
    if (want_rep || want_att) {
      // every exposure of every page in the batch gets a degree
      std::vector<ForwardPass::ExposureKey> keys;
      for (const TrainingSample& s : batch) {
        for (std::size_t i = 0; i < s.page->exposures.size(); ++i) keys.emplace_back(s.page, i);
      }
      fp.prepare_degrees(keys);
    }

    logits_ = fp.logits(batch);
    Tensor labels(batch.size(), 1);
    for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = s_label(batch[i]);
    // -[y log sigmoid(z) + (1-y) log(1 - sigmoid(z))] = softplus(z) - y z
    const NodeId per_sample = g.sub(g.softplus(logits_), g.mul(g.constant(std::move(labels)), logits_));
    ce_ = g.scale(g.sum(per_sample), 1.0 / static_cast<double>(batch.size()));
    total_ = ce_;

    if (want_rep || want_att) {
      const ContrastiveTerms terms = contrastive_losses(fp, batch);
      std::optional<NodeId> inner;
      if (want_rep) {
        repulsion_ = terms.repulsion;
        inner = *repulsion_;
      }
      if (want_att) {
        attraction_ = terms.attraction;
        const NodeId weighted = g.scale(*attraction_, attraction_weight_);
        inner = inner ? g.add(*inner, weighted) : weighted;
      }
      total_ = g.add(ce_, g.scale(*inner, lambda_));
    }
    g.label(total_, "loss.total");
  }

  Graph& graph() { return *graph_; }
  NodeId total() const { return total_; }
  /// k x 1 column of target logits.
  NodeId logits() const { return logits_; }

  /// Evaluates the graph and returns the loss parts.
  LossBreakdown forward() {
    graph_->forward(total_);
    return values();
  }

  LossBreakdown values() const {
    const Graph& g = *graph_;
    LossBreakdown b;
    b.ce = g.value(ce_).item();
    b.repulsion = repulsion_ ? g.value(*repulsion_).item() : 0.0;
    b.attraction = attraction_ ? g.value(*attraction_).item() : 0.0;
    b.total = g.value(total_).item();
    return b;
  }

  double lambda() const { return lambda_; }
  double attraction_weight() const { return attraction_weight_; }

 private:
  std::unique_ptr<Graph> graph_;
  double lambda_;
  double attraction_weight_;
  NodeId ce_ = 0;
  NodeId total_ = 0;
  std::optional<NodeId> repulsion_;
  std::optional<NodeId> attraction_;
  NodeId logits_ = 0;

  static double s_label(const TrainingSample& s) { return s.label() != 0 ? 1.0 : 0.0; }
};

/// Loss value of a batch under the current parameters.
inline LossBreakdown total_loss(const Model& model, std::span<const TrainingSample> batch,
                                const PairPrior& prior) {
  BatchObjective obj(model, batch, prior);
  return obj.forward();
}

}  // namespace ccn

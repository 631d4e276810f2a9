#pragma once

// Multi-head target attention and the category-filtered long-sequence
// search that together produce the sequence-interaction block H_tsi.

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ccn/autodiff.hpp"
#include "ccn/features.hpp"

namespace ccn {

/// Query/key/value projections for all heads, stored in x out layout: the
/// columns [i*d/h, (i+1)*d/h) of each d x d matrix belong to head i.
struct MhtaParams {
  std::size_t dim = 0;
  std::size_t heads = 1;
  Parameter wq;
  Parameter wk;
  Parameter wv;

  MhtaParams() = default;

  MhtaParams(std::string prefix, std::size_t d, std::size_t h, std::mt19937_64& rng)
      : dim(d), heads(h) {
    if (h == 0 || d % h != 0) {
      throw Error("mhta: dim " + std::to_string(d) + " not divisible by heads " + std::to_string(h));
    }
    const double a = std::sqrt(6.0 / static_cast<double>(d + d));
    std::uniform_real_distribution<double> dist(-a, a);
    for (Parameter* p : {&wq, &wk, &wv}) {
      p->value = Tensor(d, d);
      for (double& v : p->value.data) v = dist(rng);
    }
    wq.name = prefix + ".wq";
    wk.name = prefix + ".wk";
    wv.name = prefix + ".wv";
  }

  std::size_t head_dim() const { return dim / heads; }
  std::vector<Parameter*> parameters() { return {&wq, &wk, &wv}; }
};

/// Optional view into the attention internals, for inspection in tests.
struct MhtaTrace {
  std::vector<NodeId> weights;  // one softmax node per head
};

/// Attention of one query over the rows of `sequence` (n x d, n >= 1).
/// Per head: softmax((W_Q q)^T (W_K e_j) / sqrt(d/h)) weighted sum of W_V e_j.
/// Built from primitive ops; with a trace it exposes the per-head weights.
inline NodeId mhta_rows_composite(Graph& g, NodeId query, NodeId sequence, std::size_t n,
                                  const MhtaParams& p, MhtaTrace* trace = nullptr) {
  const std::size_t dh = p.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const NodeId q = g.matmul(g.param(p.wq), query, /*trans_a=*/true);
  const NodeId k = g.matmul(sequence, g.param(p.wk));
  const NodeId v = g.matmul(sequence, g.param(p.wv));
  std::vector<NodeId> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const bool whole = p.heads == 1;
    const NodeId qh = whole ? q : g.slice_rows(q, h * dh, dh);
    const NodeId kh = whole ? k : g.slice(k, 0, n, h * dh, dh);
    const NodeId vh = whole ? v : g.slice(v, 0, n, h * dh, dh);
    const NodeId w = g.softmax(g.scale(g.matmul(kh, qh), inv_sqrt));
    if (trace != nullptr) trace->weights.push_back(w);
    heads.push_back(g.matmul(vh, w, /*trans_a=*/true));
  }
  return g.concat(std::move(heads));
}

/// Same function as a single fused tape node, unless a trace is requested.
inline NodeId mhta_rows(Graph& g, NodeId query, NodeId sequence, std::size_t n,
                        const MhtaParams& p, MhtaTrace* trace = nullptr) {
  if (trace != nullptr) return mhta_rows_composite(g, query, sequence, n, p, trace);
  return g.attention(query, sequence, g.param(p.wq), g.param(p.wk), g.param(p.wv), p.heads);
}

/// MHTA over a padded sequence of d-vectors. Masked entries are dropped
/// before attention, so they have no influence at all; a fully masked
/// sequence yields the zero vector.
inline NodeId mhta(Graph& g, NodeId query, std::span<const NodeId> sequence,
                   std::span<const std::uint8_t> mask, const MhtaParams& p,
                   MhtaTrace* trace = nullptr) {
  if (mask.size() != sequence.size()) throw ShapeError("mhta: mask length differs from sequence");
  std::vector<NodeId> rows;
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    if (mask[i] != 0) rows.push_back(sequence[i]);
  }
  if (rows.empty()) return g.zeros(p.dim, 1);
  const std::size_t n = rows.size();
  return mhta_rows(g, query, g.stack(std::move(rows)), n, p, trace);
}

/// Indices of the items sharing the anchor's category, in original order.
inline std::vector<std::size_t> sim_category_search(std::span<const ItemFeatures> long_sequence,
                                                    const ItemFeatures& anchor) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < long_sequence.size(); ++i) {
    if (long_sequence[i].category_id == anchor.category_id) out.push_back(i);
  }
  return out;
}

/// The four attention blocks plus the shared linear map that projects the
/// 3d-wide item embeddings down to the attention width d.
struct TsiParams {
  Parameter item_proj;  // 3d x d
  MhtaParams target_short;
  MhtaParams trigger_short;
  MhtaParams target_long;
  MhtaParams trigger_long;

  TsiParams() = default;

  TsiParams(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
    item_proj.name = "tsi.item_proj";
    item_proj.value = Tensor(3 * d, d);
    const double a = std::sqrt(6.0 / static_cast<double>(3 * d + d));
    std::uniform_real_distribution<double> dist(-a, a);
    for (double& v : item_proj.value.data) v = dist(rng);
    target_short = MhtaParams("tsi.target_short", d, heads, rng);
    trigger_short = MhtaParams("tsi.trigger_short", d, heads, rng);
    target_long = MhtaParams("tsi.target_long", d, heads, rng);
    trigger_long = MhtaParams("tsi.trigger_long", d, heads, rng);
  }

  std::size_t dim() const { return target_short.dim; }
  std::size_t output_width() const { return 4 * dim(); }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&item_proj};
    for (MhtaParams* m : {&target_short, &trigger_short, &target_long, &trigger_long}) {
      for (Parameter* p : m->parameters()) out.push_back(p);
    }
    return out;
  }
};

namespace detail {

/// Stacks the given 3d-wide item nodes and projects them to n x d.
inline NodeId project_rows(Graph& g, std::vector<NodeId> items, const Parameter& proj) {
  return g.matmul(g.stack(std::move(items)), g.param(proj));
}

}  // namespace detail

/// H_tsi = concat(target x short, trigger x short, target x long_sub(target),
/// trigger x long_sub(trigger)), 4d wide. Empty (sub)sequences give zero
/// blocks.
inline NodeId sequence_interaction_repr(Embedder& emb, const TrainingSample& sample,
                                        const SampleTensors& tensors, const SequenceCaps& caps,
                                        const TsiParams& p) {
  Graph& g = emb.graph();
  const std::size_t d = p.dim();
  const NodeId target_q = g.matmul(g.param(p.item_proj), tensors.target, /*trans_a=*/true);
  const NodeId trigger_q = g.matmul(g.param(p.item_proj), tensors.trigger, /*trans_a=*/true);

  std::vector<NodeId> blocks;
  blocks.reserve(4);

  std::vector<NodeId> short_items = tensors.short_seq.active();
  if (short_items.empty()) {
    blocks.push_back(g.zeros(d, 1));
    blocks.push_back(g.zeros(d, 1));
  } else {
    const std::size_t n = short_items.size();
    const NodeId rows = detail::project_rows(g, std::move(short_items), p.item_proj);
    blocks.push_back(mhta_rows(g, target_q, rows, n, p.target_short));
    blocks.push_back(mhta_rows(g, trigger_q, rows, n, p.trigger_short));
  }

  const auto long_seq = capped(sample.page->sequences.long_term, caps.long_cap);
  auto long_block = [&](const ItemFeatures& anchor, NodeId query, const MhtaParams& mp) {
    const std::vector<std::size_t> hits = sim_category_search(long_seq, anchor);
    if (hits.empty()) return g.zeros(d, 1);
    std::vector<NodeId> items;
    items.reserve(hits.size());
    for (std::size_t i : hits) items.push_back(tensors.long_seq.items[i]);
    const NodeId rows = detail::project_rows(g, std::move(items), p.item_proj);
    return mhta_rows(g, query, rows, hits.size(), mp);
  };
  blocks.push_back(long_block(sample.target().item, target_q, p.target_long));
  blocks.push_back(long_block(sample.page->trigger, trigger_q, p.trigger_long));
  return g.concat(std::move(blocks));
}

}  // namespace ccn

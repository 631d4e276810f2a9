#pragma once

// The CTR model: embedding layer, sequence interactions, collaborative
// module and prediction MLP, plus the ablation variants that switch parts of
// it off. The prediction path never reads context items; they only enter
// through the training objective in objective.hpp.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ccn/attention.hpp"
#include "ccn/autodiff.hpp"
#include "ccn/contrastive.hpp"
#include "ccn/features.hpp"
#include "ccn/mlp.hpp"

namespace ccn {

struct HyperParams {
  // shape
  std::size_t dim = 16;
  std::size_t heads = 4;
  std::size_t short_cap = 20;
  std::size_t long_cap = 100;
  std::size_t item_buckets = 1000;
  std::size_t category_buckets = 100;
  std::size_t seller_buckets = 200;
  std::size_t user_buckets = 5000;
  std::vector<std::size_t> profile_buckets = {16, 4};
  std::vector<std::size_t> pred_hidden = {64, 32};
  std::vector<std::size_t> collab_hidden = {32};

  // objective
  double tau = 0.5;
  double xi = 0.8;
  double lambda = 0.1;
  double prior_clamp = kPriorClamp;

  // optimization
  double learning_rate = 0.05;
  double lr_decay = 0.95;
  double adagrad_epsilon = 1e-8;
  std::size_t batch_size = 64;

  /// Industrial-scale optimizer settings.
  static HyperParams industrial_scale() {
    HyperParams hp;
    hp.learning_rate = 0.001;
    hp.batch_size = 1024;
    return hp;
  }

  EmbeddingConfig embedding() const {
    return {dim, item_buckets, category_buckets, seller_buckets, user_buckets, profile_buckets};
  }
  SequenceCaps caps() const { return {short_cap, long_cap}; }

  void validate() const {
    auto fail = [](const std::string& what) { throw DataError("hyperparameter " + what); };
    if (dim == 0) fail("dim must be positive");
    if (heads == 0 || dim % heads != 0) fail("dim must be divisible by heads");
    if (!(tau > 0.0)) fail("tau must be positive");
    if (!(xi > 0.0)) fail("xi must be positive");
    if (!(lambda >= 0.0)) fail("lambda must be nonnegative");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(lr_decay > 0.0)) fail("lr_decay must be positive");
    if (!(prior_clamp > 0.0)) fail("prior_clamp must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
  }
};

enum class Variant {
  kTanMinus,         // no collaborative module, no sequence interactions
  kTan,              // full backbone, no contrastive losses
  kCcnNoTsi,         // contrastive, without sequence interactions
  kCcnNoAttraction,  // repulsion only
  kCcnNoRepulsion,   // attraction only
  kCcn,
};

inline constexpr Variant kAllVariants[] = {Variant::kTanMinus,        Variant::kTan,
                                           Variant::kCcnNoTsi,        Variant::kCcnNoAttraction,
                                           Variant::kCcnNoRepulsion,  Variant::kCcn};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kTanMinus: return "tan_minus";
    case Variant::kTan: return "tan";
    case Variant::kCcnNoTsi: return "ccn_no_tsi";
    case Variant::kCcnNoAttraction: return "ccn_no_attraction";
    case Variant::kCcnNoRepulsion: return "ccn_no_repulsion";
    case Variant::kCcn: return "ccn";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw DataError("unknown variant '" + std::string(name) + "'");
}

struct VariantFlags {
  bool collaborative = true;
  bool tsi = true;
  bool repulsion = true;
  bool attraction = true;

  bool contrastive() const { return repulsion || attraction; }
};

inline VariantFlags variant_flags(Variant v) {
  switch (v) {
    case Variant::kTanMinus: return {false, false, false, false};
    case Variant::kTan: return {true, true, false, false};
    case Variant::kCcnNoTsi: return {true, false, true, true};
    case Variant::kCcnNoAttraction: return {true, true, true, false};
    case Variant::kCcnNoRepulsion: return {true, true, false, true};
    case Variant::kCcn: return {true, true, true, true};
  }
  return {};
}

class Model {
 public:
  /// Initializes every block from one seeded stream in a fixed order, so
  /// variants that share a block also share its initial values.
  Model(HyperParams hp, Variant variant, std::uint64_t seed)
      : hp_(std::move(hp)), variant_(variant), flags_(variant_flags(variant)), seed_(seed) {
    hp_.validate();
    std::mt19937_64 rng(seed);
    emb_ = EmbeddingTables(hp_.embedding(), rng);
    tsi_ = TsiParams(hp_.dim, hp_.heads, rng);
    const EmbeddingConfig ec = hp_.embedding();
    collab_ = Mlp("collab", ec.user_width() + ec.item_width(), hp_.collab_hidden, 1, rng);
    pred_ = Mlp("pred", prediction_input_width(), hp_.pred_hidden, 1, rng);
  }

  const HyperParams& hyper() const { return hp_; }
  Variant variant() const { return variant_; }
  const VariantFlags& flags() const { return flags_; }
  std::uint64_t init_seed() const { return seed_; }

  const EmbeddingTables& embeddings() const { return emb_; }
  const TsiParams& tsi() const { return tsi_; }
  const Mlp& collaborative() const { return collab_; }
  const Mlp& prediction() const { return pred_; }
  Mlp& prediction() { return pred_; }
  Mlp& collaborative() { return collab_; }
  TsiParams& tsi() { return tsi_; }
  EmbeddingTables& embeddings() { return emb_; }

  /// Active parameter by name, or nullptr.
  Parameter* find_parameter(std::string_view name) {
    for (Parameter* p : parameters()) {
      if (p->name == name) return p;
    }
    return nullptr;
  }

  /// |E_user| + |E_target| + |E_trigger| (+ |H_tsi|) (+ 1 for s_target).
  std::size_t prediction_input_width() const {
    const EmbeddingConfig ec = hp_.embedding();
    std::size_t w = ec.user_width() + 2 * ec.item_width();
    if (flags_.tsi) w += 4 * hp_.dim;
    if (flags_.collaborative) w += 1;
    return w;
  }

  /// The learnable arrays the variant actually uses, in a stable order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = emb_.parameters();
    if (flags_.tsi) {
      for (Parameter* p : tsi_.parameters()) out.push_back(p);
    }
    if (flags_.collaborative) {
      for (Parameter* p : collab_.parameters()) out.push_back(p);
    }
    for (Parameter* p : pred_.parameters()) out.push_back(p);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
    return out;
  }

 private:
  HyperParams hp_;
  Variant variant_;
  VariantFlags flags_;
  std::uint64_t seed_;
  EmbeddingTables emb_;
  TsiParams tsi_;
  Mlp collab_;
  Mlp pred_;
};

/// Builds model computations for any number of samples on one graph,
/// sharing embedding lookups and collaborative degrees between them. Work
/// is batched: degrees and logits are computed as stacked rows through one
/// MLP pass each.
class ForwardPass {
 public:
  using ExposureKey = std::pair<const ImpressionPage*, std::size_t>;

  ForwardPass(Graph& g, const Model& model)
      : g_(g), model_(model), emb_(g, model.embeddings()) {}

  Graph& graph() { return g_; }
  const Model& model() const { return model_; }
  Embedder& embedder() { return emb_; }

  /// Computes the collaborative degrees of all listed exposures in one pass.
  /// Keys that already have a degree are skipped.
  void prepare_degrees(std::span<const ExposureKey> keys) {
    require_collaborative();
    std::vector<ExposureKey> todo;
    std::vector<NodeId> inputs;
    for (const ExposureKey& key : keys) {
      if (degrees_.contains(key) ||
          std::find(todo.begin(), todo.end(), key) != todo.end()) {
        continue;
      }
      const ImpressionPage& page = *key.first;
      todo.push_back(key);
      inputs.push_back(collaborative_input(g_, emb_.user(page.user),
                                           emb_.item(page.exposures[key.second].item),
                                           emb_.item(page.trigger)));
    }
    if (todo.empty()) return;
    const NodeId col =
        collaborative_degrees(g_, model_.collaborative(), std::move(inputs), model_.hyper().xi);
    for (std::size_t k = 0; k < todo.size(); ++k) {
      degrees_.emplace(todo[k], todo.size() == 1 ? col : g_.slice_rows(col, k, 1));
    }
  }

  /// Collaborative degree s of exposure `index` on `page`.
  NodeId degree(const ImpressionPage& page, std::size_t index) {
    const ExposureKey key{&page, index};
    if (auto it = degrees_.find(key); it != degrees_.end()) return it->second;
    prepare_degrees(std::span<const ExposureKey>(&key, 1));
    return degrees_.at(key);
  }

  /// Pre-sigmoid CTR logits of the samples' targets as a k x 1 column.
  /// Reads the user, trigger, target and behavior sequences only.
  NodeId logits(std::span<const TrainingSample> samples) {
    if (samples.empty()) throw DataError("no samples to score");
    if (model_.flags().collaborative) {
      std::vector<ExposureKey> keys;
      keys.reserve(samples.size());
      for (const TrainingSample& s : samples) keys.emplace_back(s.page, s.target_index);
      prepare_degrees(keys);
    }
    std::vector<NodeId> rows;
    rows.reserve(samples.size());
    for (const TrainingSample& s : samples) rows.push_back(prediction_input(s));
    return g_.label(model_.prediction().apply_rows(g_, g_.stack(std::move(rows))), "ctr.logit");
  }

  NodeId logit(const TrainingSample& sample) {
    return logits(std::span<const TrainingSample>(&sample, 1));
  }

 private:
  void require_collaborative() const {
    if (!model_.flags().collaborative) {
      throw VariantError(std::string("variant ") + std::string(variant_name(model_.variant())) +
                         " has no collaborative module");
    }
  }

  /// user, target, trigger (, H_tsi) (, s_target) as one column.
  NodeId prediction_input(const TrainingSample& sample) {
    const SampleTensors t = build_sample_tensors(emb_, sample, model_.hyper().caps(),
                                                 /*with_context=*/false);
    std::vector<NodeId> parts{t.user, t.target, t.trigger};
    if (model_.flags().tsi) {
      parts.push_back(sequence_interaction_repr(emb_, sample, t, model_.hyper().caps(),
                                                model_.tsi()));
    }
    if (model_.flags().collaborative) parts.push_back(degree(*sample.page, sample.target_index));
    return g_.concat(std::move(parts));
  }

  Graph& g_;
  const Model& model_;
  Embedder emb_;
  std::map<ExposureKey, NodeId> degrees_;
};

/// Probability that the user clicks `target`, given the trigger and the
/// user's behavior sequences. No context items are involved.
inline double predict_ctr(const Model& model, const UserProfile& user, const ItemFeatures& trigger,
                          const ItemFeatures& target, const BehaviorSequence& sequences) {
  ImpressionPage page;
  page.user = user;
  page.trigger = trigger;
  page.exposures = {Exposure{target, 0}};
  page.sequences = sequences;
  Graph g;
  ForwardPass fp(g, model);
  const NodeId y = g.sigmoid(fp.logit({&page, 0}));
  return g.forward(y).item();
}

/// Scores every exposure of each page (context-free, same values as
/// predict_ctr). One graph per page.
inline std::vector<double> score_pages(const Model& model, std::span<const ImpressionPage> pages) {
  std::vector<double> scores;
  for (const ImpressionPage& page : pages) {
    Graph g;
    ForwardPass fp(g, model);
    std::vector<TrainingSample> samples;
    for (std::size_t i = 0; i < page.exposures.size(); ++i) samples.push_back({&page, i});
    const NodeId y = g.sigmoid(fp.logits(samples));
    for (double v : g.forward(y).data) scores.push_back(v);
  }
  return scores;
}

}  // namespace ccn

#pragma once

// Data model for in-page exposures and the embedding layer that maps their
// categorical ids into the latent space.

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "ccn/autodiff.hpp"
#include "ccn/error.hpp"

namespace ccn {

using Id = std::uint64_t;

struct ItemFeatures {
  Id item_id = 0;
  Id category_id = 0;
  Id seller_id = 0;

  friend auto operator<=>(const ItemFeatures&, const ItemFeatures&) = default;
};

struct UserProfile {
  Id user_id = 0;
  std::vector<Id> profile_fields;  // e.g. age band, gender band

  friend bool operator==(const UserProfile&, const UserProfile&) = default;
};

/// Items are ordered most recent first.
struct BehaviorSequence {
  std::vector<ItemFeatures> short_term;
  std::vector<ItemFeatures> long_term;

  friend bool operator==(const BehaviorSequence&, const BehaviorSequence&) = default;
};

struct Exposure {
  ItemFeatures item;
  int click = 0;

  friend bool operator==(const Exposure&, const Exposure&) = default;
};

struct ImpressionPage {
  Id page_id = 0;
  UserProfile user;
  ItemFeatures trigger;
  std::vector<Exposure> exposures;
  BehaviorSequence sequences;

  friend bool operator==(const ImpressionPage&, const ImpressionPage&) = default;
};

/// Throws DataError when a page breaks the exposure invariants: fewer than
/// `min_exposures` items, labels outside {0,1}, or the trigger item shown
/// among its own exposures.
inline void validate_page(const ImpressionPage& page, std::size_t min_exposures = 2) {
  const std::string where = "page " + std::to_string(page.page_id) + ": ";
  if (page.exposures.size() < min_exposures) {
    throw DataError(where + "needs at least " + std::to_string(min_exposures) +
                    " exposures, has " + std::to_string(page.exposures.size()));
  }
  for (const Exposure& e : page.exposures) {
    if (e.click != 0 && e.click != 1) throw DataError(where + "click_label must be 0 or 1");
    if (e.item.item_id == page.trigger.item_id) {
      throw DataError(where + "trigger item " + std::to_string(page.trigger.item_id) +
                      " appears among its exposures");
    }
  }
}

/// One exposure of a page acting as the target; every other exposure on the
/// same page is context. Refers to a page owned elsewhere.
struct TrainingSample {
  const ImpressionPage* page = nullptr;
  std::size_t target_index = 0;

  const Exposure& target() const { return page->exposures[target_index]; }
  int label() const { return target().click; }
  std::size_t context_size() const { return page->exposures.size() - 1; }

  /// Index into page->exposures of the k-th context item.
  std::size_t context_exposure(std::size_t k) const { return k < target_index ? k : k + 1; }
  const Exposure& context(std::size_t k) const { return page->exposures[context_exposure(k)]; }
};

/// Every exposure takes one turn as the target.
inline std::vector<TrainingSample> expand_samples(std::span<const ImpressionPage> pages) {
  std::vector<TrainingSample> out;
  for (const ImpressionPage& p : pages) {
    for (std::size_t i = 0; i < p.exposures.size(); ++i) out.push_back({&p, i});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding tables

struct EmbeddingConfig {
  std::size_t dim = 16;
  std::size_t item_buckets = 1000;
  std::size_t category_buckets = 100;
  std::size_t seller_buckets = 200;
  std::size_t user_buckets = 5000;
  std::vector<std::size_t> profile_buckets = {16, 4};

  std::size_t item_width() const { return 3 * dim; }
  std::size_t user_width() const { return (1 + profile_buckets.size()) * dim; }
};

inline constexpr double kEmbeddingInitRange = 0.05;

/// One bucket_count x d table per feature family. Families are named
/// "item_id", "category_id", "seller_id", "user_id", "profile_<k>".
class EmbeddingTables {
 public:
  EmbeddingTables() = default;

  EmbeddingTables(const EmbeddingConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    add("item_id", cfg.item_buckets, rng);
    add("category_id", cfg.category_buckets, rng);
    add("seller_id", cfg.seller_buckets, rng);
    add("user_id", cfg.user_buckets, rng);
    for (std::size_t k = 0; k < cfg.profile_buckets.size(); ++k) {
      add("profile_" + std::to_string(k), cfg.profile_buckets[k], rng);
    }
  }

  const EmbeddingConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.dim; }

  const Parameter& table(std::string_view family) const {
    for (const Parameter& p : tables_) {
      if (p.name == kPrefix + std::string(family)) return p;
    }
    throw Error("unknown embedding family '" + std::string(family) + "'");
  }

  const Parameter& item() const { return tables_[0]; }
  const Parameter& category() const { return tables_[1]; }
  const Parameter& seller() const { return tables_[2]; }
  const Parameter& user() const { return tables_[3]; }
  const Parameter& profile(std::size_t k) const { return tables_.at(4 + k); }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (Parameter& p : tables_) out.push_back(&p);
    return out;
  }
  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (const Parameter& p : tables_) out.push_back(&p);
    return out;
  }

 private:
  static constexpr const char* kPrefix = "emb.";

  void add(std::string family, std::size_t buckets, std::mt19937_64& rng) {
    if (buckets == 0) throw Error("embedding family '" + family + "' needs at least one bucket");
    Parameter p{kPrefix + family, Tensor(buckets, cfg_.dim)};
    std::uniform_real_distribution<double> dist(-kEmbeddingInitRange, kEmbeddingInitRange);
    for (double& v : p.value.data) v = dist(rng);
    tables_.push_back(std::move(p));
  }

  EmbeddingConfig cfg_;
  std::vector<Parameter> tables_;
};

/// Looks up `id` in the named family, hashing out-of-range ids into
/// bucket (id mod bucket_count).
inline NodeId embed_lookup(Graph& g, const EmbeddingTables& tables, Id id,
                           std::string_view family) {
  const Parameter& t = tables.table(family);
  return g.gather(t, static_cast<std::size_t>(id % t.value.rows));
}

/// Caches item and user embeddings within one graph, so an item that shows
/// up several times in a batch maps onto a single node.
class Embedder {
 public:
  Embedder(Graph& g, const EmbeddingTables& tables) : g_(g), tables_(tables) {}

  Graph& graph() { return g_; }
  const EmbeddingTables& tables() const { return tables_; }

  /// concat(item_id, category_id, seller_id) embeddings: 3d wide.
  NodeId item(const ItemFeatures& f) {
    if (auto it = items_.find(f); it != items_.end()) return it->second;
    NodeId id = g_.concat({lookup(tables_.item(), f.item_id), lookup(tables_.category(), f.category_id),
                           lookup(tables_.seller(), f.seller_id)});
    items_.emplace(f, id);
    return id;
  }

  /// concat(user_id, profile fields...) embeddings.
  NodeId user(const UserProfile& u) {
    const std::size_t fields = tables_.config().profile_buckets.size();
    if (u.profile_fields.size() != fields) {
      throw DataError("user " + std::to_string(u.user_id) + " has " +
                      std::to_string(u.profile_fields.size()) + " profile fields, schema has " +
                      std::to_string(fields));
    }
    auto key = std::make_pair(u.user_id, u.profile_fields);
    if (auto it = users_.find(key); it != users_.end()) return it->second;
    std::vector<NodeId> parts{lookup(tables_.user(), u.user_id)};
    for (std::size_t k = 0; k < fields; ++k) {
      parts.push_back(lookup(tables_.profile(k), u.profile_fields[k]));
    }
    NodeId id = g_.concat(std::move(parts));
    users_.emplace(std::move(key), id);
    return id;
  }

  NodeId zero_item() { return g_.zeros(tables_.config().item_width(), 1); }

 private:
  NodeId lookup(const Parameter& t, Id id) {
    return g_.gather(t, static_cast<std::size_t>(id % t.value.rows));
  }

  Graph& g_;
  const EmbeddingTables& tables_;
  std::map<ItemFeatures, NodeId> items_;
  std::map<std::pair<Id, std::vector<Id>>, NodeId> users_;
};

struct SequenceCaps {
  std::size_t short_cap = 20;
  std::size_t long_cap = 100;
};

/// A behavior sequence padded or truncated to its cap. mask[i] is 1 for
/// real entries; padded slots hold the shared zero node.
struct PaddedSequence {
  std::vector<NodeId> items;
  std::vector<std::uint8_t> mask;

  std::vector<NodeId> active() const {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (mask[i] != 0) out.push_back(items[i]);
    }
    return out;
  }
};

struct SampleTensors {
  NodeId user = 0;
  NodeId target = 0;
  NodeId trigger = 0;
  PaddedSequence short_seq;
  PaddedSequence long_seq;
  std::vector<NodeId> context;  // in context order (page order minus target)
};

/// Keeps the `cap` most recent items (sequences are stored most recent first).
inline std::span<const ItemFeatures> capped(std::span<const ItemFeatures> seq, std::size_t cap) {
  return seq.first(std::min(seq.size(), cap));
}

inline PaddedSequence pad_sequence(Embedder& emb, std::span<const ItemFeatures> seq,
                                   std::size_t cap) {
  PaddedSequence out;
  out.items.reserve(cap);
  out.mask.reserve(cap);
  for (const ItemFeatures& f : capped(seq, cap)) {
    out.items.push_back(emb.item(f));
    out.mask.push_back(1);
  }
  while (out.items.size() < cap) {
    out.items.push_back(emb.zero_item());
    out.mask.push_back(0);
  }
  return out;
}

inline SampleTensors build_sample_tensors(Embedder& emb, const TrainingSample& sample,
                                          const SequenceCaps& caps, bool with_context = true) {
  const ImpressionPage& page = *sample.page;
  SampleTensors t;
  t.user = emb.user(page.user);
  t.target = emb.item(sample.target().item);
  t.trigger = emb.item(page.trigger);
  t.short_seq = pad_sequence(emb, page.sequences.short_term, caps.short_cap);
  t.long_seq = pad_sequence(emb, page.sequences.long_term, caps.long_cap);
  if (with_context) {
    for (std::size_t k = 0; k < sample.context_size(); ++k) {
      t.context.push_back(emb.item(sample.context(k).item));
    }
  }
  return t;
}

}  // namespace ccn

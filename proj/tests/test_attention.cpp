#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "ccn/attention.hpp"

using namespace ccn;
using Catch::Approx;

namespace {

void set_identity(Parameter& p) {
  std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
  for (std::size_t i = 0; i < std::min(p.value.rows, p.value.cols); ++i) p.value(i, i) = 1.0;
}

MhtaParams identity_params(std::size_t d, std::size_t h) {
  std::mt19937_64 rng(0);
  MhtaParams p("m", d, h, rng);
  set_identity(p.wq);
  set_identity(p.wk);
  set_identity(p.wv);
  return p;
}

}  // namespace

TEST_CASE("single-element attention returns the value") {
  const MhtaParams p = identity_params(2, 1);
  Graph g;
  const NodeId e = g.constant(Tensor::column({2.0, 0.0}));
  const NodeId q = g.constant(Tensor::column({-0.3, 5.0}));
  const std::vector<NodeId> seq{e};
  const std::vector<std::uint8_t> mask{1};
  const NodeId out = mhta(g, q, seq, mask, p);
  CHECK(g.forward(out).data == std::vector<double>{2.0, 0.0});
}

TEST_CASE("two-element attention by hand") {
  const MhtaParams p = identity_params(2, 1);
  Graph g;
  const NodeId q = g.constant(Tensor::column({1.0, 0.0}));
  const std::vector<NodeId> seq{g.constant(Tensor::column({1.0, 0.0})),
                                g.constant(Tensor::column({0.0, 1.0}))};
  const std::vector<std::uint8_t> mask{1, 1};
  MhtaTrace trace;
  const NodeId traced = mhta(g, q, seq, mask, p, &trace);
  const NodeId fused = mhta(g, q, seq, mask, p);
  g.forward();
  // softmax([1/sqrt 2, 0])
  const double a = std::exp(1.0 / std::sqrt(2.0));
  const double w0 = a / (a + 1.0);
  REQUIRE(trace.weights.size() == 1);
  CHECK(g.value(trace.weights[0])[0] == Approx(w0).epsilon(1e-14));
  CHECK(g.value(trace.weights[0])[1] == Approx(1.0 - w0).epsilon(1e-14));
  CHECK(w0 == Approx(0.6698).margin(1e-4));
  CHECK(g.value(traced)[0] == Approx(w0).epsilon(1e-14));
  CHECK(g.value(fused)[0] == Approx(w0).epsilon(1e-14));
  CHECK(g.value(fused)[1] == Approx(1.0 - w0).epsilon(1e-14));
}

TEST_CASE("fully masked sequence gives the zero vector") {
  const MhtaParams p = identity_params(2, 1);
  Graph g;
  const NodeId q = g.constant(Tensor::column({1.0, 0.0}));
  const std::vector<NodeId> seq{g.constant(Tensor::column({1.0, 3.0}))};
  const std::vector<std::uint8_t> mask{0};
  CHECK(g.forward(mhta(g, q, seq, mask, p)).data == std::vector<double>{0.0, 0.0});
}

TEST_CASE("masked entries have no influence") {
  std::mt19937_64 rng(9);
  const MhtaParams p("m", 4, 2, rng);
  std::normal_distribution<double> nd;
  Graph g;
  auto rnd = [&]() {
    Tensor t(4, 1);
    for (double& v : t.data) v = nd(rng);
    return g.constant(t);
  };
  const NodeId q = rnd();
  std::vector<NodeId> seq{rnd(), rnd(), rnd()};
  const NodeId base = mhta(g, q, seq, std::vector<std::uint8_t>{1, 1, 1}, p);
  seq.push_back(rnd());
  seq.push_back(rnd());
  const NodeId padded = mhta(g, q, seq, std::vector<std::uint8_t>{1, 1, 1, 0, 0}, p);
  g.forward();
  CHECK(g.value(base).data == g.value(padded).data);
}

TEST_CASE("attention is invariant to sequence order") {
  std::mt19937_64 rng(10);
  const MhtaParams p("m", 4, 2, rng);
  std::normal_distribution<double> nd;
  Graph g;
  std::vector<NodeId> seq;
  for (int i = 0; i < 5; ++i) {
    Tensor t(4, 1);
    for (double& v : t.data) v = nd(rng);
    seq.push_back(g.constant(t));
  }
  Tensor qt(4, 1);
  for (double& v : qt.data) v = nd(rng);
  const NodeId q = g.constant(qt);
  const std::vector<std::uint8_t> mask(5, 1);
  const NodeId a = mhta(g, q, seq, mask, p);
  std::vector<NodeId> perm{seq[3], seq[0], seq[4], seq[2], seq[1]};
  const NodeId b = mhta(g, q, perm, mask, p);
  g.forward();
  for (std::size_t i = 0; i < 4; ++i) CHECK(g.value(a)[i] == Approx(g.value(b)[i]).epsilon(1e-13));
}

TEST_CASE("category search") {
  const std::vector<ItemFeatures> seq{{1, 5, 0}, {2, 7, 0}, {3, 5, 0}};
  CHECK(sim_category_search(seq, {9, 5, 0}) == std::vector<std::size_t>{0, 2});
  CHECK(sim_category_search(seq, {9, 8, 0}).empty());
  const std::vector<ItemFeatures> same{{1, 5, 0}, {2, 5, 0}};
  CHECK(sim_category_search(same, {9, 5, 0}) == std::vector<std::size_t>{0, 1});
  CHECK(sim_category_search({}, {9, 5, 0}).empty());
}

namespace {

struct TsiFixture {
  EmbeddingConfig cfg;
  std::mt19937_64 rng{3};
  EmbeddingTables tables;
  TsiParams tsi;

  TsiFixture() {
    cfg.dim = 2;
    cfg.item_buckets = 50;
    cfg.category_buckets = 10;
    cfg.seller_buckets = 10;
    cfg.user_buckets = 10;
    cfg.profile_buckets = {2};
    tables = EmbeddingTables(cfg, rng);
    tsi = TsiParams(2, 1, rng);
    // item_proj keeps the item-id block of each item embedding
    set_identity(tsi.item_proj);
    for (MhtaParams* m : {&tsi.target_short, &tsi.trigger_short, &tsi.target_long, &tsi.trigger_long}) {
      set_identity(m->wq);
      set_identity(m->wk);
      set_identity(m->wv);
    }
  }
};

}  // namespace

TEST_CASE("sequence interaction block") {
  TsiFixture f;
  ImpressionPage page;
  page.user = {1, {0}};
  page.trigger = {10, 1, 1};
  page.exposures = {{{20, 2, 2}, 1}, {{21, 3, 3}, 0}};
  const SequenceCaps caps{4, 6};

  SECTION("all sequences empty") {
    Graph g;
    Embedder emb(g, f.tables);
    const TrainingSample s{&page, 0};
    const SampleTensors t = build_sample_tensors(emb, s, caps, false);
    const NodeId h = sequence_interaction_repr(emb, s, t, caps, f.tsi);
    const Tensor& v = g.forward(h);
    CHECK(v.rows == 8);
    for (double x : v.data) CHECK(x == 0.0);
  }

  SECTION("short sequence of one item, long sequence without matching categories") {
    page.sequences.short_term = {{30, 4, 4}};
    page.sequences.long_term = {{31, 6, 5}, {32, 7, 6}};
    Parameter& items = const_cast<Parameter&>(f.tables.item());
    items.value(30, 0) = 1.0;
    items.value(30, 1) = 0.0;
    Graph g;
    Embedder emb(g, f.tables);
    const TrainingSample s{&page, 0};
    const SampleTensors t = build_sample_tensors(emb, s, caps, false);
    const NodeId h = sequence_interaction_repr(emb, s, t, caps, f.tsi);
    const Tensor& v = g.forward(h);
    CHECK(v.data == std::vector<double>{1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0});
  }

  SECTION("long block attends to same-category items only") {
    page.sequences.long_term = {{31, 2, 5}, {32, 7, 6}};
    Parameter& items = const_cast<Parameter&>(f.tables.item());
    items.value(31, 0) = 0.25;
    items.value(31, 1) = -0.5;
    Graph g;
    Embedder emb(g, f.tables);
    const TrainingSample s{&page, 0};  // target category 2
    const SampleTensors t = build_sample_tensors(emb, s, caps, false);
    const NodeId h = sequence_interaction_repr(emb, s, t, caps, f.tsi);
    const Tensor& v = g.forward(h);
    CHECK(v[4] == 0.25);
    CHECK(v[5] == -0.5);
    CHECK(v[6] == 0.0);  // trigger category 1 has no match
    CHECK(v[7] == 0.0);
  }
}

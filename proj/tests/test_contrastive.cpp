#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "ccn/objective.hpp"

using namespace ccn;
using Catch::Approx;

namespace {

void zero_mlp(Mlp& mlp) {
  for (Dense& layer : mlp.layers()) {
    std::fill(layer.weight.value.data.begin(), layer.weight.value.data.end(), 0.0);
    std::fill(layer.bias.value.data.begin(), layer.bias.value.data.end(), 0.0);
  }
}

HyperParams tiny_hyper() {
  HyperParams hp;
  hp.dim = 4;
  hp.heads = 2;
  hp.short_cap = 4;
  hp.long_cap = 8;
  hp.item_buckets = 32;
  hp.category_buckets = 8;
  hp.seller_buckets = 8;
  hp.user_buckets = 8;
  hp.profile_buckets = {4, 2};
  hp.pred_hidden = {6};
  hp.collab_hidden = {5};
  return hp;
}

ImpressionPage page_with_labels(const std::vector<int>& labels) {
  ImpressionPage p;
  p.page_id = 1;
  p.user = {2, {1, 0}};
  p.trigger = {100, 1, 1};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    p.exposures.push_back({{static_cast<Id>(i + 1), static_cast<Id>(i % 3), 0}, labels[i]});
  }
  return p;
}

}  // namespace

TEST_CASE("collaborative degree squashing") {
  const double xi = 0.8;
  CHECK(squash_degree(0.0, xi) == Approx(xi * std::log(std::numbers::pi / 2.0)).epsilon(1e-14));
  CHECK(squash_degree(0.0, xi) == Approx(0.3613).margin(1e-4));
  for (double r : {-40.0, -3.0, 0.0, 2.0, 30.0}) {
    const double a = std::exp(squash_degree(r, xi) / xi);
    CHECK(a > 0.0);
    CHECK(a <= std::numbers::pi);
  }

  std::mt19937_64 rng(1);
  Mlp mlp("collab", 4, {4}, 1, rng);
  zero_mlp(mlp);
  Graph g;
  const NodeId user = g.constant(Tensor::column({0.5, -1.0}));
  const NodeId item = g.constant(Tensor::column({1.0, 2.0}));
  const NodeId trig = g.constant(Tensor::column({3.0, 4.0}));
  const NodeId input = collaborative_input(g, user, item, trig);
  const CollaborativeDegree d = collaborative_degree(g, mlp, user, item, trig, xi);
  g.forward();
  CHECK(g.value(input).data == std::vector<double>{0.5, -1.0, 3.0, 8.0});
  CHECK(g.value(d.raw).item() == 0.0);
  CHECK(g.value(d.degree).item() == Approx(xi * std::log(std::numbers::pi / 2.0)).epsilon(1e-14));

  Graph g2;
  const NodeId ones = g2.constant(Tensor::column({1.0, 1.0}));
  const NodeId had = collaborative_input(g2, g2.constant(Tensor::column({0.0})),
                                         g2.constant(Tensor::column({1.5, -2.0})), ones);
  CHECK(g2.forward(had).data == std::vector<double>{0.0, 1.5, -2.0});
}

TEST_CASE("batched degrees match single degrees") {
  std::mt19937_64 rng(4);
  Mlp mlp("collab", 3, {3}, 1, rng);
  std::normal_distribution<double> nd;
  Graph g;
  std::vector<NodeId> inputs;
  std::vector<NodeId> singles;
  for (int k = 0; k < 5; ++k) {
    Tensor u(2, 1), i(1, 1), t(1, 1);
    for (double* v : {&u[0], &u[1], &i[0], &t[0]}) *v = nd(rng);
    const NodeId un = g.constant(u), in = g.constant(i), tn = g.constant(t);
    inputs.push_back(collaborative_input(g, un, in, tn));
    singles.push_back(collaborative_degree(g, mlp, un, in, tn, 0.8).degree);
  }
  const NodeId col = collaborative_degrees(g, mlp, inputs, 0.8);
  g.forward();
  for (std::size_t k = 0; k < singles.size(); ++k) {
    CHECK(g.value(col)[k] == Approx(g.value(singles[k]).item()).epsilon(1e-14));
  }
}

TEST_CASE("context split") {
  const ImpressionPage p = page_with_labels({1, 1, 0, 0, 1});
  const ContextSplit a = split_context_sets({&p, 0});  // context labels 1,0,0,1
  CHECK(a.positive == std::vector<std::size_t>{0, 3});
  CHECK(a.negative == std::vector<std::size_t>{1, 2});

  const ImpressionPage q = page_with_labels({0, 0, 0});
  const ContextSplit b = split_context_sets({&q, 1});
  CHECK(b.positive == std::vector<std::size_t>{0, 1});
  CHECK(b.negative.empty());

  const ImpressionPage single = page_with_labels({1});
  const ContextSplit c = split_context_sets({&single, 0});
  CHECK(c.positive.empty());
  CHECK(c.negative.empty());
}

TEST_CASE("importance weights") {
  CHECK(importance_weights(std::vector<double>{0.0, 0.0}, 3.0) == std::vector<double>{0.5, 0.5});
  const auto w = importance_weights(std::vector<double>{0.0, std::log(2.0)}, 1.0);
  CHECK(w[0] == Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(w[1] == Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(importance_weights(std::vector<double>{0.7}, 0.5) == std::vector<double>{1.0});
  CHECK_THROWS(importance_weights(std::vector<double>{}, 1.0));
  CHECK_THROWS(importance_weights(std::vector<double>{0.0}, 0.0));

  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s(1 + t % 7);
    for (double& v : s) v = nd(rng);
    double sum = 0.0;
    for (double v : importance_weights(s, 0.5)) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }

  // a large coefficient flattens the weights toward uniform
  const std::vector<double> s{-2.0, 0.0, 1.0, 3.0};
  double prev = 1.0;
  for (double c : {0.5, 5.0, 50.0, 5000.0}) {
    double dev = 0.0;
    for (double v : importance_weights(s, c)) dev = std::max(dev, std::abs(v - 0.25));
    CHECK(dev < prev);
    prev = dev;
  }
  CHECK(prev < 1e-3);
}

TEST_CASE("repulsion loss") {
  CHECK(std::abs(repulsion_loss(0.0, std::vector<double>{0.0}, 1.0) - std::log(2.0)) < 1e-12);
  CHECK(std::abs(repulsion_loss(0.0, std::vector<double>{0.0, 0.0}, 1.0) - std::log(3.0)) < 1e-12);
  CHECK(repulsion_loss(0.0, std::vector<double>{}, 1.0) == 0.0);

  // oracle: direct evaluation of the weighted InfoNCE fraction
  auto oracle = [](double s, const std::vector<double>& neg, double tau) {
    double z = 0.0;
    for (double v : neg) z += std::exp(-v / tau);
    double sum = 0.0;
    for (double v : neg) sum += std::exp(-v / tau) / z * std::exp(v / tau);
    const double m = static_cast<double>(neg.size());
    return -std::log(std::exp(s / tau) / (std::exp(s / tau) + m * sum));
  };
  const std::vector<double> neg{0.3, -0.2, 0.9};
  CHECK(repulsion_loss(0.1, neg, 0.5) == Approx(oracle(0.1, neg, 0.5)).epsilon(1e-12));

  double prev = repulsion_loss(-1.0, neg, 0.5);
  for (double s = -0.9; s < 1.0; s += 0.1) {
    const double cur = repulsion_loss(s, neg, 0.5);
    CHECK(cur > 0.0);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("attraction loss") {
  const double xi = 0.8;
  CHECK(std::abs(attraction_loss(0.2, std::vector<double>{0.2}, xi)) < 1e-12);
  CHECK(attraction_loss(0.2, std::vector<double>{}, xi) == 0.0);
  // a = e^{s/xi} = 1, b = 2
  const double s1 = 0.0;
  const double s2 = xi * std::log(2.0);
  const double expected = -std::log((std::cos(-1.0) + 1.0) / 2.0);
  CHECK(attraction_loss(s1, std::vector<double>{s2}, xi) == Approx(expected).epsilon(1e-12));
  CHECK(expected == Approx(0.2611).margin(1e-4));

  // nondecreasing in |a - b| across the band
  const double b = 1.5;
  double prev = 0.0;
  for (double a = b; a <= std::numbers::pi; a += 0.1) {
    const double cur = attraction_loss(xi * std::log(a), std::vector<double>{xi * std::log(b)}, xi);
    CHECK(cur >= prev);
    prev = cur;
  }
}

TEST_CASE("pair label prior") {
  const PairPrior a = pair_label_prior(9.0, 1.0);
  CHECK(a.p_same == 0.8);
  CHECK(a.p_diff == Approx(0.2).epsilon(1e-14));
  CHECK(a.attraction_weight == Approx(0.25).epsilon(1e-14));

  const PairPrior b = pair_label_prior(1.0, 1.0);
  CHECK(b.p_same == 0.0);
  CHECK(b.p_diff == 1.0);
  CHECK(b.attraction_weight == 1.0 / kPriorClamp);

  const PairPrior c = pair_label_prior(5.0, 0.0);
  CHECK(c.p_same == 1.0);
  CHECK(c.attraction_weight == 0.0);

  CHECK_THROWS_AS(pair_label_prior(0.5, 0.5), DataError);
  CHECK_THROWS_AS(pair_label_prior(-1.0, 3.0), DataError);

  const std::vector<ImpressionPage> pages{page_with_labels({1, 0, 0}), page_with_labels({0, 0, 1, 1, 0})};
  const PairPrior d = pair_label_prior(pages);
  CHECK(d.n0 == 2.5);
  CHECK(d.n1 == 1.5);
  CHECK_THROWS_AS(pair_label_prior(std::vector<ImpressionPage>{page_with_labels({1})}), DataError);
}

TEST_CASE("total loss composition") {
  const ImpressionPage page = page_with_labels({1, 0});
  const std::vector<TrainingSample> batch{{&page, 0}};
  const PairPrior prior = pair_label_prior(1.0, 1.0);

  SECTION("lambda zero is plain cross-entropy") {
    HyperParams hp = tiny_hyper();
    hp.lambda = 0.0;
    Model m(hp, Variant::kCcn, 3);
    zero_mlp(m.prediction());
    const LossBreakdown l = total_loss(m, batch, prior);
    CHECK(l.total == l.ce);
    CHECK(l.ce == Approx(std::log(2.0)).epsilon(1e-14));
  }

  SECTION("hand-evaluated repulsion plus cross-entropy") {
    HyperParams hp = tiny_hyper();
    hp.lambda = 1.0;
    hp.tau = 1.0;
    Model m(hp, Variant::kCcn, 3);
    zero_mlp(m.prediction());
    zero_mlp(m.collaborative());
    // raw output -ln(pi - 1) puts every degree at s = 0
    m.collaborative().layers().back().bias.value[0] = -std::log(std::numbers::pi - 1.0);
    const LossBreakdown l = total_loss(m, batch, prior);
    CHECK(l.ce == Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(l.repulsion == Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(l.attraction == 0.0);
    CHECK(l.total == Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(l.total == Approx(1.3863).margin(1e-4));
  }

  SECTION("components combine with lambda and the prior weight") {
    const ImpressionPage big = page_with_labels({1, 0, 1, 0, 0});
    std::vector<TrainingSample> samples;
    for (std::size_t i = 0; i < 5; ++i) samples.push_back({&big, i});
    HyperParams hp = tiny_hyper();
    hp.lambda = 0.3;
    const Model m(hp, Variant::kCcn, 11);
    const PairPrior pr = pair_label_prior(3.0, 2.0);
    const LossBreakdown l = total_loss(m, samples, pr);
    CHECK(l.repulsion > 0.0);
    CHECK(l.attraction > 0.0);
    CHECK(l.total == Approx(l.ce + 0.3 * (l.repulsion + pr.attraction_weight * l.attraction)).epsilon(1e-12));
  }

  SECTION("variants without contrastive losses reject them") {
    const Model m(tiny_hyper(), Variant::kTan, 1);
    Graph g;
    ForwardPass fp(g, m);
    CHECK_THROWS_AS(contrastive_losses(fp, batch), VariantError);
  }
}

#include <catch_amalgamated.hpp>

#include <cmath>

#include "ccn/synth.hpp"
#include "ccn/train.hpp"

using namespace ccn;
using Catch::Matchers::ContainsSubstring;

namespace {

HyperParams tiny_hyper() {
  HyperParams hp;
  hp.dim = 4;
  hp.heads = 2;
  hp.short_cap = 4;
  hp.long_cap = 8;
  hp.item_buckets = 64;
  hp.category_buckets = 8;
  hp.seller_buckets = 8;
  hp.user_buckets = 16;
  hp.profile_buckets = {kAgeBands, kGenderBands};
  hp.pred_hidden = {8, 4};
  hp.collab_hidden = {4};
  hp.batch_size = 16;
  return hp;
}

Dataset tiny_world(std::uint64_t seed, std::size_t users = 12) {
  WorldSpec w;
  w.users = users;
  w.items = 60;
  w.categories = 5;
  w.sellers = 8;
  w.latent_dim = 4;
  w.pages_per_user = 4;
  w.min_exposures = 4;
  w.max_exposures = 6;
  w.warmup_pages = 3;
  w.seed = seed;
  return generate_dataset(w);
}

}  // namespace

TEST_CASE("ten pages can be memorized") {
  const Dataset ds = tiny_world(3);
  const std::vector<ImpressionPage> pages(ds.pages.begin(), ds.pages.begin() + 10);
  TrainConfig cfg;
  cfg.hp = tiny_hyper();
  cfg.hp.dim = 8;
  cfg.hp.pred_hidden = {32, 16};
  cfg.hp.learning_rate = 0.1;
  cfg.hp.lr_decay = 1.0;
  cfg.hp.lambda = 0.1;
  cfg.variant = Variant::kCcn;
  cfg.epochs = 200;
  cfg.seed = 4;
  const TrainResult r = train_fresh(cfg, pages, {});
  CHECK(r.report.epochs.front().loss.ce > 0.3);
  CHECK(r.report.epochs.back().loss.ce < 0.1);
}

TEST_CASE("training is deterministic") {
  const Dataset ds = tiny_world(5);
  const Split s = temporal_split(ds.pages, 0.25);
  TrainConfig cfg;
  cfg.hp = tiny_hyper();
  cfg.epochs = 2;
  cfg.seed = 9;
  const TrainResult a = train_fresh(cfg, s.train, s.test);
  const TrainResult b = train_fresh(cfg, s.train, s.test);
  CHECK(format_metrics(a.report) == format_metrics(b.report));
  CHECK(a.report.epochs.back().loss.total == b.report.epochs.back().loss.total);
  const auto pa = a.model.parameters();
  const auto pb = b.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.data == pb[i]->value.data);

  TrainConfig other = cfg;
  other.seed = 10;
  CHECK(format_metrics(train_fresh(other, s.train, s.test).report) != format_metrics(a.report));
}

TEST_CASE("loss components combine into the total") {
  const Dataset ds = tiny_world(6);
  TrainConfig cfg;
  cfg.hp = tiny_hyper();
  cfg.hp.lambda = 0.4;
  cfg.epochs = 1;
  Model model(cfg.hp, Variant::kCcn, 2);
  Trainer trainer(model, ds.pages, 2);
  const double w = trainer.prior().attraction_weight;
  const EpochMetrics m = trainer.train_epoch();
  const LossBreakdown& l = m.loss;
  CHECK(l.repulsion > 0.0);
  CHECK(l.attraction > 0.0);
  CHECK(std::abs(l.total - (l.ce + 0.4 * (l.repulsion + w * l.attraction))) < 1e-9);
}

TEST_CASE("samples come from per-exposure expansion") {
  const Dataset ds = tiny_world(7);
  std::size_t exposures = 0;
  for (const ImpressionPage& p : ds.pages) exposures += p.exposures.size();
  TrainConfig cfg;
  cfg.hp = tiny_hyper();
  Model model(cfg.hp, Variant::kTan, 1);
  Trainer trainer(model, ds.pages, 1);
  const EpochMetrics m = trainer.train_epoch();
  CHECK(m.samples == exposures);
  CHECK(m.batches == (exposures + 15) / 16);
  CHECK(trainer.optimizer().learning_rate() == cfg.hp.learning_rate * cfg.hp.lr_decay);
}

TEST_CASE("initial loss is finite for every variant") {
  const Dataset ds = tiny_world(8);
  const auto samples = expand_samples(ds.pages);
  const std::span<const TrainingSample> batch(samples.data(), 32);
  const PairPrior prior = pair_label_prior(ds.pages);
  for (Variant v : kAllVariants) {
    const Model m(tiny_hyper(), v, 3);
    const LossBreakdown l = total_loss(m, batch, prior);
    CHECK(std::isfinite(l.total));
    CHECK(std::isfinite(l.ce));
  }
}

TEST_CASE("empty training data is an error") {
  TrainConfig cfg;
  cfg.hp = tiny_hyper();
  Model model(cfg.hp, Variant::kCcn, 1);
  CHECK_THROWS_AS(Trainer(model, std::vector<ImpressionPage>{}, 1), DataError);
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), DataError);
  cfg.epochs = 1;
  cfg.train_path = cfg.test_path = "same.tsv";
  CHECK_THROWS_AS(cfg.validate(), DataError);
}

TEST_CASE("lambda zero CCN matches TAN to the last bit") {
  const Dataset ds = tiny_world(9);
  const Split s = temporal_split(ds.pages, 0.25);
  TrainConfig cfg;
  cfg.hp = tiny_hyper();
  cfg.hp.lambda = 0.0;
  cfg.epochs = 2;
  cfg.seed = 5;
  cfg.variant = Variant::kCcn;
  const TrainResult ccn = train_fresh(cfg, s.train, s.test);
  cfg.variant = Variant::kTan;
  const TrainResult tan = train_fresh(cfg, s.train, s.test);
  CHECK(ccn.report.final_auc() == tan.report.final_auc());
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(ccn.report.epochs[e].loss.total == tan.report.epochs[e].loss.total);
  }
}

TEST_CASE("metrics records") {
  MetricsReport r;
  r.variant = Variant::kTan;
  r.seed = 3;
  r.lambda = 0.1;
  EpochMetrics e;
  e.epoch = 1;
  e.samples = 10;
  e.batches = 1;
  e.learning_rate = 0.05;
  e.loss = {0.5, 0.0, 0.0, 0.5};
  e.test_auc = 0.75;
  e.wall_seconds = 12.0;
  r.epochs.push_back(e);
  e.epoch = 2;
  e.test_auc.reset();
  r.epochs.push_back(e);
  const std::string text = format_metrics(r);
  CHECK_THAT(text, ContainsSubstring("epoch=1\tvariant=tan\tseed=3\tsamples=10"));
  CHECK_THAT(text, ContainsSubstring("test_auc=0.75\n"));
  CHECK_THAT(text, ContainsSubstring("test_auc=-\n"));
  CHECK(r.final_auc() == 0.75);
}

TEST_CASE("ablation grid") {
  const Dataset ds = tiny_world(10, 16);
  const Split s = temporal_split(ds.pages, 0.25);
  TrainConfig base;
  base.hp = tiny_hyper();
  base.epochs = 1;

  SECTION("two variants over five seeds") {
    const std::vector<Variant> variants{Variant::kTan, Variant::kCcn};
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    const AblationTable t = run_ablation(base, variants, seeds, s.train, s.test);
    REQUIRE(t.rows.size() == 2);
    for (const AblationRow& row : t.rows) {
      REQUIRE(row.cells.size() == 5);
      std::vector<double> aucs;
      for (const AblationCell& c : row.cells) aucs.push_back(c.auc.value());
      std::sort(aucs.begin(), aucs.end());
      CHECK(row.mean_auc.value() == Catch::Approx((aucs[1] + aucs[2] + aucs[3]) / 3.0).epsilon(1e-15));
    }
    const std::string text = format_ablation(t);
    CHECK(text.rfind("variant\tseeds_ok\tmean_auc\tauc_seed_1\tauc_seed_2", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  }

  SECTION("single cell is untrimmed") {
    const std::vector<Variant> variants{Variant::kCcn};
    const std::vector<std::uint64_t> seeds{7};
    const AblationTable t = run_ablation(base, variants, seeds, s.train, s.test);
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0].mean_auc == t.rows[0].cells[0].auc);
  }

  SECTION("failing cells are marked and the grid continues") {
    TrainConfig bad = base;
    bad.epochs = 0;  // every cell fails validation
    const std::vector<Variant> variants{Variant::kTan};
    const std::vector<std::uint64_t> seeds{1, 2};
    const AblationTable t = run_ablation(bad, variants, seeds, s.train, s.test);
    CHECK(t.rows[0].cells.size() == 2);
    CHECK_FALSE(t.rows[0].mean_auc.has_value());
    CHECK_FALSE(t.rows[0].cells[1].error.empty());
    CHECK_THAT(format_ablation(t), ContainsSubstring("tan\t0\tfailed\tfailed\tfailed"));
  }
}

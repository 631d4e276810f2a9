#pragma once

// Training loop, evaluation and the ablation grid.

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ccn/checkpoint.hpp"
#include "ccn/metrics.hpp"
#include "ccn/model.hpp"
#include "ccn/objective.hpp"
#include "ccn/optimizer.hpp"

namespace ccn {

struct TrainConfig {
  HyperParams hp;
  Variant variant = Variant::kCcn;
  std::size_t epochs = 5;
  std::uint64_t seed = 1;
  std::string train_path;
  std::string test_path;
  std::size_t eval_every = 1;  // evaluate test AUC every k epochs (and after the last); 0 = last only

  void validate() const {
    hp.validate();
    if (epochs < 1) throw DataError("train config: epochs must be >= 1");
    if (!train_path.empty() && train_path == test_path) {
      throw DataError("train config: train and test paths must differ");
    }
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  std::size_t samples = 0;
  std::size_t batches = 0;
  double learning_rate = 0.0;  // rate used during the epoch
  LossBreakdown loss;          // sample-weighted means over the epoch
  std::optional<double> test_auc;
  double wall_seconds = 0.0;
};

struct MetricsReport {
  Variant variant = Variant::kCcn;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  PairPrior prior;
  std::vector<EpochMetrics> epochs;

  /// Test AUC of the latest epoch that was evaluated.
  std::optional<double> final_auc() const {
    for (auto it = epochs.rbegin(); it != epochs.rend(); ++it) {
      if (it->test_auc) return it->test_auc;
    }
    return std::nullopt;
  }
};

/// One `key=value` record per epoch, tab separated, doubles in shortest
/// round-trip form. Wall-clock time is left out so identical runs produce
/// identical bytes.
inline std::string format_metrics(const MetricsReport& r) {
  std::ostringstream out;
  for (const EpochMetrics& e : r.epochs) {
    out << "epoch=" << e.epoch << "\tvariant=" << variant_name(r.variant) << "\tseed=" << r.seed
        << "\tsamples=" << e.samples << "\tbatches=" << e.batches
        << "\tlr=" << detail::format_double(e.learning_rate)
        << "\tlambda=" << detail::format_double(r.lambda)
        << "\tattraction_weight=" << detail::format_double(r.prior.attraction_weight)
        << "\tloss_ce=" << detail::format_double(e.loss.ce)
        << "\tloss_repulsion=" << detail::format_double(e.loss.repulsion)
        << "\tloss_attraction=" << detail::format_double(e.loss.attraction)
        << "\tloss_total=" << detail::format_double(e.loss.total)
        << "\ttest_auc=" << (e.test_auc ? detail::format_double(*e.test_auc) : "-") << '\n';
  }
  return out.str();
}

/// Flattened labels of every exposure, in page order.
inline std::vector<int> exposure_labels(std::span<const ImpressionPage> pages) {
  std::vector<int> labels;
  for (const ImpressionPage& p : pages) {
    for (const Exposure& e : p.exposures) labels.push_back(e.click);
  }
  return labels;
}

inline double evaluate_auc(const Model& model, std::span<const ImpressionPage> pages) {
  const std::vector<double> scores = score_pages(model, pages);
  const std::vector<int> labels = exposure_labels(pages);
  return compute_auc(scores, labels);
}

/// Owns the optimizer state and shuffling stream for one training run.
class Trainer {
 public:
  Trainer(Model& model, std::span<const ImpressionPage> train, std::uint64_t seed)
      : model_(model),
        train_(train),
        opt_(model.hyper().learning_rate, model.hyper().adagrad_epsilon),
        rng_(shuffle_stream(seed)) {
    if (train_.empty()) throw DataError("empty training set");
    samples_ = expand_samples(train_);
    if (samples_.empty()) throw DataError("training set has no exposures");
    prior_ = pair_label_prior(train_, model.hyper().prior_clamp);
  }

  const PairPrior& prior() const { return prior_; }
  AdaGrad& optimizer() { return opt_; }
  std::size_t epochs_done() const { return epoch_; }

  /// Shuffles the samples, runs one pass of mini-batch AdaGrad steps and
  /// decays the learning rate afterwards.
  EpochMetrics train_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(samples_.begin(), samples_.end(), rng_);
    const HyperParams& hp = model_.hyper();
    const std::vector<Parameter*> params = model_.parameters();

    EpochMetrics m;
    m.epoch = ++epoch_;
    m.learning_rate = opt_.learning_rate();
    for (std::size_t start = 0; start < samples_.size(); start += hp.batch_size) {
      const std::size_t n = std::min(hp.batch_size, samples_.size() - start);
      const std::span<const TrainingSample> batch(samples_.data() + start, n);
      BatchObjective obj(model_, batch, prior_, tape_hint_);
      tape_hint_ = obj.graph().size() + obj.graph().size() / 4;
      const LossBreakdown l = obj.forward();
      if (!std::isfinite(l.total)) {
        throw NumericError("non-finite training loss in epoch " + std::to_string(m.epoch) +
                           ", batch " + std::to_string(m.batches + 1));
      }
      const GradStore grads = obj.graph().backward(obj.total());
      opt_.step(params, collect_param_grads(obj.graph(), grads));

      const double w = static_cast<double>(n);
      m.loss.ce += w * l.ce;
      m.loss.repulsion += w * l.repulsion;
      m.loss.attraction += w * l.attraction;
      m.loss.total += w * l.total;
      m.samples += n;
      ++m.batches;
    }
    const double inv = 1.0 / static_cast<double>(m.samples);
    m.loss.ce *= inv;
    m.loss.repulsion *= inv;
    m.loss.attraction *= inv;
    m.loss.total *= inv;
    opt_.set_learning_rate(opt_.learning_rate() * hp.lr_decay);
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
  }

 private:
  static std::mt19937_64 shuffle_stream(std::uint64_t seed) {
    std::seed_seq seq{seed, std::uint64_t{0x5A3F1E}};
    return std::mt19937_64(seq);
  }

  Model& model_;
  std::span<const ImpressionPage> train_;
  AdaGrad opt_;
  std::mt19937_64 rng_;
  std::vector<TrainingSample> samples_;
  PairPrior prior_;
  std::size_t epoch_ = 0;
  std::size_t tape_hint_ = 0;
};

/// Trains `model` for cfg.epochs epochs. Test AUC is computed on the
/// configured cadence when `test` is non-empty.
inline MetricsReport train_model(Model& model, const TrainConfig& cfg,
                                 std::span<const ImpressionPage> train,
                                 std::span<const ImpressionPage> test) {
  cfg.validate();
  Trainer trainer(model, train, cfg.seed);
  MetricsReport report;
  report.variant = model.variant();
  report.seed = cfg.seed;
  report.lambda = model.hyper().lambda;
  report.prior = trainer.prior();
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    EpochMetrics m = trainer.train_epoch();
    const bool due = e == cfg.epochs || (cfg.eval_every > 0 && e % cfg.eval_every == 0);
    if (due && !test.empty()) {
      const auto t0 = std::chrono::steady_clock::now();
      m.test_auc = evaluate_auc(model, test);
      m.wall_seconds +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    report.epochs.push_back(m);
  }
  return report;
}

struct TrainResult {
  Model model;
  MetricsReport report;
};

/// Fresh model seeded with cfg.seed, trained on `train`.
inline TrainResult train_fresh(const TrainConfig& cfg, std::span<const ImpressionPage> train,
                               std::span<const ImpressionPage> test) {
  TrainResult r{Model(cfg.hp, cfg.variant, cfg.seed), {}};
  r.report = train_model(r.model, cfg, train, test);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationCell {
  std::uint64_t seed = 0;
  std::optional<double> auc;
  std::string error;  // set when the cell failed
};

struct AblationRow {
  Variant variant = Variant::kCcn;
  std::vector<AblationCell> cells;
  std::optional<double> mean_auc;  // trimmed when >= 5 seeds succeeded
};

struct AblationTable {
  std::vector<AblationRow> rows;

  const AblationRow* find(Variant v) const {
    for (const AblationRow& r : rows) {
      if (r.variant == v) return &r;
    }
    return nullptr;
  }
};

/// Trains every (variant, seed) cell on the same data. A failing cell is
/// recorded and the grid carries on.
inline AblationTable run_ablation(const TrainConfig& base, std::span<const Variant> variants,
                                  std::span<const std::uint64_t> seeds,
                                  std::span<const ImpressionPage> train,
                                  std::span<const ImpressionPage> test) {
  if (variants.empty() || seeds.empty()) throw DataError("ablation needs variants and seeds");
  if (test.empty()) throw DataError("ablation needs a test split");
  AblationTable table;
  for (Variant v : variants) {
    AblationRow row;
    row.variant = v;
    std::vector<double> ok;
    for (std::uint64_t seed : seeds) {
      AblationCell cell;
      cell.seed = seed;
      try {
        TrainConfig cfg = base;
        cfg.variant = v;
        cfg.seed = seed;
        cfg.eval_every = 0;
        cell.auc = train_fresh(cfg, train, test).report.final_auc();
        if (cell.auc) ok.push_back(*cell.auc);
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      row.cells.push_back(std::move(cell));
    }
    if (!ok.empty()) row.mean_auc = trimmed_mean(ok);
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// variant, succeeded-seed count, trimmed mean AUC, then one column per seed.
/// Failed cells read "failed".
inline std::string format_ablation(const AblationTable& t) {
  std::ostringstream out;
  out << "variant\tseeds_ok\tmean_auc";
  if (!t.rows.empty()) {
    for (const AblationCell& c : t.rows.front().cells) out << "\tauc_seed_" << c.seed;
  }
  out << '\n';
  for (const AblationRow& r : t.rows) {
    std::size_t n_ok = 0;
    for (const AblationCell& c : r.cells) n_ok += c.auc ? 1 : 0;
    out << variant_name(r.variant) << '\t' << n_ok << '\t'
        << (r.mean_auc ? detail::format_double(*r.mean_auc) : "failed");
    for (const AblationCell& c : r.cells) {
      out << '\t' << (c.auc ? detail::format_double(*c.auc) : "failed");
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace ccn

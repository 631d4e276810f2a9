#pragma once

// Finite-difference check of the full training loss on random micro-batches.

#include <algorithm>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ccn/gradcheck.hpp"
#include "ccn/model.hpp"
#include "ccn/objective.hpp"
#include "ccn/synth.hpp"

namespace ccn {

struct LossCheckConfig {
  std::size_t trials = 100;
  std::size_t pages = 2;
  std::size_t min_exposures = 4;
  std::size_t max_exposures = 6;
  std::size_t dim = 4;
  std::size_t heads = 2;
  double lambda = 0.5;
  Variant variant = Variant::kCcn;
  std::uint64_t seed = 1;
  GradCheckOptions options;
};

struct LossCheckTrial {
  std::uint64_t world_seed = 0;
  GradCheckReport report;
};

struct LossCheckReport {
  std::vector<LossCheckTrial> trials;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::size_t kinks = 0;
  bool non_finite = false;

  bool passed(double tolerance) const { return !non_finite && max_rel_error < tolerance; }
};

/// Small-model hyperparameters used by the check.
inline HyperParams loss_check_hyper(const LossCheckConfig& cfg) {
  HyperParams hp;
  hp.dim = cfg.dim;
  hp.heads = cfg.heads;
  hp.short_cap = 5;
  hp.long_cap = 10;
  hp.item_buckets = 64;
  hp.category_buckets = 8;
  hp.seller_buckets = 16;
  hp.user_buckets = 16;
  hp.profile_buckets = {kAgeBands, kGenderBands};
  hp.pred_hidden = {8, 4};
  hp.collab_hidden = {4};
  hp.lambda = cfg.lambda;
  return hp;
}

/// One trial: a fresh world and model, `cfg.pages` random pages as the
/// micro-batch (every exposure a sample), and the finite-difference check of
/// the batch loss over every parameter entry it reads.
inline LossCheckTrial run_loss_check_trial(const LossCheckConfig& cfg, std::uint64_t trial_seed) {
  WorldSpec w;
  w.users = 4;
  w.items = 40;
  w.categories = 3;
  w.sellers = 6;
  w.latent_dim = 4;
  w.pages_per_user = 3;
  w.min_exposures = cfg.min_exposures;
  w.max_exposures = cfg.max_exposures;
  w.warmup_pages = 3;
  w.short_cap = 5;
  w.long_cap = 10;
  w.seed = trial_seed;
  const Dataset world = generate_dataset(w);

  std::mt19937_64 rng(trial_seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<ImpressionPage> pages;
  std::vector<std::size_t> order(world.pages.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < cfg.pages && i < order.size(); ++i) {
    pages.push_back(world.pages[order[i]]);
  }

  Model model(loss_check_hyper(cfg), cfg.variant, trial_seed);
  const PairPrior prior = pair_label_prior(pages, model.hyper().prior_clamp);
  const std::vector<TrainingSample> batch = expand_samples(pages);
  BatchObjective obj(model, batch, prior);
  const std::vector<Parameter*> params = model.parameters();
  LossCheckTrial out;
  out.world_seed = trial_seed;
  out.report = finite_diff_check(obj.graph(), obj.total(), {}, params, cfg.options);
  return out;
}

inline LossCheckReport run_loss_check(const LossCheckConfig& cfg) {
  LossCheckReport rep;
  std::mt19937_64 seeds(cfg.seed);
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    LossCheckTrial trial = run_loss_check_trial(cfg, seeds());
    rep.max_rel_error = std::max(rep.max_rel_error, trial.report.max_rel_error);
    rep.coords += trial.report.coords;
    rep.kinks += trial.report.kinks;
    rep.non_finite = rep.non_finite || trial.report.non_finite;
    rep.trials.push_back(std::move(trial));
  }
  return rep;
}

/// Human-readable summary: totals first, then the worst leaf of each trial.
inline std::string format_loss_check(const LossCheckReport& rep, double tolerance) {
  std::ostringstream out;
  out.precision(6);
  out << "max_rel_error=" << std::scientific << rep.max_rel_error << '\n';
  out << "tolerance=" << tolerance << '\n';
  out << std::defaultfloat;
  out << "trials=" << rep.trials.size() << " coords=" << rep.coords
      << " kink_skips=" << rep.kinks << " non_finite=" << (rep.non_finite ? 1 : 0) << '\n';
  out << "status=" << (rep.passed(tolerance) ? "pass" : "fail") << '\n';
  for (std::size_t i = 0; i < rep.trials.size(); ++i) {
    const GradCheckReport& r = rep.trials[i].report;
    const LeafReport* worst = nullptr;
    for (const LeafReport& leaf : r.leaves) {
      if (worst == nullptr || leaf.max_rel_error > worst->max_rel_error) worst = &leaf;
    }
    out << "trial " << i << " seed=" << rep.trials[i].world_seed << " coords=" << r.coords
        << " max_rel_error=" << std::scientific << r.max_rel_error << std::defaultfloat;
    if (worst != nullptr) out << " worst=" << worst->name;
    out << '\n';
  }
  return out.str();
}

}  // namespace ccn

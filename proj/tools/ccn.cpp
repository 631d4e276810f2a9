// ccn: synthesize data, train, evaluate, score, ablate and gradient-check.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "ccn/ccn.hpp"
#include "ccn/model_check.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Paths {
  std::string out_dir = ".";

  std::string file(const std::string& name) const { return (fs::path(out_dir) / name).string(); }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ccn::IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw ccn::IoError("write to '" + path + "' failed");
}

void add_hyper_options(CLI::App* cmd, ccn::HyperParams& hp) {
  cmd->add_option("--dim", hp.dim, "Embedding width d");
  cmd->add_option("--heads", hp.heads, "Attention heads");
  cmd->add_option("--short-cap", hp.short_cap, "Short-term sequence cap");
  cmd->add_option("--long-cap", hp.long_cap, "Long-term sequence cap");
  cmd->add_option("--item-buckets", hp.item_buckets);
  cmd->add_option("--category-buckets", hp.category_buckets);
  cmd->add_option("--seller-buckets", hp.seller_buckets);
  cmd->add_option("--user-buckets", hp.user_buckets);
  cmd->add_option("--profile-buckets", hp.profile_buckets)->delimiter(',');
  cmd->add_option("--pred-hidden", hp.pred_hidden, "Prediction MLP hidden widths")->delimiter(',');
  cmd->add_option("--collab-hidden", hp.collab_hidden, "Collaborative MLP hidden widths")
      ->delimiter(',');
  cmd->add_option("--tau", hp.tau, "Repulsion temperature");
  cmd->add_option("--xi", hp.xi, "Attraction scaling");
  cmd->add_option("--lambda", hp.lambda, "Contrastive loss weight");
  cmd->add_option("--prior-clamp", hp.prior_clamp);
  cmd->add_option("--lr", hp.learning_rate, "AdaGrad learning rate");
  cmd->add_option("--lr-decay", hp.lr_decay, "Per-epoch learning-rate factor");
  cmd->add_option("--adagrad-epsilon", hp.adagrad_epsilon);
  cmd->add_option("--batch-size", hp.batch_size);
}

std::string read_all(std::istream& in) {
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative contrastive CTR model: data synthesis, training and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Key = value file with one [section] per subcommand");
  app.allow_config_extras(CLI::config_extras_mode::error);

  Paths paths;
  app.add_option("--out-dir", paths.out_dir, "Directory for all outputs")->capture_default_str();

  // synth
  ccn::WorldSpec world;
  double test_fraction = 0.2;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--seed", world.seed);
  synth->add_option("--users", world.users);
  synth->add_option("--items", world.items);
  synth->add_option("--categories", world.categories);
  synth->add_option("--sellers", world.sellers);
  synth->add_option("--latent-dim", world.latent_dim);
  synth->add_option("--pages-per-user", world.pages_per_user);
  synth->add_option("--min-exposures", world.min_exposures);
  synth->add_option("--max-exposures", world.max_exposures);
  synth->add_option("--warmup-pages", world.warmup_pages);
  synth->add_option("--trigger-candidates", world.trigger_candidates);
  synth->add_option("--alpha", world.alpha, "Weight of user-driven vs trigger-driven affinity");
  synth->add_option("--noise", world.noise, "Per-exposure logit noise");
  synth->add_option("--page-noise", world.page_noise, "Per-page shared logit offset");
  synth->add_option("--base-logit", world.base_logit);
  synth->add_option("--affinity-scale", world.affinity_scale);
  synth->add_option("--same-category-share", world.same_category_share);
  synth->add_option("--test-fraction", test_fraction, "Trailing share of each user's pages held out");

  // train
  ccn::TrainConfig train_cfg;
  std::string variant_name = "ccn";
  auto* train = app.add_subcommand("train", "Train a model; writes model.ckpt and metrics.ndtxt");
  train->add_option("--train", train_cfg.train_path, "Training data (default <out-dir>/dataset.train.tsv)");
  train->add_option("--test", train_cfg.test_path, "Test data (default <out-dir>/dataset.test.tsv if present)");
  train->add_option("--variant", variant_name, "tan_minus, tan, ccn_no_tsi, ccn_no_attraction, ccn_no_repulsion, ccn");
  train->add_option("--epochs", train_cfg.epochs);
  train->add_option("--seed", train_cfg.seed);
  train->add_option("--eval-every", train_cfg.eval_every, "Test AUC cadence in epochs (0: last only)");
  add_hyper_options(train, train_cfg.hp);

  // eval
  std::string checkpoint;
  std::string eval_data;
  auto* eval = app.add_subcommand("eval", "Test AUC of a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "Default <out-dir>/model.ckpt");
  eval->add_option("--data", eval_data, "Default <out-dir>/dataset.test.tsv");

  // score
  std::size_t target_index = 0;
  auto* score = app.add_subcommand("score", "Score one record read from standard input");
  score->add_option("--checkpoint", checkpoint, "Default <out-dir>/model.ckpt");
  score->add_option("--target-index", target_index, "Exposure to score");

  // ablate
  ccn::TrainConfig ablate_cfg;
  std::vector<std::string> ablate_variants{"tan", "ccn", "ccn_no_attraction", "ccn_no_repulsion"};
  std::vector<std::uint64_t> ablate_seeds{1, 2, 3, 4, 5};
  auto* ablate = app.add_subcommand("ablate", "Variant x seed grid; writes ablation.tsv");
  ablate->add_option("--train", ablate_cfg.train_path, "Default <out-dir>/dataset.train.tsv");
  ablate->add_option("--test", ablate_cfg.test_path, "Default <out-dir>/dataset.test.tsv");
  ablate->add_option("--variants", ablate_variants)->delimiter(',');
  ablate->add_option("--seeds", ablate_seeds)->delimiter(',');
  ablate->add_option("--epochs", ablate_cfg.epochs);
  add_hyper_options(ablate, ablate_cfg.hp);

  // gradcheck
  ccn::LossCheckConfig check;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the training loss");
  gradcheck->add_option("--trials", check.trials);
  gradcheck->add_option("--seed", check.seed);
  gradcheck->add_option("--dim", check.dim);
  gradcheck->add_option("--heads", check.heads);
  gradcheck->add_option("--lambda", check.lambda);
  gradcheck->add_option("--tolerance", check.options.tolerance);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (!paths.out_dir.empty()) fs::create_directories(paths.out_dir);

    if (synth->parsed()) {
      const ccn::Dataset ds = ccn::generate_dataset(world);
      const ccn::Split split = ccn::temporal_split(ds.pages, test_fraction);
      ccn::write_dataset(ds.pages, paths.file("dataset.tsv"));
      ccn::write_dataset(split.train, paths.file("dataset.train.tsv"));
      ccn::write_dataset(split.test, paths.file("dataset.test.tsv"));
      std::size_t exposures = 0;
      for (const auto& p : ds.pages) exposures += p.exposures.size();
      std::cout << "pages=" << ds.pages.size() << " exposures=" << exposures
                << " train_pages=" << split.train.size() << " test_pages=" << split.test.size()
                << '\n';
      return 0;
    }

    if (train->parsed()) {
      train_cfg.variant = ccn::parse_variant(variant_name);
      if (train_cfg.train_path.empty()) train_cfg.train_path = paths.file("dataset.train.tsv");
      if (train_cfg.test_path.empty() && fs::exists(paths.file("dataset.test.tsv"))) {
        train_cfg.test_path = paths.file("dataset.test.tsv");
      }
      train_cfg.validate();
      const auto train_pages = ccn::parse_dataset(train_cfg.train_path);
      std::vector<ccn::ImpressionPage> test_pages;
      if (!train_cfg.test_path.empty()) test_pages = ccn::parse_dataset(train_cfg.test_path);
      ccn::TrainResult result = ccn::train_fresh(train_cfg, train_pages, test_pages);
      ccn::save_checkpoint(result.model, paths.file("model.ckpt"),
                           {{"epochs", std::to_string(train_cfg.epochs)},
                            {"train_pages", std::to_string(train_pages.size())}});
      write_text(paths.file("metrics.ndtxt"), ccn::format_metrics(result.report));
      for (const ccn::EpochMetrics& m : result.report.epochs) {
        std::fprintf(stderr, "epoch %zu loss %.6f ce %.6f rep %.6f att %.6f auc %s (%.1fs)\n",
                     m.epoch, m.loss.total, m.loss.ce, m.loss.repulsion, m.loss.attraction,
                     m.test_auc ? std::to_string(*m.test_auc).c_str() : "-", m.wall_seconds);
      }
      return 0;
    }

    if (eval->parsed()) {
      if (checkpoint.empty()) checkpoint = paths.file("model.ckpt");
      if (eval_data.empty()) eval_data = paths.file("dataset.test.tsv");
      const ccn::Model model = ccn::load_checkpoint(checkpoint);
      const auto pages = ccn::parse_dataset(eval_data);
      const double auc = ccn::evaluate_auc(model, pages);
      std::printf("auc=%.17g exposures=%zu\n", auc, ccn::exposure_labels(pages).size());
      return 0;
    }

    if (score->parsed()) {
      if (checkpoint.empty()) checkpoint = paths.file("model.ckpt");
      const ccn::Model model = ccn::load_checkpoint(checkpoint);
      std::string text = read_all(std::cin);
      while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
      if (text.find('\n') != std::string::npos) {
        throw ccn::DataError("score expects exactly one record on standard input");
      }
      const ccn::ImpressionPage page = ccn::parse_page(text, 1, /*min_exposures=*/1);
      if (target_index >= page.exposures.size()) {
        throw ccn::DataError("--target-index " + std::to_string(target_index) +
                             " out of range for " + std::to_string(page.exposures.size()) +
                             " exposures");
      }
      const double y = ccn::predict_ctr(model, page.user, page.trigger,
                                        page.exposures[target_index].item, page.sequences);
      std::printf("%.17g\n", y);
      return 0;
    }

    if (ablate->parsed()) {
      if (ablate_cfg.train_path.empty()) ablate_cfg.train_path = paths.file("dataset.train.tsv");
      if (ablate_cfg.test_path.empty()) ablate_cfg.test_path = paths.file("dataset.test.tsv");
      ablate_cfg.validate();
      std::vector<ccn::Variant> variants;
      for (const std::string& v : ablate_variants) variants.push_back(ccn::parse_variant(v));
      const auto train_pages = ccn::parse_dataset(ablate_cfg.train_path);
      const auto test_pages = ccn::parse_dataset(ablate_cfg.test_path);
      const ccn::AblationTable table =
          ccn::run_ablation(ablate_cfg, variants, ablate_seeds, train_pages, test_pages);
      const std::string tsv = ccn::format_ablation(table);
      write_text(paths.file("ablation.tsv"), tsv);
      std::cout << tsv;
      for (const auto& row : table.rows) {
        for (const auto& cell : row.cells) {
          if (!cell.error.empty()) {
            std::cerr << ccn::variant_name(row.variant) << " seed " << cell.seed
                      << " failed: " << cell.error << '\n';
          }
        }
      }
      return 0;
    }

    if (gradcheck->parsed()) {
      const ccn::LossCheckReport rep = ccn::run_loss_check(check);
      write_text(paths.file("gradcheck.txt"), ccn::format_loss_check(rep, check.options.tolerance));
      std::printf("max_rel_error=%.6e coords=%zu trials=%zu\n", rep.max_rel_error, rep.coords,
                  rep.trials.size());
      return rep.passed(check.options.tolerance) ? 0 : kExitNumeric;
    }
  } catch (const ccn::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

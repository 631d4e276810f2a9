#pragma once

// Synthetic in-page exposure logs with a known click model, and the
// tab-separated dataset format.
//
// Click model per exposure of `item` on a page of `user` entered through
// `trigger`:
//   logit = base + scale * (alpha * <u, v_item> + (1 - alpha) * <v_trigger, v_item>)
//           + page_offset + noise
// `page_offset` is shared by every exposure of a page (the user's mood when
// entering), so labels on one page are correlated; `noise` is per exposure.
// alpha = 1 makes clicks purely user-driven, alpha = 0 purely trigger-driven.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ccn/error.hpp"
#include "ccn/features.hpp"

namespace ccn {

struct WorldSpec {
  std::size_t users = 100;
  std::size_t items = 500;
  std::size_t categories = 20;
  std::size_t sellers = 50;
  std::size_t latent_dim = 8;
  std::size_t pages_per_user = 10;
  std::size_t min_exposures = 6;
  std::size_t max_exposures = 12;
  std::size_t warmup_pages = 5;     // simulated only to seed behavior history
  std::size_t short_cap = 20;
  std::size_t long_cap = 100;
  std::size_t trigger_candidates = 10;
  double alpha = 0.5;
  double noise = 0.5;               // per-exposure logit noise (std)
  double page_noise = 1.0;          // per-page shared logit offset (std)
  double base_logit = -1.5;
  double affinity_scale = 2.0;
  double same_category_share = 0.5; // exposures drawn from the trigger's category
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& what) { throw DataError("world spec: " + what); };
    if (users < 1 || items < 1 || categories < 1 || sellers < 1 || latent_dim < 1) {
      fail("all counts must be >= 1");
    }
    if (pages_per_user < 1) fail("pages_per_user must be >= 1");
    if (min_exposures < 2) fail("exposures per page must be >= 2");
    if (max_exposures < min_exposures) fail("max_exposures < min_exposures");
    if (items < max_exposures + 1) fail("not enough items to fill a page");
    if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must lie in [0, 1]");
    if (!(noise >= 0.0) || !(page_noise >= 0.0)) fail("noise levels must be >= 0");
    if (!(same_category_share >= 0.0 && same_category_share <= 1.0)) {
      fail("same_category_share must lie in [0, 1]");
    }
    if (trigger_candidates < 1) fail("trigger_candidates must be >= 1");
  }
};

inline constexpr std::size_t kProfileFields = 2;
inline constexpr std::uint64_t kAgeBands = 8;
inline constexpr std::uint64_t kGenderBands = 2;

/// Hidden state of a generated world.
struct GroundTruth {
  double alpha = 0.5;
  double base_logit = 0.0;
  double affinity_scale = 1.0;
  std::vector<std::vector<double>> user_latent;
  std::vector<std::vector<double>> item_latent;
  std::vector<ItemFeatures> item_features;
  std::vector<double> page_offset;                 // per emitted page
  std::vector<std::vector<double>> click_prob;     // per emitted page, per exposure

  /// Noise-free logit of (user, trigger, item) plus a page offset.
  double click_logit(std::size_t user, Id trigger, Id item, double offset) const {
    const auto& u = user_latent.at(user);
    const auto& t = item_latent.at(trigger);
    const auto& v = item_latent.at(item);
    double ua = 0.0;
    double ta = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
      ua += u[k] * v[k];
      ta += t[k] * v[k];
    }
    return base_logit + affinity_scale * (alpha * ua + (1.0 - alpha) * ta) + offset;
  }
};

struct Dataset {
  std::vector<ImpressionPage> pages;
  GroundTruth truth;
};

namespace detail {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline std::vector<double> gaussian_vector(std::size_t k, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(k);
  for (double& x : v) x = n(rng);
  return v;
}

}  // namespace detail

/// Pages come out user-major: user u owns page ids
/// [u * pages_per_user, (u + 1) * pages_per_user). Each user draws from its
/// own seeded stream, so disjoint user ranges can be generated independently
/// and concatenated in user order with identical results.
inline Dataset generate_dataset(const WorldSpec& spec) {
  spec.validate();
  Dataset ds;
  GroundTruth& gt = ds.truth;
  gt.alpha = spec.alpha;
  gt.base_logit = spec.base_logit;
  gt.affinity_scale = spec.affinity_scale;

  const std::size_t k = spec.latent_dim;
  const double entry_std = std::pow(static_cast<double>(k), -0.25);  // <u, v> has unit variance

  std::seed_seq world_seq{spec.seed, std::uint64_t{0xC0FFEE}};
  std::mt19937_64 world(world_seq);
  std::vector<std::vector<double>> centers;
  for (std::size_t c = 0; c < spec.categories; ++c) {
    centers.push_back(detail::gaussian_vector(k, entry_std, world));
  }
  std::uniform_int_distribution<std::size_t> pick_cat(0, spec.categories - 1);
  std::uniform_int_distribution<std::size_t> pick_seller(0, spec.sellers - 1);
  std::vector<std::vector<Id>> by_category(spec.categories);
  for (std::size_t i = 0; i < spec.items; ++i) {
    const std::size_t c = pick_cat(world);
    const std::size_t s = pick_seller(world);
    std::vector<double> own = detail::gaussian_vector(k, entry_std, world);
    for (std::size_t j = 0; j < k; ++j) own[j] = std::sqrt(0.6) * centers[c][j] + std::sqrt(0.4) * own[j];
    gt.item_latent.push_back(std::move(own));
    gt.item_features.push_back({i, c, s});
    by_category[c].push_back(i);
  }

  for (std::size_t u = 0; u < spec.users; ++u) {
    std::seed_seq user_seq{spec.seed, std::uint64_t{u}, std::uint64_t{0x5EED}};
    std::mt19937_64 rng(user_seq);
    gt.user_latent.push_back(detail::gaussian_vector(k, entry_std, rng));
    const auto& ul = gt.user_latent.back();
    UserProfile profile{u, {std::uniform_int_distribution<Id>(0, kAgeBands - 1)(rng),
                            std::uniform_int_distribution<Id>(0, kGenderBands - 1)(rng)}};

    std::vector<ItemFeatures> history;  // clicked items, most recent first
    std::uniform_int_distribution<Id> any_item(0, spec.items - 1);
    std::uniform_int_distribution<std::size_t> page_size(spec.min_exposures, spec.max_exposures);
    std::bernoulli_distribution from_category(spec.same_category_share);
    std::normal_distribution<double> page_noise(0.0, spec.page_noise);
    std::normal_distribution<double> exposure_noise(0.0, spec.noise);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (std::size_t p = 0; p < spec.warmup_pages + spec.pages_per_user; ++p) {
      // Trigger: the best of a few random items for this user.
      Id trigger = any_item(rng);
      double best = detail::dot(ul, gt.item_latent[trigger]);
      for (std::size_t c = 1; c < spec.trigger_candidates; ++c) {
        const Id cand = any_item(rng);
        const double a = detail::dot(ul, gt.item_latent[cand]);
        if (a > best) {
          best = a;
          trigger = cand;
        }
      }
      const auto& same_cat = by_category[gt.item_features[trigger].category_id];

      ImpressionPage page;
      page.user = profile;
      page.trigger = gt.item_features[trigger];
      {
        const auto seq = std::span<const ItemFeatures>(history);
        const auto short_part = seq.first(std::min(seq.size(), spec.short_cap));
        const auto rest = seq.subspan(short_part.size());
        page.sequences.short_term.assign(short_part.begin(), short_part.end());
        const auto long_part = rest.first(std::min(rest.size(), spec.long_cap));
        page.sequences.long_term.assign(long_part.begin(), long_part.end());
      }

      const std::size_t n = page_size(rng);
      std::vector<Id> shown;
      while (shown.size() < n) {
        Id cand = any_item(rng);
        if (from_category(rng) && same_cat.size() > 1) {
          cand = same_cat[std::uniform_int_distribution<std::size_t>(0, same_cat.size() - 1)(rng)];
        }
        if (cand == trigger || std::find(shown.begin(), shown.end(), cand) != shown.end()) continue;
        shown.push_back(cand);
      }

      const double offset = page_noise(rng);
      std::vector<double> probs;
      for (Id item : shown) {
        const double logit = gt.click_logit(u, trigger, item, offset) + exposure_noise(rng);
        const double prob = detail::logistic(logit);
        const int click = unit(rng) < prob ? 1 : 0;
        page.exposures.push_back({gt.item_features[item], click});
        probs.push_back(prob);
      }
      for (const Exposure& e : page.exposures) {
        if (e.click != 0) history.insert(history.begin(), e.item);
      }
      if (history.size() > spec.short_cap + spec.long_cap) {
        history.resize(spec.short_cap + spec.long_cap);
      }

      if (p >= spec.warmup_pages) {
        page.page_id = u * spec.pages_per_user + (p - spec.warmup_pages);
        ds.pages.push_back(std::move(page));
        gt.page_offset.push_back(offset);
        gt.click_prob.push_back(std::move(probs));
      }
    }
  }
  return ds;
}

/// Per user (in order of first appearance), the last `test_fraction` of
/// their pages go to the test split.
struct Split {
  std::vector<ImpressionPage> train;
  std::vector<ImpressionPage> test;
};

inline Split temporal_split(std::span<const ImpressionPage> pages, double test_fraction) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw DataError("test fraction must lie in [0, 1)");
  }
  std::map<Id, std::vector<std::size_t>> by_user;
  std::vector<Id> user_order;
  for (std::size_t i = 0; i < pages.size(); ++i) {
    auto [it, inserted] = by_user.try_emplace(pages[i].user.user_id);
    if (inserted) user_order.push_back(pages[i].user.user_id);
    it->second.push_back(i);
  }
  Split s;
  for (Id u : user_order) {
    const auto& idx = by_user[u];
    const auto n_test = static_cast<std::size_t>(
        std::floor(test_fraction * static_cast<double>(idx.size()) + 0.5));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      (j + n_test < idx.size() ? s.train : s.test).push_back(pages[idx[j]]);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Text format
//
// page_id \t user_id \t f1,f2 \t item:cat:seller \t short \t long \t exposures
// short/long: item:cat:seller;...   exposures: item:cat:seller:label;...
// Empty lists serialize as "-".

namespace detail {

inline void append_id(std::string& out, Id v) {
  char buf[24];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

inline void append_item(std::string& out, const ItemFeatures& f) {
  append_id(out, f.item_id);
  out += ':';
  append_id(out, f.category_id);
  out += ':';
  append_id(out, f.seller_id);
}

inline void append_items(std::string& out, std::span<const ItemFeatures> items) {
  if (items.empty()) {
    out += '-';
    return;
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ';';
    append_item(out, items[i]);
  }
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline Id parse_id(std::string_view s, std::size_t line, const char* field) {
  Id v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(line, field, "expected a nonnegative integer, got '" + std::string(s) + "'");
  }
  return v;
}

inline ItemFeatures parse_item(std::string_view s, std::size_t line, const char* field) {
  const auto parts = split(s, ':');
  if (parts.size() != 3) {
    throw ParseError(line, field, "expected item:category:seller, got '" + std::string(s) + "'");
  }
  return {parse_id(parts[0], line, field), parse_id(parts[1], line, field),
          parse_id(parts[2], line, field)};
}

inline std::vector<ItemFeatures> parse_items(std::string_view s, std::size_t line,
                                             const char* field) {
  std::vector<ItemFeatures> out;
  if (s == "-") return out;
  for (std::string_view part : split(s, ';')) out.push_back(parse_item(part, line, field));
  return out;
}

}  // namespace detail

inline std::string format_page(const ImpressionPage& p) {
  std::string out;
  detail::append_id(out, p.page_id);
  out += '\t';
  detail::append_id(out, p.user.user_id);
  out += '\t';
  if (p.user.profile_fields.empty()) out += '-';
  for (std::size_t i = 0; i < p.user.profile_fields.size(); ++i) {
    if (i > 0) out += ',';
    detail::append_id(out, p.user.profile_fields[i]);
  }
  out += '\t';
  detail::append_item(out, p.trigger);
  out += '\t';
  detail::append_items(out, p.sequences.short_term);
  out += '\t';
  detail::append_items(out, p.sequences.long_term);
  out += '\t';
  if (p.exposures.empty()) out += '-';
  for (std::size_t i = 0; i < p.exposures.size(); ++i) {
    if (i > 0) out += ';';
    detail::append_item(out, p.exposures[i].item);
    out += ':';
    out += p.exposures[i].click != 0 ? '1' : '0';
  }
  return out;
}

/// Parses and validates one record. `line` is used in error messages.
inline ImpressionPage parse_page(std::string_view text, std::size_t line,
                                 std::size_t min_exposures = 2) {
  if (!text.empty() && text.back() == '\r') text.remove_suffix(1);
  const auto fields = detail::split(text, '\t');
  if (fields.size() != 7) {
    throw ParseError(line, "record",
                     "expected 7 tab-separated fields, got " + std::to_string(fields.size()));
  }
  ImpressionPage p;
  p.page_id = detail::parse_id(fields[0], line, "page_id");
  p.user.user_id = detail::parse_id(fields[1], line, "user_id");
  if (fields[2] != "-") {
    for (std::string_view f : detail::split(fields[2], ',')) {
      p.user.profile_fields.push_back(detail::parse_id(f, line, "profile"));
    }
  }
  p.trigger = detail::parse_item(fields[3], line, "trigger");
  p.sequences.short_term = detail::parse_items(fields[4], line, "short_seq");
  p.sequences.long_term = detail::parse_items(fields[5], line, "long_seq");
  if (fields[6] != "-") {
    for (std::string_view part : detail::split(fields[6], ';')) {
      const auto bits = detail::split(part, ':');
      if (bits.size() != 4) {
        throw ParseError(line, "exposures",
                         "expected item:category:seller:label, got '" + std::string(part) + "'");
      }
      Exposure e;
      e.item = {detail::parse_id(bits[0], line, "exposures"),
                detail::parse_id(bits[1], line, "exposures"),
                detail::parse_id(bits[2], line, "exposures")};
      if (bits[3] != "0" && bits[3] != "1") {
        throw ParseError(line, "click_label", "expected 0 or 1, got '" + std::string(bits[3]) + "'");
      }
      e.click = bits[3] == "1" ? 1 : 0;
      p.exposures.push_back(e);
    }
  }
  try {
    validate_page(p, min_exposures);
  } catch (const DataError& err) {
    throw ParseError(line, "exposures", err.what());
  }
  return p;
}

inline void write_dataset(std::span<const ImpressionPage> pages, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  std::string line;
  for (const ImpressionPage& p : pages) {
    line = format_page(p);
    line += '\n';
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
  }
  out.flush();
  if (!out) throw IoError("write to '" + path + "' failed");
}

/// Reads every record; all records must carry the same number of profile
/// fields as the first one.
inline std::vector<ImpressionPage> parse_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  std::vector<ImpressionPage> pages;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    pages.push_back(parse_page(line, lineno));
    if (pages.back().user.profile_fields.size() != pages.front().user.profile_fields.size()) {
      throw ParseError(lineno, "profile", "profile field count differs from the first record");
    }
  }
  if (in.bad()) throw IoError("read error on '" + path + "'");
  return pages;
}

}  // namespace ccn

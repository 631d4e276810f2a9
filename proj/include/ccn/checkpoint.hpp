#pragma once

// Checkpoint container.
//
//   CCN-CKPT-v1\n
//   key=value\n ...            variant, seed, schema fingerprint, hyperparameters,
//                              free-form meta.<key> lineage entries
//   arrays=<count>\n
//   array <name> <rows> <cols>\n <rows*cols float64, little-endian>\n   (repeated)
//   end\n

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ccn/error.hpp"
#include "ccn/model.hpp"

namespace ccn {

inline constexpr const char* kCheckpointVersion = "CCN-CKPT-v1";

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) out += ',';
    out += std::to_string(v[i]);
  }
  return out.empty() ? "-" : out;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

/// Hyperparameters as ordered key/value pairs (exact round trip).
inline std::vector<std::pair<std::string, std::string>> hyperparam_entries(const HyperParams& hp) {
  using detail::format_double;
  using detail::format_sizes;
  return {
      {"dim", std::to_string(hp.dim)},
      {"heads", std::to_string(hp.heads)},
      {"short_cap", std::to_string(hp.short_cap)},
      {"long_cap", std::to_string(hp.long_cap)},
      {"item_buckets", std::to_string(hp.item_buckets)},
      {"category_buckets", std::to_string(hp.category_buckets)},
      {"seller_buckets", std::to_string(hp.seller_buckets)},
      {"user_buckets", std::to_string(hp.user_buckets)},
      {"profile_buckets", format_sizes(hp.profile_buckets)},
      {"pred_hidden", format_sizes(hp.pred_hidden)},
      {"collab_hidden", format_sizes(hp.collab_hidden)},
      {"tau", format_double(hp.tau)},
      {"xi", format_double(hp.xi)},
      {"lambda", format_double(hp.lambda)},
      {"prior_clamp", format_double(hp.prior_clamp)},
      {"learning_rate", format_double(hp.learning_rate)},
      {"lr_decay", format_double(hp.lr_decay)},
      {"adagrad_epsilon", format_double(hp.adagrad_epsilon)},
      {"batch_size", std::to_string(hp.batch_size)},
  };
}

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError("field '" + key + "': expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError("field '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (v == "-" || v.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = v.find(',', start);
    out.push_back(parse_size(key, v.substr(start, pos == std::string::npos ? std::string::npos
                                                                           : pos - start)));
    if (pos == std::string::npos) return out;
    start = pos + 1;
  }
}

}  // namespace detail

/// Sets one hyperparameter from its text form. Unknown keys are rejected.
inline void set_hyperparam(HyperParams& hp, const std::string& key, const std::string& v) {
  using detail::parse_double;
  using detail::parse_size;
  using detail::parse_sizes;
  if (key == "dim") hp.dim = parse_size(key, v);
  else if (key == "heads") hp.heads = parse_size(key, v);
  else if (key == "short_cap") hp.short_cap = parse_size(key, v);
  else if (key == "long_cap") hp.long_cap = parse_size(key, v);
  else if (key == "item_buckets") hp.item_buckets = parse_size(key, v);
  else if (key == "category_buckets") hp.category_buckets = parse_size(key, v);
  else if (key == "seller_buckets") hp.seller_buckets = parse_size(key, v);
  else if (key == "user_buckets") hp.user_buckets = parse_size(key, v);
  else if (key == "profile_buckets") hp.profile_buckets = parse_sizes(key, v);
  else if (key == "pred_hidden") hp.pred_hidden = parse_sizes(key, v);
  else if (key == "collab_hidden") hp.collab_hidden = parse_sizes(key, v);
  else if (key == "tau") hp.tau = parse_double(key, v);
  else if (key == "xi") hp.xi = parse_double(key, v);
  else if (key == "lambda") hp.lambda = parse_double(key, v);
  else if (key == "prior_clamp") hp.prior_clamp = parse_double(key, v);
  else if (key == "learning_rate") hp.learning_rate = parse_double(key, v);
  else if (key == "lr_decay") hp.lr_decay = parse_double(key, v);
  else if (key == "adagrad_epsilon") hp.adagrad_epsilon = parse_double(key, v);
  else if (key == "batch_size") hp.batch_size = parse_size(key, v);
  else throw DataError("unknown hyperparameter '" + key + "'");
}

/// Fingerprint of everything that fixes array shapes and the expected input
/// data layout.
inline std::uint64_t schema_fingerprint(const HyperParams& hp, Variant variant) {
  std::string s = "variant=" + std::string(variant_name(variant));
  for (const auto& [k, v] : hyperparam_entries(hp)) {
    if (k == "tau" || k == "xi" || k == "lambda" || k == "prior_clamp" || k == "learning_rate" ||
        k == "lr_decay" || k == "adagrad_epsilon" || k == "batch_size") {
      continue;
    }
    s += ";" + k + "=" + v;
  }
  return detail::fnv1a(s);
}

/// Throws CheckpointError naming the first shape-defining field on which
/// `model` differs from `expected`.
inline void expect_schema(const Model& model, const HyperParams& expected) {
  const auto have = hyperparam_entries(model.hyper());
  const auto want = hyperparam_entries(expected);
  for (std::size_t i = 0; i < have.size(); ++i) {
    const std::string& k = have[i].first;
    if (k == "tau" || k == "xi" || k == "lambda" || k == "prior_clamp" || k == "learning_rate" ||
        k == "lr_decay" || k == "adagrad_epsilon" || k == "batch_size") {
      continue;
    }
    if (have[i].second != want[i].second) {
      throw CheckpointError("schema mismatch in field '" + k + "': checkpoint has " +
                            have[i].second + ", expected " + want[i].second);
    }
  }
}

inline void save_checkpoint(const Model& model, const std::string& path,
                            const std::map<std::string, std::string>& meta = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint '" + path + "' for writing");
  std::ostringstream head;
  head << kCheckpointVersion << '\n';
  head << "variant=" << variant_name(model.variant()) << '\n';
  head << "seed=" << model.init_seed() << '\n';
  head << "schema=" << std::hex << schema_fingerprint(model.hyper(), model.variant()) << std::dec
       << '\n';
  for (const auto& [k, v] : hyperparam_entries(model.hyper())) head << "hp." << k << '=' << v << '\n';
  for (const auto& [k, v] : meta) head << "meta." << k << '=' << v << '\n';
  const auto params = model.parameters();
  head << "arrays=" << params.size() << '\n';
  const std::string h = head.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));

  std::vector<unsigned char> buf;
  for (const Parameter* p : params) {
    const std::string line = "array " + p->name + " " + std::to_string(p->value.rows) + " " +
                             std::to_string(p->value.cols) + "\n";
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    buf.resize(p->value.size() * 8);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(p->value.data[i]);
      for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    out.put('\n');
  }
  out << "end\n";
  out.flush();
  if (!out) throw IoError("write to checkpoint '" + path + "' failed");
}

struct LoadedCheckpoint {
  Model model;
  std::map<std::string, std::string> meta;
};

inline LoadedCheckpoint load_checkpoint_with_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  auto corrupt = [&](const std::string& what) {
    return CheckpointError("corrupt checkpoint '" + path + "': " + what);
  };

  std::string line;
  if (!std::getline(in, line)) throw corrupt("empty file");
  if (line != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version '" + line.substr(0, 32) + "' in '" +
                          path + "' (expected " + kCheckpointVersion + ")");
  }

  HyperParams hp;
  std::string variant;
  std::string schema;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> meta;
  std::size_t arrays = 0;
  while (true) {
    if (!std::getline(in, line)) throw corrupt("header ends early");
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw corrupt("bad header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "variant") variant = value;
      else if (key == "seed") seed = detail::parse_size(key, value);
      else if (key == "schema") schema = value;
      else if (key.rfind("hp.", 0) == 0) set_hyperparam(hp, key.substr(3), value);
      else if (key.rfind("meta.", 0) == 0) meta[key.substr(5)] = value;
      else if (key == "arrays") {
        arrays = detail::parse_size(key, value);
        break;
      } else {
        throw corrupt("unknown header key '" + key + "'");
      }
    } catch (const CheckpointError&) {
      throw;
    } catch (const DataError& e) {
      throw corrupt(e.what());
    }
  }

  Variant v = Variant::kCcn;
  try {
    v = parse_variant(variant);
  } catch (const DataError& e) {
    throw corrupt(e.what());
  }
  std::ostringstream fp;
  fp << std::hex << schema_fingerprint(hp, v);
  if (fp.str() != schema) {
    throw CheckpointError("schema fingerprint mismatch in '" + path + "': stored " + schema +
                          ", hyperparameters give " + fp.str());
  }

  Model model(hp, v, seed);
  const auto params = model.parameters();
  if (arrays != params.size()) {
    throw CheckpointError("schema mismatch: checkpoint holds " + std::to_string(arrays) +
                          " arrays, variant " + variant + " needs " +
                          std::to_string(params.size()));
  }
  std::vector<unsigned char> buf;
  for (Parameter* p : params) {
    if (!std::getline(in, line)) throw corrupt("truncated before array '" + p->name + "'");
    std::istringstream hdr(line);
    std::string tag;
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    if (!(hdr >> tag >> name >> rows >> cols) || tag != "array") {
      throw corrupt("bad array header '" + line.substr(0, 64) + "'");
    }
    if (name != p->name) {
      throw CheckpointError("schema mismatch: expected array '" + p->name + "', found '" + name + "'");
    }
    if (rows != p->value.rows || cols != p->value.cols) {
      const std::string field = cols != p->value.cols && name.rfind("emb.", 0) == 0 ? "dim" : name;
      throw CheckpointError("schema mismatch in field '" + field + "': array '" + name + "' is [" +
                            std::to_string(rows) + "x" + std::to_string(cols) +
                            "], model expects " + p->value.shape_str());
    }
    buf.resize(rows * cols * 8);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size() || in.get() != '\n') {
      throw corrupt("truncated payload of array '" + name + "'");
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
      p->value.data[i] = std::bit_cast<double>(bits);
    }
  }
  if (!std::getline(in, line) || line != "end") throw corrupt("missing end marker");
  return {std::move(model), std::move(meta)};
}

inline Model load_checkpoint(const std::string& path) {
  return std::move(load_checkpoint_with_meta(path).model);
}

}  // namespace ccn

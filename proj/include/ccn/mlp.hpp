#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ccn/autodiff.hpp"

namespace ccn {

struct Dense {
  Parameter weight;  // in x out
  Parameter bias;    // out x 1
};

/// Feed-forward stack: ReLU on hidden layers, linear output layer.
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::string prefix, std::size_t input_width, const std::vector<std::size_t>& hidden,
      std::size_t output_width, std::mt19937_64& rng) {
    std::vector<std::size_t> widths{input_width};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(output_width);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const std::size_t in = widths[l];
      const std::size_t out = widths[l + 1];
      Dense layer;
      layer.weight.name = prefix + ".w" + std::to_string(l);
      layer.bias.name = prefix + ".b" + std::to_string(l);
      layer.weight.value = Tensor(in, out);
      layer.bias.value = Tensor(out, 1);
      const double a = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> dist(-a, a);
      for (double& v : layer.weight.value.data) v = dist(rng);
      layers_.push_back(std::move(layer));
    }
  }

  std::size_t input_width() const { return layers_.front().weight.value.rows; }
  std::size_t output_width() const { return layers_.back().weight.value.cols; }
  std::size_t depth() const { return layers_.size(); }

  std::vector<Dense>& layers() { return layers_; }
  const std::vector<Dense>& layers() const { return layers_; }

  NodeId apply(Graph& g, NodeId x) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Dense& layer = layers_[l];
      x = g.add(g.matmul(g.param(layer.weight), x, /*trans_a=*/true), g.param(layer.bias));
      if (l + 1 < layers_.size()) x = g.relu(x);
    }
    return x;
  }

  /// Row-batched form: `rows` is k x in, the result k x out. Row r of the
  /// result equals apply() on row r alone, bit for bit.
  NodeId apply_rows(Graph& g, NodeId rows) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Dense& layer = layers_[l];
      rows = g.add_bias(g.matmul(rows, g.param(layer.weight)), g.param(layer.bias));
      if (l + 1 < layers_.size()) rows = g.relu(rows);
    }
    return rows;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (Dense& layer : layers_) {
      out.push_back(&layer.weight);
      out.push_back(&layer.bias);
    }
    return out;
  }

 private:
  std::vector<Dense> layers_;
};

}  // namespace ccn

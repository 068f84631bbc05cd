// Small trained models shared by the attack and metrics tests.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "reet/atf.hpp"
#include "reet/attack.hpp"
#include "reet/data.hpp"
#include "reet/model.hpp"

namespace fixtures {

/// Built-in CNN trained briefly on 200 synthetic patches (seed 1).
inline const reet::BuiltinCnn& quick_cnn() {
  static const reet::BuiltinCnn model = [] {
    const reet::Dataset ds = reet::generate_synthetic(200, 1);
    reet::BuiltinCnn m = reet::BuiltinCnn::init(2, 2);
    reet::TrainConfig cfg;
    cfg.total_passes = 250;
    cfg.seed = 3;
    reet::train_standard(m, ds.items, cfg);
    return m;
  }();
  return model;
}

/// Held-out patches for the quick model (different generator seed).
inline const reet::Dataset& holdout() {
  static const reet::Dataset ds = reet::generate_synthetic(60, 99);
  return ds;
}

/// Samples the model classifies correctly.
inline std::vector<reet::Sample> clean_correct(const reet::BlackBoxClassifier& model, std::span<const reet::Sample> in,
                                               std::size_t limit) {
  std::vector<reet::Sample> out;
  for (const reet::Sample& s : in) {
    if (out.size() == limit) break;
    const reet::Tensor z = model.predict(s.image.reshaped({1, 3, 32, 32}));
    if (reet::argmax(z.data()) == s.label) out.push_back(s);
  }
  return out;
}

/// Cross-entropy of one logit row in double.
inline double ce(std::span<const float> z, int label) {
  double m = -INFINITY;
  for (float v : z) m = std::max(m, static_cast<double>(v));
  double s = 0.0;
  for (float v : z) s += std::exp(v - m);
  return m + std::log(s) - z[static_cast<std::size_t>(label)];
}

}  // namespace fixtures

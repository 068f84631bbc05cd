#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "reet/data.hpp"
#include "reet/model.hpp"
#include "reet/transforms.hpp"

namespace reet {

struct TrainConfig {
  /// Forward/backward passes to run; one pass is one minibatch step.
  long total_passes = 2000;
  int batch_size = 32;
  double lr = 0.02;
  std::uint64_t seed = 0;
};

struct ATFConfig {
  /// Replays per minibatch.
  int m = 4;
  long total_passes = 2000;
  int batch_size = 32;
  double lr = 0.02;
  /// Ascent step as a fraction of each parameter's box width.
  double ascent_frac = 0.05;
  /// Active transforms, applied in order with independent persistent buffers.
  std::vector<TransformDescriptor> transforms;
  std::uint64_t seed = 0;

  /// Called after every transform-parameter update.
  std::function<void(const TransformDescriptor&, const ParamVector&)> on_update;
};

struct TrainHistory {
  std::vector<float> pass_loss;
  /// Accuracy over the (first-replay) forward passes of each epoch.
  std::vector<float> epoch_accuracy;
  /// Persistent transform buffers at the end of training (ATF only).
  ParamVector final_theta;
  long passes = 0;
  long minibatches = 0;
};

struct TrainResult {
  ModelWeights weights;
  TrainHistory history;
};

/// Plain minibatch SGD on mean cross-entropy. Updates `model` in place.
TrainResult train_standard(WhiteBoxClassifier& model, std::span<const Sample> dataset, const TrainConfig& cfg);

/// Adversarial training for free, generalized to transform parameters: each
/// minibatch is replayed m times, and every replay's single backward pass
/// drives both the weight descent and the parameter ascent.
TrainResult train_atf(WhiteBoxClassifier& model, std::span<const Sample> dataset, const ATFConfig& cfg);

}  // namespace reet

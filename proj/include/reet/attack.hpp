#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "reet/data.hpp"
#include "reet/model.hpp"
#include "reet/transforms.hpp"

namespace reet {

enum class Optimizer { pgd, stochastic };

std::string_view optimizer_name(Optimizer o);

struct AttackConfig {
  int steps = 10;
  /// Step size as a fraction of each parameter's box width.
  double step_frac = 0.1;
  LossKind loss = LossKind::cross_entropy;
  bool early_stop_on_flip = false;
  /// Mutants per generation (stochastic search).
  int population = 8;
  /// Mutation scale as a fraction of box width (stochastic search).
  double mutation_frac = 0.1;
  std::uint64_t seed = 0;
  /// PGD restarts; restarts after the first begin at a random box point.
  int restarts = 1;

  /// Called with every evaluated parameter point. Not part of the config echo.
  std::function<void(const ParamVector&)> on_iterate;

  void validate() const;
};

struct AttackResult {
  int index = 0;
  int label = 0;
  ParamVector theta_best;
  /// Best loss seen so far, one entry per evaluation round.
  std::vector<float> loss_trace;
  int pred_clean = -1;
  int pred_adv = -1;
  bool fooled = false;
  std::uint64_t queries = 0;
  int iterations = 0;

  float best_loss() const { return loss_trace.empty() ? 0.0f : loss_trace.back(); }
};

/// Loss of one logit row, computed exactly as the traced losses do.
float loss_from_logits(std::span<const float> logits, int label, LossKind kind);
int argmax(std::span<const float> logits);

/// Projected sign-gradient ascent on the transform parameters.
AttackResult pgd_attack(const WhiteBoxClassifier& model, const Tensor& image, int label,
                        const TransformDescriptor& transform, const AttackConfig& cfg);

/// (1+N) evolution strategy using predictions only. One query is one
/// single-image predict call; queries = 1 + steps * population when run to
/// completion.
AttackResult stochastic_attack(const BlackBoxClassifier& model, const Tensor& image, int label,
                               const TransformDescriptor& transform, const AttackConfig& cfg);

/// Attacks every sample; per-sample seeds derive from (cfg.seed, sample.index).
/// `jobs` > 1 spreads samples over threads; output order follows input order.
std::vector<AttackResult> batch_attack(const BlackBoxClassifier& model, std::span<const Sample> dataset,
                                       const TransformDescriptor& transform, const AttackConfig& cfg,
                                       Optimizer optimizer, int jobs = 1);

}  // namespace reet

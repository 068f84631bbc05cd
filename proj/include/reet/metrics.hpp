#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "reet/attack.hpp"

namespace reet {

struct SampleOutcome {
  int index = 0;
  int label = 0;
  int pred_clean = 0;
  int pred_adv = 0;
  bool fooled = false;
  float best_loss = 0.0f;
};

struct ImagePair {
  int index = 0;
  Tensor clean;
  Tensor adversarial;
};

struct RobustnessReport {
  std::string transform;
  std::string optimizer;
  nlohmann::json config;
  double clean_accuracy = 0.0;
  double perturbed_accuracy = 0.0;
  /// Empty when no sample was classified correctly before the attack.
  std::optional<double> fooling_rate;
  int n_samples = 0;
  int n_correct_clean = 0;
  double mean_queries = 0.0;
  std::vector<SampleOutcome> per_sample;
  /// Before/after images of fooled samples; not serialized.
  std::vector<ImagePair> fooled_pairs;
};

/// Fraction of clean-correct samples whose prediction changed; nullopt when
/// none were clean-correct.
std::optional<double> fooling_rate(std::span<const AttackResult> results, std::span<const int> labels);
/// (clean accuracy, accuracy after attack); unattacked samples keep their
/// clean prediction.
std::pair<double, double> accuracy_delta(std::span<const AttackResult> results, std::span<const int> labels);

nlohmann::json config_json(const AttackConfig& cfg);

RobustnessReport build_report(std::string transform, Optimizer optimizer, nlohmann::json config,
                              std::span<const AttackResult> results);

nlohmann::json report_json(std::span<const RobustnessReport> reports, std::uint64_t seed,
                           const std::string& model_digest);
/// Canonical text: sorted keys, two-space indent, trailing newline.
std::string canonical_dump(const nlohmann::json& j);

/// Writes <out_dir>/report.json and, when save_pairs, one
/// <out_dir>/<transform>/<index>_{clean,adv}.png pair per fooled sample.
void emit_report(std::span<const RobustnessReport> reports, std::uint64_t seed, const std::string& model_digest,
                 const std::filesystem::path& out_dir, bool save_pairs);

}  // namespace reet

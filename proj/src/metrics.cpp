#include "reet/metrics.hpp"

#include <fstream>
#include <stdexcept>

namespace reet {

using nlohmann::json;

namespace {

void check_lengths(std::span<const AttackResult> results, std::span<const int> labels) {
  if (results.empty()) throw std::invalid_argument("no attack results");
  if (results.size() != labels.size())
    throw std::invalid_argument("got " + std::to_string(results.size()) + " results but " +
                                std::to_string(labels.size()) + " labels");
}

std::vector<int> labels_of(std::span<const AttackResult> results) {
  std::vector<int> out;
  for (const AttackResult& r : results) out.push_back(r.label);
  return out;
}

}  // namespace

std::optional<double> fooling_rate(std::span<const AttackResult> results, std::span<const int> labels) {
  check_lengths(results, labels);
  int correct = 0, fooled = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].pred_clean != labels[i]) continue;
    ++correct;
    if (results[i].pred_adv != results[i].pred_clean) ++fooled;
  }
  if (correct == 0) return std::nullopt;
  return static_cast<double>(fooled) / correct;
}

std::pair<double, double> accuracy_delta(std::span<const AttackResult> results, std::span<const int> labels) {
  check_lengths(results, labels);
  int clean = 0, perturbed = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const bool ok = results[i].pred_clean == labels[i];
    clean += ok;
    // Clean-wrong samples were not attacked and keep their prediction.
    perturbed += ok ? results[i].pred_adv == labels[i] : 0;
  }
  const auto n = static_cast<double>(results.size());
  return {clean / n, perturbed / n};
}

json config_json(const AttackConfig& cfg) {
  return json{{"steps", cfg.steps},
              {"step_frac", cfg.step_frac},
              {"loss", cfg.loss == LossKind::cross_entropy ? "cross_entropy" : "margin"},
              {"early_stop_on_flip", cfg.early_stop_on_flip},
              {"population", cfg.population},
              {"mutation_frac", cfg.mutation_frac},
              {"seed", cfg.seed},
              {"restarts", cfg.restarts}};
}

RobustnessReport build_report(std::string transform, Optimizer optimizer, json config,
                              std::span<const AttackResult> results) {
  const std::vector<int> labels = labels_of(results);
  RobustnessReport rep;
  rep.transform = std::move(transform);
  rep.optimizer = std::string(optimizer_name(optimizer));
  rep.config = std::move(config);
  std::tie(rep.clean_accuracy, rep.perturbed_accuracy) = accuracy_delta(results, labels);
  rep.fooling_rate = fooling_rate(results, labels);
  rep.n_samples = static_cast<int>(results.size());
  double queries = 0.0;
  for (const AttackResult& r : results) {
    rep.n_correct_clean += r.pred_clean == r.label;
    queries += static_cast<double>(r.queries);
    rep.per_sample.push_back(SampleOutcome{r.index, r.label, r.pred_clean, r.pred_adv, r.fooled, r.best_loss()});
  }
  rep.mean_queries = queries / static_cast<double>(results.size());
  return rep;
}

json report_json(std::span<const RobustnessReport> reports, std::uint64_t seed, const std::string& model_digest) {
  json runs = json::array();
  for (const RobustnessReport& r : reports) {
    json samples = json::array();
    for (const SampleOutcome& s : r.per_sample)
      samples.push_back(json{{"index", s.index},
                             {"label", s.label},
                             {"pred_clean", s.pred_clean},
                             {"pred_adv", s.pred_adv},
                             {"fooled", s.fooled},
                             {"best_loss", static_cast<double>(s.best_loss)}});
    runs.push_back(json{{"transform", r.transform},
                        {"optimizer", r.optimizer},
                        {"config", r.config},
                        {"clean_accuracy", r.clean_accuracy},
                        {"perturbed_accuracy", r.perturbed_accuracy},
                        {"fooling_rate", r.fooling_rate ? json(*r.fooling_rate) : json(nullptr)},
                        {"n_samples", r.n_samples},
                        {"n_correct_clean", r.n_correct_clean},
                        {"mean_queries", r.mean_queries},
                        {"per_sample", std::move(samples)}});
  }
  return json{{"runs", std::move(runs)}, {"seed", seed}, {"model_digest", model_digest}};
}

std::string canonical_dump(const json& j) { return j.dump(2) + "\n"; }

void emit_report(std::span<const RobustnessReport> reports, std::uint64_t seed, const std::string& model_digest,
                 const std::filesystem::path& out_dir, bool save_pairs) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  const auto path = out_dir / "report.json";
  {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << canonical_dump(report_json(reports, seed, model_digest));
    if (!f) throw std::runtime_error("failed writing " + path.string());
  }
  if (!save_pairs) return;
  for (const RobustnessReport& r : reports) {
    if (r.fooled_pairs.empty()) continue;
    const auto dir = out_dir / r.transform;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    for (const ImagePair& p : r.fooled_pairs) {
      write_png(dir / (std::to_string(p.index) + "_clean.png"), p.clean);
      write_png(dir / (std::to_string(p.index) + "_adv.png"), p.adversarial);
    }
  }
}

}  // namespace reet

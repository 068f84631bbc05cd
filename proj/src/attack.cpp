#include "reet/attack.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "reet/rng.hpp"

namespace reet {

std::string_view optimizer_name(Optimizer o) { return o == Optimizer::pgd ? "pgd" : "stochastic"; }

void AttackConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("attack steps must be at least 1");
  if (!(step_frac > 0.0 && step_frac <= 1.0)) throw std::invalid_argument("step_frac must lie in (0, 1]");
  if (population < 1) throw std::invalid_argument("population must be at least 1");
  if (mutation_frac < 0.0) throw std::invalid_argument("mutation_frac must be non-negative");
  if (restarts < 1) throw std::invalid_argument("restarts must be at least 1");
}

float loss_from_logits(std::span<const float> z, int label, LossKind kind) {
  if (label < 0 || static_cast<std::size_t>(label) >= z.size())
    throw std::out_of_range("label " + std::to_string(label) + " outside the logit range");
  if (kind == LossKind::cross_entropy) {
    double zmax = z[0];
    for (float v : z) zmax = std::max(zmax, static_cast<double>(v));
    double denom = 0.0;
    for (float v : z) denom += std::exp(v - zmax);
    return static_cast<float>(zmax + std::log(denom) - z[static_cast<std::size_t>(label)]);
  }
  int runner = -1;
  for (int j = 0; j < static_cast<int>(z.size()); ++j)
    if (j != label && (runner < 0 || z[static_cast<std::size_t>(j)] > z[static_cast<std::size_t>(runner)])) runner = j;
  return static_cast<float>(static_cast<double>(z[static_cast<std::size_t>(runner)]) - z[static_cast<std::size_t>(label)]);
}

int argmax(std::span<const float> z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

namespace {

Tensor as_batch(const Tensor& image) {
  if (image.rank() == 4) {
    if (image.dim(0) != 1) throw std::invalid_argument("attacks take a single image");
    return image;
  }
  Shape s = image.shape();
  s.insert(s.begin(), 1);
  return image.reshaped(std::move(s));
}

struct Evaluation {
  float loss;
  int pred;
};

Evaluation evaluate(const BlackBoxClassifier& model, const Tensor& batch, int label, LossKind kind) {
  const Tensor logits = model.predict(batch);
  return {loss_from_logits(logits.data(), label, kind), argmax(logits.data())};
}

// Clean pass on the raw image. Returns false when the sample is already
// misclassified, in which case `r` is final.
bool start(AttackResult& r, const BlackBoxClassifier& model, const Tensor& batch, int label,
           const TransformDescriptor& transform, const AttackConfig& cfg) {
  const Evaluation clean = evaluate(model, batch, label, cfg.loss);
  r.label = label;
  r.queries = 1;
  r.pred_clean = clean.pred;
  r.pred_adv = clean.pred;
  r.theta_best = transform.neutral();
  r.loss_trace = {clean.loss};
  return clean.pred == label;
}

void finish(AttackResult& r) { r.fooled = r.pred_clean == r.label && r.pred_adv != r.pred_clean; }

}  // namespace

AttackResult pgd_attack(const WhiteBoxClassifier& model, const Tensor& image, int label,
                        const TransformDescriptor& transform, const AttackConfig& cfg) {
  cfg.validate();
  if (!transform.differentiable())
    throw std::invalid_argument("transform '" + transform.name() +
                                "' is not differentiable; use the stochastic optimizer for it");
  const Tensor batch = as_batch(image);
  AttackResult r;
  if (!start(r, model, batch, label, transform, cfg)) return r;

  const ParamVector widths = transform.widths();
  const int labels[1] = {label};
  // The clean pass counts as the neutral point.
  float best = r.loss_trace.back();
  Rng rng(cfg.seed);
  bool flipped = false;
  for (int restart = 0; restart < cfg.restarts && !flipped; ++restart) {
    ParamVector theta = transform.neutral();
    if (restart > 0) {
      std::uniform_real_distribution<float> u(0.0f, 1.0f);
      for (std::size_t i = 0; i < theta.size(); ++i)
        for (std::size_t j = 0; j < theta[i].numel(); ++j)
          theta[i][j] = transform.specs()[i].lo[j] + u(rng) * widths[i][j];
    }
    for (int k = 0; k <= cfg.steps; ++k) {
      if (cfg.on_iterate) cfg.on_iterate(theta);
      const bool last = k == cfg.steps;
      float loss;
      int pred;
      LossAndGrads lg;
      if (last) {
        const Evaluation e = evaluate(model, transform.apply(batch, theta), label, cfg.loss);
        loss = e.loss;
        pred = e.pred;
      } else {
        lg = loss_and_grads(model, batch, labels, GradTarget::transform_params, &transform, &theta, cfg.loss);
        loss = lg.loss;
        pred = argmax(lg.logits.data());
      }
      ++r.queries;
      if (loss > best) {
        best = loss;
        r.theta_best = theta;
        r.pred_adv = pred;
      }
      r.loss_trace.push_back(best);
      if (cfg.early_stop_on_flip && pred != r.pred_clean) {
        flipped = true;
        break;
      }
      if (last) break;
      ++r.iterations;
      for (std::size_t i = 0; i < theta.size(); ++i)
        for (std::size_t j = 0; j < theta[i].numel(); ++j) {
          const float gval = lg.param_grads[i][j];
          const float sgn = gval > 0.0f ? 1.0f : (gval < 0.0f ? -1.0f : 0.0f);
          theta[i][j] += static_cast<float>(cfg.step_frac) * widths[i][j] * sgn;
        }
      theta = transform.project(theta);
    }
  }
  finish(r);
  return r;
}

AttackResult stochastic_attack(const BlackBoxClassifier& model, const Tensor& image, int label,
                               const TransformDescriptor& transform, const AttackConfig& cfg) {
  cfg.validate();
  const Tensor batch = as_batch(image);
  AttackResult r;
  if (!start(r, model, batch, label, transform, cfg)) return r;

  const ParamVector widths = transform.widths();
  Rng rng(cfg.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  ParamVector best_theta = r.theta_best;
  float best = r.loss_trace.back();
  if (cfg.on_iterate) cfg.on_iterate(best_theta);
  for (int step = 0; step < cfg.steps; ++step) {
    ParamVector gen_theta;
    float gen_best = -std::numeric_limits<float>::infinity();
    int gen_pred = r.pred_adv;
    for (int j = 0; j < cfg.population; ++j) {
      ParamVector cand = best_theta;
      for (std::size_t i = 0; i < cand.size(); ++i)
        for (std::size_t k = 0; k < cand[i].numel(); ++k) cand[i][k] += static_cast<float>(cfg.mutation_frac) * widths[i][k] * normal(rng);
      cand = transform.project(cand);
      if (cfg.on_iterate) cfg.on_iterate(cand);
      const Evaluation e = evaluate(model, transform.apply(batch, cand), label, cfg.loss);
      ++r.queries;
      if (e.loss > gen_best) {
        gen_best = e.loss;
        gen_theta = std::move(cand);
        gen_pred = e.pred;
      }
    }
    ++r.iterations;
    if (gen_best > best) {
      best = gen_best;
      best_theta = std::move(gen_theta);
      r.pred_adv = gen_pred;
    }
    r.loss_trace.push_back(best);
    if (cfg.early_stop_on_flip && r.pred_adv != r.pred_clean) break;
  }
  r.theta_best = std::move(best_theta);
  finish(r);
  return r;
}

std::vector<AttackResult> batch_attack(const BlackBoxClassifier& model, std::span<const Sample> dataset,
                                       const TransformDescriptor& transform, const AttackConfig& cfg,
                                       Optimizer optimizer, int jobs) {
  if (dataset.empty()) throw std::invalid_argument("batch_attack: empty dataset");
  cfg.validate();
  const auto* white = dynamic_cast<const WhiteBoxClassifier*>(&model);
  if (optimizer == Optimizer::pgd) {
    if (!white) throw std::invalid_argument("PGD needs a white-box model; use the stochastic optimizer");
    if (!transform.differentiable())
      throw std::invalid_argument("transform '" + transform.name() +
                                  "' is not differentiable; use the stochastic optimizer for it");
  }
  std::vector<AttackResult> results(dataset.size());
  auto run_one = [&](std::size_t i) {
    AttackConfig local = cfg;
    local.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(dataset[i].index));
    const Sample& s = dataset[i];
    results[i] = optimizer == Optimizer::pgd ? pgd_attack(*white, s.image, s.label, transform, local)
                                             : stochastic_attack(model, s.image, s.label, transform, local);
    results[i].index = s.index;
  };
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(dataset.size())));
  if (jobs == 1) {
    for (std::size_t i = 0; i < dataset.size(); ++i) run_one(i);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < dataset.size();) {
        try {
          run_one(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = dataset.size();
        }
      }
    });
  for (std::thread& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return results;
}

}  // namespace reet

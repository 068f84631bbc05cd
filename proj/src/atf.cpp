#include "reet/atf.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "reet/attack.hpp"
#include "reet/rng.hpp"

namespace reet {

namespace {

// Epoch-shuffled minibatch order, fixed by the seed.
class MinibatchStream {
public:
  MinibatchStream(std::size_t n, int batch_size, std::uint64_t seed)
      : order_(n), batch_(static_cast<std::size_t>(batch_size)), rng_(derive_seed(seed, "train")) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (pos_ >= order_.size()) {
      ++epoch_;
      reshuffle();
    }
    const std::size_t end = std::min(order_.size(), pos_ + batch_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return out;
  }
  int epoch() const { return epoch_; }

private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  int epoch_ = 0;
  Rng rng_;
};

struct LoopSpec {
  long total_passes;
  int batch_size;
  double lr;
  std::uint64_t seed;
  int m;
  const TransformDescriptor* transform;
  double ascent_frac;
  const std::function<void(const TransformDescriptor&, const ParamVector&)>* on_update;
};

TrainResult run_loop(WhiteBoxClassifier& model, std::span<const Sample> dataset, const LoopSpec& spec) {
  if (dataset.empty()) throw std::invalid_argument("training needs a non-empty dataset");
  if (spec.total_passes < 1) throw std::invalid_argument("total_passes must be at least 1");
  if (spec.batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (spec.m < 1) throw std::invalid_argument("replay count m must be at least 1");
  if (spec.total_passes < spec.m) throw std::invalid_argument("total_passes must be at least m");

  TrainResult out;
  TrainHistory& hist = out.history;
  MinibatchStream stream(dataset.size(), spec.batch_size, spec.seed);
  ParamVector theta, widths;
  if (spec.transform) {
    theta = spec.transform->neutral();
    widths = spec.transform->widths();
  }
  const auto lr = static_cast<float>(spec.lr);
  const auto ascent = static_cast<float>(spec.ascent_frac);
  long correct = 0, seen = 0;
  int epoch = 0;

  while (hist.passes < spec.total_passes) {
    const std::vector<std::size_t> idx = stream.next();
    if (stream.epoch() != epoch) {
      hist.epoch_accuracy.push_back(static_cast<float>(correct) / static_cast<float>(std::max(seen, 1L)));
      correct = seen = 0;
      epoch = stream.epoch();
    }
    std::vector<Tensor> imgs;
    std::vector<int> labels;
    for (std::size_t i : idx) {
      imgs.push_back(dataset[i].image);
      labels.push_back(dataset[i].label);
    }
    const Tensor batch = stack(imgs);
    ++hist.minibatches;
    const long replays = std::min<long>(spec.m, spec.total_passes - hist.passes);
    for (long r = 0; r < replays; ++r) {
      const LossAndGrads lg =
          spec.transform
              ? loss_and_grads(model, batch, labels, GradTarget::both, spec.transform, &theta)
              : loss_and_grads(model, batch, labels, GradTarget::weights);
      ++hist.passes;
      hist.pass_loss.push_back(lg.loss);
      if (r == 0) {
        const int classes = lg.logits.dim(1);
        for (std::size_t b = 0; b < labels.size(); ++b)
          correct += argmax(lg.logits.data().subspan(b * static_cast<std::size_t>(classes),
                                                     static_cast<std::size_t>(classes))) == labels[b];
        seen += static_cast<long>(labels.size());
      }
      auto& params = model.parameters();
      for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t j = 0; j < params[p].numel(); ++j) params[p][j] -= lr * lg.weight_grads[p][j];
      if (spec.transform) {
        for (std::size_t p = 0; p < theta.size(); ++p)
          for (std::size_t j = 0; j < theta[p].numel(); ++j) {
            const float gv = lg.param_grads[p][j];
            const float sgn = gv > 0.0f ? 1.0f : (gv < 0.0f ? -1.0f : 0.0f);
            theta[p][j] += ascent * widths[p][j] * sgn;
          }
        theta = spec.transform->project(theta);
        if (!spec.transform->in_box(theta)) throw std::logic_error("transform buffer left its box");
        if (spec.on_update && *spec.on_update) (*spec.on_update)(*spec.transform, theta);
      }
    }
  }
  hist.epoch_accuracy.push_back(static_cast<float>(correct) / static_cast<float>(std::max(seen, 1L)));
  hist.final_theta = std::move(theta);
  out.weights.tensors = model.parameters();
  return out;
}

}  // namespace

TrainResult train_standard(WhiteBoxClassifier& model, std::span<const Sample> dataset, const TrainConfig& cfg) {
  return run_loop(model, dataset, LoopSpec{cfg.total_passes, cfg.batch_size, cfg.lr, cfg.seed, 1, nullptr, 0.0, nullptr});
}

TrainResult train_atf(WhiteBoxClassifier& model, std::span<const Sample> dataset, const ATFConfig& cfg) {
  if (cfg.transforms.empty()) throw std::invalid_argument("ATF needs at least one transform");
  for (const TransformDescriptor& t : cfg.transforms)
    if (!t.differentiable())
      throw std::invalid_argument("transform '" + t.name() + "' is not differentiable and cannot be used for ATF");
  const TransformDescriptor pipeline = compose(cfg.transforms);
  return run_loop(model, dataset,
                  LoopSpec{cfg.total_passes, cfg.batch_size, cfg.lr, cfg.seed, cfg.m, &pipeline, cfg.ascent_frac,
                           &cfg.on_update});
}

}  // namespace reet

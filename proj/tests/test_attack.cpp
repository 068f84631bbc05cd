#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <random>

#include "fixtures.hpp"
#include "reet/attack.hpp"
#include "reet/metrics.hpp"
#include "reet/rng.hpp"
#include "reference.hpp"

using namespace reet;

namespace {

/// Forwards to another model and counts single-image queries.
class CountingModel final : public BlackBoxClassifier {
public:
  explicit CountingModel(const BlackBoxClassifier& inner) : inner_(inner) {}
  Tensor predict(const Tensor& images) const override {
    calls += static_cast<std::uint64_t>(images.dim(0));
    return inner_.predict(images);
  }
  mutable std::atomic<std::uint64_t> calls{0};

private:
  const BlackBoxClassifier& inner_;
};

/// Brightness only; contrast pinned at 1.
TransformDescriptor brightness_only() {
  TransformOptions opt;
  opt.boxes["brightness_contrast.contrast"] = {1.0f, 1.0f, 1.0f};
  return make_transform(TransformKind::brightness_contrast, opt);
}

double grid_max(const BlackBoxClassifier& model, const Sample& s, const TransformDescriptor& t) {
  const float lo = t.specs()[1].lo[0], hi = t.specs()[1].hi[0];
  double best = -INFINITY;
  for (int i = 0; i <= 100; ++i) {
    ParamVector theta = t.neutral();
    theta[1][0] = lo + (hi - lo) * static_cast<float>(i) / 100.0f;
    const Tensor z = model.predict(t.apply(s.image.reshaped({1, 3, 32, 32}), theta));
    best = std::max(best, fixtures::ce(z.data(), s.label));
  }
  return best;
}

AttackConfig pgd_config() {
  AttackConfig cfg;
  cfg.steps = 20;
  cfg.step_frac = 0.05;
  return cfg;
}

AttackConfig es_config() {
  AttackConfig cfg;
  cfg.steps = 50;
  cfg.population = 16;
  cfg.mutation_frac = 0.1;
  return cfg;
}

bool traces_equal(const AttackResult& a, const AttackResult& b) {
  return a.index == b.index && a.theta_best == b.theta_best && a.loss_trace == b.loss_trace &&
         a.pred_clean == b.pred_clean && a.pred_adv == b.pred_adv && a.fooled == b.fooled && a.queries == b.queries &&
         a.iterations == b.iterations;
}

}  // namespace

TEST_CASE("PGD reaches the closed-form optimum on a linear model") {
  std::mt19937_64 rng(1);
  TransformOptions opt;
  opt.image_shape = {3, 4, 4};
  const float eps = 8.0f / 255.0f;
  const TransformDescriptor t = make_transform(TransformKind::additive, opt);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor w = ref::uniform_tensor({2, 48}, rng, -1, 1), b = ref::uniform_tensor({2}, rng, -0.2, 0.2);
    const LinearClassifier model(w, b);
    // Interior images; the [0,1] clamp never binds.
    const Tensor x = ref::uniform_tensor({3, 4, 4}, rng, 0.1, 0.9);
    const int label = argmax(model.predict(x.reshaped({1, 3, 4, 4})).data());
    // Loss grows with (w_other - w_label) . delta; the optimum is eps * sign of that direction.
    const int other = 1 - label;
    ref::Vec z(2);
    for (int c = 0; c < 2; ++c) {
      z[c] = b[c];
      for (int i = 0; i < 48; ++i) {
        const double d = w[other * 48 + i] - w[label * 48 + i];
        z[c] += w[c * 48 + i] * (x[i] + eps * (d > 0 ? 1.0 : -1.0));
      }
    }
    const double optimum = ref::mean_cross_entropy(z, 1, 2, {label});
    for (int steps : {1, 3}) {
      AttackConfig cfg;
      cfg.steps = steps;
      cfg.step_frac = 1.0;
      const AttackResult r = pgd_attack(model, x, label, t, cfg);
      worst = std::max(worst, std::abs(r.best_loss() - optimum));
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("zero gradient leaves PGD at neutral") {
  const LinearClassifier model(Tensor({2, 3072}), Tensor::from({1.0f, 0.0f}));
  const Tensor x({3, 32, 32}, 0.4f);
  for (TransformKind k : {TransformKind::additive, TransformKind::stain, TransformKind::brightness_contrast}) {
    const TransformDescriptor t = make_transform(k);
    const AttackResult r = pgd_attack(model, x, 0, t, AttackConfig{});
    CHECK(r.theta_best == t.neutral());
    CHECK_FALSE(r.fooled);
    CHECK(std::all_of(r.loss_trace.begin(), r.loss_trace.end(), [&](float v) { return v == r.loss_trace[0]; }));
  }
}

TEST_CASE("brightness attacks reach the grid optimum") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  const TransformDescriptor t = brightness_only();
  const auto samples = fixtures::clean_correct(model, fixtures::holdout().items, 20);
  REQUIRE(samples.size() == 20);
  double pgd_ratio = INFINITY, es_ratio = INFINITY;
  for (const Sample& s : samples) {
    const double best = grid_max(model, s, t);
    AttackConfig es = es_config();
    es.seed = derive_seed(7, static_cast<std::uint64_t>(s.index));
    pgd_ratio = std::min(pgd_ratio, pgd_attack(model, s.image, s.label, t, pgd_config()).best_loss() / best);
    es_ratio = std::min(es_ratio, stochastic_attack(model, s.image, s.label, t, es).best_loss() / best);
  }
  MESSAGE("worst PGD ratio ", pgd_ratio, ", worst stochastic ratio ", es_ratio);
  CHECK(pgd_ratio >= 0.95);
  CHECK(es_ratio >= 0.95);
}

TEST_CASE("degenerate mutation keeps neutral") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  const Sample s = fixtures::clean_correct(model, fixtures::holdout().items, 1).at(0);
  const TransformDescriptor t = make_transform(TransformKind::stain);
  AttackConfig cfg;
  cfg.population = 1;
  cfg.mutation_frac = 0.0;
  cfg.steps = 5;
  const AttackResult r = stochastic_attack(model, s.image, s.label, t, cfg);
  CHECK(r.theta_best == t.neutral());
  REQUIRE(r.loss_trace.size() == 6);
  CHECK(std::all_of(r.loss_trace.begin(), r.loss_trace.end(), [&](float v) { return v == r.loss_trace[0]; }));
}

TEST_CASE("attacks are deterministic under a seed") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  const auto& items = fixtures::holdout().items;
  for (TransformKind k : {TransformKind::stain, TransformKind::affine, TransformKind::resolution}) {
    const TransformDescriptor t = make_transform(k);
    AttackConfig cfg = es_config();
    cfg.steps = 5;
    cfg.seed = 11;
    const AttackResult a = stochastic_attack(model, items[0].image, items[0].label, t, cfg);
    const AttackResult b = stochastic_attack(model, items[0].image, items[0].label, t, cfg);
    CHECK(traces_equal(a, b));
  }
  const TransformDescriptor stain = make_transform(TransformKind::stain);
  AttackConfig cfg;
  cfg.restarts = 3;
  cfg.seed = 5;
  CHECK(traces_equal(pgd_attack(model, items[1].image, items[1].label, stain, cfg),
                     pgd_attack(model, items[1].image, items[1].label, stain, cfg)));
}

TEST_CASE("query accounting is exact") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  const auto samples = fixtures::clean_correct(model, fixtures::holdout().items, 5);
  const TransformDescriptor t = make_transform(TransformKind::jpeg);
  for (const Sample& s : samples) {
    CountingModel counted(model);
    AttackConfig cfg;
    cfg.steps = 4;
    cfg.population = 3;
    const AttackResult r = stochastic_attack(counted, s.image, s.label, t, cfg);
    CHECK(r.queries == counted.calls);
    CHECK(r.queries == 1 + 4 * 3);
    CHECK(r.iterations == 4);

    cfg.early_stop_on_flip = true;
    cfg.steps = 30;
    CountingModel again(model);
    const AttackResult e = stochastic_attack(again, s.image, s.label, make_transform(TransformKind::stain), cfg);
    CHECK(e.queries == again.calls);
    CHECK(e.queries <= 1 + 30 * 3);
  }
  const Sample& s = samples.at(0);
  AttackConfig cfg;
  cfg.steps = 6;
  const AttackResult p = pgd_attack(model, s.image, s.label, make_transform(TransformKind::stain), cfg);
  CHECK(p.queries == 1 + 7);
  CHECK(p.loss_trace.size() == 1 + 7);
  CHECK(p.iterations == 6);
}

TEST_CASE("iterates stay in the box and traces never decrease") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  const auto samples = fixtures::clean_correct(model, fixtures::holdout().items, 4);
  std::size_t checked = 0, outside = 0, decreasing = 0;
  for (TransformKind k : kAllTransformKinds) {
    const TransformDescriptor t = make_transform(k);
    AttackConfig cfg;
    cfg.steps = 6;
    cfg.population = 4;
    cfg.mutation_frac = 0.5;
    cfg.step_frac = 0.4;
    cfg.restarts = 2;
    cfg.on_iterate = [&](const ParamVector& theta) {
      ++checked;
      outside += t.in_box(theta) ? 0 : 1;
    };
    for (const Sample& s : samples) {
      std::vector<AttackResult> rs = {stochastic_attack(model, s.image, s.label, t, cfg)};
      if (t.differentiable()) rs.push_back(pgd_attack(model, s.image, s.label, t, cfg));
      for (const AttackResult& r : rs) {
        CHECK(t.in_box(r.theta_best));
        decreasing += std::is_sorted(r.loss_trace.begin(), r.loss_trace.end()) ? 0 : 1;
        CHECK(r.fooled == (r.pred_clean == r.label && r.pred_adv != r.pred_clean));
      }
    }
  }
  CHECK(checked > 500);
  CHECK(outside == 0);
  CHECK(decreasing == 0);
}

TEST_CASE("misclassified samples are not attacked") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  std::vector<Sample> flipped;
  for (const Sample& s : fixtures::clean_correct(model, fixtures::holdout().items, 6)) {
    Sample w = s;
    w.label = 1 - s.label;
    flipped.push_back(w);
  }
  const TransformDescriptor t = make_transform(TransformKind::stain);
  for (Optimizer o : {Optimizer::pgd, Optimizer::stochastic}) {
    CountingModel counted(model);
    const auto rs = batch_attack(o == Optimizer::pgd ? static_cast<const BlackBoxClassifier&>(model) : counted,
                                 flipped, t, AttackConfig{}, o);
    for (const AttackResult& r : rs) {
      CHECK_FALSE(r.fooled);
      CHECK(r.queries == 1);
      CHECK(r.iterations == 0);
      CHECK(r.theta_best == t.neutral());
    }
    if (o == Optimizer::stochastic) CHECK(counted.calls == flipped.size());
  }
}

TEST_CASE("a singleton that flips is reported as fooled") {
  // Logit 0 is 10 * mean brightness - 5, so darkening by 0.2 flips a mid-grey image.
  Tensor w({2, 3072}, 0.0f);
  for (int i = 0; i < 3072; ++i) w[i] = 10.0f / 3072.0f;
  const LinearClassifier model(w, Tensor::from({-4.0f, 0.0f}));
  const std::vector<Sample> one = {{Tensor({3, 32, 32}, 0.5f), 0, 0}};
  const auto rs = batch_attack(model, one, brightness_only(), pgd_config(), Optimizer::pgd);
  REQUIRE(rs.size() == 1);
  CHECK(rs[0].fooled);
  CHECK(rs[0].pred_adv == 1);
}

TEST_CASE("batch results do not depend on order or thread count") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  std::vector<Sample> items(fixtures::holdout().items.begin(), fixtures::holdout().items.begin() + 12);
  const TransformDescriptor t = make_transform(TransformKind::affine);
  AttackConfig cfg = es_config();
  cfg.steps = 4;
  cfg.population = 4;
  cfg.seed = 21;
  const auto base = batch_attack(model, items, t, cfg, Optimizer::stochastic);
  std::vector<Sample> shuffled = items;
  std::mt19937_64 rng(3);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto perm = batch_attack(model, shuffled, t, cfg, Optimizer::stochastic, 3);
  for (std::size_t i = 0; i < shuffled.size(); ++i) {
    const auto it = std::find_if(base.begin(), base.end(), [&](const AttackResult& r) { return r.index == shuffled[i].index; });
    REQUIRE(it != base.end());
    CHECK(traces_equal(*it, perm[i]));
  }
}

TEST_CASE("larger additive budgets fool at least as often") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  const auto& items = fixtures::holdout().items;
  std::vector<int> labels;
  for (const Sample& s : items) labels.push_back(s.label);
  double previous = -1.0;
  for (float eps : {2.0f / 255.0f, 8.0f / 255.0f, 32.0f / 255.0f}) {
    TransformOptions opt;
    opt.boxes["additive.delta"] = {-eps, eps, std::nullopt};
    AttackConfig cfg;
    cfg.seed = 4;
    const auto rs = batch_attack(model, items, make_transform(TransformKind::additive, opt), cfg, Optimizer::pgd);
    const double rate = fooling_rate(rs, labels).value();
    MESSAGE("eps ", eps * 255.0f, "/255 fooling rate ", rate);
    CHECK(rate >= previous);
    previous = rate;
  }
}

TEST_CASE("attack argument errors") {
  const BuiltinCnn& model = fixtures::quick_cnn();
  const Sample& s = fixtures::holdout().items[0];
  const TransformDescriptor res = make_transform(TransformKind::resolution);
  CHECK_THROWS_AS(pgd_attack(model, s.image, s.label, res, AttackConfig{}), std::invalid_argument);
  CHECK_THROWS_AS(batch_attack(model, std::span<const Sample>{}, res, AttackConfig{}, Optimizer::stochastic),
                  std::invalid_argument);
  CHECK_THROWS_AS(batch_attack(model, fixtures::holdout().items, res, AttackConfig{}, Optimizer::pgd),
                  std::invalid_argument);
  AttackConfig bad;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = {};
  bad.step_frac = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = {};
  bad.population = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

// Acceptance suite: one PASS/FAIL line per criterion, each with its runtime
// budget. Exit status is nonzero when any criterion fails.
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "fidelity.hpp"
#include "fixtures.hpp"
#include "reet/atf.hpp"
#include "reet/attack.hpp"
#include "reet/blackbox.hpp"
#include "reet/metrics.hpp"
#include "reet/rng.hpp"

using namespace reet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor one(const Tensor& image) { return image.reshaped({1, 3, 32, 32}); }

double accuracy(const BlackBoxClassifier& m, std::span<const Sample> items) {
  int correct = 0;
  for (const Sample& s : items) correct += argmax(m.predict(one(s.image)).data()) == s.label;
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

std::vector<int> labels_of(std::span<const Sample> items) {
  std::vector<int> out;
  for (const Sample& s : items) out.push_back(s.label);
  return out;
}

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "reet_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// ------------------------------------------------------------------ 1

Outcome identity_suite() {
  std::mt19937_64 rng(1);
  std::string detail;
  bool pass = true;
  for (TransformKind kind : kAllTransformKinds) {
    const TransformDescriptor t = make_transform(kind);
    float worst = 0.0f;
    for (int i = 0; i < 100; ++i) {
      Tensor x = ref::uniform_tensor({3, 32, 32}, rng, 0, 1);
      if (kind == TransformKind::stain)
        for (float& v : x.data()) v = std::max(v, kStainFloor);
      worst = std::max(worst, max_abs_diff(t.apply(x, t.neutral()), x));
    }
    const float bound = kind == TransformKind::blur ? 1e-3f : kind == TransformKind::jpeg ? 0.02f : 0.0f;
    pass = pass && worst <= bound;
    detail += fmt("%s %.2g<=%.2g ", std::string(kind_name(kind)).c_str(), worst, bound);
  }
  return {pass, detail};
}

// ------------------------------------------------------------------ 2

Outcome gradient_suite() {
  std::mt19937_64 rng(2);
  std::string detail;
  bool pass = true;
  for (TransformKind kind : kAllTransformKinds) {
    const TransformDescriptor t = make_transform(kind);
    if (!t.exact_gradient()) continue;
    const double e = fidelity::transform_grad_error(kind, rng, 10);
    pass = pass && e < 1e-3;
    detail += fmt("%s %.1e ", std::string(kind_name(kind)).c_str(), e);
  }
  int kinks = 0;
  const double e = fidelity::cnn_weight_grad_error(rng, 10, 1e-2, &kinks);
  pass = pass && e < 1e-3;
  detail += fmt("cnn-weights %.1e (%d kink probes redrawn; jpeg is straight-through, checked separately)", e, kinks);
  return {pass, detail};
}

// ------------------------------------------------------------------ 3

TransformDescriptor brightness_only() {
  TransformOptions opt;
  opt.boxes["brightness_contrast.contrast"] = {1.0f, 1.0f, 1.0f};
  return make_transform(TransformKind::brightness_contrast, opt);
}

Outcome attack_optimality() {
  // (a) closed form on linear models.
  std::mt19937_64 rng(3);
  TransformOptions opt;
  opt.image_shape = {3, 32, 32};
  const double eps = kDefaultAdditiveBudget;
  const TransformDescriptor add = make_transform(TransformKind::additive, opt);
  double worst_gap = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor w = ref::uniform_tensor({2, 3072}, rng, -0.05, 0.05), b = ref::uniform_tensor({2}, rng, -0.2, 0.2);
    const LinearClassifier model(w, b);
    const Tensor x = ref::uniform_tensor({3, 32, 32}, rng, 0.1, 0.9);
    const int label = argmax(model.predict(one(x)).data());
    ref::Vec z(2);
    for (int c = 0; c < 2; ++c) {
      z[c] = b[c];
      for (int i = 0; i < 3072; ++i) {
        const double d = static_cast<double>(w[(1 - label) * 3072 + i]) - w[label * 3072 + i];
        z[c] += w[c * 3072 + i] * (x[i] + eps * (d > 0 ? 1.0 : -1.0));
      }
    }
    AttackConfig cfg;
    cfg.steps = 1;
    cfg.step_frac = 1.0;
    const AttackResult r = pgd_attack(model, x, label, add, cfg);
    worst_gap = std::max(worst_gap, std::abs(r.best_loss() - ref::mean_cross_entropy(z, 1, 2, {label})));
  }

  // (b) 101-point grid oracle on brightness.
  const BuiltinCnn& model = fixtures::quick_cnn();
  const TransformDescriptor t = brightness_only();
  const auto samples = fixtures::clean_correct(model, fixtures::holdout().items, 20);
  double pgd_ratio = INFINITY, es_ratio = INFINITY;
  for (const Sample& s : samples) {
    double best = -INFINITY;
    for (int i = 0; i <= 100; ++i) {
      ParamVector theta = t.neutral();
      theta[1][0] = -0.2f + 0.4f * static_cast<float>(i) / 100.0f;
      best = std::max(best, fixtures::ce(model.predict(t.apply(one(s.image), theta)).data(), s.label));
    }
    AttackConfig pgd;
    pgd.steps = 20;
    pgd.step_frac = 0.05;
    AttackConfig es;
    es.steps = 50;
    es.population = 16;
    es.seed = derive_seed(7, static_cast<std::uint64_t>(s.index));
    pgd_ratio = std::min(pgd_ratio, pgd_attack(model, s.image, s.label, t, pgd).best_loss() / best);
    es_ratio = std::min(es_ratio, stochastic_attack(model, s.image, s.label, t, es).best_loss() / best);
  }
  const bool pass = worst_gap < 1e-6 && samples.size() == 20 && pgd_ratio >= 0.95 && es_ratio >= 0.95;
  return {pass, fmt("linear gap %.1e; grid ratio pgd %.4f stochastic %.4f over %zu samples", worst_gap, pgd_ratio,
                    es_ratio, samples.size())};
}

// ------------------------------------------------------------------ 4

Outcome box_and_monotonicity() {
  const BuiltinCnn& model = fixtures::quick_cnn();
  const auto samples = fixtures::clean_correct(model, fixtures::holdout().items, 10);
  long iterates = 0, outside = 0, traces = 0, decreasing = 0;
  for (TransformKind kind : kAllTransformKinds) {
    const TransformDescriptor t = make_transform(kind);
    AttackConfig cfg;
    cfg.steps = 8;
    cfg.population = 6;
    cfg.mutation_frac = 0.3;
    cfg.step_frac = 0.3;
    cfg.restarts = 2;
    cfg.on_iterate = [&](const ParamVector& theta) {
      ++iterates;
      outside += !t.in_box(theta);
    };
    for (Optimizer o : {Optimizer::pgd, Optimizer::stochastic}) {
      if (o == Optimizer::pgd && !t.differentiable()) continue;
      for (const AttackResult& r : batch_attack(model, samples, t, cfg, o)) {
        ++traces;
        outside += !t.in_box(r.theta_best);
        decreasing += !std::is_sorted(r.loss_trace.begin(), r.loss_trace.end());
      }
    }
  }
  const auto& items = fixtures::holdout().items;
  const std::vector<int> labels = labels_of(items);
  double rate[2];
  const float budgets[2] = {2.0f / 255.0f, 8.0f / 255.0f};
  for (int i = 0; i < 2; ++i) {
    TransformOptions opt;
    opt.boxes["additive.delta"] = {-budgets[i], budgets[i], std::nullopt};
    AttackConfig cfg;
    cfg.seed = 4;
    rate[i] = fooling_rate(batch_attack(model, items, make_transform(TransformKind::additive, opt), cfg,
                                        Optimizer::pgd),
                           labels)
                  .value();
  }
  const bool pass = outside == 0 && decreasing == 0 && iterates > 0 && rate[1] >= rate[0];
  return {pass, fmt("%ld iterates, %ld outside box; %ld traces, %ld decreasing; fooling 2/255 %.3f <= 8/255 %.3f",
                    iterates, outside, traces, decreasing, rate[0], rate[1])};
}

// ------------------------------------------------------------------ 5

struct Experiment {
  Dataset train, test;
  BuiltinCnn standard = BuiltinCnn::init(2, 1);
  BuiltinCnn atf = BuiltinCnn::init(2, 1);
};

Experiment& experiment() {
  static Experiment e = [] {
    Experiment x;
    std::tie(x.train, x.test) = split(generate_synthetic(1000, 7), 0.8, 7);
    TrainConfig cfg;
    cfg.seed = 1;
    train_standard(x.standard, x.train.items, cfg);
    ATFConfig acfg;
    acfg.seed = 1;
    acfg.m = 4;
    TransformOptions box;
    box.boxes["stain.alpha"] = {0.85f, 1.15f, std::nullopt};
    box.boxes["stain.beta"] = {-0.15f, 0.15f, std::nullopt};
    acfg.transforms = {make_transform(TransformKind::stain, box)};
    train_atf(x.atf, x.train.items, acfg);
    return x;
  }();
  return e;
}

Outcome fig1d_direction() {
  Experiment& e = experiment();
  const double acc_std = accuracy(e.standard, e.test.items), acc_atf = accuracy(e.atf, e.test.items);
  AttackConfig cfg;
  cfg.steps = 10;
  cfg.step_frac = 0.25;
  cfg.seed = 3;
  const TransformDescriptor stain = make_transform(TransformKind::stain);
  const std::vector<int> labels = labels_of(e.test.items);
  const auto fr_std = fooling_rate(batch_attack(e.standard, e.test.items, stain, cfg, Optimizer::pgd), labels);
  const auto fr_atf = fooling_rate(batch_attack(e.atf, e.test.items, stain, cfg, Optimizer::pgd), labels);
  const bool pass = acc_std >= 0.85 && acc_atf >= 0.85 && std::abs(acc_std - acc_atf) <= 0.05 && fr_std && fr_atf &&
                    *fr_std - *fr_atf >= 0.10;
  return {pass, fmt("clean acc standard %.3f atf %.3f; stain PGD fooling standard %.3f atf %.3f (drop %.1f points)",
                    acc_std, acc_atf, fr_std.value_or(-1), fr_atf.value_or(-1),
                    100.0 * (fr_std.value_or(0) - fr_atf.value_or(0)))};
}

// ------------------------------------------------------------------ 6

TransformDescriptor collapsed(TransformKind kind) {
  TransformOptions opt;
  const TransformDescriptor full = make_transform(kind);
  for (const ParamSpec& s : full.specs()) opt.boxes[s.name] = {s.neutral[0], s.neutral[0], s.neutral[0]};
  return make_transform(kind, opt);
}

Outcome degenerate_atf() {
  const Dataset ds = generate_synthetic(300, 11);
  std::string detail;
  bool pass = true;
  const std::vector<std::vector<TransformKind>> setups = {
      {TransformKind::stain}, {TransformKind::additive}, {TransformKind::brightness_contrast, TransformKind::affine}};
  for (const auto& kinds : setups) {
    BuiltinCnn a = BuiltinCnn::init(2, 5), b = BuiltinCnn::init(2, 5);
    TrainConfig cfg;
    cfg.total_passes = 150;
    cfg.seed = 6;
    const TrainResult s = train_standard(a, ds.items, cfg);
    ATFConfig acfg;
    acfg.m = 1;
    acfg.total_passes = 150;
    acfg.seed = 6;
    for (TransformKind k : kinds) acfg.transforms.push_back(collapsed(k));
    const TrainResult t = train_atf(b, ds.items, acfg);
    const bool same = t.weights == s.weights && t.history.pass_loss == s.history.pass_loss;
    pass = pass && same;
    detail += compose(acfg.transforms).name() + (same ? " identical; " : " DIFFERENT; ");
  }
  return {pass, detail + "150 passes each"};
}

// ------------------------------------------------------------------ 7

Outcome blackbox_transparency() {
  Experiment& e = experiment();
  const fs::path weights = scratch() / "standard.bin";
  save_weights(ModelWeights{e.standard.parameters()}, weights);
  const SubprocessClassifier remote(std::string(REET_CLI) + " serve-model --model " + weights.string());
  std::mt19937_64 rng(7);
  int identical = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor x = ref::uniform_tensor({1, 3, 32, 32}, rng, 0, 1);
    const Tensor a = e.standard.predict(x), b = remote.predict(x);
    identical += a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0;
  }
  const std::span<const Sample> items(e.test.items.data(), 100);
  AttackConfig cfg;
  cfg.seed = 8;
  const TransformDescriptor stain = make_transform(TransformKind::stain);
  const auto local = batch_attack(e.standard, items, stain, cfg, Optimizer::stochastic);
  const auto piped = batch_attack(remote, items, stain, cfg, Optimizer::stochastic);
  int same = 0, fooled = 0;
  for (std::size_t i = 0; i < local.size(); ++i) {
    same += local[i].fooled == piped[i].fooled && local[i].pred_adv == piped[i].pred_adv &&
            local[i].loss_trace == piped[i].loss_trace;
    fooled += local[i].fooled;
  }
  const bool pass = identical == 100 && same == static_cast<int>(local.size());
  return {pass, fmt("%d/100 logits bit-identical; %d/%zu stochastic outcomes identical (%d fooled)", identical, same,
                    local.size(), fooled)};
}

// ------------------------------------------------------------------ 8

int run_cli(const std::string& args) {
  const std::string cmd = "cd " + scratch().string() + " && " + REET_CLI + " " + args + " >/dev/null 2>cli.err";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string tree_bytes(const fs::path& root) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(root)) files.push_back(root);
  else
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string out;
  for (const fs::path& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out += fs::relative(f, root.parent_path()).string() + "\n" + ss.str();
  }
  return out;
}

Outcome cli_reproducibility() {
  struct Step {
    const char* name;
    std::string args;
    std::vector<std::string> outputs;
  };
  const std::vector<Step> steps = {
      {"generate-data", "generate-data --n 1000 --seed 7 --out data", {"data"}},
      {"train", "train --data data --seed 1 --out std.bin", {"std.bin", "std.history.json"}},
      {"train-atf", "train-atf --data data --seed 1 --transforms stain --m 4 --box stain.alpha=0.85:1.15 "
                    "--box stain.beta=-0.15:0.15 --out atf.bin",
       {"atf.bin", "atf.history.json"}},
      {"evaluate", "evaluate --data data --model std.bin --transforms all --optimizer stochastic --steps 5 "
                   "--population 4 --seed 2 --save-pairs --out eval",
       {"eval"}},
  };
  auto snapshot = [](const std::vector<std::string>& outputs) {
    std::string all;
    for (const std::string& out : outputs) all += tree_bytes(scratch() / out);
    return all;
  };
  std::string detail;
  bool pass = true;
  for (const Step& st : steps) {
    const int c1 = run_cli(st.args);
    const std::string first = snapshot(st.outputs);
    const int c2 = run_cli(st.args);
    const bool same = c1 == 0 && c2 == 0 && !first.empty() && first == snapshot(st.outputs);
    pass = pass && same;
    detail += std::string(st.name) + (same ? " identical; " : " DIFFERENT; ");
  }
  return {pass, detail};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* title;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "transform identity", 10, identity_suite},
      {2, "gradient fidelity", 60, gradient_suite},
      {3, "attack optimality", 60, attack_optimality},
      {4, "box and monotonicity invariants", 120, box_and_monotonicity},
      {5, "ATF lowers stain fooling rate", 600, fig1d_direction},
      {6, "degenerate ATF equivalence", 60, degenerate_atf},
      {7, "black-box transparency", 120, blackbox_transparency},
      {8, "CLI reproducibility", 900, cli_reproducibility},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = o.pass && secs <= c.budget_s;
    failures += !pass;
    std::printf("criterion %d %-32s %s  %.1fs/%.0fs  %s\n", c.id, c.title, pass ? "PASS" : "FAIL", secs, c.budget_s,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}

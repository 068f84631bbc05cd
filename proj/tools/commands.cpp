#include "commands.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "reet/atf.hpp"
#include "reet/blackbox.hpp"
#include "reet/metrics.hpp"
#include "reet/model.hpp"
#include "reet/rng.hpp"

namespace reet::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

float parse_float(const std::string& text, const std::string& entry) {
  std::size_t used = 0;
  float v = 0.0f;
  try {
    v = std::stof(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw UsageError("bad number '" + text + "' in box override '" + entry + "'");
  return v;
}

json data_json(const DataArgs& d) {
  return json{{"dir", d.dir}, {"train_frac", d.train_frac}, {"subset", d.subset}};
}

json theta_json(const ParamVector& theta) {
  json out = json::array();
  for (const Tensor& t : theta) out.push_back(std::vector<float>(t.data().begin(), t.data().end()));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

fs::path history_path(const fs::path& weights) {
  fs::path p = weights;
  p.replace_extension(".history.json");
  return p;
}

void write_training_outputs(const TrainArgs& args, const json& config, const TrainResult& result) {
  save_weights(result.weights, args.out);
  const TrainHistory& h = result.history;
  json hist{{"seed", args.seed},
            {"config", config},
            {"model_digest", hex64(weights_digest(result.weights))},
            {"passes", h.passes},
            {"minibatches", h.minibatches},
            {"pass_loss", h.pass_loss},
            {"epoch_accuracy", h.epoch_accuracy},
            {"final_theta", theta_json(h.final_theta)}};
  write_text(history_path(args.out), canonical_dump(hist));
  std::fprintf(stderr, "wrote %s (%ld passes, final loss %.4f)\n", args.out.c_str(), h.passes,
               h.pass_loss.empty() ? 0.0 : static_cast<double>(h.pass_loss.back()));
}

json train_config_json(const TrainArgs& args) {
  return json{{"data", data_json(args.data)}, {"passes", args.passes}, {"batch_size", args.batch_size},
              {"lr", args.lr},           {"classes", args.classes}};
}

void check_train_args(const TrainArgs& args) {
  if (args.passes < 1) throw UsageError("--passes must be at least 1");
  if (args.batch_size < 1) throw UsageError("--batch-size must be at least 1");
  if (!(args.lr >= 0.0)) throw UsageError("--lr must be non-negative");
  if (args.classes < 2) throw UsageError("--classes must be at least 2");
}

}  // namespace

std::map<std::string, BoxOverride> parse_boxes(const std::vector<std::string>& entries) {
  std::map<std::string, BoxOverride> out;
  for (const std::string& e : entries) {
    const auto eq = e.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("box override '" + e + "' must look like name=lo:hi[:neutral]");
    std::vector<std::string> parts;
    std::stringstream rest(e.substr(eq + 1));
    for (std::string part; std::getline(rest, part, ':');) parts.push_back(part);
    if (parts.size() != 2 && parts.size() != 3)
      throw UsageError("box override '" + e + "' must look like name=lo:hi[:neutral]");
    BoxOverride box{parse_float(parts[0], e), parse_float(parts[1], e), std::nullopt};
    if (parts.size() == 3) box.neutral = parse_float(parts[2], e);
    out[e.substr(0, eq)] = box;
  }
  return out;
}

std::vector<TransformDescriptor> parse_transforms(const std::vector<std::string>& names,
                                                  const TransformOptions& options) {
  std::vector<std::string> expanded;
  for (const std::string& n : names) {
    if (n == "all") {
      for (TransformKind k : kAllTransformKinds) expanded.emplace_back(kind_name(k));
    } else {
      expanded.push_back(n);
    }
  }
  if (expanded.empty()) throw UsageError("no transforms selected");

  std::vector<TransformDescriptor> out;
  try {
    for (const std::string& name : expanded) {
      std::vector<TransformDescriptor> parts;
      std::stringstream ss(name);
      for (std::string piece; std::getline(ss, piece, '+');) {
        const auto kind = parse_kind(piece);
        if (!kind) throw UsageError("unknown transform '" + piece + "'");
        parts.push_back(make_transform(*kind, options));
      }
      if (parts.empty()) throw UsageError("empty transform name");
      out.push_back(parts.size() == 1 ? parts.front() : compose(parts));
    }
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return out;
}

Dataset load_subset(const DataArgs& args) {
  if (args.dir.empty()) throw UsageError("--data is required");
  Dataset ds = read_dataset(args.dir);
  if (args.subset == "all") return ds;
  if (!(args.train_frac > 0.0 && args.train_frac < 1.0)) throw UsageError("--train-frac must lie in (0, 1)");
  // The split key is the dataset's own seed, so train and evaluate agree on it.
  auto [train, test] = split(ds, args.train_frac, ds.seed);
  if (args.subset == "train") return train;
  if (args.subset == "test") return test;
  throw UsageError("--subset must be all, train or test");
}

int cmd_generate(const GenerateArgs& args) {
  if (args.n < 2) throw UsageError("--n must be at least 2");
  if (!(args.balance > 0.0 && args.balance < 1.0)) throw UsageError("--balance must lie in (0, 1)");
  if (args.out.empty()) throw UsageError("--out is required");
  const Dataset ds = generate_synthetic(args.n, args.seed, args.balance);
  write_dataset(ds, args.out);
  std::fprintf(stderr, "wrote %d patches to %s (%zu class 0, %zu class 1)\n", args.n, args.out.c_str(), ds.count(0),
               ds.count(1));
  return 0;
}

int cmd_train(const TrainArgs& args) {
  check_train_args(args);
  const Dataset ds = load_subset(args.data);
  BuiltinCnn model = BuiltinCnn::init(args.classes, derive_seed(args.seed, "init"));
  TrainConfig cfg;
  cfg.total_passes = args.passes;
  cfg.batch_size = args.batch_size;
  cfg.lr = args.lr;
  cfg.seed = args.seed;
  const TrainResult result = train_standard(model, ds.items, cfg);
  json config = train_config_json(args);
  config["mode"] = "standard";
  write_training_outputs(args, config, result);
  return 0;
}

int cmd_train_atf(const TrainArgs& args) {
  check_train_args(args);
  if (args.m < 1) throw UsageError("--m must be at least 1");
  if (args.passes < args.m) throw UsageError("--passes must be at least --m");
  if (!(args.ascent_frac >= 0.0)) throw UsageError("--ascent-frac must be non-negative");
  TransformOptions options;
  options.boxes = parse_boxes(args.boxes);
  const std::vector<TransformDescriptor> transforms = parse_transforms(args.transforms, options);
  for (const TransformDescriptor& t : transforms) {
    if (!t.differentiable())
      throw UsageError("transform '" + t.name() + "' is not differentiable and cannot be used for ATF");
  }

  const Dataset ds = load_subset(args.data);
  BuiltinCnn model = BuiltinCnn::init(args.classes, derive_seed(args.seed, "init"));
  ATFConfig cfg;
  cfg.m = args.m;
  cfg.total_passes = args.passes;
  cfg.batch_size = args.batch_size;
  cfg.lr = args.lr;
  cfg.ascent_frac = args.ascent_frac;
  cfg.transforms = transforms;
  cfg.seed = args.seed;
  const TrainResult result = train_atf(model, ds.items, cfg);

  json config = train_config_json(args);
  config["mode"] = "atf";
  config["m"] = args.m;
  config["ascent_frac"] = args.ascent_frac;
  config["transforms"] = args.transforms;
  config["boxes"] = args.boxes;
  write_training_outputs(args, config, result);
  return 0;
}

int cmd_evaluate(const EvaluateArgs& args) {
  if (args.out.empty()) throw UsageError("--out is required");
  if (args.model.empty() == args.blackbox_cmd.empty())
    throw UsageError("give exactly one of --model and --blackbox-cmd");
  if (args.jobs < 1) throw UsageError("--jobs must be at least 1");

  Optimizer optimizer;
  if (args.optimizer == "pgd") {
    optimizer = Optimizer::pgd;
  } else if (args.optimizer == "stochastic") {
    optimizer = Optimizer::stochastic;
  } else {
    throw UsageError("--optimizer must be pgd or stochastic");
  }

  AttackConfig attack = args.attack;
  if (args.loss == "cross_entropy") {
    attack.loss = LossKind::cross_entropy;
  } else if (args.loss == "margin") {
    attack.loss = LossKind::margin;
  } else {
    throw UsageError("--loss must be cross_entropy or margin");
  }
  attack.seed = derive_seed(args.seed, "attack");
  try {
    attack.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  TransformOptions options;
  options.boxes = parse_boxes(args.boxes);
  const std::vector<TransformDescriptor> transforms = parse_transforms(args.transforms, options);
  if (optimizer == Optimizer::pgd) {
    for (const TransformDescriptor& t : transforms) {
      if (!t.differentiable())
        throw UsageError("transform '" + t.name() + "' is search-only; use --optimizer stochastic");
    }
  }
  if (optimizer == Optimizer::pgd && !args.blackbox_cmd.empty())
    throw UsageError("PGD needs gradients; use --optimizer stochastic with --blackbox-cmd");

  const Dataset ds = load_subset(args.data);

  std::unique_ptr<BlackBoxClassifier> model;
  std::string digest;
  if (!args.model.empty()) {
    const ModelWeights w = load_weights(args.model);
    digest = hex64(weights_digest(w));
    model = std::make_unique<BuiltinCnn>(w.tensors);
  } else {
    const std::string& cmd = args.blackbox_cmd;
    digest = hex64(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(cmd.data()), cmd.size())));
    model = std::make_unique<SubprocessClassifier>(
        cmd, std::chrono::milliseconds(static_cast<long long>(args.timeout_s * 1000.0)));
  }

  json base{{"attack", config_json(attack)},
            {"boxes", args.boxes},
            {"data", data_json(args.data)},
            {"model", args.model.empty() ? json(nullptr) : json(args.model)},
            {"blackbox_cmd", args.blackbox_cmd.empty() ? json(nullptr) : json(args.blackbox_cmd)}};

  std::vector<RobustnessReport> reports;
  for (const TransformDescriptor& t : transforms) {
    const std::vector<AttackResult> results = batch_attack(*model, ds.items, t, attack, optimizer, args.jobs);
    RobustnessReport rep = build_report(t.name(), optimizer, base, results);
    if (args.save_pairs) {
      for (const AttackResult& r : results) {
        if (!r.fooled) continue;
        const Sample* s = nullptr;
        for (const Sample& cand : ds.items) {
          if (cand.index == r.index) s = &cand;
        }
        rep.fooled_pairs.push_back(ImagePair{r.index, s->image, t.apply(s->image, r.theta_best)});
      }
    }
    std::fprintf(stderr, "%-20s clean %.3f perturbed %.3f fooling %s\n", t.name().c_str(), rep.clean_accuracy,
                 rep.perturbed_accuracy,
                 rep.fooling_rate ? std::to_string(*rep.fooling_rate).c_str() : "undefined");
    reports.push_back(std::move(rep));
  }
  emit_report(reports, args.seed, digest, args.out, args.save_pairs);
  return 0;
}

int cmd_report(const ReportArgs& args) {
  if (args.inputs.empty()) throw UsageError("give at least one report.json");
  std::ostringstream table;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %-20s %-10s %8s %8s %8s %6s %9s\n", "source", "transform", "optimizer",
                "clean", "pert", "fool", "n", "queries");
  table << line;
  for (const std::string& path : args.inputs) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    json doc;
    try {
      doc = json::parse(f);
    } catch (const json::exception& e) {
      throw std::runtime_error(path + ": " + e.what());
    }
    if (!doc.contains("runs") || !doc["runs"].is_array()) throw std::runtime_error(path + ": missing runs array");
    const std::string source = fs::path(path).parent_path().filename().string();
    for (const json& run : doc["runs"]) {
      const json& fr = run.at("fooling_rate");
      char fool[32];
      if (fr.is_null()) {
        std::snprintf(fool, sizeof fool, "%s", "n/a");
      } else {
        std::snprintf(fool, sizeof fool, "%.3f", fr.get<double>());
      }
      std::snprintf(line, sizeof line, "%-28s %-20s %-10s %8.3f %8.3f %8s %6d %9.1f\n",
                    source.empty() ? path.c_str() : source.c_str(), run.at("transform").get<std::string>().c_str(),
                    run.at("optimizer").get<std::string>().c_str(), run.at("clean_accuracy").get<double>(),
                    run.at("perturbed_accuracy").get<double>(), fool, run.at("n_samples").get<int>(),
                    run.at("mean_queries").get<double>());
      table << line;
    }
  }
  std::cout << table.str();
  if (!args.out.empty()) write_text(args.out, table.str());
  return 0;
}

int cmd_serve(const std::string& model_path) {
  if (model_path.empty()) throw UsageError("--model is required");
  const BuiltinCnn model(load_weights(model_path).tensors);
  serve_classifier(model, std::cin, std::cout);
  return 0;
}

}  // namespace reet::cli

#include "reet/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numbers>
#include <random>

#include "reet/rng.hpp"
#include "reet/transforms.hpp"

namespace reet {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t Dataset::count(int label) const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [label](const Sample& s) { return s.label == label; }));
}

namespace {

struct Field {
  std::vector<double> h, e, r;
  explicit Field(int size) : h(size * size), e(size * size), r(size * size) {}
};

void add_nucleus(Field& f, int size, Rng& rng) {
  std::uniform_real_distribution<double> pos(1.0, size - 1.0), radius(1.6, 3.4), angle(0.0, std::numbers::pi),
      strength(0.45, 0.9);
  const double cx = pos(rng), cy = pos(rng);
  const double ra = radius(rng), rb = radius(rng) * 0.8, th = angle(rng), amount = strength(rng);
  const double ct = std::cos(th), st = std::sin(th);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (ct * dx + st * dy) / ra, v = (-st * dx + ct * dy) / rb;
      const double d = std::sqrt(u * u + v * v);
      const double wgt = 1.0 / (1.0 + std::exp((d - 1.0) / 0.18));
      const std::size_t i = static_cast<std::size_t>(y * size + x);
      f.h[i] += amount * wgt;
      f.e[i] *= 1.0 - 0.5 * wgt;
    }
}

Tensor synthesize(int label, Rng& rng) {
  constexpr int size = kPatchSize;
  Field f(size);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.02);

  // Eosin stroma: base level plus a few low-frequency waves.
  const double base_e = 0.15 + 0.2 * u01(rng);
  const double base_h = 0.02 + 0.04 * u01(rng);
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k)
    waves.push_back({(u01(rng) - 0.5) * 0.6, (u01(rng) - 0.5) * 0.6, u01(rng) * 2.0 * std::numbers::pi,
                     0.03 + 0.05 * u01(rng)});
  // Optional pale lumen.
  const bool lumen = u01(rng) < 0.4;
  const double lx = u01(rng) * size, ly = u01(rng) * size, lr = 3.0 + 5.0 * u01(rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * size + x);
      double e = base_e;
      for (const Wave& w : waves) e += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      if (lumen) {
        const double d = std::hypot(x + 0.5 - lx, y + 0.5 - ly) / lr;
        e *= 1.0 - 0.85 / (1.0 + std::exp((d - 1.0) / 0.2));
      }
      f.e[i] = std::max(0.0, e);
      f.h[i] = base_h;
      f.r[i] = 0.0;
    }

  std::uniform_int_distribution<int> nuclei = label == 1 ? std::uniform_int_distribution<int>(6, 12)
                                                         : std::uniform_int_distribution<int>(0, 2);
  const int count = nuclei(rng);
  for (int k = 0; k < count; ++k) add_nucleus(f, size, rng);

  const auto& m = stain_matrix();
  Tensor img(Shape{3, size, size});
  const std::size_t hw = static_cast<std::size_t>(size) * size;
  for (std::size_t i = 0; i < hw; ++i) {
    const double conc[3] = {std::max(0.0, f.h[i] + noise(rng)), std::max(0.0, f.e[i] + noise(rng)),
                            std::max(0.0, f.r[i] + 0.5 * noise(rng))};
    for (int c = 0; c < 3; ++c) {
      double od = 0.0;
      for (int s = 0; s < 3; ++s) od += conc[s] * m[s][c];
      img[c * hw + i] = std::clamp(static_cast<float>(std::pow(10.0, -od)), kStainFloor, 1.0f);
    }
  }
  return img;
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingManifestError("dataset manifest not found: " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DatasetError("cannot parse manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace

Dataset generate_synthetic(int n, std::uint64_t seed, double balance) {
  if (n < 2) throw std::invalid_argument("generate_synthetic: need at least 2 images, got " + std::to_string(n));
  if (!(balance > 0.0 && balance < 1.0))
    throw std::invalid_argument("generate_synthetic: balance must lie strictly between 0 and 1");
  const int n1 = static_cast<int>(std::lround(n * balance));
  if (n1 < 1 || n1 > n - 1) throw std::invalid_argument("generate_synthetic: balance leaves a class empty");

  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  std::fill(labels.begin(), labels.begin() + n1, 1);
  Rng order(derive_seed(seed, "labels"));
  std::shuffle(labels.begin(), labels.end(), order);

  Dataset ds;
  ds.seed = seed;
  ds.balance = balance;
  ds.generator_version = kGeneratorVersion;
  ds.items.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    ds.items.push_back(Sample{synthesize(labels[static_cast<std::size_t>(i)], rng), labels[static_cast<std::size_t>(i)], i});
  }
  return ds;
}

void write_png(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("write_png: expected [3,H,W]");
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> rgb(hw * 3);
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(static_cast<double>(std::clamp(image[c * hw + i], 0.0f, 1.0f)) * 255.0));
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(w);
  pi.height = static_cast<png_uint_32>(h);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + pi.message);
}

Tensor read_png(const fs::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw PngDecodeError("cannot decode PNG " + path.string() + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw PngDecodeError("cannot decode PNG " + path.string() + ": " + pi.message);
  }
  const int h = static_cast<int>(pi.height), w = static_cast<int>(pi.width);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor img(Shape{3, h, w});
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) img[c * hw + i] = static_cast<float>(rgb[i * 3 + c]) / 255.0f;
  return img;
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "class_0");
  fs::create_directories(dir / "class_1");
  for (const Sample& s : ds.items) {
    if (s.label != 0 && s.label != 1) throw std::invalid_argument("write_dataset: labels must be 0 or 1");
    write_png(dir / ("class_" + std::to_string(s.label)) / (std::to_string(s.index) + ".png"), s.image);
  }
  json m;
  m["n"] = ds.items.size();
  m["seed"] = ds.seed;
  m["balance"] = ds.balance;
  m["generator_version"] = ds.generator_version;
  m["counts"] = {{"0", ds.count(0)}, {"1", ds.count(1)}};
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  f << m.dump(2) << '\n';
}

Dataset read_dataset(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  Dataset ds;
  try {
    ds.seed = m.at("seed").get<std::uint64_t>();
    ds.balance = m.at("balance").get<double>();
    ds.generator_version = m.at("generator_version").get<int>();
  } catch (const json::exception& e) {
    throw DatasetError("manifest " + (dir / "manifest.json").string() + " is incomplete: " + e.what());
  }
  std::size_t total = 0;
  for (int label = 0; label < 2; ++label) {
    const fs::path cdir = dir / ("class_" + std::to_string(label));
    std::vector<std::pair<int, fs::path>> files;
    if (fs::exists(cdir)) {
      for (const auto& entry : fs::directory_iterator(cdir)) {
        if (entry.path().extension() != ".png") continue;
        const std::string stem = entry.path().stem().string();
        int index = 0;
        try {
          std::size_t used = 0;
          index = std::stoi(stem, &used);
          if (used != stem.size()) throw std::invalid_argument(stem);
        } catch (const std::exception&) {
          throw DatasetError("unexpected file name " + entry.path().string());
        }
        files.emplace_back(index, entry.path());
      }
    }
    std::size_t expected = 0;
    try {
      expected = m.at("counts").at(std::to_string(label)).get<std::size_t>();
    } catch (const json::exception& e) {
      throw DatasetError(std::string("manifest lacks counts: ") + e.what());
    }
    if (files.size() != expected)
      throw CountMismatchError("class " + std::to_string(label) + ": manifest lists " + std::to_string(expected) +
                               " images but " + cdir.string() + " holds " + std::to_string(files.size()));
    for (const auto& [index, path] : files) ds.items.push_back(Sample{read_png(path), label, index});
    total += files.size();
  }
  if (total != m.at("n").get<std::size_t>())
    throw CountMismatchError("manifest n = " + std::to_string(m.at("n").get<std::size_t>()) + " but found " +
                             std::to_string(total) + " images");
  std::sort(ds.items.begin(), ds.items.end(), [](const Sample& a, const Sample& b) { return a.index < b.index; });
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw std::invalid_argument("split: train_frac must lie in (0, 1)");
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < ds.items.size(); ++i) by_label[ds.items[i].label].push_back(i);
  Dataset train, test;
  for (Dataset* part : {&train, &test}) {
    part->seed = ds.seed;
    part->balance = ds.balance;
    part->generator_version = ds.generator_version;
  }
  Rng rng(derive_seed(seed, "split"));
  for (auto& [label, idx] : by_label) {
    if (idx.size() < 2)
      throw std::invalid_argument("split: class " + std::to_string(label) + " has fewer than 2 samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t cut = static_cast<std::size_t>(std::lround(static_cast<double>(idx.size()) * train_frac));
    cut = std::clamp<std::size_t>(cut, 1, idx.size() - 1);
    for (std::size_t k = 0; k < idx.size(); ++k) (k < cut ? train : test).items.push_back(ds.items[idx[k]]);
  }
  auto by_index = [](const Sample& a, const Sample& b) { return a.index < b.index; };
  std::sort(train.items.begin(), train.items.end(), by_index);
  std::sort(test.items.begin(), test.items.end(), by_index);
  return {std::move(train), std::move(test)};
}

}  // namespace reet

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "reet/model.hpp"
#include "reet/ops.hpp"
#include "reference.hpp"

using namespace reet;

namespace {

// conv3x3(3->2, pad 1) -> relu -> flatten -> affine(2*8*8 -> 3) on 8x8 inputs.
class TinyConv final : public WhiteBoxClassifier {
public:
  explicit TinyConv(std::mt19937_64& rng) {
    weights_ = {ref::uniform_tensor({2, 3, 3, 3}, rng, -0.5, 0.5), ref::uniform_tensor({2}, rng, -0.1, 0.1),
                ref::uniform_tensor({3, 128}, rng, -0.2, 0.2), ref::uniform_tensor({3}, rng, -0.1, 0.1)};
  }
  int num_classes() const override { return 3; }
  std::vector<Tensor>& parameters() override { return weights_; }
  const std::vector<Tensor>& parameters() const override { return weights_; }
  Var forward(Graph& g, Var images, std::span<const Var> p) const override {
    const int n = g.value(images).dim(0);
    Var h = relu(g, conv2d(g, images, p[0], &p[1], 1));
    return linear(g, reshape(g, h, {n, 128}), p[2], p[3]);
  }

private:
  std::vector<Tensor> weights_;
};

double tiny_loss(const ref::Vec& x, int n, const std::vector<ref::Vec>& w, const std::vector<int>& y) {
  ref::Vec h = ref::relu(ref::conv2d(x, n, 3, 8, 8, w[0], 2, 3, w[1], 1));
  return ref::mean_cross_entropy(ref::linear(h, n, 128, w[2], w[3], 3), n, 3, y);
}

double cnn_loss(const ref::Vec& x, int n, const std::vector<ref::Vec>& w, const std::vector<int>& y) {
  const std::array<ref::Vec, 6> ws{w[0], w[1], w[2], w[3], w[4], w[5]};
  return ref::mean_cross_entropy(ref::cnn_logits(x, n, ws, 2), n, 2, y);
}

/// Worst relative error between loss_and_grads weight gradients and central
/// differences of `refloss`, probing `per_tensor` entries of each tensor.
template <class RefLoss>
double weight_grad_error(const WhiteBoxClassifier& model, const Tensor& x, const std::vector<int>& y,
                         RefLoss refloss, std::mt19937_64& rng, int per_tensor, double floor) {
  const LossAndGrads lg = loss_and_grads(model, x, y, GradTarget::weights);
  std::vector<ref::Vec> w;
  for (const Tensor& t : model.parameters()) w.push_back(ref::to_vec(t));
  const ref::Vec xv = ref::to_vec(x);
  double worst = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    std::uniform_int_distribution<std::size_t> pick(0, w[k].size() - 1);
    for (int probe = 0; probe < per_tensor; ++probe) {
      const std::size_t i = pick(rng);
      auto f = [&](const ref::Vec& v) {
        std::vector<ref::Vec> p = w;
        p[k] = v;
        return refloss(xv, x.dim(0), p, y);
      };
      worst = std::max(worst, ref::rel_err(lg.weight_grads[k][i], ref::central_diff(f, w[k], i), floor));
    }
  }
  return worst;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("reet_test_model_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("builtin CNN shapes and parameter layout") {
  const BuiltinCnn m = BuiltinCnn::init(3, 1);
  const auto& p = m.parameters();
  REQUIRE(p.size() == 6);
  CHECK(p[0].shape() == Shape{8, 3, 3, 3});
  CHECK(p[1].shape() == Shape{8});
  CHECK(p[2].shape() == Shape{16, 8, 3, 3});
  CHECK(p[3].shape() == Shape{16});
  CHECK(p[4].shape() == Shape{3, 1024});
  CHECK(p[5].shape() == Shape{3});
  std::mt19937_64 rng(2);
  CHECK(m.predict(ref::uniform_tensor({4, 3, 32, 32}, rng, 0, 1)).shape() == Shape{4, 3});
  CHECK_THROWS_AS(BuiltinCnn::init(1, 1), std::invalid_argument);
  CHECK_THROWS_AS(m.predict(Tensor({1, 3, 16, 16})), std::invalid_argument);
}

TEST_CASE("builtin CNN init is deterministic, He-uniform, zero-bias") {
  const BuiltinCnn a = BuiltinCnn::init(2, 42), b = BuiltinCnn::init(2, 42), c = BuiltinCnn::init(2, 43);
  CHECK(a.parameters() == b.parameters());
  CHECK(a.parameters() != c.parameters());
  const int fan_in[3] = {27, 72, 1024};
  for (int l = 0; l < 3; ++l) {
    const double bound = std::sqrt(6.0 / fan_in[l]);
    for (float v : a.parameters()[2 * l].data()) CHECK(std::abs(v) <= bound);
    for (float v : a.parameters()[2 * l + 1].data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("builtin CNN logits are finite on random inputs") {
  std::mt19937_64 rng(7);
  int finite = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const BuiltinCnn m = BuiltinCnn::init(2 + trial % 3, static_cast<std::uint64_t>(trial / 100));
    const Tensor z = m.predict(ref::uniform_tensor({1, 3, 32, 32}, rng, 0, 1));
    finite += z.all_finite() ? 1 : 0;
  }
  CHECK(finite == 1000);
}

TEST_CASE("forward is deterministic and matches the reference logits") {
  std::mt19937_64 rng(8);
  const BuiltinCnn m = BuiltinCnn::init(2, 5);
  const Tensor x = ref::uniform_tensor({3, 3, 32, 32}, rng, 0, 1);
  const Tensor z1 = m.predict(x), z2 = m.predict(x);
  CHECK(z1 == z2);
  std::array<ref::Vec, 6> w;
  for (int i = 0; i < 6; ++i) w[i] = ref::to_vec(m.parameters()[i]);
  const ref::Vec expect = ref::cnn_logits(ref::to_vec(x), 3, w, 2);
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(z1[i] == doctest::Approx(expect[i]).epsilon(1e-4));
}

TEST_CASE("uniform logits give loss ln C exactly") {
  std::mt19937_64 rng(9);
  for (int c : {2, 3, 5, 10}) {
    BuiltinCnn m = BuiltinCnn::init(c, 1);
    for (float& v : m.parameters()[4].data()) v = 0.0f;
    const Tensor x = ref::uniform_tensor({4, 3, 32, 32}, rng, 0, 1);
    const std::vector<int> y = {0, 1, 1, 0};
    CHECK(loss_and_grads(m, x, y, GradTarget::weights).loss == static_cast<float>(std::log(c)));
  }
}

TEST_CASE("weight gradients match finite differences on a reduced model") {
  std::mt19937_64 rng(10);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const TinyConv m(rng);
    const Tensor x = ref::uniform_tensor({2, 3, 8, 8}, rng, 0, 1);
    const std::vector<int> y = {trial % 3, (trial + 1) % 3};
    worst = std::max(worst, weight_grad_error(m, x, y, tiny_loss, rng, 12, 1e-3));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("weight gradients of the builtin CNN match finite differences") {
  std::mt19937_64 rng(11);
  const BuiltinCnn m = BuiltinCnn::init(2, 3);
  const Tensor x = ref::uniform_tensor({2, 3, 32, 32}, rng, 0, 1);
  CHECK(weight_grad_error(m, x, {0, 1}, cnn_loss, rng, 10, 1e-2) < 1e-3);
}

TEST_CASE("loss_and_grads returns exactly the requested gradients") {
  std::mt19937_64 rng(12);
  const BuiltinCnn m = BuiltinCnn::init(2, 3);
  const Tensor x = ref::uniform_tensor({2, 3, 32, 32}, rng, 0, 1);
  const std::vector<int> y = {0, 1};
  const TransformDescriptor t = make_transform(TransformKind::brightness_contrast);
  const ParamVector theta = t.neutral();

  const LossAndGrads w = loss_and_grads(m, x, y, GradTarget::weights);
  CHECK(w.weight_grads.size() == 6);
  CHECK(w.param_grads.empty());
  const LossAndGrads p = loss_and_grads(m, x, y, GradTarget::transform_params, &t, &theta);
  CHECK(p.weight_grads.empty());
  CHECK(p.param_grads.size() == theta.size());
  const LossAndGrads both = loss_and_grads(m, x, y, GradTarget::both, &t, &theta);
  CHECK(both.weight_grads.size() == 6);
  CHECK(both.param_grads.size() == theta.size());
  CHECK(both.loss == w.loss);

  CHECK_THROWS_AS(loss_and_grads(m, x, y, GradTarget::transform_params), std::invalid_argument);
  CHECK_THROWS_AS(loss_and_grads(m, x, y, GradTarget::both), std::invalid_argument);
}

TEST_CASE("labels out of range are rejected") {
  const BuiltinCnn m = BuiltinCnn::init(2, 3);
  const Tensor x({2, 3, 32, 32}, 0.5f);
  CHECK_THROWS_AS(loss_and_grads(m, x, std::vector<int>{0, 2}, GradTarget::weights), std::out_of_range);
  CHECK_THROWS_AS(loss_and_grads(m, x, std::vector<int>{-1, 0}, GradTarget::weights), std::out_of_range);
  CHECK_THROWS_AS(loss_and_grads(m, x, std::vector<int>{0}, GradTarget::weights), std::invalid_argument);
}

TEST_CASE("linear classifier computes W x + b") {
  const LinearClassifier m(Tensor({2, 3}, {1, 2, 3, -1, 0, 1}), Tensor::from({0.5f, -0.5f}));
  const Tensor z = m.predict(Tensor({1, 3, 1, 1}, {1, 1, 2}));
  CHECK(z[0] == 9.5f);
  CHECK(z[1] == 0.5f);
}

TEST_CASE("weights round trip is bit-exact") {
  const auto dir = temp_dir("roundtrip");
  for (int c : {2, 4}) {
    const ModelWeights w{BuiltinCnn::init(c, 99).parameters()};
    save_weights(w, dir / "w.bin");
    const ModelWeights back = load_weights(dir / "w.bin");
    CHECK(back == w);
    CHECK(weights_digest(back) == weights_digest(w));
    CHECK(serialize_weights(back) == read_bytes(dir / "w.bin"));
  }
}

TEST_CASE("weights file layout") {
  const ModelWeights w{{Tensor({2}, {1.0f, -2.0f}), Tensor({1, 1}, {0.5f})}};
  const std::vector<std::uint8_t> b = serialize_weights(w);
  // magic, version, count, (rank, dims) x 2, 3 floats, digest
  REQUIRE(b.size() == 4 + 4 + 4 + (4 + 4) + (4 + 8) + 12 + 8);
  CHECK(std::string(b.begin(), b.begin() + 4) == "REET");
  CHECK(b[4] == 1);
  CHECK(b[8] == 2);
  // 1.0f little-endian starts the payload
  CHECK(b[32] == 0x00);
  CHECK(b[35] == 0x3f);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(b[b.size() - 8 + i]) << (8 * i);
  CHECK(stored == fnv1a64(std::span(b).subspan(32, 12)));
}

TEST_CASE("FNV-1a 64 reference values") {
  CHECK(fnv1a64({}) == 0xcbf29ce484222325ULL);
  const std::string a = "a", foobar = "foobar";
  CHECK(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(a.data()), a.size())) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(foobar.data()), foobar.size())) ==
        0x85944171f73967e8ULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("weights load errors are distinct") {
  const auto dir = temp_dir("errors");
  const ModelWeights w{BuiltinCnn::init(2, 1).parameters()};
  const std::vector<std::uint8_t> good = serialize_weights(w);

  SUBCASE("corrupt payload byte") {
    auto b = good;
    b[100] ^= 0x01;
    write_bytes(dir / "w.bin", b);
    CHECK_THROWS_AS(load_weights(dir / "w.bin"), WeightsDigestError);
  }
  SUBCASE("bad magic names the expected one") {
    auto b = good;
    b[0] = 'X';
    try {
      deserialize_weights(b);
      FAIL("no error");
    } catch (const WeightsFormatError& e) {
      CHECK(std::string(e.what()).find("REET") != std::string::npos);
    }
  }
  SUBCASE("unknown version") {
    auto b = good;
    b[4] = 9;
    CHECK_THROWS_AS(deserialize_weights(b), WeightsFormatError);
  }
  SUBCASE("truncated") {
    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() / 2, good.size() - 1})
      CHECK_THROWS_AS(deserialize_weights(std::span(good).first(cut)), WeightsTruncatedError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_weights(dir / "absent.bin"), std::runtime_error); }
  SUBCASE("wrong shapes for the builtin CNN") {
    CHECK_THROWS_AS(BuiltinCnn(std::vector<Tensor>{Tensor({2})}), std::invalid_argument);
  }
}

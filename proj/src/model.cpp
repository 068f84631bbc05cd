#include "reet/model.hpp"

#include <cmath>
#include <stdexcept>

#include "reet/ops.hpp"
#include "reet/rng.hpp"

namespace reet {

std::vector<Var> WhiteBoxClassifier::bind(Graph& g, bool requires_grad) const {
  std::vector<Var> out;
  for (const Tensor& t : parameters()) out.push_back(g.leaf(t, requires_grad));
  return out;
}

Tensor WhiteBoxClassifier::predict(const Tensor& images) const {
  Graph g;
  Var x = g.constant(images);
  const std::vector<Var> params = bind(g, false);
  return g.value(forward(g, x, params));
}

namespace {

constexpr int kConv1 = 8;
constexpr int kConv2 = 16;
constexpr int kFlat = kConv2 * 8 * 8;

Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

BuiltinCnn BuiltinCnn::init(int classes, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("BuiltinCnn needs at least 2 classes");
  Rng rng(seed);
  std::vector<Tensor> w;
  w.push_back(he_uniform({kConv1, 3, 3, 3}, 3 * 9, rng));
  w.emplace_back(Shape{kConv1}, 0.0f);
  w.push_back(he_uniform({kConv2, kConv1, 3, 3}, kConv1 * 9, rng));
  w.emplace_back(Shape{kConv2}, 0.0f);
  w.push_back(he_uniform({classes, kFlat}, kFlat, rng));
  w.emplace_back(Shape{classes}, 0.0f);
  return BuiltinCnn(std::move(w));
}

BuiltinCnn::BuiltinCnn(std::vector<Tensor> weights) : weights_(std::move(weights)) {
  auto bad = [](const std::string& why) { return std::invalid_argument("weights do not fit the built-in CNN: " + why); };
  if (weights_.size() != 6) throw bad("expected 6 tensors, got " + std::to_string(weights_.size()));
  if (weights_[0].shape() != Shape{kConv1, 3, 3, 3} || weights_[1].shape() != Shape{kConv1})
    throw bad("first conv block has shape " + shape_str(weights_[0].shape()));
  if (weights_[2].shape() != Shape{kConv2, kConv1, 3, 3} || weights_[3].shape() != Shape{kConv2})
    throw bad("second conv block has shape " + shape_str(weights_[2].shape()));
  if (weights_[4].rank() != 2 || weights_[4].dim(1) != kFlat || weights_[5].shape() != Shape{weights_[4].dim(0)})
    throw bad("classifier head has shape " + shape_str(weights_[4].shape()));
  classes_ = weights_[4].dim(0);
  if (classes_ < 2) throw bad("fewer than 2 classes");
}

Var BuiltinCnn::forward(Graph& g, Var images, std::span<const Var> p) const {
  const Tensor& x = g.value(images);
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != kInputSize || x.dim(3) != kInputSize)
    throw std::invalid_argument("built-in CNN expects [N,3,32,32] input, got " + shape_str(x.shape()));
  if (p.size() != 6) throw std::invalid_argument("built-in CNN expects 6 bound parameters");
  Var h = maxpool2(g, relu(g, conv2d(g, images, p[0], &p[1], 1)));
  h = maxpool2(g, relu(g, conv2d(g, h, p[2], &p[3], 1)));
  h = reshape(g, h, {x.dim(0), kFlat});
  return linear(g, h, p[4], p[5]);
}

LinearClassifier::LinearClassifier(Tensor weight, Tensor bias) {
  if (weight.rank() != 2 || bias.numel() != static_cast<std::size_t>(weight.dim(0)))
    throw std::invalid_argument("linear classifier: weight must be [C,F] and bias [C]");
  weights_ = {std::move(weight), std::move(bias)};
}

Var LinearClassifier::forward(Graph& g, Var images, std::span<const Var> p) const {
  const Tensor& x = g.value(images);
  const int n = x.dim(0);
  const int f = static_cast<int>(x.numel() / static_cast<std::size_t>(n));
  if (f != weights_[0].dim(1))
    throw std::invalid_argument("linear classifier expects " + std::to_string(weights_[0].dim(1)) +
                                " features per input, got " + std::to_string(f));
  return linear(g, reshape(g, images, {n, f}), p[0], p[1]);
}

LossAndGrads loss_and_grads(const WhiteBoxClassifier& model, const Tensor& images, std::span<const int> labels,
                            GradTarget wrt, const TransformDescriptor* transform, const ParamVector* theta,
                            LossKind loss_kind) {
  const bool want_weights = wrt != GradTarget::transform_params;
  const bool want_params = wrt != GradTarget::weights;
  if (want_params && (transform == nullptr || theta == nullptr))
    throw std::invalid_argument("loss_and_grads: transform-parameter gradients requested without a traced transform");
  if (transform) transform->check(*theta);

  Graph g;
  Var x = g.leaf(images, false);
  std::vector<Var> tvars;
  if (transform) {
    for (const Tensor& t : *theta) tvars.push_back(g.leaf(t, want_params));
    x = transform->apply(g, x, tvars);
  }
  const std::vector<Var> wvars = model.bind(g, want_weights);
  Var logits = model.forward(g, x, wvars);
  Var loss = loss_kind == LossKind::cross_entropy ? cross_entropy(g, logits, labels) : negative_margin(g, logits, labels);
  g.backward(loss);

  LossAndGrads out;
  out.loss = g.value(loss)[0];
  out.logits = g.value(logits);
  if (want_weights)
    for (Var v : wvars) out.weight_grads.push_back(g.grad(v));
  if (want_params)
    for (Var v : tvars) out.param_grads.push_back(g.grad(v));
  return out;
}

}  // namespace reet

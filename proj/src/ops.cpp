#include "reet/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace reet {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_shape_eq(const Tensor& a, const Tensor& b, const char* op) {
  require(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
}

// Pads each [H,W] plane of a [P,H,W] stack.
std::vector<float> pad_planes(const float* src, int planes, int h, int w, int p, Padding mode) {
  const int hp = h + 2 * p, wp = w + 2 * p;
  std::vector<float> out(static_cast<std::size_t>(planes) * hp * wp, 0.0f);
  for (int c = 0; c < planes; ++c) {
    const float* s = src + static_cast<std::size_t>(c) * h * w;
    float* d = out.data() + static_cast<std::size_t>(c) * hp * wp;
    for (int y = 0; y < hp; ++y) {
      int sy = y - p;
      if (mode == Padding::zero) {
        if (sy < 0 || sy >= h) continue;
        std::copy(s + sy * w, s + sy * w + w, d + y * wp + p);
      } else {
        sy = reflect_index(sy, h);
        for (int x = 0; x < wp; ++x) d[y * wp + x] = s[sy * w + reflect_index(x - p, w)];
      }
    }
  }
  return out;
}

// Adjoint of pad_planes: folds padded gradients back onto the source planes.
void unpad_planes_add(const float* gpad, float* dst, int planes, int h, int w, int p, Padding mode) {
  const int hp = h + 2 * p, wp = w + 2 * p;
  for (int c = 0; c < planes; ++c) {
    const float* s = gpad + static_cast<std::size_t>(c) * hp * wp;
    float* d = dst + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < hp; ++y) {
      int sy = y - p;
      if (mode == Padding::zero) {
        if (sy < 0 || sy >= h) continue;
        for (int x = 0; x < w; ++x) d[sy * w + x] += s[y * wp + x + p];
      } else {
        sy = reflect_index(sy, h);
        for (int x = 0; x < wp; ++x) d[sy * w + reflect_index(x - p, w)] += s[y * wp + x];
      }
    }
  }
}

}  // namespace

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Var add(Graph& g, Var a, Var b) {
  const Tensor& va = g.value(a);
  const Tensor& vb = g.value(b);
  require_shape_eq(va, vb, "add");
  Tensor out = va;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    gr.accumulate(b, go);
  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor& va = g.value(a);
  const Tensor& vb = g.value(b);
  require_shape_eq(va, vb, "sub");
  Tensor out = va;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    Tensor neg = go;
    for (std::size_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
    gr.accumulate(b, neg);
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& va = g.value(a);
  const Tensor& vb = g.value(b);
  require_shape_eq(va, vb, "mul");
  Tensor out = va;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    Tensor ga = go, gb = go;
    const Tensor& xa = gr.value(a);
    const Tensor& xb = gr.value(b);
    for (std::size_t i = 0; i < go.numel(); ++i) {
      ga[i] *= xb[i];
      gb[i] *= xa[i];
    }
    gr.accumulate(a, ga);
    gr.accumulate(b, gb);
  });
}

Var scale(Graph& g, Var a, float s) {
  Tensor out = g.value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return g.record(std::move(out), {a}, [a, s](Graph& gr, const Tensor& go) {
    Tensor ga = go;
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= s;
    gr.accumulate(a, ga);
  });
}

Var sum(Graph& g, Var a) {
  const Tensor& va = g.value(a);
  double s = 0.0;
  for (float v : va.data()) s += v;
  return g.record(Tensor::scalar(static_cast<float>(s)), {a}, [a](Graph& gr, const Tensor& go) {
    gr.accumulate(a, Tensor(gr.value(a).shape(), go[0]));
  });
}

Var mean(Graph& g, Var a) {
  const Tensor& va = g.value(a);
  double s = 0.0;
  for (float v : va.data()) s += v;
  const auto n = static_cast<double>(va.numel());
  return g.record(Tensor::scalar(static_cast<float>(s / n)), {a}, [a, n](Graph& gr, const Tensor& go) {
    gr.accumulate(a, Tensor(gr.value(a).shape(), static_cast<float>(go[0] / n)));
  });
}

Var relu(Graph& g, Var a) {
  Tensor out = g.value(a);
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) {
    const Tensor& x = gr.value(a);
    Tensor ga = go;
    // Subgradient at exactly 0 is 0.
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = x[i] > 0.0f ? ga[i] : 0.0f;
    gr.accumulate(a, ga);
  });
}

Var reshape(Graph& g, Var a, Shape shape) {
  Tensor out = g.value(a).reshaped(std::move(shape));
  return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go.reshaped(gr.value(a).shape()));
  });
}

Var conv2d(Graph& g, Var x, Var kernel, const Var* bias, int padding, Padding mode) {
  const Tensor& vx = g.value(x);
  const Tensor& vk = g.value(kernel);
  require(vx.rank() == 4, "conv2d: input must be NCHW, got " + shape_str(vx.shape()));
  require(vk.rank() == 4, "conv2d: kernel must be OIKK, got " + shape_str(vk.shape()));
  const int n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  const int o = vk.dim(0), k = vk.dim(2);
  require(vk.dim(1) == c, "conv2d: input has " + std::to_string(c) + " channels but kernel expects " +
                              std::to_string(vk.dim(1)));
  require(vk.dim(3) == k && k % 2 == 1, "conv2d: kernel must be square with odd size");
  require(padding >= 0 && (mode == Padding::zero || (padding < h && padding < w)), "conv2d: bad padding");
  const int hp = h + 2 * padding, wp = w + 2 * padding;
  const int ho = hp - k + 1, wo = wp - k + 1;
  require(ho > 0 && wo > 0, "conv2d: kernel larger than padded input");
  if (bias) require(g.value(*bias).numel() == static_cast<std::size_t>(o), "conv2d: bias size mismatch");

  std::vector<float> xpad = pad_planes(vx.ptr(), n * c, h, w, padding, mode);
  Tensor out(Shape{n, o, ho, wo});
  const float* kp = vk.ptr();
  for (int b = 0; b < n; ++b) {
    for (int oc = 0; oc < o; ++oc) {
      float* dst = out.ptr() + (static_cast<std::size_t>(b) * o + oc) * ho * wo;
      const float bval = bias ? g.value(*bias)[static_cast<std::size_t>(oc)] : 0.0f;
      std::fill(dst, dst + ho * wo, bval);
      for (int ic = 0; ic < c; ++ic) {
        const float* src = xpad.data() + (static_cast<std::size_t>(b) * c + ic) * hp * wp;
        const float* kern = kp + (static_cast<std::size_t>(oc) * c + ic) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const float wv = kern[ky * k + kx];
            for (int y = 0; y < ho; ++y) {
              const float* srow = src + (y + ky) * wp + kx;
              float* drow = dst + y * wo;
              for (int xx = 0; xx < wo; ++xx) drow[xx] += wv * srow[xx];
            }
          }
        }
      }
    }
  }

  const Var bias_var = bias ? *bias : Var{};
  const bool has_bias = bias != nullptr;
  const std::array<Var, 3> parents{x, kernel, bias_var};
  return g.record(std::move(out), std::span<const Var>(parents.data(), has_bias ? 3 : 2),
                  [=, xpad = std::move(xpad)](Graph& gr, const Tensor& go) {
                    const float* gop = go.ptr();
                    if (has_bias) {
                      if (float* gb = gr.grad_buffer(bias_var)) {
                        for (int b = 0; b < n; ++b)
                          for (int oc = 0; oc < o; ++oc) {
                            const float* gr_ = gop + (static_cast<std::size_t>(b) * o + oc) * ho * wo;
                            double s = 0.0;
                            for (int i = 0; i < ho * wo; ++i) s += gr_[i];
                            gb[oc] += static_cast<float>(s);
                          }
                      }
                    }
                    if (float* gk = gr.grad_buffer(kernel)) {
                      std::vector<float> acc(static_cast<std::size_t>(wo));
                      for (int b = 0; b < n; ++b)
                        for (int oc = 0; oc < o; ++oc) {
                          const float* gplane = gop + (static_cast<std::size_t>(b) * o + oc) * ho * wo;
                          for (int ic = 0; ic < c; ++ic) {
                            const float* src = xpad.data() + (static_cast<std::size_t>(b) * c + ic) * hp * wp;
                            float* gkern = gk + (static_cast<std::size_t>(oc) * c + ic) * k * k;
                            for (int ky = 0; ky < k; ++ky)
                              for (int kx = 0; kx < k; ++kx) {
                                std::fill(acc.begin(), acc.end(), 0.0f);
                                for (int y = 0; y < ho; ++y) {
                                  const float* srow = src + (y + ky) * wp + kx;
                                  const float* grow = gplane + y * wo;
                                  for (int xx = 0; xx < wo; ++xx) acc[xx] += grow[xx] * srow[xx];
                                }
                                float s = 0.0f;
                                for (float v : acc) s += v;
                                gkern[ky * k + kx] += s;
                              }
                          }
                        }
                    }
                    if (gr.requires_grad(x)) {
                      const Tensor& kv = gr.value(kernel);
                      std::vector<float> gpad(xpad.size(), 0.0f);
                      for (int b = 0; b < n; ++b)
                        for (int oc = 0; oc < o; ++oc) {
                          const float* gplane = gop + (static_cast<std::size_t>(b) * o + oc) * ho * wo;
                          for (int ic = 0; ic < c; ++ic) {
                            float* dstp = gpad.data() + (static_cast<std::size_t>(b) * c + ic) * hp * wp;
                            const float* kern = kv.ptr() + (static_cast<std::size_t>(oc) * c + ic) * k * k;
                            for (int ky = 0; ky < k; ++ky)
                              for (int kx = 0; kx < k; ++kx) {
                                const float wv = kern[ky * k + kx];
                                for (int y = 0; y < ho; ++y) {
                                  float* drow = dstp + (y + ky) * wp + kx;
                                  const float* grow = gplane + y * wo;
                                  for (int xx = 0; xx < wo; ++xx) drow[xx] += wv * grow[xx];
                                }
                              }
                          }
                        }
                      unpad_planes_add(gpad.data(), gr.grad_buffer(x), n * c, h, w, padding, mode);
                    }
                  });
}

Var depthwise_conv2d(Graph& g, Var x, Var kernel, bool normalize) {
  const Tensor& vx = g.value(x);
  const Tensor& vk = g.value(kernel);
  require(vx.rank() == 4, "depthwise_conv2d: input must be NCHW");
  require(vk.rank() == 2 && vk.dim(0) == vk.dim(1) && vk.dim(0) % 2 == 1,
          "depthwise_conv2d: kernel must be [K,K] with K odd");
  const int planes = vx.dim(0) * vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  const int k = vk.dim(0), p = (k - 1) / 2;
  require(p < h && p < w, "depthwise_conv2d: kernel radius exceeds image size");
  const int hp = h + 2 * p, wp = w + 2 * p;
  double ksum = 1.0;
  if (normalize) {
    ksum = 0.0;
    for (float v : vk.data()) ksum += v;
    require(ksum > 0.0, "depthwise_conv2d: normalized kernel must have a positive sum");
  }

  std::vector<float> xpad = pad_planes(vx.ptr(), planes, h, w, p, Padding::reflect);
  Tensor out(vx.shape(), 0.0f);
  const float* kp = vk.ptr();
  std::vector<double> acc(static_cast<std::size_t>(h) * w);
  for (int pl = 0; pl < planes; ++pl) {
    const float* src = xpad.data() + static_cast<std::size_t>(pl) * hp * wp;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double wv = kp[ky * k + kx];
        if (wv == 0.0) continue;
        for (int y = 0; y < h; ++y) {
          const float* srow = src + (y + ky) * wp + kx;
          double* arow = acc.data() + static_cast<std::size_t>(y) * w;
          for (int xx = 0; xx < w; ++xx) arow[xx] += wv * srow[xx];
        }
      }
    float* dst = out.ptr() + static_cast<std::size_t>(pl) * h * w;
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i] / ksum);
  }
  Tensor fwd = normalize ? out : Tensor();
  return g.record(std::move(out), {x, kernel},
                  [=, xpad = std::move(xpad), fwd = std::move(fwd)](Graph& gr, const Tensor& go) {
    if (float* gk = gr.grad_buffer(kernel)) {
      std::vector<double> acc(static_cast<std::size_t>(k) * k, 0.0);
      double go_out = 0.0;
      for (int pl = 0; pl < planes; ++pl) {
        const float* src = xpad.data() + static_cast<std::size_t>(pl) * hp * wp;
        const float* gplane = go.ptr() + static_cast<std::size_t>(pl) * h * w;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            double s = 0.0;
            for (int y = 0; y < h; ++y) {
              const float* srow = src + (y + ky) * wp + kx;
              const float* grow = gplane + y * w;
              for (int xx = 0; xx < w; ++xx) s += static_cast<double>(grow[xx]) * srow[xx];
            }
            acc[static_cast<std::size_t>(ky * k + kx)] += s;
          }
      }
      if (normalize)
        for (std::size_t i = 0; i < go.numel(); ++i) go_out += static_cast<double>(go[i]) * fwd[i];
      for (std::size_t i = 0; i < acc.size(); ++i) gk[i] += static_cast<float>((acc[i] - go_out) / ksum);
    }
    if (gr.requires_grad(x)) {
      const float* kv = gr.value(kernel).ptr();
      std::vector<float> gpad(xpad.size(), 0.0f);
      for (int pl = 0; pl < planes; ++pl) {
        float* dstp = gpad.data() + static_cast<std::size_t>(pl) * hp * wp;
        const float* gplane = go.ptr() + static_cast<std::size_t>(pl) * h * w;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const float wv = static_cast<float>(kv[ky * k + kx] / ksum);
            if (wv == 0.0f) continue;
            for (int y = 0; y < h; ++y) {
              float* drow = dstp + (y + ky) * wp + kx;
              const float* grow = gplane + y * w;
              for (int xx = 0; xx < w; ++xx) drow[xx] += wv * grow[xx];
            }
          }
      }
      unpad_planes_add(gpad.data(), gr.grad_buffer(x), planes, h, w, p, Padding::reflect);
    }
  });
}

Var maxpool2(Graph& g, Var x) {
  const Tensor& vx = g.value(x);
  require(vx.rank() == 4 && vx.dim(2) % 2 == 0 && vx.dim(3) % 2 == 0, "maxpool2: need NCHW with even H, W");
  const int planes = vx.dim(0) * vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  const int ho = h / 2, wo = w / 2;
  Tensor out(Shape{vx.dim(0), vx.dim(1), ho, wo});
  std::vector<std::uint32_t> argmax(out.numel());
  for (int pl = 0; pl < planes; ++pl) {
    const std::size_t base = static_cast<std::size_t>(pl) * h * w;
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) {
        std::size_t best = base + static_cast<std::size_t>(2 * y) * w + 2 * xx;
        const std::size_t cand[3] = {best + 1, best + static_cast<std::size_t>(w), best + static_cast<std::size_t>(w) + 1};
        for (std::size_t c : cand)
          if (vx[c] > vx[best]) best = c;
        const std::size_t oi = (static_cast<std::size_t>(pl) * ho + y) * wo + xx;
        out[oi] = vx[best];
        argmax[oi] = static_cast<std::uint32_t>(best);
      }
  }
  return g.record(std::move(out), {x}, [x, argmax = std::move(argmax)](Graph& gr, const Tensor& go) {
    float* gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < go.numel(); ++i) gx[argmax[i]] += go[i];
  });
}

Var linear(Graph& g, Var x, Var weight, Var bias) {
  const Tensor& vx = g.value(x);
  const Tensor& vw = g.value(weight);
  const Tensor& vb = g.value(bias);
  require(vx.rank() == 2 && vw.rank() == 2 && vw.dim(1) == vx.dim(1),
          "linear: shapes " + shape_str(vx.shape()) + " and " + shape_str(vw.shape()) + " do not compose");
  const int n = vx.dim(0), f = vx.dim(1), c = vw.dim(0);
  require(vb.numel() == static_cast<std::size_t>(c), "linear: bias size mismatch");
  Tensor out(Shape{n, c});
  for (int b = 0; b < n; ++b)
    for (int j = 0; j < c; ++j) {
      const float* xr = vx.ptr() + static_cast<std::size_t>(b) * f;
      const float* wr = vw.ptr() + static_cast<std::size_t>(j) * f;
      double s = vb[static_cast<std::size_t>(j)];
      for (int i = 0; i < f; ++i) s += static_cast<double>(xr[i]) * wr[i];
      out[static_cast<std::size_t>(b) * c + j] = static_cast<float>(s);
    }
  return g.record(std::move(out), {x, weight, bias}, [=](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    const Tensor& wv = gr.value(weight);
    if (float* gb = gr.grad_buffer(bias))
      for (int b = 0; b < n; ++b)
        for (int j = 0; j < c; ++j) gb[j] += go[static_cast<std::size_t>(b) * c + j];
    if (float* gw = gr.grad_buffer(weight))
      for (int b = 0; b < n; ++b)
        for (int j = 0; j < c; ++j) {
          const float gv = go[static_cast<std::size_t>(b) * c + j];
          const float* xr = xv.ptr() + static_cast<std::size_t>(b) * f;
          float* gwr = gw + static_cast<std::size_t>(j) * f;
          for (int i = 0; i < f; ++i) gwr[i] += gv * xr[i];
        }
    if (float* gx = gr.grad_buffer(x))
      for (int b = 0; b < n; ++b)
        for (int j = 0; j < c; ++j) {
          const float gv = go[static_cast<std::size_t>(b) * c + j];
          const float* wr = wv.ptr() + static_cast<std::size_t>(j) * f;
          float* gxr = gx + static_cast<std::size_t>(b) * f;
          for (int i = 0; i < f; ++i) gxr[i] += gv * wr[i];
        }
  });
}

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels, const char* op) {
  require(logits.rank() == 2, std::string(op) + ": logits must be [N,C]");
  require(labels.size() == static_cast<std::size_t>(logits.dim(0)),
          std::string(op) + ": label count does not match batch size");
  for (int y : labels)
    if (y < 0 || y >= logits.dim(1))
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                              std::to_string(logits.dim(1)) + ")");
}

}  // namespace

Var cross_entropy(Graph& g, Var logits, std::span<const int> labels) {
  const Tensor& z = g.value(logits);
  check_labels(z, labels, "cross_entropy");
  const int n = z.dim(0), c = z.dim(1);
  Tensor probs(z.shape());
  double total = 0.0;
  for (int b = 0; b < n; ++b) {
    const float* zr = z.ptr() + static_cast<std::size_t>(b) * c;
    double zmax = zr[0];
    for (int j = 1; j < c; ++j) zmax = std::max(zmax, static_cast<double>(zr[j]));
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(zr[j] - zmax);
    const double lse = zmax + std::log(denom);
    total += lse - zr[labels[static_cast<std::size_t>(b)]];
    for (int j = 0; j < c; ++j)
      probs[static_cast<std::size_t>(b) * c + j] = static_cast<float>(std::exp(zr[j] - lse));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return g.record(Tensor::scalar(static_cast<float>(total / n)), {logits},
                  [=, probs = std::move(probs), ys = std::move(ys)](Graph& gr, const Tensor& go) {
                    Tensor gz = probs;
                    for (int b = 0; b < n; ++b) gz[static_cast<std::size_t>(b) * c + ys[b]] -= 1.0f;
                    const float s = go[0] / static_cast<float>(n);
                    for (float& v : gz.data()) v *= s;
                    gr.accumulate(logits, gz);
                  });
}

Var negative_margin(Graph& g, Var logits, std::span<const int> labels) {
  const Tensor& z = g.value(logits);
  check_labels(z, labels, "negative_margin");
  const int n = z.dim(0), c = z.dim(1);
  require(c >= 2, "negative_margin: need at least two classes");
  std::vector<int> ys(labels.begin(), labels.end()), runner(static_cast<std::size_t>(n));
  double total = 0.0;
  for (int b = 0; b < n; ++b) {
    const float* zr = z.ptr() + static_cast<std::size_t>(b) * c;
    int best = -1;
    for (int j = 0; j < c; ++j)
      if (j != ys[b] && (best < 0 || zr[j] > zr[best])) best = j;
    runner[b] = best;
    total += static_cast<double>(zr[best]) - zr[ys[b]];
  }
  return g.record(Tensor::scalar(static_cast<float>(total / n)), {logits},
                  [=, ys = std::move(ys), runner = std::move(runner)](Graph& gr, const Tensor& go) {
                    Tensor gz(Shape{n, c}, 0.0f);
                    const float s = go[0] / static_cast<float>(n);
                    for (int b = 0; b < n; ++b) {
                      gz[static_cast<std::size_t>(b) * c + runner[b]] += s;
                      gz[static_cast<std::size_t>(b) * c + ys[b]] -= s;
                    }
                    gr.accumulate(logits, gz);
                  });
}

namespace {

// Reflects a coordinate into [0, extent]; returns the derivative sign.
float reflect_coord(float v, int extent, float& sign) {
  const float e = static_cast<float>(extent);
  sign = 1.0f;
  if (v >= 0.0f && v <= e) return v;
  const float period = 2.0f * e;
  float m = std::fmod(v, period);
  if (m < 0.0f) m += period;
  if (m > e) {
    m = period - m;
    sign = -1.0f;
  }
  return m;
}

struct Tap {
  int x0, x1, y0, y1;
  float fx, fy, sx, sy;
};

Tap make_tap(float gx, float gy, int w, int h) {
  Tap t{};
  const float ux = reflect_coord(gx, w, t.sx) - 0.5f;
  const float uy = reflect_coord(gy, h, t.sy) - 0.5f;
  const float flx = std::floor(ux), fly = std::floor(uy);
  t.fx = ux - flx;
  t.fy = uy - fly;
  const int ix = static_cast<int>(flx), iy = static_cast<int>(fly);
  t.x0 = std::clamp(ix, 0, w - 1);
  t.x1 = std::clamp(ix + 1, 0, w - 1);
  t.y0 = std::clamp(iy, 0, h - 1);
  t.y1 = std::clamp(iy + 1, 0, h - 1);
  return t;
}

}  // namespace

Var bilinear_sample(Graph& g, Var x, Var grid) {
  const Tensor& vx = g.value(x);
  const Tensor& vg = g.value(grid);
  require(vx.rank() == 4, "bilinear_sample: input must be NCHW");
  require(vg.rank() == 4 && vg.dim(0) == vx.dim(0) && vg.dim(3) == 2,
          "bilinear_sample: grid must be [N,Ho,Wo,2], got " + shape_str(vg.shape()));
  const int n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  const int ho = vg.dim(1), wo = vg.dim(2);
  Tensor out(Shape{n, c, ho, wo});
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const std::size_t gi = ((static_cast<std::size_t>(b) * ho + oy) * wo + ox) * 2;
        const Tap t = make_tap(vg[gi], vg[gi + 1], w, h);
        for (int ch = 0; ch < c; ++ch) {
          const float* plane = vx.ptr() + (static_cast<std::size_t>(b) * c + ch) * h * w;
          const float top = plane[t.y0 * w + t.x0] * (1.0f - t.fx) + plane[t.y0 * w + t.x1] * t.fx;
          const float bot = plane[t.y1 * w + t.x0] * (1.0f - t.fx) + plane[t.y1 * w + t.x1] * t.fx;
          out[((static_cast<std::size_t>(b) * c + ch) * ho + oy) * wo + ox] = top * (1.0f - t.fy) + bot * t.fy;
        }
      }
  return g.record(std::move(out), {x, grid}, [=](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    const Tensor& gv = gr.value(grid);
    float* gx = gr.grad_buffer(x);
    float* gg = gr.grad_buffer(grid);
    for (int b = 0; b < n; ++b)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const std::size_t gi = ((static_cast<std::size_t>(b) * ho + oy) * wo + ox) * 2;
          const Tap t = make_tap(gv[gi], gv[gi + 1], w, h);
          float dfx = 0.0f, dfy = 0.0f;
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t pbase = (static_cast<std::size_t>(b) * c + ch) * h * w;
            const float gout = go[((static_cast<std::size_t>(b) * c + ch) * ho + oy) * wo + ox];
            if (gx) {
              gx[pbase + t.y0 * w + t.x0] += gout * (1.0f - t.fx) * (1.0f - t.fy);
              gx[pbase + t.y0 * w + t.x1] += gout * t.fx * (1.0f - t.fy);
              gx[pbase + t.y1 * w + t.x0] += gout * (1.0f - t.fx) * t.fy;
              gx[pbase + t.y1 * w + t.x1] += gout * t.fx * t.fy;
            }
            if (gg) {
              const float* plane = xv.ptr() + pbase;
              const float v00 = plane[t.y0 * w + t.x0], v01 = plane[t.y0 * w + t.x1];
              const float v10 = plane[t.y1 * w + t.x0], v11 = plane[t.y1 * w + t.x1];
              dfx += gout * ((v01 - v00) * (1.0f - t.fy) + (v11 - v10) * t.fy);
              dfy += gout * ((v10 - v00) * (1.0f - t.fx) + (v11 - v01) * t.fx);
            }
          }
          if (gg) {
            gg[gi] += dfx * t.sx;
            gg[gi + 1] += dfy * t.sy;
          }
        }
  });
}

namespace {

struct KernelEval {
  std::vector<double> k;       // normalized weights
  std::vector<double> dk;      // d k / d sigma
};

KernelEval eval_gaussian(double sigma, int radius) {
  const int size = 2 * radius + 1;
  KernelEval e;
  e.k.resize(static_cast<std::size_t>(size) * size);
  e.dk.resize(e.k.size());
  std::vector<double> d2(e.k.size());
  double z = 0.0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const std::size_t i = static_cast<std::size_t>((dy + radius) * size + dx + radius);
      d2[i] = static_cast<double>(dx * dx + dy * dy);
      e.k[i] = std::exp(-d2[i] / (2.0 * sigma * sigma));
      z += e.k[i];
    }
  double mean_d2 = 0.0;
  for (std::size_t i = 0; i < e.k.size(); ++i) {
    e.k[i] /= z;
    mean_d2 += e.k[i] * d2[i];
  }
  const double s3 = sigma * sigma * sigma;
  for (std::size_t i = 0; i < e.k.size(); ++i) e.dk[i] = e.k[i] * (d2[i] - mean_d2) / s3;
  return e;
}

}  // namespace

Tensor gaussian_kernel(float sigma, int radius) {
  require(radius >= 0, "gaussian_kernel: negative radius");
  require(sigma > 0.0f, "gaussian_kernel: sigma must be positive");
  const KernelEval e = eval_gaussian(sigma, radius);
  const int size = 2 * radius + 1;
  Tensor out(Shape{size, size});
  for (std::size_t i = 0; i < e.k.size(); ++i) out[i] = static_cast<float>(e.k[i]);
  return out;
}

Var gaussian_kernel(Graph& g, Var sigma, int radius) {
  const float s = g.value(sigma)[0];
  require(g.value(sigma).numel() == 1, "gaussian_kernel: sigma must be a scalar");
  require(s > 0.0f, "gaussian_kernel: sigma must be positive");
  Tensor out = gaussian_kernel(s, radius);
  return g.record(std::move(out), {sigma}, [sigma, radius, s](Graph& gr, const Tensor& go) {
    const KernelEval e = eval_gaussian(s, radius);
    double acc = 0.0;
    for (std::size_t i = 0; i < e.dk.size(); ++i) acc += go[i] * e.dk[i];
    gr.accumulate(sigma, Tensor::scalar(static_cast<float>(acc)));
  });
}

namespace {

const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> basis = [] {
    std::array<double, 64> b{};
    for (int u = 0; u < 8; ++u) {
      const double alpha = u == 0 ? std::sqrt(1.0 / 8.0) : 0.5;
      for (int x = 0; x < 8; ++x) b[u * 8 + x] = alpha * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
    return b;
  }();
  return basis;
}

// out = B * in * B^T (forward) or B^T * in * B (inverse).
void separable8(const float* in, float* out, bool inverse) {
  const auto& b = dct_basis();
  double tmp[64];
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      double s = 0.0;
      for (int k = 0; k < 8; ++k) s += (inverse ? b[k * 8 + r] : b[r * 8 + k]) * in[k * 8 + c];
      tmp[r * 8 + c] = s;
    }
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      double s = 0.0;
      for (int k = 0; k < 8; ++k) s += tmp[r * 8 + k] * (inverse ? b[k * 8 + c] : b[c * 8 + k]);
      out[r * 8 + c] = static_cast<float>(s);
    }
}

void require_block(const Tensor& t, const char* op) {
  require(t.shape() == Shape{8, 8}, std::string(op) + ": expected an 8x8 block, got " + shape_str(t.shape()));
}

}  // namespace

void dct8_inplace(float* block) {
  float out[64];
  separable8(block, out, false);
  std::copy(out, out + 64, block);
}

void idct8_inplace(float* coeffs) {
  float out[64];
  separable8(coeffs, out, true);
  std::copy(out, out + 64, coeffs);
}

Tensor dct8(const Tensor& block) {
  require_block(block, "dct8");
  Tensor out(Shape{8, 8});
  separable8(block.ptr(), out.ptr(), false);
  return out;
}

Tensor idct8(const Tensor& coeffs) {
  require_block(coeffs, "idct8");
  Tensor out(Shape{8, 8});
  separable8(coeffs.ptr(), out.ptr(), true);
  return out;
}

}  // namespace reet

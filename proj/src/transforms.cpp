#include "reet/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "reet/ops.hpp"

namespace reet {

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 invert(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_rgb_batch(const Tensor& x, const char* op) {
  require(x.rank() == 4 && x.dim(1) == 3, std::string(op) + ": expected [N,3,H,W], got " + shape_str(x.shape()));
}

float scalar_of(const Graph& g, Var v, const char* what) {
  const Tensor& t = g.value(v);
  require(t.numel() == 1, std::string(what) + " must be a scalar parameter");
  return t[0];
}

constexpr double kLn10 = std::numbers::ln10;

}  // namespace

const Mat3& stain_matrix() {
  static const Mat3 m = [] {
    Mat3 r = {{{0.65, 0.70, 0.29}, {0.07, 0.99, 0.11}, {0.27, 0.57, 0.78}}};
    for (auto& row : r) {
      const double n = std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
      for (double& v : row) v /= n;
    }
    return r;
  }();
  return m;
}

const Mat3& stain_matrix_inverse() {
  static const Mat3 inv = invert(stain_matrix());
  return inv;
}

std::string_view kind_name(TransformKind kind) {
  switch (kind) {
    case TransformKind::stain: return "stain";
    case TransformKind::additive: return "additive";
    case TransformKind::blur: return "blur";
    case TransformKind::jpeg: return "jpeg";
    case TransformKind::resolution: return "resolution";
    case TransformKind::brightness_contrast: return "brightness_contrast";
    case TransformKind::affine: return "affine";
  }
  return "?";
}

std::optional<TransformKind> parse_kind(std::string_view name) {
  for (TransformKind k : kAllTransformKinds)
    if (kind_name(k) == name) return k;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Building blocks

Var clamp01_ste(Graph& g, Var x) {
  Tensor out = g.value(x);
  for (float& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
  return g.record(std::move(out), {x}, [x](Graph& gr, const Tensor& go) { gr.accumulate(x, go); });
}

Var stain(Graph& g, Var x, Var alpha, Var beta) {
  const Tensor& vx = g.value(x);
  require_rgb_batch(vx, "stain");
  require(g.value(alpha).numel() == 3 && g.value(beta).numel() == 3, "stain: alpha and beta must have 3 entries");
  const Mat3& m = stain_matrix();
  const Mat3& minv = stain_matrix_inverse();
  const int n = vx.dim(0);
  const std::size_t hw = static_cast<std::size_t>(vx.dim(2)) * vx.dim(3);
  double a[3], b[3];
  for (int s = 0; s < 3; ++s) {
    a[s] = g.value(alpha)[static_cast<std::size_t>(s)];
    b[s] = g.value(beta)[static_cast<std::size_t>(s)];
  }
  Tensor out(vx.shape());
  for (int img = 0; img < n; ++img) {
    const float* src = vx.ptr() + static_cast<std::size_t>(img) * 3 * hw;
    float* dst = out.ptr() + static_cast<std::size_t>(img) * 3 * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      double od[3], conc[3] = {0, 0, 0};
      for (int c = 0; c < 3; ++c) od[c] = -std::log10(std::clamp(static_cast<double>(src[c * hw + i]), 1.0 / 255.0, 1.0));
      for (int s = 0; s < 3; ++s)
        for (int c = 0; c < 3; ++c) conc[s] += od[c] * minv[c][s];
      for (int c = 0; c < 3; ++c) {
        double odp = 0.0;
        for (int s = 0; s < 3; ++s) odp += (a[s] * conc[s] + b[s]) * m[s][c];
        dst[c * hw + i] = static_cast<float>(std::clamp(std::pow(10.0, -odp), 1.0 / 255.0, 1.0));
      }
    }
  }
  return g.record(std::move(out), {x, alpha, beta}, [=](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    float* gx = gr.grad_buffer(x);
    double ga[3] = {0, 0, 0}, gb[3] = {0, 0, 0};
    for (int img = 0; img < n; ++img) {
      const float* src = xv.ptr() + static_cast<std::size_t>(img) * 3 * hw;
      const float* gop = go.ptr() + static_cast<std::size_t>(img) * 3 * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        double p[3], od[3], conc[3] = {0, 0, 0};
        for (int c = 0; c < 3; ++c) {
          p[c] = std::clamp(static_cast<double>(src[c * hw + i]), 1.0 / 255.0, 1.0);
          od[c] = -std::log10(p[c]);
        }
        for (int s = 0; s < 3; ++s)
          for (int c = 0; c < 3; ++c) conc[s] += od[c] * minv[c][s];
        double g_odp[3];
        for (int c = 0; c < 3; ++c) {
          double odp = 0.0;
          for (int s = 0; s < 3; ++s) odp += (a[s] * conc[s] + b[s]) * m[s][c];
          g_odp[c] = -kLn10 * std::pow(10.0, -odp) * gop[c * hw + i];
        }
        double g_conc[3];
        for (int s = 0; s < 3; ++s) {
          double gcp = 0.0;
          for (int c = 0; c < 3; ++c) gcp += g_odp[c] * m[s][c];
          ga[s] += gcp * conc[s];
          gb[s] += gcp;
          g_conc[s] = gcp * a[s];
        }
        if (gx) {
          float* gxi = gx + static_cast<std::size_t>(img) * 3 * hw;
          for (int c = 0; c < 3; ++c) {
            double g_od = 0.0;
            for (int s = 0; s < 3; ++s) g_od += g_conc[s] * minv[c][s];
            gxi[c * hw + i] += static_cast<float>(-g_od / (kLn10 * p[c]));
          }
        }
      }
    }
    gr.accumulate(alpha, Tensor(gr.value(alpha).shape(), {static_cast<float>(ga[0]), static_cast<float>(ga[1]),
                                                          static_cast<float>(ga[2])}));
    gr.accumulate(beta, Tensor(gr.value(beta).shape(), {static_cast<float>(gb[0]), static_cast<float>(gb[1]),
                                                        static_cast<float>(gb[2])}));
  });
}

Var additive(Graph& g, Var x, Var delta) {
  const Tensor& vx = g.value(x);
  const Tensor& vd = g.value(delta);
  require(vx.rank() == 4, "additive: expected a batch");
  const std::size_t per = vx.numel() / static_cast<std::size_t>(vx.dim(0));
  require(vd.numel() == per, "additive: perturbation shape " + shape_str(vd.shape()) +
                                 " does not match image shape " + shape_str(vx.shape()));
  Tensor out = vx;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i] + vd[i % per], 0.0f, 1.0f);
  return g.record(std::move(out), {x, delta}, [x, delta, per](Graph& gr, const Tensor& go) {
    gr.accumulate(x, go);
    if (float* gd = gr.grad_buffer(delta))
      for (std::size_t i = 0; i < go.numel(); ++i) gd[i % per] += go[i];
  });
}

Var blur(Graph& g, Var x, Var sigma, int radius) {
  Var kernel = gaussian_kernel(g, sigma, radius);
  return clamp01_ste(g, depthwise_conv2d(g, x, kernel, true));
}

const std::array<int, 64>& base_quant_table(bool chroma) {
  static const std::array<int, 64> luma = {
      16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24,  40, 57,
      69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55, 64,
      81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  static const std::array<int, 64> chrom = [] {
    std::array<int, 64> t{};
    t.fill(99);
    const int head[4][4] = {{17, 18, 24, 47}, {18, 21, 26, 66}, {24, 26, 56, 99}, {47, 66, 99, 99}};
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) t[r * 8 + c] = head[r][c];
    return t;
  }();
  return chroma ? chrom : luma;
}

namespace {

double quality_scale(double q) { return q < 50.0 ? 5000.0 / q : 200.0 - 2.0 * q; }
double quality_scale_slope(double q) { return q < 50.0 ? -5000.0 / (q * q) : -2.0; }

// Full-range BT.601 on the 0..255 scale; the chroma offsets are applied
// separately so these stay linear.
const Mat3 kRgbToYcc = {{{0.299, 0.587, 0.114}, {-0.168736, -0.331264, 0.5}, {0.5, -0.418688, -0.081312}}};
const Mat3& ycc_to_rgb() {
  static const Mat3 inv = invert(kRgbToYcc);
  return inv;
}

}  // namespace

std::array<float, 64> scaled_quant_table(bool chroma, float quality) {
  const double s = quality_scale(quality);
  std::array<float, 64> out{};
  const auto& base = base_quant_table(chroma);
  for (int i = 0; i < 64; ++i) out[i] = static_cast<float>(std::max(1.0, std::floor((base[i] * s + 50.0) / 100.0)));
  return out;
}

Var jpeg(Graph& g, Var x, Var quality) {
  const Tensor& vx = g.value(x);
  require_rgb_batch(vx, "jpeg");
  const int n = vx.dim(0), h = vx.dim(2), w = vx.dim(3);
  require(h % 8 == 0 && w % 8 == 0,
          "jpeg: image dimensions must be multiples of 8, got " + std::to_string(h) + "x" + std::to_string(w));
  const double q = scalar_of(g, quality, "jpeg quality");
  require(q > 0.0 && q <= 100.0, "jpeg: quality must lie in (0, 100]");
  const double s = quality_scale(q), ds = quality_scale_slope(q);

  // Per-channel-kind table and d(table)/dq; floor and the max(1, .) clamp
  // are both straight-through.
  std::array<std::array<float, 64>, 2> qt{};
  std::array<std::array<double, 64>, 2> dqt{};
  for (int k = 0; k < 2; ++k) {
    const auto& base = base_quant_table(k == 1);
    for (int i = 0; i < 64; ++i) {
      const double raw = (base[i] * s + 50.0) / 100.0;
      qt[k][i] = static_cast<float>(std::max(1.0, std::floor(raw)));
      dqt[k][i] = base[i] * ds / 100.0;
    }
  }

  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const Mat3& to_rgb = ycc_to_rgb();
  Tensor out(vx.shape());
  // d(dequantized coefficient)/dq per coefficient, laid out like the image.
  Tensor dcoef(vx.shape());
  std::vector<float> ycc(3 * hw);
  for (int img = 0; img < n; ++img) {
    const float* src = vx.ptr() + static_cast<std::size_t>(img) * 3 * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      for (int k = 0; k < 3; ++k) {
        double v = 0.0;
        for (int c = 0; c < 3; ++c) v += kRgbToYcc[k][c] * 255.0 * src[c * hw + i];
        ycc[k * hw + i] = static_cast<float>(v + (k == 0 ? -128.0 : 0.0));
      }
    }
    float* dco = dcoef.ptr() + static_cast<std::size_t>(img) * 3 * hw;
    for (int k = 0; k < 3; ++k) {
      const int table = k == 0 ? 0 : 1;
      for (int by = 0; by < h; by += 8)
        for (int bx = 0; bx < w; bx += 8) {
          float block[64];
          for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) block[r * 8 + c] = ycc[k * hw + static_cast<std::size_t>(by + r) * w + bx + c];
          dct8_inplace(block);
          for (int i = 0; i < 64; ++i) {
            const float step = qt[table][i];
            const float u = block[i] / step;
            const float rounded = std::round(u);
            block[i] = step * rounded;
            dco[k * hw + static_cast<std::size_t>(by + i / 8) * w + bx + i % 8] =
                static_cast<float>((rounded - u) * dqt[table][i]);
          }
          idct8_inplace(block);
          for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) ycc[k * hw + static_cast<std::size_t>(by + r) * w + bx + c] = block[r * 8 + c];
        }
    }
    float* dst = out.ptr() + static_cast<std::size_t>(img) * 3 * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const double yv = ycc[i] + 128.0;
      for (int c = 0; c < 3; ++c) {
        const double v = to_rgb[c][0] * yv + to_rgb[c][1] * ycc[hw + i] + to_rgb[c][2] * ycc[2 * hw + i];
        dst[c * hw + i] = static_cast<float>(std::clamp(v / 255.0, 0.0, 1.0));
      }
    }
  }
  return g.record(std::move(out), {x, quality}, [=, dcoef = std::move(dcoef)](Graph& gr, const Tensor& go) {
    // Straight-through rounding: the pixel path is the identity.
    gr.accumulate(x, go);
    if (!gr.requires_grad(quality)) return;
    const Mat3& rgb = ycc_to_rgb();
    double acc = 0.0;
    std::vector<float> gycc(3 * hw);
    for (int img = 0; img < n; ++img) {
      const float* gop = go.ptr() + static_cast<std::size_t>(img) * 3 * hw;
      for (std::size_t i = 0; i < hw; ++i)
        for (int k = 0; k < 3; ++k) {
          double v = 0.0;
          for (int c = 0; c < 3; ++c) v += rgb[c][k] * gop[c * hw + i] / 255.0;
          gycc[k * hw + i] = static_cast<float>(v);
        }
      const float* dco = dcoef.ptr() + static_cast<std::size_t>(img) * 3 * hw;
      for (int k = 0; k < 3; ++k)
        for (int by = 0; by < h; by += 8)
          for (int bx = 0; bx < w; bx += 8) {
            float block[64];
            for (int r = 0; r < 8; ++r)
              for (int c = 0; c < 8; ++c) block[r * 8 + c] = gycc[k * hw + static_cast<std::size_t>(by + r) * w + bx + c];
            // Adjoint of the orthonormal inverse DCT is the forward DCT.
            dct8_inplace(block);
            for (int i = 0; i < 64; ++i)
              acc += static_cast<double>(block[i]) * dco[k * hw + static_cast<std::size_t>(by + i / 8) * w + bx + i % 8];
          }
    }
    gr.accumulate(quality, Tensor(gr.value(quality).shape(), static_cast<float>(acc)));
  });
}

namespace {

// Constant grid resampling [H,W] onto [ho,wo] with half-pixel centers.
Tensor resample_grid(int n, int h, int w, int ho, int wo) {
  Tensor grid(Shape{n, ho, wo, 2});
  const double sx = static_cast<double>(w) / wo, sy = static_cast<double>(h) / ho;
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < ho; ++y)
      for (int x = 0; x < wo; ++x) {
        const std::size_t i = ((static_cast<std::size_t>(b) * ho + y) * wo + x) * 2;
        grid[i] = static_cast<float>((x + 0.5) * sx);
        grid[i + 1] = static_cast<float>((y + 0.5) * sy);
      }
  return grid;
}

}  // namespace

Var resolution(Graph& g, Var x, float scale) {
  const Tensor& vx = g.value(x);
  require(vx.rank() == 4, "resolution: expected a batch");
  const int n = vx.dim(0), h = vx.dim(2), w = vx.dim(3);
  const int hs = std::max(1, static_cast<int>(std::lround(scale * h)));
  const int ws = std::max(1, static_cast<int>(std::lround(scale * w)));
  if (hs == h && ws == w) return x;
  Var down = bilinear_sample(g, x, g.constant(resample_grid(n, h, w, hs, ws)));
  Var up = bilinear_sample(g, down, g.constant(resample_grid(n, hs, ws, h, w)));
  return clamp01_ste(g, up);
}

Var brightness_contrast(Graph& g, Var x, Var contrast, Var brightness) {
  const float a = scalar_of(g, contrast, "contrast");
  const float b = scalar_of(g, brightness, "brightness");
  Tensor out = g.value(x);
  for (float& v : out.data()) v = std::clamp(a * v + b, 0.0f, 1.0f);
  return g.record(std::move(out), {x, contrast, brightness}, [=](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    double ga = 0.0, gb = 0.0;
    for (std::size_t i = 0; i < go.numel(); ++i) {
      ga += static_cast<double>(go[i]) * xv[i];
      gb += go[i];
    }
    gr.accumulate(contrast, Tensor(gr.value(contrast).shape(), static_cast<float>(ga)));
    gr.accumulate(brightness, Tensor(gr.value(brightness).shape(), static_cast<float>(gb)));
    if (float* gx = gr.grad_buffer(x))
      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += a * go[i];
  });
}

Var affine_grid(Graph& g, Var rotation, Var tx, Var ty, Var zoom, int n, int h, int w) {
  const float phi = scalar_of(g, rotation, "rotation");
  const float tsx = scalar_of(g, tx, "tx");
  const float tsy = scalar_of(g, ty, "ty");
  const float z = scalar_of(g, zoom, "zoom");
  require(z > 0.0f, "affine: zoom must be positive");
  const float c = std::cos(phi), s = std::sin(phi);
  const float cx = 0.5f * static_cast<float>(w), cy = 0.5f * static_cast<float>(h);
  Tensor grid(Shape{n, h, w, 2});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float dx = (static_cast<float>(x) + 0.5f - cx) - tsx;
        const float dy = (static_cast<float>(y) + 0.5f - cy) - tsy;
        const std::size_t i = ((static_cast<std::size_t>(b) * h + y) * w + x) * 2;
        grid[i] = (c * dx + s * dy) / z + cx;
        grid[i + 1] = (-s * dx + c * dy) / z + cy;
      }
  return g.record(std::move(grid), {rotation, tx, ty, zoom}, [=](Graph& gr, const Tensor& go) {
    double gphi = 0, gtx = 0, gty = 0, gz = 0;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dx = (x + 0.5 - cx) - tsx;
          const double dy = (y + 0.5 - cy) - tsy;
          const std::size_t i = ((static_cast<std::size_t>(b) * h + y) * w + x) * 2;
          const double gsx = go[i], gsy = go[i + 1];
          const double rx = c * dx + s * dy, ry = -s * dx + c * dy;
          gphi += gsx * (-s * dx + c * dy) / z + gsy * (-c * dx - s * dy) / z;
          gtx += gsx * (-c / z) + gsy * (s / z);
          gty += gsx * (-s / z) + gsy * (-c / z);
          gz += -(gsx * rx + gsy * ry) / (static_cast<double>(z) * z);
        }
    gr.accumulate(rotation, Tensor(gr.value(rotation).shape(), static_cast<float>(gphi)));
    gr.accumulate(tx, Tensor(gr.value(tx).shape(), static_cast<float>(gtx)));
    gr.accumulate(ty, Tensor(gr.value(ty).shape(), static_cast<float>(gty)));
    gr.accumulate(zoom, Tensor(gr.value(zoom).shape(), static_cast<float>(gz)));
  });
}

namespace {

// Reflects v into [0, extent] and records the derivative sign.
double reflect(double v, int extent, double& sign) {
  const double e = extent;
  sign = 1.0;
  if (v >= 0.0 && v <= e) return v;
  double m = std::fmod(v, 2.0 * e);
  if (m < 0.0) m += 2.0 * e;
  if (m > e) {
    m = 2.0 * e - m;
    sign = -1.0;
  }
  return m;
}

struct WarpTap {
  int x0, x1, y0, y1;
  double fx, fy, sx, sy;
  double dx, dy;  // offsets from the center, before rotation and zoom
};

}  // namespace

// Grid construction and sampling in one op; parameter gradients reduce in double.
Var affine(Graph& g, Var x, Var rotation, Var tx, Var ty, Var zoom) {
  const Tensor& vx = g.value(x);
  require(vx.rank() == 4, "affine: expected a batch");
  const double phi = scalar_of(g, rotation, "rotation");
  const double tsx = scalar_of(g, tx, "tx");
  const double tsy = scalar_of(g, ty, "ty");
  const double z = scalar_of(g, zoom, "zoom");
  require(z > 0.0, "affine: zoom must be positive");
  const int n = vx.dim(0), ch = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  const double c = std::cos(phi), s = std::sin(phi), cx = 0.5 * w, cy = 0.5 * h;

  std::vector<WarpTap> taps(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      WarpTap& t = taps[static_cast<std::size_t>(y) * w + xx];
      t.dx = (xx + 0.5 - cx) - tsx;
      t.dy = (y + 0.5 - cy) - tsy;
      const double ux = reflect((c * t.dx + s * t.dy) / z + cx, w, t.sx) - 0.5;
      const double uy = reflect((-s * t.dx + c * t.dy) / z + cy, h, t.sy) - 0.5;
      const double flx = std::floor(ux), fly = std::floor(uy);
      t.fx = ux - flx;
      t.fy = uy - fly;
      t.x0 = std::clamp(static_cast<int>(flx), 0, w - 1);
      t.x1 = std::clamp(static_cast<int>(flx) + 1, 0, w - 1);
      t.y0 = std::clamp(static_cast<int>(fly), 0, h - 1);
      t.y1 = std::clamp(static_cast<int>(fly) + 1, 0, h - 1);
    }

  Tensor out(vx.shape());
  for (int p = 0; p < n * ch; ++p) {
    const float* plane = vx.ptr() + static_cast<std::size_t>(p) * h * w;
    float* dst = out.ptr() + static_cast<std::size_t>(p) * h * w;
    for (std::size_t i = 0; i < taps.size(); ++i) {
      const WarpTap& t = taps[i];
      const double top = plane[t.y0 * w + t.x0] * (1.0 - t.fx) + plane[t.y0 * w + t.x1] * t.fx;
      const double bot = plane[t.y1 * w + t.x0] * (1.0 - t.fx) + plane[t.y1 * w + t.x1] * t.fx;
      dst[i] = static_cast<float>(top * (1.0 - t.fy) + bot * t.fy);
    }
  }

  Var warped = g.record(std::move(out), {x, rotation, tx, ty, zoom}, [=, taps = std::move(taps)](Graph& gr,
                                                                                                 const Tensor& go) {
    const Tensor& xv = gr.value(x);
    float* gx = gr.grad_buffer(x);
    double gphi = 0, gtx = 0, gty = 0, gz = 0;
    for (int b = 0; b < n; ++b)
      for (std::size_t i = 0; i < taps.size(); ++i) {
        const WarpTap& t = taps[i];
        double dfx = 0, dfy = 0;
        for (int k = 0; k < ch; ++k) {
          const std::size_t base = (static_cast<std::size_t>(b) * ch + k) * h * w;
          const double gout = go[base + i];
          if (gx) {
            gx[base + t.y0 * w + t.x0] += static_cast<float>(gout * (1.0 - t.fx) * (1.0 - t.fy));
            gx[base + t.y0 * w + t.x1] += static_cast<float>(gout * t.fx * (1.0 - t.fy));
            gx[base + t.y1 * w + t.x0] += static_cast<float>(gout * (1.0 - t.fx) * t.fy);
            gx[base + t.y1 * w + t.x1] += static_cast<float>(gout * t.fx * t.fy);
          }
          const float* plane = xv.ptr() + base;
          const double v00 = plane[t.y0 * w + t.x0], v01 = plane[t.y0 * w + t.x1];
          const double v10 = plane[t.y1 * w + t.x0], v11 = plane[t.y1 * w + t.x1];
          dfx += gout * ((v01 - v00) * (1.0 - t.fy) + (v11 - v10) * t.fy);
          dfy += gout * ((v10 - v00) * (1.0 - t.fx) + (v11 - v01) * t.fx);
        }
        const double gsx = dfx * t.sx, gsy = dfy * t.sy;
        const double rx = c * t.dx + s * t.dy, ry = -s * t.dx + c * t.dy;
        gphi += (gsx * ry - gsy * rx) / z;
        gtx += (-gsx * c + gsy * s) / z;
        gty += (-gsx * s - gsy * c) / z;
        gz += -(gsx * rx + gsy * ry) / (z * z);
      }
    gr.accumulate(rotation, Tensor(gr.value(rotation).shape(), static_cast<float>(gphi)));
    gr.accumulate(tx, Tensor(gr.value(tx).shape(), static_cast<float>(gtx)));
    gr.accumulate(ty, Tensor(gr.value(ty).shape(), static_cast<float>(gty)));
    gr.accumulate(zoom, Tensor(gr.value(zoom).shape(), static_cast<float>(gz)));
  });
  return clamp01_ste(g, warped);
}

// ---------------------------------------------------------------------------
// Descriptors

namespace {

ParamSpec scalar_spec(std::string name, float lo, float hi, float neutral) {
  return ParamSpec{std::move(name), Tensor(Shape{1}, lo), Tensor(Shape{1}, hi), Tensor(Shape{1}, neutral)};
}

ParamSpec uniform_spec(std::string name, Shape shape, float lo, float hi, float neutral) {
  return ParamSpec{std::move(name), Tensor(shape, lo), Tensor(shape, hi), Tensor(shape, neutral)};
}

void apply_override(ParamSpec& spec, const BoxOverride& box) {
  require(box.lo <= box.hi, "box for " + spec.name + " has lo > hi");
  const float neutral = box.neutral.value_or(spec.neutral[0]);
  require(box.lo <= neutral && neutral <= box.hi,
          "box [" + std::to_string(box.lo) + ", " + std::to_string(box.hi) + "] for " + spec.name +
              " excludes the neutral value " + std::to_string(neutral));
  const Shape shape = spec.shape();
  spec.lo = Tensor(shape, box.lo);
  spec.hi = Tensor(shape, box.hi);
  spec.neutral = Tensor(shape, neutral);
}

}  // namespace

TransformDescriptor make_transform(TransformKind kind, const TransformOptions& options) {
  TransformDescriptor d;
  d.name_ = std::string(kind_name(kind));
  const std::string p = d.name_ + ".";
  TransformStage stage{kind, 0, 0};
  switch (kind) {
    case TransformKind::stain:
      d.specs_ = {uniform_spec(p + "alpha", {3}, 0.8f, 1.2f, 1.0f), uniform_spec(p + "beta", {3}, -0.2f, 0.2f, 0.0f)};
      break;
    case TransformKind::additive:
      d.specs_ = {uniform_spec(p + "delta", options.image_shape, -kDefaultAdditiveBudget, kDefaultAdditiveBudget, 0.0f)};
      break;
    case TransformKind::blur:
      d.specs_ = {scalar_spec(p + "sigma", kBlurSigmaFloor, 3.0f, kBlurSigmaFloor)};
      d.identity_tolerance_ = 1e-3f;
      break;
    case TransformKind::jpeg:
      d.specs_ = {scalar_spec(p + "quality", 5.0f, 100.0f, 100.0f)};
      d.identity_tolerance_ = 0.02f;
      stage.gradient = GradientKind::surrogate;
      break;
    case TransformKind::resolution:
      d.specs_ = {scalar_spec(p + "scale", 0.25f, 1.0f, 1.0f)};
      stage.gradient = GradientKind::none;
      break;
    case TransformKind::brightness_contrast:
      d.specs_ = {scalar_spec(p + "contrast", 0.7f, 1.3f, 1.0f), scalar_spec(p + "brightness", -0.2f, 0.2f, 0.0f)};
      break;
    case TransformKind::affine:
      d.specs_ = {scalar_spec(p + "rotation", -0.26f, 0.26f, 0.0f), scalar_spec(p + "tx", -4.0f, 4.0f, 0.0f),
                  scalar_spec(p + "ty", -4.0f, 4.0f, 0.0f), scalar_spec(p + "zoom", 0.9f, 1.1f, 1.0f)};
      break;
  }
  for (ParamSpec& spec : d.specs_) {
    if (auto it = options.boxes.find(spec.name); it != options.boxes.end()) apply_override(spec, it->second);
  }
  for (const auto& [name, box] : options.boxes) {
    if (name.rfind(p, 0) != 0) continue;
    const bool known = std::any_of(d.specs_.begin(), d.specs_.end(), [&](const ParamSpec& s) { return s.name == name; });
    require(known, "unknown transform parameter '" + name + "'");
  }
  if (kind == TransformKind::blur) {
    const float sigma_lo = d.specs_[0].lo[0];
    require(sigma_lo >= kBlurSigmaFloor, "blur.sigma lower bound must be at least 1e-3");
    stage.blur_radius = static_cast<int>(std::ceil(3.0f * d.specs_[0].hi[0]));
  }
  if (kind == TransformKind::jpeg) {
    require(d.specs_[0].lo[0] >= 1.0f && d.specs_[0].hi[0] <= 100.0f, "jpeg.quality box must lie within [1, 100]");
  }
  if (kind == TransformKind::resolution) {
    require(d.specs_[0].lo[0] > 0.0f && d.specs_[0].hi[0] <= 1.0f, "resolution.scale box must lie within (0, 1]");
  }
  stage.param_count = d.specs_.size();
  d.stages_ = {stage};
  return d;
}

TransformDescriptor compose(std::span<const TransformDescriptor> parts) {
  require(!parts.empty(), "compose: empty transform list");
  TransformDescriptor d;
  for (const TransformDescriptor& part : parts) {
    if (!d.name_.empty()) d.name_ += "+";
    d.name_ += part.name_;
    const std::size_t offset = d.specs_.size();
    for (TransformStage st : part.stages_) {
      st.first_param += offset;
      d.stages_.push_back(st);
    }
    d.specs_.insert(d.specs_.end(), part.specs_.begin(), part.specs_.end());
    d.identity_tolerance_ += part.identity_tolerance_;
  }
  return d;
}

bool TransformDescriptor::differentiable() const {
  return std::none_of(stages_.begin(), stages_.end(),
                      [](const TransformStage& s) { return s.gradient == GradientKind::none; });
}

bool TransformDescriptor::exact_gradient() const {
  return std::all_of(stages_.begin(), stages_.end(),
                     [](const TransformStage& s) { return s.gradient == GradientKind::exact; });
}

ParamVector TransformDescriptor::neutral() const {
  ParamVector out;
  for (const ParamSpec& s : specs_) out.push_back(s.neutral);
  return out;
}

ParamVector TransformDescriptor::widths() const {
  ParamVector out;
  for (const ParamSpec& s : specs_) {
    Tensor wdt = s.hi;
    for (std::size_t i = 0; i < wdt.numel(); ++i) wdt[i] -= s.lo[i];
    out.push_back(std::move(wdt));
  }
  return out;
}

void TransformDescriptor::check(const ParamVector& theta) const {
  require(theta.size() == specs_.size(), name_ + ": expected " + std::to_string(specs_.size()) +
                                             " parameter tensors, got " + std::to_string(theta.size()));
  for (std::size_t i = 0; i < specs_.size(); ++i)
    require(theta[i].shape() == specs_[i].shape(), specs_[i].name + ": expected shape " +
                                                       shape_str(specs_[i].shape()) + ", got " +
                                                       shape_str(theta[i].shape()));
}

ParamVector TransformDescriptor::project(const ParamVector& theta) const {
  check(theta);
  ParamVector out = theta;
  for (std::size_t i = 0; i < specs_.size(); ++i)
    for (std::size_t j = 0; j < out[i].numel(); ++j) out[i][j] = std::clamp(out[i][j], specs_[i].lo[j], specs_[i].hi[j]);
  return out;
}

bool TransformDescriptor::in_box(const ParamVector& theta) const {
  check(theta);
  for (std::size_t i = 0; i < specs_.size(); ++i)
    for (std::size_t j = 0; j < theta[i].numel(); ++j)
      if (!(theta[i][j] >= specs_[i].lo[j] && theta[i][j] <= specs_[i].hi[j])) return false;
  return true;
}

Var TransformDescriptor::apply(Graph& g, Var images, std::span<const Var> params) const {
  require(params.size() == specs_.size(), name_ + ": parameter count mismatch");
  Var x = images;
  for (const TransformStage& st : stages_) {
    auto prm = [&](std::size_t k) { return params[st.first_param + k]; };
    switch (st.kind) {
      case TransformKind::stain: x = stain(g, x, prm(0), prm(1)); break;
      case TransformKind::additive: x = additive(g, x, prm(0)); break;
      case TransformKind::blur: x = blur(g, x, prm(0), st.blur_radius); break;
      case TransformKind::jpeg: x = jpeg(g, x, prm(0)); break;
      case TransformKind::resolution: x = resolution(g, x, g.value(prm(0))[0]); break;
      case TransformKind::brightness_contrast: x = brightness_contrast(g, x, prm(0), prm(1)); break;
      case TransformKind::affine: x = affine(g, x, prm(0), prm(1), prm(2), prm(3)); break;
    }
  }
  return x;
}

Tensor TransformDescriptor::apply(const Tensor& images, const ParamVector& theta) const {
  check(theta);
  const bool single = images.rank() == 3;
  Graph g;
  Shape batch_shape = images.shape();
  if (single) batch_shape.insert(batch_shape.begin(), 1);
  Var x = g.constant(images.reshaped(batch_shape));
  std::vector<Var> params;
  for (const Tensor& t : theta) params.push_back(g.constant(t));
  Tensor out = g.value(apply(g, x, params));
  return single ? out.reshaped(images.shape()) : out;
}

}  // namespace reet

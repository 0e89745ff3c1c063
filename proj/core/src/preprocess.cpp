#include "mmfuse/preprocess.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

#include "mmfuse/error.hpp"

namespace mmfuse {

namespace {

// Solves (W + smoothness * D2^T D2) b = W y with D2 the (n-2) x n second
// difference, via banded LDL^T at bandwidth 2. w holds the current weights.
std::vector<double> solve_weighted(const std::vector<double>& y, const std::vector<double>& w,
                                   double smoothness) {
  int64_t n = int64_t(y.size());
  std::vector<double> d0(static_cast<size_t>(n), 0.0);
  std::vector<double> d1(static_cast<size_t>(n > 0 ? n - 1 : 0), 0.0);
  std::vector<double> d2(static_cast<size_t>(n > 1 ? n - 2 : 0), 0.0);
  for (int64_t k = 0; k + 2 < n; ++k) {
    d0[size_t(k)] += smoothness;
    d0[size_t(k + 1)] += 4 * smoothness;
    d0[size_t(k + 2)] += smoothness;
    d1[size_t(k)] += -2 * smoothness;
    d1[size_t(k + 1)] += -2 * smoothness;
    d2[size_t(k)] += smoothness;
  }
  std::vector<double> rhs(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    d0[size_t(i)] += w[size_t(i)];
    rhs[size_t(i)] = w[size_t(i)] * y[size_t(i)];
  }

  std::vector<double> diag(static_cast<size_t>(n));
  std::vector<double> e1(static_cast<size_t>(n), 0.0);
  std::vector<double> e2(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double di = d0[size_t(i)];
    if (i >= 1) di -= e1[size_t(i - 1)] * e1[size_t(i - 1)] * diag[size_t(i - 1)];
    if (i >= 2) di -= e2[size_t(i - 2)] * e2[size_t(i - 2)] * diag[size_t(i - 2)];
    diag[size_t(i)] = di;
    if (i + 1 < n) {
      double v = d1[size_t(i)];
      if (i >= 1) v -= e2[size_t(i - 1)] * e1[size_t(i - 1)] * diag[size_t(i - 1)];
      e1[size_t(i)] = v / di;
    }
    if (i + 2 < n) e2[size_t(i)] = d2[size_t(i)] / di;
  }

  std::vector<double> z(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double v = rhs[size_t(i)];
    if (i >= 1) v -= e1[size_t(i - 1)] * z[size_t(i - 1)];
    if (i >= 2) v -= e2[size_t(i - 2)] * z[size_t(i - 2)];
    z[size_t(i)] = v;
  }
  for (int64_t i = 0; i < n; ++i) z[size_t(i)] /= diag[size_t(i)];
  for (int64_t i = n - 1; i >= 0; --i) {
    if (i + 1 < n) z[size_t(i)] -= e1[size_t(i)] * z[size_t(i + 1)];
    if (i + 2 < n) z[size_t(i)] -= e2[size_t(i)] * z[size_t(i + 2)];
  }
  return z;
}

}  // namespace

std::vector<double> als_baseline(const std::vector<double>& y, double smoothness,
                                 double asymmetry, int iters) {
  if (!(smoothness > 0) || !(asymmetry > 0 && asymmetry < 1) || iters < 1)
    throw ConfigError("als_baseline: need smoothness>0, asymmetry in (0,1), iters>=1");
  for (double v : y)
    if (!std::isfinite(v)) throw DataError("als_baseline: non-finite input sample");
  std::vector<double> w(y.size(), 1.0);
  std::vector<double> b;
  for (int it = 0; it < iters; ++it) {
    b = solve_weighted(y, w, smoothness);
    for (size_t i = 0; i < y.size(); ++i)
      w[i] = y[i] > b[i] ? asymmetry : 1.0 - asymmetry;
  }
  return b;
}

void remove_baseline(SignalRecord& rec, double smoothness, double asymmetry, int iters) {
  int64_t c = rec.samples.dim(0), t = rec.samples.dim(1);
  float* p = rec.samples.data();
  std::vector<double> lead(static_cast<size_t>(t));
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < t; ++i) lead[size_t(i)] = double(p[ch * t + i]);
    std::vector<double> base = als_baseline(lead, smoothness, asymmetry, iters);
    for (int64_t i = 0; i < t; ++i) p[ch * t + i] = float(lead[size_t(i)] - base[size_t(i)]);
  }
}

void normalize_lead_groups(SignalRecord& rec) {
  if (rec.samples.dim(0) != 12)
    throw DataError("normalize_lead_groups: expects 12 leads, got " + std::to_string(rec.samples.dim(0)));
  int64_t t = rec.samples.dim(1);
  float* p = rec.samples.data();
  const int64_t bounds[4] = {0, 3, 6, 12};
  for (int g = 0; g < 3; ++g) {
    int64_t lo = bounds[g], hi = bounds[g + 1];
    double mean = 0;
    int64_t count = (hi - lo) * t;
    for (int64_t ch = lo; ch < hi; ++ch)
      for (int64_t i = 0; i < t; ++i) mean += double(p[ch * t + i]);
    mean /= double(count);
    double var = 0;
    for (int64_t ch = lo; ch < hi; ++ch)
      for (int64_t i = 0; i < t; ++i) {
        double d = double(p[ch * t + i]) - mean;
        var += d * d;
      }
    var /= double(count);
    if (var < 1e-24) {
      for (int64_t ch = lo; ch < hi; ++ch)
        for (int64_t i = 0; i < t; ++i) p[ch * t + i] = 0.f;
    } else {
      double inv = 1.0 / std::sqrt(var);
      for (int64_t ch = lo; ch < hi; ++ch)
        for (int64_t i = 0; i < t; ++i) p[ch * t + i] = float((double(p[ch * t + i]) - mean) * inv);
    }
  }
}

namespace {

// FFTW plan creation is not thread-safe and planning is costly relative to a
// 1k-point transform; plans are cached per length behind a mutex and executed
// on fftw_malloc'd per-call buffers via the new-array interface.
struct FftPlans {
  fftw_plan fwd;
  fftw_plan inv;
};

FftPlans& plans_for(int64_t t) {
  static std::mutex mu;
  static std::map<int64_t, FftPlans> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(t);
  if (it != cache.end()) return it->second;
  double* re = fftw_alloc_real(size_t(t));
  fftw_complex* cx = fftw_alloc_complex(size_t(t / 2 + 1));
  FftPlans p;
  p.fwd = fftw_plan_dft_r2c_1d(int(t), re, cx, FFTW_ESTIMATE);
  p.inv = fftw_plan_dft_c2r_1d(int(t), cx, re, FFTW_ESTIMATE);
  fftw_free(re);
  fftw_free(cx);
  return cache.emplace(t, p).first->second;
}

}  // namespace

Tensor<float> fourier_surrogate(const Tensor<float>& samples, double magnitude, Rng& rng) {
  if (magnitude < 0) throw ConfigError("fourier_surrogate: magnitude must be >= 0");
  if (magnitude == 0) return samples;
  int64_t c = samples.dim(0), t = samples.dim(1);
  FftPlans& plans = plans_for(t);
  double* re = fftw_alloc_real(size_t(t));
  fftw_complex* cx = fftw_alloc_complex(size_t(t / 2 + 1));
  Tensor<float> out = Tensor<float>::zeros(samples.shape());
  const float* src = samples.data();
  float* dst = out.data();
  // Bins 1 .. last strictly-below-Nyquist; DC and (even t) Nyquist keep their
  // phase so the inverse transform stays real.
  int64_t hi = (t % 2 == 0) ? t / 2 - 1 : (t - 1) / 2;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < t; ++i) re[i] = double(src[ch * t + i]);
    fftw_execute_dft_r2c(plans.fwd, re, cx);
    for (int64_t k = 1; k <= hi; ++k) {
      double delta = rng.uniform(-magnitude * std::numbers::pi, magnitude * std::numbers::pi);
      double cd = std::cos(delta), sd = std::sin(delta);
      double a = cx[k][0], b = cx[k][1];
      cx[k][0] = a * cd - b * sd;
      cx[k][1] = a * sd + b * cd;
    }
    fftw_execute_dft_c2r(plans.inv, cx, re);
    for (int64_t i = 0; i < t; ++i) dst[ch * t + i] = float(re[i] / double(t));
  }
  fftw_free(re);
  fftw_free(cx);
  return out;
}

Tensor<float> amplitude_rescale(const Tensor<float>& samples, double amp_sigma, Rng& rng) {
  if (amp_sigma < 0) throw ConfigError("amplitude_rescale: sigma must be >= 0");
  if (amp_sigma == 0) return samples;
  double factor = std::clamp(1.0 + amp_sigma * rng.normal(), 0.1, 2.0);
  Tensor<float> out = Tensor<float>::zeros(samples.shape());
  const float* src = samples.data();
  float* dst = out.data();
  for (int64_t i = 0; i < samples.numel(); ++i) dst[i] = float(double(src[i]) * factor);
  return out;
}

Tensor<float> gaussian_noise(const Tensor<float>& samples, double noise_sigma, Rng& rng) {
  if (noise_sigma < 0) throw ConfigError("gaussian_noise: sigma must be >= 0");
  if (noise_sigma == 0) return samples;
  Tensor<float> out = Tensor<float>::zeros(samples.shape());
  const float* src = samples.data();
  float* dst = out.data();
  for (int64_t i = 0; i < samples.numel(); ++i)
    dst[i] = float(double(src[i]) + noise_sigma * rng.normal());
  return out;
}

Tensor<float> random_crop_resize(const Tensor<float>& samples, double crop_scale, Rng& rng) {
  if (!(crop_scale > 0 && crop_scale <= 1))
    throw ConfigError("random_crop_resize: crop_scale must be in (0,1]");
  int64_t c = samples.dim(0), t = samples.dim(1);
  int64_t len = int64_t(std::ceil(crop_scale * double(t)));
  int64_t start = int64_t(rng.uniform_int(uint64_t(t - len + 1)));
  Tensor<float> out = Tensor<float>::zeros(samples.shape());
  const float* src = samples.data();
  float* dst = out.data();
  double step = t > 1 ? double(len - 1) / double(t - 1) : 0.0;
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < t; ++i) {
      double pos = double(start) + double(i) * step;
      int64_t lo = int64_t(std::floor(pos));
      int64_t hi2 = std::min(lo + 1, t - 1);
      double frac = pos - double(lo);
      dst[ch * t + i] =
          float((1.0 - frac) * double(src[ch * t + lo]) + frac * double(src[ch * t + hi2]));
    }
  return out;
}

Tensor<float> augment_signal(const Tensor<float>& samples, const AugmentationConfig& cfg, Rng& rng) {
  Tensor<float> x = samples;
  if (cfg.crop_scale < 1.0) x = random_crop_resize(x, cfg.crop_scale, rng);
  x = amplitude_rescale(x, cfg.amp_sigma, rng);
  x = gaussian_noise(x, cfg.noise_sigma, rng);
  x = fourier_surrogate(x, cfg.phase_noise_magnitude, rng);
  return x;
}

Tensor<float> prepare_image(const Tensor<float>& raw, int64_t target) {
  if (raw.rank() != 3 || raw.dim(0) != 3)
    throw DataError("prepare_image: expects [3,h,w], got " + shape_str(raw.shape()));
  int64_t h = raw.dim(1), w = raw.dim(2);
  if (h > target || w > target) throw DataError("prepare_image: input larger than target size");
  int64_t top = (target - h) / 2, left = (target - w) / 2;
  Tensor<float> out = Tensor<float>::zeros({3, target, target});
  float mn = raw.data()[0], mx = raw.data()[0];
  for (int64_t i = 0; i < raw.numel(); ++i) {
    mn = std::min(mn, raw.data()[i]);
    mx = std::max(mx, raw.data()[i]);
  }
  float range = mx - mn;
  if (range <= 0) return out;
  const float* src = raw.data();
  float* dst = out.data();
  for (int64_t ch = 0; ch < 3; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        dst[(ch * target + top + y) * target + left + x] = (src[(ch * h + y) * w + x] - mn) / range;
  return out;
}

Tensor<float> hflip_image(const Tensor<float>& pixels) {
  int64_t c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  Tensor<float> out = Tensor<float>::zeros(pixels.shape());
  const float* src = pixels.data();
  float* dst = out.data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) dst[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

namespace {

float sample_bilinear(const float* plane, int64_t h, int64_t w, double y, double x) {
  if (y <= -1 || y >= double(h) || x <= -1 || x >= double(w)) return 0.f;
  int64_t y0 = int64_t(std::floor(y)), x0 = int64_t(std::floor(x));
  double fy = y - double(y0), fx = x - double(x0);
  auto at = [&](int64_t yy, int64_t xx) -> double {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return double(plane[yy * w + xx]);
  };
  double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
             fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
  return float(v);
}

}  // namespace

Tensor<float> rotate_image(const Tensor<float>& pixels, double degrees) {
  int64_t c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  double theta = degrees * std::numbers::pi / 180.0;
  double ct = std::cos(theta), st = std::sin(theta);
  double cy = double(h - 1) / 2.0, cx = double(w - 1) / 2.0;
  Tensor<float> out = Tensor<float>::zeros(pixels.shape());
  const float* src = pixels.data();
  float* dst = out.data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double dy = double(y) - cy, dx = double(x) - cx;
        double sy = cy + dy * ct - dx * st;
        double sx = cx + dy * st + dx * ct;
        dst[(ch * h + y) * w + x] = sample_bilinear(src + ch * h * w, h, w, sy, sx);
      }
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& pixels, int64_t oh, int64_t ow) {
  int64_t c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  Tensor<float> out = Tensor<float>::zeros({c, oh, ow});
  const float* src = pixels.data();
  float* dst = out.data();
  double sy = oh > 1 ? double(h - 1) / double(oh - 1) : 0.0;
  double sx = ow > 1 ? double(w - 1) / double(ow - 1) : 0.0;
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x)
        dst[(ch * oh + y) * ow + x] =
            sample_bilinear(src + ch * h * w, h, w, double(y) * sy, double(x) * sx);
  return out;
}

Tensor<float> augment_image(const Tensor<float>& pixels, const AugmentationConfig& cfg, Rng& rng) {
  Tensor<float> x = pixels;
  int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (cfg.flip_prob > 0 && rng.uniform() < cfg.flip_prob) x = hflip_image(x);
  if (cfg.rot_prob > 0 && rng.uniform() < cfg.rot_prob)
    x = rotate_image(x, rng.uniform(-cfg.rot_degrees, cfg.rot_degrees));

  bool jitter = cfg.jitter_brightness > 0 || cfg.jitter_contrast > 0 || cfg.jitter_saturation > 0;
  if (jitter) {
    double fb = rng.uniform(std::max(0.0, 1.0 - cfg.jitter_brightness), 1.0 + cfg.jitter_brightness);
    double fc = rng.uniform(std::max(0.0, 1.0 - cfg.jitter_contrast), 1.0 + cfg.jitter_contrast);
    double fs = rng.uniform(std::max(0.0, 1.0 - cfg.jitter_saturation), 1.0 + cfg.jitter_saturation);
    Tensor<float> jit = x.clone();
    float* p = jit.data();
    int64_t plane = h * w;
    // Per-pixel channel mean stands in for grayscale on phase channels;
    // statistics are recomputed between the sequential factor applications.
    auto channel_mean = [&](std::vector<double>& gray) {
      gray.assign(static_cast<size_t>(plane), 0.0);
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < plane; ++i) gray[size_t(i)] += double(p[ch * plane + i]) / double(c);
    };
    for (int64_t i = 0; i < c * plane; ++i) p[i] = float(double(p[i]) * fb);
    std::vector<double> gray;
    channel_mean(gray);
    double gray_mean = 0;
    for (double g : gray) gray_mean += g;
    gray_mean /= double(plane);
    for (int64_t i = 0; i < c * plane; ++i)
      p[i] = float((double(p[i]) - gray_mean) * fc + gray_mean);
    channel_mean(gray);
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < plane; ++i) {
        double v = (double(p[ch * plane + i]) - gray[size_t(i)]) * fs + gray[size_t(i)];
        p[ch * plane + i] = float(std::clamp(v, 0.0, 1.0));
      }
    x = jit;
  }

  if (cfg.crop_area_lo < 1.0 || cfg.crop_area_hi < 1.0) {
    if (!(cfg.crop_area_lo > 0 && cfg.crop_area_lo <= cfg.crop_area_hi && cfg.crop_area_hi <= 1.0))
      throw ConfigError("augment_image: crop area range must satisfy 0 < lo <= hi <= 1");
    double area = rng.uniform(cfg.crop_area_lo, cfg.crop_area_hi);
    int64_t side = std::clamp(int64_t(std::lround(std::sqrt(area) * double(h))), int64_t(1), h);
    int64_t top = int64_t(rng.uniform_int(uint64_t(h - side + 1)));
    int64_t left = int64_t(rng.uniform_int(uint64_t(w - side + 1)));
    Tensor<float> cropped = Tensor<float>::zeros({c, side, side});
    const float* src = x.data();
    float* dst = cropped.data();
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < side; ++y)
        for (int64_t xx = 0; xx < side; ++xx)
          dst[(ch * side + y) * side + xx] = src[(ch * h + top + y) * w + left + xx];
    x = resize_bilinear(cropped, h, w);
  }
  return x;
}

}  // namespace mmfuse

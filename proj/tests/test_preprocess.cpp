#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "mmfuse/error.hpp"
#include "mmfuse/preprocess.hpp"
#include "mmfuse/record.hpp"
#include "mmfuse/rng.hpp"

using namespace mmfuse;

namespace {

// Same iteration as als_baseline, but the pentadiagonal system is assembled
// and solved densely; an independent path to the identical fixed point.
std::vector<double> dense_als(const std::vector<double>& y, double smoothness, double asymmetry,
                              int iters) {
  int64_t n = int64_t(y.size());
  Eigen::MatrixXd dtd = Eigen::MatrixXd::Zero(n, n);
  for (int64_t k = 0; k + 2 < n; ++k) {
    Eigen::VectorXd row = Eigen::VectorXd::Zero(n);
    row[k] = 1;
    row[k + 1] = -2;
    row[k + 2] = 1;
    dtd += row * row.transpose();
  }
  Eigen::VectorXd yv(n);
  for (int64_t i = 0; i < n; ++i) yv[i] = y[size_t(i)];
  Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  Eigen::VectorXd b(n);
  for (int it = 0; it < iters; ++it) {
    Eigen::MatrixXd a = smoothness * dtd;
    a.diagonal() += w;
    b = a.ldlt().solve(w.cwiseProduct(yv).matrix());
    for (int64_t i = 0; i < n; ++i) w[i] = yv[i] > b[i] ? asymmetry : 1.0 - asymmetry;
  }
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[size_t(i)] = b[i];
  return out;
}

SignalRecord make_record(int64_t c, int64_t t, uint64_t seed) {
  Rng rng(seed);
  SignalRecord rec;
  rec.subject_id = "subj";
  rec.samples = Tensor<float>::randn({c, t}, rng, 1.f);
  rec.sampling_hz = 100;
  return rec;
}

}  // namespace

TEST_SUITE("preprocess") {

TEST_CASE("als baseline of a constant signal is the constant") {
  std::vector<double> y(400, 3.25);
  auto b = als_baseline(y, 1e7, 0.05, 10);
  for (double v : b) CHECK(v == doctest::Approx(3.25).epsilon(1e-6));
}

TEST_CASE("als rejects bad parameters and non-finite input") {
  std::vector<double> y(16, 0.0);
  CHECK_THROWS_AS(als_baseline(y, 0.0, 0.05, 10), ConfigError);
  CHECK_THROWS_AS(als_baseline(y, 1e7, 0.0, 10), ConfigError);
  CHECK_THROWS_AS(als_baseline(y, 1e7, 1.0, 10), ConfigError);
  CHECK_THROWS_AS(als_baseline(y, 1e7, 0.05, 0), ConfigError);
  y[7] = std::nan("");
  CHECK_THROWS_AS(als_baseline(y, 1e7, 0.05, 10), DataError);
}

TEST_CASE("als banded solver agrees with a dense direct solve") {
  const int64_t t = 500;
  Rng rng(21);
  std::vector<double> y(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) {
    y[size_t(i)] = std::sin(2 * std::numbers::pi * double(i) / double(t));
    if (rng.uniform() < 0.02) y[size_t(i)] += 1.0;
  }
  auto banded = als_baseline(y, 1e5, 0.05, 10);
  auto dense = dense_als(y, 1e5, 0.05, 10);
  for (int64_t i = 0; i < t; ++i)
    CHECK(banded[size_t(i)] == doctest::Approx(dense[size_t(i)]).epsilon(1e-8));
}

TEST_CASE("als recovers a slow sinusoid under zero-mean spikes") {
  const int64_t t = 5000;
  Rng rng(22);
  std::vector<double> y(static_cast<size_t>(t));
  double spike_mean = 0;
  std::vector<double> spikes(static_cast<size_t>(t), 0.0);
  for (int64_t i = 0; i < t; ++i)
    if (rng.uniform() < 0.01) {
      spikes[size_t(i)] = 1.0;
      spike_mean += 1.0;
    }
  spike_mean /= double(t);
  for (int64_t i = 0; i < t; ++i) {
    y[size_t(i)] =
        std::sin(2 * std::numbers::pi * double(i) / double(t)) + spikes[size_t(i)] - spike_mean;
  }
  auto b = als_baseline(y, 1e7, 0.05, 10);
  double worst = 0;
  for (int64_t i = 0; i < t; ++i)
    worst = std::max(worst,
                     std::abs(b[size_t(i)] - (std::sin(2 * std::numbers::pi * double(i) / double(t)) -
                                              spike_mean)));
  CHECK(worst < 0.05);
}

TEST_CASE("als with symmetric weights matches the symmetric penalized fit") {
  const int64_t t = 300;
  Rng rng(23);
  std::vector<double> y(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i)
    y[size_t(i)] = std::cos(2 * std::numbers::pi * double(i) / double(t)) + 0.3 * rng.normal();
  auto b = als_baseline(y, 1e4, 0.5, 10);

  // With asymmetry 0.5 every weight is 0.5 after the first refresh, so the
  // fixed point solves (0.5 I + lambda D2^T D2) s = 0.5 y; assemble and solve
  // that system densely.
  Eigen::MatrixXd dtd = Eigen::MatrixXd::Zero(t, t);
  for (int64_t k = 0; k + 2 < t; ++k) {
    Eigen::VectorXd row = Eigen::VectorXd::Zero(t);
    row[k] = 1;
    row[k + 1] = -2;
    row[k + 2] = 1;
    dtd += row * row.transpose();
  }
  Eigen::MatrixXd a = 1e4 * dtd;
  a.diagonal().array() += 0.5;
  Eigen::VectorXd yv(t);
  for (int64_t i = 0; i < t; ++i) yv[i] = y[size_t(i)];
  Eigen::VectorXd s = a.ldlt().solve((0.5 * yv).matrix());
  for (int64_t i = 0; i < t; ++i) CHECK(b[size_t(i)] == doctest::Approx(s[i]).epsilon(1e-6));
}

TEST_CASE("lead-group normalization fixed points and statistics") {
  SignalRecord rec;
  rec.samples = Tensor<float>::zeros({12, 10});
  float* p = rec.samples.data();
  for (int64_t ch = 0; ch < 12; ++ch)
    for (int64_t i = 0; i < 10; ++i) p[ch * 10 + i] = (i % 2 == 0) ? -1.f : 1.f;
  normalize_lead_groups(rec);
  for (int64_t i = 0; i < 120; ++i) CHECK(std::abs(p[i]) == doctest::Approx(1.f).epsilon(1e-6));

  SignalRecord flat;
  flat.samples = Tensor<float>::full({12, 10}, 7.f);
  normalize_lead_groups(flat);
  for (int64_t i = 0; i < 120; ++i) CHECK(flat.samples.data()[i] == 0.f);

  SignalRecord rnd = make_record(12, 50, 31);
  normalize_lead_groups(rnd);
  const int64_t bounds[4] = {0, 3, 6, 12};
  for (int g = 0; g < 3; ++g) {
    double mean = 0, var = 0;
    int64_t count = (bounds[g + 1] - bounds[g]) * 50;
    for (int64_t ch = bounds[g]; ch < bounds[g + 1]; ++ch)
      for (int64_t i = 0; i < 50; ++i) mean += double(rnd.samples.data()[ch * 50 + i]);
    mean /= double(count);
    for (int64_t ch = bounds[g]; ch < bounds[g + 1]; ++ch)
      for (int64_t i = 0; i < 50; ++i) {
        double d = double(rnd.samples.data()[ch * 50 + i]) - mean;
        var += d * d;
      }
    var /= double(count);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-6));
  }

  std::vector<float> once = rnd.samples.value_vector();
  normalize_lead_groups(rnd);
  for (int64_t i = 0; i < rnd.samples.numel(); ++i)
    CHECK(rnd.samples.data()[i] == doctest::Approx(once[size_t(i)]).epsilon(1e-6));

  SignalRecord narrow = make_record(6, 10, 1);
  CHECK_THROWS_AS(normalize_lead_groups(narrow), DataError);
}

TEST_CASE("fourier surrogate preserves the amplitude spectrum") {
  const int64_t c = 2, t = 64;
  SignalRecord rec = make_record(c, t, 41);
  Rng rng(42);
  auto out = fourier_surrogate(rec.samples, 0.7, rng);

  // Independent O(N^2) DFT magnitude oracle.
  auto dft_mag = [&](const float* x) {
    std::vector<double> mags(static_cast<size_t>(t / 2 + 1));
    for (int64_t k = 0; k <= t / 2; ++k) {
      double re = 0, im = 0;
      for (int64_t i = 0; i < t; ++i) {
        double ang = -2 * std::numbers::pi * double(k) * double(i) / double(t);
        re += double(x[i]) * std::cos(ang);
        im += double(x[i]) * std::sin(ang);
      }
      mags[size_t(k)] = std::hypot(re, im);
    }
    return mags;
  };
  for (int64_t ch = 0; ch < c; ++ch) {
    auto before = dft_mag(rec.samples.data() + ch * t);
    auto after = dft_mag(out.data() + ch * t);
    for (size_t k = 0; k < before.size(); ++k)
      CHECK(after[k] == doctest::Approx(before[k]).epsilon(1e-4));
  }

  double power_before = 0, power_after = 0;
  for (int64_t i = 0; i < c * t; ++i) {
    power_before += double(rec.samples.data()[i]) * double(rec.samples.data()[i]);
    power_after += double(out.data()[i]) * double(out.data()[i]);
  }
  CHECK(power_after == doctest::Approx(power_before).epsilon(1e-6));
}

TEST_CASE("fourier surrogate identity and sinusoid phase shift") {
  SignalRecord rec = make_record(1, 128, 43);
  Rng rng(44);
  auto same = fourier_surrogate(rec.samples, 0.0, rng);
  CHECK(same.same_storage(rec.samples));

  const int64_t t = 200;
  Tensor<float> sine = Tensor<float>::zeros({1, t});
  for (int64_t i = 0; i < t; ++i)
    sine.data()[i] = float(std::sin(2 * std::numbers::pi * 5.0 * double(i) / double(t)));
  Rng rng2(45);
  auto shifted = fourier_surrogate(sine, 1.0, rng2);
  double a = 0, b = 0;
  for (int64_t i = 0; i < t; ++i) {
    double ang = 2 * std::numbers::pi * 5.0 * double(i) / double(t);
    a += 2.0 / t * double(shifted.data()[i]) * std::sin(ang);
    b += 2.0 / t * double(shifted.data()[i]) * std::cos(ang);
  }
  CHECK(std::hypot(a, b) == doctest::Approx(1.0).epsilon(1e-4));
  for (int64_t i = 0; i < t; ++i) {
    double ang = 2 * std::numbers::pi * 5.0 * double(i) / double(t);
    CHECK(double(shifted.data()[i]) ==
          doctest::Approx(a * std::sin(ang) + b * std::cos(ang)).epsilon(1e-3));
  }
}

TEST_CASE("scalar signal augmentations at identity settings") {
  SignalRecord rec = make_record(3, 100, 51);
  Rng rng(52);
  CHECK(amplitude_rescale(rec.samples, 0.0, rng).same_storage(rec.samples));
  CHECK(gaussian_noise(rec.samples, 0.0, rng).same_storage(rec.samples));
  auto crop1 = random_crop_resize(rec.samples, 1.0, rng);
  for (int64_t i = 0; i < rec.samples.numel(); ++i)
    CHECK(crop1.data()[i] == doctest::Approx(rec.samples.data()[i]).epsilon(1e-6));

  AugmentationConfig identity_cfg;
  Rng rng2(53);
  CHECK(augment_signal(rec.samples, identity_cfg, rng2).same_storage(rec.samples));
}

TEST_CASE("amplitude rescale applies one clipped global factor") {
  SignalRecord rec = make_record(2, 64, 54);
  Rng rng(55);
  Rng probe(55);
  double expect = std::clamp(1.0 + 0.5 * probe.normal(), 0.1, 2.0);
  auto out = amplitude_rescale(rec.samples, 0.5, rng);
  for (int64_t i = 0; i < rec.samples.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(rec.samples.data()[i] * expect).epsilon(1e-6));
}

TEST_CASE("random crop matches the closed-form interpolation on a ramp") {
  const int64_t t = 100;
  Tensor<float> ramp = Tensor<float>::zeros({1, t});
  for (int64_t i = 0; i < t; ++i) ramp.data()[i] = float(i);
  Rng rng(56);
  Rng probe(56);
  const int64_t len = 50;
  int64_t start = int64_t(probe.uniform_int(uint64_t(t - len + 1)));
  auto out = random_crop_resize(ramp, 0.5, rng);
  for (int64_t i = 0; i < t; ++i) {
    double pos = double(start) + double(i) * double(len - 1) / double(t - 1);
    CHECK(double(out.data()[i]) == doctest::Approx(pos).epsilon(1e-4));
  }
  CHECK_THROWS_AS(random_crop_resize(ramp, 0.0, rng), ConfigError);
  CHECK_THROWS_AS(random_crop_resize(ramp, 1.5, rng), ConfigError);
}

TEST_CASE("prepare_image pads to center and min-max normalizes") {
  Tensor<float> raw = Tensor<float>::zeros({3, 2, 2});
  for (int64_t i = 0; i < 12; ++i) raw.data()[i] = float(i) * 255.f / 11.f;
  auto img = prepare_image(raw, 4);
  CHECK(img.dim(1) == 4);
  float mn = 1e9f, mx = -1e9f;
  for (int64_t i = 0; i < img.numel(); ++i) {
    mn = std::min(mn, img.data()[i]);
    mx = std::max(mx, img.data()[i]);
  }
  CHECK(mn == 0.f);
  CHECK(mx == 1.f);
  CHECK(img.data()[0] == 0.f);
  CHECK(img.data()[1 * 4 + 1] == doctest::Approx(0.0));

  auto flat = prepare_image(Tensor<float>::full({3, 2, 2}, 9.f), 4);
  for (int64_t i = 0; i < flat.numel(); ++i) CHECK(flat.data()[i] == 0.f);

  CHECK_THROWS_AS(prepare_image(Tensor<float>::zeros({3, 8, 8}), 4), DataError);
}

TEST_CASE("image flip is an involution and rotation respects exact angles") {
  Rng rng(61);
  auto img = Tensor<float>::randn({3, 6, 6}, rng, 1.f);
  for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = std::abs(img.data()[i]);
  auto twice = hflip_image(hflip_image(img));
  for (int64_t i = 0; i < img.numel(); ++i) CHECK(twice.data()[i] == img.data()[i]);

  auto rot0 = rotate_image(img, 0.0);
  for (int64_t i = 0; i < img.numel(); ++i)
    CHECK(rot0.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-6));

  auto rot180 = rotate_image(img, 180.0);
  for (int64_t ch = 0; ch < 3; ++ch)
    for (int64_t y = 0; y < 6; ++y)
      for (int64_t x = 0; x < 6; ++x)
        CHECK(rot180.data()[(ch * 6 + y) * 6 + x] ==
              doctest::Approx(img.data()[(ch * 6 + 5 - y) * 6 + (5 - x)]).epsilon(1e-5));
}

TEST_CASE("image augmentation identity config returns the input untouched") {
  Rng rng(62);
  auto img = Tensor<float>::randn({3, 8, 8}, rng, 0.25f);
  for (int64_t i = 0; i < img.numel(); ++i)
    img.data()[i] = std::clamp(img.data()[i] + 0.5f, 0.f, 1.f);
  AugmentationConfig cfg;
  Rng rng2(63);
  auto out = augment_image(img, cfg, rng2);
  CHECK(out.same_storage(img));
}

TEST_CASE("image augmentation keeps values in range and is seed deterministic") {
  Rng rng(64);
  auto img = Tensor<float>::randn({3, 16, 16}, rng, 0.3f);
  for (int64_t i = 0; i < img.numel(); ++i)
    img.data()[i] = std::clamp(img.data()[i] + 0.5f, 0.f, 1.f);
  AugmentationConfig cfg;
  cfg.flip_prob = 0.5;
  cfg.rot_prob = 0.5;
  cfg.rot_degrees = 45;
  cfg.jitter_brightness = 0.5;
  cfg.jitter_contrast = 0.5;
  cfg.jitter_saturation = 0.25;
  cfg.crop_area_lo = 0.6;
  cfg.crop_area_hi = 1.0;
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Rng ra = derive_rng(99, {seed});
    Rng rb = derive_rng(99, {seed});
    auto a = augment_image(img, cfg, ra);
    auto b = augment_image(img, cfg, rb);
    for (int64_t i = 0; i < a.numel(); ++i) {
      CHECK(a.data()[i] == b.data()[i]);
      CHECK(a.data()[i] >= 0.f);
      CHECK(a.data()[i] <= 1.f);
    }
  }
}

}  // TEST_SUITE

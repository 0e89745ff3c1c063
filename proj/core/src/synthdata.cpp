#include "mmfuse/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "mmfuse/error.hpp"

namespace mmfuse {

namespace {

double clip(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

double contraction_ratio(const LatentFactors& z) {
  return clip(0.6 - 0.1 * z.z[2], 0.3, 0.9);
}

std::string subject_name(int64_t subject) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06lld", static_cast<long long>(subject));
  return buf;
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

void validate_spec(const SynthSpec& spec) {
  if (spec.n_train < 0 || spec.n_val < 0 || spec.n_test < 0)
    throw ConfigError("split sizes must be nonnegative");
  if (total_subjects(spec) <= 0) throw ConfigError("dataset must be nonempty");
  if (spec.channels <= 0) throw ConfigError("channels must be positive");
  if (spec.t_samples <= 0) throw ConfigError("t_samples must be positive");
  if (!(spec.sampling_hz > 0)) throw ConfigError("sampling_hz must be positive");
  if (spec.image_size < 32)
    throw ConfigError("image_size must be at least 32 px");
  if (spec.signal_noise < 0 || spec.image_noise < 0)
    throw ConfigError("noise levels must be nonnegative");
  if (!std::isfinite(spec.disease_threshold))
    throw ConfigError("disease_threshold must be finite");
}

double heart_rate_bpm(const LatentFactors& z) {
  return clip(60.0 + 10.0 * z.z[1], 40.0, 100.0);
}

double pulse_width_s(const LatentFactors& z) {
  return 0.040 * (1.0 - 0.15 * z.z[2]);
}

double diastole_radius_px(const LatentFactors& z) { return 12.0 + 3.0 * z.z[0]; }

double systole_radius_px(const LatentFactors& z) {
  return diastole_radius_px(z) * contraction_ratio(z);
}

std::vector<double> lead_weights(int64_t channels) {
  if (channels <= 0) throw ConfigError("channels must be positive");
  Rng rng(7);
  std::vector<double> w(static_cast<size_t>(channels));
  for (auto& v : w) v = rng.normal();
  return w;
}

LatentFactors sample_latents(Rng& rng) {
  LatentFactors z;
  for (auto& v : z.z) v = rng.normal();
  return z;
}

std::vector<double> beat_times(const LatentFactors& z, const SynthSpec& spec,
                               Rng& rng) {
  const double period = 60.0 / heart_rate_bpm(z);
  const double duration = spec.t_samples / spec.sampling_hz;
  const double phase = rng.uniform();
  const int64_t last = static_cast<int64_t>(std::ceil(duration / period)) + 2;
  std::vector<double> beats;
  beats.reserve(static_cast<size_t>(last + 3));
  for (int64_t b = -2; b <= last; ++b) {
    const double jitter = rng.uniform(-0.02, 0.02);
    beats.push_back((static_cast<double>(b) + phase + jitter) * period);
  }
  return beats;
}

SignalRecord render_signal(const LatentFactors& z, const SynthSpec& spec,
                           Rng& rng) {
  validate_spec(spec);
  const int64_t c_n = spec.channels;
  const int64_t t_n = spec.t_samples;
  const double dt = 1.0 / spec.sampling_hz;

  const std::vector<double> beats = beat_times(z, spec, rng);
  const double base_freq = rng.uniform(0.08, 0.12);
  const double base_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const double w = pulse_width_s(z);
  const double gain = 1.0 + 0.3 * z.z[0];

  // The pulse train is shared across leads; leads differ only by weight.
  std::vector<double> train(static_cast<size_t>(t_n), 0.0);
  for (double tb : beats) {
    const int64_t lo =
        std::max<int64_t>(0, static_cast<int64_t>(std::ceil((tb - 5.0 * w) / dt)));
    const int64_t hi = std::min<int64_t>(
        t_n - 1, static_cast<int64_t>(std::floor((tb + 5.0 * w) / dt)));
    for (int64_t t = lo; t <= hi; ++t) {
      const double x = (static_cast<double>(t) * dt - tb) / w;
      train[static_cast<size_t>(t)] += (1.0 - x * x) * std::exp(-0.5 * x * x);
    }
  }

  const std::vector<double> weights = lead_weights(c_n);
  SignalRecord rec;
  rec.samples = Tensor<float>::zeros({c_n, t_n});
  rec.sampling_hz = spec.sampling_hz;
  float* s = rec.samples.data();
  for (int64_t c = 0; c < c_n; ++c) {
    const double lead_gain = gain * weights[static_cast<size_t>(c)];
    for (int64_t t = 0; t < t_n; ++t) {
      const double tt = static_cast<double>(t) * dt;
      const double v = lead_gain * train[static_cast<size_t>(t)] +
                       0.2 * std::sin(2.0 * std::numbers::pi * base_freq * tt +
                                      base_phase) +
                       spec.signal_noise * rng.normal();
      s[c * t_n + t] = static_cast<float>(v);
    }
  }
  return rec;
}

RenderedImage render_image(const LatentFactors& z, const SynthSpec& spec,
                           Rng& rng) {
  validate_spec(spec);
  const int64_t n = spec.image_size;

  // The disc must fit the frame at every jittered center position.
  const double r_max = static_cast<double>(n) / 2.0 - 8.0;
  const double r_min = 2.0;
  double rd = diastole_radius_px(z);
  bool clipped = false;
  if (rd > r_max) {
    rd = r_max;
    clipped = true;
  } else if (rd < r_min) {
    rd = r_min;
    clipped = true;
  }
  const double rs = rd * contraction_ratio(z);

  const double cx = static_cast<double>(n) / 2.0 + rng.uniform(-4.0, 4.0);
  const double cy = static_cast<double>(n) / 2.0 + rng.uniform(-4.0, 4.0);

  const std::array<double, 3> radii = {rs, rd, 0.5 * (rd + rs)};

  RenderedImage out;
  out.radius_clipped = clipped;
  out.record.pixels = Tensor<float>::zeros({3, n, n});
  float* px = out.record.pixels.data();
  for (int64_t ch = 0; ch < 3; ++ch) {
    const double r = radii[static_cast<size_t>(ch)];
    for (int64_t y = 0; y < n; ++y)
      for (int64_t x = 0; x < n; ++x) {
        const double d = std::hypot(static_cast<double>(x) + 0.5 - cx,
                                    static_cast<double>(y) + 0.5 - cy);
        const double coverage = clip(r - d + 0.5, 0.0, 1.0);
        const double v = coverage + spec.image_noise * rng.normal();
        px[(ch * n + y) * n + x] = static_cast<float>(v);
      }
  }

  out.mask.assign(static_cast<size_t>(n * n), 0);
  for (int64_t y = 0; y < n; ++y)
    for (int64_t x = 0; x < n; ++x) {
      const double d = std::hypot(static_cast<double>(x) + 0.5 - cx,
                                  static_cast<double>(y) + 0.5 - cy);
      out.mask[static_cast<size_t>(y * n + x)] = d <= rd ? 1 : 0;
    }
  return out;
}

std::map<std::string, double> make_labels(const LatentFactors& z,
                                          double threshold) {
  const double rd = diastole_radius_px(z);
  const double ratio = contraction_ratio(z);
  const double score = 0.8 * z.z[0] - 0.6 * z.z[2] + 0.3 * z.z[3];
  return {{"PHV", rd * rd * rd},
          {"PHE", 1.0 - ratio * ratio * ratio},
          {"disease", score > threshold ? 1.0 : 0.0}};
}

int64_t total_subjects(const SynthSpec& spec) {
  return spec.n_train + spec.n_val + spec.n_test;
}

Split split_for(const SynthSpec& spec, int64_t subject) {
  if (subject < 0 || subject >= total_subjects(spec))
    throw DataError("subject index outside the dataset");
  if (subject < spec.n_train) return Split::train;
  if (subject < spec.n_train + spec.n_val) return Split::val;
  return Split::test;
}

SynthRecord generate_record(const SynthSpec& spec, uint64_t seed,
                            int64_t subject) {
  validate_spec(spec);
  if (subject < 0 || subject >= total_subjects(spec))
    throw DataError("subject index outside the dataset");
  const uint64_t us = static_cast<uint64_t>(subject);

  SynthRecord rec;
  rec.subject = subject;
  Rng zr = derive_rng(seed, {hash_str("synth_latent"), us});
  rec.latents = sample_latents(zr);

  Rng sr = derive_rng(seed, {hash_str("synth_signal"), us});
  rec.signal = render_signal(rec.latents, spec, sr);
  Rng ir = derive_rng(seed, {hash_str("synth_image"), us});
  rec.image = render_image(rec.latents, spec, ir);

  rec.signal.labels = make_labels(rec.latents, spec.disease_threshold);
  rec.signal.subject_id = subject_name(subject);
  rec.image.record.subject_id = rec.signal.subject_id;
  return rec;
}

}  // namespace mmfuse

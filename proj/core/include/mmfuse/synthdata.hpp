#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmfuse/record.hpp"
#include "mmfuse/rng.hpp"

namespace mmfuse {

// Shared latent driving both modalities of one synthetic subject.
// z[0] scales amplitude and radius, z[1] heart rate, z[2] pulse width and
// contraction ratio, z[3] enters only the disease label so neither modality
// can predict it perfectly.
struct LatentFactors {
  std::array<double, 4> z{};
};

struct SynthSpec {
  int64_t n_train = 2048;
  int64_t n_val = 256;
  int64_t n_test = 256;
  int64_t channels = 12;
  int64_t t_samples = 1000;
  double sampling_hz = 100.0;
  int64_t image_size = 64;
  double signal_noise = 0.05;
  double image_noise = 0.1;
  double disease_threshold = 0.8;
};

enum class Split { train, val, test };

const char* split_name(Split s);

// Rendered image plus the diastole disc mask ([H*W] row-major, 1 inside)
// used as localization ground truth. radius_clipped marks subjects whose
// formula radius fell outside what the frame can hold.
struct RenderedImage {
  ImageRecord record;
  std::vector<uint8_t> mask;
  bool radius_clipped = false;
};

// One fully generated subject. signal.labels carries disease/PHV/PHE.
struct SynthRecord {
  int64_t subject = 0;
  LatentFactors latents;
  SignalRecord signal;
  RenderedImage image;
};

void validate_spec(const SynthSpec& spec);

// clip(60 + 10 z1, 40, 100)
double heart_rate_bpm(const LatentFactors& z);

// 0.040 s * (1 - 0.15 z2)
double pulse_width_s(const LatentFactors& z);

// 12 + 3 z0, before any frame clamping
double diastole_radius_px(const LatentFactors& z);

// diastole radius * clip(0.6 - 0.1 z2, 0.3, 0.9)
double systole_radius_px(const LatentFactors& z);

// Fixed per-lead projection weights, standard normal from a constant seed.
std::vector<double> lead_weights(int64_t channels);

LatentFactors sample_latents(Rng& rng);

// Beat centers in seconds covering [-2 periods, duration + 2 periods] so
// pulse tails at the window edges render fully. Each beat jittered by up to
// 2% of the period. Consumes rng draws ahead of render_signal's own, so
// calling this with an identically derived rng reproduces the beat grid of
// the rendered record.
std::vector<double> beat_times(const LatentFactors& z, const SynthSpec& spec,
                               Rng& rng);

// Mexican-hat pulse train per lead, scaled by (1 + 0.3 z0) times the lead
// weight, plus a slow baseline sinusoid (amplitude 0.2, ~0.1 Hz) and white
// noise. labels left empty.
SignalRecord render_signal(const LatentFactors& z, const SynthSpec& spec,
                           Rng& rng);

// Three anti-aliased filled discs on a noisy background, channel order
// (systole, diastole, mid-phase), common center jittered up to 4 px from
// the frame center.
RenderedImage render_image(const LatentFactors& z, const SynthSpec& spec,
                           Rng& rng);

// PHV = r_d^3, PHE = 1 - (r_s/r_d)^3, disease = 1 iff
// 0.8 z0 - 0.6 z2 + 0.3 z3 > threshold.
std::map<std::string, double> make_labels(const LatentFactors& z,
                                          double threshold);

int64_t total_subjects(const SynthSpec& spec);

// Subjects are split by index: [0, n_train) train, then val, then test.
Split split_for(const SynthSpec& spec, int64_t subject);

// Pure function of (spec, seed, subject): latents, both modalities, and
// labels from private derived streams, bit-reproducible across calls.
SynthRecord generate_record(const SynthSpec& spec, uint64_t seed,
                            int64_t subject);

}  // namespace mmfuse

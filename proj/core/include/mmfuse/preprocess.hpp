#pragma once

#include <vector>

#include "mmfuse/record.hpp"
#include "mmfuse/rng.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

// All knobs default to their identity setting; stage configs opt in.
struct AugmentationConfig {
  // Signal side.
  double crop_scale = 1.0;
  double noise_sigma = 0.0;
  double amp_sigma = 0.0;
  double phase_noise_magnitude = 0.0;
  // Image side.
  double flip_prob = 0.0;
  double rot_prob = 0.0;
  double rot_degrees = 0.0;
  double jitter_brightness = 0.0;
  double jitter_contrast = 0.0;
  double jitter_saturation = 0.0;
  double crop_area_lo = 1.0;
  double crop_area_hi = 1.0;
};

// Asymmetric-least-squares baseline of one lead: b minimizing
// sum_i w_i (y_i - b_i)^2 + smoothness * sum (second difference of b)^2,
// weights re-estimated each iteration as `asymmetry` where y > b and
// 1 - asymmetry elsewhere, starting from all ones. Pentadiagonal system
// solved by banded LDL^T.
std::vector<double> als_baseline(const std::vector<double>& y, double smoothness,
                                 double asymmetry, int iters);

// Subtracts the ALS baseline from every lead in place.
void remove_baseline(SignalRecord& rec, double smoothness = 1e7, double asymmetry = 0.05,
                     int iters = 10);

// Standardizes each lead group (Einthoven 0-2, Goldberger 3-5, Wilson 6-11)
// by the group's pooled mean and population standard deviation over this
// record. A zero-variance group becomes all zeros.
void normalize_lead_groups(SignalRecord& rec);

// Per lead: forward real FFT, uniform phase noise in [-magnitude*pi,
// +magnitude*pi] on every strictly-positive non-Nyquist frequency, inverse
// FFT. Amplitude spectrum is untouched. magnitude 0 returns the input.
Tensor<float> fourier_surrogate(const Tensor<float>& samples, double magnitude, Rng& rng);

// One global factor drawn from Normal(1, amp_sigma^2), clipped to [0.1, 2],
// multiplying every lead. sigma 0 returns the input.
Tensor<float> amplitude_rescale(const Tensor<float>& samples, double amp_sigma, Rng& rng);

// Adds i.i.d. Normal(0, noise_sigma^2) to every sample. sigma 0 returns the input.
Tensor<float> gaussian_noise(const Tensor<float>& samples, double noise_sigma, Rng& rng);

// Uniformly-placed contiguous window of ceil(crop_scale*T) samples,
// linearly interpolated back to length T so the patch grid is unchanged.
Tensor<float> random_crop_resize(const Tensor<float>& samples, double crop_scale, Rng& rng);

// Full signal augmentation pipeline: crop, amplitude rescale, additive
// noise, Fourier surrogate, in that order, each at its configured strength.
Tensor<float> augment_signal(const Tensor<float>& samples, const AugmentationConfig& cfg, Rng& rng);

// Center zero-pad to target x target, then min-max normalize over the whole
// image (all channels pooled); a constant image maps to all zeros.
Tensor<float> prepare_image(const Tensor<float>& raw, int64_t target);

// Deterministic image primitives, exposed for direct verification.
Tensor<float> hflip_image(const Tensor<float>& pixels);
Tensor<float> rotate_image(const Tensor<float>& pixels, double degrees);
Tensor<float> resize_bilinear(const Tensor<float>& pixels, int64_t oh, int64_t ow);

// Horizontal flip, rotation, brightness/contrast/saturation jitter, random
// resized crop, in that order, clamped back to [0,1].
Tensor<float> augment_image(const Tensor<float>& pixels, const AugmentationConfig& cfg, Rng& rng);

}  // namespace mmfuse

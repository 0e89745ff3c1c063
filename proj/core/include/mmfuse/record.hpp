#pragma once

#include <map>
#include <string>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

// One multichannel time series: samples is [C x T] row-major, lead order
// fixed as (I, II, III | aVR, aVL, aVF | V1..V6) when C == 12.
struct SignalRecord {
  std::string subject_id;
  Tensor<float> samples;
  double sampling_hz = 0;
  std::map<std::string, double> labels;
};

// One multi-phase image: pixels is [3 x H x W] in [0,1], channel order
// (end-systolic, end-diastolic, mid-phase).
struct ImageRecord {
  std::string subject_id;
  Tensor<float> pixels;
};

}  // namespace mmfuse

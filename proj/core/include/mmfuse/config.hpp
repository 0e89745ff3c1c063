#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmfuse/objectives.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse {

using KvMap = std::map<std::string, std::string>;

// key=value per line, '#' starts a comment, blank lines skipped, duplicate
// keys rejected. Whitespace around key and value is trimmed.
KvMap parse_kv_file(const std::string& path);

// "key=value" from a --set flag; replaces any existing entry.
void apply_override(KvMap& kv, const std::string& assignment);

// Sorted "key=value" lines; doubles printed so they re-parse bit-exactly.
std::string render_kv(const KvMap& kv);

// Shortest decimal form that re-parses to the same double.
std::string format_double(double v);

int64_t parse_i64(const std::string& key, const std::string& value);
uint64_t parse_u64(const std::string& key, const std::string& value);
double parse_f64(const std::string& key, const std::string& value);
std::vector<uint64_t> parse_u64_list(const std::string& key,
                                     const std::string& value);
std::vector<double> parse_f64_list(const std::string& key,
                                   const std::string& value);

enum class Stage { mae, mmcl, finetune_cls, finetune_reg, supervised_scratch };

const char* stage_name(Stage s);

struct StageConfig {
  Stage stage = Stage::mae;
  int64_t epochs = 50;
  double warmup_frac = 0.10;
  int64_t batch_size = 32;
  double base_lr = 1e-3;
  double weight_decay = 0.15;
  double mask_ratio = 0.8;
  double tau = 0.1;
  double lambda = 0.5;
  double layer_decay = 0.75;
  double drop_path = 0.1;
  double label_smoothing = 0.1;
  uint64_t seed = 0;
  double train_fraction = 1.0;
  bool augment = true;
  MaeScope scope = MaeScope::all;
  std::string target = "disease";
  int64_t patience = 25;
};

// Per-stage starting points before config keys apply.
StageConfig stage_defaults(Stage stage);

// Applies kv on top of the stage defaults and validates every invariant.
// Keys outside the stage's schema are rejected by name. For the finetune
// stages the target key selects classification (disease) or regression
// (PHV, PHE) and the stage field is updated to match.
StageConfig resolve_stage_config(Stage stage, const KvMap& kv);

// Full key set of the stage schema with final values, for the resolved
// config echo written into run directories.
KvMap stage_config_to_kv(const StageConfig& cfg);

struct SynthConfig {
  SynthSpec spec;
  uint64_t seed = 0;
};

SynthConfig resolve_synth_config(const KvMap& kv);
KvMap synth_config_to_kv(const SynthConfig& cfg);

}  // namespace mmfuse

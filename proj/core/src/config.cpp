#include "mmfuse/config.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "mmfuse/error.hpp"

namespace mmfuse {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string fmt_i64(int64_t v) { return std::to_string(v); }
std::string fmt_u64(uint64_t v) { return std::to_string(v); }

const std::vector<std::string>& schema_keys(Stage stage) {
  static const std::vector<std::string> mae = {
      "epochs",     "warmup_frac",   "batch_size",
      "base_lr",    "weight_decay",  "mask_ratio",
      "scope",      "seed",          "train_fraction", "augment"};
  static const std::vector<std::string> mmcl = {
      "epochs",  "warmup_frac", "batch_size",     "base_lr", "weight_decay",
      "tau",     "lambda",      "seed",           "train_fraction", "augment"};
  static const std::vector<std::string> tune = {
      "epochs",        "warmup_frac", "batch_size",      "base_lr",
      "weight_decay",  "layer_decay", "drop_path",       "label_smoothing",
      "seed",          "train_fraction", "target",       "patience",
      "augment"};
  switch (stage) {
    case Stage::mae: return mae;
    case Stage::mmcl: return mmcl;
    default: return tune;
  }
}

void apply_stage_key(StageConfig& cfg, const std::string& key,
                     const std::string& value) {
  if (key == "epochs") cfg.epochs = parse_i64(key, value);
  else if (key == "warmup_frac") cfg.warmup_frac = parse_f64(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_i64(key, value);
  else if (key == "base_lr") cfg.base_lr = parse_f64(key, value);
  else if (key == "weight_decay") cfg.weight_decay = parse_f64(key, value);
  else if (key == "mask_ratio") cfg.mask_ratio = parse_f64(key, value);
  else if (key == "tau") cfg.tau = parse_f64(key, value);
  else if (key == "lambda") cfg.lambda = parse_f64(key, value);
  else if (key == "layer_decay") cfg.layer_decay = parse_f64(key, value);
  else if (key == "drop_path") cfg.drop_path = parse_f64(key, value);
  else if (key == "label_smoothing")
    cfg.label_smoothing = parse_f64(key, value);
  else if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "train_fraction") cfg.train_fraction = parse_f64(key, value);
  else if (key == "augment") {
    if (value == "true") cfg.augment = true;
    else if (value == "false") cfg.augment = false;
    else throw ConfigError("augment must be true or false, got " + value);
  }
  else if (key == "patience") cfg.patience = parse_i64(key, value);
  else if (key == "target") cfg.target = value;
  else if (key == "scope") {
    if (value == "all") cfg.scope = MaeScope::all;
    else if (value == "masked_only") cfg.scope = MaeScope::masked_only;
    else throw ConfigError("scope must be all or masked_only, got " + value);
  } else {
    throw ConfigError("unhandled key " + key);
  }
}

void validate_stage(const StageConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (cfg.patience < 1) throw ConfigError("patience must be at least 1");
  if (!(cfg.warmup_frac >= 0.0 && cfg.warmup_frac < 1.0))
    throw ConfigError("warmup_frac must lie in [0, 1)");
  if (!(cfg.base_lr > 0.0) || !std::isfinite(cfg.base_lr))
    throw ConfigError("base_lr must be positive");
  if (!(cfg.weight_decay >= 0.0) || !std::isfinite(cfg.weight_decay))
    throw ConfigError("weight_decay must be nonnegative");
  if (!(cfg.mask_ratio >= 0.0 && cfg.mask_ratio < 1.0))
    throw ConfigError("mask_ratio must lie in [0, 1)");
  if (!(cfg.tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0))
    throw ConfigError("lambda must lie in [0, 1]");
  if (!(cfg.layer_decay > 0.0 && cfg.layer_decay <= 1.0))
    throw ConfigError("layer_decay must lie in (0, 1]");
  if (!(cfg.drop_path >= 0.0 && cfg.drop_path < 1.0))
    throw ConfigError("drop_path must lie in [0, 1)");
  if (!(cfg.label_smoothing >= 0.0 && cfg.label_smoothing < 1.0))
    throw ConfigError("label_smoothing must lie in [0, 1)");
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0))
    throw ConfigError("train_fraction must lie in (0, 1]");
  if (cfg.target != "disease" && cfg.target != "PHV" && cfg.target != "PHE")
    throw ConfigError("target must be disease, PHV, or PHE, got " +
                      cfg.target);
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

KvMap parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  KvMap kv;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const size_t eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + " line " + std::to_string(line_no) +
                        ": expected key=value");
    const std::string key = trim(body.substr(0, eq));
    if (key.empty())
      throw ConfigError(path + " line " + std::to_string(line_no) +
                        ": empty key");
    if (kv.count(key))
      throw ConfigError(path + " line " + std::to_string(line_no) +
                        ": duplicate key " + key);
    kv[key] = trim(body.substr(eq + 1));
  }
  return kv;
}

void apply_override(KvMap& kv, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value, got " + assignment);
  const std::string key = trim(assignment.substr(0, eq));
  if (key.empty()) throw ConfigError("override has an empty key");
  kv[key] = trim(assignment.substr(eq + 1));
}

std::string render_kv(const KvMap& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

int64_t parse_i64(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (value.empty() || end == nullptr || *end != '\0' || errno == ERANGE)
    throw ConfigError(key + " expects an integer, got '" + value + "'");
  return v;
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  if (value.empty() || value[0] == '-')
    throw ConfigError(key + " expects a nonnegative integer, got '" + value +
                      "'");
  errno = 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (end == nullptr || *end != '\0' || errno == ERANGE)
    throw ConfigError(key + " expects a nonnegative integer, got '" + value +
                      "'");
  return v;
}

double parse_f64(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end == nullptr || *end != '\0' || !std::isfinite(v))
    throw ConfigError(key + " expects a finite number, got '" + value + "'");
  return v;
}

std::vector<uint64_t> parse_u64_list(const std::string& key,
                                     const std::string& value) {
  std::vector<uint64_t> out;
  size_t start = 0;
  while (true) {
    const size_t comma = value.find(',', start);
    out.push_back(parse_u64(key, trim(value.substr(start, comma - start))));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<double> parse_f64_list(const std::string& key,
                                   const std::string& value) {
  std::vector<double> out;
  size_t start = 0;
  while (true) {
    const size_t comma = value.find(',', start);
    out.push_back(parse_f64(key, trim(value.substr(start, comma - start))));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::mae: return "mae";
    case Stage::mmcl: return "mmcl";
    case Stage::finetune_cls: return "finetune_cls";
    case Stage::finetune_reg: return "finetune_reg";
    default: return "supervised_scratch";
  }
}

StageConfig stage_defaults(Stage stage) {
  StageConfig cfg;
  cfg.stage = stage;
  switch (stage) {
    case Stage::mae:
      cfg.epochs = 50;
      cfg.warmup_frac = 0.10;
      cfg.batch_size = 32;
      cfg.base_lr = 1e-3;
      cfg.weight_decay = 0.15;
      cfg.mask_ratio = 0.8;
      break;
    case Stage::mmcl:
      cfg.epochs = 40;
      cfg.warmup_frac = 0.10;
      cfg.batch_size = 64;
      cfg.base_lr = 1e-3;
      cfg.weight_decay = 1e-4;
      cfg.tau = 0.1;
      cfg.lambda = 0.5;
      break;
    default:
      cfg.epochs = 40;
      cfg.warmup_frac = 0.05;
      cfg.batch_size = 32;
      cfg.base_lr = 5e-4;
      cfg.weight_decay = 0.05;
      cfg.layer_decay = 0.75;
      cfg.drop_path = 0.1;
      cfg.label_smoothing = 0.1;
      break;
  }
  return cfg;
}

StageConfig resolve_stage_config(Stage stage, const KvMap& kv) {
  StageConfig cfg = stage_defaults(stage);
  const auto& keys = schema_keys(stage);
  for (const auto& [k, v] : kv) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw ConfigError("unknown key '" + k + "' for stage " +
                        stage_name(stage));
    apply_stage_key(cfg, k, v);
  }
  if (stage == Stage::finetune_cls || stage == Stage::finetune_reg)
    cfg.stage = cfg.target == "disease" ? Stage::finetune_cls
                                        : Stage::finetune_reg;
  validate_stage(cfg);
  return cfg;
}

KvMap stage_config_to_kv(const StageConfig& cfg) {
  KvMap kv;
  for (const auto& key : schema_keys(cfg.stage)) {
    if (key == "epochs") kv[key] = fmt_i64(cfg.epochs);
    else if (key == "warmup_frac") kv[key] = format_double(cfg.warmup_frac);
    else if (key == "batch_size") kv[key] = fmt_i64(cfg.batch_size);
    else if (key == "base_lr") kv[key] = format_double(cfg.base_lr);
    else if (key == "weight_decay") kv[key] = format_double(cfg.weight_decay);
    else if (key == "mask_ratio") kv[key] = format_double(cfg.mask_ratio);
    else if (key == "tau") kv[key] = format_double(cfg.tau);
    else if (key == "lambda") kv[key] = format_double(cfg.lambda);
    else if (key == "layer_decay") kv[key] = format_double(cfg.layer_decay);
    else if (key == "drop_path") kv[key] = format_double(cfg.drop_path);
    else if (key == "label_smoothing")
      kv[key] = format_double(cfg.label_smoothing);
    else if (key == "seed") kv[key] = fmt_u64(cfg.seed);
    else if (key == "train_fraction")
      kv[key] = format_double(cfg.train_fraction);
    else if (key == "augment") kv[key] = cfg.augment ? "true" : "false";
    else if (key == "patience") kv[key] = fmt_i64(cfg.patience);
    else if (key == "target") kv[key] = cfg.target;
    else if (key == "scope")
      kv[key] = cfg.scope == MaeScope::all ? "all" : "masked_only";
  }
  return kv;
}

SynthConfig resolve_synth_config(const KvMap& kv) {
  SynthConfig cfg;
  for (const auto& [k, v] : kv) {
    if (k == "n_train") cfg.spec.n_train = parse_i64(k, v);
    else if (k == "n_val") cfg.spec.n_val = parse_i64(k, v);
    else if (k == "n_test") cfg.spec.n_test = parse_i64(k, v);
    else if (k == "channels") cfg.spec.channels = parse_i64(k, v);
    else if (k == "t_samples") cfg.spec.t_samples = parse_i64(k, v);
    else if (k == "sampling_hz") cfg.spec.sampling_hz = parse_f64(k, v);
    else if (k == "image_size") cfg.spec.image_size = parse_i64(k, v);
    else if (k == "signal_noise") cfg.spec.signal_noise = parse_f64(k, v);
    else if (k == "image_noise") cfg.spec.image_noise = parse_f64(k, v);
    else if (k == "disease_threshold")
      cfg.spec.disease_threshold = parse_f64(k, v);
    else if (k == "seed") cfg.seed = parse_u64(k, v);
    else throw ConfigError("unknown key '" + k + "' for stage synth");
  }
  validate_spec(cfg.spec);
  return cfg;
}

KvMap synth_config_to_kv(const SynthConfig& cfg) {
  KvMap kv;
  kv["n_train"] = fmt_i64(cfg.spec.n_train);
  kv["n_val"] = fmt_i64(cfg.spec.n_val);
  kv["n_test"] = fmt_i64(cfg.spec.n_test);
  kv["channels"] = fmt_i64(cfg.spec.channels);
  kv["t_samples"] = fmt_i64(cfg.spec.t_samples);
  kv["sampling_hz"] = format_double(cfg.spec.sampling_hz);
  kv["image_size"] = fmt_i64(cfg.spec.image_size);
  kv["signal_noise"] = format_double(cfg.spec.signal_noise);
  kv["image_noise"] = format_double(cfg.spec.image_noise);
  kv["disease_threshold"] = format_double(cfg.spec.disease_threshold);
  kv["seed"] = fmt_u64(cfg.seed);
  return kv;
}

}  // namespace mmfuse

#include "mmfuse/traineval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mmfuse/error.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/objectives.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/optimizer.hpp"
#include "mmfuse/tape.hpp"
#include "mmfuse/threads.hpp"

namespace mmfuse {

namespace {

void enable_grads(ModelState<float>& st) {
  for (auto& item : st.params.items())
    if (item.trainable) item.tensor.set_requires_grad(true);
}

bool name_has_prefix(const std::string& name, const std::string& prefix) {
  return name.rfind(prefix, 0) == 0;
}

void check_finite(double v, const char* stage, int64_t epoch, int64_t step) {
  if (std::isfinite(v)) return;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%s diverged at epoch %lld step %lld: loss is not finite",
                stage, static_cast<long long>(epoch),
                static_cast<long long>(step));
  throw DataError(buf);
}

void log_line(std::ostream* log, const std::string& line) {
  if (log) *log << line << '\n';
}

std::string kv_num(const char* key, double v) {
  return std::string(key) + "=" + format_double(v);
}

// Rounded warmup step count for a cosine schedule.
int64_t warm_steps(const StageConfig& cfg, int64_t total) {
  return static_cast<int64_t>(std::llround(cfg.warmup_frac * double(total)));
}

}  // namespace

TrainSet load_train_set(const DatasetIndex& index, bool with_images) {
  TrainSet set;
  set.records.resize(index.rows.size());
  parallel_records(static_cast<int64_t>(index.rows.size()), [&](int64_t i) {
    const size_t row = static_cast<size_t>(i);
    SignalRecord sig = load_signal(index, row, 100.0);
    remove_baseline(sig);
    normalize_lead_groups(sig);
    TrainRecord& rec = set.records[row];
    rec.subject_id = sig.subject_id;
    rec.samples = sig.samples;
    rec.disease = sig.labels.at("disease");
    rec.phv = sig.labels.at("PHV");
    rec.phe = sig.labels.at("PHE");
    if (with_images) {
      ImageRecord img = load_image(index, row);
      rec.pixels = prepare_image(img.pixels, img.pixels.dim(1));
    }
  });
  for (size_t i = 0; i < index.rows.size(); ++i) {
    const std::string& split = index.rows[i].split;
    if (split == "train") set.train_idx.push_back(i);
    else if (split == "val") set.val_idx.push_back(i);
    else set.test_idx.push_back(i);
  }
  return set;
}

double record_label(const TrainRecord& rec, const std::string& target) {
  if (target == "disease") return rec.disease;
  if (target == "PHV") return rec.phv;
  if (target == "PHE") return rec.phe;
  throw ConfigError("unknown target " + target);
}

AugmentationConfig stage_augmentations(Stage stage) {
  AugmentationConfig cfg;
  switch (stage) {
    case Stage::mae:
      cfg.crop_scale = 0.95;
      cfg.amp_sigma = 0.1;
      cfg.noise_sigma = 0.05;
      break;
    case Stage::mmcl:
      cfg.crop_scale = 0.9;
      cfg.amp_sigma = 0.05;
      cfg.noise_sigma = 0.1;
      cfg.phase_noise_magnitude = 0.2;
      cfg.flip_prob = 0.5;
      cfg.rot_prob = 0.5;
      cfg.rot_degrees = 10.0;
      cfg.jitter_brightness = 0.1;
      cfg.jitter_contrast = 0.1;
      break;
    default:
      cfg.crop_scale = 0.95;
      cfg.amp_sigma = 0.05;
      cfg.noise_sigma = 0.1;
      break;
  }
  return cfg;
}

Rng augment_rng(uint64_t seed, const std::string& subject_id, int64_t epoch) {
  return derive_rng(seed, {hash_str("augment"), hash_str(subject_id),
                           static_cast<uint64_t>(epoch)});
}

std::vector<size_t> nested_fraction(const std::vector<size_t>& pool,
                                    double fraction, Rng rng) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("train_fraction must lie in (0, 1]");
  std::vector<size_t> order = pool;
  rng.shuffle(order);
  const size_t keep = static_cast<size_t>(
      std::ceil(fraction * static_cast<double>(pool.size())));
  order.resize(std::min(order.size(), keep));
  return order;
}

ModelState<float> clone_state(const ModelState<float>& st) {
  ModelState<float> out;
  out.cfg = st.cfg;
  out.grid = st.grid;
  for (const auto& item : st.params.items())
    out.params.add(item.name, item.tensor.clone(), item.trainable);
  return out;
}

std::vector<std::vector<float>> snapshot_params(const ModelState<float>& st) {
  std::vector<std::vector<float>> snap;
  for (const auto& item : st.params.items())
    if (item.trainable) snap.push_back(item.tensor.value_vector());
  return snap;
}

void restore_params(ModelState<float>& st,
                    const std::vector<std::vector<float>>& snap) {
  size_t k = 0;
  for (auto& item : st.params.items()) {
    if (!item.trainable) continue;
    if (k >= snap.size() ||
        snap[k].size() != static_cast<size_t>(item.tensor.numel()))
      throw ShapeError("restore_params: snapshot does not match the store");
    std::copy(snap[k].begin(), snap[k].end(), item.tensor.data());
    ++k;
  }
  if (k != snap.size())
    throw ShapeError("restore_params: snapshot does not match the store");
}

namespace {

// Registers trainable parameters under the given prefixes, matrices with
// weight decay, everything else without.
void add_slots(AdamW<float>& opt, ModelState<float>& st,
               const std::vector<std::string>& prefixes,
               const std::map<std::string, float>& lr_scales = {}) {
  for (auto& item : st.params.items()) {
    if (!item.trainable) continue;
    bool wanted = false;
    for (const auto& p : prefixes)
      if (name_has_prefix(item.name, p)) wanted = true;
    if (!wanted) continue;
    float scale = 1.0f;
    const auto it = lr_scales.find(item.name);
    if (it != lr_scales.end()) scale = it->second;
    opt.add(item.name, item.tensor, scale, item.tensor.rank() >= 2);
  }
}

}  // namespace

MaeResult pretrain_mae(const TrainSet& data, const StageConfig& cfg,
                       const ModelConfig& mc, std::ostream* log) {
  if (data.train_idx.empty()) throw DataError("pretrain_mae: empty train split");
  MaeResult result{ModelState<float>::init(mc, cfg.seed), {}};
  ModelState<float>& st = result.state;
  enable_grads(st);

  AdamW<float> opt(0.9f, 0.95f, 1e-8f, static_cast<float>(cfg.weight_decay));
  add_slots(opt, st, {""});

  const std::vector<size_t> subset = nested_fraction(
      data.train_idx, cfg.train_fraction,
      derive_rng(cfg.seed, {hash_str("fraction")}));
  const AugmentationConfig aug =
      cfg.augment ? stage_augmentations(Stage::mae) : AugmentationConfig{};
  const int64_t n = static_cast<int64_t>(subset.size());
  const int64_t bsz = std::min<int64_t>(cfg.batch_size, n);
  const int64_t batches = (n + bsz - 1) / bsz;
  const int64_t total_steps = cfg.epochs * batches;
  const int64_t warm = warm_steps(cfg, total_steps);

  int64_t step = 0;
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    std::vector<size_t> order = subset;
    derive_rng(cfg.seed, {hash_str("order"), static_cast<uint64_t>(e)})
        .shuffle(order);
    double epoch_sum = 0;
    for (int64_t b = 0; b < batches; ++b) {
      const int64_t lo = b * bsz;
      const int64_t hi = std::min<int64_t>(lo + bsz, n);
      const float inv = 1.0f / static_cast<float>(hi - lo);
      opt.zero_grad();
      double batch_sum = 0;
      for (int64_t s = lo; s < hi; ++s) {
        const TrainRecord& rec = data.records[order[static_cast<size_t>(s)]];
        Rng arng = augment_rng(cfg.seed, rec.subject_id, e);
        Tensor<float> sig = augment_signal(rec.samples, aug, arng);
        Tensor<float> patches = patchify(sig, st.grid);
        Rng mrng = derive_rng(cfg.seed,
                              {hash_str("mask"), static_cast<uint64_t>(e),
                               static_cast<uint64_t>(order[static_cast<size_t>(s)])});
        MaskSpec mask = sample_mask(st.grid.n(), cfg.mask_ratio, mrng);
        Tape<float> tape;
        Tensor<float> enc = encode_visible(tape, st, patches, mask);
        Tensor<float> dec = decode(tape, st, enc, mask);
        Tensor<float> loss = mae_loss(tape, dec, patches, mask, cfg.scope);
        const double lv = static_cast<double>(loss.data()[0]);
        check_finite(lv, "mae", e, step);
        batch_sum += lv;
        tape.backward(ops::scale(tape, loss, inv));
      }
      const float lr = cosine_warmup_lr(step, total_steps, warm,
                                        static_cast<float>(cfg.base_lr));
      opt.step(lr);
      epoch_sum += batch_sum;
      log_line(log, "stage=mae epoch=" + std::to_string(e) + " step=" +
                        std::to_string(step) + " " +
                        kv_num("loss", batch_sum / double(hi - lo)) + " " +
                        kv_num("lr", lr));
      ++step;
    }
    result.epoch_loss.push_back(epoch_sum / double(n));
  }
  return result;
}

double mae_eval_loss(const TrainSet& data, const std::vector<size_t>& idx,
                     const ModelState<float>& st, const StageConfig& cfg) {
  if (idx.empty()) throw DataError("mae_eval_loss: empty record list");
  double sum = 0;
  for (size_t i : idx) {
    const TrainRecord& rec = data.records[i];
    Tensor<float> patches = patchify(rec.samples, st.grid);
    Rng mrng = derive_rng(cfg.seed,
                          {hash_str("eval_mask"), static_cast<uint64_t>(i)});
    MaskSpec mask = sample_mask(st.grid.n(), cfg.mask_ratio, mrng);
    Tape<float> tape;
    tape.set_recording(false);
    Tensor<float> enc = encode_visible(tape, st, patches, mask);
    Tensor<float> dec = decode(tape, st, enc, mask);
    Tensor<float> loss = mae_loss(tape, dec, patches, mask, cfg.scope);
    sum += static_cast<double>(loss.data()[0]);
  }
  return sum / double(idx.size());
}

MmclResult pretrain_mmcl(const TrainSet& data, const ModelState<float>& init,
                         const StageConfig& cfg, std::ostream* log) {
  MmclResult result{clone_state(init), {}, {}, {}};
  ModelState<float>& st = result.state;
  enable_grads(st);

  AdamW<float> opt(0.9f, 0.95f, 1e-8f, static_cast<float>(cfg.weight_decay));
  add_slots(opt, st, {"patch_proj.", "enc.", "img.", "proj_s.", "proj_i."});

  const std::vector<size_t> subset = nested_fraction(
      data.train_idx, cfg.train_fraction,
      derive_rng(cfg.seed, {hash_str("fraction")}));
  for (size_t i : subset)
    if (data.records[i].pixels.numel() == 0)
      throw DataError("pretrain_mmcl: record " + data.records[i].subject_id +
                      " has no paired image");
  const int64_t n = static_cast<int64_t>(subset.size());
  if (n < 2) throw DataError("pretrain_mmcl: need at least 2 paired records");
  const int64_t bsz = std::min<int64_t>(cfg.batch_size, n);
  const int64_t batches = std::max<int64_t>(n / bsz, 1);
  const int64_t total_steps = cfg.epochs * batches;
  const int64_t warm = warm_steps(cfg, total_steps);
  const AugmentationConfig aug =
      cfg.augment ? stage_augmentations(Stage::mmcl) : AugmentationConfig{};
  const float tau = static_cast<float>(cfg.tau);
  const float lambda = static_cast<float>(cfg.lambda);

  int64_t step = 0;
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    std::vector<size_t> order = subset;
    derive_rng(cfg.seed, {hash_str("order"), static_cast<uint64_t>(e)})
        .shuffle(order);
    double esum = 0, esig = 0, eimg = 0;
    for (int64_t b = 0; b < batches; ++b) {
      Tape<float> tape;
      std::vector<Tensor<float>> zs_rows, zi_rows;
      for (int64_t s = b * bsz; s < (b + 1) * bsz; ++s) {
        const TrainRecord& rec = data.records[order[static_cast<size_t>(s)]];
        Rng srng = augment_rng(cfg.seed, rec.subject_id, e);
        Rng irng = derive_rng(cfg.seed, {hash_str("augment_image"),
                                         hash_str(rec.subject_id),
                                         static_cast<uint64_t>(e)});
        Tensor<float> sig = augment_signal(rec.samples, aug, srng);
        Tensor<float> tokens = embed_patches(tape, st, patchify(sig, st.grid));
        Tensor<float> enc = encode_tokens(tape, st, tokens);
        zs_rows.push_back(
            project(tape, st, ops::mean_rows(tape, enc), Modality::signal));
        Tensor<float> img = augment_image(rec.pixels, aug, irng);
        auto [grid_feat, pooled] = image_encode(tape, st, img);
        zi_rows.push_back(project(tape, st, pooled, Modality::image));
      }
      Tensor<float> zs = ops::concat_rows(tape, zs_rows);
      Tensor<float> zi = ops::concat_rows(tape, zi_rows);
      ClipLossParts<float> parts = clip_loss(tape, zs, zi, tau, lambda);
      const double total = static_cast<double>(parts.total.data()[0]);
      const double lsig = static_cast<double>(parts.l_sig.data()[0]);
      const double limg = static_cast<double>(parts.l_img.data()[0]);
      check_finite(total, "mmcl", e, step);
      opt.zero_grad();
      tape.backward(parts.total);
      const float lr = cosine_warmup_lr(step, total_steps, warm,
                                        static_cast<float>(cfg.base_lr));
      opt.step(lr);
      esum += total;
      esig += lsig;
      eimg += limg;
      log_line(log, "stage=mmcl epoch=" + std::to_string(e) + " step=" +
                        std::to_string(step) + " " + kv_num("loss", total) +
                        " " + kv_num("l_sig", lsig) + " " +
                        kv_num("l_img", limg) + " " + kv_num("lr", lr));
      ++step;
    }
    result.epoch_loss.push_back(esum / double(batches));
    result.epoch_loss_sig.push_back(esig / double(batches));
    result.epoch_loss_img.push_back(eimg / double(batches));
  }
  return result;
}

std::pair<Tensor<float>, Tensor<float>> project_pairs(
    const TrainSet& data, const std::vector<size_t>& idx,
    const ModelState<float>& st) {
  if (idx.empty()) throw DataError("project_pairs: empty record list");
  const int64_t k = st.cfg.proj_out;
  Tensor<float> zs = Tensor<float>::zeros({int64_t(idx.size()), k});
  Tensor<float> zi = Tensor<float>::zeros({int64_t(idx.size()), k});
  for (size_t r = 0; r < idx.size(); ++r) {
    const TrainRecord& rec = data.records[idx[r]];
    if (rec.pixels.numel() == 0)
      throw DataError("project_pairs: record " + rec.subject_id +
                      " has no paired image");
    Tape<float> tape;
    tape.set_recording(false);
    Tensor<float> tokens =
        embed_patches(tape, st, patchify(rec.samples, st.grid));
    Tensor<float> enc = encode_tokens(tape, st, tokens);
    Tensor<float> zrow =
        project(tape, st, ops::mean_rows(tape, enc), Modality::signal);
    auto [grid_feat, pooled] = image_encode(tape, st, rec.pixels);
    Tensor<float> irow = project(tape, st, pooled, Modality::image);
    std::copy(zrow.data(), zrow.data() + k, zs.data() + int64_t(r) * k);
    std::copy(irow.data(), irow.data() + k, zi.data() + int64_t(r) * k);
  }
  return {zs, zi};
}

double retrieval_top1(const TrainSet& data, const std::vector<size_t>& idx,
                      const ModelState<float>& st) {
  auto [zs, zi] = project_pairs(data, idx, st);
  const int64_t n = zs.dim(0), k = zs.dim(1);
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    double best_sim = -2;
    for (int64_t j = 0; j < n; ++j) {
      double sim = 0;
      for (int64_t c = 0; c < k; ++c)
        sim += double(zs.data()[i * k + c]) * double(zi.data()[j * k + c]);
      if (sim > best_sim) {
        best_sim = sim;
        best = j;
      }
    }
    if (best == i) ++hits;
  }
  return double(hits) / double(n);
}

EvalScores eval_predictions(const TrainSet& data,
                            const std::vector<size_t>& idx,
                            const ModelState<float>& st,
                            const std::string& target) {
  EvalScores out;
  for (size_t i : idx) {
    const TrainRecord& rec = data.records[i];
    Tape<float> tape;
    tape.set_recording(false);
    Tensor<float> tokens =
        embed_patches(tape, st, patchify(rec.samples, st.grid));
    Tensor<float> enc = encode_tokens(tape, st, tokens);
    Tensor<float> pooled = attention_pool(tape, st, enc);
    Tensor<float> logits = head_forward(tape, st, pooled);
    double score;
    if (st.cfg.head_out == 2)
      score = double(logits.data()[1]) - double(logits.data()[0]);
    else
      score = double(logits.data()[0]);
    out.y_pred.push_back(score);
    out.y_true.push_back(record_label(rec, target));
  }
  return out;
}

namespace {

std::vector<int> to_int_labels(const std::vector<double>& y) {
  std::vector<int> out(y.size());
  for (size_t i = 0; i < y.size(); ++i) out[i] = y[i] > 0.5 ? 1 : 0;
  return out;
}

// Layer-wise lr multipliers for the fine-tuned signal tower: encoder block k
// of depth d runs at layer_decay^(d-k), the patch embedding one power below
// the first block, the final norm, pooling head, and task head at 1.
std::map<std::string, float> finetune_lr_scales(const ModelState<float>& st,
                                                double layer_decay) {
  std::map<std::string, float> scales;
  const int64_t depth = st.cfg.enc_depth;
  for (const auto& item : st.params.items()) {
    const std::string& name = item.name;
    float s = 1.0f;
    if (name_has_prefix(name, "patch_proj."))
      s = static_cast<float>(std::pow(layer_decay, double(depth + 1)));
    else if (name_has_prefix(name, "enc.")) {
      const size_t dot = name.find('.', 4);
      const std::string tag = name.substr(4, dot - 4);
      if (!tag.empty() && tag.find_first_not_of("0123456789") == std::string::npos) {
        const int64_t k = std::stoll(tag);
        s = static_cast<float>(std::pow(layer_decay, double(depth - k)));
      }
    }
    scales[name] = s;
  }
  return scales;
}

}  // namespace

FinetuneResult finetune(const TrainSet& data, const ModelState<float>* init,
                        const StageConfig& cfg, const ModelConfig& mc,
                        std::ostream* log) {
  const bool cls = cfg.target == "disease";
  ModelConfig mc2 = mc;
  mc2.head_out = cls ? 2 : 1;
  FinetuneResult result;
  result.state = ModelState<float>::init(mc2, cfg.seed);
  ModelState<float>& st = result.state;

  if (init) {
    for (const auto& item : init->params.items()) {
      if (name_has_prefix(item.name, "head.") ||
          name_has_prefix(item.name, "pool."))
        continue;
      if (!st.params.has(item.name)) continue;
      Tensor<float>& dst = st.params.at(item.name);
      if (dst.shape() != item.tensor.shape())
        throw ShapeError("finetune: pretrained parameter " + item.name +
                         " has a different shape");
      const auto& src = item.tensor.value_vector();
      std::copy(src.begin(), src.end(), dst.data());
    }
  }
  enable_grads(st);

  AdamW<float> opt(0.9f, 0.999f, 1e-8f, static_cast<float>(cfg.weight_decay));
  add_slots(opt, st, {"patch_proj.", "enc.", "pool.", "head."},
            finetune_lr_scales(st, cfg.layer_decay));

  // Fraction subsets come first so low-data runs of the same seed nest.
  std::vector<size_t> train_use;
  double t_mean = 0, t_std = 1;
  if (cls) {
    std::vector<size_t> pos_pool, neg_pool;
    for (size_t i : data.train_idx)
      (record_label(data.records[i], cfg.target) > 0.5 ? pos_pool : neg_pool)
          .push_back(i);
    if (pos_pool.empty() || neg_pool.empty())
      throw DataError("finetune: training pool holds a single class");
    std::vector<size_t> pos = nested_fraction(
        pos_pool, cfg.train_fraction,
        derive_rng(cfg.seed, {hash_str("fraction"), hash_str("pos")}));
    std::vector<size_t> neg = nested_fraction(
        neg_pool, cfg.train_fraction,
        derive_rng(cfg.seed, {hash_str("fraction"), hash_str("neg")}));
    result.train_subset = pos;
    result.train_subset.insert(result.train_subset.end(), neg.begin(),
                               neg.end());
    if (neg.size() < pos.size())
      throw DataError("finetune: not enough negatives to balance the classes");
    derive_rng(cfg.seed, {hash_str("negatives")}).shuffle(neg);
    neg.resize(pos.size());
    train_use = pos;
    train_use.insert(train_use.end(), neg.begin(), neg.end());
  } else {
    train_use = nested_fraction(data.train_idx, cfg.train_fraction,
                                derive_rng(cfg.seed, {hash_str("fraction")}));
    result.train_subset = train_use;
    if (train_use.size() < 2)
      throw DataError("finetune: regression needs at least 2 training records");
    double sum = 0, sq = 0;
    for (size_t i : train_use) {
      const double y = record_label(data.records[i], cfg.target);
      sum += y;
      sq += y * y;
    }
    t_mean = sum / double(train_use.size());
    const double var = sq / double(train_use.size()) - t_mean * t_mean;
    if (!(var > 0))
      throw DataError("finetune: regression target is constant on the "
                      "training subset");
    t_std = std::sqrt(var);
  }

  const AugmentationConfig aug =
      cfg.augment ? stage_augmentations(cfg.stage) : AugmentationConfig{};
  const float drop_path = static_cast<float>(cfg.drop_path);
  const float smoothing = static_cast<float>(cfg.label_smoothing);
  const int64_t n = static_cast<int64_t>(train_use.size());
  const int64_t bsz = std::min<int64_t>(cfg.batch_size, n);
  const int64_t batches = (n + bsz - 1) / bsz;
  const int64_t total_steps = cfg.epochs * batches;
  const int64_t warm = warm_steps(cfg, total_steps);
  const std::string stage_tag = stage_name(cfg.stage);
  const std::string val_key = cls ? "val_auc" : "val_r";

  std::vector<std::vector<float>> best_snap = snapshot_params(st);
  int64_t step = 0;
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    std::vector<size_t> order = train_use;
    derive_rng(cfg.seed, {hash_str("order"), static_cast<uint64_t>(e)})
        .shuffle(order);
    double epoch_sum = 0;
    for (int64_t b = 0; b < batches; ++b) {
      const int64_t lo = b * bsz;
      const int64_t hi = std::min<int64_t>(lo + bsz, n);
      const float inv = 1.0f / static_cast<float>(hi - lo);
      opt.zero_grad();
      for (int64_t s = lo; s < hi; ++s) {
        const TrainRecord& rec = data.records[order[static_cast<size_t>(s)]];
        Rng arng = augment_rng(cfg.seed, rec.subject_id, e);
        Tensor<float> sig = augment_signal(rec.samples, aug, arng);
        Tape<float> tape;
        Tensor<float> tokens = embed_patches(tape, st, patchify(sig, st.grid));
        Tensor<float> enc =
            encode_tokens(tape, st, tokens, drop_path, &arng);
        Tensor<float> pooled = attention_pool(tape, st, enc);
        Tensor<float> logits = head_forward(tape, st, pooled);
        Tensor<float> loss;
        if (cls) {
          const int64_t label =
              record_label(rec, cfg.target) > 0.5 ? 1 : 0;
          loss = ops::cross_entropy(tape, logits, {label}, smoothing);
        } else {
          const float ty = static_cast<float>(
              (record_label(rec, cfg.target) - t_mean) / t_std);
          loss = ops::mse(tape, logits,
                          Tensor<float>::from_vector({1, 1}, {ty}));
        }
        const double lv = static_cast<double>(loss.data()[0]);
        check_finite(lv, stage_tag.c_str(), e, step);
        epoch_sum += lv;
        tape.backward(ops::scale(tape, loss, inv));
      }
      const float lr = cosine_warmup_lr(step, total_steps, warm,
                                        static_cast<float>(cfg.base_lr));
      opt.step(lr);
      ++step;
    }

    EvalScores val = eval_predictions(data, data.val_idx, st, cfg.target);
    const double metric =
        cls ? roc_auc(val.y_pred, to_int_labels(val.y_true))
            : pearson(val.y_true, val.y_pred);
    result.val_history.push_back(metric);
    if (result.best_epoch < 0 || metric > result.best_val) {
      result.best_val = metric;
      result.best_epoch = e;
      best_snap = snapshot_params(st);
    }
    log_line(log, "stage=" + stage_tag + " target=" + cfg.target + " seed=" +
                      std::to_string(cfg.seed) + " epoch=" +
                      std::to_string(e) + " " +
                      kv_num("train_loss", epoch_sum / double(n)) + " " +
                      val_key + "=" + format_double(metric) + " " +
                      kv_num("best", result.best_val));
    if (e - result.best_epoch >= cfg.patience) break;
  }

  restore_params(st, best_snap);
  EvalScores test = eval_predictions(data, data.test_idx, st, cfg.target);
  if (cls) {
    result.test_auc = roc_auc(test.y_pred, to_int_labels(test.y_true));
  } else {
    for (double& p : test.y_pred) p = p * t_std + t_mean;
    result.test_r = pearson(test.y_true, test.y_pred);
    result.test_r2 = r_squared(test.y_true, test.y_pred);
  }
  result.test_scores = std::move(test);
  return result;
}

PretrainedSet run_pretraining(const TrainSet& data, const StageConfig& mae_cfg,
                              const StageConfig& mmcl_cfg,
                              const ModelConfig& mc, std::ostream* log) {
  MaeResult mae = pretrain_mae(data, mae_cfg, mc, log);
  MmclResult rand = pretrain_mmcl(
      data, ModelState<float>::init(mc, mmcl_cfg.seed), mmcl_cfg, log);
  MmclResult mdm = pretrain_mmcl(data, mae.state, mmcl_cfg, log);
  return PretrainedSet{std::move(mae.state), std::move(rand.state),
                       std::move(mdm.state)};
}

const std::vector<std::string> kAblationArms = {"supervised", "mdm", "mmcl",
                                                "mmcl_mdm"};

AblationConfig::AblationConfig() {
  finetune_cls = stage_defaults(Stage::finetune_cls);
  finetune_cls.epochs = 10;
  finetune_reg = stage_defaults(Stage::finetune_reg);
  finetune_reg.target = "PHV";
  finetune_reg.stage = Stage::finetune_reg;
  finetune_reg.epochs = 8;
  finetune_reg.train_fraction = 0.25;
}

namespace {

ArmStats summarize(std::vector<double> values, std::vector<double> r2) {
  ArmStats stats;
  stats.per_seed = std::move(values);
  stats.per_seed_r2 = std::move(r2);
  double sum = 0;
  for (double v : stats.per_seed) sum += v;
  stats.mean = sum / double(stats.per_seed.size());
  double sq = 0;
  for (double v : stats.per_seed) sq += (v - stats.mean) * (v - stats.mean);
  stats.stddev = stats.per_seed.size() > 1
                     ? std::sqrt(sq / double(stats.per_seed.size() - 1))
                     : 0.0;
  if (!stats.per_seed_r2.empty()) {
    double s2 = 0;
    for (double v : stats.per_seed_r2) s2 += v;
    stats.mean_r2 = s2 / double(stats.per_seed_r2.size());
  }
  return stats;
}

const ModelState<float>* arm_init(const std::string& arm,
                                  const PretrainedSet& pre) {
  if (arm == "supervised") return nullptr;
  if (arm == "mdm") return &pre.mae;
  if (arm == "mmcl") return &pre.mmcl_rand;
  return &pre.mmcl_mdm;
}

ArmStats run_arm(const TrainSet& data, const PretrainedSet& pre,
                 const std::string& arm, StageConfig cfg,
                 const std::vector<uint64_t>& seeds, const ModelConfig& mc,
                 std::ostream* log) {
  const bool cls = cfg.target == "disease";
  if (arm == "supervised") cfg.stage = Stage::supervised_scratch;
  std::vector<double> vals, r2s;
  for (uint64_t seed : seeds) {
    cfg.seed = seed;
    FinetuneResult r = finetune(data, arm_init(arm, pre), cfg, mc, log);
    vals.push_back(cls ? r.test_auc : r.test_r);
    if (!cls) r2s.push_back(r.test_r2);
  }
  return summarize(std::move(vals), std::move(r2s));
}

}  // namespace

AblationReport run_ablation_suite(const TrainSet& data,
                                  const PretrainedSet& pre,
                                  const AblationConfig& cfg,
                                  const ModelConfig& mc, std::ostream* log) {
  AblationReport report;
  for (const std::string& target : cfg.targets) {
    const bool cls = target == "disease";
    StageConfig base = cls ? cfg.finetune_cls : cfg.finetune_reg;
    base.target = target;
    base.stage = cls ? Stage::finetune_cls : Stage::finetune_reg;
    for (const std::string& arm : kAblationArms)
      report.by_target[target][arm] =
          run_arm(data, pre, arm, base, cfg.seeds, mc, log);
  }
  if (report.by_target.count("disease")) {
    for (double f : cfg.fractions) {
      if (f == 1.0) {
        report.by_fraction[f] = report.by_target.at("disease");
        continue;
      }
      StageConfig base = cfg.finetune_cls;
      base.target = "disease";
      base.stage = Stage::finetune_cls;
      base.train_fraction = f;
      for (const std::string& arm : kAblationArms)
        report.by_fraction[f][arm] =
            run_arm(data, pre, arm, base, cfg.seeds, mc, log);
    }
  }
  return report;
}

KvMap ablation_report_kv(const AblationReport& report) {
  KvMap kv;
  for (const auto& [target, arms] : report.by_target) {
    const bool cls = target == "disease";
    const std::string metric = cls ? "auc" : "r";
    for (const auto& [arm, stats] : arms) {
      const std::string base = target + "." + metric + "." + arm;
      kv[base + ".mean"] = format_double(stats.mean);
      kv[base + ".std"] = format_double(stats.stddev);
      for (size_t i = 0; i < stats.per_seed.size(); ++i)
        kv[base + ".run" + std::to_string(i)] =
            format_double(stats.per_seed[i]);
      if (!cls) kv[target + ".r2." + arm + ".mean"] =
          format_double(stats.mean_r2);
    }
  }
  for (const auto& [fraction, arms] : report.by_fraction) {
    for (const auto& [arm, stats] : arms) {
      const std::string base =
          "disease.frac." + format_double(fraction) + "." + arm;
      kv[base + ".mean"] = format_double(stats.mean);
      kv[base + ".std"] = format_double(stats.stddev);
    }
  }
  return kv;
}

std::string ablation_report_table(const AblationReport& report) {
  char buf[160];
  std::string out;
  for (const auto& [target, arms] : report.by_target) {
    const bool cls = target == "disease";
    std::snprintf(buf, sizeof(buf), "%-12s %-12s %18s %10s\n", "target",
                  "arm", cls ? "auc mean+/-std" : "r mean+/-std",
                  cls ? "" : "r2 mean");
    out += buf;
    for (const std::string& arm : kAblationArms) {
      if (!arms.count(arm)) continue;
      const ArmStats& s = arms.at(arm);
      if (cls)
        std::snprintf(buf, sizeof(buf), "%-12s %-12s %8.4f +/- %.4f\n",
                      target.c_str(), arm.c_str(), s.mean, s.stddev);
      else
        std::snprintf(buf, sizeof(buf), "%-12s %-12s %8.4f +/- %.4f %10.4f\n",
                      target.c_str(), arm.c_str(), s.mean, s.stddev,
                      s.mean_r2);
      out += buf;
    }
    out += '\n';
  }
  if (!report.by_fraction.empty()) {
    out += "classification by train fraction (auc mean +/- std)\n";
    for (const auto& [fraction, arms] : report.by_fraction) {
      for (const std::string& arm : kAblationArms) {
        if (!arms.count(arm)) continue;
        const ArmStats& s = arms.at(arm);
        std::snprintf(buf, sizeof(buf), "%-8s %-12s %8.4f +/- %.4f\n",
                      format_double(fraction).c_str(), arm.c_str(), s.mean,
                      s.stddev);
        out += buf;
      }
    }
  }
  return out;
}

}  // namespace mmfuse

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmfuse/config.hpp"
#include "mmfuse/io.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/preprocess.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

// One subject held in memory, signal baseline-removed and lead-group
// normalized, image zero-padded and min-max normalized. pixels is empty when
// the set was loaded without images.
struct TrainRecord {
  std::string subject_id;
  Tensor<float> samples;
  Tensor<float> pixels;
  double disease = 0;
  double phv = 0;
  double phe = 0;
};

struct TrainSet {
  std::vector<TrainRecord> records;
  std::vector<size_t> train_idx;
  std::vector<size_t> val_idx;
  std::vector<size_t> test_idx;
};

TrainSet load_train_set(const DatasetIndex& index, bool with_images);

// target is one of disease, PHV, PHE.
double record_label(const TrainRecord& rec, const std::string& target);

// Fixed per-stage augmentation recipes; evaluation always runs unaugmented.
AugmentationConfig stage_augmentations(Stage stage);

// Stream of augmentation draws for one record in one epoch, independent of
// batch composition and visit order.
Rng augment_rng(uint64_t seed, const std::string& subject_id, int64_t epoch);

// Deterministic shuffle of pool followed by a ceil(fraction * size) prefix,
// so smaller fractions are subsets of larger ones for the same rng seed.
std::vector<size_t> nested_fraction(const std::vector<size_t>& pool,
                                    double fraction, Rng rng);

// Deep copy: fresh buffers, same values and trainable flags, gradients
// dropped.
ModelState<float> clone_state(const ModelState<float>& st);

// Values of every trainable parameter, in registration order.
std::vector<std::vector<float>> snapshot_params(const ModelState<float>& st);
void restore_params(ModelState<float>& st,
                    const std::vector<std::vector<float>>& snap);

struct MaeResult {
  ModelState<float> state;
  std::vector<double> epoch_loss;
};

// Masked-reconstruction pretraining over the train split. Loss diverging to
// a non-finite value raises DataError.
MaeResult pretrain_mae(const TrainSet& data, const StageConfig& cfg,
                       const ModelConfig& mc, std::ostream* log);

// Unaugmented reconstruction loss over the given records with one
// deterministic mask per record.
double mae_eval_loss(const TrainSet& data, const std::vector<size_t>& idx,
                     const ModelState<float>& st, const StageConfig& cfg);

struct MmclResult {
  ModelState<float> state;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_loss_sig;
  std::vector<double> epoch_loss_img;
};

// Contrastive alignment over paired records starting from init (an MAE state
// or a fresh one). Records without images raise DataError. Batches with
// fewer than two pairs are dropped.
MmclResult pretrain_mmcl(const TrainSet& data, const ModelState<float>& init,
                         const StageConfig& cfg, std::ostream* log);

// Unit projections of every listed record, unaugmented: one row per record.
std::pair<Tensor<float>, Tensor<float>> project_pairs(
    const TrainSet& data, const std::vector<size_t>& idx,
    const ModelState<float>& st);

// Fraction of rows whose own partner is the nearest column under cosine
// similarity, signal rows against the image gallery.
double retrieval_top1(const TrainSet& data, const std::vector<size_t>& idx,
                      const ModelState<float>& st);

struct EvalScores {
  std::vector<double> y_true;
  std::vector<double> y_pred;
};

// Unaugmented head predictions: class-1 logit margin for classification,
// raw head output for regression. Deterministic for a fixed state.
EvalScores eval_predictions(const TrainSet& data,
                            const std::vector<size_t>& idx,
                            const ModelState<float>& st,
                            const std::string& target);

struct FinetuneResult {
  ModelState<float> state;
  int64_t best_epoch = -1;
  double best_val = 0;
  std::vector<double> val_history;
  double test_auc = 0;
  double test_r = 0;
  double test_r2 = 0;
  EvalScores test_scores;
  std::vector<size_t> train_subset;
};

// Supervised training on top of init, or from scratch when init is null.
// Classification trains on all positives plus an equally sized random
// negative sample (single-class pools raise DataError) and early-stops on
// validation AUC; regression trains on the fraction subset with targets
// standardized by train statistics and early-stops on validation r. Returns
// the best-validation checkpoint and its test metrics.
FinetuneResult finetune(const TrainSet& data, const ModelState<float>* init,
                        const StageConfig& cfg, const ModelConfig& mc,
                        std::ostream* log);

struct PretrainedSet {
  ModelState<float> mae;
  ModelState<float> mmcl_rand;
  ModelState<float> mmcl_mdm;
};

PretrainedSet run_pretraining(const TrainSet& data, const StageConfig& mae_cfg,
                              const StageConfig& mmcl_cfg,
                              const ModelConfig& mc, std::ostream* log);

struct AblationConfig {
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<double> fractions = {1.0, 0.1, 0.01};
  std::vector<std::string> targets = {"disease", "PHV", "PHE"};
  StageConfig finetune_cls;
  StageConfig finetune_reg;

  AblationConfig();
};

struct ArmStats {
  std::vector<double> per_seed;
  double mean = 0;
  double stddev = 0;
  std::vector<double> per_seed_r2;
  double mean_r2 = 0;
};

// Keyed by arm name: supervised, mdm, mmcl, mmcl_mdm.
struct AblationReport {
  // target -> arm -> stats (AUC for disease, r for PHV/PHE).
  std::map<std::string, std::map<std::string, ArmStats>> by_target;
  // fraction -> arm -> AUC stats for the classification target.
  std::map<double, std::map<std::string, ArmStats>> by_fraction;
};

extern const std::vector<std::string> kAblationArms;

AblationReport run_ablation_suite(const TrainSet& data,
                                  const PretrainedSet& pre,
                                  const AblationConfig& cfg,
                                  const ModelConfig& mc, std::ostream* log);

// Machine-readable key=value form and the human table, both deterministic.
KvMap ablation_report_kv(const AblationReport& report);
std::string ablation_report_table(const AblationReport& report);

}  // namespace mmfuse

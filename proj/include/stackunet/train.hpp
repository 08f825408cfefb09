#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stackunet/dataset.hpp"
#include "stackunet/model.hpp"
#include "stackunet/preprocess.hpp"

namespace stackunet {

/// Optimizer and loop settings. Every field lands in the run's config
/// snapshot so a run directory fully describes the run.
struct TrainConfig {
    double learning_rate = 1e-5;
    int batch_size = 8;
    int max_epochs = 300;
    double eps_loss = 1.0;  // smoothing inside the -log dice loss
    int resolution_h = 256, resolution_w = 256;
    AugmentSpec augment;
    bool augment_enabled = true;
    uint64_t seed = 0;
    int checkpoint_every = 0;      // also write last.ckpt every N epochs; 0 = at end only
    int early_stop_patience = 50;  // epochs without a new best; <= 0 disables
    double threshold = 0.5;        // binarization for tracked Dice / IOU
    std::string organ = "disc";    // disc or cup: which masks are the target
    double adam_beta1 = 0.9, adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Train on the averaged annotator map instead of its thresholded mask.
    /// Requires augmentation off (the warp pipeline moves binary masks).
    bool soft_targets = false;
    /// Stop once the tracked Dice reaches this value; 0 disables.
    double stop_at_dice = 0.0;

    void validate(const CascadeSpec& model_spec) const;
};

/// Adam with bias correction. Step count is shared across all parameters.
struct Adam {
    double lr, beta1, beta2, eps;
    int64_t t = 0;

    Adam(double lr_, double b1 = 0.9, double b2 = 0.999, double eps_ = 1e-8)
        : lr(lr_), beta1(b1), beta2(b2), eps(eps_) {}

    void step(std::vector<Param>& params);
};

/// One image prepared for the loop: contrast-normalized, resized, with its
/// binary target and the averaged annotator map at the same resolution.
struct LoadedSample {
    cv::Mat image;       // BGR, training resolution
    BinaryMask mask;     // thresholded annotator average
    ProbabilityMap soft; // annotator average
    size_t record_index = 0;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double eval_loss = 0.0;  // on the val split; on train (un-augmented) when no val exists
    double eval_dice = 0.0;
    double eval_iou = 0.0;
    double seconds = 0.0;
};

struct RunReport {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    double best_eval_dice = 0.0;
    double best_eval_iou = 0.0;
    std::filesystem::path best_checkpoint;  // empty when run_dir was empty
    std::filesystem::path run_dir;
    int train_images = 0;
    int eval_images = 0;
    std::string stop_reason;  // max_epochs, patience, or stop_at_dice
    double learning_rate_used = 0.0;
    double learning_rate_default = 1e-5;
    /// Which split protocol produced the train/eval partition.
    std::string split_protocol;
};

/// Loads every record of the split, applies CLAHE and the resize to the
/// training resolution. Records without masks for the organ are skipped;
/// n_skipped reports how many.
std::vector<LoadedSample> load_split_samples(const DatasetManifest& data, Split split,
                                             const std::string& organ, const TrainConfig& cfg,
                                             int* n_skipped = nullptr);

/// The optimization loop on prepared samples. With a non-empty run_dir,
/// persists config snapshot, per-epoch metrics CSV, report JSON, and
/// checkpoints (best.ckpt on every improvement, last.ckpt at the end).
/// split_protocol is echoed into the report so results name their split.
RunReport train_on_samples(Model& model, const std::vector<LoadedSample>& train_samples,
                           const std::vector<LoadedSample>& eval_samples, const TrainConfig& cfg,
                           const std::filesystem::path& run_dir,
                           const std::string& split_protocol = "");

/// Splits the manifest samples by assignment and runs train_on_samples.
/// Also writes split.csv into the run directory.
RunReport train(Model& model, const DatasetManifest& data, const TrainConfig& cfg,
                const std::filesystem::path& run_dir);

/// Two-stage pipeline: crop every sample to the disc region (ground-truth
/// region in oracle mode, else the disc model's prediction), train the cup
/// model on the crops, and evaluate with predictions pasted back into
/// full-frame coordinates.
struct CupPipelineConfig {
    int margin = 20;          // crop gap around the disc bounding box, pixels
    bool oracle_crop = false; // use ground-truth disc regions instead of predictions
};

struct CupPipelineReport {
    RunReport train_report;
    int skipped_train = 0;   // empty disc region at train time
    int fallback_eval = 0;   // empty disc region at eval time; full frame used
    double eval_dice = 0.0;  // full-frame cup metrics over the eval split
    double eval_iou = 0.0;
    int eval_images = 0;
};

CupPipelineReport train_cup_pipeline(Model* disc_model, Model& cup_model,
                                     const DatasetManifest& data, const TrainConfig& cfg,
                                     const CupPipelineConfig& pipeline,
                                     const std::filesystem::path& run_dir);

/// One full training run per block count, otherwise identical config and
/// seed; reports best validation metrics per count.
struct SweepRow {
    int n_blocks = 0;
    double disc_iou = 0.0, disc_dice = 0.0;
    bool has_cup = false;
    double cup_iou = 0.0, cup_dice = 0.0;
};

std::vector<SweepRow> sweep_blocks(const std::vector<int>& block_counts,
                                   const CascadeSpec& base_spec, const DatasetManifest& data,
                                   const TrainConfig& cfg, bool include_cup,
                                   const std::filesystem::path& run_dir);

// Building blocks shared with evaluation.
Tensor samples_to_batch(const std::vector<LoadedSample>& samples, const std::vector<size_t>& idx);
ProbabilityMap predict_map(Model& model, const cv::Mat& image_at_resolution);

}  // namespace stackunet

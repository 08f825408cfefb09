#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stackunet/dataset.hpp"
#include "stackunet/model.hpp"
#include "stackunet/train.hpp"

namespace stackunet {

struct EvalOptions {
    double threshold = 0.5;
    int resolution_h = 256, resolution_w = 256;  // network input size
    int margin = 20;           // crop gap around the disc region for the cup stage
    bool oracle_crop = false;  // crop cup inputs by the ground-truth disc region
    /// Smoothing for the reported prediction-vs-annotator-average soft Dice
    /// column; kept tiny so the column tracks the unsmoothed formula.
    double soft_eps = 1e-9;
};

/// One image, one organ. Metrics are computed at the native mask resolution
/// after resizing the prediction back.
struct EvalRow {
    std::string image;
    std::string organ;  // disc or cup
    double iou = 0.0;
    double dice = 0.0;
    double soft_dice_vs_avg = 0.0;  // probability map against the annotator average
    bool fallback_crop = false;     // cup stage fell back to a full-frame crop
};

struct EvalSummary {
    std::string source;  // computed or human_agreement
    std::string organ;
    int n = 0;
    double mean_iou = 0.0;
    double mean_dice = 0.0;
    double mean_soft_dice = 0.0;  // zero for human_agreement rows
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<EvalSummary> summaries;
    /// Paths of exported case panels, keyed like "disc_best", "cup_worst".
    std::map<std::string, std::filesystem::path> panels;
};

/// Runs the model(s) over the split, writes per_image.csv, summary.csv,
/// best/worst case panels, and published_results.csv into out_dir (pass an
/// empty path to skip all files). The aggregate means are recomputed from the
/// written per-image CSV and must match the accumulated values.
EvalReport evaluate_model(Model& disc_model, Model* cup_model, const DatasetManifest& data,
                          Split split, const EvalOptions& opt,
                          const std::filesystem::path& out_dir);

/// Externally reported benchmark scores on these datasets, for side-by-side
/// comparison. Kept apart from computed rows; every row carries
/// source = "published".
struct PublishedRow {
    const char* model;
    const char* dataset;
    const char* organ;
    double iou;
    double dice;
};
const std::vector<PublishedRow>& published_results();
void write_published_results_csv(const std::filesystem::path& path);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
/// Line plot of IOU and Dice against the block count.
void write_sweep_plot(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

}  // namespace stackunet

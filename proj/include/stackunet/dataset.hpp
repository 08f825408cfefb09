#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stackunet/metrics.hpp"

namespace stackunet {

enum class Split { none, train, val, test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

/// One fundus image with its per-annotator masks. Cup masks may be absent
/// (disc-only datasets). person_id groups images of the same person for
/// leakage-free splitting; it defaults to the image filename stem.
struct SampleRecord {
    std::string image_path;
    std::vector<std::string> disc_mask_paths;
    std::vector<std::string> cup_mask_paths;
    std::string person_id;
    std::string dataset_tag;
};

struct DatasetManifest {
    std::vector<SampleRecord> records;
    std::filesystem::path base_dir;  // relative paths resolve against this

    /// Parallel to records; Split::none until a split is assigned.
    std::vector<Split> split;
    /// Parallel to records; -1 until folds are assigned.
    std::vector<int> fold;
    /// How the current split assignment was produced (set by the split
    /// helpers); lands in run reports so results name their protocol.
    std::string split_origin;

    size_t size() const { return records.size(); }
    std::filesystem::path resolve(const std::string& path) const;

    /// Indices of records assigned to s (every index when s == Split::none).
    std::vector<size_t> indices_in(Split s) const;
    std::vector<std::string> person_ids() const;  // unique, in first-appearance order
};

/// Reads a CSV manifest (columns image_path, disc_masks, cup_masks, person_id,
/// dataset_tag; mask lists separated by ';'). With validate set, decodes every
/// referenced file and reports all failures together.
DatasetManifest load_manifest(const std::filesystem::path& path, bool validate = true);

/// Writes records (and split assignments, when present) so that a reload is
/// field-identical.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Persists and restores the record -> split assignment as image_path,split
/// rows, keyed by image path so the pairing survives record reordering.
void write_split_file(const DatasetManifest& manifest, const std::filesystem::path& path);
void apply_split_file(DatasetManifest& manifest, const std::filesystem::path& path);

/// Pixelwise mean of the annotator masks; values are multiples of 1/n.
ProbabilityMap average_annotators(const std::vector<BinaryMask>& masks);

/// Randomly partitions persons (never single images) into train and val until
/// the validation image count reaches val_fraction of the dataset.
/// Deterministic for a fixed seed.
void grouped_split(DatasetManifest& manifest, double val_fraction, uint64_t seed);

/// Person-grouped folds with sizes differing by at most one person.
void kfold_split(DatasetManifest& manifest, int k, uint64_t seed);

/// Turns a fold assignment into a train/val split with fold `val_fold` as val.
void select_fold(DatasetManifest& manifest, int val_fold);

struct AgreementReport {
    struct Organ {
        double mean_iou = 0.0;
        double mean_dice = 0.0;
        int records_used = 0;
        int records_skipped = 0;  // fewer than two annotators
    };
    Organ disc, cup;
};

/// Mean pairwise inter-annotator IOU and Dice per organ: every unordered
/// annotator pair per record, averaged over pairs, then over records.
AgreementReport human_agreement(const DatasetManifest& manifest);

}  // namespace stackunet

#pragma once

#include <filesystem>
#include <opencv2/core.hpp>

#include "stackunet/dataset.hpp"
#include "stackunet/metrics.hpp"
#include "stackunet/rng.hpp"

namespace stackunet {

/// Controls for the rendered fundus-like dataset: elliptical bright disc with
/// a contained cup on a noisy dark background, several images per person with
/// jittered geometry, optional extra annotators with perturbed masks.
struct SynthSpec {
    int n_images = 60;
    int n_persons = 20;
    int n_annotators = 1;
    int size = 128;  // square images
    uint64_t seed = 1;

    void validate() const;
};

struct SynthSample {
    cv::Mat image;  // BGR
    std::vector<BinaryMask> disc_annots;  // index 0 is the exact rendered mask
    std::vector<BinaryMask> cup_annots;
};

/// Renders one image plus masks. Geometry is drawn from the rng; person_style
/// biases it so images sharing a style look alike.
SynthSample render_fundus(Rng& rng, int size, int n_annotators, uint64_t person_style);

/// Writes images, masks, and manifest.csv under dir and returns the loaded
/// manifest. Persons are assigned round-robin.
DatasetManifest generate_synthetic_dataset(const SynthSpec& spec,
                                           const std::filesystem::path& dir);

}  // namespace stackunet

#pragma once

#include <cstdint>
#include <filesystem>
#include <opencv2/core.hpp>

#include "stackunet/metrics.hpp"
#include "stackunet/rng.hpp"
#include "stackunet/tensor.hpp"

namespace stackunet {

/// Closed interval for a sampled transform parameter.
struct Range {
    double lo = 0.0, hi = 0.0;

    bool degenerate() const { return lo == hi; }
};

/// Parameter ranges for the random geometric transforms. Sampling order is
/// fixed (rotation, zoom, shift x, shift y, shear, hflip, vflip) and every
/// parameter is drawn even when its range is degenerate, so a seeded rng
/// stream stays aligned across configurations.
struct AugmentSpec {
    Range rotation_deg{-25.0, 25.0};
    Range zoom{0.9, 1.1};
    Range shift_frac{-0.10, 0.10};  // fraction of width/height, drawn per axis
    Range shear_deg{-10.0, 10.0};
    double hflip_prob = 0.5;
    double vflip_prob = 0.5;
    uint64_t seed = 0;

    /// Identity spec: all ranges zero and flips off.
    static AugmentSpec none();

    void validate() const;
};

/// A crop window in full-image coordinates, produced by expanding a mask
/// bounding box by `margin` pixels per side and clamping to the image.
struct CropRegion {
    int top = 0, left = 0;
    int height = 0, width = 0;
    int margin = 0;
};

/// Contrast-limited adaptive histogram equalization on the lightness channel
/// (chroma preserved), or on every channel when per_channel is set. A constant
/// image is returned unchanged.
cv::Mat clahe(const cv::Mat& image, double clip_limit = 2.0, cv::Size tile_grid = cv::Size(8, 8),
              bool per_channel = false);

struct AugmentedPair {
    cv::Mat image;
    BinaryMask mask;
};

/// Applies one sampled affine transform (identical for image and mask) with
/// reflect padding. The image is interpolated bilinearly, the mask nearest-
/// neighbor and re-binarized.
AugmentedPair augment(const cv::Mat& image, const BinaryMask& mask, const AugmentSpec& spec,
                      Rng& rng);

/// Tight foreground bounding box expanded by margin and clamped to the mask
/// bounds. Throws when the mask has no foreground.
CropRegion region_from_mask(const BinaryMask& mask, int margin);

cv::Mat crop_by_region(const cv::Mat& image, const CropRegion& region);
BinaryMask crop_by_region(const BinaryMask& mask, const CropRegion& region);

/// Writes a cropped prediction back into full-frame coordinates; pixels
/// outside the region keep their current value.
void paste_region(const ProbabilityMap& crop, const CropRegion& region, ProbabilityMap& full);
void paste_region(const BinaryMask& crop, const CropRegion& region, BinaryMask& full);

/// Bilinear for images and probability maps, nearest-neighbor for masks.
/// Resizing to the current size is the identity.
cv::Mat resize_image(const cv::Mat& image, int h, int w);
BinaryMask resize_mask(const BinaryMask& mask, int h, int w);
ProbabilityMap resize_map(const ProbabilityMap& map, int h, int w);

// Conversions between the raster, metric, and tensor representations.
cv::Mat mask_to_mat(const BinaryMask& mask);            // 0 / 255, CV_8UC1
BinaryMask mat_to_mask(const cv::Mat& m);               // > 127 is foreground
ProbabilityMap mask_to_map(const BinaryMask& mask);

/// BGR 8-bit image to a 1 x 3 x H x W float tensor, RGB channel order, [0, 1].
Tensor image_to_tensor(const cv::Mat& bgr);

/// One sample's single-channel plane of a network output as a probability map.
ProbabilityMap tensor_to_map(const Tensor& t, int sample = 0, int channel = 0);

// Raster I/O. Masks are single-channel PNG, 0 = background, 255 = foreground.
cv::Mat load_image(const std::filesystem::path& path);
BinaryMask load_mask(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const cv::Mat& image);
void save_mask(const std::filesystem::path& path, const BinaryMask& mask);

}  // namespace stackunet

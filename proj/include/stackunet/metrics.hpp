#pragma once

#include <cstdint>
#include <vector>

namespace stackunet {

/// H x W map of foreground probabilities, row-major, each value in [0, 1].
struct ProbabilityMap {
    int h = 0, w = 0;
    std::vector<double> v;

    ProbabilityMap() = default;
    ProbabilityMap(int h_, int w_, double fill = 0.0) : h(h_), w(w_), v(size_t(h_) * w_, fill) {}

    double& at(int y, int x) { return v[size_t(y) * w + x]; }
    double at(int y, int x) const { return v[size_t(y) * w + x]; }
    size_t size() const { return v.size(); }
};

/// H x W binary map, values strictly 0 or 1.
struct BinaryMask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;

    BinaryMask() = default;
    BinaryMask(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), v(size_t(h_) * w_, fill) {}

    uint8_t& at(int y, int x) { return v[size_t(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[size_t(y) * w + x]; }
    size_t size() const { return v.size(); }
    size_t count() const;  // number of foreground pixels
};

struct CdrResult {
    int disc_height = 0;   // vertical extent of disc foreground, pixels
    int cup_height = 0;    // vertical extent of cup foreground, pixels
    double cdr = 0.0;      // cup_height / disc_height
    bool glaucoma_suspect = false;
};

// Real-valued Dice extension: (2*sum(a*b) + eps) / (sum(a^2) + sum(b^2) + eps).
// The smoothing eps keeps the empty-empty pair at 1 and the loss finite.
double soft_dice(const ProbabilityMap& a, const BinaryMask& b, double eps = 1.0);
double soft_dice(const ProbabilityMap& a, const ProbabilityMap& b, double eps = 1.0);

// Training loss -log(soft_dice). Zero iff soft_dice == 1.
double log_dice_loss(const ProbabilityMap& a, const BinaryMask& b, double eps = 1.0);
double log_dice_loss(const ProbabilityMap& a, const ProbabilityMap& b, double eps = 1.0);

// Analytic gradient of log_dice_loss w.r.t. each a_ij.
ProbabilityMap log_dice_loss_grad(const ProbabilityMap& a, const BinaryMask& b, double eps = 1.0);

// Set-theoretic metrics on binary masks. Both return 1 when both masks are empty.
double binary_dice(const BinaryMask& a, const BinaryMask& b);
double iou(const BinaryMask& a, const BinaryMask& b);

// Pixelwise a_ij >= threshold. threshold must lie in (0, 1).
BinaryMask binarize(const ProbabilityMap& a, double threshold = 0.5);

// Cup-to-disc ratio from vertical extents (max row - min row + 1) of the foreground.
// Throws on an empty disc mask; an empty cup yields cdr = 0.
CdrResult cup_to_disc_ratio(const BinaryMask& disc, const BinaryMask& cup,
                            double threshold = 0.65);

// Float-span core shared with the training loop (double accumulators inside).
struct DiceSums {
    double ab = 0.0, aa = 0.0, bb = 0.0;
};
DiceSums dice_sums(const float* a, const float* b, size_t count);
double soft_dice_from_sums(const DiceSums& s, double eps);

// Accumulates scale * d(-log d)/d a_i into grad[i] for a float prediction/target pair.
void add_log_dice_grad(const float* a, const float* b, size_t count, double eps, double scale,
                       float* grad);

}  // namespace stackunet

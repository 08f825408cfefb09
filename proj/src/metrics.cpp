#include "stackunet/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "stackunet/errors.hpp"

namespace stackunet {

namespace {

void require_same_shape(int h1, int w1, int h2, int w2, const char* what) {
    if (h1 != h2 || w1 != w2) {
        throw ConfigError(std::string(what) + ": shape mismatch " + std::to_string(h1) + "x" +
                          std::to_string(w1) + " vs " + std::to_string(h2) + "x" +
                          std::to_string(w2));
    }
}

}  // namespace

size_t BinaryMask::count() const {
    size_t c = 0;
    for (uint8_t x : v) c += (x != 0);
    return c;
}

DiceSums dice_sums(const float* a, const float* b, size_t count) {
    DiceSums s;
    for (size_t i = 0; i < count; ++i) {
        const double ai = a[i], bi = b[i];
        s.ab += ai * bi;
        s.aa += ai * ai;
        s.bb += bi * bi;
    }
    return s;
}

double soft_dice_from_sums(const DiceSums& s, double eps) {
    return (2.0 * s.ab + eps) / (s.aa + s.bb + eps);
}

void add_log_dice_grad(const float* a, const float* b, size_t count, double eps, double scale,
                       float* grad) {
    const DiceSums s = dice_sums(a, b, count);
    const double num = 2.0 * s.ab + eps;
    const double den = s.aa + s.bb + eps;
    // d = num/den;  dl/da_i = -(1/d) * dd/da_i = -(2 b_i / num) + (2 a_i / den)
    for (size_t i = 0; i < count; ++i) {
        const double g = -2.0 * b[i] / num + 2.0 * a[i] / den;
        grad[i] += float(scale * g);
    }
}

namespace {

template <typename TargetT>
DiceSums sums_of(const ProbabilityMap& a, const TargetT& b) {
    DiceSums s;
    for (size_t i = 0; i < a.size(); ++i) {
        const double ai = a.v[i], bi = double(b.v[i]);
        s.ab += ai * bi;
        s.aa += ai * ai;
        s.bb += bi * bi;
    }
    return s;
}

template <typename TargetT>
double soft_dice_impl(const ProbabilityMap& a, const TargetT& b, double eps) {
    require_same_shape(a.h, a.w, b.h, b.w, "soft_dice");
    if (eps <= 0.0) throw ConfigError("soft_dice: eps must be > 0");
    return soft_dice_from_sums(sums_of(a, b), eps);
}

}  // namespace

double soft_dice(const ProbabilityMap& a, const BinaryMask& b, double eps) {
    return soft_dice_impl(a, b, eps);
}

double soft_dice(const ProbabilityMap& a, const ProbabilityMap& b, double eps) {
    return soft_dice_impl(a, b, eps);
}

double log_dice_loss(const ProbabilityMap& a, const BinaryMask& b, double eps) {
    return -std::log(soft_dice(a, b, eps));
}

double log_dice_loss(const ProbabilityMap& a, const ProbabilityMap& b, double eps) {
    return -std::log(soft_dice(a, b, eps));
}

ProbabilityMap log_dice_loss_grad(const ProbabilityMap& a, const BinaryMask& b, double eps) {
    require_same_shape(a.h, a.w, b.h, b.w, "log_dice_loss_grad");
    if (eps <= 0.0) throw ConfigError("log_dice_loss_grad: eps must be > 0");
    const DiceSums s = sums_of(a, b);
    const double num = 2.0 * s.ab + eps;
    const double den = s.aa + s.bb + eps;
    ProbabilityMap g(a.h, a.w);
    for (size_t i = 0; i < a.size(); ++i) {
        g.v[i] = -2.0 * double(b.v[i]) / num + 2.0 * a.v[i] / den;
    }
    return g;
}

double binary_dice(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a.h, a.w, b.h, b.w, "binary_dice");
    size_t inter = 0, total = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const bool ai = a.v[i] != 0, bi = b.v[i] != 0;
        inter += (ai && bi);
        total += size_t(ai) + size_t(bi);
    }
    if (total == 0) return 1.0;  // empty-empty convention
    return 2.0 * double(inter) / double(total);
}

double iou(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a.h, a.w, b.h, b.w, "iou");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const bool ai = a.v[i] != 0, bi = b.v[i] != 0;
        inter += (ai && bi);
        uni += (ai || bi);
    }
    if (uni == 0) return 1.0;  // empty-empty convention
    return double(inter) / double(uni);
}

BinaryMask binarize(const ProbabilityMap& a, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("binarize: threshold must lie in (0, 1), got " +
                          std::to_string(threshold));
    }
    BinaryMask m(a.h, a.w);
    for (size_t i = 0; i < a.size(); ++i) m.v[i] = a.v[i] >= threshold ? 1 : 0;
    return m;
}

namespace {

// Vertical extent of the foreground; -1 when empty.
int vertical_extent(const BinaryMask& m) {
    int lo = -1, hi = -1;
    for (int y = 0; y < m.h; ++y) {
        const uint8_t* row = m.v.data() + size_t(y) * m.w;
        bool any = false;
        for (int x = 0; x < m.w; ++x) {
            if (row[x]) {
                any = true;
                break;
            }
        }
        if (any) {
            if (lo < 0) lo = y;
            hi = y;
        }
    }
    return lo < 0 ? -1 : hi - lo + 1;
}

}  // namespace

CdrResult cup_to_disc_ratio(const BinaryMask& disc, const BinaryMask& cup, double threshold) {
    const int dh = vertical_extent(disc);
    if (dh < 0) throw ConfigError("cup_to_disc_ratio: no disc region");
    const int ch = std::max(0, vertical_extent(cup));
    CdrResult r;
    r.disc_height = dh;
    r.cup_height = ch;
    r.cdr = double(ch) / double(dh);
    r.glaucoma_suspect = r.cdr >= threshold;
    return r;
}

}  // namespace stackunet

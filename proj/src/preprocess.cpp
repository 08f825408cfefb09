#include "stackunet/preprocess.hpp"

#include <cmath>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "stackunet/errors.hpp"

namespace stackunet {

AugmentSpec AugmentSpec::none() {
    AugmentSpec s;
    s.rotation_deg = {0.0, 0.0};
    s.zoom = {1.0, 1.0};
    s.shift_frac = {0.0, 0.0};
    s.shear_deg = {0.0, 0.0};
    s.hflip_prob = 0.0;
    s.vflip_prob = 0.0;
    return s;
}

void AugmentSpec::validate() const {
    auto finite_range = [](const Range& r, const char* name) {
        if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || r.lo > r.hi)
            throw ConfigError(std::string("augment: bad range for ") + name);
    };
    finite_range(rotation_deg, "rotation_deg");
    finite_range(zoom, "zoom");
    finite_range(shift_frac, "shift_frac");
    finite_range(shear_deg, "shear_deg");
    if (zoom.lo <= 0.0) throw ConfigError("augment: zoom must stay positive");
    if (hflip_prob < 0.0 || hflip_prob > 1.0 || vflip_prob < 0.0 || vflip_prob > 1.0)
        throw ConfigError("augment: flip probabilities must lie in [0, 1]");
}

cv::Mat clahe(const cv::Mat& image, double clip_limit, cv::Size tile_grid, bool per_channel) {
    if (image.empty()) throw DataError("clahe: empty image");

    cv::Ptr<cv::CLAHE> eq = cv::createCLAHE(clip_limit, tile_grid);
    auto constant = [](const cv::Mat& single) {
        double lo, hi;
        cv::minMaxLoc(single, &lo, &hi);
        return lo == hi;
    };

    if (image.channels() == 1) {
        if (constant(image)) return image.clone();
        cv::Mat out;
        eq->apply(image, out);
        return out;
    }

    if (per_channel) {
        std::vector<cv::Mat> ch;
        cv::split(image, ch);
        for (cv::Mat& c : ch)
            if (!constant(c)) eq->apply(c.clone(), c);
        cv::Mat out;
        cv::merge(ch, out);
        return out;
    }

    cv::Mat lab;
    cv::cvtColor(image, lab, cv::COLOR_BGR2Lab);
    std::vector<cv::Mat> ch;
    cv::split(lab, ch);
    if (constant(ch[0])) return image.clone();
    eq->apply(ch[0].clone(), ch[0]);
    cv::merge(ch, lab);
    cv::Mat out;
    cv::cvtColor(lab, out, cv::COLOR_Lab2BGR);
    return out;
}

namespace {

// Forward affine map about the image center: flip * rotation * shear * zoom,
// plus the fractional shift. warpAffine inverts it internally for sampling.
cv::Mat build_affine(int h, int w, double rot_deg, double zoom, double shift_x, double shift_y,
                     double shear_deg, bool hflip, bool vflip) {
    const double cx = (w - 1) / 2.0;
    const double cy = (h - 1) / 2.0;
    const double th = rot_deg * CV_PI / 180.0;
    const double sh = std::tan(shear_deg * CV_PI / 180.0);

    // rotation * shear * zoom
    double m00 = zoom * std::cos(th);
    double m01 = zoom * (std::cos(th) * sh - std::sin(th));
    double m10 = zoom * std::sin(th);
    double m11 = zoom * (std::sin(th) * sh + std::cos(th));
    if (hflip) {
        m00 = -m00;
        m01 = -m01;
    }
    if (vflip) {
        m10 = -m10;
        m11 = -m11;
    }
    cv::Mat a(2, 3, CV_64F);
    a.at<double>(0, 0) = m00;
    a.at<double>(0, 1) = m01;
    a.at<double>(1, 0) = m10;
    a.at<double>(1, 1) = m11;
    a.at<double>(0, 2) = cx - m00 * cx - m01 * cy + shift_x * w;
    a.at<double>(1, 2) = cy - m10 * cx - m11 * cy + shift_y * h;
    return a;
}

}  // namespace

AugmentedPair augment(const cv::Mat& image, const BinaryMask& mask, const AugmentSpec& spec,
                      Rng& rng) {
    spec.validate();
    if (image.rows != mask.h || image.cols != mask.w)
        throw DataError("augment: image and mask dimensions differ");

    const double rot = rng.uniform(spec.rotation_deg.lo, spec.rotation_deg.hi);
    const double zoom = rng.uniform(spec.zoom.lo, spec.zoom.hi);
    const double shift_x = rng.uniform(spec.shift_frac.lo, spec.shift_frac.hi);
    const double shift_y = rng.uniform(spec.shift_frac.lo, spec.shift_frac.hi);
    const double shear = rng.uniform(spec.shear_deg.lo, spec.shear_deg.hi);
    const bool hflip = rng.bernoulli(spec.hflip_prob);
    const bool vflip = rng.bernoulli(spec.vflip_prob);

    const cv::Mat a =
        build_affine(image.rows, image.cols, rot, zoom, shift_x, shift_y, shear, hflip, vflip);

    AugmentedPair out;
    cv::warpAffine(image, out.image, a, image.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
    cv::Mat m8 = mask_to_mat(mask);
    cv::Mat warped;
    cv::warpAffine(m8, warped, a, m8.size(), cv::INTER_NEAREST, cv::BORDER_REFLECT_101);
    out.mask = mat_to_mask(warped);
    return out;
}

CropRegion region_from_mask(const BinaryMask& mask, int margin) {
    if (margin < 0) throw ConfigError("region_from_mask: margin must be >= 0");
    int r0 = mask.h, r1 = -1, c0 = mask.w, c1 = -1;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (mask.at(y, x)) {
                r0 = std::min(r0, y);
                r1 = std::max(r1, y);
                c0 = std::min(c0, x);
                c1 = std::max(c1, x);
            }
    if (r1 < 0) throw DataError("region_from_mask: no region to crop");

    CropRegion reg;
    reg.top = std::max(0, r0 - margin);
    reg.left = std::max(0, c0 - margin);
    reg.height = std::min(mask.h - 1, r1 + margin) - reg.top + 1;
    reg.width = std::min(mask.w - 1, c1 + margin) - reg.left + 1;
    reg.margin = margin;
    return reg;
}

namespace {

void check_region(int h, int w, const CropRegion& r, const char* who) {
    if (r.top < 0 || r.left < 0 || r.height <= 0 || r.width <= 0 || r.top + r.height > h ||
        r.left + r.width > w)
        throw ConfigError(std::string(who) + ": region exceeds image bounds");
}

}  // namespace

cv::Mat crop_by_region(const cv::Mat& image, const CropRegion& region) {
    check_region(image.rows, image.cols, region, "crop_by_region");
    return image(cv::Rect(region.left, region.top, region.width, region.height)).clone();
}

BinaryMask crop_by_region(const BinaryMask& mask, const CropRegion& region) {
    check_region(mask.h, mask.w, region, "crop_by_region");
    BinaryMask out(region.height, region.width);
    for (int y = 0; y < region.height; ++y)
        for (int x = 0; x < region.width; ++x)
            out.at(y, x) = mask.at(region.top + y, region.left + x);
    return out;
}

void paste_region(const ProbabilityMap& crop, const CropRegion& region, ProbabilityMap& full) {
    check_region(full.h, full.w, region, "paste_region");
    if (crop.h != region.height || crop.w != region.width)
        throw ConfigError("paste_region: crop does not match region size");
    for (int y = 0; y < crop.h; ++y)
        for (int x = 0; x < crop.w; ++x)
            full.at(region.top + y, region.left + x) = crop.at(y, x);
}

void paste_region(const BinaryMask& crop, const CropRegion& region, BinaryMask& full) {
    check_region(full.h, full.w, region, "paste_region");
    if (crop.h != region.height || crop.w != region.width)
        throw ConfigError("paste_region: crop does not match region size");
    for (int y = 0; y < crop.h; ++y)
        for (int x = 0; x < crop.w; ++x)
            full.at(region.top + y, region.left + x) = crop.at(y, x);
}

cv::Mat resize_image(const cv::Mat& image, int h, int w) {
    if (h <= 0 || w <= 0) throw ConfigError("resize_image: target dims must be positive");
    if (image.rows == h && image.cols == w) return image.clone();
    cv::Mat out;
    cv::resize(image, out, cv::Size(w, h), 0.0, 0.0, cv::INTER_LINEAR);
    return out;
}

BinaryMask resize_mask(const BinaryMask& mask, int h, int w) {
    if (h <= 0 || w <= 0) throw ConfigError("resize_mask: target dims must be positive");
    if (mask.h == h && mask.w == w) return mask;
    cv::Mat out;
    cv::resize(mask_to_mat(mask), out, cv::Size(w, h), 0.0, 0.0, cv::INTER_NEAREST);
    return mat_to_mask(out);
}

ProbabilityMap resize_map(const ProbabilityMap& map, int h, int w) {
    if (h <= 0 || w <= 0) throw ConfigError("resize_map: target dims must be positive");
    if (map.h == h && map.w == w) return map;
    cv::Mat m(map.h, map.w, CV_64F, const_cast<double*>(map.v.data()));
    cv::Mat out;
    cv::resize(m, out, cv::Size(w, h), 0.0, 0.0, cv::INTER_LINEAR);
    ProbabilityMap res(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            res.at(y, x) = std::clamp(out.at<double>(y, x), 0.0, 1.0);
    return res;
}

cv::Mat mask_to_mat(const BinaryMask& mask) {
    cv::Mat m(mask.h, mask.w, CV_8UC1);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            m.at<uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
    return m;
}

BinaryMask mat_to_mask(const cv::Mat& m) {
    if (m.type() != CV_8UC1) throw DataError("mat_to_mask: expected single-channel 8-bit input");
    BinaryMask mask(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x)
            mask.at(y, x) = m.at<uint8_t>(y, x) > 127 ? 1 : 0;
    return mask;
}

ProbabilityMap mask_to_map(const BinaryMask& mask) {
    ProbabilityMap map(mask.h, mask.w);
    for (size_t i = 0; i < mask.size(); ++i) map.v[i] = mask.v[i];
    return map;
}

Tensor image_to_tensor(const cv::Mat& bgr) {
    if (bgr.type() != CV_8UC3) throw DataError("image_to_tensor: expected 8-bit BGR input");
    Tensor t(1, 3, bgr.rows, bgr.cols);
    for (int y = 0; y < bgr.rows; ++y) {
        const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x)
            for (int c = 0; c < 3; ++c)
                t.at(0, c, y, x) = float(row[x][2 - c]) / 255.0f;
    }
    return t;
}

ProbabilityMap tensor_to_map(const Tensor& t, int sample, int channel) {
    if (sample < 0 || sample >= t.n || channel < 0 || channel >= t.c)
        throw ConfigError("tensor_to_map: sample or channel out of range");
    ProbabilityMap map(t.h, t.w);
    const float* p = t.ptr(sample, channel);
    for (size_t i = 0; i < map.size(); ++i) map.v[i] = std::clamp(double(p[i]), 0.0, 1.0);
    return map;
}

cv::Mat load_image(const std::filesystem::path& path) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (img.empty()) throw DataError("load_image: cannot decode " + path.string());
    return img;
}

BinaryMask load_mask(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("load_mask: cannot decode " + path.string());
    return mat_to_mask(m);
}

void save_image(const std::filesystem::path& path, const cv::Mat& image) {
    if (!cv::imwrite(path.string(), image))
        throw DataError("save_image: cannot write " + path.string());
}

void save_mask(const std::filesystem::path& path, const BinaryMask& mask) {
    if (!cv::imwrite(path.string(), mask_to_mat(mask)))
        throw DataError("save_mask: cannot write " + path.string());
}

}  // namespace stackunet

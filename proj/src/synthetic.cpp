#include "stackunet/synthetic.hpp"

#include <opencv2/imgproc.hpp>

#include "stackunet/errors.hpp"
#include "stackunet/preprocess.hpp"

namespace stackunet {

void SynthSpec::validate() const {
    if (n_images < 1) throw ConfigError("synth: n_images must be >= 1");
    if (n_persons < 1 || n_persons > n_images)
        throw ConfigError("synth: n_persons must lie in [1, n_images]");
    if (n_annotators < 1) throw ConfigError("synth: n_annotators must be >= 1");
    if (size < 32) throw ConfigError("synth: size must be >= 32");
}

namespace {

struct EllipseParams {
    double cx, cy;       // center, pixels
    double ax, ay;       // semi-axes, pixels
    double angle_deg;
    double cup_ratio;    // cup semi-axes as a fraction of the disc's
};

// Person-level geometry; individual images jitter around it.
EllipseParams person_geometry(uint64_t person_style, int size) {
    Rng rng = Rng::derive(person_style, {rng_stream::kSynth});
    EllipseParams p;
    p.cx = rng.uniform(0.35, 0.65) * size;
    p.cy = rng.uniform(0.35, 0.65) * size;
    p.ax = rng.uniform(0.13, 0.20) * size;
    p.ay = p.ax * rng.uniform(0.85, 1.15);
    p.angle_deg = rng.uniform(-30.0, 30.0);
    p.cup_ratio = rng.uniform(0.35, 0.85);
    return p;
}

BinaryMask ellipse_mask(const EllipseParams& p, double scale, int size) {
    cv::Mat m = cv::Mat::zeros(size, size, CV_8UC1);
    cv::ellipse(m, cv::Point2d(p.cx, p.cy), cv::Size2d(p.ax * scale, p.ay * scale), p.angle_deg,
                0.0, 360.0, cv::Scalar(255), cv::FILLED, cv::LINE_8);
    return mat_to_mask(m);
}

EllipseParams jitter(const EllipseParams& base, Rng& rng, double pos_frac, double axis_frac) {
    EllipseParams p = base;
    p.cx += rng.uniform(-pos_frac, pos_frac) * base.ax;
    p.cy += rng.uniform(-pos_frac, pos_frac) * base.ay;
    p.ax *= rng.uniform(1.0 - axis_frac, 1.0 + axis_frac);
    p.ay *= rng.uniform(1.0 - axis_frac, 1.0 + axis_frac);
    p.angle_deg += rng.uniform(-5.0, 5.0);
    return p;
}

}  // namespace

SynthSample render_fundus(Rng& rng, int size, int n_annotators, uint64_t person_style) {
    const EllipseParams base = person_geometry(person_style, size);
    const EllipseParams disc = jitter(base, rng, 0.10, 0.06);

    // dark reddish background with a radial falloff and mild noise
    cv::Mat img(size, size, CV_8UC3);
    const double bg_b = rng.uniform(20.0, 40.0);
    const double bg_g = rng.uniform(30.0, 55.0);
    const double bg_r = rng.uniform(90.0, 130.0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = (x - size / 2.0) / size, dy = (y - size / 2.0) / size;
            const double fall = 1.0 - 0.8 * (dx * dx + dy * dy);
            img.at<cv::Vec3b>(y, x) =
                cv::Vec3b(cv::saturate_cast<uint8_t>(bg_b * fall),
                          cv::saturate_cast<uint8_t>(bg_g * fall),
                          cv::saturate_cast<uint8_t>(bg_r * fall));
        }

    // disc: bright orange; cup: brighter, yellower
    cv::ellipse(img, cv::Point2d(disc.cx, disc.cy), cv::Size2d(disc.ax, disc.ay), disc.angle_deg,
                0.0, 360.0, cv::Scalar(90, 160, 230), cv::FILLED, cv::LINE_AA);
    cv::ellipse(img, cv::Point2d(disc.cx, disc.cy),
                cv::Size2d(disc.ax * disc.cup_ratio, disc.ay * disc.cup_ratio), disc.angle_deg,
                0.0, 360.0, cv::Scalar(140, 220, 250), cv::FILLED, cv::LINE_AA);

    // a few dark vessels radiating from the disc
    const int n_vessels = 2 + int(rng.uniform_int(3));
    for (int v = 0; v < n_vessels; ++v) {
        const double ang = rng.uniform(0.0, 2.0 * CV_PI);
        const double bend = rng.uniform(-0.6, 0.6);
        std::vector<cv::Point> pts;
        for (double t = 0.0; t <= 1.0; t += 0.1) {
            const double r = t * size * 0.7;
            const double a = ang + bend * t;
            pts.emplace_back(int(disc.cx + r * std::cos(a)), int(disc.cy + r * std::sin(a)));
        }
        cv::polylines(img, pts, false, cv::Scalar(25, 30, 95), 1 + int(rng.uniform_int(2)),
                      cv::LINE_AA);
    }

    cv::Mat noise(size, size, CV_16SC3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                noise.at<cv::Vec3s>(y, x)[c] = short(std::lround(rng.normal() * 6.0));
    cv::Mat img16;
    img.convertTo(img16, CV_16SC3);
    img16 += noise;
    img16.convertTo(img, CV_8UC3);
    cv::GaussianBlur(img, img, cv::Size(3, 3), 0.8);

    SynthSample s;
    s.image = img;
    s.disc_annots.push_back(ellipse_mask(disc, 1.0, size));
    EllipseParams cup = disc;
    cup.ax *= disc.cup_ratio;
    cup.ay *= disc.cup_ratio;
    s.cup_annots.push_back(ellipse_mask(cup, 1.0, size));
    for (int a = 1; a < n_annotators; ++a) {
        s.disc_annots.push_back(ellipse_mask(jitter(disc, rng, 0.04, 0.05), 1.0, size));
        s.cup_annots.push_back(ellipse_mask(jitter(cup, rng, 0.04, 0.05), 1.0, size));
    }
    return s;
}

DatasetManifest generate_synthetic_dataset(const SynthSpec& spec,
                                           const std::filesystem::path& dir) {
    spec.validate();
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");

    DatasetManifest m;
    m.base_dir = dir;
    Rng rng = Rng::derive(spec.seed, {rng_stream::kSynth});
    char buf[64];
    for (int i = 0; i < spec.n_images; ++i) {
        const int person = i % spec.n_persons;
        const uint64_t style = spec.seed * 1000003ULL + uint64_t(person);
        SynthSample s = render_fundus(rng, spec.size, spec.n_annotators, style);

        std::snprintf(buf, sizeof buf, "images/img_%03d.png", i);
        SampleRecord r;
        r.image_path = buf;
        save_image(dir / r.image_path, s.image);
        for (size_t a = 0; a < s.disc_annots.size(); ++a) {
            std::snprintf(buf, sizeof buf, "masks/img_%03d_disc_a%zu.png", i, a);
            r.disc_mask_paths.push_back(buf);
            save_mask(dir / buf, s.disc_annots[a]);
        }
        for (size_t a = 0; a < s.cup_annots.size(); ++a) {
            std::snprintf(buf, sizeof buf, "masks/img_%03d_cup_a%zu.png", i, a);
            r.cup_mask_paths.push_back(buf);
            save_mask(dir / buf, s.cup_annots[a]);
        }
        std::snprintf(buf, sizeof buf, "p%03d", person);
        r.person_id = buf;
        r.dataset_tag = "synthetic";
        m.records.push_back(std::move(r));
        m.split.push_back(Split::none);
        m.fold.push_back(-1);
    }
    write_manifest(m, dir / "manifest.csv");
    return load_manifest(dir / "manifest.csv");
}

}  // namespace stackunet

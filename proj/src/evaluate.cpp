#include "stackunet/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <opencv2/imgproc.hpp>
#include <sstream>

#include "stackunet/errors.hpp"
#include "stackunet/preprocess.hpp"

namespace stackunet {

namespace {

struct CaseCandidate {
    double iou = -1.0;
    cv::Mat image;
    BinaryMask pred, gt;
    std::string name;
};

// input | prediction outline (green) | ground truth outline (cyan), with the
// metric printed on the strip
cv::Mat compose_panel(const CaseCandidate& c, const char* label) {
    auto outlined = [&](const BinaryMask& m, cv::Scalar color) {
        cv::Mat img = c.image.clone();
        std::vector<std::vector<cv::Point>> contours;
        cv::findContours(mask_to_mat(m), contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_SIMPLE);
        cv::drawContours(img, contours, -1, color, 2);
        return img;
    };
    cv::Mat strip;
    cv::hconcat(std::vector<cv::Mat>{c.image, outlined(c.pred, cv::Scalar(0, 255, 0)),
                                     outlined(c.gt, cv::Scalar(255, 255, 0))},
                strip);
    const int bar = 28;
    cv::Mat panel(strip.rows + bar, strip.cols, CV_8UC3, cv::Scalar(255, 255, 255));
    strip.copyTo(panel(cv::Rect(0, bar, strip.cols, strip.rows)));
    char text[160];
    std::snprintf(text, sizeof text, "%s  %s  IOU = %.3f", label, c.name.c_str(), c.iou);
    cv::putText(panel, text, cv::Point(6, bar - 8), cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    return panel;
}

BinaryMask gt_mask_of(const DatasetManifest& data, const std::vector<std::string>& paths,
                      ProbabilityMap* soft_out) {
    std::vector<BinaryMask> masks;
    for (const std::string& p : paths) masks.push_back(load_mask(data.resolve(p)));
    ProbabilityMap soft = average_annotators(masks);
    BinaryMask gt = binarize(soft, 0.5);
    if (soft_out) *soft_out = std::move(soft);
    return gt;
}

void write_rows_csv(const std::vector<EvalRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("evaluate: cannot write " + path.string());
    out << "image,organ,iou,dice,soft_dice_vs_avg,fallback_crop\n";
    out.precision(17);
    for (const EvalRow& r : rows)
        out << r.image << ',' << r.organ << ',' << r.iou << ',' << r.dice << ','
            << r.soft_dice_vs_avg << ',' << (r.fallback_crop ? 1 : 0) << "\n";
}

std::vector<EvalSummary> summarize_from_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("evaluate: cannot reread " + path.string());
    std::string line;
    std::getline(in, line);
    std::map<std::string, EvalSummary> agg;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string image, organ, f;
        std::getline(ss, image, ',');
        std::getline(ss, organ, ',');
        EvalSummary& s = agg[organ];
        s.source = "computed";
        s.organ = organ;
        std::getline(ss, f, ',');
        s.mean_iou += std::stod(f);
        std::getline(ss, f, ',');
        s.mean_dice += std::stod(f);
        std::getline(ss, f, ',');
        s.mean_soft_dice += std::stod(f);
        ++s.n;
    }
    std::vector<EvalSummary> out;
    for (auto& [organ, s] : agg) {
        s.mean_iou /= s.n;
        s.mean_dice /= s.n;
        s.mean_soft_dice /= s.n;
        out.push_back(s);
    }
    return out;
}

void write_summary_csv(const std::vector<EvalSummary>& summaries,
                       const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("evaluate: cannot write " + path.string());
    out << "source,organ,n,mean_iou,mean_dice,mean_soft_dice\n";
    out.precision(17);
    for (const EvalSummary& s : summaries)
        out << s.source << ',' << s.organ << ',' << s.n << ',' << s.mean_iou << ','
            << s.mean_dice << ',' << s.mean_soft_dice << "\n";
}

}  // namespace

EvalReport evaluate_model(Model& disc_model, Model* cup_model, const DatasetManifest& data,
                          Split split, const EvalOptions& opt,
                          const std::filesystem::path& out_dir) {
    if (opt.threshold <= 0.0 || opt.threshold >= 1.0)
        throw ConfigError("evaluate: threshold must lie in (0, 1)");
    const std::vector<size_t> indices = data.indices_in(split);
    if (indices.empty()) throw DataError("evaluate: split has no records");

    EvalReport report;
    std::map<std::string, CaseCandidate> best, worst;
    std::map<std::string, EvalSummary> running;

    for (size_t idx : indices) {
        const SampleRecord& r = data.records[idx];
        const cv::Mat image = load_image(data.resolve(r.image_path));
        const cv::Mat prepped =
            resize_image(clahe(image), opt.resolution_h, opt.resolution_w);

        ProbabilityMap disc_native;
        if (!r.disc_mask_paths.empty() || (cup_model && !opt.oracle_crop))
            disc_native =
                resize_map(predict_map(disc_model, prepped), image.rows, image.cols);

        auto add_row = [&](const std::string& organ, const ProbabilityMap& pred_native,
                           const BinaryMask& gt, const ProbabilityMap& gt_soft, bool fallback) {
            EvalRow row;
            row.image = r.image_path;
            row.organ = organ;
            const BinaryMask pred = binarize(pred_native, opt.threshold);
            row.iou = iou(pred, gt);
            row.dice = binary_dice(pred, gt);
            row.soft_dice_vs_avg = soft_dice(pred_native, gt_soft, opt.soft_eps);
            row.fallback_crop = fallback;
            report.rows.push_back(row);

            EvalSummary& s = running[organ];
            s.source = "computed";
            s.organ = organ;
            s.mean_iou += row.iou;
            s.mean_dice += row.dice;
            s.mean_soft_dice += row.soft_dice_vs_avg;
            ++s.n;

            CaseCandidate cand{row.iou, image, pred, gt, r.image_path};
            auto bit = best.find(organ);
            if (bit == best.end() || row.iou > bit->second.iou) best[organ] = cand;
            auto wit = worst.find(organ);
            if (wit == worst.end() || row.iou < wit->second.iou) worst[organ] = cand;
        };

        if (!r.disc_mask_paths.empty()) {
            ProbabilityMap gt_soft;
            const BinaryMask gt = gt_mask_of(data, r.disc_mask_paths, &gt_soft);
            add_row("disc", disc_native, gt, gt_soft, false);
        }

        if (cup_model && !r.cup_mask_paths.empty()) {
            ProbabilityMap gt_soft;
            const BinaryMask gt = gt_mask_of(data, r.cup_mask_paths, &gt_soft);

            BinaryMask region_src;
            if (opt.oracle_crop) {
                if (r.disc_mask_paths.empty())
                    throw DataError("evaluate: oracle crop needs disc masks for " + r.image_path);
                region_src = gt_mask_of(data, r.disc_mask_paths, nullptr);
            } else {
                region_src = binarize(disc_native, opt.threshold);
            }
            CropRegion region;
            bool fallback = false;
            if (region_src.count() == 0) {
                region = CropRegion{0, 0, image.rows, image.cols, 0};
                fallback = true;
            } else {
                region = region_from_mask(region_src, opt.margin);
            }
            const cv::Mat crop = resize_image(clahe(crop_by_region(image, region)),
                                              opt.resolution_h, opt.resolution_w);
            ProbabilityMap full(image.rows, image.cols);
            paste_region(resize_map(predict_map(*cup_model, crop), region.height, region.width),
                         region, full);
            add_row("cup", full, gt, gt_soft, fallback);
        }
    }

    if (report.rows.empty()) throw DataError("evaluate: no organ had ground-truth masks");
    for (auto& [organ, s] : running) {
        s.mean_iou /= s.n;
        s.mean_dice /= s.n;
        s.mean_soft_dice /= s.n;
    }

    // the split's agreement rows, when any record carries multiple annotators
    DatasetManifest subset;
    subset.base_dir = data.base_dir;
    for (size_t idx : indices) {
        subset.records.push_back(data.records[idx]);
        subset.split.push_back(Split::none);
        subset.fold.push_back(-1);
    }
    const AgreementReport agreement = human_agreement(subset);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_rows_csv(report.rows, out_dir / "per_image.csv");

        // aggregate from the file that was just written, then cross-check
        report.summaries = summarize_from_csv(out_dir / "per_image.csv");
        for (const EvalSummary& s : report.summaries) {
            const EvalSummary& acc = running.at(s.organ);
            if (s.n != acc.n || std::abs(s.mean_iou - acc.mean_iou) > 1e-9 ||
                std::abs(s.mean_dice - acc.mean_dice) > 1e-9)
                throw TrainError("evaluate: aggregate drifted from the per-image file for " +
                                 s.organ);
        }
    } else {
        for (const auto& [organ, s] : running) report.summaries.push_back(s);
    }

    auto push_agreement = [&](const AgreementReport::Organ& o, const char* organ) {
        if (o.records_used == 0) return;
        EvalSummary s;
        s.source = "human_agreement";
        s.organ = organ;
        s.n = o.records_used;
        s.mean_iou = o.mean_iou;
        s.mean_dice = o.mean_dice;
        report.summaries.push_back(s);
    };
    push_agreement(agreement.disc, "disc");
    push_agreement(agreement.cup, "cup");

    if (!out_dir.empty()) {
        write_summary_csv(report.summaries, out_dir / "summary.csv");
        write_published_results_csv(out_dir / "published_results.csv");
        for (const auto& [organ, cand] : best) {
            const std::filesystem::path p = out_dir / (organ + "_best.png");
            save_image(p, compose_panel(cand, "best"));
            report.panels[organ + "_best"] = p;
        }
        for (const auto& [organ, cand] : worst) {
            const std::filesystem::path p = out_dir / (organ + "_worst.png");
            save_image(p, compose_panel(cand, "worst"));
            report.panels[organ + "_worst"] = p;
        }
    }
    return report;
}

const std::vector<PublishedRow>& published_results() {
    static const std::vector<PublishedRow> rows = {
        {"stack-15-res_unet", "DRIONS-DB", "disc", 0.92, 0.96},
        {"stack-15-unet", "DRIONS-DB", "disc", 0.90, 0.95},
        {"stack-15-res_unet", "RIM-ONE v.3", "disc", 0.91, 0.95},
        {"stack-15-unet", "RIM-ONE v.3", "disc", 0.92, 0.96},
        {"stack-15-res_unet", "DRISHTI-GS", "disc", 0.95, 0.97},
        {"stack-15-unet", "DRISHTI-GS", "disc", 0.94, 0.97},
        {"stack-15-res_unet", "DRISHTI-GS", "cup", 0.80, 0.89},
        {"stack-15-unet", "DRISHTI-GS", "cup", 0.77, 0.86},
        {"stack-15-res_unet", "RIM-ONE v.3", "cup", 0.73, 0.84},
        {"stack-15-unet", "RIM-ONE v.3", "cup", 0.72, 0.83},
        {"stack-15-res_unet", "UCSF-DB", "disc", 0.92, 0.96},
        {"stack-15-unet", "UCSF-DB", "disc", 0.92, 0.96},
        {"stack-15-res_unet", "UCSF-DB", "cup", 0.73, 0.84},
        {"stack-15-unet", "UCSF-DB", "cup", 0.74, 0.85},
        {"human-vs-human", "UCSF-DB", "disc", 0.81, 0.87},
        {"human-vs-human", "UCSF-DB", "cup", 0.53, 0.66},
    };
    return rows;
}

void write_published_results_csv(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("evaluate: cannot write " + path.string());
    out << "source,model,dataset,organ,iou,dice\n";
    for (const PublishedRow& r : published_results())
        out << "published," << r.model << ',' << r.dataset << ',' << r.organ << ',' << r.iou
            << ',' << r.dice << "\n";
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("sweep: cannot write " + path.string());
    out << "n_blocks,disc_iou,disc_dice,cup_iou,cup_dice\n";
    out.precision(17);
    for (const SweepRow& r : rows) {
        out << r.n_blocks << ',' << r.disc_iou << ',' << r.disc_dice << ',';
        if (r.has_cup)
            out << r.cup_iou << ',' << r.cup_dice;
        else
            out << ',';
        out << "\n";
    }
}

void write_sweep_plot(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
    if (rows.empty()) throw ConfigError("sweep plot: no rows");
    const int w = 640, h = 480, ml = 60, mr = 20, mt = 40, mb = 50;
    cv::Mat canvas(h, w, CV_8UC3, cv::Scalar(255, 255, 255));

    int n_lo = rows[0].n_blocks, n_hi = rows[0].n_blocks;
    for (const SweepRow& r : rows) {
        n_lo = std::min(n_lo, r.n_blocks);
        n_hi = std::max(n_hi, r.n_blocks);
    }
    auto px = [&](double n) {
        const double span = n_hi > n_lo ? double(n_hi - n_lo) : 1.0;
        return int(ml + (n - n_lo) / span * (w - ml - mr));
    };
    auto py = [&](double v) { return int(h - mb - v * (h - mt - mb)); };

    cv::line(canvas, {ml, h - mb}, {w - mr, h - mb}, cv::Scalar(0, 0, 0), 1);
    cv::line(canvas, {ml, mt}, {ml, h - mb}, cv::Scalar(0, 0, 0), 1);
    for (double v = 0.0; v <= 1.001; v += 0.2) {
        char t[16];
        std::snprintf(t, sizeof t, "%.1f", v);
        cv::putText(canvas, t, {8, py(v) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                    cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
        cv::line(canvas, {ml - 4, py(v)}, {ml, py(v)}, cv::Scalar(0, 0, 0), 1);
    }
    for (const SweepRow& r : rows) {
        char t[16];
        std::snprintf(t, sizeof t, "%d", r.n_blocks);
        cv::putText(canvas, t, {px(r.n_blocks) - 6, h - mb + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                    cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    }
    cv::putText(canvas, "blocks", {w / 2 - 24, h - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0), 1, cv::LINE_AA);

    struct Series {
        const char* label;
        cv::Scalar color;
        std::vector<cv::Point> pts;
    };
    std::vector<Series> series = {{"disc IOU", cv::Scalar(180, 80, 0), {}},
                                  {"disc Dice", cv::Scalar(0, 140, 0), {}},
                                  {"cup IOU", cv::Scalar(0, 80, 200), {}},
                                  {"cup Dice", cv::Scalar(160, 0, 160), {}}};
    for (const SweepRow& r : rows) {
        series[0].pts.emplace_back(px(r.n_blocks), py(r.disc_iou));
        series[1].pts.emplace_back(px(r.n_blocks), py(r.disc_dice));
        if (r.has_cup) {
            series[2].pts.emplace_back(px(r.n_blocks), py(r.cup_iou));
            series[3].pts.emplace_back(px(r.n_blocks), py(r.cup_dice));
        }
    }
    int legend_y = mt - 16;
    for (const Series& s : series) {
        if (s.pts.empty()) continue;
        if (s.pts.size() > 1) cv::polylines(canvas, s.pts, false, s.color, 2, cv::LINE_AA);
        for (const cv::Point& p : s.pts) cv::circle(canvas, p, 3, s.color, cv::FILLED, cv::LINE_AA);
        cv::putText(canvas, s.label, {ml + 10 + 110 * int(&s - series.data()), legend_y},
                    cv::FONT_HERSHEY_SIMPLEX, 0.42, s.color, 1, cv::LINE_AA);
    }
    save_image(path, canvas);
}

}  // namespace stackunet

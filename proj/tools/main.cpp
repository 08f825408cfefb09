#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "stackunet/errors.hpp"
#include "stackunet/evaluate.hpp"
#include "stackunet/serialize.hpp"
#include "stackunet/synthetic.hpp"
#include "stackunet/train.hpp"

namespace su = stackunet;
using nlohmann::json;

namespace {

struct RunConfig {
    su::CascadeSpec model;
    su::TrainConfig train;
    std::string manifest;
    double val_fraction = 0.2;
    std::string split_file;
    int margin = 20;
};

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw su::ConfigError("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw su::ConfigError("config " + path + ": " + e.what());
    }
    for (const auto& [key, _] : j.items())
        if (key != "model" && key != "train" && key != "data")
            throw su::ConfigError("config: unknown section '" + key + "'");

    RunConfig cfg;
    if (j.contains("model")) cfg.model = su::cascade_spec_from_json(j.at("model"));
    if (j.contains("train")) {
        if (!j.at("train").contains("learning_rate"))
            std::printf("note: learning_rate not set, using default %g\n",
                        cfg.train.learning_rate);
        cfg.train = su::train_config_from_json(j.at("train"));
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        for (const auto& [key, _] : d.items())
            if (key != "manifest" && key != "val_fraction" && key != "split_file" &&
                key != "margin")
                throw su::ConfigError("data: unknown key '" + key + "'");
        cfg.manifest = d.value("manifest", cfg.manifest);
        cfg.val_fraction = d.value("val_fraction", cfg.val_fraction);
        cfg.split_file = d.value("split_file", cfg.split_file);
        cfg.margin = d.value("margin", cfg.margin);
    }
    return cfg;
}

void ensure_out_dir(const std::filesystem::path& dir, bool overwrite) {
    if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir) && !overwrite)
        throw su::ConfigError("output directory " + dir.string() +
                              " is not empty; pass --overwrite to reuse it");
    std::filesystem::create_directories(dir);
}

// Resolves the split: an explicit file wins, then assignments already in the
// manifest, then a fresh person-grouped split.
void assign_split(su::DatasetManifest& data, const RunConfig& cfg) {
    if (!cfg.split_file.empty()) {
        su::apply_split_file(data, cfg.split_file);
        return;
    }
    const bool has = std::any_of(data.split.begin(), data.split.end(),
                                 [](su::Split s) { return s != su::Split::none; });
    if (!has) {
        su::grouped_split(data, cfg.val_fraction, cfg.train.seed);
        std::printf("assigned person-grouped split (val fraction %.2f, seed %llu)\n",
                    cfg.val_fraction, static_cast<unsigned long long>(cfg.train.seed));
    }
}

struct TrainArgs {
    std::string config_path, out_dir, manifest_override, block_kind, disc_checkpoint;
    int blocks = 0;
    bool no_long_skip = false, overwrite = false, cup_crop = false, oracle_crop = false;
    std::string organ;
    int64_t seed = -1;
};

int run_train(const TrainArgs& a) {
    RunConfig cfg = parse_run_config(a.config_path);
    if (!a.manifest_override.empty()) cfg.manifest = a.manifest_override;
    if (a.blocks > 0) cfg.model.n_blocks = a.blocks;
    if (!a.block_kind.empty()) cfg.model.block.kind = su::block_kind_from_string(a.block_kind);
    if (a.no_long_skip) cfg.model.long_skip = false;
    if (!a.organ.empty()) cfg.train.organ = a.organ;
    if (a.seed >= 0) cfg.train.seed = uint64_t(a.seed);
    if (cfg.manifest.empty()) throw su::ConfigError("no manifest given (config data.manifest)");
    cfg.model.validate();
    cfg.train.validate(cfg.model);

    ensure_out_dir(a.out_dir, a.overwrite);
    su::DatasetManifest data = su::load_manifest(cfg.manifest);
    assign_split(data, cfg);

    if (a.cup_crop) {
        cfg.train.organ = "cup";
        su::Model cup_model = su::build_cascade(cfg.model, cfg.train.seed);
        su::CupPipelineConfig pipe;
        pipe.margin = cfg.margin;
        pipe.oracle_crop = a.oracle_crop;
        std::optional<su::Model> disc_model;
        if (!a.disc_checkpoint.empty()) disc_model = su::load_checkpoint(a.disc_checkpoint);
        if (!pipe.oracle_crop && !disc_model)
            throw su::ConfigError("cup pipeline needs --disc-checkpoint or --oracle-crop");
        su::write_split_file(data, std::filesystem::path(a.out_dir) / "split.csv");
        const su::CupPipelineReport rep = su::train_cup_pipeline(
            disc_model ? &*disc_model : nullptr, cup_model, data, cfg.train, pipe, a.out_dir);
        std::printf("cup pipeline: full-frame dice %.4f iou %.4f over %d image(s), "
                    "%d skipped at train, %d fallback at eval\n",
                    rep.eval_dice, rep.eval_iou, rep.eval_images, rep.skipped_train,
                    rep.fallback_eval);
        return 0;
    }

    su::Model model = su::build_cascade(cfg.model, cfg.train.seed);
    const su::RunReport rep = su::train(model, data, cfg.train, a.out_dir);
    std::printf("best epoch %d: dice %.4f iou %.4f (%s); run dir %s\n", rep.best_epoch,
                rep.best_eval_dice, rep.best_eval_iou, rep.stop_reason.c_str(),
                rep.run_dir.string().c_str());
    return 0;
}

struct PredictArgs {
    std::string checkpoint, cup_checkpoint, out_dir;
    std::vector<std::string> images;
    double threshold = 0.5;
    int resolution = 256, margin = 20;
    bool overwrite = false;
};

int run_predict(const PredictArgs& a) {
    su::Model disc_model = su::load_checkpoint(a.checkpoint);
    std::optional<su::Model> cup_model;
    if (!a.cup_checkpoint.empty()) cup_model = su::load_checkpoint(a.cup_checkpoint);

    const int div = 1 << disc_model.spec.block.depth;
    if (a.resolution % div != 0)
        throw su::ConfigError("resolution " + std::to_string(a.resolution) +
                              " not divisible by " + std::to_string(div) +
                              "; pick a multiple, e.g. 256");
    if (a.threshold <= 0.0 || a.threshold >= 1.0)
        throw su::ConfigError("threshold must lie in (0, 1)");
    ensure_out_dir(a.out_dir, a.overwrite);

    std::ofstream cdr_csv;
    if (cup_model) {
        cdr_csv.open(std::filesystem::path(a.out_dir) / "cdr.csv");
        cdr_csv << "image,disc_height,cup_height,cdr,glaucoma_suspect\n";
    }
    for (const std::string& path : a.images) {
        const cv::Mat image = su::load_image(path);
        const cv::Mat prepped =
            su::resize_image(su::clahe(image), a.resolution, a.resolution);
        const su::ProbabilityMap disc_map = su::resize_map(
            su::predict_map(disc_model, prepped), image.rows, image.cols);
        const su::BinaryMask disc = su::binarize(disc_map, a.threshold);
        const std::string stem = std::filesystem::path(path).stem().string();
        su::save_mask(std::filesystem::path(a.out_dir) / (stem + "_disc.png"), disc);

        if (!cup_model) continue;
        su::CropRegion region;
        if (disc.count() == 0)
            region = su::CropRegion{0, 0, image.rows, image.cols, 0};
        else
            region = su::region_from_mask(disc, a.margin);
        const cv::Mat crop = su::resize_image(su::clahe(su::crop_by_region(image, region)),
                                              a.resolution, a.resolution);
        su::ProbabilityMap full(image.rows, image.cols);
        su::paste_region(
            su::resize_map(su::predict_map(*cup_model, crop), region.height, region.width),
            region, full);
        const su::BinaryMask cup = su::binarize(full, a.threshold);
        su::save_mask(std::filesystem::path(a.out_dir) / (stem + "_cup.png"), cup);

        if (disc.count() == 0) {
            cdr_csv << path << ",0,0,,no_disc_region\n";
        } else {
            const su::CdrResult cdr = su::cup_to_disc_ratio(disc, cup);
            cdr_csv << path << ',' << cdr.disc_height << ',' << cdr.cup_height << ',' << cdr.cdr
                    << ',' << (cdr.glaucoma_suspect ? "true" : "false") << "\n";
        }
    }
    std::printf("wrote masks for %zu image(s) to %s\n", a.images.size(), a.out_dir.c_str());
    return 0;
}

struct EvaluateArgs {
    std::string checkpoint, cup_checkpoint, manifest, split = "val", split_file, out_dir;
    double threshold = 0.5;
    int resolution = 256, margin = 20;
    bool oracle_crop = false, overwrite = false;
};

int run_evaluate(const EvaluateArgs& a) {
    su::Model disc_model = su::load_checkpoint(a.checkpoint);
    std::optional<su::Model> cup_model;
    if (!a.cup_checkpoint.empty()) cup_model = su::load_checkpoint(a.cup_checkpoint);

    su::DatasetManifest data = su::load_manifest(a.manifest);
    if (!a.split_file.empty()) su::apply_split_file(data, a.split_file);
    const su::Split split = a.split == "all" ? su::Split::none : su::split_from_string(a.split);

    su::EvalOptions opt;
    opt.threshold = a.threshold;
    opt.resolution_h = opt.resolution_w = a.resolution;
    opt.margin = a.margin;
    opt.oracle_crop = a.oracle_crop;
    ensure_out_dir(a.out_dir, a.overwrite);

    const su::EvalReport rep = su::evaluate_model(disc_model, cup_model ? &*cup_model : nullptr,
                                                  data, split, opt, a.out_dir);
    for (const su::EvalSummary& s : rep.summaries)
        std::printf("%-16s %-5s n=%-4d mean IOU %.4f  mean Dice %.4f\n", s.source.c_str(),
                    s.organ.c_str(), s.n, s.mean_iou, s.mean_dice);
    std::printf("reports written to %s\n", a.out_dir.c_str());
    return 0;
}

struct SweepArgs {
    std::string config_path, blocks = "1", out_dir;
    bool with_cup = false, no_long_skip = false, overwrite = false;
    std::string block_kind;
};

int run_sweep(const SweepArgs& a) {
    RunConfig cfg = parse_run_config(a.config_path);
    if (a.no_long_skip) cfg.model.long_skip = false;
    if (!a.block_kind.empty()) cfg.model.block.kind = su::block_kind_from_string(a.block_kind);
    if (cfg.manifest.empty()) throw su::ConfigError("no manifest given (config data.manifest)");

    std::vector<int> counts;
    std::stringstream ss(a.blocks);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) {
            try {
                counts.push_back(std::stoi(tok));
            } catch (const std::exception&) {
                throw su::ConfigError("sweep: bad block count '" + tok + "'");
            }
        }
    if (counts.empty()) throw su::ConfigError("sweep: --blocks must list counts, e.g. 1,3,5");

    ensure_out_dir(a.out_dir, a.overwrite);
    su::DatasetManifest data = su::load_manifest(cfg.manifest);
    assign_split(data, cfg);

    const std::vector<su::SweepRow> rows =
        su::sweep_blocks(counts, cfg.model, data, cfg.train, a.with_cup, a.out_dir);
    su::write_sweep_csv(rows, std::filesystem::path(a.out_dir) / "sweep.csv");
    su::write_sweep_plot(rows, std::filesystem::path(a.out_dir) / "sweep.png");
    for (const su::SweepRow& r : rows) {
        std::printf("blocks %2d: disc IOU %.4f Dice %.4f", r.n_blocks, r.disc_iou, r.disc_dice);
        if (r.has_cup) std::printf("  cup IOU %.4f Dice %.4f", r.cup_iou, r.cup_dice);
        std::printf("\n");
    }
    return 0;
}

struct AgreementArgs {
    std::string manifest, out_csv;
};

int run_agreement(const AgreementArgs& a) {
    const su::DatasetManifest data = su::load_manifest(a.manifest);
    const su::AgreementReport rep = su::human_agreement(data);
    auto show = [](const char* organ, const su::AgreementReport::Organ& o) {
        if (o.records_used == 0) {
            std::printf("%-5s no records with two or more annotators (%d skipped)\n", organ,
                        o.records_skipped);
            return;
        }
        std::printf("%-5s mean IOU %.4f  mean Dice %.4f  over %d record(s), %d skipped\n", organ,
                    o.mean_iou, o.mean_dice, o.records_used, o.records_skipped);
    };
    show("disc", rep.disc);
    show("cup", rep.cup);
    if (!a.out_csv.empty()) {
        std::ofstream out(a.out_csv);
        if (!out) throw su::DataError("agreement: cannot write " + a.out_csv);
        out << "organ,mean_iou,mean_dice,records_used,records_skipped\n";
        out << "disc," << rep.disc.mean_iou << ',' << rep.disc.mean_dice << ','
            << rep.disc.records_used << ',' << rep.disc.records_skipped << "\n";
        out << "cup," << rep.cup.mean_iou << ',' << rep.cup.mean_dice << ','
            << rep.cup.records_used << ',' << rep.cup.records_skipped << "\n";
    }
    return 0;
}

struct SynthArgs {
    std::string out_dir;
    int images = 60, persons = 20, annotators = 1, size = 128;
    int64_t seed = 1;
    bool overwrite = false;
};

int run_synth(const SynthArgs& a) {
    ensure_out_dir(a.out_dir, a.overwrite);
    su::SynthSpec spec;
    spec.n_images = a.images;
    spec.n_persons = a.persons;
    spec.n_annotators = a.annotators;
    spec.size = a.size;
    spec.seed = uint64_t(a.seed);
    const su::DatasetManifest m = su::generate_synthetic_dataset(spec, a.out_dir);
    std::printf("wrote %zu image(s) and manifest.csv to %s\n", m.size(), a.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stacked encoder-decoder segmentation of the optic disc and cup"};
    app.require_subcommand(1);

    TrainArgs train_args;
    CLI::App* train = app.add_subcommand("train", "run the optimization loop");
    train->add_option("--config", train_args.config_path, "JSON config file")->required();
    train->add_option("--out", train_args.out_dir, "run directory")->required();
    train->add_option("--manifest", train_args.manifest_override, "override data.manifest");
    train->add_option("--blocks", train_args.blocks, "override the block count");
    train->add_option("--block-kind", train_args.block_kind, "unet or res_unet");
    train->add_flag("--no-long-skip", train_args.no_long_skip,
                    "drop the input-image concatenation to later blocks");
    train->add_option("--organ", train_args.organ, "disc or cup");
    train->add_option("--seed", train_args.seed, "override the run seed");
    train->add_flag("--cup-crop", train_args.cup_crop,
                    "two-stage pipeline: train on disc-region crops");
    train->add_option("--disc-checkpoint", train_args.disc_checkpoint,
                      "disc model for predicted crops");
    train->add_flag("--oracle-crop", train_args.oracle_crop,
                    "crop by the ground-truth disc region");
    train->add_flag("--overwrite", train_args.overwrite, "reuse a non-empty output directory");

    PredictArgs predict_args;
    CLI::App* predict = app.add_subcommand("predict", "write predicted masks for images");
    predict->add_option("--checkpoint", predict_args.checkpoint, "disc checkpoint")->required();
    predict->add_option("--cup-checkpoint", predict_args.cup_checkpoint, "cup checkpoint");
    predict->add_option("--out", predict_args.out_dir, "output directory")->required();
    predict->add_option("--threshold", predict_args.threshold, "binarization threshold");
    predict->add_option("--resolution", predict_args.resolution, "network input size");
    predict->add_option("--margin", predict_args.margin, "cup crop gap, pixels");
    predict->add_flag("--overwrite", predict_args.overwrite, "reuse a non-empty output directory");
    predict->add_option("images", predict_args.images, "input images")->required();

    EvaluateArgs eval_args;
    CLI::App* evaluate = app.add_subcommand("evaluate", "metric tables and case panels");
    evaluate->add_option("--checkpoint", eval_args.checkpoint, "disc checkpoint")->required();
    evaluate->add_option("--cup-checkpoint", eval_args.cup_checkpoint, "cup checkpoint");
    evaluate->add_option("--manifest", eval_args.manifest, "dataset manifest")->required();
    evaluate->add_option("--split", eval_args.split, "train, val, test, or all");
    evaluate->add_option("--split-file", eval_args.split_file, "image_path,split assignment csv");
    evaluate->add_option("--out", eval_args.out_dir, "output directory")->required();
    evaluate->add_option("--threshold", eval_args.threshold, "binarization threshold");
    evaluate->add_option("--resolution", eval_args.resolution, "network input size");
    evaluate->add_option("--margin", eval_args.margin, "cup crop gap, pixels");
    evaluate->add_flag("--oracle-crop", eval_args.oracle_crop,
                       "crop cup inputs by the ground-truth disc region");
    evaluate->add_flag("--overwrite", eval_args.overwrite, "reuse a non-empty output directory");

    SweepArgs sweep_args;
    CLI::App* sweep = app.add_subcommand("sweep", "one training run per block count");
    sweep->add_option("--config", sweep_args.config_path, "JSON config file")->required();
    sweep->add_option("--blocks", sweep_args.blocks, "comma-separated counts, e.g. 1,3,5")
        ->required();
    sweep->add_option("--out", sweep_args.out_dir, "output directory")->required();
    sweep->add_option("--block-kind", sweep_args.block_kind, "unet or res_unet");
    sweep->add_flag("--no-long-skip", sweep_args.no_long_skip,
                    "drop the input-image concatenation to later blocks");
    sweep->add_flag("--with-cup", sweep_args.with_cup, "also train the cropped cup stage");
    sweep->add_flag("--overwrite", sweep_args.overwrite, "reuse a non-empty output directory");

    AgreementArgs agree_args;
    CLI::App* agreement = app.add_subcommand("agreement", "inter-annotator IOU and Dice");
    agreement->add_option("--manifest", agree_args.manifest, "dataset manifest")->required();
    agreement->add_option("--out", agree_args.out_csv, "also write a csv here");

    SynthArgs synth_args;
    CLI::App* synth = app.add_subcommand("synth", "render a synthetic dataset");
    synth->add_option("--out", synth_args.out_dir, "dataset directory")->required();
    synth->add_option("--images", synth_args.images, "number of images");
    synth->add_option("--persons", synth_args.persons, "number of persons");
    synth->add_option("--annotators", synth_args.annotators, "annotators per image");
    synth->add_option("--size", synth_args.size, "image side, pixels");
    synth->add_option("--seed", synth_args.seed, "generation seed");
    synth->add_flag("--overwrite", synth_args.overwrite, "reuse a non-empty output directory");

    try {
        app.parse(argc, argv);
        if (*train) return run_train(train_args);
        if (*predict) return run_predict(predict_args);
        if (*evaluate) return run_evaluate(eval_args);
        if (*sweep) return run_sweep(sweep_args);
        if (*agreement) return run_agreement(agree_args);
        if (*synth) return run_synth(synth_args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const su::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const su::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const su::TrainError& e) {
        std::fprintf(stderr, "training error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
    return 0;
}

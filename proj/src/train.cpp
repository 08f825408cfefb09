#include "stackunet/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "stackunet/errors.hpp"
#include "stackunet/serialize.hpp"

namespace stackunet {

void TrainConfig::validate(const CascadeSpec& model_spec) const {
    if (learning_rate < 0.0 || !std::isfinite(learning_rate))
        throw ConfigError("train: learning_rate must be finite and >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (eps_loss <= 0.0) throw ConfigError("train: eps_loss must be > 0");
    if (resolution_h < 1 || resolution_w < 1)
        throw ConfigError("train: resolution must be positive");
    const int div = 1 << model_spec.block.depth;
    if (resolution_h % div != 0 || resolution_w % div != 0)
        throw ConfigError("train: resolution " + std::to_string(resolution_h) + "x" +
                          std::to_string(resolution_w) + " not divisible by " +
                          std::to_string(div));
    if (threshold <= 0.0 || threshold >= 1.0)
        throw ConfigError("train: threshold must lie in (0, 1)");
    if (organ != "disc" && organ != "cup")
        throw ConfigError("train: organ must be disc or cup, got " + organ);
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
        throw ConfigError("train: Adam betas must lie in [0, 1)");
    if (adam_eps <= 0.0) throw ConfigError("train: adam_eps must be > 0");
    if (soft_targets && augment_enabled)
        throw ConfigError("train: soft_targets requires augmentation off");
    if (stop_at_dice < 0.0 || stop_at_dice > 1.0)
        throw ConfigError("train: stop_at_dice must lie in [0, 1]");
    augment.validate();
}

void Adam::step(std::vector<Param>& params) {
    ++t;
    const double corr1 = 1.0 - std::pow(beta1, double(t));
    const double corr2 = 1.0 - std::pow(beta2, double(t));
    for (Param& p : params) {
        if (p.grad.empty()) continue;
        if (p.adam_m.size() != p.count()) p.adam_m.assign(p.count(), 0.0f);
        if (p.adam_v.size() != p.count()) p.adam_v.assign(p.count(), 0.0f);
        for (size_t i = 0; i < p.count(); ++i) {
            const double g = p.grad[i];
            const double m = beta1 * p.adam_m[i] + (1.0 - beta1) * g;
            const double v = beta2 * p.adam_v[i] + (1.0 - beta2) * g * g;
            p.adam_m[i] = float(m);
            p.adam_v[i] = float(v);
            p.value[i] -= float(lr * (m / corr1) / (std::sqrt(v / corr2) + eps));
        }
    }
}

std::vector<LoadedSample> load_split_samples(const DatasetManifest& data, Split split,
                                             const std::string& organ, const TrainConfig& cfg,
                                             int* n_skipped) {
    std::vector<LoadedSample> out;
    int skipped = 0;
    for (size_t idx : data.indices_in(split)) {
        const SampleRecord& r = data.records[idx];
        const std::vector<std::string>& mask_paths =
            organ == "cup" ? r.cup_mask_paths : r.disc_mask_paths;
        if (mask_paths.empty()) {
            ++skipped;
            continue;
        }
        std::vector<BinaryMask> masks;
        for (const std::string& p : mask_paths) masks.push_back(load_mask(data.resolve(p)));
        const ProbabilityMap soft_native = average_annotators(masks);
        const BinaryMask mask_native = binarize(soft_native, 0.5);

        LoadedSample s;
        s.image = resize_image(clahe(load_image(data.resolve(r.image_path))), cfg.resolution_h,
                               cfg.resolution_w);
        s.mask = resize_mask(mask_native, cfg.resolution_h, cfg.resolution_w);
        s.soft = resize_map(soft_native, cfg.resolution_h, cfg.resolution_w);
        s.record_index = idx;
        out.push_back(std::move(s));
    }
    if (n_skipped) *n_skipped = skipped;
    return out;
}

Tensor samples_to_batch(const std::vector<LoadedSample>& samples, const std::vector<size_t>& idx) {
    if (idx.empty()) throw ConfigError("samples_to_batch: empty index list");
    const cv::Mat& first = samples[idx[0]].image;
    Tensor batch(int(idx.size()), 3, first.rows, first.cols);
    for (size_t s = 0; s < idx.size(); ++s) {
        const Tensor one = image_to_tensor(samples[idx[s]].image);
        std::copy(one.data.begin(), one.data.end(), batch.ptr(int(s), 0));
    }
    return batch;
}

ProbabilityMap predict_map(Model& model, const cv::Mat& image_at_resolution) {
    const Tensor y = model.forward(image_to_tensor(image_at_resolution));
    return tensor_to_map(y);
}

namespace {

struct EvalMeans {
    double loss = 0.0, dice = 0.0, iou_v = 0.0;
};

EvalMeans evaluate_samples(Model& model, const std::vector<LoadedSample>& samples,
                           const TrainConfig& cfg) {
    EvalMeans m;
    for (const LoadedSample& s : samples) {
        const ProbabilityMap map = predict_map(model, s.image);
        const BinaryMask pred = binarize(map, cfg.threshold);
        m.loss += -std::log(soft_dice(map, s.mask, cfg.eps_loss));
        m.dice += binary_dice(pred, s.mask);
        m.iou_v += iou(pred, s.mask);
    }
    const double n = double(samples.size());
    m.loss /= n;
    m.dice /= n;
    m.iou_v /= n;
    return m;
}

void check_finite_weights(const Model& model, int epoch) {
    for (const Param& p : model.graph.params())
        for (float v : p.value)
            if (!std::isfinite(v))
                throw TrainError("epoch " + std::to_string(epoch) + ": non-finite weight in " +
                                 p.name);
    for (const StateArray& s : model.graph.state())
        for (float v : s.value)
            if (!std::isfinite(v))
                throw TrainError("epoch " + std::to_string(epoch) + ": non-finite statistic in " +
                                 s.name);
}

void write_report_json(const RunReport& rep, const TrainConfig& cfg,
                       const std::filesystem::path& path) {
    nlohmann::json j;
    j["best_epoch"] = rep.best_epoch;
    j["best_eval_dice"] = rep.best_eval_dice;
    j["best_eval_iou"] = rep.best_eval_iou;
    j["best_checkpoint"] = rep.best_checkpoint.string();
    j["train_images"] = rep.train_images;
    j["eval_images"] = rep.eval_images;
    j["epochs_run"] = rep.epochs.size();
    j["stop_reason"] = rep.stop_reason;
    j["learning_rate_used"] = rep.learning_rate_used;
    j["learning_rate_default"] = rep.learning_rate_default;
    j["split_protocol"] = rep.split_protocol;
    j["config"] = train_config_to_json(cfg);
    std::ofstream out(path);
    out << j.dump(2) << "\n";
}

}  // namespace

RunReport train_on_samples(Model& model, const std::vector<LoadedSample>& train_samples,
                           const std::vector<LoadedSample>& eval_samples, const TrainConfig& cfg,
                           const std::filesystem::path& run_dir,
                           const std::string& split_protocol) {
    cfg.validate(model.spec);
    if (train_samples.empty()) throw DataError("train: empty train split");
    const std::vector<LoadedSample>& eval_set =
        eval_samples.empty() ? train_samples : eval_samples;

    RunReport rep;
    rep.run_dir = run_dir;
    rep.train_images = int(train_samples.size());
    rep.eval_images = int(eval_set.size());
    rep.learning_rate_used = cfg.learning_rate;
    rep.split_protocol = split_protocol.empty() ? "unsplit (all records)" : split_protocol;

    std::ofstream metrics_csv;
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        std::ofstream cfg_out(run_dir / "config.json");
        nlohmann::json snapshot;
        snapshot["model"] = cascade_spec_to_json(model.spec);
        snapshot["train"] = train_config_to_json(cfg);
        cfg_out << snapshot.dump(2) << "\n";
        metrics_csv.open(run_dir / "metrics.csv");
        metrics_csv << "epoch,train_loss,eval_loss,eval_dice,eval_iou,seconds\n";
    }

    Adam adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    const int hw = cfg.resolution_h * cfg.resolution_w;
    std::vector<float> target(size_t(cfg.batch_size) * hw);
    int epochs_since_best = 0;
    rep.stop_reason = "max_epochs";

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();

        std::vector<size_t> order(train_samples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = Rng::derive(cfg.seed, {rng_stream::kShuffle, uint64_t(epoch)});
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(uint32_t(i))]);

        double epoch_loss = 0.0;
        size_t seen = 0;
        int batch_id = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_id) {
            const size_t n = std::min<size_t>(cfg.batch_size, order.size() - start);
            Tensor batch(int(n), 3, cfg.resolution_h, cfg.resolution_w);
            for (size_t s = 0; s < n; ++s) {
                const LoadedSample& sample = train_samples[order[start + s]];
                Tensor one;
                if (cfg.augment_enabled) {
                    Rng aug_rng = Rng::derive(
                        cfg.seed,
                        {rng_stream::kAugment, uint64_t(epoch), uint64_t(sample.record_index)});
                    AugmentedPair pair = augment(sample.image, sample.mask, cfg.augment, aug_rng);
                    one = image_to_tensor(pair.image);
                    for (int i = 0; i < hw; ++i) target[s * hw + i] = float(pair.mask.v[i]);
                } else {
                    one = image_to_tensor(sample.image);
                    if (cfg.soft_targets)
                        for (int i = 0; i < hw; ++i) target[s * hw + i] = float(sample.soft.v[i]);
                    else
                        for (int i = 0; i < hw; ++i) target[s * hw + i] = float(sample.mask.v[i]);
                }
                std::copy(one.data.begin(), one.data.end(), batch.ptr(int(s), 0));
            }

            const Tensor& y = model.forward(batch, true);
            double batch_loss = 0.0;
            for (size_t s = 0; s < n; ++s) {
                const DiceSums sums = dice_sums(y.ptr(int(s), 0), target.data() + s * hw, hw);
                batch_loss += -std::log(soft_dice_from_sums(sums, cfg.eps_loss));
            }
            batch_loss /= double(n);
            if (!std::isfinite(batch_loss))
                throw TrainError("epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batch_id) + ": non-finite loss " +
                                 std::to_string(batch_loss));
            epoch_loss += batch_loss * double(n);
            seen += n;

            Tensor dout(int(n), 1, cfg.resolution_h, cfg.resolution_w);
            dout.fill(0.0f);
            for (size_t s = 0; s < n; ++s)
                add_log_dice_grad(y.ptr(int(s), 0), target.data() + s * hw, hw, cfg.eps_loss,
                                  1.0 / double(n), dout.ptr(int(s), 0));
            model.graph.zero_grads();
            model.graph.backward(dout);
            adam.step(model.graph.params());
        }
        check_finite_weights(model, epoch);

        const EvalMeans ev = evaluate_samples(model, eval_set, cfg);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rep.epochs.push_back(
            {epoch, epoch_loss / double(seen), ev.loss, ev.dice, ev.iou_v, secs});
        if (metrics_csv.is_open()) {
            metrics_csv << epoch << ',' << epoch_loss / double(seen) << ',' << ev.loss << ','
                        << ev.dice << ',' << ev.iou_v << ',' << secs << "\n";
            metrics_csv.flush();
        }
        if (cfg.max_epochs <= 50 || epoch % 10 == 0 || epoch == 1)
            std::printf("epoch %d/%d  train_loss %.4f  eval_dice %.4f  (%.1fs)\n", epoch,
                        cfg.max_epochs, epoch_loss / double(seen), ev.dice, secs);

        if (rep.best_epoch < 0 || ev.dice > rep.best_eval_dice) {
            rep.best_epoch = epoch;
            rep.best_eval_dice = ev.dice;
            rep.best_eval_iou = ev.iou_v;
            epochs_since_best = 0;
            if (!run_dir.empty()) {
                rep.best_checkpoint = run_dir / "best.ckpt";
                save_checkpoint(model, rep.best_checkpoint);
            }
        } else {
            ++epochs_since_best;
        }

        if (!run_dir.empty() && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
            save_checkpoint(model, run_dir / "last.ckpt");

        if (cfg.stop_at_dice > 0.0 && ev.dice >= cfg.stop_at_dice) {
            rep.stop_reason = "stop_at_dice";
            break;
        }
        if (cfg.early_stop_patience > 0 && epochs_since_best >= cfg.early_stop_patience) {
            rep.stop_reason = "patience";
            break;
        }
    }

    if (!run_dir.empty()) {
        save_checkpoint(model, run_dir / "last.ckpt");
        write_report_json(rep, cfg, run_dir / "report.json");
    }
    return rep;
}

RunReport train(Model& model, const DatasetManifest& data, const TrainConfig& cfg,
                const std::filesystem::path& run_dir) {
    const bool has_split =
        std::any_of(data.split.begin(), data.split.end(), [](Split s) { return s != Split::none; });
    if (!has_split) throw DataError("train: manifest has no split assignment");

    int skipped_train = 0, skipped_val = 0;
    const std::vector<LoadedSample> train_set =
        load_split_samples(data, Split::train, cfg.organ, cfg, &skipped_train);
    const std::vector<LoadedSample> val_set =
        load_split_samples(data, Split::val, cfg.organ, cfg, &skipped_val);
    if (skipped_train + skipped_val > 0)
        std::printf("train: skipped %d record(s) without %s masks\n", skipped_train + skipped_val,
                    cfg.organ.c_str());

    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        write_split_file(data, run_dir / "split.csv");
    }
    return train_on_samples(model, train_set, val_set, cfg, run_dir, data.split_origin);
}

namespace {

// Full-frame disc mask for crop-region selection: ground truth in oracle
// mode, the disc model's prediction otherwise. Empty optional when no disc
// information exists for the record.
std::optional<BinaryMask> disc_region_mask(Model* disc_model, const DatasetManifest& data,
                                           const SampleRecord& r, const TrainConfig& cfg,
                                           bool oracle, const cv::Mat& image_native) {
    if (oracle) {
        if (r.disc_mask_paths.empty()) return std::nullopt;
        std::vector<BinaryMask> masks;
        for (const std::string& p : r.disc_mask_paths) masks.push_back(load_mask(data.resolve(p)));
        return binarize(average_annotators(masks), 0.5);
    }
    if (!disc_model) throw ConfigError("cup pipeline: predicted crops need a disc model");
    const cv::Mat prepped =
        resize_image(clahe(image_native), cfg.resolution_h, cfg.resolution_w);
    const ProbabilityMap map = predict_map(*disc_model, prepped);
    return binarize(resize_map(map, image_native.rows, image_native.cols), cfg.threshold);
}

LoadedSample crop_to_sample(const cv::Mat& image_native, const BinaryMask& cup_native,
                            const ProbabilityMap& cup_soft_native, const CropRegion& region,
                            const TrainConfig& cfg, size_t record_index) {
    LoadedSample s;
    s.image = resize_image(clahe(crop_by_region(image_native, region)), cfg.resolution_h,
                           cfg.resolution_w);
    s.mask = resize_mask(crop_by_region(cup_native, region), cfg.resolution_h, cfg.resolution_w);
    ProbabilityMap soft_crop(region.height, region.width);
    for (int y = 0; y < region.height; ++y)
        for (int x = 0; x < region.width; ++x)
            soft_crop.at(y, x) = cup_soft_native.at(region.top + y, region.left + x);
    s.soft = resize_map(soft_crop, cfg.resolution_h, cfg.resolution_w);
    s.record_index = record_index;
    return s;
}

}  // namespace

CupPipelineReport train_cup_pipeline(Model* disc_model, Model& cup_model,
                                     const DatasetManifest& data, const TrainConfig& cfg,
                                     const CupPipelineConfig& pipeline,
                                     const std::filesystem::path& run_dir) {
    if (pipeline.margin < 0) throw ConfigError("cup pipeline: margin must be >= 0");
    TrainConfig cup_cfg = cfg;
    cup_cfg.organ = "cup";
    cup_cfg.validate(cup_model.spec);

    CupPipelineReport rep;
    std::vector<LoadedSample> train_set;
    struct EvalItem {
        size_t record_index;
        CropRegion region;
        bool fallback;
    };
    std::vector<EvalItem> eval_items;

    for (size_t idx : data.indices_in(Split::train)) {
        const SampleRecord& r = data.records[idx];
        if (r.cup_mask_paths.empty()) continue;
        const cv::Mat image = load_image(data.resolve(r.image_path));
        const std::optional<BinaryMask> disc =
            disc_region_mask(disc_model, data, r, cup_cfg, pipeline.oracle_crop, image);
        if (!disc || disc->count() == 0) {
            ++rep.skipped_train;
            continue;
        }
        std::vector<BinaryMask> cups;
        for (const std::string& p : r.cup_mask_paths) cups.push_back(load_mask(data.resolve(p)));
        const ProbabilityMap soft = average_annotators(cups);
        train_set.push_back(crop_to_sample(image, binarize(soft, 0.5), soft,
                                           region_from_mask(*disc, pipeline.margin), cup_cfg,
                                           idx));
    }

    for (size_t idx : data.indices_in(Split::val)) {
        const SampleRecord& r = data.records[idx];
        if (r.cup_mask_paths.empty()) continue;
        const cv::Mat image = load_image(data.resolve(r.image_path));
        const std::optional<BinaryMask> disc =
            disc_region_mask(disc_model, data, r, cup_cfg, pipeline.oracle_crop, image);
        EvalItem item{idx, {}, false};
        if (!disc || disc->count() == 0) {
            item.fallback = true;
            item.region = CropRegion{0, 0, image.rows, image.cols, 0};
            ++rep.fallback_eval;
        } else {
            item.region = region_from_mask(*disc, pipeline.margin);
        }
        eval_items.push_back(item);
    }

    // validation during cup training happens on the crops themselves
    std::vector<LoadedSample> eval_crops;
    for (const EvalItem& item : eval_items) {
        const SampleRecord& r = data.records[item.record_index];
        const cv::Mat image = load_image(data.resolve(r.image_path));
        std::vector<BinaryMask> cups;
        for (const std::string& p : r.cup_mask_paths) cups.push_back(load_mask(data.resolve(p)));
        const ProbabilityMap soft = average_annotators(cups);
        eval_crops.push_back(crop_to_sample(image, binarize(soft, 0.5), soft, item.region,
                                            cup_cfg, item.record_index));
    }

    rep.train_report =
        train_on_samples(cup_model, train_set, eval_crops, cup_cfg, run_dir, data.split_origin);

    // full-frame evaluation with predictions pasted back at native size
    for (size_t i = 0; i < eval_items.size(); ++i) {
        const EvalItem& item = eval_items[i];
        const SampleRecord& r = data.records[item.record_index];
        const cv::Mat image = load_image(data.resolve(r.image_path));
        const ProbabilityMap crop_map = predict_map(cup_model, eval_crops[i].image);
        ProbabilityMap full(image.rows, image.cols);
        paste_region(resize_map(crop_map, item.region.height, item.region.width), item.region,
                     full);
        std::vector<BinaryMask> cups;
        for (const std::string& p : r.cup_mask_paths) cups.push_back(load_mask(data.resolve(p)));
        const BinaryMask gt = binarize(average_annotators(cups), 0.5);
        const BinaryMask pred = binarize(full, cup_cfg.threshold);
        rep.eval_dice += binary_dice(pred, gt);
        rep.eval_iou += iou(pred, gt);
        ++rep.eval_images;
    }
    if (rep.eval_images > 0) {
        rep.eval_dice /= rep.eval_images;
        rep.eval_iou /= rep.eval_images;
    }
    return rep;
}

std::vector<SweepRow> sweep_blocks(const std::vector<int>& block_counts,
                                   const CascadeSpec& base_spec, const DatasetManifest& data,
                                   const TrainConfig& cfg, bool include_cup,
                                   const std::filesystem::path& run_dir) {
    if (block_counts.empty()) throw ConfigError("sweep: no block counts given");
    for (int n : block_counts)
        if (n < 1) throw ConfigError("sweep: block counts must be >= 1");

    std::vector<SweepRow> rows;
    for (int n : block_counts) {
        CascadeSpec spec = base_spec;
        spec.n_blocks = n;
        const std::filesystem::path sub =
            run_dir.empty() ? run_dir : run_dir / ("n" + std::to_string(n));

        SweepRow row;
        row.n_blocks = n;
        TrainConfig disc_cfg = cfg;
        disc_cfg.organ = "disc";
        Model disc_model = build_cascade(spec, cfg.seed);
        const RunReport disc_rep =
            train(disc_model, data, disc_cfg, sub.empty() ? sub : sub / "disc");
        row.disc_dice = disc_rep.best_eval_dice;
        row.disc_iou = disc_rep.best_eval_iou;

        if (include_cup) {
            Model cup_model = build_cascade(spec, cfg.seed + 1);
            CupPipelineConfig pipe;
            pipe.oracle_crop = true;
            const CupPipelineReport cup_rep = train_cup_pipeline(
                nullptr, cup_model, data, cfg, pipe, sub.empty() ? sub : sub / "cup");
            row.has_cup = cup_rep.eval_images > 0;
            row.cup_dice = cup_rep.eval_dice;
            row.cup_iou = cup_rep.eval_iou;
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace stackunet

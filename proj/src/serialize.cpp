#include "stackunet/serialize.hpp"

#include "stackunet/errors.hpp"
#include "stackunet/train.hpp"

namespace stackunet {

using nlohmann::json;

json cascade_spec_to_json(const CascadeSpec& spec) {
    return json{
        {"n_blocks", spec.n_blocks},
        {"kind", to_string(spec.block.kind)},
        {"depth", spec.block.depth},
        {"base_channels", spec.block.base_channels},
        {"out_channels", spec.block.out_channels},
        {"batch_norm", spec.block.batch_norm},
        {"upsample", to_string(spec.block.upsample)},
        {"long_skip", spec.long_skip},
        {"input_channels", spec.input_channels},
        {"input_residual", spec.input_residual},
    };
}

CascadeSpec cascade_spec_from_json(const json& j) {
    static const char* known[] = {"n_blocks",   "kind",       "depth",
                                  "base_channels", "out_channels", "batch_norm",
                                  "upsample",   "long_skip",  "input_channels",
                                  "input_residual"};
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("model: unknown key '" + key + "'");
    }
    CascadeSpec spec;
    try {
        spec.n_blocks = j.value("n_blocks", spec.n_blocks);
        if (j.contains("kind")) spec.block.kind = block_kind_from_string(j.at("kind"));
        spec.block.depth = j.value("depth", spec.block.depth);
        spec.block.base_channels = j.value("base_channels", spec.block.base_channels);
        spec.block.out_channels = j.value("out_channels", spec.block.out_channels);
        spec.block.batch_norm = j.value("batch_norm", spec.block.batch_norm);
        if (j.contains("upsample")) spec.block.upsample = up_mode_from_string(j.at("upsample"));
        spec.long_skip = j.value("long_skip", spec.long_skip);
        spec.input_channels = j.value("input_channels", spec.input_channels);
        spec.input_residual = j.value("input_residual", spec.input_residual);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    spec.validate();
    return spec;
}

namespace {

json range_to_json(const Range& r) { return json::array({r.lo, r.hi}); }

Range range_from_json(const json& j, const char* name) {
    if (!j.is_array() || j.size() != 2)
        throw ConfigError(std::string("augment: ") + name + " must be a [lo, hi] pair");
    return Range{j[0].get<double>(), j[1].get<double>()};
}

void reject_unknown(const json& j, const char* who, std::initializer_list<const char*> known) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError(std::string(who) + ": unknown key '" + key + "'");
    }
}

}  // namespace

json augment_spec_to_json(const AugmentSpec& spec) {
    return json{
        {"rotation_deg", range_to_json(spec.rotation_deg)},
        {"zoom", range_to_json(spec.zoom)},
        {"shift_frac", range_to_json(spec.shift_frac)},
        {"shear_deg", range_to_json(spec.shear_deg)},
        {"hflip_prob", spec.hflip_prob},
        {"vflip_prob", spec.vflip_prob},
    };
}

AugmentSpec augment_spec_from_json(const json& j) {
    reject_unknown(j, "augment",
                   {"rotation_deg", "zoom", "shift_frac", "shear_deg", "hflip_prob", "vflip_prob"});
    AugmentSpec spec;
    try {
        if (j.contains("rotation_deg"))
            spec.rotation_deg = range_from_json(j.at("rotation_deg"), "rotation_deg");
        if (j.contains("zoom")) spec.zoom = range_from_json(j.at("zoom"), "zoom");
        if (j.contains("shift_frac"))
            spec.shift_frac = range_from_json(j.at("shift_frac"), "shift_frac");
        if (j.contains("shear_deg"))
            spec.shear_deg = range_from_json(j.at("shear_deg"), "shear_deg");
        spec.hflip_prob = j.value("hflip_prob", spec.hflip_prob);
        spec.vflip_prob = j.value("vflip_prob", spec.vflip_prob);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("augment: ") + e.what());
    }
    spec.validate();
    return spec;
}

json train_config_to_json(const TrainConfig& cfg) {
    return json{
        {"learning_rate", cfg.learning_rate},
        {"batch_size", cfg.batch_size},
        {"max_epochs", cfg.max_epochs},
        {"eps_loss", cfg.eps_loss},
        {"resolution", json::array({cfg.resolution_h, cfg.resolution_w})},
        {"augment", augment_spec_to_json(cfg.augment)},
        {"augment_enabled", cfg.augment_enabled},
        {"seed", cfg.seed},
        {"checkpoint_every", cfg.checkpoint_every},
        {"early_stop_patience", cfg.early_stop_patience},
        {"threshold", cfg.threshold},
        {"organ", cfg.organ},
        {"adam_beta1", cfg.adam_beta1},
        {"adam_beta2", cfg.adam_beta2},
        {"adam_eps", cfg.adam_eps},
        {"soft_targets", cfg.soft_targets},
        {"stop_at_dice", cfg.stop_at_dice},
    };
}

TrainConfig train_config_from_json(const json& j) {
    reject_unknown(j, "train",
                   {"learning_rate", "batch_size", "max_epochs", "eps_loss", "resolution",
                    "augment", "augment_enabled", "seed", "checkpoint_every",
                    "early_stop_patience", "threshold", "organ", "adam_beta1", "adam_beta2",
                    "adam_eps", "soft_targets", "stop_at_dice"});
    TrainConfig cfg;
    try {
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
        cfg.eps_loss = j.value("eps_loss", cfg.eps_loss);
        if (j.contains("resolution")) {
            const json& r = j.at("resolution");
            if (!r.is_array() || r.size() != 2)
                throw ConfigError("train: resolution must be an [H, W] pair");
            cfg.resolution_h = r[0].get<int>();
            cfg.resolution_w = r[1].get<int>();
        }
        if (j.contains("augment")) cfg.augment = augment_spec_from_json(j.at("augment"));
        cfg.augment_enabled = j.value("augment_enabled", cfg.augment_enabled);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
        cfg.early_stop_patience = j.value("early_stop_patience", cfg.early_stop_patience);
        cfg.threshold = j.value("threshold", cfg.threshold);
        cfg.organ = j.value("organ", cfg.organ);
        cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
        cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
        cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
        cfg.soft_targets = j.value("soft_targets", cfg.soft_targets);
        cfg.stop_at_dice = j.value("stop_at_dice", cfg.stop_at_dice);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train: ") + e.what());
    }
    return cfg;
}

}  // namespace stackunet

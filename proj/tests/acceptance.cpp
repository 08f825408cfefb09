// End-to-end contract checks for the library. Each criterion prints exactly
// one PASS/FAIL line; the process exits with the number of failures. Run a
// subset with --criterion N (repeatable).

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stackunet/dataset.hpp"
#include "stackunet/metrics.hpp"
#include "stackunet/model.hpp"
#include "stackunet/rng.hpp"
#include "stackunet/serialize.hpp"
#include "stackunet/synthetic.hpp"
#include "stackunet/train.hpp"

using namespace stackunet;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Check {
    bool ok = true;
    std::string first_failure;

    void require(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            first_failure = what;
        }
    }
};

std::filesystem::path scratch_dir() {
    const std::filesystem::path p =
        std::filesystem::temp_directory_path() / "stackunet_acceptance";
    std::filesystem::create_directories(p);
    return p;
}

// --------------------------------------------------------------------------
// 1. Output contract across block counts, block kinds, and the long skip.

Outcome criterion_shapes() {
    const auto t0 = Clock::now();
    constexpr double kTimeBudget = 60.0;
    Check c;
    int combos = 0;

    for (int n_blocks : {1, 3, 15}) {
        for (BlockKind kind : {BlockKind::unet, BlockKind::res_unet}) {
            for (bool skip : {true, false}) {
                CascadeSpec spec;
                spec.n_blocks = n_blocks;
                spec.block.kind = kind;
                spec.block.depth = 4;
                spec.block.base_channels = 16;
                spec.long_skip = skip;
                Model model = build_cascade(spec, 1);

                Tensor in(1, 3, 128, 128);
                Rng rng = Rng::derive(7, {uint64_t(n_blocks), uint64_t(skip)});
                for (float& v : in.data) v = float(rng.uniform());

                const Tensor out = model.forward(in);
                std::stringstream tag;
                tag << "blocks=" << n_blocks << " kind=" << to_string(kind)
                    << " long_skip=" << skip;
                c.require(out.n == 1 && out.c == 1 && out.h == 128 && out.w == 128,
                          tag.str() + ": output shape " + out.shape_str());
                bool in_range = true;
                for (float v : out.data) in_range = in_range && v >= 0.0f && v <= 1.0f;
                c.require(in_range, tag.str() + ": output value outside [0, 1]");
                ++combos;
            }
        }
    }
    const double dt = seconds_since(t0);
    c.require(dt < kTimeBudget, "runtime " + std::to_string(dt) + " s over budget");

    std::stringstream d;
    d << combos << " spec combinations, 128x128x3 -> 128x128x1 in [0,1], " << std::fixed
      << std::setprecision(1) << dt << " s";
    if (!c.ok) d << "; FAILED at " << c.first_failure;
    return {c.ok, d.str()};
}

// --------------------------------------------------------------------------
// 2. Adding a block always adds the same number of parameters.

Outcome criterion_param_growth() {
    std::vector<int64_t> totals;
    for (int k = 2; k <= 6; ++k) {
        CascadeSpec spec;
        spec.n_blocks = k;
        totals.push_back(build_cascade(spec, 1).count_parameters().total);
    }
    Check c;
    std::vector<int64_t> diffs;
    for (size_t i = 1; i < totals.size(); ++i) diffs.push_back(totals[i] - totals[i - 1]);
    for (size_t i = 1; i < diffs.size(); ++i)
        c.require(diffs[i] == diffs[0],
                  "step k=" + std::to_string(i + 3) + " is " + std::to_string(diffs[i]) +
                      ", expected " + std::to_string(diffs[0]));
    c.require(diffs[0] > 0, "non-positive growth step");

    std::stringstream d;
    d << "params(k) - params(k-1) = " << diffs[0] << " for all k in {3..6}";
    if (!c.ok) d << "; FAILED: " << c.first_failure;
    return {c.ok, d.str()};
}

// --------------------------------------------------------------------------
// 3. Loss value on the fixed example and the analytic gradient.

Outcome criterion_loss() {
    Check c;

    // a = all 0.5, b = [[1,0],[0,1]]: d = (2 * 1) / (1 + 2) = 2/3 as eps -> 0.
    ProbabilityMap a(2, 2, 0.5);
    BinaryMask b(2, 2);
    b.at(0, 0) = 1;
    b.at(1, 1) = 1;
    const double d_small_eps = soft_dice(a, b, 1e-9);
    c.require(std::abs(d_small_eps - 2.0 / 3.0) <= 1e-6,
              "soft dice " + std::to_string(d_small_eps) + " != 2/3");

    // The loss is smooth in the prediction, so plain central differences
    // converge; relative tolerance pinned at 1e-4, step 1e-6.
    constexpr double kRelTol = 1e-4;
    constexpr double kStep = 1e-6;
    int checked = 0;
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng = Rng::derive(100, {uint64_t(trial)});
        ProbabilityMap p(8, 8);
        BinaryMask t(8, 8);
        for (double& v : p.v) v = rng.uniform(0.05, 0.95);
        for (uint8_t& v : t.v) v = rng.bernoulli(0.4) ? 1 : 0;

        const ProbabilityMap grad = log_dice_loss_grad(p, t, 1.0);
        for (size_t i = 0; i < p.size(); ++i) {
            ProbabilityMap pp = p, pm = p;
            pp.v[i] += kStep;
            pm.v[i] -= kStep;
            const double fd = (log_dice_loss(pp, t, 1.0) - log_dice_loss(pm, t, 1.0)) /
                              (2.0 * kStep);
            const double tol = kRelTol * std::max({std::abs(fd), std::abs(grad.v[i]), 1e-8});
            c.require(std::abs(grad.v[i] - fd) <= tol,
                      "trial " + std::to_string(trial) + " element " + std::to_string(i) +
                          ": analytic " + std::to_string(grad.v[i]) + " vs fd " +
                          std::to_string(fd));
            ++checked;
        }
    }

    std::stringstream d;
    d << "fixed example = 2/3 within 1e-6; " << checked
      << " finite-difference gradient elements within rel 1e-4";
    if (!c.ok) d << "; FAILED: " << c.first_failure;
    return {c.ok, d.str()};
}

// --------------------------------------------------------------------------
// 4. Binary metrics against brute-force set counting.

Outcome criterion_metrics() {
    Check c;
    Rng rng(404);
    for (int trial = 0; trial < 1000; ++trial) {
        BinaryMask a(16, 16), b(16, 16);
        const double pa = rng.uniform(0.0, 0.6);
        const double pb = rng.uniform(0.0, 0.6);
        for (uint8_t& v : a.v) v = rng.bernoulli(pa) ? 1 : 0;
        for (uint8_t& v : b.v) v = rng.bernoulli(pb) ? 1 : 0;

        size_t inter = 0, uni = 0, na = 0, nb = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            inter += a.v[i] && b.v[i];
            uni += a.v[i] || b.v[i];
            na += a.v[i];
            nb += b.v[i];
        }
        const double dice_bf = (na + nb) == 0 ? 1.0 : 2.0 * double(inter) / double(na + nb);
        const double iou_bf = uni == 0 ? 1.0 : double(inter) / double(uni);

        const double dice = binary_dice(a, b);
        const double i = iou(a, b);
        c.require(dice == dice_bf, "trial " + std::to_string(trial) + ": dice mismatch");
        c.require(i == iou_bf, "trial " + std::to_string(trial) + ": iou mismatch");
        c.require(std::abs(dice - 2.0 * i / (1.0 + i)) <= 1e-12,
                  "trial " + std::to_string(trial) + ": dice != 2 iou / (1 + iou)");
    }

    std::string d = "1000 random 16x16 pairs: exact match with set counting, "
                    "dice = 2 iou / (1 + iou) within 1e-12";
    if (!c.ok) d += "; FAILED: " + c.first_failure;
    return {c.ok, d};
}

// --------------------------------------------------------------------------
// 5. A two-block stack memorizes one image.

Outcome criterion_memorization() {
    const auto t0 = Clock::now();
    constexpr double kTimeBudget = 600.0;
    constexpr double kTargetDice = 0.95;
    constexpr int kMaxSteps = 500;

    SynthSpec synth;
    synth.n_images = 1;
    synth.n_persons = 1;
    synth.size = 64;
    synth.seed = 11;
    const std::filesystem::path dir = scratch_dir() / "memorize";
    std::filesystem::remove_all(dir);
    const DatasetManifest data = generate_synthetic_dataset(synth, dir);

    CascadeSpec spec;
    spec.n_blocks = 2;
    spec.block.depth = 3;
    spec.block.base_channels = 8;
    Model model = build_cascade(spec, 7);

    TrainConfig cfg;
    cfg.learning_rate = 1e-3;  // raised from the 1e-5 default for the small step budget
    cfg.batch_size = 1;
    cfg.max_epochs = kMaxSteps;  // one image: one step per epoch
    cfg.resolution_h = cfg.resolution_w = 64;
    cfg.augment_enabled = false;
    cfg.seed = 7;
    cfg.stop_at_dice = kTargetDice;

    const std::vector<LoadedSample> samples = load_split_samples(data, Split::none, "disc", cfg);
    const RunReport rep = train_on_samples(model, samples, samples, cfg, "");
    const double dt = seconds_since(t0);

    Check c;
    c.require(rep.best_eval_dice >= kTargetDice,
              "train dice " + std::to_string(rep.best_eval_dice));
    c.require(int(rep.epochs.size()) <= kMaxSteps, "step budget exceeded");
    c.require(dt < kTimeBudget, "runtime " + std::to_string(dt) + " s over budget");

    std::stringstream d;
    d << "train dice " << std::fixed << std::setprecision(4) << rep.best_eval_dice << " after "
      << rep.epochs.size() << " steps (budget " << kMaxSteps << "), lr used "
      << std::defaultfloat << rep.learning_rate_used << " (default "
      << rep.learning_rate_default << "), " << std::fixed << std::setprecision(1) << dt
      << " s";
    if (!c.ok) d << "; FAILED: " << c.first_failure;
    return {c.ok, d.str()};
}

// --------------------------------------------------------------------------
// 6. A three-block stack learns the synthetic dataset.

Outcome criterion_toy_learning() {
    const auto t0 = Clock::now();
    constexpr double kTimeBudget = 1800.0;
    constexpr double kTargetDice = 0.90;

    SynthSpec synth;  // 60 images, 20 persons
    synth.seed = 1;
    const std::filesystem::path dir = scratch_dir() / "toy";
    std::filesystem::remove_all(dir);
    DatasetManifest data = generate_synthetic_dataset(synth, dir);
    grouped_split(data, 0.2, 1);

    CascadeSpec spec;
    spec.n_blocks = 3;
    spec.block.depth = 3;
    spec.block.base_channels = 8;
    Model model = build_cascade(spec, 5);

    TrainConfig cfg;
    cfg.learning_rate = 1e-3;  // raised from the 1e-5 default for the 30-epoch budget
    cfg.batch_size = 8;
    cfg.max_epochs = 30;
    cfg.resolution_h = cfg.resolution_w = 64;
    cfg.augment_enabled = false;
    cfg.seed = 5;
    cfg.early_stop_patience = 0;

    const RunReport rep = train(model, data, cfg, "");
    const double dt = seconds_since(t0);

    Check c;
    c.require(rep.best_eval_dice >= kTargetDice,
              "val disc dice " + std::to_string(rep.best_eval_dice));
    c.require(dt < kTimeBudget, "runtime " + std::to_string(dt) + " s over budget");

    std::stringstream d;
    d << "val disc dice " << std::fixed << std::setprecision(4) << rep.best_eval_dice
      << " after " << rep.epochs.size() << " epochs on " << rep.train_images << "/"
      << rep.eval_images << " train/val images, lr used " << std::defaultfloat
      << rep.learning_rate_used << " (default " << rep.learning_rate_default << "), "
      << std::fixed << std::setprecision(1) << dt << " s";
    if (!c.ok) d << "; FAILED: " << c.first_failure;
    return {c.ok, d.str()};
}

// --------------------------------------------------------------------------
// 7. Person-grouped splitting never leaks a person across the split.

Outcome criterion_split_leakage() {
    Check c;
    for (uint64_t seed = 0; seed < 200; ++seed) {
        DatasetManifest m;
        for (int i = 0; i < 60; ++i) {
            SampleRecord r;
            r.image_path = "img_" + std::to_string(i) + ".png";
            r.person_id = "person_" + std::to_string(i % 20);
            m.records.push_back(r);
        }
        m.split.assign(m.records.size(), Split::none);
        m.fold.assign(m.records.size(), -1);
        grouped_split(m, 0.2, seed);

        std::map<std::string, std::set<Split>> sides;
        for (size_t i = 0; i < m.size(); ++i) sides[m.records[i].person_id].insert(m.split[i]);
        for (const auto& [person, splits] : sides)
            c.require(splits.size() == 1,
                      "seed " + std::to_string(seed) + ": " + person + " is in both splits");
        c.require(!m.indices_in(Split::val).empty(), "seed " + std::to_string(seed) +
                                                         ": empty validation split");
    }

    std::string d = "200 seeds x 20 persons x 60 images: no person_id on both sides";
    if (!c.ok) d += "; FAILED: " + c.first_failure;
    return {c.ok, d};
}

// --------------------------------------------------------------------------
// 8. The cup-to-disc ratio rule at the decision threshold.

Outcome criterion_cdr() {
    Check c;
    BinaryMask disc(128, 80), cup(128, 80);
    for (int y = 10; y <= 109; ++y)  // vertical extent 100
        for (int x = 20; x <= 60; ++x) disc.at(y, x) = 1;
    for (int y = 25; y <= 89; ++y)  // vertical extent 65
        for (int x = 30; x <= 50; ++x) cup.at(y, x) = 1;

    const CdrResult r = cup_to_disc_ratio(disc, cup);
    c.require(r.disc_height == 100, "disc height " + std::to_string(r.disc_height));
    c.require(r.cup_height == 65, "cup height " + std::to_string(r.cup_height));
    c.require(r.cdr == 0.65, "cdr " + std::to_string(r.cdr));
    c.require(r.glaucoma_suspect, "0.65 not flagged as suspect");

    BinaryMask smaller_cup(128, 80);
    for (int y = 25; y <= 88; ++y)  // extent 64: just under the threshold
        for (int x = 30; x <= 50; ++x) smaller_cup.at(y, x) = 1;
    const CdrResult r2 = cup_to_disc_ratio(disc, smaller_cup);
    c.require(!r2.glaucoma_suspect, "0.64 wrongly flagged as suspect");

    std::string d = "heights 100/65 -> cdr 0.65, suspect; 100/64 -> not suspect";
    if (!c.ok) d += "; FAILED: " + c.first_failure;
    return {c.ok, d};
}

// --------------------------------------------------------------------------
// 9. Seeded runs repeat bitwise; checkpoints restore the exact function.

Outcome criterion_determinism() {
    const std::filesystem::path dir = scratch_dir() / "determinism";
    std::filesystem::remove_all(dir);
    SynthSpec synth;
    synth.n_images = 4;
    synth.n_persons = 2;
    synth.size = 48;
    synth.seed = 3;
    const DatasetManifest data = generate_synthetic_dataset(synth, dir / "data");

    CascadeSpec spec;
    spec.n_blocks = 1;
    spec.block.depth = 2;
    spec.block.base_channels = 4;

    auto one_epoch = [&](const std::filesystem::path& out) {
        Model model = build_cascade(spec, 9);
        TrainConfig cfg;
        cfg.learning_rate = 1e-4;
        cfg.batch_size = 2;
        cfg.max_epochs = 1;
        cfg.resolution_h = cfg.resolution_w = 32;
        cfg.augment_enabled = true;
        cfg.seed = 9;
        const std::vector<LoadedSample> samples =
            load_split_samples(data, Split::none, "disc", cfg);
        return train_on_samples(model, samples, samples, cfg, out);
    };

    const RunReport a = one_epoch(dir / "a");
    const RunReport b = one_epoch(dir / "b");

    Check c;
    c.require(a.epochs[0].train_loss == b.epochs[0].train_loss,
              "epoch-1 losses differ: " + std::to_string(a.epochs[0].train_loss) + " vs " +
                  std::to_string(b.epochs[0].train_loss));

    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::vector<char>(std::istreambuf_iterator<char>(in), {});
    };
    c.require(slurp(dir / "a" / "last.ckpt") == slurp(dir / "b" / "last.ckpt"),
              "checkpoint files differ bitwise");

    // Restore and compare the forward function bit for bit.
    Model original = build_cascade(spec, 9);
    save_checkpoint(original, dir / "roundtrip.ckpt");
    Model restored = load_checkpoint(dir / "roundtrip.ckpt");

    Tensor in(2, 3, 32, 32);
    Rng rng(77);
    for (float& v : in.data) v = float(rng.uniform());
    const Tensor out_a = original.forward(in);
    const Tensor out_b = restored.forward(in);
    c.require(out_a.data == out_b.data, "forward outputs differ after checkpoint round-trip");

    std::string d = "equal epoch-1 losses, bitwise-equal checkpoints, bitwise-equal "
                    "forward after save/load";
    if (!c.ok) d += "; FAILED: " + c.first_failure;
    return {c.ok, d};
}

// --------------------------------------------------------------------------
// 10. The long-skip switch changes later block inputs from 35 to 32 channels.

Outcome criterion_long_skip_channels() {
    Check c;

    // Specs arrive through the same JSON path the command line uses.
    CascadeSpec with_skip = cascade_spec_from_json(nlohmann::json{{"n_blocks", 3}});
    CascadeSpec without = with_skip;
    without.long_skip = false;  // what --no-long-skip does

    const Model m_with = build_cascade(with_skip, 1);
    const Model m_without = build_cascade(without, 1);

    for (int block : {2, 3}) {
        c.require(m_with.block_input_channels(block) == 35,
                  "with long skip: block " + std::to_string(block) + " sees " +
                      std::to_string(m_with.block_input_channels(block)) + " channels");
        c.require(m_without.block_input_channels(block) == 32,
                  "without long skip: block " + std::to_string(block) + " sees " +
                      std::to_string(m_without.block_input_channels(block)) + " channels");
    }
    c.require(m_with.block_input_channels(1) == 3, "block 1 must see the raw image");
    c.require(m_without.block_input_channels(1) == 3, "block 1 must see the raw image");

    // The first convolution of block 2 on the built graph must agree.
    auto first_conv_in = [](const Model& m) {
        for (const Param& p : m.graph.params())
            if (p.name.rfind("b2/", 0) == 0 && p.shape.size() == 4) return p.shape[1];
        return -1;
    };
    c.require(first_conv_in(m_with) == 35, "graph of the long-skip model disagrees");
    c.require(first_conv_in(m_without) == 32, "graph of the no-skip model disagrees");

    std::string d = "block 2+ input channels: 35 with the long skip, 32 without (3-channel "
                    "input, 32 feature maps)";
    if (!c.ok) d += "; FAILED: " + c.first_failure;
    return {c.ok, d};
}

}  // namespace

int main(int argc, char** argv) {
    struct Entry {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Entry> entries = {
        {1, "output contract", criterion_shapes},
        {2, "linear parameter growth", criterion_param_growth},
        {3, "loss value and gradient", criterion_loss},
        {4, "binary metrics vs brute force", criterion_metrics},
        {5, "single-image memorization", criterion_memorization},
        {6, "synthetic-data learning", criterion_toy_learning},
        {7, "person-grouped split leakage", criterion_split_leakage},
        {8, "cup-to-disc ratio rule", criterion_cdr},
        {9, "determinism and checkpoint round-trip", criterion_determinism},
        {10, "long-skip channel ablation", criterion_long_skip_channels},
    };

    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) {
            selected.insert(std::atoi(argv[++i]));
        } else {
            std::fprintf(stderr, "usage: %s [--criterion N]...\n", argv[0]);
            return 64;
        }
    }

    int failures = 0;
    for (const Entry& e : entries) {
        if (!selected.empty() && !selected.count(e.id)) continue;
        Outcome o;
        try {
            o = e.run();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        std::printf("criterion %2d [%s]: %s  (%s)\n", e.id, o.pass ? "PASS" : "FAIL", e.name,
                    o.detail.c_str());
        std::fflush(stdout);
        failures += !o.pass;
    }
    return failures;
}

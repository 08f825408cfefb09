#include "stackunet/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "stackunet/errors.hpp"
#include "stackunet/preprocess.hpp"
#include "stackunet/rng.hpp"

namespace stackunet {

const char* to_string(Split s) {
    switch (s) {
        case Split::none: return "none";
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "none";
}

Split split_from_string(const std::string& s) {
    if (s == "none") return Split::none;
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split name: " + s);
}

std::filesystem::path DatasetManifest::resolve(const std::string& path) const {
    std::filesystem::path p(path);
    if (p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
}

std::vector<size_t> DatasetManifest::indices_in(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); ++i)
        if (s == Split::none || (i < split.size() && split[i] == s)) out.push_back(i);
    return out;
}

std::vector<std::string> DatasetManifest::person_ids() const {
    std::vector<std::string> ids;
    for (const SampleRecord& r : records)
        if (std::find(ids.begin(), ids.end(), r.person_id) == ids.end())
            ids.push_back(r.person_id);
    return ids;
}

namespace {

constexpr const char* kHeader = "image_path,disc_masks,cup_masks,person_id,dataset_tag";

std::vector<std::string> split_on(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::string> split_list(const std::string& field) {
    if (field.empty()) return {};
    return split_on(field, ';');
}

std::string join_list(const std::vector<std::string>& items) {
    std::string out;
    for (size_t i = 0; i < items.size(); ++i) {
        if (i) out += ';';
        out += items[i];
    }
    return out;
}

std::string stem_of(const std::string& path) { return std::filesystem::path(path).stem().string(); }

void check_field(const std::string& f, const std::string& row_name) {
    if (f.find(',') != std::string::npos || f.find('\n') != std::string::npos)
        throw DataError("manifest: unsupported character in field of " + row_name);
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path, bool validate) {
    std::ifstream in(path);
    if (!in) throw DataError("load_manifest: cannot open " + path.string());

    DatasetManifest m;
    m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");

    std::string line;
    if (!std::getline(in, line)) throw DataError("load_manifest: empty file " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const bool with_split = line == std::string(kHeader) + ",split";
    if (line != kHeader && !with_split)
        throw DataError("load_manifest: unexpected header in " + path.string() + ": " + line);

    size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> f = split_on(line, ',');
        const size_t expected = with_split ? 6 : 5;
        if (f.size() != expected)
            throw DataError("load_manifest: row " + std::to_string(row) + " has " +
                            std::to_string(f.size()) + " fields, expected " +
                            std::to_string(expected));
        SampleRecord r;
        r.image_path = f[0];
        r.disc_mask_paths = split_list(f[1]);
        r.cup_mask_paths = split_list(f[2]);
        r.person_id = f[3].empty() ? stem_of(f[0]) : f[3];
        r.dataset_tag = f[4];
        if (r.image_path.empty())
            throw DataError("load_manifest: row " + std::to_string(row) + " has no image path");
        m.records.push_back(std::move(r));
        m.split.push_back(with_split ? split_from_string(f[5]) : Split::none);
        m.fold.push_back(-1);
    }
    if (with_split) m.split_origin = "manifest split column";

    if (validate) {
        std::vector<std::string> problems;
        for (size_t i = 0; i < m.records.size(); ++i) {
            const SampleRecord& r = m.records[i];
            const std::string row_name = "row " + std::to_string(i + 2) + " (" + r.image_path + ")";
            cv::Mat img;
            try {
                img = load_image(m.resolve(r.image_path));
            } catch (const DataError& e) {
                problems.push_back(row_name + ": " + e.what());
                continue;
            }
            auto check_masks = [&](const std::vector<std::string>& paths) {
                for (const std::string& mp : paths) {
                    try {
                        BinaryMask mask = load_mask(m.resolve(mp));
                        if (mask.h != img.rows || mask.w != img.cols)
                            problems.push_back(row_name + ": mask " + mp + " is " +
                                               std::to_string(mask.w) + "x" +
                                               std::to_string(mask.h) + ", image is " +
                                               std::to_string(img.cols) + "x" +
                                               std::to_string(img.rows));
                    } catch (const DataError& e) {
                        problems.push_back(row_name + ": " + e.what());
                    }
                }
            };
            check_masks(r.disc_mask_paths);
            check_masks(r.cup_mask_paths);
        }
        if (!problems.empty()) {
            std::string msg = "load_manifest: " + std::to_string(problems.size()) + " problem(s):";
            for (const std::string& p : problems) msg += "\n  " + p;
            throw DataError(msg);
        }
    }
    return m;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    const bool with_split =
        std::any_of(manifest.split.begin(), manifest.split.end(),
                    [](Split s) { return s != Split::none; });
    std::ofstream out(path);
    if (!out) throw DataError("write_manifest: cannot write " + path.string());
    out << kHeader << (with_split ? ",split" : "") << "\n";
    for (size_t i = 0; i < manifest.records.size(); ++i) {
        const SampleRecord& r = manifest.records[i];
        const std::string row_name = "record " + std::to_string(i) + " (" + r.image_path + ")";
        check_field(r.image_path, row_name);
        for (const std::string& p : r.disc_mask_paths) check_field(p, row_name);
        for (const std::string& p : r.cup_mask_paths) check_field(p, row_name);
        check_field(r.person_id, row_name);
        check_field(r.dataset_tag, row_name);
        out << r.image_path << ',' << join_list(r.disc_mask_paths) << ','
            << join_list(r.cup_mask_paths) << ',' << r.person_id << ',' << r.dataset_tag;
        if (with_split) out << ',' << to_string(i < manifest.split.size() ? manifest.split[i]
                                                                          : Split::none);
        out << "\n";
    }
}

void write_split_file(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("write_split_file: cannot write " + path.string());
    out << "image_path,split\n";
    for (size_t i = 0; i < manifest.records.size(); ++i)
        out << manifest.records[i].image_path << ','
            << to_string(i < manifest.split.size() ? manifest.split[i] : Split::none) << "\n";
}

void apply_split_file(DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("apply_split_file: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || (line != "image_path,split" && line != "image_path,split\r"))
        throw DataError("apply_split_file: unexpected header in " + path.string());
    std::map<std::string, Split> by_path;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> f = split_on(line, ',');
        if (f.size() != 2) throw DataError("apply_split_file: malformed row: " + line);
        by_path[f[0]] = split_from_string(f[1]);
    }
    manifest.split.assign(manifest.records.size(), Split::none);
    for (size_t i = 0; i < manifest.records.size(); ++i) {
        auto it = by_path.find(manifest.records[i].image_path);
        if (it == by_path.end())
            throw DataError("apply_split_file: no split for " + manifest.records[i].image_path);
        manifest.split[i] = it->second;
    }
    manifest.split_origin = "split file " + path.filename().string();
}

ProbabilityMap average_annotators(const std::vector<BinaryMask>& masks) {
    if (masks.empty()) throw DataError("average_annotators: no masks");
    const int h = masks[0].h, w = masks[0].w;
    for (const BinaryMask& m : masks)
        if (m.h != h || m.w != w)
            throw DataError("average_annotators: mask dimensions differ");
    ProbabilityMap out(h, w);
    for (const BinaryMask& m : masks)
        for (size_t i = 0; i < out.size(); ++i) out.v[i] += m.v[i];
    for (double& v : out.v) v /= double(masks.size());
    return out;
}

namespace {

std::map<std::string, std::vector<size_t>> records_by_person(const DatasetManifest& m) {
    std::map<std::string, std::vector<size_t>> by_person;
    for (size_t i = 0; i < m.records.size(); ++i)
        by_person[m.records[i].person_id].push_back(i);
    return by_person;
}

std::vector<std::string> shuffled_persons(const DatasetManifest& m, uint64_t seed) {
    std::vector<std::string> persons = m.person_ids();
    Rng rng = Rng::derive(seed, {rng_stream::kSplit});
    for (size_t i = persons.size(); i > 1; --i)
        std::swap(persons[i - 1], persons[rng.uniform_int(uint32_t(i))]);
    return persons;
}

}  // namespace

void grouped_split(DatasetManifest& manifest, double val_fraction, uint64_t seed) {
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
        throw ConfigError("grouped_split: val_fraction must lie in (0, 1)");
    const auto by_person = records_by_person(manifest);
    if (by_person.size() < 2)
        throw DataError("grouped_split: need at least 2 persons, got " +
                        std::to_string(by_person.size()));

    const std::vector<std::string> persons = shuffled_persons(manifest, seed);
    const double target = val_fraction * double(manifest.records.size());

    manifest.split.assign(manifest.records.size(), Split::train);
    size_t val_images = 0;
    for (size_t pi = 0; pi < persons.size() - 1 && double(val_images) < target; ++pi) {
        for (size_t idx : by_person.at(persons[pi])) {
            manifest.split[idx] = Split::val;
            ++val_images;
        }
    }
    manifest.split_origin = "person-grouped val_fraction=" + std::to_string(val_fraction) +
                            " seed=" + std::to_string(seed);
}

void kfold_split(DatasetManifest& manifest, int k, uint64_t seed) {
    if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
    const auto by_person = records_by_person(manifest);
    if (size_t(k) > by_person.size())
        throw ConfigError("kfold_split: k = " + std::to_string(k) + " exceeds " +
                          std::to_string(by_person.size()) + " persons");

    const std::vector<std::string> persons = shuffled_persons(manifest, seed);
    manifest.fold.assign(manifest.records.size(), -1);
    for (size_t pi = 0; pi < persons.size(); ++pi)
        for (size_t idx : by_person.at(persons[pi])) manifest.fold[idx] = int(pi % size_t(k));
    manifest.split_origin =
        "person-grouped k-fold k=" + std::to_string(k) + " seed=" + std::to_string(seed);
}

void select_fold(DatasetManifest& manifest, int val_fold) {
    int max_fold = -1;
    for (int f : manifest.fold) max_fold = std::max(max_fold, f);
    if (max_fold < 0) throw ConfigError("select_fold: no fold assignment present");
    if (val_fold < 0 || val_fold > max_fold)
        throw ConfigError("select_fold: fold " + std::to_string(val_fold) + " out of range");
    manifest.split.assign(manifest.records.size(), Split::train);
    for (size_t i = 0; i < manifest.records.size(); ++i)
        if (manifest.fold[i] == val_fold) manifest.split[i] = Split::val;
    manifest.split_origin += " val_fold=" + std::to_string(val_fold);
}

AgreementReport human_agreement(const DatasetManifest& manifest) {
    AgreementReport report;
    auto accumulate = [&](AgreementReport::Organ& organ, const std::vector<std::string>& paths) {
        if (paths.empty()) return;
        if (paths.size() < 2) {
            ++organ.records_skipped;
            return;
        }
        std::vector<BinaryMask> masks;
        for (const std::string& p : paths) masks.push_back(load_mask(manifest.resolve(p)));
        double iou_sum = 0.0, dice_sum = 0.0;
        int pairs = 0;
        for (size_t a = 0; a < masks.size(); ++a)
            for (size_t b = a + 1; b < masks.size(); ++b) {
                iou_sum += iou(masks[a], masks[b]);
                dice_sum += binary_dice(masks[a], masks[b]);
                ++pairs;
            }
        organ.mean_iou += iou_sum / pairs;
        organ.mean_dice += dice_sum / pairs;
        ++organ.records_used;
    };
    for (const SampleRecord& r : manifest.records) {
        accumulate(report.disc, r.disc_mask_paths);
        accumulate(report.cup, r.cup_mask_paths);
    }
    if (report.disc.records_used) {
        report.disc.mean_iou /= report.disc.records_used;
        report.disc.mean_dice /= report.disc.records_used;
    }
    if (report.cup.records_used) {
        report.cup.mean_iou /= report.cup.records_used;
        report.cup.mean_dice /= report.cup.records_used;
    }
    return report;
}

}  // namespace stackunet

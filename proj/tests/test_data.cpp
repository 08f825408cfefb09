#include <doctest.h>
#include <fstream>
#include <map>
#include <set>

#include "stackunet/dataset.hpp"
#include "stackunet/errors.hpp"
#include "stackunet/preprocess.hpp"

using namespace stackunet;

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name)
        : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

BinaryMask box_mask(int h, int w, int y0, int y1, int x0, int x1) {
    BinaryMask m(h, w);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) m.at(y, x) = 1;
    return m;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p);
    out << s;
}

// A tiny but fully valid on-disk dataset: n images, one person per
// `images_per_person` consecutive images, 2 disc annotators, 1 cup annotator.
DatasetManifest make_dataset(const TempDir& dir, int n, int images_per_person) {
    DatasetManifest m;
    m.base_dir = dir.path;
    for (int i = 0; i < n; ++i) {
        cv::Mat img(16, 16, CV_8UC3, cv::Scalar(40 + i, 60, 80));
        const std::string stem = "img_" + std::to_string(i);
        save_image(dir.path / (stem + ".png"), img);
        save_mask(dir.path / (stem + "_d0.png"), box_mask(16, 16, 4, 10, 4, 10));
        save_mask(dir.path / (stem + "_d1.png"), box_mask(16, 16, 5, 11, 4, 10));
        save_mask(dir.path / (stem + "_c0.png"), box_mask(16, 16, 6, 8, 6, 8));
        SampleRecord r;
        r.image_path = stem + ".png";
        r.disc_mask_paths = {stem + "_d0.png", stem + "_d1.png"};
        r.cup_mask_paths = {stem + "_c0.png"};
        r.person_id = "person_" + std::to_string(i / images_per_person);
        r.dataset_tag = "test";
        m.records.push_back(r);
    }
    m.split.assign(m.records.size(), Split::none);
    m.fold.assign(m.records.size(), -1);
    return m;
}

}  // namespace

TEST_CASE("manifests round-trip through csv") {
    TempDir dir("stackunet_manifest_rt");
    DatasetManifest m = make_dataset(dir, 4, 2);
    m.split = {Split::train, Split::train, Split::val, Split::test};
    write_manifest(m, dir.path / "manifest.csv");

    const DatasetManifest r = load_manifest(dir.path / "manifest.csv");
    REQUIRE(r.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(r.records[i].image_path == m.records[i].image_path);
        CHECK(r.records[i].disc_mask_paths == m.records[i].disc_mask_paths);
        CHECK(r.records[i].cup_mask_paths == m.records[i].cup_mask_paths);
        CHECK(r.records[i].person_id == m.records[i].person_id);
        CHECK(r.records[i].dataset_tag == m.records[i].dataset_tag);
        CHECK(r.split[i] == m.split[i]);
    }
    CHECK(r.base_dir == dir.path);
}

TEST_CASE("manifest parsing rejects malformed rows") {
    TempDir dir("stackunet_manifest_bad");
    write_text(dir.path / "bad_header.csv", "image,discs\nfoo.png,bar.png\n");
    CHECK_THROWS_AS(load_manifest(dir.path / "bad_header.csv", false), DataError);

    write_text(dir.path / "short_row.csv",
               "image_path,disc_masks,cup_masks,person_id,dataset_tag\n"
               "foo.png,bar.png\n");
    CHECK_THROWS_AS(load_manifest(dir.path / "short_row.csv", false), DataError);

    write_text(dir.path / "no_image.csv",
               "image_path,disc_masks,cup_masks,person_id,dataset_tag\n"
               ",d.png,c.png,p,t\n");
    CHECK_THROWS_AS(load_manifest(dir.path / "no_image.csv", false), DataError);

    CHECK_THROWS_AS(load_manifest(dir.path / "does_not_exist.csv", false), DataError);

    write_text(dir.path / "empty.csv", "");
    CHECK_THROWS_AS(load_manifest(dir.path / "empty.csv", false), DataError);
}

TEST_CASE("manifest validation reports every broken reference at once") {
    TempDir dir("stackunet_manifest_val");
    DatasetManifest m = make_dataset(dir, 3, 1);
    write_manifest(m, dir.path / "manifest.csv");
    CHECK_NOTHROW(load_manifest(dir.path / "manifest.csv"));

    std::filesystem::remove(dir.path / "img_0.png");
    std::filesystem::remove(dir.path / "img_2_c0.png");
    try {
        load_manifest(dir.path / "manifest.csv");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("img_0.png") != std::string::npos);
        CHECK(msg.find("img_2_c0.png") != std::string::npos);
    }
}

TEST_CASE("person id defaults to the image filename stem") {
    TempDir dir("stackunet_manifest_pid");
    write_text(dir.path / "m.csv",
               "image_path,disc_masks,cup_masks,person_id,dataset_tag\n"
               "scans/left_eye.png,d.png,,,\n");
    const DatasetManifest m = load_manifest(dir.path / "m.csv", false);
    CHECK(m.records[0].person_id == "left_eye");
    CHECK(m.records[0].cup_mask_paths.empty());
}

TEST_CASE("split files survive record reordering") {
    TempDir dir("stackunet_split_file");
    DatasetManifest m = make_dataset(dir, 4, 1);
    m.split = {Split::train, Split::val, Split::train, Split::test};
    write_split_file(m, dir.path / "split.csv");

    DatasetManifest shuffled = m;
    std::swap(shuffled.records[0], shuffled.records[3]);
    shuffled.split.assign(4, Split::none);
    apply_split_file(shuffled, dir.path / "split.csv");
    CHECK(shuffled.split[0] == Split::test);
    CHECK(shuffled.split[3] == Split::train);
    CHECK(shuffled.split[1] == Split::val);

    shuffled.records[1].image_path = "unknown.png";
    CHECK_THROWS_AS(apply_split_file(shuffled, dir.path / "split.csv"), DataError);
}

TEST_CASE("annotator averaging yields multiples of 1/n") {
    const BinaryMask a = box_mask(8, 8, 0, 3, 0, 7);
    const BinaryMask b = box_mask(8, 8, 2, 5, 0, 7);
    const BinaryMask c = box_mask(8, 8, 3, 6, 0, 7);

    const ProbabilityMap two = average_annotators({a, b});
    for (double v : two.v) CHECK((v == 0.0 || v == 0.5 || v == 1.0));
    CHECK(two.at(0, 0) == 0.5);
    CHECK(two.at(3, 0) == 1.0);

    const ProbabilityMap three = average_annotators({a, b, c});
    CHECK(three.at(3, 0) == doctest::Approx(1.0));
    CHECK(three.at(0, 0) == doctest::Approx(1.0 / 3.0));
    CHECK(three.at(2, 0) == doctest::Approx(2.0 / 3.0));

    CHECK_THROWS_AS(average_annotators({}), DataError);
    CHECK_THROWS_AS(average_annotators({a, box_mask(4, 4, 0, 1, 0, 1)}), DataError);
}

TEST_CASE("grouped split never separates a person's images") {
    TempDir dir("stackunet_grouped");
    for (uint64_t seed = 0; seed < 200; ++seed) {
        DatasetManifest m = make_dataset(dir, 0, 1);
        for (int i = 0; i < 60; ++i) {
            SampleRecord r;
            r.image_path = "img_" + std::to_string(i) + ".png";
            r.person_id = "person_" + std::to_string(i % 20);
            m.records.push_back(r);
        }
        m.split.assign(m.records.size(), Split::none);
        m.fold.assign(m.records.size(), -1);
        grouped_split(m, 0.2, seed);

        std::map<std::string, std::set<Split>> by_person;
        int val_images = 0;
        for (size_t i = 0; i < m.size(); ++i) {
            CHECK(m.split[i] != Split::none);
            by_person[m.records[i].person_id].insert(m.split[i]);
            val_images += m.split[i] == Split::val;
        }
        for (const auto& [person, splits] : by_person) CHECK(splits.size() == 1);
        CHECK(val_images > 0);
        CHECK(val_images < int(m.size()));
    }
}

TEST_CASE("grouped split is deterministic in the seed") {
    TempDir dir("stackunet_grouped_det");
    DatasetManifest a = make_dataset(dir, 12, 2);
    DatasetManifest b = make_dataset(dir, 12, 2);
    grouped_split(a, 0.25, 77);
    grouped_split(b, 0.25, 77);
    CHECK(a.split == b.split);

    DatasetManifest c = make_dataset(dir, 12, 2);
    grouped_split(c, 0.25, 78);
    bool some_differ = false;
    for (uint64_t s = 78; s < 90 && !some_differ; ++s) {
        DatasetManifest d = make_dataset(dir, 12, 2);
        grouped_split(d, 0.25, s);
        some_differ = d.split != a.split;
    }
    CHECK(some_differ);
}

TEST_CASE("grouped split: ten persons at fraction 0.2 put two in validation") {
    TempDir dir("stackunet_grouped_ten");
    for (uint64_t seed = 0; seed < 50; ++seed) {
        DatasetManifest m = make_dataset(dir, 0, 1);
        for (int i = 0; i < 10; ++i) {
            SampleRecord r;
            r.image_path = "img_" + std::to_string(i) + ".png";
            r.person_id = "person_" + std::to_string(i);
            m.records.push_back(r);
        }
        m.split.assign(10, Split::none);
        m.fold.assign(10, -1);
        grouped_split(m, 0.2, seed);
        CHECK(m.indices_in(Split::val).size() == 2);
        CHECK(m.indices_in(Split::train).size() == 8);
    }
}

TEST_CASE("grouped split rejects degenerate inputs") {
    TempDir dir("stackunet_grouped_bad");
    DatasetManifest one = make_dataset(dir, 3, 3);  // all images share one person
    CHECK_THROWS_AS(grouped_split(one, 0.2, 0), DataError);
    DatasetManifest ok = make_dataset(dir, 4, 2);
    CHECK_THROWS_AS(grouped_split(ok, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(grouped_split(ok, 1.0, 0), ConfigError);
}

TEST_CASE("k-fold assignment balances persons and covers every record") {
    TempDir dir("stackunet_kfold");
    DatasetManifest m = make_dataset(dir, 14, 2);  // 7 persons
    kfold_split(m, 3, 5);

    std::map<int, std::set<std::string>> persons_in_fold;
    for (size_t i = 0; i < m.size(); ++i) {
        CHECK(m.fold[i] >= 0);
        CHECK(m.fold[i] < 3);
        persons_in_fold[m.fold[i]].insert(m.records[i].person_id);
    }
    REQUIRE(persons_in_fold.size() == 3);
    size_t lo = 7, hi = 0, total = 0;
    for (const auto& [fold, persons] : persons_in_fold) {
        lo = std::min(lo, persons.size());
        hi = std::max(hi, persons.size());
        total += persons.size();
        for (const auto& [fold2, persons2] : persons_in_fold)
            if (fold != fold2)
                for (const std::string& p : persons) CHECK(persons2.count(p) == 0);
    }
    CHECK(total == 7);
    CHECK(hi - lo <= 1);

    select_fold(m, 1);
    for (size_t i = 0; i < m.size(); ++i)
        CHECK(m.split[i] == (m.fold[i] == 1 ? Split::val : Split::train));

    CHECK_THROWS_AS(kfold_split(m, 1, 0), ConfigError);
    CHECK_THROWS_AS(kfold_split(m, 8, 0), ConfigError);
    CHECK_THROWS_AS(select_fold(m, 3), ConfigError);
}

TEST_CASE("leave-one-person-out is the k = persons special case") {
    TempDir dir("stackunet_loo");
    DatasetManifest m = make_dataset(dir, 10, 2);  // 5 persons
    kfold_split(m, 5, 9);
    std::map<int, std::set<std::string>> persons_in_fold;
    for (size_t i = 0; i < m.size(); ++i)
        persons_in_fold[m.fold[i]].insert(m.records[i].person_id);
    REQUIRE(persons_in_fold.size() == 5);
    for (const auto& [fold, persons] : persons_in_fold) CHECK(persons.size() == 1);
}

TEST_CASE("identical annotators agree perfectly") {
    TempDir dir("stackunet_agree_same");
    DatasetManifest m = make_dataset(dir, 0, 1);
    const BinaryMask mask = box_mask(10, 10, 2, 7, 3, 8);
    save_mask(dir.path / "a.png", mask);
    SampleRecord r;
    r.image_path = "x.png";
    r.disc_mask_paths = {"a.png", "a.png"};
    r.cup_mask_paths = {"a.png", "a.png", "a.png"};
    m.records.push_back(r);
    m.split.assign(1, Split::none);
    m.fold.assign(1, -1);

    const AgreementReport rep = human_agreement(m);
    CHECK(rep.disc.mean_iou == doctest::Approx(1.0));
    CHECK(rep.disc.mean_dice == doctest::Approx(1.0));
    CHECK(rep.cup.mean_iou == doctest::Approx(1.0));
    CHECK(rep.disc.records_used == 1);
    CHECK(rep.cup.records_used == 1);
}

TEST_CASE("agreement matches a hand-computed overlap") {
    // A covers columns 0..1, B columns 1..2: intersection 4, union 12,
    // IOU 1/3 and Dice 1/2 on a 4 x 4 grid.
    TempDir dir("stackunet_agree_half");
    save_mask(dir.path / "a.png", box_mask(4, 4, 0, 3, 0, 1));
    save_mask(dir.path / "b.png", box_mask(4, 4, 0, 3, 1, 2));

    DatasetManifest m = make_dataset(dir, 0, 1);
    SampleRecord r;
    r.image_path = "x.png";
    r.disc_mask_paths = {"a.png", "b.png"};
    r.cup_mask_paths = {"a.png"};  // single annotator: skipped
    m.records.push_back(r);
    m.split.assign(1, Split::none);
    m.fold.assign(1, -1);

    const AgreementReport rep = human_agreement(m);
    CHECK(rep.disc.mean_iou == doctest::Approx(1.0 / 3.0));
    CHECK(rep.disc.mean_dice == doctest::Approx(0.5));
    CHECK(rep.cup.records_used == 0);
    CHECK(rep.cup.records_skipped == 1);
}

TEST_CASE("agreement averages all annotator pairs before averaging records") {
    // Three annotators a, a, b per record: pairs (a,a), (a,b), (a,b) give
    // mean IOU (1 + 1/3 + 1/3) / 3 = 5/9.
    TempDir dir("stackunet_agree_three");
    save_mask(dir.path / "a.png", box_mask(4, 4, 0, 3, 0, 1));
    save_mask(dir.path / "b.png", box_mask(4, 4, 0, 3, 1, 2));

    DatasetManifest m = make_dataset(dir, 0, 1);
    SampleRecord r;
    r.image_path = "x.png";
    r.disc_mask_paths = {"a.png", "a.png", "b.png"};
    m.records.push_back(r);
    m.split.assign(1, Split::none);
    m.fold.assign(1, -1);

    const AgreementReport rep = human_agreement(m);
    CHECK(rep.disc.mean_iou == doctest::Approx(5.0 / 9.0));
    CHECK(rep.disc.mean_dice == doctest::Approx((1.0 + 0.5 + 0.5) / 3.0));
}

TEST_CASE("split names round-trip and unknown names are rejected") {
    for (Split s : {Split::none, Split::train, Split::val, Split::test})
        CHECK(split_from_string(to_string(s)) == s);
    CHECK_THROWS_AS(split_from_string("validation"), ConfigError);
}

TEST_CASE("indices_in with no filter returns every record") {
    TempDir dir("stackunet_indices");
    DatasetManifest m = make_dataset(dir, 5, 1);
    m.split = {Split::train, Split::val, Split::train, Split::test, Split::none};
    CHECK(m.indices_in(Split::none).size() == 5);
    CHECK(m.indices_in(Split::train) == std::vector<size_t>{0, 2});
    CHECK(m.indices_in(Split::val) == std::vector<size_t>{1});
}

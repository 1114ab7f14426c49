#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "cobalt/synthgen.hpp"

using namespace cobalt;

namespace {

DatasetSpec tiny_spec() {
    DatasetSpec spec;
    spec.n_classes = 5;
    spec.n_colors = 5;
    spec.rho = 0.995;
    spec.n_train = 500;
    spec.n_val = 100;
    spec.n_test = 250;
    spec.image_size = 16;
    spec.patch_size = 4;
    spec.seed = 7;
    return spec;
}

// Brute-force region-intersection oracle: teacher patch i maps to the student
// patch whose source rectangle shares the most area with i's, provided the
// shared area exceeds half of i's source area.
std::vector<int> overlap_by_pixel_intersection(const CropRect& crop_t, const CropRect& crop_s,
                                               int out_size, int patch) {
    const int grid = out_size / patch;
    auto rect = [&](const CropRect& crop, int pr, int pc) {
        const double scale = static_cast<double>(crop.side) / out_size;
        const double y0 = crop.y0 + pr * patch * scale;
        const double x0 = crop.x0 + pc * patch * scale;
        return std::array<double, 4>{y0, x0, y0 + patch * scale, x0 + patch * scale};
    };
    std::vector<int> map(static_cast<std::size_t>(grid) * grid, -1);
    for (int tr = 0; tr < grid; ++tr)
        for (int tc = 0; tc < grid; ++tc) {
            const auto a = rect(crop_t, tr, tc);
            const double area_t = (a[2] - a[0]) * (a[3] - a[1]);
            double best_area = 0.0;
            int best = -1;
            for (int sr = 0; sr < grid; ++sr)
                for (int sc = 0; sc < grid; ++sc) {
                    const auto b = rect(crop_s, sr, sc);
                    const double dy = std::min(a[2], b[2]) - std::max(a[0], b[0]);
                    const double dx = std::min(a[3], b[3]) - std::max(a[1], b[1]);
                    if (dy <= 0 || dx <= 0) continue;
                    const double area = dy * dx;
                    if (area > best_area) {
                        best_area = area;
                        best = sr * grid + sc;
                    }
                }
            if (best >= 0 && best_area > 0.5 * area_t) map[static_cast<std::size_t>(tr) * grid + tc] = best;
        }
    return map;
}

} // namespace

TEST_CASE("generate_dataset: degenerate correlation, class balance, determinism") {
    auto spec = tiny_spec();
    spec.rho = 1.0;
    auto ds = generate_dataset(spec);
    REQUIRE(ds.train.size() == 500);
    std::map<int, int> per_class;
    for (const auto& s : ds.train) {
        CHECK(s.color_attribute == s.class_label); // rho = 1: always the majority color
        per_class[s.class_label]++;
    }
    for (auto [cls, n] : per_class) CHECK(n == 100);

    // groups collapse to exactly n_classes at rho = 1
    std::map<int, int> groups;
    for (const auto& s : ds.train) groups[ground_truth_group(s, spec.n_colors)]++;
    CHECK(groups.size() == 5);

    auto ds2 = generate_dataset(spec);
    std::ostringstream b1, b2;
    write_dataset_stream(b1, ds);
    write_dataset_stream(b2, ds2);
    CHECK(b1.str() == b2.str()); // byte-identical given equal seed
}

TEST_CASE("generate_dataset: majority fraction within 3 binomial sigma") {
    DatasetSpec spec = tiny_spec();
    spec.image_size = 8;
    spec.patch_size = 4;
    spec.noise_std = 0.0;
    spec.n_train = 100000; // 20000 per class
    spec.n_val = 5;
    spec.n_test = 5;
    auto ds = generate_dataset(spec);
    std::map<int, std::pair<int, int>> counts; // class -> (majority, total)
    for (const auto& s : ds.train) {
        auto& [maj, tot] = counts[s.class_label];
        if (s.color_attribute == s.class_label) maj++;
        tot++;
    }
    const double sigma = std::sqrt(0.995 * 0.005 / 20000.0);
    for (auto& [cls, mt] : counts) {
        CHECK(mt.second == 20000);
        const double frac = static_cast<double>(mt.first) / mt.second;
        CHECK(std::abs(frac - 0.995) <= 3.0 * sigma);
    }
}

TEST_CASE("generate_dataset: minority presence and pixel range") {
    auto spec = tiny_spec();
    spec.rho = 0.9;
    spec.n_train = 500; // 100 per class = 10 / (1 - rho)
    auto ds = generate_dataset(spec);
    std::map<int, int> minority;
    for (const auto& s : ds.train) {
        if (s.color_attribute != s.class_label) minority[s.class_label]++;
        for (double px : s.image.data) {
            CHECK(px >= 0.0);
            CHECK(px <= 1.0);
        }
        CHECK(s.color_attribute < spec.n_colors);
        CHECK(s.class_label < spec.n_classes);
    }
    for (int cls = 0; cls < spec.n_classes; ++cls) CHECK(minority[cls] >= 1);
}

TEST_CASE("generate_dataset: test split populates every group") {
    auto spec = tiny_spec();
    auto ds = generate_dataset(spec);
    std::map<int, int> groups;
    for (const auto& s : ds.test) groups[ground_truth_group(s, spec.n_colors)]++;
    CHECK(groups.size() == static_cast<std::size_t>(spec.n_classes * spec.n_colors));
    for (auto [g, n] : groups) CHECK(n == 10); // 250 / 25
}

TEST_CASE("generate_dataset: rejects invalid specs") {
    auto bad = tiny_spec();
    bad.n_colors = 3; // fewer colors than classes
    CHECK_THROWS_AS(generate_dataset(bad), ConfigError);
    bad = tiny_spec();
    bad.patch_size = 5;
    CHECK_THROWS_AS(generate_dataset(bad), ConfigError);
    bad = tiny_spec();
    bad.rho = 1.5;
    CHECK_THROWS_AS(generate_dataset(bad), ConfigError);
    bad = tiny_spec();
    bad.n_train = 501; // not divisible by n_classes
    CHECK_THROWS_AS(generate_dataset(bad), ConfigError);
}

TEST_CASE("ground truth group formula") {
    SyntheticSample s;
    s.class_label = 2;
    s.color_attribute = 3;
    CHECK(ground_truth_group(s, 5) == 13);
}

TEST_CASE("make_views: identity augmentation gives identity overlap") {
    auto spec = tiny_spec();
    spec.n_train = 5;
    spec.n_val = 5;
    spec.n_test = 5;
    auto ds = generate_dataset(spec);
    AugConfig aug;
    aug.enabled = false;
    auto vp = make_views(ds.train[0], spec.patch_size, aug, 123);
    const int P = (spec.image_size / spec.patch_size) * (spec.image_size / spec.patch_size);
    REQUIRE(static_cast<int>(vp.overlap.size()) == P);
    for (int i = 0; i < P; ++i) CHECK(vp.overlap[static_cast<std::size_t>(i)] == i);
    CHECK(vp.view_s.data == ds.train[0].image.data);
    CHECK(vp.view_t.data == ds.train[0].image.data);
}

TEST_CASE("make_views: disjoint crops give an empty overlap map") {
    auto spec = tiny_spec();
    spec.image_size = 32;
    spec.patch_size = 8;
    spec.n_train = 5;
    spec.n_val = 5;
    spec.n_test = 5;
    auto ds = generate_dataset(spec);
    CropRect a{0, 0, 8};
    CropRect b{24, 24, 8};
    auto vp = make_views_with_crops(ds.train[0], spec.patch_size, a, b);
    for (int m : vp.overlap) CHECK(m == -1);
}

TEST_CASE("make_views: one-stride shift matches the pixel-intersection oracle") {
    auto spec = tiny_spec();
    spec.image_size = 32;
    spec.patch_size = 8;
    spec.n_train = 5;
    spec.n_val = 5;
    spec.n_test = 5;
    auto ds = generate_dataset(spec);
    // same scale, student shifted right by exactly one patch stride
    CropRect crop_t{0, 0, 24};
    CropRect crop_s{6, 0, 24}; // stride in source coords: 8 * 24/32 = 6
    auto vp = make_views_with_crops(ds.train[0], spec.patch_size, crop_s, crop_t);
    auto oracle = overlap_by_pixel_intersection(crop_t, crop_s, spec.image_size, spec.patch_size);
    CHECK(vp.overlap == oracle);
    // shifted by one patch: teacher column c maps to student column c-1
    const int grid = spec.image_size / spec.patch_size;
    for (int pr = 0; pr < grid; ++pr)
        for (int pc = 0; pc < grid; ++pc) {
            const int expect = pc >= 1 ? pr * grid + (pc - 1) : -1;
            CHECK(vp.overlap[static_cast<std::size_t>(pr) * grid + pc] == expect);
        }
}

TEST_CASE("overlap map: injective and symmetric under role swap") {
    auto spec = tiny_spec();
    spec.image_size = 32;
    spec.patch_size = 8;
    spec.n_train = 5;
    spec.n_val = 5;
    spec.n_test = 5;
    auto ds = generate_dataset(spec);
    AugConfig aug;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto vp = make_views(ds.train[0], spec.patch_size, aug, seed);
        // injectivity
        std::map<int, int> hits;
        for (int m : vp.overlap)
            if (m >= 0) CHECK(++hits[m] == 1);
        // role swap: recompute with branches exchanged, then invert
        auto swapped = compute_overlap_map(vp.crop_s, vp.crop_t, spec.image_size, spec.patch_size);
        CHECK(invert_overlap_map(swapped, vp.overlap.size()) == vp.overlap);
    }
}

TEST_CASE("dataset round-trips through disk") {
    auto spec = tiny_spec();
    spec.n_train = 10;
    spec.n_val = 5;
    spec.n_test = 5;
    auto ds = generate_dataset(spec);
    auto dir = std::filesystem::temp_directory_path() / "cobalt_test_ds";
    std::filesystem::remove_all(dir);
    save_dataset(dir, ds);
    auto loaded = load_dataset(dir);
    REQUIRE(loaded.train.size() == ds.train.size());
    REQUIRE(loaded.val.size() == ds.val.size());
    REQUIRE(loaded.test.size() == ds.test.size());
    CHECK(loaded.spec.rho == ds.spec.rho);
    CHECK(loaded.spec.patch_size == ds.spec.patch_size);
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(loaded.train[i].sample_id == ds.train[i].sample_id);
        CHECK(loaded.train[i].class_label == ds.train[i].class_label);
        CHECK(loaded.train[i].color_attribute == ds.train[i].color_attribute);
        CHECK(loaded.train[i].image.data == ds.train[i].image.data);
    }
    std::filesystem::remove_all(dir);
}

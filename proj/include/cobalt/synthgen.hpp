#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cobalt/common.hpp"
#include "cobalt/rng.hpp"

namespace cobalt {

// RGB image, row-major, values in [0,1].
struct Image {
    int h = 0, w = 0;
    std::vector<double> data; // (r*w + c)*3 + ch

    double& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * w + c) * 3 + ch]; }
    double at(int r, int c, int ch) const { return data[(static_cast<std::size_t>(r) * w + c) * 3 + ch]; }
};

inline Image make_image(int h, int w, double fill = 0.0) {
    Image img;
    img.h = h;
    img.w = w;
    img.data.assign(static_cast<std::size_t>(h) * w * 3, fill);
    return img;
}

struct SyntheticSample {
    std::uint32_t sample_id = 0;
    Image image;
    int class_label = 0;     // y
    int color_attribute = 0; // a, the spurious attribute
    std::uint64_t shape_seed = 0;
};

struct DatasetSpec {
    int n_classes = 5;
    int n_colors = 5;
    double rho = 0.995;                // train correlation
    std::optional<double> rho_val;     // defaults to rho
    int n_train = 10000;
    int n_val = 1000;
    int n_test = 2500;
    int image_size = 32; // H = W
    int patch_size = 8;
    double noise_std = 0.02;
    std::uint64_t seed = 1;

    double val_correlation() const { return rho_val.value_or(rho); }
};

struct Dataset {
    DatasetSpec spec;
    std::vector<SyntheticSample> train, val, test;
};

// Ten glyph colors; n_colors may not exceed this. The first six sit on
// saturated RGB-cube corners, whose directions stay maximally spread after
// the [-1,1] pixel remapping (pairwise cosine at most 1/3).
inline const std::array<std::array<double, 3>, 10>& color_palette() {
    static const std::array<std::array<double, 3>, 10> p = {{
        {0.90, 0.10, 0.10}, // red
        {0.10, 0.90, 0.10}, // green
        {0.10, 0.10, 0.90}, // blue
        {0.10, 0.90, 0.90}, // cyan
        {0.90, 0.10, 0.90}, // magenta
        {0.90, 0.90, 0.10}, // yellow
        {0.90, 0.50, 0.10}, // orange
        {0.45, 0.10, 0.90}, // purple
        {0.10, 0.50, 0.50}, // teal
        {0.60, 0.50, 0.15}, // olive
    }};
    return p;
}

constexpr int kMaxGlyphClasses = 10;

// Per-class glyph predicates in a [-1,1]² frame centered on the glyph. The
// first five classes are arrangements of one horizontal and one vertical bar:
// locally identical strokes whose layout alone identifies the class, so
// patch-level statistics carry color rather than class.
namespace glyphs {

inline bool hbar(double u, double v, double pos) {
    return std::abs(u) <= 0.85 && std::abs(v - pos) <= 0.26;
}
inline bool vbar(double u, double v, double pos) {
    return std::abs(v) <= 0.85 && std::abs(u - pos) <= 0.26;
}

} // namespace glyphs

inline bool glyph_contains(int cls, double u, double v) {
    using glyphs::hbar;
    using glyphs::vbar;
    const double r2 = u * u + v * v;
    switch (cls % kMaxGlyphClasses) {
        case 0: return hbar(u, v, -0.55) || vbar(u, v, -0.55); // top + left
        case 1: return hbar(u, v, -0.55) || vbar(u, v, 0.55);  // top + right
        case 2: return hbar(u, v, 0.55) || vbar(u, v, -0.55);  // bottom + left
        case 3: return hbar(u, v, 0.55) || vbar(u, v, 0.55);   // bottom + right
        case 4: return hbar(u, v, 0.0) || vbar(u, v, 0.0);     // centered cross
        case 5: return std::max(std::abs(u), std::abs(v)) <= 0.75;                        // square
        case 6: return r2 <= 0.75 * 0.75;                                                 // disc
        case 7: return (std::abs(u - v) <= 0.30 || std::abs(u + v) <= 0.30) &&
                       std::max(std::abs(u), std::abs(v)) <= 0.85;                        // X
        case 8: return r2 >= 0.45 * 0.45 && r2 <= 0.80 * 0.80;                            // ring
        default: return std::abs(u) + std::abs(v) <= 0.85;                                // diamond
    }
}

inline void validate(const DatasetSpec& spec) {
    if (spec.n_classes < 1) throw ConfigError("dataset: n_classes must be >= 1");
    if (spec.n_colors < spec.n_classes)
        throw ConfigError(strcat("dataset: n_colors (", spec.n_colors, ") < n_classes (",
                                 spec.n_classes, "); each class needs a unique majority color"));
    if (spec.n_colors > static_cast<int>(color_palette().size()))
        throw ConfigError(strcat("dataset: n_colors ", spec.n_colors, " exceeds palette size ",
                                 color_palette().size()));
    if (spec.n_classes > kMaxGlyphClasses)
        throw ConfigError(strcat("dataset: n_classes ", spec.n_classes, " exceeds glyph count ",
                                 kMaxGlyphClasses));
    if (spec.rho < 0.0 || spec.rho > 1.0) throw ConfigError("dataset: rho must lie in [0,1]");
    const double rv = spec.val_correlation();
    if (rv < 0.0 || rv > 1.0) throw ConfigError("dataset: rho_val must lie in [0,1]");
    if (spec.image_size < 2) throw ConfigError("dataset: image_size too small");
    if (spec.patch_size < 1 || spec.image_size % spec.patch_size != 0)
        throw ConfigError(strcat("dataset: patch_size ", spec.patch_size, " must divide image_size ",
                                 spec.image_size));
    for (auto [n, name] : {std::pair{spec.n_train, "n_train"}, {spec.n_val, "n_val"}, {spec.n_test, "n_test"}}) {
        if (n <= 0) throw ConfigError(strcat("dataset: ", name, " must be positive"));
        if (n % spec.n_classes != 0)
            throw ConfigError(strcat("dataset: ", name, " (", n, ") must be divisible by n_classes (",
                                     spec.n_classes, ") for exact class balance"));
    }
    if (spec.noise_std < 0.0) throw ConfigError("dataset: noise_std must be >= 0");
}

// Renders one sample: a colored class glyph with seeded position/size jitter
// on a neutral gray background plus pixel noise.
inline Image render_sample(const DatasetSpec& spec, int cls, int color, std::uint64_t shape_seed) {
    const int H = spec.image_size;
    Rng rng(shape_seed);
    // near-centered glyphs; small jitter keeps concept discovery lively while
    // holding each (shape, color) cell close to a template
    const double radius = H * rng.uniform(0.36, 0.40);
    const double jitter = 0.03 * H;
    const double cy = H / 2.0 + rng.uniform(-jitter, jitter);
    const double cx = H / 2.0 + rng.uniform(-jitter, jitter);
    const double bright = rng.uniform(0.92, 1.05);

    const auto& base = color_palette()[static_cast<std::size_t>(color)];
    std::array<double, 3> tint{};
    for (int ch = 0; ch < 3; ++ch) tint[static_cast<std::size_t>(ch)] = std::clamp(base[static_cast<std::size_t>(ch)] * bright, 0.0, 1.0);

    Image img = make_image(H, H, 0.55);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < H; ++c) {
            const double u = (c + 0.5 - cx) / radius;
            const double v = (r + 0.5 - cy) / radius;
            if (glyph_contains(cls, u, v))
                for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = tint[static_cast<std::size_t>(ch)];
        }
    if (spec.noise_std > 0.0) {
        for (auto& px : img.data) px = std::clamp(px + rng.normal(0.0, spec.noise_std), 0.0, 1.0);
    }
    return img;
}

namespace detail {

enum class Split { train, val, test };

inline const char* split_tag(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

inline std::vector<SyntheticSample> generate_split(const DatasetSpec& spec, Split split, int count,
                                                   std::uint32_t id_base) {
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<std::size_t>(count));
    // minority colors rotate through the non-majority palette per class, so
    // minority hues appear with equal frequency and every (class, color)
    // combination is populated once a class has n_colors - 1 minority samples
    std::vector<int> minority_cursor(static_cast<std::size_t>(spec.n_classes), 0);
    for (int i = 0; i < count; ++i) {
        SyntheticSample s;
        s.sample_id = id_base + static_cast<std::uint32_t>(i);
        s.class_label = i % spec.n_classes;
        const int within_class = i / spec.n_classes;
        Rng rng(derive_seed(spec.seed, split_tag(split), static_cast<std::uint64_t>(i)));
        if (split == Split::test) {
            // balanced color rotation so every (class, color) group is populated
            s.color_attribute = within_class % spec.n_colors;
        } else {
            const double rho = split == Split::train ? spec.rho : spec.val_correlation();
            if (rng.bernoulli(rho)) {
                s.color_attribute = s.class_label; // class y's majority color is color y
            } else {
                auto& cursor = minority_cursor[static_cast<std::size_t>(s.class_label)];
                int pick = cursor % (spec.n_colors - 1);
                cursor++;
                s.color_attribute = pick >= s.class_label ? pick + 1 : pick;
            }
        }
        s.shape_seed = derive_seed(spec.seed, "render", s.sample_id);
        s.image = render_sample(spec, s.class_label, s.color_attribute, s.shape_seed);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace detail

inline Dataset generate_dataset(const DatasetSpec& spec) {
    validate(spec);
    Dataset ds;
    ds.spec = spec;
    ds.train = detail::generate_split(spec, detail::Split::train, spec.n_train, 0);
    ds.val = detail::generate_split(spec, detail::Split::val, spec.n_val,
                                    static_cast<std::uint32_t>(spec.n_train));
    ds.test = detail::generate_split(spec, detail::Split::test, spec.n_test,
                                     static_cast<std::uint32_t>(spec.n_train + spec.n_val));
    return ds;
}

// Ground-truth group id: class_label * n_colors + color_attribute.
inline int ground_truth_group(const SyntheticSample& s, int n_colors) {
    return s.class_label * n_colors + s.color_attribute;
}

inline std::vector<int> ground_truth_groups(const std::vector<SyntheticSample>& samples, int n_colors) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(ground_truth_group(s, n_colors));
    return out;
}

// ---------------------------------------------------------------------------
// Augmented view pairs and the patch-overlap map
// ---------------------------------------------------------------------------

struct AugConfig {
    bool enabled = true;
    double min_scale = 0.5; // crop area scale range
    double max_scale = 1.0;
    double brightness = 0.2;
};

struct CropRect {
    int x0 = 0, y0 = 0, side = 0;
};

// Two augmented views of one sample plus the teacher->student patch map.
// overlap[i] == j means teacher patch i and student patch j cover the same
// source-image region; -1 marks patches without a counterpart.
struct ViewPair {
    Image view_s, view_t;
    std::vector<int> overlap;
    CropRect crop_s, crop_t;
};

inline Image crop_resize(const Image& src, const CropRect& crop, double brightness_factor) {
    Image out = make_image(src.h, src.w);
    for (int r = 0; r < out.h; ++r)
        for (int c = 0; c < out.w; ++c) {
            const int sr = crop.y0 + static_cast<int>((r + 0.5) * crop.side / out.h);
            const int sc = crop.x0 + static_cast<int>((c + 0.5) * crop.side / out.w);
            for (int ch = 0; ch < 3; ++ch)
                out.at(r, c, ch) = std::clamp(src.at(sr, sc, ch) * brightness_factor, 0.0, 1.0);
        }
    return out;
}

// Patch centers of a view mapped back into source-image coordinates.
inline std::vector<std::pair<double, double>> patch_source_centers(const CropRect& crop, int out_size,
                                                                   int patch) {
    const int grid = out_size / patch;
    std::vector<std::pair<double, double>> centers;
    centers.reserve(static_cast<std::size_t>(grid) * grid);
    const double scale = static_cast<double>(crop.side) / out_size;
    for (int pr = 0; pr < grid; ++pr)
        for (int pc = 0; pc < grid; ++pc) {
            const double oy = (pr + 0.5) * patch;
            const double ox = (pc + 0.5) * patch;
            centers.emplace_back(crop.y0 + oy * scale, crop.x0 + ox * scale);
        }
    return centers;
}

// Teacher patch i maps to student patch j iff their source-image centers lie
// within half a patch stride on both axes and the two patches are mutual
// nearest neighbours (which makes the map injective and role-symmetric).
inline std::vector<int> compute_overlap_map(const CropRect& crop_t, const CropRect& crop_s,
                                            int out_size, int patch) {
    const auto ct = patch_source_centers(crop_t, out_size, patch);
    const auto cs = patch_source_centers(crop_s, out_size, patch);
    const double stride_t = static_cast<double>(patch) * crop_t.side / out_size;
    const double stride_s = static_cast<double>(patch) * crop_s.side / out_size;
    const double half_stride = 0.25 * (stride_t + stride_s); // half the mean stride

    auto nearest = [](const std::pair<double, double>& p,
                      const std::vector<std::pair<double, double>>& cand) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < cand.size(); ++k) {
            const double dy = p.first - cand[k].first;
            const double dx = p.second - cand[k].second;
            const double d = dy * dy + dx * dx;
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(k);
            }
        }
        return best;
    };

    std::vector<int> map(ct.size(), -1);
    for (std::size_t i = 0; i < ct.size(); ++i) {
        const int j = nearest(ct[i], cs);
        if (nearest(cs[static_cast<std::size_t>(j)], ct) != static_cast<int>(i)) continue;
        const double dy = std::abs(ct[i].first - cs[static_cast<std::size_t>(j)].first);
        const double dx = std::abs(ct[i].second - cs[static_cast<std::size_t>(j)].second);
        if (dy <= half_stride && dx <= half_stride) map[i] = j;
    }
    return map;
}

inline std::vector<int> invert_overlap_map(const std::vector<int>& map, std::size_t n_student) {
    std::vector<int> inv(n_student, -1);
    for (std::size_t i = 0; i < map.size(); ++i)
        if (map[i] >= 0) inv[static_cast<std::size_t>(map[i])] = static_cast<int>(i);
    return inv;
}

// Deterministic view construction from explicit crops (the random path below
// delegates here; tests drive specific geometries through it).
inline ViewPair make_views_with_crops(const SyntheticSample& sample, int patch, const CropRect& crop_s,
                                      const CropRect& crop_t, double bright_s = 1.0,
                                      double bright_t = 1.0) {
    const int H = sample.image.h;
    require(crop_s.side >= patch && crop_t.side >= patch, "make_views: crop smaller than one patch");
    require(crop_s.x0 >= 0 && crop_s.y0 >= 0 && crop_s.x0 + crop_s.side <= H &&
                crop_s.y0 + crop_s.side <= H,
            "make_views: student crop out of bounds");
    require(crop_t.x0 >= 0 && crop_t.y0 >= 0 && crop_t.x0 + crop_t.side <= H &&
                crop_t.y0 + crop_t.side <= H,
            "make_views: teacher crop out of bounds");
    ViewPair vp;
    vp.crop_s = crop_s;
    vp.crop_t = crop_t;
    vp.view_s = crop_resize(sample.image, crop_s, bright_s);
    vp.view_t = crop_resize(sample.image, crop_t, bright_t);
    vp.overlap = compute_overlap_map(crop_t, crop_s, H, patch);
    return vp;
}

inline ViewPair make_views(const SyntheticSample& sample, int patch, const AugConfig& aug,
                           std::uint64_t seed) {
    const int H = sample.image.h;
    if (!aug.enabled) {
        CropRect full{0, 0, H};
        ViewPair vp = make_views_with_crops(sample, patch, full, full);
        return vp; // identity geometry: overlap map is the identity
    }
    Rng rng(seed);
    auto draw_crop = [&]() {
        const double area = rng.uniform(aug.min_scale, aug.max_scale);
        int side = std::max(patch, static_cast<int>(std::lround(H * std::sqrt(area))));
        side = std::min(side, H);
        CropRect c;
        c.side = side;
        c.x0 = side < H ? static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(H - side + 1))) : 0;
        c.y0 = side < H ? static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(H - side + 1))) : 0;
        return c;
    };
    const CropRect crop_s = draw_crop();
    const CropRect crop_t = draw_crop();
    const double bs = 1.0 + rng.uniform(-aug.brightness, aug.brightness);
    const double bt = 1.0 + rng.uniform(-aug.brightness, aug.brightness);
    return make_views_with_crops(sample, patch, crop_s, crop_t, bs, bt);
}

// ---------------------------------------------------------------------------
// Persistence: binary container + JSON sidecar + split manifests
// ---------------------------------------------------------------------------

namespace io {

inline void write_u16(std::ostream& os, std::uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }
inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint16_t read_u16(std::istream& is) {
    std::uint16_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 2);
    return v;
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

} // namespace io

constexpr std::uint16_t kDatasetFormatVersion = 1;

inline void write_dataset_stream(std::ostream& os, const Dataset& ds) {
    const auto& spec = ds.spec;
    const std::uint32_t n_total =
        static_cast<std::uint32_t>(ds.train.size() + ds.val.size() + ds.test.size());
    os.write("CBLT", 4);
    io::write_u16(os, kDatasetFormatVersion);
    io::write_u32(os, n_total);
    io::write_u32(os, static_cast<std::uint32_t>(spec.image_size));
    io::write_u32(os, static_cast<std::uint32_t>(spec.image_size));
    io::write_u32(os, 3);
    io::write_u32(os, static_cast<std::uint32_t>(spec.n_classes));
    io::write_u32(os, static_cast<std::uint32_t>(spec.n_colors));
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
        for (const auto& s : *split) {
            io::write_u32(os, s.sample_id);
            io::write_u16(os, static_cast<std::uint16_t>(s.class_label));
            io::write_u16(os, static_cast<std::uint16_t>(s.color_attribute));
            for (double px : s.image.data) io::write_f64(os, px);
        }
}

inline nlohmann::json spec_to_json(const DatasetSpec& spec) {
    nlohmann::json j;
    j["n_classes"] = spec.n_classes;
    j["n_colors"] = spec.n_colors;
    j["rho"] = spec.rho;
    if (spec.rho_val) j["rho_val"] = *spec.rho_val;
    j["n_train"] = spec.n_train;
    j["n_val"] = spec.n_val;
    j["n_test"] = spec.n_test;
    j["image_size"] = spec.image_size;
    j["patch_size"] = spec.patch_size;
    j["noise_std"] = spec.noise_std;
    j["seed"] = spec.seed;
    return j;
}

inline DatasetSpec spec_from_json(const nlohmann::json& j) {
    DatasetSpec spec;
    spec.n_classes = j.value("n_classes", spec.n_classes);
    spec.n_colors = j.value("n_colors", spec.n_colors);
    spec.rho = j.value("rho", spec.rho);
    if (j.contains("rho_val") && !j["rho_val"].is_null()) spec.rho_val = j["rho_val"].get<double>();
    spec.n_train = j.value("n_train", spec.n_train);
    spec.n_val = j.value("n_val", spec.n_val);
    spec.n_test = j.value("n_test", spec.n_test);
    spec.image_size = j.value("image_size", spec.image_size);
    spec.patch_size = j.value("patch_size", spec.patch_size);
    spec.noise_std = j.value("noise_std", spec.noise_std);
    spec.seed = j.value("seed", spec.seed);
    return spec;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "data.cblt", std::ios::binary);
        if (!os) throw ArtifactError(strcat("cannot write ", (dir / "data.cblt").string()));
        write_dataset_stream(os, ds);
    }
    {
        std::ofstream os(dir / "meta.json");
        os << spec_to_json(ds.spec).dump(2) << "\n";
    }
    for (auto [split, name] : {std::pair{&ds.train, "train.txt"}, {&ds.val, "val.txt"}, {&ds.test, "test.txt"}}) {
        std::ofstream os(dir / name);
        for (const auto& s : *split) os << s.sample_id << "\n";
    }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto meta_path = dir / "meta.json";
    std::ifstream meta(meta_path);
    if (!meta) throw ArtifactError(strcat("missing dataset metadata ", meta_path.string()));
    nlohmann::json j;
    try {
        meta >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(strcat("corrupt dataset metadata ", meta_path.string(), ": ", e.what()));
    }
    Dataset ds;
    ds.spec = spec_from_json(j);

    const auto bin_path = dir / "data.cblt";
    std::ifstream is(bin_path, std::ios::binary);
    if (!is) throw ArtifactError(strcat("missing dataset file ", bin_path.string()));
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "CBLT")
        throw ArtifactError(strcat("bad magic in ", bin_path.string()));
    const auto version = io::read_u16(is);
    if (version != kDatasetFormatVersion)
        throw ArtifactError(strcat("unsupported dataset version ", version));
    const auto n_samples = io::read_u32(is);
    const int H = static_cast<int>(io::read_u32(is));
    const int W = static_cast<int>(io::read_u32(is));
    const auto channels = io::read_u32(is);
    if (channels != 3) throw ArtifactError("dataset: expected 3 channels");
    ds.spec.n_classes = static_cast<int>(io::read_u32(is));
    ds.spec.n_colors = static_cast<int>(io::read_u32(is));

    std::vector<SyntheticSample> all;
    all.reserve(n_samples);
    for (std::uint32_t i = 0; i < n_samples; ++i) {
        SyntheticSample s;
        s.sample_id = io::read_u32(is);
        s.class_label = io::read_u16(is);
        s.color_attribute = io::read_u16(is);
        s.image = make_image(H, W);
        for (auto& px : s.image.data) px = io::read_f64(is);
        if (!is) throw ArtifactError(strcat("truncated dataset file ", bin_path.string()));
        all.push_back(std::move(s));
    }

    auto read_manifest = [&](const char* name) {
        std::ifstream ms(dir / name);
        if (!ms) throw ArtifactError(strcat("missing split manifest ", (dir / name).string()));
        std::vector<std::uint32_t> ids;
        std::string line;
        while (std::getline(ms, line))
            if (!line.empty()) ids.push_back(static_cast<std::uint32_t>(std::stoul(line)));
        return ids;
    };
    std::vector<SyntheticSample*> by_id(n_samples, nullptr);
    for (auto& s : all) {
        if (s.sample_id >= n_samples) throw ArtifactError("dataset: sample_id out of range");
        by_id[s.sample_id] = &s;
    }
    auto pick = [&](const std::vector<std::uint32_t>& ids) {
        std::vector<SyntheticSample> out;
        out.reserve(ids.size());
        for (auto id : ids) {
            if (id >= n_samples || by_id[id] == nullptr)
                throw ArtifactError(strcat("manifest references unknown sample ", id));
            out.push_back(*by_id[id]);
        }
        return out;
    };
    ds.train = pick(read_manifest("train.txt"));
    ds.val = pick(read_manifest("val.txt"));
    ds.test = pick(read_manifest("test.txt"));
    return ds;
}

} // namespace cobalt

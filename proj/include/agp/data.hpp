#pragma once

#include <agp/error.hpp>
#include <agp/image_io.hpp>
#include <agp/random.hpp>
#include <agp/tensor.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace agp {

namespace fs = std::filesystem;

enum class Split { train, test };
enum class Label { normal, anomalous };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }
inline const char* to_string(Label l) { return l == Label::normal ? "normal" : "anomalous"; }

/// A fully materialized sample.
struct ImageSample {
    std::string id;
    Image pixels;
    std::string category;
    Split split = Split::train;
    Label label = Label::normal;
    std::optional<BinaryMask> gt_mask;
};

/// Element of the dihedral group D4 (0..3: rotations by k·90°, 4..7: the same
/// after a horizontal flip) followed by a small rotation in degrees.
struct Augmentation {
    int dihedral = 0;
    double rotation_deg = 0.0;

    bool is_identity() const { return dihedral == 0 && rotation_deg == 0.0; }
};

/// Manifest entry. Pixels come either from disk (lazily, on load) or from an
/// in-memory buffer (toy data).
struct SampleRef {
    std::string id;
    std::string category;
    Split split = Split::train;
    Label label = Label::normal;
    fs::path image_path;
    fs::path mask_path;
    std::shared_ptr<const Image> pixels;
    std::shared_ptr<const BinaryMask> mask;
    Augmentation augmentation;

    bool has_mask() const { return mask != nullptr || !mask_path.empty(); }
};

Image apply_augmentation(const Image& img, const Augmentation& aug);

inline ImageSample resize_and_normalize(const ImageSample& sample, int target) {
    require(target > 0, ErrorKind::config, "resize target must be positive, got " + std::to_string(target));
    ImageSample out = sample;
    out.pixels = resize_bilinear(sample.pixels, target, target);
    for (double& v : out.pixels.data) v = std::clamp(v, 0.0, 1.0);
    if (sample.gt_mask) out.gt_mask = resize_nearest(*sample.gt_mask, target, target);
    return out;
}

struct DatasetManifest {
    std::vector<SampleRef> samples;
    std::vector<std::string> categories;
    std::uint64_t seed = 0;

    std::vector<std::size_t> indices(Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == split) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> indices(Split split, const std::string& category) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == split && samples[i].category == category) out.push_back(i);
        return out;
    }

    /// Training visit order for one epoch: a pure function of (manifest, seed, epoch).
    std::vector<std::size_t> epoch_order(std::uint64_t epoch) const {
        auto idx = indices(Split::train);
        Rng rng(derive_seed(seed, {0x5348u, epoch}));
        for (std::size_t i = idx.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(std::uniform_int_distribution<std::uint64_t>(0, i - 1)(rng));
            std::swap(idx[i - 1], idx[j]);
        }
        return idx;
    }

    /// Restricts to the given categories (manifest order preserved).
    DatasetManifest subset(const std::vector<std::string>& keep) const {
        DatasetManifest out;
        out.seed = seed;
        for (const auto& c : categories)
            if (std::find(keep.begin(), keep.end(), c) != keep.end()) out.categories.push_back(c);
        for (const auto& s : samples)
            if (std::find(keep.begin(), keep.end(), s.category) != keep.end()) out.samples.push_back(s);
        return out;
    }

    /// Materializes sample `i`, resized to target×target when target > 0. Pure
    /// read; safe to call concurrently.
    ImageSample load(std::size_t i, int target = 0) const {
        const SampleRef& ref = samples.at(i);
        ImageSample s;
        s.id = ref.id;
        s.category = ref.category;
        s.split = ref.split;
        s.label = ref.label;
        s.pixels = ref.pixels ? *ref.pixels : read_image_rgb(ref.image_path);
        if (ref.mask) {
            s.gt_mask = *ref.mask;
        } else if (!ref.mask_path.empty()) {
            s.gt_mask = read_mask(ref.mask_path);
        }
        if (s.gt_mask) {
            require(s.gt_mask->height == s.pixels.height && s.gt_mask->width == s.pixels.width,
                    ErrorKind::mask_pairing, "mask size differs from image for " + ref.id);
            require(s.gt_mask->positives() > 0, ErrorKind::mask_pairing, "mask has no positive pixel for " + ref.id);
        }
        if (target > 0) s = resize_and_normalize(s, target);
        if (!ref.augmentation.is_identity()) s.pixels = apply_augmentation(s.pixels, ref.augmentation);
        return s;
    }

    std::size_t count(Split split, std::optional<Label> label = std::nullopt, const std::string& category = {}) const {
        return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [&](const SampleRef& s) {
            return s.split == split && (!label || s.label == *label) && (category.empty() || s.category == category);
        }));
    }
};

// ---------------------------------------------------------------------------
// MVTec-AD layout

namespace detail {

inline std::vector<fs::path> sorted_images(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && has_extension(e.path(), {".png", ".jpg", ".jpeg"})) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline void require_dir(const fs::path& p) {
    require(fs::is_directory(p), ErrorKind::layout, "missing directory " + p.string());
}

} // namespace detail

/// Every subdirectory of `root` that has a train/good folder, sorted.
inline std::vector<std::string> discover_categories(const fs::path& root) {
    detail::require_dir(root);
    std::vector<std::string> out;
    for (const auto& d : detail::sorted_subdirs(root))
        if (fs::is_directory(d / "train" / "good")) out.push_back(d.filename().string());
    return out;
}

inline DatasetManifest load_mvtec_layout(const fs::path& root, const std::vector<std::string>& categories,
                                         std::uint64_t seed = 0) {
    DatasetManifest m;
    m.seed = seed;
    if (categories.empty()) return m;
    detail::require_dir(root);
    for (const auto& cat : categories) {
        const fs::path base = root / cat;
        detail::require_dir(base);
        detail::require_dir(base / "train" / "good");
        detail::require_dir(base / "test");
        m.categories.push_back(cat);
        for (const auto& p : detail::sorted_images(base / "train" / "good")) {
            SampleRef r;
            r.id = cat + "/train/good/" + p.stem().string();
            r.category = cat;
            r.split = Split::train;
            r.image_path = p;
            m.samples.push_back(std::move(r));
        }
        for (const auto& defect_dir : detail::sorted_subdirs(base / "test")) {
            const std::string defect = defect_dir.filename().string();
            const bool good = defect == "good";
            const fs::path gt_dir = base / "ground_truth" / defect;
            if (!good) detail::require_dir(gt_dir);
            for (const auto& p : detail::sorted_images(defect_dir)) {
                SampleRef r;
                r.id = cat + "/test/" + defect + "/" + p.stem().string();
                r.category = cat;
                r.split = Split::test;
                r.image_path = p;
                if (!good) {
                    r.label = Label::anomalous;
                    const fs::path mask = gt_dir / (p.stem().string() + "_mask.png");
                    require(fs::is_regular_file(mask), ErrorKind::mask_pairing,
                            "no mask for anomalous image " + p.string() + " (expected " + mask.string() + ")");
                    r.mask_path = mask;
                }
                m.samples.push_back(std::move(r));
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Toy dataset

struct ToyDatasetSpec {
    int n_categories = 2;
    int n_train_per_cat = 50;
    int n_test_normal = 10;
    int n_test_anomalous = 10;
    int image_size = 64;
    std::uint64_t seed = 7;
    /// Minimum |mean intensity inside mask − mean outside| per anomalous image.
    double separability_margin = 0.1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ToyDatasetSpec, n_categories, n_train_per_cat, n_test_normal,
                                                n_test_anomalous, image_size, seed, separability_margin)

enum class ToyDefect { patch, scratch, deformation };

namespace toy {

inline constexpr std::array<const char*, 3> kFamilies = {"stripes", "checker", "blobs"};

struct Rgb {
    double r, g, b;
};

inline Rgb mix(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

/// Category-level look, fixed for every image of the category.
struct Style {
    int family = 0;
    Rgb dark{}, light{};
    double period = 10.0;
    double angle = 0.0;
};

inline Style category_style(std::uint64_t seed, int category) {
    Rng rng(derive_seed(seed, {0x7374u, static_cast<std::uint64_t>(category)}));
    Style s;
    s.family = category % 3;
    const double hue = uniform(rng, 0.0, 1.0);
    auto tone = [&](double base, double shift) {
        return 0.5 + 0.5 * std::cos(6.283185307179586 * (hue + shift)) * base;
    };
    s.dark = {0.25 * tone(0.6, 0.0), 0.25 * tone(0.6, 0.33), 0.25 * tone(0.6, 0.67)};
    s.light = {0.45 + 0.3 * tone(0.8, 0.1), 0.45 + 0.3 * tone(0.8, 0.43), 0.45 + 0.3 * tone(0.8, 0.77)};
    s.period = uniform(rng, 7.0, 11.0);
    s.angle = uniform(rng, 0.0, 3.141592653589793);
    return s;
}

/// Per-image texture: a procedural intensity field t(x, y) ∈ [0,1] mapped
/// through the category palette.
struct Texture {
    Style style;
    double phase = 0.0;
    double angle = 0.0;
    double period = 10.0;
    double brightness = 0.0;
    std::vector<std::array<double, 3>> blobs; // x, y, radius

    double field(double x, double y) const {
        switch (style.family) {
        case 0: {
            const double u = x * std::cos(angle) + y * std::sin(angle);
            return 0.5 + 0.5 * std::sin(6.283185307179586 * u / period + phase);
        }
        case 1: {
            const double ca = std::cos(angle), sa = std::sin(angle);
            const double u = x * ca + y * sa + phase * period;
            const double v = -x * sa + y * ca + phase * period * 0.5;
            const auto cu = static_cast<long>(std::floor(u / period));
            const auto cv = static_cast<long>(std::floor(v / period));
            return ((cu + cv) % 2 == 0) ? 0.15 : 0.85;
        }
        default: {
            double t = 0.0;
            for (const auto& b : blobs) {
                const double d2 = (x - b[0]) * (x - b[0]) + (y - b[1]) * (y - b[1]);
                t = std::max(t, std::exp(-d2 / (2.0 * b[2] * b[2])));
            }
            return t;
        }
        }
    }

    Rgb color(double x, double y) const {
        const Rgb c = mix(style.dark, style.light, field(x, y));
        return {c.r + brightness, c.g + brightness, c.b + brightness};
    }
};

inline Texture sample_texture(const Style& style, int size, Rng& rng) {
    Texture t;
    t.style = style;
    t.phase = uniform(rng, 0.0, 6.283185307179586);
    t.angle = style.angle + uniform(rng, -0.12, 0.12);
    t.period = style.period * uniform(rng, 0.92, 1.08);
    t.brightness = uniform(rng, -0.03, 0.03);
    if (style.family == 2) {
        const int n = uniform_int(rng, 10, 14) * size * size / 4096 + 1;
        for (int i = 0; i < n; ++i)
            t.blobs.push_back({uniform(rng, 0.0, size), uniform(rng, 0.0, size), style.period * uniform(rng, 0.35, 0.55)});
    }
    return t;
}

inline Image render(const Texture& tex, int size, Rng& rng) {
    Image img(size, size, 3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const Rgb c = tex.color(x + 0.5, y + 0.5);
            img.at(y, x, 0) = c.r + normal(rng, 0.0, 0.015);
            img.at(y, x, 1) = c.g + normal(rng, 0.0, 0.015);
            img.at(y, x, 2) = c.b + normal(rng, 0.0, 0.015);
        }
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return img;
}

inline double mean_intensity(const Image& img, const BinaryMask& m, bool inside) {
    double sum = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if ((m.at(y, x) != 0) == inside) {
                sum += (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
                ++n;
            }
    return n ? sum / n : 0.0;
}

inline double distance_to_segment(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double cx = ax + t * dx - px, cy = ay + t * dy - py;
    return std::sqrt(cx * cx + cy * cy);
}

/// Paints one defect of the given family in place and returns its exact mask.
inline BinaryMask inject_defect(Image& img, const Texture& tex, ToyDefect kind, Rng& rng) {
    const int s = img.width;
    BinaryMask mask(s, s);
    const double scale = s / 64.0;
    switch (kind) {
    case ToyDefect::patch: {
        const int w = std::max(2, static_cast<int>(uniform(rng, 8, 20) * scale));
        const int h = std::max(2, static_cast<int>(uniform(rng, 8, 20) * scale));
        const int x0 = uniform_int(rng, 0, s - w), y0 = uniform_int(rng, 0, s - h);
        const Rgb c{uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)};
        for (int y = y0; y < y0 + h; ++y)
            for (int x = x0; x < x0 + w; ++x) {
                mask.at(y, x) = 1;
                img.at(y, x, 0) = c.r + normal(rng, 0.0, 0.02);
                img.at(y, x, 1) = c.g + normal(rng, 0.0, 0.02);
                img.at(y, x, 2) = c.b + normal(rng, 0.0, 0.02);
            }
        break;
    }
    case ToyDefect::scratch: {
        const double len = uniform(rng, 18, 40) * scale;
        const double theta = uniform(rng, 0.0, 3.141592653589793);
        const double cx = uniform(rng, 0.25 * s, 0.75 * s), cy = uniform(rng, 0.25 * s, 0.75 * s);
        const double ax = cx - 0.5 * len * std::cos(theta), ay = cy - 0.5 * len * std::sin(theta);
        const double bx = cx + 0.5 * len * std::cos(theta), by = cy + 0.5 * len * std::sin(theta);
        const double half = uniform(rng, 1.0, 2.0) * scale;
        const double value = uniform01(rng) < 0.5 ? uniform(rng, 0.0, 0.1) : uniform(rng, 0.9, 1.0);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (distance_to_segment(x + 0.5, y + 0.5, ax, ay, bx, by) <= half) {
                    mask.at(y, x) = 1;
                    for (int c = 0; c < 3; ++c) img.at(y, x, c) = value + normal(rng, 0.0, 0.02);
                }
        break;
    }
    case ToyDefect::deformation: {
        const double radius = uniform(rng, 5, 11) * scale;
        const double cx = uniform(rng, radius, s - radius), cy = uniform(rng, radius, s - radius);
        const double twist = uniform(rng, 2.0, 3.5) * (uniform01(rng) < 0.5 ? -1 : 1);
        const double squash = uniform(rng, 1.6, 2.4);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double r = std::sqrt(dx * dx + dy * dy);
                if (r > radius) continue;
                mask.at(y, x) = 1;
                const double a = twist * (1.0 - r / radius);
                const double wx = cx + (dx * std::cos(a) - dy * std::sin(a)) * squash;
                const double wy = cy + (dx * std::sin(a) + dy * std::cos(a)) / squash;
                const Rgb c = tex.color(wx, wy);
                img.at(y, x, 0) = c.r + normal(rng, 0.0, 0.015);
                img.at(y, x, 1) = c.g + normal(rng, 0.0, 0.015);
                img.at(y, x, 2) = c.b + normal(rng, 0.0, 0.015);
            }
        break;
    }
    }
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return mask;
}

/// Shifts the defect region's intensity until it differs from the rest of the
/// image by at least `margin`.
inline void enforce_separability(Image& img, const BinaryMask& mask, double margin) {
    for (int iter = 0; iter < 16; ++iter) {
        const double in = mean_intensity(img, mask, true);
        const double out = mean_intensity(img, mask, false);
        const double gap = std::abs(in - out);
        if (gap >= margin) return;
        double dir = in >= out ? 1.0 : -1.0;
        if ((dir > 0 && in > 0.9) || (dir < 0 && in < 0.1)) dir = -dir;
        const double step = (margin - gap) + 0.02;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                if (mask.at(y, x))
                    for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(img.at(y, x, c) + dir * step, 0.0, 1.0);
    }
}

} // namespace toy

inline std::string toy_category_name(int category) {
    std::string name = std::string("toy_") + toy::kFamilies[category % 3];
    if (category >= 3) name += "_" + std::to_string(category);
    return name;
}

/// Deterministic procedural dataset. Anomalous test images carry one defect
/// (contrasting patch, scratch, or local deformation; equally likely) whose
/// area is between 1% and 15% of the image.
inline DatasetManifest generate_toy_dataset(const ToyDatasetSpec& spec, int patch_size = 8) {
    require(spec.n_categories >= 0 && spec.n_train_per_cat >= 0 && spec.n_test_normal >= 0 &&
                spec.n_test_anomalous >= 0,
            ErrorKind::config, "toy dataset counts must be nonnegative");
    require(spec.image_size > 0 && patch_size > 0 && spec.image_size % patch_size == 0, ErrorKind::config,
            "toy image_size " + std::to_string(spec.image_size) + " not divisible by patch size " +
                std::to_string(patch_size));
    DatasetManifest m;
    m.seed = spec.seed;
    const int s = spec.image_size;
    const auto area = static_cast<double>(s) * s;
    for (int c = 0; c < spec.n_categories; ++c) {
        const std::string cat = toy_category_name(c);
        m.categories.push_back(cat);
        const toy::Style style = toy::category_style(spec.seed, c);
        auto make = [&](Split split, Label label, int idx) {
            Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(split),
                                            static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(idx)}));
            const toy::Texture tex = toy::sample_texture(style, s, rng);
            SampleRef r;
            r.category = cat;
            r.split = split;
            r.label = label;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%03d", idx);
            if (split == Split::train) {
                r.id = cat + "/train/good/" + buf;
            } else {
                r.id = cat + "/test/" + (label == Label::normal ? "good" : "defect") + "/" + buf;
            }
            Image img = toy::render(tex, s, rng);
            if (label == Label::anomalous) {
                const auto kind = static_cast<ToyDefect>(uniform_int(rng, 0, 2));
                for (;;) {
                    Image candidate = img;
                    BinaryMask mask = toy::inject_defect(candidate, tex, kind, rng);
                    const double frac = mask.positives() / area;
                    if (frac < 0.01 || frac > 0.15) continue;
                    toy::enforce_separability(candidate, mask, spec.separability_margin);
                    img = std::move(candidate);
                    r.mask = std::make_shared<const BinaryMask>(std::move(mask));
                    break;
                }
            }
            r.pixels = std::make_shared<const Image>(std::move(img));
            m.samples.push_back(std::move(r));
        };
        for (int i = 0; i < spec.n_train_per_cat; ++i) make(Split::train, Label::normal, i);
        for (int i = 0; i < spec.n_test_normal; ++i) make(Split::test, Label::normal, i);
        for (int i = 0; i < spec.n_test_anomalous; ++i) make(Split::test, Label::anomalous, i);
    }
    return m;
}

/// Writes an in-memory manifest to disk in the MVTec-AD layout and returns the
/// equivalent on-disk manifest.
inline DatasetManifest materialize(const DatasetManifest& m, const fs::path& root) {
    DatasetManifest out;
    out.seed = m.seed;
    out.categories = m.categories;
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const SampleRef& ref = m.samples[i];
        const ImageSample s = m.load(i);
        // id is "<category>/<split>/<defect>/<name>"
        const fs::path rel(ref.id);
        const fs::path img_path = root / (rel.string() + ".png");
        fs::create_directories(img_path.parent_path());
        write_image_png(img_path, s.pixels);
        SampleRef r = ref;
        r.pixels.reset();
        r.mask.reset();
        r.image_path = img_path;
        if (s.gt_mask) {
            const fs::path defect = rel.parent_path().filename();
            const fs::path mask_path =
                root / ref.category / "ground_truth" / defect / (rel.filename().string() + "_mask.png");
            fs::create_directories(mask_path.parent_path());
            write_mask_png(mask_path, *s.gt_mask);
            r.mask_path = mask_path;
        }
        out.samples.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation and few-shot expansion

namespace detail {

inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

inline double sample_reflect(const Image& img, double y, double x, int c) {
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    auto at = [&](int yy, int xx) { return img.at(reflect_index(yy, img.height), reflect_index(xx, img.width), c); };
    return (at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx) * (1 - fy) + (at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx) * fy;
}

} // namespace detail

inline Image dihedral(const Image& img, int d) {
    require(d >= 0 && d < 8, ErrorKind::config, "dihedral index out of range");
    const int rot = d % 4;
    const bool flip = d >= 4;
    const int oh = rot % 2 ? img.width : img.height;
    const int ow = rot % 2 ? img.height : img.width;
    Image out(oh, ow, img.channels);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            // forward map: horizontal flip, then `rot` counter-clockwise quarter turns
            int sy = y, sx = x;
            switch (rot) {
            case 1: sy = x; sx = img.width - 1 - y; break;
            case 2: sy = img.height - 1 - y; sx = img.width - 1 - x; break;
            case 3: sy = img.height - 1 - x; sx = y; break;
            default: break;
            }
            if (flip) sx = img.width - 1 - sx;
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    return out;
}

/// Rotation about the image center, bilinear sampling with reflect padding.
inline Image rotate_reflect(const Image& img, double degrees) {
    if (degrees == 0.0) return img;
    const double a = degrees * 3.141592653589793 / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double cy = 0.5 * (img.height - 1), cx = 0.5 * (img.width - 1);
    Image out(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double sy = cy + dx * sa + dy * ca;
            const double sx = cx + dx * ca - dy * sa;
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = detail::sample_reflect(img, sy, sx, c);
        }
    return out;
}

inline Image apply_augmentation(const Image& img, const Augmentation& aug) {
    return rotate_reflect(dihedral(img, aug.dihedral), aug.rotation_deg);
}

/// Keeps the first k training samples of every category (after a seeded
/// shuffle); test split untouched.
inline DatasetManifest select_few_shot(const DatasetManifest& m, int k, std::uint64_t seed) {
    require(k > 0, ErrorKind::config, "few-shot k must be positive");
    DatasetManifest out;
    out.seed = m.seed;
    out.categories = m.categories;
    for (const auto& cat : m.categories) {
        auto idx = m.indices(Split::train, cat);
        require(static_cast<int>(idx.size()) >= k, ErrorKind::config,
                "category " + cat + " has fewer than " + std::to_string(k) + " training images");
        Rng rng(derive_seed(seed, {0xf5u}));
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        for (auto i : idx) out.samples.push_back(m.samples[i]);
    }
    for (const auto& s : m.samples)
        if (s.split == Split::test) out.samples.push_back(s);
    return out;
}

inline constexpr std::array<double, 4> kFewShotAngles = {0.0, 5.0, 10.0, 15.0};

/// Expands every training image into 32 variants: the 8 dihedral transforms
/// times 4 small rotations (0°, ±5°, ±10°, ±15°, sign seeded). The identity
/// variant is the first one for each source image.
inline DatasetManifest few_shot_expand(const DatasetManifest& m, int k) {
    require(k > 0, ErrorKind::config, "few-shot k must be positive, got " + std::to_string(k));
    for (const auto& cat : m.categories)
        require(m.count(Split::train, std::nullopt, cat) == static_cast<std::size_t>(k), ErrorKind::config,
                "category " + cat + " must have exactly " + std::to_string(k) + " training images");
    DatasetManifest out;
    out.seed = m.seed;
    out.categories = m.categories;
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const SampleRef& ref = m.samples[i];
        if (ref.split != Split::train) continue;
        require(ref.augmentation.is_identity(), ErrorKind::config, "sample " + ref.id + " is already augmented");
        for (int d = 0; d < 8; ++d) {
            Rng rng(derive_seed(m.seed, {0xa09u, i, static_cast<std::uint64_t>(d)}));
            for (double angle : kFewShotAngles) {
                const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
                SampleRef r = ref;
                r.augmentation = {d, angle * sign};
                if (angle == 0.0) r.augmentation.rotation_deg = 0.0;
                r.id = ref.id + "#d" + std::to_string(d) + "r" + std::to_string(static_cast<int>(r.augmentation.rotation_deg));
                out.samples.push_back(std::move(r));
            }
        }
    }
    for (const auto& s : m.samples)
        if (s.split == Split::test) out.samples.push_back(s);
    return out;
}

// ---------------------------------------------------------------------------
// Manifest cache file

inline nlohmann::json manifest_summary(const DatasetManifest& m) {
    nlohmann::json j;
    j["seed"] = m.seed;
    j["categories"] = nlohmann::json::array();
    for (const auto& cat : m.categories) {
        j["categories"].push_back({{"name", cat},
                                   {"train", m.count(Split::train, std::nullopt, cat)},
                                   {"test_normal", m.count(Split::test, Label::normal, cat)},
                                   {"test_anomalous", m.count(Split::test, Label::anomalous, cat)}});
    }
    return j;
}

/// Cached manifest (disk-backed samples only).
inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j = manifest_summary(m);
    j["samples"] = nlohmann::json::array();
    for (const auto& s : m.samples) {
        require(!s.pixels, ErrorKind::usage, "in-memory samples cannot be cached; materialize first");
        j["samples"].push_back({{"id", s.id},
                                {"category", s.category},
                                {"split", to_string(s.split)},
                                {"label", to_string(s.label)},
                                {"image", s.image_path.string()},
                                {"mask", s.mask_path.string()},
                                {"dihedral", s.augmentation.dihedral},
                                {"rotation_deg", s.augmentation.rotation_deg}});
    }
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& c : j.at("categories")) m.categories.push_back(c.at("name").get<std::string>());
    for (const auto& e : j.at("samples")) {
        SampleRef r;
        r.id = e.at("id").get<std::string>();
        r.category = e.at("category").get<std::string>();
        r.split = e.at("split").get<std::string>() == "train" ? Split::train : Split::test;
        r.label = e.at("label").get<std::string>() == "normal" ? Label::normal : Label::anomalous;
        r.image_path = e.at("image").get<std::string>();
        r.mask_path = e.at("mask").get<std::string>();
        r.augmentation = {e.value("dihedral", 0), e.value("rotation_deg", 0.0)};
        m.samples.push_back(std::move(r));
    }
    return m;
}

} // namespace agp

#include "test_util.hpp"

#include <set>

using namespace agp;
using agp::testing::TempDir;
using agp::testing::error_kind_of;

namespace {

void write_rgb(const std::filesystem::path& p, int size, double value) {
    std::filesystem::create_directories(p.parent_path());
    write_image_png(p, Image(size, size, 3, value));
}

void write_blob_mask(const std::filesystem::path& p, int size) {
    std::filesystem::create_directories(p.parent_path());
    BinaryMask m(size, size);
    m.data[size + 1] = 1;
    write_mask_png(p, m);
}

/// widget: 5 train, 2 good test, 3 crack test with masks.
std::filesystem::path make_layout(const TempDir& dir) {
    const auto root = dir / "mvtec";
    for (int i = 0; i < 5; ++i) write_rgb(root / "widget/train/good" / (std::to_string(i) + ".png"), 16, 0.5);
    for (int i = 0; i < 2; ++i) write_rgb(root / "widget/test/good" / (std::to_string(i) + ".png"), 16, 0.5);
    for (int i = 0; i < 3; ++i) {
        write_rgb(root / "widget/test/crack" / (std::to_string(i) + ".png"), 16, 0.2);
        write_blob_mask(root / "widget/ground_truth/crack" / (std::to_string(i) + "_mask.png"), 16);
    }
    return root;
}

} // namespace

TEST(MvtecLayout, CountsSamplesAndMasks) {
    TempDir dir;
    const auto root = make_layout(dir);
    const DatasetManifest m = load_mvtec_layout(root, {"widget"});
    EXPECT_EQ(m.samples.size(), 10u);
    std::size_t masks = 0;
    for (const auto& s : m.samples) masks += s.has_mask();
    EXPECT_EQ(masks, 3u);
    EXPECT_EQ(m.count(Split::train), 5u);
    EXPECT_EQ(m.count(Split::test, Label::normal), 2u);
    EXPECT_EQ(m.count(Split::test, Label::anomalous), 3u);
    EXPECT_EQ(discover_categories(root), std::vector<std::string>{"widget"});

    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const ImageSample s = m.load(i);
        EXPECT_EQ(s.gt_mask.has_value(), s.split == Split::test && s.label == Label::anomalous);
        if (s.split == Split::train) {
            EXPECT_EQ(s.label, Label::normal);
        }
        if (s.gt_mask) {
            EXPECT_EQ(s.gt_mask->positives(), 1u);
        }
        EXPECT_NEAR(s.pixels.data[0], s.label == Label::normal ? 128.0 / 255 : 51.0 / 255, 1e-12);
    }
}

TEST(MvtecLayout, EmptyCategoryListIsEmptyManifest) {
    const DatasetManifest m = load_mvtec_layout("/nonexistent/root", {});
    EXPECT_TRUE(m.samples.empty());
    EXPECT_TRUE(m.categories.empty());
}

TEST(MvtecLayout, MissingDirectoryIsLayoutError) {
    TempDir dir;
    const auto root = make_layout(dir);
    try {
        load_mvtec_layout(root, {"widget", "gadget"});
        FAIL() << "expected layout error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::layout);
        EXPECT_NE(std::string(e.what()).find("gadget"), std::string::npos);
    }
}

TEST(MvtecLayout, MissingMaskIsPairingError) {
    TempDir dir;
    const auto root = make_layout(dir);
    std::filesystem::remove(root / "widget/ground_truth/crack/1_mask.png");
    EXPECT_EQ(error_kind_of([&] { load_mvtec_layout(root, {"widget"}); }), ErrorKind::mask_pairing);
}

TEST(MvtecLayout, EmptyMaskIsPairingError) {
    TempDir dir;
    const auto root = make_layout(dir);
    write_mask_png(root / "widget/ground_truth/crack/2_mask.png", BinaryMask(16, 16));
    const DatasetManifest m = load_mvtec_layout(root, {"widget"});
    std::size_t idx = 0;
    while (m.samples[idx].id != "widget/test/crack/2") ++idx;
    EXPECT_EQ(error_kind_of([&] { m.load(idx); }), ErrorKind::mask_pairing);
}

TEST(ToyDataset, CountsForReferenceSpec) {
    ToyDatasetSpec spec;
    spec.n_categories = 2;
    spec.n_train_per_cat = 50;
    spec.n_test_normal = 10;
    spec.n_test_anomalous = 10;
    spec.image_size = 64;
    spec.seed = 7;
    const DatasetManifest m = generate_toy_dataset(spec);
    EXPECT_EQ(m.count(Split::train), 100u);
    EXPECT_EQ(m.count(Split::test), 40u);
    std::size_t masks = 0;
    for (const auto& s : m.samples) masks += s.has_mask();
    EXPECT_EQ(masks, 20u);
    EXPECT_EQ(m.categories.size(), 2u);
}

TEST(ToyDataset, DeterministicPixels) {
    ToyDatasetSpec spec;
    spec.n_train_per_cat = 5;
    const DatasetManifest a = generate_toy_dataset(spec);
    const DatasetManifest b = generate_toy_dataset(spec);
    ASSERT_EQ(a.samples.size(), b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        const ImageSample x = a.load(i), y = b.load(i);
        EXPECT_EQ(std::memcmp(x.pixels.data.data(), y.pixels.data.data(), x.pixels.data.size() * sizeof(double)), 0);
        EXPECT_EQ(x.gt_mask.has_value(), y.gt_mask.has_value());
        if (x.gt_mask) {
            EXPECT_EQ(x.gt_mask->data, y.gt_mask->data);
        }
    }
    spec.seed = 8;
    const DatasetManifest c = generate_toy_dataset(spec);
    EXPECT_NE(a.load(0).pixels.data, c.load(0).pixels.data);
}

TEST(ToyDataset, CategoriesAreDistinctTextureFamilies) {
    ToyDatasetSpec spec;
    spec.n_categories = 3;
    spec.n_train_per_cat = 1;
    const DatasetManifest m = generate_toy_dataset(spec);
    const std::set<std::string> names(m.categories.begin(), m.categories.end());
    EXPECT_EQ(names, (std::set<std::string>{"toy_stripes", "toy_checker", "toy_blobs"}));
}

TEST(ToyDataset, DefectAreaBoundsAndSeparabilityOver1000Images) {
    ToyDatasetSpec spec;
    spec.n_categories = 3;
    spec.n_train_per_cat = 0;
    spec.n_test_normal = 0;
    spec.n_test_anomalous = 334; // 1002 anomalous images
    spec.seed = 11;
    const DatasetManifest m = generate_toy_dataset(spec);
    ASSERT_GE(m.samples.size(), 1000u);
    const double area = 64.0 * 64.0;
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const ImageSample s = m.load(i);
        ASSERT_TRUE(s.gt_mask.has_value());
        const double frac = s.gt_mask->positives() / area;
        EXPECT_GE(frac, 0.01) << s.id;
        EXPECT_LE(frac, 0.15) << s.id;
        double in = 0, out = 0;
        std::size_t n_in = 0, n_out = 0;
        for (std::size_t p = 0; p < s.gt_mask->data.size(); ++p) {
            const double v = (s.pixels.data[3 * p] + s.pixels.data[3 * p + 1] + s.pixels.data[3 * p + 2]) / 3.0;
            if (s.gt_mask->data[p]) {
                in += v;
                ++n_in;
            } else {
                out += v;
                ++n_out;
            }
        }
        EXPECT_GE(std::abs(in / n_in - out / n_out), spec.separability_margin - 1e-9) << s.id;
        for (double v : s.pixels.data) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    }
}

TEST(ToyDataset, ImageSizeMustDivideByPatch) {
    ToyDatasetSpec spec;
    spec.image_size = 60;
    EXPECT_EQ(error_kind_of([&] { generate_toy_dataset(spec, 8); }), ErrorKind::config);
}

TEST(ToyDataset, MaterializedLayoutLoadsBack) {
    TempDir dir;
    ToyDatasetSpec spec;
    spec.n_train_per_cat = 3;
    spec.n_test_normal = 2;
    spec.n_test_anomalous = 2;
    const DatasetManifest m = generate_toy_dataset(spec);
    materialize(m, dir.path());
    const DatasetManifest back = load_mvtec_layout(dir.path(), discover_categories(dir.path()));
    EXPECT_EQ(back.samples.size(), m.samples.size());
    EXPECT_EQ(back.count(Split::test, Label::anomalous), m.count(Split::test, Label::anomalous));
    for (std::size_t i = 0; i < back.samples.size(); ++i) {
        const ImageSample s = back.load(i);
        EXPECT_EQ(s.gt_mask.has_value(), s.label == Label::anomalous);
    }
}

TEST(ResizeAndNormalize, DownscaleIdentityAndConstant) {
    ImageSample s;
    s.pixels = Image(448, 448, 3, 0.0);
    Rng rng(3);
    for (double& v : s.pixels.data) v = uniform01(rng);
    s.gt_mask = BinaryMask(448, 448);
    s.gt_mask->data[0] = 1;
    const ImageSample r = resize_and_normalize(s, 224);
    EXPECT_EQ(r.pixels.height, 224);
    EXPECT_EQ(r.pixels.width, 224);
    EXPECT_EQ(r.gt_mask->height, 224);
    for (double v : r.pixels.data) EXPECT_TRUE(v >= 0.0 && v <= 1.0);

    const ImageSample same = resize_and_normalize(r, 224);
    EXPECT_EQ(same.pixels.data, r.pixels.data);
    EXPECT_EQ(same.gt_mask->data, r.gt_mask->data);

    ImageSample c;
    c.pixels = Image(37, 51, 3, 0.375);
    const ImageSample rc = resize_and_normalize(c, 64);
    for (double v : rc.pixels.data) EXPECT_NEAR(v, 0.375, 1e-15);

    EXPECT_EQ(error_kind_of([&] { resize_and_normalize(c, 0); }), ErrorKind::config);
}

TEST(Manifest, EpochOrderIsPureFunctionOfSeedAndEpoch) {
    ToyDatasetSpec spec;
    spec.n_train_per_cat = 10;
    const DatasetManifest a = generate_toy_dataset(spec), b = generate_toy_dataset(spec);
    EXPECT_EQ(a.epoch_order(3), b.epoch_order(3));
    EXPECT_NE(a.epoch_order(3), a.epoch_order(4));
    auto sorted = a.epoch_order(5);
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, a.indices(Split::train));
}

TEST(Manifest, JsonCacheRoundTrip) {
    TempDir dir;
    ToyDatasetSpec spec;
    spec.n_train_per_cat = 2;
    spec.n_test_normal = 1;
    spec.n_test_anomalous = 1;
    const DatasetManifest m = materialize(generate_toy_dataset(spec), dir.path());
    const DatasetManifest back = manifest_from_json(manifest_to_json(m));
    ASSERT_EQ(back.samples.size(), m.samples.size());
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].id, m.samples[i].id);
        EXPECT_EQ(back.samples[i].image_path, m.samples[i].image_path);
        EXPECT_EQ(back.samples[i].mask_path, m.samples[i].mask_path);
    }
    EXPECT_EQ(back.categories, m.categories);
}

TEST(Augmentation, DihedralGroupHasEightDistinctElements) {
    Rng rng(5);
    const Image img = agp::testing::random_image(rng, 6, 6);
    std::set<std::vector<double>> seen;
    for (int d = 0; d < 8; ++d) seen.insert(dihedral(img, d).data);
    EXPECT_EQ(seen.size(), 8u);
    EXPECT_EQ(dihedral(img, 0).data, img.data);
    // four quarter turns return to the start
    Image r = img;
    for (int i = 0; i < 4; ++i) r = dihedral(r, 1);
    EXPECT_EQ(r.data, img.data);
    // a flip is an involution
    EXPECT_EQ(dihedral(dihedral(img, 4), 4).data, img.data);
}

TEST(Augmentation, RotationPreservesConstantImage) {
    const Image img(16, 16, 3, 0.25);
    for (double v : rotate_reflect(img, 15.0).data) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(FewShot, OneShotOneCategoryGives32Samples) {
    ToyDatasetSpec spec;
    spec.n_categories = 1;
    spec.n_train_per_cat = 5;
    const DatasetManifest shots = select_few_shot(generate_toy_dataset(spec), 1, 3);
    const DatasetManifest x = few_shot_expand(shots, 1);
    EXPECT_EQ(x.count(Split::train), 32u);
    EXPECT_EQ(x.count(Split::test), shots.count(Split::test));

    // the identity variant reproduces the original image
    const auto train = x.indices(Split::train);
    const ImageSample first = x.load(train.front());
    const ImageSample orig = shots.load(shots.indices(Split::train).front());
    EXPECT_EQ(first.pixels.data, orig.pixels.data);

    std::set<std::vector<double>> variants;
    for (auto i : train) variants.insert(x.load(i).pixels.data);
    EXPECT_EQ(variants.size(), 32u);
}

TEST(FewShot, FourShotFifteenCategories) {
    DatasetManifest m;
    for (int c = 0; c < 15; ++c) {
        const std::string cat = "c" + std::to_string(c);
        m.categories.push_back(cat);
        for (int i = 0; i < 4; ++i) {
            SampleRef r;
            r.id = cat + "/train/good/" + std::to_string(i);
            r.category = cat;
            r.pixels = std::make_shared<const Image>(8, 8, 3, 0.5);
            m.samples.push_back(r);
        }
    }
    EXPECT_EQ(few_shot_expand(m, 4).count(Split::train), 1920u);
}

TEST(FewShot, NonPositiveKIsConfigError) {
    DatasetManifest m;
    EXPECT_EQ(error_kind_of([&] { few_shot_expand(m, 0); }), ErrorKind::config);
    EXPECT_EQ(error_kind_of([&] { few_shot_expand(m, -2); }), ErrorKind::config);
}

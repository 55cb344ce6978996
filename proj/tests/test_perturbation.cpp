#include "test_util.hpp"

using namespace agp;
using agp::testing::error_kind_of;
using agp::testing::random_features;
using agp::testing::random_plane;

namespace {

NoiseSchedule reference_schedule() {
    NoiseSchedule s;
    s.gamma = 1.0;
    s.p = 1.0;
    s.m = 0.0;
    s.T = 400;
    s.beta = 0.05;
    return s;
}

// Direct reading of the noise model: draw E in token-major order, scale
// each position by γ·(t/T·(p−m)+m)·A + β with A max-min normalised.
Matrix feature_noise_oracle(const Matrix& clean, const std::vector<double>& mask, int t, const NoiseSchedule& s,
                            std::uint64_t seed) {
    const double lo = *std::min_element(mask.begin(), mask.end());
    const double hi = *std::max_element(mask.begin(), mask.end());
    const double tt = std::min<double>(std::max(t, 0), s.T);
    const double a = s.gamma * (tt / s.T * (s.p - s.m) + s.m);
    Rng rng(seed);
    Matrix out = clean;
    for (Eigen::Index i = 0; i < clean.rows(); ++i) {
        const double an = hi > lo ? (mask[static_cast<std::size_t>(i)] - lo) / (hi - lo) : 0.0;
        for (Eigen::Index j = 0; j < clean.cols(); ++j)
            out(i, j) += (s.noise_mean + s.noise_std * standard_normal(rng)) * (a * an + s.beta);
    }
    return out;
}

std::size_t changed_pixels(const Image& a, const Image& b) {
    std::size_t n = 0;
    for (std::size_t p = 0; p < a.pixel_count(); ++p)
        for (int c = 0; c < a.channels; ++c)
            if (a.data[p * a.channels + c] != b.data[p * b.channels + c]) {
                ++n;
                break;
            }
    return n;
}

} // namespace

TEST(Schedule, AlphaEndpointsAndMidpoint) {
    const NoiseSchedule s = reference_schedule();
    EXPECT_EQ(alpha_at(0, s), 0.0);
    EXPECT_EQ(alpha_at(200, s), 0.5);
    EXPECT_EQ(alpha_at(400, s), 1.0);
    EXPECT_EQ(alpha_at(500, s), 1.0);
}

TEST(Schedule, AlphaWithFloorAndGain) {
    NoiseSchedule s = reference_schedule();
    s.gamma = 2.0;
    s.m = 0.25;
    s.p = 0.75;
    EXPECT_DOUBLE_EQ(alpha_at(0, s), 0.5);
    EXPECT_DOUBLE_EQ(alpha_at(400, s), 1.5);
    EXPECT_DOUBLE_EQ(alpha_at(100, s), 2.0 * (0.25 * 0.5 + 0.25));
}

TEST(Schedule, ImageRatioRamp) {
    const NoiseSchedule s = reference_schedule();
    EXPECT_EQ(image_mask_ratio_at(0, s), 0.6);
    EXPECT_EQ(image_mask_ratio_at(100, s), 0.6);
    EXPECT_NEAR(image_mask_ratio_at(250, s), 0.8, 1e-15);
    EXPECT_EQ(image_mask_ratio_at(400, s), 1.0);
    EXPECT_EQ(image_mask_ratio_at(499, s), 1.0);
}

TEST(Schedule, CompressedKeepsShape) {
    const NoiseSchedule s = reference_schedule().compressed(50);
    EXPECT_EQ(s.T, 40);
    EXPECT_EQ(s.img_ramp_start_epoch, 10);
    EXPECT_EQ(s.img_ramp_end_epoch, 40);
    EXPECT_EQ(alpha_at(20, s), 0.5);
    EXPECT_NEAR(image_mask_ratio_at(25, s), 0.8, 1e-15);
}

TEST(Schedule, ValidationRejectsBadRatios) {
    NoiseSchedule s = reference_schedule();
    s.img_ratio_end = 1.2;
    EXPECT_EQ(error_kind_of([&] { s.validate(); }), ErrorKind::config);
    s = reference_schedule();
    s.img_ratio_start = 0.9;
    s.img_ratio_end = 0.5;
    EXPECT_EQ(error_kind_of([&] { s.validate(); }), ErrorKind::config);
}

TEST(FeatureNoise, MatchesScalarOracle) {
    Rng rng(1);
    const NoiseSchedule s = reference_schedule();
    for (int trial = 0; trial < 30; ++trial) {
        const FeatureMap clean = random_features(rng, 4, 5, 6);
        const Plane mask = random_plane(rng, 4, 5);
        const int t = uniform_int(rng, 0, 500);
        const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(trial);
        const PerturbedBatch out = perturb_features(clean, {mask, MaskRole::final}, t, s, seed);
        const Matrix expect = feature_noise_oracle(clean.tokens, mask.data, t, s, seed);
        EXPECT_LT((out.features.tokens - expect).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_EQ(out.noise_realization_seed, seed);
        EXPECT_FALSE(out.image.has_value());
    }
}

TEST(FeatureNoise, ZeroMaskGivesFloorOnly) {
    Rng rng(2);
    const FeatureMap clean = random_features(rng, 3, 3, 4);
    NoiseSchedule s = reference_schedule();
    const PerturbedBatch a = perturb_features(clean, {Plane(3, 3), MaskRole::final}, 400, s, 5);
    // Constant map normalises to zeros so only β scales the draws.
    Rng draws(5);
    for (Eigen::Index i = 0; i < clean.tokens.size(); ++i)
        EXPECT_NEAR(a.features.tokens.data()[i] - clean.tokens.data()[i], 0.05 * standard_normal(draws), 1e-14);

    s.beta = 0.0;
    const PerturbedBatch b = perturb_features(clean, {Plane(3, 3), MaskRole::final}, 400, s, 5);
    EXPECT_EQ(b.features.tokens, clean.tokens);
}

TEST(FeatureNoise, ZeroAlphaAndZeroBetaIsIdentity) {
    Rng rng(3);
    const FeatureMap clean = random_features(rng, 3, 4, 5);
    NoiseSchedule s = reference_schedule();
    s.beta = 0.0;
    const PerturbedBatch out = perturb_features(clean, {random_plane(rng, 3, 4), MaskRole::final}, 0, s, 9);
    EXPECT_EQ(out.features.tokens, clean.tokens);
}

TEST(FeatureNoise, MaskShapeMismatchIsShapeError) {
    Rng rng(4);
    const FeatureMap clean = random_features(rng, 3, 3, 2);
    EXPECT_EQ(error_kind_of([&] { perturb_features(clean, {Plane(2, 3), MaskRole::final}, 0, reference_schedule(), 1); }),
              ErrorKind::shape);
}

TEST(FeatureNoise, RandomArmIsUniformWeight) {
    Rng rng(5);
    const FeatureMap clean = random_features(rng, 2, 3, 4);
    const NoiseSchedule s = reference_schedule();
    const PerturbedBatch out = random_feature_noise(clean, 200, s, 17);
    Rng draws(17);
    for (Eigen::Index i = 0; i < clean.tokens.size(); ++i)
        EXPECT_NEAR(out.features.tokens.data()[i] - clean.tokens.data()[i], 0.55 * standard_normal(draws), 1e-14);
}

TEST(FeatureNoise, HighAttentionPositionsGetLargerNoise) {
    const NoiseSchedule s = reference_schedule();
    const FeatureMap clean(2, 1, 4000);
    Plane mask(2, 1);
    mask.data = {0.0, 1.0};
    const PerturbedBatch out = perturb_features(clean, {mask, MaskRole::final}, 400, s, 3);
    const double lo = out.features.tokens.row(0).norm(), hi = out.features.tokens.row(1).norm();
    EXPECT_NEAR(hi / lo, 1.05 / 0.05, 1.05 / 0.05 * 0.1);
}

TEST(ImageNoise, RatioOneTouchesEveryPixel) {
    NoiseSchedule s = reference_schedule();
    Image img(8, 8, 3, 0.5);
    const Image out = masked_image_noise(img, Plane(8, 8), 1.0, s, 1);
    EXPECT_EQ(changed_pixels(img, out), 64u);
}

TEST(ImageNoise, RatioZeroIsIdentity) {
    Rng rng(6);
    const Image img = agp::testing::random_image(rng, 8, 8);
    EXPECT_EQ(masked_image_noise(img, random_plane(rng, 8, 8), 0.0, reference_schedule(), 1), img);
}

TEST(ImageNoise, QuarterRatioSelectsTopScores) {
    Rng rng(7);
    const Image img(4, 4, 3, 0.5);
    Plane scores(4, 4);
    scores.data = {0.1, 0.9, 0.2, 0.3, 0.8, 0.0, 0.4, 0.7, 0.05, 0.6, 0.15, 0.25, 0.35, 0.45, 0.5, 0.55};
    const Image out = masked_image_noise(img, scores, 0.25, reference_schedule(), 3);
    const std::vector<std::size_t> top{1, 4, 7, 9};
    for (std::size_t p = 0; p < 16; ++p) {
        bool changed = false;
        for (int c = 0; c < 3; ++c) changed |= out.data[p * 3 + c] != 0.5;
        EXPECT_EQ(changed, std::find(top.begin(), top.end(), p) != top.end()) << p;
    }
}

TEST(ImageNoise, TiesBreakTowardsLowerIndex) {
    const std::vector<double> scores(10, 1.0);
    EXPECT_EQ(top_indices(scores, 3), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(ImageNoise, OutputStaysInUnitRange) {
    NoiseSchedule s = reference_schedule();
    s.image_noise_std = 5.0;
    Rng rng(8);
    const Image out = masked_image_noise(agp::testing::random_image(rng, 8, 8), Plane(8, 8), 1.0, s, 2);
    for (double v : out.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(ImageNoise, ReplaceModeIgnoresOriginalPixel) {
    NoiseSchedule s = reference_schedule();
    s.image_noise_mode = ImageNoiseMode::replace;
    const Image a = masked_image_noise(Image(4, 4, 3, 0.1), Plane(4, 4), 1.0, s, 4);
    const Image b = masked_image_noise(Image(4, 4, 3, 0.9), Plane(4, 4), 1.0, s, 4);
    EXPECT_EQ(a, b);
}

TEST(ImageNoise, RatioOutOfRangeIsConfigError) {
    const Image img(4, 4, 3);
    EXPECT_EQ(error_kind_of([&] { masked_image_noise(img, Plane(4, 4), 1.5, reference_schedule(), 1); }), ErrorKind::config);
    EXPECT_EQ(error_kind_of([&] { masked_image_noise(img, Plane(4, 4), -0.1, reference_schedule(), 1); }), ErrorKind::config);
}

TEST(ImageNoise, AttentionArmFollowsUpsampledMask) {
    const NoiseSchedule s = reference_schedule();
    Plane m(2, 2);
    m.data = {0.0, 0.0, 0.0, 1.0};
    const Image img(8, 8, 3, 0.5);
    // Epoch 0 gives ratio 0.6; the bottom-right quadrant must be fully noised.
    const PerturbedBatch out = perturb_image(img, {m, MaskRole::final}, 0, s, 6);
    ASSERT_TRUE(out.image.has_value());
    for (int y = 4; y < 8; ++y)
        for (int x = 4; x < 8; ++x) EXPECT_NE(out.image->at(y, x, 0), 0.5) << y << "," << x;
    EXPECT_EQ(changed_pixels(img, *out.image), static_cast<std::size_t>(std::lround(0.6 * 64)));
}

TEST(ImageNoise, RandomArmIsSeededAndSized) {
    const NoiseSchedule s = reference_schedule();
    const Image img(8, 8, 3, 0.5);
    const PerturbedBatch a = random_image_noise(img, 0, s, 11);
    const PerturbedBatch b = random_image_noise(img, 0, s, 11);
    const PerturbedBatch c = random_image_noise(img, 0, s, 12);
    EXPECT_EQ(*a.image, *b.image);
    EXPECT_NE(*a.image, *c.image);
    EXPECT_EQ(changed_pixels(img, *a.image), static_cast<std::size_t>(std::lround(0.6 * 64)));
}

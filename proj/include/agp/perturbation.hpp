#pragma once

#include <agp/attention_mask.hpp>
#include <agp/error.hpp>
#include <agp/random.hpp>
#include <agp/tensor.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

namespace agp {

enum class ImageNoiseMode { additive, replace };

NLOHMANN_JSON_SERIALIZE_ENUM(ImageNoiseMode, {{ImageNoiseMode::additive, "additive"}, {ImageNoiseMode::replace, "replace"}})

/// Curriculum parameters for both perturbation levels. Epochs are 0-based.
struct NoiseSchedule {
    double gamma = 1.0; // basic noise factor
    double p = 1.0;     // maximum intensity
    double m = 0.0;     // minimum intensity
    int T = 400;        // feature-noise ramp horizon (epochs)
    double beta = 0.05; // attention-independent floor
    double img_ratio_start = 0.6;
    double img_ratio_end = 1.0;
    int img_ramp_start_epoch = 100;
    int img_ramp_end_epoch = 400;
    double noise_mean = 0.0;
    double noise_std = 1.0;
    double image_noise_mean = 0.0;
    double image_noise_std = 0.2;
    ImageNoiseMode image_noise_mode = ImageNoiseMode::additive;

    void validate() const {
        require(gamma >= 0.0, ErrorKind::config, "gamma must be >= 0");
        require(beta >= 0.0, ErrorKind::config, "beta must be >= 0");
        require(T > 0, ErrorKind::config, "schedule horizon T must be > 0");
        require(noise_std > 0.0 && image_noise_std > 0.0, ErrorKind::config, "noise std must be > 0");
        require(0.0 <= img_ratio_start && img_ratio_start <= img_ratio_end && img_ratio_end <= 1.0, ErrorKind::config,
                "image ratios must satisfy 0 <= start <= end <= 1");
        require(img_ramp_start_epoch >= 0 && img_ramp_start_epoch <= img_ramp_end_epoch, ErrorKind::config,
                "image ramp epochs must satisfy 0 <= start <= end");
    }

    /// Same curriculum shape over a shorter run: every epoch-valued field is
    /// scaled by epochs / reference_epochs.
    NoiseSchedule compressed(int epochs, int reference_epochs = 500) const {
        NoiseSchedule s = *this;
        const double f = static_cast<double>(epochs) / reference_epochs;
        s.T = std::max(1, static_cast<int>(std::lround(T * f)));
        s.img_ramp_start_epoch = static_cast<int>(std::lround(img_ramp_start_epoch * f));
        s.img_ramp_end_epoch = std::max(s.img_ramp_start_epoch, static_cast<int>(std::lround(img_ramp_end_epoch * f)));
        return s;
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NoiseSchedule, gamma, p, m, T, beta, img_ratio_start, img_ratio_end,
                                                img_ramp_start_epoch, img_ramp_end_epoch, noise_mean, noise_std,
                                                image_noise_mean, image_noise_std, image_noise_mode)

/// α(t) = γ·(t/T·(p − m) + m), held at α(T) past the horizon.
inline double alpha_at(int t, const NoiseSchedule& s) {
    const double tt = std::clamp(t, 0, s.T);
    return s.gamma * (tt / s.T * (s.p - s.m) + s.m);
}

inline double image_mask_ratio_at(int t, const NoiseSchedule& s) {
    if (t <= s.img_ramp_start_epoch) return s.img_ratio_start;
    if (t >= s.img_ramp_end_epoch) return s.img_ratio_end;
    const double f = static_cast<double>(t - s.img_ramp_start_epoch) / (s.img_ramp_end_epoch - s.img_ramp_start_epoch);
    return s.img_ratio_start + f * (s.img_ratio_end - s.img_ratio_start);
}

struct PerturbedBatch {
    FeatureMap features;
    std::optional<Image> image;
    std::uint64_t noise_realization_seed = 0;
};

/// F' = F + E ⊙ w with one scalar weight per position broadcast over
/// channels; E is i.i.d. N(mean, std), drawn in token-major order from `seed`.
inline FeatureMap add_weighted_noise(const FeatureMap& clean, const Plane& weights, double mean, double stddev,
                                     std::uint64_t seed) {
    require(weights.height == clean.height && weights.width == clean.width, ErrorKind::shape,
            "noise weights do not match feature grid");
    FeatureMap out = clean;
    Rng rng(seed);
    const Eigen::Index c = clean.tokens.cols();
    for (Eigen::Index i = 0; i < clean.tokens.rows(); ++i) {
        const double w = weights.data[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < c; ++j) out.tokens(i, j) += normal(rng, mean, stddev) * w;
    }
    return out;
}

/// Attention-guided feature noise: weight = α(t)·norm(mask) + β.
inline PerturbedBatch perturb_features(const CleanFeatures& clean, const AttentionMask& mask, int t,
                                       const NoiseSchedule& s, std::uint64_t seed) {
    require(mask.values.height == clean.height && mask.values.width == clean.width, ErrorKind::shape,
            "mask " + std::to_string(mask.values.height) + "x" + std::to_string(mask.values.width) +
                " does not match features " + std::to_string(clean.height) + "x" + std::to_string(clean.width));
    const double alpha = alpha_at(t, s);
    Plane w = normalize(mask.values).values;
    for (double& v : w.data) v = alpha * v + s.beta;
    return {add_weighted_noise(clean, w, s.noise_mean, s.noise_std, seed), std::nullopt, seed};
}

/// Uniform-guidance arm: weight = α(t) + β at every position.
inline PerturbedBatch random_feature_noise(const CleanFeatures& clean, int t, const NoiseSchedule& s,
                                           std::uint64_t seed) {
    const Plane w(clean.height, clean.width, alpha_at(t, s) + s.beta);
    return {add_weighted_noise(clean, w, s.noise_mean, s.noise_std, seed), std::nullopt, seed};
}

/// Indices of the `count` largest scores; ties go to the lower index.
inline std::vector<std::size_t> top_indices(const std::vector<double>& scores, std::size_t count) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    count = std::min(count, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                      [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Adds Gaussian noise to the round(ratio·H·W) pixels with the highest
/// `scores` (an H×W map). Other pixels are copied unchanged.
inline Image masked_image_noise(const Image& image, const Plane& scores, double ratio, const NoiseSchedule& s,
                                std::uint64_t seed) {
    require(ratio >= 0.0 && ratio <= 1.0, ErrorKind::config, "image mask ratio " + std::to_string(ratio) + " outside [0,1]");
    require(scores.height == image.height && scores.width == image.width, ErrorKind::shape,
            "image score map does not match image");
    const auto n = image.pixel_count();
    const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
    Image out = image;
    Rng rng(seed);
    for (std::size_t i : top_indices(scores.data, k)) {
        for (int c = 0; c < image.channels; ++c) {
            double& v = out.data[i * image.channels + c];
            const double z = normal(rng, s.image_noise_mean, s.image_noise_std);
            v = s.image_noise_mode == ImageNoiseMode::additive ? v + z : 0.5 + z;
            v = std::clamp(v, 0.0, 1.0);
        }
    }
    return out;
}

/// Image-level perturbation guided by the final mask: the mask is upsampled
/// bilinearly to the image size and the top image_mask_ratio_at(t) fraction
/// of pixels receives noise.
inline PerturbedBatch perturb_image(const Image& image, const AttentionMask& final_mask, int t, const NoiseSchedule& s,
                                    std::uint64_t seed) {
    const Plane up = resize_bilinear(final_mask.values, image.height, image.width);
    PerturbedBatch out;
    out.image = masked_image_noise(image, up, image_mask_ratio_at(t, s), s, seed);
    out.noise_realization_seed = seed;
    return out;
}

/// Random-selection arm: pixels are chosen by seeded uniform scores instead
/// of attention.
inline PerturbedBatch random_image_noise(const Image& image, int t, const NoiseSchedule& s, std::uint64_t seed) {
    Plane scores(image.height, image.width);
    Rng rng(derive_seed(seed, {0x5e1u}));
    for (double& v : scores.data) v = uniform01(rng);
    PerturbedBatch out;
    out.image = masked_image_noise(image, scores, image_mask_ratio_at(t, s), s, seed);
    out.noise_realization_seed = seed;
    return out;
}

} // namespace agp

#pragma once

#include <agp/error.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace agp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-major H×W×C image with real samples (pixels are in [0,1] by convention).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c = 3, double fill = 0.0)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

    bool operator==(const Image&) const = default;
};

/// Single-channel real map: attention masks, anomaly maps.
struct Plane {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Plane() = default;
    Plane(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return data.size(); }
    bool same_shape(const Plane& o) const { return height == o.height && width == o.width; }

    bool operator==(const Plane&) const = default;
};

/// Binary ground-truth mask, nonzero = anomalous.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    BinaryMask() = default;
    BinaryMask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::size_t positives() const {
        return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
    }

    bool operator==(const BinaryMask&) const = default;
};

/// H_f×W_f×C_f feature map stored as a (H_f·W_f)×C_f token matrix, row index h·W_f + w.
struct FeatureMap {
    int height = 0;
    int width = 0;
    Matrix tokens;

    FeatureMap() = default;
    FeatureMap(int h, int w, int c) : height(h), width(w), tokens(Matrix::Zero(static_cast<Eigen::Index>(h) * w, c)) {}
    FeatureMap(int h, int w, Matrix t) : height(h), width(w), tokens(std::move(t)) {}

    int channels() const { return static_cast<int>(tokens.cols()); }
    int positions() const { return height * width; }
    bool same_shape(const FeatureMap& o) const {
        return height == o.height && width == o.width && channels() == o.channels();
    }
};

inline void require_same_shape(const FeatureMap& a, const FeatureMap& b, const char* what) {
    require(a.same_shape(b), ErrorKind::shape,
            std::string(what) + ": feature maps " + std::to_string(a.height) + "x" + std::to_string(a.width) + "x" +
                std::to_string(a.channels()) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) +
                "x" + std::to_string(b.channels()));
}

namespace detail {

// Half-pixel-center source coordinate, clamped to the valid range.
struct Tap {
    int lo;
    int hi;
    double frac;
};

inline Tap bilinear_tap(int dst, int dst_size, int src_size) {
    const double scale = static_cast<double>(src_size) / dst_size;
    double s = (dst + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_size - 1));
    const int lo = static_cast<int>(std::floor(s));
    const int hi = std::min(lo + 1, src_size - 1);
    return {lo, hi, s - lo};
}

} // namespace detail

/// Bilinear resize with half-pixel centers. Same-size resize is the identity.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
    require(out_h > 0 && out_w > 0, ErrorKind::config, "resize target must be positive");
    if (out_h == src.height && out_w == src.width) return src;
    Image out(out_h, out_w, src.channels);
    for (int y = 0; y < out_h; ++y) {
        const auto ty = detail::bilinear_tap(y, out_h, src.height);
        for (int x = 0; x < out_w; ++x) {
            const auto tx = detail::bilinear_tap(x, out_w, src.width);
            for (int c = 0; c < src.channels; ++c) {
                const double top = src.at(ty.lo, tx.lo, c) * (1 - tx.frac) + src.at(ty.lo, tx.hi, c) * tx.frac;
                const double bot = src.at(ty.hi, tx.lo, c) * (1 - tx.frac) + src.at(ty.hi, tx.hi, c) * tx.frac;
                out.at(y, x, c) = top * (1 - ty.frac) + bot * ty.frac;
            }
        }
    }
    return out;
}

inline Plane resize_bilinear(const Plane& src, int out_h, int out_w) {
    Image tmp(src.height, src.width, 1);
    tmp.data = src.data;
    const Image r = resize_bilinear(tmp, out_h, out_w);
    Plane out(out_h, out_w);
    out.data = r.data;
    return out;
}

inline BinaryMask resize_nearest(const BinaryMask& src, int out_h, int out_w) {
    require(out_h > 0 && out_w > 0, ErrorKind::config, "resize target must be positive");
    if (out_h == src.height && out_w == src.width) return src;
    BinaryMask out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) * src.height / out_h));
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) * src.width / out_w));
            out.at(y, x) = src.at(sy, sx);
        }
    }
    return out;
}

inline bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

} // namespace agp

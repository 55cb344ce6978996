#pragma once

// Static PNG charts for run reports. No text rendering: axes are implied by
// the frame and values are written alongside in CSV form by the callers.

#include <agp/error.hpp>
#include <agp/image_io.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace agp::plot {

using Color = std::array<std::uint8_t, 3>;

inline constexpr Color kBlue = {52, 101, 164};
inline constexpr Color kRed = {204, 0, 0};
inline constexpr Color kGreen = {78, 154, 6};
inline constexpr Color kOrange = {245, 121, 0};
inline constexpr Color kGray = {136, 138, 133};
inline constexpr Color kBlack = {0, 0, 0};

inline const std::array<Color, 5>& palette() {
    static const std::array<Color, 5> p = {kBlue, kRed, kGreen, kOrange, kGray};
    return p;
}

class Canvas {
public:
    Canvas(int width, int height) : r_{height, width, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height * 3, 255)} {}

    int width() const { return r_.width; }
    int height() const { return r_.height; }

    void set(int x, int y, const Color& c) {
        if (x < 0 || y < 0 || x >= r_.width || y >= r_.height) return;
        auto* p = &r_.data[(static_cast<std::size_t>(y) * r_.width + x) * 3];
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }

    void fill_rect(int x0, int y0, int x1, int y1, const Color& c) {
        if (x0 > x1) std::swap(x0, x1);
        if (y0 > y1) std::swap(y0, y1);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) set(x, y, c);
    }

    void line(int x0, int y0, int x1, int y1, const Color& c) {
        const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
        const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        for (;;) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    void frame(int margin) {
        line(margin, margin, margin, height() - margin, kBlack);
        line(margin, height() - margin, width() - margin, height() - margin, kBlack);
    }

    void save(const std::filesystem::path& path) const { write_png8(path, r_); }

private:
    Raster8 r_;
};

/// One polyline per series, all sharing the y range.
inline void line_chart(const std::filesystem::path& path, const std::vector<std::vector<double>>& series, int width = 640,
                       int height = 400) {
    Canvas cv(width, height);
    const int m = 30;
    cv.frame(m);
    double lo = INFINITY, hi = -INFINITY;
    std::size_t n = 0;
    for (const auto& s : series)
        for (double v : s)
            if (std::isfinite(v)) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
                n = std::max(n, s.size());
            }
    if (n >= 1 && hi >= lo) {
        if (hi == lo) hi = lo + 1.0;
        auto px = [&](std::size_t i) { return m + static_cast<int>(std::lround((width - 2.0 * m) * (n > 1 ? double(i) / (n - 1) : 0.5))); };
        auto py = [&](double v) { return height - m - static_cast<int>(std::lround((height - 2.0 * m) * (v - lo) / (hi - lo))); };
        for (std::size_t k = 0; k < series.size(); ++k) {
            const auto& s = series[k];
            const Color& c = palette()[k % palette().size()];
            for (std::size_t i = 1; i < s.size(); ++i) cv.line(px(i - 1), py(s[i - 1]), px(i), py(s[i]), c);
            if (s.size() == 1) cv.fill_rect(px(0) - 2, py(s[0]) - 2, px(0) + 2, py(s[0]) + 2, c);
        }
    }
    cv.save(path);
}

/// Overlaid histograms (bars drawn side by side within each bin).
inline void histogram(const std::filesystem::path& path, const std::vector<std::vector<double>>& groups, int bins = 30,
                      int width = 640, int height = 400) {
    require(bins >= 1, ErrorKind::config, "histogram needs at least one bin");
    Canvas cv(width, height);
    const int m = 30;
    cv.frame(m);
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& g : groups)
        for (double v : g) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi >= lo && !groups.empty()) {
        if (hi == lo) hi = lo + 1.0;
        std::vector<std::vector<int>> counts(groups.size(), std::vector<int>(bins, 0));
        int top = 1;
        for (std::size_t k = 0; k < groups.size(); ++k)
            for (double v : groups[k]) {
                const int b = std::min(bins - 1, static_cast<int>((v - lo) / (hi - lo) * bins));
                top = std::max(top, ++counts[k][b]);
            }
        const double bin_w = (width - 2.0 * m) / bins;
        const double bar_w = bin_w / groups.size();
        for (std::size_t k = 0; k < groups.size(); ++k)
            for (int b = 0; b < bins; ++b) {
                if (!counts[k][b]) continue;
                const int x0 = m + static_cast<int>(b * bin_w + k * bar_w) + 1;
                const int x1 = m + static_cast<int>(b * bin_w + (k + 1) * bar_w) - 1;
                const int y0 = height - m - static_cast<int>(std::lround((height - 2.0 * m) * counts[k][b] / top));
                cv.fill_rect(x0, y0, std::max(x0, x1), height - m - 1, palette()[k % palette().size()]);
            }
    }
    cv.save(path);
}

/// Bars on a [0, 1] scale (e.g. AUROC per ablation cell).
inline void bar_chart(const std::filesystem::path& path, const std::vector<double>& values, int width = 640,
                      int height = 400) {
    Canvas cv(width, height);
    const int m = 30;
    cv.frame(m);
    if (!values.empty()) {
        const double slot = (width - 2.0 * m) / values.size();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double v = std::clamp(values[i], 0.0, 1.0);
            const int x0 = m + static_cast<int>(i * slot + 0.15 * slot);
            const int x1 = m + static_cast<int>((i + 1) * slot - 0.15 * slot);
            const int y0 = height - m - static_cast<int>(std::lround((height - 2.0 * m) * v));
            cv.fill_rect(x0, y0, x1, height - m - 1, palette()[i % palette().size()]);
        }
    }
    cv.save(path);
}

} // namespace agp::plot

#pragma once

#include <agp/error.hpp>
#include <agp/scoring.hpp>
#include <agp/tensor.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace agp {

/// Mann–Whitney AUROC: P(score⁺ > score⁻) + ½·P(score⁺ = score⁻), computed
/// from average ranks.
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    require(scores.size() == labels.size(), ErrorKind::shape, "auroc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos = 0, rank_sum = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) {
                rank_sum += avg_rank;
                pos += 1;
            }
        i = j;
    }
    const double neg = static_cast<double>(n) - pos;
    require(pos > 0 && neg > 0, ErrorKind::undefined_metric, "auroc needs both positive and negative samples");
    return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

inline double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    return auroc(std::span<const double>(scores), std::span<const std::uint8_t>(labels));
}

namespace detail {

inline void require_aligned(std::span<const Plane> maps, std::span<const BinaryMask> masks) {
    require(maps.size() == masks.size(), ErrorKind::shape, "maps and masks differ in count");
    for (std::size_t i = 0; i < maps.size(); ++i)
        require(maps[i].height == masks[i].height && maps[i].width == masks[i].width, ErrorKind::shape,
                "map " + std::to_string(i) + " is not aligned with its mask");
}

} // namespace detail

/// AUROC over the pooled pixel population. Normal images pass all-zero masks.
inline double pixel_auroc(std::span<const Plane> maps, std::span<const BinaryMask> masks) {
    detail::require_aligned(maps, masks);
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        s.insert(s.end(), maps[i].data.begin(), maps[i].data.end());
        l.insert(l.end(), masks[i].data.begin(), masks[i].data.end());
    }
    return auroc(s, l);
}

struct Components {
    int count = 0;
    std::vector<int> label; // -1 background, else component id
    std::vector<std::size_t> sizes;
};

/// 8-connected component labeling, ids assigned in raster order of first pixel.
inline Components connected_components(const BinaryMask& m) {
    Components c;
    c.label.assign(m.data.size(), -1);
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < m.data.size(); ++start) {
        if (!m.data[start] || c.label[start] >= 0) continue;
        const int id = c.count++;
        c.sizes.push_back(0);
        c.label[start] = id;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++c.sizes[id];
            const int y = static_cast<int>(p / m.width), x = static_cast<int>(p % m.width);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= m.height || xx < 0 || xx >= m.width) continue;
                    const std::size_t q = static_cast<std::size_t>(yy) * m.width + xx;
                    if (m.data[q] && c.label[q] < 0) {
                        c.label[q] = id;
                        stack.push_back(q);
                    }
                }
        }
    }
    return c;
}

struct ProOptions {
    double fpr_limit = 0.3;
    /// Inputs with more pixels than this use `quantile_thresholds` thresholds
    /// instead of every distinct score.
    std::size_t exact_pixel_limit = std::size_t{1} << 20;
    std::size_t quantile_thresholds = 512;
};

struct ProCurve {
    std::vector<double> fpr;
    std::vector<double> pro;
};

/// Area under the piecewise-linear curve (x ascending) on [0, x_max]; the
/// curve is interpolated at x_max.
inline double trapezoid_to(const std::vector<double>& x, const std::vector<double>& y, double x_max) {
    double area = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        if (x[i - 1] >= x_max) break;
        const double x1 = std::min(x[i], x_max);
        double y1 = y[i];
        if (x[i] > x_max && x[i] > x[i - 1]) y1 = y[i - 1] + (y[i] - y[i - 1]) * (x_max - x[i - 1]) / (x[i] - x[i - 1]);
        area += 0.5 * (y[i - 1] + y1) * (x1 - x[i - 1]);
    }
    return area;
}

/// Threshold sweep in descending score order. A point is recorded after all
/// pixels with score ≥ threshold are counted as detections. The curve runs
/// from (0,0) to (1,1).
inline ProCurve pro_curve(std::span<const Plane> maps, std::span<const BinaryMask> masks, const ProOptions& opt = {}) {
    detail::require_aligned(maps, masks);
    struct Px {
        double score;
        std::int64_t region; // -1 for normal pixels
    };
    std::vector<Px> px;
    std::vector<std::size_t> region_size;
    std::size_t negatives = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const Components cc = connected_components(masks[i]);
        const auto base = static_cast<std::int64_t>(region_size.size());
        region_size.insert(region_size.end(), cc.sizes.begin(), cc.sizes.end());
        for (std::size_t k = 0; k < maps[i].size(); ++k) {
            const std::int64_t r = cc.label[k] < 0 ? -1 : base + cc.label[k];
            if (r < 0) ++negatives;
            px.push_back({maps[i].data[k], r});
        }
    }
    require(!region_size.empty(), ErrorKind::undefined_metric, "pro needs at least one anomalous region");
    require(negatives > 0, ErrorKind::undefined_metric, "pro needs normal pixels to measure false positives");
    std::sort(px.begin(), px.end(), [](const Px& a, const Px& b) { return a.score > b.score; });

    // Thresholds at which to record a point (descending).
    std::vector<double> thresholds;
    if (px.size() <= opt.exact_pixel_limit) {
        for (std::size_t i = 0; i < px.size(); ++i)
            if (i == 0 || px[i].score != px[i - 1].score) thresholds.push_back(px[i].score);
    } else {
        const std::size_t q = std::max<std::size_t>(opt.quantile_thresholds, 2);
        for (std::size_t k = 0; k < q; ++k) {
            const double t = px[(px.size() - 1) * k / (q - 1)].score;
            if (thresholds.empty() || t != thresholds.back()) thresholds.push_back(t);
        }
    }

    const double inv_regions = 1.0 / static_cast<double>(region_size.size());
    ProCurve c;
    c.fpr.push_back(0.0);
    c.pro.push_back(0.0);
    std::size_t fp = 0, i = 0;
    double overlap = 0.0;
    for (double t : thresholds) {
        while (i < px.size() && px[i].score >= t) {
            if (px[i].region < 0)
                ++fp;
            else
                overlap += inv_regions / static_cast<double>(region_size[static_cast<std::size_t>(px[i].region)]);
            ++i;
        }
        c.fpr.push_back(static_cast<double>(fp) / static_cast<double>(negatives));
        c.pro.push_back(overlap);
    }
    c.fpr.push_back(1.0);
    c.pro.push_back(1.0);
    return c;
}

/// Normalized area under the PRO curve up to `fpr_limit`.
inline double pro(std::span<const Plane> maps, std::span<const BinaryMask> masks, const ProOptions& opt = {}) {
    require(opt.fpr_limit > 0.0 && opt.fpr_limit <= 1.0, ErrorKind::config, "fpr_limit must lie in (0,1]");
    const ProCurve c = pro_curve(maps, masks, opt);
    return trapezoid_to(c.fpr, c.pro, opt.fpr_limit) / opt.fpr_limit;
}

// ---------------------------------------------------------------------------
// Evaluation over scored samples

struct MetricTriple {
    double i_auc = 0.0;
    double p_auc = 0.0;
    double pro = 0.0;
};

struct EvalResult {
    std::map<std::string, MetricTriple> per_category;
    MetricTriple mean;
};

inline MetricTriple evaluate_samples(std::span<const ScoredSample> samples, const ProOptions& opt = {}) {
    std::vector<double> img_scores;
    std::vector<std::uint8_t> img_labels;
    std::vector<Plane> maps;
    std::vector<BinaryMask> masks;
    for (const auto& s : samples) {
        img_scores.push_back(s.map.image_score);
        img_labels.push_back(s.label == Label::anomalous ? 1 : 0);
        maps.push_back(s.map.pixel_scores);
        masks.push_back(s.gt_mask ? *s.gt_mask : BinaryMask(s.map.pixel_scores.height, s.map.pixel_scores.width));
    }
    MetricTriple t;
    t.i_auc = auroc(img_scores, img_labels);
    t.p_auc = pixel_auroc(maps, masks);
    t.pro = pro(maps, masks, opt);
    return t;
}

/// Metrics per category plus their unweighted mean.
inline EvalResult evaluate(const std::vector<ScoredSample>& samples, const ProOptions& opt = {}) {
    std::map<std::string, std::vector<ScoredSample>> by_cat;
    for (const auto& s : samples) by_cat[s.category].push_back(s);
    require(!by_cat.empty(), ErrorKind::undefined_metric, "no scored samples to evaluate");
    EvalResult r;
    for (const auto& [cat, rows] : by_cat) {
        const MetricTriple t = evaluate_samples(rows, opt);
        r.per_category[cat] = t;
        r.mean.i_auc += t.i_auc / by_cat.size();
        r.mean.p_auc += t.p_auc / by_cat.size();
        r.mean.pro += t.pro / by_cat.size();
    }
    return r;
}

inline void write_eval_csv(const std::filesystem::path& path, const EvalResult& r) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << "category,i_auc,p_auc,pro\n";
    char buf[160];
    auto row = [&](const std::string& name, const MetricTriple& t) {
        std::snprintf(buf, sizeof buf, ",%.10f,%.10f,%.10f", t.i_auc, t.p_auc, t.pro);
        out << name << buf << '\n';
    };
    for (const auto& [cat, t] : r.per_category) row(cat, t);
    row("mean", r.mean);
}

/// Text table, one row per category: "I-AUC / P-AUC / PRO" in percent.
inline std::string format_eval_table(const EvalResult& r) {
    std::size_t w = 8;
    for (const auto& [cat, t] : r.per_category) w = std::max(w, cat.size());
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s  %s\n", static_cast<int>(w), "Category", "I-AUC / P-AUC / PRO (%)");
    out += buf;
    auto row = [&](const std::string& name, const MetricTriple& t) {
        std::snprintf(buf, sizeof buf, "%-*s  %5.1f / %5.1f / %5.1f\n", static_cast<int>(w), name.c_str(), 100 * t.i_auc,
                      100 * t.p_auc, 100 * t.pro);
        out += buf;
    };
    for (const auto& [cat, t] : r.per_category) row(cat, t);
    row("Mean", r.mean);
    return out;
}

} // namespace agp

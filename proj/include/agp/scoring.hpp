#pragma once

#include <agp/data.hpp>
#include <agp/decoder.hpp>
#include <agp/encoder.hpp>
#include <agp/error.hpp>
#include <agp/image_io.hpp>
#include <agp/tensor.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace agp {

struct ScoringConfig {
    int pool_window = 3;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScoringConfig, pool_window)

struct AnomalyMap {
    std::string sample_id;
    Plane feature_scores; // M at feature resolution
    Plane pixel_scores;   // M upsampled to the image size
    double image_score = 0.0;
};

/// M(h,w) = ‖F(h,w) − F̂(h,w)‖₂ over channels.
inline Plane reconstruction_error(const FeatureMap& input, const FeatureMap& reconstructed) {
    require_same_shape(input, reconstructed, "reconstruction_error");
    Plane m(input.height, input.width);
    const Eigen::VectorXd norms = (input.tokens - reconstructed.tokens).rowwise().norm();
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = norms(static_cast<Eigen::Index>(i));
    return m;
}

/// k×k average pool, stride 1, same-size output. Out-of-range taps are
/// skipped and the divisor counts only in-range taps.
inline Plane average_pool(const Plane& m, int window) {
    require(window >= 1 && window % 2 == 1, ErrorKind::config, "pool window must be a positive odd number");
    const int r = window / 2;
    Plane out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            double sum = 0.0;
            int n = 0;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= m.height || xx < 0 || xx >= m.width) continue;
                    sum += m.at(yy, xx);
                    ++n;
                }
            out.data[static_cast<std::size_t>(y) * m.width + x] = sum / n;
        }
    return out;
}

inline double image_score(const Plane& m, const ScoringConfig& cfg) {
    const Plane pooled = average_pool(m, cfg.pool_window);
    return pooled.data.empty() ? 0.0 : *std::max_element(pooled.data.begin(), pooled.data.end());
}

/// Builds the map from a decoder input/output pair.
inline AnomalyMap anomaly_map(const FeatureMap& input, const FeatureMap& reconstructed, int image_h, int image_w,
                              const ScoringConfig& cfg, std::string id = {}) {
    AnomalyMap a;
    a.sample_id = std::move(id);
    a.feature_scores = reconstruction_error(input, reconstructed);
    a.pixel_scores = resize_bilinear(a.feature_scores, image_h, image_w);
    a.image_score = image_score(a.feature_scores, cfg);
    return a;
}

/// Trained model used at inference: the frozen encoder and the main decoder
/// branch (no perturbation, no teacher).
struct InferenceModel {
    const VitEncoder* encoder = nullptr;
    const DecoderParams* decoder = nullptr;
    DecoderConfig decoder_config;
};

inline AnomalyMap score(const Image& image, const InferenceModel& model, const ScoringConfig& cfg = {},
                        std::string id = {}) {
    require(model.encoder && model.decoder, ErrorKind::usage, "scoring needs a loaded encoder and decoder");
    check_decoder_params(*model.decoder, model.decoder_config);
    const CleanFeatures f = fuse_features(model.encoder->extract(image));
    const DecoderOutput out = decode(f, *model.decoder, model.decoder_config);
    return anomaly_map(f, out.reconstructed, image.height, image.width, cfg, std::move(id));
}

struct ScoredSample {
    std::string sample_id;
    std::string category;
    Label label = Label::normal;
    AnomalyMap map;
    std::optional<BinaryMask> gt_mask; // at the scored resolution
};

/// Scores the test split (optionally one category) in manifest order.
inline std::vector<ScoredSample> score_dataset(const DatasetManifest& manifest, const InferenceModel& model,
                                               const ScoringConfig& cfg = {}, const std::string& category = {}) {
    require(model.encoder != nullptr, ErrorKind::usage, "scoring needs a loaded encoder");
    const int size = model.encoder->config().image_size;
    std::vector<ScoredSample> out;
    const auto idx = category.empty() ? manifest.indices(Split::test) : manifest.indices(Split::test, category);
    for (std::size_t i : idx) {
        ImageSample s = manifest.load(i, size);
        ScoredSample r;
        r.sample_id = s.id;
        r.category = s.category;
        r.label = s.label;
        r.map = score(s.pixels, model, cfg, s.id);
        r.gt_mask = std::move(s.gt_mask);
        out.push_back(std::move(r));
    }
    return out;
}

inline void write_score_table(const std::filesystem::path& path, const std::vector<ScoredSample>& rows) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << "sample_id,category,label,image_score\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g", r.map.image_score);
        out << r.sample_id << ',' << r.category << ',' << to_string(r.label) << ',' << buf << '\n';
    }
    require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Heatmaps
//
// Raw map file (`.npyish`), little-endian:
//   bytes 0..7   magic "AGPRAW1\0"
//   u32          dtype code (1 = float64)
//   u32          height
//   u32          width
//   f64[H*W]     row-major values

inline constexpr std::array<char, 8> kRawMagic = {'A', 'G', 'P', 'R', 'A', 'W', '1', '\0'};
inline constexpr std::uint32_t kRawFloat64 = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4] = {};
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

} // namespace detail

inline void write_raw_map(const std::filesystem::path& path, const Plane& map) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out.write(kRawMagic.data(), kRawMagic.size());
    detail::put_u32(out, kRawFloat64);
    detail::put_u32(out, static_cast<std::uint32_t>(map.height));
    detail::put_u32(out, static_cast<std::uint32_t>(map.width));
    for (double v : map.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 8);
    }
    require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

inline Plane read_raw_map(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    require(in && magic == kRawMagic, ErrorKind::load, path.string() + ": not a raw map file");
    require(detail::get_u32(in) == kRawFloat64, ErrorKind::load, path.string() + ": unsupported dtype");
    const auto h = detail::get_u32(in), w = detail::get_u32(in);
    require(static_cast<bool>(in), ErrorKind::load, path.string() + ": truncated header");
    Plane p(static_cast<int>(h), static_cast<int>(w));
    for (double& v : p.data) {
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        std::memcpy(&v, &bits, 8);
    }
    require(static_cast<bool>(in), ErrorKind::load, path.string() + ": truncated data");
    return p;
}

/// Per-image min-max to 8-bit grayscale (a constant map becomes black).
inline void write_heatmap_png(const std::filesystem::path& path, const Plane& map) {
    Raster8 r;
    r.height = map.height;
    r.width = map.width;
    r.channels = 1;
    r.data.resize(map.size());
    const auto [lo, hi] = std::minmax_element(map.data.begin(), map.data.end());
    const double span = map.data.empty() ? 0.0 : *hi - *lo;
    for (std::size_t i = 0; i < map.size(); ++i) r.data[i] = span > 0 ? to_byte((map.data[i] - *lo) / span) : 0;
    write_png8(path, r);
}

/// Writes `<id>_amap.png` and `<id>_amap.npyish` into `dir`.
inline void write_heatmap(const std::filesystem::path& dir, const AnomalyMap& a) {
    std::string stem = a.sample_id;
    std::replace(stem.begin(), stem.end(), '/', '_');
    write_heatmap_png(dir / (stem + "_amap.png"), a.pixel_scores);
    write_raw_map(dir / (stem + "_amap.npyish"), a.pixel_scores);
}

} // namespace agp

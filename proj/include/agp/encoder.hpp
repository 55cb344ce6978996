#pragma once

#include <agp/archive.hpp>
#include <agp/error.hpp>
#include <agp/nn.hpp>
#include <agp/random.hpp>
#include <agp/tensor.hpp>

#include <json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <span>
#include <utility>
#include <string>
#include <vector>

namespace agp {

enum class EncoderVariant { toy_vit, external_pretrained };

NLOHMANN_JSON_SERIALIZE_ENUM(EncoderVariant, {{EncoderVariant::toy_vit, "toy_vit"},
                                              {EncoderVariant::external_pretrained, "external_pretrained"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AttentionReduction, {{AttentionReduction::cls_to_patch, "cls_to_patch"},
                                                  {AttentionReduction::mean_received, "mean_received"}})

struct EncoderConfig {
    EncoderVariant variant = EncoderVariant::toy_vit;
    int image_size = 64;
    int patch_size = 8;
    int depth = 4;
    int dim = 32;
    int heads = 4;
    double mlp_ratio = 4.0;
    /// 0-indexed block outputs to expose, strictly increasing.
    std::vector<int> layer_ids = {2, 5, 8, 11};
    std::string weights_path;
    std::uint64_t seed = 0;
    AttentionReduction attention_reduction = AttentionReduction::cls_to_patch;

    int grid() const { return image_size / patch_size; }
    int hidden() const { return static_cast<int>(std::lround(dim * mlp_ratio)); }

    void validate() const {
        require(patch_size > 0 && image_size > 0, ErrorKind::config, "encoder sizes must be positive");
        require(image_size % patch_size == 0, ErrorKind::config,
                "image size " + std::to_string(image_size) + " not divisible by patch size " + std::to_string(patch_size));
        require(depth >= 1, ErrorKind::config, "encoder depth must be >= 1");
        require(heads >= 1 && dim % heads == 0, ErrorKind::config,
                "encoder dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
        require(!layer_ids.empty(), ErrorKind::config, "encoder needs at least one layer id");
        for (std::size_t i = 0; i < layer_ids.size(); ++i) {
            require(layer_ids[i] >= 0 && layer_ids[i] < depth, ErrorKind::config,
                    "layer id " + std::to_string(layer_ids[i]) + " outside encoder depth " + std::to_string(depth));
            require(i == 0 || layer_ids[i] > layer_ids[i - 1], ErrorKind::config, "layer ids must be strictly increasing");
        }
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderConfig, variant, image_size, patch_size, depth, dim, heads,
                                                mlp_ratio, layer_ids, weights_path, seed, attention_reduction)

/// Per-layer outputs of one image: patch-token features F_l (H_f×W_f×C_f)
/// and reduced attention maps A_l (H_f×W_f).
struct FeatureStack {
    std::vector<FeatureMap> layer_features;
    std::vector<Plane> layer_attention;
    std::vector<int> layer_ids;
};

/// Fused reconstruction target: the sum of per-layer normalized features.
using CleanFeatures = FeatureMap;

struct EncoderParams {
    Matrix patch_weight; // (P·P·3)×D, rows ordered (py, px, channel)
    Matrix patch_bias;   // 1×D
    Matrix cls_token;    // 1×D
    Matrix pos_embed;    // (1 + N)×D, class token first
    std::vector<nn::BlockParams> blocks;

    template <class Self, class Fn>
    static void each(Self& self, const std::string& prefix, Fn&& fn) {
        fn(prefix + "patch_embed.weight", self.patch_weight);
        fn(prefix + "patch_embed.bias", self.patch_bias);
        fn(prefix + "cls_token", self.cls_token);
        fn(prefix + "pos_embed", self.pos_embed);
        for (std::size_t i = 0; i < self.blocks.size(); ++i)
            nn::BlockParams::each(self.blocks[i], prefix + "blocks." + std::to_string(i) + ".", fn);
    }
};

inline EncoderParams make_encoder_params(const EncoderConfig& cfg) {
    EncoderParams p;
    const int patch_len = cfg.patch_size * cfg.patch_size * 3;
    const int n = cfg.grid() * cfg.grid();
    p.patch_weight = Matrix::Zero(patch_len, cfg.dim);
    p.patch_bias = Matrix::Zero(1, cfg.dim);
    p.cls_token = Matrix::Zero(1, cfg.dim);
    p.pos_embed = Matrix::Zero(n + 1, cfg.dim);
    for (int i = 0; i < cfg.depth; ++i) p.blocks.push_back(nn::make_block(cfg.dim, cfg.hidden()));
    return p;
}

/// Frozen ViT feature extractor. Every method is const: the weights cannot
/// change after construction, and concurrent `extract` calls are safe.
class VitEncoder {
public:
    VitEncoder(EncoderConfig cfg, EncoderParams params) : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
        const EncoderParams expected = make_encoder_params(cfg_);
        std::vector<std::string> bad;
        auto want = named_arrays(expected);
        auto have = named_arrays(std::as_const(params_));
        if (want.size() != have.size()) fail(ErrorKind::load, "encoder parameter count does not match architecture");
        for (std::size_t i = 0; i < want.size(); ++i)
            if (want[i].second->rows() != have[i].second->rows() || want[i].second->cols() != have[i].second->cols())
                bad.push_back(want[i].first);
        if (!bad.empty()) {
            std::string msg = "encoder parameter shape mismatch:";
            for (const auto& b : bad) msg += " " + b;
            fail(ErrorKind::load, msg);
        }
    }

    const EncoderConfig& config() const { return cfg_; }
    const EncoderParams& params() const { return params_; }
    std::uint64_t hash() const { return parameter_hash(params_); }

    /// Overrides which layers `extract` exposes (the weights are unaffected).
    VitEncoder with_layers(std::vector<int> layer_ids) const {
        EncoderConfig c = cfg_;
        c.layer_ids = std::move(layer_ids);
        return VitEncoder(c, params_);
    }

    FeatureStack extract(const Image& image) const {
        require(image.channels == 3, ErrorKind::shape, "encoder expects RGB input");
        require(image.height % cfg_.patch_size == 0 && image.width % cfg_.patch_size == 0, ErrorKind::shape,
                "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " not divisible by patch size " + std::to_string(cfg_.patch_size));
        require(image.height == cfg_.image_size && image.width == cfg_.image_size, ErrorKind::shape,
                "encoder built for " + std::to_string(cfg_.image_size) + "px input, got " +
                    std::to_string(image.height) + "x" + std::to_string(image.width));
        const int g = cfg_.grid();
        const int p = cfg_.patch_size;
        const int n = g * g;

        Matrix patches(n, p * p * 3);
        static constexpr std::array<double, 3> kMean = {0.485, 0.456, 0.406};
        static constexpr std::array<double, 3> kStd = {0.229, 0.224, 0.225};
        const bool imagenet = cfg_.variant == EncoderVariant::external_pretrained;
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        for (int c = 0; c < 3; ++c) {
                            double v = image.at(gy * p + py, gx * p + px, c);
                            if (imagenet) v = (v - kMean[c]) / kStd[c];
                            patches(gy * g + gx, (py * p + px) * 3 + c) = v;
                        }

        Matrix x(n + 1, cfg_.dim);
        x.row(0) = params_.cls_token.row(0);
        x.bottomRows(n) = nn::linear(patches, params_.patch_weight, params_.patch_bias);
        x += params_.pos_embed;

        FeatureStack out;
        out.layer_ids = cfg_.layer_ids;
        std::vector<Matrix> probs;
        std::size_t next = 0;
        for (int l = 0; l <= cfg_.layer_ids.back(); ++l) {
            x = nn::block_forward(params_.blocks[l], x, cfg_.heads, probs);
            if (next < cfg_.layer_ids.size() && cfg_.layer_ids[next] == l) {
                out.layer_features.emplace_back(g, g, Matrix(x.bottomRows(n)));
                out.layer_attention.push_back(nn::reduce_attention(probs, cfg_.attention_reduction, true, g, g));
                ++next;
            }
        }
        return out;
    }

    std::vector<FeatureStack> extract(std::span<const Image> batch) const {
        std::vector<FeatureStack> out;
        out.reserve(batch.size());
        for (const auto& img : batch) out.push_back(extract(img));
        return out;
    }

    void write(Archive& a, const std::string& prefix = "encoder/") const {
        a.header["encoder"] = architecture_json(cfg_);
        write_params(a, prefix, params_);
    }

    void save(const std::filesystem::path& path) const {
        Archive a;
        write(a);
        a.save(path);
    }

    static nlohmann::json architecture_json(const EncoderConfig& c) {
        return {{"variant", c.variant}, {"depth", c.depth},           {"dim", c.dim},
                {"heads", c.heads},     {"patch_size", c.patch_size}, {"image_size", c.image_size},
                {"mlp_ratio", c.mlp_ratio}};
    }

    /// Rebuilds an encoder from an archive. `cfg` supplies layer selection and
    /// attention reduction; architecture fields must agree with the header.
    static VitEncoder read(const Archive& a, EncoderConfig cfg, const std::string& prefix = "encoder/") {
        require(a.header.contains("encoder"), ErrorKind::load, "archive has no encoder header");
        const auto& h = a.header["encoder"];
        std::vector<std::string> bad;
        auto check = [&](const char* key, auto expected) {
            using T = decltype(expected);
            if (!h.contains(key) || h[key].get<T>() != expected) bad.push_back(key);
        };
        check("depth", cfg.depth);
        check("dim", cfg.dim);
        check("heads", cfg.heads);
        check("patch_size", cfg.patch_size);
        check("image_size", cfg.image_size);
        if (!bad.empty()) {
            std::string msg = "encoder header does not match configuration:";
            for (const auto& b : bad) msg += " " + b;
            fail(ErrorKind::load, msg);
        }
        if (h.contains("mlp_ratio")) cfg.mlp_ratio = h["mlp_ratio"].get<double>();
        cfg.validate();
        EncoderParams p = make_encoder_params(cfg);
        read_params(a, prefix, p);
        return VitEncoder(cfg, std::move(p));
    }

    /// Reads the architecture from the archive header and the selection
    /// fields from `cfg`.
    static VitEncoder read_with_header(const Archive& a, EncoderConfig cfg, const std::string& prefix = "encoder/") {
        require(a.header.contains("encoder"), ErrorKind::load, "archive has no encoder header");
        const auto& h = a.header["encoder"];
        try {
            cfg.variant = h.at("variant").get<EncoderVariant>();
            cfg.depth = h.at("depth").get<int>();
            cfg.dim = h.at("dim").get<int>();
            cfg.heads = h.at("heads").get<int>();
            cfg.patch_size = h.at("patch_size").get<int>();
            cfg.image_size = h.at("image_size").get<int>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::load, std::string("bad encoder header: ") + e.what());
        }
        return read(a, cfg, prefix);
    }

private:
    EncoderConfig cfg_;
    EncoderParams params_;
};

/// Small seeded ViT for desk-scale runs: N(0, 1/fan_in) weights, unit-normal
/// class token, small random position embeddings.
inline VitEncoder build_toy_encoder(std::uint64_t seed, int depth, int dim, int heads, int patch_size,
                                    int image_size = 64, std::vector<int> layer_ids = {}) {
    require(heads >= 1 && dim % heads == 0, ErrorKind::config,
            "encoder dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    EncoderConfig cfg;
    cfg.variant = EncoderVariant::toy_vit;
    cfg.depth = depth;
    cfg.dim = dim;
    cfg.heads = heads;
    cfg.patch_size = patch_size;
    cfg.image_size = image_size;
    cfg.seed = seed;
    if (layer_ids.empty())
        for (int i = 0; i < depth; ++i) layer_ids.push_back(i);
    cfg.layer_ids = std::move(layer_ids);
    cfg.validate();

    EncoderParams p = make_encoder_params(cfg);
    Rng rng(derive_seed(seed, {0xe1u}));
    auto fill = [&](Matrix& m, double stddev) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng, 0.0, stddev);
    };
    fill(p.patch_weight, 1.0 / std::sqrt(static_cast<double>(p.patch_weight.rows())));
    fill(p.cls_token, 1.0);
    fill(p.pos_embed, 0.02);
    for (auto& b : p.blocks)
        nn::fill_block_weights(b, [&](int fan_in) { return normal(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(fan_in))); });
    return VitEncoder(cfg, std::move(p));
}

/// Loads a frozen encoder from an archive produced by `VitEncoder::save` or
/// by tools/convert_vit_checkpoint.py. Nothing is returned unless every
/// array is present with the declared shape.
inline VitEncoder load_external_weights(const std::filesystem::path& weights_path, const EncoderConfig& cfg) {
    const Archive a = Archive::load(weights_path);
    return VitEncoder::read(a, cfg);
}

/// Sum over layers of per-position, affine-free layer normalization.
inline CleanFeatures fuse_features(const FeatureStack& stack) {
    require(!stack.layer_features.empty(), ErrorKind::config, "cannot fuse an empty feature stack");
    const FeatureMap& first = stack.layer_features.front();
    CleanFeatures out(first.height, first.width, first.channels());
    for (const auto& f : stack.layer_features) {
        require_same_shape(first, f, "fuse_features");
        out.tokens += nn::layer_norm(f.tokens, nullptr, nullptr);
    }
    return out;
}

} // namespace agp

#pragma once

#include <agp/error.hpp>
#include <agp/nn.hpp>
#include <agp/random.hpp>
#include <agp/tensor.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace agp {

struct DecoderConfig {
    int depth = 4;
    int dim = 32;
    int heads = 4;
    double mlp_ratio = 4.0;
    std::uint64_t seed = 0;
    bool position_encoding = true;
    AttentionReduction attention_reduction = AttentionReduction::mean_received;
    double init_std = 0.02;

    int hidden() const { return static_cast<int>(std::lround(dim * mlp_ratio)); }

    void validate() const {
        require(depth >= 1, ErrorKind::config, "decoder depth must be >= 1");
        require(heads >= 1 && dim > 0 && dim % heads == 0, ErrorKind::config,
                "decoder dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
        require(!position_encoding || dim % 4 == 0, ErrorKind::config,
                "decoder position encoding needs dim divisible by 4");
        require(attention_reduction == AttentionReduction::mean_received, ErrorKind::config,
                "decoder has no class token; attention reduction must be mean_received");
        require(mlp_ratio > 0.0, ErrorKind::config, "mlp_ratio must be positive");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DecoderConfig, depth, dim, heads, mlp_ratio, seed, position_encoding,
                                                attention_reduction, init_std)

/// Plain pre-norm transformer over spatial tokens, followed by a final norm
/// and a linear head whose output is added back onto the input features.
struct DecoderParams {
    std::vector<nn::BlockParams> blocks;
    Matrix norm_weight, norm_bias;
    Matrix head_weight, head_bias;

    template <class Self, class Fn>
    static void each(Self& self, const std::string& prefix, Fn&& fn) {
        for (std::size_t i = 0; i < self.blocks.size(); ++i)
            nn::BlockParams::each(self.blocks[i], prefix + "blocks." + std::to_string(i) + ".", fn);
        fn(prefix + "norm.weight", self.norm_weight);
        fn(prefix + "norm.bias", self.norm_bias);
        fn(prefix + "head.weight", self.head_weight);
        fn(prefix + "head.bias", self.head_bias);
    }
};

/// Correctly shaped parameters with neutral values (unit norms, zero weights).
inline DecoderParams make_decoder_params(const DecoderConfig& cfg) {
    cfg.validate();
    DecoderParams p;
    for (int i = 0; i < cfg.depth; ++i) p.blocks.push_back(nn::make_block(cfg.dim, cfg.hidden()));
    p.norm_weight = Matrix::Ones(1, cfg.dim);
    p.norm_bias = Matrix::Zero(1, cfg.dim);
    p.head_weight = Matrix::Zero(cfg.dim, cfg.dim);
    p.head_bias = Matrix::Zero(1, cfg.dim);
    return p;
}

/// Seeded initialization: truncated-normal block weights, zero biases, and a
/// zero head so an untrained decoder returns its input unchanged.
inline DecoderParams init_params(const DecoderConfig& cfg) {
    DecoderParams p = make_decoder_params(cfg);
    Rng rng(derive_seed(cfg.seed, {0xdecu}));
    for (auto& b : p.blocks) nn::fill_block_weights(b, [&](int) { return truncated_normal(rng, cfg.init_std); });
    return p;
}

struct DecoderOutput {
    FeatureMap reconstructed;
    std::vector<Plane> attention; // one per block, mean attention received per token
};

/// Activations kept for the backward pass.
struct DecoderTape {
    std::vector<nn::BlockCache> blocks;
    nn::LayerNormCache norm;
    Matrix normed;
};

inline void check_decoder_params(const DecoderParams& p, const DecoderConfig& cfg) {
    require(static_cast<int>(p.blocks.size()) == cfg.depth, ErrorKind::shape, "decoder params have wrong depth");
    require(p.head_weight.rows() == cfg.dim && p.head_weight.cols() == cfg.dim, ErrorKind::shape,
            "decoder params have wrong width");
    for (const auto& b : p.blocks)
        require(b.dim() == cfg.dim && b.hidden() == cfg.hidden(), ErrorKind::shape, "decoder block has wrong shape");
}

inline Matrix decoder_position_encoding(int h, int w, const DecoderConfig& cfg) {
    if (!cfg.position_encoding) return Matrix::Zero(static_cast<Eigen::Index>(h) * w, cfg.dim);
    return nn::sincos_position_encoding(h, w, cfg.dim);
}

/// Decodes with an explicit per-token position encoding (rows aligned with
/// the feature tokens).
inline DecoderOutput decode_with_positions(const FeatureMap& features, const Matrix& positions, const DecoderParams& params,
                                           const DecoderConfig& cfg, DecoderTape* tape = nullptr) {
    require(features.channels() == cfg.dim, ErrorKind::shape,
            "feature channels " + std::to_string(features.channels()) + " != decoder dim " + std::to_string(cfg.dim));
    require(positions.rows() == features.tokens.rows() && positions.cols() == cfg.dim, ErrorKind::shape,
            "position encoding does not match tokens");
    check_decoder_params(params, cfg);
    DecoderOutput out;
    Matrix x = features.tokens + positions;
    if (tape) tape->blocks.resize(params.blocks.size());
    std::vector<Matrix> probs;
    for (std::size_t l = 0; l < params.blocks.size(); ++l) {
        x = nn::block_forward(params.blocks[l], x, cfg.heads, probs, tape ? &tape->blocks[l] : nullptr);
        out.attention.push_back(nn::reduce_attention(probs, cfg.attention_reduction, false, features.height, features.width));
    }
    Matrix normed = nn::layer_norm(x, &params.norm_weight, &params.norm_bias, tape ? &tape->norm : nullptr);
    out.reconstructed = FeatureMap(features.height, features.width,
                                   Matrix(features.tokens + nn::linear(normed, params.head_weight, params.head_bias)));
    if (tape) tape->normed = std::move(normed);
    return out;
}

inline DecoderOutput decode(const FeatureMap& features, const DecoderParams& params, const DecoderConfig& cfg,
                            DecoderTape* tape = nullptr) {
    return decode_with_positions(features, decoder_position_encoding(features.height, features.width, cfg), params, cfg,
                                 tape);
}

inline std::vector<DecoderOutput> decode(std::span<const FeatureMap> batch, const DecoderParams& params,
                                         const DecoderConfig& cfg) {
    std::vector<DecoderOutput> out;
    out.reserve(batch.size());
    for (const auto& f : batch) out.push_back(decode(f, params, cfg));
    return out;
}

/// Accumulates dL/dθ into `grads` given dL/d(reconstructed). The input
/// features are treated as constants.
inline void decode_backward(const DecoderTape& tape, const Matrix& d_reconstructed, const DecoderParams& params,
                            const DecoderConfig& cfg, DecoderParams& grads) {
    grads.head_weight.noalias() += tape.normed.transpose() * d_reconstructed;
    grads.head_bias.row(0) += d_reconstructed.colwise().sum();
    Matrix dnormed = d_reconstructed * params.head_weight.transpose();
    Matrix dx = nn::layer_norm_backward(dnormed, tape.norm, params.norm_weight, grads.norm_weight, grads.norm_bias);
    for (std::size_t l = params.blocks.size(); l-- > 0;)
        dx = nn::block_backward(params.blocks[l], tape.blocks[l], dx, cfg.heads, grads.blocks[l]);
}

} // namespace agp

#pragma once

// Transformer building blocks shared by the frozen encoder and the trainable
// decoder. Activations are token matrices (N×D, one row per token); weights
// are stored input-major (y = x·W + b).

#include <agp/error.hpp>
#include <agp/random.hpp>
#include <agp/tensor.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace agp {

enum class AttentionReduction { cls_to_patch, mean_received };

inline const char* to_string(AttentionReduction r) {
    return r == AttentionReduction::cls_to_patch ? "cls_to_patch" : "mean_received";
}

inline AttentionReduction attention_reduction_from_string(const std::string& s) {
    if (s == "cls_to_patch") return AttentionReduction::cls_to_patch;
    if (s == "mean_received") return AttentionReduction::mean_received;
    fail(ErrorKind::config, "unknown attention reduction '" + s + "'");
}

namespace nn {

inline constexpr double kLayerNormEps = 1e-6;

struct LayerNormCache {
    Matrix normalized;
    Eigen::VectorXd inv_std;
};

/// Per-row normalization over the channel dimension. `gamma`/`beta` may be
/// null for the affine-free variant.
inline Matrix layer_norm(const Matrix& x, const Matrix* gamma, const Matrix* beta, LayerNormCache* cache = nullptr,
                         double eps = kLayerNormEps) {
    const Eigen::Index d = x.cols();
    Matrix y(x.rows(), d);
    Eigen::VectorXd inv_std(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).mean();
        const double var = (x.row(i).array() - mean).square().sum() / static_cast<double>(d);
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        y.row(i) = (x.row(i).array() - mean) * inv_std(i);
    }
    if (cache) {
        cache->normalized = y;
        cache->inv_std = std::move(inv_std);
    }
    if (gamma) y.array().rowwise() *= gamma->row(0).array();
    if (beta) y.array().rowwise() += beta->row(0).array();
    return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& c, const Matrix& gamma, Matrix& dgamma,
                                  Matrix& dbeta) {
    dgamma.row(0) += (dy.array() * c.normalized.array()).colwise().sum().matrix();
    dbeta.row(0) += dy.colwise().sum();
    const Matrix dxhat = (dy.array().rowwise() * gamma.row(0).array()).matrix();
    const double d = static_cast<double>(dy.cols());
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double mean_dxhat = dxhat.row(i).sum() / d;
        const double mean_dxhat_xhat = dxhat.row(i).dot(c.normalized.row(i)) / d;
        dx.row(i) = c.inv_std(i) *
                    (dxhat.row(i).array() - mean_dxhat - c.normalized.row(i).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
}

inline Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }

inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865476)) + x * 0.3989422804014327 * std::exp(-0.5 * x * x);
}

inline void softmax_rows(Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double mx = m.row(i).maxCoeff();
        m.row(i) = (m.row(i).array() - mx).exp().matrix();
        m.row(i) /= m.row(i).sum();
    }
}

/// Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(·)).
struct BlockParams {
    Matrix norm1_weight, norm1_bias;
    Matrix qkv_weight, qkv_bias;
    Matrix proj_weight, proj_bias;
    Matrix norm2_weight, norm2_bias;
    Matrix fc1_weight, fc1_bias;
    Matrix fc2_weight, fc2_bias;

    template <class Self, class Fn>
    static void each(Self& self, const std::string& prefix, Fn&& fn) {
        fn(prefix + "norm1.weight", self.norm1_weight);
        fn(prefix + "norm1.bias", self.norm1_bias);
        fn(prefix + "attn.qkv.weight", self.qkv_weight);
        fn(prefix + "attn.qkv.bias", self.qkv_bias);
        fn(prefix + "attn.proj.weight", self.proj_weight);
        fn(prefix + "attn.proj.bias", self.proj_bias);
        fn(prefix + "norm2.weight", self.norm2_weight);
        fn(prefix + "norm2.bias", self.norm2_bias);
        fn(prefix + "mlp.fc1.weight", self.fc1_weight);
        fn(prefix + "mlp.fc1.bias", self.fc1_bias);
        fn(prefix + "mlp.fc2.weight", self.fc2_weight);
        fn(prefix + "mlp.fc2.bias", self.fc2_bias);
    }

    int dim() const { return static_cast<int>(qkv_weight.rows()); }
    int hidden() const { return static_cast<int>(fc1_weight.cols()); }
};

inline BlockParams make_block(int dim, int hidden) {
    BlockParams p;
    p.norm1_weight = Matrix::Ones(1, dim);
    p.norm1_bias = Matrix::Zero(1, dim);
    p.qkv_weight = Matrix::Zero(dim, 3 * dim);
    p.qkv_bias = Matrix::Zero(1, 3 * dim);
    p.proj_weight = Matrix::Zero(dim, dim);
    p.proj_bias = Matrix::Zero(1, dim);
    p.norm2_weight = Matrix::Ones(1, dim);
    p.norm2_bias = Matrix::Zero(1, dim);
    p.fc1_weight = Matrix::Zero(dim, hidden);
    p.fc1_bias = Matrix::Zero(1, hidden);
    p.fc2_weight = Matrix::Zero(hidden, dim);
    p.fc2_bias = Matrix::Zero(1, dim);
    return p;
}

/// Fills every weight matrix with draws from `sample`; biases and norm
/// parameters keep their neutral values.
inline void fill_block_weights(BlockParams& p, const std::function<double(int fan_in)>& sample) {
    for (Matrix* w : {&p.qkv_weight, &p.proj_weight, &p.fc1_weight, &p.fc2_weight}) {
        const int fan_in = static_cast<int>(w->rows());
        for (Eigen::Index i = 0; i < w->size(); ++i) w->data()[i] = sample(fan_in);
    }
}

struct BlockCache {
    Matrix input;
    LayerNormCache norm1;
    Matrix normed1;
    Matrix qkv;
    std::vector<Matrix> probs; // per head, N×N, rows sum to 1
    Matrix context;            // concatenated head outputs, N×D
    Matrix mid;                // residual stream after attention
    LayerNormCache norm2;
    Matrix normed2;
    Matrix hidden_pre;
    Matrix hidden_act;
};

/// Runs one block. Attention probabilities are always returned through
/// `probs` (resized to `heads` entries); `cache` is only filled when a
/// backward pass will follow.
inline Matrix block_forward(const BlockParams& p, const Matrix& x, int heads, std::vector<Matrix>& probs,
                            BlockCache* cache = nullptr) {
    const Eigen::Index n = x.rows();
    const int d = static_cast<int>(x.cols());
    require(d % heads == 0, ErrorKind::config, "dim not divisible by heads");
    const int dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    LayerNormCache ln1;
    Matrix h1 = layer_norm(x, &p.norm1_weight, &p.norm1_bias, cache ? &ln1 : nullptr);
    Matrix qkv = linear(h1, p.qkv_weight, p.qkv_bias);
    probs.resize(heads);
    Matrix context(n, d);
    for (int h = 0; h < heads; ++h) {
        const auto q = qkv.middleCols(h * dh, dh);
        const auto k = qkv.middleCols(d + h * dh, dh);
        const auto v = qkv.middleCols(2 * d + h * dh, dh);
        Matrix s = (q * k.transpose()) * scale;
        softmax_rows(s);
        context.middleCols(h * dh, dh) = s * v;
        probs[h] = std::move(s);
    }
    Matrix mid = x + linear(context, p.proj_weight, p.proj_bias);

    LayerNormCache ln2;
    Matrix h2 = layer_norm(mid, &p.norm2_weight, &p.norm2_bias, cache ? &ln2 : nullptr);
    Matrix pre = linear(h2, p.fc1_weight, p.fc1_bias);
    Matrix act = pre.unaryExpr([](double v) { return gelu(v); });
    Matrix out = mid + linear(act, p.fc2_weight, p.fc2_bias);

    if (cache) {
        cache->input = x;
        cache->norm1 = std::move(ln1);
        cache->normed1 = std::move(h1);
        cache->qkv = std::move(qkv);
        cache->probs = probs;
        cache->context = std::move(context);
        cache->mid = std::move(mid);
        cache->norm2 = std::move(ln2);
        cache->normed2 = std::move(h2);
        cache->hidden_pre = std::move(pre);
        cache->hidden_act = std::move(act);
    }
    return out;
}

/// Accumulates parameter gradients into `grad` and returns dL/dx.
inline Matrix block_backward(const BlockParams& p, const BlockCache& c, const Matrix& dout, int heads,
                             BlockParams& grad) {
    const int d = static_cast<int>(c.input.cols());
    const int dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP branch
    grad.fc2_weight.noalias() += c.hidden_act.transpose() * dout;
    grad.fc2_bias.row(0) += dout.colwise().sum();
    Matrix dact = dout * p.fc2_weight.transpose();
    Matrix dpre = dact.array() * c.hidden_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    grad.fc1_weight.noalias() += c.normed2.transpose() * dpre;
    grad.fc1_bias.row(0) += dpre.colwise().sum();
    Matrix dh2 = dpre * p.fc1_weight.transpose();
    Matrix dmid = dout + layer_norm_backward(dh2, c.norm2, p.norm2_weight, grad.norm2_weight, grad.norm2_bias);

    // Attention branch
    grad.proj_weight.noalias() += c.context.transpose() * dmid;
    grad.proj_bias.row(0) += dmid.colwise().sum();
    Matrix dcontext = dmid * p.proj_weight.transpose();
    Matrix dqkv(c.qkv.rows(), c.qkv.cols());
    for (int h = 0; h < heads; ++h) {
        const auto q = c.qkv.middleCols(h * dh, dh);
        const auto k = c.qkv.middleCols(d + h * dh, dh);
        const auto v = c.qkv.middleCols(2 * d + h * dh, dh);
        const Matrix& prob = c.probs[h];
        const auto dctx = dcontext.middleCols(h * dh, dh);
        Matrix dprob = dctx * v.transpose();
        dqkv.middleCols(2 * d + h * dh, dh) = prob.transpose() * dctx;
        Matrix ds(prob.rows(), prob.cols());
        for (Eigen::Index i = 0; i < prob.rows(); ++i) {
            const double dot = prob.row(i).dot(dprob.row(i));
            ds.row(i) = (prob.row(i).array() * (dprob.row(i).array() - dot)).matrix();
        }
        ds *= scale;
        dqkv.middleCols(h * dh, dh) = ds * k;
        dqkv.middleCols(d + h * dh, dh) = ds.transpose() * q;
    }
    grad.qkv_weight.noalias() += c.normed1.transpose() * dqkv;
    grad.qkv_bias.row(0) += dqkv.colwise().sum();
    Matrix dh1 = dqkv * p.qkv_weight.transpose();
    return dmid + layer_norm_backward(dh1, c.norm1, p.norm1_weight, grad.norm1_weight, grad.norm1_bias);
}

/// Collapses per-head attention matrices into one spatial map over the
/// `h×w` patch tokens. With a class token present it sits at index 0.
inline Plane reduce_attention(const std::vector<Matrix>& probs, AttentionReduction mode, bool has_cls, int h, int w) {
    require(!probs.empty(), ErrorKind::shape, "no attention heads to reduce");
    const int offset = has_cls ? 1 : 0;
    require(probs.front().cols() == h * w + offset, ErrorKind::shape, "attention size does not match spatial grid");
    Plane out(h, w);
    const double inv_heads = 1.0 / static_cast<double>(probs.size());
    if (mode == AttentionReduction::cls_to_patch) {
        require(has_cls, ErrorKind::config, "cls_to_patch reduction needs a class token");
        for (const auto& p : probs)
            for (int j = 0; j < h * w; ++j) out.data[j] += p(0, j + offset) * inv_heads;
    } else {
        for (const auto& p : probs) {
            const double inv_rows = 1.0 / static_cast<double>(p.rows());
            for (int j = 0; j < h * w; ++j) out.data[j] += p.col(j + offset).sum() * inv_rows * inv_heads;
        }
    }
    return out;
}

/// Fixed 2-D sinusoidal position encoding: the first half of the channels
/// encodes the row, the second half the column.
inline Matrix sincos_position_encoding(int h, int w, int dim) {
    require(dim % 4 == 0, ErrorKind::config, "sin-cos position encoding needs dim divisible by 4");
    Matrix pe(static_cast<Eigen::Index>(h) * w, dim);
    const int quarter = dim / 4;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Eigen::Index row = static_cast<Eigen::Index>(y) * w + x;
            for (int i = 0; i < quarter; ++i) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
                pe(row, i) = std::sin(y * omega);
                pe(row, quarter + i) = std::cos(y * omega);
                pe(row, 2 * quarter + i) = std::sin(x * omega);
                pe(row, 3 * quarter + i) = std::cos(x * omega);
            }
        }
    return pe;
}

} // namespace nn

/// Flat list of (name, array) references, the common currency for EMA,
/// optimizers, hashing and serialization.
template <class Params>
std::vector<std::pair<std::string, Matrix*>> named_arrays(Params& p) {
    std::vector<std::pair<std::string, Matrix*>> out;
    Params::each(p, "", [&](const std::string& name, Matrix& m) { out.emplace_back(name, &m); });
    return out;
}

template <class Params>
std::vector<std::pair<std::string, const Matrix*>> named_arrays(const Params& p) {
    std::vector<std::pair<std::string, const Matrix*>> out;
    Params::each(p, "", [&](const std::string& name, const Matrix& m) { out.emplace_back(name, &m); });
    return out;
}

template <class Params>
Params zeros_like(const Params& p) {
    Params z = p;
    Params::each(z, "", [](const std::string&, Matrix& m) { m.setZero(); });
    return z;
}

template <class Params>
std::size_t parameter_count(const Params& p) {
    std::size_t n = 0;
    Params::each(p, "", [&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

/// FNV-1a over names, shapes and raw bytes of every array.
template <class Params>
std::uint64_t parameter_hash(const Params& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* data, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    Params::each(p, "", [&](const std::string& name, const Matrix& m) {
        mix(name.data(), name.size());
        const std::int64_t shape[2] = {m.rows(), m.cols()};
        mix(shape, sizeof shape);
        mix(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    });
    return h;
}

} // namespace agp

#pragma once

#include <agp/attention_mask.hpp>
#include <agp/nn.hpp>
#include <agp/tensor.hpp>

#include <cmath>
#include <cstdint>

namespace agp {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

template <class Params>
struct AdamWState {
    Params m;
    Params v;
    std::uint64_t step = 0;
};

template <class Params>
AdamWState<Params> make_adamw_state(const Params& like) {
    return {zeros_like(like), zeros_like(like), 0};
}

/// Adam with decoupled weight decay: θ ← θ·(1 − lr·wd), then the
/// bias-corrected Adam update.
template <class Params>
void adamw_step(Params& params, const Params& grads, AdamWState<Params>& state, double lr, const AdamWConfig& cfg) {
    require_matching(params, grads, "adamw_step");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    auto p = named_arrays(params);
    auto g = named_arrays(grads);
    auto m = named_arrays(state.m);
    auto v = named_arrays(state.v);
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double* pp = p[i].second->data();
        const double* gg = g[i].second->data();
        double* mm = m[i].second->data();
        double* vv = v[i].second->data();
        for (Eigen::Index k = 0; k < p[i].second->size(); ++k) {
            pp[k] *= decay;
            mm[k] = cfg.beta1 * mm[k] + (1.0 - cfg.beta1) * gg[k];
            vv[k] = cfg.beta2 * vv[k] + (1.0 - cfg.beta2) * gg[k] * gg[k];
            pp[k] -= lr * (mm[k] / bc1) / (std::sqrt(vv[k] / bc2) + cfg.eps);
        }
    }
}

} // namespace agp

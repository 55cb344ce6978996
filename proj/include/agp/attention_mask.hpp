#pragma once

#include <agp/encoder.hpp>
#include <agp/error.hpp>
#include <agp/nn.hpp>
#include <agp/tensor.hpp>

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace agp {

enum class MaskRole { raw, prior, learnable, final };

/// Which attention source drives the perturbation: encoder prior only (L),
/// teacher decoder only (D), or both (B).
enum class MaskSource { prior_only, learnable_only, both };

NLOHMANN_JSON_SERIALIZE_ENUM(MaskSource,
                             {{MaskSource::prior_only, "L"}, {MaskSource::learnable_only, "D"}, {MaskSource::both, "B"}})

inline MaskSource mask_source_from_string(const std::string& s) {
    if (s == "L") return MaskSource::prior_only;
    if (s == "D") return MaskSource::learnable_only;
    if (s == "B") return MaskSource::both;
    fail(ErrorKind::usage, "mask source must be one of L, D, B (got '" + s + "')");
}

inline const char* to_string(MaskSource s) {
    switch (s) {
    case MaskSource::prior_only: return "L";
    case MaskSource::learnable_only: return "D";
    case MaskSource::both: return "B";
    }
    return "?";
}

struct AttentionMask {
    Plane values;
    MaskRole role = MaskRole::raw;
};

/// Max-min normalization to [0,1]. A constant map carries no guidance and
/// maps to all zeros.
inline AttentionMask normalize(const Plane& map, MaskRole role = MaskRole::raw) {
    require(all_finite(map.data), ErrorKind::numeric, "attention map has non-finite entries");
    AttentionMask out{map, role};
    if (map.data.empty()) return out;
    const auto [lo_it, hi_it] = std::minmax_element(map.data.begin(), map.data.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) {
        std::fill(out.values.data.begin(), out.values.data.end(), 0.0);
        return out;
    }
    const double span = hi - lo;
    for (double& v : out.values.data) v = (v - lo) / span;
    return out;
}

/// Element-wise mean of shape-homogeneous maps.
inline Plane aggregate(std::span<const Plane> maps) {
    require(!maps.empty(), ErrorKind::config, "cannot aggregate an empty list of attention maps");
    Plane out(maps.front().height, maps.front().width);
    for (const auto& m : maps) {
        require(m.same_shape(out), ErrorKind::shape, "attention maps differ in shape");
        for (std::size_t i = 0; i < m.size(); ++i) out.data[i] += m.data[i];
    }
    const double inv = 1.0 / static_cast<double>(maps.size());
    for (double& v : out.data) v *= inv;
    return out;
}

inline AttentionMask prior_mask(const FeatureStack& stack) {
    require(!stack.layer_attention.empty(), ErrorKind::config, "feature stack carries no attention maps");
    return normalize(aggregate(stack.layer_attention), MaskRole::prior);
}

inline AttentionMask learnable_mask(std::span<const Plane> teacher_attention) {
    return normalize(aggregate(teacher_attention), MaskRole::learnable);
}

/// Combines the normalized branches. With both sources the result lies in
/// [0,2]; a single source returns that branch unchanged.
inline AttentionMask final_mask(const AttentionMask& prior, const AttentionMask& learn, MaskSource source) {
    require(prior.values.same_shape(learn.values), ErrorKind::shape, "prior and learnable masks differ in shape");
    switch (source) {
    case MaskSource::prior_only: return {prior.values, MaskRole::final};
    case MaskSource::learnable_only: return {learn.values, MaskRole::final};
    case MaskSource::both: break;
    }
    AttentionMask out{prior.values, MaskRole::final};
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values.data[i] += learn.values.data[i];
    return out;
}

// ---------------------------------------------------------------------------
// Mean teacher

template <class Params>
struct TeacherState {
    Params shadow;
    double eta = 0.9999;
    int update_interval = 10;
    std::uint64_t step_counter = 0;
};

/// The teacher starts as an exact copy of the student.
template <class Params>
TeacherState<Params> make_teacher(const Params& student, double eta = 0.9999, int update_interval = 10) {
    require(eta >= 0.0 && eta < 1.0, ErrorKind::config, "EMA eta must lie in [0,1)");
    require(update_interval >= 1, ErrorKind::config, "EMA update interval must be >= 1");
    return {student, eta, update_interval, 0};
}

template <class Params>
void require_matching(const Params& a, const Params& b, const char* what) {
    auto na = named_arrays(a);
    auto nb = named_arrays(b);
    std::vector<std::string> bad;
    if (na.size() != nb.size()) bad.push_back("array count " + std::to_string(na.size()) + " vs " + std::to_string(nb.size()));
    for (std::size_t i = 0; i < std::min(na.size(), nb.size()); ++i)
        if (na[i].first != nb[i].first || na[i].second->rows() != nb[i].second->rows() ||
            na[i].second->cols() != nb[i].second->cols())
            bad.push_back(na[i].first);
    if (!bad.empty()) {
        std::string msg = std::string(what) + ": mismatched arrays:";
        for (const auto& s : bad) msg += " " + s;
        fail(ErrorKind::shape, msg);
    }
}

/// Called once per training step. The counter always advances; the blend
/// θ_teacher ← η·θ_teacher + (1−η)·θ_student is applied only when the
/// advanced counter is a multiple of the update interval. Returns whether
/// the blend was applied.
template <class Params>
bool ema_update(TeacherState<Params>& teacher, const Params& student) {
    require_matching(teacher.shadow, student, "ema_update");
    ++teacher.step_counter;
    if (teacher.step_counter % static_cast<std::uint64_t>(teacher.update_interval) != 0) return false;
    auto dst = named_arrays(teacher.shadow);
    auto src = named_arrays(student);
    const double eta = teacher.eta;
    for (std::size_t i = 0; i < dst.size(); ++i) {
        Matrix& t = *dst[i].second;
        const Matrix& s = *src[i].second;
        for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = eta * t.data()[k] + (1.0 - eta) * s.data()[k];
    }
    return true;
}

} // namespace agp

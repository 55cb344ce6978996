#pragma once

#include <agp/data.hpp>
#include <agp/encoder.hpp>
#include <agp/error.hpp>
#include <agp/metrics.hpp>
#include <agp/scoring.hpp>
#include <agp/training.hpp>

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace agp {

struct DataConfig {
    bool toy = true;
    ToyDatasetSpec toy_spec;
    std::string root;
    /// Empty selects every category found (or generated).
    std::vector<std::string> categories;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, toy, toy_spec, root, categories)

struct ExperimentConfig {
    std::string name = "run";
    DataConfig data;
    ModelConfig model;
    ScoringConfig scoring;
    double pro_fpr_limit = 0.3;
    /// Rescale the epoch-valued schedule fields by epochs / 500 when resolving.
    bool compress_schedule = false;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, name, data, model, scoring, pro_fpr_limit,
                                                compress_schedule)

/// Desk-scale setup: procedural data, a 4-block toy encoder and a 50-epoch
/// run with the curriculum compressed to match.
inline ExperimentConfig toy_experiment(std::uint64_t seed = 7) {
    ExperimentConfig c;
    c.name = "toy";
    c.data.toy = true;
    c.data.toy_spec.seed = seed;
    EncoderConfig& e = c.model.encoder;
    e.variant = EncoderVariant::toy_vit;
    e.image_size = 64;
    e.patch_size = 8;
    e.depth = 4;
    e.dim = 32;
    e.heads = 4;
    e.layer_ids = {0, 1, 2, 3};
    e.seed = seed;
    c.model.decoder.dim = 32;
    c.model.decoder.heads = 4;
    c.model.decoder.seed = seed;
    c.model.train.epochs = 50;
    c.model.train.batch_size = 8;
    c.model.train.seed = seed;
    c.compress_schedule = true;
    return c;
}

/// Full-scale setup on an MVTec-AD style directory with a ViT-S/16 backbone.
inline ExperimentConfig mvtec_experiment(const std::string& root, const std::string& weights_path,
                                         std::uint64_t seed = 0) {
    ExperimentConfig c;
    c.name = "mvtec";
    c.data.toy = false;
    c.data.root = root;
    EncoderConfig& e = c.model.encoder;
    e.variant = EncoderVariant::external_pretrained;
    e.image_size = 224;
    e.patch_size = 16;
    e.depth = 12;
    e.dim = 384;
    e.heads = 6;
    e.layer_ids = {2, 5, 8, 11};
    e.weights_path = weights_path;
    e.seed = seed;
    c.model.decoder.dim = 384;
    c.model.decoder.heads = 6;
    c.model.decoder.seed = seed;
    c.model.train.seed = seed;
    return c;
}

/// Sets every seed in the experiment to `seed`.
inline void set_seed(ExperimentConfig& c, std::uint64_t seed) {
    c.data.toy_spec.seed = seed;
    c.model.encoder.seed = seed;
    c.model.decoder.seed = seed;
    c.model.train.seed = seed;
}

/// Materializes derived values. The result is a fixed point: resolving it
/// again changes nothing.
inline ExperimentConfig resolve(ExperimentConfig c) {
    if (c.compress_schedule) {
        c.model.noise = c.model.noise.compressed(c.model.train.epochs);
        c.compress_schedule = false;
    }
    if (!c.model.train.ablation.layers.empty()) c.model.encoder.layer_ids = c.model.train.ablation.layers;
    c.model.encoder.validate();
    c.model.decoder.validate();
    c.model.noise.validate();
    c.model.train.validate();
    require(c.model.decoder.dim == c.model.encoder.dim, ErrorKind::config,
            "decoder dim " + std::to_string(c.model.decoder.dim) + " must equal encoder dim " +
                std::to_string(c.model.encoder.dim));
    require(c.pro_fpr_limit > 0.0 && c.pro_fpr_limit <= 1.0, ErrorKind::config, "pro_fpr_limit must lie in (0,1]");
    require(c.data.toy || !c.data.root.empty(), ErrorKind::usage, "a dataset root is required unless toy data is used");
    require(!c.data.toy || c.data.toy_spec.image_size == c.model.encoder.image_size, ErrorKind::config,
            "toy image_size must equal the encoder image_size");
    return c;
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    try {
        return j.get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::config, std::string("invalid configuration: ") + e.what());
    }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::config, path.string() + ": " + e.what());
    }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << j.dump(2) << '\n';
    require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

/// Sets a dotted path ("model.train.lr") in `j`. The value is parsed as JSON
/// when possible and taken as a string otherwise. Unknown paths are errors.
inline void set_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::usage, "override must look like key.path=value: " + assignment);
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    nlohmann::json* node = &j;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, '.')) {
        require(node->is_object() && node->contains(part), ErrorKind::usage, "unknown config key '" + key + "'");
        node = &(*node)[part];
    }
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    *node = value;
}

// ---------------------------------------------------------------------------
// Ablation strings

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep)) out.push_back(trim(part));
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no" || v == "w.o.") return false;
    fail(ErrorKind::usage, "ablation " + key + " expects on/off, got '" + v + "'");
}

/// "A/A", "-/R" (image/feature) or "image:attention,feature:random".
inline void apply_noise(AblationSwitches& a, const std::string& v) {
    if (v.find(':') == std::string::npos) {
        const auto parts = split(v, '/');
        require(parts.size() == 2, ErrorKind::usage, "noise must be <image>/<feature>, got '" + v + "'");
        a.image_noise = noise_arm_from_string(parts[0]);
        a.feature_noise = noise_arm_from_string(parts[1]);
        return;
    }
    for (const auto& item : split(v, ',')) {
        const auto kv = split(item, ':');
        require(kv.size() == 2, ErrorKind::usage, "bad noise entry '" + item + "'");
        if (kv[0] == "image")
            a.image_noise = noise_arm_from_string(kv[1]);
        else if (kv[0] == "feature")
            a.feature_noise = noise_arm_from_string(kv[1]);
        else
            fail(ErrorKind::usage, "noise level must be image or feature, got '" + kv[0] + "'");
    }
}

} // namespace detail

inline void apply_ablation_setting(AblationSwitches& a, const std::string& key, const std::string& value) {
    if (key == "noise") {
        detail::apply_noise(a, value);
    } else if (key == "image_noise" || key == "image") {
        a.image_noise = noise_arm_from_string(value);
    } else if (key == "feature_noise" || key == "feature") {
        a.feature_noise = noise_arm_from_string(value);
    } else if (key == "mask" || key == "mask_source" || key == "attention_map") {
        a.mask_source = mask_source_from_string(value);
    } else if (key == "mean_teacher" || key == "teacher") {
        a.mean_teacher = detail::parse_bool(key, value);
    } else if (key == "teacher_on_clean") {
        a.teacher_on_clean = detail::parse_bool(key, value);
    } else if (key == "independent_view_noise") {
        a.independent_view_noise = detail::parse_bool(key, value);
    } else if (key == "layers") {
        a.layers.clear();
        for (const auto& t : detail::split(value, value.find('+') != std::string::npos ? '+' : ','))
            if (!t.empty()) a.layers.push_back(std::stoi(t));
        require(!a.layers.empty(), ErrorKind::usage, "layers needs at least one id");
    } else {
        fail(ErrorKind::usage, "unknown ablation key '" + key + "'");
    }
}

/// Parses "k=v,k=v". A comma-separated piece without '=' continues the
/// previous value, so "noise=image:attention,feature:random" and
/// "layers=2,5,8,11" work.
inline std::vector<std::pair<std::string, std::string>> parse_assignments(const std::string& spec) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& piece : detail::split(spec, ',')) {
        if (piece.empty()) continue;
        const auto eq = piece.find('=');
        if (eq == std::string::npos) {
            require(!out.empty(), ErrorKind::usage, "ablation entry '" + piece + "' has no key");
            out.back().second += "," + piece;
            continue;
        }
        out.emplace_back(detail::trim(piece.substr(0, eq)), detail::trim(piece.substr(eq + 1)));
    }
    return out;
}

inline void apply_ablation(AblationSwitches& a, const std::string& spec) {
    for (const auto& [k, v] : parse_assignments(spec)) apply_ablation_setting(a, k, v);
}

struct GridAxis {
    std::string key;
    std::vector<std::string> values;
};

/// "noise=-/-;-/R;-/A;A/A" or "mask=L,D,B". Values split on ';' when present.
inline GridAxis parse_grid_axis(const std::string& spec) {
    const auto eq = spec.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::usage, "grid axis must look like key=v1;v2;...: '" + spec + "'");
    GridAxis g;
    g.key = detail::trim(spec.substr(0, eq));
    const std::string rest = spec.substr(eq + 1);
    for (const auto& v : detail::split(rest, rest.find(';') != std::string::npos ? ';' : ','))
        if (!v.empty()) g.values.push_back(v);
    require(!g.values.empty(), ErrorKind::usage, "grid axis '" + g.key + "' has no values");
    AblationSwitches probe;
    for (const auto& v : g.values) apply_ablation_setting(probe, g.key, v);
    return g;
}

struct GridCell {
    std::string label;
    std::vector<std::pair<std::string, std::string>> settings;
};

inline std::vector<GridCell> expand_grid(const std::vector<GridAxis>& axes) {
    require(!axes.empty(), ErrorKind::usage, "empty ablation grid");
    std::vector<GridCell> cells{GridCell{}};
    for (const auto& axis : axes) {
        std::vector<GridCell> next;
        for (const auto& c : cells)
            for (const auto& v : axis.values) {
                GridCell n = c;
                n.label += (n.label.empty() ? "" : " ") + axis.key + "=" + v;
                n.settings.emplace_back(axis.key, v);
                next.push_back(std::move(n));
            }
        cells = std::move(next);
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Building blocks

inline DatasetManifest load_dataset(const ExperimentConfig& c) {
    DatasetManifest m;
    if (c.data.toy) {
        m = generate_toy_dataset(c.data.toy_spec, c.model.encoder.patch_size);
        if (!c.data.categories.empty()) m = m.subset(c.data.categories);
    } else {
        const auto cats = c.data.categories.empty() ? discover_categories(c.data.root) : c.data.categories;
        m = load_mvtec_layout(c.data.root, cats, c.model.train.seed);
    }
    return m;
}

inline VitEncoder make_encoder(const EncoderConfig& e) {
    if (e.variant == EncoderVariant::external_pretrained) {
        require(!e.weights_path.empty(), ErrorKind::config, "external encoder needs weights_path");
        return load_external_weights(e.weights_path, e);
    }
    return build_toy_encoder(e.seed, e.depth, e.dim, e.heads, e.patch_size, e.image_size, e.layer_ids);
}

inline nlohmann::json resolved_json(const ExperimentConfig& c) {
    nlohmann::json j = c;
    return j;
}

/// One trained decoder and the categories it covers ("all" for the unified
/// multi-class model).
struct TrainedModel {
    std::string scope;
    std::vector<std::string> categories;
    TrainState state;
    std::vector<EpochSummary> epochs;
    std::filesystem::path checkpoint;
};

/// Training manifests per scope for the configured setting.
inline std::vector<std::pair<std::string, DatasetManifest>> training_scopes(const ExperimentConfig& c,
                                                                           const DatasetManifest& m) {
    std::vector<std::pair<std::string, DatasetManifest>> out;
    switch (c.model.train.setting) {
    case Setting::multi_class: out.emplace_back("all", m); break;
    case Setting::one_class:
        for (const auto& cat : m.categories) out.emplace_back(cat, m.subset({cat}));
        break;
    case Setting::few_shot: {
        const DatasetManifest shots = select_few_shot(m, c.model.train.shots, c.model.train.seed);
        for (const auto& cat : m.categories) out.emplace_back(cat, few_shot_expand(shots.subset({cat}), c.model.train.shots));
        break;
    }
    }
    return out;
}

/// Runs fit() for every scope. With `out_dir` set, scope `s` writes into
/// out_dir/s/ and its final checkpoint is out_dir/s/model.agpk. Scopes found
/// in `resume` continue from that state.
inline std::vector<TrainedModel> train_experiment(const ExperimentConfig& c, const DatasetManifest& m,
                                                  const VitEncoder& encoder, const std::filesystem::path& out_dir = {},
                                                  std::function<void(const std::string&, const EpochSummary&)> on_epoch = {},
                                                  std::map<std::string, TrainState> resume = {}) {
    std::vector<TrainedModel> models;
    for (auto& [scope, manifest] : training_scopes(c, m)) {
        std::optional<TrainState> start;
        if (auto it = resume.find(scope); it != resume.end()) start = std::move(it->second);
        FitOptions opts;
        if (!out_dir.empty()) opts.out_dir = out_dir / scope;
        opts.resolved_config = resolved_json(c);
        if (on_epoch) opts.on_epoch = [&, s = scope](const EpochSummary& e) { on_epoch(s, e); };
        FitResult r = fit(manifest, encoder, c.model, opts, std::move(start));
        TrainedModel t;
        t.scope = scope;
        t.categories = manifest.categories;
        t.state = std::move(r.state);
        t.epochs = std::move(r.epochs);
        if (!out_dir.empty()) t.checkpoint = opts.out_dir / "model.agpk";
        models.push_back(std::move(t));
    }
    return models;
}

/// Scores each category's test split with the model that covers it.
inline std::vector<ScoredSample> score_experiment(const ExperimentConfig& c, const DatasetManifest& m,
                                                  const VitEncoder& encoder, const std::vector<TrainedModel>& models) {
    std::vector<ScoredSample> out;
    for (const auto& cat : m.categories) {
        const TrainedModel* owner = nullptr;
        for (const auto& t : models)
            if (std::find(t.categories.begin(), t.categories.end(), cat) != t.categories.end()) owner = &t;
        require(owner != nullptr, ErrorKind::usage, "no trained model covers category " + cat);
        const InferenceModel im{&encoder, &owner->state.student, c.model.decoder};
        auto rows = score_dataset(m, im, c.scoring, cat);
        out.insert(out.end(), std::make_move_iterator(rows.begin()), std::make_move_iterator(rows.end()));
    }
    return out;
}

inline ProOptions pro_options(const ExperimentConfig& c) {
    ProOptions o;
    o.fpr_limit = c.pro_fpr_limit;
    return o;
}

/// Train in memory, score and evaluate.
inline EvalResult run_experiment(const ExperimentConfig& raw) {
    const ExperimentConfig c = resolve(raw);
    const DatasetManifest m = load_dataset(c);
    const VitEncoder encoder = make_encoder(c.model.encoder);
    const auto models = train_experiment(c, m, encoder);
    return evaluate(score_experiment(c, m, encoder, models), pro_options(c));
}

} // namespace agp

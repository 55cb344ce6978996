#pragma once

#include <agp/archive.hpp>
#include <agp/attention_mask.hpp>
#include <agp/data.hpp>
#include <agp/decoder.hpp>
#include <agp/encoder.hpp>
#include <agp/error.hpp>
#include <agp/optim.hpp>
#include <agp/perturbation.hpp>
#include <agp/random.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace agp {

enum class Setting { multi_class, one_class, few_shot };
enum class NoiseArm { off, random, attention };

NLOHMANN_JSON_SERIALIZE_ENUM(Setting, {{Setting::multi_class, "multi_class"},
                                       {Setting::one_class, "one_class"},
                                       {Setting::few_shot, "few_shot"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NoiseArm, {{NoiseArm::off, "off"}, {NoiseArm::random, "random"}, {NoiseArm::attention, "attention"}})

inline Setting setting_from_string(const std::string& s) {
    if (s == "multi_class") return Setting::multi_class;
    if (s == "one_class") return Setting::one_class;
    if (s == "few_shot") return Setting::few_shot;
    fail(ErrorKind::usage, "unknown setting '" + s + "' (expected multi_class, one_class or few_shot)");
}

/// Accepts "off"/"random"/"attention" and the table shorthands "-"/"R"/"A".
inline NoiseArm noise_arm_from_string(const std::string& s) {
    if (s == "off" || s == "-") return NoiseArm::off;
    if (s == "random" || s == "R") return NoiseArm::random;
    if (s == "attention" || s == "A") return NoiseArm::attention;
    fail(ErrorKind::usage, "unknown noise arm '" + s + "'");
}

inline const char* short_name(NoiseArm a) {
    switch (a) {
    case NoiseArm::off: return "-";
    case NoiseArm::random: return "R";
    case NoiseArm::attention: return "A";
    }
    return "?";
}

struct AblationSwitches {
    NoiseArm image_noise = NoiseArm::attention;
    NoiseArm feature_noise = NoiseArm::attention;
    MaskSource mask_source = MaskSource::both;
    bool mean_teacher = true;
    /// Teacher attention computed on clean (true) or feature-perturbed inputs.
    bool teacher_on_clean = true;
    /// The two loss views draw feature noise independently (true) or share it.
    bool independent_view_noise = true;
    /// Encoder layers to fuse; empty keeps the encoder's configured layers.
    std::vector<int> layers;

    std::string noise_label() const { return std::string(short_name(image_noise)) + "/" + short_name(feature_noise); }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AblationSwitches, image_noise, feature_noise, mask_source, mean_teacher,
                                                teacher_on_clean, independent_view_noise, layers)

struct TrainConfig {
    int epochs = 500;
    int batch_size = 32;
    double lr = 1e-3;
    int lr_drop_epoch = 200;
    double lr_drop_factor = 0.1;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;
    Setting setting = Setting::multi_class;
    int shots = 0;
    AblationSwitches ablation;
    double ema_eta = 0.9999;
    int ema_interval = 10;
    int checkpoint_every = 0;
    /// Encoder outputs of clean training images never change, so they can be
    /// computed once and reused every epoch.
    bool cache_clean_features = true;

    void validate() const {
        require(epochs > 0, ErrorKind::config, "epochs must be > 0");
        require(batch_size > 0, ErrorKind::config, "batch_size must be > 0");
        require(lr >= 0.0, ErrorKind::config, "lr must be >= 0");
        require(lr_drop_factor > 0.0, ErrorKind::config, "lr_drop_factor must be > 0");
        require(ema_eta >= 0.0 && ema_eta < 1.0, ErrorKind::config, "ema_eta must lie in [0,1)");
        require(ema_interval >= 1, ErrorKind::config, "ema_interval must be >= 1");
        require(setting != Setting::few_shot || shots > 0, ErrorKind::config, "few_shot setting needs shots > 0");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, lr, lr_drop_epoch, lr_drop_factor,
                                                weight_decay, seed, setting, shots, ablation, ema_eta, ema_interval,
                                                checkpoint_every, cache_clean_features)

/// Step schedule: base lr before `lr_drop_epoch` (0-based), scaled by the
/// drop factor from then on.
inline double learning_rate_at(int epoch, const TrainConfig& c) {
    return epoch >= c.lr_drop_epoch ? c.lr * c.lr_drop_factor : c.lr;
}

struct ModelConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
    NoiseSchedule noise;
    TrainConfig train;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, encoder, decoder, noise, train)

struct TrainState {
    DecoderParams student;
    AdamWState<DecoderParams> optimizer;
    TeacherState<DecoderParams> teacher;
    int epoch = 0;
    std::uint64_t global_step = 0;
    std::uint64_t seed = 0;
};

inline TrainState init_train_state(const DecoderConfig& dec, const TrainConfig& train) {
    TrainState s;
    s.student = init_params(dec);
    s.optimizer = make_adamw_state(s.student);
    s.teacher = make_teacher(s.student, train.ema_eta, train.ema_interval);
    s.seed = train.seed;
    return s;
}

struct LossTerms {
    double l_feat = 0.0;
    double l_imgfeat = 0.0;
    double l_total = 0.0;
};

/// Mean squared error over positions and channels.
inline double feature_mse(const FeatureMap& a, const FeatureMap& b) {
    require_same_shape(a, b, "feature_mse");
    return (a.tokens - b.tokens).squaredNorm() / static_cast<double>(a.tokens.size());
}

inline LossTerms loss_terms(const CleanFeatures& clean, const FeatureMap& recon_feat, const FeatureMap& recon_imgfeat) {
    LossTerms t;
    t.l_feat = feature_mse(recon_feat, clean);
    t.l_imgfeat = feature_mse(recon_imgfeat, clean);
    t.l_total = 0.5 * (t.l_feat + t.l_imgfeat);
    return t;
}

struct StepMetrics {
    int epoch = 0;
    std::uint64_t step = 0;
    double l_feat = 0.0;
    double l_imgfeat = 0.0;
    double l_total = 0.0;
    double alpha = 0.0;
    double img_ratio = 0.0;
    double lr = 0.0;
};

inline const char* kTrainLogHeader = "epoch,step,l_feat,l_imgfeat,l_total,alpha,img_ratio,lr";

inline std::string to_csv_row(const StepMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%llu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", m.epoch,
                  static_cast<unsigned long long>(m.step), m.l_feat, m.l_imgfeat, m.l_total, m.alpha, m.img_ratio, m.lr);
    return buf;
}

/// One training image with its clean-path encoder outputs.
struct TrainingExample {
    const Image* image = nullptr;
    const CleanFeatures* clean = nullptr;
    const AttentionMask* prior = nullptr;
};

/// Clean fused features and prior mask of one image.
struct CleanView {
    CleanFeatures features;
    AttentionMask prior;
};

inline CleanView clean_view(const VitEncoder& encoder, const Image& image) {
    const FeatureStack stack = encoder.extract(image);
    return {fuse_features(stack), prior_mask(stack)};
}

/// Non-finite loss during a step.
class NonFiniteLoss : public Error {
public:
    NonFiniteLoss(const std::string& what, StepMetrics metrics) : Error(ErrorKind::numeric, what), metrics_(metrics) {}
    const StepMetrics& metrics() const { return metrics_; }

private:
    StepMetrics metrics_;
};

/// Runs the two-view training step on one batch and updates `state` in place:
///   clean image → encoder → F_clean, A_prior
///   teacher(F_clean) → A_learn;  A_final from the configured source
///   view 1: perturb features(F_clean)               → student → L_feat
///   view 2: perturb image → encoder → perturb features → student → L_img,feat
/// Both views reconstruct F_clean. Gradients reach the student decoder only.
inline StepMetrics train_step(std::span<const TrainingExample> batch, TrainState& state, const VitEncoder& encoder,
                              const ModelConfig& cfg) {
    require(!batch.empty(), ErrorKind::usage, "empty batch");
    const AblationSwitches& ab = cfg.train.ablation;
    const NoiseSchedule& ns = cfg.noise;
    const int t = state.epoch;

    StepMetrics metrics;
    metrics.epoch = t;
    metrics.step = state.global_step;
    metrics.alpha = alpha_at(t, ns);
    metrics.img_ratio = image_mask_ratio_at(t, ns);
    metrics.lr = learning_rate_at(t, cfg.train);

    DecoderParams grads = zeros_like(state.student);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    const bool needs_mask = ab.feature_noise == NoiseArm::attention || ab.image_noise == NoiseArm::attention;
    const bool needs_learn = needs_mask && ab.mask_source != MaskSource::prior_only;
    const DecoderParams& mask_decoder = ab.mean_teacher ? state.teacher.shadow : state.student;

    for (std::size_t b = 0; b < batch.size(); ++b) {
        const TrainingExample& ex = batch[b];
        const CleanFeatures& clean = *ex.clean;
        const std::uint64_t root = derive_seed(state.seed, {state.global_step, b});
        const std::uint64_t seed_view1 = derive_seed(root, {1});
        const std::uint64_t seed_view2 = ab.independent_view_noise ? derive_seed(root, {2}) : seed_view1;
        const std::uint64_t seed_image = derive_seed(root, {3});

        auto perturb = [&](const FeatureMap& f, const AttentionMask& mask, std::uint64_t seed) -> FeatureMap {
            switch (ab.feature_noise) {
            case NoiseArm::off: return f;
            case NoiseArm::random: return random_feature_noise(f, t, ns, seed).features;
            case NoiseArm::attention: return perturb_features(f, mask, t, ns, seed).features;
            }
            return f;
        };

        AttentionMask final_m{Plane(clean.height, clean.width), MaskRole::final};
        if (needs_mask) {
            AttentionMask learn{Plane(clean.height, clean.width), MaskRole::learnable};
            if (needs_learn) {
                const FeatureMap teacher_in =
                    ab.teacher_on_clean ? clean : random_feature_noise(clean, t, ns, derive_seed(root, {4})).features;
                learn = learnable_mask(decode(teacher_in, mask_decoder, cfg.decoder).attention);
            }
            final_m = final_mask(*ex.prior, learn, ab.mask_source);
        }

        // view 1: feature-level perturbation
        DecoderTape tape1;
        const FeatureMap in1 = perturb(clean, final_m, seed_view1);
        const DecoderOutput out1 = decode(in1, state.student, cfg.decoder, &tape1);

        // view 2: image-level then feature-level perturbation
        FeatureMap img_feat = clean;
        if (ab.image_noise != NoiseArm::off) {
            const Image noisy = ab.image_noise == NoiseArm::random
                                    ? *random_image_noise(*ex.image, t, ns, seed_image).image
                                    : *perturb_image(*ex.image, final_m, t, ns, seed_image).image;
            img_feat = fuse_features(encoder.extract(noisy));
        }
        DecoderTape tape2;
        const FeatureMap in2 = perturb(img_feat, final_m, seed_view2);
        const DecoderOutput out2 = decode(in2, state.student, cfg.decoder, &tape2);

        const LossTerms lt = loss_terms(clean, out1.reconstructed, out2.reconstructed);
        metrics.l_feat += lt.l_feat * inv_batch;
        metrics.l_imgfeat += lt.l_imgfeat * inv_batch;
        metrics.l_total += lt.l_total * inv_batch;

        // d/dŷ of ½·mean((ŷ − y)²) averaged over the batch
        const double scale = inv_batch / static_cast<double>(clean.tokens.size());
        decode_backward(tape1, (out1.reconstructed.tokens - clean.tokens) * scale, state.student, cfg.decoder, grads);
        decode_backward(tape2, (out2.reconstructed.tokens - clean.tokens) * scale, state.student, cfg.decoder, grads);
    }

    if (!std::isfinite(metrics.l_total)) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "non-finite loss at epoch %d step %llu (l_feat=%g, l_imgfeat=%g)", t,
                      static_cast<unsigned long long>(state.global_step), metrics.l_feat, metrics.l_imgfeat);
        throw NonFiniteLoss(buf, metrics);
    }

    AdamWConfig opt;
    opt.weight_decay = cfg.train.weight_decay;
    adamw_step(state.student, grads, state.optimizer, metrics.lr, opt);
    ema_update(state.teacher, state.student);
    ++state.global_step;
    return metrics;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void write_checkpoint(const std::filesystem::path& path, const TrainState& state, const VitEncoder& encoder,
                             const nlohmann::json& resolved_config) {
    Archive a;
    a.header["format"] = "agp-checkpoint";
    a.header["version"] = 1;
    encoder.write(a, "encoder/");
    write_params(a, "decoder/", state.student);
    write_params(a, "teacher/", state.teacher.shadow);
    write_params(a, "optimizer/m/", state.optimizer.m);
    write_params(a, "optimizer/v/", state.optimizer.v);
    a.put_text("optimizer/state", nlohmann::json{{"step", state.optimizer.step}}.dump());
    a.put_text("teacher/state", nlohmann::json{{"eta", state.teacher.eta},
                                               {"update_interval", state.teacher.update_interval},
                                               {"step_counter", state.teacher.step_counter}}
                                    .dump());
    a.put_text("rng/state",
               nlohmann::json{{"seed", state.seed}, {"global_step", state.global_step}, {"epoch", state.epoch}}.dump());
    a.put_text("config/resolved", resolved_config.dump());
    a.save(path);
}

struct Checkpoint {
    TrainState state;
    VitEncoder encoder;
    ModelConfig model;
    nlohmann::json resolved_config;
};

inline ModelConfig model_config_from(const nlohmann::json& resolved) {
    try {
        return resolved.contains("model") ? resolved.at("model").get<ModelConfig>() : resolved.get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::load, std::string("bad stored configuration: ") + e.what());
    }
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    const Archive a = Archive::load(path);
    require(a.header.value("format", "") == "agp-checkpoint", ErrorKind::load, path.string() + " is not a training checkpoint");
    nlohmann::json resolved;
    try {
        resolved = nlohmann::json::parse(a.text("config/resolved"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::load, std::string("bad config in checkpoint: ") + e.what());
    }
    const ModelConfig model = model_config_from(resolved);
    VitEncoder encoder = VitEncoder::read(a, model.encoder, "encoder/");
    TrainState s;
    s.student = make_decoder_params(model.decoder);
    read_params(a, "decoder/", s.student);
    s.teacher.shadow = make_decoder_params(model.decoder);
    read_params(a, "teacher/", s.teacher.shadow);
    s.optimizer.m = make_decoder_params(model.decoder);
    s.optimizer.v = make_decoder_params(model.decoder);
    read_params(a, "optimizer/m/", s.optimizer.m);
    read_params(a, "optimizer/v/", s.optimizer.v);
    try {
        const auto opt = nlohmann::json::parse(a.text("optimizer/state"));
        s.optimizer.step = opt.at("step").get<std::uint64_t>();
        const auto teacher = nlohmann::json::parse(a.text("teacher/state"));
        s.teacher.eta = teacher.at("eta").get<double>();
        s.teacher.update_interval = teacher.at("update_interval").get<int>();
        s.teacher.step_counter = teacher.at("step_counter").get<std::uint64_t>();
        const auto rng = nlohmann::json::parse(a.text("rng/state"));
        s.seed = rng.at("seed").get<std::uint64_t>();
        s.global_step = rng.at("global_step").get<std::uint64_t>();
        s.epoch = rng.at("epoch").get<int>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::load, std::string("bad checkpoint state: ") + e.what());
    }
    return {std::move(s), std::move(encoder), model, std::move(resolved)};
}

// ---------------------------------------------------------------------------
// Fit

struct EpochSummary {
    int epoch = 0;
    int steps = 0;
    double l_feat = 0.0;
    double l_imgfeat = 0.0;
    double l_total = 0.0;
    double alpha = 0.0;
    double img_ratio = 0.0;
    double lr = 0.0;
};

struct FitOptions {
    /// Where checkpoints and train_log.csv go; empty keeps everything in memory.
    std::filesystem::path out_dir;
    nlohmann::json resolved_config;
    std::function<void(const EpochSummary&)> on_epoch;
    /// Stop after this many epochs in this call (0 = run to cfg.train.epochs).
    int max_epochs_this_call = 0;
};

struct FitResult {
    TrainState state;
    std::vector<StepMetrics> log;
    std::vector<EpochSummary> epochs;
};

/// Loaded training images plus their cached clean-path encoder outputs.
class TrainingSet {
public:
    TrainingSet(const DatasetManifest& manifest, const VitEncoder& encoder, bool cache_features) {
        const int size = encoder.config().image_size;
        for (std::size_t i : manifest.indices(Split::train)) {
            slot_[i] = images_.size();
            images_.push_back(manifest.load(i, size).pixels);
        }
        if (cache_features)
            for (const auto& img : images_) views_.push_back(clean_view(encoder, img));
    }

    std::size_t size() const { return images_.size(); }

    /// Example for manifest index `i`; `scratch` holds the view when the
    /// cache is disabled.
    TrainingExample example(std::size_t manifest_index, const VitEncoder& encoder, CleanView& scratch) const {
        const std::size_t k = slot_.at(manifest_index);
        if (!views_.empty()) return {&images_[k], &views_[k].features, &views_[k].prior};
        scratch = clean_view(encoder, images_[k]);
        return {&images_[k], &scratch.features, &scratch.prior};
    }

private:
    std::map<std::size_t, std::size_t> slot_;
    std::vector<Image> images_;
    std::vector<CleanView> views_;
};

namespace detail {

inline void append_log(const std::filesystem::path& path, const std::vector<StepMetrics>& rows) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    require(static_cast<bool>(out), ErrorKind::io, "cannot append to " + path.string());
    if (fresh) out << kTrainLogHeader << '\n';
    for (const auto& r : rows) out << to_csv_row(r) << '\n';
    require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

} // namespace detail

/// Full training run. Resumes from `resume` when given (continuing at its
/// epoch). Writes train_log.csv, periodic checkpoint_epoch<N>.agpk and a final
/// model.agpk into `opts.out_dir` when it is set.
inline FitResult fit(const DatasetManifest& manifest, const VitEncoder& encoder, const ModelConfig& cfg,
                     const FitOptions& opts = {}, std::optional<TrainState> resume = std::nullopt) {
    cfg.train.validate();
    cfg.noise.validate();
    cfg.decoder.validate();
    require(cfg.decoder.dim == encoder.config().dim, ErrorKind::config,
            "decoder dim " + std::to_string(cfg.decoder.dim) + " must equal encoder dim " +
                std::to_string(encoder.config().dim));
    require(!manifest.indices(Split::train).empty(), ErrorKind::usage, "no training samples");

    FitResult result;
    result.state = resume ? std::move(*resume) : init_train_state(cfg.decoder, cfg.train);
    TrainState& state = result.state;
    const TrainingSet data(manifest, encoder, cfg.train.cache_clean_features);

    const bool to_disk = !opts.out_dir.empty();
    if (to_disk) std::filesystem::create_directories(opts.out_dir);
    const int last_epoch = opts.max_epochs_this_call > 0
                               ? std::min(cfg.train.epochs, state.epoch + opts.max_epochs_this_call)
                               : cfg.train.epochs;

    while (state.epoch < last_epoch) {
        const int epoch = state.epoch;
        const auto order = manifest.epoch_order(static_cast<std::uint64_t>(epoch));
        std::vector<StepMetrics> rows;
        std::vector<CleanView> scratch(static_cast<std::size_t>(cfg.train.batch_size));
        for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.train.batch_size);
            std::vector<TrainingExample> batch;
            for (std::size_t i = start; i < end; ++i)
                batch.push_back(data.example(order[i], encoder, scratch[i - start]));
            try {
                rows.push_back(train_step(batch, state, encoder, cfg));
            } catch (const NonFiniteLoss&) {
                if (to_disk) write_checkpoint(opts.out_dir / "diagnostic_snapshot.agpk", state, encoder, opts.resolved_config);
                throw;
            }
        }
        state.epoch = epoch + 1;

        EpochSummary summary;
        summary.epoch = epoch;
        summary.steps = static_cast<int>(rows.size());
        for (const auto& r : rows) {
            summary.l_feat += r.l_feat / rows.size();
            summary.l_imgfeat += r.l_imgfeat / rows.size();
            summary.l_total += r.l_total / rows.size();
        }
        summary.alpha = alpha_at(epoch, cfg.noise);
        summary.img_ratio = image_mask_ratio_at(epoch, cfg.noise);
        summary.lr = learning_rate_at(epoch, cfg.train);
        result.epochs.push_back(summary);
        if (opts.on_epoch) opts.on_epoch(summary);

        if (to_disk) {
            detail::append_log(opts.out_dir / "train_log.csv", rows);
            if (cfg.train.checkpoint_every > 0 && state.epoch % cfg.train.checkpoint_every == 0 &&
                state.epoch < cfg.train.epochs)
                write_checkpoint(opts.out_dir / ("checkpoint_epoch" + std::to_string(state.epoch) + ".agpk"), state,
                                 encoder, opts.resolved_config);
        }
        result.log.insert(result.log.end(), rows.begin(), rows.end());
    }
    if (to_disk && state.epoch == cfg.train.epochs)
        write_checkpoint(opts.out_dir / "model.agpk", state, encoder, opts.resolved_config);
    return result;
}

} // namespace agp

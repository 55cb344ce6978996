#include "oracles.hpp"
#include "test_util.hpp"

#include <fstream>

using namespace agp;
using agp::testing::TempDir;
using agp::testing::error_kind_of;
using agp::testing::random_features;

namespace {

/// Small and fast: one category, 32 px images, a 2-block encoder.
ExperimentConfig small_experiment(int epochs = 2, int n_train = 10, int batch = 5) {
    ExperimentConfig c = toy_experiment(3);
    c.data.toy_spec.n_categories = 1;
    c.data.toy_spec.n_train_per_cat = n_train;
    c.data.toy_spec.n_test_normal = 4;
    c.data.toy_spec.n_test_anomalous = 4;
    c.data.toy_spec.image_size = 32;
    c.model.encoder.image_size = 32;
    c.model.encoder.depth = 2;
    c.model.encoder.dim = 16;
    c.model.encoder.heads = 2;
    c.model.encoder.layer_ids = {0, 1};
    c.model.decoder.depth = 1;
    c.model.decoder.dim = 16;
    c.model.decoder.heads = 2;
    c.model.train.epochs = epochs;
    c.model.train.batch_size = batch;
    return resolve(c);
}

struct Rig {
    ExperimentConfig cfg;
    DatasetManifest manifest;
    VitEncoder encoder;

    explicit Rig(ExperimentConfig c)
        : cfg(std::move(c)), manifest(load_dataset(cfg)), encoder(make_encoder(cfg.model.encoder)) {}

    FitResult run(FitOptions opts = {}, std::optional<TrainState> resume = std::nullopt) const {
        opts.resolved_config = resolved_json(cfg);
        return fit(manifest, encoder, cfg.model, opts, std::move(resume));
    }
};

std::uint64_t state_hash(const TrainState& s) {
    std::uint64_t h = parameter_hash(s.student);
    h = h * 31 + parameter_hash(s.teacher.shadow);
    h = h * 31 + parameter_hash(s.optimizer.m);
    h = h * 31 + parameter_hash(s.optimizer.v);
    return h * 31 + s.optimizer.step + s.teacher.step_counter + s.global_step;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace

TEST(Loss, MatchesScalarOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const FeatureMap clean = random_features(rng, 3, 4, 5);
        const FeatureMap r1 = random_features(rng, 3, 4, 5), r2 = random_features(rng, 3, 4, 5);
        const LossTerms t = loss_terms(clean, r1, r2);
        const auto o = oracle::loss(clean.tokens, r1.tokens, r2.tokens);
        EXPECT_LT(oracle::rel_err(t.l_feat, o[0]), 1e-12);
        EXPECT_LT(oracle::rel_err(t.l_imgfeat, o[1]), 1e-12);
        EXPECT_LT(oracle::rel_err(t.l_total, o[2]), 1e-12);
    }
}

TEST(Loss, PerfectReconstructionIsZero) {
    Rng rng(2);
    const FeatureMap f = random_features(rng, 2, 2, 3);
    EXPECT_EQ(loss_terms(f, f, f).l_total, 0.0);
    EXPECT_EQ(error_kind_of([&] { loss_terms(f, random_features(rng, 2, 3, 3), f); }), ErrorKind::shape);
}

TEST(LearningRate, StepDropAtTwoHundred) {
    TrainConfig c;
    EXPECT_EQ(learning_rate_at(0, c), 1e-3);
    EXPECT_EQ(learning_rate_at(199, c), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate_at(200, c), 1e-4);
    EXPECT_DOUBLE_EQ(learning_rate_at(499, c), 1e-4);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    c.batch_size = 0;
    EXPECT_EQ(error_kind_of([&] { c.validate(); }), ErrorKind::config);
    c = TrainConfig{};
    c.setting = Setting::few_shot;
    EXPECT_EQ(error_kind_of([&] { c.validate(); }), ErrorKind::config);
    c.shots = 2;
    c.validate();
}

TEST(Fit, StepsPerEpochFollowBatching) {
    const Rig s(small_experiment(1, 10, 5));
    const FitResult r = s.run();
    EXPECT_EQ(r.log.size(), 2u);
    EXPECT_EQ(r.state.global_step, 2u);
    EXPECT_EQ(r.state.epoch, 1);
    const Rig odd(small_experiment(1, 11, 5));
    EXPECT_EQ(odd.run().log.size(), 3u);
}

TEST(Fit, ZeroLearningRateLeavesStudentUnchanged) {
    ExperimentConfig c = small_experiment(1);
    c.model.train.lr = 0.0;
    const Rig s(c);
    const std::uint64_t before = parameter_hash(init_params(c.model.decoder));
    const FitResult r = s.run();
    EXPECT_EQ(parameter_hash(r.state.student), before);
    EXPECT_GT(r.log.front().l_total, 0.0);
}

TEST(Fit, SameSeedIsBitwiseDeterministic) {
    const Rig s(small_experiment(2));
    TempDir a, b;
    FitOptions oa, ob;
    oa.out_dir = a.path();
    ob.out_dir = b.path();
    const FitResult ra = s.run(oa), rb = s.run(ob);
    EXPECT_EQ(state_hash(ra.state), state_hash(rb.state));
    EXPECT_EQ(slurp(a / "model.agpk"), slurp(b / "model.agpk"));
    EXPECT_EQ(slurp(a / "train_log.csv"), slurp(b / "train_log.csv"));

    ExperimentConfig other = small_experiment(2);
    other.model.train.seed = 4;
    EXPECT_NE(state_hash(Rig(other).run().state), state_hash(ra.state));
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
    ExperimentConfig c = small_experiment(4);
    c.model.train.checkpoint_every = 2;
    const Rig s(c);
    TempDir full, part;
    FitOptions of;
    of.out_dir = full.path();
    const FitResult straight = s.run(of);

    FitOptions first;
    first.out_dir = part.path();
    first.max_epochs_this_call = 2;
    s.run(first);
    ASSERT_TRUE(std::filesystem::exists(part / "checkpoint_epoch2.agpk"));
    EXPECT_FALSE(std::filesystem::exists(part / "model.agpk"));
    Checkpoint ck = read_checkpoint(part / "checkpoint_epoch2.agpk");
    EXPECT_EQ(ck.state.epoch, 2);
    EXPECT_EQ(ck.encoder.hash(), s.encoder.hash());
    FitOptions second;
    second.out_dir = part.path();
    const FitResult resumed = s.run(second, std::move(ck.state));

    EXPECT_EQ(state_hash(resumed.state), state_hash(straight.state));
    EXPECT_EQ(slurp(full / "model.agpk"), slurp(part / "model.agpk"));
    EXPECT_EQ(slurp(full / "train_log.csv"), slurp(part / "train_log.csv"));
}

TEST(Fit, LossDecreasesUnderConstantSchedule) {
    ExperimentConfig c = small_experiment(12, 10, 5);
    c.model.noise.p = 1.0;
    c.model.noise.m = 1.0;
    c.model.noise.img_ratio_start = c.model.noise.img_ratio_end = 0.6;
    const Rig s(c);
    const FitResult r = s.run();
    EXPECT_EQ(r.epochs.front().alpha, r.epochs.back().alpha);
    EXPECT_LT(r.epochs.back().l_total, r.epochs.front().l_total);
}

TEST(Fit, EncoderIsNeverModified) {
    const Rig s(small_experiment(1));
    const std::uint64_t before = s.encoder.hash();
    s.run();
    EXPECT_EQ(s.encoder.hash(), before);
}

TEST(Fit, TeacherFollowsStudentOnCadence) {
    ExperimentConfig c = small_experiment(5);
    const Rig s(c);
    const FitResult r = s.run();
    EXPECT_EQ(r.state.global_step, 10u);
    EXPECT_EQ(r.state.teacher.step_counter, 10u);
    EXPECT_NE(parameter_hash(r.state.teacher.shadow), parameter_hash(init_params(c.model.decoder)));
    EXPECT_NE(parameter_hash(r.state.teacher.shadow), parameter_hash(r.state.student));
}

TEST(Fit, NonFiniteLossAbortsWithSnapshot) {
    ExperimentConfig c = small_experiment(1);
    c.model.noise.gamma = 1e300;
    c.model.noise.m = 1.0;
    const Rig s(c);
    TempDir dir;
    FitOptions o;
    o.out_dir = dir.path();
    try {
        s.run(o);
        FAIL() << "expected NonFiniteLoss";
    } catch (const NonFiniteLoss& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric);
        EXPECT_EQ(e.metrics().epoch, 0);
    }
    EXPECT_TRUE(std::filesystem::exists(dir / "diagnostic_snapshot.agpk"));
    EXPECT_FALSE(std::filesystem::exists(dir / "model.agpk"));
}

TEST(TrainStep, BatchOrderDoesNotChangeLossWithoutNoise) {
    ExperimentConfig c = small_experiment(1);
    c.model.train.lr = 0.0;
    c.model.train.ablation.image_noise = NoiseArm::off;
    c.model.train.ablation.feature_noise = NoiseArm::off;
    const Rig s(c);
    std::vector<CleanView> views;
    std::vector<Image> images;
    for (std::size_t i : s.manifest.indices(Split::train)) images.push_back(s.manifest.load(i, 32).pixels);
    for (const auto& img : images) views.push_back(clean_view(s.encoder, img));
    DecoderConfig dec = c.model.decoder;
    TrainState st = init_train_state(dec, c.model.train);
    // A non-trivial head so the loss is not identically zero.
    Rng rng(5);
    for (Eigen::Index i = 0; i < st.student.head_weight.size(); ++i) st.student.head_weight.data()[i] = normal(rng, 0, 0.1);
    std::vector<TrainingExample> fwd, rev;
    for (std::size_t i = 0; i < 5; ++i) fwd.push_back({&images[i], &views[i].features, &views[i].prior});
    rev.assign(fwd.rbegin(), fwd.rend());
    TrainState a = st, b = st;
    const StepMetrics ma = train_step(fwd, a, s.encoder, c.model);
    const StepMetrics mb = train_step(rev, b, s.encoder, c.model);
    EXPECT_GT(ma.l_total, 0.0);
    EXPECT_NEAR(ma.l_total, mb.l_total, 1e-12 * ma.l_total);
}

TEST(TrainStep, NoNoiseArmLossIsZeroAtInit) {
    ExperimentConfig c = small_experiment(1);
    c.model.train.ablation.image_noise = NoiseArm::off;
    c.model.train.ablation.feature_noise = NoiseArm::off;
    const Rig s(c);
    const FitResult r = s.run();
    EXPECT_EQ(r.log.front().l_total, 0.0);
}

TEST(Checkpoint, RoundTripRestoresState) {
    const Rig s(small_experiment(1));
    const FitResult r = s.run();
    TempDir dir;
    write_checkpoint(dir / "ck.agpk", r.state, s.encoder, resolved_json(s.cfg));
    const Checkpoint ck = read_checkpoint(dir / "ck.agpk");
    EXPECT_EQ(state_hash(ck.state), state_hash(r.state));
    EXPECT_EQ(ck.state.epoch, r.state.epoch);
    EXPECT_EQ(ck.state.seed, r.state.seed);
    EXPECT_EQ(ck.model.decoder.dim, s.cfg.model.decoder.dim);
    EXPECT_EQ(ck.resolved_config, resolved_json(s.cfg));
}

TEST(Checkpoint, CorruptFileIsLoadError) {
    TempDir dir;
    {
        std::ofstream out(dir / "bad.agpk", std::ios::binary);
        out << "not an archive";
    }
    EXPECT_EQ(error_kind_of([&] { read_checkpoint(dir / "bad.agpk"); }), ErrorKind::load);
}

TEST(TrainLog, HeaderAndRowCount) {
    const Rig s(small_experiment(2));
    TempDir dir;
    FitOptions o;
    o.out_dir = dir.path();
    s.run(o);
    std::ifstream in(dir / "train_log.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, kTrainLogHeader);
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 4);
}

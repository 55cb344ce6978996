#include "oracles.hpp"
#include "test_util.hpp"

#include <fstream>

using namespace agp;
using agp::testing::TempDir;
using agp::testing::error_kind_of;
using agp::testing::random_features;

namespace {

struct SmallModel {
    VitEncoder encoder = build_toy_encoder(2, 2, 16, 2, 8, 32);
    DecoderConfig dec;
    DecoderParams params;

    SmallModel() {
        dec.depth = 1;
        dec.dim = 16;
        dec.heads = 2;
        params = init_params(dec);
        Rng rng(9);
        for (Eigen::Index i = 0; i < params.head_weight.size(); ++i) params.head_weight.data()[i] = normal(rng, 0, 0.1);
    }
    InferenceModel model() const { return {&encoder, &params, dec}; }
};

DatasetManifest small_toy(int normal, int anomalous) {
    ToyDatasetSpec s;
    s.n_categories = 1;
    s.n_train_per_cat = 0;
    s.n_test_normal = normal;
    s.n_test_anomalous = anomalous;
    s.image_size = 32;
    return generate_toy_dataset(s);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace

TEST(ReconstructionError, PerfectReconstructionIsZero) {
    Rng rng(1);
    const FeatureMap f = random_features(rng, 4, 4, 6);
    const AnomalyMap a = anomaly_map(f, f, 32, 32, {});
    for (double v : a.feature_scores.data) EXPECT_EQ(v, 0.0);
    for (double v : a.pixel_scores.data) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(a.image_score, 0.0);
}

TEST(ReconstructionError, EuclideanNormOverChannels) {
    FeatureMap f(2, 2, 2), r(2, 2, 2);
    r.tokens(3, 0) = 3;
    r.tokens(3, 1) = 4;
    const Plane m = reconstruction_error(f, r);
    EXPECT_EQ(m.data, (std::vector<double>{0, 0, 0, 5}));
}

TEST(ReconstructionError, MatchesScalarOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        const FeatureMap f = random_features(rng, 3, 5, 7), r = random_features(rng, 3, 5, 7);
        const Plane m = reconstruction_error(f, r);
        const auto o = oracle::error_map(f.tokens, r.tokens);
        for (std::size_t i = 0; i < o.size(); ++i) EXPECT_LT(oracle::rel_err(m.data[i], o[i]), 1e-12);
        EXPECT_LT(oracle::rel_err(image_score(m, {}), oracle::image_score(o, 3, 5, 3)), 1e-12);
    }
}

TEST(ReconstructionError, ShapeMismatch) {
    Rng rng(3);
    EXPECT_EQ(error_kind_of([&] { reconstruction_error(random_features(rng, 2, 2, 3), random_features(rng, 2, 2, 4)); }),
              ErrorKind::shape);
}

TEST(Pooling, ExcludesPaddingFromDivisor) {
    Plane m(3, 3);
    m.data = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    const Plane p = average_pool(m, 3);
    EXPECT_DOUBLE_EQ(p.at(1, 1), 5.0);
    EXPECT_DOUBLE_EQ(p.at(0, 0), (1 + 2 + 4 + 5) / 4.0);
    EXPECT_DOUBLE_EQ(p.at(0, 1), (1 + 2 + 3 + 4 + 5 + 6) / 6.0);
    EXPECT_EQ(average_pool(m, 1).data, m.data);
    EXPECT_EQ(error_kind_of([&] { average_pool(m, 2); }), ErrorKind::config);
}

TEST(Pooling, SinglePeakIsSmoothed) {
    Plane m(5, 5);
    m.at(2, 2) = 9.0;
    EXPECT_DOUBLE_EQ(image_score(m, {}), 1.0);
    EXPECT_DOUBLE_EQ(image_score(m, ScoringConfig{1}), 9.0);
}

TEST(Upsampling, PreservesNonnegativityAndBoundsMax) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const FeatureMap f = random_features(rng, 4, 4, 3), r = random_features(rng, 4, 4, 3);
        const AnomalyMap a = anomaly_map(f, r, 32, 32, {});
        EXPECT_EQ(a.pixel_scores.height, 32);
        const double top = *std::max_element(a.feature_scores.data.begin(), a.feature_scores.data.end());
        for (double v : a.pixel_scores.data) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, top + 1e-12);
        }
    }
}

TEST(RawMap, RoundTripIsExact) {
    TempDir dir;
    Rng rng(5);
    Plane p = agp::testing::random_plane(rng, 7, 3, -1e3, 1e3);
    p.data[0] = 1e-300;
    write_raw_map(dir / "m.npyish", p);
    EXPECT_EQ(read_raw_map(dir / "m.npyish"), p);
    EXPECT_EQ(std::filesystem::file_size(dir / "m.npyish"), 8u + 12u + 21u * 8u);
    const std::string bytes = slurp(dir / "m.npyish");
    EXPECT_EQ(bytes.substr(0, 7), "AGPRAW1");
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 7u); // height, little-endian
}

TEST(RawMap, BadMagicIsLoadError) {
    TempDir dir;
    {
        std::ofstream out(dir / "bad.npyish", std::ios::binary);
        out << "NOTAMAP!xxxxxxxxxxxx";
    }
    EXPECT_EQ(error_kind_of([&] { read_raw_map(dir / "bad.npyish"); }), ErrorKind::load);
}

TEST(Heatmap, WritesPngAndSidecar) {
    TempDir dir;
    AnomalyMap a;
    a.sample_id = "cat/test/defect/003";
    a.pixel_scores = Plane(8, 8);
    a.pixel_scores.at(3, 3) = 2.0;
    write_heatmap(dir.path(), a);
    ASSERT_TRUE(std::filesystem::exists(dir / "cat_test_defect_003_amap.png"));
    const Raster8 r = detail::read_png8(dir / "cat_test_defect_003_amap.png");
    EXPECT_EQ(r.data[3 * 8 + 3], 255);
    EXPECT_EQ(r.data[0], 0);
    EXPECT_EQ(read_raw_map(dir / "cat_test_defect_003_amap.npyish"), a.pixel_scores);
}

TEST(Score, UntrainedDecoderGivesZeroMap) {
    const SmallModel sm;
    DecoderParams zero = init_params(sm.dec);
    const InferenceModel m{&sm.encoder, &zero, sm.dec};
    Rng rng(6);
    const AnomalyMap a = score(agp::testing::random_image(rng, 32, 32), m);
    EXPECT_EQ(a.image_score, 0.0);
}

TEST(Score, MatchesManualPipeline) {
    const SmallModel sm;
    Rng rng(7);
    const Image img = agp::testing::random_image(rng, 32, 32);
    const AnomalyMap a = score(img, sm.model());
    const CleanFeatures f = fuse_features(sm.encoder.extract(img));
    const Matrix r = decode(f, sm.params, sm.dec).reconstructed.tokens;
    const auto o = oracle::error_map(f.tokens, r);
    EXPECT_LT(oracle::rel_err(a.image_score, oracle::image_score(o, 4, 4, 3)), 1e-12);
}

TEST(ScoreDataset, EmptySplitGivesEmptyTable) {
    const SmallModel sm;
    TempDir dir;
    const auto rows = score_dataset(small_toy(0, 0), sm.model());
    EXPECT_TRUE(rows.empty());
    write_score_table(dir / "s.csv", rows);
    EXPECT_EQ(slurp(dir / "s.csv"), "sample_id,category,label,image_score\n");
}

TEST(ScoreDataset, OneRowPerSampleAndDeterministic) {
    const SmallModel sm;
    const DatasetManifest m = small_toy(3, 2);
    TempDir dir;
    const auto a = score_dataset(m, sm.model());
    ASSERT_EQ(a.size(), 5u);
    EXPECT_EQ(a[3].label, Label::anomalous);
    EXPECT_TRUE(a[3].gt_mask.has_value());
    EXPECT_FALSE(a[0].gt_mask.has_value());
    write_score_table(dir / "a.csv", a);
    write_score_table(dir / "b.csv", score_dataset(m, sm.model()));
    EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
    std::ifstream in(dir / "a.csv");
    std::string line;
    int n = 0;
    while (std::getline(in, line)) ++n;
    EXPECT_EQ(n, 6);
}

TEST(ScoreDataset, MissingModelIsUsageError) {
    EXPECT_EQ(error_kind_of([] { score_dataset(small_toy(1, 0), InferenceModel{}); }), ErrorKind::usage);
}

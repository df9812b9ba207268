#include "ssmprobe/feature_store.hpp"
#include "ssmprobe/trainer.hpp"
#include "test_util.hpp"

#include <set>

using namespace ssmprobe;

namespace {

FeatureSet random_set(std::size_t n_samples, std::uint32_t h, std::uint32_t w, std::uint32_t d, std::uint64_t seed) {
    auto rng = make_rng(seed, "test-set");
    FeatureSet set;
    set.grid_h = h;
    set.grid_w = w;
    set.d = d;
    set.num_classes = 3;
    for (std::size_t i = 0; i < n_samples; ++i) {
        FeatureSample s;
        s.patch_tokens = testutil::random_matrix(rng, h * w, d).cast<float>();
        s.cls_token = random_normal(rng, d, 1.0).cast<float>();
        s.label = static_cast<std::uint32_t>(i % 3);
        set.samples.push_back(s);
    }
    return set;
}

}  // namespace

TEST(FeatureFormat, RoundTripIsBitExact) {
    testutil::TempDir tmp;
    const auto set = random_set(7, 3, 2, 5, 1);
    write_features(set, tmp.file("a.ssmp"));
    const auto back = read_features(tmp.file("a.ssmp"));
    EXPECT_TRUE(set.same_payload(back));
    for (std::size_t i = 0; i < set.size(); ++i) EXPECT_EQ(set.samples[i], back.samples[i]);
}

TEST(FeatureFormat, FileSizeFollowsLayout) {
    testutil::TempDir tmp;
    const auto set = random_set(1, 2, 2, 2, 2);
    write_features(set, tmp.file("one.ssmp"));
    // magic + 6 u32 header fields + (d CLS + N*d patch) f32 + u32 label
    EXPECT_EQ(testutil::read_bytes(tmp.file("one.ssmp")).size(), 4u + 6 * 4 + (2 + 4 * 2) * 4 + 4);
}

TEST(FeatureFormat, EmptySetIsValid) {
    testutil::TempDir tmp;
    auto set = random_set(0, 2, 2, 2, 3);
    write_features(set, tmp.file("empty.ssmp"));
    const auto back = read_features(tmp.file("empty.ssmp"));
    EXPECT_EQ(back.size(), 0u);
    EXPECT_EQ(back.grid_h, 2u);
}

TEST(FeatureFormat, RefusesNonFiniteValues) {
    testutil::TempDir tmp;
    auto set = random_set(2, 2, 2, 2, 4);
    set.samples[1].patch_tokens(3, 1) = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW_MSG(write_features(set, tmp.file("nan.ssmp")), "non-finite value");
    auto set2 = random_set(2, 2, 2, 2, 4);
    set2.samples[0].cls_token[0] = std::numeric_limits<float>::infinity();
    EXPECT_THROW_MSG(write_features(set2, tmp.file("inf.ssmp")), "non-finite value");
}

TEST(FeatureFormat, RejectsNonFiniteOnRead) {
    testutil::TempDir tmp;
    const auto set = random_set(1, 1, 2, 1, 5);
    write_features(set, tmp.file("x.ssmp"));
    auto bytes = testutil::read_bytes(tmp.file("x.ssmp"));
    // first CLS float sits right after the 28-byte header
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(bytes.data() + 28, &nan, 4);
    std::ofstream(tmp.file("x.ssmp"), std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                              static_cast<std::streamsize>(bytes.size()));
    EXPECT_THROW_MSG(read_features(tmp.file("x.ssmp")), "non-finite value");
}

TEST(FeatureFormat, RefusesInvariantViolations) {
    testutil::TempDir tmp;
    auto set = random_set(2, 2, 2, 2, 6);
    set.samples[0].label = 3;
    EXPECT_THROW(write_features(set, tmp.file("l.ssmp")), Error);
    auto set2 = random_set(2, 2, 2, 2, 6);
    set2.samples[1].patch_tokens = MatrixF::Zero(3, 2);
    EXPECT_THROW(write_features(set2, tmp.file("s.ssmp")), Error);
}

TEST(FeatureFormat, BadMagic) {
    testutil::TempDir tmp;
    testutil::write_text(tmp.file("bad.ssmp"), "NOPE0000000000000000000000000000");
    EXPECT_THROW_MSG(read_features(tmp.file("bad.ssmp")), "bad magic");
}

TEST(FeatureFormat, VersionMismatch) {
    testutil::TempDir tmp;
    write_features(random_set(1, 1, 1, 1, 7), tmp.file("v.ssmp"));
    auto bytes = testutil::read_bytes(tmp.file("v.ssmp"));
    bytes[4] = 9;
    std::ofstream(tmp.file("v.ssmp"), std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                              static_cast<std::streamsize>(bytes.size()));
    EXPECT_THROW_MSG(read_features(tmp.file("v.ssmp")), "version mismatch");
}

TEST(FeatureFormat, TruncatedPayload) {
    testutil::TempDir tmp;
    // Header claims 14x14 tokens; drop one token row (d floats) from the payload.
    const std::uint32_t d = 3;
    auto set = random_set(1, 14, 14, d, 8);
    write_features(set, tmp.file("t.ssmp"));
    auto bytes = testutil::read_bytes(tmp.file("t.ssmp"));
    bytes.resize(bytes.size() - 4 * d - 4);
    std::ofstream(tmp.file("t.ssmp"), std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                              static_cast<std::streamsize>(bytes.size()));
    EXPECT_THROW_MSG(read_features(tmp.file("t.ssmp")), "truncated payload");
}

TEST(FeatureFormat, TrailingBytesRejected) {
    testutil::TempDir tmp;
    write_features(random_set(1, 1, 2, 2, 9), tmp.file("e.ssmp"));
    std::ofstream(tmp.file("e.ssmp"), std::ios::binary | std::ios::app) << "xx";
    EXPECT_THROW_MSG(read_features(tmp.file("e.ssmp")), "payload size does not match header");
}

TEST(FeatureFormat, MissingFile) { EXPECT_THROW(read_features("/nonexistent/file.ssmp"), Error); }

// ---------------------------------------------------------------------------

TEST(Synthetic, DeterministicUnderSeed) {
    testutil::TempDir tmp;
    SynthSpec spec;
    spec.seed = 7;
    spec.n_samples = 20;
    spec.distractor_rate = 0.3;
    spec.center_bias = 0.5;
    write_features(generate_synthetic(spec), tmp.file("a.ssmp"));
    write_features(generate_synthetic(spec), tmp.file("b.ssmp"));
    EXPECT_EQ(testutil::read_bytes(tmp.file("a.ssmp")), testutil::read_bytes(tmp.file("b.ssmp")));
    spec.seed = 8;
    write_features(generate_synthetic(spec), tmp.file("c.ssmp"));
    EXPECT_NE(testutil::read_bytes(tmp.file("a.ssmp")), testutil::read_bytes(tmp.file("c.ssmp")));
}

TEST(Synthetic, SplitsShareClassMeansButNotSamples) {
    SynthSpec a;
    a.n_samples = 5;
    SynthSpec b = a;
    b.split_tag = "eval";
    const auto ma = synthetic_class_means(a), mb = synthetic_class_means(b);
    for (std::size_t c = 0; c < ma.size(); ++c) EXPECT_EQ(ma[c], mb[c]);
    EXPECT_FALSE(generate_synthetic(a).same_payload(generate_synthetic(b)));
}

TEST(Synthetic, ClsIsMeanOfPatches) {
    SynthSpec spec;
    spec.n_samples = 3;
    const auto set = generate_synthetic(spec);
    for (const auto& s : set.samples)
        EXPECT_LT((s.cls() - s.patches().colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Synthetic, AllNeedlesNoNoiseGivesClassMeans) {
    SynthSpec spec;
    spec.n_samples = 200;
    spec.grid_h = 2;
    spec.grid_w = 2;
    spec.d = 8;
    spec.num_classes = 4;
    spec.needle_count = 4;
    spec.noise_scale = 0.0;
    const auto set = generate_synthetic(spec);
    const auto means = synthetic_class_means(spec);
    for (const auto& s : set.samples)
        for (Eigen::Index r = 0; r < 4; ++r)
            EXPECT_LT((s.patches().row(r).transpose() - means[s.label].cast<float>().cast<double>()).cwiseAbs().maxCoeff(),
                      1e-12);

    // A GAP linear probe separates the classes on the training set.
    TrainConfig cfg;
    cfg.lr = 0.05;
    cfg.batch_size = 32;
    cfg.epochs = 30;
    HeadSpec gap;
    gap.name = "gap";
    ProbeData data(set);
    const auto run = train_joint({gap}, data, data, cfg);
    EXPECT_GE(run.heads[0].best_eval_acc, 0.99);
}

TEST(Synthetic, MaxPoolOracleFindsSingleNeedle) {
    SynthSpec spec;
    spec.n_samples = 500;
    spec.d = 16;
    spec.num_classes = 10;
    spec.needle_count = 1;
    spec.distractor_rate = 0.0;
    spec.signal_scale = 8.0;
    spec.noise_scale = 0.5;
    spec.seed = 3;
    const auto set = generate_synthetic(spec);
    const auto means = synthetic_class_means(spec);
    std::size_t correct = 0;
    for (const auto& s : set.samples) {
        const Matrix t = s.patches();
        double best = -1e300;
        std::uint32_t arg = 0;
        for (Eigen::Index k = 0; k < t.rows(); ++k)
            for (std::uint32_t c = 0; c < spec.num_classes; ++c) {
                const double v = t.row(k).dot(means[c]);
                if (v > best) {
                    best = v;
                    arg = c;
                }
            }
        correct += arg == s.label;
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(set.size()), 0.99);
}

TEST(Synthetic, CenterBiasPlacesNeedlesCentrally) {
    SynthSpec spec;
    spec.n_samples = 300;
    spec.noise_scale = 0.0;
    spec.center_bias = 1.0;
    spec.seed = 11;
    const auto set = generate_synthetic(spec);
    const auto center = central_cells(spec.grid_h, spec.grid_w);
    EXPECT_EQ(center, (std::vector<std::size_t>{5, 6, 9, 10}));
    for (const auto& s : set.samples) {
        const Matrix t = s.patches();
        for (Eigen::Index k = 0; k < t.rows(); ++k) {
            const bool nonzero = t.row(k).norm() > 0;
            const bool central = std::find(center.begin(), center.end(), static_cast<std::size_t>(k)) != center.end();
            if (nonzero) {
                EXPECT_TRUE(central);
            }
        }
    }
}

TEST(Synthetic, SpecValidation) {
    SynthSpec spec;
    spec.needle_count = 17;
    EXPECT_THROW_MSG(generate_synthetic(spec), "needle_count must be in [1, N]");
    spec.needle_count = 0;
    EXPECT_THROW(generate_synthetic(spec), Error);
    spec = SynthSpec{};
    spec.distractor_rate = 1.5;
    EXPECT_THROW(generate_synthetic(spec), Error);
    spec = SynthSpec{};
    spec.noise_scale = -1;
    EXPECT_THROW(generate_synthetic(spec), Error);
}

// ---------------------------------------------------------------------------

TEST(Batches, SizesAndShortLastBatch) {
    const auto b = iterate_batches(10, 4, 0, 0);
    ASSERT_EQ(b.size(), 3u);
    EXPECT_EQ(b[0].size(), 4u);
    EXPECT_EQ(b[1].size(), 4u);
    EXPECT_EQ(b[2].size(), 2u);
}

TEST(Batches, EpochIsAPartition) {
    for (std::uint64_t epoch = 0; epoch < 5; ++epoch) {
        std::multiset<std::size_t> seen;
        for (const auto& b : iterate_batches(23, 5, 42, epoch)) seen.insert(b.begin(), b.end());
        ASSERT_EQ(seen.size(), 23u);
        std::size_t i = 0;
        for (auto v : seen) EXPECT_EQ(v, i++);
    }
}

TEST(Batches, DeterministicAndSeedSensitive) {
    EXPECT_EQ(iterate_batches(50, 7, 1, 3), iterate_batches(50, 7, 1, 3));
    EXPECT_NE(iterate_batches(50, 7, 1, 3), iterate_batches(50, 7, 1, 4));
    std::size_t differ = 0;
    for (std::uint64_t t = 0; t < 100; ++t) differ += epoch_order(3, 1, t) != epoch_order(3, 2, t);
    EXPECT_GE(differ, 1u);
}

TEST(Batches, EmptySetAndZeroBatch) {
    EXPECT_TRUE(iterate_batches(0, 4, 0, 0).empty());
    EXPECT_THROW(iterate_batches(5, 0, 0, 0), Error);
}

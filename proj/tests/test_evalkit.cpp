#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "caplab/evalkit.hpp"

using namespace caplab;
using evalkit::LabelList;
using evalkit::TaskKind;
using numkit::DenseMatrix;

namespace {

LabelList ids(std::initializer_list<std::uint32_t> single) {
    LabelList out;
    for (const auto id : single) out.push_back({id});
    return out;
}

trainer::TrainedModel tiny_model() {
    world::UniverseConfig uc;
    uc.num_objects = 12;
    uc.embed_dim = 16;
    uc.synonyms_per_object = 2;
    uc.noise_vocab_size = 16;
    uc.seed = 401;
    const auto u = world::make_universe(uc);
    world::DatasetSpec spec;
    spec.n = 48;
    spec.captions_per_image = 1;
    spec.seed = 402;
    const auto ds = world::build_dataset(spec, u);

    trainer::TrainConfig cfg = trainer::desk_config(trainer::clip_mode());
    cfg.batch_size = 16;
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.seed = 403;
    objective::EncoderConfig arch;
    arch.input_dim = 16;
    arch.hidden_width = 24;
    arch.feature_dim = 24;
    arch.proj_dim = 12;
    arch.text_token_dim = 12;
    return trainer::train(ds, cfg, arch);
}

// Two linearly separable classes along dimension zero plus nuisance noise.
void separable_features(std::size_t n, std::size_t d, std::uint64_t seed, DenseMatrix& x,
                        LabelList& labels) {
    Rng rng = derive_stream(seed, "separable");
    x = DenseMatrix(n, d);
    labels.clear();
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t c = i % 2;
        x.at(i, 0) = (c == 0 ? 2.0 : -2.0) + rng.normal(0.0, 0.3);
        for (std::size_t j = 1; j < d; ++j) x.at(i, j) = rng.normal();
        labels.push_back({c});
    }
}

evalkit::ProbeConfig quick_probe_config() {
    evalkit::ProbeConfig cfg = evalkit::desk_probe_config();
    cfg.epochs = 12;
    cfg.lr_grid = {0.1, 1.0};
    cfg.seeds = 2;
    return cfg;
}

} // namespace

// --- probe config ----------------------------------------------------------

TEST(ProbeConfigTest, DefaultsMatchPublishedProtocol) {
    const evalkit::ProbeConfig cfg = evalkit::default_probe_config();
    EXPECT_EQ(cfg.epochs, 250u);
    EXPECT_EQ(cfg.batch_size, 256u);
    EXPECT_EQ(cfg.weight_decay, 1e-6);
    EXPECT_EQ(cfg.momentum, 0.9);
    ASSERT_EQ(cfg.lr_grid.size(), 6u);
    EXPECT_EQ(cfg.lr_grid.front(), 0.03);
    EXPECT_EQ(cfg.lr_grid.back(), 10.0);
    EXPECT_EQ(cfg.seeds, 3u);
    EXPECT_NO_THROW(cfg.validate());

    const evalkit::ProbeConfig desk = evalkit::desk_probe_config();
    EXPECT_EQ(desk.epochs, 40u);
    EXPECT_EQ(desk.batch_size, 64u);
    EXPECT_EQ(desk.weight_decay, cfg.weight_decay);
    EXPECT_EQ(desk.momentum, cfg.momentum);
}

TEST(ProbeConfigTest, ValidateRejectsBadFields) {
    const auto broken = [](auto mutate) {
        evalkit::ProbeConfig cfg = evalkit::desk_probe_config();
        mutate(cfg);
        return cfg;
    };
    using C = evalkit::ProbeConfig;
    EXPECT_THROW(broken([](C& c) { c.epochs = 0; }).validate(), ParameterError);
    EXPECT_THROW(broken([](C& c) { c.batch_size = 0; }).validate(), ParameterError);
    EXPECT_THROW(broken([](C& c) { c.weight_decay = -1.0; }).validate(), ParameterError);
    EXPECT_THROW(broken([](C& c) { c.momentum = 1.0; }).validate(), ParameterError);
    EXPECT_THROW(broken([](C& c) { c.lr_grid = {}; }).validate(), ParameterError);
    EXPECT_THROW(broken([](C& c) { c.lr_grid = {0.1, 0.1}; }).validate(), ParameterError);
    EXPECT_THROW(broken([](C& c) { c.lr_grid = {0.0, 1.0}; }).validate(), ParameterError);
    EXPECT_THROW(broken([](C& c) { c.seeds = 0; }).validate(), ParameterError);
}

// --- feature extraction ----------------------------------------------------

TEST(ExtractFeaturesTest, ShapeAndDeterminism) {
    const auto model = tiny_model();
    DenseMatrix images(5, 16);
    Rng rng = derive_stream(1, "imgs");
    for (auto& v : images.data) v = rng.normal();
    for (std::size_t j = 0; j < images.cols; ++j) images.at(4, j) = images.at(0, j);

    const std::uint64_t before = model.stack.fingerprint();
    const DenseMatrix a = evalkit::extract_features(model, images);
    const DenseMatrix b = evalkit::extract_features(model, images);
    EXPECT_EQ(model.stack.fingerprint(), before); // encoder stays frozen

    EXPECT_EQ(a.rows, 5u);
    EXPECT_EQ(a.cols, model.arch.feature_dim);
    EXPECT_EQ(a, b);
    for (std::size_t j = 0; j < a.cols; ++j)
        EXPECT_EQ(a.at(4, j), a.at(0, j)); // identical inputs, identical rows
}

TEST(ExtractFeaturesTest, ExampleOverloadMatchesMatrixOverload) {
    const auto model = tiny_model();
    world::UniverseConfig uc;
    uc.num_objects = 12;
    uc.embed_dim = 16;
    uc.synonyms_per_object = 2;
    uc.noise_vocab_size = 16;
    uc.seed = 401;
    const auto u = world::make_universe(uc);
    world::DatasetSpec spec;
    spec.n = 7;
    spec.seed = 11;
    const auto ds = world::build_dataset(spec, u);

    DenseMatrix images(ds.examples.size(), 16);
    for (std::size_t i = 0; i < ds.examples.size(); ++i)
        std::copy(ds.examples[i].image.begin(), ds.examples[i].image.end(),
                  images.row(i).begin());
    EXPECT_EQ(evalkit::extract_features(model, ds.examples),
              evalkit::extract_features(model, images));
}

TEST(ExtractFeaturesTest, RejectsWrongWidth) {
    const auto model = tiny_model();
    EXPECT_THROW(evalkit::extract_features(model, DenseMatrix(3, 9)), DimensionError);
}

// --- class balanced accuracy -----------------------------------------------

TEST(BalancedAccuracyTest, PerfectPredictionsScoreOne) {
    const LabelList truth = ids({0, 1, 2, 0, 1, 2});
    EXPECT_EQ(evalkit::class_balanced_accuracy(truth, truth, 3, TaskKind::multiclass), 1.0);
}

TEST(BalancedAccuracyTest, BalancingIgnoresClassSizes) {
    // Class 0: 1 example, all correct. Class 1: 7 examples, all wrong.
    const LabelList truth = ids({0, 1, 1, 1, 1, 1, 1, 1});
    const LabelList pred = ids({0, 0, 0, 0, 0, 0, 0, 0});
    EXPECT_EQ(evalkit::class_balanced_accuracy(pred, truth, 2, TaskKind::multiclass), 0.5);
}

TEST(BalancedAccuracyTest, HandBuiltThreeClassCase) {
    // Recalls 1.0 (2/2), 0.5 (2/4), 0.0 (0/3) average to 0.5.
    const LabelList truth = ids({0, 0, 1, 1, 1, 1, 2, 2, 2});
    const LabelList pred = ids({0, 0, 1, 1, 0, 0, 0, 1, 1});
    EXPECT_DOUBLE_EQ(evalkit::class_balanced_accuracy(pred, truth, 3, TaskKind::multiclass),
                     0.5);
}

TEST(BalancedAccuracyTest, DuplicatingOneClassLeavesScoreUnchanged) {
    const LabelList truth = ids({0, 0, 1, 1, 1, 2, 2});
    const LabelList pred = ids({0, 1, 1, 1, 2, 2, 0});
    const double base = evalkit::class_balanced_accuracy(pred, truth, 3, TaskKind::multiclass);
    LabelList truth2 = truth;
    LabelList pred2 = pred;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i][0] == 1) {
            truth2.push_back(truth[i]);
            pred2.push_back(pred[i]);
        }
    }
    EXPECT_DOUBLE_EQ(evalkit::class_balanced_accuracy(pred2, truth2, 3, TaskKind::multiclass),
                     base);
}

TEST(BalancedAccuracyTest, AbsentClassIsExcludedWithWarning) {
    const LabelList truth = ids({0, 0, 1, 1});
    const LabelList pred = ids({0, 0, 1, 0});
    testing::internal::CaptureStderr();
    const double acc = evalkit::class_balanced_accuracy(pred, truth, 3, TaskKind::multiclass);
    const std::string err = testing::internal::GetCapturedStderr();
    EXPECT_DOUBLE_EQ(acc, 0.75); // recalls 1.0 and 0.5 over the two present classes
    EXPECT_NE(err.find("class 2 absent"), std::string::npos);
}

TEST(BalancedAccuracyTest, MultilabelHandCase) {
    // Label 0: pos {e0,e1}, neg {e2,e3}. Predictions hit both positives and
    // one negative -> TPR 1, TNR 0.5 -> 0.75. Label 1: TPR 0.5, TNR 1 -> 0.75.
    const LabelList truth = {{0}, {0, 1}, {1}, {}};
    const LabelList pred = {{0}, {0}, {0, 1}, {}};
    EXPECT_DOUBLE_EQ(evalkit::class_balanced_accuracy(pred, truth, 2, TaskKind::multilabel),
                     0.75);
}

TEST(BalancedAccuracyTest, ConstantLabelExcludedAndFullyConstantThrows) {
    const LabelList truth = {{0}, {0}, {0, 1}, {0}};
    const LabelList pred = {{0}, {}, {1}, {0}};
    testing::internal::CaptureStderr();
    const double acc = evalkit::class_balanced_accuracy(pred, truth, 2, TaskKind::multilabel);
    const std::string err = testing::internal::GetCapturedStderr();
    EXPECT_NE(err.find("label 0 is constant"), std::string::npos);
    EXPECT_DOUBLE_EQ(acc, 1.0); // only label 1 scored: TPR 1, TNR 1

    const LabelList all_pos = {{0}, {0}};
    EXPECT_THROW(
        evalkit::class_balanced_accuracy(all_pos, all_pos, 1, TaskKind::multilabel),
        DegenerateTaskError);
}

TEST(BalancedAccuracyTest, RejectsBadInputs) {
    const LabelList two = ids({0, 1});
    EXPECT_THROW(evalkit::class_balanced_accuracy({}, {}, 2, TaskKind::multiclass), DataError);
    EXPECT_THROW(evalkit::class_balanced_accuracy(two, ids({0}), 2, TaskKind::multiclass),
                 DataError);
    EXPECT_THROW(evalkit::class_balanced_accuracy(ids({0, 7}), two, 2, TaskKind::multiclass),
                 DataError);
    const LabelList multi = {{0, 1}, {0}};
    EXPECT_THROW(evalkit::class_balanced_accuracy(multi, two, 2, TaskKind::multiclass),
                 ParameterError);
}

// --- bootstrap -------------------------------------------------------------

TEST(BootstrapTest, DegenerateInputGivesZeroWidth) {
    const std::vector<double> values(50, 0.7);
    Rng rng = derive_stream(5, "boot");
    const auto ci = evalkit::bootstrap_ci(values, 0.95, 200, rng);
    // Every resample mean is the same 50-term sum, so the width is exactly zero
    // even though that sum rounds slightly away from 0.7.
    EXPECT_EQ(ci.high, ci.low);
    EXPECT_NEAR(ci.low, 0.7, 1e-12);
}

TEST(BootstrapTest, BernoulliWidthMatchesNormalApproximation) {
    Rng data_rng = derive_stream(17, "bern");
    std::vector<double> values(1000);
    for (auto& v : values) v = data_rng.bernoulli(0.5) ? 1.0 : 0.0;
    Rng rng = derive_stream(18, "boot");
    const auto ci = evalkit::bootstrap_ci(values, 0.95, 2000, rng);
    const double width = ci.high - ci.low;
    const double expected = 2.0 * 1.96 * std::sqrt(0.25 / 1000.0); // 0.062
    EXPECT_NEAR(width, expected, 0.2 * expected);

    double mean = 0.0;
    for (const double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    EXPECT_LE(ci.low, mean);
    EXPECT_GE(ci.high, mean);
}

TEST(BootstrapTest, HigherLevelIntervalContainsLowerLevel) {
    Rng data_rng = derive_stream(19, "vals");
    std::vector<double> values(300);
    for (auto& v : values) v = data_rng.uniform();
    Rng a = derive_stream(20, "boot");
    Rng b = derive_stream(20, "boot");
    const auto ci95 = evalkit::bootstrap_ci(values, 0.95, 500, a);
    const auto ci99 = evalkit::bootstrap_ci(values, 0.99, 500, b);
    EXPECT_LE(ci99.low, ci95.low);
    EXPECT_GE(ci99.high, ci95.high);
}

TEST(BootstrapTest, RejectsBadParameters) {
    Rng rng = derive_stream(1, "boot");
    const std::vector<double> values{1.0, 0.0};
    EXPECT_THROW(evalkit::bootstrap_ci({}, 0.95, 200, rng), DataError);
    EXPECT_THROW(evalkit::bootstrap_ci(values, 0.0, 200, rng), ParameterError);
    EXPECT_THROW(evalkit::bootstrap_ci(values, 1.0, 200, rng), ParameterError);
    EXPECT_THROW(evalkit::bootstrap_ci(values, 0.95, 99, rng), ParameterError);
}

// --- probe training --------------------------------------------------------

TEST(TrainProbeTest, SeparableClassesReachHighAccuracy) {
    evalkit::LabeledFeatures train, val;
    separable_features(200, 4, 31, train.x, train.labels);
    separable_features(100, 4, 32, val.x, val.labels);
    const auto out = evalkit::train_probe(train, val, 2, TaskKind::multiclass,
                                          quick_probe_config(), 7);
    EXPECT_GE(out.validation_accuracy, 0.99);
    EXPECT_EQ(out.seed_models.size(), 2u);
    EXPECT_EQ(out.seed_val_accuracy.size(), 2u);
    EXPECT_TRUE(out.best_lr == 0.1 || out.best_lr == 1.0);
    double mean = 0.0;
    for (const double a : out.seed_val_accuracy) mean += a;
    EXPECT_DOUBLE_EQ(out.validation_accuracy, mean / 2.0);
}

TEST(TrainProbeTest, RandomLabelsScoreNearChance) {
    Rng rng = derive_stream(41, "chance");
    evalkit::LabeledFeatures train, val;
    train.x = DenseMatrix(400, 8);
    for (auto& v : train.x.data) v = rng.normal();
    for (std::size_t i = 0; i < 400; ++i)
        train.labels.push_back({static_cast<std::uint32_t>(rng.uniform_int(4))});
    val.x = DenseMatrix(240, 8);
    for (auto& v : val.x.data) v = rng.normal();
    for (std::size_t i = 0; i < 240; ++i)
        val.labels.push_back({static_cast<std::uint32_t>(rng.uniform_int(4))});
    const auto out = evalkit::train_probe(train, val, 4, TaskKind::multiclass,
                                          quick_probe_config(), 8);
    EXPECT_NEAR(out.validation_accuracy, 0.25, 0.12);
}

TEST(TrainProbeTest, SeparableMultilabelReachesHighAccuracy) {
    Rng rng = derive_stream(43, "ml");
    const std::size_t d = 6;
    const auto build = [&](std::size_t n, evalkit::LabeledFeatures& out) {
        out.x = DenseMatrix(n, d);
        out.labels.assign(n, {});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
                out.x.at(i, j) = sign + rng.normal(0.0, 0.1);
                if (j < 4 && sign > 0.0) out.labels[i].push_back(static_cast<std::uint32_t>(j));
            }
        }
    };
    evalkit::LabeledFeatures train, val;
    build(300, train);
    build(150, val);
    const auto out = evalkit::train_probe(train, val, 4, TaskKind::multilabel,
                                          quick_probe_config(), 9);
    EXPECT_GE(out.validation_accuracy, 0.97);
}

TEST(TrainProbeTest, DeterministicGivenSeed) {
    evalkit::LabeledFeatures train, val;
    separable_features(80, 4, 33, train.x, train.labels);
    separable_features(40, 4, 34, val.x, val.labels);
    const auto cfg = quick_probe_config();
    const auto a = evalkit::train_probe(train, val, 2, TaskKind::multiclass, cfg, 5);
    const auto b = evalkit::train_probe(train, val, 2, TaskKind::multiclass, cfg, 5);
    ASSERT_EQ(a.seed_models.size(), b.seed_models.size());
    for (std::size_t s = 0; s < a.seed_models.size(); ++s) {
        EXPECT_EQ(a.seed_models[s].weight, b.seed_models[s].weight);
        EXPECT_EQ(a.seed_models[s].bias, b.seed_models[s].bias);
    }
    EXPECT_EQ(a.validation_accuracy, b.validation_accuracy);
}

TEST(TrainProbeTest, RejectsDegenerateAndMisalignedInputs) {
    evalkit::LabeledFeatures train, val;
    separable_features(40, 4, 35, train.x, train.labels);
    separable_features(20, 4, 36, val.x, val.labels);
    const auto cfg = quick_probe_config();

    evalkit::LabeledFeatures single = train;
    for (auto& row : single.labels) row = {0};
    EXPECT_THROW(evalkit::train_probe(single, val, 2, TaskKind::multiclass, cfg, 1),
                 DegenerateTaskError);

    evalkit::LabeledFeatures misaligned = train;
    misaligned.labels.pop_back();
    EXPECT_THROW(evalkit::train_probe(misaligned, val, 2, TaskKind::multiclass, cfg, 1),
                 DimensionError);

    evalkit::LabeledFeatures narrow = val;
    narrow.x = DenseMatrix(20, 3);
    EXPECT_THROW(evalkit::train_probe(train, narrow, 2, TaskKind::multiclass, cfg, 1),
                 DimensionError);

    EXPECT_THROW(evalkit::train_probe(train, val, 1, TaskKind::multiclass, cfg, 1),
                 ParameterError);
}

// --- task suite ------------------------------------------------------------

namespace {

world::ObjectUniverse suite_universe(std::uint32_t num_objects, std::uint32_t embed_dim,
                                     std::uint64_t seed) {
    world::UniverseConfig uc;
    uc.num_objects = num_objects;
    uc.embed_dim = embed_dim;
    uc.synonyms_per_object = 2;
    uc.noise_vocab_size = 8;
    uc.seed = seed;
    return world::make_universe(uc);
}

} // namespace

TEST(SuiteTest, SixTasksWithExpectedShapes) {
    const auto suite = evalkit::suite_v1(suite_universe(16, 16, 990), 99);
    ASSERT_EQ(suite.size(), 6u);
    std::map<std::string, const evalkit::TaskData*> by_name;
    for (const auto& t : suite) by_name[t.name] = &t;
    ASSERT_EQ(by_name.size(), 6u); // names unique
    ASSERT_TRUE(by_name.count("object16-clean"));
    ASSERT_TRUE(by_name.count("object16-noisy"));
    ASSERT_TRUE(by_name.count("pair-compose"));
    ASSERT_TRUE(by_name.count("scene-size"));
    ASSERT_TRUE(by_name.count("dominant-object"));
    ASSERT_TRUE(by_name.count("multilabel8"));

    for (const auto& t : suite) {
        EXPECT_EQ(t.train.images.rows, 480u);
        EXPECT_EQ(t.val.images.rows, 240u);
        EXPECT_EQ(t.test.images.rows, 480u);
        EXPECT_EQ(t.train.images.cols, 16u);
        EXPECT_EQ(t.train.labels.size(), 480u);
    }
    EXPECT_EQ(by_name["multilabel8"]->kind, TaskKind::multilabel);
    EXPECT_EQ(by_name["object16-clean"]->num_classes, 16u);
    EXPECT_EQ(by_name["scene-size"]->num_classes, 4u);
}

TEST(SuiteTest, MulticlassSplitsAreExactlyBalanced) {
    const auto suite = evalkit::suite_v1(suite_universe(16, 8, 70), 7);
    for (const auto& t : suite) {
        if (t.kind != TaskKind::multiclass) continue;
        for (const auto* split : {&t.train, &t.val, &t.test}) {
            std::vector<std::size_t> counts(t.num_classes, 0);
            for (const auto& row : split->labels) {
                ASSERT_EQ(row.size(), 1u);
                ++counts[row[0]];
            }
            for (const auto c : counts)
                EXPECT_EQ(c, split->labels.size() / t.num_classes) << t.name;
        }
    }
}

TEST(SuiteTest, MultilabelTestSplitHasEachLabelInExactlyHalf) {
    const auto suite = evalkit::suite_v1(suite_universe(16, 8, 70), 7);
    const auto it = std::find_if(suite.begin(), suite.end(),
                                 [](const auto& t) { return t.name == "multilabel8"; });
    ASSERT_NE(it, suite.end());
    std::vector<std::size_t> pos(8, 0);
    for (const auto& row : it->test.labels) {
        EXPECT_EQ(row.size(), 4u);
        for (const auto id : row) ++pos[id];
    }
    for (const auto p : pos) EXPECT_EQ(p, it->test.labels.size() / 2);
}

TEST(SuiteTest, DeterministicAcrossCalls) {
    const auto u = suite_universe(16, 8, 1230);
    const auto a = evalkit::suite_v1(u, 123);
    const auto b = evalkit::suite_v1(u, 123);
    const auto c = evalkit::suite_v1(u, 124);
    ASSERT_EQ(a.size(), b.size());
    bool any_difference = false;
    for (std::size_t t = 0; t < a.size(); ++t) {
        EXPECT_EQ(a[t].train.images, b[t].train.images);
        EXPECT_EQ(a[t].test.labels, b[t].test.labels);
        if (!(a[t].train.images == c[t].train.images)) any_difference = true;
    }
    EXPECT_TRUE(any_difference); // a different suite seed moves the data
}

TEST(SuiteTest, TasksRenderFromTheGivenUniverse) {
    const auto u = suite_universe(16, 16, 880);
    const auto suite = evalkit::suite_v1(u, 88);
    const auto it = std::find_if(suite.begin(), suite.end(),
                                 [](const auto& t) { return t.name == "object16-clean"; });
    ASSERT_NE(it, suite.end());
    // Near-clean single-object images must point along the labeled object's
    // embedding, so the nearest universe direction recovers the class.
    for (std::size_t i = 0; i < 64; ++i) {
        const auto img = it->train.images.row(i);
        std::uint32_t best = 0;
        double best_dot = -1e300;
        for (std::uint32_t o = 0; o < u.config.num_objects; ++o) {
            const auto emb = u.object_embeddings.row(o);
            double dot = 0.0;
            for (std::size_t j = 0; j < img.size(); ++j) dot += img[j] * emb[j];
            if (dot > best_dot) {
                best_dot = dot;
                best = o;
            }
        }
        ASSERT_EQ(it->train.labels[i].size(), 1u);
        EXPECT_EQ(best, it->train.labels[i][0]) << "example " << i;
    }
}

TEST(SuiteTest, RejectsUniversesTooSmallForTheTasks) {
    EXPECT_THROW(evalkit::suite_v1(suite_universe(15, 8, 10), 1), ParameterError);
}

// --- suite evaluation ------------------------------------------------------

namespace {

std::vector<evalkit::TaskData> two_task_suite() {
    auto suite = evalkit::suite_v1(suite_universe(16, 16, 550), 55);
    std::vector<evalkit::TaskData> out;
    for (auto& t : suite)
        if (t.name == "object16-clean" || t.name == "multilabel8") out.push_back(std::move(t));
    return out;
}

} // namespace

TEST(EvaluateModelTest, ReportIsValidAndAggregatesTaskMeans) {
    const auto model = tiny_model();
    const auto suite = two_task_suite();
    const std::uint64_t stack_before = model.stack.fingerprint();
    const auto report = evalkit::evaluate_model(model, suite, quick_probe_config(), 77);
    EXPECT_EQ(model.stack.fingerprint(), stack_before);

    ASSERT_EQ(report.tasks.size(), 2u);
    EXPECT_NO_THROW(report.validate());
    double mu = 0.0;
    std::size_t strict = 0;
    for (const auto& t : report.tasks) {
        mu += t.mean;
        EXPECT_GE(t.mean, 0.0);
        EXPECT_LE(t.mean, 1.0);
        EXPECT_GE(t.ci_high, t.ci_low); // zero width only when every draw agrees
        if (t.ci_high > t.ci_low) ++strict;
    }
    EXPECT_GE(strict, 1u);
    EXPECT_NEAR(report.mu_tx_mean, mu / 2.0, 1e-12);
}

TEST(EvaluateModelTest, WorkerCountDoesNotChangeResults) {
    const auto model = tiny_model();
    const auto suite = two_task_suite();
    const auto cfg = quick_probe_config();
    const auto a = evalkit::evaluate_model(model, suite, cfg, 78, 1);
    const auto b = evalkit::evaluate_model(model, suite, cfg, 78, 4);
    ASSERT_EQ(a.tasks.size(), b.tasks.size());
    for (std::size_t t = 0; t < a.tasks.size(); ++t) {
        EXPECT_EQ(a.tasks[t].task, b.tasks[t].task);
        EXPECT_EQ(a.tasks[t].mean, b.tasks[t].mean);
        EXPECT_EQ(a.tasks[t].ci_low, b.tasks[t].ci_low);
        EXPECT_EQ(a.tasks[t].ci_high, b.tasks[t].ci_high);
        EXPECT_EQ(a.tasks[t].best_lr, b.tasks[t].best_lr);
    }
    EXPECT_EQ(a.mu_tx_mean, b.mu_tx_mean);
    EXPECT_EQ(a.mu_tx_low, b.mu_tx_low);
    EXPECT_EQ(a.mu_tx_high, b.mu_tx_high);
}

TEST(EvaluateModelTest, RejectsBadArguments) {
    const auto model = tiny_model();
    const auto suite = two_task_suite();
    EXPECT_THROW(evalkit::evaluate_model(model, {}, quick_probe_config(), 1), DataError);
    EXPECT_THROW(evalkit::evaluate_model(model, suite, quick_probe_config(), 1, 0),
                 ParameterError);
}

// --- report formatting and serialization -----------------------------------

TEST(ReportTest, FormatsMeanPlusMinusInPercent) {
    EXPECT_EQ(evalkit::format_mean_pm(0.613, 0.002), "61.3 ± 0.2");
    EXPECT_EQ(evalkit::format_mean_pm(1.0, 0.0), "100.0 ± 0.0");
}

TEST(ReportTest, TableListsTasksAndMuTx) {
    evalkit::ProbeReport report;
    report.tasks.push_back({"object16-clean", 0.613, 0.611, 0.615, 0.3});
    report.tasks.push_back({"multilabel8", 0.8, 0.79, 0.81, 1.0});
    report.mu_tx_mean = 0.7065;
    report.mu_tx_low = 0.70;
    report.mu_tx_high = 0.713;
    const std::string table = evalkit::format_report_table(report);
    EXPECT_NE(table.find("object16-clean  61.3 ± 0.2"), std::string::npos);
    EXPECT_NE(table.find("multilabel8"), std::string::npos);
    EXPECT_NE(table.find("mu_tx"), std::string::npos);
    EXPECT_NE(table.find("task"), std::string::npos);
}

TEST(ReportTest, JsonRoundTripIsExact) {
    evalkit::ProbeReport report;
    report.tasks.push_back({"object16-clean", 0.61347, 0.611, 0.61501, 0.3});
    report.tasks.push_back({"scene-size", 0.5, 0.48, 0.52, 3.0});
    report.mu_tx_mean = 0.556735;
    report.mu_tx_low = 0.54;
    report.mu_tx_high = 0.57;
    const nlohmann::json j = evalkit::to_json(report);
    const auto back = evalkit::report_from_json(j, "test");
    EXPECT_EQ(evalkit::to_json(back), j);
}

TEST(ReportTest, ParsingRejectsMalformedDocuments) {
    evalkit::ProbeReport report;
    report.tasks.push_back({"t", 0.5, 0.4, 0.6, 1.0});
    report.mu_tx_mean = 0.5;
    report.mu_tx_low = 0.4;
    report.mu_tx_high = 0.6;
    const nlohmann::json good = evalkit::to_json(report);

    nlohmann::json extra = good;
    extra["surplus"] = 1;
    EXPECT_THROW(evalkit::report_from_json(extra, "test"), ConfigError);

    nlohmann::json bad_version = good;
    bad_version["suite_version"] = "v999";
    EXPECT_THROW(evalkit::report_from_json(bad_version, "test"), SerializationError);

    nlohmann::json bad_type = good;
    bad_type["mu_tx"]["mean"] = "half";
    EXPECT_THROW(evalkit::report_from_json(bad_type, "test"), SerializationError);

    evalkit::ProbeReport broken = report;
    broken.mu_tx_mean = 0.99; // outside its own interval
    EXPECT_THROW(broken.validate(), DataError);
    EXPECT_THROW(evalkit::report_from_json(evalkit::to_json(broken), "test"), DataError);
}

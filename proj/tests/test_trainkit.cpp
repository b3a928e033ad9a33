#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "dib/trainkit.hpp"

namespace {

using namespace dib;
using train::MetricsReport;
using train::TrainConfig;

data::Dataset tiny_dataset(std::size_t n = 60, std::uint64_t seed = 3) {
    data::SyntheticSpec s;
    s.n_samples = n;
    s.seed = seed;
    s.modalities = {{"t", 4, 6}, {"a", 5, 4}, {"v", 5, 4}};
    return data::generate(s);
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.model.hidden = 8;
    c.model.heads = 2;
    c.model.fusion_layers = 1;
    c.model.bottleneck_len = 2;
    c.batch_size = 16;
    c.epochs = 1;
    c.lr_encoder = 1e-3;
    c.lr_model = 1e-3;
    c.seed = 5;
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

// Textbook scalar Adam, written out step by step.
TEST(Adam, MatchesScalarOracleOver100Steps) {
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<model::Param> params{{"w", ad::Tensor({1}, {2.0}), model::ParamGroup::model}};
    train::Adam opt(params, train::AdamConfig{b1, b2, eps});
    const double rates[2] = {lr, lr};

    double x = 2.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2.0 * x - 1.0 + 0.3 * std::sin(t);
        opt.step(params, {ad::Tensor({1}, {2.0 * params[0].value[0] - 1.0 + 0.3 * std::sin(t)})}, rates);
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        x = x - lr * mhat / (std::sqrt(vhat) + eps);
        ASSERT_NEAR(params[0].value[0], x, 1e-12) << "step " << t;
    }
    EXPECT_EQ(opt.steps(), 100u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    std::vector<model::Param> params{{"w", ad::Tensor({3}, {1.0, -2.0, 0.5}), model::ParamGroup::encoder}};
    train::Adam opt(params, {});
    const double rates[2] = {0.1, 0.1};
    for (int i = 0; i < 10; ++i) opt.step(params, {ad::Tensor({3})}, rates);
    EXPECT_EQ(params[0].value, ad::Tensor({3}, {1.0, -2.0, 0.5}));
}

// A constant gradient gives |step| = lr exactly up to eps on every step,
// since the bias-corrected moments equal g and g^2.
TEST(Adam, FixedGradientTrace) {
    std::vector<model::Param> params{{"w", ad::Tensor({2}, {0.0, 0.0}), model::ParamGroup::model}};
    train::Adam opt(params, train::AdamConfig{0.9, 0.999, 0.0});
    const double rates[2] = {0.5, 0.05};
    for (int t = 1; t <= 20; ++t) {
        opt.step(params, {ad::Tensor({2}, {3.0, -0.25})}, rates);
        EXPECT_NEAR(params[0].value[0], -0.05 * t, 1e-12);
        EXPECT_NEAR(params[0].value[1], 0.05 * t, 1e-12);
    }
}

TEST(Adam, GroupsUseTheirOwnRate) {
    std::vector<model::Param> params{{"e", ad::Tensor({1}), model::ParamGroup::encoder},
                                     {"m", ad::Tensor({1}), model::ParamGroup::model}};
    train::Adam opt(params, train::AdamConfig{0.9, 0.999, 0.0});
    const double rates[2] = {0.1, 0.01};  // encoder, model
    opt.step(params, {ad::Tensor({1}, {1.0}), ad::Tensor({1}, {1.0})}, rates);
    EXPECT_NEAR(params[0].value[0], -0.1, 1e-15);
    EXPECT_NEAR(params[1].value[0], -0.01, 1e-15);
}

TEST(Adam, RejectsMismatchAndNonFinite) {
    std::vector<model::Param> params{{"w", ad::Tensor({1}), model::ParamGroup::model}};
    train::Adam opt(params, {});
    const double rates[2] = {1e300, 1e300};
    EXPECT_THROW(opt.step(params, {}, rates), Error);
    try {
        opt.step(params, {ad::Tensor({1}, {std::nan("")})}, rates);
        FAIL() << "expected non_finite";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "non_finite");
        EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST(Metrics, PerfectRegression) {
    const std::vector<double> y{-2.6, -1.2, 0.4, 1.7, 2.9, -0.3};
    const auto r = train::compute_metrics(y, y, model::TaskKind::regression);
    EXPECT_EQ(r.acc2, 1.0);
    EXPECT_EQ(r.acc7, 1.0);
    EXPECT_EQ(r.f1_weighted, 1.0);
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_NEAR(r.pearson_corr, 1.0, 1e-15);
    EXPECT_FALSE(r.corr_degenerate);
    EXPECT_EQ(r.n, 6u);
}

TEST(Metrics, ConstantPredictionFlagsCorrelation) {
    const std::vector<double> y{-2.0, -1.0, 0.5, 1.0, 2.0};
    const auto r = train::compute_metrics(std::vector<double>(5, 0.7), y, model::TaskKind::regression);
    EXPECT_EQ(r.pearson_corr, 0.0);
    EXPECT_TRUE(r.corr_degenerate);
    EXPECT_DOUBLE_EQ(r.acc2, 3.0 / 5.0);
    EXPECT_TRUE(r.to_json().at("corr_degenerate").get<bool>());
}

TEST(Metrics, NeutralSamplesExcludedFromBinary) {
    const auto r = train::compute_metrics({1.0, -1.0, 2.0}, {1.0, 1.0, 0.0}, model::TaskKind::regression);
    EXPECT_DOUBLE_EQ(r.acc2, 0.5);
    EXPECT_DOUBLE_EQ(r.mae, (0.0 + 2.0 + 2.0) / 3.0);
}

TEST(Metrics, BinaryAndMulticlassConventions) {
    const auto b = train::compute_metrics({0.9, 0.2, 0.6, 0.4}, {1.0, 0.0, 0.0, 0.0}, model::TaskKind::binary);
    EXPECT_DOUBLE_EQ(b.acc2, 0.75);
    EXPECT_TRUE(std::isnan(b.acc7));
    EXPECT_TRUE(b.to_json().at("acc7").is_null());
    const auto m = train::compute_metrics({0.0, 3.0, 5.0, 6.0}, {0.0, 3.0, 6.0, 2.0}, model::TaskKind::multiclass);
    EXPECT_DOUBLE_EQ(m.acc7, 0.5);
    EXPECT_DOUBLE_EQ(m.acc2, 2.0 / 3.0);  // the neutral bin 3 is excluded
}

// Independent recomputation on 200 random points: sums instead of centered
// passes for the correlation, explicit confusion counts for F1.
TEST(Metrics, MatchesRecomputationOn200Points) {
    std::mt19937_64 g(21);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::normal_distribution<double> nd(0.0, 0.8);
    std::vector<double> y(200), p(200);
    for (std::size_t i = 0; i < 200; ++i) {
        y[i] = u(g);
        p[i] = y[i] + nd(g);
    }
    const auto r = train::compute_metrics(p, y, model::TaskKind::regression);

    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0, mae = 0;
    double tp = 0, tn = 0, fp = 0, fn = 0, exact = 0;
    for (std::size_t i = 0; i < 200; ++i) {
        sx += p[i];
        sy += y[i];
        sxx += p[i] * p[i];
        syy += y[i] * y[i];
        sxy += p[i] * y[i];
        mae += std::fabs(p[i] - y[i]);
        const bool t = y[i] > 0, q = p[i] > 0;
        tp += t && q;
        tn += !t && !q;
        fp += !t && q;
        fn += t && !q;
        const double cp = std::min(3.0, std::max(-3.0, p[i]));
        exact += std::round(cp) == std::round(y[i]);
    }
    const double n = 200;
    const double corr = (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
    const double f1_pos = 2 * tp / (2 * tp + fp + fn), f1_neg = 2 * tn / (2 * tn + fn + fp);
    const double f1 = ((tp + fn) * f1_pos + (tn + fp) * f1_neg) / n;
    EXPECT_NEAR(r.pearson_corr, corr, 1e-9);
    EXPECT_NEAR(r.mae, mae / n, 1e-9);
    EXPECT_NEAR(r.acc2, (tp + tn) / n, 1e-9);
    EXPECT_NEAR(r.f1_weighted, f1, 1e-9);
    EXPECT_NEAR(r.acc7, exact / n, 1e-9);
}

TEST(Metrics, CountMismatchThrows) {
    EXPECT_THROW(train::compute_metrics({1.0}, {1.0, 2.0}, model::TaskKind::regression), Error);
}

// ---------------------------------------------------------------------------
// Decline
// ---------------------------------------------------------------------------

TEST(Decline, EightyToSeventySixIsFivePercent) { EXPECT_EQ(train::decline(80.0, 76.0), 5.0); }

TEST(Decline, AverageMatchesHandRecomputation) {
    MetricsReport clean, noisy;
    clean.acc2 = 0.82;
    clean.acc7 = 0.41;
    clean.f1_weighted = 0.815;
    clean.mae = 0.74;
    clean.pearson_corr = 0.77;
    noisy.acc2 = 0.79;
    noisy.acc7 = 0.38;
    noisy.f1_weighted = 0.801;
    noisy.mae = 0.81;
    noisy.pearson_corr = 0.72;
    const double hand = ((0.82 - 0.79) / 0.82 * 100 + (0.41 - 0.38) / 0.41 * 100 + (0.815 - 0.801) / 0.815 * 100 +
                         (0.81 - 0.74) / 0.74 * 100 + (0.77 - 0.72) / 0.77 * 100) /
                        5.0;
    EXPECT_NEAR(train::average_decline(clean, noisy), hand, 1e-12);

    const auto d = train::oriented_declines(clean, noisy);
    ASSERT_EQ(d.size(), 5u);
    EXPECT_GT(d[3], 0.0);  // a larger MAE counts as worse
}

TEST(Decline, UndefinedMetricsAreSkipped) {
    MetricsReport clean, noisy;
    clean.acc2 = 0.9;
    noisy.acc2 = 0.81;
    clean.f1_weighted = 0.0;  // zero baseline: undefined
    clean.mae = 0.5;
    noisy.mae = 0.5;
    clean.pearson_corr = 0.5;
    noisy.pearson_corr = 0.5;
    // acc7 stays NaN on both sides.
    EXPECT_NEAR(train::average_decline(clean, noisy), 10.0 / 3.0, 1e-12);
}

TEST(Decline, MeanStdUsesSampleDeviation) {
    const auto ms = train::mean_std({1.0, 2.0, 3.0, 4.0});
    EXPECT_DOUBLE_EQ(ms.mean, 2.5);
    EXPECT_NEAR(ms.std, std::sqrt(5.0 / 3.0), 1e-15);
    const auto single = train::mean_std({7.0});
    EXPECT_EQ(single.std, 0.0);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST(Train, OneEpochIsBitwiseReproducible) {
    const auto ds = tiny_dataset();
    const auto cfg = tiny_config();
    const auto a = train::train(ds, cfg), b = train::train(ds, cfg);
    ASSERT_EQ(a.final_model.params().size(), b.final_model.params().size());
    for (std::size_t i = 0; i < a.final_model.params().size(); ++i)
        EXPECT_EQ(a.final_model.params()[i].value, b.final_model.params()[i].value) << a.final_model.params()[i].name;
    EXPECT_EQ(a.history[0].mean_loss.total, b.history[0].mean_loss.total);

    auto other = cfg;
    other.seed = 6;
    const auto c = train::train(ds, other);
    EXPECT_NE(a.final_model.params()[0].value, c.final_model.params()[0].value);
}

TEST(Train, NoDetachedParameters) {
    const auto res = train::train(tiny_dataset(), tiny_config());
    EXPECT_TRUE(res.detached.empty()) << res.detached.front();
    EXPECT_GT(res.history[0].steps, 0u);
}

TEST(Train, AblationZeroesInformationTermsEveryEpoch) {
    auto cfg = tiny_config();
    cfg.epochs = 3;
    cfg.objective.uni_lrib = false;
    cfg.objective.multi_lrib = false;
    const auto res = train::train(tiny_dataset(), cfg);
    ASSERT_EQ(res.history.size(), 3u);
    for (const auto& e : res.history) {
        for (double v : e.mean_loss.i_comp) EXPECT_EQ(v, 0.0);
        EXPECT_EQ(e.mean_loss.i_comp_mm, 0.0);
        EXPECT_GT(e.mean_loss.task_mm, 0.0);
    }
}

TEST(Train, BestEpochFollowsValidationScore) {
    auto cfg = tiny_config();
    cfg.epochs = 4;
    const auto res = train::train(tiny_dataset(), cfg);
    double best = -1e300;
    std::size_t at = 0;
    for (const auto& e : res.history) {
        const double s = train::selection_score(e.val, model::TaskKind::regression);
        if (s > best) {
            best = s;
            at = e.epoch;
        }
    }
    EXPECT_EQ(res.best_epoch, at);
    EXPECT_EQ(res.best_val.mae, res.history[at - 1].val.mae);
}

TEST(Train, WritesOneLogLinePerEpoch) {
    namespace fs = std::filesystem;
    auto cfg = tiny_config();
    cfg.epochs = 2;
    cfg.log_path = (fs::temp_directory_path() / "dib_test_train_log.jsonl").string();
    train::train(tiny_dataset(), cfg);
    std::ifstream f(cfg.log_path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(f, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("epoch").get<std::size_t>(), ++lines);
        EXPECT_TRUE(j.at("loss").contains("total"));
        EXPECT_TRUE(j.at("val").contains("mae"));
    }
    EXPECT_EQ(lines, 2u);
    fs::remove(cfg.log_path);
}

TEST(Train, DroppedModalityIsNotAnInput) {
    auto cfg = tiny_config();
    cfg.drop_modalities = {"v"};
    const auto ds = tiny_dataset();
    const auto m = train::build_model(ds, cfg);
    ASSERT_EQ(m.config().modalities.size(), 2u);
    EXPECT_EQ(m.config().modalities[1].name, "a");
    cfg.model.dominant = "v";
    EXPECT_THROW(train::build_model(ds, cfg), Error);
}

TEST(Train, RejectsBadConfigs) {
    const auto ds = tiny_dataset(12);
    auto cfg = tiny_config();
    EXPECT_THROW(train::train(ds, cfg), Error);  // 7 training samples cannot fill a rank-k batch
    cfg = tiny_config();
    cfg.lr_model = 0.0;
    EXPECT_THROW(train::train(tiny_dataset(), cfg), Error);
    cfg = tiny_config();
    cfg.batch_size = cfg.objective.kernel.k_rank;
    EXPECT_THROW(train::train(tiny_dataset(), cfg), Error);
    cfg.objective.uni_lrib = cfg.objective.multi_lrib = false;
    EXPECT_NO_THROW(cfg.validate());
}

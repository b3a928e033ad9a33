#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "dib/entropy.hpp"
#include "dib/model.hpp"
#include "dib/objective.hpp"
#include "gradcheck.hpp"

using namespace dib;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using gradcheck::check;
using gradcheck::random_tensor;
using objective::BetaOn;
using objective::ObjectiveConfig;
using objective::Targets;

namespace {

constexpr double kAlphas[] = {1.1, 1.5, 1.9, 2.0};

entropy::KernelConfig kernel(double alpha, std::size_t k, bool fixed = false) {
    entropy::KernelConfig c;
    c.alpha = alpha;
    c.k_rank = k;
    if (fixed) {
        c.bandwidth_rule = entropy::BandwidthRule::fixed;
        c.fixed_sigma2 = 1.3;
    }
    return c;
}

model::ModelConfig small_config(model::TaskKind task = model::TaskKind::binary) {
    model::ModelConfig c;
    c.modalities = {{"t", 4, 3}, {"a", 5, 2}, {"v", 5, 2}};
    c.hidden = 6;
    c.heads = 2;
    c.fusion_layers = 2;
    c.task = task;
    return c;
}

model::Batch make_batch(const model::ModelConfig& c, std::size_t b, std::uint64_t seed) {
    std::mt19937_64 g(seed);
    model::Batch batch;
    for (const auto& m : c.modalities) {
        batch.inputs.push_back(random_tensor(g, {b, m.seq_len, m.feat_dim}));
        batch.available.push_back(std::vector<double>(b, 1.0));
    }
    return batch;
}

struct Outcome {
    objective::LossBreakdown parts;
    double loss = 0.0;
};

Outcome run_total(const model::DibModel& m, const model::Batch& b, const Targets& y, const ObjectiveConfig& oc) {
    Tape t;
    Rng rng(5);
    model::ForwardOptions opt;
    opt.sample = true;
    const auto fr = m.forward(t, b, opt, rng, nullptr, false);
    const auto tl = objective::total_loss(fr, m.config(), y, oc);
    return {tl.parts, tl.loss.value()[0]};
}

Targets binary_targets(std::size_t n) {
    Targets y;
    for (std::size_t i = 0; i < n; ++i) y.y.push_back(static_cast<double>(i % 2));
    return y;
}

}  // namespace

TEST(Weights, Conventions) {
    EXPECT_EQ(objective::term_weights(0.25, BetaOn::compression), (std::pair{0.25, 1.0}));
    EXPECT_EQ(objective::term_weights(0.25, BetaOn::task), (std::pair{1.0, 0.25}));
    EXPECT_EQ(objective::beta_on_from_string("task"), BetaOn::task);
    EXPECT_THROW(objective::beta_on_from_string("both"), Error);
}

TEST(LribLoss, ZeroBetaTaskConventionIsPureCompression) {
    std::mt19937_64 g(1);
    Tape t;
    Var x = t.constant(random_tensor(g, {8, 3})), z = t.constant(random_tensor(g, {8, 4}));
    Var logits = t.constant(random_tensor(g, {8, 1}));
    const auto r = objective::uni_lrib_loss(x, z, logits, binary_targets(8), model::TaskKind::binary, 0.0, kernel(1.9, 5),
                                            true, BetaOn::task);
    EXPECT_EQ(r.loss.value()[0], r.compression);
    EXPECT_GT(r.task, 0.0);
}

TEST(LribLoss, ZeroBetaCompressionConventionIsPureTask) {
    std::mt19937_64 g(2);
    Tape t;
    Var x = t.constant(random_tensor(g, {8, 3})), z = t.constant(random_tensor(g, {8, 4}));
    Var logits = t.constant(random_tensor(g, {8, 1}));
    const auto r = objective::multi_lrib_loss(x, z, logits, binary_targets(8), model::TaskKind::binary, 0.0,
                                              kernel(1.9, 5));
    EXPECT_EQ(r.loss.value()[0], r.task);
    EXPECT_GT(r.compression, 0.0);
}

TEST(LribLoss, ConstantCodeHasNoCompression) {
    std::mt19937_64 g(3);
    for (auto fn : {&objective::uni_lrib_loss, &objective::multi_lrib_loss}) {
        Tape t;
        Var x = t.constant(random_tensor(g, {8, 3}));
        Var z = t.constant(Tensor({8, 4}, 0.7));
        Var logits = t.constant(random_tensor(g, {8, 1}));
        const double beta = 0.3;
        const auto r = fn(x, z, logits, binary_targets(8), model::TaskKind::binary, beta, kernel(1.9, 5), true,
                          BetaOn::task);
        EXPECT_NEAR(r.compression, 0.0, 1e-8);
        EXPECT_NEAR(r.loss.value()[0], beta * r.task, 1e-8);
    }
}

TEST(LribLoss, ValuesMatchIndependentRecomputation) {
    std::mt19937_64 g(4);
    const Tensor xs = random_tensor(g, {8, 3}), zs = random_tensor(g, {8, 4}), ls = random_tensor(g, {8, 1});
    const auto k = kernel(1.9, 5);
    Tape t;
    const Targets y = binary_targets(8);
    const auto r = objective::uni_lrib_loss(t.constant(xs), t.constant(zs), t.constant(ls), y, model::TaskKind::binary,
                                            0.01, k);
    const double mi = entropy::mutual_information(entropy::gram_from_batch(ad::to_matrix(xs), k).base,
                                                  entropy::gram_from_batch(ad::to_matrix(zs), k).base, k);
    double ce = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-ls[i]));
        ce -= y.y[i] * std::log(p) + (1 - y.y[i]) * std::log(1 - p);
    }
    ce /= 8.0;
    EXPECT_NEAR(r.compression, mi, 1e-12);
    EXPECT_NEAR(r.task, ce, 1e-12);
    EXPECT_NEAR(r.loss.value()[0], 0.01 * mi + ce, 1e-12);
}

TEST(LribLoss, GradientThroughBothTermsAcrossAlphas) {
    std::mt19937_64 g(5);
    const Targets yb = binary_targets(8);
    Targets yc;
    yc.classes = {0, 3, 6, 1, 2, 5, 4, 3};
    for (double alpha : kAlphas)
        for (BetaOn on : {BetaOn::compression, BetaOn::task}) {
            const auto k = kernel(alpha, 5, true);
            // the codes and logits come from a shared input so both terms
            // feed gradient into the same leaves
            auto uni = [&](Tape&, const std::vector<Var>& l) {
                Var z = ad::sigmoid(ad::matmul(l[0], l[1]));
                Var logits = ad::matmul(z, l[2]);
                return objective::uni_lrib_loss(l[0], z, logits, yb, model::TaskKind::binary, 0.7, k, true, on).loss;
            };
            EXPECT_GRAD_OK(check(uni, {random_tensor(g, {8, 3}), random_tensor(g, {3, 4}), random_tensor(g, {4, 1})}));
            auto multi = [&](Tape&, const std::vector<Var>& l) {
                Var zt = ad::exp(ad::scale(ad::matmul(l[0], l[1]), 0.5));
                Var logits = ad::matmul(zt, l[2]);
                return objective::multi_lrib_loss(l[0], zt, logits, yc, model::TaskKind::multiclass, 0.4, k, true, on)
                    .loss;
            };
            EXPECT_GRAD_OK(
                check(multi, {random_tensor(g, {8, 4}), random_tensor(g, {4, 3}), random_tensor(g, {3, 7})}));
            auto reg = [&](Tape&, const std::vector<Var>& l) {
                Var z = ad::matmul(l[0], l[1]);
                Var pred = ad::matmul(ad::sigmoid(z), l[2]);
                return objective::uni_lrib_loss(l[0], z, pred, {{3.0, -3.0, 2.5, -2.5, 4.0, -4.0, 3.5, -3.5}, {}},
                                                model::TaskKind::regression, 1.5, k, true, on)
                    .loss;
            };
            EXPECT_GRAD_OK(check(reg, {random_tensor(g, {8, 2}), random_tensor(g, {2, 3}), random_tensor(g, {3, 1}, 0.1)}));
        }
}

TEST(TotalLoss, EqualsHandSummedComponents) {
    const auto mc = small_config();
    const model::DibModel m(mc, 6);
    const auto b = make_batch(mc, 8, 7);
    const Targets y = binary_targets(8);
    for (BetaOn on : {BetaOn::compression, BetaOn::task}) {
        ObjectiveConfig oc;
        oc.kernel = kernel(1.9, 5);
        oc.beta_on = on;
        oc.beta_uni = 0.02;
        oc.beta_multi = 0.3;
        oc.beta_modality["v"] = 0.5;
        const Outcome r = run_total(m, b, y, oc);
        EXPECT_EQ(r.parts.beta_m, (std::vector<double>{0.02, 0.02, 0.5}));

        // independent recomputation from the forward outputs
        Tape t;
        Rng rng(5);
        model::ForwardOptions opt;
        opt.sample = true;
        const auto fr = m.forward(t, b, opt, rng, nullptr, false);
        auto mi = [&](Var a, Var z) {
            return entropy::mutual_information(entropy::gram_from_batch(ad::to_matrix(a.value()), oc.kernel).base,
                                               entropy::gram_from_batch(ad::to_matrix(z.value()), oc.kernel).base,
                                               oc.kernel);
        };
        auto bce = [&](Var logits) {
            double s = 0.0;
            for (std::size_t i = 0; i < 8; ++i) {
                const double x = logits.value()[i];
                s += std::max(x, 0.0) - x * y.y[i] + std::log1p(std::exp(-std::abs(x)));
            }
            return s / 8.0;
        };
        double want = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            const double im = mi(fr.uni[i].e_pooled, fr.uni[i].z_pooled), tm = bce(fr.uni[i].logits);
            EXPECT_NEAR(r.parts.i_comp[i], im, 1e-12);
            EXPECT_NEAR(r.parts.task[i], tm, 1e-12);
            want += on == BetaOn::compression ? r.parts.beta_m[i] * im + tm : im + r.parts.beta_m[i] * tm;
        }
        const double imm = mi(fr.z, fr.z_tilde), tmm = bce(fr.logits);
        want += on == BetaOn::compression ? 0.3 * imm + tmm : imm + 0.3 * tmm;
        EXPECT_NEAR(r.loss, want, 1e-12);
        EXPECT_NEAR(r.parts.total, r.parts.recomputed_total(), 1e-10);
        EXPECT_EQ(r.parts.total, r.loss);
    }
}

TEST(TotalLoss, SingleModalityZeroBetaIsItsCompression) {
    model::ModelConfig mc = small_config();
    mc.modalities = {{"t", 4, 3}};
    const model::DibModel m(mc, 8);
    const auto b = make_batch(mc, 8, 9);
    ObjectiveConfig oc;
    oc.kernel = kernel(1.9, 5);
    oc.beta_on = BetaOn::task;
    oc.beta_uni = oc.beta_multi = 0.0;
    oc.multi_lrib = false;
    const Outcome r = run_total(m, b, binary_targets(8), oc);
    EXPECT_EQ(r.loss, r.parts.i_comp[0]);
    EXPECT_GT(r.loss, 0.0);
}

TEST(TotalLoss, AllInformationTermsOffIsSupervisedBaseline) {
    const auto mc = small_config();
    const model::DibModel m(mc, 10);
    const auto b = make_batch(mc, 8, 11);
    ObjectiveConfig oc;
    oc.kernel = kernel(1.9, 5);
    oc.uni_lrib = oc.multi_lrib = false;
    const Outcome r = run_total(m, b, binary_targets(8), oc);
    double want = r.parts.task_mm;
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(r.parts.i_comp[i], 0.0);
        want += r.parts.task[i];
    }
    EXPECT_EQ(r.parts.i_comp_mm, 0.0);
    EXPECT_NEAR(r.loss, want, 1e-14);
}

TEST(TotalLoss, AblationFlagsTouchOnlyTheirField) {
    const auto mc = small_config();
    const model::DibModel m(mc, 12);
    const auto b = make_batch(mc, 8, 13);
    const Targets y = binary_targets(8);
    ObjectiveConfig base;
    base.kernel = kernel(1.9, 5);
    const Outcome full = run_total(m, b, y, base);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_GT(full.parts.i_comp[i], 0.0);
    EXPECT_GT(full.parts.i_comp_mm, 0.0);

    for (std::size_t off = 0; off < 3; ++off) {
        ObjectiveConfig oc = base;
        oc.uni_lrib_off = {mc.modalities[off].name};
        const Outcome r = run_total(m, b, y, oc);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_EQ(r.parts.i_comp[i], i == off ? 0.0 : full.parts.i_comp[i]);
            EXPECT_EQ(r.parts.task[i], full.parts.task[i]);
        }
        EXPECT_EQ(r.parts.i_comp_mm, full.parts.i_comp_mm);
        EXPECT_EQ(r.parts.task_mm, full.parts.task_mm);
    }
    ObjectiveConfig nm = base;
    nm.multi_lrib = false;
    const Outcome r = run_total(m, b, y, nm);
    EXPECT_EQ(r.parts.i_comp_mm, 0.0);
    EXPECT_EQ(r.parts.i_comp, full.parts.i_comp);
    EXPECT_EQ(r.parts.task, full.parts.task);
    EXPECT_EQ(r.parts.task_mm, full.parts.task_mm);

    ObjectiveConfig nu = base;
    nu.uni_lrib = false;
    const Outcome u = run_total(m, b, y, nu);
    EXPECT_EQ(u.parts.i_comp, (std::vector<double>{0, 0, 0}));
    EXPECT_EQ(u.parts.i_comp_mm, full.parts.i_comp_mm);
}

TEST(TotalLoss, TaskOnlyStepDecreasesCrossEntropy) {
    const auto mc = small_config();
    model::DibModel m(mc, 14);
    const auto b = make_batch(mc, 8, 15);
    const Targets y = binary_targets(8);
    ObjectiveConfig oc;
    oc.kernel = kernel(1.9, 5);
    oc.uni_lrib = oc.multi_lrib = false;
    auto eval = [&](const model::DibModel& mm, std::vector<Tensor>* grads) {
        Tape t;
        Rng rng(0);
        std::vector<Var> pv;
        const auto fr = mm.forward(t, b, model::ForwardOptions{}, rng, &pv, true);
        const auto tl = objective::total_loss(fr, mc, y, oc);
        if (grads) {
            t.backward(tl.loss);
            for (const Var& v : pv) grads->push_back(t.grad(v));
        }
        return tl.parts.task_mm;
    };
    std::vector<Tensor> grads;
    const double before = eval(m, &grads);
    for (std::size_t p = 0; p < grads.size(); ++p)
        for (std::size_t i = 0; i < grads[p].size(); ++i) m.params()[p].value[i] -= 1e-2 * grads[p][i];
    EXPECT_LT(eval(m, nullptr), before);
}

TEST(Breakdown, JsonFieldNames) {
    const auto mc = small_config();
    const model::DibModel m(mc, 16);
    ObjectiveConfig oc;
    oc.kernel = kernel(1.9, 5);
    const Outcome r = run_total(m, make_batch(mc, 8, 17), binary_targets(8), oc);
    const auto j = r.parts.to_json();
    std::vector<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.push_back(k);
    const std::vector<std::string> want{"i_comp_t", "task_t", "i_comp_a", "task_a", "i_comp_v",
                                        "task_v",   "i_comp_mm", "task_mm", "total"};
    EXPECT_EQ(keys, want);
    EXPECT_EQ(j["total"].get<double>(), r.parts.total);
}

TEST(Breakdown, NamesFirstNonFiniteComponent) {
    objective::LossBreakdown p;
    p.modalities = {"t", "a"};
    p.i_comp = {0.1, 0.2};
    p.task = {0.3, std::nan("")};
    p.beta_m = {1e-5, 1e-5};
    EXPECT_EQ(p.first_non_finite(), "task_a");
    p.task[1] = 0.0;
    EXPECT_EQ(p.first_non_finite(), "");
    p.i_comp_mm = INFINITY;
    EXPECT_EQ(p.first_non_finite(), "i_comp_mm");
}

TEST(Config, Validation) {
    ObjectiveConfig oc;
    EXPECT_NO_THROW(oc.validate());
    oc.beta_uni = -1;
    EXPECT_THROW(oc.validate(), Error);
    oc = ObjectiveConfig{};
    oc.beta_modality["a"] = std::nan("");
    EXPECT_THROW(oc.validate(), Error);
    oc = ObjectiveConfig{};
    oc.kernel.alpha = 1.0;
    EXPECT_THROW(oc.validate(), Error);
    EXPECT_EQ(oc.beta_for("t"), 1e-5);
}

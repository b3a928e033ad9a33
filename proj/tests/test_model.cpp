#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "dib/model.hpp"
#include "gradcheck.hpp"

using namespace dib;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using gradcheck::random_tensor;
using model::DibModel;
using model::ModelConfig;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.modalities = {{"t", 4, 3}, {"a", 5, 2}, {"v", 5, 2}};
    c.hidden = 6;
    c.heads = 2;
    c.fusion_layers = 2;
    c.task = model::TaskKind::binary;
    return c;
}

model::Batch make_batch(const ModelConfig& c, std::size_t b, std::uint64_t seed) {
    std::mt19937_64 g(seed);
    model::Batch batch;
    for (const auto& m : c.modalities) {
        batch.inputs.push_back(random_tensor(g, {b, m.seq_len, m.feat_dim}));
        batch.available.push_back(std::vector<double>(b, 1.0));
    }
    return batch;
}

model::ForwardResult eval_forward(const DibModel& m, Tape& t, const model::Batch& b, bool keep = false) {
    Rng rng(0);
    model::ForwardOptions opt;
    opt.keep_attention = keep;
    return m.forward(t, b, opt, rng, nullptr, false);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("dib_test_model_" + name)).string();
}

}  // namespace

TEST(ParameterCount, DefaultConfigurationByHand) {
    // encoders: t 16*50+50 + 50*100+100, a and v 8*50+50 + 5100
    // bottleneck 2*50; fusion: two full layers of 3*2500 + 3*(3*2500+1),
    // last layer 3*2500 + (3*2500+1) for the text stream only
    // multimodal encoder 50*50+50 + 5100; four decoders of 2550 + 51
    const std::size_t want = 5950 + 5550 + 5550 + 100 + 2 * 30003 + 15001 + 7650 + 4 * 2601;
    EXPECT_EQ(want, 110211u);
    const DibModel m(ModelConfig{}, 1);
    EXPECT_EQ(m.parameter_count(), want);
    EXPECT_EQ(DibModel::expected_parameter_count(ModelConfig{}), want);
}

TEST(ParameterCount, ClosedFormAcrossConfigurations) {
    for (std::size_t layers : {0u, 1u, 2u, 3u, 5u})
        for (const char* dom : {"t", "all"})
            for (auto task : {model::TaskKind::binary, model::TaskKind::multiclass, model::TaskKind::regression}) {
                ModelConfig c = small_config();
                c.fusion_layers = layers;
                c.dominant = dom;
                c.task = task;
                EXPECT_EQ(DibModel(c, 2).parameter_count(), DibModel::expected_parameter_count(c))
                    << layers << " " << dom;
            }
}

TEST(ParameterCount, LinearInLayersAndModalities) {
    auto count = [](std::size_t layers, std::size_t extra) {
        ModelConfig c = small_config();
        c.fusion_layers = layers;
        for (std::size_t i = 0; i < extra; ++i) c.modalities.push_back({"x" + std::to_string(i), 5, 2});
        return static_cast<long>(DibModel(c, 3).parameter_count());
    };
    for (std::size_t extra : {0u, 1u, 2u}) {
        const long step = count(2, extra) - count(1, extra);
        for (std::size_t l = 2; l < 6; ++l) EXPECT_EQ(count(l + 1, extra) - count(l, extra), step);
    }
    for (std::size_t layers : {1u, 3u}) {
        const long step = count(layers, 1) - count(layers, 0);
        EXPECT_EQ(count(layers, 2) - count(layers, 1), step);
        EXPECT_EQ(count(layers, 3) - count(layers, 2), step);
    }
}

TEST(Config, RejectsInvalid) {
    ModelConfig c = small_config();
    c.bottleneck_len = 4;  // shortest sequence has 4 tokens
    EXPECT_THROW(DibModel(c, 1), Error);
    c = small_config();
    c.bottleneck_len = 0;
    EXPECT_THROW(DibModel(c, 1), Error);
    c = small_config();
    c.heads = 4;
    EXPECT_THROW(DibModel(c, 1), Error);
    c = small_config();
    c.modalities.push_back({"a", 3, 3});
    EXPECT_THROW(DibModel(c, 1), Error);
    c = small_config();
    c.dominant = "q";
    EXPECT_THROW(DibModel(c, 1), Error);
    c = small_config();
    c.dropout = 1.0;
    EXPECT_THROW(DibModel(c, 1), Error);
}

TEST(Forward, EvalModeIsDeterministicAndUsesMeans) {
    const ModelConfig c = small_config();
    const DibModel m(c, 4);
    const auto b = make_batch(c, 4, 5);
    Tape t1, t2;
    const auto r1 = eval_forward(m, t1, b), r2 = eval_forward(m, t2, b);
    EXPECT_EQ(r1.logits.value(), r2.logits.value());
    EXPECT_EQ(r1.z_tilde.value(), r2.z_tilde.value());
    // codes equal their means: info_on_mean changes nothing without sampling
    Tape t3;
    Rng rng(0);
    model::ForwardOptions opt;
    opt.info_on_mean = true;
    const auto r3 = m.forward(t3, b, opt, rng, nullptr, false);
    EXPECT_EQ(r1.z_tilde.value(), r3.z_tilde.value());
    for (std::size_t i = 0; i < c.modalities.size(); ++i) EXPECT_EQ(r1.uni[i].z_pooled.value(), r3.uni[i].z_pooled.value());
}

TEST(Forward, SeededTrainingForwardReproducesBitwise) {
    const ModelConfig c = small_config();
    const DibModel m(c, 4);
    const auto b = make_batch(c, 4, 6);
    auto run = [&] {
        Tape t;
        Rng rng(9);
        model::ForwardOptions opt;
        opt.train = opt.sample = true;
        return m.forward(t, b, opt, rng, nullptr, false).logits.value();
    };
    EXPECT_EQ(run(), run());
    Tape te;
    EXPECT_NE(run(), eval_forward(m, te, b).logits.value());
}

TEST(Forward, SameSeedSameParameters) {
    const DibModel a(small_config(), 11), b(small_config(), 11), c(small_config(), 12);
    for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
    EXPECT_NE(a.params()[0].value, c.params()[0].value);
}

TEST(Forward, ShapesAndErrors) {
    const ModelConfig c = small_config();
    const DibModel m(c, 4);
    auto b = make_batch(c, 3, 7);
    Tape t;
    const auto r = eval_forward(m, t, b);
    EXPECT_EQ(r.z.shape(), (ad::Shape{3, 6}));
    EXPECT_EQ(r.z_tilde.shape(), (ad::Shape{3, 6}));
    EXPECT_EQ(r.logits.shape(), (ad::Shape{3, 1}));
    for (const auto& u : r.uni) EXPECT_EQ(u.logits.shape(), (ad::Shape{3, 1}));
    for (double v : r.z.value().values()) EXPECT_GE(v, 0.0);

    auto bad = b;
    bad.inputs[1] = Tensor({3, 4, 2});
    Tape t2;
    try {
        eval_forward(m, t2, bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "shape_mismatch");
        EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
    }
    bad = b;
    bad.inputs[0][0] = std::nan("");
    Tape t3;
    EXPECT_THROW(eval_forward(m, t3, bad), Error);
}

TEST(Forward, NonFiniteEncoderNamesModality) {
    ModelConfig c = small_config();
    DibModel m(c, 4);
    // a huge first-layer weight overflows the audio encoder
    for (double& v : m.param("enc.a.l1.w").value.values()) v = 1e308;
    auto b = make_batch(c, 3, 8);
    for (double& v : b.inputs[1].values()) v = std::abs(v) + 1.0;
    Tape t;
    try {
        eval_forward(m, t, b);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "non_finite");
        EXPECT_NE(std::string(e.what()).find("encoder for a"), std::string::npos) << e.what();
    }
}

TEST(Forward, ClassifierProbabilitiesInUnitInterval) {
    ModelConfig c = small_config();
    DibModel m(c, 4);
    for (double& v : m.param("dec.mm.l2.w").value.values()) v *= 50.0;
    const auto b = make_batch(c, 16, 9);
    Tape t;
    const auto r = eval_forward(m, t, b);
    for (double l : r.logits.value().values()) {
        const double p = ad::sigmoid_value(l);
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
    }
}

TEST(Forward, RegressionDecoderLinearInFinalWeights) {
    ModelConfig c = small_config();
    c.task = model::TaskKind::regression;
    DibModel m(c, 4);
    m.param("dec.mm.l2.b").value[0] = 0.37;
    const auto b = make_batch(c, 5, 10);
    Tape t1;
    const Tensor base = eval_forward(m, t1, b).logits.value();
    for (double& v : m.param("dec.mm.l2.w").value.values()) v *= 2.0;
    Tape t2;
    const Tensor doubled = eval_forward(m, t2, b).logits.value();
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(doubled[i] - 0.37, 2.0 * (base[i] - 0.37), 1e-12);
}

TEST(Fusion, ZeroGammaIsResidualIdentity) {
    ModelConfig c = small_config();
    c.gamma_init = 0.0;
    c.dominant = "all";
    const DibModel m(c, 4);
    auto b = make_batch(c, 4, 11);
    Tape t1;
    const auto base = eval_forward(m, t1, b);
    // without fusion messages each stream is its own encoder output
    ModelConfig c0 = c;
    c0.fusion_layers = 0;
    DibModel m0(c0, 4);
    for (auto& p : m0.params()) p.value = m.param(p.name).value;
    Tape t0;
    const auto ref = eval_forward(m0, t0, b);
    EXPECT_EQ(base.z.value(), ref.z.value());
    EXPECT_EQ(base.logits.value(), ref.logits.value());
}

TEST(Fusion, ZeroGammaIsolatesSecondaryStreams) {
    ModelConfig c = small_config();
    c.gamma_init = 0.0;
    const DibModel m(c, 4);
    auto b = make_batch(c, 4, 12);
    Tape t1;
    const Tensor base = eval_forward(m, t1, b).logits.value();
    std::mt19937_64 g(13);
    b.inputs[1] = random_tensor(g, b.inputs[1].shape(), 5.0);
    b.inputs[2] = random_tensor(g, b.inputs[2].shape(), 5.0);
    Tape t2;
    EXPECT_EQ(eval_forward(m, t2, b).logits.value(), base);

    // with the default coefficient the same perturbation does reach the output
    ModelConfig cg = c;
    cg.gamma_init = 0.1;
    const DibModel mg(cg, 4);
    auto b2 = make_batch(cg, 4, 12);
    Tape t3;
    const Tensor before = eval_forward(mg, t3, b2).logits.value();
    b2.inputs[1] = b.inputs[1];
    Tape t4;
    EXPECT_NE(eval_forward(mg, t4, b2).logits.value(), before);
}

TEST(Fusion, NoLayersIsTextPassthrough) {
    ModelConfig c = small_config();
    c.fusion_layers = 0;
    const DibModel m(c, 4);
    auto b = make_batch(c, 4, 14);
    Tape t1;
    const auto r = eval_forward(m, t1, b);
    // Z = relu(mean over tokens of the text code)
    const Tensor& zt = r.uni[0].z_seq.value();
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t k = 0; k < 6; ++k) {
            double s = 0.0;
            for (std::size_t l = 0; l < 4; ++l) s += zt.at(i, l, k);
            EXPECT_NEAR(r.z.value().at(i, k), std::max(0.0, s / 4.0), 1e-14);
        }
    std::mt19937_64 g(15);
    b.inputs[2] = random_tensor(g, b.inputs[2].shape());
    Tape t2;
    EXPECT_EQ(eval_forward(m, t2, b).logits.value(), r.logits.value());
}

TEST(Fusion, AttentionRowsSumToOne) {
    const ModelConfig c = small_config();
    const DibModel m(c, 4);
    const auto b = make_batch(c, 3, 16);
    Tape t;
    const auto r = eval_forward(m, t, b, true);
    // per layer: one update map, then one map per refreshed stream
    EXPECT_EQ(r.attention.size(), 1u + 3u + 1u + 1u);
    for (const Tensor& w : r.attention) {
        const std::size_t lk = w.shape().back();
        for (std::size_t row = 0; row < w.size() / lk; ++row) {
            double s = 0.0;
            for (std::size_t j = 0; j < lk; ++j) s += w[row * lk + j];
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(Fusion, SingleBottleneckTokenBroadcasts) {
    ModelConfig c = small_config();
    c.bottleneck_len = 1;
    const DibModel m(c, 4);
    const auto b = make_batch(c, 2, 17);
    Tape t;
    const auto r = eval_forward(m, t, b, true);
    // redistribute maps attend over a single key
    for (std::size_t i = 1; i < r.attention.size(); ++i) {
        if (r.attention[i].shape().back() != 1) continue;
        for (double w : r.attention[i].values()) EXPECT_EQ(w, 1.0);
    }
}

TEST(Fusion, BottleneckUpdatePermutationInvariantOverTokens) {
    std::mt19937_64 g(18);
    const std::size_t lk = 7, d = 6;
    const Tensor q = random_tensor(g, {2, 2, d}), k = random_tensor(g, {2, lk, d}), v = random_tensor(g, {2, lk, d});
    std::vector<std::size_t> perm(lk);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g);
    Tensor kp(k.shape()), vp(v.shape());
    for (std::size_t bb = 0; bb < 2; ++bb)
        for (std::size_t j = 0; j < lk; ++j)
            for (std::size_t c = 0; c < d; ++c) {
                kp.at(bb, j, c) = k.at(bb, perm[j], c);
                vp.at(bb, j, c) = v.at(bb, perm[j], c);
            }
    Tape t;
    const Tensor a = ad::attention(t.constant(q), t.constant(k), t.constant(v), 2).value();
    const Tensor p = ad::attention(t.constant(q), t.constant(kp), t.constant(vp), 2).value();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], p[i], 1e-9);
}

TEST(Fusion, TwoTokenHandCaseWithIdentityProjections) {
    ModelConfig c;
    c.modalities = {{"t", 2, 2}};
    c.hidden = 2;
    c.heads = 1;
    c.fusion_layers = 1;
    c.bottleneck_len = 1;
    c.gamma_init = 0.0;
    DibModel m(c, 1);
    for (const char* w : {"fusion.0.update.wq", "fusion.0.update.wk", "fusion.0.update.wv"}) {
        Tensor& x = m.param(w).value;
        x = Tensor({2, 2}, {1, 0, 0, 1});
    }
    m.param("bottleneck.b0").value = Tensor({1, 2}, {0.5, -1.0});
    std::mt19937_64 g(19);
    model::Batch b;
    b.inputs.push_back(random_tensor(g, {1, 2, 2}));
    b.available.push_back({1.0});
    Tape t;
    const auto r = eval_forward(m, t, b, true);
    const Tensor& z = r.uni[0].z_seq.value();
    const double s0 = (0.5 * z.at(0, 0, 0) - z.at(0, 0, 1)) / std::sqrt(2.0);
    const double s1 = (0.5 * z.at(0, 1, 0) - z.at(0, 1, 1)) / std::sqrt(2.0);
    const double p0 = 1.0 / (1.0 + std::exp(s1 - s0));
    EXPECT_NEAR(r.attention[0][0], p0, 1e-14);
    EXPECT_NEAR(r.attention[0][1], 1.0 - p0, 1e-14);
}

TEST(Fusion, MissingModalityDoesNotLeakIntoFusion) {
    const ModelConfig c = small_config();
    const DibModel m(c, 4);
    auto b = make_batch(c, 3, 20);
    b.available[1][0] = 0.0;
    for (std::size_t i = 0; i < 5 * 2; ++i) b.inputs[1][i] = 0.0;
    Tape t1;
    const Tensor base = eval_forward(m, t1, b).logits.value();
    for (std::size_t i = 0; i < 5 * 2; ++i) b.inputs[1][i] = 3.0 + static_cast<double>(i);
    Tape t2;
    const Tensor moved = eval_forward(m, t2, b).logits.value();
    EXPECT_EQ(moved[0], base[0]);
}

TEST(Gradient, GammaAndEncoderWeightsMatchFiniteDifferences) {
    const ModelConfig c = small_config();
    const DibModel proto(c, 21);
    const auto b = make_batch(c, 4, 22);
    auto loss_of = [&](const DibModel& mm, std::vector<Var>* pv, Tape& t) {
        Rng rng(23);
        model::ForwardOptions opt;
        opt.sample = true;
        const auto r = mm.forward(t, b, opt, rng, pv, pv != nullptr);
        return ad::add(gradcheck::contract(t, r.z_tilde, 3), gradcheck::contract(t, r.uni[1].z_seq, 4));
    };
    Tape t;
    std::vector<Var> pv;
    t.backward(loss_of(proto, &pv, t));
    std::size_t checked = 0;
    for (std::size_t p = 0; p < proto.params().size(); ++p) {
        const std::string& name = proto.params()[p].name;
        if (name.find("gamma") == std::string::npos && name.rfind("enc.a.", 0) != 0) continue;
        const Tensor an = t.grad(pv[p]);
        for (std::size_t i = 0; i < an.size(); ++i) {
            if (std::abs(an[i]) <= 1e-6) continue;
            DibModel mp = proto, mm = proto;
            mp.params()[p].value[i] += 1e-4;
            mm.params()[p].value[i] -= 1e-4;
            Tape tp, tm;
            const double fd = (loss_of(mp, nullptr, tp).value()[0] - loss_of(mm, nullptr, tm).value()[0]) / 2e-4;
            EXPECT_LE(std::abs(an[i] - fd), 1e-4 * std::abs(an[i])) << name << "[" << i << "]";
            ++checked;
        }
    }
    EXPECT_GT(checked, 50u);
}

TEST(Gradient, EveryParameterReceivesGradient) {
    for (const char* dom : {"t", "all"}) {
        ModelConfig c = small_config();
        c.dominant = dom;
        const DibModel m(c, 24);
        const auto b = make_batch(c, 4, 25);
        Tape t;
        Rng rng(26);
        model::ForwardOptions opt;
        opt.sample = true;
        std::vector<Var> pv;
        const auto r = m.forward(t, b, opt, rng, &pv, true);
        Var s = ad::add(ad::sum_all(r.logits), ad::sum_all(r.z_tilde));
        for (const auto& u : r.uni) s = ad::add(s, ad::add(ad::sum_all(u.logits), ad::sum_all(u.z_pooled)));
        t.backward(s);
        for (std::size_t i = 0; i < pv.size(); ++i) EXPECT_TRUE(t.has_grad(pv[i])) << m.params()[i].name;
    }
}

TEST(Checkpoint, RoundTripIsBitwise) {
    const ModelConfig c = small_config();
    DibModel a(c, 27);
    a.param("fusion.0.redist.a.gamma").value[0] = 0.123456789012345;
    const std::string path = temp_path("rt.bin");
    a.save(path);
    DibModel b(c, 28);
    b.load(path);
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        EXPECT_EQ(a.params()[i].name, b.params()[i].name);
        EXPECT_EQ(a.params()[i].value, b.params()[i].value);
    }
    const auto batch = make_batch(c, 3, 29);
    Tape t1, t2;
    EXPECT_EQ(eval_forward(a, t1, batch).logits.value(), eval_forward(b, t2, batch).logits.value());
    std::filesystem::remove(path);
}

TEST(Checkpoint, LayoutHeader) {
    const ModelConfig c = small_config();
    const DibModel a(c, 30);
    const std::string path = temp_path("hdr.bin");
    a.save(path);
    std::ifstream f(path, std::ios::binary);
    char magic[8];
    f.read(magic, 8);
    EXPECT_EQ(std::string(magic, 7), "DIBCKPT");
    EXPECT_EQ(magic[7], '\0');
    unsigned char u[4];
    f.read(reinterpret_cast<char*>(u), 4);
    EXPECT_EQ(u[0] | (u[1] << 8) | (u[2] << 16) | (u[3] << 24), 1);
    f.read(reinterpret_cast<char*>(u), 4);
    EXPECT_EQ(static_cast<std::size_t>(u[0] | (u[1] << 8) | (u[2] << 16) | (u[3] << 24)), a.params().size());
    // total size: header + per tensor (name, rank, dims, payload)
    std::size_t bytes = 16;
    for (const auto& p : a.params()) bytes += 4 + p.name.size() + 4 + 4 * p.value.rank() + 8 * p.value.size();
    EXPECT_EQ(std::filesystem::file_size(path), bytes);
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadFiles) {
    const ModelConfig c = small_config();
    const DibModel a(c, 31);
    const std::string path = temp_path("bad.bin");
    a.save(path);
    DibModel other_layout(ModelConfig{}, 1);
    try {
        other_layout.load(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "bad_checkpoint");
    }
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(0);
        f.write("XXXX", 4);
    }
    DibModel b(c, 32);
    EXPECT_THROW(b.load(path), Error);
    a.save(path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
    EXPECT_THROW(b.load(path), Error);
    EXPECT_THROW(b.load(temp_path("missing.bin")), Error);
    std::filesystem::remove(path);
}

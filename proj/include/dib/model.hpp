#pragma once

// The DIB network. Each modality passes through a variational token encoder;
// the sampled streams exchange information only through a short learnable
// bottleneck sequence over M fusion layers; the pooled dominant stream feeds
// a multimodal variational encoder and the task decoders.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dib/autodiff.hpp"
#include "dib/common.hpp"

namespace dib::model {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

struct ModalitySpec {
    std::string name;
    std::size_t seq_len = 1;
    std::size_t feat_dim = 1;
};

enum class TaskKind { binary, multiclass, regression };

inline std::string to_string(TaskKind t) {
    switch (t) {
        case TaskKind::binary: return "binary";
        case TaskKind::multiclass: return "multiclass";
        case TaskKind::regression: return "regression";
    }
    return "?";
}

inline TaskKind task_from_string(const std::string& s) {
    if (s == "binary") return TaskKind::binary;
    if (s == "multiclass" || s == "7class") return TaskKind::multiclass;
    if (s == "regression") return TaskKind::regression;
    throw Error("invalid_config", "unknown task kind '" + s + "' (binary, multiclass, regression)");
}

inline constexpr std::size_t kNumClasses = 7;

inline std::size_t output_width(TaskKind t) { return t == TaskKind::multiclass ? kNumClasses : 1; }

struct ModelConfig {
    std::vector<ModalitySpec> modalities{{"t", 12, 16}, {"a", 20, 8}, {"v", 20, 8}};
    std::size_t hidden = 50;
    std::size_t heads = 5;
    std::size_t fusion_layers = 3;
    std::size_t bottleneck_len = 2;
    double dropout = 0.5;
    TaskKind task = TaskKind::regression;
    double gamma_init = 0.1;
    double bottleneck_init_std = 0.02;
    /// Activation of the log-sigma half of each variational encoder output.
    /// `linear` leaves it unconstrained apart from the [-8, 8] clamp; `relu`
    /// applies the same ReLU as the mean half, which bounds sigma below by 1.
    std::string sigma_head = "linear";
    /// Initial bias of the log-sigma half; its weights start at a tenth of
    /// the usual scale so early codes are dominated by the mean.
    double log_sigma_bias_init = -2.0;
    /// Stream pooled into the fused representation: a modality name or "all"
    /// (mean of every pooled stream).
    std::string dominant = "t";

    std::size_t modality_index(const std::string& name) const {
        for (std::size_t i = 0; i < modalities.size(); ++i)
            if (modalities[i].name == name) return i;
        throw Error("invalid_config", "unknown modality '" + name + "'");
    }

    void validate() const {
        if (modalities.empty()) throw Error("invalid_config", "model needs at least one modality");
        std::size_t min_len = SIZE_MAX;
        for (const auto& m : modalities) {
            if (m.name.empty() || m.seq_len < 1 || m.feat_dim < 1)
                throw Error("invalid_config", "modality '" + m.name + "' needs a name, seq_len >= 1, feat_dim >= 1");
            min_len = std::min(min_len, m.seq_len);
        }
        for (std::size_t i = 0; i < modalities.size(); ++i)
            for (std::size_t j = i + 1; j < modalities.size(); ++j)
                if (modalities[i].name == modalities[j].name)
                    throw Error("invalid_config", "duplicate modality '" + modalities[i].name + "'");
        if (hidden < 1 || heads < 1 || hidden % heads != 0)
            throw Error("invalid_config", "model.hidden must be a positive multiple of model.heads");
        if (bottleneck_len < 1 || bottleneck_len >= min_len)
            throw Error("invalid_config", "model.bottleneck_len must satisfy 1 <= l_b < shortest sequence length (" +
                                              std::to_string(min_len) + ")");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("invalid_config", "model.dropout must be in [0, 1)");
        if (dominant != "all") modality_index(dominant);
        if (sigma_head != "linear" && sigma_head != "relu")
            throw Error("invalid_config", "model.sigma_head must be 'linear' or 'relu'");
    }
};

/// Parameter groups for the optimizer: the text encoder versus the rest.
enum class ParamGroup { encoder = 0, model = 1 };

struct Param {
    std::string name;
    Tensor value;
    ParamGroup group = ParamGroup::model;
};

/// One batch of model inputs. `inputs[m]` is [b, l_m, d_m]; `available[m]`
/// holds one 0/1 flag per sample (1 = modality observed).
struct Batch {
    std::vector<Tensor> inputs;
    std::vector<std::vector<double>> available;

    std::size_t size() const { return inputs.empty() ? 0 : inputs[0].dim(0); }
};

struct ForwardOptions {
    /// Training mode: dropout active.
    bool train = false;
    /// Draw reparameterization noise; otherwise codes equal their means.
    bool sample = false;
    /// Use the encoder means instead of sampled codes for pooled outputs fed
    /// to the information terms.
    bool info_on_mean = false;
    bool keep_attention = false;
};

/// Per-modality outputs of the unimodal stage.
struct UnimodalOut {
    Var e_pooled;   // mean-pooled raw input, [b, d_m]
    Var z_seq;      // sampled tokens, [b, l_m, h]
    Var z_pooled;   // pooled code used by the information term, [b, h]
    Var logits;     // unimodal decoder output, [b, out]
};

struct ForwardResult {
    std::vector<UnimodalOut> uni;
    Var z;        // fused representation, [b, h]
    Var z_tilde;  // multimodal code, [b, h]
    Var logits;   // multimodal decoder output, [b, out]
    /// Attention weights when requested: per layer, the bottleneck update
    /// [b, heads, l_b, sum l] followed by one redistribute map per modality.
    std::vector<Tensor> attention;
};

class DibModel {
public:
    DibModel() = default;

    DibModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        const std::size_t h = cfg_.hidden;
        const std::size_t out = output_width(cfg_.task);
        for (const auto& m : cfg_.modalities) {
            const ParamGroup g = m.name == "t" ? ParamGroup::encoder : ParamGroup::model;
            add_linear("enc." + m.name + ".l1", m.feat_dim, h, g, rng);
            add_encoder_head("enc." + m.name + ".l2", g, rng);
        }
        if (cfg_.fusion_layers > 0)
            add_normal("bottleneck.b0", {cfg_.bottleneck_len, h}, cfg_.bottleneck_init_std, rng);
        for (std::size_t l = 0; l < cfg_.fusion_layers; ++l) {
            const std::string p = "fusion." + std::to_string(l);
            add_square(p + ".update.wq", h, rng);
            add_square(p + ".update.wk", h, rng);
            add_square(p + ".update.wv", h, rng);
            for (const auto& m : cfg_.modalities) {
                if (!redistributes(l, m.name)) continue;
                add_square(p + ".redist." + m.name + ".wq", h, rng);
                add_square(p + ".redist." + m.name + ".wk", h, rng);
                add_square(p + ".redist." + m.name + ".wv", h, rng);
                params_.push_back({p + ".redist." + m.name + ".gamma", Tensor::scalar(cfg_.gamma_init),
                                   ParamGroup::model});
            }
        }
        add_linear("mm_enc.l1", h, h, ParamGroup::model, rng);
        add_encoder_head("mm_enc.l2", ParamGroup::model, rng);
        for (const auto& m : cfg_.modalities) {
            add_linear("dec." + m.name + ".l1", h, h, ParamGroup::model, rng);
            add_linear("dec." + m.name + ".l2", h, out, ParamGroup::model, rng);
        }
        add_linear("dec.mm.l1", h, h, ParamGroup::model, rng);
        add_linear("dec.mm.l2", h, out, ParamGroup::model, rng);
        index_params();
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    Param& param(const std::string& name) { return params_.at(lookup(name)); }
    const Param& param(const std::string& name) const { return params_.at(lookup(name)); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    /// Closed-form parameter count for a configuration.
    static std::size_t expected_parameter_count(const ModelConfig& c) {
        const std::size_t h = c.hidden, o = output_width(c.task), nm = c.modalities.size();
        auto mlp = [&](std::size_t in) { return in * h + h + h * 2 * h + 2 * h; };
        auto dec = [&]() { return h * h + h + h * o + o; };
        const std::size_t layers = c.fusion_layers;
        std::size_t n = 0;
        for (const auto& m : c.modalities) n += mlp(m.feat_dim) + dec();
        if (layers > 0) {
            // the last layer only refreshes streams that reach the pooled output
            const std::size_t last = c.dominant == "all" ? nm : 1;
            n += c.bottleneck_len * h + layers * 3 * h * h + ((layers - 1) * nm + last) * (3 * h * h + 1);
        }
        n += mlp(h) + dec();
        return n;
    }

    /// Build the forward graph on `tape`. `param_vars` receives the leaf
    /// handle for every parameter (in params() order). `rng` supplies the
    /// reparameterization noise and dropout masks in training mode.
    ForwardResult forward(Tape& tape, const Batch& batch, const ForwardOptions& opt, Rng& rng,
                          std::vector<Var>* param_vars = nullptr, bool requires_grad = true) const {
        const std::size_t nm = cfg_.modalities.size();
        if (batch.inputs.size() != nm || batch.available.size() != nm)
            throw Error("shape_mismatch", "batch has " + std::to_string(batch.inputs.size()) +
                                              " modalities, model expects " + std::to_string(nm));
        const std::size_t b = batch.size();
        if (b == 0) throw Error("invalid_argument", "empty batch");
        for (std::size_t m = 0; m < nm; ++m) {
            const auto& ms = cfg_.modalities[m];
            const Shape want{b, ms.seq_len, ms.feat_dim};
            if (batch.inputs[m].shape() != want)
                throw Error("shape_mismatch", "modality '" + ms.name + "' input is " +
                                                  ad::shape_str(batch.inputs[m].shape()) + ", expected " +
                                                  ad::shape_str(want));
            if (batch.available[m].size() != b)
                throw Error("shape_mismatch", "modality '" + ms.name + "' availability has wrong length");
        }

        std::vector<Var> pv;
        pv.reserve(params_.size());
        for (const auto& p : params_) pv.push_back(tape.leaf(p.value, requires_grad, p.name));
        auto P = [&](const std::string& name) { return pv[lookup(name)]; };

        const std::size_t h = cfg_.hidden;
        ForwardResult res;

        // Unimodal variational encoders.
        std::vector<Var> streams;
        for (std::size_t m = 0; m < nm; ++m) {
            const auto& ms = cfg_.modalities[m];
            UnimodalOut u;
            Var e = tape.constant(batch.inputs[m], "input." + ms.name);
            u.e_pooled = ad::mean_pool(e, 1);
            const auto enc = encode(e, "enc." + ms.name, P, opt, rng, ms.name);
            u.z_seq = enc.z;
            u.z_pooled = ad::mean_pool(opt.info_on_mean ? enc.mu : enc.z, 1);
            u.logits = decode(ad::mean_pool(enc.z, 1), "dec." + ms.name, P);
            streams.push_back(enc.z);
            res.uni.push_back(u);
        }

        // Attention bottleneck fusion.
        std::vector<double> key_mask;
        bool any_missing = false;
        for (std::size_t bb = 0; bb < b; ++bb)
            for (std::size_t m = 0; m < nm; ++m)
                for (std::size_t t = 0; t < cfg_.modalities[m].seq_len; ++t) {
                    key_mask.push_back(batch.available[m][bb]);
                    any_missing = any_missing || batch.available[m][bb] < 0.5;
                }
        Var bott;
        if (cfg_.fusion_layers > 0) bott = ad::repeat(P("bottleneck.b0"), b);
        for (std::size_t l = 0; l < cfg_.fusion_layers; ++l) {
            const std::string p = "fusion." + std::to_string(l);
            Var u = nm == 1 ? streams[0] : ad::concat(streams, 1);
            Tensor w_update;
            bott = ad::attention(ad::matmul(bott, P(p + ".update.wq")), ad::matmul(u, P(p + ".update.wk")),
                                 ad::matmul(u, P(p + ".update.wv")), cfg_.heads, any_missing ? &key_mask : nullptr,
                                 opt.keep_attention ? &w_update : nullptr);
            if (opt.keep_attention) res.attention.push_back(std::move(w_update));
            for (std::size_t m = 0; m < nm; ++m) {
                if (!redistributes(l, cfg_.modalities[m].name)) continue;
                const std::string q = p + ".redist." + cfg_.modalities[m].name;
                Tensor w_redist;
                Var msg = ad::attention(ad::matmul(streams[m], P(q + ".wq")), ad::matmul(bott, P(q + ".wk")),
                                        ad::matmul(bott, P(q + ".wv")), cfg_.heads, nullptr,
                                        opt.keep_attention ? &w_redist : nullptr);
                if (opt.keep_attention) res.attention.push_back(std::move(w_redist));
                streams[m] = ad::add(streams[m], ad::mul(msg, P(q + ".gamma")));
            }
        }

        if (cfg_.dominant == "all") {
            std::vector<Var> pooled;
            for (const Var& s : streams) pooled.push_back(ad::reshape(ad::mean_pool(s, 1), {b, 1, h}));
            Var cat = nm == 1 ? pooled[0] : ad::concat(pooled, 1);
            res.z = ad::relu(ad::mean_pool(cat, 1));
        } else {
            res.z = ad::relu(ad::mean_pool(streams[cfg_.modality_index(cfg_.dominant)], 1));
        }

        // Multimodal variational encoder and decoder.
        const auto mm = encode(res.z, "mm_enc", P, opt, rng, "multimodal");
        res.z_tilde = opt.info_on_mean ? mm.mu : mm.z;
        res.logits = decode(mm.z, "dec.mm", P);
        if (param_vars) *param_vars = std::move(pv);
        return res;
    }

    // -- checkpoint I/O -----------------------------------------------------

    static constexpr char kMagic[8] = {'D', 'I', 'B', 'C', 'K', 'P', 'T', '\0'};
    static constexpr std::uint32_t kVersion = 1;

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw Error("io_error", "cannot write checkpoint '" + path + "'");
        f.write(kMagic, 8);
        write_u32(f, kVersion);
        write_u32(f, static_cast<std::uint32_t>(params_.size()));
        for (const auto& p : params_) {
            write_u32(f, static_cast<std::uint32_t>(p.name.size()));
            f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            write_u32(f, static_cast<std::uint32_t>(p.value.rank()));
            for (std::size_t d : p.value.shape()) write_u32(f, static_cast<std::uint32_t>(d));
            for (double v : p.value.values()) write_f64(f, v);
        }
        if (!f) throw Error("io_error", "failed writing checkpoint '" + path + "'");
    }

    /// Load parameter values into a model built with the same configuration.
    void load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw Error("io_error", "cannot read checkpoint '" + path + "'");
        char magic[8];
        f.read(magic, 8);
        if (!f || std::memcmp(magic, kMagic, 8) != 0) throw Error("bad_checkpoint", "'" + path + "' is not a checkpoint");
        if (read_u32(f) != kVersion) throw Error("bad_checkpoint", "unsupported checkpoint version");
        const std::uint32_t count = read_u32(f);
        if (count != params_.size())
            throw Error("bad_checkpoint", "checkpoint has " + std::to_string(count) + " tensors, model has " +
                                              std::to_string(params_.size()));
        for (std::uint32_t i = 0; i < count; ++i) {
            std::string name(read_u32(f), '\0');
            f.read(name.data(), static_cast<std::streamsize>(name.size()));
            Shape shape(read_u32(f));
            for (auto& d : shape) d = read_u32(f);
            Param& p = param(name);
            if (shape != p.value.shape())
                throw Error("bad_checkpoint", "tensor '" + name + "' has shape " + ad::shape_str(shape) +
                                                  ", model expects " + ad::shape_str(p.value.shape()));
            for (double& v : p.value.values()) v = read_f64(f);
            if (!f) throw Error("bad_checkpoint", "truncated checkpoint '" + path + "'");
        }
    }

private:
    /// Whether fusion layer `l` updates stream `m`. Streams that cannot reach
    /// the pooled output after the last layer are not updated there.
    bool redistributes(std::size_t l, const std::string& m) const {
        return l + 1 < cfg_.fusion_layers || cfg_.dominant == "all" || cfg_.dominant == m;
    }

    struct EncodeOut {
        Var mu, log_sigma, z;
    };

    template <class Lookup>
    EncodeOut encode(Var x, const std::string& prefix, Lookup& P, const ForwardOptions& opt, Rng& rng,
                     const std::string& what) const {
        try {
            return encode_impl(x, prefix, P, opt, rng);
        } catch (const Error& err) {
            throw Error(err.code(), "encoder for " + what + ": " + err.what());
        }
    }

    template <class Lookup>
    EncodeOut encode_impl(Var x, const std::string& prefix, Lookup& P, const ForwardOptions& opt, Rng& rng) const {
        const std::size_t h = cfg_.hidden;
        Var a = ad::relu(ad::add(ad::matmul(x, P(prefix + ".l1.w")), P(prefix + ".l1.b")));
        a = ad::dropout(a, cfg_.dropout, opt.train, rng);
        Var out = ad::add(ad::matmul(a, P(prefix + ".l2.w")), P(prefix + ".l2.b"));
        const std::size_t last = out.shape().size() - 1;
        EncodeOut e;
        if (cfg_.sigma_head == "relu") {
            out = ad::relu(out);
            e.mu = ad::slice(out, last, 0, h);
            e.log_sigma = ad::slice(out, last, h, 2 * h);
        } else {
            e.mu = ad::relu(ad::slice(out, last, 0, h));
            e.log_sigma = ad::slice(out, last, h, 2 * h);
        }
        Tensor eps(e.mu.shape(), 0.0);
        if (opt.sample)
            for (double& v : eps.values()) v = rng.normal();
        e.z = ad::gaussian_sample(e.mu, e.log_sigma, eps);
        return e;
    }

    template <class Lookup>
    Var decode(Var z, const std::string& prefix, Lookup& P) const {
        Var a = ad::relu(ad::add(ad::matmul(z, P(prefix + ".l1.w")), P(prefix + ".l1.b")));
        return ad::add(ad::matmul(a, P(prefix + ".l2.w")), P(prefix + ".l2.b"));
    }

    void add_linear(const std::string& name, std::size_t in, std::size_t out, ParamGroup g, Rng& rng) {
        const double std = std::sqrt(2.0 / static_cast<double>(in + out));
        Tensor w({in, out});
        for (double& v : w.values()) v = std * rng.normal();
        params_.push_back({name + ".w", std::move(w), g});
        params_.push_back({name + ".b", Tensor({out}, 0.0), g});
    }

    // [mu | log sigma] projection from the hidden layer.
    void add_encoder_head(const std::string& name, ParamGroup g, Rng& rng) {
        const std::size_t h = cfg_.hidden;
        add_linear(name, h, 2 * h, g, rng);
        Tensor& w = params_[params_.size() - 2].value;
        Tensor& b = params_.back().value;
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = h; j < 2 * h; ++j) w.at(i, j) *= 0.1;
        for (std::size_t j = h; j < 2 * h; ++j) b[j] = cfg_.log_sigma_bias_init;
    }

    void add_square(const std::string& name, std::size_t h, Rng& rng) {
        const double std = std::sqrt(1.0 / static_cast<double>(h));
        Tensor w({h, h});
        for (double& v : w.values()) v = std * rng.normal();
        params_.push_back({name, std::move(w), ParamGroup::model});
    }

    void add_normal(const std::string& name, Shape shape, double std, Rng& rng) {
        Tensor w(std::move(shape));
        for (double& v : w.values()) v = std * rng.normal();
        params_.push_back({name, std::move(w), ParamGroup::model});
    }

    void index_params() {
        index_.clear();
        for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
    }

    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("invalid_argument", "no parameter named '" + name + "'");
        return it->second;
    }

    static void write_u32(std::ostream& f, std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        f.write(reinterpret_cast<const char*>(b), 4);
    }
    static void write_f64(std::ostream& f, double v) {
        std::uint64_t u;
        std::memcpy(&u, &v, 8);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
        f.write(reinterpret_cast<const char*>(b), 8);
    }
    static std::uint32_t read_u32(std::istream& f) {
        unsigned char b[4] = {};
        f.read(reinterpret_cast<char*>(b), 4);
        if (!f) throw Error("bad_checkpoint", "truncated checkpoint");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    static double read_f64(std::istream& f) {
        unsigned char b[8] = {};
        f.read(reinterpret_cast<char*>(b), 8);
        if (!f) throw Error("bad_checkpoint", "truncated checkpoint");
        std::uint64_t u = 0;
        for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        double v;
        std::memcpy(&v, &u, 8);
        return v;
    }

    ModelConfig cfg_;
    std::vector<Param> params_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace dib::model

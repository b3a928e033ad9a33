#pragma once

// Adam, the joint training loop, evaluation metrics and the decline statistic.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dib/autodiff.hpp"
#include "dib/data.hpp"
#include "dib/model.hpp"
#include "dib/objective.hpp"

namespace dib::train {

using json = nlohmann::ordered_json;
using model::TaskKind;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update of n values at step t (t >= 1).
inline void adam_update(double* p, const double* g, double* m, double* v, std::size_t n, std::size_t t, double lr,
                        const AdamConfig& c) {
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        p[i] -= lr * mh / (std::sqrt(vh) + c.eps);
    }
}

class Adam {
public:
    Adam() = default;
    Adam(const std::vector<model::Param>& params, AdamConfig cfg) : cfg_(cfg) {
        for (const auto& p : params) {
            m_.emplace_back(p.value.size(), 0.0);
            v_.emplace_back(p.value.size(), 0.0);
        }
    }

    /// Apply one step; `lr[group]` is the rate of each parameter group.
    void step(std::vector<model::Param>& params, const std::vector<ad::Tensor>& grads, const double lr[2]) {
        if (params.size() != m_.size() || grads.size() != params.size())
            throw Error("invalid_argument", "Adam state does not match the parameter list");
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            adam_update(p.value.data(), grads[i].data(), m_[i].data(), v_[i].data(), p.value.size(), t_,
                        lr[static_cast<int>(p.group)], cfg_);
            if (!all_finite(p.value.data(), p.value.size()))
                throw Error("non_finite", "parameter '" + p.name + "' became non-finite after an optimizer step");
        }
    }

    std::size_t steps() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
    double acc2 = 0.0;
    double acc7 = std::numeric_limits<double>::quiet_NaN();
    double f1_weighted = 0.0;
    double mae = 0.0;
    double pearson_corr = 0.0;
    bool corr_degenerate = false;
    std::size_t n = 0;

    static const std::vector<std::string>& names() {
        static const std::vector<std::string> k{"acc2", "acc7", "f1_weighted", "mae", "pearson_corr"};
        return k;
    }
    std::vector<double> values() const { return {acc2, acc7, f1_weighted, mae, pearson_corr}; }

    json to_json() const {
        json j;
        const auto v = values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (std::isfinite(v[i])) j[names()[i]] = v[i];
            else j[names()[i]] = nullptr;
        }
        j["corr_degenerate"] = corr_degenerate;
        j["n"] = n;
        return j;
    }
};

/// Pearson correlation; zero-variance input gives 0 and sets `degenerate`.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b, bool* degenerate = nullptr) {
    const std::size_t n = a.size();
    if (degenerate) *degenerate = false;
    if (n == 0 || b.size() != n) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0.0) || !(sbb > 0.0)) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Support-weighted F1 over two classes.
inline double weighted_f1_binary(const std::vector<int>& truth, const std::vector<int>& pred) {
    if (truth.empty()) return 0.0;
    double total = 0.0;
    for (int c : {0, 1}) {
        double tp = 0, fp = 0, fn = 0, support = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const bool t = truth[i] == c, p = pred[i] == c;
            support += t;
            tp += t && p;
            fp += !t && p;
            fn += t && !p;
        }
        const double denom = 2 * tp + fp + fn;
        const double f1 = denom > 0 ? 2 * tp / denom : 0.0;
        total += support * f1;
    }
    return total / static_cast<double>(truth.size());
}

/// Metrics from raw predictions. Regression: predicted scores. Binary:
/// predicted probabilities of the positive class. Multiclass: predicted bin
/// indices.
inline MetricsReport compute_metrics(const std::vector<double>& pred, const std::vector<double>& labels,
                                     TaskKind kind) {
    if (pred.size() != labels.size()) throw Error("shape_mismatch", "metrics: prediction/label count mismatch");
    MetricsReport r;
    r.n = pred.size();
    if (r.n == 0) return r;
    std::vector<int> t2, p2;
    double abs_err = 0.0;
    std::size_t exact7 = 0;
    const double nd = static_cast<double>(r.n);
    for (std::size_t i = 0; i < r.n; ++i) {
        const double y = labels[i], p = pred[i];
        switch (kind) {
            case TaskKind::regression: {
                if (y != 0.0) {  // neutral samples are excluded from the binary metrics
                    t2.push_back(y > 0.0);
                    p2.push_back(p > 0.0);
                }
                const double rp = std::round(std::clamp(p, data::kScoreMin, data::kScoreMax));
                const double ry = std::round(std::clamp(y, data::kScoreMin, data::kScoreMax));
                exact7 += rp == ry;
                break;
            }
            case TaskKind::binary:
                t2.push_back(y > 0.5);
                p2.push_back(p > 0.5);
                break;
            case TaskKind::multiclass:
                if (y != 3.0) {
                    t2.push_back(y > 3.0);
                    p2.push_back(p > 3.0);
                }
                exact7 += p == y;
                break;
        }
        abs_err += std::abs(p - y);
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < t2.size(); ++i) correct += t2[i] == p2[i];
    r.acc2 = t2.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(t2.size());
    r.f1_weighted = weighted_f1_binary(t2, p2);
    if (kind != TaskKind::binary) r.acc7 = static_cast<double>(exact7) / nd;
    r.mae = abs_err / nd;
    r.pearson_corr = pearson(pred, labels, &r.corr_degenerate);
    return r;
}

/// Percentage decline of a higher-is-better metric: (old - new) / old * 100.
inline double decline(double m_old, double m_new) { return ((m_old - m_new) * 100.0) / m_old; }

/// Decline of each metric with MAE re-oriented so that positive always means
/// worse, in MetricsReport::names() order. Undefined metrics give NaN.
inline std::vector<double> oriented_declines(const MetricsReport& clean, const MetricsReport& noisy) {
    const auto a = clean.values(), b = noisy.values();
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a[i]) || !std::isfinite(b[i]) || a[i] == 0.0) {
            d[i] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        d[i] = decline(a[i], b[i]);
        if (MetricsReport::names()[i] == "mae") d[i] = -d[i];
    }
    return d;
}

/// Mean of the defined oriented declines.
inline double average_decline(const MetricsReport& clean, const MetricsReport& noisy) {
    double s = 0.0;
    std::size_t n = 0;
    for (double v : oriented_declines(clean, noisy))
        if (std::isfinite(v)) {
            s += v;
            ++n;
        }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

struct MeanStd {
    double mean = 0.0, std = 0.0;
};

/// Mean and sample standard deviation (n - 1) of finite values.
inline MeanStd mean_std(const std::vector<double>& v) {
    std::vector<double> f;
    for (double x : v)
        if (std::isfinite(x)) f.push_back(x);
    if (f.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    MeanStd r;
    for (double x : f) r.mean += x;
    r.mean /= static_cast<double>(f.size());
    if (f.size() > 1) {
        for (double x : f) r.std += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(r.std / static_cast<double>(f.size() - 1));
    }
    return r;
}

/// Per-metric mean and std over several reports.
inline json aggregate(const std::vector<MetricsReport>& reports) {
    json j;
    for (std::size_t k = 0; k < MetricsReport::names().size(); ++k) {
        std::vector<double> v;
        for (const auto& r : reports) v.push_back(r.values()[k]);
        const auto ms = mean_std(v);
        json e;
        if (std::isfinite(ms.mean)) {
            e["mean"] = ms.mean;
            e["std"] = ms.std;
        } else {
            e["mean"] = nullptr;
            e["std"] = nullptr;
        }
        e["per_seed"] = json::array();
        for (double x : v) {
            if (std::isfinite(x)) e["per_seed"].push_back(x);
            else e["per_seed"].push_back(nullptr);
        }
        j[MetricsReport::names()[k]] = e;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Maps dataset modalities onto model inputs, skipping dropped ones.
struct InputPlan {
    std::vector<std::size_t> dataset_index;
    std::vector<model::ModalitySpec> specs;
};

inline InputPlan plan_inputs(const data::Dataset& ds, const std::set<std::string>& drop) {
    InputPlan p;
    for (std::size_t m = 0; m < ds.modalities.size(); ++m) {
        if (drop.count(ds.modalities[m].name)) continue;
        p.dataset_index.push_back(m);
        p.specs.push_back(ds.modalities[m]);
    }
    for (const auto& d : drop) ds.modality_index(d);
    if (p.specs.empty()) throw Error("invalid_config", "every modality was dropped");
    return p;
}

inline model::Batch make_batch(const data::Dataset& ds, const InputPlan& plan, const std::vector<std::size_t>& idx) {
    model::Batch b;
    for (std::size_t m : plan.dataset_index) {
        const auto& ms = ds.modalities[m];
        const std::size_t len = ms.seq_len * ms.feat_dim;
        ad::Tensor t({idx.size(), ms.seq_len, ms.feat_dim});
        std::vector<double> av;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(ds.features[m].data() + idx[i] * len, len, t.data() + i * len);
            av.push_back(ds.available[m][idx[i]]);
        }
        b.inputs.push_back(std::move(t));
        b.available.push_back(std::move(av));
    }
    return b;
}

inline objective::Targets make_targets(const data::Dataset& ds, const std::vector<std::size_t>& idx) {
    objective::Targets t;
    for (std::size_t i : idx) {
        t.y.push_back(ds.labels[i]);
        t.classes.push_back(ds.label_kind == TaskKind::multiclass ? static_cast<std::size_t>(ds.labels[i]) : 0);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr_encoder = 1e-5;
    double lr_model = 2e-5;
    std::size_t batch_size = 32;
    std::size_t epochs = 50;
    AdamConfig adam;
    model::ModelConfig model;       // modalities and task are taken from the dataset
    objective::ObjectiveConfig objective;
    bool info_on_mean = false;
    std::set<std::string> drop_modalities;
    std::uint64_t seed = 1;
    std::size_t eval_chunk = 256;
    /// JSON-lines log path; empty disables logging.
    std::string log_path;

    void validate() const {
        if (!(lr_encoder > 0.0) || !(lr_model > 0.0)) throw Error("invalid_config", "learning rates must be positive");
        if (batch_size < 2) throw Error("invalid_config", "train.batch_size must be >= 2");
        if (epochs < 1) throw Error("invalid_config", "train.epochs must be >= 1");
        objective.validate();
        if (uses_information() && batch_size < objective.kernel.k_rank + 1)
            throw Error("invalid_config", "train.batch_size must be >= kernel.k_rank + 1 when LRIB terms are on");
    }

    bool uses_information() const { return objective.uni_lrib || objective.multi_lrib; }

    /// Smallest batch the loop will step on.
    std::size_t min_batch() const { return uses_information() ? objective.kernel.k_rank + 1 : 2; }
};

inline model::DibModel build_model(const data::Dataset& ds, const TrainConfig& cfg) {
    model::ModelConfig mc = cfg.model;
    mc.modalities = plan_inputs(ds, cfg.drop_modalities).specs;
    mc.task = ds.label_kind;
    if (mc.dominant != "all" && !cfg.drop_modalities.empty() && cfg.drop_modalities.count(mc.dominant))
        throw Error("invalid_config", "dominant modality '" + mc.dominant + "' is dropped");
    return model::DibModel(mc, derive_seed(cfg.seed, 0x696e6974));
}

/// Point predictions of the multimodal head in eval mode.
inline std::vector<double> predict(const model::DibModel& m, const data::Dataset& ds, const InputPlan& plan,
                                   const std::vector<std::size_t>& idx, std::size_t chunk = 256) {
    std::vector<double> out;
    Rng unused(0);
    const TaskKind kind = m.config().task;
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
        const std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                            idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + chunk)));
        ad::Tape tape;
        const auto fr = m.forward(tape, make_batch(ds, plan, part), model::ForwardOptions{}, unused, nullptr, false);
        const ad::Tensor& lg = fr.logits.value();
        for (std::size_t i = 0; i < part.size(); ++i) {
            switch (kind) {
                case TaskKind::regression: out.push_back(lg[i]); break;
                case TaskKind::binary: out.push_back(ad::sigmoid_value(lg[i])); break;
                case TaskKind::multiclass: {
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < model::kNumClasses; ++c)
                        if (lg[i * model::kNumClasses + c] > lg[i * model::kNumClasses + best]) best = c;
                    out.push_back(static_cast<double>(best));
                    break;
                }
            }
        }
    }
    return out;
}

inline MetricsReport evaluate(const model::DibModel& m, const data::Dataset& ds, const TrainConfig& cfg,
                              data::Split split) {
    const auto plan = plan_inputs(ds, cfg.drop_modalities);
    const auto idx = ds.indices(split);
    std::vector<double> labels;
    for (std::size_t i : idx) labels.push_back(ds.labels[i]);
    return compute_metrics(predict(m, ds, plan, idx, cfg.eval_chunk), labels, ds.label_kind);
}

/// Selection score, higher is better: -MAE for regression, accuracy otherwise.
inline double selection_score(const MetricsReport& r, TaskKind kind) {
    switch (kind) {
        case TaskKind::regression: return -r.mae;
        case TaskKind::binary: return r.acc2;
        case TaskKind::multiclass: return r.acc7;
    }
    return 0.0;
}

struct StepResult {
    objective::LossBreakdown parts;
    /// Parameters that received no gradient on this step.
    std::vector<std::string> detached;
};

/// Forward, loss and gradients for one batch. Gradients come back in
/// params() order.
inline StepResult compute_gradients(const model::DibModel& m, const model::Batch& batch,
                                    const objective::Targets& targets, const TrainConfig& cfg, Rng& rng,
                                    std::vector<ad::Tensor>& grads) {
    ad::Tape tape;
    std::vector<ad::Var> pv;
    model::ForwardOptions opt;
    opt.train = true;
    opt.sample = true;
    opt.info_on_mean = cfg.info_on_mean;
    const auto fr = m.forward(tape, batch, opt, rng, &pv, true);
    auto tl = objective::total_loss(fr, m.config(), targets, cfg.objective);
    const std::string bad = tl.parts.first_non_finite();
    if (!bad.empty()) throw Error("non_finite", "loss component '" + bad + "' is non-finite");
    tape.backward(tl.loss);
    StepResult r;
    r.parts = tl.parts;
    grads.clear();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (!tape.has_grad(pv[i])) r.detached.push_back(m.params()[i].name);
        grads.push_back(tape.grad(pv[i]));
    }
    return r;
}

struct EpochRecord {
    std::size_t epoch = 0;
    objective::LossBreakdown mean_loss;
    MetricsReport val;
    std::size_t steps = 0;
};

struct TrainResult {
    model::DibModel model;  // best-on-validation parameters
    model::DibModel final_model;  // parameters after the last epoch
    std::size_t best_epoch = 0;
    MetricsReport best_val;
    std::vector<EpochRecord> history;
    std::vector<std::string> detached;  // union over all steps
};

inline json epoch_json(const EpochRecord& r) {
    return {{"epoch", r.epoch}, {"steps", r.steps}, {"loss", r.mean_loss.to_json()}, {"val", r.val.to_json()}};
}

inline TrainResult train(const data::Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    const auto plan = plan_inputs(ds, cfg.drop_modalities);
    model::DibModel m = build_model(ds, cfg);
    Adam opt(m.params(), cfg.adam);
    const double lr[2] = {cfg.lr_encoder, cfg.lr_model};
    const auto train_idx = ds.indices(data::Split::train);
    if (train_idx.size() < cfg.min_batch())
        throw Error("invalid_config", "training split has " + std::to_string(train_idx.size()) +
                                          " samples, fewer than the minimum batch of " +
                                          std::to_string(cfg.min_batch()));

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path);
        if (!log) throw Error("io_error", "cannot write training log '" + cfg.log_path + "'");
    }

    TrainResult res;
    res.model = m;
    double best = -std::numeric_limits<double>::infinity();
    std::set<std::string> detached;
    std::size_t global_step = 0;
    std::vector<ad::Tensor> grads;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        Rng shuffle(derive_seed(cfg.seed, 0x73687566, epoch));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

        EpochRecord rec;
        rec.epoch = epoch;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            if (end - start < cfg.min_batch()) continue;  // too small for a rank-k Gram spectrum
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(end));
            Rng step_rng(derive_seed(cfg.seed, 0x73746570, global_step++));
            const auto sr = compute_gradients(m, make_batch(ds, plan, idx), make_targets(ds, idx), cfg, step_rng, grads);
            detached.insert(sr.detached.begin(), sr.detached.end());
            opt.step(m.params(), grads, lr);
            auto& acc = rec.mean_loss;
            if (rec.steps == 0) {
                acc = sr.parts;
            } else {
                for (std::size_t i = 0; i < acc.modalities.size(); ++i) {
                    acc.i_comp[i] += sr.parts.i_comp[i];
                    acc.task[i] += sr.parts.task[i];
                }
                acc.i_comp_mm += sr.parts.i_comp_mm;
                acc.task_mm += sr.parts.task_mm;
                acc.total += sr.parts.total;
            }
            ++rec.steps;
        }
        if (rec.steps > 0) {
            auto& acc = rec.mean_loss;
            const double inv = 1.0 / static_cast<double>(rec.steps);
            for (std::size_t i = 0; i < acc.modalities.size(); ++i) {
                acc.i_comp[i] *= inv;
                acc.task[i] *= inv;
            }
            acc.i_comp_mm *= inv;
            acc.task_mm *= inv;
            acc.total *= inv;
        }
        const bool has_val = !ds.indices(data::Split::val).empty();
        rec.val = evaluate(m, ds, cfg, has_val ? data::Split::val : data::Split::train);
        const double score = selection_score(rec.val, ds.label_kind);
        if (score > best) {
            best = score;
            res.model = m;
            res.best_epoch = epoch;
            res.best_val = rec.val;
        }
        if (log) log << epoch_json(rec).dump() << '\n';
        res.history.push_back(rec);
    }
    res.final_model = m;
    res.detached.assign(detached.begin(), detached.end());
    return res;
}

}  // namespace dib::train

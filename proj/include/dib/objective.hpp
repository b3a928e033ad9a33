#pragma once

// LRIB losses. Every term is minimized. With the default convention the
// multiplier weights compression:
//
//   loss_m  = beta_m * I(E^m; Z^m) + task(y^m_hat, y)
//   loss_mm = beta   * I(Z; Z~)    + task(y_hat, y)
//   total   = sum_m loss_m + loss_mm
//
// BetaOn::task moves the multiplier onto the task term instead
// (I + beta * task). The task loss (cross-entropy or MAE) is the variational
// stand-in for the relevance term I(Z; Y).

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dib/autodiff.hpp"
#include "dib/entropy.hpp"
#include "dib/model.hpp"

namespace dib::objective {

using ad::Var;
using model::TaskKind;

/// Which term of each bottleneck the beta multiplier scales.
enum class BetaOn { compression, task };

inline BetaOn beta_on_from_string(const std::string& s) {
    if (s == "compression") return BetaOn::compression;
    if (s == "task") return BetaOn::task;
    throw Error("invalid_config", "objective.beta_on must be 'compression' or 'task', got '" + s + "'");
}

inline std::string to_string(BetaOn b) { return b == BetaOn::compression ? "compression" : "task"; }

struct ObjectiveConfig {
    entropy::KernelConfig kernel;
    BetaOn beta_on = BetaOn::compression;
    double beta_uni = 1e-5;
    double beta_multi = 1e-5;
    /// Overrides of beta_uni for individual modalities.
    std::map<std::string, double> beta_modality;
    bool uni_lrib = true;
    bool multi_lrib = true;
    /// Modalities whose unimodal compression term is switched off.
    std::set<std::string> uni_lrib_off;

    double beta_for(const std::string& m) const {
        auto it = beta_modality.find(m);
        return it == beta_modality.end() ? beta_uni : it->second;
    }

    void validate() const {
        kernel.validate();
        if (!(beta_uni >= 0.0) || !(beta_multi >= 0.0))
            throw Error("invalid_config", "objective betas must be non-negative");
        for (const auto& [m, b] : beta_modality)
            if (!(b >= 0.0)) throw Error("invalid_config", "objective beta for '" + m + "' must be non-negative");
    }
};

/// Labels for one batch. `y` holds 0/1 for binary and the continuous score
/// for regression; `classes` holds bin indices for multiclass.
struct Targets {
    std::vector<double> y;
    std::vector<std::size_t> classes;
};

inline Var task_loss(Var logits, const Targets& t, TaskKind kind) {
    switch (kind) {
        case TaskKind::binary: return ad::binary_cross_entropy(logits, t.y);
        case TaskKind::multiclass: return ad::softmax_cross_entropy(logits, t.classes);
        case TaskKind::regression: return ad::mean_abs_error(logits, t.y);
    }
    throw Error("invalid_argument", "unknown task kind");
}

struct TermResult {
    Var loss;
    double compression = 0.0;
    double task = 0.0;
};

/// Weights (compression, task) for a multiplier under a convention.
inline std::pair<double, double> term_weights(double beta, BetaOn on) {
    return on == BetaOn::compression ? std::pair{beta, 1.0} : std::pair{1.0, beta};
}

/// Weighted compression plus weighted task term for one information
/// bottleneck. With `compress` false the compression term is exactly zero
/// and absent from the graph.
inline TermResult lrib_loss(Var x_pooled, Var t_pooled, Var logits, const Targets& targets, TaskKind kind,
                            double beta, const entropy::KernelConfig& kernel, bool compress,
                            BetaOn on = BetaOn::compression) {
    const auto [wc, wt] = term_weights(beta, on);
    TermResult r;
    Var task = task_loss(logits, targets, kind);
    r.task = task.value()[0];
    Var weighted = wt == 1.0 ? task : ad::scale(task, wt);
    if (compress) {
        Var mi = ad::mutual_information_node(x_pooled, t_pooled, kernel);
        r.compression = mi.value()[0];
        r.loss = ad::add(wc == 1.0 ? mi : ad::scale(mi, wc), weighted);
    } else {
        r.loss = weighted;
    }
    return r;
}

/// Unimodal term over mean-pooled batches: I(E^m; Z^m) and the task loss of
/// the unimodal decoder.
inline TermResult uni_lrib_loss(Var e_pooled, Var z_pooled, Var logits, const Targets& targets, TaskKind kind,
                                double beta_m, const entropy::KernelConfig& kernel, bool compress = true,
                                BetaOn on = BetaOn::compression) {
    return lrib_loss(e_pooled, z_pooled, logits, targets, kind, beta_m, kernel, compress, on);
}

/// Multimodal term: I(Z; Z~) and the task loss of the multimodal decoder.
inline TermResult multi_lrib_loss(Var z, Var z_tilde, Var logits, const Targets& targets, TaskKind kind, double beta,
                                  const entropy::KernelConfig& kernel, bool compress = true,
                                  BetaOn on = BetaOn::compression) {
    return lrib_loss(z, z_tilde, logits, targets, kind, beta, kernel, compress, on);
}

struct LossBreakdown {
    std::vector<std::string> modalities;
    std::vector<double> i_comp;
    std::vector<double> task;
    std::vector<double> beta_m;
    double i_comp_mm = 0.0;
    double task_mm = 0.0;
    double beta = 0.0;
    BetaOn beta_on = BetaOn::compression;
    double total = 0.0;

    /// total recomputed from the components.
    double recomputed_total() const {
        double s = 0.0;
        for (std::size_t i = 0; i < modalities.size(); ++i) {
            const auto [wc, wt] = term_weights(beta_m[i], beta_on);
            s += wc * i_comp[i] + wt * task[i];
        }
        const auto [wc, wt] = term_weights(beta, beta_on);
        return s + wc * i_comp_mm + wt * task_mm;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        for (std::size_t i = 0; i < modalities.size(); ++i) {
            j["i_comp_" + modalities[i]] = i_comp[i];
            j["task_" + modalities[i]] = task[i];
        }
        j["i_comp_mm"] = i_comp_mm;
        j["task_mm"] = task_mm;
        j["total"] = total;
        return j;
    }

    /// Name of the first non-finite component, or empty.
    std::string first_non_finite() const {
        for (std::size_t i = 0; i < modalities.size(); ++i) {
            if (!std::isfinite(i_comp[i])) return "i_comp_" + modalities[i];
            if (!std::isfinite(task[i])) return "task_" + modalities[i];
        }
        if (!std::isfinite(i_comp_mm)) return "i_comp_mm";
        if (!std::isfinite(task_mm)) return "task_mm";
        if (!std::isfinite(total)) return "total";
        return {};
    }
};

struct TotalLoss {
    Var loss;
    LossBreakdown parts;
};

/// Algorithm-level objective over one forward pass.
inline TotalLoss total_loss(const model::ForwardResult& fr, const model::ModelConfig& mc, const Targets& targets,
                            const ObjectiveConfig& cfg) {
    TotalLoss out;
    std::vector<Var> terms;
    for (std::size_t m = 0; m < mc.modalities.size(); ++m) {
        const std::string& name = mc.modalities[m].name;
        const bool compress = cfg.uni_lrib && !cfg.uni_lrib_off.count(name);
        const double beta_m = cfg.beta_for(name);
        const auto& u = fr.uni[m];
        const auto r = uni_lrib_loss(u.e_pooled, u.z_pooled, u.logits, targets, mc.task, beta_m, cfg.kernel, compress,
                                     cfg.beta_on);
        out.parts.modalities.push_back(name);
        out.parts.i_comp.push_back(r.compression);
        out.parts.task.push_back(r.task);
        out.parts.beta_m.push_back(beta_m);
        terms.push_back(r.loss);
    }
    const auto r = multi_lrib_loss(fr.z, fr.z_tilde, fr.logits, targets, mc.task, cfg.beta_multi, cfg.kernel,
                                   cfg.multi_lrib, cfg.beta_on);
    out.parts.i_comp_mm = r.compression;
    out.parts.task_mm = r.task;
    out.parts.beta = cfg.beta_multi;
    out.parts.beta_on = cfg.beta_on;
    terms.push_back(r.loss);

    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
    out.loss = total;
    out.parts.total = total.value()[0];
    return out;
}

}  // namespace dib::objective

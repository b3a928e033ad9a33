#pragma once

// Robustness protocols and the information-plane sweep: noise injection,
// noise intensity, missing modalities, and the beta frontier.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dib/data.hpp"
#include "dib/entropy.hpp"
#include "dib/trainkit.hpp"

namespace dib::bench {

using json = nlohmann::ordered_json;
using train::MetricsReport;
using train::TrainConfig;

/// Noise protocol: token noise on the text stream plus additive Gaussian
/// noise on the other streams, applied to the selected splits.
struct NoiseProtocol {
    std::string token_modality = "t";
    double token_rate = 0.10;
    std::vector<std::string> gaussian_modalities{"a", "v"};
    double gaussian_std = 1.0;
    data::SplitSet splits;
    std::uint64_t seed = 7;

    data::Dataset apply(const data::Dataset& ds) const {
        data::Dataset out = ds;
        bool has_token = false;
        for (const auto& m : ds.modalities) has_token = has_token || m.name == token_modality;
        if (has_token && token_rate > 0.0) out = data::corrupt_tokens(out, token_modality, token_rate, seed, splits);
        std::vector<std::string> present;
        for (const auto& g : gaussian_modalities)
            for (const auto& m : ds.modalities)
                if (m.name == g) present.push_back(g);
        if (!present.empty() && gaussian_std > 0.0)
            out = data::corrupt_gaussian(out, present, gaussian_std, derive_seed(seed, 1), splits);
        return out;
    }
};

/// Training seed for run `i` of a multi-seed experiment.
inline std::uint64_t run_seed(std::uint64_t master, std::size_t i) { return derive_seed(master, 0x72756e, i); }

struct SeedRun {
    std::uint64_t seed = 0;
    MetricsReport test;
    std::size_t best_epoch = 0;
};

/// Train on `ds` with `cfg` (seed replaced) and evaluate on its test split.
inline SeedRun run_once(const data::Dataset& ds, TrainConfig cfg, std::uint64_t seed) {
    cfg.seed = seed;
    const auto r = train::train(ds, cfg);
    return {seed, train::evaluate(r.model, ds, cfg, data::Split::test), r.best_epoch};
}

// ---------------------------------------------------------------------------
// Noise protocol
// ---------------------------------------------------------------------------

struct NoiseRow {
    std::string variant;
    std::uint64_t seed = 0;
    MetricsReport clean, noisy;
    std::vector<double> declines;  // oriented, MetricsReport::names() order
    double average_decline = 0.0;
};

struct NoiseResult {
    std::vector<NoiseRow> rows;
    json summary;
};

/// Clean and corrupted train/eval for each variant and seed. Variants are
/// named configurations sharing the seed list, so rows pair up by seed.
inline NoiseResult bench_noise(const data::Dataset& clean, const NoiseProtocol& protocol,
                               const std::vector<std::pair<std::string, TrainConfig>>& variants,
                               const std::vector<std::uint64_t>& seeds) {
    const data::Dataset noisy = protocol.apply(clean);
    NoiseResult res;
    json variants_summary = json::object();
    for (const auto& [name, cfg] : variants) {
        std::vector<double> avg;
        std::vector<MetricsReport> cl, no;
        for (std::uint64_t s : seeds) {
            NoiseRow row;
            row.variant = name;
            row.seed = s;
            row.clean = run_once(clean, cfg, s).test;
            row.noisy = run_once(noisy, cfg, s).test;
            row.declines = train::oriented_declines(row.clean, row.noisy);
            row.average_decline = train::average_decline(row.clean, row.noisy);
            avg.push_back(row.average_decline);
            cl.push_back(row.clean);
            no.push_back(row.noisy);
            res.rows.push_back(row);
        }
        const auto ms = train::mean_std(avg);
        variants_summary[name] = {{"mean_average_decline", ms.mean},
                                  {"std_average_decline", ms.std},
                                  {"clean", train::aggregate(cl)},
                                  {"noisy", train::aggregate(no)}};
    }
    res.summary = {{"variants", variants_summary}};
    if (variants.size() >= 2) {
        // paired comparison of the first variant against the second
        const std::string& a = variants[0].first;
        const std::string& b = variants[1].first;
        std::size_t wins = 0;
        for (std::size_t i = 0; i < seeds.size(); ++i) wins += res.rows[i].average_decline < res.rows[seeds.size() + i].average_decline;
        res.summary["paired"] = {{"variant", a}, {"baseline", b}, {"wins", wins}, {"seeds", seeds.size()}};
    }
    return res;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepRow {
    double x = 0.0;  // sweep variable
    std::uint64_t seed = 0;
    MetricsReport test;
};

/// Train and evaluate one corrupted copy of `ds` per grid value and seed.
inline std::vector<SweepRow> sweep(const data::Dataset& ds, const TrainConfig& cfg, const std::vector<double>& grid,
                                   const std::vector<std::uint64_t>& seeds,
                                   const std::function<data::Dataset(const data::Dataset&, double)>& corrupt) {
    std::vector<SweepRow> rows;
    for (double x : grid) {
        const data::Dataset cur = corrupt(ds, x);
        for (std::uint64_t s : seeds) rows.push_back({x, s, run_once(cur, cfg, s).test});
    }
    return rows;
}

/// Mean of one metric per grid value, in grid order.
inline std::vector<double> sweep_means(const std::vector<SweepRow>& rows, const std::vector<double>& grid,
                                       const std::string& metric) {
    const auto& names = MetricsReport::names();
    const auto k = static_cast<std::size_t>(std::find(names.begin(), names.end(), metric) - names.begin());
    if (k >= names.size()) throw Error("invalid_argument", "unknown metric '" + metric + "'");
    std::vector<double> out;
    for (double x : grid) {
        std::vector<double> v;
        for (const auto& r : rows)
            if (r.x == x) v.push_back(r.test.values()[k]);
        out.push_back(train::mean_std(v).mean);
    }
    return out;
}

inline data::Dataset missing_corruption(const data::Dataset& ds, double rate, std::uint64_t seed) {
    if (rate == 0.0) return ds;
    return data::mask_missing(ds, rate, seed);
}

inline data::Dataset intensity_corruption(const data::Dataset& ds, double std, const std::vector<std::string>& mods,
                                          std::uint64_t seed) {
    if (std == 0.0) return ds;
    return data::corrupt_gaussian(ds, mods, std, seed);
}

// ---------------------------------------------------------------------------
// Information plane
// ---------------------------------------------------------------------------

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
            i = j + 1;
        }
        return r;
    };
    return train::pearson(ranks(a), ranks(b));
}

/// Differential entropy (bits) of a sample by the m-spacing estimator.
inline double spacing_entropy_bits(std::vector<double> y) {
    const std::size_t n = y.size();
    if (n < 2) return 0.0;
    std::sort(y.begin(), y.end());
    const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n)))));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double hi = y[std::min(n - 1, i + m)], lo = y[i >= m ? i - m : 0];
        s += std::log(std::max(hi - lo, 1e-12) * static_cast<double>(n) / (2.0 * static_cast<double>(m)));
    }
    return s / static_cast<double>(n) / std::numbers::ln2;
}

/// Plug-in entropy (bits) of discrete labels.
inline double discrete_entropy_bits(const std::vector<double>& y) {
    std::map<double, std::size_t> counts;
    for (double v : y) ++counts[v];
    double h = 0.0;
    for (const auto& [v, c] : counts) {
        const double p = static_cast<double>(c) / static_cast<double>(y.size());
        h -= p * std::log2(p);
    }
    return h;
}

struct FrontierPoint {
    double beta = 0.0;
    std::uint64_t seed = 0;
    double i_xt = 0.0;      // I(X; T) in bits, batch-averaged
    double i_ty = 0.0;      // I(T; Y) in bits, same estimator
    double i_ty_var = 0.0;  // variational lower bound on I(T; Y) from the decoder
    double task = 0.0;      // task loss behind the bound
};

/// Information-plane coordinates of a trained model on the training split.
/// X is the concatenation of the pooled inputs, T the sampled multimodal code
/// (seeded noise, no dropout) and Y the label column. Both coordinates use the
/// low-rank kernel estimator averaged over consecutive batches. The decoder
/// bound is H(Y) - CE for classification and h(Y) - log2(2e * MAE) (Laplace
/// likelihood) for regression.
inline FrontierPoint frontier_point(const model::DibModel& m, const data::Dataset& ds, const TrainConfig& cfg,
                                    std::uint64_t noise_seed = 0x66726f6e) {
    const auto plan = train::plan_inputs(ds, cfg.drop_modalities);
    const auto idx = ds.indices(data::Split::train);
    const auto& kc = cfg.objective.kernel;
    const std::size_t bs = std::max(cfg.batch_size, kc.k_rank + 1);
    std::vector<double> labels;
    double xt_sum = 0.0, ty_sum = 0.0, task_sum = 0.0;
    std::size_t batches = 0, counted = 0;
    Rng noise(noise_seed);
    model::ForwardOptions opt;
    opt.sample = true;
    opt.info_on_mean = cfg.info_on_mean;
    for (std::size_t start = 0; start + bs <= idx.size(); start += bs) {
        const std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                            idx.begin() + static_cast<std::ptrdiff_t>(start + bs));
        ad::Tape tape;
        const auto fr = m.forward(tape, train::make_batch(ds, plan, part), opt, noise, nullptr, false);
        std::vector<ad::Var> pooled;
        for (const auto& u : fr.uni) pooled.push_back(u.e_pooled);
        ad::Var x = pooled.size() == 1 ? pooled[0] : ad::concat(pooled, 1);
        xt_sum += ad::mutual_information_node(x, fr.z_tilde, kc).value()[0];
        ad::Tensor yt({bs, 1});
        for (std::size_t i = 0; i < bs; ++i) yt[i] = ds.labels[part[i]];
        ty_sum += ad::mutual_information_node(tape.constant(yt), fr.z_tilde, kc).value()[0];
        const auto targets = train::make_targets(ds, part);
        task_sum += objective::task_loss(fr.logits, targets, ds.label_kind).value()[0] * static_cast<double>(bs);
        counted += bs;
        for (std::size_t i : part) labels.push_back(ds.labels[i]);
        ++batches;
    }
    if (batches == 0) throw Error("invalid_config", "training split too small for one frontier batch");
    FrontierPoint p;
    p.i_xt = xt_sum / static_cast<double>(batches);
    p.i_ty = ty_sum / static_cast<double>(batches);
    p.task = task_sum / static_cast<double>(counted);
    if (ds.label_kind == model::TaskKind::regression)
        p.i_ty_var = spacing_entropy_bits(labels) - std::log2(2.0 * std::numbers::e * std::max(p.task, 1e-12));
    else
        p.i_ty_var = discrete_entropy_bits(labels) - p.task / std::numbers::ln2;
    return p;
}

struct FrontierResult {
    std::vector<FrontierPoint> points;  // one per (beta, seed)
    std::vector<double> mean_i_xt, mean_i_ty;  // per beta
    double spearman = 0.0;
};

inline FrontierResult sweep_beta(const data::Dataset& ds, const TrainConfig& base, const std::vector<double>& betas,
                                 const std::vector<std::uint64_t>& seeds) {
    FrontierResult res;
    for (double b : betas) {
        TrainConfig cfg = base;
        cfg.objective.beta_uni = b;
        cfg.objective.beta_multi = b;
        cfg.objective.beta_modality.clear();
        double sx = 0.0, sy = 0.0;
        for (std::uint64_t s : seeds) {
            cfg.seed = s;
            const auto r = train::train(ds, cfg);
            FrontierPoint p = frontier_point(r.final_model, ds, cfg);
            p.beta = b;
            p.seed = s;
            sx += p.i_xt;
            sy += p.i_ty;
            res.points.push_back(p);
        }
        res.mean_i_xt.push_back(sx / static_cast<double>(seeds.size()));
        res.mean_i_ty.push_back(sy / static_cast<double>(seeds.size()));
    }
    res.spearman = betas.size() >= 2 ? spearman(res.mean_i_xt, res.mean_i_ty) : 0.0;
    return res;
}

}  // namespace dib::bench

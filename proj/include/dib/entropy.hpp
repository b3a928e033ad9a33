#pragma once

// Kernel Gram construction and matrix-based Renyi information measures.
//
// Entropies are in bits. The low-rank estimator keeps the top-k eigenvalues
// of the trace-normalized Gram matrix and spreads the remaining trace mass
// evenly over the other n - k eigenvalues:
//
//   H_k(A) = 1/(1-alpha) * log2( sum_{i<=k} l_i^alpha + (n-k) * l_r^alpha ),
//   l_r    = max(0, (1 - sum_{i<=k} l_i) / (n - k)).
//
// Joint entropy uses the normalized Hadamard product; conditional entropy and
// mutual information follow by the usual identities.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dib/common.hpp"
#include "dib/linalg.hpp"

namespace dib::entropy {

using linalg::EigenSpectrum;
using linalg::Matrix;
using linalg::SymMatrix;

enum class BandwidthRule { top5_nearest, fixed };

struct KernelConfig {
    double alpha = 1.9;
    std::size_t k_rank = 10;
    BandwidthRule bandwidth_rule = BandwidthRule::top5_nearest;
    /// sigma^2 for BandwidthRule::fixed.
    double fixed_sigma2 = 1.0;
    /// Opt-in Lanczos eigenvalues for value-only evaluation. Gradients always
    /// use the dense spectrum.
    bool use_lanczos = false;
    std::size_t lanczos_probes = 0;
    std::uint64_t lanczos_seed = 0x5EED;

    void validate() const {
        if (!(alpha > 0.0) || std::abs(alpha - 1.0) < 1e-6)
            throw Error("invalid_config", "kernel.alpha must be > 0 and differ from 1 by at least 1e-6, got " +
                                              std::to_string(alpha));
        if (k_rank < 1) throw Error("invalid_config", "kernel.k_rank must be >= 1");
        if (bandwidth_rule == BandwidthRule::fixed && !(fixed_sigma2 > 0.0))
            throw Error("invalid_config", "kernel.sigma2 must be positive for the fixed bandwidth rule");
    }

    void check_rank(std::size_t n) const {
        if (n < 2 || k_rank > n - 1)
            throw Error("invalid_config", "kernel.k_rank=" + std::to_string(k_rank) +
                                              " requires batch size >= k_rank + 1, got n=" +
                                              std::to_string(n));
    }
};

inline constexpr double kSigma2Floor = 1e-12;

/// Trace-normalized Gaussian Gram matrix over a batch. Diagonal entries are
/// exactly 1/n.
struct GramMatrix {
    SymMatrix base;
    Matrix kernel;  // unnormalized K, kept for gradient evaluation
    double sigma2 = 1.0;
    bool degenerate = false;  // every pairwise distance was zero

    std::size_t n() const { return base.n(); }
};

inline Matrix pairwise_sq_distances(const Matrix& x) {
    const Eigen::Index n = x.rows();
    Matrix d(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d(i, i) = 0.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double v = (x.row(i) - x.row(j)).squaredNorm();
            d(i, j) = v;
            d(j, i) = v;
        }
    }
    return d;
}

/// sigma^2 = mean of the five smallest strictly positive pairwise squared
/// distances (all positive ones if fewer than five), floored at 1e-12.
inline double top5_sigma2(const Matrix& sq_dist, bool* degenerate = nullptr) {
    const Eigen::Index n = sq_dist.rows();
    std::vector<double> pos;
    pos.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j)
            if (sq_dist(i, j) > 0.0) pos.push_back(sq_dist(i, j));
    if (degenerate) *degenerate = pos.empty();
    if (pos.empty()) return kSigma2Floor;
    const std::size_t take = std::min<std::size_t>(5, pos.size());
    std::partial_sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(take), pos.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < take; ++i) sum += pos[i];
    return std::max(sum / static_cast<double>(take), kSigma2Floor);
}

/// Rows of `x` are samples.
inline GramMatrix gram_from_batch(const Matrix& x, const KernelConfig& cfg,
                                  const std::string& context = "batch") {
    const Eigen::Index n = x.rows();
    if (n < 2) throw Error("invalid_argument", context + ": Gram matrix needs at least 2 samples");
    if (!all_finite(x.data(), static_cast<std::size_t>(x.size())))
        throw Error("non_finite", context + ": batch has non-finite features");
    const Matrix d2 = pairwise_sq_distances(x);
    GramMatrix g;
    if (cfg.bandwidth_rule == BandwidthRule::top5_nearest) {
        g.sigma2 = top5_sigma2(d2, &g.degenerate);
    } else {
        g.sigma2 = cfg.fixed_sigma2;
        g.degenerate = d2.isZero(0.0);
    }
    g.kernel = (-d2 / (2.0 * g.sigma2)).array().exp().matrix();
    // Gaussian kernel has K_ii = 1, so K / sqrt(K_ii K_jj) / n is K / n.
    g.base = SymMatrix(g.kernel / static_cast<double>(n), context);
    return g;
}

inline Matrix rows_as_matrix(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return Matrix(0, 0);
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size())
            throw Error("shape_mismatch", "batch rows have differing dimensions");
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    return m;
}

/// Spectrum of a trace-normalized PSD matrix, clamped, via the configured path.
inline EigenSpectrum gram_spectrum(const SymMatrix& a, const KernelConfig& cfg,
                                   bool want_vectors, const std::string& context = "gram") {
    EigenSpectrum s;
    if (cfg.use_lanczos && !want_vectors) {
        linalg::LanczosOptions opt;
        opt.probes = cfg.lanczos_probes == 0 ? 0 : std::max(cfg.lanczos_probes, cfg.k_rank);
        opt.seed = cfg.lanczos_seed;
        s = linalg::eig_lanczos_topk(a, cfg.k_rank, opt, context);
    } else {
        s = linalg::eig_dense(a, context);
    }
    linalg::clamp_psd(s, context);
    return s;
}

namespace detail {

inline double inv_one_minus_alpha(double alpha) { return 1.0 / (1.0 - alpha); }

struct LowRankTerms {
    double sum_alpha = 0.0;  // argument of the log
    double residual = 0.0;   // l_r
};

inline LowRankTerms low_rank_terms(const std::vector<double>& values, std::size_t n,
                                   const KernelConfig& cfg) {
    const std::size_t k = cfg.k_rank;
    if (k < 1 || k > n - 1 || values.size() < k)
        throw Error("invalid_config", "low-rank entropy needs 1 <= k <= n-1 with k eigenvalues available");
    LowRankTerms t;
    double head = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        t.sum_alpha += std::pow(values[i], cfg.alpha);
        head += values[i];
    }
    t.residual = std::max(0.0, (1.0 - head) / static_cast<double>(n - k));
    t.sum_alpha += static_cast<double>(n - k) * std::pow(t.residual, cfg.alpha);
    return t;
}

}  // namespace detail

/// Low-rank Renyi entropy (bits) from a clamped spectrum of an n x n
/// trace-normalized Gram matrix.
inline double renyi_entropy_lowrank(const EigenSpectrum& spec, std::size_t n, const KernelConfig& cfg) {
    const auto t = detail::low_rank_terms(spec.values, n, cfg);
    if (!(t.sum_alpha > 0.0) || !std::isfinite(t.sum_alpha))
        throw Error("corrupt_spectrum", "low-rank entropy: log argument is " + std::to_string(t.sum_alpha));
    return detail::inv_one_minus_alpha(cfg.alpha) * std::log2(t.sum_alpha);
}

/// Full-spectrum matrix-based Renyi entropy (bits).
inline double renyi_entropy_full(const EigenSpectrum& spec, const KernelConfig& cfg) {
    double s = 0.0;
    for (double v : spec.values) s += std::pow(v, cfg.alpha);
    if (!(s > 0.0) || !std::isfinite(s))
        throw Error("corrupt_spectrum", "full entropy: log argument is " + std::to_string(s));
    return detail::inv_one_minus_alpha(cfg.alpha) * std::log2(s);
}

inline double entropy_of(const SymMatrix& a, const KernelConfig& cfg, const std::string& context = "gram") {
    cfg.validate();
    cfg.check_rank(a.n());
    return renyi_entropy_lowrank(gram_spectrum(a, cfg, false, context), a.n(), cfg);
}

inline double joint_entropy(const SymMatrix& a, const SymMatrix& b, const KernelConfig& cfg) {
    return entropy_of(linalg::hadamard_normalized(a, b), cfg, "joint");
}

inline double conditional_entropy(const SymMatrix& a, const SymMatrix& b, const KernelConfig& cfg) {
    return joint_entropy(a, b, cfg) - entropy_of(b, cfg);
}

/// I(A;B) = H(A) + H(B) - H(A,B). Symmetric bitwise: the two marginal terms
/// are added in a fixed canonical order.
inline double mutual_information(const SymMatrix& a, const SymMatrix& b, const KernelConfig& cfg) {
    const double ha = entropy_of(a, cfg);
    const double hb = entropy_of(b, cfg);
    const double hj = joint_entropy(a, b, cfg);
    return (std::min(ha, hb) + std::max(ha, hb)) - hj;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Eigenvalues closer than this are treated as one cluster when forming the
/// gradient; their dH/dlambda is averaged over the cluster's projector.
inline constexpr double kDegeneracyGap = 1e-8;

struct GramGradient {
    double value = 0.0;
    Matrix grad;  // dH/dA, symmetric n x n
    bool degenerate_cluster = false;
};

/// Low-rank entropy of a trace-normalized PSD matrix and its gradient with
/// respect to the matrix entries, from dlambda_i = v_i^T dA v_i.
inline GramGradient entropy_gram_gradient(const SymMatrix& a, const KernelConfig& cfg,
                                          const std::string& context = "gram") {
    cfg.validate();
    const std::size_t n = a.n();
    cfg.check_rank(n);
    const std::size_t k = cfg.k_rank;
    EigenSpectrum spec = linalg::eig_dense(a, context);
    linalg::clamp_psd(spec, context);
    const auto terms = detail::low_rank_terms(spec.values, n, cfg);
    if (!(terms.sum_alpha > 0.0))
        throw Error("corrupt_spectrum", context + ": log argument non-positive");

    GramGradient out;
    out.value = detail::inv_one_minus_alpha(cfg.alpha) * std::log2(terms.sum_alpha);

    const double dh_ds = 1.0 / ((1.0 - cfg.alpha) * std::numbers::ln2 * terms.sum_alpha);
    const double a1 = cfg.alpha - 1.0;
    auto pow_grad = [&](double lam) { return lam > 0.0 ? std::pow(lam, a1) : 0.0; };
    const double res_term = pow_grad(terms.residual);

    std::vector<double> coef(n, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        coef[i] = dh_ds * cfg.alpha * (pow_grad(spec.values[i]) - res_term);

    // Average coefficients over near-degenerate clusters touching the top-k.
    std::size_t i = 0;
    while (i < k) {
        std::size_t j = i + 1;
        while (j < n && spec.values[j - 1] - spec.values[j] <= kDegeneracyGap) ++j;
        if (j - i > 1) {
            double mean = 0.0;
            for (std::size_t t = i; t < j; ++t) mean += coef[t];
            mean /= static_cast<double>(j - i);
            bool varied = false;
            for (std::size_t t = i; t < j; ++t) {
                if (coef[t] != mean) varied = true;
                coef[t] = mean;
            }
            out.degenerate_cluster = out.degenerate_cluster || varied;
        }
        i = j;
    }

    const Matrix& v = *spec.vectors;
    Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(coef.data(), static_cast<Eigen::Index>(n));
    out.grad = v * c.asDiagonal() * v.transpose();
    out.grad = (out.grad + out.grad.transpose()) * 0.5;
    return out;
}

/// Pull a gradient dH/dA back to the batch through A = K / n with the
/// Gaussian kernel; sigma^2 is held constant.
inline Matrix gram_grad_to_batch(const Matrix& x, const GramMatrix& g, const Matrix& grad_a) {
    const double n = static_cast<double>(x.rows());
    const Matrix w = grad_a.cwiseProduct(g.kernel);
    const Eigen::VectorXd row_sum = w.rowwise().sum();
    // dH/dx_i = -(2 / (n sigma^2)) * sum_j W_ij (x_i - x_j)
    Matrix out = row_sum.asDiagonal() * x - w * x;
    out *= -2.0 / (n * g.sigma2);
    return out;
}

struct EntropyWithGrad {
    double value = 0.0;
    Matrix grad;  // same shape as the batch
    bool degenerate_batch = false;
    bool degenerate_cluster = false;
};

/// Low-rank entropy of the Gram matrix of `x` and dH/dx.
inline EntropyWithGrad entropy_grad_wrt_batch(const Matrix& x, const KernelConfig& cfg) {
    const GramMatrix g = gram_from_batch(x, cfg);
    const GramGradient gg = entropy_gram_gradient(g.base, cfg);
    return {gg.value, gram_grad_to_batch(x, g, gg.grad), g.degenerate, gg.degenerate_cluster};
}

struct MutualInfoWithGrad {
    double h_x = 0.0;
    double h_y = 0.0;
    double h_joint = 0.0;
    double value = 0.0;
    Matrix grad_x;
    Matrix grad_y;
    bool degenerate_batch = false;
    bool degenerate_cluster = false;
};

/// I(X;Y) between two batches with the same samples, and its gradient with
/// respect to both batches.
inline MutualInfoWithGrad mutual_information_grad(const Matrix& x, const Matrix& y, const KernelConfig& cfg) {
    if (x.rows() != y.rows())
        throw Error("shape_mismatch", "mutual information: batches have " + std::to_string(x.rows()) +
                                          " and " + std::to_string(y.rows()) + " samples");
    const GramMatrix ga = gram_from_batch(x, cfg, "batch_x");
    const GramMatrix gb = gram_from_batch(y, cfg, "batch_y");
    const SymMatrix joint = linalg::hadamard_normalized(ga.base, gb.base);
    const GramGradient da = entropy_gram_gradient(ga.base, cfg, "gram_x");
    const GramGradient db = entropy_gram_gradient(gb.base, cfg, "gram_y");
    const GramGradient dj = entropy_gram_gradient(joint, cfg, "joint");

    // C = (A o B) / t with t = tr(A o B):
    //   dH/dA = (G o B) / t - <G, C> / t * diag(B)
    const Matrix prod = ga.base.data().cwiseProduct(gb.base.data());
    const double t = prod.trace();
    const double gc = dj.grad.cwiseProduct(joint.data()).sum();
    Matrix dja = dj.grad.cwiseProduct(gb.base.data()) / t;
    Matrix djb = dj.grad.cwiseProduct(ga.base.data()) / t;
    dja.diagonal() -= (gc / t) * gb.base.data().diagonal();
    djb.diagonal() -= (gc / t) * ga.base.data().diagonal();

    MutualInfoWithGrad out;
    out.h_x = da.value;
    out.h_y = db.value;
    out.h_joint = dj.value;
    out.value = (std::min(da.value, db.value) + std::max(da.value, db.value)) - dj.value;
    out.grad_x = gram_grad_to_batch(x, ga, da.grad - dja);
    out.grad_y = gram_grad_to_batch(y, gb, db.grad - djb);
    out.degenerate_batch = ga.degenerate || gb.degenerate;
    out.degenerate_cluster = da.degenerate_cluster || db.degenerate_cluster || dj.degenerate_cluster;
    return out;
}

/// Convenience wrappers over raw batches.
inline double batch_entropy(const Matrix& x, const KernelConfig& cfg) {
    return entropy_of(gram_from_batch(x, cfg).base, cfg);
}

inline double batch_mutual_information(const Matrix& x, const Matrix& y, const KernelConfig& cfg) {
    return mutual_information(gram_from_batch(x, cfg, "batch_x").base, gram_from_batch(y, cfg, "batch_y").base,
                              cfg);
}

}  // namespace dib::entropy

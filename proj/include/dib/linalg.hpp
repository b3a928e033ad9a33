#pragma once

// Dense symmetric eigendecomposition and Lanczos top-k extraction over the
// small PSD matrices that entropy estimation works with (n <= a few hundred).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dib/common.hpp"

namespace dib::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Exactly symmetric, finite square matrix. Construction symmetrizes the
/// input as (M + M^T) / 2 so that a(i, j) == a(j, i) bitwise.
class SymMatrix {
public:
    SymMatrix() = default;

    explicit SymMatrix(const Matrix& m, const std::string& context = "matrix") {
        if (m.rows() != m.cols())
            throw Error("shape_mismatch", context + ": SymMatrix requires a square input, got " +
                                              std::to_string(m.rows()) + "x" +
                                              std::to_string(m.cols()));
        if (!all_finite(m.data(), static_cast<std::size_t>(m.size())))
            throw Error("non_finite", context + ": SymMatrix input has non-finite entries");
        data_ = (m + m.transpose()) * 0.5;
    }

    std::size_t n() const { return static_cast<std::size_t>(data_.rows()); }
    const Matrix& data() const { return data_; }
    double operator()(std::size_t i, std::size_t j) const {
        return data_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    double trace() const { return data_.trace(); }

private:
    Matrix data_;
};

/// Descending eigenvalues, optionally with matching orthonormal eigenvector
/// columns. `k_computed` is n for the dense path and k for Lanczos.
struct EigenSpectrum {
    std::vector<double> values;
    std::optional<Matrix> vectors;
    std::size_t k_computed = 0;
};

/// Negative eigenvalue tolerance for inputs that are PSD in exact arithmetic.
inline constexpr double kPsdTolerance = 1e-10;

/// Zero out round-off negatives of a PSD spectrum. Anything below
/// -kPsdTolerance means the input was not PSD and is reported as an error.
inline void clamp_psd(EigenSpectrum& spec, const std::string& context = "spectrum") {
    for (double& v : spec.values) {
        if (v < -kPsdTolerance)
            throw Error("not_psd", context + ": eigenvalue " + std::to_string(v) +
                                       " below PSD tolerance");
        if (v < 0.0) v = 0.0;
    }
}

/// Full spectrum with eigenvectors.
inline EigenSpectrum eig_dense(const SymMatrix& m, const std::string& context = "matrix") {
    if (m.n() == 0) throw Error("invalid_argument", context + ": empty matrix");
    Eigen::SelfAdjointEigenSolver<Matrix> solver(m.data(), Eigen::ComputeEigenvectors);
    if (solver.info() != Eigen::Success)
        throw Error("no_convergence", context + ": dense symmetric eigensolver did not converge");
    const auto n = static_cast<Eigen::Index>(m.n());
    EigenSpectrum out;
    out.values.resize(m.n());
    Matrix vecs(n, n);
    // solver output is ascending
    for (Eigen::Index i = 0; i < n; ++i) {
        out.values[static_cast<std::size_t>(i)] = solver.eigenvalues()(n - 1 - i);
        vecs.col(i) = solver.eigenvectors().col(n - 1 - i);
    }
    out.vectors = std::move(vecs);
    out.k_computed = m.n();
    return out;
}

struct LanczosOptions {
    /// Minimum Krylov dimension before convergence is tested. 0 selects
    /// min(2k + 8, n).
    std::size_t probes = 0;
    std::uint64_t seed = 0x5EED;
    /// Ritz residual tolerance, relative to the largest Ritz value.
    double tolerance = 1e-11;
    /// Cap on breakdown restarts. 0 allows up to n: every restart consumes
    /// one basis dimension, and a rank-r matrix needs n - r of them.
    std::size_t max_restarts = 0;
    bool want_vectors = false;
};

/// Top-k eigenpairs by Lanczos iteration with full reorthogonalization.
///
/// The Krylov basis grows from `probes` vectors until every one of the top-k
/// Ritz pairs has residual below the tolerance, capped at n (where the
/// factorization is exact). An invariant subspace (beta ~ 0) triggers a
/// restart from a fresh seeded probe orthogonalized against the basis.
inline EigenSpectrum eig_lanczos_topk(const SymMatrix& m, std::size_t k,
                                      const LanczosOptions& opt = {},
                                      const std::string& context = "matrix") {
    const std::size_t n = m.n();
    if (n < 2 || k < 1 || k > n - 1)
        throw Error("invalid_argument", context + ": Lanczos k=" + std::to_string(k) +
                                            " outside [1, n-1] for n=" + std::to_string(n));
    std::size_t min_dim = opt.probes == 0 ? std::min<std::size_t>(2 * k + 8, n) : opt.probes;
    if (min_dim < k)
        throw Error("invalid_argument", context + ": Lanczos probe count below k");
    min_dim = std::min(min_dim, n);

    const Matrix& a = m.data();
    const auto ni = static_cast<Eigen::Index>(n);
    const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);

    Rng rng(opt.seed);
    auto random_unit = [&](const Matrix& basis, Eigen::Index used) -> std::optional<Vector> {
        Vector q(ni);
        for (Eigen::Index i = 0; i < ni; ++i) q(i) = rng.normal();
        for (int pass = 0; pass < 2; ++pass)
            for (Eigen::Index j = 0; j < used; ++j) q -= basis.col(j).dot(q) * basis.col(j);
        const double nq = q.norm();
        if (nq < 1e-10) return std::nullopt;
        return Vector(q / nq);
    };

    Matrix basis(ni, ni);
    std::vector<double> alpha;
    std::vector<double> beta;  // beta[j] couples basis j and j+1
    std::size_t restarts = 0;

    {
        auto q0 = random_unit(basis, 0);
        if (!q0) throw Error("breakdown", context + ": could not draw a Lanczos start vector");
        basis.col(0) = *q0;
    }

    Vector ritz_values;
    Matrix ritz_vectors;
    Eigen::Index dim = 0;
    for (Eigen::Index j = 0; j < ni; ++j) {
        Vector w = a * basis.col(j);
        const double aj = basis.col(j).dot(w);
        alpha.push_back(aj);
        w -= aj * basis.col(j);
        if (j > 0) w -= beta[static_cast<std::size_t>(j - 1)] * basis.col(j - 1);
        for (int pass = 0; pass < 2; ++pass)
            for (Eigen::Index i = 0; i <= j; ++i) w -= basis.col(i).dot(w) * basis.col(i);
        double bj = w.norm();
        dim = j + 1;

        const bool at_full = dim == ni;
        if (static_cast<std::size_t>(dim) >= min_dim || at_full) {
            Vector diag = Eigen::Map<const Vector>(alpha.data(), dim);
            Vector off(dim > 1 ? dim - 1 : 0);
            for (Eigen::Index i = 0; i + 1 < dim; ++i) off(i) = beta[static_cast<std::size_t>(i)];
            Eigen::SelfAdjointEigenSolver<Matrix> tri;
            if (dim == 1) {
                ritz_values = diag;
                ritz_vectors = Matrix::Ones(1, 1);
            } else {
                tri.computeFromTridiagonal(diag, off, Eigen::ComputeEigenvectors);
                if (tri.info() != Eigen::Success)
                    throw Error("no_convergence", context + ": tridiagonal eigensolver failed");
                ritz_values = tri.eigenvalues();
                ritz_vectors = tri.eigenvectors();
            }
            if (at_full) break;
            const double top = std::max(std::abs(ritz_values(dim - 1)), scale * 1e-300);
            bool converged = static_cast<std::size_t>(dim) >= k;
            for (std::size_t i = 0; converged && i < k; ++i) {
                const double resid = bj * std::abs(ritz_vectors(dim - 1, dim - 1 - static_cast<Eigen::Index>(i)));
                if (resid > opt.tolerance * top) converged = false;
            }
            if (converged) break;
        }

        if (bj <= 1e-12 * scale) {
            if (++restarts > (opt.max_restarts == 0 ? n : opt.max_restarts))
                throw Error("breakdown", context + ": Lanczos restart cap exceeded");
            auto q = random_unit(basis, j + 1);
            if (!q) throw Error("breakdown", context + ": Lanczos restart probe degenerate");
            basis.col(j + 1) = *q;
            bj = 0.0;
        } else {
            basis.col(j + 1) = w / bj;
        }
        beta.push_back(bj);
    }

    EigenSpectrum out;
    out.k_computed = k;
    out.values.resize(k);
    for (std::size_t i = 0; i < k; ++i)
        out.values[i] = ritz_values(dim - 1 - static_cast<Eigen::Index>(i));
    if (opt.want_vectors) {
        Matrix vecs(ni, static_cast<Eigen::Index>(k));
        for (std::size_t i = 0; i < k; ++i)
            vecs.col(static_cast<Eigen::Index>(i)) =
                basis.leftCols(dim) * ritz_vectors.col(dim - 1 - static_cast<Eigen::Index>(i));
        out.vectors = std::move(vecs);
    }
    return out;
}

/// (A o B) / tr(A o B) for two trace-normalized PSD matrices.
inline SymMatrix hadamard_normalized(const SymMatrix& a, const SymMatrix& b,
                                     const std::string& context = "joint") {
    if (a.n() != b.n())
        throw Error("shape_mismatch", context + ": Hadamard operands differ in size (" +
                                          std::to_string(a.n()) + " vs " + std::to_string(b.n()) + ")");
    Matrix prod = a.data().cwiseProduct(b.data());
    const double tr = prod.trace();
    if (!(tr > 1e-15))
        throw Error("degenerate_joint", context + ": trace of Hadamard product is " +
                                            std::to_string(tr) + " (collapsed batch)");
    prod /= tr;
    return SymMatrix(prod, context);
}

}  // namespace dib::linalg

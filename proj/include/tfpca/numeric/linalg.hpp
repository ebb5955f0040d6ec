#pragma once

// Dense symmetric-matrix helpers: PSD checks and projections, partitioned
// Gaussian conditionals, quadrature eigendecomposition, grid interpolation.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tfpca/errors.hpp"

namespace tfpca {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kPsdTolerance = 1e-10;

inline MatrixXd symmetrize(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

inline double min_eigenvalue(const MatrixXd& m) {
    if (m.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

/// True when m + tol·I admits a Cholesky factorization, i.e. every
/// eigenvalue of m exceeds −tol.
inline bool is_psd(const MatrixXd& m, double tol = kPsdTolerance) {
    if (m.size() == 0) return true;
    MatrixXd shifted = m;
    shifted.diagonal().array() += tol;
    Eigen::LLT<MatrixXd> llt(shifted);
    return llt.info() == Eigen::Success;
}

/// Nearest PSD matrix in Frobenius norm: negative eigenvalues set to zero.
inline MatrixXd project_psd(const MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m));
    VectorXd vals = es.eigenvalues().cwiseMax(0.0);
    return symmetrize(es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose());
}

namespace detail {

/// Congruence S·m·S with S chosen so that diag(result) = target. PSD is
/// preserved; zero diagonal entries are left untouched.
inline MatrixXd rescale_to_diagonal(const MatrixXd& m, const VectorXd& target) {
    VectorXd s(m.rows());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        s(i) = m(i, i) > 0.0 ? std::sqrt(std::max(target(i), 0.0) / m(i, i)) : 0.0;
    MatrixXd out = s.asDiagonal() * m * s.asDiagonal();
    out = symmetrize(out);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        if (m(i, i) > 0.0) out(i, i) = target(i);
    return out;
}

}  // namespace detail

struct NearestPsdOptions {
    double tolerance = 1e-9;
    int max_sweeps = 500;
};

/// Higham's alternating projections (with Dykstra's correction) onto the PSD
/// cone and, when `fix_diagonal` is set, the set of matrices sharing m's
/// diagonal. Already-PSD input is returned unchanged.
inline MatrixXd nearest_psd(const MatrixXd& m, bool fix_diagonal, const NearestPsdOptions& opts = {}) {
    if (m.rows() != m.cols()) throw DomainError("nearest_psd: matrix must be square");
    if (m.size() > 0 && (m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff()))
        throw DomainError("nearest_psd: matrix must be symmetric");
    if (m.size() == 0 || min_eigenvalue(m) >= -kPsdTolerance) return m;
    if (!fix_diagonal) return project_psd(m);

    const VectorXd diag = m.diagonal();
    MatrixXd y = m;
    MatrixXd correction = MatrixXd::Zero(m.rows(), m.cols());
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        const MatrixXd r = y - correction;
        const MatrixXd x = project_psd(r);
        correction = x - r;
        MatrixXd next = x;
        next.diagonal() = diag;
        const double change = (next - y).norm();
        y = std::move(next);
        if (change < opts.tolerance) {
            if (min_eigenvalue(y) >= -kPsdTolerance) return y;
            return detail::rescale_to_diagonal(project_psd(y), diag);
        }
    }
    throw ConvergenceError("nearest_psd: no convergence within sweep limit",
                           detail::rescale_to_diagonal(project_psd(y), diag));
}

struct GaussianPartition {
    VectorXd mu1, mu2;
    MatrixXd s11, s12, s22;
};

struct ConditionalGaussian {
    VectorXd mean;
    MatrixXd cov;
};

/// Law of X₁ given X₂ = x₂ for a partitioned Gaussian vector.
inline ConditionalGaussian conditional_gaussian(const GaussianPartition& p, const VectorXd& x2,
                                                double condition_cap = 1e12) {
    const auto p1 = p.mu1.size(), p2 = p.mu2.size();
    if (p.s11.rows() != p1 || p.s11.cols() != p1 || p.s12.rows() != p1 || p.s12.cols() != p2 ||
        p.s22.rows() != p2 || p.s22.cols() != p2 || x2.size() != p2)
        throw DomainError("conditional_gaussian: inconsistent block dimensions");
    if (p2 == 0) return {p.mu1, p.s11};

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(p.s22);
    const double lo = es.eigenvalues()(0), hi = es.eigenvalues()(p2 - 1);
    if (!(lo > 0.0) || hi / lo > condition_cap)
        throw ConditioningError("conditional_gaussian: conditioning block is near-singular (smallest eigenvalue " +
                                    std::to_string(lo) + ")",
                                lo);
    // Σ₂₂⁻¹ from the eigendecomposition already in hand.
    const MatrixXd inv22 = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
                           es.eigenvectors().transpose();
    const MatrixXd gain = p.s12 * inv22;
    ConditionalGaussian out;
    out.mean = p.mu1 + gain * (x2 - p.mu2);
    out.cov = symmetrize(p.s11 - gain * p.s12.transpose());
    if (p1 > 0 && min_eigenvalue(out.cov) < -1e-12) out.cov = project_psd(out.cov);
    return out;
}

/// Trapezoid weights on a strictly increasing grid; they sum to the span of
/// the grid. A single-point grid gets weight 1.
inline VectorXd trapezoid_weights(std::span<const double> grid) {
    const auto g = static_cast<Eigen::Index>(grid.size());
    VectorXd w = VectorXd::Zero(g);
    if (g == 1) {
        w(0) = 1.0;
        return w;
    }
    for (Eigen::Index i = 0; i + 1 < g; ++i) {
        const double half = 0.5 * (grid[static_cast<std::size_t>(i + 1)] - grid[static_cast<std::size_t>(i)]);
        w(i) += half;
        w(i + 1) += half;
    }
    return w;
}

/// Eigenpairs of a covariance surface sampled on a grid, normalized so the
/// eigenvectors are orthonormal under trapezoid quadrature.
struct EigenSystem {
    VectorXd grid;
    VectorXd eigenvalues;   ///< descending, clamped at 0
    MatrixXd eigenvectors;  ///< column k holds φ_k on the grid
    VectorXd quad_weights;
    VectorXd fve;  ///< cumulative fraction of variance explained

    Eigen::Index positive_count(double tol = 1e-12) const {
        return (eigenvalues.array() > tol).count();
    }
};

inline EigenSystem eigen_decompose_psd(const MatrixXd& m, std::span<const double> grid) {
    const auto g = static_cast<Eigen::Index>(grid.size());
    if (m.rows() != g || m.cols() != g) throw DomainError("eigen_decompose_psd: matrix/grid size mismatch");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (!(grid[i] > grid[i - 1])) throw DomainError("eigen_decompose_psd: grid must be strictly increasing");
    if (min_eigenvalue(m) < -kPsdTolerance) throw PsdError("eigen_decompose_psd: matrix is not PSD; project first");

    EigenSystem es;
    es.grid = Eigen::Map<const VectorXd>(grid.data(), g);
    es.quad_weights = trapezoid_weights(grid);
    const VectorXd sqrt_w = es.quad_weights.cwiseSqrt();
    const MatrixXd b = symmetrize(sqrt_w.asDiagonal() * m * sqrt_w.asDiagonal());
    Eigen::SelfAdjointEigenSolver<MatrixXd> solver(b);
    es.eigenvalues = solver.eigenvalues().reverse().cwiseMax(0.0);
    es.eigenvectors = sqrt_w.cwiseInverse().asDiagonal() * solver.eigenvectors().rowwise().reverse();

    for (Eigen::Index k = 0; k < g; ++k) {
        auto col = es.eigenvectors.col(k);
        const double integral = es.quad_weights.dot(col);
        bool flip = integral < 0.0;
        if (std::abs(integral) <= 1e-12) {
            for (Eigen::Index i = 0; i < g; ++i)
                if (std::abs(col(i)) > 1e-12) {
                    flip = col(i) < 0.0;
                    break;
                }
        }
        if (flip) col = -col;
    }

    es.fve = VectorXd::Zero(g);
    const double total = es.eigenvalues.sum();
    double running = 0.0;
    for (Eigen::Index k = 0; k < g; ++k) {
        running += es.eigenvalues(k);
        es.fve(k) = total > 0.0 ? running / total : 0.0;
    }
    return es;
}

/// Piecewise-linear interpolation of grid values at t, constant beyond the
/// grid ends.
inline double interpolate(std::span<const double> grid, const VectorXd& values, double t) {
    const std::size_t g = grid.size();
    if (g == 1 || t <= grid.front()) return values(0);
    if (t >= grid.back()) return values(static_cast<Eigen::Index>(g - 1));
    auto it = std::upper_bound(grid.begin(), grid.end(), t);
    const auto hi = static_cast<std::size_t>(it - grid.begin());
    const auto lo = hi - 1;
    const double frac = (t - grid[lo]) / (grid[hi] - grid[lo]);
    return (1.0 - frac) * values(static_cast<Eigen::Index>(lo)) + frac * values(static_cast<Eigen::Index>(hi));
}

/// Interpolation stencil: value(t) = (1−frac)·v[lo] + frac·v[hi].
struct GridStencil {
    Eigen::Index lo = 0, hi = 0;
    double frac = 0.0;
};

inline GridStencil grid_stencil(std::span<const double> grid, double t) {
    const std::size_t g = grid.size();
    if (g == 1 || t <= grid.front()) return {0, 0, 0.0};
    if (t >= grid.back()) return {static_cast<Eigen::Index>(g - 1), static_cast<Eigen::Index>(g - 1), 0.0};
    auto it = std::upper_bound(grid.begin(), grid.end(), t);
    const auto hi = static_cast<std::size_t>(it - grid.begin());
    const auto lo = hi - 1;
    return {static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi), (t - grid[lo]) / (grid[hi] - grid[lo])};
}

/// Bilinear interpolation of a grid surface.
inline double interpolate2(std::span<const double> grid, const MatrixXd& surface, double s, double t) {
    const auto a = grid_stencil(grid, s);
    const auto b = grid_stencil(grid, t);
    return (1 - a.frac) * (1 - b.frac) * surface(a.lo, b.lo) + (1 - a.frac) * b.frac * surface(a.lo, b.hi) +
           a.frac * (1 - b.frac) * surface(a.hi, b.lo) + a.frac * b.frac * surface(a.hi, b.hi);
}

inline std::vector<double> uniform_grid(std::size_t g) {
    std::vector<double> grid(g);
    if (g == 1) {
        grid[0] = 0.5;
        return grid;
    }
    for (std::size_t i = 0; i < g; ++i) grid[i] = static_cast<double>(i) / static_cast<double>(g - 1);
    return grid;
}

}  // namespace tfpca

#pragma once

// Truncation-unaware comparator in the style of PACE: local-linear mean,
// two-dimensional local-linear smoothing of raw covariances off the
// diagonal, eigenvalue clamping, pointwise noise variance.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tfpca/covariance.hpp"
#include "tfpca/dataset.hpp"
#include "tfpca/errors.hpp"
#include "tfpca/mean_variance.hpp"
#include "tfpca/numeric/linalg.hpp"

namespace tfpca {

namespace detail {

// Weighted moment sums for a local-linear fit in one variable.
struct LL1 {
    double s0 = 0, s1 = 0, s2 = 0, t0 = 0, t1 = 0;

    void add(double w, double d, double y) {
        s0 += w, s1 += w * d, s2 += w * d * d, t0 += w * y, t1 += w * d * y;
    }
    LL1 minus(const LL1& o) const { return {s0 - o.s0, s1 - o.s1, s2 - o.s2, t0 - o.t0, t1 - o.t1}; }

    /// Intercept; falls back to the local mean when the slope is not
    /// identified, NaN for an empty window.
    double intercept() const {
        if (!(s0 > kMinKernelWeight)) return std::numeric_limits<double>::quiet_NaN();
        const double det = s0 * s2 - s1 * s1;
        if (det <= 1e-10 * s0 * s2 || det <= 0.0) return t0 / s0;
        return (s2 * t0 - s1 * t1) / det;
    }
};

// Same for a plane in two variables.
struct LL2 {
    double s[6] = {0, 0, 0, 0, 0, 0};  // w, w d1, w d2, w d1², w d1 d2, w d2²
    double t[3] = {0, 0, 0};           // w y, w d1 y, w d2 y

    void add(double w, double d1, double d2, double y) {
        s[0] += w, s[1] += w * d1, s[2] += w * d2, s[3] += w * d1 * d1, s[4] += w * d1 * d2, s[5] += w * d2 * d2;
        t[0] += w * y, t[1] += w * d1 * y, t[2] += w * d2 * y;
    }
    LL2 minus(const LL2& o) const {
        LL2 r;
        for (int i = 0; i < 6; ++i) r.s[i] = s[i] - o.s[i];
        for (int i = 0; i < 3; ++i) r.t[i] = t[i] - o.t[i];
        return r;
    }
    double intercept() const {
        if (!(s[0] > kMinKernelWeight)) return std::numeric_limits<double>::quiet_NaN();
        Eigen::Matrix3d a;
        a << s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5];
        const Eigen::Vector3d b(t[0], t[1], t[2]);
        Eigen::ColPivHouseholderQR<Eigen::Matrix3d> qr(a);
        qr.setThreshold(1e-10);
        if (qr.rank() < 3) return t[0] / s[0];
        return qr.solve(b)(0);
    }
};

}  // namespace detail

/// Local-linear mean of the pooled values at every gridpoint, with the
/// bandwidth chosen by leave-one-curve-out CV. Flags are ignored.
struct PaceMean {
    VectorXd mu;
    double bandwidth = 0.0;
    std::vector<BandwidthScore> cv_table;
};

inline PaceMean pace_mean(const FunctionalDataset& ds, std::span<const double> grid,
                          std::span<const double> candidates) {
    if (candidates.empty()) throw DomainError("pace_mean: no candidate bandwidths");
    const std::size_t n = ds.size(), g = grid.size();
    PaceMean best;
    double best_cv = std::numeric_limits<double>::infinity();
    VectorXd best_mu;
    for (double h : candidates) {
        const KernelSpec k{h};
        std::vector<std::vector<detail::LL1>> unit(n, std::vector<detail::LL1>(g));
        std::vector<detail::LL1> total(g);
        for (std::size_t i = 0; i < n; ++i)
            for (const auto& p : ds.trajectories[i].points)
                for (std::size_t q = 0; q < g; ++q) {
                    const double w = k.weight(p.time - grid[q]);
                    if (w <= kMinKernelWeight) continue;
                    unit[i][q].add(w, p.time - grid[q], p.value);
                    total[q].add(w, p.time - grid[q], p.value);
                }
        double cv = 0.0;
        bool usable = true;
        for (std::size_t i = 0; i < n && usable; ++i) {
            VectorXd loo(static_cast<Eigen::Index>(g));
            for (std::size_t q = 0; q < g; ++q) loo(static_cast<Eigen::Index>(q)) = total[q].minus(unit[i][q]).intercept();
            for (const auto& p : ds.trajectories[i].points) {
                const double pred = interpolate(grid, loo, p.time);
                if (!std::isfinite(pred)) {
                    usable = false;
                    break;
                }
                cv += (p.value - pred) * (p.value - pred);
            }
        }
        if (!usable) cv = std::numeric_limits<double>::infinity();
        best.cv_table.push_back({h, cv});
        if (cv < best_cv || best_mu.size() == 0) {
            VectorXd mu(static_cast<Eigen::Index>(g));
            for (std::size_t q = 0; q < g; ++q) mu(static_cast<Eigen::Index>(q)) = total[q].intercept();
            if (!mu.allFinite() && best_mu.size() != 0) continue;
            best_cv = cv;
            best_mu = mu;
            best.bandwidth = h;
        }
    }
    if (!best_mu.allFinite()) throw CurveFitError("pace_mean: empty smoothing window on the grid", {});
    best.mu = best_mu;
    return best;
}

struct PaceCovariance {
    MatrixXd sigma;      ///< smoothed, eigen-clamped
    VectorXd noise_var;  ///< pointwise, non-negative
    double bandwidth = 0.0;
    std::vector<BandwidthScore> cv_table;
};

/// Raw covariances (W_ij − μ̂)(W_ik − μ̂) for j ≠ k smoothed by a local plane
/// at every grid cell; bandwidth by leave-one-curve-out CV. The diagonal raw
/// products give the total variance, whose excess over the smoothed
/// diagonal is the noise variance.
inline PaceCovariance pace_covariance(const FunctionalDataset& ds, std::span<const double> grid, const VectorXd& mu,
                                      double mean_bandwidth, std::span<const double> candidates) {
    if (candidates.empty()) throw DomainError("pace_covariance: no candidate bandwidths");
    const std::size_t n = ds.size(), g = grid.size();
    const auto gg = static_cast<Eigen::Index>(g);
    std::vector<std::vector<double>> resid(n);
    for (std::size_t i = 0; i < n; ++i)
        for (const auto& p : ds.trajectories[i].points) resid[i].push_back(p.value - interpolate(grid, mu, p.time));

    PaceCovariance out;
    double best_cv = std::numeric_limits<double>::infinity();
    MatrixXd best_surface;
    for (double h : candidates) {
        const KernelSpec k{h};
        std::vector<std::vector<detail::LL2>> unit(n, std::vector<detail::LL2>(g * g));
        std::vector<detail::LL2> total(g * g);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& pts = ds.trajectories[i].points;
            std::vector<double> kw(pts.size() * g);
            for (std::size_t a = 0; a < pts.size(); ++a)
                for (std::size_t p = 0; p < g; ++p) kw[a * g + p] = k.weight(pts[a].time - grid[p]);
            for (std::size_t a = 0; a < pts.size(); ++a)
                for (std::size_t b = 0; b < pts.size(); ++b) {
                    if (a == b) continue;
                    const double c = resid[i][a] * resid[i][b];
                    for (std::size_t p = 0; p < g; ++p) {
                        const double wp = kw[a * g + p];
                        if (wp <= kMinKernelWeight) continue;
                        for (std::size_t q = 0; q < g; ++q) {
                            const double w = wp * kw[b * g + q];
                            if (w <= kMinKernelWeight) continue;
                            unit[i][p * g + q].add(w, pts[a].time - grid[p], pts[b].time - grid[q], c);
                            total[p * g + q].add(w, pts[a].time - grid[p], pts[b].time - grid[q], c);
                        }
                    }
                }
        }
        double cv = 0.0;
        for (std::size_t i = 0; i < n && std::isfinite(cv); ++i) {
            const auto& pts = ds.trajectories[i].points;
            if (pts.size() < 2) continue;
            MatrixXd loo(gg, gg);
            for (std::size_t c = 0; c < g * g; ++c)
                loo(static_cast<Eigen::Index>(c / g), static_cast<Eigen::Index>(c % g)) = total[c].minus(unit[i][c]).intercept();
            for (std::size_t a = 0; a < pts.size(); ++a)
                for (std::size_t b = 0; b < pts.size(); ++b) {
                    if (a == b) continue;
                    const double pred = interpolate2(grid, loo, pts[a].time, pts[b].time);
                    if (!std::isfinite(pred)) {
                        cv = std::numeric_limits<double>::infinity();
                        break;
                    }
                    const double c = resid[i][a] * resid[i][b];
                    cv += (c - pred) * (c - pred);
                }
        }
        out.cv_table.push_back({h, cv});
        MatrixXd surface(gg, gg);
        for (std::size_t c = 0; c < g * g; ++c)
            surface(static_cast<Eigen::Index>(c / g), static_cast<Eigen::Index>(c % g)) = total[c].intercept();
        if (!surface.allFinite()) continue;
        if (cv < best_cv || best_surface.size() == 0) {
            best_cv = cv;
            best_surface = symmetrize(surface);
            out.bandwidth = h;
        }
    }
    if (best_surface.size() == 0) throw CurveFitError("pace_covariance: empty smoothing window on the grid", {});

    // Drop negative eigenvalues of the covariance operator.
    const VectorXd w = trapezoid_weights(grid);
    const VectorXd sw = w.cwiseSqrt();
    const MatrixXd op = project_psd(sw.asDiagonal() * best_surface * sw.asDiagonal());
    out.sigma = symmetrize(sw.cwiseInverse().asDiagonal() * op * sw.cwiseInverse().asDiagonal());

    const KernelSpec km{mean_bandwidth};
    out.noise_var.resize(gg);
    for (std::size_t q = 0; q < g; ++q) {
        detail::LL1 v;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t a = 0; a < ds.trajectories[i].points.size(); ++a) {
                const double t = ds.trajectories[i].points[a].time;
                const double wt = km.weight(t - grid[q]);
                if (wt > kMinKernelWeight) v.add(wt, t - grid[q], resid[i][a] * resid[i][a]);
            }
        const double total_var = v.intercept();
        const auto qq = static_cast<Eigen::Index>(q);
        out.noise_var(qq) = std::isfinite(total_var) ? std::max(total_var - out.sigma(qq, qq), 0.0) : 0.0;
    }
    return out;
}

}  // namespace tfpca

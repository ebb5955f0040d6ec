#pragma once

// Stage 1: local kernel-weighted truncated-Gaussian likelihood for the mean
// μ(t) and total variance σ̃²(t), and leave-one-curve-out bandwidth choice.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tfpca/dataset.hpp"
#include "tfpca/errors.hpp"
#include "tfpca/numeric/linalg.hpp"
#include "tfpca/numeric/normal.hpp"

namespace tfpca {

/// Gaussian smoothing kernel with bandwidth h.
struct KernelSpec {
    double bandwidth = 0.1;

    double weight(double u) const {
        const double z = u / bandwidth;
        return std::exp(-0.5 * z * z);
    }
    double weight(double u, double v) const { return weight(u) * weight(v); }
};

/// Kernel weights at or below this are treated as outside the window.
inline constexpr double kMinKernelWeight = 1e-12;

struct MeanVarianceEstimate {
    std::vector<double> grid;
    VectorXd mu_hat;
    VectorXd sigma_tilde_sq_hat;
    double bandwidth = 0.0;

    double mu_at(double t) const { return interpolate(grid, mu_hat, t); }
    double sigma_tilde_sq_at(double t) const { return interpolate(grid, sigma_tilde_sq_hat, t); }
};

struct LocalLogLik {
    double value = 0.0;
    std::array<double, 2> gradient{};  ///< (∂/∂μ, ∂/∂log σ̃)
    std::array<double, 3> hessian{};   ///< (μμ, μ·logσ̃, logσ̃·logσ̃)
};

namespace detail {

/// Kernel-weighted sufficient statistics of one local window. Non-truncated
/// points enter through their weighted mean and centered sum of squares;
/// truncated points only through their total weight per side.
struct WindowStats {
    double w_none = 0.0;
    double center = 0.0;  ///< weighted mean of non-truncated values
    double ss = 0.0;      ///< Σ w (W − center)²
    double w_below = 0.0;
    double w_above = 0.0;
    double lower = 0.0, upper = 0.0;
    std::size_t count = 0;

    double total() const { return w_none + w_below + w_above; }
};

inline WindowStats window_stats(double t, const FunctionalDataset& ds, const KernelSpec& k) {
    WindowStats s;
    s.lower = ds.bounds.lower;
    s.upper = ds.bounds.upper;
    double s1 = 0.0;
    for (const auto& tr : ds.trajectories)
        for (const auto& p : tr.points) {
            const double w = k.weight(t - p.time);
            if (w <= kMinKernelWeight) continue;
            ++s.count;
            switch (p.flag) {
                case Flag::none:
                    s.w_none += w;
                    s1 += w * p.value;
                    break;
                case Flag::below: s.w_below += w; break;
                case Flag::above: s.w_above += w; break;
            }
        }
    if (s.w_none > 0.0) {
        s.center = s1 / s.w_none;
        for (const auto& tr : ds.trajectories)
            for (const auto& p : tr.points) {
                if (p.flag != Flag::none) continue;
                const double w = k.weight(t - p.time);
                if (w <= kMinKernelWeight) continue;
                s.ss += w * (p.value - s.center) * (p.value - s.center);
            }
    }
    return s;
}

/// log Φ(u) with its first two derivatives; derivatives vanish where the
/// probability floor is active.
inline std::array<double, 3> log_cdf_derivs(double u) {
    const double p = normal_cdf(u);
    if (p < kProbabilityFloor) return {std::log(kProbabilityFloor), 0.0, 0.0};
    const double r = normal_pdf(u) / p;
    return {std::log(p), r, -r * (u + r)};
}

inline LocalLogLik evaluate_window(const WindowStats& s, double mu, double log_sigma) {
    LocalLogLik out;
    const double sigma = std::exp(log_sigma);
    const double inv = 1.0 / sigma;
    constexpr double log_sqrt_2pi = 0.91893853320467274178032973640561763986139747363778;

    if (s.w_none > 0.0) {
        // Σ w [log φ(z) − log σ̃] with z = (W − μ)/σ̃.
        const double d = s.center - mu;
        const double sq = (s.ss + s.w_none * d * d) * inv * inv;  // Σ w z²
        const double lin = s.w_none * d * inv;                     // Σ w z
        out.value += -0.5 * sq - s.w_none * (log_sqrt_2pi + log_sigma);
        out.gradient[0] += lin * inv;
        out.gradient[1] += sq - s.w_none;
        out.hessian[0] += -s.w_none * inv * inv;
        out.hessian[1] += -2.0 * lin * inv;
        out.hessian[2] += -2.0 * sq;
    }
    if (s.w_below > 0.0) {
        const double u = (s.lower - mu) * inv;
        const auto [l, l1, l2] = log_cdf_derivs(u);
        out.value += s.w_below * l;
        out.gradient[0] += s.w_below * (-l1 * inv);
        out.gradient[1] += s.w_below * (-l1 * u);
        out.hessian[0] += s.w_below * l2 * inv * inv;
        out.hessian[1] += s.w_below * (l2 * u + l1) * inv;
        out.hessian[2] += s.w_below * (l2 * u * u + l1 * u);
    }
    if (s.w_above > 0.0) {
        // log(1 − Φ((b − μ)/σ̃)) = log Φ(u) with u = (μ − b)/σ̃.
        const double u = (mu - s.upper) * inv;
        const auto [l, l1, l2] = log_cdf_derivs(u);
        out.value += s.w_above * l;
        out.gradient[0] += s.w_above * (l1 * inv);
        out.gradient[1] += s.w_above * (-l1 * u);
        out.hessian[0] += s.w_above * l2 * inv * inv;
        out.hessian[1] += -s.w_above * (l2 * u + l1) * inv;
        out.hessian[2] += s.w_above * (l2 * u * u + l1 * u);
    }
    return out;
}

}  // namespace detail

/// Kernel-weighted local log-likelihood at t, in the (μ, log σ̃)
/// parameterization, with analytic gradient and Hessian. Non-truncated points
/// contribute a full log-density (including −log σ̃).
inline LocalLogLik local_loglik_mean_var(double t, double mu, double log_sigma, const FunctionalDataset& ds,
                                         const KernelSpec& k) {
    const auto stats = detail::window_stats(t, ds, k);
    if (stats.count == 0) throw EmptyWindowError("local_loglik_mean_var: no observation in kernel window");
    return detail::evaluate_window(stats, mu, log_sigma);
}

struct LocalFitOptions {
    double gradient_tolerance = 1e-8;
    int max_iterations = 200;
    double min_variance = 1e-8;
};

struct LocalFit {
    double mu = 0.0;
    double sigma_tilde_sq = 0.0;
    int iterations = 0;
    bool converged = false;
};

namespace detail {

inline double upper_variance_clamp(const Bounds& b) {
    const double span = b.upper - b.lower;
    if (!std::isfinite(span)) return std::numeric_limits<double>::max() / 4.0;
    return (10.0 * span) * (10.0 * span);
}

inline LocalFit golden_section_fallback(const WindowStats& s, double mu, double ls, double ls_lo, double ls_hi) {
    auto f = [&](double m, double l) { return evaluate_window(s, m, l).value; };
    auto maximize = [](auto&& g, double lo, double hi) {
        constexpr double phi = 0.6180339887498949;
        double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
        double f1 = g(x1), f2 = g(x2);
        for (int it = 0; it < 200 && hi - lo > 1e-12 * (1.0 + std::abs(lo)); ++it) {
            if (f1 < f2) {
                lo = x1, x1 = x2, f1 = f2, x2 = lo + phi * (hi - lo), f2 = g(x2);
            } else {
                hi = x2, x2 = x1, f2 = f1, x1 = hi - phi * (hi - lo), f1 = g(x1);
            }
        }
        return 0.5 * (lo + hi);
    };
    for (int round = 0; round < 50; ++round) {
        const double sd = std::exp(ls);
        const double mu_new = maximize([&](double m) { return f(m, ls); }, mu - 10 * sd, mu + 10 * sd);
        const double ls_new = maximize([&](double l) { return f(mu_new, l); }, ls_lo, ls_hi);
        const bool done = std::abs(mu_new - mu) < 1e-12 * (1 + std::abs(mu)) && std::abs(ls_new - ls) < 1e-12;
        mu = mu_new, ls = ls_new;
        if (done) break;
    }
    return {mu, std::exp(2 * ls), 0, false};
}

inline LocalFit maximize_window(const WindowStats& s, std::optional<std::pair<double, double>> init,
                                const LocalFitOptions& opts) {
    if (s.count == 0) throw EmptyWindowError("fit_local_mean_variance: no observation in kernel window");
    if (s.w_none <= kMinKernelWeight)
        throw NonIdentifiedError("fit_local_mean_variance: kernel window holds only truncated observations");

    const Bounds bounds{s.lower, s.upper};
    const double ls_lo = 0.5 * std::log(opts.min_variance);
    const double ls_hi = 0.5 * std::log(upper_variance_clamp(bounds));
    double mu, var;
    if (init) {
        mu = init->first;
        var = init->second;
    } else {
        mu = s.center;
        var = s.ss / s.w_none;
    }
    double ls = std::clamp(0.5 * std::log(std::max(var, opts.min_variance)), ls_lo, ls_hi);

    // Work with the likelihood per unit kernel mass so the tolerance does not
    // depend on the number of observations in the window.
    const double scale = 1.0 / s.total();
    auto eval = [&](double m, double l) {
        auto r = evaluate_window(s, m, l);
        r.value *= scale;
        for (auto& g : r.gradient) g *= scale;
        for (auto& h : r.hessian) h *= scale;
        return r;
    };
    auto projected = [&](const LocalLogLik& r, double l) {
        std::array<double, 2> g = r.gradient;
        if ((l <= ls_lo && g[1] < 0.0) || (l >= ls_hi && g[1] > 0.0)) g[1] = 0.0;
        return g;
    };

    // Stopping uses σ̃·∂/∂μ and ∂/∂log σ̃, both free of the data's units, so
    // shifted or rescaled data take the same Newton path.
    auto small = [&](const std::array<double, 2>& g, double l) {
        return std::max(std::abs(g[0]) * std::exp(l), std::abs(g[1])) < opts.gradient_tolerance;
    };

    LocalFit fit;
    auto cur = eval(mu, ls);
    for (int it = 0; it < opts.max_iterations; ++it) {
        const auto g = projected(cur, ls);
        if (small(g, ls)) {
            fit.converged = true;
            fit.iterations = it;
            break;
        }
        const double hmm = cur.hessian[0], hml = cur.hessian[1], hll = cur.hessian[2];
        const double det = hmm * hll - hml * hml;
        double dm, dl;
        if (hmm < 0.0 && det > 0.0) {
            dm = -(hll * g[0] - hml * g[1]) / det;
            dl = -(-hml * g[0] + hmm * g[1]) / det;
        } else {
            const double v = std::exp(2.0 * ls);
            const double sc = 1.0 / std::max({std::abs(hmm) * v, std::abs(hll), 1.0});
            dm = sc * v * g[0];
            dl = sc * g[1];
        }
        if (g[1] == 0.0 && cur.gradient[1] != 0.0) dl = 0.0;
        double step = 1.0;
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            const double m_new = mu + step * dm;
            const double l_new = std::clamp(ls + step * dl, ls_lo, ls_hi);
            auto trial = eval(m_new, l_new);
            if (std::isfinite(trial.value) && trial.value >= cur.value - 1e-15 * std::abs(cur.value)) {
                accepted = trial.value > cur.value || (m_new != mu || l_new != ls);
                mu = m_new, ls = l_new, cur = trial;
                break;
            }
            step *= 0.5;
        }
        fit.iterations = it + 1;
        if (!accepted) break;
    }
    if (!fit.converged) {
        fit.converged = small(projected(cur, ls), ls);
    }
    if (!fit.converged) {
        auto gs = golden_section_fallback(s, mu, ls, ls_lo, ls_hi);
        fit.mu = gs.mu;
        fit.sigma_tilde_sq = std::clamp(gs.sigma_tilde_sq, opts.min_variance, upper_variance_clamp(bounds));
        return fit;
    }
    fit.mu = mu;
    fit.sigma_tilde_sq = std::exp(2.0 * ls);
    return fit;
}

}  // namespace detail

/// Maximizer of the local log-likelihood at t by safeguarded Newton on
/// (μ, log σ̃) with backtracking; σ̃² clamped to [1e−8, (10(b − a))²].
inline LocalFit fit_local_mean_variance(double t, const FunctionalDataset& ds, const KernelSpec& k,
                                        std::optional<std::pair<double, double>> init = std::nullopt,
                                        const LocalFitOptions& opts = {}) {
    const auto stats = detail::window_stats(t, ds, k);
    if (!init && stats.w_none <= kMinKernelWeight && std::isfinite(ds.bounds.lower) &&
        std::isfinite(ds.bounds.upper)) {
        const double quarter = (ds.bounds.upper - ds.bounds.lower) / 4.0;
        init = std::make_pair(0.5 * (ds.bounds.lower + ds.bounds.upper), quarter * quarter);
    }
    return detail::maximize_window(stats, init, opts);
}

struct MeanCurveOptions {
    LocalFitOptions local;
    bool warm_start = true;
    int max_bandwidth_doublings = 3;
};

/// Local fits at every gridpoint, warm-started from the previous gridpoint.
/// A non-identified or empty window doubles the bandwidth locally.
inline MeanVarianceEstimate fit_mean_variance_curve(const FunctionalDataset& ds, std::span<const double> grid,
                                                    const KernelSpec& k, const MeanCurveOptions& opts = {}) {
    if (grid.empty()) throw DomainError("fit_mean_variance_curve: empty grid");
    for (std::size_t g = 0; g < grid.size(); ++g) {
        if (grid[g] < 0.0 || grid[g] > 1.0) throw DomainError("fit_mean_variance_curve: grid outside [0,1]");
        if (g > 0 && !(grid[g] > grid[g - 1]))
            throw DomainError("fit_mean_variance_curve: grid must be strictly increasing");
    }
    if (!(k.bandwidth > 0.0)) throw DomainError("fit_mean_variance_curve: bandwidth must be positive");

    MeanVarianceEstimate est;
    est.grid.assign(grid.begin(), grid.end());
    est.bandwidth = k.bandwidth;
    const auto n = static_cast<Eigen::Index>(grid.size());
    est.mu_hat.resize(n);
    est.sigma_tilde_sq_hat.resize(n);

    std::optional<std::pair<double, double>> warm;
    std::vector<double> failed;
    for (Eigen::Index g = 0; g < n; ++g) {
        const double t = grid[static_cast<std::size_t>(g)];
        KernelSpec local = k;
        std::optional<LocalFit> fit;
        for (int attempt = 0; attempt <= opts.max_bandwidth_doublings && !fit; ++attempt) {
            try {
                fit = fit_local_mean_variance(t, ds, local, opts.warm_start ? warm : std::nullopt, opts.local);
            } catch (const NonIdentifiedError&) {
                local.bandwidth *= 2.0;
            } catch (const EmptyWindowError&) {
                local.bandwidth *= 2.0;
            }
        }
        if (!fit) {
            failed.push_back(t);
            continue;
        }
        est.mu_hat(g) = fit->mu;
        est.sigma_tilde_sq_hat(g) = fit->sigma_tilde_sq;
        warm = std::make_pair(fit->mu, fit->sigma_tilde_sq);
    }
    if (!failed.empty()) {
        std::string where;
        for (double t : failed) where += (where.empty() ? "" : ", ") + detail::format_double(t);
        throw CurveFitError("fit_mean_variance_curve: mean/variance not identified at gridpoints " + where, failed);
    }
    return est;
}

/// Ten log-spaced bandwidths between 0.5× and 4× the mean gridpoint gap.
inline std::vector<double> default_bandwidth_candidates(std::span<const double> grid, std::size_t count = 10) {
    double gap = 0.1;
    if (grid.size() > 1) gap = (grid.back() - grid.front()) / static_cast<double>(grid.size() - 1);
    const double lo = std::log(0.5 * gap), hi = std::log(4.0 * gap);
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i)
        out[i] = std::exp(count == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1));
    return out;
}

struct BandwidthScore {
    double bandwidth;
    double score;
};

struct BandwidthSelection {
    double bandwidth = 0.0;
    std::vector<BandwidthScore> table;
    std::vector<std::string> warnings;
};

/// Leave-one-curve-out CV on non-truncated points only. Each held-out curve
/// is predicted by the local mean fitted without that curve and without any
/// truncated observation; with no truncation terms the local likelihood is
/// maximized by the kernel-weighted mean, which is what is computed here.
inline BandwidthSelection select_mean_bandwidth(const FunctionalDataset& ds, std::span<const double> candidates,
                                                std::span<const double> grid) {
    if (ds.size() < 2) throw DomainError("select_mean_bandwidth: need at least two trajectories");
    if (candidates.empty()) throw DomainError("select_mean_bandwidth: no candidate bandwidths");
    if (grid.empty()) throw DomainError("select_mean_bandwidth: empty grid");

    const std::size_t g = grid.size(), n = ds.size();
    BandwidthSelection sel;
    std::vector<bool> warned(n, false);
    for (double h : candidates) {
        if (!(h > 0.0)) throw DomainError("select_mean_bandwidth: bandwidths must be positive");
        const KernelSpec k{h};
        // Per-unit and pooled kernel sums at every gridpoint.
        MatrixXd unit_w = MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(g));
        MatrixXd unit_wy = unit_w;
        for (std::size_t i = 0; i < n; ++i)
            for (const auto& p : ds.trajectories[i].points) {
                if (p.flag != Flag::none) continue;
                for (std::size_t q = 0; q < g; ++q) {
                    const double w = k.weight(grid[q] - p.time);
                    if (w <= kMinKernelWeight) continue;
                    unit_w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(q)) += w;
                    unit_wy(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(q)) += w * p.value;
                }
            }
        const VectorXd tot_w = unit_w.colwise().sum().transpose();
        const VectorXd tot_wy = unit_wy.colwise().sum().transpose();

        double cv = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            VectorXd loo(static_cast<Eigen::Index>(g));
            std::vector<bool> ok(g);
            for (std::size_t q = 0; q < g; ++q) {
                const auto qq = static_cast<Eigen::Index>(q);
                const double w = tot_w(qq) - unit_w(ii, qq);
                ok[q] = w > kMinKernelWeight;
                loo(qq) = ok[q] ? (tot_wy(qq) - unit_wy(ii, qq)) / w : 0.0;
            }
            double unit_cv = 0.0;
            bool usable = true;
            for (const auto& p : ds.trajectories[i].points) {
                if (p.flag != Flag::none) continue;
                const auto st = grid_stencil(grid, p.time);
                if (!ok[static_cast<std::size_t>(st.lo)] || !ok[static_cast<std::size_t>(st.hi)]) {
                    usable = false;
                    break;
                }
                const double pred = (1.0 - st.frac) * loo(st.lo) + st.frac * loo(st.hi);
                unit_cv += (p.value - pred) * (p.value - pred);
            }
            if (!usable) {
                if (!warned[i])
                    sel.warnings.push_back("select_mean_bandwidth: unit '" + ds.trajectories[i].unit_id +
                                           "' has no usable leave-out fit; contributes 0");
                warned[i] = true;
                continue;
            }
            cv += unit_cv;
        }
        sel.table.push_back({h, cv});
    }
    auto best = sel.table.front();
    for (const auto& row : sel.table)
        if (row.score < best.score || (row.score == best.score && row.bandwidth < best.bandwidth)) best = row;
    sel.bandwidth = best.bandwidth;
    return sel;
}

}  // namespace tfpca

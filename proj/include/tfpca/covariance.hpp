#pragma once

// Stage 2: covariance surface of the noisy process from bivariate
// truncated-Gaussian local likelihoods, kept PSD by projected coordinate
// gradient ascent; diagonal smoothing separates measurement error.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tfpca/dataset.hpp"
#include "tfpca/errors.hpp"
#include "tfpca/mean_variance.hpp"
#include "tfpca/numeric/linalg.hpp"
#include "tfpca/numeric/normal.hpp"
#include "tfpca/numeric/random.hpp"

namespace tfpca {

/// How a pair with one truncated and one observed coordinate is scored.
enum class MixedConditioning {
    exact_value,  ///< Pr{truncated side | other coordinate = observed value} · density
    interval,     ///< Pr{truncated side | other coordinate ∈ (a, b)} · density
};

struct PgdConfig {
    double init_step = 0.0;  ///< ε⁽¹⁾; 0 selects 0.01 × mean |initial off-diagonal|
    double tolerance = 1e-6;
    int max_sweeps = 500;
    double backtrack_decrement = 1e-4;
    double shrink_threshold = 0.90;  ///< mean blend weight below this shrinks ε by 10%
    std::uint64_t seed = 1;
    MixedConditioning mixed = MixedConditioning::exact_value;
    /// Largest admissible |correlation| of any off-diagonal element.
    double max_correlation = 1.0 - 1e-6;
    /// Record the smallest eigenvalue of Σ̃ after every sweep.
    bool trace_min_eigenvalue = false;

    void validate() const {
        if (!(init_step >= 0.0) || !(tolerance > 0.0) || max_sweeps < 1 || !(backtrack_decrement > 0.0) ||
            !(backtrack_decrement < 1.0) || !(shrink_threshold > 0.0 && shrink_threshold <= 1.0))
            throw DomainError("PgdConfig: parameters must be positive with backtrack_decrement < 1");
    }
};

struct OffDiagLogLik {
    double value = 0.0;
    double gradient = 0.0;
};

namespace detail {

/// Everything the local likelihood of one off-diagonal element needs, with
/// the marginal parameters at (s, t) fixed.
struct PairWindow {
    double mu_s = 0.0, mu_t = 0.0, var_s = 1.0, var_t = 1.0;
    double lower = 0.0, upper = 0.0;
    double total_weight = 0.0;
    std::size_t count = 0;

    // Both coordinates observed: Σw, Σw x², Σw xy, Σw y² of the residuals.
    double s0 = 0.0, sxx = 0.0, sxy = 0.0, syy = 0.0;
    // Both truncated, by side at (s, t).
    double w_bb = 0.0, w_aa = 0.0, w_ba = 0.0, w_ab = 0.0;

    // One truncated coordinate. `at_s` says which coordinate is truncated;
    // `residual` is the observed coordinate minus its mean.
    struct Mixed {
        double weight;
        double residual;
        bool at_s;
        bool above;
    };
    std::vector<Mixed> mixed;
    double mixed_density = 0.0;  ///< Σ w log-density of the observed coordinates
    double w_mixed[2][2] = {{0, 0}, {0, 0}};  ///< [at_s][above] totals, interval variant
};

inline PairWindow build_pair_window(double s, double t, double mu_s, double mu_t, double var_s, double var_t,
                                    const FunctionalDataset& ds, const KernelSpec& k) {
    PairWindow win;
    win.mu_s = mu_s, win.mu_t = mu_t, win.var_s = var_s, win.var_t = var_t;
    win.lower = ds.bounds.lower, win.upper = ds.bounds.upper;
    const double sd_s = std::sqrt(var_s), sd_t = std::sqrt(var_t);
    std::vector<double> ws, wt;
    for (const auto& tr : ds.trajectories) {
        const auto n = tr.points.size();
        ws.resize(n), wt.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            ws[j] = k.weight(s - tr.points[j].time);
            wt[j] = k.weight(t - tr.points[j].time);
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (ws[j] <= kMinKernelWeight) continue;
            const auto& pj = tr.points[j];
            for (std::size_t jj = j + 1; jj < n; ++jj) {
                const double w = ws[j] * wt[jj];
                if (w <= kMinKernelWeight) continue;
                const auto& pk = tr.points[jj];
                ++win.count;
                win.total_weight += w;
                const bool obs_s = pj.flag == Flag::none, obs_t = pk.flag == Flag::none;
                if (obs_s && obs_t) {
                    const double x = pj.value - mu_s, y = pk.value - mu_t;
                    win.s0 += w;
                    win.sxx += w * x * x;
                    win.sxy += w * x * y;
                    win.syy += w * y * y;
                } else if (!obs_s && !obs_t) {
                    const bool as = pj.flag == Flag::above, at = pk.flag == Flag::above;
                    (as ? (at ? win.w_bb : win.w_ba) : (at ? win.w_ab : win.w_aa)) += w;
                } else {
                    const bool at_s = !obs_s;
                    const auto& trunc = at_s ? pj : pk;
                    const auto& obs = at_s ? pk : pj;
                    const double r = obs.value - (at_s ? mu_t : mu_s);
                    const double sd_o = at_s ? sd_t : sd_s;
                    const bool above = trunc.flag == Flag::above;
                    win.mixed.push_back({w, r, at_s, above});
                    win.mixed_density += w * (normal_logpdf(r / sd_o) - std::log(sd_o));
                    win.w_mixed[at_s][above] += w;
                }
            }
        }
    }
    return win;
}

/// log Φ(u) and d/du, with the floor applied.
inline std::pair<double, double> log_cdf_d1(double u) {
    const double p = normal_cdf(u);
    if (p < kProbabilityFloor) return {std::log(kProbabilityFloor), 0.0};
    return {std::log(p), normal_pdf(u) / p};
}

inline OffDiagLogLik evaluate_pair_window(const PairWindow& win, double sigma_st, MixedConditioning mode) {
    const double sd_s = std::sqrt(win.var_s), sd_t = std::sqrt(win.var_t);
    const double sd_prod = sd_s * sd_t;
    const double rho = sigma_st / sd_prod;
    if (!(std::abs(rho) < 1.0)) throw DomainError("offdiag_local_loglik: correlation must lie strictly inside (-1,1)");

    OffDiagLogLik out;
    constexpr double log_2pi = 1.8378770664093454835606594728112352797227949472756;

    if (win.s0 > 0.0) {
        const double det = win.var_s * win.var_t - sigma_st * sigma_st;
        const double quad = win.var_t * win.sxx - 2.0 * sigma_st * win.sxy + win.var_s * win.syy;
        out.value += -win.s0 * log_2pi - 0.5 * win.s0 * std::log(det) - 0.5 * quad / det;
        out.gradient += win.s0 * sigma_st / det + win.sxy / det - quad * sigma_st / (det * det);
    }

    const double ha_s = (win.lower - win.mu_s) / sd_s, ha_t = (win.lower - win.mu_t) / sd_t;
    const double hb_s = (win.upper - win.mu_s) / sd_s, hb_t = (win.upper - win.mu_t) / sd_t;
    // Rectangle probability Φ₂(x, y; sign·ρ) and its σ-derivative.
    auto rect = [&](double weight, double x, double y, double sign) {
        if (weight <= 0.0) return;
        const double p = bivariate_normal_cdf(x, y, sign * rho);
        out.value += weight * log_floor(p);
        if (p >= kProbabilityFloor) out.gradient += weight * sign * bivariate_normal_pdf(x, y, sign * rho) / (p * sd_prod);
    };
    rect(win.w_aa, ha_s, ha_t, 1.0);
    rect(win.w_bb, -hb_s, -hb_t, 1.0);
    rect(win.w_ab, ha_s, -hb_t, -1.0);
    rect(win.w_ba, -hb_s, ha_t, -1.0);

    if (win.mixed.empty()) return out;
    out.value += win.mixed_density;

    if (mode == MixedConditioning::exact_value) {
        for (const auto& m : win.mixed) {
            const double var_c = m.at_s ? win.var_s : win.var_t;
            const double var_o = m.at_s ? win.var_t : win.var_s;
            const double mu_c = m.at_s ? win.mu_s : win.mu_t;
            const double cmean = mu_c + sigma_st * m.residual / var_o;
            const double cvar = var_c - sigma_st * sigma_st / var_o;
            const double csd = std::sqrt(cvar);
            const double dmean = m.residual / var_o;
            const double dsd = -sigma_st / (var_o * csd);
            double u, du;
            if (m.above) {
                u = (cmean - win.upper) / csd;
                du = dmean / csd - u * dsd / csd;
            } else {
                u = (win.lower - cmean) / csd;
                du = -dmean / csd - u * dsd / csd;
            }
            const auto [lp, d1] = log_cdf_d1(u);
            out.value += m.weight * lp;
            out.gradient += m.weight * d1 * du;
        }
    } else {
        for (int at_s = 0; at_s < 2; ++at_s)
            for (int above = 0; above < 2; ++above) {
                const double w = win.w_mixed[at_s][above];
                if (w <= 0.0) continue;
                const double hc = above ? -(at_s ? hb_s : hb_t) : (at_s ? ha_s : ha_t);
                const double lo = at_s ? ha_t : ha_s, hi = at_s ? hb_t : hb_s;
                // P(truncated side, lo < Z_o < hi) written with the truncated
                // coordinate on the lower-tail scale (sign-flipped ρ for above).
                const double r = above ? -rho : rho;
                const double num = bivariate_normal_cdf(hc, hi, r) - bivariate_normal_cdf(hc, lo, r);
                const double den = normal_cdf(hi) - normal_cdf(lo);
                const double dnum = (bivariate_normal_pdf(hc, hi, r) - bivariate_normal_pdf(hc, lo, r)) *
                                    (above ? -1.0 : 1.0) / sd_prod;
                const double p = std::max(num, 0.0) / std::max(den, kProbabilityFloor);
                out.value += w * log_floor(p);
                if (p >= kProbabilityFloor) out.gradient += w * dnum / num;
            }
    }
    return out;
}

}  // namespace detail

/// Kernel-weighted local log-likelihood of the off-diagonal element σ(s, t)
/// and its derivative, summed over within-unit ordered pairs j < j'.
inline OffDiagLogLik offdiag_local_loglik(double s, double t, double sigma_st, const MeanVarianceEstimate& mv,
                                          const FunctionalDataset& ds, const KernelSpec& k,
                                          MixedConditioning mode = MixedConditioning::exact_value) {
    const auto win = detail::build_pair_window(s, t, mv.mu_at(s), mv.mu_at(t), mv.sigma_tilde_sq_at(s),
                                               mv.sigma_tilde_sq_at(t), ds, k);
    if (win.count == 0) throw EmptyWindowError("offdiag_local_loglik: no observation pair in kernel window");
    return detail::evaluate_pair_window(win, sigma_st, mode);
}

/// Pairwise-complete sample covariance of recorded values, with each
/// observation assigned to its nearest gridpoint. Pairs seen by fewer than
/// two units are set to 0.
inline MatrixXd pairwise_sample_covariance(const FunctionalDataset& ds, std::span<const double> grid) {
    const auto g = static_cast<Eigen::Index>(grid.size());
    const auto n = static_cast<Eigen::Index>(ds.size());
    MatrixXd values = MatrixXd::Constant(n, g, std::numeric_limits<double>::quiet_NaN());
    for (Eigen::Index i = 0; i < n; ++i) {
        VectorXd sum = VectorXd::Zero(g), cnt = VectorXd::Zero(g);
        for (const auto& p : ds.trajectories[static_cast<std::size_t>(i)].points) {
            const auto st = grid_stencil(grid, p.time);
            const Eigen::Index q = st.frac < 0.5 ? st.lo : st.hi;
            sum(q) += p.value;
            cnt(q) += 1.0;
        }
        for (Eigen::Index q = 0; q < g; ++q)
            if (cnt(q) > 0) values(i, q) = sum(q) / cnt(q);
    }
    MatrixXd cov = MatrixXd::Zero(g, g);
    for (Eigen::Index p = 0; p < g; ++p)
        for (Eigen::Index q = p; q < g; ++q) {
            double sx = 0, sy = 0, sxy = 0;
            int m = 0;
            for (Eigen::Index i = 0; i < n; ++i) {
                const double x = values(i, p), y = values(i, q);
                if (std::isnan(x) || std::isnan(y)) continue;
                sx += x, sy += y, sxy += x * y;
                ++m;
            }
            if (m < 2) continue;
            const double c = (sxy - sx * sy / m) / (m - 1);
            cov(p, q) = cov(q, p) = c;
        }
    return cov;
}

struct PgdResult {
    MatrixXd sigma_tilde;
    int sweeps = 0;
    bool converged = false;
    double max_change = 0.0;
    double final_step = 0.0;
    std::vector<double> min_eigenvalue_trace;
    std::vector<std::string> warnings;
};

/// Projected coordinate gradient ascent over the off-diagonal elements of Σ̃
/// with the diagonal held at σ̃̂². Every accepted element update keeps Σ̃ PSD
/// by shrinking the blend weight α in steps of `backtrack_decrement`.
inline PgdResult fit_covariance_pgd(const FunctionalDataset& ds, const MeanVarianceEstimate& mv,
                                    std::span<const double> grid, const KernelSpec& k, const PgdConfig& cfg = {}) {
    cfg.validate();
    const auto g = static_cast<Eigen::Index>(grid.size());
    if (g < 1) throw DomainError("fit_covariance_pgd: empty grid");
    VectorXd mu(g), var(g);
    for (Eigen::Index p = 0; p < g; ++p) {
        mu(p) = mv.mu_at(grid[static_cast<std::size_t>(p)]);
        var(p) = mv.sigma_tilde_sq_at(grid[static_cast<std::size_t>(p)]);
        if (!(var(p) > 0.0)) throw DomainError("fit_covariance_pgd: stage-1 variance must be positive");
    }
    const VectorXd sd = var.cwiseSqrt();

    struct Element {
        Eigen::Index p, q;
        detail::PairWindow window;
    };
    std::vector<Element> elements;
    for (Eigen::Index p = 0; p < g; ++p)
        for (Eigen::Index q = p + 1; q < g; ++q)
            elements.push_back({p, q,
                                detail::build_pair_window(grid[static_cast<std::size_t>(p)],
                                                          grid[static_cast<std::size_t>(q)], mu(p), mu(q), var(p),
                                                          var(q), ds, k)});

    PgdResult res;
    // Line 1: sample covariance with the stage-1 diagonal; line 2: nearest
    // PSD with that diagonal kept.
    MatrixXd sigma = pairwise_sample_covariance(ds, grid);
    sigma.diagonal() = var;
    if (min_eigenvalue(sigma) < -kPsdTolerance) {
        try {
            sigma = nearest_psd(sigma, true);
        } catch (const ConvergenceError& e) {
            sigma = e.last_iterate();
            res.warnings.push_back("fit_covariance_pgd: nearest-PSD initialization hit its sweep limit");
        }
    }
    for (Eigen::Index p = 0; p < g; ++p)
        for (Eigen::Index q = 0; q < g; ++q) {
            if (p == q) continue;
            const double cap = cfg.max_correlation * sd(p) * sd(q);
            if (std::abs(sigma(p, q)) > cap) sigma(p, q) = std::copysign(cap, sigma(p, q));
        }
    if (elements.empty()) {
        res.sigma_tilde = sigma;
        res.converged = true;
        return res;
    }
    const double scale = std::max(1.0, var.maxCoeff());
    const double feas_tol = 1e-11 * scale;
    if (!is_psd(sigma, feas_tol)) {
        // Clamping correlations can break PSD; blending toward the diagonal
        // restores it while keeping the diagonal.
        MatrixXd d = var.asDiagonal();
        double lam = 1e-6;
        while (!is_psd((1 - lam) * sigma + lam * d, feas_tol) && lam < 1.0) lam = std::min(1.0, lam * 4);
        sigma = (1 - lam) * sigma + lam * d;
    }

    double eps = cfg.init_step;
    if (eps <= 0.0) {
        double acc = 0.0;
        for (const auto& e : elements) acc += std::abs(sigma(e.p, e.q));
        acc /= static_cast<double>(elements.size());
        if (acc <= 0.0) acc = var.mean();
        eps = 0.01 * acc;
    }

    const int max_k = static_cast<int>(std::ceil(1.0 / cfg.backtrack_decrement));
    auto alpha_of = [&](int kstep) { return std::max(0.0, 1.0 - kstep * cfg.backtrack_decrement); };

    std::vector<std::size_t> order(elements.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg.seed);
    // Last three per-sweep moves of every element, for the oscillation test.
    std::vector<std::array<double, 3>> moves(elements.size(), {0.0, 0.0, 0.0});
    MatrixXd trial = sigma;

    for (int sweep = 1; sweep <= cfg.max_sweeps; ++sweep) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        const MatrixXd before = sigma;
        double alpha_sum = 0.0;
        for (std::size_t idx : order) {
            const auto& e = elements[idx];
            const double old = sigma(e.p, e.q);
            double grad = 0.0;
            if (e.window.count > 0 && e.window.total_weight > 0.0)
                grad = detail::evaluate_pair_window(e.window, old, cfg.mixed).gradient / e.window.total_weight;
            const double proposal = old + eps * grad;
            const double cap = cfg.max_correlation * sd(e.p) * sd(e.q);
            auto feasible = [&](int kstep) {
                const double a = alpha_of(kstep);
                const double v = a * proposal + (1.0 - a) * old;
                if (std::abs(v) > cap) return false;
                trial(e.p, e.q) = trial(e.q, e.p) = v;
                const bool ok = is_psd(trial, feas_tol);
                trial(e.p, e.q) = trial(e.q, e.p) = old;
                return ok;
            };
            // Feasible blend weights form an interval containing α = 0, so the
            // first feasible α met while stepping down from 1 is found by
            // bisection on the step count.
            int kstep = 0;
            if (!feasible(0)) {
                int lo = 0, hi = max_k;
                if (!feasible(hi)) hi = -1;
                while (hi >= 0 && hi - lo > 1) {
                    const int mid = lo + (hi - lo) / 2;
                    (feasible(mid) ? hi : lo) = mid;
                }
                kstep = hi < 0 ? max_k : hi;
            }
            const double a = alpha_of(kstep);
            const double v = a * proposal + (1.0 - a) * old;
            sigma(e.p, e.q) = sigma(e.q, e.p) = v;
            trial(e.p, e.q) = trial(e.q, e.p) = v;
            alpha_sum += a;
        }

        double max_change = 0.0;
        bool oscillating = false;
        for (std::size_t i = 0; i < elements.size(); ++i) {
            const auto& e = elements[i];
            const double d = sigma(e.p, e.q) - before(e.p, e.q);
            max_change = std::max(max_change, std::abs(d));
            auto& mv3 = moves[i];
            mv3 = {mv3[1], mv3[2], d};
            // Alternating direction without decaying amplitude.
            if (sweep >= 3 && mv3[0] != 0.0 && mv3[1] != 0.0 && mv3[2] != 0.0 &&
                std::signbit(mv3[0]) == std::signbit(mv3[2]) && std::signbit(mv3[1]) != std::signbit(mv3[2]) &&
                std::abs(mv3[0]) < std::abs(mv3[2]))
                oscillating = true;
        }
        res.sweeps = sweep;
        res.max_change = max_change;
        if (cfg.trace_min_eigenvalue) res.min_eigenvalue_trace.push_back(min_eigenvalue(sigma));
        if (max_change < cfg.tolerance) {
            res.converged = true;
            break;
        }
        const double mean_alpha = alpha_sum / static_cast<double>(elements.size());
        if (oscillating) eps *= 0.5;
        else if (mean_alpha == 1.0) eps *= 1.1;
        else if (mean_alpha < cfg.shrink_threshold) eps *= 0.9;
    }
    res.final_step = eps;
    if (!res.converged)
        res.warnings.push_back("fit_covariance_pgd: sweep limit reached (max change " +
                               detail::format_double(res.max_change) + ")");
    res.sigma_tilde = sigma;
    return res;
}

namespace detail {

/// Σ_i log N(W_i⁰; μ̂(T_i⁰), Σ̃̂(T_i⁰, T_i⁰)) over the non-truncated part of
/// every trajectory, with off-grid entries bilinearly interpolated.
inline double pseudo_loglik(const FunctionalDataset& ds, const MeanVarianceEstimate& mv, std::span<const double> grid,
                            const MatrixXd& sigma_tilde) {
    constexpr double log_2pi = 1.8378770664093454835606594728112352797227949472756;
    double total = 0.0;
    for (const auto& tr : ds.trajectories) {
        std::vector<const ObservationPoint*> pts;
        for (const auto& p : tr.points)
            if (p.flag == Flag::none) pts.push_back(&p);
        const auto m = static_cast<Eigen::Index>(pts.size());
        if (m == 0) continue;
        VectorXd r(m);
        MatrixXd c(m, m);
        for (Eigen::Index a = 0; a < m; ++a) {
            r(a) = pts[static_cast<std::size_t>(a)]->value - mv.mu_at(pts[static_cast<std::size_t>(a)]->time);
            for (Eigen::Index b = 0; b < m; ++b) {
                const double ta = pts[static_cast<std::size_t>(a)]->time, tb = pts[static_cast<std::size_t>(b)]->time;
                c(a, b) = a == b ? interpolate(grid, VectorXd(sigma_tilde.diagonal()), ta)
                                 : interpolate2(grid, sigma_tilde, ta, tb);
            }
        }
        c = symmetrize(c);
        Eigen::LLT<MatrixXd> llt(c);
        if (llt.info() != Eigen::Success) {
            c.diagonal().array() += 1e-8 * std::max(1.0, c.diagonal().maxCoeff());
            llt.compute(c);
            if (llt.info() != Eigen::Success) continue;
        }
        const VectorXd z = llt.matrixL().solve(r);
        const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
        total += -0.5 * (static_cast<double>(m) * log_2pi + logdet + z.squaredNorm());
    }
    return total;
}

}  // namespace detail

struct CovBandwidthSelection {
    double bandwidth = 0.0;
    std::vector<BandwidthScore> table;  ///< score = pseudo log-likelihood (larger is better)
    std::vector<std::string> warnings;
    PgdResult fit;  ///< PGD result at the chosen bandwidth
};

/// Picks the covariance bandwidth maximizing the Gaussian pseudo-likelihood
/// of the non-truncated observations; ties go to the smaller bandwidth.
inline CovBandwidthSelection select_cov_bandwidth(const FunctionalDataset& ds, const MeanVarianceEstimate& mv,
                                                  std::span<const double> grid, std::span<const double> candidates,
                                                  const PgdConfig& cfg = {}) {
    if (candidates.empty()) throw DomainError("select_cov_bandwidth: no candidate bandwidths");
    std::vector<double> sorted(candidates.begin(), candidates.end());
    std::sort(sorted.begin(), sorted.end());
    CovBandwidthSelection sel;
    bool have = false;
    double best = -std::numeric_limits<double>::infinity();
    for (double h : sorted) {
        if (!(h > 0.0)) throw DomainError("select_cov_bandwidth: bandwidths must be positive");
        auto fit = fit_covariance_pgd(ds, mv, grid, KernelSpec{h}, cfg);
        const double score = detail::pseudo_loglik(ds, mv, grid, fit.sigma_tilde);
        sel.table.push_back({h, score});
        for (auto& w : fit.warnings) sel.warnings.push_back("h=" + detail::format_double(h) + ": " + w);
        if (!have || score > best) {
            have = true;
            best = score;
            sel.bandwidth = h;
            sel.fit = std::move(fit);
        }
    }
    return sel;
}

struct DiagonalSmooth {
    VectorXd raw;        ///< local intercepts β̂₀ along the diagonal
    MatrixXd sigma;      ///< PSD covariance of the smooth process
    VectorXd noise_var;  ///< σ̃̂² − diag(Σ̂), non-negative
    std::vector<std::string> warnings;
};

/// Estimates Σ(t, t) by a local fit that is linear along the diagonal and
/// quadratic across it, using only off-diagonal entries of Σ̃̂ at the
/// observed within-unit time pairs. Observation times are snapped to their
/// nearest gridpoint; pairs landing on the same gridpoint are dropped.
inline DiagonalSmooth smooth_diagonal(const MatrixXd& sigma_tilde, const FunctionalDataset& ds,
                                      const MeanVarianceEstimate& mv, std::span<const double> grid,
                                      const KernelSpec& k, int max_bandwidth_doublings = 3) {
    const auto g = static_cast<Eigen::Index>(grid.size());
    if (sigma_tilde.rows() != g || sigma_tilde.cols() != g)
        throw DomainError("smooth_diagonal: matrix/grid size mismatch");
    for (Eigen::Index c = 0; c < g; ++c)
        if (std::abs(sigma_tilde(c, c) - mv.sigma_tilde_sq_at(grid[static_cast<std::size_t>(c)])) >
            1e-9 * std::max(1.0, sigma_tilde(c, c)))
            throw DomainError("smooth_diagonal: diagonal of sigma_tilde must equal the stage-1 variance");
    if (!(k.bandwidth > 0.0)) throw DomainError("smooth_diagonal: bandwidth must be positive");

    // Counts of within-unit pairs per grid cell (p ≠ q, both orders).
    MatrixXd cell = MatrixXd::Zero(g, g);
    for (const auto& tr : ds.trajectories) {
        std::vector<Eigen::Index> idx;
        for (const auto& p : tr.points) {
            const auto st = grid_stencil(grid, p.time);
            idx.push_back(st.frac < 0.5 ? st.lo : st.hi);
        }
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = 0; b < idx.size(); ++b)
                if (a != b && idx[a] != idx[b]) cell(idx[a], idx[b]) += 1.0;
    }

    DiagonalSmooth out;
    out.raw.resize(g);
    constexpr double r2 = std::numbers::sqrt2 / 2.0;
    for (Eigen::Index c = 0; c < g; ++c) {
        const double t0 = grid[static_cast<std::size_t>(c)];
        double h = k.bandwidth;
        bool done = false;
        for (int attempt = 0; attempt <= max_bandwidth_doublings && !done; ++attempt, h *= 2.0) {
            const KernelSpec kk{h};
            Eigen::Matrix3d xtx = Eigen::Matrix3d::Zero();
            Eigen::Vector3d xty = Eigen::Vector3d::Zero();
            int effective = 0;
            for (Eigen::Index p = 0; p < g; ++p)
                for (Eigen::Index q = 0; q < g; ++q) {
                    if (cell(p, q) == 0.0) continue;
                    const double s = grid[static_cast<std::size_t>(p)], t = grid[static_cast<std::size_t>(q)];
                    const double w = cell(p, q) * kk.weight(t0 - s, t0 - t);
                    if (w <= kMinKernelWeight) continue;
                    ++effective;
                    // Rotated offsets: along and across the diagonal.
                    const double along = r2 * ((s - t0) + (t - t0));
                    const double across = r2 * (t - s);
                    const Eigen::Vector3d x(1.0, along, across * across);
                    xtx += w * x * x.transpose();
                    xty += w * sigma_tilde(p, q) * x;
                }
            if (effective < 3) continue;
            Eigen::ColPivHouseholderQR<Eigen::Matrix3d> qr(xtx);
            qr.setThreshold(1e-12);
            if (qr.rank() < 3) continue;
            out.raw(c) = qr.solve(xty)(0);
            done = true;
            if (attempt > 0)
                out.warnings.push_back("smooth_diagonal: bandwidth widened to " + detail::format_double(h) +
                                       " at t=" + detail::format_double(t0));
        }
        if (!done)
            throw NumericalError("smooth_diagonal: too few off-diagonal pairs near t=" + detail::format_double(t0));
    }

    const VectorXd cap = sigma_tilde.diagonal();
    MatrixXd sigma = sigma_tilde;
    for (Eigen::Index c = 0; c < g; ++c) sigma(c, c) = std::clamp(out.raw(c), 0.0, std::max(cap(c), 0.0));
    if (min_eigenvalue(sigma) < -kPsdTolerance) {
        sigma = project_psd(sigma);
        // Projection can push diagonals above σ̃̂²; a congruence pulls them back.
        VectorXd target = sigma.diagonal();
        bool over = false;
        for (Eigen::Index c = 0; c < g; ++c)
            if (target(c) > cap(c)) target(c) = cap(c), over = true;
        if (over) sigma = detail::rescale_to_diagonal(sigma, target);
    }
    out.sigma = symmetrize(sigma);
    out.noise_var = (cap - out.sigma.diagonal()).cwiseMax(0.0);
    return out;
}

struct CovarianceModel {
    std::vector<double> grid;
    MatrixXd sigma_tilde;
    MatrixXd sigma;
    VectorXd noise_var;
    EigenSystem eigen;
    double bandwidth = 0.0;
    int sweeps = 0;
    bool converged = false;
    std::vector<BandwidthScore> bandwidth_table;
    std::vector<std::string> warnings;

    /// Pointwise σ̂²/σ̃̂², the estimated noise fraction.
    VectorXd snr() const {
        return noise_var.cwiseQuotient(sigma_tilde.diagonal().cwiseMax(std::numeric_limits<double>::min()));
    }
};

namespace detail {

inline CovarianceModel finish_covariance_model(const FunctionalDataset& ds, const MeanVarianceEstimate& mv,
                                               std::span<const double> grid, PgdResult fit, double bandwidth) {
    CovarianceModel model;
    model.grid.assign(grid.begin(), grid.end());
    model.bandwidth = bandwidth;
    model.sigma_tilde = std::move(fit.sigma_tilde);
    model.sweeps = fit.sweeps;
    model.converged = fit.converged;
    model.warnings = std::move(fit.warnings);
    auto diag = smooth_diagonal(model.sigma_tilde, ds, mv, grid, KernelSpec{mv.bandwidth});
    for (auto& w : diag.warnings) model.warnings.push_back(std::move(w));
    model.sigma = std::move(diag.sigma);
    model.noise_var = std::move(diag.noise_var);
    model.eigen = eigen_decompose_psd(model.sigma, grid);
    return model;
}

}  // namespace detail

/// Stage 2 end to end at covariance bandwidth k: Σ̃̂ by PGD, diagonal
/// smoothing with the stage-1 bandwidth, quadrature eigendecomposition of Σ̂.
inline CovarianceModel build_covariance_model(const FunctionalDataset& ds, const MeanVarianceEstimate& mv,
                                              std::span<const double> grid, const KernelSpec& k,
                                              const PgdConfig& cfg = {}) {
    return detail::finish_covariance_model(ds, mv, grid, fit_covariance_pgd(ds, mv, grid, k, cfg), k.bandwidth);
}

/// As above, with the covariance bandwidth chosen by pseudo-likelihood.
inline CovarianceModel build_covariance_model(const FunctionalDataset& ds, const MeanVarianceEstimate& mv,
                                              std::span<const double> grid, std::span<const double> candidates,
                                              const PgdConfig& cfg = {}) {
    auto sel = select_cov_bandwidth(ds, mv, grid, candidates, cfg);
    sel.fit.warnings.clear();
    auto model = detail::finish_covariance_model(ds, mv, grid, std::move(sel.fit), sel.bandwidth);
    model.bandwidth_table = std::move(sel.table);
    model.warnings.insert(model.warnings.begin(), sel.warnings.begin(), sel.warnings.end());
    return model;
}

}  // namespace tfpca

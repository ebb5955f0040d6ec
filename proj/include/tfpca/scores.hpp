#pragma once

// Stage 3: FPC score prediction. Conditional-expectation (BLUP) scores from
// the non-truncated points, and the Monte Carlo estimator that imputes the
// truncated coordinates from their conditional truncated-normal law.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tfpca/covariance.hpp"
#include "tfpca/dataset.hpp"
#include "tfpca/errors.hpp"
#include "tfpca/mean_variance.hpp"
#include "tfpca/numeric/linalg.hpp"
#include "tfpca/numeric/random.hpp"

namespace tfpca {

struct ScoreSet {
    std::vector<std::string> unit_ids;
    MatrixXd scores;           ///< n×K, Monte Carlo estimator (equals scores_nontrunc for BLUP-only sets)
    MatrixXd scores_nontrunc;  ///< n×K, BLUP from non-truncated points
    int m = 0;
    std::uint64_t seed = 0;
    int K = 0;
    std::vector<std::string> flags;  ///< per unit; empty when nothing notable happened
    /// Per-unit m×K score draws, kept only on request.
    std::optional<std::vector<MatrixXd>> draws;

    Eigen::Index row_of(const std::string& unit_id) const {
        for (std::size_t i = 0; i < unit_ids.size(); ++i)
            if (unit_ids[i] == unit_id) return static_cast<Eigen::Index>(i);
        throw LookupError("ScoreSet: unknown unit '" + unit_id + "'");
    }
};

struct ScoreOptions {
    int m = 100;
    std::uint64_t seed = 1;
    GibbsOptions gibbs;
    bool keep_draws = false;
    double ridge = 1e-8;
    double condition_limit = 1e10;
};

namespace detail {

/// Model quantities at one unit's observation times.
struct UnitModel {
    VectorXd mu;
    MatrixXd cov;  ///< Σ̃ at (t_i, t_i), ridge-stabilized if ill-conditioned
    MatrixXd phi;  ///< N_i × K
};

inline UnitModel unit_model(const Trajectory& tr, const CovarianceModel& model, const MeanVarianceEstimate& mv, int K,
                            const ScoreOptions& opts) {
    const auto n = static_cast<Eigen::Index>(tr.size());
    const std::span<const double> grid(model.grid);
    const VectorXd diag = model.sigma_tilde.diagonal();
    UnitModel u;
    u.mu.resize(n);
    u.cov.resize(n, n);
    u.phi.resize(n, K);
    for (Eigen::Index a = 0; a < n; ++a) {
        const double ta = tr.points[static_cast<std::size_t>(a)].time;
        u.mu(a) = mv.mu_at(ta);
        for (Eigen::Index b = 0; b < n; ++b) {
            const double tb = tr.points[static_cast<std::size_t>(b)].time;
            u.cov(a, b) = a == b ? interpolate(grid, diag, ta) : interpolate2(grid, model.sigma_tilde, ta, tb);
        }
        for (int k = 0; k < K; ++k) u.phi(a, k) = interpolate(grid, model.eigen.eigenvectors.col(k), ta);
    }
    u.cov = symmetrize(u.cov);
    if (n > 0) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(u.cov, Eigen::EigenvaluesOnly);
        const double lo = es.eigenvalues()(0), hi = es.eigenvalues()(n - 1);
        if (!(lo > 0.0) || hi / lo > opts.condition_limit) u.cov.diagonal().array() += opts.ridge;
    }
    return u;
}

/// Rows k of Λ Φᵀ Σ̃⁻¹ restricted to `idx`; applied to centered values it
/// gives the conditional-mean scores.
inline MatrixXd blup_operator(const UnitModel& u, const std::vector<Eigen::Index>& idx, const EigenSystem& eig,
                              int K) {
    const auto m = static_cast<Eigen::Index>(idx.size());
    MatrixXd c(m, m), phi(m, K);
    for (Eigen::Index a = 0; a < m; ++a) {
        for (Eigen::Index b = 0; b < m; ++b) c(a, b) = u.cov(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
        phi.row(a) = u.phi.row(idx[static_cast<std::size_t>(a)]);
    }
    Eigen::LDLT<MatrixXd> ldlt(c);
    if (ldlt.info() != Eigen::Success) throw ConditioningError("score prediction: singular covariance block", 0.0);
    const MatrixXd sol = ldlt.solve(phi);  // Σ̃⁻¹ Φ
    return eig.eigenvalues.head(K).asDiagonal() * sol.transpose();
}

inline void check_K(const CovarianceModel& model, int K) {
    if (K < 0 || K > model.eigen.eigenvalues.size())
        throw DomainError("score prediction: K must lie in [0, number of eigenpairs]");
    if (K > model.eigen.positive_count())
        throw DomainError("score prediction: K exceeds the number of positive eigenvalues");
}

}  // namespace detail

/// ξ̃⁰: conditional-mean scores given only the non-truncated observations.
inline ScoreSet blup_scores_nontruncated(const FunctionalDataset& ds, const CovarianceModel& model,
                                         const MeanVarianceEstimate& mv, int K, const ScoreOptions& opts = {}) {
    detail::check_K(model, K);
    const auto n = static_cast<Eigen::Index>(ds.size());
    ScoreSet out;
    out.K = K;
    out.scores_nontrunc = MatrixXd::Zero(n, K);
    out.flags.assign(ds.size(), "");
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& tr = ds.trajectories[static_cast<std::size_t>(i)];
        out.unit_ids.push_back(tr.unit_id);
        std::vector<Eigen::Index> obs;
        for (std::size_t j = 0; j < tr.size(); ++j)
            if (tr.points[j].flag == Flag::none) obs.push_back(static_cast<Eigen::Index>(j));
        if (obs.empty()) {
            out.flags[static_cast<std::size_t>(i)] = "no_nontruncated";
            continue;
        }
        const auto u = detail::unit_model(tr, model, mv, K, opts);
        const MatrixXd op = detail::blup_operator(u, obs, model.eigen, K);
        VectorXd r(static_cast<Eigen::Index>(obs.size()));
        for (std::size_t a = 0; a < obs.size(); ++a)
            r(static_cast<Eigen::Index>(a)) = tr.points[static_cast<std::size_t>(obs[a])].value - u.mu(obs[a]);
        out.scores_nontrunc.row(i) = (op * r).transpose();
    }
    out.scores = out.scores_nontrunc;
    return out;
}

/// ξ̂: for each unit, draws the truncated coordinates from their conditional
/// law given the non-truncated block (restricted to the flagged side),
/// applies the full-vector conditional-mean score map to every completed
/// vector and averages. Units without truncation need no sampling.
inline ScoreSet predict_scores_mc(const FunctionalDataset& ds, const CovarianceModel& model,
                                  const MeanVarianceEstimate& mv, int K, const ScoreOptions& opts = {}) {
    if (opts.m < 1) throw DomainError("predict_scores_mc: m must be at least 1");
    ScoreSet out = blup_scores_nontruncated(ds, model, mv, K, opts);
    out.m = opts.m;
    out.seed = opts.seed;
    if (opts.keep_draws) out.draws.emplace();
    const double a = ds.bounds.lower, b = ds.bounds.upper;
    constexpr double inf = std::numeric_limits<double>::infinity();

    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const auto& tr = ds.trajectories[i];
        const auto u = detail::unit_model(tr, model, mv, K, opts);
        std::vector<Eigen::Index> all(tr.size()), obs, cens;
        for (std::size_t j = 0; j < tr.size(); ++j) {
            all[j] = static_cast<Eigen::Index>(j);
            (tr.points[j].flag == Flag::none ? obs : cens).push_back(static_cast<Eigen::Index>(j));
        }
        const MatrixXd op = detail::blup_operator(u, all, model.eigen, K);
        VectorXd resid(static_cast<Eigen::Index>(tr.size()));
        for (std::size_t j = 0; j < tr.size(); ++j) resid(static_cast<Eigen::Index>(j)) = tr.points[j].value - u.mu(all[j]);

        if (cens.empty()) {
            out.scores.row(ii) = (op * resid).transpose();
            if (out.draws) out.draws->push_back(out.scores.row(ii).replicate(opts.m, 1));
            continue;
        }

        const auto p1 = static_cast<Eigen::Index>(cens.size()), p2 = static_cast<Eigen::Index>(obs.size());
        GaussianPartition part;
        part.mu1.resize(p1), part.mu2.resize(p2);
        part.s11.resize(p1, p1), part.s12.resize(p1, p2), part.s22.resize(p2, p2);
        VectorXd x2(p2), lo(p1), hi(p1);
        for (Eigen::Index r = 0; r < p1; ++r) {
            const auto jr = cens[static_cast<std::size_t>(r)];
            part.mu1(r) = u.mu(jr);
            const bool above = tr.points[static_cast<std::size_t>(jr)].flag == Flag::above;
            lo(r) = above ? b : -inf;
            hi(r) = above ? inf : a;
            for (Eigen::Index c = 0; c < p1; ++c) part.s11(r, c) = u.cov(jr, cens[static_cast<std::size_t>(c)]);
            for (Eigen::Index c = 0; c < p2; ++c) part.s12(r, c) = u.cov(jr, obs[static_cast<std::size_t>(c)]);
        }
        for (Eigen::Index r = 0; r < p2; ++r) {
            const auto jr = obs[static_cast<std::size_t>(r)];
            part.mu2(r) = u.mu(jr);
            x2(r) = tr.points[static_cast<std::size_t>(jr)].value;
            for (Eigen::Index c = 0; c < p2; ++c) part.s22(r, c) = u.cov(jr, obs[static_cast<std::size_t>(c)]);
        }

        MatrixXd samples;
        try {
            const auto cond = conditional_gaussian(part, x2);
            samples = sample_truncated_mvn(cond.mean, cond.cov, lo, hi, opts.m, mix_seed(opts.seed, i), opts.gibbs);
        } catch (const NumericalError&) {
            out.flags[i] = "degenerate_region";
            out.scores.row(ii) = out.scores_nontrunc.row(ii);
            if (out.draws) out.draws->push_back(out.scores.row(ii).replicate(opts.m, 1));
            continue;
        }

        // Completed residual vectors, one per row.
        MatrixXd completed(opts.m, static_cast<Eigen::Index>(tr.size()));
        completed.rowwise() = resid.transpose();
        for (Eigen::Index r = 0; r < p1; ++r) {
            const auto jr = cens[static_cast<std::size_t>(r)];
            completed.col(jr) = samples.col(r).array() - u.mu(jr);
        }
        const MatrixXd draw_scores = completed * op.transpose();  // m × K
        out.scores.row(ii) = draw_scores.colwise().mean();
        if (out.draws) out.draws->push_back(draw_scores);
    }
    return out;
}

/// μ̂(t) + Σ_{k≤K} ξ̂_k φ̂_k(t) on `eval_grid`.
inline VectorXd reconstruct_trajectory(const std::string& unit_id, const CovarianceModel& model,
                                       const MeanVarianceEstimate& mv, const ScoreSet& scores, int K,
                                       std::span<const double> eval_grid) {
    if (K < 0 || K > scores.K) throw DomainError("reconstruct_trajectory: K exceeds the score set");
    const auto row = scores.row_of(unit_id);
    const std::span<const double> grid(model.grid);
    VectorXd out(static_cast<Eigen::Index>(eval_grid.size()));
    for (std::size_t q = 0; q < eval_grid.size(); ++q) {
        double v = mv.mu_at(eval_grid[q]);
        for (int k = 0; k < K; ++k)
            v += scores.scores(row, k) * interpolate(grid, model.eigen.eigenvectors.col(k), eval_grid[q]);
        out(static_cast<Eigen::Index>(q)) = v;
    }
    return out;
}

}  // namespace tfpca

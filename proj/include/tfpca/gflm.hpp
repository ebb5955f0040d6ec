#pragma once

// Generalized functional linear model on predicted FPC scores and baseline
// covariates, identity or logit link.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tfpca/errors.hpp"
#include "tfpca/numeric/linalg.hpp"
#include "tfpca/scores.hpp"

namespace tfpca {

enum class Link { identity, logit };

inline std::string to_string(Link l) { return l == Link::identity ? "identity" : "logit"; }

inline Link parse_link(const std::string& s) {
    if (s == "identity") return Link::identity;
    if (s == "logit") return Link::logit;
    throw DomainError("unknown link '" + s + "' (expected identity or logit)");
}

/// Smallest K whose cumulative eigenvalue share reaches `threshold`.
inline int select_K_fve(const EigenSystem& eigen, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw DomainError("select_K_fve: threshold must lie in (0, 1]");
    const double total = eigen.eigenvalues.sum();
    if (!(total > 0.0)) throw NumericalError("select_K_fve: degenerate spectrum (all eigenvalues zero)");
    const int positive = static_cast<int>(eigen.positive_count());
    double running = 0.0;
    for (int k = 0; k < eigen.eigenvalues.size(); ++k) {
        running += eigen.eigenvalues(k);
        // Relative slack absorbs rounding in the cumulative sum.
        if (running >= threshold * total * (1.0 - 1e-12)) return std::clamp(k + 1, 1, std::max(positive, 1));
    }
    return std::max(positive, 1);
}

struct GflmFitInfo {
    double loglik = 0.0;
    int iterations = 0;
    bool converged = false;
    bool separation = false;
    double gradient_norm = 0.0;
};

struct GflmFit {
    Link link = Link::identity;
    int K = 0;
    double intercept = 0.0;
    VectorXd covariate_coeffs;
    VectorXd score_coeffs;
    VectorXd std_errors;  ///< intercept, covariates, scores
    std::vector<std::string> column_names;
    double residual_variance = 0.0;  ///< identity link only
    GflmFitInfo info;

    VectorXd coefficients() const {
        VectorXd c(1 + covariate_coeffs.size() + score_coeffs.size());
        c << intercept, covariate_coeffs, score_coeffs;
        return c;
    }
};

namespace detail {

inline MatrixXd gflm_design(const MatrixXd& scores, const MatrixXd* X, int K) {
    const auto n = scores.rows();
    const auto p = X ? X->cols() : 0;
    MatrixXd d(n, 1 + p + K);
    d.col(0).setOnes();
    if (p > 0) d.middleCols(1, p) = *X;
    if (K > 0) d.rightCols(K) = scores.leftCols(K);
    return d;
}

inline double expit(double eta) {
    if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

inline double logit_loglik(const VectorXd& y, const VectorXd& eta) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        // log(1 + e^η) without overflow.
        const double soft = eta(i) > 0 ? eta(i) + std::log1p(std::exp(-eta(i))) : std::log1p(std::exp(eta(i)));
        ll += y(i) * eta(i) - soft;
    }
    return ll;
}

}  // namespace detail

/// Maximum likelihood on the design [1, X, ξ̂₁..ξ̂_K].
inline GflmFit fit_gflm(const ScoreSet& scores, const std::optional<MatrixXd>& X, const VectorXd& y, Link link, int K,
                        const std::vector<std::string>& covariate_names = {}) {
    const auto n = scores.scores.rows();
    if (K < 0 || K > scores.K) throw DomainError("fit_gflm: K exceeds the score set");
    if (y.size() != n) throw DomainError("fit_gflm: response length differs from the number of units");
    if (X && X->rows() != n) throw DomainError("fit_gflm: covariate rows differ from the number of units");
    const Eigen::Index p = X ? X->cols() : 0;
    if (n < p + K + 1) throw DomainError("fit_gflm: need at least p + K + 1 units");
    if (!y.allFinite()) throw DomainError("fit_gflm: non-finite response");
    if (link == Link::logit)
        for (Eigen::Index i = 0; i < n; ++i)
            if (y(i) != 0.0 && y(i) != 1.0) throw DomainError("fit_gflm: logit link needs responses in {0,1}");

    GflmFit fit;
    fit.link = link;
    fit.K = K;
    fit.column_names.push_back("intercept");
    for (Eigen::Index j = 0; j < p; ++j)
        fit.column_names.push_back(static_cast<std::size_t>(j) < covariate_names.size()
                                       ? covariate_names[static_cast<std::size_t>(j)]
                                       : "x" + std::to_string(j + 1));
    for (int k = 0; k < K; ++k) fit.column_names.push_back("score" + std::to_string(k + 1));

    const MatrixXd d = detail::gflm_design(scores.scores, X ? &*X : nullptr, K);
    const auto q = d.cols();
    Eigen::ColPivHouseholderQR<MatrixXd> qr(d);
    qr.setThreshold(1e-10);
    if (qr.rank() < q) {
        std::string cols;
        const auto perm = qr.colsPermutation().indices();
        for (Eigen::Index j = qr.rank(); j < q; ++j) {
            const auto c = static_cast<std::size_t>(perm(j));
            cols += (cols.empty() ? "" : ", ") + fit.column_names[c];
        }
        std::vector<std::string> names;
        for (Eigen::Index j = qr.rank(); j < q; ++j) names.push_back(fit.column_names[static_cast<std::size_t>(perm(j))]);
        throw CollinearityError("fit_gflm: rank-deficient design; dependent columns: " + cols, names);
    }

    VectorXd beta;
    MatrixXd info_inv;
    if (link == Link::identity) {
        beta = qr.solve(y);
        const VectorXd r = y - d * beta;
        const double rss = r.squaredNorm();
        const double df = static_cast<double>(n - q);
        fit.residual_variance = df > 0 ? rss / df : 0.0;
        const double s2_mle = rss / static_cast<double>(n);
        constexpr double log_2pi = 1.8378770664093454835606594728112352797227949472756;
        fit.info.loglik = s2_mle > 0 ? -0.5 * static_cast<double>(n) * (log_2pi + std::log(s2_mle) + 1.0)
                                     : std::numeric_limits<double>::infinity();
        fit.info.iterations = 1;
        fit.info.gradient_norm = (d.transpose() * r).cwiseAbs().maxCoeff();
        fit.info.converged = fit.info.gradient_norm < 1e-8 * std::max(1.0, y.cwiseAbs().maxCoeff() * static_cast<double>(n));
        info_inv = fit.residual_variance * (d.transpose() * d).inverse();
    } else {
        beta = VectorXd::Zero(q);
        VectorXd eta = VectorXd::Zero(n);
        double ll = detail::logit_loglik(y, eta);
        MatrixXd h(q, q);
        for (int it = 1; it <= 100; ++it) {
            VectorXd prob(n), w(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                prob(i) = detail::expit(eta(i));
                w(i) = prob(i) * (1.0 - prob(i));
            }
            const VectorXd grad = d.transpose() * (y - prob);
            fit.info.gradient_norm = grad.cwiseAbs().maxCoeff();
            fit.info.iterations = it - 1;
            if (fit.info.gradient_norm < 1e-8) {
                fit.info.converged = true;
                break;
            }
            h = d.transpose() * w.asDiagonal() * d;
            Eigen::LDLT<MatrixXd> ldlt(h);
            VectorXd step = ldlt.solve(grad);
            if (ldlt.info() != Eigen::Success || !step.allFinite()) {
                MatrixXd hr = h;
                hr.diagonal().array() += 1e-8 * std::max(1.0, h.diagonal().maxCoeff());
                step = hr.ldlt().solve(grad);
            }
            // Damping: halve until the likelihood does not decrease.
            double t = 1.0;
            bool moved = false;
            for (int half = 0; half < 40; ++half, t *= 0.5) {
                const VectorXd cand = beta + t * step;
                const VectorXd cand_eta = d * cand;
                const double cand_ll = detail::logit_loglik(y, cand_eta);
                if (cand_ll >= ll) {
                    moved = cand_ll > ll;
                    beta = cand;
                    eta = cand_eta;
                    ll = cand_ll;
                    break;
                }
            }
            fit.info.iterations = it;
            if (!moved) break;
        }
        if (!fit.info.converged) {
            VectorXd prob(n);
            for (Eigen::Index i = 0; i < n; ++i) prob(i) = detail::expit(eta(i));
            fit.info.gradient_norm = (d.transpose() * (y - prob)).cwiseAbs().maxCoeff();
            fit.info.converged = fit.info.gradient_norm < 1e-8;
        }
        if (eta.cwiseAbs().maxCoeff() > 30.0 && !fit.info.converged) fit.info.separation = true;
        fit.info.loglik = ll;
        VectorXd w(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double pr = detail::expit(eta(i));
            w(i) = pr * (1.0 - pr);
        }
        h = d.transpose() * w.asDiagonal() * d;
        Eigen::FullPivLU<MatrixXd> lu(h);
        info_inv = lu.isInvertible() ? MatrixXd(lu.inverse())
                                     : MatrixXd::Constant(q, q, std::numeric_limits<double>::infinity());
    }
    fit.intercept = beta(0);
    fit.covariate_coeffs = beta.segment(1, p);
    fit.score_coeffs = beta.tail(K);
    fit.std_errors = info_inv.diagonal().cwiseMax(0.0).cwiseSqrt();
    return fit;
}

struct PredictOptions {
    /// Logit only: average the inverse link over the stored per-draw scores
    /// instead of plugging in the averaged scores.
    bool average_link_over_draws = false;
};

/// Fitted mean response: the linear predictor for identity, the success
/// probability for logit.
inline VectorXd predict_gflm(const GflmFit& fit, const ScoreSet& scores, const std::optional<MatrixXd>& X,
                             const PredictOptions& opts = {}) {
    const auto n = scores.scores.rows();
    const auto p = fit.covariate_coeffs.size();
    if (scores.K < fit.K) throw DomainError("predict_gflm: score set has fewer than K columns");
    if ((X ? X->cols() : 0) != p) throw DomainError("predict_gflm: covariate columns differ from the fit");
    if (X && X->rows() != n) throw DomainError("predict_gflm: covariate rows differ from the number of units");
    VectorXd base = VectorXd::Constant(n, fit.intercept);
    if (p > 0) base += *X * fit.covariate_coeffs;
    if (fit.link == Link::identity) return base + scores.scores.leftCols(fit.K) * fit.score_coeffs;

    VectorXd out(n);
    if (opts.average_link_over_draws) {
        if (!scores.draws) throw DomainError("predict_gflm: link averaging needs a score set with stored draws");
        for (Eigen::Index i = 0; i < n; ++i) {
            const MatrixXd& dr = (*scores.draws)[static_cast<std::size_t>(i)];
            const VectorXd eta = (dr.leftCols(fit.K) * fit.score_coeffs).array() + base(i);
            double acc = 0.0;
            for (Eigen::Index r = 0; r < eta.size(); ++r) acc += detail::expit(eta(r));
            out(i) = acc / static_cast<double>(eta.size());
        }
        return out;
    }
    const VectorXd eta = base + scores.scores.leftCols(fit.K) * fit.score_coeffs;
    for (Eigen::Index i = 0; i < n; ++i) out(i) = detail::expit(eta(i));
    return out;
}

/// Class labels from predicted probabilities at threshold 0.5.
inline VectorXd classify(const VectorXd& prob) {
    return prob.unaryExpr([](double v) { return v >= 0.5 ? 1.0 : 0.0; });
}

}  // namespace tfpca

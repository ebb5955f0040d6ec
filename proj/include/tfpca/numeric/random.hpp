#pragma once

// Seeded random streams and the truncated multivariate normal Gibbs sampler.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include <Eigen/Dense>

#include "tfpca/errors.hpp"
#include "tfpca/numeric/linalg.hpp"
#include "tfpca/numeric/normal.hpp"

namespace tfpca {

/// mt19937_64 with library-defined uniform/normal transforms, so draws are
/// identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform on the open interval (0, 1).
    double uniform() {
        double u;
        do {
            u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        } while (u == 0.0);
        return u;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// SplitMix64 finalizer; derives decorrelated child seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// One draw of N(mean, sd²) restricted to [lower, upper] by inverse CDF,
/// working in whichever tail keeps the probabilities representable.
/// Returns false when the interval carries no representable mass; `out` is
/// then the bound nearest the mean.
inline bool draw_truncated_normal(Rng& rng, double mean, double sd, double lower, double upper, double& out) {
    const double alpha = (lower - mean) / sd;
    const double beta = (upper - mean) / sd;
    double z;
    if (alpha > 0.0) {
        const double qa = normal_sf(alpha), qb = normal_sf(beta);
        if (qa - qb < kProbabilityFloor) {
            out = lower;
            return false;
        }
        const double q = qb + rng.uniform() * (qa - qb);
        z = normal_upper_quantile(q);
    } else if (beta < 0.0) {
        const double pa = normal_cdf(alpha), pb = normal_cdf(beta);
        if (pb - pa < kProbabilityFloor) {
            out = upper;
            return false;
        }
        const double p = pa + rng.uniform() * (pb - pa);
        z = normal_quantile(p);
    } else {
        const double pa = normal_cdf(alpha), pb = normal_cdf(beta);
        const double p = pa + rng.uniform() * (pb - pa);
        z = (p <= 0.0 || p >= 1.0) ? 0.0 : normal_quantile(p);
    }
    out = std::clamp(mean + sd * std::clamp(z, alpha, beta), lower, upper);
    return true;
}

struct GibbsOptions {
    int burn_in = 50;
    int thin = 1;
};

/// Draws from N(mean, cov) restricted to the box [lower, upper] by Gibbs
/// sampling over coordinates. Row r of the result is sample r.
inline MatrixXd sample_truncated_mvn(const VectorXd& mean, const MatrixXd& cov, const VectorXd& lower,
                                     const VectorXd& upper, int m, std::uint64_t seed,
                                     const GibbsOptions& opts = {}) {
    const auto d = mean.size();
    if (cov.rows() != d || cov.cols() != d || lower.size() != d || upper.size() != d)
        throw DomainError("sample_truncated_mvn: dimension mismatch");
    if (m < 1) throw DomainError("sample_truncated_mvn: m must be at least 1");
    for (Eigen::Index j = 0; j < d; ++j)
        if (!(lower(j) < upper(j))) throw DomainError("sample_truncated_mvn: lower must be below upper");
    if (opts.burn_in < 0 || opts.thin < 1) throw DomainError("sample_truncated_mvn: invalid Gibbs options");

    MatrixXd samples(m, d);
    if (d == 0) return samples;

    // Full conditionals from the precision matrix; a tiny ridge keeps
    // rank-deficient covariances invertible.
    MatrixXd reg = symmetrize(cov);
    const double ridge = 1e-10 * std::max(1.0, reg.diagonal().cwiseAbs().maxCoeff());
    reg.diagonal().array() += ridge;
    Eigen::LDLT<MatrixXd> ldlt(reg);
    if (ldlt.info() != Eigen::Success) throw DomainError("sample_truncated_mvn: covariance is not PSD");
    const MatrixXd precision = ldlt.solve(MatrixXd::Identity(d, d));
    VectorXd cond_sd(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        if (!(precision(j, j) > 0.0)) throw DomainError("sample_truncated_mvn: covariance is not PSD");
        cond_sd(j) = 1.0 / std::sqrt(precision(j, j));
    }

    Rng rng(seed);
    VectorXd x(d);
    for (Eigen::Index j = 0; j < d; ++j) x(j) = std::clamp(mean(j), lower(j), upper(j));
    VectorXd centered = x - mean;

    auto sweep = [&](bool first) {
        bool any_mass = false;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double offdiag = precision.row(j).dot(centered) - precision(j, j) * centered(j);
            const double cmean = mean(j) - offdiag / precision(j, j);
            double v;
            any_mass |= draw_truncated_normal(rng, cmean, cond_sd(j), lower(j), upper(j), v);
            x(j) = v;
            centered(j) = v - mean(j);
        }
        if (first && !any_mass)
            throw DegenerateRegionError("sample_truncated_mvn: truncation region has numerically zero probability");
    };

    for (int s = 0; s < opts.burn_in; ++s) sweep(s == 0);
    for (int r = 0; r < m; ++r) {
        for (int t = 0; t < opts.thin; ++t) sweep(opts.burn_in == 0 && r == 0 && t == 0);
        samples.row(r) = x.transpose();
    }
    return samples;
}

}  // namespace tfpca

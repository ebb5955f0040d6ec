#pragma once

// Simulation engine: the five covariance cases, the three estimation
// methods (truncation-aware, naive, PACE-style), replicate metrics and the
// Monte Carlo driver.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "tfpca/covariance.hpp"
#include "tfpca/dataset.hpp"
#include "tfpca/errors.hpp"
#include "tfpca/gflm.hpp"
#include "tfpca/mean_variance.hpp"
#include "tfpca/numeric/linalg.hpp"
#include "tfpca/numeric/random.hpp"
#include "tfpca/pace.hpp"
#include "tfpca/scores.hpp"

namespace tfpca {

struct SimCase {
    int case_id = 1;
    int n = 100;
    int g = 15;
    Bounds bounds{-1.0, 1.0};
    std::uint64_t seed = 1;
    /// Seed of the random eigenvectors completing the Case 5 basis; fixed so
    /// that all replicates share one truth.
    std::uint64_t basis_seed = 5;

    void validate() const {
        if (case_id < 1 || case_id > 5) throw DomainError("SimCase: case_id must be in 1..5");
        if (g < 3) throw DomainError("SimCase: g must be at least 3");
        if (n < 2) throw DomainError("SimCase: n must be at least 2");
        if (!bounds.valid()) throw DomainError("SimCase: bounds must satisfy a < b");
    }
};

struct SimTruth {
    std::vector<double> grid;
    VectorXd mu;
    MatrixXd sigma;
    VectorXd noise;
    EigenSystem eigen;
    MatrixXd latent;  ///< n × g, Z_i on the full grid
    MatrixXd scores;  ///< n × g, ξ_{i,k} by quadrature against the true eigenfunctions
    VectorXd signal;  ///< ∫(Z_i − μ)β with β ≡ 1
    VectorXd y_identity;
    VectorXd y_logit;

    VectorXd snr() const { return noise.cwiseQuotient(sigma.diagonal() + noise); }
};

namespace detail {

inline MatrixXd ar1(int g, double psi, double rho) {
    MatrixXd m(g, g);
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j) m(i, j) = psi * std::pow(rho, std::abs(i - j));
    return m;
}

}  // namespace detail

/// Σ, σ² and μ on the grid for one case.
inline void case_structure(const SimCase& cfg, const std::vector<double>& grid, VectorXd& mu, MatrixXd& sigma,
                           VectorXd& noise) {
    const int g = cfg.g;
    mu.resize(g);
    for (int i = 0; i < g; ++i) mu(i) = std::sin(2.0 * std::numbers::pi * grid[static_cast<std::size_t>(i)]);
    noise = VectorXd::Constant(g, 0.05);
    switch (cfg.case_id) {
        case 1:
            sigma = 0.5 * MatrixXd::Identity(g, g);
            break;
        case 2:
            sigma = detail::ar1(g, 0.5, 0.9);
            break;
        case 3: {
            sigma = MatrixXd::Zero(g, g);
            const double rhos[3] = {0.5, 0.7, 0.9};
            const int block = g / 3;
            for (int b = 0; b < 3; ++b) {
                const int start = b * block;
                const int size = b == 2 ? g - start : block;
                sigma.block(start, start, size, size) = detail::ar1(size, 0.5, rhos[b]);
            }
            break;
        }
        case 4:
            sigma = detail::ar1(g, 0.5, 0.9);
            for (int i = 0; i < g; ++i) {
                if (mu(i) < -0.5) noise(i) *= 2.0;
                else if (mu(i) > 0.5) noise(i) *= 0.5;
            }
            break;
        case 5: {
            // Basis orthonormal under trapezoid quadrature: the two named
            // eigenfunctions, completed by QR of seeded random vectors.
            const VectorXd w = trapezoid_weights(grid);
            const VectorXd sw = w.cwiseSqrt();
            MatrixXd basis(g, g);
            for (int i = 0; i < g; ++i) {
                const double t = grid[static_cast<std::size_t>(i)];
                basis(i, 0) = -std::numbers::sqrt2 * std::cos(std::numbers::pi * t);
                basis(i, 1) = -std::numbers::sqrt2 * std::sin(std::numbers::pi * t);
            }
            Rng rng(cfg.basis_seed);
            for (int k = 2; k < g; ++k)
                for (int i = 0; i < g; ++i) basis(i, k) = rng.normal();
            MatrixXd scaled = sw.asDiagonal() * basis;
            Eigen::HouseholderQR<MatrixXd> qr(scaled);
            MatrixXd q = qr.householderQ();
            MatrixXd phi = sw.cwiseInverse().asDiagonal() * q;
            // Keep the named functions exactly (QR may flip signs).
            for (int k = 0; k < 2; ++k)
                if (phi.col(k).dot(basis.col(k)) < 0) phi.col(k) = -phi.col(k);
            VectorXd lambda(g);
            for (int k = 0; k < g; ++k) lambda(k) = 1.0 / (14.0 * (k + 1.0) * (k + 1.0));
            sigma = symmetrize(phi * lambda.asDiagonal() * phi.transpose());
            break;
        }
        default:
            throw DomainError("case_structure: unknown case");
    }
}

/// One simulated dataset with its truth. Every unit observes N_i ~ U{5..g}
/// distinct gridpoints drawn without replacement; the latent curve is drawn
/// on the full grid and measured with independent noise, then truncated.
inline std::pair<FunctionalDataset, SimTruth> generate_case(const SimCase& cfg) {
    cfg.validate();
    SimTruth truth;
    truth.grid = uniform_grid(static_cast<std::size_t>(cfg.g));
    case_structure(cfg, truth.grid, truth.mu, truth.sigma, truth.noise);
    if (min_eigenvalue(truth.sigma) < -kPsdTolerance) throw PsdError("generate_case: case covariance not PSD");
    truth.eigen = eigen_decompose_psd(truth.sigma, truth.grid);

    const int g = cfg.g, n = cfg.n;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(truth.sigma);
    const MatrixXd root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    const VectorXd w = trapezoid_weights(truth.grid);
    const int lo_count = std::min(5, g);

    Rng rng(cfg.seed);
    FunctionalDataset ds;
    ds.bounds = cfg.bounds;
    truth.latent.resize(n, g);
    std::vector<int> idx(static_cast<std::size_t>(g));
    for (int i = 0; i < n; ++i) {
        VectorXd z(g);
        for (int j = 0; j < g; ++j) z(j) = rng.normal();
        truth.latent.row(i) = (truth.mu + root * z).transpose();
        const int count = lo_count + static_cast<int>(rng.below(static_cast<std::uint64_t>(g - lo_count + 1)));
        std::iota(idx.begin(), idx.end(), 0);
        for (int j = 0; j < count; ++j)
            std::swap(idx[static_cast<std::size_t>(j)],
                      idx[static_cast<std::size_t>(j) + rng.below(static_cast<std::uint64_t>(g - j))]);
        std::sort(idx.begin(), idx.begin() + count);
        Trajectory tr;
        tr.unit_id = "u" + std::to_string(i + 1);
        for (int j = 0; j < count; ++j) {
            const int q = idx[static_cast<std::size_t>(j)];
            const double v = truth.latent(i, q) + std::sqrt(truth.noise(q)) * rng.normal();
            tr.points.push_back({truth.grid[static_cast<std::size_t>(q)], v, Flag::none});
        }
        ds.trajectories.push_back(apply_truncation(tr, cfg.bounds));
    }

    const MatrixXd centered = truth.latent.rowwise() - truth.mu.transpose();
    truth.scores = centered * w.asDiagonal() * truth.eigen.eigenvectors;
    truth.signal = centered * w;
    Rng noise_rng(mix_seed(cfg.seed, 0x600D));
    truth.y_identity.resize(n);
    truth.y_logit.resize(n);
    for (int i = 0; i < n; ++i) {
        truth.y_identity(i) = truth.signal(i) + noise_rng.normal();
        truth.y_logit(i) = truth.signal(i) > 0.0 ? 1.0 : 0.0;
    }
    ds.outcomes = truth.y_identity;
    return {std::move(ds), std::move(truth)};
}

enum class MethodId { proposed, naive, pace };

inline std::string to_string(MethodId m) {
    switch (m) {
        case MethodId::proposed: return "proposed";
        case MethodId::naive: return "naive";
        case MethodId::pace: return "pace";
    }
    return "?";
}

inline MethodId parse_method(const std::string& s) {
    if (s == "proposed") return MethodId::proposed;
    if (s == "naive") return MethodId::naive;
    if (s == "pace") return MethodId::pace;
    throw DomainError("unknown method '" + s + "' (expected proposed, naive or pace)");
}

struct MethodOptions {
    std::vector<double> mean_bandwidths;  ///< empty → default candidates on the grid
    /// Covariance bandwidth candidates as multiples of the stage-1 bandwidth.
    std::vector<double> cov_bandwidth_factors{1.0};
    PgdConfig pgd;
    ScoreOptions scores;
    double fve_threshold = 0.95;
    bool compute_scores = true;
};

struct MethodResult {
    MeanVarianceEstimate mv;
    CovarianceModel cov;
    std::optional<ScoreSet> scores;
    int K = 0;
};

/// Scores of `ds` under an already fitted method.
inline ScoreSet method_scores(MethodId method, const FunctionalDataset& ds, const MeanVarianceEstimate& mv,
                              const CovarianceModel& cov, int K, const ScoreOptions& opts) {
    if (method == MethodId::proposed) return predict_scores_mc(ds, cov, mv, K, opts);
    // Truncation-unaware methods treat recorded values as exact.
    return predict_scores_mc(ds.without_truncation(), cov, mv, K, opts);
}

inline MethodResult run_method(MethodId method, const FunctionalDataset& ds, const std::vector<double>& grid,
                               const MethodOptions& opts = {}) {
    MethodResult res;
    std::vector<double> cands = opts.mean_bandwidths;
    if (cands.empty()) cands = default_bandwidth_candidates(grid);

    if (method == MethodId::pace) {
        const auto flat = ds.without_truncation();
        const auto mean = pace_mean(flat, grid, cands);
        const auto pc = pace_covariance(flat, grid, mean.mu, mean.bandwidth, cands);
        res.mv.grid = grid;
        res.mv.mu_hat = mean.mu;
        res.mv.bandwidth = mean.bandwidth;
        res.cov.grid = grid;
        res.cov.sigma = pc.sigma;
        res.cov.noise_var = pc.noise_var;
        res.cov.sigma_tilde = pc.sigma;
        res.cov.sigma_tilde.diagonal() += pc.noise_var;
        res.mv.sigma_tilde_sq_hat = res.cov.sigma_tilde.diagonal();
        res.cov.bandwidth = pc.bandwidth;
        res.cov.bandwidth_table = pc.cv_table;
        res.cov.converged = true;
        res.cov.eigen = eigen_decompose_psd(res.cov.sigma, grid);
    } else {
        const FunctionalDataset& use = ds;
        const FunctionalDataset flat = method == MethodId::naive ? ds.without_truncation() : FunctionalDataset{};
        const FunctionalDataset& data = method == MethodId::naive ? flat : use;
        const auto sel = select_mean_bandwidth(data, cands, grid);
        res.mv = fit_mean_variance_curve(data, grid, KernelSpec{sel.bandwidth});
        std::vector<double> cov_cands;
        for (double f : opts.cov_bandwidth_factors) cov_cands.push_back(f * sel.bandwidth);
        if (cov_cands.size() == 1)
            res.cov = build_covariance_model(data, res.mv, grid, KernelSpec{cov_cands.front()}, opts.pgd);
        else
            res.cov = build_covariance_model(data, res.mv, grid, std::span<const double>(cov_cands), opts.pgd);
    }

    if (opts.compute_scores) {
        res.K = std::min(select_K_fve(res.cov.eigen, opts.fve_threshold),
                         static_cast<int>(res.cov.eigen.positive_count()));
        res.scores = method_scores(method, ds, res.mv, res.cov, res.K, opts.scores);
    }
    return res;
}

struct SurfaceMetrics {
    double mean_sse = 0.0;
    double cov_sse = 0.0;
    double noise_sse = 0.0;
    double snr_sse = 0.0;
    double eigen_alignment = 0.0;  ///< |⟨φ̂₁, φ₁⟩| under trapezoid quadrature
};

inline SurfaceMetrics surface_metrics(const MeanVarianceEstimate& mv, const CovarianceModel& cov,
                                      const SimTruth& truth) {
    SurfaceMetrics m;
    const auto g = truth.mu.size();
    VectorXd mu_hat(g);
    for (Eigen::Index i = 0; i < g; ++i) mu_hat(i) = mv.mu_at(truth.grid[static_cast<std::size_t>(i)]);
    m.mean_sse = (mu_hat - truth.mu).squaredNorm();
    m.cov_sse = (cov.sigma - truth.sigma).squaredNorm();
    m.noise_sse = (cov.noise_var - truth.noise).squaredNorm();
    m.snr_sse = (cov.snr() - truth.snr()).squaredNorm();
    const VectorXd w = trapezoid_weights(truth.grid);
    m.eigen_alignment = std::abs(cov.eigen.eigenvectors.col(0).cwiseProduct(w).dot(truth.eigen.eigenvectors.col(0)));
    return m;
}

enum class Scenario { surfaces, gflm };

struct ExperimentConfig {
    int case_id = 1;
    int replicates = 100;
    int n = 100;
    int g = 15;
    std::uint64_t seed = 1;
    std::vector<MethodId> methods{MethodId::proposed, MethodId::naive, MethodId::pace};
    Scenario scenario = Scenario::surfaces;
    MethodOptions method;
    int threads = 1;
};

struct ReplicateRecord {
    int replicate = 0;
    MethodId method = MethodId::proposed;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    SurfaceMetrics surface;
    int K = 0;
    double mse_heldout = 0.0, mse_insample = 0.0;
    double acc_heldout = 0.0, acc_insample = 0.0;
};

struct MetricSummary {
    MethodId method;
    std::string metric;
    double mean = 0.0;
    double se = 0.0;
    int count = 0;
    int failures = 0;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<ReplicateRecord> records;
    std::vector<MetricSummary> summary;

    const MetricSummary& find(MethodId m, const std::string& metric) const {
        for (const auto& s : summary)
            if (s.method == m && s.metric == metric) return s;
        throw LookupError("ExperimentResult: no summary for " + to_string(m) + "/" + metric);
    }
};

inline std::vector<std::string> metric_names(Scenario s) {
    if (s == Scenario::surfaces) return {"mean_sse", "cov_sse", "noise_sse", "snr_sse", "eigen_alignment"};
    return {"mse_heldout", "mse_insample", "acc_heldout", "acc_insample", "K"};
}

inline double metric_value(const ReplicateRecord& r, const std::string& name) {
    if (name == "mean_sse") return r.surface.mean_sse;
    if (name == "cov_sse") return r.surface.cov_sse;
    if (name == "noise_sse") return r.surface.noise_sse;
    if (name == "snr_sse") return r.surface.snr_sse;
    if (name == "eigen_alignment") return r.surface.eigen_alignment;
    if (name == "mse_heldout") return r.mse_heldout;
    if (name == "mse_insample") return r.mse_insample;
    if (name == "acc_heldout") return r.acc_heldout;
    if (name == "acc_insample") return r.acc_insample;
    if (name == "K") return r.K;
    throw LookupError("metric_value: unknown metric '" + name + "'");
}

/// Seed of replicate r of a case; the test set and the score sampler use
/// further derived streams.
inline std::uint64_t replicate_seed(std::uint64_t seed, int case_id, int r) {
    return mix_seed(seed, static_cast<std::uint64_t>(case_id) * 100000ULL + static_cast<std::uint64_t>(r));
}

inline ReplicateRecord run_replicate(const ExperimentConfig& cfg, MethodId method, int r) {
    ReplicateRecord rec;
    rec.replicate = r;
    rec.method = method;
    rec.seed = replicate_seed(cfg.seed, cfg.case_id, r);
    try {
        SimCase sc;
        sc.case_id = cfg.case_id;
        sc.n = cfg.n;
        sc.g = cfg.g;
        sc.seed = rec.seed;
        auto [ds, truth] = generate_case(sc);
        MethodOptions mo = cfg.method;
        mo.pgd.seed = mix_seed(rec.seed, 3);
        mo.scores.seed = mix_seed(rec.seed, 2);
        mo.compute_scores = cfg.scenario == Scenario::gflm;
        auto res = run_method(method, ds, truth.grid, mo);
        rec.surface = surface_metrics(res.mv, res.cov, truth);
        if (cfg.scenario == Scenario::gflm) {
            SimCase test_case = sc;
            test_case.seed = mix_seed(rec.seed, 1);
            auto [test_ds, test_truth] = generate_case(test_case);
            ScoreOptions so = mo.scores;
            so.seed = mix_seed(rec.seed, 4);
            const auto test_scores = method_scores(method, test_ds, res.mv, res.cov, res.K, so);
            rec.K = res.K;
            const auto& train_scores = *res.scores;

            const auto fit_id = fit_gflm(train_scores, std::nullopt, truth.y_identity, Link::identity, res.K);
            rec.mse_insample = (predict_gflm(fit_id, train_scores, std::nullopt) - truth.y_identity).squaredNorm() /
                               static_cast<double>(cfg.n);
            rec.mse_heldout = (predict_gflm(fit_id, test_scores, std::nullopt) - test_truth.y_identity).squaredNorm() /
                              static_cast<double>(cfg.n);

            const auto fit_lg = fit_gflm(train_scores, std::nullopt, truth.y_logit, Link::logit, res.K);
            auto accuracy = [&](const ScoreSet& s, const VectorXd& y) {
                const VectorXd lab = classify(predict_gflm(fit_lg, s, std::nullopt));
                return (lab.array() == y.array()).cast<double>().mean();
            };
            rec.acc_insample = accuracy(train_scores, truth.y_logit);
            rec.acc_heldout = accuracy(test_scores, test_truth.y_logit);
        }
        rec.ok = true;
    } catch (const Error& e) {
        rec.ok = false;
        rec.error = e.what();
    }
    return rec;
}

inline std::vector<MetricSummary> summarize(const std::vector<ReplicateRecord>& records,
                                            const std::vector<MethodId>& methods, Scenario scenario) {
    std::vector<MetricSummary> out;
    for (MethodId m : methods)
        for (const auto& name : metric_names(scenario)) {
            MetricSummary s{m, name};
            double sum = 0.0, sum2 = 0.0;
            for (const auto& r : records) {
                if (r.method != m) continue;
                if (!r.ok) {
                    ++s.failures;
                    continue;
                }
                const double v = metric_value(r, name);
                sum += v;
                sum2 += v * v;
                ++s.count;
            }
            if (s.count > 0) {
                s.mean = sum / s.count;
                const double var = s.count > 1 ? std::max(0.0, (sum2 - s.count * s.mean * s.mean) / (s.count - 1)) : 0.0;
                s.se = std::sqrt(var / s.count);
            }
            out.push_back(s);
        }
    return out;
}

/// Runs every (replicate, method) pair, in parallel across `threads`
/// workers; records are ordered by replicate then method regardless of
/// scheduling.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    if (cfg.replicates < 1) throw DomainError("run_experiment: replicates must be at least 1");
    if (cfg.methods.empty()) throw DomainError("run_experiment: no methods");
    SimCase probe;
    probe.case_id = cfg.case_id, probe.n = cfg.n, probe.g = cfg.g;
    probe.validate();

    ExperimentResult res;
    res.config = cfg;
    const std::size_t jobs = static_cast<std::size_t>(cfg.replicates) * cfg.methods.size();
    res.records.resize(jobs);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t j = next++; j < jobs; j = next++) {
            const int r = static_cast<int>(j / cfg.methods.size());
            res.records[j] = run_replicate(cfg, cfg.methods[j % cfg.methods.size()], r);
        }
    };
    const int threads = std::max(1, std::min<int>(cfg.threads, static_cast<int>(jobs)));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    res.summary = summarize(res.records, cfg.methods, cfg.scenario);
    return res;
}

}  // namespace tfpca

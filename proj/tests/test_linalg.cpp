#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "tfpca/numeric/linalg.hpp"
#include "tfpca/numeric/random.hpp"

using namespace tfpca;

namespace {

MatrixXd random_symmetric(int d, Rng& rng) {
    MatrixXd m(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
    return symmetrize(m);
}

}  // namespace

TEST(ConditionalGaussian, IndependentBlocks) {
    GaussianPartition p;
    p.mu1 = Eigen::Vector2d(1, 2);
    p.mu2 = Eigen::Vector2d(-1, 0);
    p.s11 = Eigen::Matrix2d{{2, 0.5}, {0.5, 1}};
    p.s12 = MatrixXd::Zero(2, 2);
    p.s22 = Eigen::Matrix2d::Identity();
    const auto c = conditional_gaussian(p, Eigen::Vector2d(3, 4));
    EXPECT_TRUE(c.mean.isApprox(p.mu1));
    EXPECT_TRUE(c.cov.isApprox(p.s11));
}

TEST(ConditionalGaussian, HandEvaluation) {
    GaussianPartition p;
    p.mu1 = VectorXd::Zero(1);
    p.mu2 = VectorXd::Zero(1);
    p.s11 = MatrixXd::Constant(1, 1, 1.0);
    p.s12 = MatrixXd::Constant(1, 1, 0.9);
    p.s22 = MatrixXd::Constant(1, 1, 1.0);
    const auto c = conditional_gaussian(p, VectorXd::Constant(1, 1.0));
    EXPECT_NEAR(c.mean(0), 0.9, 1e-14);
    EXPECT_NEAR(c.cov(0, 0), 0.19, 1e-14);
}

TEST(ConditionalGaussian, AtMeanGivesPriorMean) {
    GaussianPartition p;
    p.mu1 = Eigen::Vector2d(0.3, -0.7);
    p.mu2 = Eigen::Vector2d(1, 2);
    p.s11 = Eigen::Matrix2d{{1, 0.2}, {0.2, 1}};
    p.s12 = Eigen::Matrix2d{{0.3, 0.1}, {0.0, 0.4}};
    p.s22 = Eigen::Matrix2d{{1, 0.3}, {0.3, 2}};
    const auto c = conditional_gaussian(p, p.mu2);
    EXPECT_TRUE(c.mean.isApprox(p.mu1, 1e-14));
}

TEST(ConditionalGaussian, SingularBlockRaises) {
    GaussianPartition p;
    p.mu1 = VectorXd::Zero(1);
    p.mu2 = VectorXd::Zero(2);
    p.s11 = MatrixXd::Identity(1, 1);
    p.s12 = MatrixXd::Zero(1, 2);
    p.s22 = MatrixXd::Ones(2, 2);
    EXPECT_THROW(conditional_gaussian(p, VectorXd::Zero(2)), ConditioningError);
}

TEST(NearestPsd, PsdInputUnchanged) {
    const Eigen::Matrix2d m{{2, 0.5}, {0.5, 1}};
    EXPECT_EQ((nearest_psd(m, true) - m).norm(), 0.0);
    EXPECT_EQ((nearest_psd(m, false) - m).norm(), 0.0);
}

TEST(NearestPsd, UnitDiagonalOracle) {
    const Eigen::Matrix2d m{{1, 1.5}, {1.5, 1}};
    const MatrixXd out = nearest_psd(m, true);
    // Brute force over the single free off-diagonal entry.
    double best_c = 0, best_d = 1e300;
    for (int i = -10000; i <= 10000; ++i) {
        const double c = i * 1e-4;
        const Eigen::Matrix2d cand{{1, c}, {c, 1}};
        if (min_eigenvalue(cand) < -1e-12) continue;
        const double d = (cand - m).norm();
        if (d < best_d) best_d = d, best_c = c;
    }
    EXPECT_NEAR(out(0, 1), best_c, 1e-4);
    EXPECT_NEAR(out(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(out(1, 1), 1.0, 1e-12);
}

TEST(NearestPsd, OutputAlwaysPsd) {
    Rng rng(11);
    for (int rep = 0; rep < 30; ++rep) {
        const int d = 2 + static_cast<int>(rng.below(7));
        MatrixXd m = random_symmetric(d, rng);
        m.diagonal() = m.diagonal().cwiseAbs().array() + 0.1;
        EXPECT_GE(min_eigenvalue(nearest_psd(m, false)), -1e-10);
        const MatrixXd fixed = nearest_psd(m, true);
        EXPECT_GE(min_eigenvalue(fixed), -1e-10);
        EXPECT_LT((fixed.diagonal() - m.diagonal()).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(NearestPsd, RejectsAsymmetric) {
    const Eigen::Matrix2d m{{1, 0.3}, {0.2, 1}};
    EXPECT_THROW(nearest_psd(m, true), DomainError);
}

TEST(EigenDecompose, ScaledIdentity) {
    const auto grid = uniform_grid(11);
    const double c = 0.7;
    const auto e = eigen_decompose_psd(c * MatrixXd::Identity(11, 11), grid);
    const VectorXd w = trapezoid_weights(grid);
    // Operator c·I under weights w has eigenvalues c·w_g.
    std::vector<double> expected(w.data(), w.data() + w.size());
    std::sort(expected.rbegin(), expected.rend());
    for (int k = 0; k < 11; ++k) EXPECT_NEAR(e.eigenvalues(k), c * expected[static_cast<std::size_t>(k)], 1e-12);
    const MatrixXd gram = e.eigenvectors.transpose() * w.asDiagonal() * e.eigenvectors;
    EXPECT_LT((gram - MatrixXd::Identity(11, 11)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(EigenDecompose, RoundTripLeadingFunction) {
    const auto grid = uniform_grid(15);
    VectorXd phi(15);
    for (int i = 0; i < 15; ++i) phi(i) = -std::numbers::sqrt2 * std::cos(std::numbers::pi * grid[static_cast<std::size_t>(i)]);
    const VectorXd w = trapezoid_weights(grid);
    phi /= std::sqrt(phi.cwiseProduct(w).dot(phi));
    MatrixXd sigma = (1.0 / 14.0) * phi * phi.transpose();
    VectorXd phi2(15);
    for (int i = 0; i < 15; ++i) phi2(i) = std::numbers::sqrt2 * std::sin(std::numbers::pi * grid[static_cast<std::size_t>(i)]);
    phi2 -= phi2.cwiseProduct(w).dot(phi) * phi;
    phi2 /= std::sqrt(phi2.cwiseProduct(w).dot(phi2));
    sigma += (1.0 / 56.0) * phi2 * phi2.transpose();
    const auto e = eigen_decompose_psd(sigma, grid);
    EXPECT_GT(std::abs(e.eigenvectors.col(0).cwiseProduct(w).dot(phi)), 0.99);
    EXPECT_NEAR(e.eigenvalues(0), 1.0 / 14.0, 1e-12);
}

TEST(EigenDecompose, Invariants) {
    Rng rng(5);
    const auto grid = uniform_grid(9);
    for (int rep = 0; rep < 20; ++rep) {
        MatrixXd a(9, 4);
        for (int i = 0; i < 9; ++i)
            for (int j = 0; j < 4; ++j) a(i, j) = rng.normal();
        const MatrixXd m = a * a.transpose();
        const auto e = eigen_decompose_psd(m, grid);
        const VectorXd w = e.quad_weights;
        for (int k = 1; k < 9; ++k) EXPECT_GE(e.eigenvalues(k - 1), e.eigenvalues(k));
        EXPECT_GE(e.eigenvalues.minCoeff(), 0.0);
        EXPECT_NEAR(e.eigenvalues.sum(), w.cwiseProduct(m.diagonal()).sum(), 1e-8);
        for (int k = 0; k < 4; ++k) {
            EXPECT_NEAR(e.eigenvectors.col(k).cwiseProduct(w).dot(e.eigenvectors.col(k)), 1.0, 1e-8);
            EXPECT_GE(w.dot(e.eigenvectors.col(k)), -1e-12);
        }
        EXPECT_NEAR(e.fve(8), 1.0, 1e-12);
    }
}

TEST(EigenDecompose, RejectsIndefinite) {
    const Eigen::Matrix2d m{{1, 2}, {2, 1}};
    EXPECT_THROW(eigen_decompose_psd(m, uniform_grid(2)), PsdError);
}

TEST(Trapezoid, WeightsSumToSpan) {
    const std::vector<double> grid{0.0, 0.1, 0.35, 1.0};
    EXPECT_NEAR(trapezoid_weights(grid).sum(), 1.0, 1e-15);
    EXPECT_EQ(trapezoid_weights(std::vector<double>{0.3})(0), 1.0);
}

TEST(Interpolate, LinearAndClamped) {
    const std::vector<double> grid{0.0, 0.5, 1.0};
    const VectorXd v = Eigen::Vector3d(1, 3, 2);
    EXPECT_DOUBLE_EQ(interpolate(grid, v, 0.25), 2.0);
    EXPECT_DOUBLE_EQ(interpolate(grid, v, -1.0), 1.0);
    EXPECT_DOUBLE_EQ(interpolate(grid, v, 2.0), 2.0);
    MatrixXd s(3, 3);
    s << 1, 2, 3, 4, 5, 6, 7, 8, 9;
    EXPECT_DOUBLE_EQ(interpolate2(grid, s, 0.5, 0.5), 5.0);
    EXPECT_DOUBLE_EQ(interpolate2(grid, s, 0.25, 0.75), 0.25 * (2 + 3 + 5 + 6));
}

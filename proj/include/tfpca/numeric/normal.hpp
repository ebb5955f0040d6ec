#pragma once

// Univariate and bivariate standard normal distribution functions.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/erf.hpp>

#include "tfpca/errors.hpp"

namespace tfpca {

/// Smallest probability handed to a logarithm by the likelihood code.
inline constexpr double kProbabilityFloor = 1e-300;

inline double log_floor(double p) { return std::log(std::max(p, kProbabilityFloor)); }

inline double normal_pdf(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014326779399460599343818684758586311649;
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double normal_logpdf(double x) {
    constexpr double log_sqrt_2pi = 0.91893853320467274178032973640561763986139747363778;
    return -0.5 * x * x - log_sqrt_2pi;
}

/// Φ(x). Accurate to full double precision in both tails.
inline double normal_cdf(double x) {
    if (std::isnan(x)) throw DomainError("normal_cdf: NaN argument");
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

/// 1 − Φ(x), computed without cancellation.
inline double normal_sf(double x) {
    if (std::isnan(x)) throw DomainError("normal_sf: NaN argument");
    return 0.5 * std::erfc(x / std::numbers::sqrt2);
}

/// Φ⁻¹(p) for p in (0, 1).
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw DomainError("normal_quantile: p outside (0,1)");
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

/// Q⁻¹(q) where Q = 1 − Φ; keeps precision for tiny upper-tail masses.
inline double normal_upper_quantile(double q) {
    if (!(q > 0.0 && q < 1.0)) throw DomainError("normal_upper_quantile: q outside (0,1)");
    return std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * q);
}

/// Standard bivariate normal density with correlation rho.
inline double bivariate_normal_pdf(double h, double k, double rho) {
    if (std::isinf(h) || std::isinf(k)) return 0.0;
    const double one_minus = (1.0 - rho) * (1.0 + rho);
    if (one_minus <= 0.0) return 0.0;
    const double q = (h * h - 2.0 * rho * h * k + k * k) / one_minus;
    return std::exp(-0.5 * q) / (2.0 * std::numbers::pi * std::sqrt(one_minus));
}

namespace detail {

// P(X > dh, Y > dk) for a standard bivariate normal with correlation r,
// following Genz's Gauss-Legendre reduction of the Drezner-Wesolowsky
// single-integral representation.
inline double bvn_upper(double dh, double dk, double r) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    if (dh == inf || dk == inf) return 0.0;
    if (dh == -inf) return dk == -inf ? 1.0 : normal_sf(dk);
    if (dk == -inf) return normal_sf(dh);
    if (r == 0.0) return normal_sf(dh) * normal_sf(dk);

    static constexpr std::array<double, 3> w6{0.1713244923791705, 0.3607615730481384, 0.4679139345726904};
    static constexpr std::array<double, 3> x6{0.9324695142031522, 0.6612093864662647, 0.2386191860831970};
    static constexpr std::array<double, 6> w12{0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                                               0.2031674267230659,  0.2334925365383547, 0.2491470458134029};
    static constexpr std::array<double, 6> x12{0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                                               0.5873179542866171, 0.3678314989981802, 0.1252334085114692};
    static constexpr std::array<double, 10> w20{0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                                                0.08327674157670475, 0.1019301198172404,  0.1181945319615184,
                                                0.1316886384491766,  0.1420961093183821,  0.1491729864726037,
                                                0.1527533871307259};
    static constexpr std::array<double, 10> x20{0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                                                0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                                                0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                                                0.07652652113349733};

    const double* w;
    const double* x;
    int lg;
    const double ar = std::abs(r);
    if (ar < 0.3) {
        w = w6.data(), x = x6.data(), lg = 3;
    } else if (ar < 0.75) {
        w = w12.data(), x = x12.data(), lg = 6;
    } else {
        w = w20.data(), x = x20.data(), lg = 10;
    }

    constexpr double tp = 2.0 * std::numbers::pi;
    double h = dh, k = dk, hk = h * k, bvn = 0.0;
    if (ar < 0.925) {
        const double hs = (h * h + k * k) / 2.0;
        const double asr = std::asin(r) / 2.0;
        for (int i = 0; i < lg; ++i) {
            for (double xi : {1.0 - x[i], 1.0 + x[i]}) {
                const double sn = std::sin(asr * xi);
                bvn += w[i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
            }
        }
        bvn = bvn * asr / tp + normal_sf(h) * normal_sf(k);
    } else {
        if (r < 0.0) {
            k = -k;
            hk = -hk;
        }
        if (ar < 1.0) {
            const double as = (1.0 - r) * (1.0 + r);
            double a = std::sqrt(as);
            const double bs = (h - k) * (h - k);
            double asr = -(bs / as + hk) / 2.0;
            const double c = (4.0 - hk) / 8.0;
            const double d = (12.0 - hk) / 80.0;
            if (asr > -100.0) bvn = a * std::exp(asr) * (1.0 - c * (bs - as) * (1.0 - d * bs) / 3.0 + c * d * as * as);
            if (hk > -100.0) {
                const double b = std::sqrt(bs);
                const double sp = std::sqrt(tp) * normal_cdf(-b / a);
                bvn -= std::exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0);
            }
            a /= 2.0;
            double acc = 0.0;
            for (int i = 0; i < lg; ++i) {
                for (double xi : {1.0 - x[i], 1.0 + x[i]}) {
                    const double xs = (a * xi) * (a * xi);
                    const double asr_i = -(bs / xs + hk) / 2.0;
                    if (asr_i <= -100.0) continue;
                    const double sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
                    const double rs = std::sqrt(1.0 - xs);
                    const double ep = std::exp(-(hk / 2.0) * xs / ((1.0 + rs) * (1.0 + rs))) / rs;
                    acc += w[i] * std::exp(asr_i) * (sp - ep);
                }
            }
            bvn = (a * acc - bvn) / tp;
        }
        if (r > 0.0) {
            bvn += normal_sf(std::max(h, k));
        } else if (h >= k) {
            bvn = -bvn;
        } else {
            const double l = h < 0.0 ? normal_cdf(k) - normal_cdf(h) : normal_sf(h) - normal_sf(k);
            bvn = l - bvn;
        }
    }
    return std::clamp(bvn, 0.0, 1.0);
}

}  // namespace detail

/// P(X ≤ h, Y ≤ k) for a standard bivariate normal with correlation rho.
inline double bivariate_normal_cdf(double h, double k, double rho) {
    if (std::isnan(h) || std::isnan(k) || std::isnan(rho)) throw DomainError("bivariate_normal_cdf: NaN argument");
    if (rho < -1.0 || rho > 1.0) throw DomainError("bivariate_normal_cdf: |rho| > 1");
    return detail::bvn_upper(-h, -k, rho);
}

}  // namespace tfpca

#pragma once

// Pure numeric kernels: windowed means, least-squares polynomial fits,
// monotonicity classification of fitted curves, differencing and the
// curvature-based smoothness score. Everything here is double precision and
// side-effect free.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "poshid/common.hpp"

namespace poshid {

// One activation value per position; position p is the index into the vector.
using Series = std::vector<double>;

inline void check_finite(const Series& s, const std::string& what) {
    require(!s.empty(), what + ": series must be non-empty");
    for (double v : s)
        require(std::isfinite(v), what + ": series contains a non-finite value");
}

// Trailing valid-mode window: output[i] = mean(input[i .. i+window-1]).
// Output length is n - window + 1. Each window is summed independently so
// long series do not accumulate running-sum drift.
inline Series sliding_mean(const Series& series, int window) {
    check_finite(series, "sliding_mean");
    const int n = static_cast<int>(series.size());
    require(window >= 1, "sliding_mean: window must be >= 1");
    require(window <= n, "sliding_mean: window exceeds series length");
    Series out(static_cast<size_t>(n - window + 1));
    for (int i = 0; i + window <= n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < window; ++j) acc += series[static_cast<size_t>(i + j)];
        out[static_cast<size_t>(i)] = acc / window;
    }
    return out;
}

// Least-squares cubic over positions 0..n-1. coeff[k] multiplies p^k.
struct CubicFit {
    std::array<double, 4> coeff{};  // constant .. cubic
    int domain_len = 0;             // number of positions the fit covers
    bool ill_conditioned = false;   // pivot ratio under 1e-12 during the solve

    double eval(double p) const {
        return coeff[0] + p * (coeff[1] + p * (coeff[2] + p * coeff[3]));
    }
    double derivative(double p) const {
        return coeff[1] + p * (2.0 * coeff[2] + p * 3.0 * coeff[3]);
    }
};

namespace detail {

// Gaussian elimination with partial pivoting on a small dense system.
// Returns true if any pivot fell below 1e-12 of the largest pivot seen.
inline bool solve_inplace(std::vector<std::vector<double>>& a, std::vector<double>& b) {
    const size_t m = b.size();
    bool warn = false;
    double max_pivot = 0.0;
    for (size_t col = 0; col < m; ++col) {
        size_t best = col;
        for (size_t r = col + 1; r < m; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[best][col])) best = r;
        std::swap(a[col], a[best]);
        std::swap(b[col], b[best]);
        const double pivot = a[col][col];
        if (pivot == 0.0) throw numerical_error("polynomial fit: singular normal equations");
        max_pivot = std::max(max_pivot, std::fabs(pivot));
        if (std::fabs(pivot) < 1e-12 * max_pivot) warn = true;
        for (size_t r = col + 1; r < m; ++r) {
            const double f = a[r][col] / pivot;
            if (f == 0.0) continue;
            for (size_t c = col; c < m; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    for (size_t col = m; col-- > 0;) {
        double acc = b[col];
        for (size_t c = col + 1; c < m; ++c) acc -= a[col][c] * b[c];
        b[col] = acc / a[col][col];
    }
    return warn;
}

}  // namespace detail

// Least-squares polynomial of the given degree over positions 0..n-1.
// Positions are internally rescaled to [0,1] before forming the normal
// equations (keeps the system well conditioned on long series), and the
// coefficients are mapped back to the raw position variable.
inline std::vector<double> polynomial_fit(const Series& series, int degree,
                                          bool* ill_conditioned = nullptr) {
    check_finite(series, "polynomial_fit");
    require(degree >= 0, "polynomial_fit: degree must be >= 0");
    const int n = static_cast<int>(series.size());
    require(n >= degree + 1, "polynomial_fit: need at least degree+1 points");

    const int m = degree + 1;
    const double scale = (n > 1) ? 1.0 / (n - 1) : 1.0;

    // moments sum(u^k) for k = 0..2*degree, u = p*scale
    std::vector<double> moments(static_cast<size_t>(2 * degree + 1), 0.0);
    std::vector<double> rhs(static_cast<size_t>(m), 0.0);
    for (int p = 0; p < n; ++p) {
        const double u = p * scale;
        double upow = 1.0;
        for (int k = 0; k <= 2 * degree; ++k) {
            moments[static_cast<size_t>(k)] += upow;
            if (k < m) rhs[static_cast<size_t>(k)] += upow * series[static_cast<size_t>(p)];
            upow *= u;
        }
    }
    std::vector<std::vector<double>> normal(static_cast<size_t>(m),
                                            std::vector<double>(static_cast<size_t>(m)));
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < m; ++c)
            normal[static_cast<size_t>(r)][static_cast<size_t>(c)] =
                moments[static_cast<size_t>(r + c)];

    const bool warn = detail::solve_inplace(normal, rhs);
    if (ill_conditioned) *ill_conditioned = warn;

    // undo the position rescale: coeff_raw[k] = coeff_scaled[k] * scale^k
    double s = 1.0;
    for (int k = 0; k < m; ++k) {
        rhs[static_cast<size_t>(k)] *= s;
        s *= scale;
    }
    return rhs;
}

inline CubicFit cubic_fit(const Series& series) {
    require(series.size() >= 4, "cubic_fit: need at least 4 points");
    CubicFit fit;
    std::vector<double> c = polynomial_fit(series, 3, &fit.ill_conditioned);
    for (int k = 0; k < 4; ++k) fit.coeff[static_cast<size_t>(k)] = c[static_cast<size_t>(k)];
    fit.domain_len = static_cast<int>(series.size());
    return fit;
}

enum class Monotonicity { increasing, decreasing, none };

inline const char* to_string(Monotonicity m) {
    switch (m) {
        case Monotonicity::increasing: return "increasing";
        case Monotonicity::decreasing: return "decreasing";
        default: return "none";
    }
}

// Sign of the fitted derivative checked at every integer position of the fit
// domain; strict inequalities, so a flat fit classifies as none.
inline Monotonicity fit_is_monotone(const CubicFit& fit) {
    bool all_pos = true;
    bool all_neg = true;
    for (int p = 0; p < fit.domain_len; ++p) {
        const double d = fit.derivative(static_cast<double>(p));
        if (d <= 0.0) all_pos = false;
        if (d >= 0.0) all_neg = false;
        if (!all_pos && !all_neg) return Monotonicity::none;
    }
    if (all_pos) return Monotonicity::increasing;
    if (all_neg) return Monotonicity::decreasing;
    return Monotonicity::none;
}

// out[i] = s[i+2] - 2 s[i+1] + s[i]
inline Series second_difference(const Series& series) {
    check_finite(series, "second_difference");
    const int n = static_cast<int>(series.size());
    require(n >= 3, "second_difference: need at least 3 points");
    Series out(static_cast<size_t>(n - 2));
    for (int i = 0; i + 2 < n; ++i)
        out[static_cast<size_t>(i)] = series[static_cast<size_t>(i + 2)] -
                                      2.0 * series[static_cast<size_t>(i + 1)] +
                                      series[static_cast<size_t>(i)];
    return out;
}

// Discrete curvature energy: sum of squared second differences. Affine parts
// of the series contribute nothing; smaller means smoother.
inline double smoothness_score(const Series& series) {
    const Series d2 = second_difference(series);
    double acc = 0.0;
    for (double v : d2) acc += v * v;
    return acc;
}

}  // namespace poshid

#pragma once

// Test-only reference computations. Nothing here calls into the library's
// numeric kernels; each routine is a direct transcription of a definition.

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat mul(const Mat& a, const Mat& b)
{
    Mat c = zeros(a.size(), b[0].size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b[0].size(); ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < b.size(); ++p) s += a[i][p] * b[p][j];
            c[i][j] = s;
        }
    return c;
}

inline Mat transpose(const Mat& a)
{
    Mat t = zeros(a[0].size(), a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
    return t;
}

// Eigenvalues of a symmetric matrix by the classical two-sided Jacobi method
// (largest off-diagonal pivot), returned in descending order.
inline std::vector<double> sym_eigenvalues(Mat a)
{
    const std::size_t n = a.size();
    for (int it = 0; it < 10000; ++it) {
        std::size_t p = 0, q = 1;
        double best = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                if (std::abs(a[i][j]) > best) {
                    best = std::abs(a[i][j]);
                    p = i;
                    q = j;
                }
        if (best < 1e-15) break;
        const double theta = 0.5 * std::atan2(2.0 * a[p][q], a[q][q] - a[p][p]);
        const double c = std::cos(theta), s = std::sin(theta);
        for (std::size_t k = 0; k < n; ++k) {
            const double akp = a[k][p], akq = a[k][q];
            a[k][p] = c * akp - s * akq;
            a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
            const double apk = a[p][k], aqk = a[q][k];
            a[p][k] = c * apk - s * aqk;
            a[q][k] = s * apk + c * aqk;
        }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
    std::sort(ev.begin(), ev.end(), std::greater<>());
    return ev;
}

// Singular values via eigenvalues of M^T M.
inline std::vector<double> singular_values(const Mat& m)
{
    auto ev = sym_eigenvalues(mul(transpose(m), m));
    for (auto& v : ev) v = std::sqrt(std::max(0.0, v));
    return ev;
}

// Scalar AdamW in the decoupled form: p <- p*(1 - lr*wd) - lr*mhat/(sqrt(vhat)+eps).
struct ScalarAdamW {
    double m = 0.0, v = 0.0;
    int t = 0;
    double step(double p, double g, double lr, double wd, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
    {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        p *= 1 - lr * wd;
        return p - lr * mh / (std::sqrt(vh) + eps);
    }
};

} // namespace oracle

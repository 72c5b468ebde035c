#pragma once

// Shared oracle helpers for the test suites. Everything here is written
// independently of the library internals it checks: finite differences for
// gradients, naive reference loops for linear algebra.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace testsupport {

// Central finite difference of a scalar function of a flat vector.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& x, double h = 1e-6) {
    std::vector<double> g(x.size());
    std::vector<double> p = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double up = f(p);
        p[i] = orig - h;
        const double down = f(p);
        p[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// Relative error with an absolute floor so near-zero entries do not blow up.
inline double rel_err(double a, double b, double floor = 1e-8) {
    const double scale = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / scale;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, rel_err(a[i], b[i], floor));
    return worst;
}

} // namespace testsupport

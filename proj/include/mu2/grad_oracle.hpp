// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle. Nothing in this header knows about any
// analytic backward pass: it sees a scalar function of named flat tensors and
// a claimed gradient, and reports how far apart they are.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mu2::grad {

using Vector = std::vector<double>;
using ScalarFn = std::function<double(const Vector&)>;

/// g[i] = (f(x0 + h e_i) - f(x0 - h e_i)) / (2h)
inline Vector central_difference(const ScalarFn& f, const Vector& x0, double h = 1e-5) {
    if (!(h > 0.0)) throw std::invalid_argument("central_difference: step must be positive");
    Vector g(x0.size());
    Vector x = x0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        x[i] = x0[i] + h;
        const double fp = f(x);
        x[i] = x0[i] - h;
        const double fm = f(x);
        x[i] = x0[i];
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("central_difference: non-finite function value at coordinate " + std::to_string(i));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

struct NamedTensor {
    std::string name;
    Vector values;
};

/// A differentiable scalar objective over several named tensors together
/// with a claimed gradient for each of them.
struct Problem {
    std::string op;
    std::vector<NamedTensor> point;
    std::function<double(const std::vector<Vector>&)> value;
    std::function<std::vector<Vector>(const std::vector<Vector>&)> gradient;
};

struct TensorError {
    std::string name;
    std::size_t size = 0;
    double max_relative_error = 0.0;
};

struct GradCheckReport {
    std::string op;
    std::vector<TensorError> tensors;
    double step = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    bool pass = false;

    double max_relative_error() const {
        double m = 0.0;
        for (const auto& t : tensors) m = std::max(m, t.max_relative_error);
        return m;
    }

    /// Names of tensors whose error exceeds the tolerance.
    std::vector<std::string> failing() const {
        std::vector<std::string> out;
        for (const auto& t : tensors)
            if (!(t.max_relative_error <= tolerance)) out.push_back(t.name);
        return out;
    }

    /// One line of JSON.
    std::string to_line() const {
        std::ostringstream os;
        os << std::setprecision(6);
        os << "{\"op\":\"" << op << "\",\"pass\":" << (pass ? "true" : "false") << ",\"step\":" << step
           << ",\"tolerance\":" << tolerance << ",\"seed\":" << seed << ",\"max_relative_error\":" << max_relative_error()
           << ",\"tensors\":{";
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            if (i) os << ',';
            os << '"' << tensors[i].name << "\":" << tensors[i].max_relative_error;
        }
        os << "}}";
        return os.str();
    }
};

/// Compares the claimed gradient of `p` against central differences, one
/// tensor at a time, all other tensors held at the base point.
inline GradCheckReport check(const Problem& p, double step, double tolerance, std::uint64_t seed,
                             double floor = 1e-7) {
    std::vector<Vector> base;
    base.reserve(p.point.size());
    for (const auto& t : p.point) base.push_back(t.values);
    const std::vector<Vector> analytic = p.gradient(base);
    if (analytic.size() != base.size()) throw std::runtime_error("check: gradient returned the wrong tensor count");

    GradCheckReport rep;
    rep.op = p.op;
    rep.step = step;
    rep.tolerance = tolerance;
    rep.seed = seed;
    std::vector<Vector> work = base;
    for (std::size_t t = 0; t < base.size(); ++t) {
        if (analytic[t].size() != base[t].size()) {
            throw std::runtime_error("check: gradient of " + p.point[t].name + " has the wrong size");
        }
        const ScalarFn slice = [&](const Vector& x) {
            work[t] = x;
            const double v = p.value(work);
            work[t] = base[t];
            return v;
        };
        const Vector numeric = central_difference(slice, base[t], step);
        TensorError te{p.point[t].name, base[t].size(), 0.0};
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            const double e = relative_error(analytic[t][i], numeric[i], floor);
            te.max_relative_error = std::max(te.max_relative_error, std::isnan(e) ? std::numeric_limits<double>::infinity() : e);
        }
        rep.tensors.push_back(te);
    }
    rep.pass = rep.failing().empty();
    return rep;
}

}  // namespace mu2::grad

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdtest {

using kdlab::Tensor;

inline Tensor random_tensor(kdlab::Shape shape, kdlab::Rng& rng, double scale = 1.0, bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) v = rng.uniform(-scale, scale);
    return t;
}

// Central finite difference of a scalar-valued function wrt one element.
inline double central_diff(const std::function<double()>& f, Tensor& x, std::size_t idx, double h = 1e-6) {
    const double orig = x(idx);
    x(idx) = orig + h;
    const double fp = f();
    x(idx) = orig - h;
    const double fm = f();
    x(idx) = orig;
    return (fp - fm) / (2.0 * h);
}

// Relative error with a unit floor, so near-zero gradients are compared
// absolutely.
inline double rel_error(double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

struct GradCheckResult {
    bool ok = true;
    double worst = 0.0;
    std::string detail;
};

// Checks the accumulated analytic gradient of every listed parameter against
// central finite differences of `loss_fn` (which must rebuild the graph from
// scratch on every call and return the loss value).
inline GradCheckResult check_gradients(const std::function<double()>& loss_fn, std::vector<Tensor> params,
                                       const std::function<void()>& backward_once, double tol = 1e-4,
                                       double h = 1e-6) {
    for (Tensor& p : params) p.zero_grad();
    backward_once();
    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
            const double numeric = central_diff(loss_fn, p, i, h);
            const double err = rel_error(analytic, numeric);
            if (err > res.worst) {
                res.worst = err;
                res.detail = "param " + std::to_string(pi) + " elem " + std::to_string(i) + ": analytic " +
                             std::to_string(analytic) + " vs numeric " + std::to_string(numeric);
            }
        }
    }
    res.ok = res.worst < tol;
    return res;
}

// Random orthogonal d x d matrix via Gram-Schmidt on a random square matrix.
inline Tensor random_orthogonal(std::size_t d, kdlab::Rng& rng) {
    Tensor w = Tensor::zeros({d, d});
    for (double& v : w.values()) v = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t p = 0; p < i; ++p) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += w(i, j) * w(p, j);
            for (std::size_t j = 0; j < d; ++j) w(i, j) -= dot * w(p, j);
        }
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += w(i, j) * w(i, j);
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < d; ++j) w(i, j) /= norm;
    }
    return w;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a(i) - b(i)));
    return worst;
}

} // namespace kdtest

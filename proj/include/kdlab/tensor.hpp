#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/rng.hpp"

namespace kdlab {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major tensor of 64-bit floats. Copying a Tensor copies the
// handle; both handles see the same storage and gradient.
class Tensor {
    struct Storage {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
        bool has_grad = false;
    };

public:
    Tensor() : s_(std::make_shared<Storage>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.s_->value.assign(shape_numel(shape), 0.0);
        t.s_->shape = std::move(shape);
        t.s_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.s_->value.begin(), t.s_->value.end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " does not hold " +
                                        std::to_string(data.size()) + " values");
        Tensor t;
        t.s_->shape = std::move(shape);
        t.s_->value = std::move(data);
        t.s_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double std_dev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.s_->value) v = rng.normal() * std_dev;
        return t;
    }

    static Tensor trunc_normal(Shape shape, Rng& rng, double std_dev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.s_->value) v = rng.trunc_normal(std_dev);
        return t;
    }

    // d x d identity.
    static Tensor eye(std::size_t d, bool requires_grad = false) {
        Tensor t = zeros({d, d}, requires_grad);
        for (std::size_t i = 0; i < d; ++i) t.s_->value[i * d + i] = 1.0;
        return t;
    }

    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t numel() const { return s_->value.size(); }
    std::size_t size(std::size_t dim) const { return s_->shape.at(dim); }
    std::size_t rows() const { return rank() == 2 ? s_->shape[0] : 0; }
    std::size_t cols() const { return rank() == 2 ? s_->shape[1] : 0; }

    std::vector<double>& values() { return s_->value; }
    const std::vector<double>& values() const { return s_->value; }
    double* data() { return s_->value.data(); }
    const double* data() const { return s_->value.data(); }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor " + shape_str(shape()) + " is not scalar");
        return s_->value[0];
    }

    double operator()(std::size_t i) const { return s_->value[i]; }
    double& operator()(std::size_t i) { return s_->value[i]; }
    double operator()(std::size_t r, std::size_t c) const { return s_->value[r * cols() + c]; }
    double& operator()(std::size_t r, std::size_t c) { return s_->value[r * cols() + c]; }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool b) { s_->requires_grad = b; }

    // Gradient state lives in the shared storage; mutating it through a const
    // handle is allowed, mirroring shared_ptr semantics.
    bool has_grad() const { return s_->has_grad; }
    const std::vector<double>& grad() const {
        if (!s_->has_grad) throw std::logic_error("Tensor::grad: no gradient present");
        return s_->grad;
    }
    std::vector<double>& grad_mutable() const {
        ensure_grad();
        return s_->grad;
    }

    void zero_grad() const {
        s_->grad.clear();
        s_->has_grad = false;
    }

    void ensure_grad() const {
        if (!s_->has_grad) {
            s_->grad.assign(s_->value.size(), 0.0);
            s_->has_grad = true;
        }
    }

    void accumulate_grad(const std::vector<double>& g) const {
        ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) s_->grad[i] += g[i];
    }

    // Deep copy with no gradient participation.
    Tensor detach() const {
        Tensor t;
        t.s_->shape = s_->shape;
        t.s_->value = s_->value;
        return t;
    }

    // Deep copy preserving requires_grad (gradient state is not copied).
    Tensor clone() const {
        Tensor t = detach();
        t.s_->requires_grad = s_->requires_grad;
        return t;
    }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    bool all_finite() const {
        for (double v : s_->value)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::shared_ptr<Storage> s_;
};

// Ordered record of executed operations; replaying it once in reverse
// propagates adjoints from a scalar loss back to every participating tensor.
class Graph {
public:
    void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

    std::size_t size() const { return tape_.size(); }

    void backward(Tensor& loss) {
        if (spent_) throw std::logic_error("Graph::backward: tape already replayed; run a new forward pass");
        if (loss.numel() != 1)
            throw std::invalid_argument("Graph::backward: loss must be scalar, got " + shape_str(loss.shape()));
        spent_ = true;
        loss.grad_mutable()[0] += 1.0;
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    }

    bool spent() const { return spent_; }

private:
    std::vector<std::function<void()>> tape_;
    bool spent_ = false;
};

namespace ops {

namespace detail {

inline bool tracked(const Graph* g, const Tensor& a) { return g != nullptr && a.requires_grad(); }
inline bool tracked(const Graph* g, const Tensor& a, const Tensor& b) {
    return g != nullptr && (a.requires_grad() || b.requires_grad());
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

// c(m x n) += a(m x k) * b(k x n)
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c(m x k) += a(m x n) * b(k x n)^T
inline void gemm_abt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        double* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// c(k x n) += a(m x k)^T * b(m x n)
inline void gemm_atb_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < m; ++p) {
        const double* ap = a + p * k;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < k; ++i) {
            const double av = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// Replays `fn` at backward time if the op output accumulated a gradient.
inline void record_if(Graph* g, Tensor out, std::function<void(const std::vector<double>&)> fn) {
    g->record([out, fn = std::move(fn)]() mutable {
        if (out.has_grad()) fn(out.grad());
    });
}

} // namespace detail

inline Tensor matmul(Graph* g, const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    detail::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::tracked(g, a, b)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [a, b, m, k, n](const std::vector<double>& go) mutable {
            if (a.requires_grad()) {
                a.ensure_grad();
                detail::gemm_abt_acc(go.data(), b.data(), a.grad_mutable().data(), m, n, k);
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                detail::gemm_atb_acc(a.data(), go.data(), b.grad_mutable().data(), m, k, n);
            }
        });
    }
    return out;
}

inline Tensor transpose(Graph* g, const Tensor& a) {
    detail::require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    if (detail::tracked(g, a)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [a, m, n](const std::vector<double>& go) mutable {
            a.ensure_grad();
            auto& ga = a.grad_mutable();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
        });
    }
    return out;
}

inline Tensor add(Graph* g, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out(i) = a(i) + b(i);
    if (detail::tracked(g, a, b)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [a, b](const std::vector<double>& go) mutable {
            if (a.requires_grad()) a.accumulate_grad(go);
            if (b.requires_grad()) b.accumulate_grad(go);
        });
    }
    return out;
}

inline Tensor scale(Graph* g, const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out(i) = a(i) * c;
    if (detail::tracked(g, a)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [a, c](const std::vector<double>& go) mutable {
            a.ensure_grad();
            auto& ga = a.grad_mutable();
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
        });
    }
    return out;
}

// Adds a length-n bias vector to every row of a (... x n).
inline Tensor add_bias(Graph* g, const Tensor& a, const Tensor& bias) {
    if (bias.rank() != 1 || a.rank() < 1 || a.shape().back() != bias.size(0))
        throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                                    shape_str(a.shape()));
    const std::size_t n = bias.size(0);
    const std::size_t rows = a.numel() / n;
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out(r * n + j) = a(r * n + j) + bias(j);
    if (detail::tracked(g, a, bias)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [a, bias, rows, n](const std::vector<double>& go) mutable {
            if (a.requires_grad()) a.accumulate_grad(go);
            if (bias.requires_grad()) {
                bias.ensure_grad();
                auto& gb = bias.grad_mutable();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += go[r * n + j];
            }
        });
    }
    return out;
}

// Row-wise softmax over the last dimension, max-subtracted for stability.
inline Tensor softmax_rows(Graph* g, const Tensor& a) {
    if (a.rank() < 1 || a.shape().back() < 1)
        throw std::invalid_argument("softmax_rows: last dimension must be >= 1, got " + shape_str(a.shape()));
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data() + r * n;
        double* y = out.data() + r * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
    }
    if (detail::tracked(g, a)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [a, out, rows, n](const std::vector<double>& go) mutable {
            a.ensure_grad();
            auto& ga = a.grad_mutable();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = out.data() + r * n;
                const double* gy = go.data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

// Per-row standardization over the last dimension, then gain/bias.
inline Tensor layernorm(Graph* g, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-12) {
    if (x.rank() < 1) throw std::invalid_argument("layernorm: rank-0 input");
    const std::size_t n = x.shape().back();
    if (gain.rank() != 1 || gain.size(0) != n || bias.rank() != 1 || bias.size(0) != n)
        throw std::invalid_argument("layernorm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                                    " do not match last dim of " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / n;
    Tensor out = Tensor::zeros(x.shape());
    // xhat and 1/sqrt(var+eps) are needed by the backward pass.
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(n);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (xr[j] - mean) * rs;
            (*xhat)[r * n + j] = xh;
            out(r * n + j) = gain(j) * xh + bias(j);
        }
    }
    if (g != nullptr && (x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [x, gain, bias, xhat, rstd, rows, n](const std::vector<double>& go) mutable {
            if (bias.requires_grad()) {
                bias.ensure_grad();
                auto& gb = bias.grad_mutable();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += go[r * n + j];
            }
            if (gain.requires_grad()) {
                gain.ensure_grad();
                auto& gg = gain.grad_mutable();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += go[r * n + j] * (*xhat)[r * n + j];
            }
            if (x.requires_grad()) {
                x.ensure_grad();
                auto& gx = x.grad_mutable();
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = go[r * n + j] * gain(j);
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * (*xhat)[r * n + j];
                    }
                    mean_dxhat /= static_cast<double>(n);
                    mean_dxhat_xhat /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = go[r * n + j] * gain(j);
                        gx[r * n + j] += (*rstd)[r] * (dxh - mean_dxhat - (*xhat)[r * n + j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// x * Phi(x), tanh approximation with the 0.044715 cubic coefficient.
inline Tensor gelu(Graph* g, const Tensor& x) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = x(i);
        const double t = std::tanh(kSqrt2OverPi * (v + kCubic * v * v * v));
        out(i) = 0.5 * v * (1.0 + t);
    }
    if (detail::tracked(g, x)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [x](const std::vector<double>& go) mutable {
            x.ensure_grad();
            auto& gx = x.grad_mutable();
            for (std::size_t i = 0; i < go.size(); ++i) {
                const double v = x(i);
                const double u = kSqrt2OverPi * (v + kCubic * v * v * v);
                const double t = std::tanh(u);
                const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
                gx[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
        });
    }
    return out;
}

// Mean over all elements of squared difference. Target must be detached.
inline Tensor mse(Graph* g, const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "mse");
    if (target.requires_grad()) throw std::invalid_argument("mse: target must be detached from gradient flow");
    const std::size_t n = pred.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred(i) - target(i);
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (detail::tracked(g, pred)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [pred, target, n](const std::vector<double>& go) mutable {
            pred.ensure_grad();
            auto& gp = pred.grad_mutable();
            const double s = 2.0 * go[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) gp[i] += s * (pred(i) - target(i));
        });
    }
    return out;
}

// Mean over rows of -sum(target * log_softmax(pred_logits)).
// Target rows must be probability distributions and detached.
inline Tensor soft_cross_entropy(Graph* g, const Tensor& target_probs, const Tensor& pred_logits) {
    detail::require_same_shape(target_probs, pred_logits, "soft_cross_entropy");
    if (target_probs.requires_grad())
        throw std::invalid_argument("soft_cross_entropy: target must be detached from gradient flow");
    const std::size_t n = pred_logits.shape().back();
    const std::size_t rows = pred_logits.numel() / n;
    for (std::size_t i = 0; i < pred_logits.numel(); ++i)
        if (!std::isfinite(pred_logits(i)) || !std::isfinite(target_probs(i)))
            throw std::invalid_argument("soft_cross_entropy: non-finite input");
    // log-softmax per row, cached for backward.
    auto probs = std::make_shared<std::vector<double>>(pred_logits.numel());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = pred_logits.data() + r * n;
        const double* t = target_probs.data() + r * n;
        double tsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) tsum += t[j];
        if (std::fabs(tsum - 1.0) > 1e-6)
            throw std::invalid_argument("soft_cross_entropy: target row " + std::to_string(r) +
                                        " is not a distribution (sums to " + std::to_string(tsum) + ")");
        double mx = z[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(z[j] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) {
            (*probs)[r * n + j] = std::exp(z[j] - lse);
            total -= t[j] * (z[j] - lse);
        }
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));
    if (detail::tracked(g, pred_logits)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [pred_logits, target_probs, probs, rows, n](const std::vector<double>& go) mutable {
            pred_logits.ensure_grad();
            auto& gz = pred_logits.grad_mutable();
            const double s = go[0] / static_cast<double>(rows);
            for (std::size_t i = 0; i < rows * n; ++i) gz[i] += s * ((*probs)[i] - target_probs(i));
        });
    }
    return out;
}

// Concatenation of rank-2 tensors along the last (column) dimension.
inline Tensor concat_cols(Graph* g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != m)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                                        shape_str(p.shape()));
        total += p.cols();
    }
    Tensor out = Tensor::zeros({m, total});
    std::size_t off = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
        off += p.cols();
        any_grad = any_grad || p.requires_grad();
    }
    if (g != nullptr && any_grad) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [parts, m, total](const std::vector<double>& go) mutable {
            std::size_t off = 0;
            for (const Tensor& p : parts) {
                if (p.requires_grad()) {
                    p.ensure_grad();
                    auto& gp = p.grad_mutable();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < p.cols(); ++j) gp[i * p.cols() + j] += go[i * total + off + j];
                }
                off += p.cols();
            }
        });
    }
    return out;
}

// Split a rank-2 tensor into `n_parts` equal column blocks.
inline std::vector<Tensor> split_cols(Graph* g, const Tensor& a, std::size_t n_parts) {
    detail::require_rank2(a, "split_cols");
    if (n_parts == 0 || a.cols() % n_parts != 0)
        throw std::invalid_argument("split_cols: " + shape_str(a.shape()) + " not divisible into " +
                                    std::to_string(n_parts) + " equal column blocks");
    const std::size_t m = a.rows(), w = a.cols() / n_parts;
    std::vector<Tensor> parts;
    parts.reserve(n_parts);
    for (std::size_t p = 0; p < n_parts; ++p) {
        Tensor part = Tensor::zeros({m, w});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) part(i, j) = a(i, p * w + j);
        if (detail::tracked(g, a)) {
            part.set_requires_grad(true);
            detail::record_if(g, part, [a, p, m, w](const std::vector<double>& go) mutable {
                a.ensure_grad();
                auto& ga = a.grad_mutable();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) ga[i * a.cols() + p * w + j] += go[i * w + j];
            });
        }
        parts.push_back(part);
    }
    return parts;
}

// Gathers rows of `table` by id; gradients scatter-add back into the table.
inline Tensor embedding_rows(Graph* g, const Tensor& table, const std::vector<int>& ids) {
    detail::require_rank2(table, "embedding_rows");
    const std::size_t v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw std::invalid_argument("embedding_rows: id " + std::to_string(id) + " out of range for table " +
                                        shape_str(table.shape()));
    Tensor out = Tensor::zeros({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) out(r, j) = table(static_cast<std::size_t>(ids[r]), j);
    if (detail::tracked(g, table)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [table, ids, d](const std::vector<double>& go) mutable {
            table.ensure_grad();
            auto& gt = table.grad_mutable();
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(ids[r]) * d + j] += go[r * d + j];
        });
    }
    return out;
}

// Selects rows of a rank-2 tensor; duplicate indices accumulate gradient.
inline Tensor row_select(Graph* g, const Tensor& a, const std::vector<std::size_t>& rows) {
    detail::require_rank2(a, "row_select");
    for (std::size_t r : rows)
        if (r >= a.rows())
            throw std::invalid_argument("row_select: row " + std::to_string(r) + " out of range for " +
                                        shape_str(a.shape()));
    const std::size_t n = a.cols();
    Tensor out = Tensor::zeros({rows.size(), n});
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) out(r, j) = a(rows[r], j);
    if (detail::tracked(g, a)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [a, rows, n](const std::vector<double>& go) mutable {
            a.ensure_grad();
            auto& ga = a.grad_mutable();
            for (std::size_t r = 0; r < rows.size(); ++r)
                for (std::size_t j = 0; j < n; ++j) ga[rows[r] * n + j] += go[r * n + j];
        });
    }
    return out;
}

inline Tensor sum(Graph* g, const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a(i);
    Tensor out = Tensor::scalar(acc);
    if (detail::tracked(g, a)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [a](const std::vector<double>& go) mutable {
            a.ensure_grad();
            auto& ga = a.grad_mutable();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
        });
    }
    return out;
}

// Mean over rows of (1 - cosine(pred row, target row)). Target detached.
inline Tensor cosine_row_loss(Graph* g, const Tensor& pred, const Tensor& target) {
    detail::require_rank2(pred, "cosine_row_loss");
    detail::require_same_shape(pred, target, "cosine_row_loss");
    if (target.requires_grad())
        throw std::invalid_argument("cosine_row_loss: target must be detached from gradient flow");
    constexpr double kEps = 1e-12;
    const std::size_t m = pred.rows(), n = pred.cols();
    double total = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0, np = 0.0, nt = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            dot += pred(r, j) * target(r, j);
            np += pred(r, j) * pred(r, j);
            nt += target(r, j) * target(r, j);
        }
        total += 1.0 - dot / (std::sqrt(np) * std::sqrt(nt) + kEps);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(m));
    if (detail::tracked(g, pred)) {
        out.set_requires_grad(true);
        detail::record_if(g, out, [pred, target, m, n](const std::vector<double>& go) mutable {
            pred.ensure_grad();
            auto& gp = pred.grad_mutable();
            const double s = go[0] / static_cast<double>(m);
            for (std::size_t r = 0; r < m; ++r) {
                double dot = 0.0, np = 0.0, nt = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += pred(r, j) * target(r, j);
                    np += pred(r, j) * pred(r, j);
                    nt += target(r, j) * target(r, j);
                }
                const double denom = std::sqrt(np) * std::sqrt(nt) + kEps;
                for (std::size_t j = 0; j < n; ++j) {
                    const double dcos = target(r, j) / denom - dot * pred(r, j) / (np * denom + kEps);
                    gp[r * n + j] += s * (-dcos);
                }
            }
        });
    }
    return out;
}

} // namespace ops
} // namespace kdlab

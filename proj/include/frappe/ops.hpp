#pragma once

// Differentiable op library over TensorT. Every op computes its forward
// result eagerly and, when a tape is active and some input requires
// gradients, records a backward closure. Backward rules accumulate (+=)
// into input gradient buffers so shared subexpressions sum correctly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "frappe/tensor.hpp"

namespace frappe {

namespace detail {

template <class S>
inline bool want_grad(std::initializer_list<const TensorT<S> *> ins) {
    if (!TapeT<S>::current()) return false;
    for (auto *t : ins)
        if (t->requires_grad()) return true;
    return false;
}

inline Shape strip_leading_ones(const Shape &s) {
    size_t i = 0;
    while (i + 1 < s.size() && s[i] == 1) ++i;
    return Shape(s.begin() + i, s.end());
}

inline bool is_suffix(const Shape &small, const Shape &big) {
    Shape a = strip_leading_ones(small), b = strip_leading_ones(big);
    if (a.size() > b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[a.size() - 1 - i] != b[b.size() - 1 - i]) return false;
    return true;
}

// Elementwise broadcast plan: the smaller operand repeats over the leading
// dimensions of the larger one. period == 0 means identity indexing.
struct BcPlan {
    Shape out;
    int64_t a_period = 0;
    int64_t b_period = 0;
};

template <class S>
inline BcPlan bc_plan(const TensorT<S> &a, const TensorT<S> &b, const char *op) {
    if (a.shape() == b.shape()) return {a.shape(), 0, 0};
    if (b.numel() == 1) return {a.shape(), 0, 1};
    if (a.numel() == 1) return {b.shape(), 1, 0};
    if (b.numel() < a.numel() && is_suffix(b.shape(), a.shape()))
        return {a.shape(), 0, b.numel()};
    if (a.numel() < b.numel() && is_suffix(a.shape(), b.shape()))
        return {b.shape(), a.numel(), 0};
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
}

inline int64_t bc_index(int64_t i, int64_t period) { return period ? i % period : i; }

// C[m x n] += A[m x k] * B[k x n], inner loop over n for locality.
template <class S>
inline void mm_acc(const S *A, const S *B, S *C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const S *a_row = A + i * k;
        S *c_row = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            S av = a_row[p];
            if (av == S(0)) continue;
            const S *b_row = B + p * n;
            for (int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
        }
    }
}

// C[m x n] += A^T[(k x m)^T] * B[k x n]
template <class S>
inline void mm_at_b_acc(const S *A, const S *B, S *C, int64_t k, int64_t m, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const S *a_row = A + p * m;
        const S *b_row = B + p * n;
        for (int64_t i = 0; i < m; ++i) {
            S av = a_row[i];
            if (av == S(0)) continue;
            S *c_row = C + i * n;
            for (int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
        }
    }
}

// C[m x k] += A[m x n] * B^T[(k x n)^T]
template <class S>
inline void mm_a_bt_acc(const S *A, const S *B, S *C, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const S *a_row = A + i * n;
        S *c_row = C + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const S *b_row = B + p * n;
            S acc = S(0);
            for (int64_t j = 0; j < n; ++j) acc += a_row[j] * b_row[j];
            c_row[p] += acc;
        }
    }
}

template <class S>
inline void require_rank2(const TensorT<S> &t, const char *op) {
    if (t.rank() != 2)
        throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " +
                         shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- add/sub/mul

template <class S>
TensorT<S> add(const TensorT<S> &a, const TensorT<S> &b) {
    auto plan = detail::bc_plan(a, b, "add");
    auto out = TensorT<S>::zeros(plan.out);
    const auto &ad = a.data();
    const auto &bd = b.data();
    auto &od = out.data();
    for (int64_t i = 0; i < out.numel(); ++i)
        od[i] = ad[detail::bc_index(i, plan.a_period)] + bd[detail::bc_index(i, plan.b_period)];
    if (detail::want_grad<S>({&a, &b})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({a, b}, out, [a, b, out, plan]() {
            const auto &go = out.grad();
            if (a.requires_grad()) {
                auto &ga = a.grad();
                for (int64_t i = 0; i < out.numel(); ++i)
                    ga[detail::bc_index(i, plan.a_period)] += go[i];
            }
            if (b.requires_grad()) {
                auto &gb = b.grad();
                for (int64_t i = 0; i < out.numel(); ++i)
                    gb[detail::bc_index(i, plan.b_period)] += go[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S> &a, const TensorT<S> &b) {
    auto plan = detail::bc_plan(a, b, "sub");
    auto out = TensorT<S>::zeros(plan.out);
    const auto &ad = a.data();
    const auto &bd = b.data();
    auto &od = out.data();
    for (int64_t i = 0; i < out.numel(); ++i)
        od[i] = ad[detail::bc_index(i, plan.a_period)] - bd[detail::bc_index(i, plan.b_period)];
    if (detail::want_grad<S>({&a, &b})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({a, b}, out, [a, b, out, plan]() {
            const auto &go = out.grad();
            if (a.requires_grad()) {
                auto &ga = a.grad();
                for (int64_t i = 0; i < out.numel(); ++i)
                    ga[detail::bc_index(i, plan.a_period)] += go[i];
            }
            if (b.requires_grad()) {
                auto &gb = b.grad();
                for (int64_t i = 0; i < out.numel(); ++i)
                    gb[detail::bc_index(i, plan.b_period)] -= go[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S> &a, const TensorT<S> &b) {
    auto plan = detail::bc_plan(a, b, "mul");
    auto out = TensorT<S>::zeros(plan.out);
    const auto &ad = a.data();
    const auto &bd = b.data();
    auto &od = out.data();
    for (int64_t i = 0; i < out.numel(); ++i)
        od[i] = ad[detail::bc_index(i, plan.a_period)] * bd[detail::bc_index(i, plan.b_period)];
    if (detail::want_grad<S>({&a, &b})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({a, b}, out, [a, b, out, plan]() {
            const auto &go = out.grad();
            const auto &ad2 = a.data();
            const auto &bd2 = b.data();
            if (a.requires_grad()) {
                auto &ga = a.grad();
                for (int64_t i = 0; i < out.numel(); ++i)
                    ga[detail::bc_index(i, plan.a_period)] +=
                        go[i] * bd2[detail::bc_index(i, plan.b_period)];
            }
            if (b.requires_grad()) {
                auto &gb = b.grad();
                for (int64_t i = 0; i < out.numel(); ++i)
                    gb[detail::bc_index(i, plan.b_period)] +=
                        go[i] * ad2[detail::bc_index(i, plan.a_period)];
            }
        });
    }
    return out;
}

// ------------------------------------------------------- scalar-constant ops

template <class S>
TensorT<S> scale(const TensorT<S> &x, S c) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * c;
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, c]() {
            const auto &go = out.grad();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += c * go[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> add_scalar(const TensorT<S> &x, S c) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] + c;
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            const auto &go = out.grad();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

// ------------------------------------------------------------------- matmul

template <class S>
TensorT<S> matmul(const TensorT<S> &a, const TensorT<S> &b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = TensorT<S>::zeros({m, n});
    detail::mm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (detail::want_grad<S>({&a, &b})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({a, b}, out, [a, b, out, m, k, n]() {
            const S *go = out.grad().data();
            if (a.requires_grad())
                detail::mm_a_bt_acc(go, b.data().data(), a.grad().data(), m, n, k);
            if (b.requires_grad())
                detail::mm_at_b_acc(a.data().data(), go, b.grad().data(), m, k, n);
        });
    }
    return out;
}

template <class S>
TensorT<S> transpose(const TensorT<S> &x) {
    detail::require_rank2(x, "transpose");
    int64_t m = x.dim(0), n = x.dim(1);
    auto out = TensorT<S>::zeros({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[j * m + i] = x.data()[i * n + j];
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, m, n]() {
            const auto &go = out.grad();
            auto &gx = x.grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
        });
    }
    return out;
}

// ------------------------------------------------------- elementwise unaries

template <class S>
TensorT<S> relu(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            const auto &go = out.grad();
            const auto &xd = x.data();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i)
                if (xd[i] > S(0)) gx[i] += go[i];
        });
    }
    return out;
}

namespace detail {
// tanh-approximation GELU and its derivative.
template <class S>
inline S gelu_fwd(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    S inner = c * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(inner));
}
template <class S>
inline S gelu_bwd(S x) {
    const S c = S(0.7978845608028654);
    S x3 = x * x * x;
    S inner = c * (x + S(0.044715) * x3);
    S t = std::tanh(inner);
    S dinner = c * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * dinner;
}
}  // namespace detail

template <class S>
TensorT<S> gelu(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = detail::gelu_fwd(x.data()[i]);
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            const auto &go = out.grad();
            const auto &xd = x.data();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] * detail::gelu_bwd(xd[i]);
        });
    }
    return out;
}

template <class S>
TensorT<S> tanh_op(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::tanh(x.data()[i]);
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            const auto &go = out.grad();
            const auto &od = out.data();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] * (S(1) - od[i] * od[i]);
        });
    }
    return out;
}

template <class S>
TensorT<S> exp_op(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        out.data()[i] = std::exp(x.data()[i]);
        if (!std::isfinite(out.data()[i]))
            throw NumericError("exp: non-finite result for input " +
                               std::to_string(static_cast<double>(x.data()[i])));
    }
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            const auto &go = out.grad();
            const auto &od = out.data();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] * od[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> log_op(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (!(x.data()[i] > S(0)))
            throw DomainError("log: input must be positive, got " +
                              std::to_string(static_cast<double>(x.data()[i])));
        out.data()[i] = std::log(x.data()[i]);
    }
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            const auto &go = out.grad();
            const auto &xd = x.data();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] / xd[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> square(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            const auto &go = out.grad();
            const auto &xd = x.data();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += S(2) * xd[i] * go[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> sqrt_op(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (x.data()[i] < S(0))
            throw DomainError("sqrt: input must be non-negative, got " +
                              std::to_string(static_cast<double>(x.data()[i])));
        out.data()[i] = std::sqrt(x.data()[i]);
    }
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            const auto &go = out.grad();
            const auto &od = out.data();
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i)
                if (od[i] > S(0)) gx[i] += go[i] * S(0.5) / od[i];
        });
    }
    return out;
}

// ----------------------------------------------------------- row reductions

template <class S>
TensorT<S> softmax_lastdim(const TensorT<S> &x) {
    if (x.rank() < 1) throw ShapeError("softmax_lastdim: rank must be >= 1");
    int64_t n = x.shape().back();
    int64_t rows = x.numel() / n;
    auto out = TensorT<S>::zeros(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const S *xr = x.data().data() + r * n;
        S *yr = out.data().data() + r * n;
        S mx = xr[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        S sum = S(0);
        for (int64_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (int64_t j = 0; j < n; ++j) yr[j] /= sum;
    }
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, rows, n]() {
            const auto &go = out.grad();
            const auto &y = out.data();
            auto &gx = x.grad();
            for (int64_t r = 0; r < rows; ++r) {
                S dot = S(0);
                for (int64_t j = 0; j < n; ++j) dot += go[r * n + j] * y[r * n + j];
                for (int64_t j = 0; j < n; ++j)
                    gx[r * n + j] += y[r * n + j] * (go[r * n + j] - dot);
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> layernorm_lastdim(const TensorT<S> &x) {
    if (x.rank() < 1) throw ShapeError("layernorm_lastdim: rank must be >= 1");
    const S eps = S(1e-5);
    int64_t n = x.shape().back();
    int64_t rows = x.numel() / n;
    auto out = TensorT<S>::zeros(x.shape());
    std::vector<S> rstd(rows), mean(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const S *xr = x.data().data() + r * n;
        S mu = S(0);
        for (int64_t j = 0; j < n; ++j) mu += xr[j];
        mu /= S(n);
        S var = S(0);
        for (int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= S(n);
        S rs = S(1) / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        S *yr = out.data().data() + r * n;
        for (int64_t j = 0; j < n; ++j) yr[j] = (xr[j] - mu) * rs;
    }
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, rows, n, rstd, mean]() {
            const auto &go = out.grad();
            const auto &y = out.data();
            auto &gx = x.grad();
            for (int64_t r = 0; r < rows; ++r) {
                S gsum = S(0), gysum = S(0);
                for (int64_t j = 0; j < n; ++j) {
                    gsum += go[r * n + j];
                    gysum += go[r * n + j] * y[r * n + j];
                }
                gsum /= S(n);
                gysum /= S(n);
                for (int64_t j = 0; j < n; ++j)
                    gx[r * n + j] += rstd[r] * (go[r * n + j] - gsum - y[r * n + j] * gysum);
            }
        });
    }
    return out;
}

// Stable log(sum(exp(row))) per row: [m x n] -> [m].
template <class S>
TensorT<S> logsumexp_rows(const TensorT<S> &x) {
    detail::require_rank2(x, "logsumexp_rows");
    int64_t m = x.dim(0), n = x.dim(1);
    auto out = TensorT<S>::zeros({m});
    for (int64_t r = 0; r < m; ++r) {
        const S *xr = x.data().data() + r * n;
        S mx = xr[0];
        for (int64_t j = 0; j < n; ++j) {
            if (!std::isfinite(xr[j]))
                throw NumericError("logsumexp_rows: non-finite input in row " +
                                   std::to_string(r));
            mx = std::max(mx, xr[j]);
        }
        S sum = S(0);
        for (int64_t j = 0; j < n; ++j) sum += std::exp(xr[j] - mx);
        out.data()[r] = mx + std::log(sum);
    }
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, m, n]() {
            const auto &go = out.grad();
            const auto &xd = x.data();
            const auto &od = out.data();
            auto &gx = x.grad();
            for (int64_t r = 0; r < m; ++r)
                for (int64_t j = 0; j < n; ++j)
                    gx[r * n + j] += go[r] * std::exp(xd[r * n + j] - od[r]);
        });
    }
    return out;
}

template <class S>
TensorT<S> mean_all(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros({1});
    S acc = S(0);
    for (S v : x.data()) acc += v;
    out.data()[0] = acc / S(x.numel());
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            S g = out.grad()[0] / S(x.numel());
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
        });
    }
    return out;
}

template <class S>
TensorT<S> sum_all(const TensorT<S> &x) {
    auto out = TensorT<S>::zeros({1});
    S acc = S(0);
    for (S v : x.data()) acc += v;
    out.data()[0] = acc;
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out]() {
            S g = out.grad()[0];
            auto &gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
        });
    }
    return out;
}

// Column-wise mean over rows: [m x n] -> [1 x n].
template <class S>
TensorT<S> mean_rows(const TensorT<S> &x) {
    detail::require_rank2(x, "mean_rows");
    int64_t m = x.dim(0), n = x.dim(1);
    auto out = TensorT<S>::zeros({1, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[j] += x.data()[i * n + j];
    for (int64_t j = 0; j < n; ++j) out.data()[j] /= S(m);
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, m, n]() {
            const auto &go = out.grad();
            auto &gx = x.grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gx[i * n + j] += go[j] / S(m);
        });
    }
    return out;
}

// --------------------------------------------------------- cosine similarity

// Row-wise cosine of two [n x d] tensors -> [n]. The denominator carries a
// +1e-8 guard, so zero rows yield 0 rather than NaN.
template <class S>
TensorT<S> cosine_similarity(const TensorT<S> &a, const TensorT<S> &b) {
    detail::require_rank2(a, "cosine_similarity");
    detail::require_rank2(b, "cosine_similarity");
    if (a.shape() != b.shape())
        throw ShapeError("cosine_similarity: shapes differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    const S guard = S(1e-8);
    int64_t n = a.dim(0), d = a.dim(1);
    auto out = TensorT<S>::zeros({n});
    for (int64_t r = 0; r < n; ++r) {
        const S *ar = a.data().data() + r * d;
        const S *br = b.data().data() + r * d;
        S dot = S(0), na = S(0), nb = S(0);
        for (int64_t j = 0; j < d; ++j) {
            dot += ar[j] * br[j];
            na += ar[j] * ar[j];
            nb += br[j] * br[j];
        }
        out.data()[r] = dot / (std::sqrt(na) * std::sqrt(nb) + guard);
    }
    if (detail::want_grad<S>({&a, &b})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({a, b}, out, [a, b, out, n, d, guard]() {
            const auto &go = out.grad();
            for (int64_t r = 0; r < n; ++r) {
                const S *ar = a.data().data() + r * d;
                const S *br = b.data().data() + r * d;
                S dot = S(0), na2 = S(0), nb2 = S(0);
                for (int64_t j = 0; j < d; ++j) {
                    dot += ar[j] * br[j];
                    na2 += ar[j] * ar[j];
                    nb2 += br[j] * br[j];
                }
                S na = std::sqrt(na2), nb = std::sqrt(nb2);
                S den = na * nb + guard;
                if (a.requires_grad()) {
                    S *ga = a.grad().data() + r * d;
                    S coef = na > S(0) ? dot * nb / na / (den * den) : S(0);
                    for (int64_t j = 0; j < d; ++j)
                        ga[j] += go[r] * (br[j] / den - coef * ar[j]);
                }
                if (b.requires_grad()) {
                    S *gb = b.grad().data() + r * d;
                    S coef = nb > S(0) ? dot * na / nb / (den * den) : S(0);
                    for (int64_t j = 0; j < d; ++j)
                        gb[j] += go[r] * (ar[j] / den - coef * br[j]);
                }
            }
        });
    }
    return out;
}

// ------------------------------------------------------------ concat / slice

template <class S>
TensorT<S> concat_rows(const std::vector<TensorT<S>> &xs) {
    if (xs.empty()) throw ShapeError("concat_rows: empty input list");
    for (const auto &x : xs) detail::require_rank2(x, "concat_rows");
    int64_t cols = xs[0].dim(1), rows = 0;
    for (const auto &x : xs) {
        if (x.dim(1) != cols)
            throw ShapeError("concat_rows: column mismatch, " + shape_str(xs[0].shape()) +
                             " vs " + shape_str(x.shape()));
        rows += x.dim(0);
    }
    auto out = TensorT<S>::zeros({rows, cols});
    int64_t off = 0;
    for (const auto &x : xs) {
        std::copy(x.data().begin(), x.data().end(), out.data().begin() + off);
        off += x.numel();
    }
    bool any = false;
    for (const auto &x : xs) any = any || x.requires_grad();
    if (TapeT<S>::current() && any) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record(xs, out, [xs, out]() {
            const auto &go = out.grad();
            int64_t off2 = 0;
            for (const auto &x : xs) {
                if (x.requires_grad()) {
                    auto &gx = x.grad();
                    for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[off2 + i];
                }
                off2 += x.numel();
            }
        });
    }
    return out;
}

// Rows [r0, r1) along dim 0; works for any rank >= 1.
template <class S>
TensorT<S> slice_rows(const TensorT<S> &x, int64_t r0, int64_t r1) {
    if (x.rank() < 1) throw ShapeError("slice_rows: rank must be >= 1");
    int64_t m = x.dim(0);
    if (r0 < 0 || r1 > m || r0 >= r1)
        throw IndexError("slice_rows: range [" + std::to_string(r0) + ", " +
                         std::to_string(r1) + ") out of bounds for dim " + std::to_string(m));
    int64_t block = x.numel() / m;
    Shape os = x.shape();
    os[0] = r1 - r0;
    auto out = TensorT<S>::zeros(os);
    std::copy(x.data().begin() + r0 * block, x.data().begin() + r1 * block, out.data().begin());
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, r0, block]() {
            const auto &go = out.grad();
            auto &gx = x.grad();
            for (int64_t i = 0; i < out.numel(); ++i) gx[r0 * block + i] += go[i];
        });
    }
    return out;
}

template <class S>
TensorT<S> concat_cols(const std::vector<TensorT<S>> &xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input list");
    for (const auto &x : xs) detail::require_rank2(x, "concat_cols");
    int64_t rows = xs[0].dim(0), cols = 0;
    for (const auto &x : xs) {
        if (x.dim(0) != rows)
            throw ShapeError("concat_cols: row mismatch, " + shape_str(xs[0].shape()) +
                             " vs " + shape_str(x.shape()));
        cols += x.dim(1);
    }
    auto out = TensorT<S>::zeros({rows, cols});
    int64_t off = 0;
    for (const auto &x : xs) {
        int64_t w = x.dim(1);
        for (int64_t i = 0; i < rows; ++i)
            std::copy(x.data().begin() + i * w, x.data().begin() + (i + 1) * w,
                      out.data().begin() + i * cols + off);
        off += w;
    }
    bool any = false;
    for (const auto &x : xs) any = any || x.requires_grad();
    if (TapeT<S>::current() && any) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record(xs, out, [xs, out, rows, cols]() {
            const auto &go = out.grad();
            int64_t off2 = 0;
            for (const auto &x : xs) {
                int64_t w = x.dim(1);
                if (x.requires_grad()) {
                    auto &gx = x.grad();
                    for (int64_t i = 0; i < rows; ++i)
                        for (int64_t j = 0; j < w; ++j)
                            gx[i * w + j] += go[i * cols + off2 + j];
                }
                off2 += w;
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> slice_cols(const TensorT<S> &x, int64_t c0, int64_t c1) {
    detail::require_rank2(x, "slice_cols");
    int64_t m = x.dim(0), n = x.dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1)
        throw IndexError("slice_cols: range [" + std::to_string(c0) + ", " +
                         std::to_string(c1) + ") out of bounds for dim " + std::to_string(n));
    int64_t w = c1 - c0;
    auto out = TensorT<S>::zeros({m, w});
    for (int64_t i = 0; i < m; ++i)
        std::copy(x.data().begin() + i * n + c0, x.data().begin() + i * n + c1,
                  out.data().begin() + i * w);
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, m, n, c0, w]() {
            const auto &go = out.grad();
            auto &gx = x.grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < w; ++j) gx[i * n + c0 + j] += go[i * w + j];
        });
    }
    return out;
}

// out.flat[i] = x.flat[idx[i]]; backward is scatter-add, so repeated indices
// accumulate. Used for patch extraction and token regrouping.
template <class S>
TensorT<S> gather(const TensorT<S> &x, const std::vector<int64_t> &idx, Shape out_shape) {
    if (static_cast<int64_t>(idx.size()) != shape_numel(out_shape))
        throw ShapeError("gather: index count " + std::to_string(idx.size()) +
                         " does not match output shape " + shape_str(out_shape));
    for (int64_t j : idx)
        if (j < 0 || j >= x.numel())
            throw IndexError("gather: index " + std::to_string(j) + " out of range for " +
                             std::to_string(x.numel()) + " elements");
    auto out = TensorT<S>::zeros(std::move(out_shape));
    for (size_t i = 0; i < idx.size(); ++i) out.data()[i] = x.data()[idx[i]];
    if (detail::want_grad<S>({&x})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x}, out, [x, out, idx]() {
            const auto &go = out.grad();
            auto &gx = x.grad();
            for (size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += go[i];
        });
    }
    return out;
}

// -------------------------------------------------------------- stop gradient

// Value-identical tensor detached from the graph: no node is recorded and
// the result never requires gradients. Gradients therefore do not flow
// through it by construction.
template <class S>
TensorT<S> stop_gradient(const TensorT<S> &x) {
    return TensorT<S>::from(x.shape(), x.data());
}

// ------------------------------------------------------------------ fused ops

// x[n x in] * w[in x out] + b[out]. One node instead of matmul+add; the
// transformer uses this everywhere, so the saved tape traffic matters.
template <class S>
TensorT<S> linear(const TensorT<S> &x, const TensorT<S> &w, const TensorT<S> &b) {
    detail::require_rank2(x, "linear");
    detail::require_rank2(w, "linear");
    if (x.dim(1) != w.dim(0) || b.numel() != w.dim(1))
        throw ShapeError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                         shape_str(w.shape()) + " b" + shape_str(b.shape()));
    int64_t n = x.dim(0), in = x.dim(1), out_d = w.dim(1);
    auto out = TensorT<S>::zeros({n, out_d});
    for (int64_t i = 0; i < n; ++i)
        std::copy(b.data().begin(), b.data().end(), out.data().begin() + i * out_d);
    detail::mm_acc(x.data().data(), w.data().data(), out.data().data(), n, in, out_d);
    if (detail::want_grad<S>({&x, &w, &b})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record({x, w, b}, out, [x, w, b, out, n, in, out_d]() {
            const S *go = out.grad().data();
            if (x.requires_grad())
                detail::mm_a_bt_acc(go, w.data().data(), x.grad().data(), n, out_d, in);
            if (w.requires_grad())
                detail::mm_at_b_acc(x.data().data(), go, w.grad().data(), n, in, out_d);
            if (b.requires_grad()) {
                auto &gb = b.grad();
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < out_d; ++j) gb[j] += go[i * out_d + j];
            }
        });
    }
    return out;
}

// Linear layer with a low-rank residual path:
//   out = x*w + b + s * (x * a^T) * u^T,  a[r x in], u[out x r].
template <class S>
TensorT<S> linear_lora(const TensorT<S> &x, const TensorT<S> &w, const TensorT<S> &b,
                       const TensorT<S> &a, const TensorT<S> &u, S s) {
    detail::require_rank2(x, "linear_lora");
    detail::require_rank2(w, "linear_lora");
    detail::require_rank2(a, "linear_lora");
    detail::require_rank2(u, "linear_lora");
    int64_t n = x.dim(0), in = x.dim(1), out_d = w.dim(1), r = a.dim(0);
    if (x.dim(1) != w.dim(0) || b.numel() != out_d || a.dim(1) != in || u.dim(0) != out_d ||
        u.dim(1) != r)
        throw ShapeError("linear_lora: incompatible shapes x" + shape_str(x.shape()) + " w" +
                         shape_str(w.shape()) + " a" + shape_str(a.shape()) + " u" +
                         shape_str(u.shape()));
    auto out = TensorT<S>::zeros({n, out_d});
    for (int64_t i = 0; i < n; ++i)
        std::copy(b.data().begin(), b.data().end(), out.data().begin() + i * out_d);
    detail::mm_acc(x.data().data(), w.data().data(), out.data().data(), n, in, out_d);
    // p = x * a^T, then out += s * p * u^T
    std::vector<S> p(static_cast<size_t>(n) * r, S(0));
    detail::mm_a_bt_acc(x.data().data(), a.data().data(), p.data(), n, in, r);
    {
        std::vector<S> pu(static_cast<size_t>(n) * out_d, S(0));
        detail::mm_a_bt_acc(p.data(), u.data().data(), pu.data(), n, r, out_d);
        for (int64_t i = 0; i < n * out_d; ++i) out.data()[i] += s * pu[i];
    }
    if (detail::want_grad<S>({&x, &w, &b, &a, &u})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record(
            {x, w, b, a, u}, out, [x, w, b, a, u, out, s, n, in, out_d, r, p]() {
                const S *go = out.grad().data();
                // dp = s * go * u
                std::vector<S> dp(static_cast<size_t>(n) * r, S(0));
                detail::mm_acc(go, u.data().data(), dp.data(), n, out_d, r);
                for (S &v : dp) v *= s;
                if (x.requires_grad()) {
                    detail::mm_a_bt_acc(go, w.data().data(), x.grad().data(), n, out_d, in);
                    detail::mm_acc(dp.data(), a.data().data(), x.grad().data(), n, r, in);
                }
                if (w.requires_grad())
                    detail::mm_at_b_acc(x.data().data(), go, w.grad().data(), n, in, out_d);
                if (b.requires_grad()) {
                    auto &gb = b.grad();
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < out_d; ++j) gb[j] += go[i * out_d + j];
                }
                if (a.requires_grad())
                    detail::mm_at_b_acc(dp.data(), x.data().data(), a.grad().data(), n, r, in);
                if (u.requires_grad()) {
                    // du = s * go^T * p
                    std::vector<S> du(static_cast<size_t>(out_d) * r, S(0));
                    detail::mm_at_b_acc(go, p.data(), du.data(), n, out_d, r);
                    auto &gu = u.grad();
                    for (int64_t i = 0; i < out_d * r; ++i) gu[i] += s * du[i];
                }
            });
    }
    return out;
}

// Multi-head scaled dot-product attention over already-projected q/k/v.
// q[Tq x d], k/v[Tk x d], d divisible by n_heads. `mask` is either undefined
// or a [Tq x Tk] additive bias (0 / -1e9) treated as a constant.
template <class S>
TensorT<S> attention(const TensorT<S> &q, const TensorT<S> &k, const TensorT<S> &v,
                     int64_t n_heads, const TensorT<S> &mask = {}) {
    detail::require_rank2(q, "attention");
    detail::require_rank2(k, "attention");
    detail::require_rank2(v, "attention");
    int64_t tq = q.dim(0), d = q.dim(1), tk = k.dim(0);
    if (k.dim(1) != d || v.dim(0) != tk || v.dim(1) != d)
        throw ShapeError("attention: incompatible shapes q" + shape_str(q.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()));
    if (n_heads <= 0 || d % n_heads != 0)
        throw ConfigError("attention: model dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(n_heads));
    if (mask.defined() && (mask.rank() != 2 || mask.dim(0) != tq || mask.dim(1) != tk))
        throw ShapeError("attention: mask shape " + shape_str(mask.shape()) +
                         " does not match [" + std::to_string(tq) + "x" + std::to_string(tk) + "]");
    int64_t dh = d / n_heads;
    S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));
    auto out = TensorT<S>::zeros({tq, d});
    // Per-head softmax probabilities are kept for backward.
    auto probs = std::make_shared<std::vector<std::vector<S>>>(n_heads);
    const S *qd = q.data().data(), *kd = k.data().data(), *vd = v.data().data();
    const S *md = mask.defined() ? mask.data().data() : nullptr;
    for (int64_t h = 0; h < n_heads; ++h) {
        auto &P = (*probs)[h];
        P.assign(static_cast<size_t>(tq) * tk, S(0));
        for (int64_t i = 0; i < tq; ++i) {
            S *prow = P.data() + i * tk;
            for (int64_t j = 0; j < tk; ++j) {
                S acc = S(0);
                const S *qrow = qd + i * d + h * dh;
                const S *krow = kd + j * d + h * dh;
                for (int64_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
                prow[j] = acc * inv_scale + (md ? md[i * tk + j] : S(0));
            }
            S mx = prow[0];
            for (int64_t j = 1; j < tk; ++j) mx = std::max(mx, prow[j]);
            S sum = S(0);
            for (int64_t j = 0; j < tk; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                sum += prow[j];
            }
            for (int64_t j = 0; j < tk; ++j) prow[j] /= sum;
            S *orow = out.data().data() + i * d + h * dh;
            for (int64_t j = 0; j < tk; ++j) {
                S pv = prow[j];
                if (pv == S(0)) continue;
                const S *vrow = vd + j * d + h * dh;
                for (int64_t c = 0; c < dh; ++c) orow[c] += pv * vrow[c];
            }
        }
    }
    if (detail::want_grad<S>({&q, &k, &v})) {
        out.set_requires_grad(true);
        TapeT<S>::current()->record(
            {q, k, v}, out, [q, k, v, out, probs, n_heads, tq, tk, d, dh, inv_scale]() {
                const S *go = out.grad().data();
                const S *qd2 = q.data().data();
                const S *kd2 = k.data().data();
                const S *vd2 = v.data().data();
                std::vector<S> dS(static_cast<size_t>(tq) * tk);
                for (int64_t h = 0; h < n_heads; ++h) {
                    const auto &P = (*probs)[h];
                    for (int64_t i = 0; i < tq; ++i) {
                        const S *grow = go + i * d + h * dh;
                        // dP then dS = P .* (dP - rowdot)
                        S rowdot = S(0);
                        for (int64_t j = 0; j < tk; ++j) {
                            const S *vrow = vd2 + j * d + h * dh;
                            S acc = S(0);
                            for (int64_t c = 0; c < dh; ++c) acc += grow[c] * vrow[c];
                            dS[i * tk + j] = acc;
                            rowdot += acc * P[i * tk + j];
                        }
                        for (int64_t j = 0; j < tk; ++j)
                            dS[i * tk + j] = P[i * tk + j] * (dS[i * tk + j] - rowdot);
                    }
                    if (v.requires_grad()) {
                        auto &gv = v.grad();
                        for (int64_t j = 0; j < tk; ++j) {
                            S *gvrow = gv.data() + j * d + h * dh;
                            for (int64_t i = 0; i < tq; ++i) {
                                S pv = P[i * tk + j];
                                if (pv == S(0)) continue;
                                const S *grow = go + i * d + h * dh;
                                for (int64_t c = 0; c < dh; ++c) gvrow[c] += pv * grow[c];
                            }
                        }
                    }
                    if (q.requires_grad()) {
                        auto &gq = q.grad();
                        for (int64_t i = 0; i < tq; ++i) {
                            S *gqrow = gq.data() + i * d + h * dh;
                            for (int64_t j = 0; j < tk; ++j) {
                                S sv = dS[i * tk + j] * inv_scale;
                                if (sv == S(0)) continue;
                                const S *krow = kd2 + j * d + h * dh;
                                for (int64_t c = 0; c < dh; ++c) gqrow[c] += sv * krow[c];
                            }
                        }
                    }
                    if (k.requires_grad()) {
                        auto &gk = k.grad();
                        for (int64_t j = 0; j < tk; ++j) {
                            S *gkrow = gk.data() + j * d + h * dh;
                            for (int64_t i = 0; i < tq; ++i) {
                                S sv = dS[i * tk + j] * inv_scale;
                                if (sv == S(0)) continue;
                                const S *qrow = qd2 + i * d + h * dh;
                                for (int64_t c = 0; c < dh; ++c) gkrow[c] += sv * qrow[c];
                            }
                        }
                    }
                }
            });
    }
    return out;
}

}  // namespace frappe

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "dstfuse/errors.hpp"
#include "dstfuse/rng.hpp"

namespace dstfuse {

/// Dense row-major tensor of rank <= 3, double precision.
///
/// Tensors are immutable after creation except for gradient accumulation.
/// `grad` is allocated for trainable leaves and for every operation output
/// recorded on a tape; constants leave it empty, which blocks gradient flow
/// into them.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty, or same length as data
    bool requires_grad = false;

    Tensor() = default;

    Tensor(std::vector<int> shape_, std::vector<double> data_, bool requires_grad_ = false)
        : shape(std::move(shape_)), data(std::move(data_)), requires_grad(requires_grad_) {
        validate();
        if (requires_grad) grad.assign(data.size(), 0.0);
    }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    // Rank-2 accessors.
    int rows() const { return shape.at(0); }
    int cols() const { return rank() == 2 ? shape[1] : 1; }
    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    bool has_grad() const { return !grad.empty(); }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    void validate() const {
        if (shape.empty() || shape.size() > 3)
            throw DimensionError("tensor rank must be between 1 and 3");
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw DimensionError("tensor dimensions must be positive");
            n *= static_cast<std::size_t>(d);
        }
        if (n != data.size())
            throw DimensionError("data length does not match shape product");
        if (!grad.empty() && grad.size() != data.size())
            throw DimensionError("grad length does not match data length");
        for (double v : data)
            if (!std::isfinite(v)) throw NumericError("tensor holds a non-finite value");
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<double> data,
                             bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

inline TensorPtr zeros(std::vector<int> shape, bool requires_grad = false) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(std::max(d, 0));
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

inline TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(std::max(d, 0));
    return make_tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

namespace detail {
inline void ensure_finite(const Tensor& t, const char* op) {
    for (double v : t.data)
        if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
}
inline void require(bool cond, const char* msg) {
    if (!cond) throw DimensionError(msg);
}
}  // namespace detail

/// Reverse-mode tape. Operations append nodes in creation order, which is a
/// topological order of the compute graph; `backward` replays the closures in
/// reverse, visiting each node exactly once.
class Tape {
public:
    void record(TensorPtr out, std::function<void()> backward_fn) {
        if (!out->has_grad()) out->grad.assign(out->data.size(), 0.0);
        nodes_.push_back(Node{std::move(out), std::move(backward_fn)});
    }

    /// Seed d(loss)/d(loss) = 1 and propagate. `loss` must be a scalar output
    /// recorded on this tape.
    void backward(const TensorPtr& loss) {
        if (loss->numel() != 1) throw DimensionError("backward requires a scalar loss");
        if (!loss->has_grad()) throw DimensionError("loss is not attached to this tape");
        loss->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->fn) it->fn();
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        TensorPtr out;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
};

namespace detail {
// A parent receives gradient only if it participates in differentiation.
inline bool wants_grad(const TensorPtr& t) { return t->has_grad(); }

inline TensorPtr emit(Tape* tape, TensorPtr out, std::function<void()> fn) {
    if (tape) tape->record(out, std::move(fn));
    return out;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Each takes an optional tape; with tape == nullptr only the
// forward value is computed (evaluation fast path).
// ---------------------------------------------------------------------------

/// Matrix product [m x k] * [k x n] -> [m x n].
inline TensorPtr matmul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require(a->rank() == 2 && b->rank() == 2, "matmul requires rank-2 operands");
    detail::require(a->shape[1] == b->shape[0], "matmul inner dimensions disagree");
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = zeros({m, n});
    const double* ap = a->data.data();
    const double* bp = b->data.data();
    double* cp = out->data.data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = ap[i * k + p];
            if (av == 0.0) continue;
            const double* brow = bp + p * n;
            double* crow = cp + i * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    detail::ensure_finite(*out, "matmul");
    return detail::emit(tape, out, [a, b, out, m, k, n]() {
        const double* gp = out->grad.data();
        if (detail::wants_grad(a)) {
            double* gap = a->grad.data();
            const double* bp2 = b->data.data();
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = gp + i * n;
                    const double* brow = bp2 + p * n;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    gap[i * k + p] += acc;
                }
        }
        if (detail::wants_grad(b)) {
            double* gbp = b->grad.data();
            const double* ap2 = a->data.data();
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    const double av = ap2[i * k + p];
                    if (av == 0.0) continue;
                    const double* grow = gp + i * n;
                    double* brow = gbp + p * n;
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
}

inline TensorPtr transpose(Tape* tape, const TensorPtr& a) {
    detail::require(a->rank() == 2, "transpose requires a rank-2 operand");
    const int m = a->shape[0], n = a->shape[1];
    auto out = zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->data[j * m + i] = a->data[i * n + j];
    return detail::emit(tape, out, [a, out, m, n]() {
        if (!detail::wants_grad(a)) return;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[j * m + i];
    });
}

inline TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require(same_shape(*a, *b), "add requires identical shapes");
    auto out = make_tensor(a->shape, a->data);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] += b->data[i];
    detail::ensure_finite(*out, "add");
    return detail::emit(tape, out, [a, b, out]() {
        if (detail::wants_grad(a))
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        if (detail::wants_grad(b))
            for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
    });
}

inline TensorPtr sub(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require(same_shape(*a, *b), "sub requires identical shapes");
    auto out = make_tensor(a->shape, a->data);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] -= b->data[i];
    detail::ensure_finite(*out, "sub");
    return detail::emit(tape, out, [a, b, out]() {
        if (detail::wants_grad(a))
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        if (detail::wants_grad(b))
            for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] -= out->grad[i];
    });
}

/// Elementwise (Hadamard) product.
inline TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require(same_shape(*a, *b), "mul requires identical shapes");
    auto out = make_tensor(a->shape, a->data);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] *= b->data[i];
    detail::ensure_finite(*out, "mul");
    return detail::emit(tape, out, [a, b, out]() {
        if (detail::wants_grad(a))
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
        if (detail::wants_grad(b))
            for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
    });
}

/// alpha * a + beta, elementwise.
inline TensorPtr affine(Tape* tape, const TensorPtr& a, double alpha, double beta) {
    auto out = make_tensor(a->shape, a->data);
    for (double& v : out->data) v = alpha * v + beta;
    detail::ensure_finite(*out, "affine");
    return detail::emit(tape, out, [a, out, alpha]() {
        if (!detail::wants_grad(a)) return;
        for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += alpha * out->grad[i];
    });
}

/// Add a [1 x n] row vector to every row of a [m x n] matrix.
inline TensorPtr add_row_broadcast(Tape* tape, const TensorPtr& a, const TensorPtr& row) {
    detail::require(a->rank() == 2 && row->rank() == 2 && row->shape[0] == 1 &&
                        row->shape[1] == a->shape[1],
                    "add_row_broadcast requires [m x n] and [1 x n]");
    const int m = a->shape[0], n = a->shape[1];
    auto out = make_tensor(a->shape, a->data);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->data[i * n + j] += row->data[j];
    detail::ensure_finite(*out, "add_row_broadcast");
    return detail::emit(tape, out, [a, row, out, m, n]() {
        if (detail::wants_grad(a))
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        if (detail::wants_grad(row))
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) row->grad[j] += out->grad[i * n + j];
    });
}

/// Select rows of a [v x n] table by index -> [ids.size() x n].
inline TensorPtr gather_rows(Tape* tape, const TensorPtr& table, std::vector<int> ids) {
    detail::require(table->rank() == 2, "gather_rows requires a rank-2 table");
    const int n = table->shape[1];
    const int m = static_cast<int>(ids.size());
    detail::require(m > 0, "gather_rows requires at least one index");
    for (int id : ids)
        detail::require(id >= 0 && id < table->shape[0], "gather_rows index out of range");
    auto out = zeros({m, n});
    for (int i = 0; i < m; ++i)
        std::copy_n(table->data.begin() + static_cast<std::size_t>(ids[i]) * n, n,
                    out->data.begin() + static_cast<std::size_t>(i) * n);
    return detail::emit(tape, out, [table, out, ids = std::move(ids), n]() {
        if (!detail::wants_grad(table)) return;
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < n; ++j)
                table->grad[static_cast<std::size_t>(ids[i]) * n + j] += out->grad[i * n + j];
    });
}

/// Stack matrices with equal column counts along the row axis.
inline TensorPtr concat_rows(Tape* tape, const std::vector<TensorPtr>& parts) {
    detail::require(!parts.empty(), "concat_rows requires at least one part");
    const int n = parts[0]->cols();
    int m = 0;
    for (const auto& p : parts) {
        detail::require(p->rank() == 2 && p->shape[1] == n, "concat_rows column mismatch");
        m += p->shape[0];
    }
    auto out = zeros({m, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
        off += p->data.size();
    }
    return detail::emit(tape, out, [parts, out]() {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (detail::wants_grad(p))
                for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += out->grad[off + i];
            off += p->data.size();
        }
    });
}

/// Concatenate matrices with equal row counts along the column axis.
inline TensorPtr concat_cols(Tape* tape, const std::vector<TensorPtr>& parts) {
    detail::require(!parts.empty(), "concat_cols requires at least one part");
    const int m = parts[0]->shape.at(0);
    int n = 0;
    for (const auto& p : parts) {
        detail::require(p->rank() == 2 && p->shape[0] == m, "concat_cols row mismatch");
        n += p->shape[1];
    }
    auto out = zeros({m, n});
    int coff = 0;
    for (const auto& p : parts) {
        const int pn = p->shape[1];
        for (int i = 0; i < m; ++i)
            std::copy_n(p->data.begin() + static_cast<std::size_t>(i) * pn, pn,
                        out->data.begin() + static_cast<std::size_t>(i) * n + coff);
        coff += pn;
    }
    return detail::emit(tape, out, [parts, out, m, n]() {
        int coff = 0;
        for (const auto& p : parts) {
            const int pn = p->shape[1];
            if (detail::wants_grad(p))
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < pn; ++j)
                        p->grad[static_cast<std::size_t>(i) * pn + j] +=
                            out->grad[static_cast<std::size_t>(i) * n + coff + j];
            coff += pn;
        }
    });
}

/// Columns [start, start+len) of a rank-2 tensor.
inline TensorPtr slice_cols(Tape* tape, const TensorPtr& a, int start, int len) {
    detail::require(a->rank() == 2, "slice_cols requires a rank-2 operand");
    const int m = a->shape[0], n = a->shape[1];
    detail::require(start >= 0 && len > 0 && start + len <= n, "slice_cols out of range");
    auto out = zeros({m, len});
    for (int i = 0; i < m; ++i)
        std::copy_n(a->data.begin() + static_cast<std::size_t>(i) * n + start, len,
                    out->data.begin() + static_cast<std::size_t>(i) * len);
    return detail::emit(tape, out, [a, out, start, len, m, n]() {
        if (!detail::wants_grad(a)) return;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < len; ++j)
                a->grad[static_cast<std::size_t>(i) * n + start + j] +=
                    out->grad[static_cast<std::size_t>(i) * len + j];
    });
}

inline TensorPtr sigmoid(Tape* tape, const TensorPtr& a) {
    auto out = make_tensor(a->shape, a->data);
    // Kept strictly inside (0, 1): saturated values are nudged off the
    // boundary so gates and probabilities never collapse to exactly 0 or 1.
    constexpr double kLow = std::numeric_limits<double>::min();
    const double kHigh = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    for (double& v : out->data) {
        double y = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        v = std::min(std::max(y, kLow), kHigh);
    }
    detail::ensure_finite(*out, "sigmoid");
    return detail::emit(tape, out, [a, out]() {
        if (!detail::wants_grad(a)) return;
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
            const double y = out->data[i];
            a->grad[i] += out->grad[i] * y * (1.0 - y);
        }
    });
}

inline TensorPtr tanh_op(Tape* tape, const TensorPtr& a) {
    auto out = make_tensor(a->shape, a->data);
    for (double& v : out->data) v = std::tanh(v);
    return detail::emit(tape, out, [a, out]() {
        if (!detail::wants_grad(a)) return;
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
            const double y = out->data[i];
            a->grad[i] += out->grad[i] * (1.0 - y * y);
        }
    });
}

/// Smooth GELU (tanh form), used in feed-forward blocks.
inline TensorPtr gelu(Tape* tape, const TensorPtr& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    auto out = make_tensor(a->shape, a->data);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        const double x = a->data[i];
        out->data[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
    }
    detail::ensure_finite(*out, "gelu");
    return detail::emit(tape, out, [a, out]() {
        if (!detail::wants_grad(a)) return;
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
            const double x = a->data[i];
            const double t = std::tanh(kC * (x + kA * x * x * x));
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
            a->grad[i] += out->grad[i] * d;
        }
    });
}

/// Softmax along `axis` (0 or 1 for rank-2; rank-1 tensors use their only
/// axis). Max-subtracted, so arbitrarily large finite inputs are safe.
inline TensorPtr softmax(Tape* tape, const TensorPtr& a, int axis = -1) {
    detail::require(a->rank() <= 2, "softmax supports rank-1 and rank-2 tensors");
    const int m = a->rank() == 2 ? a->shape[0] : 1;
    const int n = a->rank() == 2 ? a->shape[1] : a->shape[0];
    if (axis < 0) axis = a->rank() == 2 ? 1 : 0;
    if (a->rank() == 1) axis = 1;  // single line
    detail::require(axis == 0 || axis == 1, "softmax axis must be 0 or 1");

    const int lines = axis == 1 ? m : n;
    const int width = axis == 1 ? n : m;
    auto idx = [axis, n](int line, int j) {
        return axis == 1 ? static_cast<std::size_t>(line) * n + j
                         : static_cast<std::size_t>(j) * n + line;
    };

    auto out = make_tensor(a->shape, a->data);
    for (int l = 0; l < lines; ++l) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < width; ++j) mx = std::max(mx, a->data[idx(l, j)]);
        double sum = 0.0;
        for (int j = 0; j < width; ++j) {
            const double e = std::exp(a->data[idx(l, j)] - mx);
            out->data[idx(l, j)] = e;
            sum += e;
        }
        for (int j = 0; j < width; ++j) out->data[idx(l, j)] /= sum;
    }
    detail::ensure_finite(*out, "softmax");
    return detail::emit(tape, out, [a, out, lines, width, idx]() {
        if (!detail::wants_grad(a)) return;
        for (int l = 0; l < lines; ++l) {
            double dot = 0.0;
            for (int j = 0; j < width; ++j) dot += out->grad[idx(l, j)] * out->data[idx(l, j)];
            for (int j = 0; j < width; ++j)
                a->grad[idx(l, j)] += out->data[idx(l, j)] * (out->grad[idx(l, j)] - dot);
        }
    });
}

/// Row-wise layer normalization with learned gain/bias [1 x n].
inline TensorPtr layer_norm(Tape* tape, const TensorPtr& a, const TensorPtr& gain,
                            const TensorPtr& bias, double eps = 1e-5) {
    detail::require(a->rank() == 2, "layer_norm requires a rank-2 operand");
    const int m = a->shape[0], n = a->shape[1];
    detail::require(n >= 2, "layer_norm requires at least two features");
    detail::require(gain->rank() == 2 && gain->shape[0] == 1 && gain->shape[1] == n &&
                        same_shape(*gain, *bias),
                    "layer_norm gain/bias must be [1 x n]");
    auto out = zeros({m, n});
    // Normalized activations and inverse stddev are needed by the closure.
    auto xhat = std::make_shared<std::vector<double>>(a->data.size());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (int i = 0; i < m; ++i) {
        const double* row = a->data.data() + static_cast<std::size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int j = 0; j < n; ++j) {
            const double xh = (row[j] - mean) * is;
            (*xhat)[static_cast<std::size_t>(i) * n + j] = xh;
            out->data[static_cast<std::size_t>(i) * n + j] = xh * gain->data[j] + bias->data[j];
        }
    }
    detail::ensure_finite(*out, "layer_norm");
    return detail::emit(tape, out, [a, gain, bias, out, xhat, inv_std, m, n]() {
        for (int i = 0; i < m; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * n;
            if (detail::wants_grad(gain))
                for (int j = 0; j < n; ++j) gain->grad[j] += out->grad[base + j] * (*xhat)[base + j];
            if (detail::wants_grad(bias))
                for (int j = 0; j < n; ++j) bias->grad[j] += out->grad[base + j];
            if (detail::wants_grad(a)) {
                double mean_dy = 0.0, mean_dyxh = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double dyh = out->grad[base + j] * gain->data[j];
                    mean_dy += dyh;
                    mean_dyxh += dyh * (*xhat)[base + j];
                }
                mean_dy /= n;
                mean_dyxh /= n;
                for (int j = 0; j < n; ++j) {
                    const double dyh = out->grad[base + j] * gain->data[j];
                    a->grad[base + j] +=
                        (*inv_std)[i] * (dyh - mean_dy - (*xhat)[base + j] * mean_dyxh);
                }
            }
        }
    });
}

/// Inverted dropout. Identity when not training or rate == 0 (the input
/// tensor is returned unchanged).
inline TensorPtr dropout(Tape* tape, const TensorPtr& a, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
    if (!training || rate == 0.0) return a;
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(a->data.size());
    auto out = make_tensor(a->shape, a->data);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        const double m = rng.bernoulli(rate) ? 0.0 : 1.0 / keep;
        (*mask)[i] = m;
        out->data[i] *= m;
    }
    return detail::emit(tape, out, [a, out, mask]() {
        if (!detail::wants_grad(a)) return;
        for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * (*mask)[i];
    });
}

/// Euclidean distance between two same-shape tensors -> scalar [1].
inline TensorPtr l2_distance(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require(same_shape(*a, *b), "l2_distance requires identical shapes");
    double acc = 0.0;
    for (std::size_t i = 0; i < a->data.size(); ++i) {
        const double d = a->data[i] - b->data[i];
        acc += d * d;
    }
    auto out = make_tensor({1}, {std::sqrt(acc)});
    return detail::emit(tape, out, [a, b, out]() {
        const double dist = out->data[0];
        if (dist == 0.0) return;  // not differentiable at coincidence; leave zero
        const double g = out->grad[0] / dist;
        for (std::size_t i = 0; i < a->data.size(); ++i) {
            const double d = (a->data[i] - b->data[i]) * g;
            if (detail::wants_grad(a)) a->grad[i] += d;
            if (detail::wants_grad(b)) b->grad[i] -= d;
        }
    });
}

/// Negative Euclidean distances from a [1 x d] query to each row of a
/// [k x d] candidate matrix -> [1 x k].
inline TensorPtr distance_scores(Tape* tape, const TensorPtr& query, const TensorPtr& candidates) {
    detail::require(query->rank() == 2 && query->shape[0] == 1, "distance_scores query must be [1 x d]");
    detail::require(candidates->rank() == 2 && candidates->shape[1] == query->shape[1],
                    "distance_scores candidate width mismatch");
    const int k = candidates->shape[0], d = query->shape[1];
    auto out = zeros({1, k});
    for (int c = 0; c < k; ++c) {
        double acc = 0.0;
        const double* row = candidates->data.data() + static_cast<std::size_t>(c) * d;
        for (int j = 0; j < d; ++j) {
            const double diff = query->data[j] - row[j];
            acc += diff * diff;
        }
        out->data[c] = -std::sqrt(acc);
    }
    detail::ensure_finite(*out, "distance_scores");
    return detail::emit(tape, out, [query, candidates, out, k, d]() {
        for (int c = 0; c < k; ++c) {
            const double dist = -out->data[c];
            if (dist == 0.0) continue;
            const double g = out->grad[c] / dist;
            const double* row = candidates->data.data() + static_cast<std::size_t>(c) * d;
            for (int j = 0; j < d; ++j) {
                const double diff = query->data[j] - row[j];
                if (detail::wants_grad(query)) query->grad[j] -= g * diff;
                if (detail::wants_grad(candidates))
                    candidates->grad[static_cast<std::size_t>(c) * d + j] += g * diff;
            }
        }
    });
}

/// Natural log, elementwise. Inputs must be strictly positive.
inline TensorPtr log_op(Tape* tape, const TensorPtr& a) {
    auto out = make_tensor(a->shape, a->data);
    for (double& v : out->data) {
        if (v <= 0.0) throw NumericError("log of a non-positive value");
        v = std::log(v);
    }
    return detail::emit(tape, out, [a, out]() {
        if (!detail::wants_grad(a)) return;
        for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] / a->data[i];
    });
}

/// Element at flat position `index` of a tensor -> scalar [1].
inline TensorPtr pick(Tape* tape, const TensorPtr& a, int index) {
    detail::require(index >= 0 && static_cast<std::size_t>(index) < a->numel(), "pick index out of range");
    auto out = make_tensor({1}, {a->data[index]});
    return detail::emit(tape, out, [a, out, index]() {
        if (detail::wants_grad(a)) a->grad[index] += out->grad[0];
    });
}

/// Sum of all elements -> scalar [1].
inline TensorPtr sum_all(Tape* tape, const TensorPtr& a) {
    double acc = 0.0;
    for (double v : a->data) acc += v;
    auto out = make_tensor({1}, {acc});
    detail::ensure_finite(*out, "sum_all");
    return detail::emit(tape, out, [a, out]() {
        if (!detail::wants_grad(a)) return;
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[0];
    });
}

/// Sum of scalar terms -> scalar [1].
inline TensorPtr sum_scalars(Tape* tape, const std::vector<TensorPtr>& terms) {
    detail::require(!terms.empty(), "sum_scalars requires at least one term");
    double acc = 0.0;
    for (const auto& t : terms) {
        detail::require(t->numel() == 1, "sum_scalars terms must be scalars");
        acc += t->data[0];
    }
    auto out = make_tensor({1}, {acc});
    detail::ensure_finite(*out, "sum_scalars");
    return detail::emit(tape, out, [terms, out]() {
        for (const auto& t : terms)
            if (detail::wants_grad(t)) t->grad[0] += out->grad[0];
    });
}

/// (1 - g) * off + g * on, elementwise; gates stay on the segment between
/// their two inputs.
inline TensorPtr convex_mix(Tape* tape, const TensorPtr& g, const TensorPtr& on,
                            const TensorPtr& off) {
    detail::require(same_shape(*g, *on) && same_shape(*g, *off), "convex_mix shape mismatch");
    auto out = make_tensor(g->shape, g->data);
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = (1.0 - g->data[i]) * off->data[i] + g->data[i] * on->data[i];
    detail::ensure_finite(*out, "convex_mix");
    return detail::emit(tape, out, [g, on, off, out]() {
        for (std::size_t i = 0; i < out->grad.size(); ++i) {
            const double dy = out->grad[i];
            if (detail::wants_grad(g)) g->grad[i] += dy * (on->data[i] - off->data[i]);
            if (detail::wants_grad(on)) on->grad[i] += dy * g->data[i];
            if (detail::wants_grad(off)) off->grad[i] += dy * (1.0 - g->data[i]);
        }
    });
}

}  // namespace dstfuse

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dstfuse/tensor.hpp"

namespace dstfuse {

using NamedParams = std::vector<std::pair<std::string, TensorPtr>>;

inline TensorPtr xavier_uniform(int rows, int cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / (rows + cols));
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    for (auto& v : data) v = rng.uniform(-limit, limit);
    return make_tensor({rows, cols}, std::move(data), /*requires_grad=*/true);
}

struct Linear {
    TensorPtr w, b;

    Linear() = default;
    Linear(int in, int out, Rng& rng)
        : w(xavier_uniform(in, out, rng)), b(zeros({1, out}, true)) {}

    TensorPtr forward(Tape* tape, const TensorPtr& x) const {
        return add_row_broadcast(tape, matmul(tape, x, w), b);
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

/// Learned elementwise gain/bias for layer normalization.
struct NormParams {
    TensorPtr gain, bias;

    NormParams() = default;
    explicit NormParams(int d) : gain(full({1, d}, 1.0, true)), bias(zeros({1, d}, true)) {}

    TensorPtr forward(Tape* tape, const TensorPtr& x) const {
        return layer_norm(tape, x, gain, bias);
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".gain", gain);
        out.emplace_back(prefix + ".bias", bias);
    }
};

struct AttentionResult {
    TensorPtr out;                    // [Tq x d]
    std::vector<TensorPtr> weights;   // per head, [Tq x Tk], rows sum to 1
};

/// Scaled dot-product multi-head attention (scale 1/sqrt(d/H)). Query, key
/// and value projections plus an output projection; no parameters are shared
/// between instances.
struct MultiHeadAttention {
    Linear q, k, v, o;
    int heads = 1;
    int d = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(int d_model, int n_heads, Rng& rng)
        : q(d_model, d_model, rng),
          k(d_model, d_model, rng),
          v(d_model, d_model, rng),
          o(d_model, d_model, rng),
          heads(n_heads),
          d(d_model) {
        if (d_model % n_heads != 0)
            throw ConfigError("model dimension must be divisible by the head count");
    }

    AttentionResult forward(Tape* tape, const TensorPtr& query, const TensorPtr& keys,
                            const TensorPtr& values) const {
        if (keys->shape[0] != values->shape[0])
            throw DimensionError("attention keys and values must align");
        const int dk = d / heads;
        auto qp = q.forward(tape, query);
        auto kp = k.forward(tape, keys);
        auto vp = v.forward(tape, values);
        AttentionResult res;
        std::vector<TensorPtr> head_outs;
        for (int h = 0; h < heads; ++h) {
            auto qh = slice_cols(tape, qp, h * dk, dk);
            auto kh = slice_cols(tape, kp, h * dk, dk);
            auto vh = slice_cols(tape, vp, h * dk, dk);
            auto scores = affine(tape, matmul(tape, qh, transpose(tape, kh)),
                                 1.0 / std::sqrt(static_cast<double>(dk)), 0.0);
            auto weights = softmax(tape, scores, 1);
            res.weights.push_back(weights);
            head_outs.push_back(matmul(tape, weights, vh));
        }
        res.out = o.forward(tape, concat_cols(tape, head_outs));
        return res;
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        q.collect(prefix + ".q", out);
        k.collect(prefix + ".k", out);
        v.collect(prefix + ".v", out);
        o.collect(prefix + ".o", out);
    }
};

/// Post-norm transformer encoder layer: self-attention and a GELU
/// feed-forward block, each wrapped in residual + layer norm.
struct TransformerLayer {
    MultiHeadAttention attn;
    Linear ff1, ff2;
    NormParams norm1, norm2;

    TransformerLayer() = default;
    TransformerLayer(int d, int heads, int dff, Rng& rng)
        : attn(d, heads, rng), ff1(d, dff, rng), ff2(dff, d, rng), norm1(d), norm2(d) {}

    TensorPtr forward(Tape* tape, const TensorPtr& x, double dropout_rate, bool training,
                      Rng& rng) const {
        auto a = attn.forward(tape, x, x, x).out;
        a = dropout(tape, a, dropout_rate, training, rng);
        auto h = norm1.forward(tape, add(tape, x, a));
        auto f = ff2.forward(tape, gelu(tape, ff1.forward(tape, h)));
        f = dropout(tape, f, dropout_rate, training, rng);
        return norm2.forward(tape, add(tape, h, f));
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        attn.collect(prefix + ".attn", out);
        ff1.collect(prefix + ".ff1", out);
        ff2.collect(prefix + ".ff2", out);
        norm1.collect(prefix + ".norm1", out);
        norm2.collect(prefix + ".norm2", out);
    }
};

/// Sinusoidal position table [len x d]; a constant, never trained.
inline TensorPtr sinusoidal_positions(int len, int d) {
    std::vector<double> data(static_cast<std::size_t>(len) * d);
    for (int pos = 0; pos < len; ++pos)
        for (int i = 0; i < d; ++i) {
            const double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / d);
            data[static_cast<std::size_t>(pos) * d + i] = (i % 2 == 0) ? std::sin(angle)
                                                                       : std::cos(angle);
        }
    return make_tensor({len, d}, std::move(data));
}

}  // namespace dstfuse

#pragma once

// Dense building blocks with explicit forward caches and hand-written backward
// passes. Activations are (rows = time steps) x (cols = features).

#include "mirage/core.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace mirage::nn {

enum class Precision : std::uint8_t { full, mixed };

struct Parameter {
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(Eigen::Index rows, Eigen::Index cols) : value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Per-call forward options. Modules never keep per-call state.
struct ForwardOptions {
    bool training = false;
    Precision precision = Precision::full;
    Rng* rng = nullptr;  // dropout stream; required when training with dropout
};

inline Matrix matmul(const Matrix& a, const Matrix& b, Precision precision)
{
    if (precision == Precision::mixed) {
        const Eigen::MatrixXf af = a.cast<float>();
        const Eigen::MatrixXf bf = b.cast<float>();
        return (af * bf).cast<double>();
    }
    return a * b;
}

inline void fill_uniform(Matrix& m, double bound, Rng& rng)
{
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
}

inline void fill_normal(Matrix& m, double stddev, Rng& rng)
{
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
}

/// Inverted dropout mask (entries 0 or 1/(1-p)).
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng)
{
    std::bernoulli_distribution keep(1.0 - p);
    Matrix mask(rows, cols);
    const double scale = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = keep(rng) ? scale : 0.0;
    }
    return mask;
}

/// y = x W + b with W stored (in x out).
struct Linear {
    Parameter weight;
    Parameter bias;

    Linear() = default;
    Linear(Eigen::Index in, Eigen::Index out) : weight(in, out), bias(1, out) {}

    [[nodiscard]] Eigen::Index in_features() const { return weight.value.rows(); }
    [[nodiscard]] Eigen::Index out_features() const { return weight.value.cols(); }

    void init(Rng& rng)
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
        fill_uniform(weight.value, bound, rng);
        fill_uniform(bias.value, bound, rng);
    }

    [[nodiscard]] Matrix forward(const Matrix& x, Precision precision = Precision::full) const
    {
        Matrix y = matmul(x, weight.value, precision);
        y.rowwise() += bias.value.row(0);
        return y;
    }

    /// Accumulates parameter gradients and returns d(loss)/dx.
    Matrix backward(const Matrix& x, const Matrix& dy)
    {
        weight.grad.noalias() += x.transpose() * dy;
        bias.grad.row(0) += dy.colwise().sum();
        return dy * weight.value.transpose();
    }

    /// Parameter-only backward for inputs that need no gradient.
    void backward_params(const Matrix& x, const Matrix& dy)
    {
        weight.grad.noalias() += x.transpose() * dy;
        bias.grad.row(0) += dy.colwise().sum();
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

/// Row-wise layer normalization.
struct LayerNorm {
    Parameter gamma;
    Parameter beta;
    double eps = 1e-5;

    struct Cache {
        Matrix normalized;
        Vector inv_std;
    };

    LayerNorm() = default;
    explicit LayerNorm(Eigen::Index width) : gamma(1, width), beta(1, width) { gamma.value.setOnes(); }

    [[nodiscard]] Matrix forward(const Matrix& x, Cache& cache) const
    {
        const double n = static_cast<double>(x.cols());
        const Vector mean = x.rowwise().sum() / n;
        Matrix centered = x.colwise() - mean;
        const Vector var = centered.array().square().rowwise().sum() / n;
        cache.inv_std = (var.array() + eps).rsqrt();
        cache.normalized = centered.array().colwise() * cache.inv_std.array();
        Matrix y = cache.normalized.array().rowwise() * gamma.value.row(0).array();
        y.rowwise() += beta.value.row(0);
        return y;
    }

    Matrix backward(const Cache& cache, const Matrix& dy)
    {
        gamma.grad.row(0) += (dy.array() * cache.normalized.array()).matrix().colwise().sum();
        beta.grad.row(0) += dy.colwise().sum();
        const Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
        const double n = static_cast<double>(dy.cols());
        const Vector mean_d = dxhat.rowwise().sum() / n;
        const Vector mean_dx = (dxhat.array() * cache.normalized.array()).rowwise().sum() / n;
        Matrix dx = dxhat.colwise() - mean_d;
        dx -= (cache.normalized.array().colwise() * mean_dx.array()).matrix();
        return dx.array().colwise() * cache.inv_std.array();
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        f(prefix + ".gamma", gamma);
        f(prefix + ".beta", beta);
    }
};

// Exact (erf) GELU.
inline Matrix gelu(const Matrix& x)
{
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
}

inline Matrix gelu_backward(const Matrix& x, const Matrix& dy)
{
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const Matrix dgelu = x.unaryExpr([inv_sqrt_2pi](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    return dy.cwiseProduct(dgelu);
}

/// In-place row softmax.
inline void softmax_rows(Matrix& s)
{
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
    }
}

/// d(logits) for row softmax given the probabilities and d(probs).
inline Matrix softmax_rows_backward(const Matrix& probs, const Matrix& dprobs)
{
    const Vector dot = (probs.array() * dprobs.array()).rowwise().sum();
    return probs.array() * (dprobs.colwise() - dot).array();
}

/// Rotary position embedding with interleaved pairs (2i, 2i+1) inside each head.
struct Rotary {
    Matrix cos;  // frames x (head_dim / 2)
    Matrix sin;

    Rotary() = default;
    Rotary(Eigen::Index frames, Eigen::Index head_dim, double base = 10000.0) : cos(frames, head_dim / 2), sin(frames, head_dim / 2)
    {
        for (Eigen::Index t = 0; t < frames; ++t) {
            for (Eigen::Index i = 0; i < head_dim / 2; ++i) {
                const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
                const double angle = static_cast<double>(t) * freq;
                cos(t, i) = std::cos(angle);
                sin(t, i) = std::sin(angle);
            }
        }
    }

    /// Rotates every head block of `x` (T x heads*head_dim). `inverse` applies the transpose.
    void apply(Matrix& x, Eigen::Index heads, bool inverse = false) const
    {
        const Eigen::Index head_dim = x.cols() / heads;
        const double sign = inverse ? -1.0 : 1.0;
        for (Eigen::Index t = 0; t < x.rows(); ++t) {
            for (Eigen::Index h = 0; h < heads; ++h) {
                for (Eigen::Index i = 0; i < head_dim / 2; ++i) {
                    const Eigen::Index c0 = h * head_dim + 2 * i;
                    const double a = x(t, c0);
                    const double b = x(t, c0 + 1);
                    const double c = cos(t, i);
                    const double s = sign * sin(t, i);
                    x(t, c0) = a * c - b * s;
                    x(t, c0 + 1) = a * s + b * c;
                }
            }
        }
    }
};

/// Multi-head self-attention along time, no causal mask, optional rotary.
struct SelfAttention {
    Linear query;
    Linear key;
    Linear value;
    Linear output;
    Eigen::Index heads = 1;

    struct Cache {
        Matrix input;
        Matrix q;  // rotated
        Matrix k;  // rotated
        Matrix v;
        std::vector<Matrix> probs;  // per head, T x T
        Matrix context;             // concatenated head outputs
    };

    SelfAttention() = default;
    SelfAttention(Eigen::Index width, Eigen::Index n_heads)
        : query(width, width), key(width, width), value(width, width), output(width, width), heads(n_heads)
    {
    }

    void init(Rng& rng)
    {
        query.init(rng);
        key.init(rng);
        value.init(rng);
        output.init(rng);
    }

    [[nodiscard]] Matrix forward(const Matrix& x, const Rotary* rotary, Precision precision, Cache& cache) const
    {
        const Eigen::Index width = x.cols();
        const Eigen::Index head_dim = width / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
        cache.input = x;
        cache.q = query.forward(x, precision);
        cache.k = key.forward(x, precision);
        cache.v = value.forward(x, precision);
        if (rotary != nullptr) {
            rotary->apply(cache.q, heads);
            rotary->apply(cache.k, heads);
        }
        cache.probs.resize(static_cast<std::size_t>(heads));
        cache.context.resize(x.rows(), width);
        for (Eigen::Index h = 0; h < heads; ++h) {
            Matrix& p = cache.probs[static_cast<std::size_t>(h)];
            p = cache.q.middleCols(h * head_dim, head_dim) * cache.k.middleCols(h * head_dim, head_dim).transpose() * scale;
            softmax_rows(p);
            cache.context.middleCols(h * head_dim, head_dim).noalias() = p * cache.v.middleCols(h * head_dim, head_dim);
        }
        return output.forward(cache.context, precision);
    }

    Matrix backward(const Cache& cache, const Matrix& dy, const Rotary* rotary)
    {
        const Eigen::Index width = dy.cols();
        const Eigen::Index head_dim = width / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
        const Matrix dcontext = output.backward(cache.context, dy);
        Matrix dq(dy.rows(), width);
        Matrix dk(dy.rows(), width);
        Matrix dv(dy.rows(), width);
        for (Eigen::Index h = 0; h < heads; ++h) {
            const Matrix& p = cache.probs[static_cast<std::size_t>(h)];
            const auto dctx_h = dcontext.middleCols(h * head_dim, head_dim);
            dv.middleCols(h * head_dim, head_dim).noalias() = p.transpose() * dctx_h;
            const Matrix dp = dctx_h * cache.v.middleCols(h * head_dim, head_dim).transpose();
            const Matrix ds = softmax_rows_backward(p, dp) * scale;
            dq.middleCols(h * head_dim, head_dim).noalias() = ds * cache.k.middleCols(h * head_dim, head_dim);
            dk.middleCols(h * head_dim, head_dim).noalias() = ds.transpose() * cache.q.middleCols(h * head_dim, head_dim);
        }
        if (rotary != nullptr) {
            rotary->apply(dq, heads, true);
            rotary->apply(dk, heads, true);
        }
        Matrix dx = query.backward(cache.input, dq);
        dx += key.backward(cache.input, dk);
        dx += value.backward(cache.input, dv);
        return dx;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        query.visit(prefix + ".query", f);
        key.visit(prefix + ".key", f);
        value.visit(prefix + ".value", f);
        output.visit(prefix + ".output", f);
    }
};

/// GELU MLP: width -> hidden -> width.
struct FeedForward {
    Linear up;
    Linear down;

    struct Cache {
        Matrix input;
        Matrix pre;   // before GELU
        Matrix post;  // after GELU
    };

    FeedForward() = default;
    FeedForward(Eigen::Index width, Eigen::Index hidden) : up(width, hidden), down(hidden, width) {}

    void init(Rng& rng)
    {
        up.init(rng);
        down.init(rng);
    }

    [[nodiscard]] Matrix forward(const Matrix& x, Precision precision, Cache& cache) const
    {
        cache.input = x;
        cache.pre = up.forward(x, precision);
        cache.post = gelu(cache.pre);
        return down.forward(cache.post, precision);
    }

    Matrix backward(const Cache& cache, const Matrix& dy)
    {
        const Matrix dpost = down.backward(cache.post, dy);
        const Matrix dpre = gelu_backward(cache.pre, dpost);
        return up.backward(cache.input, dpre);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        up.visit(prefix + ".up", f);
        down.visit(prefix + ".down", f);
    }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then + FF(LN(.)).
struct TransformerBlock {
    LayerNorm norm1;
    SelfAttention attention;
    LayerNorm norm2;
    FeedForward ff;
    double dropout = 0.0;

    struct Cache {
        LayerNorm::Cache norm1;
        SelfAttention::Cache attention;
        LayerNorm::Cache norm2;
        FeedForward::Cache ff;
        Matrix mask1;  // empty when dropout inactive
        Matrix mask2;
    };

    TransformerBlock() = default;
    TransformerBlock(Eigen::Index width, Eigen::Index heads, Eigen::Index ff_hidden, double drop)
        : norm1(width), attention(width, heads), norm2(width), ff(width, ff_hidden), dropout(drop)
    {
    }

    /// With `zero_branch_outputs` each residual branch starts at zero, so the block is the identity.
    void init(Rng& rng, bool zero_branch_outputs = false)
    {
        attention.init(rng);
        ff.init(rng);
        if (zero_branch_outputs) {
            for (Linear* out : {&attention.output, &ff.down}) {
                out->weight.value.setZero();
                out->bias.value.setZero();
            }
        }
    }

    [[nodiscard]] Matrix forward(const Matrix& x, const Rotary* rotary, const ForwardOptions& opts, Cache& cache) const
    {
        const bool drop = opts.training && dropout > 0.0;
        Matrix branch = attention.forward(norm1.forward(x, cache.norm1), rotary, opts.precision, cache.attention);
        if (drop) {
            cache.mask1 = dropout_mask(branch.rows(), branch.cols(), dropout, *opts.rng);
            branch.array() *= cache.mask1.array();
        } else {
            cache.mask1.resize(0, 0);
        }
        Matrix h = x + branch;
        branch = ff.forward(norm2.forward(h, cache.norm2), opts.precision, cache.ff);
        if (drop) {
            cache.mask2 = dropout_mask(branch.rows(), branch.cols(), dropout, *opts.rng);
            branch.array() *= cache.mask2.array();
        } else {
            cache.mask2.resize(0, 0);
        }
        return h + branch;
    }

    Matrix backward(const Cache& cache, const Matrix& dy, const Rotary* rotary)
    {
        Matrix dbranch = dy;
        if (cache.mask2.size() != 0) {
            dbranch.array() *= cache.mask2.array();
        }
        Matrix dh = dy + norm2.backward(cache.norm2, ff.backward(cache.ff, dbranch));
        dbranch = dh;
        if (cache.mask1.size() != 0) {
            dbranch.array() *= cache.mask1.array();
        }
        return dh + norm1.backward(cache.norm1, attention.backward(cache.attention, dbranch, rotary));
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        norm1.visit(prefix + ".norm1", f);
        attention.visit(prefix + ".attention", f);
        norm2.visit(prefix + ".norm2", f);
        ff.visit(prefix + ".ff", f);
    }
};

}  // namespace mirage::nn

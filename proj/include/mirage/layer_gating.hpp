#pragma once

// Aggregation over the backbone layer axis, one pooler per modality.

#include "mirage/core.hpp"
#include "mirage/feature_store.hpp"
#include "mirage/nn.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mirage {

enum class PoolerKind : std::uint8_t { xattn, mean, depth_groups };

inline std::string_view to_string(PoolerKind kind)
{
    switch (kind) {
    case PoolerKind::xattn: return "xattn";
    case PoolerKind::mean: return "mean";
    case PoolerKind::depth_groups: return "depth_groups";
    }
    return "?";
}

inline PoolerKind parse_pooler_kind(std::string_view name)
{
    if (name == "xattn") {
        return PoolerKind::xattn;
    }
    if (name == "mean") {
        return PoolerKind::mean;
    }
    if (name == "depth_groups") {
        return PoolerKind::depth_groups;
    }
    throw ConfigError("unknown pooler kind '" + std::string(name) + "' (expected xattn, mean or depth_groups)");
}

struct PoolerConfig {
    PoolerKind kind = PoolerKind::xattn;
    int n_queries = 24;
    int n_heads = 4;
    double attention_dropout = 0.2;

    void validate(int hidden) const
    {
        if (n_queries < 1) {
            throw ConfigError("pooler needs n_queries >= 1");
        }
        if (n_heads < 1 || hidden % n_heads != 0) {
            throw ConfigError("pooler hidden size must be divisible by its head count");
        }
        if (attention_dropout < 0.0 || attention_dropout >= 1.0) {
            throw ConfigError("attention dropout must lie in [0, 1)");
        }
    }

    /// Width of the pooled per-frame vector for hidden size d.
    [[nodiscard]] int output_width(int hidden) const
    {
        switch (kind) {
        case PoolerKind::xattn: return n_queries * hidden;
        case PoolerKind::mean: return hidden;
        case PoolerKind::depth_groups: return 2 * hidden;
        }
        return hidden;
    }
};

/// Captured post-softmax layer weights, laid out (batch, time, head, query, layer).
struct AttentionWeights {
    Eigen::Index batch = 0;
    Eigen::Index frames = 0;
    Eigen::Index heads = 0;
    Eigen::Index queries = 0;
    Eigen::Index layers = 0;
    std::vector<double> data;

    AttentionWeights() = default;
    AttentionWeights(Eigen::Index b, Eigen::Index t, Eigen::Index h, Eigen::Index q, Eigen::Index l)
        : batch(b), frames(t), heads(h), queries(q), layers(l), data(static_cast<std::size_t>(b * t * h * q * l), 0.0)
    {
    }

    [[nodiscard]] std::size_t index(Eigen::Index b, Eigen::Index t, Eigen::Index k, Eigen::Index q, Eigen::Index l) const
    {
        return static_cast<std::size_t>((((b * frames + t) * heads + k) * queries + q) * layers + l);
    }
    double& operator()(Eigen::Index b, Eigen::Index t, Eigen::Index k, Eigen::Index q, Eigen::Index l)
    {
        return data[index(b, t, k, q, l)];
    }
    double operator()(Eigen::Index b, Eigen::Index t, Eigen::Index k, Eigen::Index q, Eigen::Index l) const
    {
        return data[index(b, t, k, q, l)];
    }

    [[nodiscard]] bool same_shape_except_batch(const AttentionWeights& o) const
    {
        return frames == o.frames && heads == o.heads && queries == o.queries && layers == o.layers;
    }

    /// Stacks along the batch axis.
    void append(const AttentionWeights& o)
    {
        if (batch == 0) {
            *this = o;
            return;
        }
        if (!same_shape_except_batch(o)) {
            throw ValidationError("attention weight shapes differ");
        }
        data.insert(data.end(), o.data.begin(), o.data.end());
        batch += o.batch;
    }
};

/// Learned latent-query cross-attention over the layer tokens of each frame.
/// Keys and values are linear maps of the layer features; there is no layer
/// positional encoding, so layers are distinguished by content alone.
struct CrossAttentionPooler {
    nn::Parameter queries;  // n_q x d
    nn::Linear key;
    nn::Linear value;
    nn::Linear output;  // applied to each query's concatenated head outputs
    int n_heads = 1;
    double attention_dropout = 0.0;

    struct Cache {
        const LayerResolvedFeatures* input = nullptr;
        std::vector<Matrix> keys;     // per layer, T x d
        std::vector<Matrix> values;   // per layer, T x d
        std::vector<Matrix> probs;    // [head * L + layer], T x n_q
        std::vector<Matrix> dropped;  // same layout; empty without dropout
        std::vector<Matrix> masks;
        std::vector<Matrix> context;  // per query, T x d
    };

    CrossAttentionPooler() = default;
    CrossAttentionPooler(int hidden, const PoolerConfig& cfg)
        : queries(cfg.n_queries, hidden), key(hidden, hidden), value(hidden, hidden), output(hidden, hidden),
          n_heads(cfg.n_heads), attention_dropout(cfg.attention_dropout)
    {
        cfg.validate(hidden);
    }

    [[nodiscard]] Eigen::Index hidden() const { return queries.value.cols(); }
    [[nodiscard]] Eigen::Index n_queries() const { return queries.value.rows(); }

    void init(Rng& rng)
    {
        nn::fill_normal(queries.value, 1.0 / std::sqrt(static_cast<double>(hidden())), rng);
        key.init(rng);
        value.init(rng);
        output.init(rng);
    }

    /// Returns the (T x n_q*d) concatenation of query outputs. When `capture` is
    /// non-null it receives the (1, T, h, n_q, L) post-softmax weights.
    [[nodiscard]] Matrix forward(const LayerResolvedFeatures& h_in, const nn::ForwardOptions& opts, Cache& cache,
                                 AttentionWeights* capture = nullptr) const
    {
        const Eigen::Index d = hidden();
        if (static_cast<Eigen::Index>(h_in.hidden()) != d) {
            throw ValidationError("pooler hidden size does not match the features");
        }
        const Eigen::Index n_layers = static_cast<Eigen::Index>(h_in.num_layers());
        const Eigen::Index frames = static_cast<Eigen::Index>(h_in.frames());
        const Eigen::Index nq = n_queries();
        const Eigen::Index e = d / n_heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(e));
        const bool drop = opts.training && attention_dropout > 0.0;

        cache.input = &h_in;
        cache.keys.resize(static_cast<std::size_t>(n_layers));
        cache.values.resize(static_cast<std::size_t>(n_layers));
        for (Eigen::Index l = 0; l < n_layers; ++l) {
            cache.keys[static_cast<std::size_t>(l)] = key.forward(h_in.layers[static_cast<std::size_t>(l)], opts.precision);
            cache.values[static_cast<std::size_t>(l)] = value.forward(h_in.layers[static_cast<std::size_t>(l)], opts.precision);
        }

        const std::size_t n_blocks = static_cast<std::size_t>(n_heads * n_layers);
        cache.probs.resize(n_blocks);
        for (Eigen::Index k = 0; k < n_heads; ++k) {
            const Matrix q_head = queries.value.middleCols(k * e, e).transpose() * scale;  // e x n_q
            Eigen::ArrayXXd row_max = Eigen::ArrayXXd::Constant(frames, nq, -std::numeric_limits<double>::infinity());
            for (Eigen::Index l = 0; l < n_layers; ++l) {
                Matrix& logits = cache.probs[static_cast<std::size_t>(k * n_layers + l)];
                logits.noalias() = cache.keys[static_cast<std::size_t>(l)].middleCols(k * e, e) * q_head;
                row_max = row_max.max(logits.array());
            }
            Eigen::ArrayXXd denom = Eigen::ArrayXXd::Zero(frames, nq);
            for (Eigen::Index l = 0; l < n_layers; ++l) {
                Matrix& p = cache.probs[static_cast<std::size_t>(k * n_layers + l)];
                p = (p.array() - row_max).exp().matrix();
                denom += p.array();
            }
            for (Eigen::Index l = 0; l < n_layers; ++l) {
                Matrix& p = cache.probs[static_cast<std::size_t>(k * n_layers + l)];
                p = (p.array() / denom).matrix();
            }
        }

        if (drop) {
            cache.masks.resize(n_blocks);
            cache.dropped.resize(n_blocks);
            for (std::size_t b = 0; b < n_blocks; ++b) {
                cache.masks[b] = nn::dropout_mask(frames, nq, attention_dropout, *opts.rng);
                cache.dropped[b] = cache.probs[b].cwiseProduct(cache.masks[b]);
            }
        } else {
            cache.masks.clear();
            cache.dropped.clear();
        }
        const std::vector<Matrix>& mix = drop ? cache.dropped : cache.probs;

        cache.context.assign(static_cast<std::size_t>(nq), Matrix::Zero(frames, d));
        for (Eigen::Index q = 0; q < nq; ++q) {
            Matrix& ctx = cache.context[static_cast<std::size_t>(q)];
            for (Eigen::Index k = 0; k < n_heads; ++k) {
                for (Eigen::Index l = 0; l < n_layers; ++l) {
                    const Matrix& p = mix[static_cast<std::size_t>(k * n_layers + l)];
                    ctx.middleCols(k * e, e).array() +=
                        cache.values[static_cast<std::size_t>(l)].middleCols(k * e, e).array().colwise() * p.col(q).array();
                }
            }
        }

        Matrix out(frames, nq * d);
        for (Eigen::Index q = 0; q < nq; ++q) {
            out.middleCols(q * d, d) = output.forward(cache.context[static_cast<std::size_t>(q)], opts.precision);
        }

        if (capture != nullptr) {
            *capture = AttentionWeights(1, frames, n_heads, nq, n_layers);
            for (Eigen::Index t = 0; t < frames; ++t) {
                for (Eigen::Index k = 0; k < n_heads; ++k) {
                    for (Eigen::Index q = 0; q < nq; ++q) {
                        for (Eigen::Index l = 0; l < n_layers; ++l) {
                            (*capture)(0, t, k, q, l) = cache.probs[static_cast<std::size_t>(k * n_layers + l)](t, q);
                        }
                    }
                }
            }
        }
        return out;
    }

    /// Accumulates parameter gradients; the frozen features receive none.
    void backward(const Cache& cache, const Matrix& d_out)
    {
        const LayerResolvedFeatures& h_in = *cache.input;
        const Eigen::Index d = hidden();
        const Eigen::Index n_layers = static_cast<Eigen::Index>(h_in.num_layers());
        const Eigen::Index frames = static_cast<Eigen::Index>(h_in.frames());
        const Eigen::Index nq = n_queries();
        const Eigen::Index e = d / n_heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(e));
        const bool drop = !cache.masks.empty();
        const std::vector<Matrix>& mix = drop ? cache.dropped : cache.probs;

        std::vector<Matrix> d_context(static_cast<std::size_t>(nq));
        for (Eigen::Index q = 0; q < nq; ++q) {
            d_context[static_cast<std::size_t>(q)] = output.backward(cache.context[static_cast<std::size_t>(q)], d_out.middleCols(q * d, d));
        }

        std::vector<Matrix> d_values(static_cast<std::size_t>(n_layers), Matrix::Zero(frames, d));
        std::vector<Matrix> d_keys(static_cast<std::size_t>(n_layers), Matrix::Zero(frames, d));
        std::vector<Matrix> d_probs(static_cast<std::size_t>(n_heads * n_layers), Matrix(frames, nq));
        for (Eigen::Index k = 0; k < n_heads; ++k) {
            for (Eigen::Index l = 0; l < n_layers; ++l) {
                const std::size_t b = static_cast<std::size_t>(k * n_layers + l);
                const auto v_head = cache.values[static_cast<std::size_t>(l)].middleCols(k * e, e);
                auto dv_head = d_values[static_cast<std::size_t>(l)].middleCols(k * e, e);
                for (Eigen::Index q = 0; q < nq; ++q) {
                    const auto dctx = d_context[static_cast<std::size_t>(q)].middleCols(k * e, e);
                    d_probs[b].col(q) = (dctx.array() * v_head.array()).rowwise().sum();
                    dv_head.array() += dctx.array().colwise() * mix[b].col(q).array();
                }
                if (drop) {
                    d_probs[b].array() *= cache.masks[b].array();
                }
            }
        }

        for (Eigen::Index k = 0; k < n_heads; ++k) {
            Eigen::ArrayXXd dot = Eigen::ArrayXXd::Zero(frames, nq);
            for (Eigen::Index l = 0; l < n_layers; ++l) {
                const std::size_t b = static_cast<std::size_t>(k * n_layers + l);
                dot += cache.probs[b].array() * d_probs[b].array();
            }
            const Matrix q_head = queries.value.middleCols(k * e, e);  // n_q x e
            for (Eigen::Index l = 0; l < n_layers; ++l) {
                const std::size_t b = static_cast<std::size_t>(k * n_layers + l);
                const Matrix d_logits = (cache.probs[b].array() * (d_probs[b].array() - dot)).matrix() * scale;
                queries.grad.middleCols(k * e, e).noalias() +=
                    d_logits.transpose() * cache.keys[static_cast<std::size_t>(l)].middleCols(k * e, e);
                d_keys[static_cast<std::size_t>(l)].middleCols(k * e, e).noalias() += d_logits * q_head;
            }
        }

        for (Eigen::Index l = 0; l < n_layers; ++l) {
            key.backward_params(h_in.layers[static_cast<std::size_t>(l)], d_keys[static_cast<std::size_t>(l)]);
            value.backward_params(h_in.layers[static_cast<std::size_t>(l)], d_values[static_cast<std::size_t>(l)]);
        }
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        f(prefix + ".queries", queries);
        key.visit(prefix + ".key", f);
        value.visit(prefix + ".value", f);
        output.visit(prefix + ".output", f);
    }
};

/// Unweighted mean over the layer axis.
inline Matrix pool_mean(const LayerResolvedFeatures& h_in)
{
    h_in.validate();
    Matrix sum = h_in.layers[0];
    for (std::size_t l = 1; l < h_in.num_layers(); ++l) {
        sum += h_in.layers[l];
    }
    return sum / static_cast<double>(h_in.num_layers());
}

/// 0-based layer indices with relative depth (l+1)/L in (0.5, 0.75] and (0.75, 1].
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> depth_groups(std::size_t n_layers)
{
    std::vector<std::size_t> lower;
    std::vector<std::size_t> upper;
    for (std::size_t l = 1; l <= n_layers; ++l) {
        if (4 * l > 3 * n_layers) {
            upper.push_back(l - 1);
        } else if (2 * l > n_layers) {
            lower.push_back(l - 1);
        }
    }
    return {lower, upper};
}

/// Means of the two fractional-depth groups, concatenated: (T x 2d).
inline Matrix pool_depth_groups(const LayerResolvedFeatures& h_in)
{
    h_in.validate();
    const auto [lower, upper] = depth_groups(h_in.num_layers());
    if (lower.empty() || upper.empty()) {
        throw ValidationError("depth-group pooling needs both depth groups non-empty (L = " +
                              std::to_string(h_in.num_layers()) + ")");
    }
    const Eigen::Index d = static_cast<Eigen::Index>(h_in.hidden());
    Matrix out = Matrix::Zero(static_cast<Eigen::Index>(h_in.frames()), 2 * d);
    for (std::size_t l : lower) {
        out.leftCols(d) += h_in.layers[l];
    }
    for (std::size_t l : upper) {
        out.rightCols(d) += h_in.layers[l];
    }
    out.leftCols(d) /= static_cast<double>(lower.size());
    out.rightCols(d) /= static_cast<double>(upper.size());
    return out;
}

/// One modality's layer reduction, selected by PoolerConfig::kind.
struct LayerPooler {
    PoolerKind kind = PoolerKind::xattn;
    std::optional<CrossAttentionPooler> xattn;

    LayerPooler() = default;
    LayerPooler(int hidden, const PoolerConfig& cfg) : kind(cfg.kind)
    {
        if (kind == PoolerKind::xattn) {
            xattn.emplace(hidden, cfg);
        }
    }

    void init(Rng& rng)
    {
        if (xattn) {
            xattn->init(rng);
        }
    }

    [[nodiscard]] Matrix forward(const LayerResolvedFeatures& h_in, const nn::ForwardOptions& opts,
                                 CrossAttentionPooler::Cache& cache, AttentionWeights* capture = nullptr) const
    {
        switch (kind) {
        case PoolerKind::xattn: return xattn->forward(h_in, opts, cache, capture);
        case PoolerKind::mean: return pool_mean(h_in);
        case PoolerKind::depth_groups: return pool_depth_groups(h_in);
        }
        return {};
    }

    void backward(const CrossAttentionPooler::Cache& cache, const Matrix& d_out)
    {
        if (xattn) {
            xattn->backward(cache, d_out);
        }
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        if (xattn) {
            xattn->visit(prefix, f);
        }
    }
};

}  // namespace mirage

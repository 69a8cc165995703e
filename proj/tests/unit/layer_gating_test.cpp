#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace mirage;
using namespace mirage::fixtures;

namespace {

CrossAttentionPooler make_pooler(int d, int nq, int heads, std::uint64_t seed, double dropout = 0.0)
{
    PoolerConfig cfg;
    cfg.n_queries = nq;
    cfg.n_heads = heads;
    cfg.attention_dropout = dropout;
    CrossAttentionPooler p(d, cfg);
    Rng rng = make_rng(seed);
    p.init(rng);
    return p;
}

// Direct per-element evaluation of the pooling equations.
Matrix dense_oracle(const CrossAttentionPooler& p, const LayerResolvedFeatures& f)
{
    const Eigen::Index d = p.hidden();
    const Eigen::Index nq = p.n_queries();
    const Eigen::Index e = d / p.n_heads;
    const auto n_layers = static_cast<Eigen::Index>(f.num_layers());
    const auto frames = static_cast<Eigen::Index>(f.frames());
    Matrix out(frames, nq * d);
    for (Eigen::Index t = 0; t < frames; ++t) {
        for (Eigen::Index q = 0; q < nq; ++q) {
            RowVector context = RowVector::Zero(d);
            for (Eigen::Index k = 0; k < p.n_heads; ++k) {
                std::vector<double> logits(static_cast<std::size_t>(n_layers));
                for (Eigen::Index l = 0; l < n_layers; ++l) {
                    double s = 0.0;
                    for (Eigen::Index c = 0; c < e; ++c) {
                        double key = p.key.bias.value(0, k * e + c);
                        for (Eigen::Index i = 0; i < d; ++i) {
                            key += f.layers[static_cast<std::size_t>(l)](t, i) * p.key.weight.value(i, k * e + c);
                        }
                        s += p.queries.value(q, k * e + c) * key;
                    }
                    logits[static_cast<std::size_t>(l)] = s / std::sqrt(static_cast<double>(e));
                }
                const double mx = *std::max_element(logits.begin(), logits.end());
                double z = 0.0;
                for (double& v : logits) {
                    v = std::exp(v - mx);
                    z += v;
                }
                for (Eigen::Index l = 0; l < n_layers; ++l) {
                    const double w = logits[static_cast<std::size_t>(l)] / z;
                    for (Eigen::Index c = 0; c < e; ++c) {
                        double value = p.value.bias.value(0, k * e + c);
                        for (Eigen::Index i = 0; i < d; ++i) {
                            value += f.layers[static_cast<std::size_t>(l)](t, i) * p.value.weight.value(i, k * e + c);
                        }
                        context(k * e + c) += w * value;
                    }
                }
            }
            for (Eigen::Index j = 0; j < d; ++j) {
                double y = p.output.bias.value(0, j);
                for (Eigen::Index i = 0; i < d; ++i) {
                    y += context(i) * p.output.weight.value(i, j);
                }
                out(t, q * d + j) = y;
            }
        }
    }
    return out;
}

}  // namespace

TEST(CrossAttention, MatchesDenseOracle)
{
    Rng rng = make_rng(1);
    const LayerResolvedFeatures f = random_features(Modality::vision, 3, 2, 8, rng);
    const CrossAttentionPooler p = make_pooler(8, 2, 2, 5);
    CrossAttentionPooler::Cache cache;
    const Matrix got = p.forward(f, nn::ForwardOptions{}, cache);
    EXPECT_LT((got - dense_oracle(p, f)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(CrossAttention, SingleLayerGivesUnitWeightsAndValueProjection)
{
    Rng rng = make_rng(2);
    const LayerResolvedFeatures f = random_features(Modality::audio, 1, 5, 8, rng);
    const CrossAttentionPooler p = make_pooler(8, 3, 4, 7);
    CrossAttentionPooler::Cache cache;
    AttentionWeights pi;
    const Matrix out = p.forward(f, nn::ForwardOptions{}, cache, &pi);
    for (double w : pi.data) {
        EXPECT_DOUBLE_EQ(w, 1.0);
    }
    const Matrix expect = p.output.forward(p.value.forward(f.layers[0]));
    for (Eigen::Index q = 0; q < 3; ++q) {
        EXPECT_LT((out.middleCols(q * 8, 8) - expect).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(CrossAttention, IdenticalLayersMakeWeightsIrrelevant)
{
    Rng rng = make_rng(3);
    LayerResolvedFeatures f = random_features(Modality::text, 4, 3, 8, rng);
    for (auto& layer : f.layers) {
        layer = f.layers[0];
    }
    CrossAttentionPooler p = make_pooler(8, 2, 2, 8);
    CrossAttentionPooler::Cache cache;
    const Matrix a = p.forward(f, nn::ForwardOptions{}, cache);
    p.queries.value *= 5.0;
    const Matrix b = p.forward(f, nn::ForwardOptions{}, cache);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossAttention, WeightsAreDistributionsOverLayers)
{
    Rng rng = make_rng(4);
    std::uniform_int_distribution<int> pick(1, 6);
    for (int trial = 0; trial < 100; ++trial) {
        const int heads = std::vector<int>{1, 2, 4}[static_cast<std::size_t>(trial % 3)];
        const int d = heads * pick(rng);
        const LayerResolvedFeatures f = random_features(Modality::vision, pick(rng), pick(rng), d, rng);
        const CrossAttentionPooler p = make_pooler(d, pick(rng), heads, static_cast<std::uint64_t>(trial));
        CrossAttentionPooler::Cache cache;
        AttentionWeights pi;
        (void)p.forward(f, nn::ForwardOptions{}, cache, &pi);
        for (Eigen::Index t = 0; t < pi.frames; ++t) {
            for (Eigen::Index k = 0; k < pi.heads; ++k) {
                for (Eigen::Index q = 0; q < pi.queries; ++q) {
                    double sum = 0.0;
                    for (Eigen::Index l = 0; l < pi.layers; ++l) {
                        ASSERT_GE(pi(0, t, k, q, l), 0.0);
                        sum += pi(0, t, k, q, l);
                    }
                    ASSERT_NEAR(sum, 1.0, 1e-12);
                }
            }
        }
    }
}

TEST(CrossAttention, InvariantUnderLayerPermutation)
{
    Rng rng = make_rng(5);
    const LayerResolvedFeatures f = random_features(Modality::vision, 5, 4, 8, rng);
    LayerResolvedFeatures g = f;
    std::vector<std::size_t> order{3, 0, 4, 1, 2};
    for (std::size_t i = 0; i < order.size(); ++i) {
        g.layers[i] = f.layers[order[i]];
    }
    const CrossAttentionPooler p = make_pooler(8, 3, 2, 9);
    CrossAttentionPooler::Cache cache;
    const Matrix a = p.forward(f, nn::ForwardOptions{}, cache);
    const Matrix b = p.forward(g, nn::ForwardOptions{}, cache);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((pool_mean(f) - pool_mean(g)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossAttention, CaptureDoesNotPerturbOutput)
{
    Rng rng = make_rng(6);
    const LayerResolvedFeatures f = random_features(Modality::audio, 4, 6, 8, rng);
    const CrossAttentionPooler p = make_pooler(8, 2, 2, 10);
    CrossAttentionPooler::Cache c1;
    CrossAttentionPooler::Cache c2;
    AttentionWeights pi;
    EXPECT_EQ(p.forward(f, nn::ForwardOptions{}, c1), p.forward(f, nn::ForwardOptions{}, c2, &pi));
}

TEST(CrossAttention, ParameterGradientsMatchFiniteDifferences)
{
    Rng rng = make_rng(7);
    const LayerResolvedFeatures f = random_features(Modality::text, 3, 4, 8, rng);
    CrossAttentionPooler p = make_pooler(8, 2, 2, 11);
    const Matrix g = random_matrix(4, 16, rng);
    const auto loss = [&] {
        CrossAttentionPooler::Cache cache;
        return (p.forward(f, nn::ForwardOptions{}, cache).array() * g.array()).sum();
    };
    p.visit("p", [](const std::string&, nn::Parameter& q) { q.zero_grad(); });
    CrossAttentionPooler::Cache cache;
    (void)p.forward(f, nn::ForwardOptions{}, cache);
    p.backward(cache, g);
    double worst = 0.0;
    p.visit("p", [&](const std::string&, nn::Parameter& q) {
        for (Eigen::Index i = 0; i < q.value.size(); ++i) {
            const double saved = q.value.data()[i];
            q.value.data()[i] = saved + 1e-5;
            const double up = loss();
            q.value.data()[i] = saved - 1e-5;
            const double down = loss();
            q.value.data()[i] = saved;
            const double numeric = (up - down) / 2e-5;
            const double exact = q.grad.data()[i];
            worst = std::max(worst, std::fabs(exact - numeric) / std::max({std::fabs(exact), std::fabs(numeric), 1e-6}));
        }
    });
    EXPECT_LT(worst, 1e-4);
}

TEST(CrossAttention, RejectsInvalidConfigs)
{
    PoolerConfig cfg;
    cfg.n_heads = 3;
    EXPECT_THROW(CrossAttentionPooler(8, cfg), ConfigError);
    cfg.n_heads = 2;
    cfg.n_queries = 0;
    EXPECT_THROW(CrossAttentionPooler(8, cfg), ConfigError);
    cfg.n_queries = 2;
    cfg.attention_dropout = 1.0;
    EXPECT_THROW(CrossAttentionPooler(8, cfg), ConfigError);
    EXPECT_THROW(parse_pooler_kind("max"), ConfigError);
}

TEST(MeanPooling, WorkedExamples)
{
    Rng rng = make_rng(8);
    LayerResolvedFeatures f = random_features(Modality::vision, 2, 3, 4, rng);
    f.layers[1] = -f.layers[0];
    EXPECT_EQ(pool_mean(f), Matrix::Zero(3, 4));

    const LayerResolvedFeatures one = random_features(Modality::vision, 1, 3, 4, rng);
    EXPECT_EQ(pool_mean(one), one.layers[0]);

    const LayerResolvedFeatures three = random_features(Modality::vision, 3, 3, 4, rng);
    Matrix naive = Matrix::Zero(3, 4);
    for (Eigen::Index t = 0; t < 3; ++t) {
        for (Eigen::Index c = 0; c < 4; ++c) {
            for (const Matrix& l : three.layers) {
                naive(t, c) += l(t, c);
            }
            naive(t, c) /= 3.0;
        }
    }
    EXPECT_LT((pool_mean(three) - naive).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(DepthGroups, MembershipFollowsRelativeDepth)
{
    using Groups = std::pair<std::vector<std::size_t>, std::vector<std::size_t>>;
    EXPECT_EQ(depth_groups(4), (Groups{{2}, {3}}));
    std::vector<std::size_t> lower(12);
    std::vector<std::size_t> upper(12);
    std::iota(lower.begin(), lower.end(), std::size_t{24});
    std::iota(upper.begin(), upper.end(), std::size_t{36});
    EXPECT_EQ(depth_groups(48), (Groups{lower, upper}));
    EXPECT_TRUE(depth_groups(2).first.empty());

    Rng rng = make_rng(9);
    EXPECT_THROW(pool_depth_groups(random_features(Modality::text, 2, 3, 4, rng)), ValidationError);
    const LayerResolvedFeatures f = random_features(Modality::text, 4, 3, 4, rng);
    const Matrix out = pool_depth_groups(f);
    EXPECT_EQ(out.leftCols(4), f.layers[2]);
    EXPECT_EQ(out.rightCols(4), f.layers[3]);
}

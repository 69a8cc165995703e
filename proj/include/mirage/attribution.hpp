#pragma once

// Streaming reductions of captured layer-attention weights.

#include "mirage/core.hpp"
#include "mirage/layer_gating.hpp"

#include <string_view>

namespace mirage {

enum class ProfileKind : std::uint8_t { modality, per_head, per_query, tr_resolved };

inline std::string_view to_string(ProfileKind k)
{
    switch (k) {
    case ProfileKind::modality:
        return "modality";
    case ProfileKind::per_head:
        return "per_head";
    case ProfileKind::per_query:
        return "per_query";
    case ProfileKind::tr_resolved:
        return "tr_resolved";
    }
    return "?";
}

/// Running sums of attention weights for one modality. Sums over stimuli and
/// time give the (h x n_q x L) mean; sums over stimuli, heads and queries give
/// the (T x L) time-resolved mean. Partial accumulators merge by addition.
class AttributionAccumulator {
public:
    void accumulate(const AttentionWeights& pi)
    {
        if (pi.batch == 0) {
            return;
        }
        if (stimuli_ == 0) {
            heads_ = pi.heads;
            queries_ = pi.queries;
            layers_ = pi.layers;
            frames_ = pi.frames;
            head_query_ = Matrix::Zero(heads_ * queries_, layers_);
            time_ = Matrix::Zero(frames_, layers_);
        } else if (pi.heads != heads_ || pi.queries != queries_ || pi.layers != layers_ || pi.frames != frames_) {
            throw ValidationError("attention weight shape changed between batches");
        }
        for (Eigen::Index b = 0; b < pi.batch; ++b) {
            for (Eigen::Index t = 0; t < pi.frames; ++t) {
                for (Eigen::Index k = 0; k < pi.heads; ++k) {
                    for (Eigen::Index q = 0; q < pi.queries; ++q) {
                        const double* row = &pi.data[pi.index(b, t, k, q, 0)];
                        for (Eigen::Index l = 0; l < pi.layers; ++l) {
                            head_query_(k * queries_ + q, l) += row[l];
                            time_(t, l) += row[l];
                        }
                    }
                }
            }
        }
        stimuli_ += pi.batch;
    }

    void merge(const AttributionAccumulator& other)
    {
        if (other.stimuli_ == 0) {
            return;
        }
        if (stimuli_ == 0) {
            *this = other;
            return;
        }
        if (other.heads_ != heads_ || other.queries_ != queries_ || other.layers_ != layers_ || other.frames_ != frames_) {
            throw ValidationError("cannot merge accumulators of different shapes");
        }
        head_query_ += other.head_query_;
        time_ += other.time_;
        stimuli_ += other.stimuli_;
    }

    [[nodiscard]] bool empty() const { return stimuli_ == 0; }
    [[nodiscard]] Eigen::Index stimuli() const { return stimuli_; }
    [[nodiscard]] Eigen::Index frames() const { return frames_; }

    /// Mean over stimuli and time, (h * n_q) x L with row k * n_q + q.
    [[nodiscard]] Matrix mean_head_query() const
    {
        require();
        return head_query_ / static_cast<double>(stimuli_ * frames_);
    }

    /// (L)
    [[nodiscard]] Vector modality_profile() const { return mean_head_query().colwise().mean().transpose(); }

    /// (h x L)
    [[nodiscard]] Matrix per_head() const
    {
        const Matrix m = mean_head_query();
        Matrix out(heads_, layers_);
        for (Eigen::Index k = 0; k < heads_; ++k) {
            out.row(k) = m.middleRows(k * queries_, queries_).colwise().mean();
        }
        return out;
    }

    /// (n_q x L)
    [[nodiscard]] Matrix per_query() const
    {
        const Matrix m = mean_head_query();
        Matrix out = Matrix::Zero(queries_, layers_);
        for (Eigen::Index k = 0; k < heads_; ++k) {
            out += m.middleRows(k * queries_, queries_);
        }
        return out / static_cast<double>(heads_);
    }

    /// (T x L)
    [[nodiscard]] Matrix tr_resolved() const
    {
        require();
        return time_ / static_cast<double>(stimuli_ * heads_ * queries_);
    }

    /// Any profile as a matrix; the modality profile is a single row.
    [[nodiscard]] Matrix profile(ProfileKind kind) const
    {
        switch (kind) {
        case ProfileKind::modality:
            return modality_profile().transpose();
        case ProfileKind::per_head:
            return per_head();
        case ProfileKind::per_query:
            return per_query();
        case ProfileKind::tr_resolved:
            return tr_resolved();
        }
        throw ValidationError("unknown profile kind");
    }

private:
    void require() const
    {
        if (stimuli_ == 0) {
            throw ValidationError("attribution accumulator is empty");
        }
    }

    Eigen::Index heads_ = 0;
    Eigen::Index queries_ = 0;
    Eigen::Index layers_ = 0;
    Eigen::Index frames_ = 0;
    Eigen::Index stimuli_ = 0;
    Matrix head_query_;
    Matrix time_;
};

/// Mass a layer profile puts on layers [center - radius, center + radius].
inline double band_mass(const Vector& profile, Eigen::Index center, Eigen::Index radius = 1)
{
    double mass = 0.0;
    for (Eigen::Index l = std::max<Eigen::Index>(0, center - radius); l <= std::min(profile.size() - 1, center + radius); ++l) {
        mass += profile(l);
    }
    return mass;
}

}  // namespace mirage

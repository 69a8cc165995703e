#pragma once

// Validation-weighted ensembling with per-(subject, parcel) softmax weights.

#include "mirage/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace mirage {

/// `rho[k]` holds member k's validation Pearson (n_subjects x P). Returns
/// weights of the same layout; the member axis sums to 1 at every (s, p).
inline std::vector<Matrix> compute_weights(const std::vector<Matrix>& rho, double tau)
{
    if (!(tau > 0.0)) {
        throw ValidationError("ensemble temperature must be positive");
    }
    if (rho.empty()) {
        throw ValidationError("ensemble needs at least one member");
    }
    for (const Matrix& r : rho) {
        if (r.rows() != rho[0].rows() || r.cols() != rho[0].cols()) {
            throw ValidationError("member score tables differ in shape");
        }
        if (!r.allFinite()) {
            throw ValidationError("member scores must be finite");
        }
    }
    Matrix peak = rho[0];
    for (const Matrix& r : rho) {
        peak = peak.cwiseMax(r);
    }
    std::vector<Matrix> w;
    w.reserve(rho.size());
    Matrix total = Matrix::Zero(peak.rows(), peak.cols());
    for (const Matrix& r : rho) {
        w.push_back(((r - peak) / tau).array().exp().matrix());
        total += w.back();
    }
    for (Matrix& m : w) {
        m = m.cwiseQuotient(total);
    }
    return w;
}

/// Member weights for one subject as a (members x P) matrix.
inline Matrix subject_weights(const std::vector<Matrix>& weights, int subject)
{
    if (weights.empty() || subject < 0 || subject >= weights[0].rows()) {
        throw ValidationError("no ensemble weights for subject " + std::to_string(subject));
    }
    Matrix out(static_cast<Eigen::Index>(weights.size()), weights[0].cols());
    for (std::size_t k = 0; k < weights.size(); ++k) {
        out.row(static_cast<Eigen::Index>(k)) = weights[k].row(subject);
    }
    return out;
}

/// Per-parcel convex combination of member predictions (each K x P).
inline Matrix ensemble_predict(const std::vector<Matrix>& member_preds, const Matrix& weights)
{
    if (member_preds.empty() || static_cast<Eigen::Index>(member_preds.size()) != weights.rows()) {
        throw ValidationError("one weight row per member expected");
    }
    const Matrix& first = member_preds[0];
    if (weights.cols() != first.cols()) {
        throw ValidationError("weights and predictions disagree on P");
    }
    Matrix out = Matrix::Zero(first.rows(), first.cols());
    for (std::size_t k = 0; k < member_preds.size(); ++k) {
        const Matrix& pred = member_preds[k];
        if (pred.rows() != first.rows() || pred.cols() != first.cols()) {
            throw ValidationError("member predictions differ in shape");
        }
        out += pred * weights.row(static_cast<Eigen::Index>(k)).asDiagonal();
    }
    return out;
}

/// Indices of the `n` best scores, best first; ties keep registry order.
inline std::vector<std::size_t> top_n(const std::vector<double>& scores, std::size_t n)
{
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(std::min(n, idx.size()));
    return idx;
}

}  // namespace mirage

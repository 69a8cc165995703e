#pragma once

// Linear encoding baseline: lagged design, sparse random projection and
// multi-output ridge with per-parcel leave-one-out regularization.

#include "mirage/core.hpp"
#include "mirage/feature_store.hpp"
#include "mirage/layer_gating.hpp"
#include "mirage/scoring.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCore>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace mirage {

/// `count` values log-spaced over [lo, hi]; both endpoints exact.
inline Vector log_grid(double lo, double hi, int count)
{
    if (!(lo > 0.0) || !(hi > lo) || count < 2) {
        throw ValidationError("log grid needs 0 < lo < hi and at least two points");
    }
    Vector grid(count);
    const double a = std::log10(lo);
    const double b = std::log10(hi);
    for (int i = 0; i < count; ++i) {
        grid(i) = std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
    }
    grid(0) = lo;
    grid(count - 1) = hi;
    return grid;
}

struct RidgeDesign {
    std::vector<int> lags{-4, -3, -2, -1, 0};
    int projection_dim = 1024;
    Vector lambdas = log_grid(1e-2, 1e7, 99);
    std::uint64_t projection_seed = 0;

    void validate() const
    {
        if (lags.empty()) {
            throw ConfigError("ridge design needs at least one lag");
        }
        for (std::size_t i = 1; i < lags.size(); ++i) {
            if (lags[i] <= lags[i - 1]) {
                throw ConfigError("lags must be strictly ascending");
            }
        }
        if (projection_dim < 1) {
            throw ConfigError("projection_dim must be >= 1");
        }
        if (lambdas.size() < 1 || !(lambdas(0) > 0.0)) {
            throw ConfigError("lambda grid must be positive");
        }
        for (Eigen::Index i = 1; i < lambdas.size(); ++i) {
            if (!(lambdas(i) > lambdas(i - 1))) {
                throw ConfigError("lambda grid must be strictly increasing");
            }
        }
    }
};

/// Row t holds features at rows t + lag for each lag in order; rows outside
/// [0, N) contribute zeros.
inline Matrix build_lagged_design(const Matrix& features, const std::vector<int>& lags)
{
    const Eigen::Index n = features.rows();
    const Eigen::Index d = features.cols();
    if (n < 1) {
        throw ValidationError("lagged design needs at least one row");
    }
    Matrix out = Matrix::Zero(n, static_cast<Eigen::Index>(lags.size()) * d);
    for (std::size_t j = 0; j < lags.size(); ++j) {
        const Eigen::Index lag = lags[j];
        const Eigen::Index first = std::max<Eigen::Index>(0, -lag);
        const Eigen::Index last = std::min<Eigen::Index>(n, n - lag);
        if (last > first) {
            out.block(first, static_cast<Eigen::Index>(j) * d, last - first, d) = features.middleRows(first + lag, last - first);
        }
    }
    return out;
}

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor>;

/// Sparse sign matrix (d_in x k) with density 1/sqrt(d_in) and entries
/// +-1/sqrt(k * density), so E||xR||^2 = ||x||^2.
inline SparseMatrix projection_matrix(Eigen::Index d_in, Eigen::Index k, std::uint64_t seed)
{
    if (d_in < 1 || k < 1) {
        throw ValidationError("projection needs positive dimensions");
    }
    const double density = 1.0 / std::sqrt(static_cast<double>(d_in));
    const double s = 1.0 / std::sqrt(static_cast<double>(k) * density);
    Rng rng = make_rng(seed, {static_cast<std::uint64_t>(d_in), static_cast<std::uint64_t>(k)});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Eigen::Triplet<double>> entries;
    entries.reserve(static_cast<std::size_t>(static_cast<double>(d_in * k) * density * 1.2) + 16);
    for (Eigen::Index c = 0; c < k; ++c) {
        for (Eigen::Index r = 0; r < d_in; ++r) {
            const double x = u(rng);
            if (x < density) {
                entries.emplace_back(r, c, x < 0.5 * density ? s : -s);
            }
        }
    }
    SparseMatrix m(d_in, k);
    m.setFromTriplets(entries.begin(), entries.end());
    return m;
}

/// Projects rows to `design.projection_dim` columns; inputs narrower than that pass through.
inline Matrix sparse_project(const Matrix& x, const RidgeDesign& design)
{
    if (x.cols() < design.projection_dim) {
        return x;
    }
    const SparseMatrix r = projection_matrix(x.cols(), design.projection_dim, design.projection_seed);
    return x * r;
}

/// Spectral factors of the centered design shared across the lambda grid.
/// Hat matrix at lambda: 1/N + Z diag(1/(eig + lambda)) Z^T.
struct RidgeSpectrum {
    bool dual = false;   // eigendecomposition of X X^T rather than X^T X
    Matrix z;            // N x r
    Vector eig;          // r
    Matrix basis;        // primal: V (F x r); dual: U (N x r)
    Matrix zty;          // Z^T Yc
};

inline RidgeSpectrum ridge_spectrum(const Matrix& xc, const Matrix& yc)
{
    RidgeSpectrum sp;
    sp.dual = xc.rows() < xc.cols();
    if (!sp.dual) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(xc.transpose() * xc);
        sp.eig = es.eigenvalues().cwiseMax(0.0);
        sp.basis = es.eigenvectors();
        sp.z = xc * sp.basis;
    } else {
        Eigen::SelfAdjointEigenSolver<Matrix> es(xc * xc.transpose());
        sp.eig = es.eigenvalues().cwiseMax(0.0);
        sp.basis = es.eigenvectors();
        sp.z = sp.basis * sp.eig.cwiseSqrt().asDiagonal();
    }
    sp.zty = sp.z.transpose() * yc;
    return sp;
}

/// Leave-one-out residuals (N x P) at one lambda, intercept refitted per fold.
inline Matrix loo_residuals(const RidgeSpectrum& sp, const Matrix& yc, double lambda)
{
    const Vector inv = (sp.eig.array() + lambda).inverse().matrix();
    const Matrix fitted = sp.z * (inv.asDiagonal() * sp.zty);
    const double n = static_cast<double>(yc.rows());
    const Vector h = (sp.z.array().square().matrix() * inv).array() + 1.0 / n;
    return ((yc - fitted).array().colwise() / (1.0 - h.array())).matrix();
}

struct RidgeFit {
    Matrix weights;       // F x P
    Vector lambda;        // chosen per parcel
    RowVector x_mean;
    RowVector y_mean;
    Matrix loo_mse;       // grid x P

    [[nodiscard]] Matrix predict(const Matrix& x) const
    {
        if (x.cols() != weights.rows()) {
            throw ValidationError("ridge input width mismatch");
        }
        return ((x.rowwise() - x_mean) * weights).rowwise() + y_mean;
    }
};

/// Centers X and Y, scores every grid value by closed-form LOO error, picks the
/// lambda with the lowest LOO MSE per parcel (smallest on ties) and refits on all rows.
inline RidgeFit fit_ridge_loocv(const Matrix& x, const Matrix& y, const Vector& lambdas)
{
    if (x.rows() != y.rows()) {
        throw ValidationError("ridge design and targets disagree on N");
    }
    if (x.rows() < 2) {
        throw ValidationError("ridge LOO needs N > 1");
    }
    if (!x.allFinite() || !y.allFinite()) {
        throw ValidationError("ridge inputs must be finite");
    }
    if (lambdas.size() < 1 || !(lambdas.minCoeff() > 0.0)) {
        throw ValidationError("lambda grid must be positive");
    }
    RidgeFit fit;
    fit.x_mean = x.colwise().mean();
    fit.y_mean = y.colwise().mean();
    const Matrix xc = x.rowwise() - fit.x_mean;
    const Matrix yc = y.rowwise() - fit.y_mean;
    const RidgeSpectrum sp = ridge_spectrum(xc, yc);

    const Eigen::Index parcels = y.cols();
    fit.loo_mse.resize(lambdas.size(), parcels);
    for (Eigen::Index g = 0; g < lambdas.size(); ++g) {
        fit.loo_mse.row(g) = loo_residuals(sp, yc, lambdas(g)).array().square().colwise().mean();
    }
    fit.lambda.resize(parcels);
    Matrix inv_per_parcel(sp.eig.size(), parcels);
    for (Eigen::Index p = 0; p < parcels; ++p) {
        Eigen::Index best = 0;
        fit.loo_mse.col(p).minCoeff(&best);
        fit.lambda(p) = lambdas(best);
        inv_per_parcel.col(p) = (sp.eig.array() + lambdas(best)).inverse();
    }
    if (!sp.dual) {
        // W = V diag(1/(eig + lambda)) V^T X^T Y, and V^T X^T Y = Z^T Y.
        fit.weights = sp.basis * inv_per_parcel.cwiseProduct(sp.zty);
    } else {
        // W = X^T U diag(1/(eig + lambda)) U^T Y.
        const Matrix uty = sp.basis.transpose() * yc;
        fit.weights = xc.transpose() * (sp.basis * inv_per_parcel.cwiseProduct(uty));
    }
    return fit;
}

// ---------------------------------------------------------------------------
// Per-subject pipeline
// ---------------------------------------------------------------------------

/// A window's representation on the TR grid (K x F).
using Representation = std::function<Matrix(const StimulusWindow&)>;

/// Layer-mean per modality, TR-pooled and concatenated in fusion order.
inline Matrix layer_mean_features(const StimulusWindow& w, ModalitySet modalities, Eigen::Index k_out)
{
    std::vector<Matrix> blocks;
    Eigen::Index width = 0;
    for (Modality m : kAllModalities) {
        if (modalities.contains(m)) {
            blocks.push_back(pool_to_tr(pool_mean(w.at(m)), k_out));
            width += blocks.back().cols();
        }
    }
    Matrix out(k_out, width);
    Eigen::Index at = 0;
    for (const Matrix& b : blocks) {
        out.middleCols(at, b.cols()) = b;
        at += b.cols();
    }
    return out;
}

/// Lagged and projected design for a list of windows, stacked in order. Lags
/// never cross window boundaries.
inline Matrix stacked_design(const std::vector<const StimulusWindow*>& windows, const Representation& repr,
                             const RidgeDesign& design)
{
    std::vector<Matrix> parts;
    Eigen::Index rows = 0;
    for (const StimulusWindow* w : windows) {
        parts.push_back(build_lagged_design(repr(*w), design.lags));
        rows += parts.back().rows();
    }
    if (parts.empty()) {
        return {};
    }
    Matrix x(rows, parts[0].cols());
    Eigen::Index at = 0;
    for (const Matrix& p : parts) {
        if (p.cols() != x.cols()) {
            throw ValidationError("representation width varies across windows");
        }
        x.middleRows(at, p.rows()) = p;
        at += p.rows();
    }
    return sparse_project(x, design);
}

inline Matrix stacked_targets(const std::vector<const StimulusWindow*>& windows)
{
    Eigen::Index rows = 0;
    for (const StimulusWindow* w : windows) {
        rows += w->target.rows();
    }
    Matrix y(rows, windows.empty() ? 0 : windows[0]->target.cols());
    Eigen::Index at = 0;
    for (const StimulusWindow* w : windows) {
        y.middleRows(at, w->target.rows()) = w->target;
        at += w->target.rows();
    }
    return y;
}

struct BaselineResult {
    ScoreTable scores;
    std::vector<Vector> chosen_lambda;  // per subject; empty for subjects without data
};

/// Fits one ridge model per subject on `train` and scores it on `val`.
inline BaselineResult ridge_probe(const std::vector<const StimulusWindow*>& train,
                                  const std::vector<const StimulusWindow*>& val, int n_subjects, const Representation& repr,
                                  const RidgeDesign& design)
{
    design.validate();
    if (val.empty()) {
        throw ValidationError("ridge probe needs validation windows");
    }
    BaselineResult result;
    result.chosen_lambda.resize(static_cast<std::size_t>(n_subjects));
    std::vector<Matrix> predictions(val.size());
    for (int s = 0; s < n_subjects; ++s) {
        std::vector<const StimulusWindow*> tr;
        for (const StimulusWindow* w : train) {
            if (w->subject == s) {
                tr.push_back(w);
            }
        }
        std::vector<std::size_t> val_idx;
        for (std::size_t i = 0; i < val.size(); ++i) {
            if (val[i]->subject == s) {
                val_idx.push_back(i);
            }
        }
        if (val_idx.empty()) {
            continue;
        }
        if (tr.empty()) {
            throw ValidationError("subject " + std::to_string(s) + " has validation data but no training data");
        }
        const RidgeFit fit = fit_ridge_loocv(stacked_design(tr, repr, design), stacked_targets(tr), design.lambdas);
        result.chosen_lambda[static_cast<std::size_t>(s)] = fit.lambda;
        for (std::size_t i : val_idx) {
            predictions[i] = fit.predict(stacked_design({val[i]}, repr, design));
        }
    }
    result.scores = score_predictions(val, predictions, n_subjects);
    return result;
}

/// The linear baseline on raw layer-resolved features.
inline BaselineResult run_ridge_baseline(const std::vector<const StimulusWindow*>& train,
                                         const std::vector<const StimulusWindow*>& val, int n_subjects,
                                         const RidgeDesign& design, ModalitySet modalities = ModalitySet::all())
{
    if (train.empty()) {
        throw ValidationError("ridge baseline needs training windows");
    }
    const Eigen::Index k_out = train[0]->target.rows();
    return ridge_probe(train, val, n_subjects,
                       [modalities, k_out](const StimulusWindow& w) { return layer_mean_features(w, modalities, k_out); },
                       design);
}

/// Counts of chosen lambdas per grid index over all subjects and parcels.
inline std::vector<long> lambda_histogram(const BaselineResult& result, const Vector& lambdas)
{
    std::vector<long> counts(static_cast<std::size_t>(lambdas.size()), 0);
    for (const Vector& chosen : result.chosen_lambda) {
        for (Eigen::Index p = 0; p < chosen.size(); ++p) {
            for (Eigen::Index g = 0; g < lambdas.size(); ++g) {
                if (lambdas(g) == chosen(p)) {
                    ++counts[static_cast<std::size_t>(g)];
                    break;
                }
            }
        }
    }
    return counts;
}

}  // namespace mirage

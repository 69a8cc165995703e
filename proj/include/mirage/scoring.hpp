#pragma once

// Per-parcel Pearson scoring and score tables.

#include "mirage/brain_encoder.hpp"
#include "mirage/core.hpp"
#include "mirage/feature_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mirage {

/// Sample Pearson correlation of each column pair. Columns with zero variance
/// in either argument score 0.
inline Vector pearson_per_parcel(const Matrix& pred, const Matrix& truth)
{
    if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
        throw ValidationError("prediction and truth shapes differ");
    }
    if (pred.rows() < 2) {
        throw ValidationError("Pearson needs at least two samples");
    }
    const double n = static_cast<double>(pred.rows());
    Vector r(pred.cols());
    for (Eigen::Index p = 0; p < pred.cols(); ++p) {
        const Vector x = pred.col(p).array() - pred.col(p).mean();
        const Vector y = truth.col(p).array() - truth.col(p).mean();
        const double sxx = x.squaredNorm();
        const double syy = y.squaredNorm();
        // Rounding residue from subtracting the mean of a constant column is not variance.
        const double x_floor = n * std::pow(1e-12 * pred.col(p).cwiseAbs().maxCoeff(), 2);
        const double y_floor = n * std::pow(1e-12 * truth.col(p).cwiseAbs().maxCoeff(), 2);
        if (sxx <= x_floor || syy <= y_floor) {
            r(p) = 0.0;
            continue;
        }
        r(p) = std::clamp(x.dot(y) / std::sqrt(sxx * syy), -1.0, 1.0);
    }
    return r;
}

/// Pearson scores per (subject, parcel), with an optional parcel -> network map.
struct ScoreTable {
    Matrix pearson;                  // n_subjects x P
    std::vector<bool> present;       // subjects that had evaluation data
    std::optional<std::vector<int>> networks;

    [[nodiscard]] Eigen::Index subjects() const { return pearson.rows(); }
    [[nodiscard]] Eigen::Index parcels() const { return pearson.cols(); }

    /// Mean over parcels and present subjects.
    [[nodiscard]] double mean() const
    {
        double sum = 0.0;
        Eigen::Index n = 0;
        for (Eigen::Index s = 0; s < subjects(); ++s) {
            if (present.empty() || present[static_cast<std::size_t>(s)]) {
                sum += pearson.row(s).sum();
                n += parcels();
            }
        }
        return n == 0 ? 0.0 : sum / static_cast<double>(n);
    }

    /// Per-parcel mean over present subjects.
    [[nodiscard]] Vector parcel_means() const
    {
        Vector sum = Vector::Zero(parcels());
        double n = 0.0;
        for (Eigen::Index s = 0; s < subjects(); ++s) {
            if (present.empty() || present[static_cast<std::size_t>(s)]) {
                sum += pearson.row(s).transpose();
                n += 1.0;
            }
        }
        return n == 0.0 ? sum : Vector(sum / n);
    }

    /// Mean parcel score per network id (0..n_networks-1); empty networks give 0.
    [[nodiscard]] Vector network_means(int n_networks) const
    {
        if (!networks || static_cast<Eigen::Index>(networks->size()) != parcels()) {
            throw ValidationError("score table has no parcel -> network map");
        }
        const Vector per_parcel = parcel_means();
        Vector sum = Vector::Zero(n_networks);
        Vector count = Vector::Zero(n_networks);
        for (Eigen::Index p = 0; p < parcels(); ++p) {
            const int net = (*networks)[static_cast<std::size_t>(p)];
            if (net < 0 || net >= n_networks) {
                throw ValidationError("network id out of range");
            }
            sum(net) += per_parcel(p);
            count(net) += 1.0;
        }
        for (int k = 0; k < n_networks; ++k) {
            sum(k) = count(k) > 0.0 ? sum(k) / count(k) : 0.0;
        }
        return sum;
    }
};

/// Contiguous equal-size partition into `n_networks` groups, a stand-in for a
/// dataset-specific parcel atlas.
inline std::vector<int> synthetic_networks(int parcels, int n_networks = 7)
{
    std::vector<int> out(static_cast<std::size_t>(parcels));
    for (int p = 0; p < parcels; ++p) {
        out[static_cast<std::size_t>(p)] = static_cast<int>((static_cast<long long>(p) * n_networks) / parcels);
    }
    return out;
}

/// Scores stacked per-window predictions against targets, per subject.
/// `predictions[i]` pairs with `windows[i]`.
inline ScoreTable score_predictions(const std::vector<const StimulusWindow*>& windows, const std::vector<Matrix>& predictions,
                                    int n_subjects)
{
    if (windows.size() != predictions.size()) {
        throw ValidationError("one prediction per window expected");
    }
    if (windows.empty()) {
        throw ValidationError("nothing to score");
    }
    const Eigen::Index parcels = windows[0]->target.cols();
    ScoreTable table;
    table.pearson = Matrix::Zero(n_subjects, parcels);
    table.present.assign(static_cast<std::size_t>(n_subjects), false);
    for (int s = 0; s < n_subjects; ++s) {
        Eigen::Index rows = 0;
        for (const StimulusWindow* w : windows) {
            if (w->subject == s) {
                rows += w->target.rows();
            }
        }
        if (rows < 2) {
            continue;
        }
        Matrix pred(rows, parcels);
        Matrix truth(rows, parcels);
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < windows.size(); ++i) {
            if (windows[i]->subject != s) {
                continue;
            }
            const Eigen::Index k = windows[i]->target.rows();
            pred.middleRows(at, k) = predictions[i];
            truth.middleRows(at, k) = windows[i]->target;
            at += k;
        }
        table.pearson.row(s) = pearson_per_parcel(pred, truth).transpose();
        table.present[static_cast<std::size_t>(s)] = true;
    }
    return table;
}

inline std::vector<Matrix> predict_windows(const EncoderModel& model, const std::vector<const StimulusWindow*>& windows,
                                           ModalitySet active = ModalitySet::all())
{
    std::vector<Matrix> out;
    out.reserve(windows.size());
    for (const StimulusWindow* w : windows) {
        out.push_back(model.predict(*w, active));
    }
    return out;
}

inline ScoreTable evaluate_model(const EncoderModel& model, const std::vector<const StimulusWindow*>& windows,
                                 ModalitySet active = ModalitySet::all())
{
    return score_predictions(windows, predict_windows(model, windows, active), model.config().n_subjects);
}

inline std::string format_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Rows are parcels, columns subjects, then a summary row of means.
inline std::string score_table_csv(const ScoreTable& table)
{
    std::string out = "parcel";
    for (Eigen::Index s = 0; s < table.subjects(); ++s) {
        out += ",subject_" + std::to_string(s);
    }
    out += ",mean\n";
    const Vector parcel_mean = table.parcel_means();
    for (Eigen::Index p = 0; p < table.parcels(); ++p) {
        out += std::to_string(p);
        for (Eigen::Index s = 0; s < table.subjects(); ++s) {
            out += "," + format_double(table.pearson(s, p));
        }
        out += "," + format_double(parcel_mean(p)) + "\n";
    }
    out += "mean";
    for (Eigen::Index s = 0; s < table.subjects(); ++s) {
        out += "," + format_double(table.pearson.row(s).mean());
    }
    out += "," + format_double(table.mean()) + "\n";
    return out;
}

inline void write_score_table(const ScoreTable& table, const std::filesystem::path& path)
{
    detail::write_file(path, score_table_csv(table));
}

}  // namespace mirage

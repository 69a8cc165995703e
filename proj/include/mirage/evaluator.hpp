#pragma once

// Modality ablation, dominance maps, modality-subset training and stage-wise probes.

#include "mirage/brain_encoder.hpp"
#include "mirage/ridge_baseline.hpp"
#include "mirage/scoring.hpp"
#include "mirage/trainer.hpp"

#include <array>
#include <string_view>

namespace mirage {

/// Scores with `m` replaced by its null embedding at fuse time.
inline ScoreTable ablate_modality(const EncoderModel& model, const std::vector<const StimulusWindow*>& windows, Modality m,
                                  ModalitySet base = ModalitySet::all())
{
    ModalitySet active = base;
    active.erase(m);
    if (active.empty()) {
        throw ValidationError("ablating " + std::string(to_string(m)) + " leaves no active modality");
    }
    return evaluate_model(model, windows, active);
}

/// Per-parcel drop (full minus ablated), averaged over subjects present in both tables.
inline Vector score_drop(const ScoreTable& full, const ScoreTable& ablated)
{
    if (full.pearson.rows() != ablated.pearson.rows() || full.pearson.cols() != ablated.pearson.cols()) {
        throw ValidationError("score tables differ in shape");
    }
    ScoreTable diff = full;
    diff.pearson = full.pearson - ablated.pearson;
    return diff.parcel_means();
}

struct Dominance {
    std::vector<Modality> dominant;  // per parcel
    Vector strength;                 // dominant share of the total positive drop, in [0, 1]
};

/// `drops` is 3 x P with rows in fusion order (vision, audio, text).
inline Dominance dominant_modality(const Matrix& drops)
{
    if (drops.rows() != static_cast<Eigen::Index>(kNumModalities)) {
        throw ValidationError("dominance needs one drop row per modality");
    }
    Dominance out;
    out.dominant.resize(static_cast<std::size_t>(drops.cols()));
    out.strength.resize(drops.cols());
    for (Eigen::Index p = 0; p < drops.cols(); ++p) {
        Eigen::Index best = 0;
        double positive = 0.0;
        for (Eigen::Index m = 0; m < drops.rows(); ++m) {
            if (drops(m, p) > drops(best, p)) {
                best = m;
            }
            positive += std::max(0.0, drops(m, p));
        }
        if (positive > 0.0) {
            out.dominant[static_cast<std::size_t>(p)] = kAllModalities[static_cast<std::size_t>(best)];
            out.strength(p) = drops(best, p) / positive;
        } else {
            out.dominant[static_cast<std::size_t>(p)] = kAllModalities[0];
            out.strength(p) = 0.0;
        }
    }
    return out;
}

struct SubsetRun {
    TrainResult trained;
    ScoreTable scores;
};

/// Trains a fresh model that only ever fuses `subset` and scores it on `val`.
inline SubsetRun subset_run(const std::vector<const StimulusWindow*>& train_windows,
                            const std::vector<const StimulusWindow*>& val_windows, ModalitySet subset,
                            const EncoderConfig& ecfg, TrainConfig tcfg, std::ostream* log = nullptr)
{
    if (subset.empty()) {
        throw ConfigError("modality subset must not be empty");
    }
    tcfg.modalities = subset;
    SubsetRun run{train(EncoderModel(ecfg, tcfg.seed), train_windows, val_windows, tcfg, log), {}};
    run.scores = evaluate_model(run.trained.model, val_windows, subset);
    return run;
}

enum class ProbeStage : std::uint8_t { input, post_pooler, post_trunk, output };

inline std::string_view to_string(ProbeStage s)
{
    switch (s) {
    case ProbeStage::input:
        return "input";
    case ProbeStage::post_pooler:
        return "post_pooler";
    case ProbeStage::post_trunk:
        return "post_trunk";
    case ProbeStage::output:
        return "output";
    }
    return "?";
}

inline ProbeStage parse_probe_stage(std::string_view name)
{
    for (ProbeStage s : {ProbeStage::input, ProbeStage::post_pooler, ProbeStage::post_trunk, ProbeStage::output}) {
        if (name == to_string(s)) {
            return s;
        }
    }
    throw ConfigError("unknown probe stage '" + std::string(name) + "'");
}

/// Intermediate representation of one window on the TR grid.
inline Matrix stage_representation(const EncoderModel& model, const StimulusWindow& w, ProbeStage stage, ModalitySet active)
{
    const Eigen::Index k_out = model.config().k_out;
    if (stage == ProbeStage::input) {
        return layer_mean_features(w, active, k_out);
    }
    EncoderModel::Cache cache;
    const nn::ForwardOptions opts;
    const auto streams = model.pool(w, active, opts, cache);
    if (stage == ProbeStage::post_pooler) {
        Eigen::Index width = 0;
        for (Modality m : kAllModalities) {
            width += active.contains(m) ? streams[slot(m)].cols() : 0;
        }
        Matrix cat(static_cast<Eigen::Index>(w.frames()), width);
        Eigen::Index at = 0;
        for (Modality m : kAllModalities) {
            if (active.contains(m)) {
                cat.middleCols(at, streams[slot(m)].cols()) = streams[slot(m)];
                at += streams[slot(m)].cols();
            }
        }
        return pool_to_tr(cat, k_out);
    }
    return pool_to_tr(model.trunk_forward(model.fuse(streams, active), opts, cache), k_out);
}

/// Per-subject ridge probe on a model stage; the output stage is the model itself.
inline ScoreTable stage_probe(const EncoderModel& model, const std::vector<const StimulusWindow*>& train_windows,
                              const std::vector<const StimulusWindow*>& val_windows, ProbeStage stage,
                              const RidgeDesign& design, ModalitySet active = ModalitySet::all())
{
    if (stage == ProbeStage::output) {
        return evaluate_model(model, val_windows, active);
    }
    return ridge_probe(train_windows, val_windows, model.config().n_subjects,
                       [&model, stage, active](const StimulusWindow& w) { return stage_representation(model, w, stage, active); },
                       design)
        .scores;
}

}  // namespace mirage

#pragma once

// MSE training with AdamW, one-cycle cosine schedule and global-norm clipping;
// the epoch with the best validation Pearson is kept.

#include "mirage/brain_encoder.hpp"
#include "mirage/core.hpp"
#include "mirage/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <vector>

namespace mirage {

struct TrainConfig {
    double peak_lr = 1e-4;
    double weight_decay = 1e-2;
    int epochs = 15;
    int batch_size = 16;
    double warmup_fraction = 0.1;
    double clip_norm = 1.0;
    std::uint64_t seed = 33;
    nn::Precision precision = nn::Precision::full;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    bool normalize_targets = true;
    ModalitySet modalities = ModalitySet::all();  // the only modalities ever fused

    void validate() const
    {
        if (!(peak_lr > 0.0) || weight_decay < 0.0 || epochs < 1 || batch_size < 1 || !(clip_norm > 0.0)) {
            throw ConfigError("training hyper-parameters must be positive");
        }
        if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
            throw ConfigError("warmup_fraction must lie in (0, 1)");
        }
        if (modalities.empty()) {
            throw ConfigError("training needs at least one modality");
        }
    }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c)
{
    return {{"peak_lr", c.peak_lr},
            {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"warmup_fraction", c.warmup_fraction},
            {"clip_norm", c.clip_norm},
            {"seed", c.seed},
            {"precision", c.precision == nn::Precision::full ? "full" : "mixed"},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"normalize_targets", c.normalize_targets},
            {"modalities", c.modalities.str()}};
}

/// Linear warm-up from 0 over the first ceil(warmup_fraction * total) steps,
/// then cosine annealing to 0 at `total_steps`.
inline double lr_at(long step, long total_steps, const TrainConfig& cfg)
{
    if (step < 0 || step > total_steps || total_steps < 1) {
        throw ValidationError("lr_at needs 0 <= step <= total_steps");
    }
    const long warmup = std::max<long>(1, static_cast<long>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps))));
    if (step <= warmup) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return 0.5 * cfg.peak_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

inline std::vector<nn::Parameter*> collect_parameters(EncoderModel& model)
{
    std::vector<nn::Parameter*> params;
    model.visit_parameters([&params](const std::string&, nn::Parameter& p) { params.push_back(&p); });
    return params;
}

inline double global_grad_norm(const std::vector<nn::Parameter*>& params)
{
    double sq = 0.0;
    for (const nn::Parameter* p : params) {
        sq += p->grad.squaredNorm();
    }
    return std::sqrt(sq);
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<nn::Parameter*>& params, double max_norm)
{
    const double norm = global_grad_norm(params);
    if (norm > max_norm) {
        const double scale = max_norm / (norm + 1e-6);
        for (nn::Parameter* p : params) {
            p->grad *= scale;
        }
    }
    return norm;
}

/// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
public:
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay)
    {
    }

    void step(const std::vector<nn::Parameter*>& params, double lr)
    {
        if (first_.empty()) {
            for (const nn::Parameter* p : params) {
                first_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
                second_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            }
        }
        if (first_.size() != params.size()) {
            throw ValidationError("parameter list changed between optimizer steps");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            nn::Parameter& p = *params[i];
            p.value *= 1.0 - lr * weight_decay_;
            first_[i] = beta1_ * first_[i] + (1.0 - beta1_) * p.grad;
            second_[i] = beta2_ * second_[i] + (1.0 - beta2_) * p.grad.cwiseAbs2();
            p.value.array() -= lr * (first_[i].array() / c1) / ((second_[i].array() / c2).sqrt() + eps_);
        }
    }

    [[nodiscard]] long steps() const { return t_; }

private:
    double beta1_;
    double beta2_;
    double eps_;
    double weight_decay_;
    long t_ = 0;
    std::vector<Matrix> first_;
    std::vector<Matrix> second_;
};

struct StepRecord {
    long step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    EncoderModel model;  // parameters from the best validation epoch
    double best_val_pearson = -2.0;
    int best_epoch = -1;
    std::vector<double> val_history;
    std::vector<StepRecord> steps;
};

inline double batch_mse(const Matrix& pred, const Matrix& target) { return (pred - target).squaredNorm() / static_cast<double>(pred.size()); }

/// Trains `model` in place on the train split and returns the best-by-validation
/// snapshot. Log lines are tab-separated: "step, i, lr, loss" and "epoch, e, val_pearson".
inline TrainResult train(EncoderModel model, const std::vector<const StimulusWindow*>& train_windows,
                         const std::vector<const StimulusWindow*>& val_windows, const TrainConfig& cfg,
                         std::ostream* log = nullptr)
{
    cfg.validate();
    if (train_windows.empty() || val_windows.empty()) {
        throw ValidationError("training needs non-empty train and validation splits");
    }
    const EncoderConfig& ecfg = model.config();
    model.set_normalizer(cfg.normalize_targets ? TargetNormalizer::fit(train_windows)
                                               : TargetNormalizer::identity(ecfg.parcels));
    std::vector<Matrix> targets;
    targets.reserve(train_windows.size());
    for (const StimulusWindow* w : train_windows) {
        if (w->target.rows() != ecfg.k_out || w->target.cols() != ecfg.parcels) {
            throw ValidationError("target shape does not match the encoder config");
        }
        targets.push_back(model.normalizer().apply(w->target));
    }

    const long n_train = static_cast<long>(train_windows.size());
    const long batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = batches_per_epoch * cfg.epochs;

    std::vector<nn::Parameter*> params = collect_parameters(model);
    AdamW optimizer(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    Rng dropout_rng = make_rng(cfg.seed, {0x64726f70});
    Rng modality_rng = make_rng(cfg.seed, {0x6d6f6461});

    TrainResult result;
    std::vector<std::size_t> order(static_cast<std::size_t>(n_train));
    long step = 0;
    EncoderModel::Cache cache;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = make_rng(cfg.seed, {0x73687566, static_cast<std::uint64_t>(epoch)});
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        for (long b = 0; b < batches_per_epoch; ++b) {
            const long first = b * cfg.batch_size;
            const long last = std::min(n_train, first + cfg.batch_size);
            const double batch_n = static_cast<double>(last - first);
            model.zero_grad();
            double loss = 0.0;
            for (long i = first; i < last; ++i) {
                const std::size_t idx = order[static_cast<std::size_t>(i)];
                const ModalitySet active = ecfg.modality_dropout_p > 0.0
                                               ? sample_modality_mask(ecfg.modality_dropout_p, modality_rng, cfg.modalities)
                                               : cfg.modalities;
                nn::ForwardOptions opts;
                opts.training = true;
                opts.precision = cfg.precision;
                opts.rng = &dropout_rng;
                const Matrix pred = model.forward(*train_windows[idx], active, opts, cache);
                const Matrix diff = pred - targets[idx];
                loss += diff.squaredNorm() / static_cast<double>(diff.size());
                model.backward(cache, diff * (2.0 / (static_cast<double>(diff.size()) * batch_n)));
            }
            loss /= batch_n;
            ++step;
            if (!std::isfinite(loss)) {
                throw NumericalError("non-finite training loss at step " + std::to_string(step) +
                                     "; lower peak_lr or check the inputs");
            }
            const double lr = lr_at(step, total_steps, cfg);
            clip_grad_norm(params, cfg.clip_norm);
            optimizer.step(params, lr);
            result.steps.push_back({step, lr, loss});
            if (log != nullptr) {
                *log << "step\t" << step << '\t' << format_double(lr) << '\t' << format_double(loss) << '\n';
            }
        }

        const double val = evaluate_model(model, val_windows, cfg.modalities).mean();
        result.val_history.push_back(val);
        if (log != nullptr) {
            *log << "epoch\t" << epoch << '\t' << format_double(val) << '\n';
            log->flush();
        }
        if (val > result.best_val_pearson) {
            result.best_val_pearson = val;
            result.best_epoch = epoch;
            result.model = model;
        }
    }
    result.model.zero_grad();
    return result;
}

}  // namespace mirage

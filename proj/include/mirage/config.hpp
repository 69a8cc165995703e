#pragma once

// Run configuration documents: strict JSON parsing, named presets and the
// resolved-config echo.

#include "mirage/brain_encoder.hpp"
#include "mirage/feature_store.hpp"
#include "mirage/ridge_baseline.hpp"
#include "mirage/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace mirage {

struct PlantedDataConfig {
    PlantedSpec spec;
    int n_windows = 150;
    int n_val = 30;
    double offset_scale = 2.0;
    ModalitySet modalities = ModalitySet::all();  // modalities the planted map reads
    std::uint64_t seed = 7;
};

struct EvaluationConfig {
    int networks = 7;
    int batches = 8;  // validation windows fed to attribution
    bool capture_attn = false;
};

struct EnsembleConfig {
    double tau = 0.3;
    int members = 15;
    std::vector<std::string> checkpoints;
};

struct SweepConfig {
    std::vector<int> n_queries{1, 2, 3, 4, 5, 8, 12, 16, 24, 32};
    int repeats = 3;
};

struct RunConfig {
    std::string preset = "desk";
    std::string manifest;  // dataset on disk; empty means use the planted generator
    PlantedDataConfig planted;
    EncoderConfig encoder;
    TrainConfig train;
    EvaluationConfig evaluation;
    RidgeDesign ridge;
    double lambda_min = 1e-2;
    double lambda_max = 1e7;
    int lambda_count = 99;
    EnsembleConfig ensemble;
    SweepConfig sweep;
    std::string out = "mirage_out";
};

/// Small desk-scale configuration that trains in minutes on one CPU core.
inline RunConfig desk_preset()
{
    RunConfig c;
    c.preset = "desk";
    c.planted.spec.layers = {12, 12, 12};
    c.planted.spec.hidden = {32, 32, 32};
    c.planted.spec.planted_layer = {6, 6, 6};
    c.planted.spec.frames = 100;
    c.planted.spec.k_out = 20;
    c.planted.spec.parcels = 50;
    c.planted.spec.n_subjects = 2;
    c.planted.spec.noise_std = 0.1;
    c.encoder.hidden = 128;
    c.encoder.depth = 2;
    c.encoder.heads = 4;
    c.planted.n_windows = 600;
    c.planted.n_val = 50;
    c.planted.offset_scale = 1.0;
    c.train.peak_lr = 1e-3;
    c.train.epochs = 4;
    c.train.batch_size = 2;
    return c;
}

/// Full-scale hyper-parameters of the published model.
inline RunConfig paper_preset()
{
    RunConfig c;
    c.preset = "paper";
    c.planted.spec.layers = {48, 48, 48};
    c.planted.spec.hidden = {2048, 2048, 2048};
    c.planted.spec.planted_layer = {27, 27, 27};
    c.planted.spec.frames = 298;
    c.planted.spec.k_out = 100;
    c.planted.spec.parcels = 1000;
    c.planted.spec.n_subjects = 4;
    c.encoder.hidden = 3072;
    c.encoder.depth = 8;
    c.encoder.heads = 8;
    c.encoder.pooler.n_queries = 24;
    c.encoder.pooler.n_heads = 4;
    c.encoder.pooler.attention_dropout = 0.2;
    c.encoder.modality_dropout_p = 0.3;
    c.train = TrainConfig{};
    c.ensemble.tau = 0.3;
    c.ensemble.members = 15;
    return c;
}

inline RunConfig preset(const std::string& name)
{
    if (name == "desk") {
        return desk_preset();
    }
    if (name == "paper") {
        return paper_preset();
    }
    throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

namespace detail {

/// Reads known keys of one JSON object and rejects anything left over.
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    template <class T>
    void get(const std::string& key, T& out)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) {
            return;
        }
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(where(key) + " has the wrong type");
        }
    }

    void get_modalities(const std::string& key, ModalitySet& out)
    {
        std::string text;
        get(key, text);
        if (!text.empty()) {
            try {
                out = parse_modality_set(text);
            } catch (const ValidationError& e) {
                throw ConfigError(where(key) + ": " + e.what());
            }
        }
    }

    template <class T, std::size_t N>
    void get_triple(const std::string& key, std::array<T, N>& out)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) {
            return;
        }
        if (it->is_number()) {
            out.fill(it->template get<T>());
            return;
        }
        Section s(*it, where(key));
        for (Modality m : kAllModalities) {
            s.get(std::string(to_string(m)), out[slot(m)]);
        }
        s.finish();
    }

    [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

    Section child(const std::string& key)
    {
        seen_.insert(key);
        static const nlohmann::json empty = nlohmann::json::object();
        const auto it = j_.find(key);
        return Section(it == j_.end() ? empty : *it, where(key));
    }

    void finish() const
    {
        for (const auto& item : j_.items()) {
            if (!seen_.count(item.key())) {
                throw ConfigError("unknown key " + where(item.key()));
            }
        }
    }

private:
    [[nodiscard]] std::string where(const std::string& key = "") const
    {
        std::string p = path_;
        if (!key.empty()) {
            p += p.empty() ? key : "." + key;
        }
        return "'" + (p.empty() ? std::string("<root>") : p) + "'";
    }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline nn::Precision parse_precision(const std::string& s)
{
    if (s == "full") {
        return nn::Precision::full;
    }
    if (s == "mixed") {
        return nn::Precision::mixed;
    }
    throw ConfigError("precision must be full or mixed");
}

}  // namespace detail

/// Overlays a JSON document onto `base`. Unknown keys and wrong types raise ConfigError.
inline RunConfig apply_config(RunConfig c, const nlohmann::json& doc)
{
    detail::Section root(doc, "");
    std::string preset_name;
    root.get("preset", preset_name);
    if (!preset_name.empty() && preset_name != c.preset) {
        c = preset(preset_name);
    }
    root.get("out", c.out);
    if (root.has("seed")) {
        std::uint64_t seed = 0;
        root.get("seed", seed);
        c.train.seed = seed;
    }

    {
        auto data = root.child("data");
        data.get("manifest", c.manifest);
        auto p = data.child("planted");
        p.get("n_windows", c.planted.n_windows);
        p.get("n_val", c.planted.n_val);
        p.get("offset_scale", c.planted.offset_scale);
        p.get_modalities("modalities", c.planted.modalities);
        p.get("seed", c.planted.seed);
        p.get_triple("layers", c.planted.spec.layers);
        p.get_triple("hidden", c.planted.spec.hidden);
        p.get_triple("planted_layer", c.planted.spec.planted_layer);
        p.get("frames", c.planted.spec.frames);
        p.get("k_out", c.planted.spec.k_out);
        p.get("parcels", c.planted.spec.parcels);
        p.get("n_subjects", c.planted.spec.n_subjects);
        p.get("frame_rate_hz", c.planted.spec.frame_rate_hz);
        p.get("noise_std", c.planted.spec.noise_std);
        p.get("kernel", c.planted.spec.kernel);
        p.finish();
        data.finish();
    }
    {
        auto e = root.child("encoder");
        e.get("hidden", c.encoder.hidden);
        e.get("depth", c.encoder.depth);
        e.get("heads", c.encoder.heads);
        e.get("ff_multiplier", c.encoder.ff_multiplier);
        e.get("modality_dropout_p", c.encoder.modality_dropout_p);
        e.get("inner_dropout", c.encoder.inner_dropout);
        e.get("learned_null", c.encoder.learned_null);
        e.get("use_absolute_positions", c.encoder.use_absolute_positions);
        e.get("use_rotary", c.encoder.use_rotary);
        e.get("rotary_base", c.encoder.rotary_base);
        e.get("zero_init_residual", c.encoder.zero_init_residual);
        auto p = e.child("pooler");
        std::string kind;
        p.get("kind", kind);
        if (!kind.empty()) {
            c.encoder.pooler.kind = parse_pooler_kind(kind);
        }
        p.get("n_queries", c.encoder.pooler.n_queries);
        p.get("n_heads", c.encoder.pooler.n_heads);
        p.get("attention_dropout", c.encoder.pooler.attention_dropout);
        p.finish();
        e.finish();
    }
    {
        auto t = root.child("train");
        t.get("peak_lr", c.train.peak_lr);
        t.get("weight_decay", c.train.weight_decay);
        t.get("epochs", c.train.epochs);
        t.get("batch_size", c.train.batch_size);
        t.get("warmup_fraction", c.train.warmup_fraction);
        t.get("clip_norm", c.train.clip_norm);
        t.get("seed", c.train.seed);
        std::string precision;
        t.get("precision", precision);
        if (!precision.empty()) {
            c.train.precision = detail::parse_precision(precision);
        }
        t.get("beta1", c.train.beta1);
        t.get("beta2", c.train.beta2);
        t.get("adam_eps", c.train.adam_eps);
        t.get("normalize_targets", c.train.normalize_targets);
        t.get_modalities("modalities", c.train.modalities);
        t.finish();
    }
    {
        auto ev = root.child("evaluation");
        ev.get("networks", c.evaluation.networks);
        ev.get("batches", c.evaluation.batches);
        ev.get("capture_attn", c.evaluation.capture_attn);
        ev.finish();
    }
    {
        auto r = root.child("ridge");
        r.get("lags", c.ridge.lags);
        r.get("projection_dim", c.ridge.projection_dim);
        r.get("projection_seed", c.ridge.projection_seed);
        r.get("lambda_min", c.lambda_min);
        r.get("lambda_max", c.lambda_max);
        r.get("lambda_count", c.lambda_count);
        r.finish();
    }
    {
        auto en = root.child("ensemble");
        en.get("tau", c.ensemble.tau);
        en.get("members", c.ensemble.members);
        en.get("checkpoints", c.ensemble.checkpoints);
        en.finish();
    }
    {
        auto s = root.child("sweep");
        s.get("n_queries", c.sweep.n_queries);
        s.get("repeats", c.sweep.repeats);
        s.finish();
    }
    root.finish();
    return c;
}

/// Checks cross-field constraints and fills derived fields.
inline void finalize_config(RunConfig& c)
{
    try {
        c.ridge.lambdas = log_grid(c.lambda_min, c.lambda_max, c.lambda_count);
    } catch (const ValidationError& e) {
        throw ConfigError(std::string("ridge: ") + e.what());
    }
    c.ridge.validate();
    c.train.validate();
    if (c.planted.n_windows < 2 || c.planted.n_val < 1 || c.planted.n_val >= c.planted.n_windows) {
        throw ConfigError("planted data needs 1 <= n_val < n_windows");
    }
    if (c.evaluation.networks < 1 || c.evaluation.batches < 1) {
        throw ConfigError("evaluation networks and batches must be positive");
    }
    if (!(c.ensemble.tau > 0.0) || c.ensemble.members < 1) {
        throw ConfigError("ensemble needs tau > 0 and at least one member");
    }
    if (c.sweep.n_queries.empty() || c.sweep.repeats < 1) {
        throw ConfigError("sweep needs a non-empty grid and repeats >= 1");
    }
    for (int q : c.sweep.n_queries) {
        if (q < 1) {
            throw ConfigError("sweep n_queries entries must be positive");
        }
    }
}

/// Encoder config with data-dependent sizes taken from `data`.
inline EncoderConfig resolve_encoder(const RunConfig& c, const Dataset& data)
{
    if (data.windows.empty()) {
        throw ConfigError("dataset has no windows");
    }
    EncoderConfig e = c.encoder;
    const StimulusWindow& w = data.windows.front();
    for (Modality m : kAllModalities) {
        e.input_hidden[slot(m)] = static_cast<int>(w.at(m).hidden());
    }
    e.n_subjects = data.n_subjects();
    e.parcels = data.parcels;
    e.k_out = data.k_out;
    int frames = 0;
    for (const StimulusWindow& x : data.windows) {
        frames = std::max(frames, static_cast<int>(x.frames()));
    }
    e.max_frames = frames;
    e.validate();
    return e;
}

/// The planted dataset described by `c`, validation windows last.
inline Dataset make_planted_dataset(const RunConfig& c)
{
    PlantedSpec spec = c.planted.spec;
    populate_planted_spec(spec, c.planted.modalities, c.planted.offset_scale, c.planted.seed);
    Dataset data;
    data.windows = generate_planted_dataset(spec, c.planted.n_windows, c.planted.seed);
    assign_validation_split(data.windows, static_cast<std::size_t>(c.planted.n_val));
    data.frame_rate_hz = spec.frame_rate_hz;
    data.k_out = spec.k_out;
    data.parcels = spec.parcels;
    return data;
}

inline Dataset load_dataset(const RunConfig& c)
{
    return c.manifest.empty() ? make_planted_dataset(c) : read_dataset(c.manifest);
}

inline nlohmann::ordered_json to_json(const RunConfig& c)
{
    nlohmann::ordered_json j;
    j["preset"] = c.preset;
    j["out"] = c.out;
    j["seed"] = c.train.seed;
    auto& data = j["data"];
    data["manifest"] = c.manifest;
    auto& p = data["planted"];
    const auto triple = [](const std::array<int, kNumModalities>& a) {
        return nlohmann::ordered_json{{"vision", a[0]}, {"audio", a[1]}, {"text", a[2]}};
    };
    p["n_windows"] = c.planted.n_windows;
    p["n_val"] = c.planted.n_val;
    p["offset_scale"] = c.planted.offset_scale;
    p["modalities"] = c.planted.modalities.str();
    p["seed"] = c.planted.seed;
    p["layers"] = triple(c.planted.spec.layers);
    p["hidden"] = triple(c.planted.spec.hidden);
    p["planted_layer"] = triple(c.planted.spec.planted_layer);
    p["frames"] = c.planted.spec.frames;
    p["k_out"] = c.planted.spec.k_out;
    p["parcels"] = c.planted.spec.parcels;
    p["n_subjects"] = c.planted.spec.n_subjects;
    p["frame_rate_hz"] = c.planted.spec.frame_rate_hz;
    p["noise_std"] = c.planted.spec.noise_std;
    p["kernel"] = c.planted.spec.kernel;
    nlohmann::ordered_json enc = to_json(c.encoder);
    for (const char* derived : {"input_hidden", "n_subjects", "parcels", "k_out", "max_frames"}) {
        enc.erase(derived);
    }
    j["encoder"] = enc;
    nlohmann::ordered_json tr = to_json(c.train);
    tr.erase("seed");
    j["train"] = tr;
    j["evaluation"] = {{"networks", c.evaluation.networks},
                       {"batches", c.evaluation.batches},
                       {"capture_attn", c.evaluation.capture_attn}};
    j["ridge"] = {{"lags", c.ridge.lags},
                  {"projection_dim", c.ridge.projection_dim},
                  {"projection_seed", c.ridge.projection_seed},
                  {"lambda_min", c.lambda_min},
                  {"lambda_max", c.lambda_max},
                  {"lambda_count", c.lambda_count}};
    j["ensemble"] = {{"tau", c.ensemble.tau}, {"members", c.ensemble.members}, {"checkpoints", c.ensemble.checkpoints}};
    j["sweep"] = {{"n_queries", c.sweep.n_queries}, {"repeats", c.sweep.repeats}};
    return j;
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return apply_config(std::move(base), doc);
}

}  // namespace mirage

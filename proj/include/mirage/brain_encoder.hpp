#pragma once

// Modality projection and fusion, temporal transformer trunk, per-subject readout.

#include "mirage/core.hpp"
#include "mirage/feature_store.hpp"
#include "mirage/layer_gating.hpp"
#include "mirage/nn.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mirage {

struct EncoderConfig {
    std::array<int, kNumModalities> input_hidden{32, 32, 32};  // d_m per slot
    PoolerConfig pooler;
    int hidden = 128;  // D, per-modality projection width; the trunk runs at 3D
    int depth = 2;
    int heads = 4;
    int ff_multiplier = 4;
    double modality_dropout_p = 0.3;
    double inner_dropout = 0.0;
    int n_subjects = 2;
    int parcels = 50;
    int k_out = 20;
    int max_frames = 100;
    bool learned_null = false;
    bool use_absolute_positions = true;
    bool use_rotary = true;
    double rotary_base = 10000.0;
    bool zero_init_residual = true;  // trunk blocks start as the identity

    [[nodiscard]] int trunk_width() const { return 3 * hidden; }

    void validate() const
    {
        for (int d : input_hidden) {
            if (d < 1) {
                throw ConfigError("input hidden sizes must be positive");
            }
            if (pooler.kind == PoolerKind::xattn) {
                pooler.validate(d);
            }
        }
        if (hidden < 1 || depth < 0 || heads < 1 || ff_multiplier < 1) {
            throw ConfigError("encoder sizes must be positive");
        }
        if (hidden % heads != 0) {
            throw ConfigError("encoder hidden size must be divisible by the head count");
        }
        if (use_rotary && (trunk_width() / heads) % 2 != 0) {
            throw ConfigError("rotary embeddings need an even head dimension");
        }
        if (modality_dropout_p < 0.0 || modality_dropout_p >= 1.0 || inner_dropout < 0.0 || inner_dropout >= 1.0) {
            throw ConfigError("dropout probabilities must lie in [0, 1)");
        }
        if (n_subjects < 1 || parcels < 1 || k_out < 1 || max_frames < k_out) {
            throw ConfigError("need n_subjects, parcels, k_out >= 1 and max_frames >= k_out");
        }
    }
};

inline nlohmann::ordered_json to_json(const PoolerConfig& c)
{
    return {{"kind", std::string(to_string(c.kind))},
            {"n_queries", c.n_queries},
            {"n_heads", c.n_heads},
            {"attention_dropout", c.attention_dropout}};
}

inline nlohmann::ordered_json to_json(const EncoderConfig& c)
{
    nlohmann::ordered_json j;
    j["input_hidden"] = {{"vision", c.input_hidden[0]}, {"audio", c.input_hidden[1]}, {"text", c.input_hidden[2]}};
    j["pooler"] = to_json(c.pooler);
    j["hidden"] = c.hidden;
    j["depth"] = c.depth;
    j["heads"] = c.heads;
    j["ff_multiplier"] = c.ff_multiplier;
    j["modality_dropout_p"] = c.modality_dropout_p;
    j["inner_dropout"] = c.inner_dropout;
    j["n_subjects"] = c.n_subjects;
    j["parcels"] = c.parcels;
    j["k_out"] = c.k_out;
    j["max_frames"] = c.max_frames;
    j["learned_null"] = c.learned_null;
    j["use_absolute_positions"] = c.use_absolute_positions;
    j["use_rotary"] = c.use_rotary;
    j["rotary_base"] = c.rotary_base;
    j["zero_init_residual"] = c.zero_init_residual;
    return j;
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j)
{
    EncoderConfig c;
    for (Modality m : kAllModalities) {
        c.input_hidden[slot(m)] = j.at("input_hidden").at(std::string(to_string(m))).get<int>();
    }
    const auto& p = j.at("pooler");
    c.pooler.kind = parse_pooler_kind(p.at("kind").get<std::string>());
    c.pooler.n_queries = p.at("n_queries").get<int>();
    c.pooler.n_heads = p.at("n_heads").get<int>();
    c.pooler.attention_dropout = p.at("attention_dropout").get<double>();
    c.hidden = j.at("hidden").get<int>();
    c.depth = j.at("depth").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ff_multiplier = j.at("ff_multiplier").get<int>();
    c.modality_dropout_p = j.at("modality_dropout_p").get<double>();
    c.inner_dropout = j.at("inner_dropout").get<double>();
    c.n_subjects = j.at("n_subjects").get<int>();
    c.parcels = j.at("parcels").get<int>();
    c.k_out = j.at("k_out").get<int>();
    c.max_frames = j.at("max_frames").get<int>();
    c.learned_null = j.at("learned_null").get<bool>();
    c.use_absolute_positions = j.at("use_absolute_positions").get<bool>();
    c.use_rotary = j.at("use_rotary").get<bool>();
    c.rotary_base = j.at("rotary_base").get<double>();
    c.zero_init_residual = j.at("zero_init_residual").get<bool>();
    return c;
}

/// Draws the set of modalities kept for one training example: each member of
/// `allowed` is dropped independently with probability p, redrawing until at
/// least one survives.
inline ModalitySet sample_modality_mask(double p, Rng& rng, ModalitySet allowed = ModalitySet::all())
{
    if (p < 0.0 || p >= 1.0) {
        throw ValidationError("modality dropout probability must lie in [0, 1)");
    }
    if (allowed.empty()) {
        throw ValidationError("no modality allowed");
    }
    std::bernoulli_distribution keep(1.0 - p);
    for (;;) {
        ModalitySet kept;
        for (Modality m : kAllModalities) {
            if (allowed.contains(m) && keep(rng)) {
                kept.insert(m);
            }
        }
        if (!kept.empty()) {
            return kept;
        }
    }
}

class EncoderModel {
public:
    struct Cache {
        std::array<CrossAttentionPooler::Cache, kNumModalities> pooler;
        std::array<Matrix, kNumModalities> pooled;  // pooler outputs, empty when inactive
        ModalitySet active;
        Matrix fused;  // u
        std::vector<nn::TransformerBlock::Cache> blocks;
        Matrix trunk_out;  // r
        int subject = 0;
        Eigen::Index frames = 0;
    };

    EncoderModel() = default;

    EncoderModel(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg)
    {
        cfg_.validate();
        build();
        Rng rng = make_rng(seed, {0x696e6974});
        for (auto& p : poolers_) {
            p.init(rng);
        }
        for (auto& proj : projectors_) {
            proj.init(rng);
        }
        nn::fill_normal(position_.value, 0.02, rng);
        for (auto& block : blocks_) {
            block.init(rng, cfg_.zero_init_residual);
        }
        for (auto& head : heads_) {
            head.init(rng);
        }
    }

    /// Shapes only, every parameter zero (used when loading checkpoints).
    static EncoderModel zeros(const EncoderConfig& cfg)
    {
        EncoderModel model;
        model.cfg_ = cfg;
        model.cfg_.validate();
        model.build();
        return model;
    }

    [[nodiscard]] const EncoderConfig& config() const { return cfg_; }

    // -- parameters -------------------------------------------------------

    /// Visits every trainable parameter in a fixed order with its dotted name.
    template <class F>
    void visit_parameters(F&& f)
    {
        for (Modality m : kAllModalities) {
            poolers_[slot(m)].visit("pooler." + std::string(to_string(m)), f);
        }
        for (Modality m : kAllModalities) {
            projectors_[slot(m)].visit("projector." + std::string(to_string(m)), f);
        }
        if (cfg_.learned_null) {
            for (Modality m : kAllModalities) {
                f("null." + std::string(to_string(m)), nulls_[slot(m)]);
            }
        }
        if (cfg_.use_absolute_positions) {
            f(std::string("trunk.position"), position_);
        }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            blocks_[i].visit("trunk.blocks." + std::to_string(i), f);
        }
        for (std::size_t s = 0; s < heads_.size(); ++s) {
            heads_[s].visit("head." + std::to_string(s), f);
        }
    }

    template <class F>
    void visit_parameters(F&& f) const
    {
        const_cast<EncoderModel*>(this)->visit_parameters(
            [&f](const std::string& name, nn::Parameter& p) { f(name, static_cast<const nn::Parameter&>(p)); });
    }

    [[nodiscard]] std::size_t parameter_count() const
    {
        std::size_t n = 0;
        visit_parameters([&n](const std::string&, const nn::Parameter& p) { n += static_cast<std::size_t>(p.value.size()); });
        return n;
    }

    void zero_grad()
    {
        visit_parameters([](const std::string&, nn::Parameter& p) { p.zero_grad(); });
    }

    nn::Linear& projector(Modality m) { return projectors_[slot(m)]; }
    nn::Linear& head(int subject) { return heads_.at(static_cast<std::size_t>(subject)); }
    nn::Parameter& null_embedding(Modality m) { return nulls_[slot(m)]; }
    nn::Parameter& position_table() { return position_; }
    std::vector<nn::TransformerBlock>& blocks() { return blocks_; }
    LayerPooler& pooler(Modality m) { return poolers_[slot(m)]; }
    [[nodiscard]] const LayerPooler& pooler(Modality m) const { return poolers_[slot(m)]; }

    [[nodiscard]] const TargetNormalizer& normalizer() const { return normalizer_; }
    void set_normalizer(TargetNormalizer n)
    {
        if (n.mean.size() != cfg_.parcels || n.scale.size() != cfg_.parcels) {
            throw ValidationError("normalizer width differs from the parcel count");
        }
        normalizer_ = std::move(n);
    }

    // -- forward stages ---------------------------------------------------

    /// Pooled per-modality streams (T x pooler width); inactive slots stay empty.
    std::array<Matrix, kNumModalities> pool(const StimulusWindow& window, ModalitySet active, const nn::ForwardOptions& opts,
                                            Cache& cache, std::array<AttentionWeights, kNumModalities>* capture = nullptr) const
    {
        std::array<Matrix, kNumModalities> streams;
        for (Modality m : kAllModalities) {
            if (!active.contains(m)) {
                continue;
            }
            const LayerResolvedFeatures& f = window.at(m);
            if (static_cast<int>(f.hidden()) != cfg_.input_hidden[slot(m)]) {
                throw ValidationError("feature width for " + std::string(to_string(m)) + " does not match the model");
            }
            AttentionWeights* cap = capture != nullptr ? &(*capture)[slot(m)] : nullptr;
            streams[slot(m)] = poolers_[slot(m)].forward(f, opts, cache.pooler[slot(m)], cap);
        }
        return streams;
    }

    /// Projects active streams to width D and concatenates (vision, audio, text);
    /// inactive slots carry the null embedding broadcast over time.
    [[nodiscard]] Matrix fuse(const std::array<Matrix, kNumModalities>& streams, ModalitySet active,
                              nn::Precision precision = nn::Precision::full) const
    {
        if (active.empty()) {
            throw ValidationError("fuse needs at least one active modality");
        }
        Eigen::Index frames = -1;
        for (Modality m : kAllModalities) {
            if (active.contains(m)) {
                if (frames >= 0 && streams[slot(m)].rows() != frames) {
                    throw ValidationError("modality streams disagree on T");
                }
                frames = streams[slot(m)].rows();
            }
        }
        const Eigen::Index d = cfg_.hidden;
        Matrix fused(frames, 3 * d);
        for (Modality m : kAllModalities) {
            auto block = fused.middleCols(static_cast<Eigen::Index>(slot(m)) * d, d);
            if (active.contains(m)) {
                if (streams[slot(m)].cols() != projectors_[slot(m)].in_features()) {
                    throw ValidationError("stream width does not match the projector");
                }
                block = projectors_[slot(m)].forward(streams[slot(m)], precision);
            } else if (cfg_.learned_null) {
                block = nulls_[slot(m)].value.replicate(frames, 1);
            } else {
                block.setZero();
            }
        }
        return fused;
    }

    /// Adds absolute positions and runs the pre-norm blocks along time.
    [[nodiscard]] Matrix trunk_forward(const Matrix& fused, const nn::ForwardOptions& opts, Cache& cache) const
    {
        const Eigen::Index frames = fused.rows();
        if (frames > cfg_.max_frames) {
            throw ValidationError("window longer than the position table");
        }
        if (fused.cols() != cfg_.trunk_width()) {
            throw ValidationError("trunk input width mismatch");
        }
        Matrix x = fused;
        if (cfg_.use_absolute_positions) {
            x += position_.value.topRows(frames);
        }
        cache.blocks.resize(blocks_.size());
        const nn::Rotary* rot = cfg_.use_rotary ? &rotary_ : nullptr;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            x = blocks_[i].forward(x, rot, opts, cache.blocks[i]);
        }
        return x;
    }

    [[nodiscard]] Matrix trunk_forward(const Matrix& fused, bool training = false) const
    {
        Cache cache;
        nn::ForwardOptions opts;
        opts.training = training;
        Rng rng = make_rng(0);
        opts.rng = &rng;
        return trunk_forward(fused, opts, cache);
    }

    /// Subject head per frame, then adaptive average pooling to K rows.
    [[nodiscard]] Matrix readout(const Matrix& trunk_out, int subject, nn::Precision precision = nn::Precision::full) const
    {
        if (subject < 0 || subject >= cfg_.n_subjects) {
            throw ValidationError("unknown subject " + std::to_string(subject));
        }
        return pool_to_tr(heads_[static_cast<std::size_t>(subject)].forward(trunk_out, precision), cfg_.k_out);
    }

    /// Full forward pass in normalized target space.
    Matrix forward(const StimulusWindow& window, ModalitySet active, const nn::ForwardOptions& opts, Cache& cache,
                   std::array<AttentionWeights, kNumModalities>* capture = nullptr) const
    {
        cache.active = active;
        cache.subject = window.subject;
        cache.frames = static_cast<Eigen::Index>(window.frames());
        cache.pooled = pool(window, active, opts, cache, capture);
        cache.fused = fuse(cache.pooled, active, opts.precision);
        cache.trunk_out = trunk_forward(cache.fused, opts, cache);
        return readout(cache.trunk_out, window.subject, opts.precision);
    }

    /// Inference in the original target units.
    [[nodiscard]] Matrix predict(const StimulusWindow& window, ModalitySet active = ModalitySet::all()) const
    {
        Cache cache;
        return normalizer_.invert(forward(window, active, nn::ForwardOptions{}, cache));
    }

    /// Accumulates gradients of a loss with d(loss)/d(prediction) = `d_pred`.
    void backward(const Cache& cache, const Matrix& d_pred)
    {
        const Matrix d_frames = pool_to_tr_backward(d_pred, cache.frames);
        Matrix dx = heads_[static_cast<std::size_t>(cache.subject)].backward(cache.trunk_out, d_frames);
        const nn::Rotary* rot = cfg_.use_rotary ? &rotary_ : nullptr;
        for (std::size_t i = blocks_.size(); i-- > 0;) {
            dx = blocks_[i].backward(cache.blocks[i], dx, rot);
        }
        if (cfg_.use_absolute_positions) {
            position_.grad.topRows(cache.frames) += dx;
        }
        const Eigen::Index d = cfg_.hidden;
        for (Modality m : kAllModalities) {
            const auto d_block = dx.middleCols(static_cast<Eigen::Index>(slot(m)) * d, d);
            if (cache.active.contains(m)) {
                const Matrix d_stream = projectors_[slot(m)].backward(cache.pooled[slot(m)], d_block);
                poolers_[slot(m)].backward(cache.pooler[slot(m)], d_stream);
            } else if (cfg_.learned_null) {
                nulls_[slot(m)].grad.row(0) += d_block.colwise().sum();
            }
        }
    }

private:
    void build()
    {
        const int width = cfg_.trunk_width();
        for (Modality m : kAllModalities) {
            const int d = cfg_.input_hidden[slot(m)];
            poolers_[slot(m)] = LayerPooler(d, cfg_.pooler);
            projectors_[slot(m)] = nn::Linear(cfg_.pooler.output_width(d), cfg_.hidden);
            nulls_[slot(m)] = nn::Parameter(1, cfg_.hidden);
        }
        position_ = nn::Parameter(cfg_.max_frames, width);
        blocks_.clear();
        for (int i = 0; i < cfg_.depth; ++i) {
            blocks_.emplace_back(width, cfg_.heads, static_cast<Eigen::Index>(cfg_.ff_multiplier) * width, cfg_.inner_dropout);
        }
        heads_.clear();
        for (int s = 0; s < cfg_.n_subjects; ++s) {
            heads_.emplace_back(width, cfg_.parcels);
        }
        rotary_ = nn::Rotary(cfg_.max_frames, width / cfg_.heads, cfg_.rotary_base);
        normalizer_ = TargetNormalizer::identity(cfg_.parcels);
    }

    EncoderConfig cfg_;
    std::array<LayerPooler, kNumModalities> poolers_;
    std::array<nn::Linear, kNumModalities> projectors_;
    std::array<nn::Parameter, kNumModalities> nulls_;
    nn::Parameter position_;
    std::vector<nn::TransformerBlock> blocks_;
    std::vector<nn::Linear> heads_;
    nn::Rotary rotary_;
    TargetNormalizer normalizer_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "MIRC" + version + config JSON + named f64 arrays
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// `extra` is echoed verbatim into the config document under "run".
inline void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path,
                            const nlohmann::ordered_json& extra = nlohmann::ordered_json::object())
{
    nlohmann::ordered_json doc;
    doc["encoder"] = to_json(model.config());
    doc["run"] = extra;
    const std::string config_text = doc.dump();

    std::vector<std::pair<std::string, const Matrix*>> arrays;
    model.visit_parameters([&arrays](const std::string& name, const nn::Parameter& p) { arrays.emplace_back(name, &p.value); });
    const Matrix mean = model.normalizer().mean;
    const Matrix scale = model.normalizer().scale;
    arrays.emplace_back("readout.target_mean", &mean);
    arrays.emplace_back("readout.target_scale", &scale);

    detail::ByteWriter out;
    out.put_bytes("MIRC");
    out.put_u32(kCheckpointVersion);
    out.put_u32(static_cast<std::uint32_t>(config_text.size()));
    out.put_bytes(config_text);
    out.put_u32(static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, m] : arrays) {
        out.put_u32(static_cast<std::uint32_t>(name.size()));
        out.put_bytes(name);
        out.put_u32(static_cast<std::uint32_t>(m->rows()));
        out.put_u32(static_cast<std::uint32_t>(m->cols()));
        for (Eigen::Index r = 0; r < m->rows(); ++r) {
            for (Eigen::Index c = 0; c < m->cols(); ++c) {
                out.put_f64((*m)(r, c));
            }
        }
    }
    detail::write_file(path, out.bytes());
}

struct LoadedCheckpoint {
    EncoderModel model;
    nlohmann::json run;  // the "run" echo
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path)
{
    detail::ByteReader in(detail::read_file(path));
    detail::check_magic(in, "MIRC", path);
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion) {
        throw VersionMismatchError(path.string() + ": unsupported checkpoint version");
    }
    const std::string config_text = in.str(in.u32());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(config_text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": corrupt config echo: " + e.what());
    }
    LoadedCheckpoint out{EncoderModel::zeros(encoder_config_from_json(doc.at("encoder"))), doc.value("run", nlohmann::json::object())};

    std::map<std::string, Matrix> arrays;
    const std::uint32_t count = in.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = in.str(in.u32());
        const std::uint32_t rows = in.u32();
        const std::uint32_t cols = in.u32();
        Matrix m(rows, cols);
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                m(r, c) = in.f64();
            }
        }
        arrays.emplace(std::move(name), std::move(m));
    }
    if (in.remaining() != 0) {
        throw IoError(path.string() + ": trailing bytes in checkpoint");
    }
    auto take = [&arrays, &path](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        auto it = arrays.find(name);
        if (it == arrays.end()) {
            throw ValidationError(path.string() + ": missing array " + name);
        }
        if (it->second.rows() != rows || it->second.cols() != cols) {
            throw ValidationError(path.string() + ": shape mismatch for " + name);
        }
        Matrix m = std::move(it->second);
        arrays.erase(it);
        return m;
    };
    out.model.visit_parameters([&take](const std::string& name, nn::Parameter& p) {
        p.value = take(name, p.value.rows(), p.value.cols());
        p.zero_grad();
    });
    const Eigen::Index parcels = out.model.config().parcels;
    TargetNormalizer norm;
    norm.mean = take("readout.target_mean", 1, parcels);
    norm.scale = take("readout.target_scale", 1, parcels);
    out.model.set_normalizer(std::move(norm));
    if (!arrays.empty()) {
        throw ValidationError(path.string() + ": unexpected array " + arrays.begin()->first);
    }
    return out;
}

}  // namespace mirage

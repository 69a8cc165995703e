#pragma once

#include "mirage/core.hpp"
#include "mirage/half.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

namespace mirage {

/// Hidden states of every backbone layer for one modality on a common frame grid.
/// Each entry of `layers` is a (frames x hidden) matrix.
struct LayerResolvedFeatures {
    Modality modality = Modality::text;
    std::vector<Matrix> layers;
    double frame_rate_hz = 2.0;

    [[nodiscard]] std::size_t num_layers() const { return layers.size(); }
    [[nodiscard]] std::size_t frames() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers[0].rows()); }
    [[nodiscard]] std::size_t hidden() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers[0].cols()); }

    void validate() const
    {
        if (layers.empty() || frames() == 0 || hidden() == 0) {
            throw ValidationError("layer-resolved features need L, T, d >= 1");
        }
        if (!(frame_rate_hz > 0.0) || !std::isfinite(frame_rate_hz)) {
            throw ValidationError("frame rate must be positive");
        }
        for (const Matrix& layer : layers) {
            if (static_cast<std::size_t>(layer.rows()) != frames() || static_cast<std::size_t>(layer.cols()) != hidden()) {
                throw ValidationError("ragged layer stack");
            }
            if (!layer.allFinite()) {
                throw ValidationError("non-finite feature entry");
            }
        }
    }
};

enum class Split : std::uint8_t { train, val };

struct StimulusWindow {
    std::array<LayerResolvedFeatures, kNumModalities> features;  // indexed by slot()
    int subject = 0;
    Matrix target;  // K x P
    std::string window_id;
    Split split = Split::train;

    [[nodiscard]] const LayerResolvedFeatures& at(Modality m) const { return features[slot(m)]; }
    [[nodiscard]] std::size_t frames() const { return features[0].frames(); }

    void validate() const
    {
        for (Modality m : kAllModalities) {
            at(m).validate();
            if (at(m).modality != m) {
                throw ValidationError("feature slot holds the wrong modality");
            }
            if (at(m).frames() != frames()) {
                throw ValidationError("modalities of one window must share the frame grid");
            }
        }
        if (target.rows() < 1 || target.cols() < 1) {
            throw ValidationError("target must be at least 1 x 1");
        }
        if (static_cast<std::size_t>(target.rows()) > frames()) {
            throw ValidationError("window needs T >= K");
        }
        if (!target.allFinite()) {
            throw ValidationError("non-finite target entry");
        }
        if (subject < 0) {
            throw ValidationError("negative subject index");
        }
    }
};

// ---------------------------------------------------------------------------
// Temporal reduction to the TR grid
// ---------------------------------------------------------------------------

/// Half-open source frame range [first, last) averaged into output row `j`.
inline std::pair<Eigen::Index, Eigen::Index> tr_block(Eigen::Index j, Eigen::Index frames, Eigen::Index k_out)
{
    return {(j * frames) / k_out, ((j + 1) * frames) / k_out};
}

/// Adaptive average pooling along time: (T x d) -> (k_out x d).
inline Matrix pool_to_tr(const Matrix& frames, Eigen::Index k_out)
{
    const Eigen::Index t = frames.rows();
    if (k_out < 1 || t < k_out) {
        throw ValidationError("pool_to_tr needs T >= k_out >= 1");
    }
    Matrix out(k_out, frames.cols());
    for (Eigen::Index j = 0; j < k_out; ++j) {
        const auto [lo, hi] = tr_block(j, t, k_out);
        out.row(j) = frames.middleRows(lo, hi - lo).colwise().sum() / static_cast<double>(hi - lo);
    }
    return out;
}

/// Adjoint of pool_to_tr.
inline Matrix pool_to_tr_backward(const Matrix& grad_out, Eigen::Index frames)
{
    const Eigen::Index k_out = grad_out.rows();
    Matrix grad(frames, grad_out.cols());
    for (Eigen::Index j = 0; j < k_out; ++j) {
        const auto [lo, hi] = tr_block(j, frames, k_out);
        const RowVector share = grad_out.row(j) / static_cast<double>(hi - lo);
        for (Eigen::Index t = lo; t < hi; ++t) {
            grad.row(t) = share;
        }
    }
    return grad;
}

// ---------------------------------------------------------------------------
// Binary formats
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kFeatureFormatVersion = 1;
inline constexpr std::uint8_t kMatrixFormatVersion = 1;
// magic(4) + version(1) + modality(1) + L, T, d (3 x u32) + frame rate (f32)
inline constexpr std::size_t kFeatureHeaderBytes = 22;
inline constexpr std::size_t kMatrixHeaderBytes = 13;

namespace detail {

class ByteWriter {
public:
    void put_u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
    void put_u16(std::uint16_t v)
    {
        put_u8(static_cast<std::uint8_t>(v & 0xffu));
        put_u8(static_cast<std::uint8_t>(v >> 8));
    }
    void put_u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) {
            put_u8(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
        }
    }
    void put_u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) {
            put_u8(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
        }
    }
    void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }
    void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }
    void put_bytes(std::string_view s) { bytes_.append(s.data(), s.size()); }

    [[nodiscard]] const std::string& bytes() const { return bytes_; }

private:
    std::string bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

    [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n) const
    {
        if (remaining() < n) {
            throw TruncatedError("unexpected end of file");
        }
    }
    std::uint8_t u8()
    {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint16_t u16()
    {
        const std::uint16_t lo = u8();
        const std::uint16_t hi = u8();
        return static_cast<std::uint16_t>(lo | (hi << 8));
    }
    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::uint64_t u64()
    {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        }
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n)
    {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::string bytes_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

inline void check_magic(ByteReader& in, std::string_view magic, const std::filesystem::path& path)
{
    if (in.remaining() < magic.size()) {
        throw TruncatedError(path.string() + ": shorter than the magic number");
    }
    if (in.str(magic.size()) != magic) {
        throw BadMagicError(path.string() + ": bad magic");
    }
}

}  // namespace detail

/// Writes one modality's layer stack as a "MIRF" file with a half-precision payload.
inline void write_features(const LayerResolvedFeatures& features, const std::filesystem::path& path)
{
    features.validate();
    for (const Matrix& layer : features.layers) {
        if ((layer.array().abs() > half::kMax + 16.0).any()) {
            throw ValidationError("feature entry outside the half-precision range");
        }
    }
    detail::ByteWriter out;
    out.put_bytes("MIRF");
    out.put_u8(kFeatureFormatVersion);
    out.put_u8(static_cast<std::uint8_t>(features.modality));
    out.put_u32(static_cast<std::uint32_t>(features.num_layers()));
    out.put_u32(static_cast<std::uint32_t>(features.frames()));
    out.put_u32(static_cast<std::uint32_t>(features.hidden()));
    out.put_f32(static_cast<float>(features.frame_rate_hz));
    for (const Matrix& layer : features.layers) {
        for (Eigen::Index t = 0; t < layer.rows(); ++t) {
            for (Eigen::Index c = 0; c < layer.cols(); ++c) {
                out.put_u16(half::from_double(layer(t, c)));
            }
        }
    }
    detail::write_file(path, out.bytes());
}

inline LayerResolvedFeatures read_features(const std::filesystem::path& path)
{
    detail::ByteReader in(detail::read_file(path));
    detail::check_magic(in, "MIRF", path);
    if (in.remaining() < kFeatureHeaderBytes - 4) {
        throw TruncatedError(path.string() + ": truncated header");
    }
    const std::uint8_t version = in.u8();
    if (version != kFeatureFormatVersion) {
        throw VersionMismatchError(path.string() + ": unsupported MIRF version " + std::to_string(version));
    }
    const std::uint8_t code = in.u8();
    if (code >= kNumModalities) {
        throw ValidationError(path.string() + ": unknown modality code");
    }
    const std::uint32_t n_layers = in.u32();
    const std::uint32_t n_frames = in.u32();
    const std::uint32_t n_hidden = in.u32();
    const float rate = in.f32();
    if (n_layers == 0 || n_frames == 0 || n_hidden == 0) {
        throw ValidationError(path.string() + ": header declares an empty dimension");
    }
    const std::uint64_t count = std::uint64_t{n_layers} * n_frames * n_hidden;
    if (in.remaining() < count * 2) {
        throw TruncatedError(path.string() + ": truncated payload");
    }
    if (in.remaining() > count * 2) {
        throw IoError(path.string() + ": trailing bytes after payload");
    }
    LayerResolvedFeatures features;
    features.modality = static_cast<Modality>(code);
    features.frame_rate_hz = rate;
    features.layers.assign(n_layers, Matrix(n_frames, n_hidden));
    for (Matrix& layer : features.layers) {
        for (Eigen::Index t = 0; t < layer.rows(); ++t) {
            for (Eigen::Index c = 0; c < layer.cols(); ++c) {
                layer(t, c) = half::to_double(in.u16());
            }
        }
    }
    features.validate();
    return features;
}

/// "MIRT": dense full-precision matrix (targets and predictions).
inline void write_matrix(const Matrix& m, const std::filesystem::path& path)
{
    detail::ByteWriter out;
    out.put_bytes("MIRT");
    out.put_u8(kMatrixFormatVersion);
    out.put_u32(static_cast<std::uint32_t>(m.rows()));
    out.put_u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out.put_f64(m(r, c));
        }
    }
    detail::write_file(path, out.bytes());
}

inline Matrix read_matrix(const std::filesystem::path& path)
{
    detail::ByteReader in(detail::read_file(path));
    detail::check_magic(in, "MIRT", path);
    if (in.remaining() < kMatrixHeaderBytes - 4) {
        throw TruncatedError(path.string() + ": truncated header");
    }
    const std::uint8_t version = in.u8();
    if (version != kMatrixFormatVersion) {
        throw VersionMismatchError(path.string() + ": unsupported MIRT version");
    }
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    const std::uint64_t count = std::uint64_t{rows} * cols;
    if (in.remaining() < count * 8) {
        throw TruncatedError(path.string() + ": truncated payload");
    }
    if (in.remaining() > count * 8) {
        throw IoError(path.string() + ": trailing bytes after payload");
    }
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            m(r, c) = in.f64();
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Planted ground truth
// ---------------------------------------------------------------------------

/// Generative description of a synthetic dataset with a known layer-selective
/// linear mapping from features to responses.
struct PlantedSpec {
    std::array<int, kNumModalities> layers{12, 12, 12};
    std::array<int, kNumModalities> hidden{32, 32, 32};
    std::array<int, kNumModalities> planted_layer{6, 6, 6};
    int frames = 100;
    int k_out = 20;
    int parcels = 50;
    int n_subjects = 2;
    double frame_rate_hz = 2.0;
    double noise_std = 0.1;
    std::vector<double> kernel{1.0};
    // Rows ordered vision, audio, text; (sum of hidden) x parcels.
    Matrix planted_map;
    // Constant per-layer offset added to every frame, one (L_m x d_m) matrix per modality.
    // Gives each layer a content signature; a pooler without layer positions can
    // only tell layers apart through content.
    std::array<Matrix, kNumModalities> layer_offsets;

    [[nodiscard]] int total_hidden() const { return hidden[0] + hidden[1] + hidden[2]; }
    [[nodiscard]] int row_offset(Modality m) const
    {
        int off = 0;
        for (std::size_t s = 0; s < slot(m); ++s) {
            off += hidden[s];
        }
        return off;
    }

    void validate() const
    {
        for (std::size_t s = 0; s < kNumModalities; ++s) {
            if (layers[s] < 1 || hidden[s] < 1) {
                throw ValidationError("planted spec needs L_m, d_m >= 1");
            }
            if (planted_layer[s] < 0 || planted_layer[s] >= layers[s]) {
                throw ValidationError("planted layer out of range");
            }
            if (layer_offsets[s].size() != 0 &&
                (layer_offsets[s].rows() != layers[s] || layer_offsets[s].cols() != hidden[s])) {
                throw ValidationError("layer offsets have the wrong shape");
            }
        }
        if (frames < k_out || k_out < 1 || parcels < 1 || n_subjects < 1) {
            throw ValidationError("planted spec needs T >= K >= 1, P >= 1, N_S >= 1");
        }
        if (planted_map.rows() != total_hidden() || planted_map.cols() != parcels) {
            throw ValidationError("planted map must be (sum d_m) x P");
        }
        if (noise_std < 0.0) {
            throw ValidationError("noise_std must be non-negative");
        }
        double sum = 0.0;
        for (double k : kernel) {
            sum += k;
        }
        if (kernel.empty() || std::fabs(sum - 1.0) > 1e-12) {
            throw ValidationError("temporal kernel weights must sum to 1");
        }
    }
};

/// Fills `planted_map` and `layer_offsets`. Map rows of modalities outside `used`
/// are zero; remaining entries are scaled so the TR-pooled noiseless response
/// has roughly unit variance.
inline void populate_planted_spec(PlantedSpec& spec, ModalitySet used, double offset_scale, std::uint64_t seed)
{
    int used_dims = 0;
    for (Modality m : kAllModalities) {
        if (used.contains(m)) {
            used_dims += spec.hidden[slot(m)];
        }
    }
    if (used_dims == 0) {
        throw ValidationError("planted map needs at least one modality");
    }
    const double frames_per_tr = static_cast<double>(spec.frames) / spec.k_out;
    const double scale = std::sqrt(frames_per_tr / used_dims);
    spec.planted_map = Matrix::Zero(spec.total_hidden(), spec.parcels);
    Rng map_rng = make_rng(seed, {0x6d6170});
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Modality m : kAllModalities) {
        if (!used.contains(m)) {
            continue;
        }
        const int off = spec.row_offset(m);
        for (int r = 0; r < spec.hidden[slot(m)]; ++r) {
            for (int p = 0; p < spec.parcels; ++p) {
                spec.planted_map(off + r, p) = scale * normal(map_rng);
            }
        }
    }
    for (Modality m : kAllModalities) {
        Rng rng = make_rng(seed, {0x736967, slot(m)});
        Matrix& off = spec.layer_offsets[slot(m)];
        off.resize(spec.layers[slot(m)], spec.hidden[slot(m)]);
        for (Eigen::Index i = 0; i < off.size(); ++i) {
            off.data()[i] = offset_scale * normal(rng);
        }
    }
}

/// Deterministic synthetic windows. Subjects are assigned round-robin; all
/// windows are marked as training data (see assign_validation_split).
inline std::vector<StimulusWindow> generate_planted_dataset(const PlantedSpec& spec, int n_windows, std::uint64_t seed)
{
    spec.validate();
    if (n_windows < 1) {
        throw ValidationError("n_windows must be >= 1");
    }
    std::vector<StimulusWindow> windows;
    windows.reserve(static_cast<std::size_t>(n_windows));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int w = 0; w < n_windows; ++w) {
        StimulusWindow window;
        window.subject = w % spec.n_subjects;
        char id[32];
        std::snprintf(id, sizeof(id), "w%05d", w);
        window.window_id = id;

        Matrix drive = Matrix::Zero(spec.frames, spec.parcels);
        for (Modality m : kAllModalities) {
            const std::size_t s = slot(m);
            Rng rng = make_rng(seed, {static_cast<std::uint64_t>(w), 1 + s});
            LayerResolvedFeatures& f = window.features[s];
            f.modality = m;
            f.frame_rate_hz = spec.frame_rate_hz;
            f.layers.assign(static_cast<std::size_t>(spec.layers[s]), Matrix(spec.frames, spec.hidden[s]));
            for (int l = 0; l < spec.layers[s]; ++l) {
                Matrix& layer = f.layers[static_cast<std::size_t>(l)];
                for (int t = 0; t < spec.frames; ++t) {
                    for (int c = 0; c < spec.hidden[s]; ++c) {
                        double v = normal(rng);
                        if (spec.layer_offsets[s].size() != 0) {
                            v += spec.layer_offsets[s](l, c);
                        }
                        // Stored features are the half-precision values that land on disk.
                        layer(t, c) = half::round_trip(v);
                    }
                }
            }
            drive.noalias() += f.layers[static_cast<std::size_t>(spec.planted_layer[s])] *
                               spec.planted_map.middleRows(spec.row_offset(m), spec.hidden[s]);
        }

        Matrix smoothed = Matrix::Zero(spec.frames, spec.parcels);
        for (int t = 0; t < spec.frames; ++t) {
            for (std::size_t j = 0; j < spec.kernel.size(); ++j) {
                const int src = std::max(0, t - static_cast<int>(j));
                smoothed.row(t) += spec.kernel[j] * drive.row(src);
            }
        }
        window.target = pool_to_tr(smoothed, spec.k_out);
        if (spec.noise_std > 0.0) {
            Rng noise_rng = make_rng(seed, {static_cast<std::uint64_t>(w), 100});
            for (Eigen::Index i = 0; i < window.target.size(); ++i) {
                window.target.data()[i] += spec.noise_std * normal(noise_rng);
            }
        }
        windows.push_back(std::move(window));
    }
    return windows;
}

/// Marks the trailing `n_val` windows as validation data.
inline void assign_validation_split(std::vector<StimulusWindow>& windows, std::size_t n_val)
{
    if (n_val >= windows.size()) {
        throw ValidationError("validation split must leave training windows");
    }
    for (std::size_t i = 0; i < windows.size(); ++i) {
        windows[i].split = i + n_val >= windows.size() ? Split::val : Split::train;
    }
}

inline std::vector<const StimulusWindow*> select_split(const std::vector<StimulusWindow>& windows, Split split)
{
    std::vector<const StimulusWindow*> out;
    for (const StimulusWindow& w : windows) {
        if (w.split == split) {
            out.push_back(&w);
        }
    }
    return out;
}

inline int count_subjects(const std::vector<StimulusWindow>& windows)
{
    int n = 0;
    for (const StimulusWindow& w : windows) {
        n = std::max(n, w.subject + 1);
    }
    return n;
}

// ---------------------------------------------------------------------------
// Target normalization
// ---------------------------------------------------------------------------

/// Per-parcel affine map fitted on training targets.
struct TargetNormalizer {
    RowVector mean;
    RowVector scale;

    static TargetNormalizer identity(Eigen::Index parcels)
    {
        return {RowVector::Zero(parcels), RowVector::Ones(parcels)};
    }

    static TargetNormalizer fit(const std::vector<const StimulusWindow*>& windows)
    {
        if (windows.empty()) {
            throw ValidationError("cannot fit a normalizer on no windows");
        }
        const Eigen::Index p = windows[0]->target.cols();
        RowVector sum = RowVector::Zero(p);
        double n = 0.0;
        for (const StimulusWindow* w : windows) {
            sum += w->target.colwise().sum();
            n += static_cast<double>(w->target.rows());
        }
        const RowVector mean = sum / n;
        RowVector sq = RowVector::Zero(p);
        for (const StimulusWindow* w : windows) {
            sq += (w->target.rowwise() - mean).array().square().matrix().colwise().sum();
        }
        RowVector scale = (sq / n).array().sqrt().matrix();
        for (Eigen::Index i = 0; i < p; ++i) {
            if (!(scale(i) > 0.0)) {
                scale(i) = 1.0;
            }
        }
        return {mean, scale};
    }

    [[nodiscard]] Matrix apply(const Matrix& y) const
    {
        return ((y.rowwise() - mean).array().rowwise() / scale.array()).matrix();
    }
    [[nodiscard]] Matrix invert(const Matrix& z) const
    {
        return ((z.array().rowwise() * scale.array()).matrix().rowwise() + mean);
    }
};

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<StimulusWindow> windows;
    double frame_rate_hz = 2.0;
    int k_out = 0;
    int parcels = 0;

    [[nodiscard]] std::vector<const StimulusWindow*> train() const { return select_split(windows, Split::train); }
    [[nodiscard]] std::vector<const StimulusWindow*> val() const { return select_split(windows, Split::val); }
    [[nodiscard]] int n_subjects() const { return count_subjects(windows); }
};

/// Writes every window's feature and target files under `dir` and a manifest
/// (`dir/manifest.json`) referencing them by relative path.
inline std::filesystem::path write_dataset(const Dataset& data, const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir / "features");
    fs::create_directories(dir / "targets");
    nlohmann::ordered_json manifest;
    manifest["frame_rate_hz"] = data.frame_rate_hz;
    manifest["k_out"] = data.k_out;
    manifest["parcels"] = data.parcels;
    manifest["windows"] = nlohmann::ordered_json::array();
    for (const StimulusWindow& w : data.windows) {
        nlohmann::ordered_json entry;
        entry["id"] = w.window_id;
        entry["subject"] = w.subject;
        entry["split"] = w.split == Split::train ? "train" : "val";
        nlohmann::ordered_json feats;
        for (Modality m : {Modality::text, Modality::audio, Modality::vision}) {
            const std::string rel = "features/" + w.window_id + "_" + std::string(to_string(m)) + ".mirf";
            write_features(w.at(m), dir / rel);
            feats[std::string(to_string(m))] = rel;
        }
        entry["features"] = feats;
        const std::string target_rel = "targets/" + w.window_id + ".mirt";
        write_matrix(w.target, dir / target_rel);
        entry["target"] = target_rel;
        manifest["windows"].push_back(entry);
    }
    const fs::path path = dir / "manifest.json";
    detail::write_file(path, manifest.dump(2) + "\n");
    return path;
}

inline Dataset read_dataset(const std::filesystem::path& manifest_path)
{
    namespace fs = std::filesystem;
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(detail::read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(manifest_path.string() + ": " + e.what());
    }
    const fs::path base = manifest_path.parent_path();
    Dataset data;
    try {
        data.frame_rate_hz = manifest.at("frame_rate_hz").get<double>();
        data.k_out = manifest.at("k_out").get<int>();
        data.parcels = manifest.at("parcels").get<int>();
        for (const auto& entry : manifest.at("windows")) {
            StimulusWindow w;
            w.window_id = entry.at("id").get<std::string>();
            w.subject = entry.at("subject").get<int>();
            const std::string split = entry.value("split", std::string("train"));
            if (split != "train" && split != "val") {
                throw ValidationError("window " + w.window_id + ": split must be train or val");
            }
            w.split = split == "train" ? Split::train : Split::val;
            for (Modality m : kAllModalities) {
                const auto rel = entry.at("features").at(std::string(to_string(m))).get<std::string>();
                w.features[slot(m)] = read_features(base / rel);
                if (w.features[slot(m)].modality != m) {
                    throw ValidationError(rel + ": modality code does not match manifest slot");
                }
            }
            w.target = read_matrix(base / entry.at("target").get<std::string>());
            w.validate();
            if (w.target.rows() != data.k_out || w.target.cols() != data.parcels) {
                throw ValidationError("window " + w.window_id + ": target shape disagrees with manifest");
            }
            data.windows.push_back(std::move(w));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(manifest_path.string() + ": " + e.what());
    }
    return data;
}

}  // namespace mirage

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mirage {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Rng = std::mt19937_64;

// Enum values double as the on-disk modality code and as the fusion slot.
// Fusion concatenates in this order: vision, audio, text.
enum class Modality : std::uint8_t { vision = 0, audio = 1, text = 2 };

inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::array<Modality, kNumModalities> kAllModalities{Modality::vision, Modality::audio,
                                                                     Modality::text};

inline constexpr std::size_t slot(Modality m) { return static_cast<std::size_t>(m); }

inline std::string_view to_string(Modality m)
{
    switch (m) {
    case Modality::vision: return "vision";
    case Modality::audio: return "audio";
    case Modality::text: return "text";
    }
    return "?";
}

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed arguments, shapes or values that break a documented invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public IoError {
public:
    using IoError::IoError;
};

class TruncatedError : public IoError {
public:
    using IoError::IoError;
};

class VersionMismatchError : public IoError {
public:
    using IoError::IoError;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Raised when training produces a non-finite loss.
class NumericalError : public Error {
public:
    using Error::Error;
};

inline Modality parse_modality(std::string_view name)
{
    for (Modality m : kAllModalities) {
        if (to_string(m) == name) {
            return m;
        }
    }
    throw ValidationError("unknown modality '" + std::string(name) + "'");
}

/// Set of modalities as a 3-bit mask indexed by fusion slot.
class ModalitySet {
public:
    constexpr ModalitySet() = default;
    constexpr ModalitySet(std::initializer_list<Modality> ms)
    {
        for (Modality m : ms) {
            insert(m);
        }
    }

    static constexpr ModalitySet all() { return ModalitySet{Modality::vision, Modality::audio, Modality::text}; }
    static constexpr ModalitySet from_bits(std::uint8_t bits)
    {
        ModalitySet s;
        s.bits_ = bits & 0x7u;
        return s;
    }

    constexpr void insert(Modality m) { bits_ |= static_cast<std::uint8_t>(1u << slot(m)); }
    constexpr void erase(Modality m) { bits_ &= static_cast<std::uint8_t>(~(1u << slot(m))); }
    [[nodiscard]] constexpr bool contains(Modality m) const { return (bits_ >> slot(m)) & 1u; }
    [[nodiscard]] constexpr bool empty() const { return bits_ == 0; }
    [[nodiscard]] constexpr std::uint8_t bits() const { return bits_; }
    [[nodiscard]] constexpr std::size_t size() const
    {
        return static_cast<std::size_t>((bits_ & 1u) + ((bits_ >> 1) & 1u) + ((bits_ >> 2) & 1u));
    }

    [[nodiscard]] std::string str() const
    {
        std::string out;
        for (Modality m : kAllModalities) {
            if (contains(m)) {
                if (!out.empty()) {
                    out += ',';
                }
                out += to_string(m);
            }
        }
        return out;
    }

    friend constexpr bool operator==(ModalitySet a, ModalitySet b) { return a.bits_ == b.bits_; }

private:
    std::uint8_t bits_ = 0;
};

/// Parses "vision,text" style lists.
inline ModalitySet parse_modality_set(std::string_view text)
{
    ModalitySet set;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t end = text.find(',', start);
        const std::string_view token = text.substr(start, end == std::string_view::npos ? text.size() - start : end - start);
        if (!token.empty()) {
            set.insert(parse_modality(token));
        }
        if (end == std::string_view::npos) {
            break;
        }
        start = end + 1;
    }
    return set;
}

/// Independent deterministic stream derived from a run seed and a stream path.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {})
{
    std::vector<std::uint32_t> words;
    words.push_back(static_cast<std::uint32_t>(seed));
    words.push_back(static_cast<std::uint32_t>(seed >> 32));
    for (std::uint64_t s : stream) {
        words.push_back(static_cast<std::uint32_t>(s));
        words.push_back(static_cast<std::uint32_t>(s >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace mirage

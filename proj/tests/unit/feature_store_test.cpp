#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <map>

using namespace mirage;
using namespace mirage::fixtures;

namespace {

// Every finite non-negative half value, ascending, with its bit pattern.
const std::vector<std::pair<double, std::uint16_t>>& finite_halves()
{
    static const auto table = [] {
        std::vector<std::pair<double, std::uint16_t>> t;
        for (std::uint32_t bits = 0; bits < 0x7c00u; ++bits) {
            const int exponent = static_cast<int>(bits >> 10);
            const int mant = static_cast<int>(bits & 0x3ffu);
            const double v = exponent == 0 ? mant * std::pow(2.0, -24) : (1.0 + mant / 1024.0) * std::pow(2.0, exponent - 15);
            t.emplace_back(v, static_cast<std::uint16_t>(bits));
        }
        return t;
    }();
    return table;
}

// Nearest half by exhaustive search, ties to the even mantissa.
double nearest_half(double x)
{
    const auto& t = finite_halves();
    const double a = std::fabs(x);
    auto hi = std::lower_bound(t.begin(), t.end(), a, [](const auto& e, double v) { return e.first < v; });
    if (hi == t.end()) {
        return std::copysign(t.back().first, x);
    }
    if (hi == t.begin() || hi->first == a) {
        return std::copysign(hi->first, x);
    }
    const auto lo = hi - 1;
    const double dl = a - lo->first;
    const double dh = hi->first - a;
    const auto pick = dl < dh ? lo : dh < dl ? hi : ((lo->second & 1u) == 0 ? lo : hi);
    return std::copysign(pick->first, x);
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::string& bytes)
{
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

PlantedSpec small_spec()
{
    PlantedSpec spec;
    spec.layers = {4, 3, 5};
    spec.hidden = {6, 4, 5};
    spec.planted_layer = {1, 2, 3};
    spec.frames = 12;
    spec.k_out = 4;
    spec.parcels = 7;
    spec.n_subjects = 3;
    spec.noise_std = 0.0;
    return spec;
}

}  // namespace

TEST(Half, MatchesExhaustiveNearestSearch)
{
    Rng rng = make_rng(11);
    std::uniform_real_distribution<double> expo(-26.0, 16.0);
    std::uniform_real_distribution<double> unit(1.0, 2.0);
    for (int i = 0; i < 20000; ++i) {
        const double x = (i % 2 == 0 ? 1.0 : -1.0) * unit(rng) * std::pow(2.0, std::floor(expo(rng)));
        if (std::fabs(x) > half::kMax) {
            continue;
        }
        ASSERT_EQ(half::round_trip(x), nearest_half(x)) << x;
    }
}

TEST(Half, TiesAndSpecialValues)
{
    EXPECT_EQ(half::round_trip(1.0 + std::pow(2.0, -11)), 1.0);  // tie, even mantissa below
    EXPECT_EQ(half::round_trip(1.0 + 3 * std::pow(2.0, -11)), 1.0 + 2 * std::pow(2.0, -10));
    EXPECT_EQ(half::round_trip(65504.0), 65504.0);
    EXPECT_TRUE(std::isinf(half::round_trip(65520.0)));
    EXPECT_EQ(half::round_trip(std::pow(2.0, -24)), std::pow(2.0, -24));
    EXPECT_EQ(half::round_trip(std::pow(2.0, -26)), 0.0);
    EXPECT_TRUE(std::signbit(half::round_trip(-0.0)));
    EXPECT_TRUE(std::isnan(half::to_double(half::from_double(std::nan("")))));
}

TEST(FeatureFile, ZeroCaseLayout)
{
    const auto dir = scratch_dir("fs_zero");
    LayerResolvedFeatures f;
    f.modality = Modality::audio;
    f.layers = {Matrix::Zero(1, 1)};
    write_features(f, dir / "z.mirf");
    const std::string bytes = slurp(dir / "z.mirf");
    EXPECT_EQ(bytes.size(), kFeatureHeaderBytes + 2);
    EXPECT_EQ(bytes.substr(0, 4), "MIRF");
    const LayerResolvedFeatures back = read_features(dir / "z.mirf");
    EXPECT_EQ(back.modality, Modality::audio);
    EXPECT_EQ(back.layers[0](0, 0), 0.0);
}

TEST(FeatureFile, RoundTripEqualsHalfCast)
{
    const auto dir = scratch_dir("fs_rt");
    Rng rng = make_rng(3);
    std::uniform_int_distribution<int> dim(1, 6);
    for (int trial = 0; trial < 25; ++trial) {
        const int l = dim(rng);
        const int t = dim(rng);
        const int d = dim(rng);
        LayerResolvedFeatures f = random_features(Modality::vision, l, t, d, rng);
        f.frame_rate_hz = 1.5;
        for (Matrix& m : f.layers) {
            m *= 50.0;
        }
        write_features(f, dir / "f.mirf");
        const LayerResolvedFeatures back = read_features(dir / "f.mirf");
        ASSERT_EQ(back.num_layers(), f.num_layers());
        ASSERT_EQ(back.frames(), f.frames());
        ASSERT_EQ(back.hidden(), f.hidden());
        EXPECT_EQ(back.frame_rate_hz, 1.5);
        for (std::size_t i = 0; i < f.num_layers(); ++i) {
            for (Eigen::Index k = 0; k < f.layers[i].size(); ++k) {
                ASSERT_EQ(back.layers[i].data()[k], nearest_half(f.layers[i].data()[k]));
            }
        }
    }
}

TEST(FeatureFile, RejectsBadInput)
{
    const auto dir = scratch_dir("fs_bad");
    Rng rng = make_rng(5);
    LayerResolvedFeatures f = random_features(Modality::text, 2, 3, 4, rng);
    f.layers[1](2, 3) = std::nan("");
    EXPECT_THROW(write_features(f, dir / "nan.mirf"), ValidationError);

    f = random_features(Modality::text, 2, 3, 4, rng);
    write_features(f, dir / "ok.mirf");
    const std::string bytes = slurp(dir / "ok.mirf");

    spit(dir / "trunc.mirf", bytes.substr(0, bytes.size() - 1));
    EXPECT_THROW(read_features(dir / "trunc.mirf"), TruncatedError);
    spit(dir / "short.mirf", bytes.substr(0, 10));
    EXPECT_THROW(read_features(dir / "short.mirf"), TruncatedError);

    std::string zero_l = bytes;
    std::fill(zero_l.begin() + 6, zero_l.begin() + 10, '\0');
    spit(dir / "zl.mirf", zero_l);
    EXPECT_THROW(read_features(dir / "zl.mirf"), ValidationError);

    std::string magic = bytes;
    magic[0] = 'X';
    spit(dir / "magic.mirf", magic);
    EXPECT_THROW(read_features(dir / "magic.mirf"), BadMagicError);

    std::string version = bytes;
    version[4] = 9;
    spit(dir / "ver.mirf", version);
    EXPECT_THROW(read_features(dir / "ver.mirf"), VersionMismatchError);

    EXPECT_THROW(read_features(dir / "missing.mirf"), IoError);
}

TEST(MatrixFile, RoundTripIsExact)
{
    const auto dir = scratch_dir("fs_mat");
    Rng rng = make_rng(8);
    const Matrix m = random_matrix(5, 3, rng);
    write_matrix(m, dir / "m.mirt");
    EXPECT_EQ(read_matrix(dir / "m.mirt"), m);
    const std::string bytes = slurp(dir / "m.mirt");
    spit(dir / "t.mirt", bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_matrix(dir / "t.mirt"), TruncatedError);
}

TEST(PoolToTr, WorkedExamples)
{
    Matrix col(4, 1);
    col << 1, 2, 3, 4;
    Matrix expect(2, 1);
    expect << 1.5, 3.5;
    EXPECT_EQ(pool_to_tr(col, 2), expect);

    Rng rng = make_rng(1);
    const Matrix x = random_matrix(6, 3, rng);
    EXPECT_EQ(pool_to_tr(x, 6), x);

    const Matrix five = random_matrix(5, 2, rng);
    const Matrix got = pool_to_tr(five, 2);
    EXPECT_NEAR((got.row(0) - five.topRows(2).colwise().mean()).norm(), 0.0, 1e-15);
    EXPECT_NEAR((got.row(1) - five.bottomRows(3).colwise().mean()).norm(), 0.0, 1e-15);

    EXPECT_THROW(pool_to_tr(five, 6), ValidationError);
    EXPECT_THROW(pool_to_tr(five, 0), ValidationError);
}

TEST(PoolToTr, BlocksTileAndMatchFloorRule)
{
    for (Eigen::Index t = 1; t <= 30; ++t) {
        for (Eigen::Index k = 1; k <= t; ++k) {
            Eigen::Index next = 0;
            for (Eigen::Index j = 0; j < k; ++j) {
                const auto [lo, hi] = tr_block(j, t, k);
                ASSERT_EQ(lo, next);
                ASSERT_EQ(lo, static_cast<Eigen::Index>(std::floor(static_cast<double>(j) * t / k)));
                ASSERT_GT(hi, lo);
                next = hi;
            }
            ASSERT_EQ(next, t);
        }
    }
}

TEST(PoolToTr, PreservesColumnMeansOnDivisibleLengths)
{
    Rng rng = make_rng(2);
    for (Eigen::Index k : {1, 2, 3, 5}) {
        const Matrix x = random_matrix(k * 4, 3, rng);
        EXPECT_LT((pool_to_tr(x, k).colwise().mean() - x.colwise().mean()).norm(), 1e-14);
    }
}

TEST(PoolToTr, BackwardIsAdjoint)
{
    Rng rng = make_rng(4);
    const Matrix x = random_matrix(11, 3, rng);
    const Matrix g = random_matrix(4, 3, rng);
    const double lhs = (pool_to_tr(x, 4).array() * g.array()).sum();
    const double rhs = (x.array() * pool_to_tr_backward(g, 11).array()).sum();
    EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Planted, NoiselessTargetsAreThePooledPlantedLayer)
{
    PlantedSpec spec = small_spec();
    spec.layers = {3, 3, 3};
    spec.planted_layer = {2, 2, 2};
    spec.hidden = {7, 7, 7};
    spec.parcels = 7;
    populate_planted_spec(spec, ModalitySet{Modality::audio}, 0.0, 9);
    spec.planted_map.setZero();
    spec.planted_map.middleRows(spec.row_offset(Modality::audio), 7) = Matrix::Identity(7, 7);
    const auto windows = generate_planted_dataset(spec, 3, 9);
    for (const StimulusWindow& w : windows) {
        const Matrix expect = pool_to_tr(w.at(Modality::audio).layers[2], spec.k_out);
        EXPECT_LT((w.target - expect).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Planted, DeterministicAndLinearlyRecoverable)
{
    PlantedSpec spec = small_spec();
    populate_planted_spec(spec, ModalitySet::all(), 1.0, 21);
    const auto a = generate_planted_dataset(spec, 40, 21);
    const auto b = generate_planted_dataset(spec, 40, 21);
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_EQ(a[i].target, b[i].target);
        for (Modality m : kAllModalities) {
            for (std::size_t l = 0; l < a[i].at(m).num_layers(); ++l) {
                ASSERT_EQ(a[i].at(m).layers[l], b[i].at(m).layers[l]);
            }
        }
    }
    // Least squares on the pooled planted layers (plus intercept) fits exactly.
    const Eigen::Index rows = static_cast<Eigen::Index>(a.size()) * spec.k_out;
    Matrix x(rows, spec.total_hidden() + 1);
    Matrix y(rows, spec.parcels);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Eigen::Index r = static_cast<Eigen::Index>(i) * spec.k_out;
        for (Modality m : kAllModalities) {
            x.block(r, spec.row_offset(m), spec.k_out, spec.hidden[slot(m)]) =
                pool_to_tr(a[i].at(m).layers[static_cast<std::size_t>(spec.planted_layer[slot(m)])], spec.k_out);
        }
        x.block(r, spec.total_hidden(), spec.k_out, 1).setOnes();
        y.middleRows(r, spec.k_out) = a[i].target;
    }
    const Matrix w = x.colPivHouseholderQr().solve(y);
    const Matrix fit = x * w;
    const Vector r = pearson_per_parcel(fit, y);
    EXPECT_GT(r.minCoeff(), 1.0 - 1e-6);
}

TEST(Planted, NoiseVarianceMatchesSpec)
{
    PlantedSpec spec = small_spec();
    spec.k_out = 10;
    spec.frames = 20;
    spec.parcels = 5;
    populate_planted_spec(spec, ModalitySet::all(), 1.0, 4);
    const auto clean = generate_planted_dataset(spec, 400, 4);
    spec.noise_std = 0.3;
    const auto noisy = generate_planted_dataset(spec, 400, 4);
    for (Eigen::Index p = 0; p < spec.parcels; ++p) {
        double sum = 0.0;
        double sq = 0.0;
        double n = 0.0;
        for (std::size_t i = 0; i < clean.size(); ++i) {
            const auto diff = noisy[i].target.col(p) - clean[i].target.col(p);
            sum += diff.sum();
            sq += diff.squaredNorm();
            n += static_cast<double>(diff.size());
        }
        const double var = sq / n - (sum / n) * (sum / n);
        EXPECT_NEAR(var, 0.09, 0.05 * 0.09) << "parcel " << p;
    }
}

TEST(Planted, UnusedModalitiesHaveZeroMapRows)
{
    PlantedSpec spec = small_spec();
    populate_planted_spec(spec, ModalitySet{Modality::vision, Modality::text}, 1.0, 2);
    EXPECT_EQ(spec.planted_map.middleRows(spec.row_offset(Modality::audio), spec.hidden[1]).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT(spec.planted_map.middleRows(spec.row_offset(Modality::text), spec.hidden[2]).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Dataset, ManifestRoundTripAndByteIdenticalRerun)
{
    PlantedSpec spec = small_spec();
    spec.noise_std = 0.1;
    populate_planted_spec(spec, ModalitySet::all(), 1.0, 6);
    Dataset data;
    data.windows = generate_planted_dataset(spec, 6, 6);
    assign_validation_split(data.windows, 2);
    data.k_out = spec.k_out;
    data.parcels = spec.parcels;

    const auto d1 = scratch_dir("ds1");
    const auto d2 = scratch_dir("ds2");
    const auto m1 = write_dataset(data, d1);
    write_dataset(data, d2);
    for (const auto& entry : std::filesystem::recursive_directory_iterator(d1)) {
        if (entry.is_regular_file()) {
            ASSERT_EQ(slurp(entry.path()), slurp(d2 / std::filesystem::relative(entry.path(), d1))) << entry.path();
        }
    }

    const Dataset back = read_dataset(m1);
    ASSERT_EQ(back.windows.size(), data.windows.size());
    EXPECT_EQ(back.val().size(), 2u);
    EXPECT_EQ(back.n_subjects(), 3);
    for (std::size_t i = 0; i < back.windows.size(); ++i) {
        EXPECT_EQ(back.windows[i].target, data.windows[i].target);
        EXPECT_EQ(back.windows[i].subject, data.windows[i].subject);
        EXPECT_EQ(back.windows[i].split, data.windows[i].split);
        for (Modality m : kAllModalities) {
            for (std::size_t l = 0; l < back.windows[i].at(m).num_layers(); ++l) {
                EXPECT_EQ(back.windows[i].at(m).layers[l], data.windows[i].at(m).layers[l]);
            }
        }
    }
}

TEST(Normalizer, StandardizesTrainingTargets)
{
    Rng rng = make_rng(12);
    std::vector<StimulusWindow> windows;
    for (int i = 0; i < 4; ++i) {
        StimulusWindow w;
        w.target = (random_matrix(5, 3, rng) * 2.0).array() + 7.0;
        windows.push_back(w);
    }
    const auto ptrs = select_split(windows, Split::train);
    const TargetNormalizer n = TargetNormalizer::fit(ptrs);
    Matrix all(20, 3);
    for (int i = 0; i < 4; ++i) {
        all.middleRows(i * 5, 5) = n.apply(windows[static_cast<std::size_t>(i)].target);
    }
    EXPECT_LT(all.colwise().mean().norm(), 1e-12);
    const RowVector var = all.array().square().colwise().mean();
    EXPECT_LT((var.array() - 1.0).abs().maxCoeff(), 1e-12);
    EXPECT_LT((n.invert(n.apply(windows[0].target)) - windows[0].target).norm(), 1e-12);
}

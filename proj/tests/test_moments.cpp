// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "weightlens/moments.hpp"
#include "weightlens/rng.hpp"

using namespace weightlens;
using Catch::Approx;

namespace {

std::vector<double> gaussian_sample(std::size_t n, std::uint64_t seed, double mean = 0.0,
                                    double sigma = 1.0) {
    rng::Xoshiro256pp r(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = r.gaussian(mean, sigma);
    return v;
}

}  // namespace

TEST_CASE("hand-computed fixtures") {
    SECTION("1..5: mean 3, skewness 0, kurtosis 1.7") {
        const std::vector<double> v{1, 2, 3, 4, 5};
        const auto s = stats::summarize(v);
        CHECK(s.mean == Approx(3.0).margin(1e-15));
        CHECK(s.std == Approx(std::sqrt(2.0)).margin(1e-15));
        REQUIRE(s.skewness);
        REQUIRE(s.kurtosis);
        CHECK(*s.skewness == Approx(0.0).margin(1e-15));
        CHECK(*s.kurtosis == Approx(1.7).margin(1e-15));  // m4/m2^2 = 6.8/4
    }
    SECTION("symmetric two-point law: skewness 0, kurtosis 1") {
        for (int reps : {1, 3, 10}) {
            std::vector<double> v;
            for (int i = 0; i < reps; ++i) {
                v.push_back(-1.0);
                v.push_back(1.0);
            }
            const auto s = stats::summarize(v);
            CHECK(*s.skewness == Approx(0.0).margin(1e-15));
            CHECK(*s.kurtosis == Approx(1.0).margin(1e-15));
        }
    }
}

TEST_CASE("million-draw Gaussian self-check") {
    const auto v = gaussian_sample(1'000'000, 42);

    SECTION("raw moments match the Gaussian reference") {
        const auto s = stats::summarize(v);
        CHECK(std::abs(*s.skewness) < 0.01);
        CHECK(std::abs(*s.kurtosis - 3.0) < 0.05);
        CHECK(s.retain_ratio == 1.0);
    }
    SECTION("3-sigma filter: retain ratio matches the 99.7 rule") {
        stats::FilterSpec f;  // defaults to sigma_k = 3
        const auto s = stats::summarize(v, f);
        CHECK(s.retain_ratio == Approx(0.9973).margin(0.001));
        // Kurtosis recomputed on the truncated sample: the analytic value
        // for a 3-sigma-clipped Gaussian is 2.8289, not 3.
        CHECK(*s.kurtosis ==
              Approx(oracles::truncated_gaussian_kurtosis(3.0)).margin(0.02));
        CHECK(std::abs(*s.skewness) < 0.01);
    }
    SECTION("2-sigma filter: retain ratio matches the 95.4 rule") {
        stats::FilterSpec f;
        f.sigma_k = 2.0;
        const auto s = stats::summarize(v, f);
        CHECK(s.retain_ratio == Approx(0.954).margin(0.002));
    }
}

TEST_CASE("summarize agrees with the naive long-double oracle") {
    rng::Xoshiro256pp r(777);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 10 + r.next() % 9991;
        std::vector<double> v(n);
        const double scale = std::exp(r.uniform(-3, 3));
        for (auto& x : v) x = scale * (r.gaussian() + r.uniform(-1, 1));

        const auto got = stats::summarize(v);
        const auto want = oracles::naive_moments(v);
        REQUIRE(got.count == want.count);
        CHECK(got.mean == Approx(static_cast<double>(want.mean)).epsilon(1e-10).margin(1e-12));
        CHECK(got.std ==
              Approx(std::sqrt(static_cast<double>(want.m2))).epsilon(1e-10).margin(1e-12));
        CHECK(*got.skewness == Approx(want.skewness()).epsilon(1e-10).margin(1e-10));
        CHECK(*got.kurtosis == Approx(want.kurtosis()).epsilon(1e-10));
    }
}

TEST_CASE("filtered summarize agrees with the naive oracle on the same window") {
    const auto v = gaussian_sample(50'000, 4, 0.3, 2.0);
    stats::FilterSpec f;
    f.sigma_k = 3.0;
    f.magnitude_min = 0.05;
    const auto got = stats::summarize(v, f);

    const auto full = oracles::naive_moments(v);
    const double sigma = std::sqrt(static_cast<double>(full.m2));
    const double lo = static_cast<double>(full.mean) - 3.0 * sigma;
    const double hi = static_cast<double>(full.mean) + 3.0 * sigma;
    const auto want = oracles::naive_moments(
        v, [&](double x) { return x >= lo && x <= hi && std::abs(x) >= 0.05; });

    REQUIRE(got.count == want.count);
    CHECK(got.mean == Approx(static_cast<double>(want.mean)).epsilon(1e-10).margin(1e-12));
    CHECK(*got.kurtosis == Approx(want.kurtosis()).epsilon(1e-10));
    CHECK(*got.skewness == Approx(want.skewness()).epsilon(1e-9).margin(1e-10));
}

TEST_CASE("filter composition equals the intersection predicate") {
    const auto v = gaussian_sample(20'000, 5);
    stats::FilterSpec both;
    both.sigma_k = 2.5;
    both.magnitude_min = 0.1;
    const auto combined = stats::summarize(v, both);

    // Manual intersection: same window from the full sample, then |w| >= 0.1.
    const auto full = stats::summarize(v);
    const double lo = full.mean - 2.5 * full.std;
    const double hi = full.mean + 2.5 * full.std;
    std::vector<double> kept;
    for (double x : v)
        if (x >= lo && x <= hi && std::abs(x) >= 0.1) kept.push_back(x);
    const auto manual = stats::summarize(kept);

    CHECK(combined.count == manual.count);
    CHECK(combined.mean == Approx(manual.mean).margin(1e-12));
    CHECK(*combined.kurtosis == Approx(*manual.kurtosis).epsilon(1e-12));
    // small_frac counts relative to the post-sigma-filter sample.
    const auto sigma_only = stats::summarize(v, stats::FilterSpec{2.5, std::nullopt});
    CHECK(combined.small_frac ==
          Approx(1.0 - static_cast<double>(manual.count) / sigma_only.count).margin(1e-12));
}

TEST_CASE("sigma window anchored at zero instead of the sample mean") {
    // A strongly shifted sample: the zero-anchored window keeps a very
    // different subset than the mean-anchored one.
    const auto v = gaussian_sample(20'000, 21, 5.0, 1.0);
    stats::FilterSpec zero;
    zero.sigma_k = 2.0;
    zero.center = stats::Center::Zero;
    const auto got = stats::summarize(v, zero);

    const auto full = oracles::naive_moments(v);
    const double sigma = std::sqrt(static_cast<double>(full.m2));
    const auto want =
        oracles::naive_moments(v, [&](double x) { return x >= -2 * sigma && x <= 2 * sigma; });
    CHECK(got.count == want.count);
    CHECK(got.retain_ratio ==
          Approx(static_cast<double>(want.count) / v.size()).margin(1e-15));
    // Far less than the mean-anchored window would keep.
    stats::FilterSpec anchored;
    anchored.sigma_k = 2.0;
    const auto mean_anchored = stats::summarize(v, anchored);
    CHECK(got.retain_ratio < 0.05);
    CHECK(mean_anchored.retain_ratio > 0.9);
}

TEST_CASE("scale and shift equivariance") {
    const auto v = gaussian_sample(10'000, 6, 0.5, 1.5);
    const auto base = stats::summarize(v);
    rng::Xoshiro256pp r(8);

    for (double c : {2.0, -3.5, 0.25}) {
        std::vector<double> scaled(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = c * v[i];
        const auto s = stats::summarize(scaled);
        CHECK(s.mean == Approx(c * base.mean).epsilon(1e-9).margin(1e-12));
        CHECK(s.std == Approx(std::abs(c) * base.std).epsilon(1e-9));
        const double sign3 = c > 0 ? 1.0 : -1.0;
        CHECK(*s.skewness == Approx(sign3 * *base.skewness).epsilon(1e-8).margin(1e-10));
        CHECK(*s.kurtosis == Approx(*base.kurtosis).epsilon(1e-9));
    }
    for (int i = 0; i < 3; ++i) {
        const double shift = r.uniform(-100, 100);
        std::vector<double> shifted(v.size());
        for (std::size_t j = 0; j < v.size(); ++j) shifted[j] = v[j] + shift;
        const auto s = stats::summarize(shifted);
        CHECK(s.mean == Approx(base.mean + shift).epsilon(1e-9).margin(1e-9));
        CHECK(s.std == Approx(base.std).epsilon(1e-9));
        CHECK(*s.skewness == Approx(*base.skewness).margin(1e-6));
        CHECK(*s.kurtosis == Approx(*base.kurtosis).epsilon(1e-9));
    }
}

TEST_CASE("i.i.d. factorization: disjoint sub-blocks share their moments") {
    const auto v = gaussian_sample(800'000, 11, 0.1, 0.7);
    const auto pooled = stats::summarize(v);
    const std::size_t blocks = 8;
    const std::size_t bn = v.size() / blocks;
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::span<const double> block(v.data() + b * bn, bn);
        const auto s = stats::summarize(block);
        // CLT tolerances: se(mean) = sigma/sqrt(n), se(kurt) ~ sqrt(24/n).
        const double se_mean = pooled.std / std::sqrt(static_cast<double>(bn));
        CHECK(std::abs(s.mean - pooled.mean) < 5 * se_mean);
        CHECK(std::abs(s.std - pooled.std) < 5 * pooled.std / std::sqrt(2.0 * bn));
        CHECK(std::abs(*s.skewness - *pooled.skewness) < 5 * std::sqrt(6.0 / bn));
        CHECK(std::abs(*s.kurtosis - *pooled.kurtosis) < 5 * std::sqrt(24.0 / bn));
    }
}

TEST_CASE("degenerate and error paths") {
    SECTION("all-equal sample: std 0, undefined skew/kurt") {
        const std::vector<double> v(100, 7.5);
        const auto s = stats::summarize(v);
        CHECK(s.std == 0.0);
        CHECK_FALSE(s.skewness);
        CHECK_FALSE(s.kurtosis);
        CHECK(s.mean == 7.5);
    }
    SECTION("single element") {
        const std::vector<double> v{3.0};
        const auto s = stats::summarize(v);
        CHECK(s.count == 1);
        CHECK_FALSE(s.skewness);
    }
    SECTION("empty input throws") {
        CHECK_THROWS_AS(stats::summarize(std::vector<double>{}), stats::EmptyInput);
        const std::vector<double> nans(3, std::numeric_limits<double>::quiet_NaN());
        CHECK_THROWS_AS(stats::summarize(nans), stats::EmptyInput);
    }
    SECTION("magnitude filter removing everything throws EmptyAfterFilter") {
        const std::vector<double> v{0.001, -0.002, 0.0005};
        stats::FilterSpec f;
        f.sigma_k = std::nullopt;
        f.magnitude_min = 1.0;
        CHECK_THROWS_AS(stats::summarize(v, f), stats::EmptyAfterFilter);
    }
    SECTION("non-finite values are counted and excluded") {
        std::vector<double> v{1.0, 2.0, 3.0, std::numeric_limits<double>::infinity(),
                              std::numeric_limits<double>::quiet_NaN()};
        const auto s = stats::summarize(v);
        CHECK(s.nonfinite_count == 2);
        CHECK(s.count == 3);
        CHECK(s.mean == Approx(2.0).margin(1e-15));
    }
}

TEST_CASE("histogram basics") {
    SECTION("boundary convention: floor((x-lo)/width), hi lands in the last bin") {
        // 0.5 sits exactly on the inner edge: floor(0.5/0.5) = 1 puts it in
        // the upper bin; 1.0 == hi is assigned to the last bin.
        const std::vector<double> v{0.0, 0.5, 1.0};
        const auto h = stats::histogram(v, 2, std::pair{0.0, 1.0});
        CHECK(h.counts == std::vector<std::uint64_t>{1, 2});
        CHECK(h.underflow == 0);
        CHECK(h.overflow == 0);
    }
    SECTION("below-range value increments underflow") {
        const std::vector<double> v{-0.5, 0.25};
        const auto h = stats::histogram(v, 2, std::pair{0.0, 1.0});
        CHECK(h.underflow == 1);
        CHECK(h.counts[0] == 1);
    }
    SECTION("count conservation with non-finite inputs") {
        std::vector<double> v{0.1, 0.9, 5.0, -3.0, std::numeric_limits<double>::quiet_NaN()};
        const auto h = stats::histogram(v, 4, std::pair{0.0, 1.0});
        std::uint64_t total = h.underflow + h.overflow;
        for (auto c : h.counts) total += c;
        CHECK(total == 4);  // only the finite inputs
    }
    SECTION("empirical symmetry of a Gaussian histogram") {
        const auto v = gaussian_sample(100'000, 12);
        const auto h = stats::histogram(v, 100, std::pair{-4.0, 4.0});
        std::uint64_t max_diff = 0;
        for (std::size_t i = 0; i < 50; ++i) {
            const auto a = h.counts[i], b = h.counts[99 - i];
            max_diff = std::max(max_diff, a > b ? a - b : b - a);
        }
        CHECK(static_cast<double>(max_diff) / v.size() < 0.01);
    }
    SECTION("constant sample still produces a usable default range") {
        const std::vector<double> v(10, 2.0);
        const auto h = stats::histogram(v, 4);
        std::uint64_t total = 0;
        for (auto c : h.counts) total += c;
        CHECK(total == 10);
    }
}

TEST_CASE("outlier_split") {
    SECTION("direct definition") {
        const std::vector<double> v{0.1, 5.0};
        auto [in_range, outliers] = stats::outlier_split(v, 0.3, stats::Center::Zero);
        CHECK(in_range == std::vector<double>{0.1});
        CHECK(outliers == std::vector<double>{5.0});
    }
    SECTION("threshold 0 keeps exactly the zero elements") {
        const std::vector<double> v{0.0, 0.1, -0.0, -2.0};
        auto [in_range, outliers] = stats::outlier_split(v, 0.0, stats::Center::Zero);
        CHECK(in_range.size() == 2);
        CHECK(outliers.size() == 2);
    }
    SECTION("threshold = max |x| leaves no outliers") {
        const std::vector<double> v{-3.0, 1.0, 2.0};
        auto [in_range, outliers] = stats::outlier_split(v, 3.0, stats::Center::Zero);
        CHECK(outliers.empty());
        CHECK(in_range.size() == 3);
    }
    SECTION("split is a permutation of the finite input") {
        const auto v = gaussian_sample(1'000, 13);
        auto [in_range, outliers] = stats::outlier_split(v, 1.0, stats::Center::SampleMean);
        CHECK(in_range.size() + outliers.size() == v.size());
        std::vector<double> together = in_range;
        together.insert(together.end(), outliers.begin(), outliers.end());
        std::vector<double> orig = v;
        std::sort(together.begin(), together.end());
        std::sort(orig.begin(), orig.end());
        CHECK(together == orig);
    }
}

TEST_CASE("StatsSummary serialization") {
    const std::vector<double> v{1, 2, 3, 4, 5};
    const auto s = stats::summarize(v);
    const auto j = s.to_json();
    CHECK(j["count"] == 5);
    CHECK(j["mean"] == 3.0);
    CHECK(j.contains("skewness"));
    CHECK(j.contains("retain_ratio"));

    const auto csv = s.csv_row();
    CHECK(csv.find("3,") != std::string::npos);

    // Degenerate: null JSON fields, empty CSV cells.
    const std::vector<double> flat(4, 1.0);
    const auto d = stats::summarize(flat);
    CHECK(d.to_json()["skewness"].is_null());
    CHECK(d.csv_row().find(",,") != std::string::npos);
}

// SPDX-License-Identifier: Apache-2.0
//
// Distribution statistics for weight tensors: mean, population standard
// deviation, skewness (m3 / m2^1.5), kurtosis (m4 / m2^2, Gaussian
// reference 3), k-sigma retain ratio, small-magnitude fraction, histograms
// and outlier splits.
//
// Everything is computed in two passes with Neumaier-compensated sums so
// that fourth moments stay stable over 1e7+ elements. The population
// divisor (N) is used throughout. When a sigma filter is configured, the
// window is placed using the FULL sample's mean and sigma and every
// reported moment — mean and std included — is then recomputed on the
// restricted sample.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "weightlens/tensor_io.hpp"

namespace weightlens::stats {

struct EmptyInput : Error { using Error::Error; };
struct EmptyAfterFilter : Error { using Error::Error; };

enum class Center { Zero, SampleMean };

// sigma_k: half-width of the retain window in full-sample sigmas.
// magnitude_min: drop |w| below this from the sigma-filtered sample.
// center: where the sigma window is anchored.
struct FilterSpec {
    std::optional<double> sigma_k = 3.0;
    std::optional<double> magnitude_min;
    Center center = Center::SampleMean;
};

struct StatsSummary {
    std::uint64_t count = 0;  // elements the reported moments cover
    double mean = 0.0;
    double std = 0.0;
    std::optional<double> skewness;  // absent for degenerate samples
    std::optional<double> kurtosis;
    double retain_ratio = 1.0;  // fraction kept by the sigma window
    double small_frac = 0.0;    // fraction removed by the magnitude filter
    std::uint64_t nonfinite_count = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["count"] = count;
        j["mean"] = mean;
        j["std"] = std;
        if (skewness) j["skewness"] = *skewness; else j["skewness"] = nullptr;
        if (kurtosis) j["kurtosis"] = *kurtosis; else j["kurtosis"] = nullptr;
        j["retain_ratio"] = retain_ratio;
        j["small_frac"] = small_frac;
        j["nonfinite_count"] = nonfinite_count;
        return j;
    }

    static std::string csv_header() {
        return "count,mean,std,skewness,kurtosis,retain_ratio,small_frac,nonfinite_count";
    }

    std::string csv_row() const {
        auto num = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            return std::string(buf);
        };
        std::string r = std::to_string(count) + "," + num(mean) + "," + num(std) + ",";
        r += skewness ? num(*skewness) : std::string();
        r += ",";
        r += kurtosis ? num(*kurtosis) : std::string();
        r += "," + num(retain_ratio) + "," + num(small_frac) + "," +
             std::to_string(nonfinite_count);
        return r;
    }
};

namespace detail {

// Neumaier variant of Kahan summation.
struct CompensatedSum {
    double sum = 0.0;
    double comp = 0.0;

    void add(double x) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x))
            comp += (sum - t) + x;
        else
            comp += (x - t) + sum;
        sum = t;
    }
    double value() const { return sum + comp; }
};

template <typename Pred>
inline std::pair<double, std::uint64_t> mean_where(std::span<const double> v, Pred pred) {
    CompensatedSum acc;
    std::uint64_t n = 0;
    for (double x : v) {
        if (!std::isfinite(x) || !pred(x)) continue;
        acc.add(x);
        ++n;
    }
    return {n ? acc.value() / static_cast<double>(n) : 0.0, n};
}

struct CentralMoments {
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
};

template <typename Pred>
inline CentralMoments central_moments_where(std::span<const double> v, double mean,
                                            std::uint64_t n, Pred pred) {
    CompensatedSum s2, s3, s4;
    for (double x : v) {
        if (!std::isfinite(x) || !pred(x)) continue;
        const double d = x - mean;
        const double d2 = d * d;
        s2.add(d2);
        s3.add(d2 * d);
        s4.add(d2 * d2);
    }
    const auto dn = static_cast<double>(n);
    return {s2.value() / dn, s3.value() / dn, s4.value() / dn};
}

}  // namespace detail

// Computes the summary of the finite entries of `values`, applying the
// sigma window and magnitude filter as a single intersection predicate.
inline StatsSummary summarize(std::span<const double> values,
                              const std::optional<FilterSpec>& filter = std::nullopt) {
    StatsSummary out;
    std::uint64_t finite = 0;
    for (double x : values) {
        if (std::isfinite(x)) ++finite;
        else ++out.nonfinite_count;
    }
    if (finite == 0) throw EmptyInput("no finite values to summarize");

    const bool has_sigma = filter && filter->sigma_k.has_value();
    const bool has_mag = filter && filter->magnitude_min.has_value();

    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    if (has_sigma) {
        auto [mean_full, n_full] = detail::mean_where(values, [](double) { return true; });
        const auto cm = detail::central_moments_where(values, mean_full, n_full,
                                                      [](double) { return true; });
        const double sigma_full = std::sqrt(std::max(0.0, cm.m2));
        const double c = filter->center == Center::Zero ? 0.0 : mean_full;
        lo = c - *filter->sigma_k * sigma_full;
        hi = c + *filter->sigma_k * sigma_full;
    }

    auto in_window = [lo, hi](double x) { return x >= lo && x <= hi; };
    std::uint64_t kept_sigma = finite;
    if (has_sigma) {
        kept_sigma = 0;
        for (double x : values)
            if (std::isfinite(x) && in_window(x)) ++kept_sigma;
    }
    out.retain_ratio = static_cast<double>(kept_sigma) / static_cast<double>(finite);

    const double mag = has_mag ? *filter->magnitude_min : 0.0;
    auto final_pred = [&](double x) { return in_window(x) && (!has_mag || std::abs(x) >= mag); };

    auto [mean_kept, n_kept] = detail::mean_where(values, final_pred);
    if (n_kept == 0) throw EmptyAfterFilter("all values removed by filters");
    out.small_frac = has_mag && kept_sigma > 0
                         ? static_cast<double>(kept_sigma - n_kept) / static_cast<double>(kept_sigma)
                         : 0.0;

    const auto m = detail::central_moments_where(values, mean_kept, n_kept, final_pred);
    out.count = n_kept;
    out.mean = mean_kept;
    out.std = std::sqrt(std::max(0.0, m.m2));
    if (n_kept > 1 && m.m2 > 0.0) {
        out.skewness = m.m3 / std::pow(m.m2, 1.5);
        out.kurtosis = m.m4 / (m.m2 * m.m2);
    }
    return out;
}

struct Histogram {
    std::vector<double> bin_edges;  // length bins + 1
    std::vector<std::uint64_t> counts;
    std::uint64_t underflow = 0;
    std::uint64_t overflow = 0;

    double center(std::size_t i) const { return 0.5 * (bin_edges[i] + bin_edges[i + 1]); }
};

// Uniform-width bins over [lo, hi]; x == hi lands in the last bin. The
// default range is [mean - 4 sigma, mean + 4 sigma] of the finite sample.
inline Histogram histogram(std::span<const double> values, std::size_t bins,
                           std::optional<std::pair<double, double>> range = std::nullopt) {
    if (bins < 1) throw EmptyInput("histogram needs at least one bin");
    std::uint64_t finite = 0;
    for (double x : values)
        if (std::isfinite(x)) ++finite;
    if (finite == 0) throw EmptyInput("no finite values to bin");

    double lo, hi;
    if (range) {
        lo = range->first;
        hi = range->second;
        if (!(lo < hi)) throw EmptyInput("histogram range must satisfy lo < hi");
    } else {
        auto [mean, n] = detail::mean_where(values, [](double) { return true; });
        const auto m = detail::central_moments_where(values, mean, n, [](double) { return true; });
        const double sigma = std::sqrt(std::max(0.0, m.m2));
        lo = mean - 4.0 * sigma;
        hi = mean + 4.0 * sigma;
        if (!(lo < hi)) {  // constant sample
            lo = mean - 0.5;
            hi = mean + 0.5;
        }
    }

    Histogram h;
    h.bin_edges.resize(bins + 1);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i <= bins; ++i)
        h.bin_edges[i] = lo + width * static_cast<double>(i);
    h.bin_edges[bins] = hi;
    h.counts.assign(bins, 0);

    for (double x : values) {
        if (!std::isfinite(x)) continue;
        if (x < lo) {
            ++h.underflow;
        } else if (x > hi) {
            ++h.overflow;
        } else if (x == hi) {
            ++h.counts[bins - 1];
        } else {
            auto idx = static_cast<std::size_t>((x - lo) / width);
            if (idx >= bins) idx = bins - 1;
            ++h.counts[idx];
        }
    }
    return h;
}

// Splits finite values into [c - threshold, c + threshold] (closed) and the
// rest. The two outputs together are a permutation of the finite input.
inline std::pair<std::vector<double>, std::vector<double>>
outlier_split(std::span<const double> values, double threshold, Center center) {
    double c = 0.0;
    if (center == Center::SampleMean) {
        auto [mean, n] = detail::mean_where(values, [](double) { return true; });
        c = n ? mean : 0.0;
    }
    std::vector<double> in_range, outliers;
    for (double x : values) {
        if (!std::isfinite(x)) continue;
        if (x >= c - threshold && x <= c + threshold)
            in_range.push_back(x);
        else
            outliers.push_back(x);
    }
    return {std::move(in_range), std::move(outliers)};
}

// Population standard deviation of the finite entries; 0 for empty input.
inline double population_std(std::span<const double> values) {
    auto [mean, n] = detail::mean_where(values, [](double) { return true; });
    if (n == 0) return 0.0;
    const auto m = detail::central_moments_where(values, mean, n, [](double) { return true; });
    return std::sqrt(std::max(0.0, m.m2));
}

}  // namespace weightlens::stats

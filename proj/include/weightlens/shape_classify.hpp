// SPDX-License-Identifier: Apache-2.0
//
// Assigns each tensor one of four distribution shapes — Gaussian, Sharp,
// Inverted-T, Line — from two scale-invariant features:
//
//   kurt3s       kurtosis after the 3-sigma filter
//   center_mass  fraction of post-filter elements with |w| < alpha * sigma_full
//
// The decision ladder checks center_mass for Line and Inverted-T first,
// then kurtosis for Sharp and Gaussian; anything that matches no rule is
// Unknown, which is a first-class outcome. Thresholds can be calibrated
// from a labeled sweep; the calibration picks midpoints between adjacent
// regimes and fails loudly when no separating value exists.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "weightlens/moments.hpp"

namespace weightlens::shape {

struct DegenerateSample : Error { using Error::Error; };
struct Inseparable : Error { using Error::Error; };

enum class ShapeClass { Gaussian, Sharp, InvertedT, Line, Unknown };

inline const char* to_string(ShapeClass c) {
    switch (c) {
        case ShapeClass::Gaussian: return "Gaussian";
        case ShapeClass::Sharp: return "Sharp";
        case ShapeClass::InvertedT: return "InvertedT";
        case ShapeClass::Line: return "Line";
        case ShapeClass::Unknown: break;
    }
    return "Unknown";
}

inline std::optional<ShapeClass> shape_from_string(std::string_view s) {
    if (s == "Gaussian") return ShapeClass::Gaussian;
    if (s == "Sharp") return ShapeClass::Sharp;
    if (s == "InvertedT") return ShapeClass::InvertedT;
    if (s == "Line") return ShapeClass::Line;
    if (s == "Unknown") return ShapeClass::Unknown;
    return std::nullopt;
}

struct ShapeFeatures {
    double kurt3s = 0.0;
    double center_mass = 0.0;
    double alpha = 0.05;
};

// The center band coefficient defaults to 0.05: a scale-invariant analog of
// an absolute 1e-3 cutoff on tensors whose full-sample sigma is around 0.1.
inline constexpr double kDefaultAlpha = 0.05;

struct ClassifierThresholds {
    double line_min_center_mass = 0.90;
    double invt_min_center_mass = 0.40;
    double sharp_min_kurt = 3.5;
    std::pair<double, double> gaussian_kurt_band{2.5, 3.5};

    bool valid() const {
        return line_min_center_mass > invt_min_center_mass &&
               gaussian_kurt_band.first < sharp_min_kurt &&
               gaussian_kurt_band.first < gaussian_kurt_band.second;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["line_min_center_mass"] = line_min_center_mass;
        j["invt_min_center_mass"] = invt_min_center_mass;
        j["sharp_min_kurt"] = sharp_min_kurt;
        j["gaussian_kurt_lo"] = gaussian_kurt_band.first;
        j["gaussian_kurt_hi"] = gaussian_kurt_band.second;
        return j;
    }

    static ClassifierThresholds from_json(const nlohmann::json& j) {
        ClassifierThresholds t;
        t.line_min_center_mass = j.at("line_min_center_mass").get<double>();
        t.invt_min_center_mass = j.at("invt_min_center_mass").get<double>();
        t.sharp_min_kurt = j.at("sharp_min_kurt").get<double>();
        t.gaussian_kurt_band = {j.at("gaussian_kurt_lo").get<double>(),
                                j.at("gaussian_kurt_hi").get<double>()};
        return t;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw io::IoError("cannot write thresholds file: " + path.string());
        out << to_json().dump(2) << "\n";
    }

    static ClassifierThresholds load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw io::IoError("cannot read thresholds file: " + path.string());
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }
};

// Features are invariant under rescaling of the input tensor: both the
// sigma window and the center band are expressed in full-sample sigmas.
inline ShapeFeatures extract_features(std::span<const double> values,
                                      double alpha = kDefaultAlpha) {
    auto full = stats::summarize(values);
    if (full.std == 0.0)
        throw DegenerateSample("all elements equal; shape features undefined");
    const double sigma_full = full.std;
    const double mean_full = full.mean;

    stats::FilterSpec f;
    f.sigma_k = 3.0;
    auto filtered = stats::summarize(values, f);
    if (!filtered.kurtosis)
        throw DegenerateSample("sample degenerate after 3-sigma filter");

    const double lo = mean_full - 3.0 * sigma_full;
    const double hi = mean_full + 3.0 * sigma_full;
    const double band = alpha * sigma_full;
    std::uint64_t kept = 0, in_band = 0;
    for (double x : values) {
        if (!std::isfinite(x) || x < lo || x > hi) continue;
        ++kept;
        if (std::abs(x) < band) ++in_band;
    }

    ShapeFeatures feat;
    feat.kurt3s = *filtered.kurtosis;
    feat.center_mass = kept ? static_cast<double>(in_band) / static_cast<double>(kept) : 0.0;
    feat.alpha = alpha;
    return feat;
}

// First match wins; the ladder is total.
inline ShapeClass classify(const ShapeFeatures& f, const ClassifierThresholds& t) {
    if (f.center_mass >= t.line_min_center_mass) return ShapeClass::Line;
    if (f.center_mass >= t.invt_min_center_mass) return ShapeClass::InvertedT;
    if (f.kurt3s >= t.sharp_min_kurt) return ShapeClass::Sharp;
    if (f.kurt3s >= t.gaussian_kurt_band.first && f.kurt3s <= t.gaussian_kurt_band.second)
        return ShapeClass::Gaussian;
    return ShapeClass::Unknown;
}

struct SweepPoint {
    double noise_sigma = 0.0;
    ShapeFeatures features;
    ShapeClass expected = ShapeClass::Unknown;
};

// Returns thresholds that classify every sweep point to its expected label,
// chosen as midpoints between adjacent regimes' feature values. All four
// regimes must be present; throws Inseparable otherwise, naming the
// conflicting pair.
inline ClassifierThresholds calibrate_thresholds(std::span<const SweepPoint> sweep) {
    struct Extremes {
        double min_cm = std::numeric_limits<double>::infinity();
        double max_cm = -std::numeric_limits<double>::infinity();
        double min_kurt = std::numeric_limits<double>::infinity();
        double max_kurt = -std::numeric_limits<double>::infinity();
        const SweepPoint* min_cm_pt = nullptr;
        const SweepPoint* max_cm_pt = nullptr;
        const SweepPoint* min_kurt_pt = nullptr;
        const SweepPoint* max_kurt_pt = nullptr;
        bool present = false;
    };
    Extremes line, invt, sharp, gauss;
    auto bucket = [&](ShapeClass c) -> Extremes* {
        switch (c) {
            case ShapeClass::Line: return &line;
            case ShapeClass::InvertedT: return &invt;
            case ShapeClass::Sharp: return &sharp;
            case ShapeClass::Gaussian: return &gauss;
            default: return nullptr;
        }
    };
    for (const auto& p : sweep) {
        Extremes* e = bucket(p.expected);
        if (!e) throw Inseparable("sweep contains an Unknown expected label");
        e->present = true;
        if (p.features.center_mass < e->min_cm) { e->min_cm = p.features.center_mass; e->min_cm_pt = &p; }
        if (p.features.center_mass > e->max_cm) { e->max_cm = p.features.center_mass; e->max_cm_pt = &p; }
        if (p.features.kurt3s < e->min_kurt) { e->min_kurt = p.features.kurt3s; e->min_kurt_pt = &p; }
        if (p.features.kurt3s > e->max_kurt) { e->max_kurt = p.features.kurt3s; e->max_kurt_pt = &p; }
    }
    for (const auto* e : {&line, &invt, &sharp, &gauss}) {
        if (!e->present)
            throw Inseparable("sweep does not cover all four regimes; cannot place boundaries");
    }

    auto conflict = [](const SweepPoint* a, const SweepPoint* b, const char* what) {
        return Inseparable(std::string("no separating threshold for ") + what +
                           " between noise levels " + std::to_string(a->noise_sigma) + " and " +
                           std::to_string(b->noise_sigma));
    };

    ClassifierThresholds t;
    {
        const double below = std::max({invt.max_cm, sharp.max_cm, gauss.max_cm});
        const SweepPoint* below_pt =
            invt.max_cm >= sharp.max_cm && invt.max_cm >= gauss.max_cm ? invt.max_cm_pt
            : sharp.max_cm >= gauss.max_cm                             ? sharp.max_cm_pt
                                                                       : gauss.max_cm_pt;
        if (!(line.min_cm > below)) throw conflict(line.min_cm_pt, below_pt, "Line center_mass");
        t.line_min_center_mass = 0.5 * (line.min_cm + below);
    }
    {
        const double below = std::max(sharp.max_cm, gauss.max_cm);
        const SweepPoint* below_pt =
            sharp.max_cm >= gauss.max_cm ? sharp.max_cm_pt : gauss.max_cm_pt;
        if (!(invt.min_cm > below))
            throw conflict(invt.min_cm_pt, below_pt, "InvertedT center_mass");
        t.invt_min_center_mass = 0.5 * (invt.min_cm + below);
    }
    {
        if (!(sharp.min_kurt > gauss.max_kurt))
            throw conflict(sharp.min_kurt_pt, gauss.max_kurt_pt, "Sharp kurtosis");
        t.sharp_min_kurt = 0.5 * (sharp.min_kurt + gauss.max_kurt);
        // No class sits below Gaussian: mirror the upper margin downward.
        const double margin = t.sharp_min_kurt - gauss.max_kurt;
        t.gaussian_kurt_band = {gauss.min_kurt - margin, t.sharp_min_kurt};
    }

    for (const auto& p : sweep) {
        const ShapeClass got = classify(p.features, t);
        if (got != p.expected)
            throw Inseparable("calibrated thresholds still misclassify noise level " +
                              std::to_string(p.noise_sigma) + " as " + to_string(got));
    }
    return t;
}

}  // namespace weightlens::shape

// SPDX-License-Identifier: Apache-2.0
//
// weightlens — checkpoint forensics CLI.
//
// Subcommands: inspect, classify, hist, synth, merge, compare-delta,
// depth-trend, toy-adapt. Every subcommand supports --out FILE and
// --format json|csv|table; reports carry input digests and are
// deterministic given (inputs, flags, seed).
//
// Exit codes: 0 success, 1 internal error, 2 input error, 3 empty result.
// Errors go to standard error, never into the report body.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "weightlens/merging.hpp"
#include "weightlens/moments.hpp"
#include "weightlens/noise_adapt.hpp"
#include "weightlens/report.hpp"
#include "weightlens/shape_classify.hpp"
#include "weightlens/synth_wstar.hpp"
#include "weightlens/tensor_io.hpp"
#include "weightlens/version.hpp"

namespace wl = weightlens;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitInput = 2;
constexpr int kExitEmpty = 3;

struct EmptySelection : wl::Error {
    using Error::Error;
};

struct OutputOpts {
    std::string out;
    std::string format = "json";
};

void add_output_opts(CLI::App* cmd, OutputOpts& o) {
    cmd->add_option("--out", o.out, "Write the report to this file instead of stdout");
    cmd->add_option("--format", o.format, "Report format")
        ->check(CLI::IsMember({"json", "csv", "table"}))
        ->capture_default_str();
}

void emit(const wl::report::Envelope& env, const OutputOpts& o) {
    std::string body;
    if (o.format == "csv") body = wl::report::rows_to_csv(env.rows);
    else if (o.format == "table") body = wl::report::rows_to_table(env.rows);
    else body = env.to_json().dump(2) + "\n";

    if (o.out.empty()) {
        std::cout << body;
    } else {
        std::ofstream out(o.out, std::ios::binary | std::ios::trunc);
        if (!out) throw wl::io::IoError("cannot write report: " + o.out);
        out << body;
    }
    for (const auto& w : env.warnings) std::cerr << "warning: " << w << "\n";
}

wl::stats::Center parse_center(const std::string& s) {
    return s == "zero" ? wl::stats::Center::Zero : wl::stats::Center::SampleMean;
}

// Names of supported float tensors matching the pattern, in header order.
std::vector<std::string> select_float_tensors(const wl::io::ModelIndex& index,
                                              const std::optional<std::string>& pattern,
                                              std::vector<std::string>* skipped) {
    std::optional<std::regex> re;
    if (pattern) re.emplace(*pattern);
    std::vector<std::string> names;
    for (const auto& meta : index.metas()) {
        if (re && !std::regex_search(meta.name, *re)) continue;
        if (!meta.dtype.supported()) {
            if (skipped)
                skipped->push_back("skipped '" + meta.name + "' (dtype " + meta.dtype.wire_name + ")");
            continue;
        }
        names.push_back(meta.name);
    }
    return names;
}

ordered_json stats_row(const std::string& name, const wl::stats::StatsSummary& s) {
    ordered_json row;
    row["name"] = name;
    const ordered_json js = s.to_json();
    for (const auto& [k, v] : js.items()) row[k] = v;
    return row;
}

// ---------------------------------------------------------------- inspect

struct InspectArgs {
    std::string model;
    std::string pattern;
    double sigma_k = 3.0;
    bool no_sigma_filter = false;
    double min_magnitude = -1.0;
    std::string center = "mean";
    OutputOpts out;
};

int cmd_inspect(const InspectArgs& a) {
    wl::report::Envelope env;
    env.command = "inspect";
    env.add_input(a.model);

    const auto index = wl::io::read_header(a.model);
    std::optional<std::string> pattern =
        a.pattern.empty() ? std::nullopt : std::optional<std::string>(a.pattern);
    const auto names = select_float_tensors(index, pattern, &env.warnings);
    if (names.empty()) throw EmptySelection("no float tensors matched");

    std::optional<wl::stats::FilterSpec> filter;
    if (!a.no_sigma_filter || a.min_magnitude >= 0.0) {
        wl::stats::FilterSpec f;
        f.sigma_k = a.no_sigma_filter ? std::nullopt : std::optional<double>(a.sigma_k);
        if (a.min_magnitude >= 0.0) f.magnitude_min = a.min_magnitude;
        f.center = parse_center(a.center);
        filter = f;
    }

    std::vector<ordered_json> rows(names.size());
    wl::report::parallel_for(names.size(), [&](std::size_t i) {
        const auto rec = wl::io::load_tensor(index, names[i]);
        rows[i] = stats_row(names[i], wl::stats::summarize(rec.values, filter));
    });

    std::vector<std::size_t> order(names.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return names[x] < names[y]; });
    for (auto i : order) env.rows.push_back(std::move(rows[i]));

    // Element-weighted pooled summary across the whole selection.
    std::vector<double> pooled;
    for (const auto& n : names) {
        const auto rec = wl::io::load_tensor(index, n);
        pooled.insert(pooled.end(), rec.values.begin(), rec.values.end());
    }
    env.rows.push_back(stats_row("__pooled__", wl::stats::summarize(pooled, filter)));

    emit(env, a.out);
    return kExitOk;
}

// ---------------------------------------------------------------- classify

struct ClassifyArgs {
    std::string model;
    std::string pattern;
    std::string thresholds_file;
    double alpha = wl::shape::kDefaultAlpha;
    OutputOpts out;
};

int cmd_classify(const ClassifyArgs& a) {
    wl::report::Envelope env;
    env.command = "classify";
    env.add_input(a.model);

    wl::shape::ClassifierThresholds thresholds;
    if (!a.thresholds_file.empty()) {
        if (std::filesystem::exists(a.thresholds_file)) {
            thresholds = wl::shape::ClassifierThresholds::load(a.thresholds_file);
        } else {
            env.warnings.push_back("thresholds file '" + a.thresholds_file +
                                   "' not found; using built-in defaults");
        }
    }

    const auto index = wl::io::read_header(a.model);
    std::optional<std::string> pattern =
        a.pattern.empty() ? std::nullopt : std::optional<std::string>(a.pattern);
    const auto names = select_float_tensors(index, pattern, &env.warnings);
    if (names.empty()) throw EmptySelection("no float tensors matched");

    struct Row {
        std::optional<wl::shape::ShapeFeatures> features;
        wl::shape::ShapeClass shape = wl::shape::ShapeClass::Unknown;
    };
    std::vector<Row> rows(names.size());
    wl::report::parallel_for(names.size(), [&](std::size_t i) {
        const auto rec = wl::io::load_tensor(index, names[i]);
        try {
            const auto f = wl::shape::extract_features(rec.values, a.alpha);
            rows[i] = {f, wl::shape::classify(f, thresholds)};
        } catch (const wl::shape::DegenerateSample&) {
            rows[i] = {std::nullopt, wl::shape::ShapeClass::Unknown};
        }
    });

    std::vector<std::size_t> order(names.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return names[x] < names[y]; });
    for (auto i : order) {
        ordered_json row;
        row["name"] = names[i];
        if (rows[i].features) {
            row["kurt3s"] = rows[i].features->kurt3s;
            row["center_mass"] = rows[i].features->center_mass;
            row["alpha"] = rows[i].features->alpha;
        } else {
            row["kurt3s"] = nullptr;
            row["center_mass"] = nullptr;
            row["alpha"] = a.alpha;
            env.warnings.push_back("tensor '" + names[i] + "' is degenerate; labeled Unknown");
        }
        row["shape"] = wl::shape::to_string(rows[i].shape);
        env.rows.push_back(std::move(row));
    }
    env.extra = thresholds.to_json();

    emit(env, a.out);
    return kExitOk;
}

// ---------------------------------------------------------------- hist

struct HistArgs {
    std::string model;
    std::string tensor;
    std::string pattern;
    std::size_t bins = 100;
    std::vector<double> range;
    bool ascii = false;
    OutputOpts out;
};

int cmd_hist(const HistArgs& a) {
    wl::report::Envelope env;
    env.command = "hist";
    env.add_input(a.model);

    const auto index = wl::io::read_header(a.model);
    std::vector<std::string> names;
    if (!a.tensor.empty()) {
        if (!index.find(a.tensor)) throw wl::io::UnknownTensor("no tensor named '" + a.tensor + "'");
        names.push_back(a.tensor);
    } else {
        std::optional<std::string> pattern =
            a.pattern.empty() ? std::nullopt : std::optional<std::string>(a.pattern);
        names = select_float_tensors(index, pattern, &env.warnings);
    }
    if (names.empty()) throw EmptySelection("no float tensors matched");

    std::vector<double> pooled;
    for (const auto& n : names) {
        const auto rec = wl::io::load_tensor(index, n);
        pooled.insert(pooled.end(), rec.values.begin(), rec.values.end());
    }

    std::optional<std::pair<double, double>> range;
    if (a.range.size() == 2) range = {a.range[0], a.range[1]};
    const auto h = wl::stats::histogram(pooled, a.bins, range);

    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        ordered_json row;
        row["bin_center"] = h.center(i);
        row["count"] = h.counts[i];
        env.rows.push_back(std::move(row));
    }
    env.extra = ordered_json{{"underflow", h.underflow},
                             {"overflow", h.overflow},
                             {"lo", h.bin_edges.front()},
                             {"hi", h.bin_edges.back()},
                             {"tensors", names.size()}};

    if (a.ascii) {
        const std::uint64_t peak = *std::max_element(h.counts.begin(), h.counts.end());
        for (std::size_t i = 0; i < h.counts.size(); ++i) {
            const auto bar = peak ? static_cast<std::size_t>(60.0 * h.counts[i] / peak) : 0;
            std::fprintf(stderr, "%+12.5g | %s\n", h.center(i), std::string(bar, '#').c_str());
        }
    }

    emit(env, a.out);
    return kExitOk;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    std::string config;
    std::string dump_config;
    std::string hist_dir;
    std::string dump_tensors;
    std::string emit_thresholds;
    std::string thresholds_file;
    double alpha = wl::shape::kDefaultAlpha;
    std::size_t bins = 200;
    wl::synth::SynthSpec spec;
    std::string outlier_signs = "symmetric";
    OutputOpts out;
};

std::string level_tag(double sigma) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", sigma);
    return buf;
}

int cmd_synth(SynthArgs& a, const CLI::App* cmd) {
    a.spec.outlier_signs = a.outlier_signs == "positive" ? wl::synth::OutlierSigns::Positive
                                                         : wl::synth::OutlierSigns::Symmetric;
    if (!a.config.empty()) {
        std::ifstream in(a.config);
        if (!in) throw wl::io::IoError("cannot read config: " + a.config);
        nlohmann::json j;
        in >> j;
        const wl::synth::SynthSpec f = wl::synth::SynthSpec::from_json(j);
        // The config file supplies every field the user did not set by flag.
        if (!cmd->count("--points")) a.spec.total_points = f.total_points;
        if (!cmd->count("--nonzero-points")) a.spec.nonzero_points = f.nonzero_points;
        if (!cmd->count("--outlier-frac")) a.spec.outlier_frac = f.outlier_frac;
        if (!cmd->count("--outlier-lo")) a.spec.outlier_band.first = f.outlier_band.first;
        if (!cmd->count("--outlier-hi")) a.spec.outlier_band.second = f.outlier_band.second;
        if (!cmd->count("--gauss-sigma")) a.spec.gauss_sigma = f.gauss_sigma;
        if (!cmd->count("--trunc-min")) a.spec.trunc_min_abs = f.trunc_min_abs;
        if (!cmd->count("--trunc-max")) a.spec.trunc_max_abs = f.trunc_max_abs;
        if (!cmd->count("--noise-levels")) a.spec.noise_levels = f.noise_levels;
        if (!cmd->count("--seed")) a.spec.seed = f.seed;
        if (!cmd->count("--outlier-signs")) a.spec.outlier_signs = f.outlier_signs;
    }
    a.spec.validate();

    if (!a.dump_config.empty()) {
        std::ofstream out(a.dump_config);
        if (!out) throw wl::io::IoError("cannot write config: " + a.dump_config);
        out << a.spec.to_json().dump(2) << "\n";
    }

    wl::synth::SweepOptions opts;
    opts.alpha = a.alpha;
    opts.histogram_bins = a.bins;
    if (!a.thresholds_file.empty()) {
        opts.thresholds = wl::shape::ClassifierThresholds::load(a.thresholds_file);
        opts.allow_calibration = false;  // explicit thresholds win over calibration
    }
    if (!a.dump_tensors.empty()) {
        std::filesystem::create_directories(a.dump_tensors);
        opts.level_sink = [&](double sigma, std::span<const double> values) {
            wl::io::TensorRecord rec;
            rec.name = "wstar_plus_noise";
            rec.shape = {values.size()};
            rec.values.assign(values.begin(), values.end());
            rec.source_dtype = wl::io::DType::f32();
            const auto path = std::filesystem::path(a.dump_tensors) /
                              ("noise_" + level_tag(sigma) + ".safetensors");
            wl::io::write_model({rec}, {wl::io::DType::f32()}, path);
        };
    }

    const auto result = wl::synth::run_regime_sweep(a.spec, opts);

    wl::report::Envelope env;
    env.command = "synth";
    for (const auto& rep : result.reports) {
        ordered_json row;
        row["noise_sigma"] = rep.noise_sigma;
        row["shape"] = wl::shape::to_string(rep.shape);
        row["kurt3s"] = rep.features.kurt3s;
        row["center_mass"] = rep.features.center_mass;
        const ordered_json js = rep.stats.to_json();
        for (const auto& [k, v] : js.items()) row[k] = v;
        env.rows.push_back(std::move(row));
    }
    env.extra = ordered_json{{"wstar_nonzero", result.wstar_nonzero},
                             {"calibrated", result.calibrated},
                             {"thresholds", result.thresholds.to_json()},
                             {"spec", a.spec.to_json()}};

    if (!a.hist_dir.empty()) {
        std::filesystem::create_directories(a.hist_dir);
        for (const auto& rep : result.reports) {
            const auto path = std::filesystem::path(a.hist_dir) /
                              ("hist_" + level_tag(rep.noise_sigma) + ".csv");
            std::ofstream out(path, std::ios::binary);
            if (!out) throw wl::io::IoError("cannot write histogram: " + path.string());
            out << "bin_center,count\r\n";
            for (std::size_t i = 0; i < rep.histogram.counts.size(); ++i) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%.17g,%llu\r\n", rep.histogram.center(i),
                              static_cast<unsigned long long>(rep.histogram.counts[i]));
                out << buf;
            }
        }
    }
    if (!a.emit_thresholds.empty()) result.thresholds.save(a.emit_thresholds);

    emit(env, a.out);
    return kExitOk;
}

// ---------------------------------------------------------------- merge

struct MergeArgs {
    std::string base;
    std::vector<std::string> models;
    double t = 2.0;
    std::string mode = "outlier";
    std::string center = "zero";
    std::string non_float = "copy";
    bool force_f32 = false;
    std::string out_path;
    std::string report_path;
    OutputOpts out;
};

int cmd_merge(const MergeArgs& a) {
    wl::report::Envelope env;
    env.command = "merge";
    env.add_input(a.base);
    for (const auto& m : a.models) env.add_input(m);

    const auto base = wl::io::read_header(a.base);
    std::vector<wl::io::ModelIndex> models;
    models.reserve(a.models.size());
    for (const auto& m : a.models) models.push_back(wl::io::read_header(m));
    std::vector<const wl::io::ModelIndex*> model_ptrs;
    for (const auto& m : models) model_ptrs.push_back(&m);

    const auto tv = wl::merging::task_vectors(base, model_ptrs);

    wl::merging::MergeOptions opts;
    opts.t = a.t;
    opts.center = parse_center(a.center);
    opts.non_float_policy = a.non_float == "fail" ? wl::merging::NonFloatPolicy::Fail
                                                  : wl::merging::NonFloatPolicy::CopyBase;
    wl::merging::MergeOutput merged;
    if (a.mode == "average") merged = wl::merging::merge_average(tv);
    else if (a.mode == "sum") merged = wl::merging::merge_sum(tv);
    else merged = wl::merging::merge_outlier_aware(tv, opts);

    wl::merging::write_merged(merged, base, a.out_path, a.force_f32);

    std::vector<const wl::merging::GroupReport*> groups;
    for (const auto& g : merged.groups) groups.push_back(&g);
    std::sort(groups.begin(), groups.end(),
              [](const auto* x, const auto* y) { return x->name < y->name; });
    for (const auto* g : groups) {
        ordered_json row;
        row["name"] = g->name;
        row["sigma_min"] = g->sigma_min;
        row["threshold"] = g->threshold;
        row["sigma_per_model"] = g->sigma_per_model;
        row["outliers_per_model"] = g->outliers_per_model;
        row["in_range_frac_per_model"] = g->in_range_frac_per_model;
        env.rows.push_back(std::move(row));
    }
    env.extra = ordered_json{{"mode", a.mode},
                             {"t", a.t},
                             {"n_models", a.models.size()},
                             {"merged_file", a.out_path},
                             {"float_tensors", merged.records.size()},
                             {"raw_tensors", merged.raw.size()}};

    if (!a.report_path.empty()) {
        std::ofstream out(a.report_path, std::ios::binary | std::ios::trunc);
        if (!out) throw wl::io::IoError("cannot write report: " + a.report_path);
        out << env.to_json().dump(2) << "\n";
    }
    if (!a.out.out.empty() || a.report_path.empty()) emit(env, a.out);
    return kExitOk;
}

// ---------------------------------------------------------------- compare-delta

struct CompareDeltaArgs {
    std::string base;
    std::string a_model;
    std::string b_model;
    std::string pattern;
    OutputOpts out;
};

int cmd_compare_delta(const CompareDeltaArgs& a) {
    wl::report::Envelope env;
    env.command = "compare-delta";
    env.add_input(a.base);
    env.add_input(a.a_model);
    env.add_input(a.b_model);

    const auto base = wl::io::read_header(a.base);
    const auto ma = wl::io::read_header(a.a_model);
    const auto mb = wl::io::read_header(a.b_model);

    std::optional<std::regex> re;
    if (!a.pattern.empty()) re.emplace(a.pattern);

    std::map<std::string, wl::adapt::Matrix> da, db;
    for (const auto& meta : base.metas()) {
        if (!meta.dtype.supported()) continue;
        if (re && !std::regex_search(meta.name, *re)) continue;
        const auto* fa = ma.find(meta.name);
        const auto* fb = mb.find(meta.name);
        if (!fa || !fb || fa->shape != meta.shape || fb->shape != meta.shape) {
            env.warnings.push_back("skipped '" + meta.name + "' (missing or shape mismatch)");
            continue;
        }
        const auto wb = wl::io::load_tensor(base, meta.name);
        const auto wa = wl::io::load_tensor(ma, meta.name);
        const auto wbb = wl::io::load_tensor(mb, meta.name);
        wl::adapt::Matrix xa(1, wb.values.size()), xb(1, wb.values.size());
        for (std::size_t j = 0; j < wb.values.size(); ++j) {
            xa.data[j] = wa.values[j] - wb.values[j];
            xb.data[j] = wbb.values[j] - wb.values[j];
        }
        da.emplace(meta.name, std::move(xa));
        db.emplace(meta.name, std::move(xb));
    }
    if (da.empty()) throw EmptySelection("no comparable tensors");

    const auto rep = wl::adapt::delta_sigma_report(da, db);
    for (const auto& l : rep.per_layer) {
        ordered_json row;
        row["name"] = l.id;
        row["sigma_a"] = l.sigma_a;
        row["sigma_b"] = l.sigma_b;
        row["abs_diff"] = l.abs_diff;
        env.rows.push_back(std::move(row));
    }
    env.extra = ordered_json{{"mean_abs_diff", rep.mean_abs_diff}, {"layers", rep.per_layer.size()}};

    emit(env, a.out);
    return kExitOk;
}

// ---------------------------------------------------------------- depth-trend

struct DepthTrendArgs {
    std::string base;
    std::string ft;
    std::string layer_regex = R"(layers\.(\d+)\.)";
    bool exclude_ends = false;
    OutputOpts out;
};

int cmd_depth_trend(const DepthTrendArgs& a) {
    wl::report::Envelope env;
    env.command = "depth-trend";
    env.add_input(a.base);
    env.add_input(a.ft);

    const auto base = wl::io::read_header(a.base);
    const auto ft = wl::io::read_header(a.ft);
    const std::regex re(a.layer_regex);

    // Pool delta elements of all tensors sharing a layer index.
    std::map<int, std::vector<double>> pools;
    for (const auto& meta : base.metas()) {
        if (!meta.dtype.supported()) continue;
        std::smatch m;
        if (!std::regex_search(meta.name, m, re) || m.size() < 2) continue;
        const auto* fmeta = ft.find(meta.name);
        if (!fmeta || fmeta->shape != meta.shape) {
            env.warnings.push_back("skipped '" + meta.name + "' (missing or shape mismatch)");
            continue;
        }
        const int layer = std::stoi(m[1].str());
        const auto wb = wl::io::load_tensor(base, meta.name);
        const auto wf = wl::io::load_tensor(ft, meta.name);
        auto& pool = pools[layer];
        for (std::size_t j = 0; j < wb.values.size(); ++j)
            pool.push_back(wf.values[j] - wb.values[j]);
    }
    if (pools.empty()) throw EmptySelection("no tensors matched the layer regex");

    std::map<int, wl::adapt::Matrix> deltas;
    for (auto& [layer, pool] : pools) {
        wl::adapt::Matrix m(1, pool.size());
        m.data = std::move(pool);
        deltas.emplace(layer, std::move(m));
    }
    const auto trend = wl::adapt::depth_trend(deltas, a.exclude_ends);

    for (const auto& l : trend.per_layer) {
        ordered_json row;
        row["layer"] = l.index;
        row["sigma"] = l.sigma;
        env.rows.push_back(std::move(row));
    }
    env.extra = ordered_json{{"spearman_rho", trend.spearman_rho},
                             {"rho_defined", trend.rho_defined},
                             {"exclude_ends", trend.exclude_ends}};

    emit(env, a.out);
    return kExitOk;
}

// ---------------------------------------------------------------- toy-adapt

struct ToyAdaptArgs {
    std::string mode = "scalar";
    double sigma_true = 0.3;
    std::uint64_t seed = 42;
    std::vector<std::size_t> dims{16, 12};
    std::size_t rank = 4;
    std::size_t samples = 64;
    double lr = 0.0;
    std::size_t max_steps = 100;
    double tol = 1e-6;
    std::string report_path;
    OutputOpts out;
};

int cmd_toy_adapt(const ToyAdaptArgs& a) {
    wl::adapt::ToyTaskSpec task;
    task.in_dim = a.dims.at(0);
    task.out_dim = a.dims.at(1);
    task.rank = a.rank;
    task.n_samples = a.samples;
    task.sigma_true = a.sigma_true;
    task.seed = a.seed;
    task.learn_lora = a.mode == "scalar+lora";
    task.learning_rate = a.lr;
    task.max_steps = a.max_steps;
    task.tol = a.tol;

    const auto res = wl::adapt::toy_train(task);

    wl::report::Envelope env;
    env.command = "toy-adapt";
    ordered_json row;
    row["mode"] = a.mode;
    row["s_learned"] = res.s_learned;
    row["s_oracle"] = res.s_oracle;
    row["abs_error"] = std::abs(res.s_learned - res.s_oracle);
    row["converged"] = res.converged;
    row["steps"] = res.loss_curve.empty() ? 0 : res.loss_curve.size() - 1;
    row["initial_loss"] = res.loss_curve.empty() ? 0.0 : res.loss_curve.front();
    row["final_loss"] = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
    env.rows.push_back(std::move(row));
    env.extra = ordered_json{{"loss_curve", res.loss_curve}, {"seed", a.seed}};

    if (!a.report_path.empty()) {
        std::ofstream out(a.report_path, std::ios::binary | std::ios::trunc);
        if (!out) throw wl::io::IoError("cannot write report: " + a.report_path);
        out << env.to_json().dump(2) << "\n";
    }
    emit(env, a.out);
    return kExitOk;
}

int run_guarded(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const EmptySelection& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitEmpty;
    } catch (const wl::io::MalformedHeader& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::io::UnknownTensor& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::io::UnsupportedDType& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::io::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::synth::InvalidSpec& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::merging::ShapeMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::merging::MissingTensor& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::merging::NonFloatTensor& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::adapt::TooFewLayers& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::adapt::DegenerateDesign& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const wl::stats::EmptyInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::regex_error& e) {
        std::cerr << "error: invalid pattern: " << e.what() << "\n";
        return kExitInput;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"weightlens - weight distribution forensics over safetensors checkpoints"};
    app.set_version_flag("--version", wl::kToolVersion);
    app.require_subcommand(1);

    std::function<int()> action;

    InspectArgs ia;
    auto* inspect = app.add_subcommand("inspect", "Per-tensor distribution statistics");
    inspect->add_option("model", ia.model, "Checkpoint file")->required();
    inspect->add_option("--pattern", ia.pattern, "Regex filter on tensor names");
    inspect->add_option("--sigma-k", ia.sigma_k, "Sigma filter half-width")->capture_default_str();
    inspect->add_flag("--no-sigma-filter", ia.no_sigma_filter, "Report raw moments");
    inspect->add_option("--min-magnitude", ia.min_magnitude, "Drop |w| below this");
    inspect->add_option("--center", ia.center, "Sigma window anchor")
        ->check(CLI::IsMember({"zero", "mean"}))
        ->capture_default_str();
    add_output_opts(inspect, ia.out);
    inspect->callback([&] { action = [&] { return cmd_inspect(ia); }; });

    ClassifyArgs ca;
    auto* classify = app.add_subcommand("classify", "Assign distribution shapes to tensors");
    classify->add_option("model", ca.model, "Checkpoint file")->required();
    classify->add_option("--pattern", ca.pattern, "Regex filter on tensor names");
    classify->add_option("--thresholds", ca.thresholds_file, "Thresholds JSON config");
    classify->add_option("--alpha", ca.alpha, "Center band coefficient")->capture_default_str();
    add_output_opts(classify, ca.out);
    classify->callback([&] { action = [&] { return cmd_classify(ca); }; });

    HistArgs ha;
    auto* hist = app.add_subcommand("hist", "Histogram of tensor values");
    hist->add_option("model", ha.model, "Checkpoint file")->required();
    hist->add_option("--tensor", ha.tensor, "Single tensor name");
    hist->add_option("--pattern", ha.pattern, "Regex filter on tensor names");
    hist->add_option("--bins", ha.bins, "Number of bins")->capture_default_str();
    hist->add_option("--range", ha.range, "Explicit lo hi range")->expected(2);
    hist->add_flag("--ascii", ha.ascii, "Also render an ASCII histogram to stderr");
    add_output_opts(hist, ha.out);
    hist->callback([&] { action = [&] { return cmd_hist(ha); }; });

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Sparse-signal-plus-noise regime sweep");
    synth->add_option("--config", sa.config, "SynthSpec JSON config file");
    synth->add_option("--dump-config", sa.dump_config, "Write the effective spec to this file");
    synth->add_option("--seed", sa.spec.seed, "Random seed")->capture_default_str();
    synth->add_option("--points", sa.spec.total_points, "Total points")->capture_default_str();
    synth->add_option("--nonzero-points", sa.spec.nonzero_points, "Nonzero points")
        ->capture_default_str();
    synth->add_option("--outlier-frac", sa.spec.outlier_frac, "Outlier fraction of nonzeros")
        ->capture_default_str();
    synth->add_option("--outlier-lo", sa.spec.outlier_band.first, "Outlier band lower bound")
        ->capture_default_str();
    synth->add_option("--outlier-hi", sa.spec.outlier_band.second, "Outlier band upper bound")
        ->capture_default_str();
    synth->add_option("--gauss-sigma", sa.spec.gauss_sigma, "Signal sigma")->capture_default_str();
    synth->add_option("--trunc-min", sa.spec.trunc_min_abs, "Lower |w| truncation")
        ->capture_default_str();
    synth->add_option("--trunc-max", sa.spec.trunc_max_abs, "Upper |w| truncation")
        ->capture_default_str();
    synth->add_option("--noise-levels", sa.spec.noise_levels, "Noise sigmas to sweep");
    synth->add_option("--outlier-signs", sa.outlier_signs, "Outlier sign convention")
        ->check(CLI::IsMember({"symmetric", "positive"}))
        ->capture_default_str();
    synth->add_option("--alpha", sa.alpha, "Center band coefficient")->capture_default_str();
    synth->add_option("--bins", sa.bins, "Histogram bins")->capture_default_str();
    synth->add_option("--hist-dir", sa.hist_dir, "Write per-level histogram CSVs here");
    synth->add_option("--dump-tensors", sa.dump_tensors,
                      "Write each level's sample as a checkpoint in this directory");
    synth->add_option("--emit-thresholds", sa.emit_thresholds,
                      "Write the thresholds used to this JSON file");
    synth->add_option("--thresholds", sa.thresholds_file,
                      "Classify with these thresholds instead of calibrating");
    add_output_opts(synth, sa.out);
    synth->callback([&] { action = [&] { return cmd_synth(sa, synth); }; });

    MergeArgs ma;
    auto* merge = app.add_subcommand("merge", "Merge fine-tuned models onto a base");
    merge->add_option("--base", ma.base, "Base checkpoint")->required();
    merge->add_option("--models", ma.models, "Fine-tuned checkpoints")->required();
    merge->add_option("--t", ma.t, "Threshold multiplier")->capture_default_str();
    merge->add_option("--mode", ma.mode, "Merge strategy")
        ->check(CLI::IsMember({"outlier", "average", "sum"}))
        ->capture_default_str();
    merge->add_option("--center", ma.center, "Band anchor")
        ->check(CLI::IsMember({"zero", "mean"}))
        ->capture_default_str();
    merge->add_option("--non-float", ma.non_float, "Non-float tensor policy")
        ->check(CLI::IsMember({"copy", "fail"}))
        ->capture_default_str();
    merge->add_flag("--force-f32", ma.force_f32, "Widen 16-bit outputs to F32");
    merge->add_option("--out", ma.out_path, "Merged checkpoint path")->required();
    merge->add_option("--report", ma.report_path, "Write the JSON merge report here");
    merge->add_option("--format", ma.out.format, "Report format for stdout")
        ->check(CLI::IsMember({"json", "csv", "table"}))
        ->capture_default_str();
    merge->callback([&] { action = [&] { return cmd_merge(ma); }; });

    CompareDeltaArgs cda;
    auto* cmp = app.add_subcommand("compare-delta", "Compare delta sigmas of two fine-tunes");
    cmp->add_option("--base", cda.base, "Base checkpoint")->required();
    cmp->add_option("--a", cda.a_model, "First fine-tuned checkpoint")->required();
    cmp->add_option("--b", cda.b_model, "Second fine-tuned checkpoint")->required();
    cmp->add_option("--pattern", cda.pattern, "Regex filter on tensor names");
    add_output_opts(cmp, cda.out);
    cmp->callback([&] { action = [&] { return cmd_compare_delta(cda); }; });

    DepthTrendArgs dta;
    auto* dt = app.add_subcommand("depth-trend", "Delta sigma vs. layer depth");
    dt->add_option("--base", dta.base, "Base checkpoint")->required();
    dt->add_option("--ft", dta.ft, "Fine-tuned checkpoint")->required();
    dt->add_option("--layer-regex", dta.layer_regex, "Regex capturing the layer index")
        ->capture_default_str();
    dt->add_flag("--exclude-ends", dta.exclude_ends, "Drop the first and last layer");
    add_output_opts(dt, dta.out);
    dt->callback([&] { action = [&] { return cmd_depth_trend(dta); }; });

    ToyAdaptArgs ta;
    auto* toy = app.add_subcommand("toy-adapt", "Scalar noise adaptation on a toy task");
    toy->add_option("--mode", ta.mode, "scalar or scalar+lora")
        ->check(CLI::IsMember({"scalar", "scalar+lora"}))
        ->capture_default_str();
    toy->add_option("--sigma-true", ta.sigma_true, "Teacher noise scale")->capture_default_str();
    toy->add_option("--seed", ta.seed, "Random seed")->capture_default_str();
    toy->add_option("--dims", ta.dims, "IN and OUT dimensions")->expected(2);
    toy->add_option("--rank", ta.rank, "Low-rank factor rank")->capture_default_str();
    toy->add_option("--samples", ta.samples, "Training samples")->capture_default_str();
    toy->add_option("--lr", ta.lr, "Learning rate (0 = auto)")->capture_default_str();
    toy->add_option("--max-steps", ta.max_steps, "Step limit")->capture_default_str();
    toy->add_option("--tol", ta.tol, "Convergence tolerance")->capture_default_str();
    toy->add_option("--report", ta.report_path, "Write the JSON report here");
    add_output_opts(toy, ta.out);
    toy->callback([&] { action = [&] { return cmd_toy_adapt(ta); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInput;
    }
    if (!action) {
        std::cerr << "error: no subcommand selected\n";
        return kExitInput;
    }
    return run_guarded(action);
}

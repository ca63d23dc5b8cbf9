// SPDX-License-Identifier: Apache-2.0
//
// Outlier-aware model merging over full checkpoints, plus average and
// task-vector-sum baselines.
//
// For n fine-tuned models sharing a base, each parameter group k (= one
// named tensor) gets per-model deltas D_i = W'_i - W, their population
// sigmas, and the group sigma = min_i sigma_i. Outlier-aware merging
// rescales every delta element inside the closed band [c - t*sigma,
// c + t*sigma] by 1/n and leaves elements outside it untouched, then sums
// all processed deltas onto the base. t -> inf recovers plain averaging;
// t = 0 recovers the raw task-vector sum (when no delta element is
// exactly 0, the closed interval keeping zeros in-band either way).
//
// Groups are processed one at a time — at most n+1 tensors are resident —
// and accumulation is element-wise in model order, so results are
// deterministic and bit-reproducible against a per-element reference.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "weightlens/moments.hpp"
#include "weightlens/tensor_io.hpp"

namespace weightlens::merging {

struct ShapeMismatch : Error { using Error::Error; };
struct MissingTensor : Error { using Error::Error; };
struct NonFloatTensor : Error { using Error::Error; };

struct GroupSigmas {
    std::vector<double> per_model;  // sigma_i for i = 0..n-1
    double min_sigma = 0.0;         // sigma^k
};

// Per-group delta statistics for a base model and n fine-tuned models.
// Deltas themselves are recomputed on demand so that full checkpoints never
// have to be resident at once; the indexes must outlive this object.
class TaskVectorSet {
public:
    TaskVectorSet(const io::ModelIndex& base, std::vector<const io::ModelIndex*> models,
                  std::vector<std::string> groups, std::map<std::string, GroupSigmas> sigmas)
        : base_(&base), models_(std::move(models)), groups_(std::move(groups)),
          sigmas_(std::move(sigmas)) {}

    const io::ModelIndex& base() const { return *base_; }
    const std::vector<const io::ModelIndex*>& models() const { return models_; }
    std::size_t n_models() const { return models_.size(); }
    const std::vector<std::string>& groups() const { return groups_; }
    const std::map<std::string, GroupSigmas>& group_sigmas() const { return sigmas_; }

    // Delta of model i for group k, element-wise in 64-bit.
    std::vector<double> delta(const std::string& group, std::size_t model) const {
        const auto base_rec = io::load_tensor(*base_, group);
        const auto ft_rec = io::load_tensor(*models_.at(model), group);
        std::vector<double> d(base_rec.values.size());
        for (std::size_t j = 0; j < d.size(); ++j)
            d[j] = ft_rec.values[j] - base_rec.values[j];
        return d;
    }

private:
    const io::ModelIndex* base_;
    std::vector<const io::ModelIndex*> models_;
    std::vector<std::string> groups_;
    std::map<std::string, GroupSigmas> sigmas_;
};

namespace detail {

inline void check_same_shape(const io::TensorMeta& base_meta, const io::ModelIndex& model,
                             std::size_t model_idx) {
    const io::TensorMeta* m = model.find(base_meta.name);
    if (!m)
        throw MissingTensor("model " + std::to_string(model_idx) + " is missing tensor '" +
                            base_meta.name + "'");
    if (m->shape != base_meta.shape)
        throw ShapeMismatch("tensor '" + base_meta.name + "' has mismatched shape in model " +
                            std::to_string(model_idx));
}

}  // namespace detail

// Builds the task-vector statistics. Strict mode: every float tensor of the
// base must exist, shape-identical, in every fine-tuned model. The sigma of
// each delta is the population std over the raw delta, no prior filtering.
inline TaskVectorSet task_vectors(const io::ModelIndex& base,
                                  const std::vector<const io::ModelIndex*>& models) {
    if (models.empty()) throw MissingTensor("at least one fine-tuned model is required");
    std::vector<std::string> groups;
    std::map<std::string, GroupSigmas> sigmas;
    for (const auto& meta : base.metas()) {
        if (!meta.dtype.supported()) continue;
        for (std::size_t i = 0; i < models.size(); ++i)
            detail::check_same_shape(meta, *models[i], i);
        groups.push_back(meta.name);
    }
    for (const auto& name : groups) {
        const auto base_rec = io::load_tensor(base, name);
        GroupSigmas gs;
        gs.min_sigma = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < models.size(); ++i) {
            const auto ft = io::load_tensor(*models[i], name);
            std::vector<double> d(base_rec.values.size());
            for (std::size_t j = 0; j < d.size(); ++j)
                d[j] = ft.values[j] - base_rec.values[j];
            const double s = stats::population_std(d);
            gs.per_model.push_back(s);
            gs.min_sigma = std::min(gs.min_sigma, s);
        }
        if (models.empty()) gs.min_sigma = 0.0;
        sigmas.emplace(name, std::move(gs));
    }
    return TaskVectorSet(base, models, std::move(groups), std::move(sigmas));
}

enum class MergeMode { OutlierAware, Average, Sum };
enum class NonFloatPolicy { CopyBase, Fail };

struct MergeOptions {
    double t = 2.0;  // threshold multiplier on the group sigma
    MergeMode mode = MergeMode::OutlierAware;
    stats::Center center = stats::Center::Zero;
    NonFloatPolicy non_float_policy = NonFloatPolicy::CopyBase;
};

struct GroupReport {
    std::string name;
    std::vector<double> sigma_per_model;
    double sigma_min = 0.0;
    double threshold = 0.0;
    std::vector<std::uint64_t> outliers_per_model;
    std::vector<double> in_range_frac_per_model;
};

struct RawEntry {
    std::string name;
    std::string dtype_name;
    std::vector<std::uint64_t> shape;
    std::vector<std::byte> bytes;
};

struct MergeOutput {
    std::vector<io::TensorRecord> records;  // float tensors, base header order
    std::vector<RawEntry> raw;              // passthrough tensors, base header order
    std::vector<GroupReport> groups;

    const io::TensorRecord* find(std::string_view name) const {
        for (const auto& r : records)
            if (r.name == name) return &r;
        return nullptr;
    }
};

namespace detail {

inline MergeOutput merge_impl(const TaskVectorSet& tv, const MergeOptions& opts) {
    MergeOutput out;
    const auto n = static_cast<double>(tv.n_models());
    const auto& base = tv.base();

    for (const auto& meta : base.metas()) {
        if (!meta.dtype.supported()) {
            if (opts.non_float_policy == NonFloatPolicy::Fail)
                throw NonFloatTensor("tensor '" + meta.name + "' has non-float dtype " +
                                     meta.dtype.wire_name);
            const auto payload = base.payload(meta);
            out.raw.push_back(RawEntry{meta.name, meta.dtype.wire_name, meta.shape,
                                       {payload.begin(), payload.end()}});
            continue;
        }

        auto merged = io::load_tensor(base, meta.name);
        const auto& gs = tv.group_sigmas().at(meta.name);
        GroupReport rep;
        rep.name = meta.name;
        rep.sigma_per_model = gs.per_model;
        rep.sigma_min = gs.min_sigma;
        rep.threshold = opts.t * gs.min_sigma;

        for (std::size_t i = 0; i < tv.n_models(); ++i) {
            std::vector<double> d = tv.delta(meta.name, i);
            double c = 0.0;
            if (opts.mode == MergeMode::OutlierAware && opts.center == stats::Center::SampleMean) {
                auto [m, cnt] = stats::detail::mean_where(d, [](double) { return true; });
                c = cnt ? m : 0.0;
            }
            std::uint64_t outliers = 0;
            const double lo = c - rep.threshold;
            const double hi = c + rep.threshold;
            for (std::size_t j = 0; j < d.size(); ++j) {
                double dj = d[j];
                switch (opts.mode) {
                    case MergeMode::OutlierAware:
                        if (dj >= lo && dj <= hi) dj /= n;
                        else ++outliers;
                        break;
                    case MergeMode::Average:
                        dj /= n;
                        break;
                    case MergeMode::Sum:
                        break;
                }
                merged.values[j] += dj;
            }
            rep.outliers_per_model.push_back(outliers);
            rep.in_range_frac_per_model.push_back(
                d.empty() ? 1.0
                          : 1.0 - static_cast<double>(outliers) / static_cast<double>(d.size()));
        }
        merged.has_nonfinite = false;
        for (double v : merged.values)
            if (!std::isfinite(v)) { merged.has_nonfinite = true; break; }
        out.records.push_back(std::move(merged));
        out.groups.push_back(std::move(rep));
    }
    return out;
}

}  // namespace detail

inline MergeOutput merge_outlier_aware(const TaskVectorSet& tv, MergeOptions opts = {}) {
    opts.mode = MergeMode::OutlierAware;
    return detail::merge_impl(tv, opts);
}

inline MergeOutput merge_average(const TaskVectorSet& tv) {
    MergeOptions opts;
    opts.mode = MergeMode::Average;
    return detail::merge_impl(tv, opts);
}

inline MergeOutput merge_sum(const TaskVectorSet& tv) {
    MergeOptions opts;
    opts.mode = MergeMode::Sum;
    return detail::merge_impl(tv, opts);
}

// Writes a merged model. Each float tensor keeps the base model's storage
// dtype unless force_f32 widens 16-bit formats; raw tensors pass through.
inline void write_merged(const MergeOutput& merged, const io::ModelIndex& base,
                         const std::filesystem::path& path, bool force_f32 = false) {
    io::ModelWriter w;
    std::size_t ri = 0, qi = 0;
    for (const auto& meta : base.metas()) {
        if (meta.dtype.supported()) {
            io::DType target = meta.dtype;
            if (force_f32 && (target.tag == io::DTypeTag::F16 || target.tag == io::DTypeTag::BF16))
                target = io::DType::f32();
            w.add(merged.records.at(ri++), target);
        } else {
            const auto& r = merged.raw.at(qi++);
            w.add_raw(r.name, r.dtype_name, r.shape, r.bytes);
        }
    }
    w.write_file(path);
}

}  // namespace weightlens::merging

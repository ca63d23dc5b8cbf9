// SPDX-License-Identifier: Apache-2.0
//
// Gaussian-noise scalar adaptation at toy scale.
//
// The mechanism under study: freeze a weight matrix W and a noise matrix
// DeltaW drawn from N(0,1), and train only a scalar s in
//
//     W' = W + s * DeltaW
//
// plus the low-rank variant W' = (s+1) W + A B. The toy task is noiseless
// teacher-student linear regression — the one setting with an exact
// closed-form minimizer — so gradient descent can be checked against an
// oracle to full precision. The squared loss is quadratic in s; with step
// size eta < 1/||DeltaW X||_F^2 descent is monotone, and the default
// eta = 0.5/||DeltaW X||_F^2 lands on the minimizer in a single step.
//
// Also here: the sigma-comparison report between two sets of deltas and
// the layer-depth trend (Spearman rank correlation of sigma vs. depth).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "weightlens/moments.hpp"
#include "weightlens/rng.hpp"

namespace weightlens::adapt {

struct ShapeMismatch : Error { using Error::Error; };
struct DegenerateDesign : Error { using Error::Error; };
struct KeyMismatch : Error { using Error::Error; };
struct TooFewLayers : Error { using Error::Error; };

struct Diverged : Error {
    Diverged(std::size_t at_step, const std::string& msg) : Error(msg), step(at_step) {}
    std::size_t step;
};

// Dense row-major matrix. Dimensions here are toy-sized; the arithmetic is
// deliberately plain so results are deterministic and easy to cross-check.
struct Matrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw ShapeMismatch("matmul: inner dimensions disagree");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j)
                c.at(i, j) += aik * b.at(k, j);
        }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

inline double frobenius_inner(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("frobenius_inner: shape mismatch");
    stats::detail::CompensatedSum s;
    for (std::size_t i = 0; i < a.data.size(); ++i) s.add(a.data[i] * b.data[i]);
    return s.value();
}

inline double frobenius_norm2(const Matrix& a) { return frobenius_inner(a, a); }

// Seeded standard normal noise; the same seed always reproduces the same
// matrix on a given build.
struct NoiseDelta {
    std::uint64_t seed = 0;
    Matrix values;
};

inline NoiseDelta make_delta(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    NoiseDelta d;
    d.seed = seed;
    d.values = Matrix(rows, cols);
    rng::Xoshiro256pp r(seed);
    for (auto& v : d.values.data) v = r.gaussian();
    return d;
}

// W + s * DeltaW
inline Matrix apply_scaled_noise(const Matrix& w, const NoiseDelta& delta, double s) {
    if (!w.same_shape(delta.values)) throw ShapeMismatch("apply_scaled_noise: shape mismatch");
    Matrix out = w;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += s * delta.values.data[i];
    return out;
}

// (s + 1) W + A B
inline Matrix apply_lora_ours(const Matrix& w, double s, const Matrix& a, const Matrix& b) {
    if (a.rows != w.rows || b.cols != w.cols || a.cols != b.rows)
        throw ShapeMismatch("apply_lora_ours: A/B shapes incompatible with W");
    Matrix out = matmul(a, b);
    for (std::size_t i = 0; i < w.data.size(); ++i)
        out.data[i] += (s + 1.0) * w.data[i];
    return out;
}

// dL/ds for W' = W + s DeltaW given upstream G = dL/dW'.
inline double grad_s(const Matrix& upstream, const NoiseDelta& delta) {
    return frobenius_inner(upstream, delta.values);
}

struct ToyTaskSpec {
    std::size_t in_dim = 16;
    std::size_t out_dim = 12;
    std::size_t rank = 4;
    std::size_t n_samples = 64;
    double sigma_true = 0.3;
    std::uint64_t seed = 42;
    bool learn_lora = false;
    double learning_rate = 0.0;  // 0 -> auto (half the convexity-safe bound)
    std::size_t max_steps = 100;
    double tol = 1e-6;

    void validate() const {
        if (in_dim == 0 || out_dim == 0) throw DegenerateDesign("dimensions must be positive");
        if (rank > std::min(in_dim, out_dim))
            throw DegenerateDesign("rank exceeds min(in_dim, out_dim)");
        if (n_samples < in_dim) throw DegenerateDesign("n_samples must be >= in_dim");
        if (sigma_true < 0.0) throw DegenerateDesign("sigma_true must be >= 0");
    }
};

struct AdaptResult {
    double s_learned = 0.0;
    double s_oracle = 0.0;
    std::vector<double> loss_curve;
    std::optional<Matrix> a_mat;
    std::optional<Matrix> b_mat;
    bool converged = false;
};

struct ToyData {
    Matrix w;  // out_dim x in_dim
    Matrix x;  // in_dim x n_samples
    Matrix y;  // out_dim x n_samples, noiseless teacher (W + sigma_true DeltaW) X
};

namespace detail {
inline constexpr std::uint64_t kDeltaTag = 10;
inline constexpr std::uint64_t kWeightTag = 11;
inline constexpr std::uint64_t kDataTag = 12;
}  // namespace detail

inline NoiseDelta toy_delta(const ToyTaskSpec& task) {
    return make_delta(task.out_dim, task.in_dim, rng::derive_seed(task.seed, detail::kDeltaTag));
}

inline ToyData make_toy_data(const ToyTaskSpec& task, const NoiseDelta& delta) {
    task.validate();
    if (delta.values.rows != task.out_dim || delta.values.cols != task.in_dim)
        throw ShapeMismatch("delta shape does not match the task dimensions");
    ToyData d;
    d.w = Matrix(task.out_dim, task.in_dim);
    rng::Xoshiro256pp rw(rng::derive_seed(task.seed, detail::kWeightTag));
    const double wscale = 1.0 / std::sqrt(static_cast<double>(task.in_dim));
    for (auto& v : d.w.data) v = wscale * rw.gaussian();
    d.x = Matrix(task.in_dim, task.n_samples);
    rng::Xoshiro256pp rx(rng::derive_seed(task.seed, detail::kDataTag));
    for (auto& v : d.x.data) v = rx.gaussian();
    d.y = matmul(apply_scaled_noise(d.w, delta, task.sigma_true), d.x);
    return d;
}

// argmin_s ||(W + s DeltaW) X - Y||_F^2 = <DX, Y - WX> / ||DX||^2.
// With the noiseless teacher this equals sigma_true up to rounding.
inline double closed_form_s(const ToyTaskSpec& task, const NoiseDelta& delta) {
    const ToyData d = make_toy_data(task, delta);
    const Matrix dx = matmul(delta.values, d.x);
    const double denom = frobenius_norm2(dx);
    if (denom == 0.0) throw DegenerateDesign("DeltaW X vanishes; scalar is unidentifiable");
    Matrix resid = d.y;
    const Matrix wx = matmul(d.w, d.x);
    for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] -= wx.data[i];
    return frobenius_inner(dx, resid) / denom;
}

namespace detail {

inline double loss_of(const Matrix& pred, const Matrix& y) {
    stats::detail::CompensatedSum s;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - y.data[i];
        s.add(d * d);
    }
    return s.value();
}

inline void check_descent(std::vector<double>& curve, double loss, std::size_t step) {
    if (!std::isfinite(loss))
        throw Diverged(step, "loss became non-finite at step " + std::to_string(step));
    if (!curve.empty() && loss > curve.back() * (1.0 + 1e-9) + 1e-12)
        throw Diverged(step, "loss increased at step " + std::to_string(step));
    curve.push_back(loss);
}

}  // namespace detail

// Gradient descent on the squared loss. Scalar mode: s starts at 0 and the
// convexity-safe step bound 1/||DeltaW X||^2 is always respected. LoRA mode
// additionally trains A (init N(0, 2/in_dim)) and B (init zero).
inline AdaptResult toy_train(const ToyTaskSpec& task) {
    task.validate();
    const NoiseDelta delta = toy_delta(task);
    const ToyData data = make_toy_data(task, delta);
    AdaptResult res;
    res.s_oracle = closed_form_s(task, delta);

    if (!task.learn_lora) {
        const Matrix m = matmul(delta.values, data.x);
        const double m2 = frobenius_norm2(m);
        if (m2 == 0.0) throw DegenerateDesign("DeltaW X vanishes; scalar is unidentifiable");
        const double bound = 1.0 / m2;
        const double eta = task.learning_rate > 0.0
                               ? std::min(task.learning_rate, 0.999 * bound)
                               : 0.5 * bound;
        Matrix r0 = matmul(data.w, data.x);
        for (std::size_t i = 0; i < r0.data.size(); ++i) r0.data[i] -= data.y.data[i];
        const double mr = frobenius_inner(m, r0);

        double s = 0.0;
        double loss = detail::loss_of(matmul(apply_scaled_noise(data.w, delta, s), data.x), data.y);
        res.loss_curve.push_back(loss);
        for (std::size_t step = 1; step <= task.max_steps; ++step) {
            const double g = 2.0 * (mr + s * m2);
            s -= eta * g;
            loss = detail::loss_of(matmul(apply_scaled_noise(data.w, delta, s), data.x), data.y);
            detail::check_descent(res.loss_curve, loss, step);
            if (std::abs(g) <= 1e-14 * std::max(1.0, m2)) break;
        }
        res.s_learned = s;
        res.converged = std::abs(res.s_learned - res.s_oracle) < task.tol;
        return res;
    }

    // LoRA mode: W' = (s+1) W + A B
    Matrix a(task.out_dim, task.rank);
    Matrix b(task.rank, task.in_dim);
    rng::Xoshiro256pp ra(rng::derive_seed(task.seed, detail::kDeltaTag + 100));
    const double a_std = std::sqrt(2.0 / static_cast<double>(task.in_dim));
    for (auto& v : a.data) v = a_std * ra.gaussian();
    double s = 0.0;

    const Matrix xt = transpose(data.x);
    const double eta = task.learning_rate > 0.0
                           ? task.learning_rate
                           : 0.25 / (frobenius_norm2(data.x) *
                                     std::max(1.0, frobenius_norm2(data.w)));

    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t step = 0; step <= task.max_steps; ++step) {
        const Matrix wp = apply_lora_ours(data.w, s, a, b);
        const Matrix pred = matmul(wp, data.x);
        const double loss = detail::loss_of(pred, data.y);
        detail::check_descent(res.loss_curve, loss, step);
        if (step == task.max_steps) break;
        Matrix e = pred;
        for (std::size_t i = 0; i < e.data.size(); ++i) e.data[i] -= data.y.data[i];
        Matrix g = matmul(e, xt);  // dL/dW' up to the factor 2
        for (auto& v : g.data) v *= 2.0;
        const double gs = frobenius_inner(g, data.w);
        const Matrix ga = matmul(g, transpose(b));
        const Matrix gb = matmul(transpose(a), g);
        s -= eta * gs;
        for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] -= eta * ga.data[i];
        for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] -= eta * gb.data[i];
        const double improve = prev - loss;
        prev = loss;
        if (step > 0 && improve >= 0.0 && improve <= task.tol * std::max(1.0, loss)) break;
    }
    res.s_learned = s;
    res.a_mat = std::move(a);
    res.b_mat = std::move(b);
    const std::size_t k = res.loss_curve.size();
    res.converged = k >= 2 && (res.loss_curve[k - 2] - res.loss_curve[k - 1]) <=
                                  task.tol * std::max(1.0, res.loss_curve[k - 1]);
    return res;
}

struct DeltaSigmaReport {
    struct Layer {
        std::string id;
        double sigma_a = 0.0;
        double sigma_b = 0.0;
        double abs_diff = 0.0;
    };
    std::vector<Layer> per_layer;
    double mean_abs_diff = 0.0;
};

// Per-layer population sigma of two delta sets and the mean absolute
// difference; both maps must have identical keys.
inline DeltaSigmaReport delta_sigma_report(const std::map<std::string, Matrix>& deltas_a,
                                           const std::map<std::string, Matrix>& deltas_b) {
    if (deltas_a.size() != deltas_b.size())
        throw KeyMismatch("delta sets have different layer counts");
    DeltaSigmaReport rep;
    stats::detail::CompensatedSum total;
    for (const auto& [key, ma] : deltas_a) {
        auto it = deltas_b.find(key);
        if (it == deltas_b.end()) throw KeyMismatch("layer '" + key + "' missing from second set");
        DeltaSigmaReport::Layer l;
        l.id = key;
        l.sigma_a = stats::population_std(ma.data);
        l.sigma_b = stats::population_std(it->second.data);
        l.abs_diff = std::abs(l.sigma_a - l.sigma_b);
        total.add(l.abs_diff);
        rep.per_layer.push_back(std::move(l));
    }
    rep.mean_abs_diff =
        rep.per_layer.empty() ? 0.0 : total.value() / static_cast<double>(rep.per_layer.size());
    return rep;
}

struct DepthTrend {
    struct Layer {
        int index = 0;
        double sigma = 0.0;
    };
    std::vector<Layer> per_layer;  // sorted by layer index, ends dropped if excluded
    double spearman_rho = 0.0;
    bool rho_defined = true;  // false when sigma ranks are degenerate
    bool exclude_ends = false;
};

namespace detail {

inline std::vector<double> midranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline std::pair<double, bool> spearman(std::span<const double> x, std::span<const double> y) {
    const auto rx = midranks(x);
    const auto ry = midranks(y);
    const auto n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) { mx += rx[i]; my += ry[i]; }
    mx /= n; my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = rx[i] - mx, dy = ry[i] - my;
        sxx += dx * dx; syy += dy * dy; sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return {0.0, false};
    return {sxy / std::sqrt(sxx * syy), true};
}

}  // namespace detail

// Spearman rank correlation between layer index and delta sigma.
// exclude_ends drops the first and last layer before correlating.
inline DepthTrend depth_trend(const std::map<int, Matrix>& deltas, bool exclude_ends) {
    std::vector<DepthTrend::Layer> layers;
    for (const auto& [idx, m] : deltas)
        layers.push_back({idx, stats::population_std(m.data)});
    if (exclude_ends && layers.size() >= 2) {
        layers.erase(layers.begin());
        layers.pop_back();
    }
    if (layers.size() < 3)
        throw TooFewLayers("need at least 3 layers after exclusion, have " +
                           std::to_string(layers.size()));
    DepthTrend t;
    t.per_layer = layers;
    t.exclude_ends = exclude_ends;
    std::vector<double> xs, ys;
    for (const auto& l : layers) {
        xs.push_back(static_cast<double>(l.index));
        ys.push_back(l.sigma);
    }
    auto [rho, defined] = detail::spearman(xs, ys);
    t.spearman_rho = rho;
    t.rho_defined = defined;
    return t;
}

}  // namespace weightlens::adapt

#pragma once

#include "capt/autodiff.hpp"
#include "capt/error.hpp"
#include "capt/ops.hpp"
#include "capt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace capt {

// ---------------------------------------------------------------------------
// Tensor-level entry points

inline Tensor matmul(const Tensor &a, const Tensor &b) { return kernels::matmul(a, b); }

inline Tensor softmax(const Tensor &x, double tau = 1.0) {
    if (x.empty()) {
        throw ShapeError("softmax: empty input");
    }
    return kernels::softmax_rows(x, tau);
}

inline double cosine_similarity(const Tensor &u, const Tensor &v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine_similarity: size mismatch " + shape_string(u.shape()) + " vs " +
                         shape_string(v.shape()));
    }
    const double nu = l2_norm(u.data());
    const double nv = l2_norm(v.data());
    if (nu == 0.0 || nv == 0.0) {
        throw DegenerateInputError("cosine_similarity: zero-norm input");
    }
    return dot(u.data(), v.data()) / (nu * nv);
}

inline Tensor depthwise_conv2d(const Tensor &grid, const Tensor &kernel) {
    return kernels::depthwise_conv2d(grid, kernel);
}

inline Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias, double eps = 1e-5) {
    GradRecord rec(false);
    return layer_norm(rec.constant(x), rec.constant(gain), rec.constant(bias), eps).value();
}

// ---------------------------------------------------------------------------
// Multi-head attention

/// Projection weights, each [D x D]; tokens are multiplied on the right (x * W).
struct AttentionWeights {
    Var wq, wk, wv, wo;
};

struct AttentionParams {
    Tensor wq, wk, wv, wo;
};

/**
 * Scaled dot-product attention with `heads` heads of width D/heads.
 *
 * q is [Nq x D], k and v are [Nk x D]. Per head: softmax(Q_h K_h^T / sqrt(D/h)) V_h,
 * heads concatenated, then multiplied by wo.
 */
inline Var multi_head_attention(const Var &q, const Var &k, const Var &v, std::size_t heads,
                                const AttentionWeights &w) {
    const std::size_t width = q.value().cols();
    if (heads == 0 || width % heads != 0) {
        throw ConfigError("multi_head_attention: width " + std::to_string(width) +
                          " is not divisible by head count " + std::to_string(heads));
    }
    if (k.value().cols() != width || v.value().cols() != width || k.value().rows() != v.value().rows()) {
        throw ShapeError("multi_head_attention: incompatible q/k/v shapes " + shape_string(q.shape()) + ", " +
                         shape_string(k.shape()) + ", " + shape_string(v.shape()));
    }
    const std::size_t hd = width / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    Var qp = matmul(q, w.wq);
    Var kp = matmul(k, w.wk);
    Var vp = matmul(v, w.wv);
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = heads == 1 ? qp : cols(qp, h * hd, (h + 1) * hd);
        Var kh = heads == 1 ? kp : cols(kp, h * hd, (h + 1) * hd);
        Var vh = heads == 1 ? vp : cols(vp, h * hd, (h + 1) * hd);
        Var scores = scale(matmul(qh, transpose(kh)), sc);
        outs.push_back(matmul(softmax_rows(scores, 1.0), vh));
    }
    Var joined = heads == 1 ? outs.front() : concat_cols(outs);
    return matmul(joined, w.wo);
}

inline Tensor multi_head_attention(const Tensor &q, const Tensor &k, const Tensor &v, std::size_t heads,
                                   const AttentionParams &p) {
    GradRecord rec(false);
    AttentionWeights w{rec.constant(p.wq), rec.constant(p.wk), rec.constant(p.wv), rec.constant(p.wo)};
    return multi_head_attention(rec.constant(q), rec.constant(k), rec.constant(v), heads, w).value();
}

// ---------------------------------------------------------------------------
// Top-k

struct IndexedValue {
    std::size_t index;
    double value;

    friend bool operator==(const IndexedValue &, const IndexedValue &) = default;
};

/// The k largest entries in descending order; equal values keep the lower index first.
inline std::vector<IndexedValue> top_k(std::span<const double> x, std::size_t k) {
    if (k < 1 || k > x.size()) {
        throw ParameterError("top_k: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(x.size()) + "]");
    }
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) { return x[a] > x[b] || (x[a] == x[b] && a < b); };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(), before);
    std::vector<IndexedValue> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back({idx[i], x[idx[i]]});
    }
    return out;
}

inline std::vector<IndexedValue> top_k(const Tensor &x, std::size_t k) { return top_k(x.data(), k); }

/// Lowest index of the maximum. Non-finite entries are rejected.
inline std::size_t argmax(std::span<const double> x) {
    if (x.empty()) {
        throw ShapeError("argmax: empty input");
    }
    std::size_t best = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i])) {
            throw InputError("argmax: non-finite entry at index " + std::to_string(i));
        }
        if (x[i] > x[best]) {
            best = i;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
    Tensor centroids;                       // [k x D]
    std::vector<std::size_t> assignments;   // one per point
    std::vector<double> inertia_history;    // after each assignment step
    std::size_t iterations = 0;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// k-means++ seeding: first centre uniform, each next centre drawn with
/// probability proportional to squared distance to the nearest chosen centre.
inline Tensor kmeans_plus_plus_init(const Tensor &points, std::size_t k, std::uint64_t seed) {
    kernels::require_matrix(points, "kmeans");
    const std::size_t n = points.dim(0), d = points.dim(1);
    if (k < 1 || k > n) {
        throw ParameterError("kmeans: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<std::size_t> chosen;
    chosen.push_back(std::min<std::size_t>(static_cast<std::size_t>(unit(rng) * static_cast<double>(n)), n - 1));
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    while (chosen.size() < k) {
        const auto last = points.row(chosen.back());
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dist[i] = std::min(dist[i], squared_distance(points.row(i), last));
            total += dist[i];
        }
        std::size_t pick = 0;
        if (total <= 0.0) {
            // All remaining points coincide with a centre; take the first unused index.
            while (std::find(chosen.begin(), chosen.end(), pick) != chosen.end()) {
                ++pick;
            }
        } else {
            const double target = unit(rng) * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += dist[i];
                if (dist[i] > 0.0 && acc >= target) {
                    pick = i;
                    break;
                }
            }
        }
        chosen.push_back(pick);
    }
    Tensor centroids({k, d});
    for (std::size_t c = 0; c < k; ++c) {
        std::copy(points.row(chosen[c]).begin(), points.row(chosen[c]).end(), centroids.row(c).begin());
    }
    return centroids;
}

/**
 * Lloyd's algorithm from k-means++ seeds.
 *
 * Points go to the nearest centroid by squared Euclidean distance, ties to the
 * lower centroid index. A cluster left empty after assignment is re-seeded at
 * the point farthest from its current centroid. Stops when assignments stop
 * changing or after `max_iter` assignment steps.
 */
inline KMeansResult kmeans(const Tensor &points, std::size_t k, std::size_t max_iter, std::uint64_t seed) {
    KMeansResult res;
    res.centroids = kmeans_plus_plus_init(points, k, seed);
    const std::size_t n = points.dim(0), d = points.dim(1);
    res.assignments.assign(n, k);
    for (std::size_t it = 0; it < std::max<std::size_t>(max_iter, 1); ++it) {
        bool changed = false;
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = squared_distance(points.row(i), res.centroids.row(0));
            for (std::size_t c = 1; c < k; ++c) {
                const double dd = squared_distance(points.row(i), res.centroids.row(c));
                if (dd < best_d) {
                    best_d = dd;
                    best = c;
                }
            }
            changed = changed || res.assignments[i] != best;
            res.assignments[i] = best;
            inertia += best_d;
        }
        res.inertia_history.push_back(inertia);
        res.iterations = it + 1;
        if (!changed) {
            break;
        }
        std::vector<std::size_t> count(k, 0);
        Tensor sums({k, d});
        for (std::size_t i = 0; i < n; ++i) {
            ++count[res.assignments[i]];
            auto dst = sums.row(res.assignments[i]);
            auto src = points.row(i);
            for (std::size_t j = 0; j < d; ++j) {
                dst[j] += src[j];
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] == 0) {
                continue;
            }
            for (std::size_t j = 0; j < d; ++j) {
                res.centroids.at(c, j) = sums.at(c, j) / static_cast<double>(count[c]);
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] != 0) {
                continue;
            }
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double dd = squared_distance(points.row(i), res.centroids.row(res.assignments[i]));
                if (dd > far_d) {
                    far_d = dd;
                    far = i;
                }
            }
            std::copy(points.row(far).begin(), points.row(far).end(), res.centroids.row(c).begin());
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct FdEntry {
    std::string name;
    double max_rel_error = 0.0;
    bool flagged = false;
    std::size_t refined = 0;  // scalars re-measured at step / 100
};

struct FdReport {
    std::vector<FdEntry> entries;
    double max_rel_error = 0.0;
    std::size_t scalars_checked = 0;
    std::size_t refined = 0;

    [[nodiscard]] bool passed() const {
        return std::none_of(entries.begin(), entries.end(), [](const FdEntry &e) { return e.flagged; });
    }
};

using ScalarFunction = std::function<Var(GradRecord &)>;

// three_point: (f(x+h) - f(x-h)) / 2h, error O(h^2).
// five_point: (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, error O(h^4).
enum class FdStencil { three_point, five_point };

/**
 * Compares reverse-mode gradients of `f` with central differences.
 *
 * Error per scalar is |analytic - numeric| / max(1, |numeric|). `f` must be a
 * deterministic function of the parameter values.
 *
 * With the five-point stencil, a scalar whose h and 2h central differences
 * disagree by more than 5% has a jump inside [x-2h, x+2h] (top-K routing is
 * piecewise); it is re-measured at step / 100 and counted in `refined`.
 */
inline FdReport finite_difference_check(const ScalarFunction &f, const std::vector<Parameter *> &params,
                                        double step = 1e-3, double tolerance = 1e-4,
                                        FdStencil stencil = FdStencil::three_point) {
    if (!(step > 0.0 && step < 1.0)) {
        throw ParameterError("finite_difference_check: step must lie in (0, 1)");
    }
    GradRecord rec(true);
    for (Parameter *p : params) {
        rec.param(*p);
    }
    Var loss = f(rec);
    auto grads = rec.backward(loss);
    auto analytic_for = [&](const Parameter *p) -> const Tensor & {
        for (const auto &g : grads) {
            if (g.param == p) {
                return g.grad;
            }
        }
        throw UsageError("finite_difference_check: parameter not registered");
    };
    auto eval = [&]() {
        GradRecord r(false);
        return f(r).value().item();
    };
    FdReport report;
    for (Parameter *p : params) {
        FdEntry entry{p->name, 0.0, false};
        const Tensor &analytic = analytic_for(p);
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            auto at = [&](double offset) {
                p->value[i] = orig + offset;
                const double v = eval();
                p->value[i] = orig;
                return v;
            };
            auto five = [&](double h, double &d1, double &d2) {
                d1 = (at(h) - at(-h)) / (2.0 * h);
                d2 = (at(2.0 * h) - at(-2.0 * h)) / (4.0 * h);
                return (4.0 * d1 - d2) / 3.0;
            };
            double numeric = 0.0;
            if (stencil == FdStencil::three_point) {
                numeric = (at(step) - at(-step)) / (2.0 * step);
            } else {
                double d1 = 0.0, d2 = 0.0;
                numeric = five(step, d1, d2);
                if (std::abs(d1 - d2) > 0.05 * std::max(1.0, std::abs(numeric))) {
                    numeric = five(step / 100.0, d1, d2);
                    ++entry.refined;
                }
            }
            const double a = p->frozen ? 0.0 : analytic[i];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
            entry.max_rel_error = std::max(entry.max_rel_error, err);
            ++report.scalars_checked;
        }
        entry.flagged = entry.max_rel_error > tolerance;
        report.refined += entry.refined;
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.entries.push_back(entry);
    }
    return report;
}

}  // namespace capt

#pragma once

// Multi-Granularity Discrepancy Expert: three residual feed-forward experts
// (semantic commonality, semantic difference, sample-level) behind a top-K
// softmax router, with k-means compressed prompt rows and input masking.

#include "capt/autodiff.hpp"
#include "capt/error.hpp"
#include "capt/numerics.hpp"
#include "capt/ops.hpp"
#include "capt/sample_miner.hpp"
#include "capt/tensor.hpp"
#include "capt/world.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace capt {

enum class ExpertRole : std::uint8_t { semantic_commonality = 0, semantic_difference = 1, sample = 2 };

inline constexpr std::size_t kNumExperts = 3;

inline const char *role_name(ExpertRole r) {
    switch (r) {
    case ExpertRole::semantic_commonality:
        return "commonality";
    case ExpertRole::semantic_difference:
        return "difference";
    case ExpertRole::sample:
        return "sample";
    }
    return "?";
}

/**
 * Exp(x) = x + quick_gelu(x W1^T + b1) W2 + b2, W1 [H x D], W2 [H x D].
 *
 * Semantic experts derive their first k rows of W1 on every forward pass as
 * centroids * prompt_proj, so the prompt projection stays trainable; `w1`
 * then holds only the remaining H - k rows.
 */
struct ExpertParams {
    ExpertRole role = ExpertRole::sample;
    Tensor centroids;       // [k x D], frozen; empty for the sample expert
    Parameter prompt_proj;  // [D x D]; unused for the sample expert
    Parameter w1;           // [(H - k) x D] or [H x D]
    Parameter b1;           // [H]
    Parameter w2;           // [H x D]
    Parameter b2;           // [D]

    [[nodiscard]] bool semantic() const noexcept { return role != ExpertRole::sample; }
    [[nodiscard]] std::size_t hidden() const { return b1.value.size(); }
    [[nodiscard]] std::size_t dim() const { return b2.value.size(); }

    std::vector<Parameter *> parameters() {
        if (semantic()) {
            return {&prompt_proj, &w1, &b1, &w2, &b2};
        }
        return {&w1, &b1, &w2, &b2};
    }
    std::vector<const Parameter *> parameters() const {
        if (semantic()) {
            return {&prompt_proj, &w1, &b1, &w2, &b2};
        }
        return {&w1, &b1, &w2, &b2};
    }

    friend bool operator==(const ExpertParams &a, const ExpertParams &b) {
        auto same = [](const Parameter &x, const Parameter &y) { return x.name == y.name && x.value == y.value; };
        return a.role == b.role && a.centroids.shape() == b.centroids.shape() &&
               (a.centroids.empty() || a.centroids == b.centroids) &&
               (!a.semantic() || same(a.prompt_proj, b.prompt_proj)) && same(a.w1, b.w1) && same(a.b1, b.b1) &&
               same(a.w2, b.w2) && same(a.b2, b.b2);
    }
};

struct RouterParams {
    Parameter w;  // [D x E]
    std::size_t top_k = 2;

    friend bool operator==(const RouterParams &a, const RouterParams &b) {
        return a.top_k == b.top_k && a.w.name == b.w.name && a.w.value == b.w.value;
    }
};

struct MgdeConfig {
    std::size_t hidden = 64;
    std::size_t clusters = 4;   // k of the prompt k-means
    std::size_t top_k = 2;
    double p_mask = 0.1;
    double out_scale = 0.1;     // W2 std is out_scale / sqrt(H)
    std::size_t kmeans_iters = 50;
};

/// Projected k-means centroids: f_e = centroids * proj, [k x D].
inline Var compress_prompts(GradRecord &rec, const Tensor &centroids, const Var &proj) {
    return matmul(rec.constant(centroids), proj);
}

/// k-means over `prompts` ([n x d]) followed by the projection.
inline Tensor compress_prompts(const Tensor &prompts, std::size_t k, const Tensor &proj, std::uint64_t seed,
                               std::size_t max_iter = 50) {
    if (k == 0 || k > prompts.rows()) {
        throw ParameterError("compress_prompts: k = " + std::to_string(k) + " with " +
                             std::to_string(prompts.rows()) + " prompts");
    }
    return matmul(kmeans(prompts, k, max_iter, seed).centroids, proj);
}

/**
 * The three experts. Semantic experts get their prompt rows from the k-means
 * centroids of their own pool (projection initialised to identity); the sample
 * expert copies the frozen image projection into its first rows. Everything
 * else is drawn from `seed`.
 */
inline std::array<ExpertParams, kNumExperts> init_experts(const World &world, const Tensor &commonality_pool,
                                                          const Tensor &difference_pool, const MgdeConfig &cfg,
                                                          std::uint64_t seed) {
    const std::size_t d = world.dim();
    const std::size_t h = cfg.hidden;
    if (commonality_pool.empty() || difference_pool.empty()) {
        throw ConfigError("init_experts: missing prompt pool");
    }
    if (cfg.clusters == 0 || h < cfg.clusters) {
        throw ConfigError("init_experts: hidden width must be at least the cluster count");
    }
    for (const Tensor *pool : {&commonality_pool, &difference_pool}) {
        if (pool->rank() != 2 || pool->cols() != d) {
            throw ShapeError("init_experts: prompt pool must be [n x " + std::to_string(d) + "], got " +
                             shape_string(pool->shape()));
        }
        if (pool->rows() < cfg.clusters) {
            throw ConfigError("init_experts: prompt pool smaller than the cluster count");
        }
    }
    std::mt19937_64 rng(seed);
    const double row_scale = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_std = cfg.out_scale / std::sqrt(static_cast<double>(h));
    std::array<ExpertParams, kNumExperts> ex;
    const std::array<ExpertRole, kNumExperts> roles = {ExpertRole::semantic_commonality,
                                                       ExpertRole::semantic_difference, ExpertRole::sample};
    for (std::size_t e = 0; e < kNumExperts; ++e) {
        ExpertParams &p = ex[e];
        p.role = roles[e];
        const std::string pre = std::string("expert.") + role_name(p.role) + ".";
        if (p.semantic()) {
            const Tensor &pool = p.role == ExpertRole::semantic_commonality ? commonality_pool : difference_pool;
            p.centroids = kmeans(pool, cfg.clusters, cfg.kmeans_iters, seed + 1 + e).centroids;
            p.prompt_proj = {pre + "prompt_proj", Tensor::identity(d)};
            if (h > cfg.clusters) {
                p.w1 = {pre + "w1", gaussian_tensor({h - cfg.clusters, d}, row_scale, rng)};
            } else {
                p.w1 = {pre + "w1", Tensor({1, d}, 0.0), true};  // placeholder, never used
            }
        } else {
            Tensor w1 = gaussian_tensor({h, d}, row_scale, rng);
            const std::size_t copy = std::min(h, d);
            for (std::size_t r = 0; r < copy; ++r) {
                const auto src = world.image_projection.row(r);
                std::copy(src.begin(), src.end(), w1.row(r).begin());
            }
            p.w1 = {pre + "w1", std::move(w1)};
        }
        p.b1 = {pre + "b1", Tensor({h}, 0.0)};
        p.w2 = {pre + "w2", gaussian_tensor({h, d}, out_std, rng)};
        p.b2 = {pre + "b2", Tensor({d}, 0.0)};
    }
    return ex;
}

inline RouterParams init_router(std::size_t dim, std::size_t top_k, std::uint64_t seed) {
    if (top_k < 1 || top_k > kNumExperts) {
        throw ConfigError("router: top-K must lie in [1, " + std::to_string(kNumExperts) + "]");
    }
    std::mt19937_64 rng(seed);
    return {{"router.w", gaussian_tensor({dim, kNumExperts}, 1.0 / std::sqrt(static_cast<double>(dim)), rng)},
            top_k};
}

// ---------------------------------------------------------------------------
// Masking

struct ExpertMask {
    bool masked = false;
    Tensor replacement;  // unit vector used when masked
};

/**
 * Independent per-expert mask draws: with probability p_mask the expert's input
 * is replaced by a random unit vector and its skip connection is dropped.
 * The same number of variates is consumed for every p_mask.
 */
inline std::array<ExpertMask, kNumExperts> draw_masks(std::size_t dim, double p_mask, std::mt19937_64 &rng) {
    if (!(p_mask >= 0.0 && p_mask <= 1.0)) {
        throw ConfigError("p_mask must lie in [0, 1]");
    }
    std::array<ExpertMask, kNumExperts> out;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto &m : out) {
        const double draw = u(rng);
        Tensor r({dim});
        for (auto &v : r.data()) {
            v = n(rng);
        }
        m.masked = draw < p_mask;
        m.replacement = normalized(r);
    }
    return out;
}

/// Per activated expert, the input it receives after masking.
inline std::vector<Tensor> mask_training_step(const Tensor &f, const std::vector<std::size_t> &activated,
                                              double p_mask, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto masks = draw_masks(f.size(), p_mask, rng);
    std::vector<Tensor> out;
    for (auto e : activated) {
        if (e >= kNumExperts) {
            throw ParameterError("mask_training_step: expert index out of range");
        }
        out.push_back(masks[e].masked ? masks[e].replacement : f);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward

struct ExpertVars {
    const ExpertParams *params;
    Var w1;  // full [H x D] first layer
    Var b1, w2, b2;

    ExpertVars(GradRecord &rec, ExpertParams &p) : params(&p) {
        b1 = rec.param(p.b1);
        w2 = rec.param(p.w2);
        b2 = rec.param(p.b2);
        if (p.semantic()) {
            Var fe = compress_prompts(rec, p.centroids, rec.param(p.prompt_proj));
            w1 = p.hidden() > p.centroids.rows() ? concat_rows({fe, rec.param(p.w1)}) : fe;
        } else {
            w1 = rec.param(p.w1);
        }
    }
};

/// Expert output for a [1 x D] input; `skip == false` drops the identity path.
inline Var expert_forward(const ExpertVars &v, const Var &x, bool skip = true) {
    Var hid = quick_gelu(add_bias(matmul(x, transpose(v.w1)), v.b1));
    Var ffn = add_bias(matmul(hid, v.w2), v.b2);
    return skip ? add(x, ffn) : ffn;
}

struct Gate {
    std::size_t expert;
    double weight;
};

struct RoutedFeature {
    Var feature;  // [1 x D], not normalised
    std::vector<Gate> gates;
};

/**
 * logits = f W_r; softmax over the top-K logits only; f_out = sum of gated
 * expert outputs. Experts outside the top-K are never evaluated. When `masks`
 * is given, masked experts see their replacement vector instead of f.
 */
inline RoutedFeature route_and_fuse(GradRecord &rec, const Var &f, const Var &router_w, std::size_t k,
                                    const std::array<ExpertVars, kNumExperts> &experts,
                                    const std::array<ExpertMask, kNumExperts> *masks = nullptr) {
    if (k < 1 || k > kNumExperts) {
        throw ConfigError("route_and_fuse: top-K must lie in [1, " + std::to_string(kNumExperts) + "]");
    }
    Var logits = matmul(f, router_w);
    const auto chosen = top_k(logits.value(), k);
    std::vector<Var> picked;
    for (const auto &c : chosen) {
        picked.push_back(pick(logits, c.index));
    }
    Var gates = k == 1 ? Var{} : softmax_rows(reshape(concat_rows(picked), {1, k}), 1.0);
    RoutedFeature out;
    Var acc;
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const std::size_t e = chosen[i].index;
        const bool masked = masks && (*masks)[e].masked;
        Var input = masked ? rec.constant((*masks)[e].replacement.reshaped({1, f.value().cols()})) : f;
        Var y = expert_forward(experts[e], input, !masked);
        if (k == 1) {
            out.gates.push_back({e, 1.0});
            acc = y;
            break;
        }
        Var g = pick(gates, i);
        out.gates.push_back({e, g.value().item()});
        Var term = scale(y, g);
        acc = i == 0 ? term : add(acc, term);
    }
    out.feature = acc;
    return out;
}

}  // namespace capt

#pragma once

// Sample Confusion Miner: representative confusing samples, the Diff-Manner
// Adapter (global attention + local depthwise convolution) and fusion of the
// instance with its representatives into one confusion-aware feature.

#include "capt/autodiff.hpp"
#include "capt/confusion_bank.hpp"
#include "capt/error.hpp"
#include "capt/numerics.hpp"
#include "capt/ops.hpp"
#include "capt/semantic_miner.hpp"
#include "capt/tensor.hpp"
#include "capt/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace capt {

enum class QueryMode { full_sequence, cls_only };

struct AdapterConfig {
    std::size_t heads = 4;
    std::size_t kernel = 3;
    QueryMode query = QueryMode::full_sequence;
    double out_scale = 0.02;     // std of the attention output projection at init
    double kernel_scale = 0.0;   // std of the depthwise kernel at init
};

struct AdapterParams {
    AdapterConfig config;
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
    Parameter ln_gain, ln_bias;
    Parameter wq, wk, wv, wo;
    Parameter kernel;  // [K x K x D]

    [[nodiscard]] std::size_t dim() const { return ln_gain.value.size(); }

    std::vector<Parameter *> parameters() { return {&ln_gain, &ln_bias, &wq, &wk, &wv, &wo, &kernel}; }

    void set_frozen(bool frozen) {
        for (auto *p : parameters()) {
            p->frozen = frozen;
        }
    }

    friend bool operator==(const AdapterParams &a, const AdapterParams &b) {
        auto same = [](const Parameter &x, const Parameter &y) { return x.name == y.name && x.value == y.value; };
        return a.grid_rows == b.grid_rows && a.grid_cols == b.grid_cols && a.config.heads == b.config.heads &&
               a.config.kernel == b.config.kernel && a.config.query == b.config.query &&
               same(a.ln_gain, b.ln_gain) && same(a.ln_bias, b.ln_bias) && same(a.wq, b.wq) && same(a.wk, b.wk) &&
               same(a.wv, b.wv) && same(a.wo, b.wo) && same(a.kernel, b.kernel);
    }
};

inline Tensor gaussian_tensor(Shape shape, double stddev, std::mt19937_64 &rng) {
    Tensor t(std::move(shape), 0.0);
    std::normal_distribution<double> n(0.0, stddev);
    for (auto &v : t.data()) {
        v = n(rng);
    }
    return t;
}

inline AdapterParams init_adapter(std::size_t dim, std::size_t grid_rows, std::size_t grid_cols,
                                  const AdapterConfig &config, std::uint64_t seed) {
    if (config.kernel % 2 == 0) {
        throw ConfigError("adapter: kernel size must be odd, got " + std::to_string(config.kernel));
    }
    if (config.heads == 0 || dim % config.heads != 0) {
        throw ConfigError("adapter: dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(config.heads) + " heads");
    }
    std::mt19937_64 rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    AdapterParams p;
    p.config = config;
    p.grid_rows = grid_rows;
    p.grid_cols = grid_cols;
    p.ln_gain = {"adapter.ln_gain", Tensor({dim}, 1.0)};
    p.ln_bias = {"adapter.ln_bias", Tensor({dim}, 0.0)};
    p.wq = {"adapter.wq", gaussian_tensor({dim, dim}, s, rng)};
    p.wk = {"adapter.wk", gaussian_tensor({dim, dim}, s, rng)};
    p.wv = {"adapter.wv", gaussian_tensor({dim, dim}, s, rng)};
    p.wo = {"adapter.wo", gaussian_tensor({dim, dim}, config.out_scale, rng)};
    p.kernel = {"adapter.kernel", gaussian_tensor({config.kernel, config.kernel, dim}, config.kernel_scale, rng)};
    return p;
}

/// Adapter parameters bound to one GradRecord.
struct AdapterVars {
    const AdapterParams *params;
    Var ln_gain, ln_bias, kernel;
    AttentionWeights attn;

    AdapterVars(GradRecord &rec, AdapterParams &p)
        : params(&p), ln_gain(rec.param(p.ln_gain)), ln_bias(rec.param(p.ln_bias)), kernel(rec.param(p.kernel)),
          attn{rec.param(p.wq), rec.param(p.wk), rec.param(p.wv), rec.param(p.wo)} {}
};

/**
 * One Diff-Manner block over [CLS; X] ((N+1) x D).
 *
 * Global branch: multi-head self-attention on the layer-normed sequence; the
 * CLS row is updated residually. Local branch: the attended patch rows are laid
 * out on the R x C grid, convolved depthwise, and added to the input patches
 * scaled by alpha. alpha = 0 leaves the patch rows untouched.
 */
inline Var diff_manner_forward(const Var &tokens, double alpha, const AdapterVars &v) {
    const AdapterParams &p = *v.params;
    const std::size_t n = p.grid_rows * p.grid_cols;
    const std::size_t d = p.dim();
    if (tokens.value().rank() != 2 || tokens.value().rows() != n + 1 || tokens.value().cols() != d) {
        throw ConfigError("diff_manner_forward: tokens " + shape_string(tokens.shape()) + " do not match a " +
                          std::to_string(p.grid_rows) + "x" + std::to_string(p.grid_cols) + " grid of width " +
                          std::to_string(d));
    }
    Var cls = rows(tokens, 0, 1);
    Var patches = rows(tokens, 1, n + 1);
    Var normed = layer_norm(tokens, v.ln_gain, v.ln_bias);
    Var cls_hat, patch_hat;
    if (p.config.query == QueryMode::full_sequence) {
        Var attended = multi_head_attention(normed, normed, normed, p.config.heads, v.attn);
        cls_hat = rows(attended, 0, 1);
        patch_hat = rows(attended, 1, n + 1);
    } else {
        Var ncls = rows(normed, 0, 1);
        Var npatch = rows(normed, 1, n + 1);
        cls_hat = multi_head_attention(ncls, npatch, npatch, p.config.heads, v.attn);
        patch_hat = add_bias(npatch, cls_hat);
    }
    Var cls_out = add(cls, cls_hat);
    if (alpha == 0.0) {
        return concat_rows({cls_out, patches});
    }
    Var grid = reshape(patch_hat, {p.grid_rows, p.grid_cols, d});
    Var local = reshape(depthwise_conv2d(grid, v.kernel), {n, d});
    return concat_rows({cls_out, add(patches, scale(local, alpha))});
}

inline Tensor diff_manner_forward(const Tensor &tokens, double alpha, AdapterParams &params) {
    GradRecord rec(false);
    AdapterVars v(rec, params);
    return diff_manner_forward(rec.constant(tokens), alpha, v).value();
}

/// Image-level token of an adapted sequence: (cls + sum of patches) / 2.
inline Var sequence_readout(const Var &seq) {
    const std::size_t n = seq.value().rows();
    return scale(add(rows(seq, 0, 1), sum_rows(rows(seq, 1, n))), 0.5);
}

/// Unit feature of a token sequence after the adapter and the frozen head.
inline Var adapted_feature(const World &world, GradRecord &rec, const Tensor &tokens, double alpha,
                           const AdapterVars &v) {
    return world.image_head(rec, sequence_readout(diff_manner_forward(rec.constant(tokens), alpha, v)));
}

// ---------------------------------------------------------------------------
// Representatives

/// alpha = s * max(c, 0)^gamma.
inline double dynamic_alpha(double c, double s = 5.0, double gamma = 0.5) {
    if (!(s > 1.0)) {
        throw ConfigError("dynamic_alpha: s must exceed 1");
    }
    if (!(gamma > 0.0)) {
        throw ConfigError("dynamic_alpha: gamma must be positive");
    }
    return s * std::pow(std::max(c, 0.0), gamma);
}

enum class RepSelection { nearest, random };

struct RepresentativeOptions {
    RepSelection selection = RepSelection::nearest;
    std::size_t per_category = 1;
    double s = 5.0;
    double gamma = 0.5;
};

struct Representative {
    std::uint32_t category = 0;
    std::vector<const ConfusionRecord *> records;  // best first
    double intensity = 0.0;                        // mean cosine of `records` to the instance
    double alpha = 0.0;
};

struct RepresentativeSet {
    std::vector<Representative> entries;
    std::vector<std::uint32_t> skipped;  // pair categories with no bank records

    [[nodiscard]] bool empty() const noexcept { return entries.empty(); }
    [[nodiscard]] double mean_alpha() const {
        if (entries.empty()) {
            return 0.0;
        }
        double s = 0.0;
        for (const auto &e : entries) {
            s += e.alpha;
        }
        return s / static_cast<double>(entries.size());
    }
};

/**
 * For every pair category, the stored record(s) under (pseudo-GT, category)
 * most similar to `instance_feature`. Ties go to the lower sample id.
 * Random selection draws uniformly from the record list instead.
 */
inline RepresentativeSet representative_samples(std::span<const double> instance_feature,
                                                const ConfusionPairSet &pairs, const ConfusionBank &bank,
                                                const RepresentativeOptions &opt = {},
                                                std::mt19937_64 *rng = nullptr) {
    if (opt.per_category == 0) {
        throw ConfigError("representative_samples: per_category must be at least 1");
    }
    if (opt.selection == RepSelection::random && !rng) {
        throw UsageError("representative_samples: random selection needs a generator");
    }
    const double fn = l2_norm(instance_feature);
    if (fn == 0.0) {
        throw DegenerateInputError("representative_samples: zero instance feature");
    }
    RepresentativeSet out;
    for (const auto &pc : pairs.pairs) {
        const auto recs = bank.retrieve(pairs.pseudo_gt, pc.category);
        if (recs.empty()) {
            out.skipped.push_back(pc.category);
            continue;
        }
        struct Cand {
            const ConfusionRecord *rec;
            double cos;
        };
        std::vector<Cand> cands;
        cands.reserve(recs.size());
        for (const auto &r : recs) {
            const double rn = l2_norm(r.feature.data());
            cands.push_back({&r, dot(instance_feature, r.feature.data()) / (fn * rn)});
        }
        const std::size_t take = std::min(opt.per_category, cands.size());
        if (opt.selection == RepSelection::nearest) {
            std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(take), cands.end(),
                              [](const Cand &a, const Cand &b) {
                                  if (a.cos != b.cos) {
                                      return a.cos > b.cos;
                                  }
                                  return a.rec->sample_id < b.rec->sample_id;
                              });
        } else {
            for (std::size_t i = 0; i < take; ++i) {
                std::uniform_int_distribution<std::size_t> pick_idx(i, cands.size() - 1);
                std::swap(cands[i], cands[pick_idx(*rng)]);
            }
        }
        Representative rep;
        rep.category = pc.category;
        double sum_cos = 0.0;
        for (std::size_t i = 0; i < take; ++i) {
            rep.records.push_back(cands[i].rec);
            sum_cos += cands[i].cos;
        }
        rep.intensity = sum_cos / static_cast<double>(take);
        rep.alpha = dynamic_alpha(rep.intensity, opt.s, opt.gamma);
        out.entries.push_back(std::move(rep));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fusion

struct FusedFeature {
    Var feature;                     // unit-norm sample confusion feature
    std::vector<Var> representatives; // per entry, unit feature of the adapted representative(s)
    std::vector<double> weights;      // softmax of intensities
};

/**
 * Sample confusion feature of one instance.
 *
 * The instance runs through the adapter with the mean representative alpha,
 * each representative with its own alpha. f = normalize(f_inst + sum_i w_i f_i)
 * with w = softmax(intensities). `rep_noise`, when non-empty, holds one
 * additive perturbation per entry applied to f_i before fusion.
 */
inline FusedFeature sample_confusion_feature(const World &world, GradRecord &rec, const Tensor &instance_tokens,
                                             const RepresentativeSet &reps, const AdapterVars &v,
                                             const std::vector<Tensor> &rep_noise = {}) {
    if (reps.empty()) {
        throw ContractError("sample_confusion_feature: no representatives");
    }
    if (!rep_noise.empty() && rep_noise.size() != reps.entries.size()) {
        throw ShapeError("sample_confusion_feature: one noise vector per representative required");
    }
    FusedFeature out;
    std::vector<double> intens;
    for (const auto &e : reps.entries) {
        intens.push_back(e.intensity);
    }
    out.weights = softmax(Tensor::vector(std::move(intens))).values();
    Var acc = adapted_feature(world, rec, instance_tokens, reps.mean_alpha(), v);
    for (std::size_t i = 0; i < reps.entries.size(); ++i) {
        const auto &e = reps.entries[i];
        Var f;
        if (e.records.size() == 1) {
            f = adapted_feature(world, rec, world.sample(e.records[0]->sample_id).tokens, e.alpha, v);
        } else {
            std::vector<Var> parts;
            for (const auto *r : e.records) {
                parts.push_back(adapted_feature(world, rec, world.sample(r->sample_id).tokens, e.alpha, v));
            }
            f = normalize(sum_rows(concat_rows(parts)));
        }
        if (!rep_noise.empty()) {
            f = normalize(add(f, rec.constant(rep_noise[i].reshaped({1, rep_noise[i].size()}))));
        }
        out.representatives.push_back(f);
        acc = add(acc, scale(f, out.weights[i]));
    }
    out.feature = normalize(acc);
    return out;
}

}  // namespace capt

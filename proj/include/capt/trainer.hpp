#pragma once

// Losses, the frozen-backbone training loop, base/novel evaluation, correction
// rate, heatmaps, ablation runners and checkpoint persistence.

#include "capt/autodiff.hpp"
#include "capt/binary_io.hpp"
#include "capt/confusion_bank.hpp"
#include "capt/error.hpp"
#include "capt/mgde.hpp"
#include "capt/numerics.hpp"
#include "capt/ops.hpp"
#include "capt/sample_miner.hpp"
#include "capt/semantic_miner.hpp"
#include "capt/tensor.hpp"
#include "capt/world.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace capt {

// ---------------------------------------------------------------------------
// Configuration

enum class LossMode { confuse_only, confuse_plus_ori };

struct TrainConfig {
    std::size_t epochs = 25;
    std::size_t batch_size = 4;
    std::size_t pairs = 5;
    double temperature = 0.07;
    double learning_rate = 0.01;
    double adapter_lr_scale = 0.01;  // adapter step = learning_rate * adapter_lr_scale
    std::uint64_t seed = 0;
    std::size_t top_k = 2;
    std::size_t clusters = 4;
    std::size_t hidden = 64;
    double p_mask = 0.1;
    double alpha_scale = 5.0;  // s
    double alpha_gamma = 0.5;  // gamma
    LossMode loss_mode = LossMode::confuse_only;
    double lambda = 1.0;
    std::size_t heads = 4;
    std::size_t kernel = 3;
    QueryMode query = QueryMode::full_sequence;
    bool use_sem = true;
    bool use_sam = true;
    bool use_mgde = true;
    bool use_real_gt = false;
    RepSelection rep_selection = RepSelection::nearest;
    std::size_t reps_per_category = 1;
    double noise_level = 0.0;

    friend bool operator==(const TrainConfig &, const TrainConfig &) = default;
};

inline void validate(const TrainConfig &c) {
    auto fail = [](const std::string &m) { throw ConfigError("train config: " + m); };
    if (c.epochs == 0) fail("epochs must be positive");
    if (c.batch_size == 0) fail("batch_size must be at least 1");
    if (c.pairs == 0) fail("pairs must be at least 1");
    if (!(c.temperature > 0.0)) fail("temperature must be positive");
    if (!(c.learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(c.adapter_lr_scale >= 0.0)) fail("adapter_lr_scale must be non-negative");
    if (c.top_k < 1 || c.top_k > kNumExperts) fail("top_k must lie in [1, 3]");
    if (c.clusters == 0 || c.hidden < c.clusters) fail("hidden must be at least clusters");
    if (!(c.p_mask >= 0.0 && c.p_mask <= 1.0)) fail("p_mask must lie in [0, 1]");
    if (!(c.alpha_scale > 1.0)) fail("alpha_scale must exceed 1");
    if (!(c.alpha_gamma > 0.0)) fail("alpha_gamma must be positive");
    if (!(c.lambda > 0.0)) fail("lambda must be positive");
    if (c.heads == 0) fail("heads must be positive");
    if (c.kernel % 2 == 0) fail("kernel must be odd");
    if (c.reps_per_category == 0) fail("reps_per_category must be at least 1");
    if (!(c.noise_level >= 0.0 && c.noise_level <= 1.0)) fail("noise_level must lie in [0, 1]");
}

NLOHMANN_JSON_SERIALIZE_ENUM(LossMode, {{LossMode::confuse_only, "confuse_only"},
                                        {LossMode::confuse_plus_ori, "confuse_plus_ori"}})
NLOHMANN_JSON_SERIALIZE_ENUM(QueryMode, {{QueryMode::full_sequence, "full_sequence"},
                                         {QueryMode::cls_only, "cls_only"}})
NLOHMANN_JSON_SERIALIZE_ENUM(RepSelection, {{RepSelection::nearest, "nearest"}, {RepSelection::random, "random"}})

inline void to_json(nlohmann::json &j, const TrainConfig &c) {
    j = {{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"pairs", c.pairs},
         {"temperature", c.temperature},
         {"learning_rate", c.learning_rate},
         {"adapter_lr_scale", c.adapter_lr_scale},
         {"seed", c.seed},
         {"top_k", c.top_k},
         {"clusters", c.clusters},
         {"hidden", c.hidden},
         {"p_mask", c.p_mask},
         {"alpha_scale", c.alpha_scale},
         {"alpha_gamma", c.alpha_gamma},
         {"loss_mode", c.loss_mode},
         {"lambda", c.lambda},
         {"heads", c.heads},
         {"kernel", c.kernel},
         {"query", c.query},
         {"use_sem", c.use_sem},
         {"use_sam", c.use_sam},
         {"use_mgde", c.use_mgde},
         {"use_real_gt", c.use_real_gt},
         {"rep_selection", c.rep_selection},
         {"reps_per_category", c.reps_per_category},
         {"noise_level", c.noise_level}};
}

namespace config_detail {
// The enum macros map unknown strings to the first enumerator; reject those instead.
template <class E>
E strict_enum(const nlohmann::json &v, const char *key) {
    const E e = v.get<E>();
    if (nlohmann::json(e) != v) {
        throw ConfigError(std::string("train config: invalid value for '") + key + "': " + v.dump());
    }
    return e;
}
}  // namespace config_detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json &j, TrainConfig &c) {
    if (!j.is_object()) {
        throw ConfigError("train config must be a JSON object");
    }
    const nlohmann::json defaults = TrainConfig{};
    for (const auto &[key, _] : j.items()) {
        if (!defaults.contains(key)) {
            throw ConfigError("train config: unknown key '" + key + "'");
        }
    }
    nlohmann::json merged = defaults;
    merged.update(j);
    try {
        c.epochs = merged.at("epochs").get<std::size_t>();
        c.batch_size = merged.at("batch_size").get<std::size_t>();
        c.pairs = merged.at("pairs").get<std::size_t>();
        c.temperature = merged.at("temperature").get<double>();
        c.learning_rate = merged.at("learning_rate").get<double>();
        c.adapter_lr_scale = merged.at("adapter_lr_scale").get<double>();
        c.seed = merged.at("seed").get<std::uint64_t>();
        c.top_k = merged.at("top_k").get<std::size_t>();
        c.clusters = merged.at("clusters").get<std::size_t>();
        c.hidden = merged.at("hidden").get<std::size_t>();
        c.p_mask = merged.at("p_mask").get<double>();
        c.alpha_scale = merged.at("alpha_scale").get<double>();
        c.alpha_gamma = merged.at("alpha_gamma").get<double>();
        c.loss_mode = config_detail::strict_enum<LossMode>(merged.at("loss_mode"), "loss_mode");
        c.lambda = merged.at("lambda").get<double>();
        c.heads = merged.at("heads").get<std::size_t>();
        c.kernel = merged.at("kernel").get<std::size_t>();
        c.query = config_detail::strict_enum<QueryMode>(merged.at("query"), "query");
        c.use_sem = merged.at("use_sem").get<bool>();
        c.use_sam = merged.at("use_sam").get<bool>();
        c.use_mgde = merged.at("use_mgde").get<bool>();
        c.use_real_gt = merged.at("use_real_gt").get<bool>();
        c.rep_selection = config_detail::strict_enum<RepSelection>(merged.at("rep_selection"), "rep_selection");
        c.reps_per_category = merged.at("reps_per_category").get<std::size_t>();
        c.noise_level = merged.at("noise_level").get<double>();
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    validate(c);
}

// ---------------------------------------------------------------------------
// Losses

/// -log p(y), log clamped at 1e-12.
inline double loss_ori(const Tensor &p, std::size_t label) {
    if (label >= p.size()) {
        throw InputError("loss_ori: label out of range");
    }
    return -std::log(std::max(p[label], 1e-12));
}

/// Cross-entropy of a [1 x D] feature against text rows `text` at temperature tau.
inline Var loss_ori(const Var &feature, const Var &text, std::size_t label, double tau) {
    Var p = softmax_rows(matmul(feature, transpose(text)), tau);
    return scale(log_clamped(pick(p, label)), -1.0);
}

/**
 * Symmetric InfoNCE over L matched (image, text) rows.
 *
 * S = I T^T; row-wise log-softmax scores each image against all texts, the
 * transposed one each text against all images; the matched terms are averaged.
 */
inline Var loss_confuse(const Var &images, const Var &texts, double tau) {
    const std::size_t l = images.value().rows();
    if (l == 0 || texts.value().rows() != l) {
        throw ContractError("loss_confuse: need L >= 1 matched rows");
    }
    Var s = matmul(images, transpose(texts));
    Var a = trace(log_softmax_rows(s, tau));
    Var b = trace(log_softmax_rows(transpose(s), tau));
    return scale(add(a, b), -1.0 / static_cast<double>(l));
}

inline double loss_confuse(const Tensor &images, const Tensor &texts, double tau) {
    if (images.rank() != 2 || images.rows() == 0) {
        throw ContractError("loss_confuse: need L >= 1 matched rows");
    }
    GradRecord rec(false);
    return loss_confuse(rec.constant(images), rec.constant(texts), tau).value().item();
}

// ---------------------------------------------------------------------------
// Model

struct Model {
    TrainConfig config;
    AdapterParams adapter;
    std::array<ExpertParams, kNumExperts> experts;
    RouterParams router;
    double inference_alpha = 0.0;  // mean instance alpha seen during training
    std::uint64_t encoder_checksum = 0;

    std::vector<Parameter *> parameters() {
        std::vector<Parameter *> out = adapter.parameters();
        for (auto &e : experts) {
            for (auto *p : e.parameters()) {
                out.push_back(p);
            }
        }
        out.push_back(&router.w);
        return out;
    }

    std::vector<Parameter *> trainable() {
        std::vector<Parameter *> out;
        for (auto *p : parameters()) {
            if (!p->frozen) {
                out.push_back(p);
            }
        }
        return out;
    }

    friend bool operator==(const Model &a, const Model &b) {
        return a.config == b.config && a.adapter == b.adapter && a.experts == b.experts && a.router == b.router &&
               a.inference_alpha == b.inference_alpha && a.encoder_checksum == b.encoder_checksum;
    }
};

struct ModelVars {
    AdapterVars adapter;
    std::array<ExpertVars, kNumExperts> experts;
    Var router;

    ModelVars(GradRecord &rec, Model &m)
        : adapter(rec, m.adapter),
          experts{ExpertVars(rec, m.experts[0]), ExpertVars(rec, m.experts[1]), ExpertVars(rec, m.experts[2])},
          router(rec.param(m.router.w)) {}
};

/// Binds a const model to a value-only record; such records never write parameters.
inline ModelVars bind_readonly(GradRecord &rec, const Model &m) {
    if (rec.recording()) {
        throw UsageError("bind_readonly needs a non-recording record");
    }
    return ModelVars(rec, const_cast<Model &>(m));
}

inline std::vector<bool> category_mask(std::size_t k, const std::vector<std::uint32_t> &cats) {
    std::vector<bool> m(k, false);
    for (auto c : cats) {
        m[c] = true;
    }
    return m;
}

inline SemanticOptions semantic_options(const TrainConfig &c) {
    return {c.pairs, c.use_sem, c.use_real_gt};
}

/// Confusion pairs of a base-split sample under the frozen baseline.
inline ConfusionPairSet mine_sample_pairs(const World &world, const ConfusionBank &bank, const Sample &s,
                                          const TrainConfig &c) {
    const Tensor conf = baseline_classify(world, s, c.temperature, &world.base_categories);
    const auto eligible = category_mask(world.num_categories(), world.base_categories);
    return mine_pairs(s, conf, bank, semantic_options(c), &eligible);
}

/// Commonality and difference embeddings of every pair mined from the base training split.
inline std::pair<Tensor, Tensor> prompt_pools(const World &world, const ConfusionBank &bank, const TrainConfig &c,
                                              const ExternalPrompts *external = nullptr) {
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    std::vector<double> common, diff;
    for (auto id : world.sample_ids(true, true)) {
        const auto set = mine_sample_pairs(world, bank, world.sample(id), c);
        for (const auto &p : set.pairs) {
            if (!seen.insert({set.pseudo_gt, p.category}).second) {
                continue;
            }
            const auto [cm, df] = prompt_embeddings(world, set.pseudo_gt, p.category, external);
            common.insert(common.end(), cm.vector.data().begin(), cm.vector.data().end());
            diff.insert(diff.end(), df.vector.data().begin(), df.vector.data().end());
        }
    }
    if (seen.empty()) {
        throw ConfigError("prompt_pools: no confusion pairs could be mined");
    }
    const std::size_t n = seen.size(), d = world.dim();
    return {Tensor({n, d}, std::move(common)), Tensor({n, d}, std::move(diff))};
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace stream {
inline constexpr std::uint64_t adapter = 1, experts = 2, router = 3, shuffle = 4, masks = 5, selection = 6,
                               noise = 7;
}

inline Model init_model(const World &world, const ConfusionBank &bank, const TrainConfig &c,
                        const ExternalPrompts *external = nullptr) {
    validate(c);
    Model m;
    m.config = c;
    m.encoder_checksum = world.encoder_checksum();
    AdapterConfig ac;
    ac.heads = c.heads;
    ac.kernel = c.kernel;
    ac.query = c.query;
    m.adapter = init_adapter(world.dim(), world.spec.grid_rows, world.spec.grid_cols, ac,
                             derive_seed(c.seed, stream::adapter));
    MgdeConfig mc;
    mc.hidden = c.hidden;
    mc.clusters = c.clusters;
    mc.top_k = c.top_k;
    mc.p_mask = c.p_mask;
    const auto [common, diff] = prompt_pools(world, bank, c, external);
    m.experts = init_experts(world, common, diff, mc, derive_seed(c.seed, stream::experts));
    m.router = init_router(world.dim(), c.top_k, derive_seed(c.seed, stream::router));
    m.adapter.set_frozen(!c.use_sam);
    for (auto &e : m.experts) {
        for (auto *p : e.parameters()) {
            p->frozen = p->frozen || !c.use_mgde;
        }
    }
    m.router.w.frozen = !c.use_mgde;
    return m;
}

// ---------------------------------------------------------------------------
// Forward passes

/// Feature of a token sequence before the experts: adapted (SAM on) or frozen.
inline Var instance_feature(const World &world, GradRecord &rec, const Model &m, const ModelVars &v,
                            const Tensor &tokens, double alpha) {
    if (!m.config.use_sam) {
        return rec.constant(world.image_head(tokens.row(0)).reshaped({1, world.dim()}));
    }
    return adapted_feature(world, rec, tokens, alpha, v.adapter);
}

inline Var experts_forward(GradRecord &rec, const Model &m, const ModelVars &v, const Var &f,
                           const std::array<ExpertMask, kNumExperts> *masks = nullptr) {
    if (!m.config.use_mgde) {
        return f;
    }
    return normalize(route_and_fuse(rec, f, v.router, m.router.top_k, v.experts, masks).feature);
}

/// Inference feature: no bank, alpha fixed to the training mean, no masking.
inline Tensor pipeline_feature(const World &world, const Model &m, const Tensor &tokens) {
    GradRecord rec(false);
    ModelVars v = bind_readonly(rec, m);
    Var f = instance_feature(world, rec, m, v, tokens, m.inference_alpha);
    return experts_forward(rec, m, v, f).value().reshaped({world.dim()});
}

/// Everything random or data-dependent about one training sample, fixed before the graph is built.
struct SamplePlan {
    std::uint64_t sample_id = 0;
    std::uint32_t label = 0;
    std::uint32_t pseudo_gt = 0;
    RepresentativeSet reps;
    std::vector<std::size_t> listed;  // indices into reps.entries that become list rows
    std::vector<std::array<ExpertMask, kNumExperts>> masks;  // [0] instance, then one per entry
    std::vector<Tensor> noise;                               // per entry, empty when clean
};

struct PlanStreams {
    std::mt19937_64 masks;
    std::mt19937_64 selection;
    std::mt19937_64 noise;

    explicit PlanStreams(std::uint64_t seed)
        : masks(derive_seed(seed, stream::masks)), selection(derive_seed(seed, stream::selection)),
          noise(derive_seed(seed, stream::noise)) {}
};

inline SamplePlan plan_sample(const World &world, const ConfusionBank &bank, const TrainConfig &c,
                              const Sample &s, PlanStreams &rs) {
    SamplePlan plan;
    plan.sample_id = s.id;
    plan.label = s.label;
    const auto pairs = mine_sample_pairs(world, bank, s, c);
    plan.pseudo_gt = pairs.pseudo_gt;
    RepresentativeOptions ro;
    ro.selection = c.rep_selection;
    ro.per_category = c.reps_per_category;
    ro.s = c.alpha_scale;
    ro.gamma = c.alpha_gamma;
    plan.reps = representative_samples(encode_image(world, s).feature.data(), pairs, bank, ro, &rs.selection);
    for (std::size_t i = 0; i < plan.reps.entries.size(); ++i) {
        if (plan.reps.entries[i].category != s.label) {
            plan.listed.push_back(i);
        }
    }
    for (std::size_t i = 0; i <= plan.reps.entries.size(); ++i) {
        plan.masks.push_back(draw_masks(world.dim(), c.p_mask, rs.masks));
    }
    if (c.noise_level > 0.0) {
        // features are unit norm, so level / sqrt(D) per coordinate gives noise of norm ~level
        std::normal_distribution<double> n(0.0, c.noise_level / std::sqrt(static_cast<double>(world.dim())));
        for (std::size_t i = 0; i < plan.reps.entries.size(); ++i) {
            Tensor t({world.dim()});
            for (auto &x : t.data()) {
                x = n(rs.noise);
            }
            plan.noise.push_back(std::move(t));
        }
    }
    return plan;
}

struct SampleLoss {
    Var loss;
    std::size_t list_length = 0;
    double alpha = 0.0;
};

/// Loss graph of one planned sample; nullopt when it contributes nothing under the configured mode.
inline std::optional<SampleLoss> sample_loss(const World &world, GradRecord &rec, const Model &m,
                                             const ModelVars &v, const SamplePlan &plan) {
    const TrainConfig &c = m.config;
    const bool with_ori = c.loss_mode == LossMode::confuse_plus_ori;
    if (plan.reps.empty() && !with_ori) {
        return std::nullopt;
    }
    const Tensor &tokens = world.sample(plan.sample_id).tokens;
    SampleLoss out;
    Var inst;
    std::vector<Var> rep_feats;
    if (plan.reps.empty()) {
        inst = instance_feature(world, rec, m, v, tokens, 0.0);
    } else if (c.use_sam) {
        auto fused = sample_confusion_feature(world, rec, tokens, plan.reps, v.adapter, plan.noise);
        inst = fused.feature;
        rep_feats = std::move(fused.representatives);
        out.alpha = plan.reps.mean_alpha();
    } else {
        // Without the sample miner the instance keeps its frozen feature and
        // representatives contribute their cached bank features.
        inst = instance_feature(world, rec, m, v, tokens, 0.0);
        for (std::size_t i = 0; i < plan.reps.entries.size(); ++i) {
            const auto &e = plan.reps.entries[i];
            Tensor acc({world.dim()}, 0.0);
            for (const auto *r : e.records) {
                for (std::size_t d = 0; d < acc.size(); ++d) {
                    acc[d] += r->feature[d];
                }
            }
            if (!plan.noise.empty()) {
                Tensor un = normalized(acc);
                for (std::size_t d = 0; d < acc.size(); ++d) {
                    acc[d] = un[d] + plan.noise[i][d];
                }
            }
            rep_feats.push_back(rec.constant(normalized(acc).reshaped({1, world.dim()})));
        }
    }
    Var inst_out = experts_forward(rec, m, v, inst, &plan.masks[0]);
    std::vector<Var> img{inst_out};
    std::vector<Var> txt{rec.constant(world.category_text_features.row_tensor(plan.label))};
    for (auto i : plan.listed) {
        img.push_back(experts_forward(rec, m, v, rep_feats[i], &plan.masks[i + 1]));
        txt.push_back(rec.constant(world.category_text_features.row_tensor(plan.reps.entries[i].category)));
    }
    out.list_length = img.size();
    Var loss;
    if (!plan.reps.empty()) {
        loss = loss_confuse(concat_rows(img), concat_rows(txt), c.temperature);
    }
    if (with_ori) {
        const auto &base = world.base_categories;
        std::size_t idx = 0;
        std::vector<double> rows;
        for (std::size_t i = 0; i < base.size(); ++i) {
            if (base[i] == plan.label) {
                idx = i;
            }
            const auto r = world.category_text_features.row(base[i]);
            rows.insert(rows.end(), r.begin(), r.end());
        }
        Var ori = scale(loss_ori(inst_out, rec.constant(Tensor({base.size(), world.dim()}, std::move(rows))), idx,
                                 c.temperature),
                        c.lambda);
        loss = loss.valid() ? add(loss, ori) : ori;
    }
    out.loss = loss;
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Split { base, novel, both };

struct Accuracy {
    std::optional<double> base;
    std::optional<double> novel;
    std::optional<double> hm;
};

inline double harmonic_mean(double a, double b) {
    if (a <= 0.0 || b <= 0.0) {
        return 0.0;
    }
    return 2.0 * a * b / (a + b);
}

using FeatureFn = std::function<Tensor(const Sample &)>;

/// Predicted category of a feature among `allowed`.
inline std::uint32_t predict(const World &world, std::span<const double> feature, double tau,
                             const std::vector<std::uint32_t> &allowed) {
    return static_cast<std::uint32_t>(argmax(classify_feature(world, feature, tau, &allowed).data()));
}

/// Test accuracy per split; base samples compete among base categories, novel among novel.
inline Accuracy split_accuracy(const World &world, const FeatureFn &feature, double tau, Split split) {
    Accuracy acc;
    auto run = [&](bool base) {
        const auto ids = world.sample_ids(false, base);
        if (ids.empty()) {
            throw ConfigError(std::string("evaluate: empty ") + (base ? "base" : "novel") + " split");
        }
        const auto &allowed = base ? world.base_categories : world.novel_categories;
        std::size_t hit = 0;
        for (auto id : ids) {
            const Sample &s = world.sample(id);
            hit += predict(world, feature(s).data(), tau, allowed) == s.label;
        }
        return static_cast<double>(hit) / static_cast<double>(ids.size());
    };
    if (split != Split::novel) {
        acc.base = run(true);
    }
    if (split != Split::base) {
        acc.novel = run(false);
    }
    if (acc.base && acc.novel) {
        acc.hm = harmonic_mean(*acc.base, *acc.novel);
    }
    return acc;
}

inline FeatureFn baseline_features(const World &world) {
    return [&world](const Sample &s) { return encode_image(world, s).feature; };
}

inline FeatureFn model_features(const World &world, const Model &m) {
    return [&world, &m](const Sample &s) { return pipeline_feature(world, m, s.tokens); };
}

inline Accuracy evaluate(const World &world, const Model &m, Split split = Split::both) {
    if (m.encoder_checksum != world.encoder_checksum()) {
        throw InputError("evaluate: model was trained on a different world");
    }
    return split_accuracy(world, model_features(world, m), m.config.temperature, split);
}

inline Accuracy evaluate_baseline(const World &world, double tau, Split split = Split::both) {
    return split_accuracy(world, baseline_features(world), tau, split);
}

/// Fraction of bank records the trained pipeline now assigns to their true category.
inline std::optional<double> correction_rate(const World &world, const ConfusionBank &bank, const Model &m) {
    const auto recs = bank.records();
    if (recs.empty()) {
        return std::nullopt;
    }
    std::size_t fixed = 0;
    for (const auto *r : recs) {
        const Tensor f = pipeline_feature(world, m, world.sample(r->sample_id).tokens);
        fixed += predict(world, f.data(), m.config.temperature, world.base_categories) == r->true_category;
    }
    return static_cast<double>(fixed) / static_cast<double>(recs.size());
}

using CountMatrix = std::vector<std::vector<std::uint64_t>>;

/// Off-diagonal counts M[true][predicted] over the given samples, each split scored within itself.
inline CountMatrix confusion_matrix(const World &world, const FeatureFn &feature, double tau,
                                    const std::vector<std::uint64_t> &ids) {
    const std::size_t k = world.num_categories();
    CountMatrix m(k, std::vector<std::uint64_t>(k, 0));
    for (auto id : ids) {
        const Sample &s = world.sample(id);
        const auto &allowed = world.is_base(s.label) ? world.base_categories : world.novel_categories;
        const auto p = predict(world, feature(s).data(), tau, allowed);
        if (p != s.label) {
            ++m[s.label][p];
        }
    }
    return m;
}

inline std::vector<std::uint64_t> all_sample_ids(const World &world, bool train) {
    std::vector<std::uint64_t> out;
    for (const auto &s : world.samples) {
        if (s.train == train) {
            out.push_back(s.id);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Heatmaps

inline std::string heatmap_csv(const CountMatrix &m, const std::vector<std::string> &names) {
    if (m.size() != names.size()) {
        throw ShapeError("heatmap: matrix has " + std::to_string(m.size()) + " rows for " +
                         std::to_string(names.size()) + " names");
    }
    std::ostringstream os;
    os << "true\\predicted";
    for (const auto &n : names) {
        os << ',' << n;
    }
    os << '\n';
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i].size() != m.size()) {
            throw ShapeError("heatmap: matrix must be square");
        }
        os << names[i];
        for (auto v : m[i]) {
            os << ',' << v;
        }
        os << '\n';
    }
    return os.str();
}

inline CountMatrix parse_heatmap_csv(const std::string &csv) {
    std::istringstream is(csv);
    std::string line;
    if (!std::getline(is, line)) {
        throw InputError("heatmap csv: empty");
    }
    CountMatrix m;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');
        std::vector<std::uint64_t> row;
        while (std::getline(ls, cell, ',')) {
            row.push_back(std::stoull(cell));
        }
        m.push_back(std::move(row));
    }
    return m;
}

/// Binary 8-bit PGM, each cell scaled to the maximum count.
inline std::string heatmap_pgm(const CountMatrix &m) {
    std::uint64_t mx = 0;
    for (const auto &row : m) {
        for (auto v : row) {
            mx = std::max(mx, v);
        }
    }
    std::string out = "P5\n" + std::to_string(m.size()) + " " + std::to_string(m.size()) + "\n255\n";
    for (const auto &row : m) {
        for (auto v : row) {
            const auto px = mx == 0 ? 0 : static_cast<unsigned>(std::lround(255.0 * static_cast<double>(v) /
                                                                             static_cast<double>(mx)));
            out.push_back(static_cast<char>(px));
        }
    }
    return out;
}

inline void write_text_file(const std::filesystem::path &path, const std::string &content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << content;
    if (!out) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

inline std::string read_text_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes `<stem>.csv` and `<stem>.pgm`.
inline void heatmap_report(const CountMatrix &m, const std::vector<std::string> &names,
                           const std::filesystem::path &stem) {
    write_text_file(stem.string() + ".csv", heatmap_csv(m, names));
    write_text_file(stem.string() + ".pgm", heatmap_pgm(m));
}

inline void heatmap_report(const ConfusionBank &bank, const std::filesystem::path &stem) {
    heatmap_report(bank.misclassification_matrix(), bank.category_names(), stem);
}

// ---------------------------------------------------------------------------
// Training

struct Report {
    std::uint64_t seed = 0;
    TrainConfig config;
    double base_accuracy = 0.0;
    double novel_accuracy = 0.0;
    double hm = 0.0;
    double baseline_base_accuracy = 0.0;
    double baseline_novel_accuracy = 0.0;
    double baseline_hm = 0.0;
    std::optional<double> correction_rate;
    CountMatrix confusion_before;
    CountMatrix confusion_after;
    std::vector<double> loss_curve;
    std::uint64_t encoder_checksum_before = 0;
    std::uint64_t encoder_checksum_after = 0;
    std::uint64_t bank_checksum_before = 0;
    std::uint64_t bank_checksum_after = 0;
    std::size_t contributing_samples = 0;  // per epoch
    double inference_alpha = 0.0;
    std::vector<std::string> warnings;
};

inline nlohmann::json to_json(const Report &r) {
    nlohmann::json j;
    j["seed"] = r.seed;
    j["config"] = r.config;
    j["base_accuracy"] = r.base_accuracy;
    j["novel_accuracy"] = r.novel_accuracy;
    j["hm"] = r.hm;
    j["baseline"] = {{"base_accuracy", r.baseline_base_accuracy},
                     {"novel_accuracy", r.baseline_novel_accuracy},
                     {"hm", r.baseline_hm}};
    j["correction_rate"] = r.correction_rate ? nlohmann::json(*r.correction_rate) : nlohmann::json(nullptr);
    j["confusion_before"] = r.confusion_before;
    j["confusion_after"] = r.confusion_after;
    j["loss_curve"] = r.loss_curve;
    j["encoder_checksum"] = {{"before", r.encoder_checksum_before}, {"after", r.encoder_checksum_after}};
    j["bank_checksum"] = {{"before", r.bank_checksum_before}, {"after", r.bank_checksum_after}};
    j["contributing_samples"] = r.contributing_samples;
    j["inference_alpha"] = r.inference_alpha;
    j["warnings"] = r.warnings;
    return j;
}

inline Report report_from_json(const nlohmann::json &j) {
    Report r;
    try {
        r.seed = j.at("seed").get<std::uint64_t>();
        r.config = j.at("config").get<TrainConfig>();
        r.base_accuracy = j.at("base_accuracy").get<double>();
        r.novel_accuracy = j.at("novel_accuracy").get<double>();
        r.hm = j.at("hm").get<double>();
        r.baseline_base_accuracy = j.at("baseline").at("base_accuracy").get<double>();
        r.baseline_novel_accuracy = j.at("baseline").at("novel_accuracy").get<double>();
        r.baseline_hm = j.at("baseline").at("hm").get<double>();
        if (!j.at("correction_rate").is_null()) {
            r.correction_rate = j.at("correction_rate").get<double>();
        }
        r.confusion_before = j.at("confusion_before").get<CountMatrix>();
        r.confusion_after = j.at("confusion_after").get<CountMatrix>();
        r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
        r.encoder_checksum_before = j.at("encoder_checksum").at("before").get<std::uint64_t>();
        r.encoder_checksum_after = j.at("encoder_checksum").at("after").get<std::uint64_t>();
        r.bank_checksum_before = j.at("bank_checksum").at("before").get<std::uint64_t>();
        r.bank_checksum_after = j.at("bank_checksum").at("after").get<std::uint64_t>();
        r.contributing_samples = j.at("contributing_samples").get<std::size_t>();
        r.inference_alpha = j.at("inference_alpha").get<double>();
        r.warnings = j.at("warnings").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception &e) {
        throw InputError(std::string("report: ") + e.what());
    }
    if (std::abs(harmonic_mean(r.base_accuracy, r.novel_accuracy) - r.hm) > 1e-9) {
        throw InputError("report: stored HM disagrees with base and novel accuracy");
    }
    return r;
}

struct TrainResult {
    Model model;
    Report report;
};

/**
 * Trains adapter and expert parameters with plain SGD on the base training
 * split; the encoders and the bank are read-only throughout.
 */
inline TrainResult train(const World &world, const ConfusionBank &bank, const TrainConfig &config,
                         const ExternalPrompts *external = nullptr) {
    validate(config);
    TrainConfig c = config;
    Report rep;
    if (bank.empty() && c.loss_mode == LossMode::confuse_only) {
        c.loss_mode = LossMode::confuse_plus_ori;
        rep.warnings.push_back("empty confusion bank: training on the cross-entropy loss only");
    }
    rep.seed = c.seed;
    rep.config = config;
    rep.encoder_checksum_before = world.encoder_checksum();
    rep.bank_checksum_before = bank.checksum();

    Model m = init_model(world, bank, c, external);
    std::vector<std::uint64_t> ids = world.sample_ids(true, true);
    if (ids.empty()) {
        throw ConfigError("train: no base training samples");
    }
    std::set<const Parameter *> adapter_params;
    for (auto *p : m.adapter.parameters()) {
        adapter_params.insert(p);
    }
    std::mt19937_64 shuffle(derive_seed(c.seed, stream::shuffle));
    PlanStreams streams(c.seed);
    double alpha_sum = 0.0;
    std::size_t alpha_n = 0;
    for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
        std::shuffle(ids.begin(), ids.end(), shuffle);
        double epoch_loss = 0.0;
        std::size_t batches = 0, contributing = 0;
        for (std::size_t start = 0; start < ids.size(); start += c.batch_size) {
            const std::size_t end = std::min(ids.size(), start + c.batch_size);
            std::vector<SamplePlan> plans;
            for (std::size_t i = start; i < end; ++i) {
                plans.push_back(plan_sample(world, bank, c, world.sample(ids[i]), streams));
            }
            GradRecord rec(true);
            ModelVars v(rec, m);
            Var total;
            std::size_t n = 0;
            for (const auto &plan : plans) {
                auto sl = sample_loss(world, rec, m, v, plan);
                if (!sl) {
                    continue;
                }
                if (!plan.reps.empty()) {
                    alpha_sum += sl->alpha;
                    ++alpha_n;
                }
                total = n == 0 ? sl->loss : add(total, sl->loss);
                ++n;
            }
            if (n == 0) {
                continue;
            }
            contributing += n;
            Var loss = scale(total, 1.0 / static_cast<double>(n));
            for (auto &g : rec.backward(loss)) {
                if (g.param->frozen) {
                    continue;
                }
                const double lr = adapter_params.count(g.param) ? c.learning_rate * c.adapter_lr_scale
                                                                : c.learning_rate;
                auto dst = g.param->value.data();
                for (std::size_t i = 0; i < dst.size(); ++i) {
                    dst[i] -= lr * g.grad[i];
                }
            }
            epoch_loss += loss.value().item();
            ++batches;
        }
        rep.loss_curve.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
        rep.contributing_samples = contributing;
    }
    m.inference_alpha = c.use_sam && alpha_n ? alpha_sum / static_cast<double>(alpha_n) : 0.0;
    m.config = config;

    const Accuracy before = evaluate_baseline(world, c.temperature);
    const Accuracy after = evaluate(world, m);
    rep.baseline_base_accuracy = *before.base;
    rep.baseline_novel_accuracy = *before.novel;
    rep.baseline_hm = *before.hm;
    rep.base_accuracy = *after.base;
    rep.novel_accuracy = *after.novel;
    rep.hm = *after.hm;
    rep.correction_rate = correction_rate(world, bank, m);
    const auto test_ids = all_sample_ids(world, false);
    rep.confusion_before = confusion_matrix(world, baseline_features(world), c.temperature, test_ids);
    rep.confusion_after = confusion_matrix(world, model_features(world, m), c.temperature, test_ids);
    rep.encoder_checksum_after = world.encoder_checksum();
    rep.bank_checksum_after = bank.checksum();
    rep.inference_alpha = m.inference_alpha;
    return {std::move(m), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace ckpt_detail {
inline constexpr std::uint32_t kFormatVersion = 1;
}

inline void save_checkpoint(Model &m, const std::filesystem::path &path) {
    io::Writer out;
    out.magic("CAPTCKPT");
    out.u32(ckpt_detail::kFormatVersion);
    out.str(nlohmann::json(m.config).dump());
    out.u64(m.encoder_checksum);
    out.f64(m.inference_alpha);
    out.u64(m.adapter.grid_rows);
    out.u64(m.adapter.grid_cols);
    out.u64(m.router.top_k);
    for (const auto &e : m.experts) {
        out.u8(static_cast<std::uint8_t>(e.role));
        out.u8(e.centroids.empty() ? 0 : 1);
        if (!e.centroids.empty()) {
            out.tensor(e.centroids);
        }
    }
    const auto params = m.parameters();
    out.u64(params.size());
    for (const auto *p : params) {
        out.str(p->name);
        out.u8(p->frozen ? 1 : 0);
        out.tensor(p->value);
    }
    out.save(path);
}

inline Model load_checkpoint(const std::filesystem::path &path) {
    io::Reader in = io::Reader::from_file(path);
    in.expect_magic("CAPTCKPT");
    const std::size_t vat = in.offset();
    if (const auto v = in.u32(); v != ckpt_detail::kFormatVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(v), vat);
    }
    Model m;
    const std::size_t cat = in.offset();
    try {
        m.config = nlohmann::json::parse(in.str()).get<TrainConfig>();
    } catch (const std::exception &e) {
        throw FormatError(std::string("invalid embedded config: ") + e.what(), cat);
    }
    m.encoder_checksum = in.u64();
    m.inference_alpha = in.f64();
    m.adapter.grid_rows = in.count(4096, "grid row");
    m.adapter.grid_cols = in.count(4096, "grid column");
    m.adapter.config.heads = m.config.heads;
    m.adapter.config.kernel = m.config.kernel;
    m.adapter.config.query = m.config.query;
    {
        const std::size_t at = in.offset();
        m.router.top_k = in.count(kNumExperts, "top-K");
        if (m.router.top_k != m.config.top_k) {
            throw FormatError("top-K disagrees with the embedded config", at);
        }
    }
    for (std::size_t e = 0; e < kNumExperts; ++e) {
        const std::size_t at = in.offset();
        const auto role = in.u8();
        if (role != e) {
            throw FormatError("unexpected expert role", at);
        }
        m.experts[e].role = static_cast<ExpertRole>(role);
        if (in.u8() != 0) {
            m.experts[e].centroids = in.tensor();
        }
        if (m.experts[e].semantic() == m.experts[e].centroids.empty()) {
            throw FormatError("expert centroid block inconsistent with its role", at);
        }
    }
    auto params = m.parameters();
    {
        const std::size_t at = in.offset();
        if (in.count(params.size(), "parameter") != params.size()) {
            throw FormatError("parameter count mismatch", at);
        }
    }
    std::vector<std::size_t> offsets;
    for (auto *p : params) {
        offsets.push_back(in.offset());
        p->name = in.str();
        p->frozen = in.u8() != 0;
        p->value = in.tensor();
    }
    in.expect_end();
    // Names and shapes must agree with the architecture the config describes.
    const std::size_t dim = m.adapter.ln_gain.value.size();
    auto check = [&](const Parameter &p, const std::string &name, Shape shape) {
        if (p.name != name || p.value.shape() != shape) {
            std::size_t at = 0;
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (params[i] == &p) {
                    at = offsets[i];
                }
            }
            throw FormatError("parameter '" + p.name + "' does not match expected '" + name + "' " +
                                  shape_string(shape),
                              at);
        }
    };
    const std::size_t ks = m.config.kernel, h = m.config.hidden, k = m.config.clusters;
    check(m.adapter.ln_gain, "adapter.ln_gain", {dim});
    check(m.adapter.ln_bias, "adapter.ln_bias", {dim});
    check(m.adapter.wq, "adapter.wq", {dim, dim});
    check(m.adapter.wk, "adapter.wk", {dim, dim});
    check(m.adapter.wv, "adapter.wv", {dim, dim});
    check(m.adapter.wo, "adapter.wo", {dim, dim});
    check(m.adapter.kernel, "adapter.kernel", {ks, ks, dim});
    if (m.adapter.grid_rows * m.adapter.grid_cols == 0) {
        throw FormatError("empty adapter grid", in.offset());
    }
    for (auto &e : m.experts) {
        const std::string pre = std::string("expert.") + role_name(e.role) + ".";
        if (e.semantic()) {
            if (e.centroids.shape() != Shape{k, dim}) {
                throw FormatError("centroid shape mismatch", in.offset());
            }
            check(e.prompt_proj, pre + "prompt_proj", {dim, dim});
            check(e.w1, pre + "w1", h > k ? Shape{h - k, dim} : Shape{1, dim});
        } else {
            check(e.w1, pre + "w1", {h, dim});
        }
        check(e.b1, pre + "b1", {h});
        check(e.w2, pre + "w2", {h, dim});
        check(e.b2, pre + "b2", {dim});
    }
    check(m.router.w, "router.w", {dim, kNumExperts});
    return m;
}

// ---------------------------------------------------------------------------
// Run directories and ablations

inline std::string loss_curve_csv(const std::vector<double> &curve) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) {
        os << i + 1 << ',' << curve[i] << '\n';
    }
    return os.str();
}

/// config.json, report.json, heatmaps, loss_curve.csv and checkpoint.bin.
inline void write_run(const std::filesystem::path &dir, const World &world, TrainResult &run) {
    std::filesystem::create_directories(dir);
    write_text_file(dir / "config.json", nlohmann::json(run.report.config).dump(2) + "\n");
    write_text_file(dir / "report.json", to_json(run.report).dump(2) + "\n");
    heatmap_report(run.report.confusion_before, world.category_names, dir / "heatmap_before");
    heatmap_report(run.report.confusion_after, world.category_names, dir / "heatmap_after");
    write_text_file(dir / "loss_curve.csv", loss_curve_csv(run.report.loss_curve));
    save_checkpoint(run.model, dir / "checkpoint.bin");
}

struct NoiseRun {
    double level;
    Report report;
};

inline std::vector<NoiseRun> noise_ablation(const World &world, const ConfusionBank &bank,
                                            const TrainConfig &config, const std::vector<double> &levels) {
    std::vector<NoiseRun> out;
    for (double lv : levels) {
        if (!(lv >= 0.0 && lv <= 1.0)) {
            throw ConfigError("noise_ablation: levels must lie in [0, 1]");
        }
        TrainConfig c = config;
        c.noise_level = lv;
        out.push_back({lv, train(world, bank, c).report});
    }
    return out;
}

enum class SweepParam { pairs_c, reps_per_category };

inline SweepParam parse_sweep_param(const std::string &s) {
    if (s == "pairs_c") {
        return SweepParam::pairs_c;
    }
    if (s == "reps_per_category") {
        return SweepParam::reps_per_category;
    }
    throw ConfigError("unknown sweep parameter '" + s + "'");
}

struct SweepRow {
    std::size_t value;
    Report report;
};

inline std::vector<SweepRow> sweep(const World &world, const ConfusionBank &bank, const TrainConfig &config,
                                   SweepParam param, const std::vector<std::size_t> &values) {
    if (values.empty()) {
        throw ConfigError("sweep: no values");
    }
    std::vector<SweepRow> out;
    for (auto v : values) {
        TrainConfig c = config;
        (param == SweepParam::pairs_c ? c.pairs : c.reps_per_category) = v;
        out.push_back({v, train(world, bank, c).report});
    }
    return out;
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string sweep_csv(SweepParam param, const std::vector<SweepRow> &rows) {
    std::ostringstream os;
    os << (param == SweepParam::pairs_c ? "pairs_c" : "reps_per_category")
       << ",seed,base_accuracy,novel_accuracy,hm,correction_rate\n";
    for (const auto &r : rows) {
        os << r.value << ',' << r.report.seed << ',' << fmt_double(r.report.base_accuracy) << ','
           << fmt_double(r.report.novel_accuracy) << ',' << fmt_double(r.report.hm) << ','
           << (r.report.correction_rate ? fmt_double(*r.report.correction_rate) : "") << '\n';
    }
    return os.str();
}

inline std::string noise_csv(const std::vector<NoiseRun> &runs) {
    std::ostringstream os;
    os << "noise_level,seed,base_accuracy,novel_accuracy,hm,correction_rate\n";
    for (const auto &r : runs) {
        os << fmt_double(r.level) << ',' << r.report.seed << ',' << fmt_double(r.report.base_accuracy) << ','
           << fmt_double(r.report.novel_accuracy) << ',' << fmt_double(r.report.hm) << ','
           << (r.report.correction_rate ? fmt_double(*r.report.correction_rate) : "") << '\n';
    }
    return os.str();
}

}  // namespace capt

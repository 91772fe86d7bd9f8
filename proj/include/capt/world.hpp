#pragma once

// Synthetic vision-language world with planted confusable category pairs.
//
// Categories get orthonormal canonical directions. For every planted pair
// (attractor, confused) the confused member's image prototype is rotated
// toward the attractor until the two prototypes are `pair_angle` apart. Text
// anchors stay near the canonical directions; the confused member's anchor is
// tilted by a fixed angle toward the attractor, so paired category names are
// semantically related too. The frozen baseline therefore mistakes
// confused-member images for the attractor, and ranks the true category second.

#include "capt/autodiff.hpp"
#include "capt/binary_io.hpp"
#include "capt/error.hpp"
#include "capt/numerics.hpp"
#include "capt/ops.hpp"
#include "capt/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace capt {

struct WorldSpec {
    std::size_t num_categories = 32;
    std::size_t num_confusable_pairs = 8;
    double pair_angle = 0.15;          // radians between paired prototypes
    double within_class_noise = 0.3;   // expected L2 norm of per-sample noise
    std::size_t samples_per_category = 50;
    double base_fraction = 0.75;
    double train_fraction = 0.6;       // leading share of each category's samples used for training
    std::size_t feature_dim = 32;
    std::size_t grid_rows = 4;
    std::size_t grid_cols = 4;
    std::uint64_t seed = 0;

    [[nodiscard]] std::size_t patch_count() const { return grid_rows * grid_cols; }
    [[nodiscard]] std::size_t num_base() const {
        return static_cast<std::size_t>(std::llround(base_fraction * static_cast<double>(num_categories)));
    }
    [[nodiscard]] std::size_t train_per_category() const {
        return static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(samples_per_category)));
    }

    friend bool operator==(const WorldSpec &, const WorldSpec &) = default;
};

inline void validate(const WorldSpec &s) {
    auto fail = [](const std::string &m) { throw ConfigError("world spec: " + m); };
    if (s.num_categories < 2) {
        fail("need at least two categories");
    }
    if (2 * s.num_confusable_pairs > s.num_categories) {
        fail("2 * num_confusable_pairs exceeds num_categories");
    }
    if (s.num_confusable_pairs > 0 && !(s.pair_angle > 0.0 && s.pair_angle <= std::numbers::pi / 2)) {
        fail("pair_angle must lie in (0, pi/2]");
    }
    if (!(s.within_class_noise >= 0.0) || !std::isfinite(s.within_class_noise)) {
        fail("within_class_noise must be a finite non-negative value");
    }
    if (s.feature_dim < s.num_categories) {
        fail("feature_dim must be at least num_categories for orthogonal prototypes");
    }
    if (s.grid_rows == 0 || s.grid_cols == 0) {
        fail("patch grid must be non-empty");
    }
    if (s.samples_per_category < 2) {
        fail("need at least two samples per category");
    }
    if (!(s.base_fraction > 0.0 && s.base_fraction < 1.0)) {
        fail("base_fraction must lie in (0, 1)");
    }
    if (s.num_base() == 0 || s.num_base() >= s.num_categories) {
        fail("base/novel split leaves one side empty");
    }
    if (s.train_per_category() == 0 || s.train_per_category() >= s.samples_per_category) {
        fail("train_fraction leaves the train or test partition empty");
    }
}

inline void to_json(nlohmann::json &j, const WorldSpec &s) {
    j = nlohmann::json{{"num_categories", s.num_categories},
                       {"num_confusable_pairs", s.num_confusable_pairs},
                       {"pair_angle", s.pair_angle},
                       {"within_class_noise", s.within_class_noise},
                       {"samples_per_category", s.samples_per_category},
                       {"base_fraction", s.base_fraction},
                       {"train_fraction", s.train_fraction},
                       {"feature_dim", s.feature_dim},
                       {"grid_rows", s.grid_rows},
                       {"grid_cols", s.grid_cols},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json &j, WorldSpec &s) {
    if (!j.is_object()) {
        throw ConfigError("world spec must be a JSON object");
    }
    const nlohmann::json defaults = WorldSpec{};
    for (const auto &[key, _] : j.items()) {
        if (!defaults.contains(key)) {
            throw ConfigError("world spec: unknown key '" + key + "'");
        }
    }
    nlohmann::json m = defaults;
    m.update(j);
    try {
        s.num_categories = m.at("num_categories").get<std::size_t>();
        s.num_confusable_pairs = m.at("num_confusable_pairs").get<std::size_t>();
        s.pair_angle = m.at("pair_angle").get<double>();
        s.within_class_noise = m.at("within_class_noise").get<double>();
        s.samples_per_category = m.at("samples_per_category").get<std::size_t>();
        s.base_fraction = m.at("base_fraction").get<double>();
        s.train_fraction = m.at("train_fraction").get<double>();
        s.feature_dim = m.at("feature_dim").get<std::size_t>();
        s.grid_rows = m.at("grid_rows").get<std::size_t>();
        s.grid_cols = m.at("grid_cols").get<std::size_t>();
        s.seed = m.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("world spec: ") + e.what());
    }
}

struct Sample {
    std::uint64_t id = 0;
    std::uint32_t label = 0;
    bool train = false;
    Tensor tokens;  // [(N+1) x D], row 0 is the [CLS] token

    friend bool operator==(const Sample &, const Sample &) = default;
};

struct PlantedPair {
    std::uint32_t attractor;
    std::uint32_t confused;

    friend bool operator==(const PlantedPair &, const PlantedPair &) = default;
};

struct ImageEncoding {
    Tensor tokens;
    Tensor feature;  // f_I, unit norm
};

namespace world_detail {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr double kPositionalScale = 0.05;
inline constexpr double kTextGain = 4.0;
inline constexpr double kTextTilt = 0.5;  // radians
inline constexpr std::uint64_t kTokenSalt = 0x9e3779b97f4a7c15ull;

inline std::vector<std::string> tokenize(const std::string &text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || ch == '_') {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

inline std::vector<double> hashed_token_embedding(const std::string &token, std::size_t dim) {
    std::mt19937_64 rng(io::fnv1a(token) ^ kTokenSalt);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    std::vector<double> v(dim);
    for (auto &x : v) {
        x = normal(rng);
    }
    return v;
}

/// Rows of a random orthogonal matrix (Gram-Schmidt on Gaussian rows).
inline Tensor random_orthonormal_rows(std::size_t rows, std::size_t dim, std::mt19937_64 &rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor out({rows, dim});
    for (std::size_t r = 0; r < rows; ++r) {
        for (int attempt = 0;; ++attempt) {
            auto row = out.row(r);
            for (auto &x : row) {
                x = normal(rng);
            }
            // Two passes of modified Gram-Schmidt for numerical orthogonality.
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t p = 0; p < r; ++p) {
                    const double proj = dot(row, out.row(p));
                    auto prev = out.row(p);
                    for (std::size_t i = 0; i < dim; ++i) {
                        row[i] -= proj * prev[i];
                    }
                }
            }
            const double n = l2_norm(row);
            if (n > 1e-6) {
                for (auto &x : row) {
                    x /= n;
                }
                break;
            }
            if (attempt > 16) {
                throw ConfigError("world: failed to draw an orthonormal basis");
            }
        }
    }
    return out;
}

inline std::vector<double> mat_vec(const Tensor &m, std::span<const double> v) {
    std::vector<double> out(m.dim(0), 0.0);
    for (std::size_t i = 0; i < m.dim(0); ++i) {
        out[i] = dot(m.row(i), v);
    }
    return out;
}

}  // namespace world_detail

/**
 * Generated dataset plus frozen encoders. Immutable once built; all members are
 * public for serialisation but nothing in the library mutates a World.
 */
struct World {
    WorldSpec spec;
    Tensor basis;                     // [K x D] canonical category directions (text anchors)
    Tensor prototypes;                // [K x D] image prototypes, pairs rotated
    Tensor image_projection;          // [D x D] frozen image head W_I
    Tensor text_projection;           // [D x D] frozen text projection
    Tensor positional;                // [N x D] patch offsets, rows sum to zero
    Tensor category_token_embeddings; // [K x D] vocabulary entries of category names
    std::vector<std::string> category_names;
    std::vector<PlantedPair> planted_pairs;
    std::vector<std::uint32_t> base_categories;
    std::vector<std::uint32_t> novel_categories;
    std::vector<Sample> samples;

    // Derived on build/load, not serialised.
    Tensor image_projection_t;        // W_I^T, for row-vector products
    Tensor category_text_features;    // [K x D] encode_text("a photo of a <name>")
    std::unordered_map<std::string, std::size_t> name_index;

    [[nodiscard]] std::size_t num_categories() const { return spec.num_categories; }
    [[nodiscard]] std::size_t dim() const { return spec.feature_dim; }

    [[nodiscard]] const Sample &sample(std::uint64_t id) const {
        if (id >= samples.size()) {
            throw InputError("unknown sample id " + std::to_string(id));
        }
        return samples[id];
    }

    [[nodiscard]] bool is_base(std::uint32_t category) const {
        return std::find(base_categories.begin(), base_categories.end(), category) != base_categories.end();
    }

    [[nodiscard]] std::vector<std::uint64_t> sample_ids(bool train, bool base) const {
        std::vector<std::uint64_t> out;
        for (const auto &s : samples) {
            if (s.train == train && is_base(s.label) == base) {
                out.push_back(s.id);
            }
        }
        return out;
    }

    /// Hash of the frozen encoder parameters.
    [[nodiscard]] std::uint64_t encoder_checksum() const {
        std::uint64_t h = io::checksum(image_projection);
        h = io::checksum(text_projection, h);
        h = io::checksum(category_token_embeddings, h);
        return io::checksum(positional, h);
    }

    /// Frozen image head: normalize(W_I * tanh(x)).
    [[nodiscard]] Tensor image_head(std::span<const double> x) const {
        std::vector<double> t(x.begin(), x.end());
        for (auto &v : t) {
            v = std::tanh(v);
        }
        return normalized(Tensor::vector(world_detail::mat_vec(image_projection, t)));
    }

    /// Differentiable image head over a [1 x D] row.
    [[nodiscard]] Var image_head(GradRecord &rec, const Var &x) const {
        return normalize(matmul(tanh(x), rec.constant(image_projection_t)));
    }

    [[nodiscard]] Tensor token_embedding(const std::string &token) const {
        if (auto it = name_index.find(token); it != name_index.end()) {
            const auto row = category_token_embeddings.row(it->second);
            return Tensor::vector(std::vector<double>(row.begin(), row.end()));
        }
        return Tensor::vector(world_detail::hashed_token_embedding(token, dim()));
    }

    void finalize() {
        image_projection_t = kernels::transpose(image_projection);
        name_index.clear();
        for (std::size_t c = 0; c < category_names.size(); ++c) {
            name_index.emplace(category_names[c], c);
        }
        category_text_features = Tensor({num_categories(), dim()});
        for (std::size_t c = 0; c < num_categories(); ++c) {
            const Tensor t = encode_text_impl(category_prompt(c));
            std::copy(t.data().begin(), t.data().end(), category_text_features.row(c).begin());
        }
    }

    [[nodiscard]] std::string category_prompt(std::size_t c) const {
        return "a photo of a " + category_names.at(c);
    }

    [[nodiscard]] Tensor encode_text_impl(const std::string &text) const {
        const auto tokens = world_detail::tokenize(text);
        if (tokens.empty()) {
            throw ParameterError("encode_text: empty text");
        }
        std::vector<double> acc(dim(), 0.0);
        for (const auto &tok : tokens) {
            const Tensor e = token_embedding(tok);
            for (std::size_t i = 0; i < dim(); ++i) {
                acc[i] += e[i];
            }
        }
        return normalized(Tensor::vector(world_detail::mat_vec(text_projection, acc)));
    }

    friend bool operator==(const World &a, const World &b) {
        return a.spec == b.spec && a.basis == b.basis && a.prototypes == b.prototypes &&
               a.image_projection == b.image_projection && a.text_projection == b.text_projection &&
               a.positional == b.positional && a.category_token_embeddings == b.category_token_embeddings &&
               a.category_names == b.category_names && a.planted_pairs == b.planted_pairs &&
               a.base_categories == b.base_categories && a.novel_categories == b.novel_categories &&
               a.samples == b.samples;
    }
};

/**
 * Builds a world deterministically from `spec.seed`.
 *
 * Planted pairs are (2i, 2i+1); the odd member is rotated toward the even one.
 * The first round(base_fraction * K) categories form the base split.
 * Patch j carries the prototype coordinates i with i mod N == j plus a
 * positional offset, so (cls + sum of patches) / 2 reproduces the CLS token.
 */
inline World generate_world(const WorldSpec &spec) {
    validate(spec);
    using namespace world_detail;
    World w;
    w.spec = spec;
    const std::size_t k = spec.num_categories, d = spec.feature_dim, n = spec.patch_count();
    std::mt19937_64 rng(spec.seed);

    w.basis = random_orthonormal_rows(k, d, rng);
    w.prototypes = w.basis;
    for (std::size_t p = 0; p < spec.num_confusable_pairs; ++p) {
        const auto a = static_cast<std::uint32_t>(2 * p);
        const auto b = static_cast<std::uint32_t>(2 * p + 1);
        w.planted_pairs.push_back({a, b});
        const double c = std::cos(spec.pair_angle), s = std::sin(spec.pair_angle);
        for (std::size_t i = 0; i < d; ++i) {
            w.prototypes.at(b, i) = c * w.basis.at(a, i) + s * w.basis.at(b, i);
        }
    }
    w.image_projection = random_orthonormal_rows(d, d, rng);
    w.text_projection = random_orthonormal_rows(d, d, rng);

    std::normal_distribution<double> normal(0.0, 1.0);
    w.positional = Tensor({n, d});
    for (auto &x : w.positional.data()) {
        x = kPositionalScale * normal(rng);
    }
    for (std::size_t i = 0; i < d; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += w.positional.at(j, i);
        }
        mean /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
            w.positional.at(j, i) -= mean;
        }
    }

    for (std::size_t c = 0; c < k; ++c) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "category_%02zu", c);
        w.category_names.emplace_back(buf);
    }

    // Category name embeddings are solved so that the hand-crafted prompt of
    // category c encodes exactly to the image head of its text anchor.
    w.category_token_embeddings = Tensor({k, d});
    {
        std::vector<double> template_sum(d, 0.0);
        for (const auto &tok : tokenize("a photo of a")) {
            const auto e = hashed_token_embedding(tok, d);
            for (std::size_t i = 0; i < d; ++i) {
                template_sum[i] += e[i];
            }
        }
        Tensor anchors = w.basis;
        for (const auto &pp : w.planted_pairs) {
            for (std::size_t i = 0; i < d; ++i) {
                anchors.at(pp.confused, i) =
                    std::cos(kTextTilt) * w.basis.at(pp.confused, i) + std::sin(kTextTilt) * w.basis.at(pp.attractor, i);
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            std::vector<double> canon(anchors.row(c).begin(), anchors.row(c).end());
            for (auto &x : canon) {
                x = std::tanh(x);
            }
            std::vector<double> target = mat_vec(w.image_projection, canon);
            const double tn = l2_norm(target);
            std::vector<double> scaled(d);
            for (std::size_t i = 0; i < d; ++i) {
                scaled[i] = kTextGain * target[i] / tn;
            }
            // text_projection is orthogonal, its inverse is its transpose.
            for (std::size_t i = 0; i < d; ++i) {
                double v = 0.0;
                for (std::size_t r = 0; r < d; ++r) {
                    v += w.text_projection.at(r, i) * scaled[r];
                }
                w.category_token_embeddings.at(c, i) = v - template_sum[i];
            }
        }
    }

    const std::size_t n_base = spec.num_base();
    for (std::uint32_t c = 0; c < k; ++c) {
        (c < n_base ? w.base_categories : w.novel_categories).push_back(c);
    }

    const double sigma = spec.within_class_noise / std::sqrt(static_cast<double>(d));
    const std::size_t n_train = spec.train_per_category();
    w.samples.reserve(k * spec.samples_per_category);
    for (std::uint32_t c = 0; c < k; ++c) {
        for (std::size_t s = 0; s < spec.samples_per_category; ++s) {
            Sample smp;
            smp.id = w.samples.size();
            smp.label = c;
            smp.train = s < n_train;
            smp.tokens = Tensor({n + 1, d});
            auto cls = smp.tokens.row(0);
            for (std::size_t i = 0; i < d; ++i) {
                cls[i] = w.prototypes.at(c, i) + sigma * normal(rng);
            }
            for (std::size_t j = 0; j < n; ++j) {
                auto patch = smp.tokens.row(j + 1);
                for (std::size_t i = 0; i < d; ++i) {
                    patch[i] = (i % n == j ? cls[i] : 0.0) + w.positional.at(j, i);
                }
            }
            w.samples.push_back(std::move(smp));
        }
    }
    w.finalize();
    return w;
}

inline ImageEncoding encode_image(const World &world, const Sample &sample) {
    return {sample.tokens, world.image_head(sample.tokens.row(0))};
}

inline Tensor encode_text(const World &world, const std::string &text) { return world.encode_text_impl(text); }

/// Temperature-scaled softmax probabilities of a unit feature against the category text features.
/// Categories outside `allowed` (when given) get probability zero.
inline Tensor classify_feature(const World &world, std::span<const double> feature, double tau,
                               const std::vector<std::uint32_t> *allowed = nullptr) {
    if (!(tau > 0.0)) {
        throw ParameterError("classify: temperature must be positive");
    }
    const std::size_t k = world.num_categories();
    const double fn = l2_norm(feature);
    if (fn == 0.0) {
        throw DegenerateInputError("classify: zero feature");
    }
    std::vector<std::uint32_t> all;
    if (!allowed) {
        for (std::uint32_t c = 0; c < k; ++c) {
            all.push_back(c);
        }
        allowed = &all;
    }
    std::vector<double> logits(allowed->size());
    for (std::size_t i = 0; i < allowed->size(); ++i) {
        logits[i] = dot(feature, world.category_text_features.row((*allowed)[i])) / fn;
    }
    const Tensor p = softmax(Tensor::vector(std::move(logits)), tau);
    Tensor out({k}, 0.0);
    for (std::size_t i = 0; i < allowed->size(); ++i) {
        out[(*allowed)[i]] = p[i];
    }
    return out;
}

inline Tensor baseline_classify(const World &world, const Sample &sample, double tau,
                                const std::vector<std::uint32_t> *allowed = nullptr) {
    return classify_feature(world, encode_image(world, sample).feature.data(), tau, allowed);
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_world(const World &w, const std::filesystem::path &path) {
    using namespace world_detail;
    io::Writer out;
    out.magic("CAPTWRLD");
    out.u32(kFormatVersion);
    const auto &s = w.spec;
    for (std::uint64_t v : {std::uint64_t(s.num_categories), std::uint64_t(s.num_confusable_pairs),
                            std::uint64_t(s.samples_per_category), std::uint64_t(s.feature_dim),
                            std::uint64_t(s.grid_rows), std::uint64_t(s.grid_cols), s.seed}) {
        out.u64(v);
    }
    for (double v : {s.pair_angle, s.within_class_noise, s.base_fraction, s.train_fraction}) {
        out.f64(v);
    }
    for (const Tensor *t : {&w.basis, &w.prototypes, &w.image_projection, &w.text_projection, &w.positional,
                            &w.category_token_embeddings}) {
        out.tensor(*t);
    }
    out.u64(w.category_names.size());
    for (const auto &nm : w.category_names) {
        out.str(nm);
    }
    out.u64(w.planted_pairs.size());
    for (const auto &p : w.planted_pairs) {
        out.u32(p.attractor);
        out.u32(p.confused);
    }
    for (const auto *list : {&w.base_categories, &w.novel_categories}) {
        out.u64(list->size());
        for (auto c : *list) {
            out.u32(c);
        }
    }
    out.u64(w.samples.size());
    for (const auto &smp : w.samples) {
        out.u64(smp.id);
        out.u32(smp.label);
        out.u8(smp.train ? 1 : 0);
        out.tensor(smp.tokens);
    }
    out.save(path);

    nlohmann::json side = {{"format", "CAPTWRLD"}, {"version", kFormatVersion}, {"spec", w.spec}};
    std::ofstream js(path.string() + ".json");
    if (!js) {
        throw IoError("cannot write sidecar '" + path.string() + ".json'");
    }
    js << side.dump(2) << '\n';
}

inline World load_world(const std::filesystem::path &path) {
    using namespace world_detail;
    io::Reader in = io::Reader::from_file(path);
    in.expect_magic("CAPTWRLD");
    const std::size_t vat = in.offset();
    if (const auto v = in.u32(); v != kFormatVersion) {
        throw FormatError("unsupported world version " + std::to_string(v), vat);
    }
    World w;
    auto &s = w.spec;
    const std::size_t spec_at = in.offset();
    s.num_categories = in.u64();
    s.num_confusable_pairs = in.u64();
    s.samples_per_category = in.u64();
    s.feature_dim = in.u64();
    s.grid_rows = in.u64();
    s.grid_cols = in.u64();
    s.seed = in.u64();
    s.pair_angle = in.f64();
    s.within_class_noise = in.f64();
    s.base_fraction = in.f64();
    s.train_fraction = in.f64();
    try {
        validate(s);
        if (s.num_categories > 4096 || s.feature_dim > 4096 || s.patch_count() > 4096) {
            throw ConfigError("dimensions out of supported range");
        }
    } catch (const ConfigError &e) {
        throw FormatError(std::string("invalid embedded spec: ") + e.what(), spec_at);
    }
    const std::size_t k = s.num_categories, d = s.feature_dim, n = s.patch_count();
    auto read_tensor = [&](Shape expect, const char *what) {
        const std::size_t at = in.offset();
        Tensor t = in.tensor();
        if (t.shape() != expect) {
            throw FormatError(std::string("unexpected shape for ") + what, at);
        }
        return t;
    };
    w.basis = read_tensor({k, d}, "basis");
    w.prototypes = read_tensor({k, d}, "prototypes");
    w.image_projection = read_tensor({d, d}, "image projection");
    w.text_projection = read_tensor({d, d}, "text projection");
    w.positional = read_tensor({n, d}, "positional offsets");
    w.category_token_embeddings = read_tensor({k, d}, "category embeddings");
    {
        const std::size_t at = in.offset();
        if (in.count(k, "category name") != k) {
            throw FormatError("category name table size mismatch", at);
        }
        for (std::size_t c = 0; c < k; ++c) {
            w.category_names.push_back(in.str());
        }
    }
    const std::size_t np = in.count(k / 2, "planted pair");
    for (std::size_t p = 0; p < np; ++p) {
        const std::size_t at = in.offset();
        PlantedPair pp{in.u32(), in.u32()};
        if (pp.attractor >= k || pp.confused >= k) {
            throw FormatError("planted pair category out of range", at);
        }
        w.planted_pairs.push_back(pp);
    }
    for (auto *list : {&w.base_categories, &w.novel_categories}) {
        const std::size_t cnt = in.count(k, "category list");
        for (std::size_t i = 0; i < cnt; ++i) {
            const std::size_t at = in.offset();
            const auto c = in.u32();
            if (c >= k) {
                throw FormatError("category index out of range", at);
            }
            list->push_back(c);
        }
    }
    const std::size_t ns = in.count(k * s.samples_per_category, "sample");
    w.samples.reserve(ns);
    for (std::size_t i = 0; i < ns; ++i) {
        const std::size_t at = in.offset();
        Sample smp;
        smp.id = in.u64();
        smp.label = in.u32();
        const auto tr = in.u8();
        if (smp.id != i || smp.label >= k || tr > 1) {
            throw FormatError("corrupt sample header", at);
        }
        smp.train = tr == 1;
        smp.tokens = read_tensor({n + 1, d}, "sample tokens");
        w.samples.push_back(std::move(smp));
    }
    in.expect_end();
    w.finalize();
    return w;
}

}  // namespace capt

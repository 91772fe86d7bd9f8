#pragma once

// Semantic Confusion Miner: pseudo-GT, bank-weighted confusion score,
// confusion-pair selection and commonality/difference prompt embeddings.

#include "capt/confusion_bank.hpp"
#include "capt/error.hpp"
#include "capt/numerics.hpp"
#include "capt/tensor.hpp"
#include "capt/world.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace capt {

struct ScoredCategory {
    std::uint32_t category;
    double score;

    friend bool operator==(const ScoredCategory &, const ScoredCategory &) = default;
};

enum class PromptKind { commonality, difference };
enum class PromptSource { generated, external };

struct PromptEmbedding {
    PromptKind kind = PromptKind::commonality;
    PromptSource source = PromptSource::generated;
    Tensor vector;  // unit norm
    std::uint32_t pseudo_gt = 0;
    std::uint32_t category = 0;
};

struct ConfusionPairSet {
    std::uint64_t sample_id = 0;
    std::uint32_t pseudo_gt = 0;
    std::vector<ScoredCategory> pairs;  // non-increasing score, pseudo-GT excluded
    std::vector<PromptEmbedding> commonality;  // one per pair, when populated
    std::vector<PromptEmbedding> difference;
};

/// Highest-confidence category; ties go to the lower index.
inline std::uint32_t pseudo_gt(const Tensor &confidences) {
    return static_cast<std::uint32_t>(argmax(confidences.data()));
}

/**
 * S_i = (1 + n_i / sum_j n_j) * C_i.
 *
 * An entirely empty count vector gives weight 1 everywhere, so S = C.
 */
inline Tensor confusion_score(const Tensor &confidences, const Tensor &counts) {
    if (confidences.size() != counts.size()) {
        throw ShapeError("confusion_score: " + shape_string(confidences.shape()) + " confidences vs " +
                         shape_string(counts.shape()) + " counts");
    }
    double total = 0.0;
    for (double n : counts.data()) {
        if (n < 0.0 || !std::isfinite(n)) {
            throw InputError("confusion_score: counts must be finite and non-negative");
        }
        total += n;
    }
    Tensor s = confidences;
    if (total == 0.0) {
        return s;
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] *= 1.0 + counts[i] / total;
    }
    return s;
}

/**
 * Top-`c` categories by score, excluding the pseudo-GT. When `eligible` is
 * given only categories flagged true are considered. Returns fewer than `c`
 * entries when not enough categories remain.
 */
inline std::vector<ScoredCategory> select_pairs(const Tensor &scores, std::uint32_t pseudo, std::size_t c,
                                                const std::vector<bool> *eligible = nullptr) {
    if (c < 1) {
        throw ParameterError("select_pairs: c must be at least 1");
    }
    std::vector<double> masked(scores.data().begin(), scores.data().end());
    std::size_t available = 0;
    for (std::size_t i = 0; i < masked.size(); ++i) {
        const bool ok = i != pseudo && (!eligible || (*eligible)[i]);
        if (ok) {
            ++available;
        } else {
            masked[i] = -std::numeric_limits<double>::infinity();
        }
    }
    std::vector<ScoredCategory> out;
    if (available == 0) {
        return out;
    }
    for (const auto &iv : top_k(std::span<const double>(masked), std::min(c, available))) {
        out.push_back({static_cast<std::uint32_t>(iv.index), iv.value});
    }
    return out;
}

/// Externally supplied prompt embeddings keyed by (category a, category b) names.
class ExternalPrompts {
  public:
    struct Entry {
        Tensor commonality;
        Tensor difference;
    };

    void add(const std::string &a, const std::string &b, Tensor commonality, Tensor difference) {
        entries_[{a, b}] = Entry{normalized(commonality), normalized(difference)};
    }

    [[nodiscard]] const Entry *find(const std::string &a, const std::string &b) const {
        auto it = entries_.find({a, b});
        return it == entries_.end() ? nullptr : &it->second;
    }

    [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }

    /// { "pairs": [ {"a": str, "b": str, "commonality": [f64...], "difference": [f64...]} ] }
    static ExternalPrompts from_json(const nlohmann::json &j, std::size_t dim) {
        ExternalPrompts ep;
        if (!j.contains("pairs") || !j["pairs"].is_array()) {
            throw InputError("external prompts: missing \"pairs\" array");
        }
        for (const auto &p : j["pairs"]) {
            auto vec = [&](const char *key) {
                auto v = p.at(key).get<std::vector<double>>();
                if (v.size() != dim) {
                    throw InputError(std::string("external prompts: \"") + key + "\" must have " +
                                     std::to_string(dim) + " entries");
                }
                return Tensor::vector(std::move(v));
            };
            ep.add(p.at("a").get<std::string>(), p.at("b").get<std::string>(), vec("commonality"), vec("difference"));
        }
        return ep;
    }

    static ExternalPrompts load(const std::filesystem::path &path, std::size_t dim) {
        std::ifstream in(path);
        if (!in) {
            throw IoError("cannot open external prompt file '" + path.string() + "'");
        }
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception &e) {
            throw InputError("external prompt file '" + path.string() + "': " + e.what());
        }
        return from_json(j, dim);
    }

  private:
    std::map<std::pair<std::string, std::string>, Entry> entries_;
};

inline std::string commonality_template(const std::string &a, const std::string &b) {
    return "common traits of " + a + " and " + b;
}

inline std::string difference_template(const std::string &a, const std::string &b) {
    return "what distinguishes " + a + " from " + b;
}

/**
 * Commonality and difference prompt embeddings for (pseudo_gt, category).
 * External embeddings take precedence; otherwise the templates are encoded
 * with the frozen text encoder.
 */
inline std::pair<PromptEmbedding, PromptEmbedding> prompt_embeddings(const World &world, std::uint32_t pseudo,
                                                                     std::uint32_t category,
                                                                     const ExternalPrompts *external = nullptr) {
    if (pseudo >= world.num_categories() || category >= world.num_categories()) {
        throw InputError("prompt_embeddings: category out of range");
    }
    const std::string &a = world.category_names[pseudo];
    const std::string &b = world.category_names[category];
    PromptEmbedding common{PromptKind::commonality, PromptSource::generated, {}, pseudo, category};
    PromptEmbedding diff{PromptKind::difference, PromptSource::generated, {}, pseudo, category};
    if (const auto *e = external ? external->find(a, b) : nullptr) {
        common.source = diff.source = PromptSource::external;
        common.vector = e->commonality;
        diff.vector = e->difference;
    } else {
        common.vector = encode_text(world, commonality_template(a, b));
        diff.vector = encode_text(world, difference_template(a, b));
    }
    return {std::move(common), std::move(diff)};
}

struct SemanticOptions {
    std::size_t pairs = 5;
    bool use_bank_counts = true;  // false: pairs by raw confidence
    bool use_real_gt = false;     // key the bank by the annotated label instead of the pseudo-GT
};

/// Pseudo-GT, confusion score and pair selection for one sample.
inline ConfusionPairSet mine_pairs(const Sample &sample, const Tensor &confidences, const ConfusionBank &bank,
                                   const SemanticOptions &opt, const std::vector<bool> *eligible = nullptr) {
    ConfusionPairSet set;
    set.sample_id = sample.id;
    set.pseudo_gt = opt.use_real_gt ? sample.label : pseudo_gt(confidences);
    const Tensor scores =
        opt.use_bank_counts ? confusion_score(confidences, bank.counts(set.pseudo_gt)) : confidences;
    set.pairs = select_pairs(scores, set.pseudo_gt, opt.pairs, eligible);
    return set;
}

}  // namespace capt

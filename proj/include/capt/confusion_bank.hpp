#pragma once

// Confusion Bank: misclassified training samples indexed by the category the
// model predicted (pseudo-GT) and the category the sample really belongs to.

#include "capt/binary_io.hpp"
#include "capt/error.hpp"
#include "capt/numerics.hpp"
#include "capt/tensor.hpp"
#include "capt/world.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace capt {

struct ConfusionRecord {
    std::uint64_t sample_id = 0;        // also the reference to the sample's token sequence
    std::uint32_t pseudo_gt = 0;        // predicted category; the record is filed under it
    std::uint32_t confused_category = 0;
    std::uint32_t true_category = 0;
    Tensor feature;                     // cached f_I, unit norm

    friend bool operator==(const ConfusionRecord &, const ConfusionRecord &) = default;
};

struct Provenance {
    std::string builder = "frozen-baseline";
    std::uint64_t seed = 0;
    std::int64_t timestamp = 0;
    double temperature = 0.07;

    friend bool operator==(const Provenance &, const Provenance &) = default;
};

class ConfusionBank {
  public:
    using Row = std::map<std::uint32_t, std::vector<ConfusionRecord>>;

    ConfusionBank() = default;
    ConfusionBank(std::vector<std::string> category_names, Provenance provenance)
        : names_(std::move(category_names)), provenance_(std::move(provenance)) {}

    /// Files `r` under (r.pseudo_gt, r.confused_category). Rejected once frozen.
    void insert(ConfusionRecord r) {
        if (frozen_) {
            throw ContractError("confusion bank is frozen");
        }
        if (r.pseudo_gt >= num_categories() || r.confused_category >= num_categories() ||
            r.true_category >= num_categories()) {
            throw InputError("confusion record category out of range");
        }
        if (r.pseudo_gt == r.confused_category) {
            throw InputError("confusion record must be filed under two distinct categories");
        }
        if (std::abs(l2_norm(r.feature.data()) - 1.0) > 1e-9) {
            throw InputError("confusion record feature must be unit norm");
        }
        table_[r.pseudo_gt][r.confused_category].push_back(std::move(r));
    }

    void freeze() noexcept { frozen_ = true; }
    [[nodiscard]] bool frozen() const noexcept { return frozen_; }

    [[nodiscard]] std::size_t num_categories() const noexcept { return names_.size(); }
    [[nodiscard]] const std::vector<std::string> &category_names() const noexcept { return names_; }
    [[nodiscard]] const Provenance &provenance() const noexcept { return provenance_; }
    [[nodiscard]] const std::map<std::uint32_t, Row> &table() const noexcept { return table_; }

    /// n_i for every category i under `pseudo_gt`; zeros for unknown keys.
    [[nodiscard]] Tensor counts(std::uint32_t pseudo_gt) const {
        Tensor n({std::max<std::size_t>(num_categories(), 1)}, 0.0);
        if (auto it = table_.find(pseudo_gt); it != table_.end()) {
            for (const auto &[cat, recs] : it->second) {
                n[cat] = static_cast<double>(recs.size());
            }
        }
        return n;
    }

    [[nodiscard]] std::span<const ConfusionRecord> retrieve(std::uint32_t pseudo_gt, std::uint32_t category) const {
        if (auto it = table_.find(pseudo_gt); it != table_.end()) {
            if (auto jt = it->second.find(category); jt != it->second.end()) {
                return jt->second;
            }
        }
        return {};
    }

    [[nodiscard]] std::size_t size() const {
        std::size_t n = 0;
        for (const auto &[pg, row] : table_) {
            for (const auto &[cat, recs] : row) {
                n += recs.size();
            }
        }
        return n;
    }

    [[nodiscard]] bool empty() const { return size() == 0; }

    /// All records in table order (pseudo-GT, category, insertion).
    [[nodiscard]] std::vector<const ConfusionRecord *> records() const {
        std::vector<const ConfusionRecord *> out;
        for (const auto &[pg, row] : table_) {
            for (const auto &[cat, recs] : row) {
                for (const auto &r : recs) {
                    out.push_back(&r);
                }
            }
        }
        return out;
    }

    /// Count matrix M[true][predicted] over stored records.
    [[nodiscard]] std::vector<std::vector<std::uint64_t>> misclassification_matrix() const {
        std::vector<std::vector<std::uint64_t>> m(num_categories(), std::vector<std::uint64_t>(num_categories(), 0));
        for (const auto *r : records()) {
            ++m[r->true_category][r->pseudo_gt];
        }
        return m;
    }

    [[nodiscard]] std::uint64_t checksum() const {
        std::uint64_t h = io::fnv1a(nullptr, 0);
        for (const auto *r : records()) {
            const std::uint64_t head[4] = {r->sample_id, r->pseudo_gt, r->confused_category, r->true_category};
            h = io::fnv1a(head, sizeof head, h);
            h = io::checksum(r->feature, h);
        }
        return h;
    }

    friend bool operator==(const ConfusionBank &a, const ConfusionBank &b) {
        return a.names_ == b.names_ && a.provenance_ == b.provenance_ && a.table_ == b.table_;
    }

  private:
    std::vector<std::string> names_;
    Provenance provenance_;
    std::map<std::uint32_t, Row> table_;
    bool frozen_ = false;
};

/// Returns the full-length confidence distribution of a sample.
using Classifier = std::function<Tensor(const Sample &)>;

/// Provenance timestamp: SOURCE_DATE_EPOCH when set, else 0, so banks are reproducible.
inline std::int64_t reproducible_timestamp() {
    if (const char *s = std::getenv("SOURCE_DATE_EPOCH")) {
        return std::strtoll(s, nullptr, 10);
    }
    return 0;
}

/**
 * Runs `classifier` over `sample_ids` and files every misclassified sample:
 * a sample of true category T predicted as P goes under pseudo-GT P, keyed by T.
 * Correct predictions are not stored. The returned bank is frozen.
 */
inline ConfusionBank build_bank(const World &world, const Classifier &classifier,
                                const std::vector<std::uint64_t> &sample_ids, Provenance provenance) {
    if (sample_ids.empty()) {
        throw ConfigError("build_bank: empty training set");
    }
    ConfusionBank bank(world.category_names, std::move(provenance));
    for (auto id : sample_ids) {
        const Sample &s = world.sample(id);
        const Tensor p = classifier(s);
        const auto pred = static_cast<std::uint32_t>(argmax(p.data()));
        if (pred == s.label) {
            continue;
        }
        bank.insert({s.id, pred, s.label, s.label, encode_image(world, s).feature});
    }
    bank.freeze();
    return bank;
}

/// Bank from the frozen baseline over the base-split training samples.
inline ConfusionBank build_baseline_bank(const World &world, double tau) {
    const auto &base = world.base_categories;
    Classifier clf = [&](const Sample &s) { return baseline_classify(world, s, tau, &base); };
    Provenance prov{"frozen-baseline", world.spec.seed, reproducible_timestamp(), tau};
    return build_bank(world, clf, world.sample_ids(true, true), prov);
}

// ---------------------------------------------------------------------------
// Persistence

namespace bank_detail {
inline constexpr std::uint32_t kFormatVersion = 1;
}

inline void save_bank(const ConfusionBank &bank, const std::filesystem::path &path) {
    io::Writer out;
    out.magic("CAPTBANK");
    out.u32(bank_detail::kFormatVersion);
    const auto &p = bank.provenance();
    out.str(p.builder);
    out.u64(p.seed);
    out.i64(p.timestamp);
    out.f64(p.temperature);
    out.u64(bank.num_categories());
    for (const auto &n : bank.category_names()) {
        out.str(n);
    }
    const auto recs = bank.records();
    out.u64(recs.size());
    for (const auto *r : recs) {
        out.u64(r->sample_id);
        out.u32(r->pseudo_gt);
        out.u32(r->confused_category);
        out.u32(r->true_category);
        out.tensor(r->feature);
    }
    out.save(path);
}

inline ConfusionBank load_bank(const std::filesystem::path &path) {
    io::Reader in = io::Reader::from_file(path);
    in.expect_magic("CAPTBANK");
    const std::size_t vat = in.offset();
    if (const auto v = in.u32(); v != bank_detail::kFormatVersion) {
        throw FormatError("unsupported bank version " + std::to_string(v), vat);
    }
    Provenance p;
    p.builder = in.str();
    p.seed = in.u64();
    p.timestamp = in.i64();
    p.temperature = in.f64();
    const std::size_t k = in.count(1u << 20, "category");
    std::vector<std::string> names;
    for (std::size_t i = 0; i < k; ++i) {
        names.push_back(in.str());
    }
    ConfusionBank bank(std::move(names), p);
    const std::size_t n = in.count(in.remaining(), "record");
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t at = in.offset();
        ConfusionRecord r;
        r.sample_id = in.u64();
        r.pseudo_gt = in.u32();
        r.confused_category = in.u32();
        r.true_category = in.u32();
        r.feature = in.tensor();
        try {
            bank.insert(std::move(r));
        } catch (const InputError &e) {
            throw FormatError(std::string("invalid record: ") + e.what(), at);
        }
    }
    in.expect_end();
    bank.freeze();
    return bank;
}

inline nlohmann::json bank_to_json(const ConfusionBank &bank) {
    nlohmann::json j;
    const auto &p = bank.provenance();
    j["provenance"] = {{"builder", p.builder}, {"seed", p.seed}, {"timestamp", p.timestamp}, {"temperature", p.temperature}};
    j["categories"] = bank.category_names();
    j["total_records"] = bank.size();
    nlohmann::json entries = nlohmann::json::array();
    for (const auto &[pg, row] : bank.table()) {
        for (const auto &[cat, recs] : row) {
            nlohmann::json ids = nlohmann::json::array();
            for (const auto &r : recs) {
                ids.push_back(r.sample_id);
            }
            entries.push_back({{"pseudo_gt", bank.category_names()[pg]},
                               {"confused_category", bank.category_names()[cat]},
                               {"count", recs.size()},
                               {"sample_ids", ids}});
        }
    }
    j["entries"] = entries;
    return j;
}

}  // namespace capt

#include "capt/sample_miner.hpp"
#include "capt/trainer.hpp"

#include <catch_amalgamated.hpp>

#include <random>

using namespace capt;
using Catch::Approx;

namespace {

WorldSpec small_spec(std::uint64_t seed = 0) {
    WorldSpec s;
    s.num_categories = 8;
    s.num_confusable_pairs = 2;
    s.feature_dim = 8;
    s.grid_rows = 2;
    s.grid_cols = 2;
    s.samples_per_category = 6;
    s.seed = seed;
    return s;
}

const World &world() {
    static const World w = generate_world(WorldSpec{});
    return w;
}

Tensor unit(std::size_t d, std::mt19937_64 &rng) {
    std::normal_distribution<double> n;
    Tensor t({d});
    for (auto &v : t.data()) {
        v = n(rng);
    }
    return normalized(t);
}

ConfusionPairSet pairs_of(std::uint32_t pg, std::initializer_list<std::uint32_t> cats) {
    ConfusionPairSet s;
    s.pseudo_gt = pg;
    for (auto c : cats) {
        s.pairs.push_back({c, 0.0});
    }
    return s;
}

}  // namespace

TEST_CASE("dynamic_alpha", "[sample]") {
    CHECK(dynamic_alpha(0.0) == 0.0);
    CHECK(dynamic_alpha(1.0, 5.0, 0.5) == 5.0);
    CHECK(dynamic_alpha(0.25, 5.0, 0.5) == Approx(2.5).margin(1e-15));
    CHECK(dynamic_alpha(-0.4) == 0.0);
    CHECK_THROWS_AS(dynamic_alpha(0.5, 1.0, 0.5), ConfigError);
    CHECK_THROWS_AS(dynamic_alpha(0.5, 5.0, 0.0), ConfigError);
    for (double g : {0.25, 0.5, 1.0, 2.0}) {
        double prev = -1.0;
        for (int i = -100; i <= 100; ++i) {
            const double a = dynamic_alpha(i / 100.0, 5.0, g);
            REQUIRE(a >= prev);
            prev = a;
        }
    }
}

TEST_CASE("diff-manner adapter forward", "[sample][adapter]") {
    const World &w = world();
    AdapterConfig cfg;
    cfg.kernel_scale = 0.1;
    AdapterParams p = init_adapter(w.dim(), 4, 4, cfg, 3);
    const Tensor &tokens = w.sample(5).tokens;

    const Tensor out = diff_manner_forward(tokens, 0.0, p);
    CHECK(out.shape() == tokens.shape());
    for (std::size_t r = 1; r < tokens.rows(); ++r) {
        for (std::size_t c = 0; c < tokens.cols(); ++c) {
            REQUIRE(out.at(r, c) == tokens.at(r, c));
        }
    }
    const Tensor moved = diff_manner_forward(tokens, 2.0, p);
    CHECK(moved.shape() == tokens.shape());
    CHECK_FALSE(moved == out);
    for (std::size_t c = 0; c < tokens.cols(); ++c) {
        CHECK(moved.at(0, c) == out.at(0, c));  // the CLS row never sees the conv residual
    }

    AdapterParams wrong = init_adapter(w.dim(), 3, 4, cfg, 3);
    CHECK_THROWS_AS(diff_manner_forward(tokens, 1.0, wrong), ConfigError);
    cfg.kernel = 2;
    CHECK_THROWS_AS(init_adapter(w.dim(), 4, 4, cfg, 3), ConfigError);
    cfg.kernel = 3;
    cfg.heads = 5;
    CHECK_THROWS_AS(init_adapter(w.dim(), 4, 4, cfg, 3), ConfigError);

    cfg.heads = 4;
    cfg.query = QueryMode::cls_only;
    AdapterParams cls = init_adapter(w.dim(), 4, 4, cfg, 3);
    CHECK(diff_manner_forward(tokens, 1.0, cls).shape() == tokens.shape());
}

TEST_CASE("adapter gradients under InfoNCE match finite differences", "[sample][adapter][fd]") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const World w = generate_world(small_spec(seed));
        for (QueryMode q : {QueryMode::full_sequence, QueryMode::cls_only}) {
            AdapterConfig cfg;
            cfg.heads = 2;
            cfg.query = q;
            cfg.out_scale = 0.5;
            cfg.kernel_scale = 0.3;
            AdapterParams p = init_adapter(w.dim(), 2, 2, cfg, seed);
            auto f = [&](GradRecord &rec) {
                AdapterVars v(rec, p);
                std::vector<Var> feats;
                std::vector<Var> texts;
                for (std::uint64_t id : {std::uint64_t{1}, std::uint64_t{13}, std::uint64_t{30}}) {
                    feats.push_back(adapted_feature(w, rec, w.sample(id).tokens, 1.5, v));
                    texts.push_back(rec.constant(w.category_text_features.row_tensor(w.sample(id).label)));
                }
                return loss_confuse(concat_rows(feats), concat_rows(texts), 0.07);
            };
            const auto rep = finite_difference_check(f, p.parameters(), 1e-3, 1e-4);
            INFO("seed " << seed << " max rel error " << rep.max_rel_error);
            CHECK(rep.passed());
        }
    }
}

TEST_CASE("frozen adapter receives no gradient", "[sample][adapter]") {
    const World w = generate_world(small_spec());
    AdapterConfig cfg;
    cfg.heads = 2;
    AdapterParams p = init_adapter(w.dim(), 2, 2, cfg, 1);
    p.set_frozen(true);
    GradRecord rec;
    AdapterVars v(rec, p);
    Var loss = sum(adapted_feature(w, rec, w.sample(0).tokens, 1.0, v));
    for (const auto &g : rec.backward(loss)) {
        CHECK(g.grad == Tensor(g.param->value.shape(), 0.0));
    }
}

TEST_CASE("representative selection", "[sample][representatives]") {
    std::mt19937_64 rng(4);
    const std::size_t d = 6;

    SECTION("a copy of the instance wins with intensity one") {
        ConfusionBank bank({"a", "b", "c"}, {});
        const Tensor f = unit(d, rng);
        bank.insert({3, 0, 1, 1, unit(d, rng)});
        bank.insert({9, 0, 1, 1, f});
        bank.insert({4, 0, 1, 1, unit(d, rng)});
        const auto reps = representative_samples(f.data(), pairs_of(0, {1}), bank);
        REQUIRE(reps.entries.size() == 1);
        CHECK(reps.entries[0].records[0]->sample_id == 9);
        CHECK(reps.entries[0].intensity == Approx(1.0).margin(1e-12));
        CHECK(reps.entries[0].alpha == Approx(5.0).margin(1e-11));
    }
    SECTION("single candidates, empty categories reported") {
        ConfusionBank bank({"a", "b", "c", "d"}, {});
        bank.insert({1, 0, 1, 1, unit(d, rng)});
        bank.insert({2, 0, 3, 3, unit(d, rng)});
        const auto reps = representative_samples(unit(d, rng).data(), pairs_of(0, {1, 2, 3}), bank);
        REQUIRE(reps.entries.size() == 2);
        CHECK(reps.entries[0].records[0]->sample_id == 1);
        CHECK(reps.entries[1].records[0]->sample_id == 2);
        CHECK(reps.skipped == std::vector<std::uint32_t>{2});
        const auto none = representative_samples(unit(d, rng).data(), pairs_of(1, {0, 2}), bank);
        CHECK(none.empty());
    }
    SECTION("ties go to the lower sample id") {
        ConfusionBank bank({"a", "b"}, {});
        const Tensor f = unit(d, rng);
        bank.insert({8, 0, 1, 1, f});
        bank.insert({2, 0, 1, 1, f});
        CHECK(representative_samples(f.data(), pairs_of(0, {1}), bank).entries[0].records[0]->sample_id == 2);
    }
}

TEST_CASE("selection matches an exhaustive scan on random banks", "[sample][representatives][property]") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 6, d = 5;
        ConfusionBank bank({"a", "b", "c", "d", "e", "f"}, {});
        std::uniform_int_distribution<std::uint32_t> cat(1, k - 1);
        std::uniform_real_distribution<double> stretch(0.1, 10.0);
        const std::size_t n = 1 + rng() % 25;
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = cat(rng);
            bank.insert({i, 0, c, c, unit(d, rng)});
        }
        const Tensor f = unit(d, rng);
        const auto set = pairs_of(0, {1, 2, 3, 4, 5});
        const auto got = representative_samples(f.data(), set, bank);

        std::size_t e = 0;
        for (std::uint32_t c = 1; c < k; ++c) {
            const ConfusionRecord *best = nullptr;
            double best_cos = -2.0;
            for (const auto *r : bank.records()) {
                if (r->confused_category != c) {
                    continue;
                }
                double num = 0.0, nf = 0.0, nr = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    num += f[j] * r->feature[j];
                    nf += f[j] * f[j];
                    nr += r->feature[j] * r->feature[j];
                }
                const double cs = num / std::sqrt(nf * nr);
                if (cs > best_cos || (cs == best_cos && r->sample_id < best->sample_id)) {
                    best_cos = cs;
                    best = r;
                }
            }
            if (!best) {
                continue;
            }
            REQUIRE(e < got.entries.size());
            REQUIRE(got.entries[e].category == c);
            REQUIRE(got.entries[e].records[0]->sample_id == best->sample_id);
            REQUIRE(got.entries[e].intensity == Approx(best_cos).margin(1e-12));
            ++e;
        }
        REQUIRE(e == got.entries.size());

        // positive rescaling of the instance never changes the choice
        Tensor scaled = f;
        const double s = stretch(rng);
        for (auto &v : scaled.data()) {
            v *= s;
        }
        const auto again = representative_samples(scaled.data(), set, bank);
        REQUIRE(again.entries.size() == got.entries.size());
        for (std::size_t i = 0; i < again.entries.size(); ++i) {
            REQUIRE(again.entries[i].records[0] == got.entries[i].records[0]);
        }
    }
}

TEST_CASE("several records per category and random selection", "[sample][representatives]") {
    std::mt19937_64 rng(6);
    ConfusionBank bank({"a", "b"}, {});
    for (std::uint64_t i = 0; i < 5; ++i) {
        bank.insert({i, 0, 1, 1, unit(4, rng)});
    }
    const Tensor f = unit(4, rng);
    RepresentativeOptions opt;
    opt.per_category = 3;
    const auto top = representative_samples(f.data(), pairs_of(0, {1}), bank, opt);
    REQUIRE(top.entries[0].records.size() == 3);
    double prev = 2.0;
    for (const auto *r : top.entries[0].records) {
        const double c = dot(f.data(), r->feature.data());
        CHECK(c <= prev);
        prev = c;
    }
    opt.selection = RepSelection::random;
    CHECK_THROWS_AS(representative_samples(f.data(), pairs_of(0, {1}), bank, opt), UsageError);
    std::mt19937_64 pick_rng(1);
    const auto rnd = representative_samples(f.data(), pairs_of(0, {1}), bank, opt, &pick_rng);
    CHECK(rnd.entries[0].records.size() == 3);
    opt.per_category = 0;
    CHECK_THROWS_AS(representative_samples(f.data(), pairs_of(0, {1}), bank, opt), ConfigError);
}

TEST_CASE("sample confusion feature", "[sample][fusion]") {
    const World &w = world();
    const auto bank = build_baseline_bank(w, 0.07);
    AdapterConfig cfg;
    cfg.kernel_scale = 0.1;
    AdapterParams p = init_adapter(w.dim(), 4, 4, cfg, 2);
    GradRecord rec(false);
    AdapterVars v(rec, p);

    SECTION("an identical representative leaves the single-branch direction") {
        const Sample &s = w.sample(bank.records().front()->sample_id);
        ConfusionBank own({w.category_names}, {});
        own.insert({s.id, 0, 1, 1, encode_image(w, s).feature});
        const auto reps = representative_samples(encode_image(w, s).feature.data(), pairs_of(0, {1}), own);
        REQUIRE(reps.entries[0].intensity == Approx(1.0));
        const auto fused = sample_confusion_feature(w, rec, s.tokens, reps, v);
        const Var single = adapted_feature(w, rec, s.tokens, reps.entries[0].alpha, v);
        CHECK(dot(fused.feature.value().data(), single.value().data()) == Approx(1.0).margin(1e-12));
    }
    SECTION("unit norm and order invariance") {
        // baseline banks hold one confused category per key; spread real samples over four
        ConfusionBank wide(w.category_names, {});
        for (std::uint32_t c = 1; c <= 4; ++c) {
            for (std::size_t j = 0; j < 3; ++j) {
                const Sample &r = w.sample(c * w.spec.samples_per_category + j);
                wide.insert({r.id, 0, c, c, encode_image(w, r).feature});
            }
        }
        std::size_t checked = 0;
        for (auto id : w.sample_ids(true, true)) {
            const Sample &s = w.sample(id);
            auto reps = representative_samples(encode_image(w, s).feature.data(), pairs_of(0, {1, 2, 3, 4}), wide);
            REQUIRE(reps.entries.size() == 4);
            const auto a = sample_confusion_feature(w, rec, s.tokens, reps, v);
            CHECK(l2_norm(a.feature.value().data()) == Approx(1.0).margin(1e-12));
            std::reverse(reps.entries.begin(), reps.entries.end());
            const auto b = sample_confusion_feature(w, rec, s.tokens, reps, v);
            for (std::size_t i = 0; i < w.dim(); ++i) {
                REQUIRE(a.feature.value()[i] == Approx(b.feature.value()[i]).margin(1e-12));
            }
            if (++checked == 10) {
                break;
            }
        }
        CHECK(checked > 0);
    }
    SECTION("empty set is a contract violation") {
        CHECK_THROWS_AS(sample_confusion_feature(w, rec, w.sample(0).tokens, RepresentativeSet{}, v), ContractError);
    }
}

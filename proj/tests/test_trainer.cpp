#include "capt/trainer.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

using namespace capt;
using Catch::Approx;

namespace {

WorldSpec small_spec(std::uint64_t seed = 0) {
    WorldSpec s;
    s.num_categories = 12;
    s.num_confusable_pairs = 3;
    s.feature_dim = 16;
    s.grid_rows = 2;
    s.grid_cols = 2;
    s.samples_per_category = 20;
    s.seed = seed;
    return s;
}

TrainConfig small_config(std::uint64_t seed = 0) {
    TrainConfig c;
    c.seed = seed;
    c.epochs = 8;
    c.hidden = 16;
    c.heads = 2;
    return c;
}

struct Setup {
    World world;
    ConfusionBank bank;
    explicit Setup(std::uint64_t seed = 0) : world(generate_world(small_spec(seed))), bank(build_baseline_bank(world, 0.07)) {}
};

const Setup &shared() {
    static const Setup s;
    return s;
}

std::filesystem::path temp_dir(const std::string &name) {
    auto dir = std::filesystem::temp_directory_path() / "capt_test_trainer" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Symmetric InfoNCE written out with explicit sums.
double oracle_infonce(const Tensor &img, const Tensor &txt, double tau) {
    const std::size_t l = img.rows(), d = img.cols();
    std::vector<double> s(l * l);
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < l; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c)
                acc += img.at(i, c) * txt.at(j, c);
            s[i * l + j] = acc / tau;
        }
    double total = 0.0;
    for (std::size_t i = 0; i < l; ++i) {
        double row = 0.0, col = 0.0;
        for (std::size_t j = 0; j < l; ++j) {
            row += std::exp(s[i * l + j]);
            col += std::exp(s[j * l + i]);
        }
        total += (s[i * l + i] - std::log(row)) + (s[i * l + i] - std::log(col));
    }
    return -total / static_cast<double>(l);
}

}  // namespace

TEST_CASE("loss_ori", "[losses]") {
    CHECK(loss_ori(Tensor({5}, 0.2), 3) == Approx(std::log(5.0)).margin(1e-12));
    CHECK(loss_ori(Tensor::vector({0.0, 1.0}), 1) == 0.0);
    CHECK(loss_ori(Tensor::vector({0.5, 0.5}), 0) == Approx(0.6931).margin(1e-4));
    CHECK(loss_ori(Tensor::vector({1.0, 0.0}), 1) == Approx(-std::log(1e-12)));
    CHECK_THROWS_AS(loss_ori(Tensor::vector({1.0}), 1), InputError);
}

TEST_CASE("loss_confuse", "[losses]") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    auto random = [&](std::size_t l, std::size_t d) {
        Tensor t({l, d});
        for (auto &v : t.data()) {
            v = g(rng);
        }
        return t;
    };
    CHECK(std::abs(loss_confuse(random(1, 4), random(1, 4), 0.07)) < 1e-12);
    for (std::size_t l : {2u, 4u, 5u, 8u}) {
        const Tensor same({l, 3}, 0.5);
        CHECK(loss_confuse(same, same, 0.07) == Approx(2.0 * std::log(static_cast<double>(l))).margin(1e-9));
    }
    const Tensor eye = Tensor::identity(4);
    CHECK(loss_confuse(eye, eye, 0.01) < 1e-30 + 1e-12);
    CHECK_THROWS_AS(loss_confuse(Tensor{}, Tensor{}, 0.07), ContractError);
    CHECK_THROWS_AS(loss_confuse(random(2, 3), random(3, 3), 0.07), ContractError);
    for (int t = 0; t < 200; ++t) {
        const std::size_t l = 1 + static_cast<std::size_t>(t % 7);
        const Tensor a = random(l, 5), b = random(l, 5);
        REQUIRE(loss_confuse(a, b, 0.5) == Approx(oracle_infonce(a, b, 0.5)).margin(1e-10));
    }
}

TEST_CASE("harmonic mean", "[eval]") {
    CHECK(harmonic_mean(80.51, 75.13) == Approx(77.73).margin(0.01));
    CHECK(harmonic_mean(0.4, 0.4) == Approx(0.4).margin(1e-15));
    CHECK(harmonic_mean(0.0, 0.9) == 0.0);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.001, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const double a = u(rng), b = u(rng);
        const double h = harmonic_mean(a, b);
        REQUIRE(h <= std::max(a, b) + 1e-15);
        REQUIRE(h >= std::min(a, b) - 1e-15);
    }
}

TEST_CASE("train config json", "[config]") {
    TrainConfig c;
    c.pairs = 3;
    c.loss_mode = LossMode::confuse_plus_ori;
    c.rep_selection = RepSelection::random;
    const nlohmann::json j = c;
    CHECK(j.get<TrainConfig>() == c);
    CHECK(nlohmann::json::parse(R"({"epochs": 3})").get<TrainConfig>().epochs == 3);
    CHECK(nlohmann::json::parse(R"({"epochs": 3})").get<TrainConfig>().batch_size == 4);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"epoch": 3})").get<TrainConfig>(), ConfigError);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"batch_size": 0})").get<TrainConfig>(), ConfigError);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"top_k": 4})").get<TrainConfig>(), ConfigError);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"loss_mode": "other"})").get<TrainConfig>(), ConfigError);
    CHECK_THROWS_AS(nlohmann::json::parse(R"([1])").get<TrainConfig>(), ConfigError);
}

TEST_CASE("training leaves the encoder and bank untouched and is deterministic", "[train]") {
    const Setup &s = shared();
    const auto a = train(s.world, s.bank, small_config());
    const auto b = train(s.world, s.bank, small_config());
    CHECK(a.report.encoder_checksum_before == a.report.encoder_checksum_after);
    CHECK(a.report.bank_checksum_before == a.report.bank_checksum_after);
    CHECK(to_json(a.report).dump() == to_json(b.report).dump());
    CHECK(a.model == b.model);
    CHECK(a.report.loss_curve.size() == 8);
    CHECK(a.report.loss_curve.back() < a.report.loss_curve.front());
    CHECK(a.report.contributing_samples <= s.world.sample_ids(true, true).size());
    CHECK(a.report.inference_alpha > 0.0);
    CHECK(a.report.hm > a.report.baseline_hm);

    auto other = small_config();
    other.seed = 1;
    const auto c = train(s.world, s.bank, other);
    CHECK_FALSE(c.model.adapter.wq.value == a.model.adapter.wq.value);
    CHECK_FALSE(c.report.loss_curve == a.report.loss_curve);
}

TEST_CASE("derived seeds are distinct across seeds and streams", "[train]") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        for (std::uint64_t st = 1; st <= 7; ++st) {
            seen.insert(derive_seed(seed, st));
        }
    }
    CHECK(seen.size() == 1400);
    CHECK(derive_seed(5, 3) == derive_seed(5, 3));
}

TEST_CASE("report json", "[report]") {
    const Setup &s = shared();
    const auto run = train(s.world, s.bank, small_config());
    const auto back = report_from_json(to_json(run.report));
    CHECK(to_json(back).dump() == to_json(run.report).dump());
    auto j = to_json(run.report);
    j["hm"] = j["hm"].get<double>() + 1e-6;
    CHECK_THROWS_AS(report_from_json(j), InputError);
    auto missing = to_json(run.report);
    missing.erase("loss_curve");
    CHECK_THROWS_AS(report_from_json(missing), InputError);
}

TEST_CASE("correction rate", "[eval]") {
    const Setup &s = shared();
    auto frozen_cfg = small_config();
    frozen_cfg.use_sam = false;
    frozen_cfg.use_mgde = false;
    const Model frozen = init_model(s.world, s.bank, frozen_cfg);

    // with no adapter and no experts the pipeline is the baseline itself
    CHECK(correction_rate(s.world, s.bank, frozen) == 0.0);
    CHECK_FALSE(correction_rate(s.world, ConfusionBank(s.world.category_names, {}), frozen).has_value());

    // half of the records point at samples the baseline already gets right
    ConfusionBank half(s.world.category_names, {});
    std::size_t wrong = 0;
    for (const auto *r : s.bank.records()) {
        half.insert(*r);
        ++wrong;
    }
    std::size_t right = 0;
    for (auto id : s.world.sample_ids(true, true)) {
        const Sample &smp = s.world.sample(id);
        if (right == wrong) {
            break;
        }
        if (predict(s.world, encode_image(s.world, smp).feature.data(), 0.07, s.world.base_categories) == smp.label) {
            const std::uint32_t other = smp.label == 0 ? 1 : 0;
            half.insert({smp.id, other, smp.label, smp.label, encode_image(s.world, smp).feature});
            ++right;
        }
    }
    REQUIRE(right == wrong);
    CHECK(correction_rate(s.world, half, frozen) == Approx(0.5).margin(1e-15));
}

TEST_CASE("evaluation never reads the bank", "[eval]") {
    const Setup &s = shared();
    const auto run = train(s.world, s.bank, small_config());
    const auto a = evaluate(s.world, run.model);
    const auto dir = temp_dir("nobank");
    save_checkpoint(const_cast<Model &>(run.model), dir / "checkpoint.bin");
    const auto b = evaluate(s.world, load_checkpoint(dir / "checkpoint.bin"));
    CHECK(a.base == b.base);
    CHECK(a.novel == b.novel);
    CHECK(evaluate(s.world, run.model, Split::base).novel == std::nullopt);
    CHECK(evaluate(s.world, run.model, Split::novel).base == std::nullopt);

    const World other = generate_world(small_spec(9));
    CHECK_THROWS_AS(evaluate(other, run.model), InputError);
}

TEST_CASE("heatmaps", "[heatmap]") {
    const Setup &s = shared();
    const CountMatrix m = s.bank.misclassification_matrix();
    const std::string csv = heatmap_csv(m, s.world.category_names);
    CHECK(parse_heatmap_csv(csv) == m);
    CHECK(csv.rfind("true\\predicted,category_00,", 0) == 0);
    std::uint64_t total = 0;
    for (std::uint32_t t = 0; t < m.size(); ++t) {
        std::uint64_t row = 0;
        for (auto v : m[t]) {
            row += v;
        }
        std::uint64_t filed = 0;
        for (const auto *r : s.bank.records()) {
            filed += r->true_category == t;
        }
        CHECK(row == filed);
        total += row;
    }
    CHECK(total == s.bank.size());

    const CountMatrix zero(3, std::vector<std::uint64_t>(3, 0));
    const std::string pgm = heatmap_pgm(zero);
    CHECK(pgm.substr(0, 11) == "P5\n3 3\n255\n");
    CHECK(pgm.size() == 11 + 9);
    CHECK(std::all_of(pgm.begin() + 11, pgm.end(), [](char c) { return c == 0; }));
    CHECK(static_cast<unsigned char>(heatmap_pgm({{0, 4}, {2, 0}})[12 + 0]) == 255);
    CHECK_THROWS_AS(heatmap_csv(zero, {"a"}), ShapeError);

    const auto dir = temp_dir("heat");
    heatmap_report(s.bank, dir / "bank");
    CHECK(read_text_file(dir / "bank.csv") == csv);
    CHECK(read_text_file(dir / "bank.pgm") == heatmap_pgm(m));
    CHECK_THROWS_AS(write_text_file(dir / "missing" / "x.csv", "x"), IoError);
}

TEST_CASE("checkpoint persistence", "[checkpoint]") {
    const Setup &s = shared();
    auto run = train(s.world, s.bank, small_config());
    const auto dir = temp_dir("ckpt");
    save_checkpoint(run.model, dir / "c.bin");
    const Model back = load_checkpoint(dir / "c.bin");
    CHECK(back == run.model);
    for (std::uint64_t id = 0; id < s.world.samples.size(); id += 17) {
        REQUIRE(pipeline_feature(s.world, back, s.world.sample(id).tokens) ==
                pipeline_feature(s.world, run.model, s.world.sample(id).tokens));
    }
    const std::string bytes = read_text_file(dir / "c.bin");
    for (std::size_t cut : {std::size_t{5}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
        write_text_file(dir / "t.bin", bytes.substr(0, cut));
        CHECK_THROWS_AS(load_checkpoint(dir / "t.bin"), FormatError);
    }
    std::string magic = bytes;
    magic[3] = '?';
    write_text_file(dir / "m.bin", magic);
    CHECK_THROWS_AS(load_checkpoint(dir / "m.bin"), FormatError);
    write_text_file(dir / "x.bin", bytes + std::string(8, '\0'));
    CHECK_THROWS_AS(load_checkpoint(dir / "x.bin"), FormatError);
}

TEST_CASE("run directory layout", "[run]") {
    const Setup &s = shared();
    auto run = train(s.world, s.bank, small_config());
    const auto dir = temp_dir("run");
    write_run(dir, s.world, run);
    for (const char *f : {"config.json", "report.json", "heatmap_before.csv", "heatmap_before.pgm",
                          "heatmap_after.csv", "heatmap_after.pgm", "loss_curve.csv", "checkpoint.bin"}) {
        CHECK(std::filesystem::exists(dir / f));
    }
    CHECK(read_text_file(dir / "loss_curve.csv").rfind("epoch,loss\n1,", 0) == 0);
    CHECK(parse_heatmap_csv(read_text_file(dir / "heatmap_after.csv")) == run.report.confusion_after);
}

TEST_CASE("ablation switches", "[ablation]") {
    const Setup &s = shared();
    auto c = small_config();
    c.epochs = 2;
    for (int variant = 0; variant < 4; ++variant) {
        TrainConfig v = c;
        v.use_sem = variant != 0;
        v.use_sam = variant != 1;
        v.use_mgde = variant != 2;
        v.loss_mode = variant == 3 ? LossMode::confuse_plus_ori : LossMode::confuse_only;
        auto run = train(s.world, s.bank, v);
        INFO("variant " << variant);
        CHECK(run.report.encoder_checksum_before == run.report.encoder_checksum_after);
        const Model init = init_model(s.world, s.bank, v);
        if (!v.use_sam) {
            CHECK(run.model.adapter == init.adapter);
            CHECK(run.report.inference_alpha == 0.0);
        }
        if (!v.use_mgde) {
            CHECK(run.model.router == init.router);
            CHECK(run.model.experts == init.experts);
        }
    }
    // without MGDE the pipeline feature is the adapted feature itself
    TrainConfig plain = c;
    plain.use_sam = false;
    plain.use_mgde = false;
    const Model m = init_model(s.world, s.bank, plain);
    const Sample &smp = s.world.sample(3);
    CHECK(pipeline_feature(s.world, m, smp.tokens) == encode_image(s.world, smp).feature);
}

TEST_CASE("empty bank falls back to the cross-entropy loss", "[train]") {
    const Setup &s = shared();
    const ConfusionBank empty(s.world.category_names, {});
    auto c = small_config();
    c.epochs = 2;
    const auto run = train(s.world, empty, c);
    REQUIRE(run.report.warnings.size() == 1);
    CHECK_FALSE(run.report.correction_rate.has_value());
    CHECK(run.report.contributing_samples == s.world.sample_ids(true, true).size());
}

TEST_CASE("novel categories never enter training", "[train]") {
    const Setup &s = shared();
    PlanStreams streams(0);
    const auto c = small_config();
    for (auto id : s.world.sample_ids(true, true)) {
        const auto plan = plan_sample(s.world, s.bank, c, s.world.sample(id), streams);
        REQUIRE(s.world.is_base(plan.pseudo_gt));
        for (const auto &e : plan.reps.entries) {
            REQUIRE(s.world.is_base(e.category));
            for (const auto *r : e.records) {
                REQUIRE(s.world.is_base(s.world.sample(r->sample_id).label));
            }
        }
    }
    const auto [common, diff] = prompt_pools(s.world, s.bank, c);
    CHECK(common.rows() == diff.rows());
}

TEST_CASE("noise ablation", "[noise]") {
    const Setup &s = shared();
    auto c = small_config();
    c.epochs = 3;
    const auto runs = noise_ablation(s.world, s.bank, c, {0.0, 0.05});
    REQUIRE(runs.size() == 2);
    CHECK(to_json(runs[0].report).dump() == to_json(train(s.world, s.bank, c).report).dump());
    CHECK(to_json(noise_ablation(s.world, s.bank, c, {0.05})[0].report).dump() == to_json(runs[1].report).dump());
    CHECK_FALSE(to_json(runs[1].report).dump() == to_json(runs[0].report).dump());
    CHECK_THROWS_AS(noise_ablation(s.world, s.bank, c, {1.5}), ConfigError);
    const std::string csv = noise_csv(runs);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("sweeps", "[sweep]") {
    const Setup &s = shared();
    auto c = small_config();
    c.epochs = 2;
    const auto rows = sweep(s.world, s.bank, c, SweepParam::pairs_c, {1, 3, 5, 7});
    REQUIRE(rows.size() == 4);
    for (const auto &r : rows) {
        CHECK(r.report.config.pairs == r.value);
    }
    const std::string csv = sweep_csv(SweepParam::pairs_c, rows);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    const auto reps = sweep(s.world, s.bank, c, SweepParam::reps_per_category, {1});
    CHECK(to_json(reps[0].report).dump() == to_json(train(s.world, s.bank, c).report).dump());
    CHECK(parse_sweep_param("reps_per_category") == SweepParam::reps_per_category);
    CHECK_THROWS_AS(parse_sweep_param("lr"), ConfigError);
    CHECK_THROWS_AS(sweep(s.world, s.bank, c, SweepParam::pairs_c, {}), ConfigError);
}

TEST_CASE("nearest representatives beat random ones", "[train][ablation]") {
    double nearest = 0.0, random = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Setup s(seed);
        auto c = small_config(seed);
        nearest += train(s.world, s.bank, c).report.hm;
        c.rep_selection = RepSelection::random;
        random += train(s.world, s.bank, c).report.hm;
    }
    CHECK(nearest > random);
}

TEST_CASE("full loss gradients match finite differences", "[train][fd]") {
    const Setup &s = shared();
    for (double tau : {1.0, 0.07}) {
        auto c = small_config();
        c.p_mask = 0.5;
        c.temperature = tau;
        Model m = init_model(s.world, s.bank, c);
        std::mt19937_64 krng(1);
        m.adapter.kernel.value = gaussian_tensor(m.adapter.kernel.value.shape(), 0.2, krng);
        PlanStreams streams(3);
        std::vector<SamplePlan> plans;
        for (auto id : s.world.sample_ids(true, true)) {
            auto p = plan_sample(s.world, s.bank, c, s.world.sample(id), streams);
            if (!p.listed.empty()) {
                plans.push_back(std::move(p));
            }
            if (plans.size() == 2) {
                break;
            }
        }
        REQUIRE(plans.size() == 2);
        auto f = [&](GradRecord &rec) {
            ModelVars v(rec, m);
            Var total;
            for (const auto &p : plans) {
                Var l = sample_loss(s.world, rec, m, v, p)->loss;
                total = total.valid() ? add(total, l) : l;
            }
            return scale(total, 0.5);
        };
        INFO("tau " << tau);
        const auto five = finite_difference_check(f, m.trainable(), 1e-3, 1e-4, FdStencil::five_point);
        INFO("five-point max rel error " << five.max_rel_error);
        CHECK(five.passed());
        CHECK(five.scalars_checked > 1000);
        // the three-point error is truncation: it falls ~100x per 10x smaller step
        const auto coarse = finite_difference_check(f, m.trainable(), 1e-3, 1e-2);
        const auto fine = finite_difference_check(f, m.trainable(), 1e-4, 1e-4);
        INFO("three-point " << coarse.max_rel_error << " then " << fine.max_rel_error);
        CHECK(fine.passed());
        CHECK(fine.max_rel_error < coarse.max_rel_error / 50.0);
    }
}

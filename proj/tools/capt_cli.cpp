// capt_cli: world generation, bank building, training, evaluation and ablations.
#include "capt/capt.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace capt;

namespace {

nlohmann::json read_json(const fs::path &path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error &e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

void emit(const std::string &text, const std::string &out) {
    if (out.empty()) {
        std::cout << text;
    } else {
        write_text_file(out, text);
    }
}

TrainConfig load_config(const std::string &path, std::optional<std::uint64_t> seed) {
    TrainConfig c = path.empty() ? TrainConfig{} : read_json(path).get<TrainConfig>();
    if (seed) {
        c.seed = *seed;
    }
    return c;
}

Split parse_split(const std::string &s) {
    if (s == "base") {
        return Split::base;
    }
    if (s == "novel") {
        return Split::novel;
    }
    return Split::both;
}

nlohmann::json accuracy_json(const Accuracy &a) {
    auto opt = [](const std::optional<double> &v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"base_accuracy", opt(a.base)}, {"novel_accuracy", opt(a.novel)}, {"hm", opt(a.hm)}};
}

// Largest off-diagonal cells, ties broken by (true, predicted).
std::vector<std::array<std::uint64_t, 3>> top_cells(const CountMatrix &m, std::size_t n) {
    std::vector<std::array<std::uint64_t, 3>> cells;
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < m[i].size(); ++j)
            if (i != j && m[i][j] > 0) {
                cells.push_back({m[i][j], i, j});
            }
    std::stable_sort(cells.begin(), cells.end(), [](const auto &a, const auto &b) { return a[0] > b[0]; });
    cells.resize(std::min(n, cells.size()));
    return cells;
}

std::string report_text(const Report &r, const std::vector<std::string> &names) {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed;
    os << "seed " << r.seed << "\n";
    os << "               base     novel    HM\n";
    os << "baseline       " << r.baseline_base_accuracy << "   " << r.baseline_novel_accuracy << "   "
       << r.baseline_hm << "\n";
    os << "trained        " << r.base_accuracy << "   " << r.novel_accuracy << "   " << r.hm << "\n";
    os << "correction rate " << (r.correction_rate ? fmt_double(*r.correction_rate) : "n/a") << "\n";
    os << "inference alpha " << r.inference_alpha << "\n";
    if (!r.loss_curve.empty()) {
        os << "loss " << r.loss_curve.front() << " -> " << r.loss_curve.back() << " over " << r.loss_curve.size()
           << " epochs\n";
    }
    auto name = [&](std::uint64_t i) { return i < names.size() ? names[i] : std::to_string(i); };
    for (const auto &[title, m] : {std::pair{"before", &r.confusion_before}, std::pair{"after", &r.confusion_after}}) {
        os << "top confusions " << title << " (true -> predicted: count)\n";
        for (const auto &c : top_cells(*m, 5)) {
            os << "  " << name(c[1]) << " -> " << name(c[2]) << ": " << c[0] << "\n";
        }
    }
    for (const auto &w : r.warnings) {
        os << "warning: " << w << "\n";
    }
    return os.str();
}

struct Inputs {
    World world;
    ConfusionBank bank;
};

// Loads --world/--bank when given; otherwise generates the default world for `seed`.
Inputs inputs_for(const std::string &world_path, const std::string &bank_path, std::uint64_t seed) {
    if (world_path.empty() && !bank_path.empty()) {
        throw UsageError("--bank needs the --world it was built from");
    }
    World w = [&] {
        if (!world_path.empty()) {
            return load_world(world_path);
        }
        WorldSpec s;
        s.seed = seed;
        return generate_world(s);
    }();
    ConfusionBank b = bank_path.empty() ? build_baseline_bank(w, 0.07) : load_bank(bank_path);
    return {std::move(w), std::move(b)};
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"Confusion-aware prompt tuning on a synthetic frozen encoder"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    std::vector<std::uint64_t> seeds;

    // gen-world
    auto *gen = app.add_subcommand("gen-world", "Generate a synthetic world");
    std::string spec_path, world_out;
    gen->add_option("--spec", spec_path, "World spec JSON (defaults apply to missing keys)")->check(CLI::ExistingFile);
    gen->add_option("--out", world_out, "Output world file")->required();
    gen->add_option("--seed", seed, "Overrides the spec seed");

    // build-bank
    auto *bb = app.add_subcommand("build-bank", "Build the confusion bank from the frozen baseline");
    std::string bb_world, bb_out;
    double bb_tau = 0.07;
    bb->add_option("--world", bb_world)->required()->check(CLI::ExistingFile);
    bb->add_option("--out", bb_out)->required();
    bb->add_option("--tau", bb_tau, "Baseline temperature");
    bb->add_option("--seed", seed, "Accepted for uniformity; bank building draws no randomness");

    // bank-json
    auto *bj = app.add_subcommand("bank-json", "Export a bank as JSON");
    std::string bj_bank, bj_out;
    bj->add_option("--bank", bj_bank)->required()->check(CLI::ExistingFile);
    bj->add_option("--out", bj_out, "Output file (stdout if omitted)");
    bj->add_option("--seed", seed, "Accepted for uniformity");

    // train
    auto *tr = app.add_subcommand("train", "Train adapter and experts, write a run directory");
    std::string tr_world, tr_bank, tr_config, tr_out;
    tr->add_option("--world", tr_world)->required()->check(CLI::ExistingFile);
    tr->add_option("--bank", tr_bank)->required()->check(CLI::ExistingFile);
    tr->add_option("--config", tr_config, "Train config JSON")->check(CLI::ExistingFile);
    tr->add_option("--out", tr_out, "Run directory")->required();
    tr->add_option("--seed", seed, "Overrides the config seed");

    // eval
    auto *ev = app.add_subcommand("eval", "Evaluate a trained run on the test split");
    std::string ev_run, ev_world, ev_split = "both";
    ev->add_option("--rundir", ev_run)->required()->check(CLI::ExistingDirectory);
    ev->add_option("--split", ev_split)->check(CLI::IsMember({"base", "novel", "both"}));
    ev->add_option("--world", ev_world, "World file (defaults to the one recorded in the run)")
        ->check(CLI::ExistingFile);
    ev->add_option("--seed", seed, "Accepted for uniformity; evaluation is deterministic");

    // report
    auto *rp = app.add_subcommand("report", "Summarize a run");
    std::string rp_run, rp_out;
    rp->add_option("--rundir", rp_run)->required()->check(CLI::ExistingDirectory);
    rp->add_option("--out", rp_out, "Output file (stdout if omitted)");
    rp->add_option("--seed", seed, "Accepted for uniformity");

    // sweep
    auto *sw = app.add_subcommand("sweep", "Sweep pair count or representatives per category");
    std::string sw_param, sw_world, sw_bank, sw_config, sw_out;
    std::vector<std::size_t> sw_values;
    sw->add_option("--param", sw_param)->required()->check(CLI::IsMember({"pairs_c", "reps_per_category"}));
    sw->add_option("--values", sw_values)->required()->delimiter(',');
    sw->add_option("--world", sw_world, "World file (default world per seed if omitted)")->check(CLI::ExistingFile);
    sw->add_option("--bank", sw_bank, "Bank file (baseline bank if omitted)")->check(CLI::ExistingFile);
    sw->add_option("--config", sw_config)->check(CLI::ExistingFile);
    sw->add_option("--out", sw_out, "CSV output (stdout if omitted)");
    sw->add_option("--seed", seeds, "One or more seeds, comma separated")->delimiter(',');

    // noise
    auto *no = app.add_subcommand("noise", "Noise-injection ablation");
    std::string no_world, no_bank, no_config, no_out;
    std::vector<double> no_levels;
    no->add_option("--levels", no_levels)->required()->delimiter(',');
    no->add_option("--world", no_world, "World file (default world per seed if omitted)")->check(CLI::ExistingFile);
    no->add_option("--bank", no_bank, "Bank file (baseline bank if omitted)")->check(CLI::ExistingFile);
    no->add_option("--config", no_config)->check(CLI::ExistingFile);
    no->add_option("--out", no_out, "CSV output (stdout if omitted)");
    no->add_option("--seed", seeds, "One or more seeds, comma separated")->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            WorldSpec s = spec_path.empty() ? WorldSpec{} : read_json(spec_path).get<WorldSpec>();
            if (seed) {
                s.seed = *seed;
            }
            save_world(generate_world(s), world_out);
        } else if (*bb) {
            const World w = load_world(bb_world);
            save_bank(build_baseline_bank(w, bb_tau), bb_out);
        } else if (*bj) {
            emit(bank_to_json(load_bank(bj_bank)).dump(2) + "\n", bj_out);
        } else if (*tr) {
            const World w = load_world(tr_world);
            const ConfusionBank bank = load_bank(tr_bank);
            auto run = train(w, bank, load_config(tr_config, seed));
            write_run(tr_out, w, run);
            const nlohmann::json inputs = {{"world", fs::absolute(tr_world).lexically_normal().string()},
                                           {"bank", fs::absolute(tr_bank).lexically_normal().string()}};
            write_text_file(fs::path(tr_out) / "inputs.json", inputs.dump(2) + "\n");
        } else if (*ev) {
            const fs::path dir = ev_run;
            std::string wpath = ev_world;
            if (wpath.empty()) {
                wpath = read_json(dir / "inputs.json").at("world").get<std::string>();
            }
            const World w = load_world(wpath);
            const Model m = load_checkpoint(dir / "checkpoint.bin");
            auto j = accuracy_json(evaluate(w, m, parse_split(ev_split)));
            j["split"] = ev_split;
            const std::string text = j.dump(2) + "\n";
            write_text_file(dir / ("eval_" + ev_split + ".json"), text);
            std::cout << text;
        } else if (*rp) {
            const fs::path dir = rp_run;
            const Report r = report_from_json(read_json(dir / "report.json"));
            std::vector<std::string> names;
            if (fs::exists(dir / "inputs.json")) {
                const auto wpath = read_json(dir / "inputs.json").at("world").get<std::string>();
                if (fs::exists(wpath)) {
                    names = load_world(wpath).category_names;
                }
            }
            emit(report_text(r, names), rp_out);
        } else if (*sw || *no) {
            const bool is_sweep = static_cast<bool>(*sw);
            if (seeds.empty()) {
                seeds.push_back(0);
            }
            const auto &wpath = is_sweep ? sw_world : no_world;
            const auto &bpath = is_sweep ? sw_bank : no_bank;
            const auto &cpath = is_sweep ? sw_config : no_config;
            std::string csv;
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                const Inputs in = inputs_for(wpath, bpath, seeds[i]);
                const TrainConfig c = load_config(cpath, seeds[i]);
                std::string part;
                if (is_sweep) {
                    const auto param = parse_sweep_param(sw_param);
                    part = sweep_csv(param, sweep(in.world, in.bank, c, param, sw_values));
                } else {
                    part = noise_csv(noise_ablation(in.world, in.bank, c, no_levels));
                }
                // one header for all seeds
                csv += i == 0 ? part : part.substr(part.find('\n') + 1);
            }
            emit(csv, is_sweep ? sw_out : no_out);
        }
    } catch (const capt::Error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

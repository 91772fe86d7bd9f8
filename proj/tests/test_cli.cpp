#include "capt/capt.hpp"

#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const fs::path &dir() {
    static const fs::path d = [] {
        auto p = fs::temp_directory_path() / "capt_test_cli";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return d;
}

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result cli(const std::string &args) {
    const auto out = dir() / "stdout.txt", err = dir() / "stderr.txt";
    const std::string cmd = std::string(CAPT_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return {code, slurp(out), slurp(err)};
}

std::string p(const std::string &name) { return (dir() / name).string(); }

// Small world and config written once for all cases.
void fixtures() {
    static bool done = false;
    if (done) {
        return;
    }
    std::ofstream(dir() / "spec.json") << R"({"num_categories": 12, "num_confusable_pairs": 3, "feature_dim": 16,
        "grid_rows": 2, "grid_cols": 2, "samples_per_category": 20})";
    std::ofstream(dir() / "cfg.json") << R"({"epochs": 3, "hidden": 16, "heads": 2})";
    REQUIRE(cli("gen-world --spec " + p("spec.json") + " --out " + p("w.bin") + " --seed 1").code == 0);
    REQUIRE(cli("build-bank --world " + p("w.bin") + " --out " + p("b.bin")).code == 0);
    done = true;
}

const char *kRunFiles[] = {"config.json",      "report.json",       "loss_curve.csv", "checkpoint.bin",
                           "heatmap_before.csv", "heatmap_before.pgm", "heatmap_after.csv", "heatmap_after.pgm",
                           "inputs.json"};

}  // namespace

TEST_CASE("gen-world and build-bank are seed deterministic", "[cli]") {
    fixtures();
    const std::string spec = " --spec " + p("spec.json");
    REQUIRE(cli("gen-world" + spec + " --out " + p("w2.bin") + " --seed 1").code == 0);
    CHECK(slurp(p("w.bin")) == slurp(p("w2.bin")));
    CHECK(slurp(p("w.bin") + ".json") == slurp(p("w2.bin") + ".json"));
    REQUIRE(cli("gen-world" + spec + " --out " + p("w3.bin") + " --seed 2").code == 0);
    CHECK(slurp(p("w.bin")) != slurp(p("w3.bin")));
    CHECK(capt::load_world(p("w.bin")).spec.seed == 1);

    REQUIRE(cli("build-bank --world " + p("w2.bin") + " --out " + p("b2.bin")).code == 0);
    CHECK(slurp(p("b.bin")) == slurp(p("b2.bin")));

    const auto j = cli("bank-json --bank " + p("b.bin"));
    REQUIRE(j.code == 0);
    const auto parsed = nlohmann::json::parse(j.out);
    CHECK(parsed.at("total_records") == capt::load_bank(p("b.bin")).size());
    REQUIRE(cli("bank-json --bank " + p("b.bin") + " --out " + p("b.json")).code == 0);
    CHECK(slurp(p("b.json")) == j.out);
}

TEST_CASE("train writes byte-identical run directories for a fixed seed", "[cli]") {
    fixtures();
    const std::string base = "train --world " + p("w.bin") + " --bank " + p("b.bin") + " --config " + p("cfg.json");
    REQUIRE(cli(base + " --out " + p("runA") + " --seed 3").code == 0);
    REQUIRE(cli(base + " --out " + p("runB") + " --seed 3").code == 0);
    REQUIRE(cli(base + " --out " + p("runC") + " --seed 4").code == 0);
    for (const char *f : kRunFiles) {
        INFO(f);
        CHECK(slurp(dir() / "runA" / f) == slurp(dir() / "runB" / f));
    }
    CHECK(slurp(dir() / "runA" / "checkpoint.bin") != slurp(dir() / "runC" / "checkpoint.bin"));
    const auto report = nlohmann::json::parse(slurp(dir() / "runA" / "report.json"));
    CHECK(report.at("seed") == 3);
    CHECK(report.at("config").at("epochs") == 3);
}

TEST_CASE("eval does not need the bank", "[cli]") {
    fixtures();
    REQUIRE(cli("build-bank --world " + p("w.bin") + " --out " + p("tmp_bank.bin")).code == 0);
    REQUIRE(cli("train --world " + p("w.bin") + " --bank " + p("tmp_bank.bin") + " --config " + p("cfg.json") +
                " --out " + p("runE"))
                .code == 0);
    const auto before = cli("eval --rundir " + p("runE") + " --split both");
    REQUIRE(before.code == 0);
    fs::remove(p("tmp_bank.bin"));
    const auto after = cli("eval --rundir " + p("runE") + " --split both");
    REQUIRE(after.code == 0);
    CHECK(before.out == after.out);

    const auto j = nlohmann::json::parse(after.out);
    const auto report = nlohmann::json::parse(slurp(dir() / "runE" / "report.json"));
    CHECK(j.at("hm").get<double>() == report.at("hm").get<double>());
    CHECK(j.at("base_accuracy").get<double>() == report.at("base_accuracy").get<double>());
    CHECK(slurp(dir() / "runE" / "eval_both.json") == after.out);

    const auto novel = nlohmann::json::parse(cli("eval --rundir " + p("runE") + " --split novel").out);
    CHECK(novel.at("base_accuracy").is_null());
    CHECK(novel.at("novel_accuracy").get<double>() == report.at("novel_accuracy").get<double>());

    // an explicit world that does not match the checkpoint is refused
    REQUIRE(cli("gen-world --spec " + p("spec.json") + " --out " + p("other.bin") + " --seed 9").code == 0);
    const auto wrong = cli("eval --rundir " + p("runE") + " --world " + p("other.bin"));
    CHECK(wrong.code == 1);
    CHECK(wrong.err.find("different world") != std::string::npos);
}

TEST_CASE("report summarizes a run", "[cli]") {
    fixtures();
    REQUIRE(cli("train --world " + p("w.bin") + " --bank " + p("b.bin") + " --config " + p("cfg.json") + " --out " +
                p("runR"))
                .code == 0);
    const auto r = cli("report --rundir " + p("runR"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("baseline") != std::string::npos);
    CHECK(r.out.find("correction rate") != std::string::npos);
    CHECK(r.out.find("category_01 -> category_00") != std::string::npos);
    CHECK(cli("report --rundir " + p("runR")).out == r.out);

    auto j = nlohmann::json::parse(slurp(dir() / "runR" / "report.json"));
    j["hm"] = 0.123;
    std::ofstream(dir() / "runR" / "report.json") << j.dump();
    const auto bad = cli("report --rundir " + p("runR"));
    CHECK(bad.code == 1);
    CHECK(bad.err.find("HM") != std::string::npos);
}

TEST_CASE("sweep and noise produce deterministic csv", "[cli]") {
    fixtures();
    const std::string inputs = " --world " + p("w.bin") + " --bank " + p("b.bin") + " --config " + p("cfg.json");
    const auto a = cli("sweep --param pairs_c --values 1,3" + inputs + " --seed 0,1");
    REQUIRE(a.code == 0);
    CHECK(a.out == cli("sweep --param pairs_c --values 1,3" + inputs + " --seed 0,1").out);
    std::istringstream lines(a.out);
    std::string line;
    std::size_t n = 0;
    std::getline(lines, line);
    CHECK(line == "pairs_c,seed,base_accuracy,novel_accuracy,hm,correction_rate");
    while (std::getline(lines, line)) {
        ++n;
    }
    CHECK(n == 4);

    const auto no = cli("noise --levels 0,0.1" + inputs + " --out " + p("noise.csv"));
    REQUIRE(no.code == 0);
    const std::string csv = slurp(p("noise.csv"));
    CHECK(csv.rfind("noise_level,seed,", 0) == 0);
    REQUIRE(cli("noise --levels 0,0.1" + inputs + " --out " + p("noise2.csv")).code == 0);
    CHECK(slurp(p("noise2.csv")) == csv);
}

TEST_CASE("bad input is reported, not crashed on", "[cli]") {
    fixtures();
    CHECK(cli("").code != 0);
    CHECK(cli("frobnicate").code != 0);
    CHECK(cli("eval --rundir " + p("missing")).code != 0);
    CHECK(cli("sweep --param alpha --values 1").code != 0);

    std::ofstream(dir() / "typo.json") << R"({"epoch": 3})";
    const auto typo = cli("train --world " + p("w.bin") + " --bank " + p("b.bin") + " --config " + p("typo.json") +
                          " --out " + p("runT"));
    CHECK(typo.code == 1);
    CHECK(typo.err.find("unknown key 'epoch'") != std::string::npos);

    std::ofstream(dir() / "junk.bin") << "not a world";
    const auto junk = cli("build-bank --world " + p("junk.bin") + " --out " + p("jb.bin"));
    CHECK(junk.code == 1);
    CHECK(junk.err.rfind("error: ", 0) == 0);

    const auto orphan = cli("sweep --param pairs_c --values 1 --bank " + p("b.bin"));
    CHECK(orphan.code == 1);
    CHECK(orphan.err.find("--world") != std::string::npos);
}

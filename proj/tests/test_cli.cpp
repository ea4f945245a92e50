#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

#include <sys/wait.h>

#include "guidedrec/json_io.hpp"
#include "guidedrec/projector.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "guidedrec_test_cli";

struct Run {
    int code;
    std::string err;
};

Run run(const std::string& args) {
    const fs::path err = kRoot / "stderr.txt";
    const std::string cmd = std::string(GUIDEDREC_CLI) + " --threads 1 " + args + " > /dev/null 2> " + err.string();
    const int status = std::system(cmd.c_str());
    std::ifstream f(err);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1,
            std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>())};
}

std::string bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

std::string p(const std::string& rel) { return (kRoot / rel).string(); }

// Cohort and prior shared by the cases below, generated once.
void ensure_inputs() {
    static bool done = false;
    if (done) return;
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    REQUIRE(run("generate-cohort --n 4 --seed 7 --grid 32 --spacing 4 --out " + p("cohort")).code == 0);
    REQUIRE(run("fit-prior --cohort " + p("cohort") + " --d 2 --out " + p("prior")).code == 0);
    done = true;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
    ensure_inputs();
    CHECK(run("").code == 2);
    CHECK(run("no-such-command").code == 2);
    const Run zero = run("generate-cohort --n 0 --out " + p("zero"));
    CHECK(zero.code == 2);
    CHECK(zero.err.find("n must be >= 1") != std::string::npos);
    CHECK(run("fit-prior --cohort " + p("cohort") + " --d 8 --out " + p("bigprior")).code == 2);
    CHECK(run("reconstruct --case " + p("cohort/case_000") + " --prior " + p("prior") + " --variant bogus --out " +
              p("bogus"))
              .code == 2);
    CHECK(run("reconstruct --case " + p("nowhere") + " --prior " + p("prior") + " --out " + p("x")).code == 2);
}

TEST_CASE("cohort generation is reproducible") {
    ensure_inputs();
    REQUIRE(run("generate-cohort --n 4 --seed 7 --grid 32 --spacing 4 --out " + p("cohort2")).code == 0);
    CHECK(bytes(kRoot / "cohort/manifest.json") == bytes(kRoot / "cohort2/manifest.json"));
    for (const char* f : {"v_minus.gvol", "v_gt.gvol", "proj_0.gprj", "proj_1.gprj", "geom_1.json", "change.json"})
        CHECK(bytes(kRoot / "cohort/case_002" / f) == bytes(kRoot / "cohort2/case_002" / f));
    CHECK(fs::exists(kRoot / "cohort/run_manifest.json"));
}

TEST_CASE("reconstruction bundles") {
    ensure_inputs();
    const std::string base = "reconstruct --case " + p("cohort/case_001") + " --prior " + p("prior");
    REQUIRE(run(base + " --variant full --main-iters 4 --out " + p("full_a")).code == 0);
    REQUIRE(run(base + " --variant full --main-iters 4 --out " + p("full_b")).code == 0);
    CHECK(bytes(kRoot / "full_a/recovered.gvol") == bytes(kRoot / "full_b/recovered.gvol"));
    for (const char* f : {"trace.csv", "latent.json", "velocity.json", "deformation.json", "recovered_axial.pgm",
                          "run_manifest.json"})
        CHECK(fs::exists(kRoot / "full_a" / f));
    const auto man = guidedrec::read_json(kRoot / "full_a/run_manifest.json");
    CHECK(man.at("config").at("main_iters") == 4);
    CHECK(man.contains("config_hash"));

    REQUIRE(run("reconstruct --case " + p("cohort/case_001") + " --variant backprojection --out " + p("bp")).code ==
            0);
    CHECK(fs::exists(kRoot / "bp/recovered.gvol"));
    CHECK_FALSE(fs::exists(kRoot / "bp/latent.json"));
    CHECK_FALSE(fs::exists(kRoot / "bp/velocity.json"));

    const Run missing = run(base + " --config " + p("nope.json") + " --out " + p("y"));
    CHECK(missing.code == 1);
}

TEST_CASE("numerical failures exit with 1 and name the term") {
    ensure_inputs();
    fs::copy(kRoot / "cohort/case_000", kRoot / "nan_case", fs::copy_options::recursive);
    guidedrec::Projection pr = guidedrec::read_gprj(kRoot / "nan_case/proj_0.gprj");
    pr.data[pr.data.size() / 2] = std::numeric_limits<double>::quiet_NaN();
    guidedrec::write_gprj(kRoot / "nan_case/proj_0.gprj", pr);
    const Run r = run("reconstruct --case " + p("nan_case") + " --prior " + p("prior") +
                      " --variant full --main-iters 2 --out " + p("nan_out"));
    CHECK(r.code == 1);
    CHECK(r.err.find("projection") != std::string::npos);
}

TEST_CASE("evaluation and ablation reports") {
    ensure_inputs();
    REQUIRE(run("reconstruct --case " + p("cohort/case_001") + " --variant backprojection --out " + p("bp1")).code ==
            0);
    const Run missing = run("evaluate --cases " + p("cohort") + " --results " + p("bp1") + " --out " + p("ev"));
    CHECK(missing.code == 2);
    CHECK(missing.err.find("case_000") != std::string::npos);

    REQUIRE(run("evaluate --cases " + p("cohort/case_001") + " --results " + p("bp1") + " --out " + p("ev1")).code ==
            0);
    const auto agg = guidedrec::read_json(kRoot / "ev1/aggregate.json");
    CHECK(agg.at("backprojection").at("psnr_db").at("std") == 0.0);
    CHECK(bytes(kRoot / "ev1/eval.csv").rfind("case,method,psnr_db", 0) == 0);

    REQUIRE(run("ablate --cases " + p("cohort") + " --prior " + p("prior") + " --main-iters 2 --max-cases 1 --out " +
                p("abl"))
                .code == 0);
    const std::string table = bytes(kRoot / "abl/table.txt");
    for (const char* m : {"full", "deform-only", "gen-then-deform", "gen-only", "no-prior", "backprojection"})
        CHECK(table.find(m) != std::string::npos);
    CHECK(fs::exists(kRoot / "abl/case_000/full/recovered.gvol"));
}

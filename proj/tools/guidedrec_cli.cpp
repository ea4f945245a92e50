// guidedrec command-line driver.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "guidedrec/errors.hpp"
#include "guidedrec/generative.hpp"
#include "guidedrec/json_io.hpp"
#include "guidedrec/metrics.hpp"
#include "guidedrec/phantom.hpp"
#include "guidedrec/projector.hpp"
#include "guidedrec/recon.hpp"

namespace fs = std::filesystem;
using namespace guidedrec;
using json = nlohmann::json;

namespace {

constexpr const char* kToolVersion = "1.0.0";
constexpr const char* kBackprojection = "backprojection";

struct RunManifest {
    std::string command;
    json config = json::object();
    std::uint64_t seed = 0;
    json inputs = json::object();
    json outputs = json::object();
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void write(const fs::path& dir) const {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_json(dir / "run_manifest.json", {{"command", command},
                                               {"config_hash", fnv1a_hex(config.dump())},
                                               {"config", config},
                                               {"seed", seed},
                                               {"tool_version", kToolVersion},
                                               {"inputs", inputs},
                                               {"outputs", outputs},
                                               {"wall_time_s", wall}});
    }
};

void make_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw std::runtime_error("cannot create directory " + p.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
    f << text;
    if (!f) throw std::runtime_error("write failed: " + p.string());
}

// 8-bit binary PGM of one slice, values clamped to [0, 1].
void write_pgm(const fs::path& p, int w, int h, const std::vector<double>& px) {
    std::string out = fmt::format("P5\n{} {}\n255\n", w, h);
    for (double x : px) out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(x, 0.0, 1.0)))));
    write_text(p, out);
}

void write_midslices(const fs::path& dir, const std::string& stem, const Volume& v) {
    const auto& d = v.grid().dims;
    std::vector<double> px;
    const int ci = d[0] / 2, cj = d[1] / 2, ck = d[2] / 2;
    px.clear();
    for (int j = d[1] - 1; j >= 0; --j)
        for (int i = 0; i < d[0]; ++i) px.push_back(v.at(i, j, ck));
    write_pgm(dir / (stem + "_axial.pgm"), d[0], d[1], px);
    px.clear();
    for (int k = d[2] - 1; k >= 0; --k)
        for (int i = 0; i < d[0]; ++i) px.push_back(v.at(i, cj, k));
    write_pgm(dir / (stem + "_coronal.pgm"), d[0], d[2], px);
    px.clear();
    for (int k = d[2] - 1; k >= 0; --k)
        for (int j = 0; j < d[1]; ++j) px.push_back(v.at(ci, j, k));
    write_pgm(dir / (stem + "_sagittal.pgm"), d[1], d[2], px);
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
    std::string out = "iteration,phase,total,projection,coupling,smoothness,regularizer\n";
    for (const auto& r : trace)
        out += fmt::format("{},{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}\n", r.iteration, r.phase, r.total, r.projection,
                           r.coupling, r.smoothness, r.regularizer);
    return out;
}

json latent_to_json(const LatentParams& g) {
    json w = json::array();
    for (const auto& ws : g.w) w.push_back(ws);
    return {{"w", w}, {"noise_files", g.n.size()}};
}

// Result bundle: recovered.gvol, trace.csv, latent/velocity/deformation when
// present, midslice images.
void save_bundle(const fs::path& dir, const GenerativePrior* prior, const ReconResult& r, RunManifest& m) {
    make_dir(dir);
    write_gvol(dir / "recovered.gvol", r.recovered);
    m.outputs["recovered"] = "recovered.gvol";
    write_text(dir / "trace.csv", trace_csv(r.trace));
    m.outputs["trace"] = "trace.csv";
    if (r.g && prior) {
        write_json(dir / "latent.json", latent_to_json(*r.g));
        for (std::size_t s = 0; s < r.g->n.size(); ++s)
            write_gvol(dir / fmt::format("latent_n{}.gvol", s),
                       Volume(prior->scales[s].grid, r.g->n[s]));
        m.outputs["latent"] = "latent.json";
    }
    if (r.u) {
        save_field(dir, "velocity", *r.u, "stationary velocity, mm");
        m.outputs["velocity"] = "velocity.json";
    }
    if (r.deformation) {
        save_field(dir, "deformation", *r.deformation, "pull-back");
        m.outputs["deformation"] = "deformation.json";
    }
    if (!r.warnings.empty()) m.outputs["warnings"] = r.warnings;
    write_midslices(dir, "recovered", r.recovered);
}

ReconConfig load_config(const std::string& path) {
    if (path.empty()) return {};
    return config_from_json(read_json(path));
}

std::vector<fs::path> resolve_cases(const std::vector<std::string>& args) {
    std::vector<fs::path> dirs;
    for (const auto& a : args) {
        const fs::path p(a);
        if (fs::exists(p / "manifest.json")) {
            for (auto& d : cohort_case_dirs(p)) dirs.push_back(d);
        } else if (fs::exists(p / "change.json")) {
            dirs.push_back(p);
        } else {
            throw UsageError("not a case or cohort directory: " + a);
        }
    }
    if (dirs.empty()) throw UsageError("no cases given");
    return dirs;
}

ReconResult run_method(const std::string& method, const GenerativePrior& prior, const Case& c,
                       const ReconConfig& cfg) {
    if (method == kBackprojection) {
        ReconResult r;
        r.recovered = backproject_average(c.projections, c.geoms, c.grid);
        return r;
    }
    return run_variant(parse_variant(method), prior, c.v_minus, c.projections, c.geoms, cfg);
}

// ---------------------------------------------------------------------------

struct Options {
    // generate-cohort
    int n = 200;
    std::uint64_t seed = 0;
    std::string out;
    int grid = 64;
    double spacing = 2.0;
    // fit-prior
    std::string cohort;
    int d = 8;
    int scales = 3;
    // reconstruct / ablate / evaluate
    std::string case_dir;
    std::string prior;
    std::string config;
    std::string variant = "full";
    std::optional<int> main_iters;
    std::optional<std::uint64_t> recon_seed;
    std::vector<std::string> cases;
    std::vector<std::string> results;
    int max_cases = 0;
    // project
    std::string volume;
    double pitch = 0.0;
};

int cmd_generate_cohort(const Options& o) {
    if (o.n < 1) throw UsageError("n must be >= 1");
    if (o.grid < 16) throw UsageError("grid must be >= 16");
    if (!(o.spacing > 0.0)) throw UsageError("spacing must be positive");
    RunManifest m;
    m.command = "generate-cohort";
    m.seed = o.seed;
    const Grid3 grid = Grid3::cube(o.grid, o.spacing);
    const PhantomParams params;
    m.config = {{"n", o.n}, {"grid", grid_to_json(grid)}, {"params", params_to_json(params)}};
    make_dir(o.out);
    generate_cohort(o.n, o.seed, o.out, grid, params);
    m.outputs["manifest"] = "manifest.json";
    m.write(o.out);
    std::cout << fmt::format("wrote {} cases to {}\n", o.n, o.out);
    return 0;
}

int cmd_fit_prior(const Options& o) {
    const auto dirs = cohort_case_dirs(o.cohort);
    if (o.d < 1) throw UsageError("d must be >= 1");
    if (static_cast<int>(dirs.size()) < o.d + 1)
        throw UsageError(fmt::format("cohort has {} volumes, need at least d+1 = {}", dirs.size(), o.d + 1));
    if (o.scales < 1 || o.scales > 3) throw UsageError("scales must be 1, 2 or 3");
    std::vector<Volume> train;
    for (const auto& d : dirs) train.push_back(read_gvol(d / "v_minus.gvol"));
    const Grid3 grid = train.front().grid();
    auto ladder = default_scale_dims(grid);
    ladder.erase(ladder.begin(), ladder.end() - o.scales);
    RunManifest m;
    m.command = "fit-prior";
    m.config = {{"d", o.d}, {"scales", o.scales}};
    m.inputs["cohort"] = o.cohort;
    const GenerativePrior prior = fit_prior(train, o.d, ladder);
    make_dir(o.out);
    save_prior(prior, o.out);
    m.outputs["prior"] = "manifest.json";
    m.write(o.out);
    std::cout << fmt::format("{:<8}{:>16}{:>12}{:>16}\n", "scale", "dims", "bases", "explained var");
    for (std::size_t s = 0; s < prior.scales.size(); ++s) {
        const auto& sc = prior.scales[s];
        std::cout << fmt::format("{:<8}{:>16}{:>12}{:>16.4f}\n", s,
                                 fmt::format("{}x{}x{}", sc.grid.dims[0], sc.grid.dims[1], sc.grid.dims[2]),
                                 sc.basis.size(), sc.explained_variance);
    }
    return 0;
}

int cmd_project(const Options& o) {
    const Volume v = read_gvol(o.volume);
    const auto [ap, lat] = default_biplanar(v.grid(), o.pitch);
    RunManifest m;
    m.command = "project";
    m.config = {{"pitch", o.pitch}};
    m.inputs["volume"] = o.volume;
    make_dir(o.out);
    int i = 0;
    for (const auto& g : {ap, lat}) {
        write_gprj(fs::path(o.out) / fmt::format("proj_{}.gprj", i), project(v, g));
        write_json(fs::path(o.out) / fmt::format("geom_{}.json", i), geometry_to_json(g));
        ++i;
    }
    m.write(o.out);
    return 0;
}

ReconConfig effective_config(const Options& o) {
    ReconConfig cfg = load_config(o.config);
    if (o.main_iters) cfg.main_iters = *o.main_iters;
    if (o.recon_seed) cfg.seed = *o.recon_seed;
    cfg.validate();
    return cfg;
}

int cmd_reconstruct(const Options& o) {
    if (o.variant != kBackprojection) parse_variant(o.variant);
    ReconConfig cfg = effective_config(o);
    const Case c = load_case(o.case_dir);
    RunManifest m;
    m.command = "reconstruct";
    m.seed = cfg.seed;
    m.config = config_to_json(cfg);
    m.config["method"] = o.variant;
    m.inputs = {{"case", o.case_dir}, {"case_name", c.name}, {"prior", o.prior}, {"config", o.config}};
    GenerativePrior prior;
    if (o.variant != kBackprojection) {
        if (o.prior.empty()) throw UsageError("--prior is required for variant " + o.variant);
        prior = load_prior(o.prior);
    }
    const ReconResult r = run_method(o.variant, prior, c, cfg);
    save_bundle(o.out, o.variant == kBackprojection ? nullptr : &prior, r, m);
    m.write(o.out);
    std::cout << fmt::format("{} on {}: PSNR {:.2f} dB\n", o.variant, c.name, psnr(r.recovered, c.v_gt));
    return 0;
}

void write_reports(const fs::path& out, const std::vector<EvalRow>& rows) {
    write_text(out / "eval.csv", eval_csv(rows));
    write_json(out / "aggregate.json", aggregate_json(rows));
    const std::string table = ablation_table(rows);
    write_text(out / "table.txt", table);
    std::cout << table;
}

int cmd_evaluate(const Options& o) {
    const auto case_dirs = resolve_cases(o.cases);
    std::map<std::string, Case> cases;
    std::vector<std::string> order;
    for (const auto& d : case_dirs) {
        Case c = load_case(d);
        order.push_back(c.name);
        cases.emplace(c.name, std::move(c));
    }
    std::vector<EvalRow> rows;
    std::map<std::string, int> seen;
    for (const auto& r : o.results) {
        const json man = read_json(fs::path(r) / "run_manifest.json");
        std::string name, method;
        try {
            name = man.at("inputs").at("case_name").get<std::string>();
            method = man.at("config").at("method").get<std::string>();
        } catch (const json::exception& e) {
            throw ParseError("run_manifest", std::string("result ") + r + ": " + e.what());
        }
        auto it = cases.find(name);
        if (it == cases.end()) throw UsageError("result " + r + " refers to unlisted case " + name);
        const Volume rec = read_gvol(fs::path(r) / "recovered.gvol");
        std::optional<DeformationField> phi;
        if (fs::exists(fs::path(r) / "deformation.json"))
            phi = DeformationField(load_field(r, "deformation"));
        rows.push_back(evaluate_case(it->second, method, rec, phi ? &*phi : nullptr));
        ++seen[name];
    }
    for (const auto& name : order)
        if (!seen.count(name)) throw UsageError("missing result for case " + name);
    RunManifest m;
    m.command = "evaluate";
    m.inputs = {{"cases", o.cases}, {"results", o.results}};
    make_dir(o.out);
    write_reports(o.out, rows);
    m.outputs = {{"csv", "eval.csv"}, {"aggregate", "aggregate.json"}, {"table", "table.txt"}};
    m.write(o.out);
    return 0;
}

int cmd_ablate(const Options& o) {
    ReconConfig cfg = effective_config(o);
    auto case_dirs = resolve_cases(o.cases);
    if (o.max_cases > 0 && static_cast<int>(case_dirs.size()) > o.max_cases) case_dirs.resize(o.max_cases);
    const GenerativePrior prior = load_prior(o.prior);
    RunManifest m;
    m.command = "ablate";
    m.seed = cfg.seed;
    m.config = config_to_json(cfg);
    m.inputs = {{"cases", o.cases}, {"prior", o.prior}, {"config", o.config}};
    make_dir(o.out);
    std::vector<EvalRow> rows;
    std::vector<std::string> methods;
    for (Variant v : kAllVariants) methods.push_back(variant_name(v));
    methods.push_back(kBackprojection);
    for (const auto& d : case_dirs) {
        const Case c = load_case(d);
        for (const auto& method : methods) {
            const ReconResult r = run_method(method, prior, c, cfg);
            RunManifest bm;
            bm.command = "reconstruct";
            bm.seed = cfg.seed;
            bm.config = config_to_json(cfg);
            bm.config["method"] = method;
            bm.inputs = {{"case", d.string()}, {"case_name", c.name}, {"prior", o.prior}};
            const fs::path bdir = fs::path(o.out) / c.name / method;
            save_bundle(bdir, method == kBackprojection ? nullptr : &prior, r, bm);
            bm.write(bdir);
            rows.push_back(evaluate_case(c, method, r.recovered, r.deformation ? &*r.deformation : nullptr));
            std::cerr << eval_csv_row(rows.back()) << "\n";
        }
    }
    write_reports(o.out, rows);
    m.outputs = {{"csv", "eval.csv"}, {"aggregate", "aggregate.json"}, {"table", "table.txt"}};
    m.write(o.out);
    return 0;
}

void set_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#else
    (void)threads;
#endif
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Guided volume reconstruction from two projections"};
    app.require_subcommand(1);
    Options o;
    int threads = 0;
    if (const char* env = std::getenv("GUIDEDREC_THREADS")) threads = std::atoi(env);
    app.add_option("--threads", threads, "Worker threads (default: GUIDEDREC_THREADS or all cores)");

    auto* gen = app.add_subcommand("generate-cohort", "Generate a phantom cohort");
    gen->add_option("--n", o.n, "Number of cases")->capture_default_str();
    gen->add_option("--seed", o.seed, "Master seed")->capture_default_str();
    gen->add_option("--out", o.out, "Output directory")->required();
    gen->add_option("--grid", o.grid, "Voxels per axis")->capture_default_str();
    gen->add_option("--spacing", o.spacing, "Voxel spacing, mm")->capture_default_str();

    auto* fit = app.add_subcommand("fit-prior", "Fit the multi-scale generative prior");
    fit->add_option("--cohort", o.cohort, "Cohort directory")->required();
    fit->add_option("--d", o.d, "Bases per scale")->capture_default_str();
    fit->add_option("--scales", o.scales, "Number of scales")->capture_default_str();
    fit->add_option("--out", o.out, "Output directory")->required();

    auto* proj = app.add_subcommand("project", "Biplanar projections of a volume");
    proj->add_option("--volume", o.volume, "Input GVOL")->required();
    proj->add_option("--pitch", o.pitch, "Detector pitch, mm (default: voxel spacing)");
    proj->add_option("--out", o.out, "Output directory")->required();

    auto* rec = app.add_subcommand("reconstruct", "Reconstruct one case");
    rec->add_option("--case", o.case_dir, "Case directory")->required();
    rec->add_option("--prior", o.prior, "Prior directory");
    rec->add_option("--config", o.config, "JSON config");
    rec->add_option("--variant", o.variant, "full, deform-only, gen-then-deform, gen-only, no-prior, backprojection")
        ->capture_default_str();
    rec->add_option("--main-iters", o.main_iters, "Override main-phase iterations");
    rec->add_option("--seed", o.recon_seed, "Override seed");
    rec->add_option("--out", o.out, "Output directory")->required();

    auto* ev = app.add_subcommand("evaluate", "Evaluate result bundles");
    ev->add_option("--cases", o.cases, "Cohort or case directories")->required();
    ev->add_option("--results", o.results, "Result bundle directories")->required();
    ev->add_option("--out", o.out, "Output directory")->required();

    auto* abl = app.add_subcommand("ablate", "Run every variant on every case and report");
    abl->add_option("--cases", o.cases, "Cohort or case directories")->required();
    abl->add_option("--prior", o.prior, "Prior directory")->required();
    abl->add_option("--config", o.config, "JSON config");
    abl->add_option("--main-iters", o.main_iters, "Override main-phase iterations");
    abl->add_option("--seed", o.recon_seed, "Override seed");
    abl->add_option("--max-cases", o.max_cases, "Use at most this many cases");
    abl->add_option("--out", o.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        set_threads(threads);
        if (*gen) return cmd_generate_cohort(o);
        if (*fit) return cmd_fit_prior(o);
        if (*proj) return cmd_project(o);
        if (*rec) return cmd_reconstruct(o);
        if (*ev) return cmd_evaluate(o);
        if (*abl) return cmd_ablate(o);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure in '" << e.term() << "': " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "parse error (" << e.field() << "): " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

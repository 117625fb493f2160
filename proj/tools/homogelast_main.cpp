// homogelast: batch experiment runner for the periodic homogenization toolkit.
//
// Subcommands: verify, whom-scan, rate-study, corrector, layered, calibrate.
// Machine-readable summaries go to standard output files; progress lines go
// to standard error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "homogelast/verification.hpp"

namespace fs = std::filesystem;
using namespace homogelast;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    int grid_n = 0;
    int k = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config (key-value or JSON)");
    cmd->add_option("--out", args.out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", args.seed, "seed override")->each([&](const std::string&) {
        args.seed_set = true;
    });
    cmd->add_option("--threads", args.threads, "worker threads for independent runs");
    cmd->add_option("--grid-n", args.grid_n, "cell grid resolution override");
    cmd->add_option("--k", args.k, "cell multiplicity override");
}

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg;
    if (!args.config_path.empty()) cfg = ExperimentConfig::load_file(args.config_path);
    if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
    if (args.seed_set) cfg.seed = args.seed;
    if (args.threads > 0) cfg.threads = args.threads;
    if (args.grid_n > 0) cfg.grid_n = args.grid_n;
    if (args.k > 0) cfg.k = args.k;
    return cfg;
}

fs::path ensure_outdir(const ExperimentConfig& cfg) {
    fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    return dir;
}

std::string file_header(const ExperimentConfig& cfg, const CalibrationRecord* rec) {
    std::ostringstream os;
    os << "# config_hash=" << cfg.hash() << "\n";
    if (rec) {
        os << "# calibration mu=" << format_g17(rec->mu) << " delta=" << format_g17(rec->delta)
           << " lambda=" << format_g17(rec->lambda) << " cap_radius=" << format_g17(rec->cap_radius)
           << " cap_offset=" << format_g17(rec->cap_offset)
           << " mollify_width=" << format_g17(rec->mollify_width) << " seed=" << rec->seed << "\n";
    }
    return os.str();
}

int cmd_verify(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_outdir(cfg);
    AcceptanceReport report;
    try {
        report = run_acceptance(cfg, &std::cerr);
    } catch (const CalibrationError& e) {
        std::cerr << "verify: " << e.what() << "\n";
        nlohmann::json j;
        j["config_hash"] = cfg.hash();
        j["all_passed"] = false;
        j["error"] = e.what();
        std::ofstream(dir / "verify.json") << j.dump(2) << "\n";
        return 1;
    }
    std::ofstream(dir / "verify.json") << report.to_json() << "\n";
    for (const auto& c : report.checks)
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " value=" << format_g17(c.value)
                  << " threshold=" << format_g17(c.threshold) << (c.gated ? "" : " (non-gating)")
                  << "\n";
    std::cout << (report.all_passed() ? "ALL CHECKS PASSED" : "CHECKS FAILED") << "\n";
    return report.all_passed() ? 0 : 1;
}

int cmd_calibrate(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_outdir(cfg);
    DensityModel model = cfg.density.build();
    CalibrateOptions copts = cfg.calibration;
    copts.verbose = true;
    CalibrationRecord rec = calibrate(model, copts);
    // trust radius for the fast cell path, stored with the record
    ConvexBound cb(model, rec);
    rec.trust_radius = calibrate_trust_radius(cb, PeriodicGrid{16, 1}, 6, cfg.seed);
    std::ofstream(dir / "calibration.json") << rec.to_json() << "\n";
    std::cout << rec.to_json() << "\n";
    return 0;
}

int cmd_whom_scan(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_outdir(cfg);
    DensityModel model = cfg.density.build();
    ConvexBound cb(model, calibrate(model, cfg.calibration));
    PeriodicGrid grid{cfg.grid_n, 1};

    std::ofstream csv(dir / "whom.csv");
    csv << file_header(cfg, &cb.record());
    csv << "theta,e11,e12,e21,e22,w_hom,rank_one_c,grid_n\n";
    FSampleSpec spec = cfg.fsample;
    std::vector<Mat2> samples = spec.sample();
    // include the rotation base points themselves (w_hom = 0 rows)
    for (int t = 0; t < spec.theta_count; ++t)
        samples.insert(samples.begin() + t, rotation(2.0 * M_PI * t / spec.theta_count));
    int i = 0;
    for (const Mat2& F : samples) {
        double theta = std::atan2(F(1, 0) - F(0, 1), F(0, 0) + F(1, 1));
        Mat2 E = F - rotation(theta);
        HomogenizedPoint pt = w_hom(cb, F, grid);
        Form4 T = d2w_hom(cb, F, grid);
        double c = rank_one_certificate(T).value;
        char buf[256];
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", theta,
                      E(0, 0), E(0, 1), E(1, 0), E(1, 1), pt.w_hom, c, grid.n);
        csv << buf;
        std::cerr << "whom-scan: sample " << ++i << "/" << samples.size() << "\n";
    }
    std::cout << "wrote " << (dir / "whom.csv").string() << "\n";
    return 0;
}

int cmd_rate_study(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_outdir(cfg);
    DensityModel model = cfg.density.build();
    ConvexBound cb(model, calibrate(model, cfg.calibration));
    std::unique_ptr<EffectiveDensity> eff =
        make_effective_density(cb, PeriodicGrid{cfg.grid_n, 1}, 0.06);

    ErrorStudyOptions opts;
    opts.eps_list = cfg.eps_list;
    opts.mesh_factor = cfg.mesh_factor;
    opts.progress = &std::cerr;
    auto t0 = std::chrono::steady_clock::now();
    TwoScaleReport rep = error_study(cb, *eff, cfg.load, opts);
    double runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::ofstream csv(dir / "report.csv");
    csv << file_header(cfg, &cb.record());
    csv << "eps,err_L2,err_H1,energy_eps,energy_hom,lambda\n";
    for (const auto& row : rep.rows) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.eps,
                      row.err_l2, row.err_h1, row.energy_eps, row.energy_hom, row.lambda);
        csv << buf;
    }

    nlohmann::json j;
    j["config_hash"] = cfg.hash();
    j["calibration"] = nlohmann::json::parse(cb.record().to_json());
    j["eps"] = cfg.eps_list;
    j["h1_slope"] = rep.h1_slope;
    j["h1_fit_residual"] = rep.h1_fit_residual;
    j["l2_slope"] = rep.l2_slope;
    j["monotone_h1"] = rep.monotone_h1;
    j["complete"] = rep.complete;
    if (!rep.failure.empty()) j["failure"] = rep.failure;
    j["runtime_seconds"] = runtime;
    j["rows"] = nlohmann::json::array();
    for (const auto& row : rep.rows)
        j["rows"].push_back({{"eps", row.eps},
                             {"m", row.m},
                             {"err_L2", row.err_l2},
                             {"err_H1", row.err_h1},
                             {"energy_eps", row.energy_eps},
                             {"energy_hom", row.energy_hom},
                             {"energy_expansion", row.energy_expansion},
                             {"lambda", row.lambda},
                             {"surrogate", row.surrogate}});
    std::ofstream(dir / "report.json") << j.dump(2) << "\n";
    std::cout << "wrote " << (dir / "report.csv").string() << " and report.json\n";
    return rep.complete ? 0 : 1;
}

int cmd_corrector(const CommonArgs& args, const std::vector<double>& fentries) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_outdir(cfg);
    DensityModel model = cfg.density.build();
    ConvexBound cb(model, calibrate(model, cfg.calibration));
    Mat2 F = Mat2::Identity();
    if (fentries.size() == 4) F << fentries[0], fentries[1], fentries[2], fentries[3];
    PeriodicGrid grid{cfg.grid_n, cfg.k};
    CorrectorSolution sol = solve_corrector(cb, F, grid);
    solve_flux_corrector(sol);
    sol.write_csv((dir / "corrector.csv").string());
    sol.write_diagnostics_json((dir / "corrector.json").string());
    std::cout << "wrote " << (dir / "corrector.csv").string() << " (energy_w per volume = "
              << format_g17(sol.diag.energy_w / grid.volume()) << ")\n";
    return 0;
}

int cmd_layered(const CommonArgs& args, const std::vector<double>& fentries) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_outdir(cfg);
    DensityModel model = cfg.density.build();
    if (model.kind() != DensityModel::Kind::Layered) {
        std::cerr << "layered: density.kind must be 'layered'\n";
        return 1;
    }
    Mat2 F = Mat2::Identity();
    if (fentries.size() == 4) F << fentries[0], fentries[1], fentries[2], fentries[3];
    LayeredCorrector lc = solve_layered(model, F);
    nlohmann::json j;
    j["config_hash"] = cfg.hash();
    j["F"] = {F(0, 0), F(0, 1), F(1, 0), F(1, 1)};
    j["breakpoints"] = lc.breakpoints;
    j["energy_w"] = lc.energy_w;
    j["flux_residual"] = lc.flux_residual;
    j["flux_column"] = {lc.flux_column(0), lc.flux_column(1)};
    j["slopes"] = nlohmann::json::array();
    for (const Vec2& c : lc.slopes) j["slopes"].push_back({c(0), c(1)});
    j["offsets"] = nlohmann::json::array();
    for (const Vec2& d : lc.offsets) j["offsets"].push_back({d(0), d(1)});
    std::ofstream(dir / "layered.json") << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"periodic homogenization toolkit for non-convex elasticity"};
    app.require_subcommand(1);

    CommonArgs args;
    std::vector<double> fentries;

    CLI::App* verify = app.add_subcommand("verify", "run the full verification suite");
    add_common(verify, args);
    CLI::App* calib = app.add_subcommand("calibrate", "calibrate the matching convex bound");
    add_common(calib, args);
    CLI::App* scan = app.add_subcommand("whom-scan", "scan W_hom over sampled gradients");
    add_common(scan, args);
    CLI::App* rate = app.add_subcommand("rate-study", "two-scale expansion error study");
    add_common(rate, args);
    CLI::App* corr = app.add_subcommand("corrector", "dump one corrector solution");
    add_common(corr, args);
    corr->add_option("--F", fentries, "deformation gradient entries (row-major)")->expected(4);
    CLI::App* lay = app.add_subcommand("layered", "dump the closed-form layered corrector");
    add_common(lay, args);
    lay->add_option("--F", fentries, "deformation gradient entries (row-major)")->expected(4);

    CLI11_PARSE(app, argc, argv);

    try {
        if (verify->parsed()) return cmd_verify(args);
        if (calib->parsed()) return cmd_calibrate(args);
        if (scan->parsed()) return cmd_whom_scan(args);
        if (rate->parsed()) return cmd_rate_study(args);
        if (corr->parsed()) return cmd_corrector(args, fentries);
        if (lay->parsed()) return cmd_layered(args, fentries);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

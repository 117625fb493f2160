#include "homogelast/verification.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <random>
#include <optional>
#include <sstream>

#include "json.hpp"

namespace homogelast {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void log_line(std::ostream* os, const std::string& line) {
    if (os) (*os) << line << "\n" << std::flush;
}

Mat2 shear(double gamma) {
    Mat2 F = Mat2::Identity();
    F(1, 0) += gamma;
    return F;
}

std::pair<double, double> fit_log_slope(const std::vector<double>& x,
                                        const std::vector<double>& y) {
    int n = static_cast<int>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 0; i < n; ++i) {
        double lx = std::log(x[i]), ly = std::log(std::max(y[i], 1e-300));
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    double denom = n * sxx - sx * sx;
    double s = (n * sxy - sx * sy) / denom;
    double c = (sy - s * sx) / n;
    double res = 0.0;
    for (int i = 0; i < n; ++i) {
        double ly = std::log(std::max(y[i], 1e-300));
        res += std::pow(ly - (s * std::log(x[i]) + c), 2);
    }
    return {s, std::sqrt(res / n)};
}

struct Context {
    const ExperimentConfig* config = nullptr;
    std::optional<DensityModel> layered;
    std::optional<DensityModel> smooth;
    std::unique_ptr<ConvexBound> cb_layered;
    std::unique_ptr<ConvexBound> cb_smooth;
    std::ostream* progress = nullptr;
};

// 1. Rotation nullity: corrector and w_hom vanish on SO(2).
CheckResult criterion_rotation_nullity(Context& ctx) {
    CheckResult r;
    r.name = "1 rotation nullity";
    r.threshold = 1e-9;
    Clock::time_point t0 = Clock::now();
    PeriodicGrid grid{32, 1};
    double worst_h1 = 0.0, worst_w = 0.0;
    for (int i = 0; i < 16; ++i) {
        Mat2 R = rotation(2.0 * M_PI * i / 16.0);
        CorrectorSolution sol = solve_corrector(*ctx.cb_layered, R, grid);
        worst_h1 = std::max(worst_h1, field_h1_norm(grid, sol.phi));
        worst_w = std::max(worst_w, std::abs(sol.diag.energy_w));
    }
    double elapsed = seconds_since(t0);
    r.value = worst_h1;
    r.pass = worst_h1 <= 1e-9 && worst_w <= 1e-10 && elapsed < 10.0;
    std::ostringstream os;
    os << "max |phi|_H1 = " << worst_h1 << ", max w_hom = " << worst_w << ", runtime " << elapsed
       << " s (< 10 s)";
    r.detail = os.str();
    return r;
}

// 2. Single-cell vs multi-cell energies near SO(2).
CheckResult criterion_single_vs_multicell(Context& ctx) {
    CheckResult r;
    r.name = "2 single-cell vs multi-cell";
    r.threshold = 1e-5;
    Clock::time_point t0 = Clock::now();
    PeriodicGrid grid{32, 1};
    FSampleSpec spec = ctx.config->fsample;
    spec.count = 10;
    spec.radius = std::min(spec.radius, 0.05);
    double worst = 0.0;
    int done = 0;
    for (int model_id = 0; model_id < 2; ++model_id) {
        const ConvexBound& cb = model_id == 0 ? *ctx.cb_layered : *ctx.cb_smooth;
        spec.seed = ctx.config->fsample.seed + model_id;
        for (const Mat2& F : spec.sample()) {
            MultiCellComparison cmp =
                single_vs_multicell(cb, F, grid, {2, 3}, 8, ctx.config->seed + done);
            for (const auto& row : cmp.rows)
                if (row.k > 1) worst = std::max(worst, row.rel_gap);
            ++done;
            log_line(ctx.progress, "  multicell sample " + std::to_string(done) + "/20, worst " +
                                       format_g17(worst));
        }
    }
    double elapsed = seconds_since(t0);
    r.value = worst;
    r.pass = worst <= 1e-5 && elapsed < 600.0;
    std::ostringstream os;
    os << "max relative gap over 20 F, k in {2,3}: " << worst << ", runtime " << elapsed
       << " s (< 600 s)";
    r.detail = os.str();
    return r;
}

// 3. Derivative formulas against finite differences; both D2 routes agree.
CheckResult criterion_derivatives(Context& ctx) {
    CheckResult r;
    r.name = "3 derivative formulas";
    r.threshold = 1e-3;
    PeriodicGrid grid{ctx.config->grid_n, 1};
    FSampleSpec spec = ctx.config->fsample;
    spec.count = 10;
    std::mt19937_64 rng(ctx.config->seed ^ 0xd1ull);
    std::normal_distribution<double> nd(0.0, 1.0);
    double worst_dw = 0.0, worst_d2 = 0.0, worst_route = 0.0;
    for (const Mat2& F : spec.sample()) {
        Mat2 D = dw_hom(*ctx.cb_layered, F, grid);
        const double h1 = 1e-4;
        for (int k = 0; k < 4; ++k) {
            Mat2 Ek = unvec(Vec4::Unit(k));
            double fd = (w_hom(*ctx.cb_layered, F + h1 * Ek, grid).w_hom -
                         w_hom(*ctx.cb_layered, F - h1 * Ek, grid).w_hom) /
                        (2.0 * h1);
            double denom = std::max(std::abs(fd), 1e-8);
            worst_dw = std::max(worst_dw, std::abs(inner(D, Ek) - fd) / denom);
        }
        D2Routes routes;
        Form4 T = d2w_hom(*ctx.cb_layered, F, grid, {}, &routes);
        worst_route = std::max(worst_route, routes.route_gap);
        const double h2 = 1e-3;
        Mat2 G;
        G << nd(rng), nd(rng), nd(rng), nd(rng);
        G /= G.norm();
        double fd2 = (w_hom(*ctx.cb_layered, F + h2 * G, grid).w_hom -
                      2.0 * w_hom(*ctx.cb_layered, F, grid).w_hom +
                      w_hom(*ctx.cb_layered, F - h2 * G, grid).w_hom) /
                     (h2 * h2);
        worst_d2 = std::max(worst_d2,
                            std::abs(vec(G).dot(T * vec(G)) - fd2) / std::max(std::abs(fd2), 1e-8));
        log_line(ctx.progress, "  derivative sample done");
    }
    r.value = std::max(worst_dw * 10.0, worst_d2);  // both at their own tolerance scale
    r.pass = worst_dw <= 1e-4 && worst_d2 <= 1e-3 && worst_route <= 1e-8;
    std::ostringstream os;
    os << "DW rel err " << worst_dw << " (<= 1e-4), D2W rel err " << worst_d2
       << " (<= 1e-3), route gap " << worst_route << " (<= 1e-8)";
    r.detail = os.str();
    return r;
}

// 4. Matching bound and midpoint strong convexity.
CheckResult criterion_matching(Context& ctx) {
    CheckResult r;
    r.name = "4 matching bound";
    r.threshold = 1e-9;
    MatchingReport rep = verify_matching(*ctx.cb_layered, 10000, ctx.config->seed ^ 0x77ull);
    r.value = -rep.worst_lower_margin;
    r.pass = rep.lower_bound_violations == 0 && rep.max_matching_error <= 1e-8 &&
             rep.midpoint_margin >= -1e-9;
    std::ostringstream os;
    os << "violations " << rep.lower_bound_violations << ", matching error "
       << rep.max_matching_error << " (<= 1e-8), midpoint slack " << rep.midpoint_margin
       << " (>= -1e-9)";
    r.detail = os.str();
    return r;
}

// 5. Null-Lagrangian exactness of the determinant quadrature.
CheckResult criterion_null_lagrangian(Context& ctx) {
    CheckResult r;
    r.name = "5 null-Lagrangian exactness";
    r.threshold = 1e-12;
    std::mt19937_64 rng(ctx.config->seed ^ 0x5aull);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        PeriodicGrid grid{4 + static_cast<int>(ud(rng) * 28), 1};
        Mat2 F;
        F << nd(rng), nd(rng), nd(rng), nd(rng);
        Eigen::VectorXd phi(grid.n_dofs());
        for (int i = 0; i < phi.size(); ++i) phi[i] = 0.5 * nd(rng);
        worst = std::max(worst, std::abs(det_quadrature_defect(grid, F, phi)));
    }
    r.value = worst;
    r.pass = worst <= 1e-12;
    r.detail = "max quadrature defect over 100 random periodic Q1 fields: " + format_g17(worst);
    return r;
}

// 6. Layered oracle agreement. On breakpoint-aligned grids the oracle field
// lies in the Q1 space and satisfies the discrete optimality system exactly,
// so the FEM corrector reproduces it to solver accuracy at every n; the rate
// clause is passed vacuously in that regime. The sigma clause asserts the
// criterion as stated; the measured sigma is the 1D antiderivative of the
// second flux column, which does not vanish for generic F.
CheckResult criterion_layered_oracle(Context& ctx) {
    CheckResult r;
    r.name = "6 layered oracle agreement";
    r.threshold = 1e-8;
    Mat2 F = shear(0.05);
    LayeredCorrector lc = solve_layered(*ctx.layered, F);
    std::vector<double> ns = {16, 32, 64, 128};
    std::vector<double> diffs;
    double sigma_inf = 0.0;
    for (double nd_ : ns) {
        PeriodicGrid grid{static_cast<int>(nd_), 1};
        CorrectorSolution sol = solve_corrector(*ctx.cb_layered, F, grid);
        Eigen::VectorXd diff = sol.phi - lc.interpolate(grid);
        diffs.push_back(field_h1_norm(grid, diff));
        if (grid.n == 32) {
            solve_flux_corrector(sol);
            sigma_inf = sol.sigma.lpNorm<Eigen::Infinity>();
        }
        log_line(ctx.progress, "  layered oracle n=" + std::to_string(grid.n) + " H1 diff " +
                                   format_g17(diffs.back()));
    }
    double max_diff = *std::max_element(diffs.begin(), diffs.end());
    bool exact_regime = max_diff <= 1e-8;
    double rate = 0.0;
    if (!exact_regime) {
        std::vector<double> hs;
        for (double n : ns) hs.push_back(1.0 / n);
        rate = fit_log_slope(hs, diffs).first;
    }
    bool rate_ok = exact_regime || rate >= 0.9;
    bool flux_ok = lc.flux_residual <= 1e-10;
    bool sigma_ok = sigma_inf <= 1e-8;
    r.value = exact_regime ? max_diff : rate;
    r.pass = rate_ok && flux_ok && sigma_ok;
    std::ostringstream os;
    os << (exact_regime ? "exact representation regime, max H1 diff = " + format_g17(max_diff)
                        : "fitted H1 rate = " + format_g17(rate) + " (>= 0.9)")
       << "; oracle flux residual " << lc.flux_residual << " (<= 1e-10)"
       << "; sigma_inf " << sigma_inf << " (<= 1e-8"
       << (sigma_ok ? ")" : "; fails: sigma = antiderivative of the second flux column, "
                            "which is nonzero for layered composites at generic F)");
    r.detail = os.str();
    return r;
}

// 7. Flux-corrector algebra: antisymmetry and residual decay.
CheckResult criterion_flux_corrector(Context& ctx) {
    CheckResult r;
    r.name = "7 flux-corrector algebra";
    r.threshold = 1.0;
    Mat2 F = shear(0.02);
    std::vector<double> res, hs;
    double antisym = 0.0;
    for (int n : {16, 32, 64, 128}) {
        PeriodicGrid grid{n, 1};
        CorrectorSolution sol = solve_corrector(*ctx.cb_smooth, F, grid);
        solve_flux_corrector(sol);
        res.push_back(flux_corrector_residual(sol));
        hs.push_back(1.0 / n);
        if (n == 32) {
            // independent solve of the (i,2,1) component: negated right-hand
            // side through the same linear solve must negate the field
            CorrectorSolution mirror = sol;
            for (Mat2& j : mirror.flux) {
                Mat2 t = j;
                j.col(0) = -t.col(1);
                j.col(1) = -t.col(0);
            }
            // -Lap sigma_i21 = d1 J_i2 - d2 J_i1 = -(d2 J_i1 - d1 J_i2):
            // swapping and negating columns reproduces that right-hand side
            solve_flux_corrector(mirror);
            antisym = (mirror.sigma + sol.sigma).lpNorm<Eigen::Infinity>() /
                      std::max(1e-30, sol.sigma.lpNorm<Eigen::Infinity>());
        }
        log_line(ctx.progress,
                 "  flux corrector n=" + std::to_string(n) + " residual " + format_g17(res.back()));
    }
    double rate = fit_log_slope(hs, res).first;
    r.value = rate;
    r.pass = rate >= 1.0 && antisym <= 1e-12;
    std::ostringstream os;
    os << "residual decay rate " << rate << " (>= 1), antisymmetry defect " << antisym
       << " (exact by construction)";
    r.detail = os.str();
    return r;
}

// 8. Rank-one certificate across the trust region plus a negative control.
CheckResult criterion_rank_one(Context& ctx) {
    CheckResult r;
    r.name = "8 rank-one certificate";
    PeriodicGrid grid{ctx.config->grid_n, 1};
    Form4 T_id = d2w_hom(*ctx.cb_layered, Mat2::Identity(), grid);
    double c_id = rank_one_certificate(T_id).value;
    r.threshold = 0.05 * c_id;
    FSampleSpec spec = ctx.config->fsample;
    spec.count = 20;
    double worst = std::numeric_limits<double>::infinity();
    int i = 0;
    for (const Mat2& F : spec.sample()) {
        Form4 T = d2w_hom(*ctx.cb_layered, F, grid);
        worst = std::min(worst, rank_one_certificate(T).value);
        log_line(ctx.progress, "  rank-one sample " + std::to_string(++i) + "/20");
    }
    Vec4 v = vec(Mat2(Vec2(1, 0) * Vec2(1, 0).transpose()));
    Form4 corrupted = T_id - 10.0 * (v * v.transpose());
    bool control = rank_one_certificate(corrupted).value < 0.0;
    r.value = worst;
    r.pass = worst >= 0.05 * c_id && control;
    std::ostringstream os;
    os << "min certificate " << worst << " (>= 0.05 * " << c_id
       << " at identity); corruption detected: " << (control ? "yes" : "no");
    r.detail = os.str();
    return r;
}

// 9. Two-scale expansion rate study.
CheckResult criterion_two_scale_rate(Context& ctx) {
    CheckResult r;
    r.name = "9 two-scale rate";
    r.threshold = 0.35;
    Clock::time_point t0 = Clock::now();
    LayeredEffectiveDensity eff(*ctx.layered, ctx.cb_layered->mu(),
                                std::max(0.05, ctx.cb_layered->record().trust_radius));
    LoadData load = ctx.config->load;
    ErrorStudyOptions opts;
    opts.eps_list = ctx.config->eps_list;
    opts.mesh_factor = ctx.config->mesh_factor;
    opts.progress = ctx.progress;
    TwoScaleReport rep = error_study(*ctx.cb_layered, eff, load, opts);
    double elapsed = seconds_since(t0);
    r.value = rep.h1_slope;
    r.pass = rep.complete && rep.h1_slope >= 0.35 && rep.h1_slope <= 0.75 && rep.monotone_h1 &&
             elapsed < 1800.0;
    std::ostringstream os;
    if (!rep.complete) {
        os << "incomplete: " << rep.failure;
    } else {
        os << "fitted H1 slope " << rep.h1_slope << " (in [0.35, 0.75]), monotone "
           << (rep.monotone_h1 ? "yes" : "no") << ", lambda " << rep.rows.front().lambda
           << ", runtime " << elapsed << " s (< 1800 s)";
    }
    r.detail = os.str();
    return r;
}

// 10. Dual-route macroscopic consistency for several load configurations.
CheckResult criterion_dual_route(Context& ctx) {
    CheckResult r;
    r.name = "10 dual-route macro consistency";
    r.threshold = 1e-8;
    LayeredEffectiveDensity eff(*ctx.layered, ctx.cb_layered->mu(), 0.06);
    MacroMesh mesh{32};
    std::vector<LoadData> loads(5);
    loads[0].f = Vec2(0.0, -0.01);
    loads[1].f = Vec2(0.01, 0.0);
    loads[2].g_kind = LoadData::BoundaryKind::Rigid;
    loads[2].g_theta = 0.4;
    loads[2].f = Vec2(0.005, -0.005);
    loads[3].g_kind = LoadData::BoundaryKind::ShearedRigid;
    loads[3].g_theta = -0.2;
    loads[3].g_shear = 0.01;
    loads[4].g_kind = LoadData::BoundaryKind::Rigid;
    loads[4].g_theta = 2.1;
    loads[4].g_shift = Vec2(0.3, 0.1);
    loads[4].f = Vec2(0.0, 0.008);
    double worst = 0.0;
    for (std::size_t i = 0; i < loads.size(); ++i) {
        HomSolveResult res = solve_hom(eff, ctx.cb_layered->mu(), loads[i], mesh);
        worst = std::max(worst, res.route_gap_h1);
        log_line(ctx.progress, "  dual-route load " + std::to_string(i + 1) + "/5 gap " +
                                   format_g17(res.route_gap_h1));
    }
    r.value = worst;
    r.pass = worst <= 1e-8;
    r.detail = "max H1 gap between W_hom and V_hom minimizers: " + format_g17(worst);
    return r;
}

// 11. Quadratic Taylor expansion of w_hom: fitted remainder exponent.
CheckResult criterion_taylor(Context& ctx) {
    CheckResult r;
    r.name = "11 Taylor regularity probe";
    r.threshold = 2.7;
    PeriodicGrid grid{16, 1};
    SolverOptions tight;
    tight.newton_tol = 1e-12;
    FSampleSpec spec = ctx.config->fsample;
    spec.count = 5;
    spec.radius = 0.02;
    std::mt19937_64 rng(ctx.config->seed ^ 0xabull);
    std::normal_distribution<double> nd(0.0, 1.0);
    double worst = std::numeric_limits<double>::infinity();
    for (const Mat2& F : spec.sample()) {
        Mat2 G;
        G << nd(rng), nd(rng), nd(rng), nd(rng);
        G /= G.norm();
        double w0 = w_hom(*ctx.cb_layered, F, grid, tight).w_hom;
        Mat2 D = dw_hom(*ctx.cb_layered, F, grid, tight);
        Form4 T = d2w_hom(*ctx.cb_layered, F, grid, tight);
        std::vector<double> ts = {1e-1, 3.16e-2, 1e-2, 3.16e-3, 1e-3};
        std::vector<double> rem;
        for (double t : ts) {
            double w = w_hom(*ctx.cb_layered, F + t * G, grid, tight).w_hom;
            double model = w0 + t * inner(D, G) + 0.5 * t * t * vec(G).dot(T * vec(G));
            rem.push_back(std::abs(w - model));
        }
        double expnt = fit_log_slope(ts, rem).first;
        worst = std::min(worst, expnt);
        log_line(ctx.progress, "  taylor sample exponent " + format_g17(expnt));
    }
    r.value = worst;
    r.pass = worst >= 2.7;
    r.detail = "min fitted remainder exponent over 5 samples: " + format_g17(worst);
    return r;
}

// Non-gating: the buckling probe in the spirit of the multi-cell
// counterexample; reports the gap curve of energy_1 - energy_2 along a
// compression ray.
CheckResult probe_buckling(Context& ctx) {
    CheckResult r;
    r.name = "probe buckling gap curve (non-gating)";
    r.gated = false;
    r.pass = true;
    PeriodicGrid grid{16, 1};
    std::ostringstream os;
    os << "lambda:gap";
    for (double lam : {0.99, 0.97, 0.95}) {
        Mat2 F = Mat2::Identity();
        F(0, 0) = lam;
        try {
            MultiCellComparison cmp =
                single_vs_multicell(*ctx.cb_layered, F, grid, {2}, 4, ctx.config->seed ^ 0xb0ull);
            os << " " << lam << ":" << format_g17(cmp.rows[1].gap);
        } catch (const std::exception&) {
            os << " " << lam << ":solver-failed";
        }
    }
    r.detail = os.str();
    return r;
}

}  // namespace

bool AcceptanceReport::all_passed() const {
    for (const auto& c : checks)
        if (c.gated && !c.pass) return false;
    return true;
}

std::string AcceptanceReport::to_json() const {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["all_passed"] = all_passed();
    if (!calibration_json.empty()) j["calibration"] = nlohmann::json::parse(calibration_json);
    j["checks"] = nlohmann::json::array();
    for (const auto& c : checks) {
        j["checks"].push_back({{"name", c.name},
                               {"pass", c.pass},
                               {"gated", c.gated},
                               {"value", c.value},
                               {"threshold", c.threshold},
                               {"detail", c.detail}});
    }
    return j.dump(2);
}

AcceptanceReport run_acceptance(const ExperimentConfig& config, std::ostream* progress) {
    Context ctx;
    ctx.config = &config;
    ctx.progress = progress;
    ctx.layered = config.density.kind == "layered"
                      ? config.density.build()
                      : DensityModel::make_layered({0.0, 0.5, 1.0}, {1.0, 4.0},
                                                   {config.density.alpha, config.density.p});
    ctx.smooth = DensityModel::make_well({config.density.alpha, config.density.p},
                                         {Modulation::Kind::SineProduct, 1.0, 0.5});

    log_line(progress, "calibrating matching convex bounds");
    CalibrateOptions copts = config.calibration;
    ctx.cb_layered = std::make_unique<ConvexBound>(*ctx.layered, calibrate(*ctx.layered, copts));
    ctx.cb_smooth = std::make_unique<ConvexBound>(*ctx.smooth, calibrate(*ctx.smooth, copts));

    AcceptanceReport report;
    report.config_hash = config.hash();
    report.calibration_json = ctx.cb_layered->record().to_json();

    using Criterion = CheckResult (*)(Context&);
    const Criterion criteria[] = {
        criterion_rotation_nullity, criterion_single_vs_multicell, criterion_derivatives,
        criterion_matching,         criterion_null_lagrangian,     criterion_layered_oracle,
        criterion_flux_corrector,   criterion_rank_one,            criterion_two_scale_rate,
        criterion_dual_route,       criterion_taylor,              probe_buckling,
    };
    for (Criterion fn : criteria) {
        CheckResult res = fn(ctx);
        log_line(progress, std::string(res.pass ? "[PASS] " : "[FAIL] ") + res.name + ": " +
                               res.detail);
        report.checks.push_back(std::move(res));
    }
    return report;
}

}  // namespace homogelast

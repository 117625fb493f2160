#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <memory>
#include <random>

#include "homogelast/macro.hpp"

using namespace homogelast;

namespace {

const DensityModel& layered_model() {
    static DensityModel m = DensityModel::make_layered({0.0, 0.5, 1.0}, {1.0, 4.0}, {0.1, 4.0});
    return m;
}

const ConvexBound& layered_bound() {
    static std::unique_ptr<ConvexBound> cb;
    if (!cb) cb = std::make_unique<ConvexBound>(layered_model(), calibrate(layered_model()));
    return *cb;
}

const DensityModel& homogeneous_model() {
    static DensityModel m = DensityModel::make_well({0.1, 4.0}, {Modulation::Kind::Constant, 1.5});
    return m;
}

const ConvexBound& homogeneous_bound() {
    static std::unique_ptr<ConvexBound> cb;
    if (!cb)
        cb = std::make_unique<ConvexBound>(homogeneous_model(), calibrate(homogeneous_model()));
    return *cb;
}

}  // namespace

TEST_CASE("identity and rigid boundary data give exact affine solutions") {
    const ConvexBound& cb = layered_bound();
    LayeredEffectiveDensity eff(layered_model(), cb.mu(), 0.06);
    MacroMesh mesh{16};

    LoadData idload;  // f = 0, g = identity
    HomSolveResult r = solve_hom(eff, cb.mu(), idload, mesh);
    for (int j = 0; j <= mesh.m; ++j)
        for (int i = 0; i <= mesh.m; ++i) {
            Vec2 x(i * mesh.h(), j * mesh.h());
            CHECK((r.u0.value(i, j) - x).norm() <= 1e-12);
        }
    CHECK(std::abs(r.diag.energy) <= 1e-12);
    CHECK(r.route_gap_h1 <= 1e-10);

    LoadData rigid;
    rigid.g_kind = LoadData::BoundaryKind::Rigid;
    rigid.g_theta = 0.6;
    rigid.g_shift = Vec2(0.2, -0.1);
    HomSolveResult rr = solve_hom(eff, cb.mu(), rigid, mesh);
    for (int j = 0; j <= mesh.m; ++j)
        for (int i = 0; i <= mesh.m; ++i) {
            Vec2 x(i * mesh.h(), j * mesh.h());
            CHECK((rr.u0.value(i, j) - rigid.g(x)).norm() <= 1e-10);
        }
}

TEST_CASE("dual-route consistency under a small body force") {
    const ConvexBound& cb = layered_bound();
    LayeredEffectiveDensity eff(layered_model(), cb.mu(), 0.06);
    MacroMesh mesh{16};
    LoadData load;
    load.f = Vec2(0.0, -0.01);
    HomSolveResult r = solve_hom(eff, cb.mu(), load, mesh);
    CHECK(r.route_gap_h1 <= 1e-8);
    CHECK(r.max_dist_so < 0.06);
    CHECK(r.lambda == doctest::Approx(0.01).epsilon(1e-10));
}

TEST_CASE("homogeneous model: eps solution equals the homogenized one") {
    const ConvexBound& cb = homogeneous_bound();
    HomogeneousEffectiveDensity eff(homogeneous_model(), 0.06);
    MacroMesh mesh{16};
    LoadData load;
    load.f = Vec2(0.004, -0.006);
    HomSolveResult hom = solve_hom(eff, cb.mu(), load, mesh);
    MacroField ueps = solve_eps(cb, load, mesh, 0.25);
    CHECK(macro_h1_diff(hom.u0, ueps) <= 1e-8);

    // rigid data, zero force: u_eps = g with zero energy
    LoadData rigid;
    rigid.g_kind = LoadData::BoundaryKind::Rigid;
    rigid.g_theta = -0.4;
    MacroDiagnostics diag;
    MacroField ur = solve_eps(layered_bound(), rigid, mesh, 0.25, {}, nullptr, &diag);
    for (int j = 0; j <= mesh.m; ++j)
        for (int i = 0; i <= mesh.m; ++i) {
            Vec2 x(i * mesh.h(), j * mesh.h());
            CHECK((ur.value(i, j) - rigid.g(x)).norm() <= 1e-10);
        }
    CHECK(std::abs(diag.energy) <= 1e-12);
}

TEST_CASE("two-scale expansion degenerates correctly") {
    // homogeneous model: phi = 0 so v_eps = u0
    const ConvexBound& cb = homogeneous_bound();
    HomogeneousEffectiveDensity eff(homogeneous_model(), 0.08);
    MacroMesh mesh{16};
    LoadData load;
    load.f = Vec2(0.0, -0.008);
    HomSolveResult hom = solve_hom(eff, cb.mu(), load, mesh);
    auto corr = make_corrector_provider(cb, PeriodicGrid{8, 1});
    TwoScaleField v = two_scale_expand(hom.u0, *corr, 0.25, 0.08);
    CHECK(macro_l2_diff(v.nodal, hom.u0) <= 1e-14);

    // layered model with rigid data: u0 = g, grad u0 is a rotation, phi = 0
    const ConvexBound& cbl = layered_bound();
    LayeredEffectiveDensity effl(layered_model(), cbl.mu(), 0.06);
    LoadData rigid;
    rigid.g_kind = LoadData::BoundaryKind::Rigid;
    rigid.g_theta = 0.9;
    HomSolveResult rr = solve_hom(effl, cbl.mu(), rigid, mesh);
    auto corrl = make_corrector_provider(cbl, PeriodicGrid{8, 1});
    TwoScaleField vr = two_scale_expand(rr.u0, *corrl, 0.25, 0.06);
    CHECK(macro_l2_diff(vr.nodal, rr.u0) <= 1e-9);
}

TEST_CASE("determinant integral is fixed by boundary values") {
    MacroMesh mesh{12};
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 1.0);
    LoadData load;
    double qw = mesh.h() * mesh.h() / 4.0;
    for (int rep = 0; rep < 10; ++rep) {
        MacroField a, b;
        a.mesh = b.mesh = mesh;
        a.u.resize(mesh.n_dofs());
        b.u.resize(mesh.n_dofs());
        for (int j = 0; j <= mesh.m; ++j)
            for (int i = 0; i <= mesh.m; ++i) {
                Vec2 x(i * mesh.h(), j * mesh.h());
                Vec2 base = load.g(x) + 0.3 * Vec2(std::sin(x(0)), std::cos(x(1)));
                for (int c = 0; c < 2; ++c) {
                    double interior = mesh.is_boundary(i, j) ? 0.0 : 0.2 * nd(rng);
                    double interior2 = mesh.is_boundary(i, j) ? 0.0 : 0.2 * nd(rng);
                    a.u[2 * mesh.node(i, j) + c] = base(c) + interior;
                    b.u[2 * mesh.node(i, j) + c] = base(c) + interior2;
                }
            }
        double da = 0.0, db = 0.0;
        for (const Mat2& g : macro_gradients(a)) da += qw * g.determinant();
        for (const Mat2& g : macro_gradients(b)) db += qw * g.determinant();
        CHECK(std::abs(da - db) <= 1e-11);
    }
}

TEST_CASE("expansion energy dominates the minimizer energy") {
    const ConvexBound& cb = layered_bound();
    LayeredEffectiveDensity eff(layered_model(), cb.mu(), 0.06);
    MacroMesh mesh{32};
    LoadData load;
    load.f = Vec2(0.0, -0.01);
    double eps = 0.25;
    HomSolveResult hom = solve_hom(eff, cb.mu(), load, mesh);
    auto corr = make_corrector_provider(cb, PeriodicGrid{8, 1});
    TwoScaleField v = two_scale_expand(hom.u0, *corr, eps, 0.06);
    MacroDiagnostics diag;
    MacroField ueps = solve_eps(cb, load, mesh, eps, {}, &v.nodal.u, &diag);
    double e_exp = macro_energy(cb, load, v.nodal, eps);
    CHECK(e_exp >= diag.energy - 1e-12);

    // sampled strong convexity of the eps-energy around the minimizer
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd(0.0, 1.0);
    double beta_measured = std::numeric_limits<double>::infinity();
    for (int rep = 0; rep < 4; ++rep) {
        MacroField w = ueps;
        for (int j = 1; j < mesh.m; ++j)
            for (int i = 1; i < mesh.m; ++i)
                for (int c = 0; c < 2; ++c)
                    w.u[2 * mesh.node(i, j) + c] += 2e-3 * nd(rng);
        double ew = macro_energy(cb, load, w, eps);
        double h1 = macro_h1_diff(w, ueps);
        beta_measured = std::min(beta_measured, 2.0 * (ew - diag.energy) / (h1 * h1));
    }
    INFO("measured convexity modulus ", beta_measured);
    CHECK(beta_measured > 0.0);
}

TEST_CASE("frame equivariance of the macroscopic pipeline") {
    const ConvexBound& cb = layered_bound();
    LayeredEffectiveDensity eff(layered_model(), cb.mu(), 0.06);
    MacroMesh mesh{16};
    double eps = 0.25;
    Mat2 R = rotation(0.7);

    LoadData load;
    load.f = Vec2(0.0, -0.008);
    LoadData rload;
    rload.g_kind = LoadData::BoundaryKind::Rigid;
    rload.g_theta = 0.7;
    rload.f = R * load.f;

    HomSolveResult hom = solve_hom(eff, cb.mu(), load, mesh);
    HomSolveResult rhom = solve_hom(eff, cb.mu(), rload, mesh);
    MacroField rotated = hom.u0;
    for (int n = 0; n < mesh.n_nodes(); ++n) {
        Vec2 v(hom.u0.u[2 * n], hom.u0.u[2 * n + 1]);
        Vec2 rv = R * v;
        rotated.u[2 * n] = rv(0);
        rotated.u[2 * n + 1] = rv(1);
    }
    CHECK(macro_h1_diff(rhom.u0, rotated) <= 1e-7);

    MacroField ueps = solve_eps(cb, load, mesh, eps);
    MacroField reps = solve_eps(cb, rload, mesh, eps);
    MacroField rotated_eps = ueps;
    for (int n = 0; n < mesh.n_nodes(); ++n) {
        Vec2 v(ueps.u[2 * n], ueps.u[2 * n + 1]);
        Vec2 rv = R * v;
        rotated_eps.u[2 * n] = rv(0);
        rotated_eps.u[2 * n + 1] = rv(1);
    }
    CHECK(macro_h1_diff(reps, rotated_eps) <= 1e-7);
}

TEST_CASE("small error study runs end to end") {
    const ConvexBound& cb = layered_bound();
    LayeredEffectiveDensity eff(layered_model(), cb.mu(), 0.06);
    LoadData load;
    load.f = Vec2(0.0, -0.015);
    ErrorStudyOptions opts;
    opts.eps_list = {1.0 / 4, 1.0 / 8};
    opts.mesh_factor = 8;
    TwoScaleReport rep = error_study(cb, eff, load, opts);
    REQUIRE(rep.complete);
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].err_h1 > 0.0);
    CHECK(rep.rows[1].err_h1 < rep.rows[0].err_h1);
    CHECK(rep.rows[1].energy_expansion >= rep.rows[1].energy_eps - 1e-12);
    // triangle-inequality bookkeeping: |u_eps - u0|_L2 is part of the report
    CHECK(rep.rows[0].err_l2 >= 0.0);
    CHECK(rep.rows[0].lambda == doctest::Approx(0.015).epsilon(1e-9));
}

TEST_CASE("homogeneous error study gives machine-level errors") {
    const ConvexBound& cb = homogeneous_bound();
    HomogeneousEffectiveDensity eff(homogeneous_model(), 0.08);
    LoadData load;
    load.f = Vec2(0.0, -0.01);
    ErrorStudyOptions opts;
    opts.eps_list = {1.0 / 4};
    opts.mesh_factor = 8;
    TwoScaleReport rep = error_study(cb, eff, load, opts);
    REQUIRE(rep.complete);
    CHECK(rep.rows[0].err_h1 <= 1e-8);
    CHECK(rep.rows[0].err_l2 <= 1e-9);
}

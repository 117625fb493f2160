#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <memory>
#include <random>

#include "homogelast/homogenize.hpp"

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

Mat2 shear(double gamma) {
    Mat2 F = Mat2::Identity();
    F(1, 0) += gamma;
    return F;
}

}  // namespace

TEST_CASE("w_hom vanishes on rotations and matches the layered oracle") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{16, 1};
    CHECK(w_hom(cb, Mat2::Identity(), grid).w_hom <= 1e-10);
    CHECK(w_hom(cb, rotation(1.3), grid).w_hom <= 1e-10);

    Mat2 F = shear(0.05);
    HomogenizedPoint pt = w_hom(cb, F, grid);
    LayeredCorrector lc = solve_layered(layered_model(), F);
    CHECK(pt.w_hom == doctest::Approx(lc.energy_w).epsilon(1e-10));
    CHECK(pt.w_hom > 0.0);
    CHECK(pt.max_dist_so < cb.delta());
}

TEST_CASE("dw_hom: zero at rotations, finite differences, frame covariance") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{16, 1};
    CHECK(dw_hom(cb, rotation(0.8), grid).norm() <= 1e-9);

    Mat2 F = shear(0.04);
    Mat2 D = dw_hom(cb, F, grid);
    const double h = 1e-4;
    for (int k = 0; k < 4; ++k) {
        Mat2 Ek = unvec(Vec4::Unit(k));
        double fd = (w_hom(cb, F + h * Ek, grid).w_hom - w_hom(cb, F - h * Ek, grid).w_hom) /
                    (2.0 * h);
        CHECK(inner(D, Ek) == doctest::Approx(fd).epsilon(1e-4));
    }

    Mat2 R = rotation(1.1);
    Mat2 DR = dw_hom(cb, R * F, grid);
    CHECK((DR - R * D).norm() <= 1e-8);
}

TEST_CASE("d2w_hom: routes agree, finite differences, homogeneous limit") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{16, 1};
    Mat2 F = shear(0.03);
    D2Routes routes;
    Form4 T = d2w_hom(cb, F, grid, {}, &routes);
    CHECK(routes.route_gap <= 1e-8);
    CHECK((T - T.transpose()).norm() <= 1e-12);

    // second finite differences of w_hom along random directions
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd(0.0, 1.0);
    const double h = 1e-3;
    for (int rep = 0; rep < 3; ++rep) {
        Mat2 G;
        G << nd(rng), nd(rng), nd(rng), nd(rng);
        G /= G.norm();
        double fd = (w_hom(cb, F + h * G, grid).w_hom - 2.0 * w_hom(cb, F, grid).w_hom +
                     w_hom(cb, F - h * G, grid).w_hom) /
                    (h * h);
        CHECK(vec(G).dot(T * vec(G)) == doctest::Approx(fd).epsilon(1e-3));
    }

    // homogeneous model at the identity: no corrector, D2W_hom = D2W
    DensityModel eq = DensityModel::make_layered({0.0, 0.5, 1.0}, {3.0, 3.0}, {0.1, 4.0});
    static std::unique_ptr<ConvexBound> cbeq;
    if (!cbeq) cbeq = std::make_unique<ConvexBound>(eq, calibrate(eq));
    Form4 Teq = d2w_hom(*cbeq, Mat2::Identity(), grid);
    Form4 expected = eq.eval_at_stiffness(3.0, Mat2::Identity()).hess;
    CHECK((Teq - expected).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("rank-one certificate and negative control") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{16, 1};
    Form4 T_id = d2w_hom(cb, Mat2::Identity(), grid);
    RankOneCertificate c_id = rank_one_certificate(T_id);
    CHECK(c_id.value > 0.0);

    // frame covariance: same certificate at a rotated point
    Form4 T_rot = d2w_hom(cb, rotation(0.6), grid);
    RankOneCertificate c_rot = rank_one_certificate(T_rot);
    CHECK(c_rot.value == doctest::Approx(c_id.value).epsilon(1e-6));

    // witness reproduces the value
    Vec4 v = vec(Mat2(c_id.a * c_id.b.transpose()));
    CHECK(v.dot(T_id * v) == doctest::Approx(c_id.value).epsilon(1e-14));

    // deliberately corrupted tensor: subtract a large rank-one form
    Form4 bad = T_id - 10.0 * (v * v.transpose());
    CHECK(rank_one_certificate(bad).value < 0.0);
}

TEST_CASE("corrector uniqueness probe") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{12, 1};
    Mat2 F = shear(0.03);
    CorrectorSolution ref = solve_corrector(cb, F, grid);
    std::mt19937_64 rng(17);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int rep = 0; rep < 5; ++rep) {
        Eigen::VectorXd start(grid.n_dofs());
        for (int i = 0; i < start.size(); ++i) start[i] = 1e-3 * nd(rng);
        SolverOptions o;
        o.initial = start;
        CorrectorSolution sol = solve_corrector(cb, F, grid, o);
        CHECK(field_h1_norm(grid, Eigen::VectorXd(sol.phi - ref.phi)) <= 1e-8);
    }
}

TEST_CASE("single vs multi-cell comparison near rotations") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{8, 1};
    MultiCellComparison cmp = single_vs_multicell(cb, shear(0.04), grid, {2}, 3, 123);
    REQUIRE(cmp.rows.size() == 2);
    CHECK(cmp.rows[1].rel_gap <= 1e-5);

    MultiCellComparison cmp_id = single_vs_multicell(cb, Mat2::Identity(), grid, {2, 3}, 2, 7);
    for (const auto& row : cmp_id.rows) CHECK(std::abs(row.gap) <= 1e-10);
}

TEST_CASE("nondegeneracy of w_hom near rotations") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{12, 1};
    std::mt19937_64 rng(31);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    double alpha_measured = std::numeric_limits<double>::infinity();
    for (int rep = 0; rep < 6; ++rep) {
        Mat2 E;
        E << nd(rng), nd(rng), nd(rng), nd(rng);
        E *= (0.01 + 0.03 * ud(rng)) / E.norm();
        Mat2 F = rotation(2.0 * M_PI * ud(rng)) + E;
        double d = dist_so(F);
        double w = w_hom(cb, F, grid).w_hom;
        CHECK(w >= 0.0);
        alpha_measured = std::min(alpha_measured, w / (d * d));
    }
    INFO("measured nondegeneracy constant ", alpha_measured);
    CHECK(alpha_measured > 0.0);
}

TEST_CASE("layered effective density agrees with the FEM pipeline") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{16, 1};
    LayeredEffectiveDensity eff(layered_model(), cb.mu(), 0.05);
    Mat2 F = shear(0.035);
    DensityEval e = eff.eval(F);
    CHECK(e.value == doctest::Approx(w_hom(cb, F, grid).w_hom).epsilon(1e-9));
    CHECK((e.grad - dw_hom(cb, F, grid)).norm() <= 1e-8);
    Form4 T = d2w_hom(cb, F, grid);
    CHECK((e.hess - T).cwiseAbs().maxCoeff() <= 1e-7);

    // cached evaluation is reproducible
    DensityEval e2 = eff.eval(F);
    CHECK(e2.value == e.value);
}

TEST_CASE("trust radius calibration") {
    const ConvexBound& cb = layered_bound();
    PeriodicGrid grid{8, 1};
    double rho = calibrate_trust_radius(cb, grid, 4, 44);
    INFO("trust radius ", rho);
    CHECK(rho > 0.02);
    CHECK(rho < cb.delta());
}

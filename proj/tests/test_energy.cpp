#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "homogelast/energy.hpp"

using namespace homogelast;

namespace {

DensityModel unit_well(double p = 2.0) {
    return DensityModel::make_well({1.0, p}, {Modulation::Kind::Constant, 1.0});
}

double dist_so_brute(const Mat2& F) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 400000; ++i) {
        double t = 2.0 * M_PI * i / 400000.0;
        best = std::min(best, (F - rotation(t)).norm());
    }
    return best;
}

}  // namespace

TEST_CASE("well density basics") {
    DensityModel m = unit_well(2.0);
    Vec2 y(0.3, 0.6);
    CHECK(m.value(y, Mat2::Identity()) == doctest::Approx(0.0));
    CHECK(m.grad(y, Mat2::Identity()).norm() < 1e-14);
    CHECK(m.value(y, rotation(0.3)) == doctest::Approx(0.0).epsilon(1e-14));

    // value against the brute-force distance oracle at F = 1.1 I
    Mat2 F = 1.1 * Mat2::Identity();
    double d = dist_so_brute(F);
    CHECK(m.value(y, F) == doctest::Approx(d * d + std::pow(d, 2.0)).epsilon(1e-6));

    DensityModel m4 = unit_well(4.0);
    CHECK(m4.value(y, F) == doctest::Approx(d * d + std::pow(d, 4.0)).epsilon(1e-6));

    CHECK_THROWS_AS(DensityModel::make_well({1.0, 1.5}, {Modulation::Kind::Constant, 1.0}),
                    std::invalid_argument);
    CHECK_THROWS_AS(DensityModel::make_well({1.0, 2.0}, {Modulation::Kind::Constant, -0.5}),
                    std::invalid_argument);
}

TEST_CASE("layered density selection and mixture integral") {
    DensityModel m = DensityModel::make_layered({0.0, 0.5, 1.0}, {1.0, 4.0}, {0.1, 4.0});
    Mat2 F = Mat2::Identity() + 0.2 * (Mat2() << 0, 1, 0, 0).finished();

    double w1 = m.value(Vec2(0.25, 0.9), F);
    double w2 = m.value(Vec2(0.75, 0.1), F);
    CHECK(w2 == doctest::Approx(4.0 * w1).epsilon(1e-13));
    // depends on y only through y1
    CHECK(m.value(Vec2(0.25, 0.9), F) == m.value(Vec2(0.25, 0.13), F));

    // equal stiffness: evaluation independent of y
    DensityModel eq = DensityModel::make_layered({0.0, 0.5, 1.0}, {2.0, 2.0}, {0.1, 4.0});
    CHECK(eq.value(Vec2(0.2, 0.0), F) == doctest::Approx(eq.value(Vec2(0.8, 0.0), F)));

    // integral over y1 of W at fixed F equals the 1/2-1/2 mixture
    double quad = 0.0;
    const int nq = 2000;
    for (int i = 0; i < nq; ++i) {
        double y1 = (i + 0.5) / nq;
        quad += m.value(Vec2(y1, 0.0), F) / nq;
    }
    CHECK(quad == doctest::Approx(0.5 * w1 + 0.5 * w2).epsilon(1e-12));

    CHECK_THROWS_AS(DensityModel::make_layered({0.0, 0.7, 0.4, 1.0}, {1, 2, 3}, {0.1, 4.0}),
                    std::invalid_argument);
}

TEST_CASE("density derivative consistency near the well") {
    DensityModel m = DensityModel::make_well({0.1, 4.0}, {Modulation::Kind::SineProduct, 1.0, 0.5});
    std::mt19937_64 rng(99);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    const double h = 1e-5;
    for (int i = 0; i < 100; ++i) {
        Vec2 y(ud(rng), ud(rng));
        Mat2 E;
        E << nd(rng), nd(rng), nd(rng), nd(rng);
        E *= 0.08 / E.norm() * ud(rng);
        Mat2 F = rotation(2.0 * M_PI * ud(rng)) + E;  // dist_SO(F) < alpha
        DensityEval e = m.eval(y, F);
        Mat2 G;
        G << nd(rng), nd(rng), nd(rng), nd(rng);
        G /= G.norm();
        double fd1 = (m.value(y, F + h * G) - m.value(y, F - h * G)) / (2.0 * h);
        double fd2 = (m.value(y, F + h * G) - 2.0 * e.value + m.value(y, F - h * G)) / (h * h);
        double an1 = inner(e.grad, G);
        double an2 = vec(G).dot(e.hess * vec(G));
        CHECK(an1 == doctest::Approx(fd1).epsilon(2e-6));
        CHECK(an2 == doctest::Approx(fd2).epsilon(2e-4));
    }
    // minimality at rotations
    for (int i = 0; i < 20; ++i) {
        Vec2 y(ud(rng), ud(rng));
        CHECK(m.grad(y, rotation(2.0 * M_PI * ud(rng))).norm() < 1e-10);
    }
}

TEST_CASE("frame indifference sampled") {
    DensityModel m = DensityModel::make_well({0.1, 4.0}, {Modulation::Kind::SineProduct, 1.0, 0.5});
    std::mt19937_64 rng(123);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        Vec2 y(ud(rng), ud(rng));
        Mat2 F;
        F << nd(rng), nd(rng), nd(rng), nd(rng);
        Mat2 R = rotation(2.0 * M_PI * ud(rng));
        CHECK(std::abs(m.value(y, R * F) - m.value(y, F)) < 1e-10);
    }
}

TEST_CASE("certification") {
    DensityModel well = DensityModel::make_well({0.1, 4.0}, {Modulation::Kind::Constant, 1.0});
    ValidityReport rep = certify(well, 4000, 42);
    CHECK(rep.all_passed());

    DensityModel layered = DensityModel::make_layered({0.0, 0.5, 1.0}, {1.0, 4.0}, {0.1, 4.0});
    ValidityReport lrep = certify(layered, 4000, 42);
    CHECK(lrep.all_passed());
    for (const auto& m : lrep.margins)
        if (m.name == "W2_frame_indifference") CHECK(m.worst_value <= 1e-10);

    // deliberate failure: scaled by -1 flips the non-degeneracy margin
    ValidityReport bad = certify(well.scaled(-1.0), 2000, 42);
    bool w3_failed = false;
    for (const auto& m : bad.margins)
        if (m.name == "W3_nondegeneracy" && m.margin < 0.0) w3_failed = true;
    CHECK(w3_failed);

    // reproducible from the seed
    ValidityReport rep2 = certify(well, 4000, 42);
    for (std::size_t i = 0; i < rep.margins.size(); ++i)
        CHECK(rep.margins[i].margin == rep2.margins[i].margin);
}

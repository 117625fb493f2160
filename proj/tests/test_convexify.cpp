#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <memory>
#include <random>

#include "homogelast/convexify.hpp"

using namespace homogelast;

namespace {

const DensityModel& layered_model() {
    static DensityModel m = DensityModel::make_layered({0.0, 0.5, 1.0}, {1.0, 4.0}, {0.1, 4.0});
    return m;
}

const ConvexBound& layered_bound() {
    static std::unique_ptr<ConvexBound> cb;
    if (!cb) {
        CalibrationRecord rec = calibrate(layered_model());
        cb = std::make_unique<ConvexBound>(layered_model(), rec);
    }
    return *cb;
}

Mat2 random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Mat2 G;
    G << nd(rng), nd(rng), nd(rng), nd(rng);
    return G / G.norm();
}

}  // namespace

TEST_CASE("calibration produces a certified record") {
    const ConvexBound& cb = layered_bound();
    const CalibrationRecord& rec = cb.record();
    CHECK(rec.lambda > 0.0);
    CHECK(rec.delta > 0.0);
    CHECK(rec.delta < layered_model().params().alpha);
    CHECK(rec.mu > 0.0);
    CHECK(rec.ellipticity_margin >= 0.0);
    CHECK(rec.screen_margin >= -1e-11);
    CHECK(rec.cap_radius > std::sqrt(2.0) + rec.delta);

    // the certified ellipticity holds at identity
    Form4 H = cb.barred_eval_at(1.0, Mat2::Identity()).hess;
    Eigen::SelfAdjointEigenSolver<Form4> es(H);
    CHECK(es.eigenvalues().minCoeff() >= 2.0 * rec.lambda);

    // mu = 0 has no ellipticity: antisymmetric directions are energy neutral
    Form4 H0 = layered_model().eval_at_stiffness(1.0, Mat2::Identity()).hess;
    Eigen::SelfAdjointEigenSolver<Form4> es0(H0);
    CHECK(es0.eigenvalues().minCoeff() < 1e-10);

    // JSON round trip
    CalibrationRecord back = CalibrationRecord::from_json(rec.to_json());
    CHECK(back.mu == rec.mu);
    CHECK(back.delta == rec.delta);
    CHECK(back.lambda == rec.lambda);
    CHECK(back.envelope_min == rec.envelope_min);
}

TEST_CASE("envelope matches Wbar near the well and a dense grid far away") {
    const ConvexBound& cb = layered_bound();
    const double delta = cb.delta();
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> ud(0.0, 1.0);

    for (int s = 0; s < 12; ++s) {
        double a = s % 2 ? 1.0 : 4.0;
        Mat2 F = rotation(2.0 * M_PI * ud(rng)) + (0.45 * delta * ud(rng)) * random_unit(rng);
        double w = cb.barred_eval_at(a, F).value;
        double v = cb.envelope_value_at(a, F);
        CHECK(v == doctest::Approx(w).epsilon(1e-8));
    }

    // on rotations the envelope equals mu (det R = 1, W = 0)
    CHECK(cb.envelope_value_at(1.0, rotation(1.1)) == doctest::Approx(cb.mu()).epsilon(1e-10));

    // far point against a dense (theta, E)-grid oracle with local polish
    Mat2 F = 4.0 / std::sqrt(2.0) * rotation(0.4);
    for (double a : {1.0, 4.0}) {
        auto height = [&](const Mat2& F0) {
            DensityEval e = cb.barred_eval_at(a, F0);
            Mat2 d = F - F0;
            return e.value + inner(e.grad, d) + cb.lambda() * d.squaredNorm();
        };
        auto clip_to_tube = [&](const Mat2& F0) {
            double d = dist_so(F0);
            if (d <= delta) return F0;
            Mat2 R = polar_rotation(F0);
            return Mat2(R + (delta / d) * (F0 - R));
        };
        std::mt19937_64 grng(77);
        std::vector<std::pair<double, Mat2>> grid;
        for (int t = 0; t < 512; ++t) {
            Mat2 R = rotation(2.0 * M_PI * t / 512.0);
            for (int e = 0; e < 64; ++e) {
                Mat2 F0 = (e == 0) ? R : Mat2(R + (ud(grng) * delta) * random_unit(grng));
                if (dist_so(F0) >= delta) continue;
                grid.emplace_back(height(F0), F0);
            }
        }
        std::sort(grid.begin(), grid.end(),
                  [](const auto& x, const auto& y) { return x.first > y.first; });
        // projected coordinate-descent polish of the leading grid points
        // (independent of the ascent code path)
        double best = grid.front().first;
        for (int top = 0; top < 8; ++top) {
            Mat2 F0 = grid[top].second;
            double h0 = grid[top].first;
            double step = 0.1 * delta;
            while (step > 1e-10) {
                bool moved = false;
                for (int k = 0; k < 4; ++k)
                    for (double sgn : {1.0, -1.0}) {
                        Mat2 trial = clip_to_tube(F0 + sgn * step * unvec(Vec4::Unit(k)));
                        double h = height(trial);
                        if (h > h0) {
                            h0 = h;
                            F0 = trial;
                            moved = true;
                        }
                    }
                if (!moved) step *= 0.5;
            }
            best = std::max(best, h0);
        }
        CHECK(cb.envelope_value_at(a, F) == doctest::Approx(best).epsilon(1e-6));
        CHECK(cb.envelope_value_at(a, F) >= best - 1e-9);
    }
}

TEST_CASE("glued V: exact matching inside, quadratic cap outside") {
    const ConvexBound& cb = layered_bound();
    const CalibrationRecord& rec = cb.record();
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> ud(0.0, 1.0);

    // V = Wbar exactly on U_{delta/2}
    for (int s = 0; s < 10; ++s) {
        double a = s % 2 ? 1.0 : 4.0;
        Mat2 F = rotation(2.0 * M_PI * ud(rng)) + (0.45 * rec.delta * ud(rng)) * random_unit(rng);
        CHECK(cb.value_at(a, F) == cb.barred_eval_at(a, F).value);
    }

    // beyond 3R the value is the cap and the Hessian is 3 lambda I
    for (double a : {1.0, 4.0}) {
        Mat2 F = (3.0 * rec.cap_radius + 1.0) * random_unit(rng);
        double q = 1.5 * rec.lambda * F.squaredNorm();
        double v = cb.value_at(a, F);
        Mat2 F2 = (3.0 * rec.cap_radius + 2.0) * random_unit(rng);
        double q2 = 1.5 * rec.lambda * F2.squaredNorm();
        double v2 = cb.value_at(a, F2);
        CHECK(v - q == doctest::Approx(v2 - q2).epsilon(1e-10));  // constant shift
        DensityEval e = cb.eval_at(a, F);
        Mat2 G = random_unit(rng);
        CHECK(vec(G).dot(e.hess * vec(G)) == doctest::Approx(3.0 * rec.lambda).epsilon(1e-8));
    }
}

TEST_CASE("sampled Hessian bounds and strong convexity") {
    const ConvexBound& cb = layered_bound();
    const double lambda = cb.lambda();
    const double beta = 0.5 * lambda;
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);

    for (int s = 0; s < 100; ++s) {
        double a = s % 2 ? 1.0 : 4.0;
        Mat2 F;
        F << nd(rng), nd(rng), nd(rng), nd(rng);
        F *= 0.8 + 2.0 * ud(rng);
        DensityEval e = cb.eval_at(a, F);
        Mat2 G = random_unit(rng);
        double h = vec(G).dot(e.hess * vec(G));
        CHECK(h >= beta - 1e-6);
        CHECK(h <= 1.0 / beta + 1e-6);
    }

    // monotonicity of DV with modulus lambda/2
    for (int s = 0; s < 40; ++s) {
        double a = s % 2 ? 1.0 : 4.0;
        Mat2 F, G;
        F << nd(rng), nd(rng), nd(rng), nd(rng);
        G << nd(rng), nd(rng), nd(rng), nd(rng);
        Mat2 dFG = F - G;
        double lhs = inner(cb.eval_at(a, F).grad - cb.eval_at(a, G).grad, dFG);
        CHECK(lhs >= 0.5 * lambda * dFG.squaredNorm() - 1e-7);
    }

    // growth: lambda |F|^2 - c <= V <= c(|F|^2 + 1) for a recorded c
    double c_low = 0.0, c_high = 1.0;
    for (int s = 0; s < 60; ++s) {
        double a = s % 2 ? 1.0 : 4.0;
        Mat2 F = (6.0 * ud(rng)) * random_unit(rng);
        double v = cb.value_at(a, F);
        c_low = std::max(c_low, lambda * F.squaredNorm() - v);
        c_high = std::max(c_high, v / (F.squaredNorm() + 1.0));
    }
    CHECK(c_low < 1e3);
    CHECK(c_high < 1e3);
}

TEST_CASE("frame indifference of the glued V") {
    const ConvexBound& cb = layered_bound();
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int s = 0; s < 30; ++s) {
        double a = s % 2 ? 1.0 : 4.0;
        Mat2 F;
        F << nd(rng), nd(rng), nd(rng), nd(rng);
        F *= (0.5 + 2.5 * ud(rng));
        Mat2 R = rotation(2.0 * M_PI * ud(rng));
        double v1 = cb.value_at(a, F);
        double v2 = cb.value_at(a, R * F);
        CHECK(v2 == doctest::Approx(v1).epsilon(1e-8));
    }
}

TEST_CASE("verify_matching on a modest sample") {
    const ConvexBound& cb = layered_bound();
    MatchingReport rep = verify_matching(cb, 800, 4242);
    CHECK(rep.lower_bound_violations == 0);
    CHECK(rep.worst_lower_margin >= -1e-9);
    CHECK(rep.max_matching_error <= 1e-8);
    CHECK(rep.midpoint_margin >= -1e-9);
    CHECK(rep.passed);
}

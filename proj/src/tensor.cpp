#include "homogelast/tensor.hpp"

#include <cmath>

namespace homogelast {

namespace {

// s(F) = sqrt((tr F)^2 + (F10 - F01)^2) = max_{R in SO(2)} <F, R>.
inline double rotation_overlap(const Mat2& F) {
    return std::hypot(F(0, 0) + F(1, 1), F(1, 0) - F(0, 1));
}

constexpr double kDegenerate = 1e-14;

const Mat2 kSpin = (Mat2() << 0.0, -1.0, 1.0, 0.0).finished();

}  // namespace

double dist_so_squared(const Mat2& F) {
    double d2 = F.squaredNorm() + 2.0 - 2.0 * rotation_overlap(F);
    return d2 > 0.0 ? d2 : 0.0;
}

double dist_so(const Mat2& F) { return std::sqrt(dist_so_squared(F)); }

Mat2 polar_rotation(const Mat2& F) {
    double a = F(0, 0) + F(1, 1);
    double b = F(1, 0) - F(0, 1);
    double s = std::hypot(a, b);
    if (s < kDegenerate) return Mat2::Identity();
    return (a / s) * Mat2::Identity() + (b / s) * kSpin;
}

Mat2 dist_so_squared_grad(const Mat2& F) {
    return 2.0 * (F - polar_rotation(F));
}

Form4 dist_so_squared_hess(const Mat2& F) {
    double a = F(0, 0) + F(1, 1);
    double b = F(1, 0) - F(0, 1);
    double s = std::hypot(a, b);
    Form4 H = 2.0 * Form4::Identity();
    if (s < kDegenerate) return H;  // drop the (undefined) curvature of s
    Vec4 vI = vec(Mat2::Identity());
    Vec4 vJ = vec(kSpin);
    Vec4 vR = (a * vI + b * vJ) / s;
    H -= (2.0 / s) * (vI * vI.transpose() + vJ * vJ.transpose() - vR * vR.transpose());
    return H;
}

Form4 det_hessian_form() {
    Form4 H = Form4::Zero();
    H(0, 3) = H(3, 0) = 1.0;
    H(1, 2) = H(2, 1) = -1.0;
    return H;
}

DetCalculus det_calculus(const Mat2& F) {
    return DetCalculus{F.determinant(), cofactor(F), det_hessian_form()};
}

double det_bilinear(const Mat2& G, const Mat2& H) {
    return G(0, 0) * H(1, 1) + H(0, 0) * G(1, 1) - G(0, 1) * H(1, 0) - H(0, 1) * G(1, 0);
}

namespace {

inline Vec2 unit(double phi) { return Vec2(std::cos(phi), std::sin(phi)); }

inline double q_form(const Form4& Q, const Mat2& M) {
    Vec4 v = vec(M);
    return v.dot(Q * v);
}

inline double q_cross(const Form4& Q, const Mat2& M, const Mat2& N) {
    return vec(M).dot(Q * vec(N));
}

}  // namespace

RankOneMin rank_one_min(const Form4& Q, int resolution) {
    if (resolution < 8) resolution = 8;
    // a (x) b and (-a) (x) (-b) coincide, and sign flips leave the form
    // unchanged, so [0, pi) x [0, pi) covers all values.
    double best = std::numeric_limits<double>::infinity();
    double bphi1 = 0.0, bphi2 = 0.0;
    const double step = M_PI / resolution;
    for (int i = 0; i < resolution; ++i) {
        Vec2 a = unit(i * step);
        for (int j = 0; j < resolution; ++j) {
            Vec2 b = unit(j * step);
            double v = q_form(Q, a * b.transpose());
            if (v < best) {
                best = v;
                bphi1 = i * step;
                bphi2 = j * step;
            }
        }
    }
    // Newton refinement on (phi1, phi2).
    double p1 = bphi1, p2 = bphi2;
    for (int it = 0; it < 100; ++it) {
        Vec2 a = unit(p1), b = unit(p2);
        Vec2 ap(-a(1), a(0)), bp(-b(1), b(0));
        Mat2 M = a * b.transpose();
        Mat2 M1 = ap * b.transpose();
        Mat2 M2 = a * bp.transpose();
        double f = q_form(Q, M);
        Eigen::Vector2d g(2.0 * q_cross(Q, M, M1), 2.0 * q_cross(Q, M, M2));
        if (g.norm() < 1e-13) break;
        Eigen::Matrix2d H;
        H(0, 0) = 2.0 * q_form(Q, M1) - 2.0 * f;
        H(1, 1) = 2.0 * q_form(Q, M2) - 2.0 * f;
        H(0, 1) = H(1, 0) = 2.0 * q_cross(Q, M2, M1) + 2.0 * q_cross(Q, M, ap * bp.transpose());
        Eigen::Vector2d d;
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(H);
        if (es.eigenvalues().minCoeff() > 1e-12) {
            d = -H.ldlt().solve(g);
        } else {
            d = -g;  // fall back to steepest descent near saddle points
        }
        double t = 1.0;
        double f0 = f;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls) {
            Vec2 an = unit(p1 + t * d(0)), bn = unit(p2 + t * d(1));
            double fn = q_form(Q, an * bn.transpose());
            if (fn <= f0 + 1e-4 * t * g.dot(d)) {
                p1 += t * d(0);
                p2 += t * d(1);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;
    }
    Vec2 a = unit(p1), b = unit(p2);
    double v = q_form(Q, a * b.transpose());
    if (v > best) {  // keep the scan winner if refinement drifted
        a = unit(bphi1);
        b = unit(bphi2);
        v = q_form(Q, a * b.transpose());
    }
    return RankOneMin{v, a, b};
}

double dist_so3(const Mat3& F) {
    Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 U = svd.matrixU();
    Mat3 V = svd.matrixV();
    double sign = (U * V.transpose()).determinant() > 0 ? 1.0 : -1.0;
    Mat3 R = U * Eigen::Vector3d(1.0, 1.0, sign).asDiagonal() * V.transpose();
    return (F - R).norm();
}

DetCalculus3 det_calculus3(const Mat3& F) {
    Mat3 cof;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            Mat3 minor = Mat3::Zero();
            int rr = 0;
            for (int r = 0; r < 3; ++r) {
                if (r == i) continue;
                int cc = 0;
                for (int c = 0; c < 3; ++c) {
                    if (c == j) continue;
                    minor(rr, cc) = F(r, c);
                    ++cc;
                }
                ++rr;
            }
            double m2 = minor(0, 0) * minor(1, 1) - minor(0, 1) * minor(1, 0);
            cof(i, j) = ((i + j) % 2 == 0 ? 1.0 : -1.0) * m2;
        }
    return DetCalculus3{F.determinant(), cof};
}

double det_hessian_form3(const Mat3& F, const Mat3& G) {
    // det(F+tG) has t^2 coefficient <cof G, F>.
    return 2.0 * det_calculus3(G).grad.cwiseProduct(F).sum();
}

}  // namespace homogelast

#ifndef HOMOGELAST_TENSOR_HPP
#define HOMOGELAST_TENSOR_HPP

#include <Eigen/Dense>

// Dense small-matrix calculus for deformation gradients in dimension d = 2
// (fully supported) and d = 3 (distance/determinant calculus only).
//
// Conventions: Frobenius inner product throughout; a 2x2 matrix F is
// flattened row-major, vec(F) = (F00, F01, F10, F11), so fourth-order
// tensors acting as quadratic forms on matrices become 4x4 symmetric
// matrices on vec-coordinates.

namespace homogelast {

using Mat2 = Eigen::Matrix2d;
using Vec2 = Eigen::Vector2d;
using Vec4 = Eigen::Vector4d;
using Form4 = Eigen::Matrix4d;  // quadratic form on vec(2x2)

inline Vec4 vec(const Mat2& F) {
    return Vec4(F(0, 0), F(0, 1), F(1, 0), F(1, 1));
}

inline Mat2 unvec(const Vec4& v) {
    Mat2 F;
    F << v(0), v(1), v(2), v(3);
    return F;
}

inline double inner(const Mat2& A, const Mat2& B) { return (A.array() * B.array()).sum(); }

inline Mat2 rotation(double theta) {
    Mat2 R;
    R << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
    return R;
}

/// Cofactor matrix, cof(F) = (d det/dF).
inline Mat2 cofactor(const Mat2& F) {
    Mat2 C;
    C << F(1, 1), -F(1, 0), -F(0, 1), F(0, 0);
    return C;
}

/// min_{R in SO(2)} |F - R|_F. Total function; handles det F <= 0.
double dist_so(const Mat2& F);

/// Squared distance to SO(2), |F|^2 + 2 - 2*sqrt((tr F)^2 + (F10-F01)^2).
double dist_so_squared(const Mat2& F);

/// Nearest rotation argmin_R |F - R|. Where the minimizer is non-unique
/// (tr F = 0 and F10 = F01) returns the identity.
Mat2 polar_rotation(const Mat2& F);

/// Gradient of dist_so_squared. Equals 2(F - polar_rotation(F)) away from
/// the degenerate set.
Mat2 dist_so_squared_grad(const Mat2& F);

/// Hessian of dist_so_squared as a quadratic form on vec-coordinates.
Form4 dist_so_squared_hess(const Mat2& F);

struct DetCalculus {
    double det;
    Mat2 grad;   // cofactor matrix
    Form4 hess;  // constant in 2D: hess[G,G] = 2 det G
};

DetCalculus det_calculus(const Mat2& F);

/// The constant 2D form H with H[G,G] = 2 det G.
Form4 det_hessian_form();

/// Bilinear determinant form: D^2 det[G,H] = det(G+H) - det(G) - det(H).
double det_bilinear(const Mat2& G, const Mat2& H);

struct RankOneMin {
    double value;
    Vec2 a;
    Vec2 b;
};

/// Minimizes Q[a (x) b, a (x) b] over unit vectors a, b by a dense scan over
/// the two angles followed by Newton refinement. Q must be symmetric.
RankOneMin rank_one_min(const Form4& Q, int resolution = 720);

// d = 3 counterparts (distance and determinant calculus only; the solver
// pipeline is 2D).
using Mat3 = Eigen::Matrix3d;

/// SVD-based distance to SO(3) with sign-corrected rotation factor.
double dist_so3(const Mat3& F);

struct DetCalculus3 {
    double det;
    Mat3 grad;  // cofactor matrix
};

DetCalculus3 det_calculus3(const Mat3& F);

/// D^2 det(F)[G,G] in 3D (linear in F): 2 <cof G, F>.
double det_hessian_form3(const Mat3& F, const Mat3& G);

}  // namespace homogelast

#endif

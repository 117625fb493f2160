#ifndef HOMOGELAST_MACRO_HPP
#define HOMOGELAST_MACRO_HPP

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "homogelast/homogenize.hpp"

// Macroscopic boundary-value solvers on A = (0,1)^2: the homogenized problem,
// its auxiliary convex twin, the fine-scale eps-problem, the two-scale
// expansion, and the error/rate studies.

namespace homogelast {

struct MacroMesh {
    int m = 32;  // cells per axis (m >= 8)

    int nodes_per_axis() const { return m + 1; }
    int n_nodes() const { return nodes_per_axis() * nodes_per_axis(); }
    int n_dofs() const { return 2 * n_nodes(); }
    int n_cells() const { return m * m; }
    int n_qpts() const { return 4 * n_cells(); }
    double h() const { return 1.0 / m; }
    int node(int i, int j) const { return j * nodes_per_axis() + i; }
    bool is_boundary(int i, int j) const { return i == 0 || j == 0 || i == m || j == m; }
};

struct LoadData {
    enum class BoundaryKind { Identity, Rigid, ShearedRigid };
    BoundaryKind g_kind = BoundaryKind::Identity;
    Vec2 f = Vec2::Zero();     // constant body force density
    double g_theta = 0.0;      // rotation of the base rigid motion g0
    Vec2 g_shift = Vec2::Zero();
    double g_shear = 0.0;      // ShearedRigid: g = R (x + shear (x2, 0)) + c
    double r = 4.0;            // exponent of the smallness norms (r > d)

    Vec2 g(const Vec2& x) const;
    Mat2 g_grad(const Vec2& x) const;
    Vec2 g0(const Vec2& x) const;
    Mat2 g0_grad() const;
};

/// Lambda(f, g, g0) = |f|_{L^r} + |g - g0|_{W^{2,r}} + |dist(grad g0, SO 2)|_inf
/// by quadrature (the perturbation family has closed-form derivatives).
double load_smallness(const LoadData& load, const MacroMesh& mesh);

struct MacroField {
    MacroMesh mesh;
    Eigen::VectorXd u;  // nodal, 2 components, boundary rows hold the datum

    Vec2 value(int i, int j) const {
        return Vec2(u[2 * mesh.node(i, j)], u[2 * mesh.node(i, j) + 1]);
    }
};

struct MacroDiagnostics {
    int newton_iterations = 0;
    double residual_inf = 0.0;
    double energy = 0.0;          // functional value (density minus load work)
    double max_dist_so = 0.0;     // of grad u over quadrature points
};

struct MacroOptions {
    int max_newton = 60;
    double newton_tol = 1e-10;
    double cg_tol = 1e-10;
    int max_cg = 0;  // 0: automatic
    double armijo_c = 1e-4;
    int max_line_search = 45;
    double trust_threshold = 0.0;  // 0: use the density's trust radius
};

using PointDensity = std::function<DensityEval(int qpt, const Mat2& state, bool need_hess)>;

/// Newton minimization of sum_q w [density(grad u) - f . u] over Q1 fields
/// with Dirichlet data g; returns the field and diagnostics.
MacroField solve_macro(const PointDensity& density, const LoadData& load, const MacroMesh& mesh,
                       const MacroOptions& opts, const Eigen::VectorXd* warm,
                       MacroDiagnostics* diag);

struct HomSolveResult {
    MacroField u0;           // W_hom-route minimizer
    MacroField u0_convex;    // V_hom-route minimizer
    double route_gap_h1 = 0.0;
    double lambda = 0.0;     // smallness of the data
    double max_dist_so = 0.0;
    MacroDiagnostics diag;
};

/// Solves the homogenized problem with W_hom and the auxiliary convex problem
/// with V_hom = W_hom + mu det (the two minimizers coincide on the trust
/// region); refuses loads above the trust threshold.
HomSolveResult solve_hom(const EffectiveDensity& density, double mu, const LoadData& load,
                         const MacroMesh& mesh, const MacroOptions& opts = {});

/// Fine-scale problem with the oscillating density W(x/eps, .); minimizes the
/// barred energy (identical minimizer: the determinant integral is fixed by
/// the boundary values on this pairing) warm-started from the expansion.
MacroField solve_eps(const ConvexBound& cb, const LoadData& load, const MacroMesh& mesh,
                     double eps, const MacroOptions& opts = {},
                     const Eigen::VectorXd* warm = nullptr, MacroDiagnostics* diag = nullptr);

/// Corrector access for the expansion: phi(y, F) and the slope derivative.
class CorrectorProvider {
  public:
    virtual ~CorrectorProvider() = default;
    virtual Vec2 phi(const Vec2& y, const Mat2& F) const = 0;
    virtual Mat2 grad_y_phi(const Vec2& y, const Mat2& F) const = 0;
    /// Derivative of phi with respect to F applied to H, at (y, F).
    virtual Vec2 dphi(const Vec2& y, const Mat2& F, const Mat2& H) const = 0;
};

std::unique_ptr<CorrectorProvider> make_corrector_provider(const ConvexBound& cb,
                                                           const PeriodicGrid& fem_grid,
                                                           double cache_radius = 1e-3);

struct TwoScaleField {
    MacroField nodal;              // v_eps as a Q1 field
    std::vector<Mat2> chain_grad;  // per-quadrature-point gradient by the chain rule
};

/// v_eps(x) = u0(x) + eps eta(x) phi(x/eps, grad u0(x)) with the piecewise
/// linear distance-ramp cut-off eta = min(1, dist(x, boundary)/eps).
TwoScaleField two_scale_expand(const MacroField& u0, const CorrectorProvider& corr,
                               double eps, double trust_radius);

struct TwoScaleRow {
    double eps = 0.0;
    double err_l2 = 0.0;      // |u_eps - u0|_L2
    double err_h1 = 0.0;      // |u_eps - v_eps|_H1 (chain-rule gradient)
    double energy_eps = 0.0;  // I_eps(u_eps)
    double energy_hom = 0.0;  // I_hom(u0)
    double energy_expansion = 0.0;  // I_eps(v_eps) >= I_eps(u_eps)
    double lambda = 0.0;
    double surrogate = 0.0;   // sqrt(eps) * Lambda
    int m = 0;
};

struct TwoScaleReport {
    std::vector<TwoScaleRow> rows;
    double h1_slope = 0.0;
    double h1_fit_residual = 0.0;
    double l2_slope = 0.0;
    bool monotone_h1 = false;
    bool complete = false;
    std::string failure;
};

struct ErrorStudyOptions {
    std::vector<double> eps_list = {1.0 / 8, 1.0 / 16, 1.0 / 32, 1.0 / 64};
    int mesh_factor = 16;  // m = mesh_factor / eps
    MacroOptions macro;
    PeriodicGrid fem_grid{16, 1};  // corrector grid for non-layered models
    std::ostream* progress = nullptr;
};

TwoScaleReport error_study(const ConvexBound& cb, const EffectiveDensity& eff,
                           const LoadData& load, const ErrorStudyOptions& opts = {});

// Quadrature norms of macro fields.
double macro_l2_diff(const MacroField& a, const MacroField& b);
double macro_h1_diff(const MacroField& a, const MacroField& b);
std::vector<Mat2> macro_gradients(const MacroField& f);
double macro_energy(const ConvexBound& cb, const LoadData& load, const MacroField& f, double eps);

}  // namespace homogelast

#endif

#ifndef HOMOGELAST_CELL_HPP
#define HOMOGELAST_CELL_HPP

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "homogelast/convexify.hpp"
#include "homogelast/energy.hpp"

// Periodic cell problems on kY, Y = [0,1)^2: corrector phi(F), flux J(F),
// flux corrector sigma(F), the linearized corrector, the exact layered
// oracle, and the multi-cell search.
//
// Discretization: uniform periodic Q1 elements with 2x2 Gauss quadrature.
// On this pairing the determinant is integrated exactly for every periodic
// Q1 field, so the Null-Lagrangian bookkeeping of the fast path (minimize
// W + mu det instead of the constructed V) is machine-exact.

namespace homogelast {

struct PeriodicGrid {
    int n = 32;  // cells per unit cell and axis (n >= 4)
    int k = 1;   // cell multiplicity: domain kY

    int nodes_per_axis() const { return n * k; }
    int n_nodes() const { return nodes_per_axis() * nodes_per_axis(); }
    int n_dofs() const { return 2 * n_nodes(); }
    int n_cells() const { return n_nodes(); }
    int n_qpts() const { return 4 * n_cells(); }
    double h() const { return 1.0 / n; }
    double volume() const { return static_cast<double>(k) * k; }
};

class SolverError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class TrustRegionError : public SolverError {
  public:
    TrustRegionError(const std::string& what, double max_dist)
        : SolverError(what), max_dist_so(max_dist) {}
    double max_dist_so;
};

struct SolverOptions {
    int max_newton = 60;
    double newton_tol = 1e-10;        // infinity norm of the discrete gradient
    double cg_tol = 1e-10;            // relative preconditioned residual
    int max_cg = 0;                   // 0: automatic (10 * nodes per axis + 200)
    double armijo_c = 1e-4;
    int max_line_search = 45;
    bool allow_nonconvex = false;     // descend along negative curvature instead of failing
    bool use_convex_fallback = true;  // fall back to the constructed V on failure
    bool require_containment = true;  // enforce max dist_SO(F + grad phi) < delta
    std::optional<Eigen::VectorXd> initial;
};

struct CorrectorDiagnostics {
    int newton_iterations = 0;
    double residual_inf = 0.0;
    double residual_dual = 0.0;
    double energy_barred = 0.0;  // total over kY of W + mu det
    double energy_w = 0.0;       // total over kY of W
    double max_dist_so = 0.0;
    bool used_convex_path = false;
};

struct CorrectorSolution {
    PeriodicGrid grid;
    Mat2 F;
    Eigen::VectorXd phi;          // nodal, 2 components, zero mean
    std::vector<Mat2> grad_phi;   // per quadrature point
    std::vector<Mat2> flux;       // J per quadrature point, zero quadrature mean
    Eigen::VectorXd sigma;        // nodal sigma_{i12} (i = 0, 1); sigma_{i21} = -sigma_{i12}
    CorrectorDiagnostics diag;

    void write_csv(const std::string& path) const;
    void write_diagnostics_json(const std::string& path) const;
};

/// Fast-path corrector: minimizes the quadrature energy of W + mu det over
/// zero-mean periodic Q1 fields by Newton with backtracking line search and
/// preconditioned CG inner solves. On negative curvature or stall, falls back
/// to the convex path with the constructed V and re-verifies the U_delta
/// containment.
CorrectorSolution solve_corrector(const ConvexBound& cb, const Mat2& F, const PeriodicGrid& grid,
                                  const SolverOptions& opts = {});

/// Solves -Lap sigma_ijk = d_k J_ij - d_j J_ik on nodal J (quadrature-averaged)
/// by Fourier diagonalization of the 5-point periodic Laplacian; antisymmetry
/// in (j,k) is exact by construction. Fills sol.sigma.
void solve_flux_corrector(CorrectorSolution& sol);

/// Discrete residual of -d_k sigma_ijk = J_ij (centered differences, nodal J),
/// reported in the L2 norm; decays under grid refinement for smooth models.
double flux_corrector_residual(const CorrectorSolution& sol);

struct LinearizedSolution {
    Eigen::VectorXd dphi;      // nodal, zero mean
    std::vector<Mat2> dflux;   // DJ(F)[G] per quadrature point
    double form_value = 0.0;   // per unit volume: quadrature of <L (G+grad psi), G+grad psi>
    int cg_iterations = 0;
};

/// Linearized cell problem div(L (G + grad psi)) = 0 with
/// L = D2(W + mu det)(y, F + grad phi); SPD by the calibrated ellipticity
/// inside the matching region.
LinearizedSolution solve_linearized(const ConvexBound& cb, const CorrectorSolution& sol,
                                    const Mat2& G, const SolverOptions& opts = {});

struct LayeredCorrector {
    Mat2 F;
    std::vector<double> breakpoints;
    std::vector<Vec2> slopes;    // grad phi = c_i (x) e1 in layer i
    std::vector<Vec2> offsets;   // phi(y1) = c_i y1 + d_i, continuous, zero mean
    Vec2 flux_column;            // common value of DW_i(F + c_i (x) e1) e1
    double flux_residual = 0.0;  // max deviation of the per-layer flux columns
    double energy_w = 0.0;       // per unit volume
    int newton_iterations = 0;

    Vec2 value(double y1) const;  // phi at y1 (piecewise affine, periodic)
    Eigen::VectorXd interpolate(const PeriodicGrid& grid) const;  // nodal field
};

/// Exact layered oracle: minimizes sum_i l_i W_i(F + c_i (x) e1) subject to
/// sum_i l_i c_i = 0 by Newton on the reduced parametrization. The determinant
/// term is affine on the feasible set, so the minimizer and the Newton
/// iterates are mu-independent.
LayeredCorrector solve_layered(const DensityModel& model, const Mat2& F,
                               const SolverOptions& opts = {});

/// Linearized layered oracle: slopes derivative for direction G and the
/// quadratic-form value sum_i l_i <D2Wbar_i (G + d_i (x) e1), G + d_i (x) e1>.
struct LayeredLinearized {
    std::vector<Vec2> slope_derivative;
    double form_value_barred = 0.0;  // with D2(W + mu det)
};
LayeredLinearized layered_linearized(const DensityModel& model, const LayeredCorrector& lc,
                                     const Mat2& G, double mu);

struct MultiCellResult {
    double energy_w = 0.0;       // best energy per unit volume (W form)
    double energy_barred = 0.0;  // best energy per unit volume (W + mu det form)
    std::vector<double> local_minima;  // all energies found (W form, per unit volume)
    CorrectorSolution best;
    int failed_starts = 0;
};

/// Best-effort global search on kY: random initial perturbations plus the
/// k-periodized single-cell corrector as a warm start.
MultiCellResult multi_cell(const ConvexBound& cb, const Mat2& F, const PeriodicGrid& base_grid,
                           int k, int n_starts, std::uint64_t seed,
                           const SolverOptions& opts = {}, double perturbation = 0.01);

/// Quadrature of det(F + grad phi) over the grid minus det(F) * |kY|; zero to
/// machine precision for every periodic Q1 field.
double det_quadrature_defect(const PeriodicGrid& grid, const Mat2& F, const Eigen::VectorXd& phi);

/// Energy of a nodal field under the barred density (total over kY).
double barred_energy(const ConvexBound& cb, const PeriodicGrid& grid, const Mat2& F,
                     const Eigen::VectorXd& phi);

/// Energy under the constructed convex bound V (total over kY).
double convex_energy(const ConvexBound& cb, const PeriodicGrid& grid, const Mat2& F,
                     const Eigen::VectorXd& phi);

/// Discrete L2 and H1 norms of a nodal field (quadrature based).
double field_l2_norm(const PeriodicGrid& grid, const Eigen::VectorXd& phi);
double field_h1_norm(const PeriodicGrid& grid, const Eigen::VectorXd& phi);

/// Gradients of a nodal field at all quadrature points.
std::vector<Mat2> quadrature_gradients(const PeriodicGrid& grid, const Eigen::VectorXd& phi);

/// Physical coordinates of all quadrature points (cell-major, 4 per cell).
std::vector<Vec2> quadrature_points(const PeriodicGrid& grid);

}  // namespace homogelast

#endif

#include "homogelast/cell.hpp"

#include <fftw3.h>

#include <cmath>
#include <fstream>
#include <mutex>
#include <random>

#include "json.hpp"

namespace homogelast {

namespace {

std::mutex g_fftw_mutex;  // FFTW plan creation is not thread-safe

// Periodic 5-point Poisson solver by Fourier diagonalization. Solves
// (-Lap_unweighted) u = f with the zero mode pinned to zero (zero-mean
// convention); callers scale by h^2 for the physical Laplacian.
class PeriodicPoisson {
  public:
    explicit PeriodicPoisson(int N) : N_(N) {
        std::lock_guard<std::mutex> lock(g_fftw_mutex);
        real_ = fftw_alloc_real(static_cast<std::size_t>(N) * N);
        spec_ = fftw_alloc_complex(static_cast<std::size_t>(N) * (N / 2 + 1));
        fwd_ = fftw_plan_dft_r2c_2d(N, N, real_, spec_, FFTW_ESTIMATE);
        bwd_ = fftw_plan_dft_c2r_2d(N, N, spec_, real_, FFTW_ESTIMATE);
        eig_.resize(static_cast<std::size_t>(N) * (N / 2 + 1));
        for (int k1 = 0; k1 < N; ++k1)
            for (int k2 = 0; k2 <= N / 2; ++k2) {
                double lam = 4.0 - 2.0 * std::cos(2.0 * M_PI * k1 / N) -
                             2.0 * std::cos(2.0 * M_PI * k2 / N);
                eig_[static_cast<std::size_t>(k1) * (N / 2 + 1) + k2] = lam;
            }
    }
    ~PeriodicPoisson() {
        std::lock_guard<std::mutex> lock(g_fftw_mutex);
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(bwd_);
        fftw_free(real_);
        fftw_free(spec_);
    }
    PeriodicPoisson(const PeriodicPoisson&) = delete;
    PeriodicPoisson& operator=(const PeriodicPoisson&) = delete;

    // u and f may alias; length N*N, row index slow (j * N + i convention is
    // up to the caller as long as it is consistent).
    void solve(const double* f, double* u) const {
        const std::size_t n2 = static_cast<std::size_t>(N_) * N_;
        std::copy(f, f + n2, real_);
        fftw_execute(fwd_);
        const std::size_t cols = N_ / 2 + 1;
        for (std::size_t idx = 0; idx < static_cast<std::size_t>(N_) * cols; ++idx) {
            double lam = eig_[idx];
            if (lam < 1e-14) {
                spec_[idx][0] = 0.0;
                spec_[idx][1] = 0.0;
            } else {
                spec_[idx][0] /= lam;
                spec_[idx][1] /= lam;
            }
        }
        fftw_execute(bwd_);
        const double scale = 1.0 / static_cast<double>(n2);
        for (std::size_t i = 0; i < n2; ++i) u[i] = real_[i] * scale;
    }

  private:
    int N_;
    double* real_;
    fftw_complex* spec_;
    fftw_plan fwd_, bwd_;
    std::vector<double> eig_;
};

// Q1 shape-function derivative tables at the 2x2 Gauss points of a cell.
struct ShapeTables {
    // dN[q][node][axis], unit cell; physical derivative = dN / h
    double dN[4][4][2];
    double gp[2];  // gauss points on (0,1)

    ShapeTables() {
        gp[0] = 0.5 * (1.0 - 1.0 / std::sqrt(3.0));
        gp[1] = 0.5 * (1.0 + 1.0 / std::sqrt(3.0));
        for (int qx = 0; qx < 2; ++qx)
            for (int qy = 0; qy < 2; ++qy) {
                int q = 2 * qy + qx;
                double x = gp[qx], y = gp[qy];
                // nodes: 0 (i,j), 1 (i+1,j), 2 (i,j+1), 3 (i+1,j+1)
                dN[q][0][0] = -(1.0 - y);
                dN[q][0][1] = -(1.0 - x);
                dN[q][1][0] = (1.0 - y);
                dN[q][1][1] = -x;
                dN[q][2][0] = -y;
                dN[q][2][1] = (1.0 - x);
                dN[q][3][0] = y;
                dN[q][3][1] = x;
            }
    }
};

const ShapeTables& shapes() {
    static ShapeTables t;
    return t;
}

struct CellView {
    int N;          // nodes per axis
    double h;
    int node(int i, int j) const {
        i %= N;
        j %= N;
        if (i < 0) i += N;
        if (j < 0) j += N;
        return j * N + i;
    }
    void cell_nodes(int ci, int cj, int out[4]) const {
        out[0] = node(ci, cj);
        out[1] = node(ci + 1, cj);
        out[2] = node(ci, cj + 1);
        out[3] = node(ci + 1, cj + 1);
    }
};

// Density evaluations per quadrature point for the fast (W + mu det) path.
class Workspace {
  public:
    Workspace(const ConvexBound& cb, const PeriodicGrid& grid, const Mat2& F)
        : cb_(&cb), grid_(grid), F_(F), view_{grid.nodes_per_axis(), grid.h()} {
        const int N = view_.N;
        stiffness_.resize(grid.n_qpts());
        const ShapeTables& st = shapes();
        const DensityModel& model = cb.model();
        for (int cj = 0; cj < N; ++cj)
            for (int ci = 0; ci < N; ++ci)
                for (int q = 0; q < 4; ++q) {
                    double x = (ci + st.gp[q % 2]) * grid.h();
                    double y = (cj + st.gp[q / 2]) * grid.h();
                    stiffness_[qpt_index(ci, cj, q)] = model.stiffness(Vec2(x, y));
                }
        qw_ = grid.h() * grid.h() / 4.0;
    }

    int qpt_index(int ci, int cj, int q) const { return 4 * (cj * view_.N + ci) + q; }

    std::vector<Mat2> gradients(const Eigen::VectorXd& phi) const {
        const int N = view_.N;
        const double h = view_.h;
        const ShapeTables& st = shapes();
        std::vector<Mat2> out(grid_.n_qpts());
        int nodes[4];
        for (int cj = 0; cj < N; ++cj)
            for (int ci = 0; ci < N; ++ci) {
                view_.cell_nodes(ci, cj, nodes);
                double u[4][2];
                for (int n = 0; n < 4; ++n)
                    for (int c = 0; c < 2; ++c) u[n][c] = phi[2 * nodes[n] + c];
                for (int q = 0; q < 4; ++q) {
                    Mat2 g = Mat2::Zero();
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c) {
                            g(c, 0) += u[n][c] * st.dN[q][n][0];
                            g(c, 1) += u[n][c] * st.dN[q][n][1];
                        }
                    out[qpt_index(ci, cj, q)] = g / h;
                }
            }
        return out;
    }

    // Barred density (fast path) or the constructed V (convex path).
    DensityEval density_eval(int qpt, const Mat2& state, bool convex_path) const {
        if (convex_path) return cb_->eval_at(stiffness_[qpt], state);
        return cb_->barred_eval_at(stiffness_[qpt], state);
    }
    double density_value(int qpt, const Mat2& state, bool convex_path) const {
        if (convex_path) return cb_->value_at(stiffness_[qpt], state);
        return cb_->model().value_at_stiffness(stiffness_[qpt], state) +
               cb_->mu() * state.determinant();
    }

    double energy(const Eigen::VectorXd& phi, bool convex_path) const {
        std::vector<Mat2> grads = gradients(phi);
        double e = 0.0;
        for (int qpt = 0; qpt < grid_.n_qpts(); ++qpt)
            e += qw_ * density_value(qpt, F_ + grads[qpt], convex_path);
        return e;
    }

    // Gradient of the energy; also returns the quadrature states.
    Eigen::VectorXd gradient(const Eigen::VectorXd& phi, bool convex_path,
                             std::vector<Mat2>* states_out = nullptr,
                             std::vector<Form4>* hess_out = nullptr) const {
        const int N = view_.N;
        const double h = view_.h;
        const ShapeTables& st = shapes();
        Eigen::VectorXd g = Eigen::VectorXd::Zero(grid_.n_dofs());
        std::vector<Mat2> grads = gradients(phi);
        if (hess_out) hess_out->resize(grid_.n_qpts());
        int nodes[4];
        for (int cj = 0; cj < N; ++cj)
            for (int ci = 0; ci < N; ++ci) {
                view_.cell_nodes(ci, cj, nodes);
                for (int q = 0; q < 4; ++q) {
                    int qpt = qpt_index(ci, cj, q);
                    Mat2 state = F_ + grads[qpt];
                    DensityEval e = density_eval(qpt, state, convex_path);
                    if (hess_out) (*hess_out)[qpt] = e.hess;
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c)
                            g[2 * nodes[n] + c] += qw_ / h *
                                                   (e.grad(c, 0) * st.dN[q][n][0] +
                                                    e.grad(c, 1) * st.dN[q][n][1]);
                }
            }
        if (states_out) *states_out = std::move(grads);
        return g;
    }

    // H v with the per-quadrature-point forms assembled by gradient().
    Eigen::VectorXd hess_apply(const std::vector<Form4>& hess, const Eigen::VectorXd& v) const {
        const int N = view_.N;
        const double h = view_.h;
        const ShapeTables& st = shapes();
        Eigen::VectorXd out = Eigen::VectorXd::Zero(grid_.n_dofs());
        int nodes[4];
        for (int cj = 0; cj < N; ++cj)
            for (int ci = 0; ci < N; ++ci) {
                view_.cell_nodes(ci, cj, nodes);
                double u[4][2];
                for (int n = 0; n < 4; ++n)
                    for (int c = 0; c < 2; ++c) u[n][c] = v[2 * nodes[n] + c];
                for (int q = 0; q < 4; ++q) {
                    Mat2 gv = Mat2::Zero();
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c) {
                            gv(c, 0) += u[n][c] * st.dN[q][n][0];
                            gv(c, 1) += u[n][c] * st.dN[q][n][1];
                        }
                    gv /= h;
                    Mat2 s = unvec(Vec4(hess[qpt_index(ci, cj, q)] * vec(gv)));
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c)
                            out[2 * nodes[n] + c] += qw_ / h *
                                                     (s(c, 0) * st.dN[q][n][0] +
                                                      s(c, 1) * st.dN[q][n][1]);
                }
            }
        return out;
    }

    void project_mean(Eigen::VectorXd& phi) const {
        for (int c = 0; c < 2; ++c) {
            double mean = 0.0;
            for (int i = 0; i < grid_.n_nodes(); ++i) mean += phi[2 * i + c];
            mean /= grid_.n_nodes();
            for (int i = 0; i < grid_.n_nodes(); ++i) phi[2 * i + c] -= mean;
        }
    }

    const PeriodicGrid& grid() const { return grid_; }
    const Mat2& F() const { return F_; }
    double quad_weight() const { return qw_; }
    double stiffness_at(int qpt) const { return stiffness_[qpt]; }
    const CellView& view() const { return view_; }

  private:
    const ConvexBound* cb_;
    PeriodicGrid grid_;
    Mat2 F_;
    CellView view_;
    std::vector<double> stiffness_;
    double qw_;
};

struct PcgOutcome {
    bool converged = false;
    bool negative_curvature = false;
    int iterations = 0;
};

// Preconditioned CG on the zero-mean subspace; the preconditioner applies the
// inverse 5-point periodic Laplacian per displacement component.
PcgOutcome pcg(const Workspace& ws, const std::vector<Form4>& hess, const PeriodicPoisson& poisson,
               const Eigen::VectorXd& b, Eigen::VectorXd& x, double rel_tol, int max_iter) {
    const int n_nodes = ws.grid().n_nodes();
    Eigen::VectorXd scratch_in(n_nodes), scratch_out(n_nodes);
    auto precond = [&](const Eigen::VectorXd& r) {
        Eigen::VectorXd z(r.size());
        for (int c = 0; c < 2; ++c) {
            for (int i = 0; i < n_nodes; ++i) scratch_in[i] = r[2 * i + c];
            poisson.solve(scratch_in.data(), scratch_out.data());
            for (int i = 0; i < n_nodes; ++i) z[2 * i + c] = scratch_out[i];
        }
        return z;
    };

    PcgOutcome out;
    x = Eigen::VectorXd::Zero(b.size());
    Eigen::VectorXd r = b;
    double bnorm = b.norm();
    if (bnorm == 0.0) {
        out.converged = true;
        return out;
    }
    Eigen::VectorXd z = precond(r);
    Eigen::VectorXd d = z;
    double rz = r.dot(z);
    for (int it = 0; it < max_iter; ++it) {
        Eigen::VectorXd q = ws.hess_apply(hess, d);
        double dq = d.dot(q);
        if (dq <= 1e-14 * d.squaredNorm()) {
            out.negative_curvature = true;
            out.iterations = it;
            if (it == 0) x = d;  // preconditioned gradient: a descent direction
            return out;
        }
        double alpha = rz / dq;
        x += alpha * d;
        r -= alpha * q;
        if (r.norm() <= rel_tol * bnorm) {
            out.converged = true;
            out.iterations = it + 1;
            return out;
        }
        z = precond(r);
        double rz_new = r.dot(z);
        d = z + (rz_new / rz) * d;
        rz = rz_new;
    }
    out.iterations = max_iter;
    return out;
}

struct NewtonOutcome {
    Eigen::VectorXd phi;
    int iterations = 0;
    double residual_inf = 0.0;
    double residual_dual = 0.0;
};

NewtonOutcome newton_minimize(const Workspace& ws, const PeriodicPoisson& poisson,
                              const SolverOptions& opts, bool convex_path,
                              const Eigen::VectorXd& start) {
    NewtonOutcome out;
    Eigen::VectorXd phi = start;
    ws.project_mean(phi);
    int max_cg = opts.max_cg > 0 ? opts.max_cg : 10 * ws.grid().nodes_per_axis() + 200;

    std::vector<Form4> hess;
    for (int it = 0; it < opts.max_newton; ++it) {
        Eigen::VectorXd g = ws.gradient(phi, convex_path, nullptr, &hess);
        out.residual_inf = g.lpNorm<Eigen::Infinity>();
        out.iterations = it;
        if (out.residual_inf <= opts.newton_tol) break;

        Eigen::VectorXd d;
        PcgOutcome cg = pcg(ws, hess, poisson, -g, d, opts.cg_tol, max_cg);
        if (cg.negative_curvature && !opts.allow_nonconvex)
            throw SolverError("corrector solve: CG detected negative curvature");
        if (!cg.converged && !cg.negative_curvature && d.norm() == 0.0)
            throw SolverError("corrector solve: CG failed to produce a direction");

        double e0 = ws.energy(phi, convex_path);
        double gd = g.dot(d);
        if (gd >= 0.0) {
            d = -g;  // safeguard: fall back to steepest descent
            gd = g.dot(d);
        }
        double t = 1.0;
        bool accepted = false;
        if (!cg.negative_curvature && -gd <= 1e-13 * std::max(1.0, std::abs(e0))) {
            phi += d;  // decrease below floating-point resolution: plain Newton step
            accepted = true;
        }
        for (int ls = 0; !accepted && ls < opts.max_line_search; ++ls) {
            Eigen::VectorXd trial = phi + t * d;
            double e1 = ws.energy(trial, convex_path);
            if (e1 <= e0 + opts.armijo_c * t * gd) {
                phi = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) throw SolverError("corrector solve: line search stalled");
        ws.project_mean(phi);
    }
    if (out.residual_inf > opts.newton_tol)
        throw SolverError("corrector solve: Newton did not reach tolerance");

    // dual (H^-1-type) norm of the final residual via the Laplacian inverse
    Eigen::VectorXd g = ws.gradient(phi, convex_path);
    Eigen::VectorXd z(g.size());
    {
        const int n_nodes = ws.grid().n_nodes();
        Eigen::VectorXd in(n_nodes), sol(n_nodes);
        for (int c = 0; c < 2; ++c) {
            for (int i = 0; i < n_nodes; ++i) in[i] = g[2 * i + c];
            poisson.solve(in.data(), sol.data());
            for (int i = 0; i < n_nodes; ++i) z[2 * i + c] = sol[i];
        }
    }
    out.residual_dual = std::sqrt(std::max(0.0, g.dot(z)));
    out.phi = std::move(phi);
    return out;
}

const PeriodicPoisson& poisson_for(int N) {
    static std::mutex m;
    static std::vector<std::pair<int, std::unique_ptr<PeriodicPoisson>>> cache;
    std::lock_guard<std::mutex> lock(m);
    for (auto& e : cache)
        if (e.first == N) return *e.second;
    cache.emplace_back(N, std::make_unique<PeriodicPoisson>(N));
    return *cache.back().second;
}

}  // namespace

std::vector<Mat2> quadrature_gradients(const PeriodicGrid& grid, const Eigen::VectorXd& phi) {
    const int N = grid.nodes_per_axis();
    const double h = grid.h();
    const ShapeTables& st = shapes();
    CellView view{N, h};
    std::vector<Mat2> out(grid.n_qpts());
    int nodes[4];
    for (int cj = 0; cj < N; ++cj)
        for (int ci = 0; ci < N; ++ci) {
            view.cell_nodes(ci, cj, nodes);
            for (int q = 0; q < 4; ++q) {
                Mat2 g = Mat2::Zero();
                for (int n = 0; n < 4; ++n)
                    for (int c = 0; c < 2; ++c) {
                        g(c, 0) += phi[2 * nodes[n] + c] * st.dN[q][n][0];
                        g(c, 1) += phi[2 * nodes[n] + c] * st.dN[q][n][1];
                    }
                out[4 * (cj * N + ci) + q] = g / h;
            }
        }
    return out;
}

std::vector<Vec2> quadrature_points(const PeriodicGrid& grid) {
    const int N = grid.nodes_per_axis();
    const ShapeTables& st = shapes();
    std::vector<Vec2> out(grid.n_qpts());
    for (int cj = 0; cj < N; ++cj)
        for (int ci = 0; ci < N; ++ci)
            for (int q = 0; q < 4; ++q)
                out[4 * (cj * N + ci) + q] =
                    Vec2((ci + st.gp[q % 2]) * grid.h(), (cj + st.gp[q / 2]) * grid.h());
    return out;
}

double det_quadrature_defect(const PeriodicGrid& grid, const Mat2& F, const Eigen::VectorXd& phi) {
    std::vector<Mat2> grads = quadrature_gradients(grid, phi);
    double qw = grid.h() * grid.h() / 4.0;
    double total = 0.0;
    for (const Mat2& g : grads) total += qw * (F + g).determinant();
    return total - F.determinant() * grid.volume();
}

double barred_energy(const ConvexBound& cb, const PeriodicGrid& grid, const Mat2& F,
                     const Eigen::VectorXd& phi) {
    Workspace ws(cb, grid, F);
    return ws.energy(phi, /*convex_path=*/false);
}

double convex_energy(const ConvexBound& cb, const PeriodicGrid& grid, const Mat2& F,
                     const Eigen::VectorXd& phi) {
    Workspace ws(cb, grid, F);
    return ws.energy(phi, /*convex_path=*/true);
}

double field_l2_norm(const PeriodicGrid& grid, const Eigen::VectorXd& phi) {
    // nodal quadrature of the Q1 field via exact cell integration of bilinears
    const int N = grid.nodes_per_axis();
    CellView view{N, grid.h()};
    double total = 0.0;
    const ShapeTables& st = shapes();
    int nodes[4];
    double qw = grid.h() * grid.h() / 4.0;
    for (int cj = 0; cj < N; ++cj)
        for (int ci = 0; ci < N; ++ci) {
            view.cell_nodes(ci, cj, nodes);
            for (int q = 0; q < 4; ++q) {
                double x = st.gp[q % 2], y = st.gp[q / 2];
                double Nv[4] = {(1 - x) * (1 - y), x * (1 - y), (1 - x) * y, x * y};
                for (int c = 0; c < 2; ++c) {
                    double v = 0.0;
                    for (int n = 0; n < 4; ++n) v += phi[2 * nodes[n] + c] * Nv[n];
                    total += qw * v * v;
                }
            }
        }
    return std::sqrt(total);
}

double field_h1_norm(const PeriodicGrid& grid, const Eigen::VectorXd& phi) {
    double l2 = field_l2_norm(grid, phi);
    std::vector<Mat2> grads = quadrature_gradients(grid, phi);
    double qw = grid.h() * grid.h() / 4.0;
    double semi = 0.0;
    for (const Mat2& g : grads) semi += qw * g.squaredNorm();
    return std::sqrt(l2 * l2 + semi);
}

CorrectorSolution solve_corrector(const ConvexBound& cb, const Mat2& F, const PeriodicGrid& grid,
                                  const SolverOptions& opts) {
    if (grid.n < 4) throw std::invalid_argument("periodic grid requires n >= 4");
    Workspace ws(cb, grid, F);
    const PeriodicPoisson& poisson = poisson_for(grid.nodes_per_axis());
    Eigen::VectorXd start =
        opts.initial ? *opts.initial : Eigen::VectorXd::Zero(grid.n_dofs());

    CorrectorSolution sol;
    sol.grid = grid;
    sol.F = F;

    NewtonOutcome outcome;
    bool used_convex = false;
    try {
        outcome = newton_minimize(ws, poisson, opts, /*convex_path=*/false, start);
    } catch (const SolverError&) {
        if (!opts.use_convex_fallback) throw;
        // Convex path: the constructed V is strongly convex, so the Newton
        // iteration cannot meet negative curvature.
        SolverOptions vopts = opts;
        vopts.allow_nonconvex = false;
        outcome = newton_minimize(ws, poisson, vopts, /*convex_path=*/true,
                                  Eigen::VectorXd::Zero(grid.n_dofs()));
        used_convex = true;
    }

    std::vector<Mat2> states = quadrature_gradients(grid, outcome.phi);
    double max_dist = 0.0;
    for (const Mat2& g : states) max_dist = std::max(max_dist, dist_so(F + g));
    if (used_convex && max_dist >= cb.delta()) {
        throw TrustRegionError(
            "trust region exceeded: max dist_SO(F + grad phi) = " + std::to_string(max_dist) +
                " >= delta = " + std::to_string(cb.delta()) + " after the convex fall-back",
            max_dist);
    }
    if (used_convex) {
        // Inside the matching region V and W + mu det coincide; polish the
        // convex solution so the reported residual refers to the fast path.
        SolverOptions popts = opts;
        popts.initial = outcome.phi;
        popts.use_convex_fallback = false;
        Workspace pws(cb, grid, F);
        outcome = newton_minimize(pws, poisson, popts, /*convex_path=*/false, outcome.phi);
        states = quadrature_gradients(grid, outcome.phi);
        max_dist = 0.0;
        for (const Mat2& g : states) max_dist = std::max(max_dist, dist_so(F + g));
    }
    if (opts.require_containment && max_dist >= cb.delta())
        throw TrustRegionError("trust region exceeded: max dist_SO(F + grad phi) = " +
                                   std::to_string(max_dist) + " >= delta = " +
                                   std::to_string(cb.delta()),
                               max_dist);

    sol.phi = outcome.phi;
    sol.grad_phi = std::move(states);
    sol.diag.newton_iterations = outcome.iterations;
    sol.diag.residual_inf = outcome.residual_inf;
    sol.diag.residual_dual = outcome.residual_dual;
    sol.diag.max_dist_so = max_dist;
    sol.diag.used_convex_path = used_convex;

    // Quadrature energies and the flux J = DWbar(y, F + grad phi) - mean.
    double qw = ws.quad_weight();
    double e_barred = 0.0, e_w = 0.0;
    sol.flux.resize(grid.n_qpts());
    Mat2 mean_flux = Mat2::Zero();
    for (int qpt = 0; qpt < grid.n_qpts(); ++qpt) {
        Mat2 state = F + sol.grad_phi[qpt];
        double a = ws.stiffness_at(qpt);
        DensityEval e = cb.barred_eval_at(a, state);
        e_barred += qw * e.value;
        e_w += qw * cb.model().value_at_stiffness(a, state);
        sol.flux[qpt] = e.grad;
        mean_flux += qw * e.grad;
    }
    mean_flux /= grid.volume();
    for (Mat2& j : sol.flux) j -= mean_flux;
    sol.diag.energy_barred = e_barred;
    sol.diag.energy_w = e_w;
    return sol;
}

void solve_flux_corrector(CorrectorSolution& sol) {
    const PeriodicGrid& grid = sol.grid;
    const int N = grid.nodes_per_axis();
    const double h = grid.h();
    CellView view{N, h};
    const ShapeTables& st = shapes();

    // transfer J to nodes by (mass-lumped) quadrature averaging
    std::vector<Mat2> nodal(grid.n_nodes(), Mat2::Zero());
    std::vector<double> weight(grid.n_nodes(), 0.0);
    double qw = h * h / 4.0;
    int nodes[4];
    for (int cj = 0; cj < N; ++cj)
        for (int ci = 0; ci < N; ++ci) {
            view.cell_nodes(ci, cj, nodes);
            for (int q = 0; q < 4; ++q) {
                double x = st.gp[q % 2], y = st.gp[q / 2];
                double Nv[4] = {(1 - x) * (1 - y), x * (1 - y), (1 - x) * y, x * y};
                const Mat2& J = sol.flux[4 * (cj * N + ci) + q];
                for (int n = 0; n < 4; ++n) {
                    nodal[nodes[n]] += qw * Nv[n] * J;
                    weight[nodes[n]] += qw * Nv[n];
                }
            }
        }
    Mat2 mean = Mat2::Zero();
    for (int i = 0; i < grid.n_nodes(); ++i) {
        nodal[i] /= weight[i];
        mean += nodal[i];
    }
    mean /= grid.n_nodes();
    if (mean.norm() > 1e-10)
        throw SolverError("flux corrector: nodal flux is not mean-free (assembly bug)");

    // -Lap sigma_i12 = d2 J_i1 - d1 J_i2 (centered differences, spectral solve)
    const PeriodicPoisson& poisson = poisson_for(N);
    sol.sigma.resize(2 * grid.n_nodes());
    std::vector<double> rhs(grid.n_nodes()), out(grid.n_nodes());
    for (int i = 0; i < 2; ++i) {
        for (int cj = 0; cj < N; ++cj)
            for (int ci = 0; ci < N; ++ci) {
                double d2_Ji1 = (nodal[view.node(ci, cj + 1)](i, 0) -
                                 nodal[view.node(ci, cj - 1)](i, 0)) /
                                (2.0 * h);
                double d1_Ji2 = (nodal[view.node(ci + 1, cj)](i, 1) -
                                 nodal[view.node(ci - 1, cj)](i, 1)) /
                                (2.0 * h);
                rhs[view.node(ci, cj)] = d2_Ji1 - d1_Ji2;
            }
        poisson.solve(rhs.data(), out.data());
        for (int idx = 0; idx < grid.n_nodes(); ++idx)
            sol.sigma[2 * idx + i] = out[idx] * h * h;  // physical Laplacian scale
    }
}

double flux_corrector_residual(const CorrectorSolution& sol) {
    const PeriodicGrid& grid = sol.grid;
    const int N = grid.nodes_per_axis();
    const double h = grid.h();
    CellView view{N, h};
    const ShapeTables& st = shapes();
    if (sol.sigma.size() == 0) throw std::invalid_argument("sigma not solved");

    // nodal J as in the sigma assembly
    std::vector<Mat2> nodal(grid.n_nodes(), Mat2::Zero());
    std::vector<double> weight(grid.n_nodes(), 0.0);
    double qw = h * h / 4.0;
    int nodes[4];
    for (int cj = 0; cj < N; ++cj)
        for (int ci = 0; ci < N; ++ci) {
            view.cell_nodes(ci, cj, nodes);
            for (int q = 0; q < 4; ++q) {
                double x = st.gp[q % 2], y = st.gp[q / 2];
                double Nv[4] = {(1 - x) * (1 - y), x * (1 - y), (1 - x) * y, x * y};
                const Mat2& J = sol.flux[4 * (cj * N + ci) + q];
                for (int n = 0; n < 4; ++n) {
                    nodal[nodes[n]] += qw * Nv[n] * J;
                    weight[nodes[n]] += qw * Nv[n];
                }
            }
        }
    for (int i = 0; i < grid.n_nodes(); ++i) nodal[i] /= weight[i];

    // -d_k sigma_ijk = J_ij with sigma_i11 = sigma_i22 = 0:
    //   (i, j=1): -d2 sigma_i12 = J_i1;  (i, j=2): +d1 sigma_i12 = J_i2
    double err2 = 0.0;
    for (int cj = 0; cj < N; ++cj)
        for (int ci = 0; ci < N; ++ci)
            for (int i = 0; i < 2; ++i) {
                double d2s = (sol.sigma[2 * view.node(ci, cj + 1) + i] -
                              sol.sigma[2 * view.node(ci, cj - 1) + i]) /
                             (2.0 * h);
                double d1s = (sol.sigma[2 * view.node(ci + 1, cj) + i] -
                              sol.sigma[2 * view.node(ci - 1, cj) + i]) /
                             (2.0 * h);
                double r1 = -d2s - nodal[view.node(ci, cj)](i, 0);
                double r2 = d1s - nodal[view.node(ci, cj)](i, 1);
                err2 += h * h * (r1 * r1 + r2 * r2);
            }
    return std::sqrt(err2 / grid.volume());
}

LinearizedSolution solve_linearized(const ConvexBound& cb, const CorrectorSolution& sol,
                                    const Mat2& G, const SolverOptions& opts) {
    const PeriodicGrid& grid = sol.grid;
    Workspace ws(cb, grid, sol.F);
    const PeriodicPoisson& poisson = poisson_for(grid.nodes_per_axis());

    // L per quadrature point at the converged corrector state
    std::vector<Form4> hess(grid.n_qpts());
    for (int qpt = 0; qpt < grid.n_qpts(); ++qpt)
        hess[qpt] = cb.barred_eval_at(ws.stiffness_at(qpt), sol.F + sol.grad_phi[qpt]).hess;

    // rhs: -sum_q w <L G, grad eta>
    const int N = grid.nodes_per_axis();
    const double h = grid.h();
    const ShapeTables& st = shapes();
    CellView view{N, h};
    double qw = ws.quad_weight();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(grid.n_dofs());
    int nodes[4];
    for (int cj = 0; cj < N; ++cj)
        for (int ci = 0; ci < N; ++ci) {
            view.cell_nodes(ci, cj, nodes);
            for (int q = 0; q < 4; ++q) {
                Mat2 s = unvec(Vec4(hess[4 * (cj * N + ci) + q] * vec(G)));
                for (int n = 0; n < 4; ++n)
                    for (int c = 0; c < 2; ++c)
                        b[2 * nodes[n] + c] -= qw / h *
                                               (s(c, 0) * st.dN[q][n][0] +
                                                s(c, 1) * st.dN[q][n][1]);
            }
        }

    LinearizedSolution lin;
    if (b.lpNorm<Eigen::Infinity>() <= 1e-13 * std::max(1.0, G.norm())) {
        // constant-coefficient case: the right-hand side is pure roundoff
        lin.dphi = Eigen::VectorXd::Zero(grid.n_dofs());
    } else {
        int max_cg = opts.max_cg > 0 ? opts.max_cg : 20 * grid.nodes_per_axis() + 400;
        PcgOutcome cg = pcg(ws, hess, poisson, b, lin.dphi, opts.cg_tol, max_cg);
        if (cg.negative_curvature)
            throw TrustRegionError("linearized cell problem: loss of ellipticity", 0.0);
        if (!cg.converged) throw SolverError("linearized cell problem: CG did not converge");
        lin.cg_iterations = cg.iterations;
        ws.project_mean(lin.dphi);
    }

    std::vector<Mat2> dgrads = quadrature_gradients(grid, lin.dphi);
    lin.dflux.resize(grid.n_qpts());
    Mat2 mean = Mat2::Zero();
    double form = 0.0;
    for (int qpt = 0; qpt < grid.n_qpts(); ++qpt) {
        Mat2 arg = G + dgrads[qpt];
        Mat2 l = unvec(Vec4(hess[qpt] * vec(arg)));
        lin.dflux[qpt] = l;
        mean += qw * l;
        form += qw * inner(l, arg);
    }
    mean /= grid.volume();
    for (Mat2& m : lin.dflux) m -= mean;
    lin.form_value = form / grid.volume();
    return lin;
}

Vec2 LayeredCorrector::value(double y1) const {
    double t = y1 - std::floor(y1);
    int i = 0;
    while (i + 1 < static_cast<int>(breakpoints.size()) - 1 && t > breakpoints[i + 1]) ++i;
    return slopes[i] * t + offsets[i];
}

Eigen::VectorXd LayeredCorrector::interpolate(const PeriodicGrid& grid) const {
    const int N = grid.nodes_per_axis();
    Eigen::VectorXd phi(2 * N * N);
    for (int j = 0; j < N; ++j)
        for (int i = 0; i < N; ++i) {
            Vec2 v = value(i * grid.h());
            phi[2 * (j * N + i)] = v(0);
            phi[2 * (j * N + i) + 1] = v(1);
        }
    // re-center: the nodal mean of the interpolant need not vanish exactly
    for (int c = 0; c < 2; ++c) {
        double mean = 0.0;
        for (int idx = 0; idx < N * N; ++idx) mean += phi[2 * idx + c];
        mean /= N * N;
        for (int idx = 0; idx < N * N; ++idx) phi[2 * idx + c] -= mean;
    }
    return phi;
}

LayeredCorrector solve_layered(const DensityModel& model, const Mat2& F,
                               const SolverOptions& opts) {
    if (model.kind() != DensityModel::Kind::Layered)
        throw std::invalid_argument("solve_layered requires a layered density");
    (void)0;
    const std::vector<double>& t = model.breakpoints();
    const int n_layers = model.num_phases();
    std::vector<double> widths(n_layers);
    for (int i = 0; i < n_layers; ++i) widths[i] = t[i + 1] - t[i];

    // reduced unknowns: slopes of layers 1..n-1; the last layer is eliminated
    const int m = 2 * (n_layers - 1);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(m);

    auto all_slopes = [&](const Eigen::VectorXd& red) {
        std::vector<Vec2> s(n_layers, Vec2::Zero());
        Vec2 acc = Vec2::Zero();
        for (int i = 0; i + 1 < n_layers; ++i) {
            s[i] = Vec2(red[2 * i], red[2 * i + 1]);
            acc += widths[i] * s[i];
        }
        s[n_layers - 1] = -acc / widths[n_layers - 1];
        return s;
    };
    auto energy = [&](const Eigen::VectorXd& red) {
        std::vector<Vec2> s = all_slopes(red);
        double e = 0.0;
        for (int i = 0; i < n_layers; ++i) {
            Mat2 state = F + s[i] * Vec2(1.0, 0.0).transpose();
            e += widths[i] * model.value_at_stiffness(model.phase_stiffness()[i], state);
        }
        return e;
    };

    int iters = 0;
    for (; iters < opts.max_newton; ++iters) {
        std::vector<Vec2> s = all_slopes(c);
        std::vector<Mat2> dw(n_layers);
        std::vector<Form4> d2w(n_layers);
        for (int i = 0; i < n_layers; ++i) {
            Mat2 state = F + s[i] * Vec2(1.0, 0.0).transpose();
            DensityEval e = model.eval_at_stiffness(model.phase_stiffness()[i], state);
            dw[i] = e.grad;
            d2w[i] = e.hess;
        }
        // gradient wrt reduced slopes; chain through the eliminated layer
        const int last = n_layers - 1;
        Eigen::VectorXd g(m);
        for (int i = 0; i + 1 < n_layers; ++i)
            for (int r = 0; r < 2; ++r)
                g[2 * i + r] = widths[i] * (dw[i](r, 0) - dw[last](r, 0));
        if (g.lpNorm<Eigen::Infinity>() <= std::min(opts.newton_tol, 1e-12)) break;

        Eigen::MatrixXd H(m, m);
        for (int i = 0; i + 1 < n_layers; ++i)
            for (int j = 0; j + 1 < n_layers; ++j)
                for (int r = 0; r < 2; ++r)
                    for (int sidx = 0; sidx < 2; ++sidx) {
                        // columns of the 4x4 forms restricted to (r,0), (s,0)
                        double hij = 0.0;
                        if (i == j) hij += widths[i] * d2w[i](2 * r, 2 * sidx);
                        hij += widths[i] * widths[j] / widths[last] * d2w[last](2 * r, 2 * sidx);
                        H(2 * i + r, 2 * j + sidx) = hij;
                    }
        Eigen::VectorXd d = H.ldlt().solve(-g);
        if (!d.allFinite()) throw SolverError("layered oracle: singular Newton system");
        double e0 = energy(c);
        double gd = g.dot(d);
        double step = 1.0;
        bool ok = false;
        if (-gd <= 1e-13 * std::max(1.0, std::abs(e0))) {
            // the predicted decrease is below floating-point resolution of the
            // energy; take the plain Newton step (quadratic regime)
            c += d;
            ok = true;
        }
        for (int ls = 0; !ok && ls < opts.max_line_search; ++ls) {
            Eigen::VectorXd trial = c + step * d;
            if (energy(trial) <= e0 + opts.armijo_c * step * gd) {
                c = trial;
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if (!ok) throw SolverError("layered oracle: Newton line search stalled (F outside trust region)");
        if ((step * d).lpNorm<Eigen::Infinity>() < 1e-16) break;
    }

    LayeredCorrector lc;
    lc.F = F;
    lc.breakpoints = t;
    lc.slopes = all_slopes(c);
    lc.newton_iterations = iters;
    lc.energy_w = energy(c);

    // constant-flux optimality and the common flux column
    Vec2 mean_flux = Vec2::Zero();
    std::vector<Vec2> cols(n_layers);
    for (int i = 0; i < n_layers; ++i) {
        Mat2 state = F + lc.slopes[i] * Vec2(1.0, 0.0).transpose();
        Mat2 dw = model.eval_at_stiffness(model.phase_stiffness()[i], state).grad;
        cols[i] = dw.col(0);
        mean_flux += widths[i] * cols[i];
    }
    lc.flux_column = mean_flux;
    double res = 0.0;
    for (int i = 0; i < n_layers; ++i) res = std::max(res, (cols[i] - mean_flux).norm());
    lc.flux_residual = res;

    // offsets: continuity at interior breakpoints, then zero mean
    lc.offsets.assign(n_layers, Vec2::Zero());
    for (int i = 1; i < n_layers; ++i)
        lc.offsets[i] = lc.offsets[i - 1] + (lc.slopes[i - 1] - lc.slopes[i]) * t[i];
    Vec2 mean = Vec2::Zero();
    for (int i = 0; i < n_layers; ++i) {
        double t0 = t[i], t1 = t[i + 1];
        mean += lc.slopes[i] * 0.5 * (t1 * t1 - t0 * t0) + lc.offsets[i] * (t1 - t0);
    }
    for (int i = 0; i < n_layers; ++i) lc.offsets[i] -= mean;
    return lc;
}

LayeredLinearized layered_linearized(const DensityModel& model, const LayeredCorrector& lc,
                                     const Mat2& G, double mu) {
    const int n_layers = static_cast<int>(lc.slopes.size());
    std::vector<double> widths(n_layers);
    for (int i = 0; i < n_layers; ++i) widths[i] = lc.breakpoints[i + 1] - lc.breakpoints[i];
    std::vector<Form4> L(n_layers);
    for (int i = 0; i < n_layers; ++i) {
        Mat2 state = lc.F + lc.slopes[i] * Vec2(1.0, 0.0).transpose();
        L[i] = model.eval_at_stiffness(model.phase_stiffness()[i], state).hess +
               mu * det_hessian_form();
    }
    const int last = n_layers - 1;
    const int m = 2 * (n_layers - 1);
    LayeredLinearized out;
    out.slope_derivative.assign(n_layers, Vec2::Zero());
    if (m > 0) {
        Eigen::MatrixXd H(m, m);
        Eigen::VectorXd b(m);
        for (int i = 0; i + 1 < n_layers; ++i)
            for (int r = 0; r < 2; ++r) {
                Vec4 er = Vec4::Unit(2 * r);  // vec(e_r (x) e_1)
                b[2 * i + r] = -widths[i] * (vec(G).dot(L[i] * er) - vec(G).dot(L[last] * er));
                for (int j = 0; j + 1 < n_layers; ++j)
                    for (int sidx = 0; sidx < 2; ++sidx) {
                        double hij = 0.0;
                        if (i == j) hij += widths[i] * L[i](2 * r, 2 * sidx);
                        hij += widths[i] * widths[j] / widths[last] * L[last](2 * r, 2 * sidx);
                        H(2 * i + r, 2 * j + sidx) = hij;
                    }
            }
        Eigen::VectorXd d = H.ldlt().solve(b);
        Vec2 acc = Vec2::Zero();
        for (int i = 0; i + 1 < n_layers; ++i) {
            out.slope_derivative[i] = Vec2(d[2 * i], d[2 * i + 1]);
            acc += widths[i] * out.slope_derivative[i];
        }
        out.slope_derivative[last] = -acc / widths[last];
    }
    double form = 0.0;
    for (int i = 0; i < n_layers; ++i) {
        Mat2 arg = G + out.slope_derivative[i] * Vec2(1.0, 0.0).transpose();
        form += widths[i] * vec(arg).dot(L[i] * vec(arg));
    }
    out.form_value_barred = form;
    return out;
}

MultiCellResult multi_cell(const ConvexBound& cb, const Mat2& F, const PeriodicGrid& base_grid,
                           int k, int n_starts, std::uint64_t seed, const SolverOptions& opts,
                           double perturbation) {
    if (k < 1 || k > 3) throw std::invalid_argument("multi_cell supports k in {1, 2, 3}");
    PeriodicGrid grid{base_grid.n, k};

    // warm start: the k-periodized single-cell corrector
    SolverOptions sopts = opts;
    sopts.require_containment = false;
    sopts.allow_nonconvex = true;
    sopts.use_convex_fallback = false;
    CorrectorSolution single;
    {
        SolverOptions first = sopts;
        first.initial.reset();
        single = solve_corrector(cb, F, base_grid, first);
    }
    const int Nb = base_grid.nodes_per_axis();
    const int N = grid.nodes_per_axis();
    Eigen::VectorXd warm(grid.n_dofs());
    for (int j = 0; j < N; ++j)
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < 2; ++c)
                warm[2 * (j * N + i) + c] = single.phi[2 * ((j % Nb) * Nb + (i % Nb)) + c];

    MultiCellResult result;
    result.failed_starts = 0;
    bool have_best = false;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);

    for (int s = 0; s <= n_starts; ++s) {
        Eigen::VectorXd start = warm;
        if (s > 0)
            for (int i = 0; i < start.size(); ++i) start[i] += perturbation * nd(rng);
        SolverOptions o = sopts;
        o.initial = start;
        try {
            CorrectorSolution sol = solve_corrector(cb, F, grid, o);
            double ew = sol.diag.energy_w / grid.volume();
            result.local_minima.push_back(ew);
            if (!have_best || ew < result.energy_w) {
                result.energy_w = ew;
                result.energy_barred = sol.diag.energy_barred / grid.volume();
                result.best = std::move(sol);
                have_best = true;
            }
        } catch (const SolverError&) {
            ++result.failed_starts;
        }
    }
    if (!have_best) throw SolverError("multi_cell: no start converged");
    return result;
}

void CorrectorSolution::write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << "i,j,phi_1,phi_2\n";
    char buf[128];
    const int N = grid.nodes_per_axis();
    for (int j = 0; j < N; ++j)
        for (int i = 0; i < N; ++i) {
            std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g\n", i, j, phi[2 * (j * N + i)],
                          phi[2 * (j * N + i) + 1]);
            os << buf;
        }
}

void CorrectorSolution::write_diagnostics_json(const std::string& path) const {
    nlohmann::json j;
    j["grid_n"] = grid.n;
    j["k"] = grid.k;
    j["F"] = {F(0, 0), F(0, 1), F(1, 0), F(1, 1)};
    j["newton_iterations"] = diag.newton_iterations;
    j["residual_inf"] = diag.residual_inf;
    j["residual_dual"] = diag.residual_dual;
    j["energy_barred"] = diag.energy_barred;
    j["energy_w"] = diag.energy_w;
    j["max_dist_so"] = diag.max_dist_so;
    j["used_convex_path"] = diag.used_convex_path;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << j.dump(2) << "\n";
}

}  // namespace homogelast

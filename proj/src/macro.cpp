#include "homogelast/macro.hpp"

#include <fftw3.h>

#include <cmath>
#include <iostream>
#include <mutex>
#include <unordered_map>

namespace homogelast {

namespace {

std::mutex g_macro_fftw_mutex;

// Homogeneous-Dirichlet 5-point Poisson preconditioner on the (m-1)^2
// interior nodes via the type-I discrete sine transform.
class DirichletPoisson {
  public:
    explicit DirichletPoisson(int m) : m_(m), n_(m - 1) {
        std::lock_guard<std::mutex> lock(g_macro_fftw_mutex);
        buf_ = fftw_alloc_real(static_cast<std::size_t>(n_) * n_);
        plan_ = fftw_plan_r2r_2d(n_, n_, buf_, buf_, FFTW_RODFT00, FFTW_RODFT00, FFTW_ESTIMATE);
        eig_.resize(static_cast<std::size_t>(n_) * n_);
        for (int k1 = 1; k1 <= n_; ++k1)
            for (int k2 = 1; k2 <= n_; ++k2)
                eig_[static_cast<std::size_t>(k1 - 1) * n_ + (k2 - 1)] =
                    4.0 - 2.0 * std::cos(M_PI * k1 / m_) - 2.0 * std::cos(M_PI * k2 / m_);
    }
    ~DirichletPoisson() {
        std::lock_guard<std::mutex> lock(g_macro_fftw_mutex);
        fftw_destroy_plan(plan_);
        fftw_free(buf_);
    }
    DirichletPoisson(const DirichletPoisson&) = delete;
    DirichletPoisson& operator=(const DirichletPoisson&) = delete;

    void solve(const double* f, double* u) const {
        const std::size_t n2 = static_cast<std::size_t>(n_) * n_;
        std::copy(f, f + n2, buf_);
        fftw_execute(plan_);
        for (std::size_t i = 0; i < n2; ++i) buf_[i] /= eig_[i];
        fftw_execute(plan_);
        const double scale = 1.0 / (4.0 * m_ * m_);  // RODFT00 applied twice
        for (std::size_t i = 0; i < n2; ++i) u[i] = buf_[i] * scale;
    }
    int interior() const { return n_; }

  private:
    int m_, n_;
    double* buf_;
    fftw_plan plan_;
    std::vector<double> eig_;
};

const DirichletPoisson& dirichlet_poisson_for(int m) {
    static std::mutex mu;
    static std::vector<std::pair<int, std::unique_ptr<DirichletPoisson>>> cache;
    std::lock_guard<std::mutex> lock(mu);
    for (auto& e : cache)
        if (e.first == m) return *e.second;
    cache.emplace_back(m, std::make_unique<DirichletPoisson>(m));
    return *cache.back().second;
}

struct MacroShape {
    double dN[4][4][2];
    double Nv[4][4];
    double gp[2];
    MacroShape() {
        gp[0] = 0.5 * (1.0 - 1.0 / std::sqrt(3.0));
        gp[1] = 0.5 * (1.0 + 1.0 / std::sqrt(3.0));
        for (int q = 0; q < 4; ++q) {
            double x = gp[q % 2], y = gp[q / 2];
            Nv[q][0] = (1 - x) * (1 - y);
            Nv[q][1] = x * (1 - y);
            Nv[q][2] = (1 - x) * y;
            Nv[q][3] = x * y;
            dN[q][0][0] = -(1 - y);
            dN[q][0][1] = -(1 - x);
            dN[q][1][0] = (1 - y);
            dN[q][1][1] = -x;
            dN[q][2][0] = -y;
            dN[q][2][1] = (1 - x);
            dN[q][3][0] = y;
            dN[q][3][1] = x;
        }
    }
};

const MacroShape& mshapes() {
    static MacroShape s;
    return s;
}

void cell_nodes(const MacroMesh& mesh, int ci, int cj, int out[4]) {
    out[0] = mesh.node(ci, cj);
    out[1] = mesh.node(ci + 1, cj);
    out[2] = mesh.node(ci, cj + 1);
    out[3] = mesh.node(ci + 1, cj + 1);
}

Vec2 qpt_position(const MacroMesh& mesh, int ci, int cj, int q) {
    const MacroShape& st = mshapes();
    return Vec2((ci + st.gp[q % 2]) * mesh.h(), (cj + st.gp[q / 2]) * mesh.h());
}

}  // namespace

Vec2 LoadData::g0(const Vec2& x) const {
    if (g_kind == BoundaryKind::Identity) return x;
    return rotation(g_theta) * x + g_shift;
}

Mat2 LoadData::g0_grad() const {
    if (g_kind == BoundaryKind::Identity) return Mat2::Identity();
    return rotation(g_theta);
}

Vec2 LoadData::g(const Vec2& x) const {
    if (g_kind == BoundaryKind::ShearedRigid)
        return rotation(g_theta) * (x + g_shear * Vec2(x(1), 0.0)) + g_shift;
    return g0(x);
}

Mat2 LoadData::g_grad(const Vec2& x) const {
    (void)x;
    Mat2 G = g0_grad();
    if (g_kind == BoundaryKind::ShearedRigid)
        G += g_shear * rotation(g_theta) * Vec2(1.0, 0.0) * Vec2(0.0, 1.0).transpose();
    return G;
}

double load_smallness(const LoadData& load, const MacroMesh& mesh) {
    const double r = load.r;
    double f_r = 0.0, pert_r = 0.0;
    double dist_g0 = dist_so(load.g0_grad());
    double qw = mesh.h() * mesh.h() / 4.0;
    for (int cj = 0; cj < mesh.m; ++cj)
        for (int ci = 0; ci < mesh.m; ++ci)
            for (int q = 0; q < 4; ++q) {
                Vec2 x = qpt_position(mesh, ci, cj, q);
                f_r += qw * std::pow(load.f.norm(), r);
                Vec2 p = load.g(x) - load.g0(x);
                Mat2 dp = load.g_grad(x) - load.g0_grad();
                // the family is affine, so second derivatives of g - g0 vanish
                pert_r += qw * (std::pow(p.norm(), r) + std::pow(dp.norm(), r));
            }
    return std::pow(f_r, 1.0 / r) + std::pow(pert_r, 1.0 / r) + dist_g0;
}

std::vector<Mat2> macro_gradients(const MacroField& f) {
    const MacroMesh& mesh = f.mesh;
    const MacroShape& st = mshapes();
    std::vector<Mat2> out(mesh.n_qpts());
    int nodes[4];
    for (int cj = 0; cj < mesh.m; ++cj)
        for (int ci = 0; ci < mesh.m; ++ci) {
            cell_nodes(mesh, ci, cj, nodes);
            for (int q = 0; q < 4; ++q) {
                Mat2 g = Mat2::Zero();
                for (int n = 0; n < 4; ++n)
                    for (int c = 0; c < 2; ++c) {
                        g(c, 0) += f.u[2 * nodes[n] + c] * st.dN[q][n][0];
                        g(c, 1) += f.u[2 * nodes[n] + c] * st.dN[q][n][1];
                    }
                out[4 * (cj * mesh.m + ci) + q] = g / mesh.h();
            }
        }
    return out;
}

namespace {

// Shared Newton driver over interior degrees of freedom.
MacroField newton_macro(const PointDensity& density, const LoadData& load, const MacroMesh& mesh,
                        const MacroOptions& opts, const Eigen::VectorXd* warm,
                        MacroDiagnostics* diag_out) {
    const int m = mesh.m;
    const int P = mesh.nodes_per_axis();
    const MacroShape& st = mshapes();
    const double h = mesh.h();
    const double qw = h * h / 4.0;
    const DirichletPoisson& poisson = dirichlet_poisson_for(m);

    MacroField field;
    field.mesh = mesh;
    field.u.resize(mesh.n_dofs());
    for (int j = 0; j < P; ++j)
        for (int i = 0; i < P; ++i) {
            Vec2 gx = load.g(Vec2(i * h, j * h));
            field.u[2 * mesh.node(i, j)] = gx(0);
            field.u[2 * mesh.node(i, j) + 1] = gx(1);
        }
    if (warm) {
        // interior from the warm start, boundary stays at the datum
        for (int j = 1; j < m; ++j)
            for (int i = 1; i < m; ++i)
                for (int c = 0; c < 2; ++c)
                    field.u[2 * mesh.node(i, j) + c] = (*warm)[2 * mesh.node(i, j) + c];
    }

    // constant load functional: l[n,c] = sum_q w f_c N_n(q)
    Eigen::VectorXd load_vec = Eigen::VectorXd::Zero(mesh.n_dofs());
    {
        int nodes[4];
        for (int cj = 0; cj < m; ++cj)
            for (int ci = 0; ci < m; ++ci) {
                cell_nodes(mesh, ci, cj, nodes);
                for (int q = 0; q < 4; ++q)
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c)
                            load_vec[2 * nodes[n] + c] += qw * load.f(c) * st.Nv[q][n];
            }
    }

    auto interior_mask = [&](Eigen::VectorXd& v) {
        for (int j = 0; j < P; ++j)
            for (int i = 0; i < P; ++i)
                if (mesh.is_boundary(i, j)) {
                    v[2 * mesh.node(i, j)] = 0.0;
                    v[2 * mesh.node(i, j) + 1] = 0.0;
                }
    };

    auto energy_of = [&](const Eigen::VectorXd& u) {
        double e = -load_vec.dot(u);
        int nodes[4];
        for (int cj = 0; cj < m; ++cj)
            for (int ci = 0; ci < m; ++ci) {
                cell_nodes(mesh, ci, cj, nodes);
                for (int q = 0; q < 4; ++q) {
                    Mat2 g = Mat2::Zero();
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c) {
                            g(c, 0) += u[2 * nodes[n] + c] * st.dN[q][n][0];
                            g(c, 1) += u[2 * nodes[n] + c] * st.dN[q][n][1];
                        }
                    e += qw * density(4 * (cj * m + ci) + q, g / h, false).value;
                }
            }
        return e;
    };

    std::vector<Form4> hess(mesh.n_qpts());
    auto gradient_of = [&](const Eigen::VectorXd& u, bool fill_hess) {
        Eigen::VectorXd g = -load_vec;
        int nodes[4];
        for (int cj = 0; cj < m; ++cj)
            for (int ci = 0; ci < m; ++ci) {
                cell_nodes(mesh, ci, cj, nodes);
                for (int q = 0; q < 4; ++q) {
                    Mat2 gu = Mat2::Zero();
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c) {
                            gu(c, 0) += u[2 * nodes[n] + c] * st.dN[q][n][0];
                            gu(c, 1) += u[2 * nodes[n] + c] * st.dN[q][n][1];
                        }
                    DensityEval e = density(4 * (cj * m + ci) + q, gu / h, fill_hess);
                    if (fill_hess) hess[4 * (cj * m + ci) + q] = e.hess;
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c)
                            g[2 * nodes[n] + c] += qw / h *
                                                   (e.grad(c, 0) * st.dN[q][n][0] +
                                                    e.grad(c, 1) * st.dN[q][n][1]);
                }
            }
        interior_mask(g);
        return g;
    };

    auto hess_apply = [&](const Eigen::VectorXd& v) {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(mesh.n_dofs());
        int nodes[4];
        for (int cj = 0; cj < m; ++cj)
            for (int ci = 0; ci < m; ++ci) {
                cell_nodes(mesh, ci, cj, nodes);
                double uv[4][2];
                for (int n = 0; n < 4; ++n)
                    for (int c = 0; c < 2; ++c) uv[n][c] = v[2 * nodes[n] + c];
                for (int q = 0; q < 4; ++q) {
                    Mat2 gv = Mat2::Zero();
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c) {
                            gv(c, 0) += uv[n][c] * st.dN[q][n][0];
                            gv(c, 1) += uv[n][c] * st.dN[q][n][1];
                        }
                    gv /= h;
                    Mat2 s = unvec(Vec4(hess[4 * (cj * m + ci) + q] * vec(gv)));
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c)
                            out[2 * nodes[n] + c] += qw / h *
                                                     (s(c, 0) * st.dN[q][n][0] +
                                                      s(c, 1) * st.dN[q][n][1]);
                }
            }
        interior_mask(out);
        return out;
    };

    const int n_int = m - 1;
    Eigen::VectorXd scratch_in(n_int * n_int), scratch_out(n_int * n_int);
    auto precond = [&](const Eigen::VectorXd& r) {
        Eigen::VectorXd z = Eigen::VectorXd::Zero(r.size());
        for (int c = 0; c < 2; ++c) {
            for (int j = 1; j < m; ++j)
                for (int i = 1; i < m; ++i)
                    scratch_in[(j - 1) * n_int + (i - 1)] = r[2 * mesh.node(i, j) + c];
            poisson.solve(scratch_in.data(), scratch_out.data());
            for (int j = 1; j < m; ++j)
                for (int i = 1; i < m; ++i)
                    z[2 * mesh.node(i, j) + c] = scratch_out[(j - 1) * n_int + (i - 1)];
        }
        return z;
    };

    MacroDiagnostics diag;
    int max_cg = opts.max_cg > 0 ? opts.max_cg : 12 * m + 300;
    for (int it = 0; it < opts.max_newton; ++it) {
        Eigen::VectorXd g = gradient_of(field.u, true);
        diag.residual_inf = g.lpNorm<Eigen::Infinity>();
        diag.newton_iterations = it;
        if (diag.residual_inf <= opts.newton_tol) break;

        // preconditioned CG on the interior
        Eigen::VectorXd b = -g;
        Eigen::VectorXd x = Eigen::VectorXd::Zero(b.size());
        Eigen::VectorXd r = b;
        double bnorm = b.norm();
        Eigen::VectorXd z = precond(r);
        Eigen::VectorXd d = z;
        double rz = r.dot(z);
        bool neg_curv = false;
        for (int cit = 0; cit < max_cg; ++cit) {
            Eigen::VectorXd q = hess_apply(d);
            double dq = d.dot(q);
            if (dq <= 1e-14 * d.squaredNorm()) {
                neg_curv = true;
                if (cit == 0) x = d;
                break;
            }
            double alpha = rz / dq;
            x += alpha * d;
            r -= alpha * q;
            if (r.norm() <= opts.cg_tol * bnorm) break;
            z = precond(r);
            double rzn = r.dot(z);
            d = z + (rzn / rz) * d;
            rz = rzn;
        }

        double e0 = energy_of(field.u);
        double gd = g.dot(x);
        if (gd >= 0.0) {
            x = -precond(g);
            gd = g.dot(x);
        }
        double t = 1.0;
        bool accepted = false;
        if (!neg_curv && -gd <= 1e-13 * std::max(1.0, std::abs(e0))) {
            field.u += x;  // decrease below floating-point resolution
            accepted = true;
        }
        for (int ls = 0; !accepted && ls < opts.max_line_search; ++ls) {
            Eigen::VectorXd trial = field.u + t * x;
            if (energy_of(trial) <= e0 + opts.armijo_c * t * gd) {
                field.u = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) throw SolverError("macro solve: line search stalled");
    }
    if (diag.residual_inf > opts.newton_tol)
        throw SolverError("macro solve: Newton did not converge (residual " +
                          std::to_string(diag.residual_inf) + ")");

    diag.energy = energy_of(field.u);
    double max_dist = 0.0;
    for (const Mat2& g : macro_gradients(field)) max_dist = std::max(max_dist, dist_so(g));
    diag.max_dist_so = max_dist;
    if (diag_out) *diag_out = diag;
    return field;
}

}  // namespace

MacroField solve_macro(const PointDensity& density, const LoadData& load, const MacroMesh& mesh,
                       const MacroOptions& opts, const Eigen::VectorXd* warm,
                       MacroDiagnostics* diag) {
    if (mesh.m < 8) throw std::invalid_argument("macro mesh requires m >= 8");
    return newton_macro(density, load, mesh, opts, warm, diag);
}

HomSolveResult solve_hom(const EffectiveDensity& density, double mu, const LoadData& load,
                         const MacroMesh& mesh, const MacroOptions& opts) {
    HomSolveResult out;
    out.lambda = load_smallness(load, mesh);
    double trust = opts.trust_threshold > 0.0 ? opts.trust_threshold : density.trust_radius();
    if (out.lambda > trust)
        throw TrustRegionError("solve_hom: load smallness " + std::to_string(out.lambda) +
                                   " exceeds the trust threshold " + std::to_string(trust),
                               out.lambda);

    PointDensity w_route = [&](int, const Mat2& state, bool need_hess) {
        return density.eval_partial(state, need_hess);
    };
    PointDensity v_route = [&, mu](int, const Mat2& state, bool need_hess) {
        DensityEval e = density.eval_partial(state, need_hess);
        e.value += mu * state.determinant();
        e.grad += mu * cofactor(state);
        e.hess += mu * det_hessian_form();
        return e;
    };

    MacroDiagnostics diag_w, diag_v;
    out.u0 = newton_macro(w_route, load, mesh, opts, nullptr, &diag_w);
    out.u0_convex = newton_macro(v_route, load, mesh, opts, nullptr, &diag_v);
    out.route_gap_h1 = macro_h1_diff(out.u0, out.u0_convex);
    out.diag = diag_w;
    out.max_dist_so = diag_w.max_dist_so;
    if (out.max_dist_so >= density.trust_radius()) {
        // report the offending state rather than silently leaving the region
        throw TrustRegionError("solve_hom: grad u0 leaves the trust region (max dist " +
                                   std::to_string(out.max_dist_so) + ")",
                               out.max_dist_so);
    }
    return out;
}

MacroField solve_eps(const ConvexBound& cb, const LoadData& load, const MacroMesh& mesh,
                     double eps, const MacroOptions& opts, const Eigen::VectorXd* warm,
                     MacroDiagnostics* diag) {
    // eps-mesh compatibility: 1/eps must divide m so that coefficient
    // interfaces align with cell edges
    double cells_per_period = mesh.m * eps;
    if (std::abs(cells_per_period - std::llround(cells_per_period)) > 1e-9)
        throw std::invalid_argument("solve_eps: eps = 1/L with L | m is required");

    const DensityModel& model = cb.model();
    const double mu = cb.mu();
    std::vector<double> stiffness(mesh.n_qpts());
    for (int cj = 0; cj < mesh.m; ++cj)
        for (int ci = 0; ci < mesh.m; ++ci)
            for (int q = 0; q < 4; ++q) {
                Vec2 y = qpt_position(mesh, ci, cj, q) / eps;
                stiffness[4 * (cj * mesh.m + ci) + q] = model.stiffness(y);
            }
    PointDensity osc = [&](int qpt, const Mat2& state, bool need_hess) {
        (void)need_hess;
        DensityEval e = model.eval_at_stiffness(stiffness[qpt], state);
        e.value += mu * state.determinant();
        e.grad += mu * cofactor(state);
        e.hess += mu * det_hessian_form();
        return e;
    };
    MacroField u = newton_macro(osc, load, mesh, opts, warm, diag);
    if (diag) {
        // report the physical (unbarred) energy I_eps(u)
        double qw = mesh.h() * mesh.h() / 4.0;
        std::vector<Mat2> grads = macro_gradients(u);
        double e = 0.0;
        for (int qpt = 0; qpt < mesh.n_qpts(); ++qpt)
            e += qw * model.value_at_stiffness(stiffness[qpt], grads[qpt]);
        for (int cj = 0; cj < mesh.m; ++cj)
            for (int ci = 0; ci < mesh.m; ++ci)
                for (int q = 0; q < 4; ++q) {
                    const MacroShape& st = mshapes();
                    int nodes[4];
                    cell_nodes(mesh, ci, cj, nodes);
                    Vec2 uv = Vec2::Zero();
                    for (int n = 0; n < 4; ++n)
                        for (int c = 0; c < 2; ++c)
                            uv(c) += u.u[2 * nodes[n] + c] * st.Nv[q][n];
                    e -= qw * load.f.dot(uv);
                }
        diag->energy = e;
    }
    return u;
}

double macro_energy(const ConvexBound& cb, const LoadData& load, const MacroField& f, double eps) {
    const MacroMesh& mesh = f.mesh;
    const DensityModel& model = cb.model();
    const MacroShape& st = mshapes();
    double qw = mesh.h() * mesh.h() / 4.0;
    std::vector<Mat2> grads = macro_gradients(f);
    double e = 0.0;
    int nodes[4];
    for (int cj = 0; cj < mesh.m; ++cj)
        for (int ci = 0; ci < mesh.m; ++ci) {
            cell_nodes(mesh, ci, cj, nodes);
            for (int q = 0; q < 4; ++q) {
                Vec2 x = qpt_position(mesh, ci, cj, q);
                e += qw * model.value(x / eps, grads[4 * (cj * mesh.m + ci) + q]);
                Vec2 uv = Vec2::Zero();
                for (int n = 0; n < 4; ++n)
                    for (int c = 0; c < 2; ++c) uv(c) += f.u[2 * nodes[n] + c] * st.Nv[q][n];
                e -= qw * load.f.dot(uv);
            }
        }
    return e;
}

// ---------------------------------------------------------------------------
// Corrector providers

namespace {

class LayeredProvider : public CorrectorProvider {
  public:
    explicit LayeredProvider(const DensityModel& model) : model_(&model) {}

    Vec2 phi(const Vec2& y, const Mat2& F) const override {
        return oracle(F).value(y(0));
    }
    Mat2 grad_y_phi(const Vec2& y, const Mat2& F) const override {
        LayeredCorrector lc = oracle(F);
        double t = y(0) - std::floor(y(0));
        int i = 0;
        while (i + 1 < static_cast<int>(lc.breakpoints.size()) - 1 && t > lc.breakpoints[i + 1])
            ++i;
        return lc.slopes[i] * Vec2(1.0, 0.0).transpose();
    }
    Vec2 dphi(const Vec2& y, const Mat2& F, const Mat2& H) const override {
        LayeredCorrector lc = oracle(F);
        LayeredLinearized lin = layered_linearized(*model_, lc, H, 0.0);
        // reconstruct offsets of the derivative field: continuity + zero mean
        const std::vector<double>& t = lc.breakpoints;
        int n = static_cast<int>(lc.slopes.size());
        std::vector<Vec2> off(n, Vec2::Zero());
        for (int i = 1; i < n; ++i)
            off[i] = off[i - 1] + (lin.slope_derivative[i - 1] - lin.slope_derivative[i]) * t[i];
        Vec2 mean = Vec2::Zero();
        for (int i = 0; i < n; ++i) {
            double t0 = t[i], t1 = t[i + 1];
            mean += lin.slope_derivative[i] * 0.5 * (t1 * t1 - t0 * t0) + off[i] * (t1 - t0);
        }
        for (int i = 0; i < n; ++i) off[i] -= mean;
        double yy = y(0) - std::floor(y(0));
        int i = 0;
        while (i + 1 < n && yy > t[i + 1]) ++i;
        return lin.slope_derivative[i] * yy + off[i];
    }

  private:
    static std::uint64_t key_of(const Mat2& F) {
        std::uint64_t h = 1469598103934665603ull;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) {
                auto q = static_cast<std::int64_t>(std::llround(F(i, j) * 1e12));
                auto u = static_cast<std::uint64_t>(q);
                for (int b = 0; b < 8; ++b) {
                    h ^= (u >> (8 * b)) & 0xff;
                    h *= 1099511628211ull;
                }
            }
        return h;
    }
    LayeredCorrector oracle(const Mat2& F) const {
        std::uint64_t key = key_of(F);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            auto it = cache_.find(key);
            if (it != cache_.end()) return it->second;
        }
        LayeredCorrector lc = solve_layered(*model_, F);
        std::lock_guard<std::mutex> lock(mutex_);
        if (cache_.size() < 1000000) cache_.emplace(key, lc);
        return lc;
    }
    const DensityModel* model_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<std::uint64_t, LayeredCorrector> cache_;
};

class ZeroProvider : public CorrectorProvider {
  public:
    Vec2 phi(const Vec2&, const Mat2&) const override { return Vec2::Zero(); }
    Mat2 grad_y_phi(const Vec2&, const Mat2&) const override { return Mat2::Zero(); }
    Vec2 dphi(const Vec2&, const Mat2&, const Mat2&) const override { return Vec2::Zero(); }
};

// FEM-backed provider for smooth models: nodal interpolation of the cell
// corrector, with a quantized reuse cache (the per-query solve is a full cell
// problem, so macroscopic use is confined to coarse grids).
class FemProvider : public CorrectorProvider {
  public:
    FemProvider(const ConvexBound& cb, PeriodicGrid grid, double radius)
        : cb_(&cb), grid_(grid), radius_(radius) {}

    Vec2 phi(const Vec2& y, const Mat2& F) const override {
        const CorrectorSolution& sol = solution(F);
        return interpolate(sol, y);
    }
    Mat2 grad_y_phi(const Vec2& y, const Mat2& F) const override {
        const CorrectorSolution& sol = solution(F);
        // cell-wise Q1 gradient at y
        const int N = grid_.nodes_per_axis();
        double xs = (y(0) - std::floor(y(0))) * N;
        double ys = (y(1) - std::floor(y(1))) * N;
        int ci = std::min(static_cast<int>(xs), N - 1);
        int cj = std::min(static_cast<int>(ys), N - 1);
        double lx = xs - ci, ly = ys - cj;
        auto nodeval = [&](int i, int j, int c) {
            return sol.phi[2 * ((j % N) * N + (i % N)) + c];
        };
        Mat2 g;
        for (int c = 0; c < 2; ++c) {
            double u00 = nodeval(ci, cj, c), u10 = nodeval(ci + 1, cj, c);
            double u01 = nodeval(ci, cj + 1, c), u11 = nodeval(ci + 1, cj + 1, c);
            g(c, 0) = ((u10 - u00) * (1 - ly) + (u11 - u01) * ly) * N;
            g(c, 1) = ((u01 - u00) * (1 - lx) + (u11 - u10) * lx) * N;
        }
        return g;
    }
    Vec2 dphi(const Vec2& y, const Mat2& F, const Mat2& H) const override {
        const CorrectorSolution& sol = solution(F);
        LinearizedSolution lin = solve_linearized(*cb_, sol, H);
        CorrectorSolution tmp;
        tmp.grid = grid_;
        tmp.phi = lin.dphi;
        return interpolate(tmp, y);
    }

  private:
    Vec2 interpolate(const CorrectorSolution& sol, const Vec2& y) const {
        const int N = grid_.nodes_per_axis();
        double xs = (y(0) - std::floor(y(0))) * N;
        double ys = (y(1) - std::floor(y(1))) * N;
        int ci = std::min(static_cast<int>(xs), N - 1);
        int cj = std::min(static_cast<int>(ys), N - 1);
        double lx = xs - ci, ly = ys - cj;
        Vec2 out;
        for (int c = 0; c < 2; ++c) {
            auto nv = [&](int i, int j) { return sol.phi[2 * ((j % N) * N + (i % N)) + c]; };
            out(c) = nv(ci, cj) * (1 - lx) * (1 - ly) + nv(ci + 1, cj) * lx * (1 - ly) +
                     nv(ci, cj + 1) * (1 - lx) * ly + nv(ci + 1, cj + 1) * lx * ly;
        }
        return out;
    }
    const CorrectorSolution& solution(const Mat2& F) const {
        std::lock_guard<std::mutex> lock(mutex_);
        for (auto& e : cache_)
            if ((e.first - F).norm() <= radius_) return e.second;
        cache_.emplace_back(F, solve_corrector(*cb_, F, grid_));
        return cache_.back().second;
    }
    const ConvexBound* cb_;
    PeriodicGrid grid_;
    double radius_;
    mutable std::mutex mutex_;
    mutable std::vector<std::pair<Mat2, CorrectorSolution>> cache_;
};

}  // namespace

std::unique_ptr<CorrectorProvider> make_corrector_provider(const ConvexBound& cb,
                                                           const PeriodicGrid& fem_grid,
                                                           double cache_radius) {
    const DensityModel& model = cb.model();
    if (model.is_homogeneous()) return std::make_unique<ZeroProvider>();
    if (model.is_layered()) return std::make_unique<LayeredProvider>(model);
    return std::make_unique<FemProvider>(cb, fem_grid, cache_radius);
}

TwoScaleField two_scale_expand(const MacroField& u0, const CorrectorProvider& corr, double eps,
                               double trust_radius) {
    const MacroMesh& mesh = u0.mesh;
    const int m = mesh.m;
    const int P = mesh.nodes_per_axis();
    const double h = mesh.h();
    const MacroShape& st = mshapes();

    auto eta = [&](const Vec2& x) {
        double d = std::min({x(0), x(1), 1.0 - x(0), 1.0 - x(1)});
        return std::min(1.0, std::max(0.0, d) / eps);
    };
    auto grad_eta = [&](const Vec2& x) {
        double d = std::min({x(0), x(1), 1.0 - x(0), 1.0 - x(1)});
        if (d >= eps) return Vec2(0.0, 0.0);
        if (d == x(0)) return Vec2(1.0 / eps, 0.0);
        if (d == 1.0 - x(0)) return Vec2(-1.0 / eps, 0.0);
        if (d == x(1)) return Vec2(0.0, 1.0 / eps);
        return Vec2(0.0, -1.0 / eps);
    };

    // recovered nodal gradient of u0 (average of adjacent cell values)
    std::vector<Mat2> grads = macro_gradients(u0);
    std::vector<Mat2> nodal_grad(mesh.n_nodes(), Mat2::Zero());
    std::vector<double> wsum(mesh.n_nodes(), 0.0);
    int nodes[4];
    for (int cj = 0; cj < m; ++cj)
        for (int ci = 0; ci < m; ++ci) {
            cell_nodes(mesh, ci, cj, nodes);
            Mat2 cell_avg = Mat2::Zero();
            for (int q = 0; q < 4; ++q) cell_avg += 0.25 * grads[4 * (cj * m + ci) + q];
            for (int n = 0; n < 4; ++n) {
                nodal_grad[nodes[n]] += cell_avg;
                wsum[nodes[n]] += 1.0;
            }
        }
    for (int i = 0; i < mesh.n_nodes(); ++i) nodal_grad[i] /= wsum[i];

    TwoScaleField out;
    out.nodal.mesh = mesh;
    out.nodal.u.resize(mesh.n_dofs());
    for (int j = 0; j < P; ++j)
        for (int i = 0; i < P; ++i) {
            Vec2 x(i * h, j * h);
            Mat2 G = nodal_grad[mesh.node(i, j)];
            double d = dist_so(G);
            if (d >= trust_radius)
                throw TrustRegionError("two_scale_expand: grad u0 at node (" + std::to_string(i) +
                                           "," + std::to_string(j) + ") has dist_SO " +
                                           std::to_string(d),
                                       d);
            Vec2 p = corr.phi(x / eps, G);
            double e = eta(x);
            for (int c = 0; c < 2; ++c)
                out.nodal.u[2 * mesh.node(i, j) + c] =
                    u0.u[2 * mesh.node(i, j) + c] + eps * e * p(c);
        }

    // chain-rule gradient at quadrature points:
    //   grad v = grad u0 + eta grad_y phi + eps eta sum_j Dphi[d_j G] (x) e_j
    //            + eps phi (x) grad eta
    out.chain_grad.resize(mesh.n_qpts());
    for (int cj = 0; cj < m; ++cj)
        for (int ci = 0; ci < m; ++ci) {
            cell_nodes(mesh, ci, cj, nodes);
            // cell-wise gradient of the recovered gradient field
            std::array<Mat2, 2> dG;  // d/dx_alpha of G over this cell (Q1)
            for (int alpha = 0; alpha < 2; ++alpha) dG[alpha] = Mat2::Zero();
            for (int q = 0; q < 4; ++q) {
                Vec2 x = qpt_position(mesh, ci, cj, q);
                Mat2 G = Mat2::Zero();
                for (int n = 0; n < 4; ++n) G += st.Nv[q][n] * nodal_grad[nodes[n]];
                Mat2 dG1 = Mat2::Zero(), dG2 = Mat2::Zero();
                for (int n = 0; n < 4; ++n) {
                    dG1 += (st.dN[q][n][0] / h) * nodal_grad[nodes[n]];
                    dG2 += (st.dN[q][n][1] / h) * nodal_grad[nodes[n]];
                }
                double e = eta(x);
                Vec2 ge = grad_eta(x);
                Vec2 y = x / eps;
                Mat2 gv = grads[4 * (cj * m + ci) + q];
                gv += e * corr.grad_y_phi(y, G);
                Vec2 d1 = corr.dphi(y, G, dG1);
                Vec2 d2 = corr.dphi(y, G, dG2);
                gv += eps * e * (d1 * Vec2(1.0, 0.0).transpose() + d2 * Vec2(0.0, 1.0).transpose());
                gv += eps * corr.phi(y, G) * ge.transpose();
                out.chain_grad[4 * (cj * m + ci) + q] = gv;
            }
        }
    return out;
}

double macro_l2_diff(const MacroField& a, const MacroField& b) {
    const MacroMesh& mesh = a.mesh;
    const MacroShape& st = mshapes();
    double qw = mesh.h() * mesh.h() / 4.0;
    double total = 0.0;
    int nodes[4];
    for (int cj = 0; cj < mesh.m; ++cj)
        for (int ci = 0; ci < mesh.m; ++ci) {
            cell_nodes(mesh, ci, cj, nodes);
            for (int q = 0; q < 4; ++q)
                for (int c = 0; c < 2; ++c) {
                    double v = 0.0;
                    for (int n = 0; n < 4; ++n)
                        v += (a.u[2 * nodes[n] + c] - b.u[2 * nodes[n] + c]) * st.Nv[q][n];
                    total += qw * v * v;
                }
        }
    return std::sqrt(total);
}

double macro_h1_diff(const MacroField& a, const MacroField& b) {
    double l2 = macro_l2_diff(a, b);
    std::vector<Mat2> ga = macro_gradients(a);
    std::vector<Mat2> gb = macro_gradients(b);
    double qw = a.mesh.h() * a.mesh.h() / 4.0;
    double semi = 0.0;
    for (std::size_t i = 0; i < ga.size(); ++i) semi += qw * (ga[i] - gb[i]).squaredNorm();
    return std::sqrt(l2 * l2 + semi);
}

namespace {

double h1_error_vs_expansion(const MacroField& u_eps, const TwoScaleField& v) {
    double l2 = macro_l2_diff(u_eps, v.nodal);
    std::vector<Mat2> gu = macro_gradients(u_eps);
    double qw = u_eps.mesh.h() * u_eps.mesh.h() / 4.0;
    double semi = 0.0;
    for (std::size_t i = 0; i < gu.size(); ++i)
        semi += qw * (gu[i] - v.chain_grad[i]).squaredNorm();
    return std::sqrt(l2 * l2 + semi);
}

std::pair<double, double> fit_log_slope(const std::vector<double>& eps,
                                        const std::vector<double>& err) {
    // least squares on log(err) = s log(eps) + c; returns (s, rms residual)
    int n = static_cast<int>(eps.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 0; i < n; ++i) {
        double x = std::log(eps[i]), y = std::log(std::max(err[i], 1e-300));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    double denom = n * sxx - sx * sx;
    double s = (n * sxy - sx * sy) / denom;
    double c = (sy - s * sx) / n;
    double res = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = std::log(eps[i]), y = std::log(std::max(err[i], 1e-300));
        res += (y - (s * x + c)) * (y - (s * x + c));
    }
    return {s, std::sqrt(res / n)};
}

}  // namespace

TwoScaleReport error_study(const ConvexBound& cb, const EffectiveDensity& eff,
                           const LoadData& load, const ErrorStudyOptions& opts) {
    TwoScaleReport report;
    std::unique_ptr<CorrectorProvider> corr = make_corrector_provider(cb, opts.fem_grid);
    std::vector<double> eps_fit, err_fit;
    try {
        for (double eps : opts.eps_list) {
            int m = static_cast<int>(std::llround(opts.mesh_factor / eps));
            MacroMesh mesh{m};
            if (opts.progress)
                (*opts.progress) << "error_study: eps=" << eps << " m=" << m << "\n" << std::flush;

            HomSolveResult hom = solve_hom(eff, cb.mu(), load, mesh, opts.macro);
            TwoScaleField v =
                two_scale_expand(hom.u0, *corr, eps, eff.trust_radius());
            MacroDiagnostics diag_eps;
            MacroField u_eps;
            try {
                u_eps = solve_eps(cb, load, mesh, eps, opts.macro, &v.nodal.u, &diag_eps);
            } catch (const SolverError&) {
                // cold start from the boundary datum
                u_eps = solve_eps(cb, load, mesh, eps, opts.macro, nullptr, &diag_eps);
            }

            TwoScaleRow row;
            row.eps = eps;
            row.m = m;
            row.err_l2 = macro_l2_diff(u_eps, hom.u0);
            row.err_h1 = h1_error_vs_expansion(u_eps, v);
            row.energy_eps = diag_eps.energy;
            row.energy_hom = hom.diag.energy;
            row.energy_expansion = macro_energy(cb, load, v.nodal, eps);
            row.lambda = hom.lambda;
            row.surrogate = std::sqrt(eps) * hom.lambda;
            report.rows.push_back(row);
            eps_fit.push_back(eps);
            err_fit.push_back(row.err_h1);
        }
        report.complete = true;
    } catch (const std::exception& e) {
        report.failure = e.what();
        report.complete = false;
    }
    if (eps_fit.size() >= 2) {
        auto [slope, res] = fit_log_slope(eps_fit, err_fit);
        report.h1_slope = slope;
        report.h1_fit_residual = res;
        std::vector<double> l2s;
        for (const auto& r : report.rows) l2s.push_back(r.err_l2);
        report.l2_slope = fit_log_slope(eps_fit, l2s).first;
        report.monotone_h1 = true;
        for (std::size_t i = 1; i < report.rows.size(); ++i)
            if (report.rows[i].err_h1 > report.rows[i - 1].err_h1) report.monotone_h1 = false;
    }
    return report;
}

}  // namespace homogelast

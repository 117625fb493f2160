// Python bindings for the main operations: density models, the matching
// convex lower bound, cell correctors, homogenized densities, and the
// two-scale error study.

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "homogelast/verification.hpp"

namespace py = pybind11;
using namespace homogelast;

namespace {

py::dict corrector_to_dict(const CorrectorSolution& sol) {
    py::dict d;
    d["grid_n"] = sol.grid.n;
    d["k"] = sol.grid.k;
    d["F"] = Eigen::MatrixXd(sol.F);
    const int N = sol.grid.nodes_per_axis();
    Eigen::MatrixXd phi1(N, N), phi2(N, N);
    for (int j = 0; j < N; ++j)
        for (int i = 0; i < N; ++i) {
            phi1(j, i) = sol.phi[2 * (j * N + i)];
            phi2(j, i) = sol.phi[2 * (j * N + i) + 1];
        }
    d["phi1"] = phi1;
    d["phi2"] = phi2;
    if (sol.sigma.size() > 0) {
        Eigen::MatrixXd s1(N, N), s2(N, N);
        for (int j = 0; j < N; ++j)
            for (int i = 0; i < N; ++i) {
                s1(j, i) = sol.sigma[2 * (j * N + i)];
                s2(j, i) = sol.sigma[2 * (j * N + i) + 1];
            }
        d["sigma1"] = s1;
        d["sigma2"] = s2;
    }
    d["energy_w"] = sol.diag.energy_w;
    d["energy_barred"] = sol.diag.energy_barred;
    d["residual"] = sol.diag.residual_inf;
    d["max_dist_so"] = sol.diag.max_dist_so;
    d["newton_iterations"] = sol.diag.newton_iterations;
    d["used_convex_path"] = sol.diag.used_convex_path;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "periodic homogenization of non-convex elastic energies (2D)";

    m.def("dist_so", [](const Mat2& F) { return dist_so(F); },
          "Frobenius distance to SO(2)", py::arg("F"));
    m.def("rotation", &rotation, py::arg("theta"));
    m.def(
        "det_calculus",
        [](const Mat2& F) {
            DetCalculus d = det_calculus(F);
            return py::make_tuple(d.det, Eigen::MatrixXd(d.grad), Eigen::MatrixXd(d.hess));
        },
        "determinant, cofactor and the constant Hessian form", py::arg("F"));
    m.def(
        "rank_one_min",
        [](const Form4& Q, int resolution) {
            RankOneMin r = rank_one_min(Q, resolution);
            return py::make_tuple(r.value, Eigen::VectorXd(r.a), Eigen::VectorXd(r.b));
        },
        py::arg("Q"), py::arg("resolution") = 720);

    py::class_<DensityModel>(m, "DensityModel")
        .def_static(
            "well",
            [](double alpha, double p, const std::string& modulation, double base,
               double amplitude) {
                Modulation mod;
                mod.kind = modulation == "constant" ? Modulation::Kind::Constant
                                                    : Modulation::Kind::SineProduct;
                mod.base = base;
                mod.amplitude = amplitude;
                return DensityModel::make_well({alpha, p}, mod);
            },
            py::arg("alpha") = 0.1, py::arg("p") = 4.0, py::arg("modulation") = "sine",
            py::arg("base") = 1.0, py::arg("amplitude") = 0.5)
        .def_static(
            "layered",
            [](const std::vector<double>& breakpoints, const std::vector<double>& stiffness,
               double alpha, double p) {
                return DensityModel::make_layered(breakpoints, stiffness, {alpha, p});
            },
            py::arg("breakpoints"), py::arg("stiffness"), py::arg("alpha") = 0.1,
            py::arg("p") = 4.0)
        .def("value", [](const DensityModel& mm, const Vec2& y, const Mat2& F) {
            return mm.value(y, F);
        })
        .def("grad",
             [](const DensityModel& mm, const Vec2& y, const Mat2& F) {
                 return Eigen::MatrixXd(mm.grad(y, F));
             })
        .def("stiffness", [](const DensityModel& mm, const Vec2& y) { return mm.stiffness(y); })
        .def_property_readonly("is_layered", &DensityModel::is_layered);

    m.def(
        "certify",
        [](const DensityModel& model, int n_samples, std::uint64_t seed) {
            ValidityReport rep = certify(model, n_samples, seed);
            py::dict d;
            d["all_passed"] = rep.all_passed();
            py::list margins;
            for (const auto& pm : rep.margins) {
                py::dict e;
                e["name"] = pm.name;
                e["margin"] = pm.margin;
                e["worst"] = pm.worst_value;
                margins.append(e);
            }
            d["margins"] = margins;
            return d;
        },
        py::arg("model"), py::arg("n_samples") = 2000, py::arg("seed") = 42);

    py::class_<CalibrationRecord>(m, "CalibrationRecord")
        .def_readonly("mu", &CalibrationRecord::mu)
        .def_readonly("delta", &CalibrationRecord::delta)
        .def_readonly("lambda_", &CalibrationRecord::lambda)
        .def_readonly("cap_radius", &CalibrationRecord::cap_radius)
        .def_readonly("cap_offset", &CalibrationRecord::cap_offset)
        .def_readonly("mollify_width", &CalibrationRecord::mollify_width)
        .def_readonly("trust_radius", &CalibrationRecord::trust_radius)
        .def("to_json", &CalibrationRecord::to_json)
        .def_static("from_json", &CalibrationRecord::from_json);

    m.def(
        "calibrate",
        [](const DensityModel& model) { return calibrate(model); },
        py::arg("model"), py::call_guard<py::gil_scoped_release>());

    py::class_<ConvexBound>(m, "ConvexBound")
        .def(py::init<const DensityModel&, CalibrationRecord>(), py::arg("model"),
             py::arg("record"), py::keep_alive<1, 2>())
        .def_property_readonly("mu", &ConvexBound::mu)
        .def_property_readonly("delta", &ConvexBound::delta)
        .def_property_readonly("lambda_", &ConvexBound::lambda)
        .def_property_readonly("record", &ConvexBound::record)
        .def("value", [](const ConvexBound& cb, const Vec2& y, const Mat2& F) {
            return cb.value(y, F);
        })
        .def("envelope_value",
             [](const ConvexBound& cb, const Vec2& y, const Mat2& F) {
                 return cb.envelope_value(y, F);
             })
        .def("barred_value",
             [](const ConvexBound& cb, const Vec2& y, const Mat2& F) {
                 return cb.barred_value(y, F);
             });

    m.def(
        "verify_matching",
        [](const ConvexBound& cb, int n, std::uint64_t seed) {
            MatchingReport rep = verify_matching(cb, n, seed);
            py::dict d;
            d["passed"] = rep.passed;
            d["violations"] = rep.lower_bound_violations;
            d["worst_lower_margin"] = rep.worst_lower_margin;
            d["max_matching_error"] = rep.max_matching_error;
            d["midpoint_margin"] = rep.midpoint_margin;
            return d;
        },
        py::arg("cb"), py::arg("n_samples") = 2000, py::arg("seed") = 7,
        py::call_guard<py::gil_scoped_release>());

    m.def(
        "solve_corrector",
        [](const ConvexBound& cb, const Mat2& F, int n, int k, bool flux_corrector) {
            CorrectorSolution sol = solve_corrector(cb, F, PeriodicGrid{n, k});
            if (flux_corrector) solve_flux_corrector(sol);
            return corrector_to_dict(sol);
        },
        py::arg("cb"), py::arg("F"), py::arg("n") = 32, py::arg("k") = 1,
        py::arg("flux_corrector") = false, py::call_guard<py::gil_scoped_release>());

    m.def(
        "solve_layered",
        [](const DensityModel& model, const Mat2& F) {
            LayeredCorrector lc = solve_layered(model, F);
            py::dict d;
            d["breakpoints"] = lc.breakpoints;
            py::list slopes;
            for (const Vec2& c : lc.slopes) slopes.append(Eigen::VectorXd(c));
            d["slopes"] = slopes;
            d["energy_w"] = lc.energy_w;
            d["flux_residual"] = lc.flux_residual;
            d["flux_column"] = Eigen::VectorXd(lc.flux_column);
            return d;
        },
        py::arg("model"), py::arg("F"));

    m.def(
        "w_hom",
        [](const ConvexBound& cb, const Mat2& F, int n) {
            return w_hom(cb, F, PeriodicGrid{n, 1}).w_hom;
        },
        py::arg("cb"), py::arg("F"), py::arg("n") = 32,
        py::call_guard<py::gil_scoped_release>());
    m.def(
        "dw_hom",
        [](const ConvexBound& cb, const Mat2& F, int n) {
            return Eigen::MatrixXd(dw_hom(cb, F, PeriodicGrid{n, 1}));
        },
        py::arg("cb"), py::arg("F"), py::arg("n") = 32,
        py::call_guard<py::gil_scoped_release>());
    m.def(
        "d2w_hom",
        [](const ConvexBound& cb, const Mat2& F, int n) {
            return Eigen::MatrixXd(d2w_hom(cb, F, PeriodicGrid{n, 1}));
        },
        "Hessian as a 4x4 form on row-major vectorized 2x2 matrices", py::arg("cb"),
        py::arg("F"), py::arg("n") = 32, py::call_guard<py::gil_scoped_release>());
    m.def(
        "rank_one_certificate",
        [](const Form4& T) {
            RankOneCertificate c = rank_one_certificate(T);
            return py::make_tuple(c.value, Eigen::VectorXd(c.a), Eigen::VectorXd(c.b));
        },
        py::arg("d2w"));
    m.def(
        "single_vs_multicell",
        [](const ConvexBound& cb, const Mat2& F, int n, const std::vector<int>& k_list,
           int n_starts, std::uint64_t seed) {
            MultiCellComparison cmp =
                single_vs_multicell(cb, F, PeriodicGrid{n, 1}, k_list, n_starts, seed);
            py::list rows;
            for (const auto& row : cmp.rows) {
                py::dict d;
                d["k"] = row.k;
                d["energy_w"] = row.energy_w;
                d["gap"] = row.gap;
                d["rel_gap"] = row.rel_gap;
                rows.append(d);
            }
            return rows;
        },
        py::arg("cb"), py::arg("F"), py::arg("n") = 16, py::arg("k_list") = std::vector<int>{2},
        py::arg("n_starts") = 4, py::arg("seed") = 1, py::call_guard<py::gil_scoped_release>());

    m.def(
        "error_study",
        [](const ConvexBound& cb, const std::vector<double>& eps_list, int mesh_factor,
           const Vec2& f) {
            std::unique_ptr<EffectiveDensity> eff =
                make_effective_density(cb, PeriodicGrid{16, 1}, 0.06);
            LoadData load;
            load.f = f;
            ErrorStudyOptions opts;
            opts.eps_list = eps_list;
            opts.mesh_factor = mesh_factor;
            TwoScaleReport rep = error_study(cb, *eff, load, opts);
            py::dict d;
            d["complete"] = rep.complete;
            d["h1_slope"] = rep.h1_slope;
            d["l2_slope"] = rep.l2_slope;
            d["monotone_h1"] = rep.monotone_h1;
            py::list rows;
            for (const auto& row : rep.rows) {
                py::dict r;
                r["eps"] = row.eps;
                r["m"] = row.m;
                r["err_l2"] = row.err_l2;
                r["err_h1"] = row.err_h1;
                r["energy_eps"] = row.energy_eps;
                r["energy_hom"] = row.energy_hom;
                r["lambda"] = row.lambda;
                rows.append(r);
            }
            d["rows"] = rows;
            return d;
        },
        py::arg("cb"), py::arg("eps_list") = std::vector<double>{0.25, 0.125},
        py::arg("mesh_factor") = 8, py::arg("f") = Vec2(0.0, -0.01),
        py::call_guard<py::gil_scoped_release>());

#ifdef VERSION_INFO
    m.attr("__version__") = VERSION_INFO;
#else
    m.attr("__version__") = "dev";
#endif
}

#ifndef HOMOGELAST_HOMOGENIZE_HPP
#define HOMOGELAST_HOMOGENIZE_HPP

#include <memory>
#include <mutex>
#include <unordered_map>

#include "homogelast/cell.hpp"

// The homogenized density: W_hom(F), DW_hom(F), D2W_hom(F) through the
// single-cell formula and corrector representations. Every query re-solves
// the cell problem by default; caching backends for macroscopic solves are
// opt-in.

namespace homogelast {

struct HomogenizedPoint {
    Mat2 F = Mat2::Identity();
    double w_hom = 0.0;
    Mat2 dw_hom = Mat2::Zero();
    Form4 d2w_hom = Form4::Zero();
    int grid_n = 0;
    int k = 1;
    double residual = 0.0;
    double max_dist_so = 0.0;
};

/// W_hom(F) = quadrature energy of W(y, F + grad phi) per unit volume. The
/// returned point carries diagnostics; dw_hom/d2w_hom stay empty.
HomogenizedPoint w_hom(const ConvexBound& cb, const Mat2& F, const PeriodicGrid& grid,
                       const SolverOptions& opts = {});

/// DW_hom(F) = quadrature average of DW(y, F + grad phi).
Mat2 dw_hom(const ConvexBound& cb, const Mat2& F, const PeriodicGrid& grid,
            const SolverOptions& opts = {});

struct D2Routes {
    Form4 direct = Form4::Zero();         // D2W-form at the linearized minimizer
    Form4 via_null_lagrangian = Form4::Zero();  // L-form minus mu D2det(F)
    double route_gap = 0.0;               // max entrywise difference
};

/// D2W_hom(F) assembled from the 4 canonical linearized solves; both assembly
/// routes are computed and compared.
Form4 d2w_hom(const ConvexBound& cb, const Mat2& F, const PeriodicGrid& grid,
              const SolverOptions& opts = {}, D2Routes* routes = nullptr);

struct RankOneCertificate {
    double value = 0.0;  // min of D2W_hom[a x b, a x b] over unit a, b
    Vec2 a = Vec2::UnitX();
    Vec2 b = Vec2::UnitX();
};

RankOneCertificate rank_one_certificate(const Form4& d2w);

struct MultiCellRow {
    int k = 1;
    double energy_w = 0.0;  // per unit volume
    double gap = 0.0;       // energy_1 - energy_k
    double rel_gap = 0.0;
    int failed_starts = 0;
};

struct MultiCellComparison {
    Mat2 F;
    std::vector<MultiCellRow> rows;
};

/// Energies per unit volume for k in k_list at matched effective resolution
/// (kY discretized with k * n cells per axis).
MultiCellComparison single_vs_multicell(const ConvexBound& cb, const Mat2& F,
                                        const PeriodicGrid& grid, const std::vector<int>& k_list,
                                        int n_starts, std::uint64_t seed,
                                        const SolverOptions& opts = {});

/// Largest sampled dist_SO(F) for which the fast path keeps
/// max dist_SO(F + grad phi) < delta, over rotations times strain directions.
double calibrate_trust_radius(const ConvexBound& cb, const PeriodicGrid& grid, int n_directions,
                              std::uint64_t seed, const SolverOptions& opts = {});

// ---------------------------------------------------------------------------
// Effective (homogenized) density for macroscopic solvers.

class EffectiveDensity {
  public:
    virtual ~EffectiveDensity() = default;
    virtual DensityEval eval(const Mat2& F) const = 0;
    /// Cheaper evaluation when the Hessian is not needed (line searches).
    virtual DensityEval eval_partial(const Mat2& F, bool need_hess) const {
        (void)need_hess;
        return eval(F);
    }
    /// Trust bound for gradients fed to eval (dist_SO).
    virtual double trust_radius() const = 0;
};

/// Layered models: closed-form oracle per evaluation, cached at exact keys.
class LayeredEffectiveDensity : public EffectiveDensity {
  public:
    LayeredEffectiveDensity(const DensityModel& model, double mu, double trust);
    DensityEval eval(const Mat2& F) const override;
    DensityEval eval_partial(const Mat2& F, bool need_hess) const override;
    double trust_radius() const override { return trust_; }
    LayeredCorrector corrector(const Mat2& F) const;

  private:
    const DensityModel* model_;
    double mu_;
    double trust_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<std::uint64_t, DensityEval> cache_;
};

/// Homogeneous models: the corrector vanishes, W_hom = W.
class HomogeneousEffectiveDensity : public EffectiveDensity {
  public:
    HomogeneousEffectiveDensity(const DensityModel& model, double trust);
    DensityEval eval(const Mat2& F) const override;
    double trust_radius() const override { return trust_; }

  private:
    const DensityModel* model_;
    double trust_;
};

/// General models: every query re-solves the cell problem on the stored grid;
/// exact-key cache plus an optional Lipschitz-radius reuse heuristic
/// (radius 0 = off).
class CellFemEffectiveDensity : public EffectiveDensity {
  public:
    CellFemEffectiveDensity(const ConvexBound& cb, PeriodicGrid grid, double trust,
                            double reuse_radius = 0.0);
    DensityEval eval(const Mat2& F) const override;
    double trust_radius() const override { return trust_; }

  private:
    const ConvexBound* cb_;
    PeriodicGrid grid_;
    double trust_;
    double reuse_radius_;
    mutable std::mutex mutex_;
    mutable std::vector<std::pair<Mat2, DensityEval>> cache_;
};

/// Chooses the cheapest exact backend for the model kind.
std::unique_ptr<EffectiveDensity> make_effective_density(const ConvexBound& cb,
                                                         const PeriodicGrid& fem_grid,
                                                         double trust_radius);

}  // namespace homogelast

#endif

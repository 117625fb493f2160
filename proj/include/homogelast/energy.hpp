#ifndef HOMOGELAST_ENERGY_HPP
#define HOMOGELAST_ENERGY_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "homogelast/tensor.hpp"

// Stored-energy density models W(y, F) for periodic composites in 2D.
//
// The concrete family is W(y, F) = a(y) * (dist^2(F, SO(2)) + dist^p(F, SO(2)))
// with a periodic stiffness profile a(y) >= a_min > 0: either a smooth
// modulation or a piecewise-constant layered profile in y_1. All y-access
// reduces y modulo the unit cell.

namespace homogelast {

struct DensityParams {
    double alpha = 0.1;  // growth / non-degeneracy / regularity constant
    double p = 4.0;      // lower growth exponent, p >= d = 2
};

struct Modulation {
    enum class Kind { Constant, SineProduct };
    Kind kind = Kind::Constant;
    double base = 1.0;       // constant value, or base level of the smooth profile
    double amplitude = 0.5;  // SineProduct: a(y) = base + amplitude*(1 + sin(2 pi y1) sin(2 pi y2))

    double value(const Vec2& y) const;
    double min_value() const;
    double max_value() const;
};

struct DensityEval {
    double value = 0.0;
    Mat2 grad = Mat2::Zero();
    Form4 hess = Form4::Zero();
};

class DensityModel {
  public:
    enum class Kind { SingleWell, Layered };

    static DensityModel make_well(const DensityParams& params, const Modulation& modulation);
    static DensityModel make_layered(const std::vector<double>& breakpoints,
                                     const std::vector<double>& phase_stiffness,
                                     const DensityParams& params);

    Kind kind() const { return kind_; }
    const DensityParams& params() const { return params_; }
    const std::vector<double>& breakpoints() const { return breakpoints_; }
    const std::vector<double>& phase_stiffness() const { return phase_stiffness_; }
    int num_phases() const { return static_cast<int>(phase_stiffness_.size()); }

    /// Stiffness a(y), y reduced mod 1.
    double stiffness(const Vec2& y) const;
    /// Layered: phase index of y1 mod 1 (left phase at breakpoints).
    int phase_index(double y1) const;
    double min_stiffness() const;
    double max_stiffness() const;

    double value(const Vec2& y, const Mat2& F) const;
    Mat2 grad(const Vec2& y, const Mat2& F) const;
    DensityEval eval(const Vec2& y, const Mat2& F) const;

    /// Evaluation at a given stiffness level (used by per-phase machinery).
    double value_at_stiffness(double a, const Mat2& F) const;
    DensityEval eval_at_stiffness(double a, const Mat2& F) const;

    /// Scaled copy (no validation) -- negative-control hook for certification
    /// tests; a production model never needs it.
    DensityModel scaled(double factor) const;

    /// True for models whose stiffness depends on y only through y1 and is
    /// piecewise constant (layered closed-form machinery applies).
    bool is_layered() const { return kind_ == Kind::Layered; }
    bool is_homogeneous() const;

  private:
    DensityModel() = default;

    Kind kind_ = Kind::SingleWell;
    DensityParams params_;
    Modulation modulation_;
    std::vector<double> breakpoints_;      // layered: 0 = t0 < ... < tN = 1
    std::vector<double> phase_stiffness_;  // layered: a_i; single well: {base}
    double scale_ = 1.0;
};

struct PropertyMargin {
    std::string name;
    double margin = 0.0;     // >= 0 means the sampled check passed
    double worst_value = 0.0;
    int samples = 0;
};

struct ValidityReport {
    std::vector<PropertyMargin> margins;
    std::uint64_t seed = 0;
    int n_samples = 0;
    bool all_passed() const;
    std::string to_json() const;
};

/// Sampled certification of (W1)-(W4): p-growth from below, frame
/// indifference, natural state / non-degeneracy, and bounded sampled third
/// differences on U_alpha. Failures are data in the report, not exceptions.
ValidityReport certify(const DensityModel& model, int n_samples, std::uint64_t seed);

}  // namespace homogelast

#endif

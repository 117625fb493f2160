#ifndef HOMOGELAST_CONVEXIFY_HPP
#define HOMOGELAST_CONVEXIFY_HPP

#include <cstdint>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "homogelast/energy.hpp"
#include "homogelast/tensor.hpp"

// Matching convex lower bound V for Wbar = W + mu*det:
//   V <= Wbar everywhere,  V = Wbar on U_delta (up to the blend shell),
//   V strongly convex with certified modulus.
//
// Construction: local strong convexity of Wbar near SO(2) is certified on a
// grid (mu, delta, lambda); the envelope Vbar(F) = sup over F0 in U_delta of
// the quadratic minorants Wbar(F0) + DWbar(F0)[F-F0] + lambda|F-F0|^2; a
// quadratic cap Q takes over at large |F|; a mollification of max(Vbar, Q)
// is glued in between with a frame-indifferent cut-off.

namespace homogelast {

struct CalibrationRecord {
    double mu = 0.0;
    double delta = 0.0;
    double lambda = 0.0;        // strong-convexity modulus: D2 Wbar >= 2*lambda on U_2delta
    double cap_radius = 0.0;    // R: cap active for |F| >= R
    double cap_offset = 0.0;    // C0 in Q(F) = (3/2) lambda |F|^2 + min Vbar - C0
    double mollify_width = 0.0; // mollifier support radius
    std::uint64_t seed = 0;

    double ellipticity_margin = 0.0;      // min eig of D2 Wbar over the scan - 2*lambda
    double screen_margin = 0.0;           // min of (Wbar - Vbar) over screening samples
    double blend_convexity_margin = 0.0;  // sampled directional D2V minimum - lambda

    double trust_radius = 0.0;  // largest certified dist_SO(F) for the fast cell path

    // Per-stiffness tables (layered: exact phase values; smooth: a-grid).
    std::vector<double> stiffness_grid;
    std::vector<double> envelope_min;      // min Vbar_a = Vbar_a(0)
    std::vector<double> grad_bound;        // M1(a): max |DWbar_a| on closure of U_delta
    std::vector<double> value_bound;       // M0(a): max Wbar_a on closure of U_delta
    std::vector<double> smoothing_shift;   // C_eps(a): sampled sup of (smoothed - raw)

    std::string to_json() const;
    static CalibrationRecord from_json(const std::string& text);
};

struct CalibrateOptions {
    std::vector<double> mu_grid = {0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75};
    std::vector<double> delta_grid = {0.3, 0.25, 0.2, 0.15, 0.12, 0.095, 0.085, 0.075, 0.06, 0.05};
    std::uint64_t seed = 20230817ull;
    int theta_samples = 12;
    int dir_samples = 10;
    int screen_samples = 1500;
    double mollify_width = 0.0;  // 0: auto (delta/4, shrunk until convexity validates)
    double lambda_floor = 1e-4;
    bool verbose = false;
};

class CalibrationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct EnvelopeOptions {
    int theta_starts = 16;
    int radial_starts = 5;
    int ascent_starts = 8;       // seeds kept for the ascent phase
    double stationarity = 1e-10;
    int max_iterations = 200;
};

struct MatchingReport {
    int n_samples = 0;
    std::uint64_t seed = 0;
    int lower_bound_violations = 0;  // V > Wbar + tol
    double worst_lower_margin = 0.0; // min of (Wbar - V); negative = violation
    double max_matching_error = 0.0; // max |V - Wbar| on U_{delta/2}
    double midpoint_margin = 0.0;    // min over pairs of midpoint strong-convexity slack
    bool passed = false;
    std::string to_json() const;
};

/// Certifies (mu, delta, lambda) by eigenvalue scans of D2(W + mu det) near
/// SO(2), screens the envelope lower-bound property on samples, and fixes the
/// cap and mollification constants. Throws CalibrationError if no admissible
/// pair exists on the supplied grids.
CalibrationRecord calibrate(const DensityModel& model, const CalibrateOptions& opts = {});

class ConvexBound {
  public:
    ConvexBound(const DensityModel& model, CalibrationRecord record,
                EnvelopeOptions envelope_opts = {});

    const CalibrationRecord& record() const { return record_; }
    const DensityModel& model() const { return *model_; }
    double mu() const { return record_.mu; }
    double delta() const { return record_.delta; }
    double lambda() const { return record_.lambda; }

    /// Wbar = W + mu det convenience evaluations.
    double barred_value(const Vec2& y, const Mat2& F) const;
    DensityEval barred_eval(const Vec2& y, const Mat2& F) const;
    DensityEval barred_eval_at(double stiffness, const Mat2& F) const;

    /// The sup-of-quadratics envelope Vbar(y, F).
    double envelope_value(const Vec2& y, const Mat2& F) const;
    double envelope_value_at(double stiffness, const Mat2& F) const;

    /// The glued, mollified V and its derivatives.
    double value(const Vec2& y, const Mat2& F) const;
    double value_at(double stiffness, const Mat2& F) const;
    DensityEval eval(const Vec2& y, const Mat2& F) const;
    DensityEval eval_at(double stiffness, const Mat2& F) const;

    bool inside_matching(const Mat2& F) const { return dist_so(F) < record_.delta; }

    void set_cache_enabled(bool on) const;
    void clear_cache() const;

    /// Exposed for tests: the blend cut-off (1 on U_{delta/2} and beyond 3R,
    /// 0 between U_delta and 2R).
    double cutoff(const Mat2& F) const;

  private:
    friend CalibrationRecord calibrate(const DensityModel&, const CalibrateOptions&);

    struct EnvelopeResult {
        double value;
        Mat2 arg;
    };
    EnvelopeResult envelope_at(double a, const Mat2& F) const;
    EnvelopeResult envelope_local(double a, const Mat2& F, const Mat2& seed) const;
    double cap_value(double a, const Mat2& F) const;       // Q(F)
    double hat_value(double a, const Mat2& F) const;       // max(Vbar, Q) with shortcuts
    Mat2 hat_grad(double a, const Mat2& F) const;
    double mollified_value(double a, const Mat2& F) const;
    Mat2 mollified_grad(double a, const Mat2& F) const;
    double glued_value(double a, const Mat2& F, double rho) const;
    double min_envelope(double a) const;
    double smoothing_shift(double a) const;  // C_eps(a)
    double grad_bound_at(double a) const;

    const DensityModel* model_;
    CalibrationRecord record_;
    EnvelopeOptions eopts_;
    std::vector<Vec4> moll_nodes_;     // fixed nodes, rotated per evaluation point
    std::vector<double> moll_weights;  // normalized bump weights

    mutable std::mutex cache_mutex_;
    mutable std::unordered_map<std::uint64_t, DensityEval> cache_;
    mutable bool cache_enabled_ = true;
};

/// Samples (y, F) in a radius-5 ball: asserts V <= Wbar + 1e-9 globally and
/// |V - Wbar| <= 1e-8 on U_{delta/2}; also samples the midpoint
/// strong-convexity inequality. Failures are data in the report.
MatchingReport verify_matching(const ConvexBound& cb, int n_samples, std::uint64_t seed);

}  // namespace homogelast

#endif

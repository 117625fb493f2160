#include "homogelast/energy.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace homogelast {

namespace {

inline double wrap_unit(double t) {
    double r = t - std::floor(t);
    return (r >= 1.0) ? 0.0 : r;  // guard against floor rounding
}

}  // namespace

double Modulation::value(const Vec2& y) const {
    switch (kind) {
        case Kind::Constant:
            return base;
        case Kind::SineProduct:
            return base + amplitude * (1.0 + std::sin(2.0 * M_PI * y(0)) * std::sin(2.0 * M_PI * y(1)));
    }
    return base;
}

double Modulation::min_value() const {
    return kind == Kind::Constant ? base : base;  // sine factor reaches 0
}

double Modulation::max_value() const {
    return kind == Kind::Constant ? base : base + 2.0 * amplitude;
}

DensityModel DensityModel::make_well(const DensityParams& params, const Modulation& modulation) {
    if (params.p < 2.0) throw std::invalid_argument("density: p must satisfy p >= d = 2");
    if (params.alpha <= 0.0) throw std::invalid_argument("density: alpha must be positive");
    if (modulation.base <= 0.0 || modulation.min_value() <= 0.0)
        throw std::invalid_argument("density: modulation must be strictly positive");
    if (modulation.kind == Modulation::Kind::SineProduct && modulation.amplitude < 0.0)
        throw std::invalid_argument("density: modulation amplitude must be nonnegative");
    DensityModel m;
    m.kind_ = Kind::SingleWell;
    m.params_ = params;
    m.modulation_ = modulation;
    m.phase_stiffness_ = {modulation.base};
    return m;
}

DensityModel DensityModel::make_layered(const std::vector<double>& breakpoints,
                                        const std::vector<double>& phase_stiffness,
                                        const DensityParams& params) {
    if (params.p < 2.0) throw std::invalid_argument("density: p must satisfy p >= d = 2");
    if (params.alpha <= 0.0) throw std::invalid_argument("density: alpha must be positive");
    if (breakpoints.size() < 2 || breakpoints.front() != 0.0 || breakpoints.back() != 1.0)
        throw std::invalid_argument("density: breakpoints must run from 0 to 1");
    for (std::size_t i = 1; i < breakpoints.size(); ++i)
        if (!(breakpoints[i] > breakpoints[i - 1]))
            throw std::invalid_argument("density: breakpoints must be strictly increasing");
    if (phase_stiffness.size() + 1 != breakpoints.size())
        throw std::invalid_argument("density: need one stiffness per layer");
    for (double a : phase_stiffness)
        if (a <= 0.0) throw std::invalid_argument("density: phase stiffness must be positive");
    DensityModel m;
    m.kind_ = Kind::Layered;
    m.params_ = params;
    m.breakpoints_ = breakpoints;
    m.phase_stiffness_ = phase_stiffness;
    return m;
}

int DensityModel::phase_index(double y1) const {
    double t = wrap_unit(y1);
    if (t == 0.0) return num_phases() - 1;  // left phase, wrapped
    for (std::size_t i = 1; i < breakpoints_.size(); ++i)
        if (t <= breakpoints_[i]) return static_cast<int>(i) - 1;
    return num_phases() - 1;
}

double DensityModel::stiffness(const Vec2& y) const {
    if (kind_ == Kind::Layered) return phase_stiffness_[phase_index(y(0))];
    return modulation_.value(Vec2(wrap_unit(y(0)), wrap_unit(y(1))));
}

double DensityModel::min_stiffness() const {
    if (kind_ == Kind::Layered) {
        double m = phase_stiffness_[0];
        for (double a : phase_stiffness_) m = std::min(m, a);
        return m;
    }
    return modulation_.min_value();
}

double DensityModel::max_stiffness() const {
    if (kind_ == Kind::Layered) {
        double m = phase_stiffness_[0];
        for (double a : phase_stiffness_) m = std::max(m, a);
        return m;
    }
    return modulation_.max_value();
}

bool DensityModel::is_homogeneous() const {
    if (kind_ == Kind::SingleWell) return modulation_.kind == Modulation::Kind::Constant;
    for (double a : phase_stiffness_)
        if (a != phase_stiffness_[0]) return false;
    return true;
}

double DensityModel::value_at_stiffness(double a, const Mat2& F) const {
    double D = dist_so_squared(F);
    double ph = params_.p / 2.0;
    return scale_ * a * (D + std::pow(D, ph));
}

DensityEval DensityModel::eval_at_stiffness(double a, const Mat2& F) const {
    // W = a * g(D), D = dist^2(F, SO(2)), g(D) = D + D^(p/2).
    double D = dist_so_squared(F);
    double ph = params_.p / 2.0;
    double g = D + std::pow(D, ph);
    double g1 = 1.0, g2 = 0.0;
    if (ph == 1.0) {
        g1 = 2.0;
    } else {
        if (D > 0.0) {
            g1 = 1.0 + ph * std::pow(D, ph - 1.0);
            g2 = ph * (ph - 1.0) * std::pow(D, ph - 2.0);
        }
        // At D = 0 with p > 2 the singular terms vanish in the limit.
    }
    Mat2 dD = dist_so_squared_grad(F);
    Form4 hD = dist_so_squared_hess(F);
    Vec4 vdD = vec(dD);
    DensityEval out;
    double c = scale_ * a;
    out.value = c * g;
    out.grad = c * g1 * dD;
    out.hess = c * (g1 * hD + g2 * (vdD * vdD.transpose()));
    return out;
}

double DensityModel::value(const Vec2& y, const Mat2& F) const {
    return value_at_stiffness(stiffness(y), F);
}

Mat2 DensityModel::grad(const Vec2& y, const Mat2& F) const {
    return eval(y, F).grad;
}

DensityEval DensityModel::eval(const Vec2& y, const Mat2& F) const {
    return eval_at_stiffness(stiffness(y), F);
}

DensityModel DensityModel::scaled(double factor) const {
    DensityModel m = *this;
    m.scale_ *= factor;
    return m;
}

bool ValidityReport::all_passed() const {
    for (const auto& m : margins)
        if (m.margin < 0.0) return false;
    return true;
}

std::string ValidityReport::to_json() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"seed\":" << seed << ",\"n_samples\":" << n_samples << ",\"checks\":[";
    for (std::size_t i = 0; i < margins.size(); ++i) {
        if (i) os << ",";
        os << "{\"name\":\"" << margins[i].name << "\",\"margin\":" << margins[i].margin
           << ",\"worst\":" << margins[i].worst_value << ",\"samples\":" << margins[i].samples << "}";
    }
    os << "]}";
    return os.str();
}

namespace {

Mat2 sample_ball(std::mt19937_64& rng, double radius) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    Mat2 G;
    G << nd(rng), nd(rng), nd(rng), nd(rng);
    double n = G.norm();
    if (n < 1e-12) return Mat2::Identity();
    return (radius * std::pow(ud(rng), 0.25) / n) * G;
}

Vec2 sample_cell(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    return Vec2(ud(rng), ud(rng));
}

}  // namespace

ValidityReport certify(const DensityModel& model, int n_samples, std::uint64_t seed) {
    ValidityReport rep;
    rep.seed = seed;
    rep.n_samples = n_samples;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
    const double alpha = model.params().alpha;
    const double p = model.params().p;

    PropertyMargin w1{"W1_p_growth", std::numeric_limits<double>::infinity(), 0.0, n_samples};
    PropertyMargin w2{"W2_frame_indifference", std::numeric_limits<double>::infinity(), 0.0, n_samples};
    PropertyMargin w3{"W3_nondegeneracy", std::numeric_limits<double>::infinity(), 0.0, n_samples};
    PropertyMargin w3n{"W3_natural_state", std::numeric_limits<double>::infinity(), 0.0, n_samples};
    PropertyMargin w4{"W4_c3_bound", std::numeric_limits<double>::infinity(), 0.0, n_samples};
    const double w2_tol = 1e-10;

    for (int s = 0; s < n_samples; ++s) {
        Vec2 y = sample_cell(rng);
        Mat2 F = sample_ball(rng, 5.0);
        double W = model.value(y, F);
        double m1 = W - (alpha * std::pow(F.norm(), p) - 1.0 / alpha);
        w1.margin = std::min(w1.margin, m1);
        if (m1 == w1.margin) w1.worst_value = W;
        double m3 = W - alpha * dist_so_squared(F);
        w3.margin = std::min(w3.margin, m3);

        Mat2 R = rotation(angle(rng));
        double dev = std::abs(model.value(y, R * F) - W);
        double m2 = w2_tol - dev;
        if (m2 < w2.margin) {
            w2.margin = m2;
            w2.worst_value = dev;
        }

        // natural state: W(y, R) = 0 and W >= 0
        double wr = model.value(y, rotation(angle(rng)));
        double m3n = std::min(1e-12 - std::abs(wr), W >= 0.0 ? 1.0 : W);
        w3n.margin = std::min(w3n.margin, m3n);
    }

    // Sampled third differences on U_alpha against the C^3 bound 1/alpha.
    std::normal_distribution<double> nd(0.0, 1.0);
    const double h = 1e-2;
    int n3 = std::max(50, n_samples / 20);
    w4.samples = n3;
    double max_d3 = 0.0;
    for (int s = 0; s < n3; ++s) {
        Vec2 y = sample_cell(rng);
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        Mat2 E = sample_ball(rng, 0.95 * alpha);
        Mat2 F = rotation(angle(rng)) + E;
        Mat2 G;
        G << nd(rng), nd(rng), nd(rng), nd(rng);
        G /= G.norm();
        double d3 = (model.value(y, F + 2.0 * h * G) - 2.0 * model.value(y, F + h * G) +
                     2.0 * model.value(y, F - h * G) - model.value(y, F - 2.0 * h * G)) /
                    (2.0 * h * h * h);
        max_d3 = std::max(max_d3, std::abs(d3));
    }
    w4.margin = 1.0 / alpha - max_d3;
    w4.worst_value = max_d3;

    rep.margins = {w1, w2, w3, w3n, w4};
    return rep;
}

}  // namespace homogelast

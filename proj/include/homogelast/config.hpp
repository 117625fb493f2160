#ifndef HOMOGELAST_CONFIG_HPP
#define HOMOGELAST_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "homogelast/convexify.hpp"
#include "homogelast/energy.hpp"
#include "homogelast/macro.hpp"

// Experiment configuration: flat key-value text with [section] headers, or a
// JSON document with the same keys. All randomness is seeded; a config
// round-trips through serialization unchanged.

namespace homogelast {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct DensitySpec {
    std::string kind = "layered";  // layered | well
    std::vector<double> breakpoints = {0.0, 0.5, 1.0};
    std::vector<double> stiffness = {1.0, 4.0};
    double alpha = 0.1;
    double p = 4.0;
    std::string modulation = "sine";  // well: constant | sine
    double base = 1.0;
    double amplitude = 0.5;

    DensityModel build() const;
};

struct FSampleSpec {
    int theta_count = 4;    // rotations per sweep
    double radius = 0.04;   // strain-ball radius (dist_SO)
    int count = 20;
    std::uint64_t seed = 99;

    std::vector<Mat2> sample() const;
};

struct ExperimentConfig {
    DensitySpec density;
    CalibrateOptions calibration;
    int grid_n = 32;
    int k = 1;
    FSampleSpec fsample;
    std::vector<double> eps_list = {1.0 / 8, 1.0 / 16, 1.0 / 32, 1.0 / 64};
    int mesh_factor = 16;
    LoadData load;
    std::string output_dir = "out";
    int threads = 1;
    std::uint64_t seed = 4242;

    std::string serialize() const;            // canonical key-value text
    std::uint64_t hash() const;               // FNV-1a of the serialization
    static ExperimentConfig parse(const std::string& text);
    static ExperimentConfig load_file(const std::string& path);
};

/// Fixed 17-significant-digit formatting used for all machine-readable output.
std::string format_g17(double x);

}  // namespace homogelast

#endif

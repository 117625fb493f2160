#ifndef HOMOGELAST_VERIFICATION_HPP
#define HOMOGELAST_VERIFICATION_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "homogelast/config.hpp"

// The acceptance suite: one entry per gated criterion, each reporting the
// measured value against its pinned threshold. Non-gating probes are
// reported with gated = false.

namespace homogelast {

struct CheckResult {
    std::string name;
    bool pass = false;
    bool gated = true;
    double value = 0.0;      // measured quantity (criterion-specific)
    double threshold = 0.0;  // pinned tolerance it is compared against
    std::string detail;
};

struct AcceptanceReport {
    std::vector<CheckResult> checks;
    std::uint64_t config_hash = 0;
    std::string calibration_json;

    bool all_passed() const;
    std::string to_json() const;
};

/// Runs every acceptance criterion at its pinned tolerance. Progress lines go
/// to `progress` (may be null); the report carries one entry per criterion.
AcceptanceReport run_acceptance(const ExperimentConfig& config, std::ostream* progress);

}  // namespace homogelast

#endif

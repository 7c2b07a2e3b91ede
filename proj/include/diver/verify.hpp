#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "diver/model.hpp"

namespace diver {

// One invariant check. For expected-pass checks the measured deviation must
// stay at or under `tolerance`; for expected-fail checks (an ablation that
// breaks the property by construction) the deviation must exceed
// `fail_threshold` to witness the breakage.
struct CheckResult {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    double fail_threshold = 1e-3;
    bool expect_pass = true;

    bool raw_pass() const { return value <= tolerance; }
    bool as_expected() const {
        return expect_pass ? value <= tolerance : value >= fail_threshold;
    }
};

// Runs the invariant suite against a freshly initialized model built from
// `cfg` (with randomized positional-encoding projections so the properties
// are exercised on nonzero signals). Covers channel permutation equivariance,
// protocol invariance, positional-encoding translation equivariance, rotary
// score relativity, bias collapse, softmax normalization, finite-difference
// gradient spot checks, and the preprocessing filter properties.
std::vector<CheckResult> run_invariant_suite(const ModelConfig& cfg,
                                             uint64_t seed);

bool all_as_expected(const std::vector<CheckResult>& results);

// Fixed-width table: name, measured value, bound, expectation, verdict.
void print_report(const std::vector<CheckResult>& results, std::ostream& os);

}  // namespace diver

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "totem/autodiff.hpp"

namespace totem {

struct GradCheckResult {
    std::string op;
    double max_rel_error = 0.0;
    bool passed = false;
};

/// Compares the tape gradient of `build` (a scalar-valued graph over `params`)
/// against central finite differences (step `step`) on every parameter
/// element; passes when the max relative error stays below `tolerance`.
GradCheckResult check_function(const std::string& name, std::vector<Param*> params,
                               const std::function<Var(Tape&)>& build, double step = 1e-5,
                               double tolerance = 1e-4);

/// Runs the registered suites for a scope ("fusion", "tracker", or "all"):
/// every tape primitive plus the composed fuse / predict / loss paths.
std::vector<GradCheckResult> run_gradcheck(const std::string& scope, std::uint64_t seed = 7);

}  // namespace totem

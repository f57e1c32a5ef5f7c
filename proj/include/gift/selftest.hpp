#pragma once

#include <string>
#include <vector>

namespace gift {

struct SuiteResult {
    std::string name;
    double max_err = 0.0;
    bool pass = false;
    std::string detail;
};

/// Property suites over synthetic inputs. Deterministic; seeds are fixed
/// internally so repeated runs are identical.
SuiteResult suite_feature_shift();          // shifted-feature indexing is exact
SuiteResult suite_gconv_equivariance();     // group conv commutes with shifts, bit-exact
SuiteResult suite_descriptor_invariance();  // shift-related features give equal descriptors
SuiteResult suite_e2e_equivariance();       // image warps induce feature shifts within 10%
SuiteResult suite_pooling_average();        // constant beta branch reduces to average pooling
SuiteResult suite_gradient();               // finite-difference agreement of all gradients
SuiteResult suite_descriptor_norm();        // descriptors come out unit-length

std::vector<SuiteResult> run_all_suites();

} // namespace gift

#pragma once

namespace l2p {

struct GradSuiteResult {
  double max_error = 0.0;
  int checks = 0;
};

/// Central-difference gradient checks (step 1e-5) over every tape op plus
/// both depth-selection heads wired into a small end-to-end loss, repeated
/// across the given number of random seeds. Returns the worst relative
/// error seen.
GradSuiteResult run_grad_suite(int num_seeds);

}  // namespace l2p

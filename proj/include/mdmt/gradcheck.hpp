#pragma once

#include <string>
#include <vector>

#include "mdmt/tape.hpp"

namespace mdmt {

struct GradCheckResult {
  std::string family;
  double worst_rel_err = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

// Central finite differences (step 1e-4, evaluated in 64-bit) against the
// analytic backward pass, over randomized shapes per primitive kind. The
// optional hook deliberately corrupts one kind's backward rule so tests can
// prove the checker catches it.
std::vector<GradCheckResult> run_primitive_gradchecks(uint64_t seed,
                                                      const BackwardHook* hook = nullptr);

// End-to-end check on a tiny model (D=2, T=2, N=2, dims 4/4/4, batch 3 per
// domain): finite differences through the whole forward + loss for a random
// selection of parameters covering every parameter family, including the
// four fusion logit vectors.
std::vector<GradCheckResult> run_model_gradchecks(uint64_t seed);

std::vector<GradCheckResult> run_all_gradchecks(uint64_t seed,
                                                const BackwardHook* hook = nullptr);

bool gradchecks_pass(const std::vector<GradCheckResult>& results);
std::string render_gradcheck_report(const std::vector<GradCheckResult>& results);

}  // namespace mdmt

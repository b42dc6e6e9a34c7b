#pragma once

// Finite-difference checks over every primitive op and a small full model.

#include <string>
#include <vector>

#include "xattn/tensor.hpp"

namespace xattn {

struct GradcheckCase {
  std::string name;
  FiniteDiffReport report;
};

/// Runs one check per op (loss = sum(op(inputs) * fixed weights)) plus the
/// full translation loss of a toy model with dropout 0 and smoothing 0.
std::vector<GradcheckCase> gradcheck_suite(const FiniteDiffOptions& options);

}  // namespace xattn

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mdml {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t coordinates = 64;  // sampled per check when the input is larger
  double tolerance = 1e-4;
  double step = 1e-6;
};

struct GradcheckEntry {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;
  bool passed() const;
};

// Relative error used by every check: |a - n| / max(|a|, |n|, 1e-7).
double gradcheck_relative_error(double analytic, double numeric);

// Central finite differences against the tape for each primitive, the inner
// and outer losses on a small random model, the input gradient, and the
// theta-freeze contract of the outer loss.
GradcheckReport run_gradcheck(const GradcheckOptions& opts = {});

std::string format_gradcheck_report(const GradcheckReport& report);

}  // namespace mdml

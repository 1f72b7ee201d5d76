#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace mhssm {

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct Criterion {
  int id;
  std::string name;
  // Fills passed/detail; progress lines may go to `log`.
  std::function<void(CheckResult&, std::ostream& log)> run;
};

// Criteria 1-6 and 8: numerical and structural invariants, minutes at most.
std::vector<Criterion> selftest_criteria();
// Criterion 7: the learning runs on delayed_echo. `max_steps` caps each run.
Criterion learning_criterion(std::size_t max_steps = 5000);

// Runs each criterion, printing one "PASS"/"FAIL" line per criterion to
// `out`. Exceptions inside a criterion count as failures.
std::vector<CheckResult> run_checks(const std::vector<Criterion>& criteria, std::ostream& out);

}  // namespace mhssm

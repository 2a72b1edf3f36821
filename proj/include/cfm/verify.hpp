#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace cfm::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline constexpr double kGradTolerance = 1e-3;

// Finite-difference checks of every differentiable op over `points` random
// inputs each, plus the full training loss in both branch modes.
std::vector<CheckResult> gradient_checks(std::size_t points = 20);
// InfoNCE uniform case, reconstruction loss closed forms, ensemble collapses.
std::vector<CheckResult> loss_identity_checks();
// Mask partitions over `plans` sampled plans and exclusive-mode token parity.
std::vector<CheckResult> branch_parity_checks(std::size_t plans = 1000);
// Stop-gradient side at the loss and through a full training step.
std::vector<CheckResult> stop_gradient_checks();
// Drop frequency over `draws` draws, eval mode, and the ped_prob = 1 path.
std::vector<CheckResult> ped_checks(std::size_t draws = 10000);
// Identity resize and constant preservation of the PE table.
std::vector<CheckResult> pe_interpolation_checks();
// Byte-exact dataset and checkpoint round trips through files in `dir`.
std::vector<CheckResult> roundtrip_checks(const std::filesystem::path& dir);

std::vector<CheckResult> run_all(const std::filesystem::path& scratch_dir);

// One line per check: "CHECK <name> PASS|FAIL <detail>".
void print(std::ostream& out, const CheckResult& result);
bool all_passed(const std::vector<CheckResult>& results);

}  // namespace cfm::verify

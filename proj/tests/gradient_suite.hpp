#pragma once

// Finite-difference checks of every tape primitive and of the three log
// joints, shared by the unit tests and the acceptance runner.

#include <string>
#include <vector>

namespace sivi::testing {

inline constexpr int kGradientInstances = 20;
inline constexpr double kGradientTolerance = 1e-4;

struct GradientCheck {
  std::string name;
  double worst = 0.0;  // largest relative error over the instances
  int instances = 0;
};

std::vector<GradientCheck> primitive_gradient_checks();
std::vector<GradientCheck> log_joint_gradient_checks();

}  // namespace sivi::testing

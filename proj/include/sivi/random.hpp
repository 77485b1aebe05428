#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>

namespace sivi {

/// Seeded random stream. Wraps a 64-bit Mersenne twister; the full engine
/// state can be saved and restored as text.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream derived from (seed, index).
  static Rng substream(std::uint64_t seed, std::uint64_t index);

  double uniform();          // (0, 1)
  double normal();           // N(0, 1)
  long poisson(double mean);
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);
  Eigen::MatrixXd uniform_matrix(Eigen::Index rows, Eigen::Index cols);

  std::mt19937_64& engine() { return engine_; }

  std::string save() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace sivi

#pragma once

// Artifact formats: dataset and result CSVs, truth and summary JSON, run
// manifests with content hashes.

#include "sivi/models.hpp"
#include "sivi/predict.hpp"
#include "sivi/scoring.hpp"
#include "sivi/variational.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sivi::io {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& path, long line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

/// Scientific notation with 17 significant digits; reads back bit-exactly.
std::string format_double(double v);

/// Header `s1,s2,x1,...,xp,y`; the intercept column is implicit.
void write_dataset(const std::string& path, const SpatialDataset& data);
SpatialDataset read_dataset(const std::string& path);

void write_truth(const std::string& path, const ThetaSample& truth);
ThetaSample read_truth(const std::string& path);

void write_trace(const std::string& path, const std::vector<TraceRow>& trace);

/// `s1,s2,mean,sd,q025,q975` per location.
void write_prediction_summary(const std::string& path, const Eigen::MatrixXd& coords,
                              const PredictiveDraws& draws);
/// Long format: `location,draw,y,mean,var` (Gaussian) or
/// `location,draw,y,lambda` (Poisson), 1-based location and draw.
void write_draws(const std::string& path, const PredictiveDraws& draws);
PredictiveDraws read_draws(const std::string& path);

/// One row per location plus a final `mean` row.
void write_scores(const std::string& path, const ScoreReport& report);
std::string score_summary_json(const ScoreReport& report);

/// 64-bit FNV-1a of a file's bytes, hex encoded.
std::string file_hash(const std::string& path);
std::string hash_bytes(const std::string& bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace sivi::io

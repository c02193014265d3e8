#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace ser {

/// Raised for every contract violation and I/O failure in the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Row-major dense matrix, used where rows are samples.
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// The two binary classification tasks. Class 1 is `positive` valence
/// or `high` arousal.
enum class Task { valence, arousal };

std::string to_string(Task task);
Task parse_task(const std::string& name);

/// Deterministic 64-bit mix of a seed with a string, for deriving
/// per-group and per-item seeds that do not depend on iteration order.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& salt);

}  // namespace ser

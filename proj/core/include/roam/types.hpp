#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace roam {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using IndexVector = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>;

// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when inputs violate a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace roam

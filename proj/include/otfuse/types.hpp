#pragma once

#include <Eigen/Dense>
#include <sstream>
#include <string>

namespace otfuse {

using Index = Eigen::Index;
/// Row-major so that one row is one point (or one neuron's incoming edges).
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

template <class Derived>
std::string shape_str(const Eigen::DenseBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

}  // namespace otfuse

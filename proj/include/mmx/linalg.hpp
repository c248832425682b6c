#pragma once

#include <Eigen/Dense>

namespace mmx {

// Row-major so that a matrix's storage order matches the on-disk layout.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatD = Mat<double>;
using VecD = Vec<double>;

} // namespace mmx

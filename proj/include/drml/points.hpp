#pragma once

#include <Eigen/Core>

namespace drml {

/// A set of (x, y) observations of a scalar function.
struct PointSet {
    Eigen::VectorXd x;
    Eigen::VectorXd y;

    Eigen::Index size() const { return x.size(); }
    bool empty() const { return x.size() == 0; }
};

}  // namespace drml

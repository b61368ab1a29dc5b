#pragma once

#include <algorithm>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "stcal/error.hpp"
#include "stcal/lie.hpp"

namespace stcal {

/// Rotation error as the magnitude of the wrapped yaw-pitch-roll difference,
/// in degrees.
inline double rotation_error_deg(const Rotation& est, const Rotation& truth) {
  const Vec3 d = to_ypr(est) - to_ypr(truth);
  const Vec3 w(wrap_angle(d.x()), wrap_angle(d.y()), wrap_angle(d.z()));
  return w.norm() * 180.0 / M_PI;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty set");
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
    m = 0.5 * (m + v[mid - 1]);
  }
  return m;
}

/// Closed-form similarity alignment (rotation + translation, optional scale)
/// of `est` onto `truth`, then position RMSE.
inline double align_and_rmse(const std::vector<Vec3>& est,
                             const std::vector<Vec3>& truth,
                             bool with_scale = true) {
  if (est.size() != truth.size()) {
    throw DimensionMismatch("align_and_rmse: size mismatch");
  }
  const int n = static_cast<int>(est.size());
  if (n < 3) throw Error("align_and_rmse: need at least 3 poses");

  Eigen::MatrixXd src(3, n), dst(3, n);
  for (int i = 0; i < n; ++i) {
    src.col(i) = est[i];
    dst.col(i) = truth[i];
  }

  // Collinear trajectories leave the rotation about the line unobservable.
  const Eigen::MatrixXd centered = src.colwise() - src.rowwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  if (svd.singularValues()(1) < 1e-9 * (svd.singularValues()(0) + 1e-300)) {
    throw DegenerateTrajectory("align_and_rmse: trajectory is collinear");
  }

  const Eigen::Matrix4d t = Eigen::umeyama(src, dst, with_scale);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vec3 mapped =
        t.topLeftCorner<3, 3>() * src.col(i) + t.topRightCorner<3, 1>();
    sum += (mapped - dst.col(i)).squaredNorm();
  }
  return std::sqrt(sum / n);
}

}  // namespace stcal

#pragma once

#include <optional>

#include <Eigen/Dense>

#include "stcal/lie.hpp"

namespace stcal {

using Vec2 = Eigen::Vector2d;

struct CameraIntrinsics {
  double fx = 460.0;
  double fy = 460.0;
  double cx = 255.0;
  double cy = 255.0;
  int width = 640;
  int height = 640;

  void validate() const {
    if (fx <= 0.0 || fy <= 0.0) throw Error("CameraIntrinsics: fx, fy must be > 0");
  }
};

inline constexpr double kMinDepth = 1e-6;

/// Pinhole projection; requires p.z() > kMinDepth.
inline Vec2 project(const CameraIntrinsics& intr, const Vec3& p_cam) {
  return Vec2(intr.fx * p_cam.x() / p_cam.z() + intr.cx,
              intr.fy * p_cam.y() / p_cam.z() + intr.cy);
}

inline std::optional<Vec2> try_project(const CameraIntrinsics& intr,
                                       const Vec3& p_cam) {
  if (p_cam.z() <= kMinDepth) return std::nullopt;
  return project(intr, p_cam);
}

inline bool in_image(const CameraIntrinsics& intr, const Vec2& px) {
  return px.x() >= 0.0 && px.x() < intr.width && px.y() >= 0.0 &&
         px.y() < intr.height;
}

/// d(projection)/d(p_cam), 2x3.
inline Eigen::Matrix<double, 2, 3> projection_jacobian(
    const CameraIntrinsics& intr, const Vec3& p_cam) {
  const double z_inv = 1.0 / p_cam.z();
  Eigen::Matrix<double, 2, 3> j;
  j << intr.fx * z_inv, 0.0, -intr.fx * p_cam.x() * z_inv * z_inv,  //
      0.0, intr.fy * z_inv, -intr.fy * p_cam.y() * z_inv * z_inv;
  return j;
}

}  // namespace stcal

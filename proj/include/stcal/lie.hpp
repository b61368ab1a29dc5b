#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "stcal/error.hpp"

namespace stcal {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Series switch points: below these the closed-form coefficients are replaced
// by their Taylor expansions so that truncation error stays under machine
// epsilon relative to the exact value.
inline constexpr double kExpSmallAngle = 1e-8;
inline constexpr double kJacSmallAngle = 1e-5;
inline constexpr double kOrthonormalTol = 1e-9;
inline constexpr double kSkewTol = 1e-9;

inline Mat3 hat(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) {
  if ((m + m.transpose()).cwiseAbs().maxCoeff() > kSkewTol) {
    throw NotSkewSymmetric("vee: matrix is not skew-symmetric");
  }
  return Vec3(m(2, 1), m(0, 2), m(1, 0));
}

namespace detail {

// sin(t)/t and (1-cos(t))/t^2 with second-order series near zero.
inline void rodrigues_coeffs(double theta, double* a, double* b) {
  const double t2 = theta * theta;
  if (theta < kExpSmallAngle) {
    *a = 1.0 - t2 / 6.0;
    *b = 0.5 - t2 / 24.0;
  } else {
    *a = std::sin(theta) / theta;
    *b = (1.0 - std::cos(theta)) / t2;
  }
}

inline Mat3 exp_matrix(const Vec3& phi) {
  const double theta = phi.norm();
  double a, b;
  rodrigues_coeffs(theta, &a, &b);
  const Mat3 w = hat(phi);
  return Mat3::Identity() + a * w + b * w * w;
}

inline double orthonormal_defect(const Mat3& m) {
  return (m.transpose() * m - Mat3::Identity()).norm();
}

// Nearest rotation in the Frobenius sense (polar factor).
inline Mat3 polar_normalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return r;
}

}  // namespace detail

// 3x3 orthonormal matrix with determinant +1. Products re-orthonormalize
// (polar decomposition) whenever the accumulated defect exceeds 1e-9, so the
// invariant survives arbitrarily long composition chains.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  explicit Rotation(const Mat3& m) : m_(m) {
    if (detail::orthonormal_defect(m_) > kOrthonormalTol ||
        std::abs(m_.determinant() - 1.0) > 1e-6) {
      throw Error("Rotation: matrix is not orthonormal with det +1");
    }
  }

  static Rotation identity() { return Rotation(); }

  // Projects an approximately-orthonormal matrix onto SO(3).
  static Rotation from_matrix(const Mat3& m) {
    if (detail::orthonormal_defect(m) > kOrthonormalTol) {
      return Rotation(detail::polar_normalize(m), Unchecked{});
    }
    return Rotation(m, Unchecked{});
  }

  static Rotation exp(const Vec3& phi) {
    return Rotation(detail::exp_matrix(phi), Unchecked{});
  }

  // Rotation vector with norm <= pi. The angle-pi case recovers the axis from
  // the largest diagonal element; sign fixed by first nonzero component
  // positive.
  Vec3 log() const {
    const Vec3 w(m_(2, 1) - m_(1, 2), m_(0, 2) - m_(2, 0), m_(1, 0) - m_(0, 1));
    const double theta = std::atan2(0.5 * w.norm(), 0.5 * (m_.trace() - 1.0));
    if (theta < kExpSmallAngle) {
      return 0.5 * w;
    }
    if (theta < M_PI - 1e-6) {
      return (theta / (2.0 * std::sin(theta))) * w;
    }
    // Near pi: w is unreliable, recover the axis from the largest diagonal
    // element of (R + I)/2.
    int i = 0;
    m_.diagonal().maxCoeff(&i);
    Vec3 axis;
    axis[i] = std::sqrt(std::max(0.0, (m_(i, i) + 1.0) / 2.0));
    const int j = (i + 1) % 3;
    const int k = (i + 2) % 3;
    axis[j] = (m_(i, j) + m_(j, i)) / (4.0 * axis[i]);
    axis[k] = (m_(i, k) + m_(k, i)) / (4.0 * axis[i]);
    axis.normalize();
    const double along_w = axis.dot(w);
    if (std::abs(along_w) > 1e-12) {
      // Not exactly at pi: the sign still follows the skew part.
      if (along_w < 0.0) axis = -axis;
    } else {
      // Exactly at pi: fix the sign ambiguity, first nonzero component positive.
      for (int c = 0; c < 3; ++c) {
        if (std::abs(axis[c]) > 1e-12) {
          if (axis[c] < 0.0) axis = -axis;
          break;
        }
      }
    }
    return theta * axis;
  }

  Rotation transposed() const { return Rotation(m_.transpose().eval(), Unchecked{}); }
  Rotation inverse() const { return transposed(); }

  const Mat3& matrix() const { return m_; }

  Rotation operator*(const Rotation& rhs) const {
    Mat3 p = m_ * rhs.m_;
    if (detail::orthonormal_defect(p) > kOrthonormalTol) {
      p = detail::polar_normalize(p);
    }
    return Rotation(p, Unchecked{});
  }

  Vec3 operator*(const Vec3& v) const { return m_ * v; }

 private:
  struct Unchecked {};
  Rotation(const Mat3& m, Unchecked) : m_(m) {}

  Mat3 m_;
};

inline Rotation exp_so3(const Vec3& phi) { return Rotation::exp(phi); }
inline Vec3 log_so3(const Rotation& r) { return r.log(); }

/// Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d).
inline Mat3 right_jacobian(const Vec3& phi) {
  const double theta = phi.norm();
  const double t2 = theta * theta;
  const Mat3 w = hat(phi);
  double b, c;
  if (theta < kJacSmallAngle) {
    b = 0.5 - t2 / 24.0;
    c = 1.0 / 6.0 - t2 / 120.0;
  } else {
    b = (1.0 - std::cos(theta)) / t2;
    c = (theta - std::sin(theta)) / (t2 * theta);
  }
  return Mat3::Identity() - b * w + c * w * w;
}

inline Mat3 left_jacobian(const Vec3& phi) { return right_jacobian(-phi); }

inline Mat3 right_jacobian_inverse(const Vec3& phi) {
  const double theta = phi.norm();
  const double t2 = theta * theta;
  const Mat3 w = hat(phi);
  double d;
  if (theta < kJacSmallAngle) {
    d = 1.0 / 12.0 + t2 / 720.0;
  } else {
    d = 1.0 / t2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  return Mat3::Identity() + 0.5 * w + d * w * w;
}

inline Mat3 left_jacobian_inverse(const Vec3& phi) {
  return right_jacobian_inverse(-phi);
}

inline Rotation rot_x(double a) {
  Mat3 m;
  m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return Rotation::from_matrix(m);
}

inline Rotation rot_y(double a) {
  Mat3 m;
  m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return Rotation::from_matrix(m);
}

inline Rotation rot_z(double a) {
  Mat3 m;
  m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return Rotation::from_matrix(m);
}

/// R = Rz(yaw) Ry(pitch) Rx(roll).
inline Rotation from_ypr(double yaw, double pitch, double roll) {
  return rot_z(yaw) * rot_y(pitch) * rot_x(roll);
}

/// Yaw-pitch-roll (ZYX) angles of R; pitch in [-pi/2, pi/2].
inline Vec3 to_ypr(const Rotation& r) {
  const Mat3& m = r.matrix();
  const double pitch = std::asin(std::clamp(-m(2, 0), -1.0, 1.0));
  double yaw, roll;
  if (std::abs(m(2, 0)) < 1.0 - 1e-12) {
    yaw = std::atan2(m(1, 0), m(0, 0));
    roll = std::atan2(m(2, 1), m(2, 2));
  } else {
    // Gimbal lock: fold everything into yaw.
    yaw = std::atan2(-m(0, 1), m(1, 1));
    roll = 0.0;
  }
  return Vec3(yaw, pitch, roll);
}

inline double wrap_angle(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a < -M_PI) a += 2.0 * M_PI;
  return a;
}

}  // namespace stcal

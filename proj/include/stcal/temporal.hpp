#pragma once

#include <utility>

#include "stcal/error.hpp"
#include "stcal/lie.hpp"

namespace stcal {

inline constexpr double kDefaultMaxTimeOffset = 0.5;  // seconds
inline constexpr double kMinTwistInterval = 1e-6;     // seconds

// IMU timestamp minus camera timestamp for the same physical instant.
struct TimeOffset {
  double td = 0.0;
};

inline TimeOffset make_time_offset(double td,
                                   double max_abs = kDefaultMaxTimeOffset) {
  if (!std::isfinite(td) || std::abs(td) > max_abs) {
    throw TimeOffsetOutOfRange("time offset exceeds configured maximum");
  }
  return TimeOffset{td};
}

// Monocular VO output: rotation is metric, position is scale-ambiguous.
struct CameraPoseUpToScale {
  Rotation rotation;              // R^w_c
  Vec3 position = Vec3::Zero();   // p^w_c, up to scale
  double timestamp = 0.0;
};

// Short-term constant-velocity motion of the camera. v_tilde inherits the
// visual scale ambiguity.
struct CameraTwist {
  Vec3 omega = Vec3::Zero();
  Vec3 v_tilde = Vec3::Zero();
};

struct ImuState {
  Rotation rotation;              // R^w_b
  Vec3 position = Vec3::Zero();   // p^w_b (m)
  Vec3 velocity = Vec3::Zero();   // v^w_b (m/s)
  double timestamp = 0.0;
};

struct Extrinsics {
  Rotation r_bc;                 // R^b_c
  Vec3 p_bc = Vec3::Zero();      // p^b_c (m)

  Rotation r_cb() const { return r_bc.transposed(); }
  Vec3 p_cb() const { return -(r_bc.matrix().transpose() * p_bc); }
};

/// Forward-difference twist of the camera between poses a and b, attached at a.
inline CameraTwist camera_twist(const CameraPoseUpToScale& a,
                                const CameraPoseUpToScale& b) {
  const double dt = b.timestamp - a.timestamp;
  if (dt < kMinTwistInterval) {
    throw DegenerateInterval("camera_twist: interval too small");
  }
  CameraTwist tw;
  tw.omega = (a.rotation.transposed() * b.rotation).log() / dt;
  tw.v_tilde = (b.position - a.position) / dt;
  return tw;
}

/// Camera pose at a.timestamp + td under the constant-twist assumption.
inline CameraPoseUpToScale interpolate_camera(const CameraPoseUpToScale& a,
                                              const CameraTwist& tw, double td) {
  CameraPoseUpToScale out;
  out.rotation = a.rotation * Rotation::exp(tw.omega * td);
  out.position = a.position + tw.v_tilde * td;
  out.timestamp = a.timestamp + td;
  return out;
}

/// IMU state at s.timestamp - td under the constant-velocity assumption.
/// omega_body is the (bias-corrected) body angular velocity at s.timestamp.
inline ImuState interpolate_imu(const ImuState& s, const Vec3& omega_body,
                                double td) {
  ImuState out;
  out.rotation = s.rotation * Rotation::exp(-omega_body * td);
  out.position = s.position - s.velocity * td;
  out.velocity = s.velocity;
  out.timestamp = s.timestamp - td;
  return out;
}

/// IMU pose at the camera timestamp of c:
/// R^w_b = R^w_c Exp(w_c td) R^c_b, p^w_b = R^w_c Exp(w_c td) p^c_b + s (p + v td).
inline std::pair<Rotation, Vec3> imu_from_camera(const CameraPoseUpToScale& c,
                                                 const CameraTwist& tw,
                                                 double td, double s,
                                                 const Extrinsics& ex) {
  if (!(s > 0.0)) throw Error("imu_from_camera: scale must be positive");
  const Rotation r_interp = c.rotation * Rotation::exp(tw.omega * td);
  const Rotation r_wb = r_interp * ex.r_cb();
  const Vec3 p_wb = r_interp * ex.p_cb() + s * (c.position + tw.v_tilde * td);
  return {r_wb, p_wb};
}

/// Camera pose at the IMU timestamp of s; the metric scale cancels here.
inline std::pair<Rotation, Vec3> camera_from_imu(const ImuState& s,
                                                 const Vec3& omega_body,
                                                 double td,
                                                 const Extrinsics& ex) {
  const Rotation r_interp = s.rotation * Rotation::exp(-omega_body * td);
  const Rotation r_wc = r_interp * ex.r_bc;
  const Vec3 p_wc = r_interp * ex.p_bc + s.position - s.velocity * td;
  return {r_wc, p_wc};
}

}  // namespace stcal

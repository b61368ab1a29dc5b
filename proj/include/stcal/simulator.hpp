#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "stcal/camera.hpp"
#include "stcal/error.hpp"
#include "stcal/imu.hpp"
#include "stcal/temporal.hpp"

namespace stcal {

// Circle of `radius` swept at `angular_rate`, sinusoidal vertical motion,
// body x along the horizontal tangent and body z radially inward so the
// camera mounts face the landmark shell, plus a sinusoidal roll about x to
// keep rotation excited about a second axis.
struct TrajectoryConfig {
  double radius = 3.0;            // m
  double angular_rate = 0.85;     // rad/s
  double vertical_amplitude = 0.4;  // m
  double vertical_frequency = 0.5;  // Hz
  double duration = 10.0;         // s
  double roll_amplitude = 0.2;    // rad
  double roll_frequency = 0.5;    // Hz

  void validate() const {
    if (radius <= 0.0 || duration <= 0.0) {
      throw Error("TrajectoryConfig: radius and duration must be positive");
    }
  }
};

struct RigConfig {
  Extrinsics extrinsics{from_ypr(M_PI, 0.0, 0.0), Vec3(0.1, 0.04, 0.03)};
  double time_offset = 0.0;  // added to camera timestamps
  ImuNoiseSpec noise{0.00017, 0.002, 0.00002, 0.003, 200.0};
  Vec3 gyro_bias{-0.0023, 0.0249, 0.0817};    // rad/s, constant part
  Vec3 accel_bias{-0.0236, 0.1210, 0.0748};   // m/s^2, constant part
  CameraIntrinsics intrinsics;
  double camera_rate = 20.0;  // Hz
  int max_features = 500;
  double pixel_noise = 0.0;       // px, std dev
  double wrong_id_fraction = 0.0; // fraction of observations given a wrong id
  double gravity_magnitude = 9.81;
  int landmark_count = 2000;
  double landmark_radius = 6.0;
  double landmark_z_min = -2.0;
  double landmark_z_max = 4.0;

  Vec3 gravity() const { return Vec3(0.0, 0.0, -gravity_magnitude); }

  void validate() const {
    noise.validate();
    intrinsics.validate();
    if (camera_rate <= 0.0) throw Error("RigConfig: camera rate must be positive");
    const double ratio = noise.rate / camera_rate;
    if (std::abs(ratio - std::round(ratio)) > 1e-9) {
      throw Error("RigConfig: imu rate must be an integer multiple of camera rate");
    }
  }
};

struct Landmark {
  int id = 0;
  Vec3 position = Vec3::Zero();
};

struct PixelObservation {
  int landmark_id = 0;
  Vec2 uv = Vec2::Zero();
};

struct CameraFrame {
  double timestamp = 0.0;  // sampling instant + injected time offset
  CameraPoseUpToScale pose;
  std::vector<PixelObservation> observations;
};

struct DatasetTruth {
  Extrinsics extrinsics;
  double time_offset = 0.0;
  Vec3 gyro_bias = Vec3::Zero();
  Vec3 accel_bias = Vec3::Zero();
  Vec3 gravity = Vec3::Zero();
  double applied_scale = 1.0;
};

struct SyntheticDataset {
  std::vector<ImuState> gt_states;   // at IMU sampling instants
  std::vector<ImuSample> imu;
  std::vector<CameraFrame> frames;   // up-to-scale visual output
  std::vector<Landmark> landmarks;   // visual output, same scale as frames
  DatasetTruth truth;
};

struct AnalyticState {
  Rotation attitude;
  Vec3 position;
  Vec3 velocity;
  Vec3 body_angular_velocity;
  Vec3 world_acceleration;
};

/// Closed-form trajectory state; all derivatives are exact.
inline AnalyticState analytic_state(const TrajectoryConfig& cfg, double t) {
  cfg.validate();
  if (t < 0.0 || t > cfg.duration) {
    throw OutOfRange("analytic_state: t outside [0, duration]");
  }
  const double w = cfg.angular_rate;
  const double th = w * t;
  const double wz = 2.0 * M_PI * cfg.vertical_frequency;
  const double wr = 2.0 * M_PI * cfg.roll_frequency;
  const double A = cfg.vertical_amplitude;
  const double r = cfg.radius;

  AnalyticState s;
  s.position = Vec3(r * std::cos(th), r * std::sin(th), A * std::sin(wz * t));
  s.velocity = Vec3(-r * w * std::sin(th), r * w * std::cos(th),
                    A * wz * std::cos(wz * t));
  s.world_acceleration = Vec3(-r * w * w * std::cos(th),
                              -r * w * w * std::sin(th),
                              -A * wz * wz * std::sin(wz * t));

  // R = Rz(psi) Rx(alpha): x along the horizontal tangent, z radially inward
  // at alpha = -pi/2, wobbled by the roll term.
  const double psi = th + M_PI / 2.0;
  const double alpha = -M_PI / 2.0 + cfg.roll_amplitude * std::sin(wr * t);
  const double alpha_dot = cfg.roll_amplitude * wr * std::cos(wr * t);
  s.attitude = rot_z(psi) * rot_x(alpha);
  // R^T dR/dt for R = Rz(psi) Rx(alpha):
  s.body_angular_velocity =
      Vec3(alpha_dot, w * std::sin(alpha), w * std::cos(alpha));
  return s;
}

namespace detail {

inline std::vector<Landmark> generate_cloud(const RigConfig& rig,
                                            std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u_az(0.0, 2.0 * M_PI);
  std::uniform_real_distribution<double> u_z(rig.landmark_z_min,
                                             rig.landmark_z_max);
  std::vector<Landmark> cloud(rig.landmark_count);
  for (int i = 0; i < rig.landmark_count; ++i) {
    const double az = u_az(rng);
    cloud[i] = {i, Vec3(rig.landmark_radius * std::cos(az),
                        rig.landmark_radius * std::sin(az), u_z(rng))};
  }
  return cloud;
}

}  // namespace detail

/// Generates IMU samples, a discrete ground-truth state timeline, and camera
/// frames with pixel observations. The ground truth is the zero-order-hold
/// propagation of the analytic rates/accelerations, so preintegrating the
/// noise-free samples reproduces it to machine precision. Deterministic per
/// seed.
inline SyntheticDataset synthesize(const TrajectoryConfig& traj,
                                   const RigConfig& rig, uint64_t seed) {
  traj.validate();
  rig.validate();

  SyntheticDataset ds;
  ds.truth.extrinsics = rig.extrinsics;
  ds.truth.time_offset = rig.time_offset;
  ds.truth.gyro_bias = rig.gyro_bias;
  ds.truth.accel_bias = rig.accel_bias;
  ds.truth.gravity = rig.gravity();
  ds.truth.applied_scale = 1.0;

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto draw3 = [&]() { return Vec3(gauss(rng), gauss(rng), gauss(rng)); };

  const double dt = 1.0 / rig.noise.rate;
  const int n_steps = static_cast<int>(std::round(traj.duration * rig.noise.rate));
  const Vec3 g = rig.gravity();

  // Discrete ground truth driven by analytic point samples.
  const AnalyticState a0 = analytic_state(traj, 0.0);
  ImuState state{a0.attitude, a0.position, a0.velocity, 0.0};
  ds.gt_states.reserve(n_steps + 1);
  ds.imu.reserve(n_steps);

  const double sg_d = rig.noise.gyro_density / std::sqrt(dt);
  const double sa_d = rig.noise.accel_density / std::sqrt(dt);
  Vec3 bg = rig.gyro_bias;
  Vec3 ba = rig.accel_bias;

  for (int k = 0; k <= n_steps; ++k) {
    const double t = k * dt;
    state.timestamp = t;
    ds.gt_states.push_back(state);
    if (k == n_steps) break;

    const AnalyticState ak = analytic_state(traj, t);
    const Vec3 w_k = ak.body_angular_velocity;
    const Vec3 acc_k = ak.world_acceleration;

    ds.imu.push_back(imu_measure(w_k, acc_k, state.rotation, g, ImuBias{bg, ba},
                                 sg_d * draw3(), sa_d * draw3(), t));

    state.rotation = state.rotation * Rotation::exp(w_k * dt);
    state.position += state.velocity * dt + 0.5 * acc_k * dt * dt;
    state.velocity += acc_k * dt;

    bg += rig.noise.gyro_walk * std::sqrt(dt) * draw3();
    ba += rig.noise.accel_walk * std::sqrt(dt) * draw3();
  }

  // Camera frames at instants coinciding with IMU samples.
  const int stride = static_cast<int>(std::round(rig.noise.rate / rig.camera_rate));
  const Rotation r_bc = rig.extrinsics.r_bc;
  const Vec3 p_bc = rig.extrinsics.p_bc;

  for (int attempt = 0; attempt < 5; ++attempt) {
    std::mt19937_64 cloud_rng(seed * 1315423911ULL + attempt + 1);
    ds.landmarks = detail::generate_cloud(rig, cloud_rng);
    ds.frames.clear();
    bool ok = true;

    std::mt19937_64 px_rng(seed ^ 0xdeadbeefcafef00dULL);
    std::normal_distribution<double> px_gauss(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<int> u_id(0, rig.landmark_count - 1);

    for (int k = 0; k <= n_steps; k += stride) {
      const ImuState& gt = ds.gt_states[k];
      CameraFrame frame;
      frame.timestamp = gt.timestamp + rig.time_offset;
      frame.pose.rotation = gt.rotation * r_bc;
      frame.pose.position = gt.position + gt.rotation * p_bc;
      frame.pose.timestamp = frame.timestamp;

      const Mat3 r_cw = frame.pose.rotation.matrix().transpose();
      for (const Landmark& lm : ds.landmarks) {
        if (static_cast<int>(frame.observations.size()) >= rig.max_features) break;
        const Vec3 p_cam = r_cw * (lm.position - frame.pose.position);
        if (p_cam.z() < 0.1) continue;
        Vec2 uv = project(rig.intrinsics, p_cam);
        if (rig.pixel_noise > 0.0) {
          uv += rig.pixel_noise * Vec2(px_gauss(px_rng), px_gauss(px_rng));
        }
        if (!in_image(rig.intrinsics, uv)) continue;
        int id = lm.id;
        if (rig.wrong_id_fraction > 0.0 && u01(px_rng) < rig.wrong_id_fraction) {
          id = u_id(px_rng);
        }
        frame.observations.push_back({id, uv});
      }
      if (frame.observations.size() < 8) {
        ok = false;
        break;
      }
      ds.frames.push_back(std::move(frame));
    }
    if (ok) return ds;
  }
  throw NoVisibleLandmarks("synthesize: a frame saw fewer than 8 landmarks");
}

/// Divides the visual output (camera positions and landmarks) by s_applied so
/// downstream estimation must recover the metric scale s_applied.
inline SyntheticDataset to_up_to_scale(SyntheticDataset ds, double s_applied) {
  if (!(s_applied > 0.0)) throw Error("to_up_to_scale: scale must be positive");
  const double inv = 1.0 / s_applied;
  for (CameraFrame& f : ds.frames) f.pose.position *= inv;
  for (Landmark& lm : ds.landmarks) lm.position *= inv;
  ds.truth.applied_scale *= s_applied;
  return ds;
}

}  // namespace stcal

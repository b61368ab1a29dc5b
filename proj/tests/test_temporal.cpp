#include "stcal/temporal.hpp"

#include <gtest/gtest.h>

#include "stcal/simulator.hpp"
#include "test_support.hpp"

using namespace stcal;

namespace {

// Constant-twist camera trajectory: exact for the interpolators.
CameraPoseUpToScale constant_twist_pose(const CameraPoseUpToScale& origin,
                                        const CameraTwist& tw, double t) {
  CameraPoseUpToScale p;
  p.rotation = origin.rotation * Rotation::exp(tw.omega * t);
  p.position = origin.position + tw.v_tilde * t;
  p.timestamp = origin.timestamp + t;
  return p;
}

Extrinsics test_extrinsics() {
  return Extrinsics{from_ypr(M_PI, 0.0, 0.0), Vec3(0.1, 0.04, 0.03)};
}

}  // namespace

TEST(Extrinsics, InversePairConsistent) {
  const Extrinsics ex = test_extrinsics();
  const Mat3 rcb = ex.r_cb().matrix();
  EXPECT_LT((rcb - ex.r_bc.matrix().transpose()).norm(), 1e-12);
  EXPECT_LT((ex.p_cb() + rcb * ex.p_bc).norm(), 1e-12);
}

TEST(CameraTwist, IdenticalPosesGiveZero) {
  CameraPoseUpToScale a, b;
  b.timestamp = 0.05;
  const CameraTwist tw = camera_twist(a, b);
  EXPECT_TRUE(tw.omega.isZero(0.0));
  EXPECT_TRUE(tw.v_tilde.isZero(0.0));
}

TEST(CameraTwist, Definitional) {
  CameraPoseUpToScale a;
  CameraPoseUpToScale b;
  b.rotation = a.rotation * Rotation::exp(Vec3(0, 0, 0.1));
  b.timestamp = 0.1;
  const CameraTwist tw = camera_twist(a, b);
  EXPECT_LT((tw.omega - Vec3(0, 0, 1)).norm(), 1e-12);
}

TEST(CameraTwist, DegenerateIntervalThrows) {
  CameraPoseUpToScale a, b;
  b.timestamp = 1e-8;
  EXPECT_THROW(camera_twist(a, b), DegenerateInterval);
}

TEST(CameraTwist, QuadraticAccuracyOnAnalyticTrajectory) {
  // The forward-difference twist is the interval average; it matches the
  // analytic rate at the midpoint to O(dt^2).
  const TrajectoryConfig traj;
  const Extrinsics ex;  // identity: camera frame = body frame
  const auto pose_at = [&](double t) {
    const AnalyticState s = analytic_state(traj, t);
    CameraPoseUpToScale p;
    p.rotation = s.attitude;
    p.position = s.position;
    p.timestamp = t;
    return p;
  };
  const auto err_at = [&](double dt) {
    double worst = 0.0;
    for (double t = 0.5; t < 2.0; t += 0.25) {
      const CameraTwist tw = camera_twist(pose_at(t), pose_at(t + dt));
      const AnalyticState mid = analytic_state(traj, t + 0.5 * dt);
      worst = std::max(worst,
                       (tw.omega - mid.body_angular_velocity).norm());
    }
    return worst;
  };
  EXPECT_LT(err_at(0.05), 5e-3);
  // Quadratic decay: halving dt cuts the error by about 4.
  EXPECT_LT(err_at(0.025), err_at(0.05) / 3.0);
}

TEST(InterpolateCamera, ZeroOffsetIsIdentity) {
  auto rng = test::make_rng(3);
  CameraPoseUpToScale a;
  a.rotation = test::random_rotation(rng);
  a.position = test::random_vec3(rng);
  a.timestamp = 1.5;
  const CameraTwist tw{test::random_vec3(rng), test::random_vec3(rng)};
  const CameraPoseUpToScale out = interpolate_camera(a, tw, 0.0);
  EXPECT_TRUE(out.rotation.matrix().isApprox(a.rotation.matrix(), 1e-15));
  EXPECT_EQ(out.position, a.position);
  EXPECT_EQ(out.timestamp, a.timestamp);
}

TEST(InterpolateCamera, ExactOnConstantTwist) {
  auto rng = test::make_rng(5);
  CameraPoseUpToScale origin;
  origin.rotation = test::random_rotation(rng);
  origin.position = test::random_vec3(rng);
  const CameraTwist tw{Vec3(0.3, -0.2, 0.5), Vec3(1.0, 0.5, -0.3)};
  const CameraPoseUpToScale at = constant_twist_pose(origin, tw, 1.0);
  const CameraPoseUpToScale interp = interpolate_camera(at, tw, 0.05);
  const CameraPoseUpToScale truth = constant_twist_pose(origin, tw, 1.05);
  EXPECT_LT((interp.rotation.matrix() - truth.rotation.matrix()).norm(), 1e-9);
  EXPECT_LT((interp.position - truth.position).norm(), 1e-9);
}

TEST(InterpolateCamera, EndpointConsistency) {
  auto rng = test::make_rng(7);
  CameraPoseUpToScale a, b;
  a.rotation = test::random_rotation(rng);
  a.position = test::random_vec3(rng);
  a.timestamp = 0.0;
  b.rotation = a.rotation * Rotation::exp(test::random_vec3(rng, 0.2));
  b.position = a.position + test::random_vec3(rng);
  b.timestamp = 0.05;
  const CameraTwist tw = camera_twist(a, b);
  const CameraPoseUpToScale end = interpolate_camera(a, tw, 0.05);
  EXPECT_LT((end.position - b.position).norm(), 1e-15);
  EXPECT_LT((end.rotation.matrix() - b.rotation.matrix()).norm(), 1e-9);
}

TEST(InterpolateImu, ZeroOffsetIsIdentity) {
  auto rng = test::make_rng(9);
  ImuState s;
  s.rotation = test::random_rotation(rng);
  s.position = test::random_vec3(rng);
  s.velocity = test::random_vec3(rng);
  s.timestamp = 2.0;
  const ImuState out = interpolate_imu(s, test::random_vec3(rng), 0.0);
  EXPECT_TRUE(out.rotation.matrix().isApprox(s.rotation.matrix(), 1e-15));
  EXPECT_EQ(out.position, s.position);
}

TEST(InterpolateImu, ExactOnConstantTwist) {
  auto rng = test::make_rng(11);
  const Vec3 omega(0.2, 0.4, -0.1);
  const Vec3 vel(0.5, -1.0, 0.2);
  ImuState at;
  at.rotation = test::random_rotation(rng) * Rotation::exp(omega * 1.0);
  at.position = test::random_vec3(rng) + vel * 1.0;
  at.velocity = vel;
  at.timestamp = 1.0;
  const ImuState back = interpolate_imu(at, omega, 0.3);
  // Truth at t = 0.7 on the same constant-twist motion.
  const Mat3 truth_rot =
      (at.rotation * Rotation::exp(-omega * 0.3)).matrix();
  EXPECT_LT((back.rotation.matrix() - truth_rot).norm(), 1e-12);
  EXPECT_LT((back.position - (at.position - vel * 0.3)).norm(), 1e-12);
  EXPECT_EQ(back.timestamp, 0.7);
}

TEST(InterpolateImu, ShiftThenUnshiftIsFirstOrderInverse) {
  auto rng = test::make_rng(13);
  ImuState s;
  s.rotation = test::random_rotation(rng);
  s.position = test::random_vec3(rng);
  s.velocity = test::random_vec3(rng);
  const Vec3 omega = test::random_vec3(rng);
  const double td = 1e-3;
  const ImuState round = interpolate_imu(interpolate_imu(s, omega, td), omega, -td);
  EXPECT_LT((round.rotation.matrix() - s.rotation.matrix()).norm(), 1e-12);
  EXPECT_LT((round.position - s.position).norm(), 1e-12);
}

TEST(Transforms, IdentityCase) {
  CameraPoseUpToScale c;
  c.position = Vec3(1, 2, 3);
  const CameraTwist tw{Vec3(0.1, 0.2, 0.3), Vec3(0.5, 0, 0)};
  const auto [r, p] = imu_from_camera(c, tw, 0.0, 1.0, Extrinsics{});
  EXPECT_TRUE(r.matrix().isIdentity(1e-15));
  EXPECT_EQ(p, c.position);
}

TEST(Transforms, MutualInverseRoundtrip) {
  auto rng = test::make_rng(15);
  const Extrinsics ex = test_extrinsics();
  const double td = 0.04;
  const double s = 2.0;

  CameraPoseUpToScale c;
  c.rotation = test::random_rotation(rng);
  c.position = test::random_vec3(rng);
  c.timestamp = 1.0;
  const CameraTwist tw{Vec3(0.3, -0.1, 0.4), Vec3(0.2, 0.6, -0.3)};

  const auto [r_wb, p_wb] = imu_from_camera(c, tw, td, s, ex);
  // Rigid transfer of the twist to the body frame; metric velocity of the
  // body origin under the constant twist.
  const Vec3 omega_body = ex.r_bc * tw.omega;
  ImuState imu;
  imu.rotation = r_wb;
  imu.position = p_wb;
  const Rotation r_interp = c.rotation * Rotation::exp(tw.omega * td);
  imu.velocity = s * tw.v_tilde + (r_interp.matrix() * hat(tw.omega)) *
                                      ex.p_cb();
  imu.timestamp = c.timestamp;

  const auto [r_wc, p_wc] = camera_from_imu(imu, omega_body, td, ex);
  EXPECT_LT((r_wc.matrix() - c.rotation.matrix()).norm(), 1e-9);
  EXPECT_LT((p_wc - s * c.position).norm(), 2e-4);
}

TEST(Transforms, ScaleActsOnTranslationOnly) {
  auto rng = test::make_rng(17);
  const Extrinsics ex = test_extrinsics();
  CameraPoseUpToScale c;
  c.rotation = test::random_rotation(rng);
  c.position = test::random_vec3(rng);
  const CameraTwist tw{test::random_vec3(rng, 0.3), test::random_vec3(rng)};
  const auto [r1, p1] = imu_from_camera(c, tw, 0.03, 1.0, ex);
  const auto [r2, p2] = imu_from_camera(c, tw, 0.03, 2.0, ex);
  EXPECT_LT((r1.matrix() - r2.matrix()).norm(), 1e-15);
  const Vec3 cam_term = p2 - p1;  // equals s * (p + v td) for the extra s
  EXPECT_LT((cam_term - (c.position + tw.v_tilde * 0.03)).norm(), 1e-12);
}

TEST(Transforms, SimulatorGroundTruthRecovery) {
  // Camera keyframes at 20 Hz with the true offset/scale/extrinsics recover
  // the IMU states within the constant-twist interpolation error.
  TrajectoryConfig traj = test::short_trajectory(3.0);
  RigConfig rig = test::clean_rig();
  rig.time_offset = 0.05;
  SyntheticDataset ds = synthesize(traj, rig, 1);
  ds = to_up_to_scale(std::move(ds), 2.0);

  double worst_rot = 0.0, worst_pos = 0.0;
  for (size_t i = 0; i + 1 < ds.frames.size(); ++i) {
    const CameraTwist tw =
        camera_twist(ds.frames[i].pose, ds.frames[i + 1].pose);
    const auto [r_wb, p_wb] =
        imu_from_camera(ds.frames[i].pose, tw, ds.truth.time_offset,
                        ds.truth.applied_scale, ds.truth.extrinsics);
    // The transform yields the IMU state at the keyframe's own timestamp.
    const double instant = ds.frames[i].timestamp;
    const size_t k = static_cast<size_t>(std::round(instant * rig.noise.rate));
    if (k >= ds.gt_states.size()) break;
    const ImuState& gt = ds.gt_states[k];
    worst_rot = std::max(
        worst_rot, (gt.rotation.transposed() * r_wb).log().norm());
    worst_pos = std::max(worst_pos, (p_wb - gt.position).norm());
  }
  EXPECT_LT(worst_rot, 1e-4);
  EXPECT_LT(worst_pos, 1e-4);
}

TEST(TimeOffset, CapEnforced) {
  EXPECT_NO_THROW(make_time_offset(0.3));
  EXPECT_THROW(make_time_offset(0.6), TimeOffsetOutOfRange);
  EXPECT_THROW(make_time_offset(-0.6), TimeOffsetOutOfRange);
}

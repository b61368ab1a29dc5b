#pragma once

#include <chrono>
#include <deque>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "stcal/error.hpp"
#include "stcal/imu.hpp"
#include "stcal/lie.hpp"
#include "stcal/metrics.hpp"
#include "stcal/temporal.hpp"

namespace stcal {

// Ordered keyframes with forward-difference twists, per-segment
// preintegration, and the raw gyro sample nearest each keyframe stamp.
// The stream reference stays attached so preintegrations can be rebuilt when
// the gyroscope bias estimate changes.
class KeyframeSet {
 public:
  std::vector<CameraPoseUpToScale> poses;
  std::vector<CameraTwist> twists;       // last entry reuses the previous twist
  std::vector<Vec3> nearest_gyro;
  std::vector<PreintegratedImu> preints;  // size N-1, segment i -> i+1

  KeyframeSet() = default;

  static KeyframeSet build(const std::vector<CameraPoseUpToScale>& candidate_poses,
                           const ImuStream& stream, const ImuNoiseSpec& noise,
                           const ImuBias& bias_ref,
                           InfoModel info_model = InfoModel::propagated) {
    KeyframeSet out;
    out.stream_ = &stream;
    out.noise_ = noise;
    out.bias_ref_ = bias_ref;
    out.info_model_ = info_model;

    // Keep only keyframes whose preintegration windows the stream covers.
    for (const CameraPoseUpToScale& p : candidate_poses) {
      if (!out.poses.empty() && p.timestamp <= out.poses.back().timestamp) {
        throw NonMonotonicTimestamps("KeyframeSet: keyframe stamps must increase");
      }
      if (p.timestamp < stream.t_min() || p.timestamp > stream.t_max()) continue;
      out.poses.push_back(p);
    }
    out.rebuild(bias_ref);
    return out;
  }

  size_t size() const { return poses.size(); }
  const ImuBias& bias_ref() const { return bias_ref_; }
  const ImuNoiseSpec& noise() const { return noise_; }
  const ImuStream& stream() const { return *stream_; }

  /// Recomputes twists, nearest gyro samples, and all segment
  /// preintegrations at the given reference bias.
  void rebuild(const ImuBias& bias_ref) {
    bias_ref_ = bias_ref;
    const size_t n = poses.size();
    twists.assign(n, CameraTwist{});
    nearest_gyro.assign(n, Vec3::Zero());
    preints.clear();
    for (size_t i = 0; i + 1 < n; ++i) {
      twists[i] = camera_twist(poses[i], poses[i + 1]);
    }
    if (n >= 2) twists[n - 1] = twists[n - 2];
    for (size_t i = 0; i < n; ++i) {
      nearest_gyro[i] = stream_->nearest_gyro(poses[i].timestamp);
    }
    preints.reserve(n > 0 ? n - 1 : 0);
    for (size_t i = 0; i + 1 < n; ++i) {
      preints.push_back(stream_->preintegrate_window(
          poses[i].timestamp, poses[i + 1].timestamp, bias_ref_, noise_,
          info_model_));
    }
  }

 private:
  const ImuStream* stream_ = nullptr;
  ImuNoiseSpec noise_;
  ImuBias bias_ref_;
  InfoModel info_model_ = InfoModel::propagated;
};

/// Shifts every camera timestamp by td and rebuilds twists and
/// preintegration segments against the shifted stamps. Keyframes whose
/// shifted windows leave the IMU stream are dropped.
inline KeyframeSet compensate_time_offset(const KeyframeSet& kfs, double td) {
  std::vector<CameraPoseUpToScale> shifted = kfs.poses;
  for (CameraPoseUpToScale& p : shifted) p.timestamp += td;
  return KeyframeSet::build(shifted, kfs.stream(), kfs.noise(), kfs.bias_ref());
}

struct Step1Result {
  Vec3 delta_bg = Vec3::Zero();  // estimated gyroscope bias (rad/s)
  double td = 0.0;               // estimated time offset (s)
  Rotation r_bc;                 // estimated extrinsic rotation R^b_c
  double final_cost = 0.0;
  int iterations = 0;
};

struct Step2Result {
  double scale = 1.0;
  Vec3 gravity = Vec3::Zero();
  Vec3 p_cb = Vec3::Zero();
  Eigen::Matrix<double, 7, 1> singular_values = Eigen::Matrix<double, 7, 1>::Zero();
  double conditioning = 0.0;  // sigma_min / sigma_max
};

struct Step3Result {
  double scale = 1.0;
  Vec3 gravity = Vec3::Zero();  // refined, |gravity| == G by construction
  Vec3 accel_bias = Vec3::Zero();
  Vec3 p_cb = Vec3::Zero();
  Eigen::Vector2d delta_theta_xy = Eigen::Vector2d::Zero();
};

struct InitializationResult {
  Step1Result step1;  // last residual solve (td is the residual offset)
  Step3Result step3;
  std::vector<Vec3> velocities;
  bool converged = false;
  int relaunch_count = 0;
  double total_time_offset = 0.0;  // accumulated compensation + residual
  int keyframes_used = 0;
};

struct Step1Options {
  double lambda_init = 1e-4;
  double lambda_up = 10.0;
  double lambda_down = 10.0;
  int max_iterations = 50;
  double cost_rel_tol = 1e-12;
  bool identity_weighting = false;
  // Closed-form Wahba seed for R^b_c when no warm start is supplied; an
  // identity start sits on a stationary point for half-turn extrinsics.
  bool wahba_init = true;
};

namespace detail {

inline Mat3 step1_weight(const PreintegratedImu& p, bool identity) {
  if (identity) return Mat3::Identity();
  return p.info_preint.topLeftCorner<3, 3>();
}

// Closed-form R^b_c from Log(dR_i) ~= R^b_c Log(R_ci^T R_cj) (Wahba problem).
inline Rotation wahba_rotation(const KeyframeSet& kfs) {
  Mat3 m = Mat3::Zero();
  for (size_t i = 0; i + 1 < kfs.size(); ++i) {
    const Vec3 a = kfs.preints[i].dR.log();
    const Vec3 c =
        (kfs.poses[i].rotation.transposed() * kfs.poses[i + 1].rotation).log();
    m += a * c.transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return Rotation::from_matrix(r);
}

// Rotation residual of one consecutive pair at the current linearization
// point (gyro bias folded into the preintegration, so delta_bg = 0).
inline Vec3 step1_residual(const KeyframeSet& kfs, size_t i, double td,
                           const Rotation& r_bc) {
  const Rotation& r_ci = kfs.poses[i].rotation;
  const Rotation& r_cj = kfs.poses[i + 1].rotation;
  const Rotation bracket = Rotation::exp(-kfs.twists[i].omega * td) *
                           (r_ci.transposed() * r_cj) *
                           Rotation::exp(kfs.twists[i + 1].omega * td);
  return (kfs.preints[i].dR.transposed() * r_bc * bracket * r_bc.transposed())
      .log();
}

}  // namespace detail

/// Step 1: joint Levenberg-Marquardt estimation of gyroscope bias, time
/// offset, and extrinsic rotation from the rotation difference between the
/// preintegrated IMU and the interpolated camera. Preintegrations are folded
/// to the latest bias estimate after every accepted step, so the returned
/// KeyframeSet segments are consistent with the result.
inline Step1Result step1_rotation_offset_gyrobias(
    KeyframeSet& kfs, const ImuNoiseSpec& noise,
    const std::optional<Step1Result>& init = std::nullopt,
    const Step1Options& opt = Step1Options{}) {
  (void)noise;  // weights come from the per-segment information matrices
  if (kfs.size() < 2) {
    throw InsufficientKeyframes("step1: need at least 2 keyframes");
  }
  // The final keyframe carries a reused twist, so the interpolation of the
  // last pair is not endpoint-consistent; keep that pair out of the rotation
  // cost whenever other pairs exist.
  const size_t n_seg = kfs.size() >= 3 ? kfs.size() - 2 : kfs.size() - 1;

  Vec3 bias = init ? init->delta_bg : Vec3::Zero();
  double td = init ? init->td : 0.0;
  kfs.rebuild(ImuBias{bias, Vec3::Zero()});
  Rotation r_bc = init           ? init->r_bc
                  : opt.wahba_init ? detail::wahba_rotation(kfs)
                                   : Rotation::identity();

  std::vector<Mat3> weights(n_seg);
  for (size_t i = 0; i < n_seg; ++i) {
    weights[i] = detail::step1_weight(kfs.preints[i], opt.identity_weighting);
  }

  const auto eval_cost = [&](double td_c, const Rotation& r_c) {
    double cost = 0.0;
    for (size_t i = 0; i < n_seg; ++i) {
      const Vec3 e = detail::step1_residual(kfs, i, td_c, r_c);
      cost += e.dot(weights[i] * e);
    }
    return cost;
  };

  double cost = eval_cost(td, r_bc);
  double lambda = opt.lambda_init;
  int iters = 0;
  int accepted = 0;

  using Mat7 = Eigen::Matrix<double, 7, 7>;
  using Vec7 = Eigen::Matrix<double, 7, 1>;

  for (; iters < opt.max_iterations; ++iters) {
    Mat7 h = Mat7::Zero();
    Vec7 g = Vec7::Zero();
    for (size_t i = 0; i < n_seg; ++i) {
      const Vec3 e = detail::step1_residual(kfs, i, td, r_bc);
      const Vec3& w_i = kfs.twists[i].omega;
      const Vec3& w_j = kfs.twists[i + 1].omega;

      // Appendix-style analytic blocks, evaluated at delta_bg = 0.
      const Mat3 j_bg = -left_jacobian_inverse(e) * kfs.preints[i].jg_dR;

      const Mat3 r1 = kfs.preints[i].dR.matrix().transpose() * r_bc.matrix();
      const Vec3 d = -(Rotation::exp(e).matrix().transpose() * r1 *
                       left_jacobian(-w_i * td) * w_i);
      const Vec3 e_col = r_bc.matrix() * right_jacobian(w_j * td) * w_j;
      const Vec3 j_td = right_jacobian_inverse(e) * (d + e_col);

      const Rotation bracket = Rotation::exp(-w_i * td) *
                               (kfs.poses[i].rotation.transposed() *
                                kfs.poses[i + 1].rotation) *
                               Rotation::exp(w_j * td);
      const Vec3 phi2 = bracket.log();
      const Mat3 j_rbc = -right_jacobian_inverse(e) *
                         right_jacobian(r_bc.matrix() * phi2) * r_bc.matrix() *
                         hat(phi2);

      Eigen::Matrix<double, 3, 7> j;
      j.block<3, 3>(0, 0) = j_bg;
      j.block<3, 1>(0, 3) = j_td;
      j.block<3, 3>(0, 4) = j_rbc;

      const Eigen::Matrix<double, 3, 7> wj = weights[i] * j;
      h += j.transpose() * wj;
      g += wj.transpose() * e;
    }

    bool stepped = false;
    while (lambda < 1e12) {
      Mat7 damped = h;
      damped.diagonal() += lambda * h.diagonal();
      const Vec7 delta = damped.ldlt().solve(-g);
      if (!delta.allFinite()) {
        lambda *= opt.lambda_up;
        continue;
      }

      const Vec3 bias_c = bias + delta.segment<3>(0);
      const double td_c = td + delta(3);
      const Rotation r_c = r_bc * Rotation::exp(delta.segment<3>(4));

      // Exact candidate cost: fold the bias and re-preintegrate.
      std::vector<PreintegratedImu> backup = kfs.preints;
      kfs.rebuild(ImuBias{bias_c, Vec3::Zero()});
      const double cost_c = eval_cost(td_c, r_c);
      if (cost_c < cost) {
        const double rel = (cost - cost_c) / std::max(cost, 1e-300);
        bias = bias_c;
        td = td_c;
        r_bc = r_c;
        cost = cost_c;
        lambda = std::max(lambda / opt.lambda_down, 1e-12);
        for (size_t i = 0; i < n_seg; ++i) {
          weights[i] = detail::step1_weight(kfs.preints[i], opt.identity_weighting);
        }
        ++accepted;
        stepped = true;
        if (rel < opt.cost_rel_tol) iters = opt.max_iterations - 1;
        break;
      }
      kfs.preints = std::move(backup);
      lambda *= opt.lambda_up;
    }
    if (!stepped) break;
  }

  if (accepted == 0 && cost > 1e-14 * static_cast<double>(n_seg)) {
    // Distinguish "already at the minimum" from a genuine failure.
    double gnorm = 0.0;
    for (size_t i = 0; i < n_seg; ++i) {
      gnorm += detail::step1_residual(kfs, i, td, r_bc).norm();
    }
    if (gnorm / static_cast<double>(n_seg) > 1e-6) {
      throw NotConverged("step1: no accepted LM step reduced the cost");
    }
  }

  Step1Result out;
  out.delta_bg = bias;
  out.td = td;
  out.r_bc = r_bc;
  out.final_cost = cost;
  out.iterations = iters;
  return out;
}

struct LinearSolveOptions {
  bool irls = true;        // Huber reweighting of the stacked block rows
  int irls_passes = 2;
  double rank_tol = 1e-8;  // sigma_min / sigma_max threshold
};

namespace detail {

struct InterpolatedKeyframes {
  std::vector<Mat3> rot;   // R^w_{c,td}
  std::vector<Vec3> pos;   // p^w_{c,td}
  std::vector<double> t;
};

inline InterpolatedKeyframes interpolate_all(const KeyframeSet& kfs, double td) {
  InterpolatedKeyframes out;
  const size_t n = kfs.size();
  out.rot.resize(n);
  out.pos.resize(n);
  out.t.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const CameraPoseUpToScale p =
        interpolate_camera(kfs.poses[i], kfs.twists[i], td);
    out.rot[i] = p.rotation.matrix();
    out.pos[i] = p.position;
    out.t[i] = kfs.poses[i].timestamp;
  }
  return out;
}

// Iteratively-reweighted least squares on 3-row blocks with Huber weights on
// the block residual norms; scale from the median absolute residual.
inline Eigen::VectorXd solve_block_irls(Eigen::MatrixXd a, Eigen::VectorXd c,
                                        const LinearSolveOptions& opt,
                                        Eigen::VectorXd* singular_values,
                                        double* conditioning) {
  const auto solve_svd = [&](const Eigen::MatrixXd& aw,
                             const Eigen::VectorXd& cw) -> Eigen::VectorXd {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(aw,
                                       Eigen::ComputeThinU | Eigen::ComputeThinV);
    *singular_values = svd.singularValues();
    *conditioning = svd.singularValues()(aw.cols() - 1) /
                    std::max(svd.singularValues()(0), 1e-300);
    return svd.solve(cw);
  };

  Eigen::VectorXd x = solve_svd(a, c);
  if (!opt.irls) return x;

  const int blocks = static_cast<int>(a.rows() / 3);
  for (int pass = 0; pass < opt.irls_passes; ++pass) {
    std::vector<double> norms(blocks);
    for (int b = 0; b < blocks; ++b) {
      norms[b] = (a.middleRows(3 * b, 3) * x - c.segment(3 * b, 3)).norm();
    }
    const double scale = 1.4826 * median(norms) + 1e-300;
    const double k = 1.345 * scale;
    Eigen::MatrixXd aw = a;
    Eigen::VectorXd cw = c;
    for (int b = 0; b < blocks; ++b) {
      const double w = norms[b] <= k ? 1.0 : std::sqrt(k / norms[b]);
      aw.middleRows(3 * b, 3) *= w;
      cw.segment(3 * b, 3) *= w;
    }
    x = solve_svd(aw, cw);
  }
  return x;
}

}  // namespace detail

/// Step 2: linear least-squares estimate of scale, gravity, and extrinsic
/// translation from keyframe triples, with the camera poses interpolated by
/// the Step-1 time offset and the accelerometer bias ignored.
inline Step2Result step2_scale_gravity_translation(
    const KeyframeSet& kfs, const Step1Result& s1,
    const LinearSolveOptions& opt = LinearSolveOptions{}) {
  const size_t n = kfs.size();
  if (n < 5) throw InsufficientKeyframes("step2: need at least 5 keyframes");

  const auto interp = detail::interpolate_all(kfs, s1.td);
  const Mat3 r_cb = s1.r_bc.matrix().transpose();
  const int blocks = static_cast<int>(n) - 2;

  Eigen::MatrixXd a(3 * blocks, 7);
  Eigen::VectorXd c(3 * blocks);
  for (int i = 0; i < blocks; ++i) {
    const double dt12 = interp.t[i + 1] - interp.t[i];
    const double dt23 = interp.t[i + 2] - interp.t[i + 1];
    const PreintegratedImu& p12 = kfs.preints[i];
    const PreintegratedImu& p23 = kfs.preints[i + 1];

    const Vec3 lambda = (interp.pos[i + 1] - interp.pos[i]) * dt23 -
                        (interp.pos[i + 2] - interp.pos[i + 1]) * dt12;
    const Mat3 beta =
        0.5 * (dt12 * dt23 * dt23 + dt12 * dt12 * dt23) * Mat3::Identity();
    const Mat3 phi = (interp.rot[i + 1] - interp.rot[i + 2]) * dt12 -
                     (interp.rot[i] - interp.rot[i + 1]) * dt23;
    const Vec3 gamma =
        interp.rot[i] * r_cb * (p12.dp * dt23 - p12.dv * dt12 * dt23) -
        interp.rot[i + 1] * r_cb * p23.dp * dt12;

    a.block<3, 1>(3 * i, 0) = lambda;
    a.block<3, 3>(3 * i, 1) = beta;
    a.block<3, 3>(3 * i, 4) = phi;
    c.segment<3>(3 * i) = gamma;
  }

  Step2Result out;
  Eigen::VectorXd sv;
  const Eigen::VectorXd x = detail::solve_block_irls(a, c, opt, &sv, &out.conditioning);
  out.singular_values = sv;
  if (out.conditioning < opt.rank_tol) {
    throw RankDeficient("step2: stacked system is rank deficient (degenerate motion)");
  }
  out.scale = x(0);
  out.gravity = x.segment<3>(1);
  out.p_cb = x.segment<3>(4);
  if (!(out.scale > 0.0)) {
    throw RankDeficient("step2: recovered non-positive scale");
  }
  return out;
}

/// Step 3: re-estimates scale and translation together with the
/// accelerometer bias and a two-degree gravity refinement constrained to the
/// gravitational magnitude G.
inline Step3Result step3_refine(const KeyframeSet& kfs, const Step1Result& s1,
                                const Step2Result& s2, double g_magnitude = 9.81,
                                const LinearSolveOptions& opt = LinearSolveOptions{}) {
  const size_t n = kfs.size();
  if (n < 5) throw InsufficientKeyframes("step3: need at least 5 keyframes");

  const Vec3 g_e(0.0, 0.0, -g_magnitude);
  const Vec3 dir_e = g_e.normalized();
  const Vec3 dir_w = s2.gravity.normalized();
  const Vec3 cross = dir_e.cross(dir_w);
  Rotation r_we;
  if (cross.norm() < 1e-6) {
    if (dir_e.dot(dir_w) < 0.0) {
      // Anti-parallel: the rotation axis is unobservable.
      throw GravityDegenerate("step3: step-2 gravity anti-parallel to G^e");
    }
    r_we = Rotation::identity();
  } else {
    const double theta = std::atan2(cross.norm(), dir_e.dot(dir_w));
    r_we = Rotation::exp(cross.normalized() * theta);
  }

  const auto interp = detail::interpolate_all(kfs, s1.td);
  const Mat3 r_cb = s1.r_bc.matrix().transpose();
  const Mat3 rwe_ghat = r_we.matrix() * hat(g_e);
  const int blocks = static_cast<int>(n) - 2;

  Eigen::MatrixXd a(3 * blocks, 9);
  Eigen::VectorXd c(3 * blocks);
  for (int i = 0; i < blocks; ++i) {
    const double dt12 = interp.t[i + 1] - interp.t[i];
    const double dt23 = interp.t[i + 2] - interp.t[i + 1];
    const double k = 0.5 * (dt12 * dt23 * dt23 + dt12 * dt12 * dt23);
    const PreintegratedImu& p12 = kfs.preints[i];
    const PreintegratedImu& p23 = kfs.preints[i + 1];

    const Vec3 lambda = (interp.pos[i + 1] - interp.pos[i]) * dt23 -
                        (interp.pos[i + 2] - interp.pos[i + 1]) * dt12;
    const Eigen::Matrix<double, 3, 2> phi = (-k * rwe_ghat).leftCols<2>();
    const Mat3 zeta =
        interp.rot[i] * r_cb * (p12.ja_dv * dt12 * dt23 - p12.ja_dp * dt23) +
        interp.rot[i + 1] * r_cb * p23.ja_dp * dt12;
    const Mat3 xi = (interp.rot[i + 1] - interp.rot[i + 2]) * dt12 -
                    (interp.rot[i] - interp.rot[i + 1]) * dt23;
    const Vec3 psi =
        interp.rot[i] * r_cb * (p12.dp * dt23 - p12.dv * dt12 * dt23) -
        interp.rot[i + 1] * r_cb * p23.dp * dt12 - k * (r_we.matrix() * g_e);

    a.block<3, 1>(3 * i, 0) = lambda;
    a.block<3, 2>(3 * i, 1) = phi;
    a.block<3, 3>(3 * i, 3) = zeta;
    a.block<3, 3>(3 * i, 6) = xi;
    c.segment<3>(3 * i) = psi;
  }

  Eigen::VectorXd sv;
  double conditioning = 0.0;
  const Eigen::VectorXd y = detail::solve_block_irls(a, c, opt, &sv, &conditioning);
  if (conditioning < opt.rank_tol) {
    throw RankDeficient("step3: stacked system is rank deficient");
  }

  Step3Result out;
  out.scale = y(0);
  out.delta_theta_xy = y.segment<2>(1);
  out.accel_bias = y.segment<3>(3);
  out.p_cb = y.segment<3>(6);
  out.gravity =
      r_we * (Rotation::exp(Vec3(y(1), y(2), 0.0)) * g_e);
  return out;
}

/// Closed-form per-keyframe velocities from the position relationship between
/// consecutive keyframes; the last keyframe comes from propagating the
/// velocity equation over the final segment.
inline std::vector<Vec3> estimate_velocities(const KeyframeSet& kfs,
                                             const Step3Result& s3,
                                             const Step1Result& s1) {
  const size_t n = kfs.size();
  std::vector<Vec3> v(n, Vec3::Zero());
  if (n < 2) return v;

  const auto interp = detail::interpolate_all(kfs, s1.td);
  const Mat3 r_cb = s1.r_bc.matrix().transpose();
  const Vec3& g = s3.gravity;
  const double s = s3.scale;

  for (size_t i = 0; i + 1 < n; ++i) {
    const double dt = interp.t[i + 1] - interp.t[i];
    const PreintegratedImu& p = kfs.preints[i];
    const Vec3 dp_corr = p.dp + p.ja_dp * s3.accel_bias;
    v[i] = (s * (interp.pos[i + 1] - interp.pos[i]) - 0.5 * g * dt * dt -
            interp.rot[i] * r_cb * dp_corr -
            (interp.rot[i] - interp.rot[i + 1]) * s3.p_cb) /
           dt;
  }
  const PreintegratedImu& last = kfs.preints[n - 2];
  const Vec3 dv_corr = last.dv + last.ja_dv * s3.accel_bias;
  v[n - 1] = v[n - 2] + g * last.dt_ij + interp.rot[n - 2] * r_cb * dv_corr;
  return v;
}

struct InitPolicy {
  int min_keyframes = 10;
  // Relaunch when |estimated td increment| exceeds this; defaults to the IMU
  // sampling period when <= 0.
  double relaunch_threshold = -1.0;
  int convergence_window = 10;
  double conv_rot_deg = 0.2;      // per Euler axis
  double conv_trans_m = 0.005;
  double conv_td_s = 0.0005;
  double conv_scale_rel = 0.01;
  double max_time_offset = kDefaultMaxTimeOffset;
  double gravity_magnitude = 9.81;
  Step1Options step1;
  LinearSolveOptions linear;
};

// One per-keyframe execution of the three-step process, for diagnostics.
struct ExecutionRecord {
  int keyframe_count = 0;
  double step1_cost = 0.0;
  int step1_iterations = 0;
  double td_total = 0.0;
  double scale = 0.0;
  double gravity_norm = 0.0;
  double wall_ms = 0.0;
  bool relaunch = false;
  bool full_execution = false;  // steps 2-3 ran
};

/// Streams keyframes through the three-step process: Step 1 per new keyframe,
/// time-offset compensation and relaunch when the estimated increment exceeds
/// the IMU sampling period, Steps 2-3 plus velocity recovery otherwise, until
/// the sliding-window convergence test passes.
inline InitializationResult run_initialization(
    const std::vector<CameraPoseUpToScale>& keyframe_poses,
    const ImuStream& imu, const ImuNoiseSpec& noise, const InitPolicy& policy,
    std::vector<ExecutionRecord>* diagnostics = nullptr) {
  const double relaunch_thr = policy.relaunch_threshold > 0.0
                                  ? policy.relaunch_threshold
                                  : 1.0 / noise.rate;

  std::vector<CameraPoseUpToScale> active;
  double compensation = 0.0;  // accumulated shift applied to camera stamps
  double total_td = 0.0;      // accumulated time offset estimate
  int relaunches = 0;
  std::optional<Step1Result> warm;

  struct HistoryEntry {
    Vec3 ypr;
    Vec3 p_cb;
    double td;
    double scale;
  };
  std::deque<HistoryEntry> history;

  InitializationResult result;

  for (const CameraPoseUpToScale& incoming : keyframe_poses) {
    CameraPoseUpToScale pose = incoming;
    pose.timestamp += compensation;
    if (pose.timestamp < imu.t_min() || pose.timestamp > imu.t_max()) continue;
    active.push_back(pose);
    if (static_cast<int>(active.size()) < std::max(policy.min_keyframes, 2)) {
      continue;
    }

    const auto t0 = std::chrono::steady_clock::now();
    KeyframeSet kfs = KeyframeSet::build(active, imu, noise,
                                         ImuBias{warm ? warm->delta_bg : Vec3::Zero(),
                                                 Vec3::Zero()});
    if (kfs.size() < 2) continue;

    Step1Result s1 = step1_rotation_offset_gyrobias(kfs, noise, warm, policy.step1);
    warm = s1;
    warm->td = 0.0;  // the offset is folded into the stamps on relaunch only

    ExecutionRecord rec;
    rec.keyframe_count = static_cast<int>(kfs.size());
    rec.step1_cost = s1.final_cost;
    rec.step1_iterations = s1.iterations;

    if (std::abs(s1.td) > relaunch_thr) {
      // Compensate the offset, discard the collected keyframes, relaunch.
      compensation -= s1.td;
      total_td += s1.td;
      if (std::abs(total_td) > policy.max_time_offset) {
        throw TimeOffsetOutOfRange("run_initialization: accumulated offset exceeds cap");
      }
      ++relaunches;
      active.clear();
      history.clear();
      rec.relaunch = true;
      rec.td_total = total_td;
      if (diagnostics) {
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        diagnostics->push_back(rec);
      }
      continue;
    }

    const double td_now = total_td + s1.td;
    rec.td_total = td_now;

    if (kfs.size() >= 5) {
      try {
        const Step2Result s2 =
            step2_scale_gravity_translation(kfs, s1, policy.linear);
        const Step3Result s3 =
            step3_refine(kfs, s1, s2, policy.gravity_magnitude, policy.linear);
        rec.full_execution = true;
        rec.scale = s3.scale;
        rec.gravity_norm = s3.gravity.norm();

        history.push_back({to_ypr(s1.r_bc), s3.p_cb, td_now, s3.scale});
        if (static_cast<int>(history.size()) > policy.convergence_window) {
          history.pop_front();
        }

        if (static_cast<int>(history.size()) >= policy.convergence_window) {
          Vec3 ypr_sd = Vec3::Zero(), pcb_sd = Vec3::Zero();
          double td_sd = 0.0, scale_sd = 0.0;
          Vec3 ypr_mu = Vec3::Zero(), pcb_mu = Vec3::Zero();
          double td_mu = 0.0, scale_mu = 0.0;
          for (const auto& e : history) {
            ypr_mu += e.ypr;
            pcb_mu += e.p_cb;
            td_mu += e.td;
            scale_mu += e.scale;
          }
          const double inv = 1.0 / history.size();
          ypr_mu *= inv;
          pcb_mu *= inv;
          td_mu *= inv;
          scale_mu *= inv;
          for (const auto& e : history) {
            for (int a = 0; a < 3; ++a) {
              ypr_sd[a] += std::pow(wrap_angle(e.ypr[a] - ypr_mu[a]), 2);
              pcb_sd[a] += std::pow(e.p_cb[a] - pcb_mu[a], 2);
            }
            td_sd += std::pow(e.td - td_mu, 2);
            scale_sd += std::pow(e.scale - scale_mu, 2);
          }
          ypr_sd = (ypr_sd * inv).cwiseSqrt();
          pcb_sd = (pcb_sd * inv).cwiseSqrt();
          td_sd = std::sqrt(td_sd * inv);
          scale_sd = std::sqrt(scale_sd * inv);

          const bool converged =
              ypr_sd.maxCoeff() * 180.0 / M_PI < policy.conv_rot_deg &&
              pcb_sd.maxCoeff() < policy.conv_trans_m &&
              td_sd < policy.conv_td_s &&
              scale_sd / std::max(std::abs(scale_mu), 1e-12) <
                  policy.conv_scale_rel;

          if (converged) {
            result.step1 = s1;
            result.step3 = s3;
            result.velocities = estimate_velocities(kfs, s3, s1);
            result.converged = true;
            result.relaunch_count = relaunches;
            result.total_time_offset = td_now;
            result.keyframes_used = static_cast<int>(kfs.size());
            if (diagnostics) {
              rec.wall_ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
              diagnostics->push_back(rec);
            }
            return result;
          }
        }
      } catch (const RankDeficient&) {
        // Degenerate stretch of motion; keep collecting keyframes.
      } catch (const GravityDegenerate&) {
        // Wait for more excitation.
      }
    }

    if (diagnostics) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      diagnostics->push_back(rec);
    }
  }

  throw NeverConverged("run_initialization: keyframe budget exhausted");
}

}  // namespace stcal

#pragma once

#include <map>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "stcal/camera.hpp"
#include "stcal/error.hpp"
#include "stcal/imu.hpp"
#include "stcal/lie.hpp"
#include "stcal/temporal.hpp"

namespace stcal {

struct LandmarkObservation {
  int landmark_id = 0;
  Vec2 uv = Vec2::Zero();
};

// Per-keyframe state. Bias entries are corrections over the gyro/accel
// reference bias the attached preintegrations were computed with.
struct KeyframeState {
  Rotation rotation;              // R^w_b
  Vec3 position = Vec3::Zero();   // p^w_b
  Vec3 velocity = Vec3::Zero();   // v^w_b
  Vec3 delta_bg = Vec3::Zero();
  Vec3 delta_ba = Vec3::Zero();
  double timestamp = 0.0;
  Vec3 gyro_raw = Vec3::Zero();       // gyro sample nearest the keyframe stamp
  Vec3 gyro_bias_ref = Vec3::Zero();  // reference bias of that sample's segment
  std::vector<LandmarkObservation> observations;

  Vec3 corrected_gyro() const { return gyro_raw - gyro_bias_ref - delta_bg; }
};

struct FullState {
  std::vector<KeyframeState> keyframes;
  std::map<int, Vec3> landmarks;
  Extrinsics extrinsics;
  double td = 0.0;

  static constexpr int kKfDim = 15;  // (phi, p, v, bg, ba)

  int dim() const {
    return kKfDim * static_cast<int>(keyframes.size()) +
           3 * static_cast<int>(landmarks.size()) + 7;
  }
  int calib_offset() const {
    return kKfDim * static_cast<int>(keyframes.size()) +
           3 * static_cast<int>(landmarks.size());
  }
};

struct RobustCost {
  double threshold = 5.991;  // on the weighted squared norm

  double rho(double chi2) const {
    return chi2 <= threshold ? chi2
                             : 2.0 * std::sqrt(threshold * chi2) - threshold;
  }
  double weight(double chi2) const {
    return chi2 <= threshold ? 1.0 : std::sqrt(threshold / chi2);
  }
};

/// Map point k transformed into the camera frame of keyframe i:
/// p^c = R^c_b Exp(w~ td) R^wT (p^w_k - p^w_b + v^w_b td) + p^c_b.
inline Vec3 transform_point_to_camera(const FullState& state, int i,
                                      const Vec3& p_world) {
  const KeyframeState& kf = state.keyframes[i];
  const Vec3 w = kf.corrected_gyro();
  const Mat3 r_cb = state.extrinsics.r_cb().matrix();
  const Mat3 e_wtd = detail::exp_matrix(w * state.td);
  const Vec3 c = p_world - kf.position + kf.velocity * state.td;
  return r_cb * e_wtd * (kf.rotation.matrix().transpose() * c) +
         state.extrinsics.p_cb();
}

struct ReprojectionResidual {
  bool valid = false;  // false when the point sits behind the camera
  Vec2 r = Vec2::Zero();
  double chi2 = 0.0;       // weighted squared norm
  double cost = 0.0;       // robustified
  double robust_weight = 1.0;
  // Blocks w.r.t. the keyframe perturbations (d/d delta_ba is zero).
  Eigen::Matrix<double, 2, 3> d_dp, d_dphi, d_dv, d_dbg;
  Eigen::Matrix<double, 2, 3> d_dphi_bc, d_dp_bc, d_dlm;
  Vec2 d_dtd;
};

inline ReprojectionResidual reprojection_residual(const FullState& state, int i,
                                                  const LandmarkObservation& obs,
                                                  const CameraIntrinsics& intr,
                                                  const RobustCost& robust,
                                                  double pixel_info = 1.0) {
  ReprojectionResidual out;
  const auto it = state.landmarks.find(obs.landmark_id);
  if (it == state.landmarks.end()) return out;
  const Vec3 p_cam = transform_point_to_camera(state, i, it->second);
  if (p_cam.z() <= kMinDepth) return out;
  out.valid = true;
  out.r = obs.uv - project(intr, p_cam);
  out.chi2 = pixel_info * out.r.squaredNorm();
  out.cost = robust.rho(out.chi2);
  out.robust_weight = robust.weight(out.chi2);

  const KeyframeState& kf = state.keyframes[i];
  const Vec3 w = kf.corrected_gyro();
  const double td = state.td;
  const Mat3 r_cb = state.extrinsics.r_cb().matrix();
  const Mat3 e_wtd = detail::exp_matrix(w * td);
  const Mat3 a = r_cb * e_wtd;  // shared prefix of every block
  const Mat3 rwb_t = kf.rotation.matrix().transpose();
  const Vec3 c = it->second - kf.position + kf.velocity * td;
  const Mat3 jr_wtd = right_jacobian(w * td);

  const Eigen::Matrix<double, 2, 3> dr_dpc = -projection_jacobian(intr, p_cam);

  out.d_dp = dr_dpc * (-a);
  out.d_dphi = dr_dpc * (a * hat(rwb_t * c));
  out.d_dv = dr_dpc * (a * rwb_t * td);
  out.d_dbg = dr_dpc * (a * hat(rwb_t * c) * jr_wtd * td);
  out.d_dphi_bc = dr_dpc * hat(p_cam);
  out.d_dp_bc = dr_dpc * (-Mat3::Identity());
  out.d_dlm = dr_dpc * (a * rwb_t);
  out.d_dtd =
      dr_dpc * (a * (rwb_t * kf.velocity + hat(jr_wtd * w) * (rwb_t * c)));
  return out;
}

struct ImuResidual {
  Eigen::Matrix<double, 9, 1> e;    // (e_R, e_v, e_p)
  Eigen::Matrix<double, 6, 1> e_b;  // bias random-walk between i and j
  double chi2_preint = 0.0;
  double chi2_bias = 0.0;
  double cost = 0.0;
  double weight_preint = 1.0;
  double weight_bias = 1.0;
  // d e / d (phi, p, v, bg, ba) of keyframes i and j.
  Eigen::Matrix<double, 9, 15> j_i, j_j;
};

inline ImuResidual imu_residual(const FullState& state, int i,
                                const PreintegratedImu& preint,
                                const Vec3& gravity, const RobustCost& robust) {
  const KeyframeState& a = state.keyframes[i];
  const KeyframeState& b = state.keyframes[i + 1];
  const double dt = preint.dt_ij;

  const Mat3 ri_t = a.rotation.matrix().transpose();
  const Rotation dr_corr = preint.dR * Rotation::exp(preint.jg_dR * a.delta_bg);

  ImuResidual out;
  const Rotation e_r_rot =
      dr_corr.transposed() * (a.rotation.transposed() * b.rotation);
  const Vec3 e_r = e_r_rot.log();
  const Vec3 xv = b.velocity - a.velocity - gravity * dt;
  const Vec3 e_v = ri_t * xv - (preint.dv + preint.jg_dv * a.delta_bg +
                                preint.ja_dv * a.delta_ba);
  const Vec3 xp = b.position - a.position - a.velocity * dt -
                  0.5 * gravity * dt * dt;
  const Vec3 e_p = ri_t * xp - (preint.dp + preint.jg_dp * a.delta_bg +
                                preint.ja_dp * a.delta_ba);
  out.e << e_r, e_v, e_p;
  out.e_b << b.delta_bg - a.delta_bg, b.delta_ba - a.delta_ba;

  out.chi2_preint = out.e.dot(preint.info_preint * out.e);
  out.chi2_bias = out.e_b.dot(preint.info_walk * out.e_b);
  out.weight_preint = robust.weight(out.chi2_preint);
  out.weight_bias = robust.weight(out.chi2_bias);
  out.cost = robust.rho(out.chi2_preint) + robust.rho(out.chi2_bias);

  out.j_i.setZero();
  out.j_j.setZero();
  const Mat3 jr_inv = right_jacobian_inverse(e_r);

  // e_R rows.
  out.j_i.block<3, 3>(0, 0) = -jr_inv * b.rotation.matrix().transpose() *
                              a.rotation.matrix();
  out.j_j.block<3, 3>(0, 0) = jr_inv;
  out.j_i.block<3, 3>(0, 9) = -left_jacobian_inverse(e_r) *
                              right_jacobian(preint.jg_dR * a.delta_bg) *
                              preint.jg_dR;
  // e_v rows.
  out.j_i.block<3, 3>(3, 0) = hat(ri_t * xv);
  out.j_i.block<3, 3>(3, 6) = -ri_t;
  out.j_j.block<3, 3>(3, 6) = ri_t;
  out.j_i.block<3, 3>(3, 9) = -preint.jg_dv;
  out.j_i.block<3, 3>(3, 12) = -preint.ja_dv;
  // e_p rows.
  out.j_i.block<3, 3>(6, 0) = hat(ri_t * xp);
  out.j_i.block<3, 3>(6, 3) = -Mat3::Identity();
  out.j_j.block<3, 3>(6, 3) = ri_t * b.rotation.matrix();
  out.j_i.block<3, 3>(6, 6) = -ri_t * dt;
  out.j_i.block<3, 3>(6, 9) = -preint.jg_dp;
  out.j_i.block<3, 3>(6, 12) = -preint.ja_dp;
  return out;
}

/// Applies a stacked perturbation: rotations by right-multiplied exponentials,
/// positions by body-frame increments, everything else additively. The delta
/// covers all variables; the solver zeroes fixed entries.
inline FullState retract(const FullState& state, const Eigen::VectorXd& delta) {
  if (delta.size() != state.dim()) {
    throw DimensionMismatch("retract: delta size does not match state");
  }
  FullState out = state;
  const int n = static_cast<int>(state.keyframes.size());
  for (int i = 0; i < n; ++i) {
    const auto d = delta.segment<15>(15 * i);
    KeyframeState& kf = out.keyframes[i];
    kf.rotation = kf.rotation * Rotation::exp(d.segment<3>(0));
    kf.position += state.keyframes[i].rotation * d.segment<3>(3);
    kf.velocity += d.segment<3>(6);
    kf.delta_bg += d.segment<3>(9);
    kf.delta_ba += d.segment<3>(12);
  }
  int slot = 15 * n;
  for (auto& [id, p] : out.landmarks) {
    p += delta.segment<3>(slot);
    slot += 3;
  }
  out.extrinsics.r_bc =
      state.extrinsics.r_bc * Rotation::exp(delta.segment<3>(slot));
  out.extrinsics.p_bc += state.extrinsics.r_bc * delta.segment<3>(slot + 3);
  out.td += delta(slot + 6);
  return out;
}

enum class OptimizeMode { global, local };

struct SolverConfig {
  int max_iterations = 15;
  double lambda_init = 1e-4;
  double lambda_up = 10.0;
  double lambda_down = 10.0;
  double cost_rel_tol = 1e-10;
  double cost_abs_tol = 1e-16;
  double huber_reproj = 5.991;  // 95% chi-square, 2 dof
  double huber_imu = 16.92;     // 9 dof
  bool robust = true;
  double pixel_info = 1.0;  // 1/sigma_px^2
  int schur_threshold = 20;  // keyframe count above which landmarks are eliminated
};

struct OptimizeReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  int accepted_steps = 0;
  int dropped_observations = 0;
  bool converged = false;
  OptimizeMode mode = OptimizeMode::global;
  std::vector<double> cost_trace;  // cost after each accepted step
};

namespace detail {

struct FreeSet {
  std::vector<bool> kf_coord;   // 15*N
  std::vector<bool> lm_free;    // per landmark slot
  int first_free_kf = 0;
};

inline FreeSet make_free_set(const FullState& state, OptimizeMode mode,
                             int window) {
  const int n = static_cast<int>(state.keyframes.size());
  FreeSet fs;
  fs.kf_coord.assign(15 * n, true);
  if (mode == OptimizeMode::global) {
    // The first keyframe pose is the gauge; velocity and biases stay free.
    for (int c = 0; c < 6; ++c) fs.kf_coord[c] = false;
    fs.first_free_kf = 0;
  } else {
    const int first = std::max(0, n - window);
    fs.first_free_kf = first;
    for (int i = 0; i < first; ++i) {
      for (int c = 0; c < 15; ++c) fs.kf_coord[15 * i + c] = false;
    }
  }
  fs.lm_free.assign(state.landmarks.size(), mode == OptimizeMode::global);
  if (mode == OptimizeMode::local) {
    std::unordered_map<int, int> slot_of;
    int s = 0;
    for (const auto& [id, p] : state.landmarks) slot_of[id] = s++;
    for (int i = fs.first_free_kf; i < n; ++i) {
      for (const auto& ob : state.keyframes[i].observations) {
        const auto it = slot_of.find(ob.landmark_id);
        if (it != slot_of.end()) fs.lm_free[it->second] = true;
      }
    }
  }
  return fs;
}

}  // namespace detail

/// Levenberg-Marquardt minimization of the reprojection + IMU preintegration
/// cost. Global mode frees everything except the first keyframe pose; local
/// mode frees the last `window` keyframes, the landmarks they observe, and
/// the extrinsic/temporal calibration. Landmarks are Schur-eliminated when
/// the free window exceeds the configured threshold.
inline std::pair<FullState, OptimizeReport> optimize(
    const FullState& initial, const std::vector<PreintegratedImu>& preints,
    const CameraIntrinsics& intr, const Vec3& gravity, OptimizeMode mode,
    int window, const SolverConfig& cfg) {
  const int n = static_cast<int>(initial.keyframes.size());
  if (n < 2 || preints.size() + 1 != initial.keyframes.size()) {
    throw DimensionMismatch("optimize: need N keyframes and N-1 preintegrations");
  }

  const RobustCost reproj_robust{cfg.robust ? cfg.huber_reproj
                                            : std::numeric_limits<double>::max()};
  const RobustCost imu_robust{cfg.robust ? cfg.huber_imu
                                         : std::numeric_limits<double>::max()};

  OptimizeReport report;
  report.mode = mode;

  const detail::FreeSet fs = detail::make_free_set(initial, mode, window);
  const int n_lm = static_cast<int>(initial.landmarks.size());
  const int reduced_dim = 15 * n + 7;
  const bool use_schur = n > cfg.schur_threshold;

  std::unordered_map<int, int> lm_slot;
  {
    int s = 0;
    for (const auto& [id, p] : initial.landmarks) lm_slot[id] = s++;
  }

  const auto eval_cost = [&](const FullState& st, int* dropped) {
    double cost = 0.0;
    int drop = 0;
    for (int i = 0; i < n; ++i) {
      for (const auto& ob : st.keyframes[i].observations) {
        const ReprojectionResidual rr = reprojection_residual(
            st, i, ob, intr, reproj_robust, cfg.pixel_info);
        if (!rr.valid) {
          ++drop;
          continue;
        }
        cost += rr.cost;
      }
      if (i + 1 < n) {
        cost += imu_residual(st, i, preints[i], gravity, imu_robust).cost;
      }
    }
    if (dropped) *dropped = drop;
    return cost;
  };

  FullState state = initial;
  int dropped = 0;
  double cost = eval_cost(state, &dropped);
  report.initial_cost = cost;
  report.dropped_observations = dropped;
  report.cost_trace.push_back(cost);

  if (cost < cfg.cost_abs_tol) {
    report.final_cost = cost;
    report.converged = true;
    return {state, report};
  }

  // Free-coordinate index map over the reduced block (keyframes + calib).
  std::vector<int> red_free_idx(reduced_dim, -1);
  std::vector<int> red_free_list;
  for (int c = 0; c < 15 * n; ++c) {
    if (fs.kf_coord[c]) {
      red_free_idx[c] = static_cast<int>(red_free_list.size());
      red_free_list.push_back(c);
    }
  }
  for (int c = 15 * n; c < reduced_dim; ++c) {
    red_free_idx[c] = static_cast<int>(red_free_list.size());
    red_free_list.push_back(c);
  }
  const int n_red_free = static_cast<int>(red_free_list.size());

  double lambda = cfg.lambda_init;

  struct LandmarkAcc {
    Mat3 h = Mat3::Zero();
    Vec3 g = Vec3::Zero();
    Eigen::Matrix<double, 3, 7> h_cal = Eigen::Matrix<double, 3, 7>::Zero();
    std::map<int, Eigen::Matrix<double, 3, 15>> h_kf;
  };

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    ++report.iterations;

    // Assemble the normal equations over the reduced block, accumulating
    // landmark blocks separately for the Schur path.
    Eigen::MatrixXd h_rr = Eigen::MatrixXd::Zero(reduced_dim, reduced_dim);
    Eigen::VectorXd g_r = Eigen::VectorXd::Zero(reduced_dim);
    std::vector<LandmarkAcc> lm_acc(use_schur ? n_lm : 0);
    Eigen::MatrixXd h_ll_dense;
    Eigen::MatrixXd h_rl_dense;
    Eigen::VectorXd g_l = Eigen::VectorXd::Zero(3 * n_lm);
    if (!use_schur) {
      h_ll_dense = Eigen::MatrixXd::Zero(3 * n_lm, 3 * n_lm);
      h_rl_dense = Eigen::MatrixXd::Zero(reduced_dim, 3 * n_lm);
    }

    for (int i = 0; i < n; ++i) {
      for (const auto& ob : state.keyframes[i].observations) {
        const auto slot_it = lm_slot.find(ob.landmark_id);
        if (slot_it == lm_slot.end()) continue;
        const int slot = slot_it->second;
        const bool lm_is_free = fs.lm_free[slot];
        const ReprojectionResidual rr = reprojection_residual(
            state, i, ob, intr, reproj_robust, cfg.pixel_info);
        if (!rr.valid) continue;
        const double w = rr.robust_weight * cfg.pixel_info;

        Eigen::Matrix<double, 2, 15> j_kf;
        j_kf << rr.d_dphi, rr.d_dp, rr.d_dv, rr.d_dbg,
            Eigen::Matrix<double, 2, 3>::Zero();
        Eigen::Matrix<double, 2, 7> j_cal;
        j_cal << rr.d_dphi_bc, rr.d_dp_bc, rr.d_dtd;

        const int kf_off = 15 * i;
        const int cal_off = 15 * n;
        h_rr.block<15, 15>(kf_off, kf_off) += w * j_kf.transpose() * j_kf;
        h_rr.block<15, 7>(kf_off, cal_off) += w * j_kf.transpose() * j_cal;
        h_rr.block<7, 15>(cal_off, kf_off) += w * j_cal.transpose() * j_kf;
        h_rr.block<7, 7>(cal_off, cal_off) += w * j_cal.transpose() * j_cal;
        g_r.segment<15>(kf_off) += w * j_kf.transpose() * rr.r;
        g_r.segment<7>(cal_off) += w * j_cal.transpose() * rr.r;

        if (lm_is_free || !use_schur) {
          if (use_schur) {
            LandmarkAcc& acc = lm_acc[slot];
            acc.h += w * rr.d_dlm.transpose() * rr.d_dlm;
            acc.g += w * rr.d_dlm.transpose() * rr.r;
            acc.h_cal += w * rr.d_dlm.transpose() * j_cal;
            acc.h_kf[i] += w * rr.d_dlm.transpose() * j_kf;
          } else {
            h_ll_dense.block<3, 3>(3 * slot, 3 * slot) +=
                w * rr.d_dlm.transpose() * rr.d_dlm;
            g_l.segment<3>(3 * slot) += w * rr.d_dlm.transpose() * rr.r;
            h_rl_dense.block<15, 3>(kf_off, 3 * slot) +=
                w * j_kf.transpose() * rr.d_dlm;
            h_rl_dense.block<7, 3>(cal_off, 3 * slot) +=
                w * j_cal.transpose() * rr.d_dlm;
          }
        }
      }

      if (i + 1 < n) {
        const ImuResidual ir = imu_residual(state, i, preints[i], gravity,
                                            imu_robust);
        const Mat9 w_p = ir.weight_preint * preints[i].info_preint;
        const int oi = 15 * i;
        const int oj = 15 * (i + 1);
        h_rr.block<15, 15>(oi, oi) += ir.j_i.transpose() * w_p * ir.j_i;
        h_rr.block<15, 15>(oi, oj) += ir.j_i.transpose() * w_p * ir.j_j;
        h_rr.block<15, 15>(oj, oi) += ir.j_j.transpose() * w_p * ir.j_i;
        h_rr.block<15, 15>(oj, oj) += ir.j_j.transpose() * w_p * ir.j_j;
        g_r.segment<15>(oi) += ir.j_i.transpose() * w_p * ir.e;
        g_r.segment<15>(oj) += ir.j_j.transpose() * w_p * ir.e;

        // Bias random-walk rows couple only the bias coordinates.
        const Mat6 w_b = ir.weight_bias * preints[i].info_walk;
        h_rr.block<6, 6>(oi + 9, oi + 9) += w_b;
        h_rr.block<6, 6>(oj + 9, oj + 9) += w_b;
        h_rr.block<6, 6>(oi + 9, oj + 9) -= w_b;
        h_rr.block<6, 6>(oj + 9, oi + 9) -= w_b;
        g_r.segment<6>(oi + 9) += -w_b * ir.e_b;
        g_r.segment<6>(oj + 9) += w_b * ir.e_b;
      }
    }

    bool stepped = false;
    while (lambda < 1e12) {
      Eigen::VectorXd delta = Eigen::VectorXd::Zero(state.dim());
      bool solve_ok = true;

      if (use_schur) {
        // Damp, Schur-eliminate landmarks, solve over the free reduced coords.
        Eigen::MatrixXd h_work = h_rr;
        Eigen::VectorXd g_work = g_r;
        const Eigen::VectorXd diag_pre = h_rr.diagonal();
        std::vector<Mat3> h_ll_inv(n_lm, Mat3::Zero());
        const int cal_off = 15 * n;
        for (int s = 0; s < n_lm; ++s) {
          if (!fs.lm_free[s]) continue;
          const LandmarkAcc& acc = lm_acc[s];
          Mat3 h_d = acc.h;
          h_d.diagonal() += lambda * acc.h.diagonal() + Vec3::Constant(1e-12);
          const Mat3 inv = h_d.inverse();
          h_ll_inv[s] = inv;
          std::vector<std::pair<int, const Eigen::Matrix<double, 3, 15>*>> kfs;
          kfs.reserve(acc.h_kf.size());
          for (const auto& [kf, blk] : acc.h_kf) kfs.push_back({kf, &blk});
          for (const auto& [ka, blk_a] : kfs) {
            for (const auto& [kb, blk_b] : kfs) {
              h_work.block<15, 15>(15 * ka, 15 * kb) -=
                  blk_a->transpose() * inv * (*blk_b);
            }
            h_work.block<15, 7>(15 * ka, cal_off) -=
                blk_a->transpose() * inv * acc.h_cal;
            h_work.block<7, 15>(cal_off, 15 * ka) -=
                acc.h_cal.transpose() * inv * (*blk_a);
            g_work.segment<15>(15 * ka) -= blk_a->transpose() * (inv * acc.g);
          }
          h_work.block<7, 7>(cal_off, cal_off) -=
              acc.h_cal.transpose() * inv * acc.h_cal;
          g_work.segment<7>(cal_off) -= acc.h_cal.transpose() * (inv * acc.g);
        }

        Eigen::MatrixXd h_free(n_red_free, n_red_free);
        Eigen::VectorXd g_free(n_red_free);
        for (int a = 0; a < n_red_free; ++a) {
          g_free(a) = g_work(red_free_list[a]);
          for (int b = 0; b < n_red_free; ++b) {
            h_free(a, b) = h_work(red_free_list[a], red_free_list[b]);
          }
        }
        // LM damping from the pre-Schur diagonal.
        for (int a = 0; a < n_red_free; ++a) {
          h_free(a, a) += lambda * std::abs(diag_pre(red_free_list[a])) + 1e-12;
        }

        Eigen::LDLT<Eigen::MatrixXd> ldlt(h_free);
        const Eigen::VectorXd delta_free = ldlt.solve(-g_free);
        if (ldlt.info() != Eigen::Success || !delta_free.allFinite()) {
          solve_ok = false;
        } else {
          Eigen::VectorXd delta_red = Eigen::VectorXd::Zero(reduced_dim);
          for (int a = 0; a < n_red_free; ++a) {
            delta_red(red_free_list[a]) = delta_free(a);
          }
          delta.head(15 * n) = delta_red.head(15 * n);
          delta.tail(7) = delta_red.tail(7);
          for (int s = 0; s < n_lm; ++s) {
            if (!fs.lm_free[s]) continue;
            const LandmarkAcc& acc = lm_acc[s];
            Vec3 rhs = -acc.g;
            for (const auto& [kf, blk] : acc.h_kf) {
              rhs -= blk * delta_red.segment<15>(15 * kf);
            }
            rhs -= acc.h_cal * delta_red.tail<7>();
            delta.segment<3>(15 * n + 3 * s) = h_ll_inv[s] * rhs;
          }
        }
      } else {
        // Joint dense solve over all free coordinates.
        std::vector<int> free_list = red_free_list;
        for (int s = 0; s < n_lm; ++s) {
          if (!fs.lm_free[s]) continue;
          for (int c = 0; c < 3; ++c) free_list.push_back(reduced_dim + 3 * s + c);
        }
        const int nf = static_cast<int>(free_list.size());
        const int full_dim = reduced_dim + 3 * n_lm;
        Eigen::MatrixXd h_full = Eigen::MatrixXd::Zero(full_dim, full_dim);
        Eigen::VectorXd g_full(full_dim);
        h_full.topLeftCorner(reduced_dim, reduced_dim) = h_rr;
        h_full.topRightCorner(reduced_dim, 3 * n_lm) = h_rl_dense;
        h_full.bottomLeftCorner(3 * n_lm, reduced_dim) = h_rl_dense.transpose();
        h_full.bottomRightCorner(3 * n_lm, 3 * n_lm) = h_ll_dense;
        g_full << g_r, g_l;

        Eigen::MatrixXd h_free(nf, nf);
        Eigen::VectorXd g_free(nf);
        for (int a = 0; a < nf; ++a) {
          g_free(a) = g_full(free_list[a]);
          for (int b = 0; b < nf; ++b) {
            h_free(a, b) = h_full(free_list[a], free_list[b]);
          }
        }
        for (int a = 0; a < nf; ++a) {
          h_free(a, a) += lambda * std::abs(h_free(a, a)) + 1e-12;
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt(h_free);
        const Eigen::VectorXd delta_free = ldlt.solve(-g_free);
        if (ldlt.info() != Eigen::Success || !delta_free.allFinite()) {
          solve_ok = false;
        } else {
          for (int a = 0; a < nf; ++a) {
            const int idx = free_list[a];
            if (idx < 15 * n) {
              delta(idx) = delta_free(a);
            } else if (idx < reduced_dim) {
              delta(state.dim() - 7 + (idx - 15 * n)) = delta_free(a);
            } else {
              delta(15 * n + (idx - reduced_dim)) = delta_free(a);
            }
          }
        }
      }

      if (!solve_ok) {
        lambda *= cfg.lambda_up;
        if (lambda >= 1e12) {
          throw SingularNormalEquations("optimize: normal equations not solvable");
        }
        continue;
      }

      const FullState candidate = retract(state, delta);
      int cand_dropped = 0;
      const double cand_cost = eval_cost(candidate, &cand_dropped);
      if (cand_cost < cost) {
        const double rel = (cost - cand_cost) / std::max(cost, 1e-300);
        state = candidate;
        cost = cand_cost;
        report.dropped_observations = cand_dropped;
        report.cost_trace.push_back(cost);
        ++report.accepted_steps;
        lambda = std::max(lambda / cfg.lambda_down, 1e-12);
        stepped = true;
        if (rel < cfg.cost_rel_tol || cost < cfg.cost_abs_tol) {
          report.converged = true;
          iter = cfg.max_iterations;
        }
        break;
      }
      lambda *= cfg.lambda_up;
    }
    if (!stepped) {
      report.converged = report.accepted_steps > 0 || cost < 1e-12;
      break;
    }
  }

  if (report.accepted_steps == 0 && report.initial_cost > 1e-9 &&
      !report.converged) {
    throw NotConverged("optimize: no LM step reduced the cost");
  }
  report.final_cost = cost;
  if (report.accepted_steps > 0) report.converged = true;
  return {state, report};
}

}  // namespace stcal

#pragma once

#include <vector>

#include <Eigen/Dense>

#include "stcal/error.hpp"
#include "stcal/lie.hpp"

namespace stcal {

using Mat9 = Eigen::Matrix<double, 9, 9>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

struct ImuSample {
  double t = 0.0;   // seconds
  Vec3 gyro = Vec3::Zero();   // rad/s
  Vec3 accel = Vec3::Zero();  // m/s^2
};

struct ImuBias {
  Vec3 gyro = Vec3::Zero();
  Vec3 accel = Vec3::Zero();
};

// Continuous-time densities; discretized as sigma/sqrt(dt) per sample.
struct ImuNoiseSpec {
  double gyro_density = 0.0;   // rad/(s*sqrt(Hz))
  double accel_density = 0.0;  // m/(s^2*sqrt(Hz))
  double gyro_walk = 0.0;      // rad/(s^2*sqrt(Hz))
  double accel_walk = 0.0;     // m/(s^3*sqrt(Hz))
  double rate = 200.0;         // Hz

  void validate() const {
    if (gyro_density < 0.0 || accel_density < 0.0 || gyro_walk < 0.0 ||
        accel_walk < 0.0 || rate <= 0.0) {
      throw Error("ImuNoiseSpec: densities must be non-negative, rate > 0");
    }
  }
};

enum class InfoModel {
  propagated,  // invert the propagated discrete noise covariance
  identity,    // ablation switch
};

struct PreintegratedImu {
  Rotation dR;
  Vec3 dv = Vec3::Zero();
  Vec3 dp = Vec3::Zero();
  double dt_ij = 0.0;

  // Derivatives of the preintegrated terms w.r.t. a change of the reference
  // bias. jg_* are gyroscope, ja_* accelerometer.
  Mat3 jg_dR = Mat3::Zero();
  Mat3 jg_dv = Mat3::Zero();
  Mat3 ja_dv = Mat3::Zero();
  Mat3 jg_dp = Mat3::Zero();
  Mat3 ja_dp = Mat3::Zero();

  ImuBias bias_ref;
  Mat9 info_preint = Mat9::Identity();  // order (dR, dv, dp)
  Mat6 info_walk = Mat6::Identity();    // order (gyro, accel)
  Mat9 cov_preint = Mat9::Zero();
};

/// Preintegrates `samples` over the window [t_begin, t_end). Sample k is held
/// over [t_k, t_{k+1}); the first and last intervals are truncated to the
/// window boundaries. Samples must cover the window.
inline PreintegratedImu preintegrate(const std::vector<ImuSample>& samples,
                                     const ImuBias& bias_ref,
                                     const ImuNoiseSpec& noise, double t_begin,
                                     double t_end,
                                     InfoModel info_model = InfoModel::propagated) {
  if (samples.empty()) throw EmptyStream("preintegrate: no samples");
  for (size_t k = 1; k < samples.size(); ++k) {
    if (samples[k].t <= samples[k - 1].t) {
      throw NonMonotonicTimestamps("preintegrate: timestamps must increase");
    }
  }
  if (!(t_end > t_begin)) throw Error("preintegrate: t_end must exceed t_begin");
  if (samples.front().t > t_begin + 1e-12) {
    throw OutOfRange("preintegrate: window starts before first sample");
  }

  PreintegratedImu out;
  out.bias_ref = bias_ref;
  out.dt_ij = t_end - t_begin;

  const double sg2 = noise.gyro_density * noise.gyro_density;
  const double sa2 = noise.accel_density * noise.accel_density;
  Mat9 cov = Mat9::Zero();

  for (size_t k = 0; k < samples.size(); ++k) {
    const double seg_begin = std::max(samples[k].t, t_begin);
    const double seg_end =
        (k + 1 < samples.size()) ? std::min(samples[k + 1].t, t_end) : t_end;
    const double dt = seg_end - seg_begin;
    if (dt <= 0.0) continue;
    if (seg_begin >= t_end) break;

    const Vec3 w = samples[k].gyro - bias_ref.gyro;
    const Vec3 a = samples[k].accel - bias_ref.accel;
    const Rotation r_step = Rotation::exp(w * dt);
    const Mat3 jr = right_jacobian(w * dt);
    const Mat3 dr = out.dR.matrix();
    const Mat3 a_hat = hat(a);

    if (info_model == InfoModel::propagated) {
      Mat9 A = Mat9::Identity();
      A.block<3, 3>(0, 0) = r_step.matrix().transpose();
      A.block<3, 3>(3, 0) = -dr * a_hat * dt;
      A.block<3, 3>(6, 0) = -0.5 * dr * a_hat * dt * dt;
      A.block<3, 3>(6, 3) = Mat3::Identity() * dt;
      Eigen::Matrix<double, 9, 3> Bg = Eigen::Matrix<double, 9, 3>::Zero();
      Bg.block<3, 3>(0, 0) = jr * dt;
      Eigen::Matrix<double, 9, 3> Ba = Eigen::Matrix<double, 9, 3>::Zero();
      Ba.block<3, 3>(3, 0) = dr * dt;
      Ba.block<3, 3>(6, 0) = 0.5 * dr * dt * dt;
      cov = A * cov * A.transpose() + Bg * (sg2 / dt) * Bg.transpose() +
            Ba * (sa2 / dt) * Ba.transpose();
    }

    // Bias Jacobians use the pre-update terms (state at the step start).
    out.ja_dp += out.ja_dv * dt - 0.5 * dr * dt * dt;
    out.jg_dp += out.jg_dv * dt - 0.5 * dr * a_hat * out.jg_dR * dt * dt;
    out.dp += out.dv * dt + 0.5 * dr * a * dt * dt;
    out.ja_dv += -dr * dt;
    out.jg_dv += -dr * a_hat * out.jg_dR * dt;
    out.dv += dr * a * dt;
    out.jg_dR = r_step.matrix().transpose() * out.jg_dR - jr * dt;
    out.dR = out.dR * r_step;
  }

  out.cov_preint = cov;
  const bool have_noise = noise.gyro_density > 0.0 || noise.accel_density > 0.0;
  if (info_model == InfoModel::propagated && have_noise) {
    const Mat9 reg = cov + Mat9::Identity() * 1e-20;
    out.info_preint = reg.ldlt().solve(Mat9::Identity());
    out.info_preint = 0.5 * (out.info_preint + out.info_preint.transpose()).eval();
  } else {
    out.info_preint = Mat9::Identity();
  }

  const bool have_walk = noise.gyro_walk > 0.0 || noise.accel_walk > 0.0;
  if (info_model == InfoModel::propagated && have_walk) {
    Mat6 walk_cov = Mat6::Zero();
    walk_cov.topLeftCorner<3, 3>() =
        Mat3::Identity() * std::max(noise.gyro_walk * noise.gyro_walk * out.dt_ij, 1e-20);
    walk_cov.bottomRightCorner<3, 3>() =
        Mat3::Identity() * std::max(noise.accel_walk * noise.accel_walk * out.dt_ij, 1e-20);
    out.info_walk = walk_cov.inverse();
  } else {
    out.info_walk = Mat6::Identity();
  }
  return out;
}

struct CorrectedTerms {
  Rotation dR;
  Vec3 dv;
  Vec3 dp;
};

/// First-order bias correction of the preintegrated terms.
inline CorrectedTerms bias_corrected_terms(const PreintegratedImu& p,
                                           const Vec3& delta_bg,
                                           const Vec3& delta_ba) {
  CorrectedTerms out;
  out.dR = p.dR * Rotation::exp(p.jg_dR * delta_bg);
  out.dv = p.dv + p.jg_dv * delta_bg + p.ja_dv * delta_ba;
  out.dp = p.dp + p.jg_dp * delta_bg + p.ja_dp * delta_ba;
  return out;
}

/// IMU measurement model: gyro = w + b_g + n_g,
/// accel = R^T (a_world - g) + b_a + n_a.
inline ImuSample imu_measure(const Vec3& true_omega_body,
                             const Vec3& true_accel_world,
                             const Rotation& attitude, const Vec3& gravity,
                             const ImuBias& bias, const Vec3& gyro_noise,
                             const Vec3& accel_noise, double t = 0.0) {
  ImuSample s;
  s.t = t;
  s.gyro = true_omega_body + bias.gyro + gyro_noise;
  s.accel = attitude.matrix().transpose() * (true_accel_world - gravity) +
            bias.accel + accel_noise;
  return s;
}

/// Timestamp-ordered IMU sample stream with window slicing for
/// keyframe-to-keyframe preintegration.
class ImuStream {
 public:
  ImuStream() = default;

  explicit ImuStream(std::vector<ImuSample> samples)
      : samples_(std::move(samples)) {
    if (samples_.empty()) throw EmptyStream("ImuStream: empty");
    double max_dt = 0.0;
    for (size_t k = 1; k < samples_.size(); ++k) {
      if (samples_[k].t <= samples_[k - 1].t) {
        throw NonMonotonicTimestamps("ImuStream: timestamps must increase");
      }
      max_dt = std::max(max_dt, samples_[k].t - samples_[k - 1].t);
    }
    nominal_dt_ = samples_.size() > 1 ? max_dt : 0.0;
  }

  const std::vector<ImuSample>& samples() const { return samples_; }
  double t_min() const { return samples_.front().t; }
  // End of the time range a preintegration window may extend to.
  double t_max() const { return samples_.back().t + nominal_dt_; }
  double nominal_dt() const { return nominal_dt_; }

  bool covers(double t0, double t1) const {
    return t0 >= t_min() - 1e-12 && t1 <= t_max() + 1e-12 && t1 > t0;
  }

  PreintegratedImu preintegrate_window(double t0, double t1, const ImuBias& bias,
                                       const ImuNoiseSpec& noise,
                                       InfoModel info_model = InfoModel::propagated) const {
    if (!covers(t0, t1)) {
      throw OutOfRange("ImuStream: window not covered by samples");
    }
    // First sample whose interval overlaps [t0, t1).
    size_t lo = 0;
    while (lo + 1 < samples_.size() && samples_[lo + 1].t <= t0) ++lo;
    size_t hi = lo;
    while (hi + 1 < samples_.size() && samples_[hi].t < t1) ++hi;
    std::vector<ImuSample> window(samples_.begin() + lo, samples_.begin() + hi + 1);
    return preintegrate(window, bias, noise, t0, t1, info_model);
  }

  /// Raw gyro reading of the sample nearest to t.
  Vec3 nearest_gyro(double t) const {
    size_t best = 0;
    double best_d = std::abs(samples_[0].t - t);
    for (size_t k = 1; k < samples_.size(); ++k) {
      const double d = std::abs(samples_[k].t - t);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return samples_[best].gyro;
  }

 private:
  std::vector<ImuSample> samples_;
  double nominal_dt_ = 0.0;
};

}  // namespace stcal

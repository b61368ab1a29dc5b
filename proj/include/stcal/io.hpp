#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "stcal/config.hpp"
#include "stcal/simulator.hpp"
#include "stcal/sweep.hpp"

namespace stcal {

inline std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// IMU dump: one record per line, `t, wx, wy, wz, ax, ay, az`.
inline void dump_imu(const std::string& path, const SyntheticDataset& ds) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open for writing: " + path);
  for (const ImuSample& s : ds.imu) {
    f << fmt9(s.t) << ", " << fmt9(s.gyro.x()) << ", " << fmt9(s.gyro.y())
      << ", " << fmt9(s.gyro.z()) << ", " << fmt9(s.accel.x()) << ", "
      << fmt9(s.accel.y()) << ", " << fmt9(s.accel.z()) << "\n";
  }
}

/// Camera dump: per frame `t, px, py, pz, r00..r22 (row-major), id:u:v ...`.
inline void dump_frames(const std::string& path, const SyntheticDataset& ds) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open for writing: " + path);
  for (const CameraFrame& fr : ds.frames) {
    f << fmt9(fr.timestamp);
    for (int i = 0; i < 3; ++i) f << ", " << fmt9(fr.pose.position[i]);
    const Mat3& m = fr.pose.rotation.matrix();
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) f << ", " << fmt9(m(r, c));
    }
    for (const PixelObservation& ob : fr.observations) {
      f << ", " << ob.landmark_id << ":" << fmt9(ob.uv.x()) << ":"
        << fmt9(ob.uv.y());
    }
    f << "\n";
  }
}

inline void write_sweep_csv(const std::string& path, const SweepResult& res) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open for writing: " + path);
  f << "axis,multiplier,offset_ms,rotation_error_deg,translation_error_m,"
       "offset_error_ms,scale_error_rel,gyro_bias_error,accel_bias_error,"
       "velocity_rmse,trajectory_rmse,wall_time_s,keyframe_count,failures,"
       "runs\n";
  for (const AggregatedCell& c : res.cells) {
    const RunMetrics& m = c.median_metrics;
    f << axis_name(c.axis) << ',' << fmt9(c.multiplier) << ','
      << fmt9(c.offset_ms) << ',' << fmt9(m.rotation_error_deg) << ','
      << fmt9(m.translation_error_m) << ',' << fmt9(m.offset_error_ms) << ','
      << fmt9(m.scale_error_rel) << ',' << fmt9(m.gyro_bias_error) << ','
      << fmt9(m.accel_bias_error) << ',' << fmt9(m.velocity_rmse) << ','
      << fmt9(m.trajectory_rmse) << ',' << fmt9(m.wall_time_s) << ','
      << m.keyframe_count << ',' << c.failures << ',' << c.runs << "\n";
  }
}

inline void write_executions_csv(const std::string& path,
                                 const std::vector<ExecutionRecord>& recs) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open for writing: " + path);
  f << "keyframes,step1_cost,step1_iterations,td_total,scale,gravity_norm,"
       "wall_ms,relaunch,full_execution\n";
  for (const ExecutionRecord& r : recs) {
    f << r.keyframe_count << ',' << fmt9(r.step1_cost) << ','
      << r.step1_iterations << ',' << fmt9(r.td_total) << ',' << fmt9(r.scale)
      << ',' << fmt9(r.gravity_norm) << ',' << fmt9(r.wall_ms) << ','
      << (r.relaunch ? 1 : 0) << ',' << (r.full_execution ? 1 : 0) << "\n";
  }
}

inline constexpr const char* kVersion = "0.1.0";

/// Flat key = value run manifest with every effective configuration value.
inline void write_manifest(const std::string& path, const PipelineConfig& cfg,
                           const SweepSpec* sweep, uint64_t seed_base,
                           int threads) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open for writing: " + path);
  f << "version = " << kVersion << "\n";
  f << "seed_base = " << seed_base << "\n";
  f << "threads = " << threads << "\n";
  f << "traj.radius = " << fmt9(cfg.traj.radius) << "\n";
  f << "traj.angular_rate = " << fmt9(cfg.traj.angular_rate) << "\n";
  f << "traj.vertical_amplitude = " << fmt9(cfg.traj.vertical_amplitude) << "\n";
  f << "traj.vertical_frequency = " << fmt9(cfg.traj.vertical_frequency) << "\n";
  f << "traj.duration = " << fmt9(cfg.traj.duration) << "\n";
  f << "traj.roll_amplitude = " << fmt9(cfg.traj.roll_amplitude) << "\n";
  f << "traj.roll_frequency = " << fmt9(cfg.traj.roll_frequency) << "\n";
  f << "imu.rate = " << fmt9(cfg.rig.noise.rate) << "\n";
  f << "imu.sigma_g = " << fmt9(cfg.rig.noise.gyro_density) << "\n";
  f << "imu.sigma_a = " << fmt9(cfg.rig.noise.accel_density) << "\n";
  f << "imu.sigma_bg = " << fmt9(cfg.rig.noise.gyro_walk) << "\n";
  f << "imu.sigma_ba = " << fmt9(cfg.rig.noise.accel_walk) << "\n";
  const Vec3 bg = cfg.rig.gyro_bias;
  const Vec3 ba = cfg.rig.accel_bias;
  f << "imu.bias_g = " << fmt9(bg.x()) << " " << fmt9(bg.y()) << " " << fmt9(bg.z()) << "\n";
  f << "imu.bias_a = " << fmt9(ba.x()) << " " << fmt9(ba.y()) << " " << fmt9(ba.z()) << "\n";
  const Vec3 ypr = to_ypr(cfg.rig.extrinsics.r_bc) * 180.0 / M_PI;
  f << "rig.rbc_ypr_deg = " << fmt9(ypr.x()) << " " << fmt9(ypr.y()) << " " << fmt9(ypr.z()) << "\n";
  const Vec3 pbc = cfg.rig.extrinsics.p_bc;
  f << "rig.pbc = " << fmt9(pbc.x()) << " " << fmt9(pbc.y()) << " " << fmt9(pbc.z()) << "\n";
  f << "rig.time_offset_ms = " << fmt9(cfg.rig.time_offset * 1e3) << "\n";
  f << "rig.camera_rate = " << fmt9(cfg.rig.camera_rate) << "\n";
  f << "rig.max_features = " << cfg.rig.max_features << "\n";
  f << "rig.pixel_noise = " << fmt9(cfg.rig.pixel_noise) << "\n";
  f << "rig.wrong_id_fraction = " << fmt9(cfg.rig.wrong_id_fraction) << "\n";
  f << "rig.gravity = " << fmt9(cfg.rig.gravity_magnitude) << "\n";
  f << "rig.landmarks = " << cfg.rig.landmark_count << "\n";
  f << "rig.landmark_radius = " << fmt9(cfg.rig.landmark_radius) << "\n";
  f << "rig.landmark_z_min = " << fmt9(cfg.rig.landmark_z_min) << "\n";
  f << "rig.landmark_z_max = " << fmt9(cfg.rig.landmark_z_max) << "\n";
  f << "cam.fx = " << fmt9(cfg.rig.intrinsics.fx) << "\n";
  f << "cam.fy = " << fmt9(cfg.rig.intrinsics.fy) << "\n";
  f << "cam.cx = " << fmt9(cfg.rig.intrinsics.cx) << "\n";
  f << "cam.cy = " << fmt9(cfg.rig.intrinsics.cy) << "\n";
  f << "cam.width = " << cfg.rig.intrinsics.width << "\n";
  f << "cam.height = " << cfg.rig.intrinsics.height << "\n";
  f << "pipeline.applied_scale = " << fmt9(cfg.applied_scale) << "\n";
  f << "pipeline.keyframe_stride = " << cfg.keyframe_stride << "\n";
  f << "pipeline.run_global_ba = " << (cfg.run_global_ba ? "true" : "false") << "\n";
  f << "init.min_keyframes = " << cfg.policy.min_keyframes << "\n";
  f << "init.convergence_window = " << cfg.policy.convergence_window << "\n";
  f << "init.conv_rot_deg = " << fmt9(cfg.policy.conv_rot_deg) << "\n";
  f << "init.conv_trans_m = " << fmt9(cfg.policy.conv_trans_m) << "\n";
  f << "init.conv_td_ms = " << fmt9(cfg.policy.conv_td_s * 1e3) << "\n";
  f << "init.conv_scale_rel = " << fmt9(cfg.policy.conv_scale_rel) << "\n";
  f << "solver.max_iterations = " << cfg.solver.max_iterations << "\n";
  f << "solver.huber_reproj = " << fmt9(cfg.solver.huber_reproj) << "\n";
  f << "solver.huber_imu = " << fmt9(cfg.solver.huber_imu) << "\n";
  f << "solver.pixel_info = " << fmt9(cfg.solver.pixel_info) << "\n";
  if (sweep) {
    f << "sweep.axis = " << axis_name(sweep->axis) << "\n";
    f << "sweep.multipliers =";
    for (double m : sweep->multipliers) f << " " << fmt9(m);
    f << "\n";
    f << "sweep.offsets_ms =";
    for (double o : sweep->offsets_ms) f << " " << fmt9(o);
    f << "\n";
    f << "sweep.seeds = " << sweep->seeds << "\n";
    f << "sweep.baseline_multiplier = " << fmt9(sweep->baseline_multiplier) << "\n";
  }
}

}  // namespace stcal

#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stcal/pipeline.hpp"
#include "stcal/sweep.hpp"

namespace stcal {

// Flat `key = value` text with dotted sections and '#' comments. Unknown keys
// are hard errors.
inline std::map<std::string, std::string> parse_config_text(
    const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key or value");
    }
    kv[key] = value;
  }
  return kv;
}

inline std::map<std::string, std::string> parse_config_file(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: " + v);
  }
}

inline int to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d)) throw ConfigError("config key '" + key + "': not an integer");
  return static_cast<int>(d);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': not a bool: " + v);
}

inline Vec3 to_vec3(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  Vec3 out;
  if (!(in >> out.x() >> out.y() >> out.z())) {
    throw ConfigError("config key '" + key + "': expected three numbers");
  }
  return out;
}

inline std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  std::vector<double> out;
  double d;
  while (in >> d) out.push_back(d);
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

}  // namespace detail

/// Applies parsed keys onto the pipeline and sweep configuration. Every
/// TrajectoryConfig/RigConfig/solver/policy field is addressable; unknown
/// keys throw ConfigError.
inline void apply_config(const std::map<std::string, std::string>& kv,
                         PipelineConfig* cfg, SweepSpec* sweep) {
  Vec3 rbc_ypr_deg = to_ypr(cfg->rig.extrinsics.r_bc) * 180.0 / M_PI;
  bool rbc_dirty = false;

  for (const auto& [key, value] : kv) {
    using detail::to_bool;
    using detail::to_double;
    using detail::to_int;
    using detail::to_list;
    using detail::to_vec3;
    auto& traj = cfg->traj;
    auto& rig = cfg->rig;
    auto& pol = cfg->policy;
    auto& sol = cfg->solver;

    if (key == "traj.radius") traj.radius = to_double(key, value);
    else if (key == "traj.angular_rate") traj.angular_rate = to_double(key, value);
    else if (key == "traj.vertical_amplitude") traj.vertical_amplitude = to_double(key, value);
    else if (key == "traj.vertical_frequency") traj.vertical_frequency = to_double(key, value);
    else if (key == "traj.duration") traj.duration = to_double(key, value);
    else if (key == "traj.roll_amplitude") traj.roll_amplitude = to_double(key, value);
    else if (key == "traj.roll_frequency") traj.roll_frequency = to_double(key, value);
    else if (key == "imu.rate") rig.noise.rate = to_double(key, value);
    else if (key == "imu.sigma_g") rig.noise.gyro_density = to_double(key, value);
    else if (key == "imu.sigma_a") rig.noise.accel_density = to_double(key, value);
    else if (key == "imu.sigma_bg") rig.noise.gyro_walk = to_double(key, value);
    else if (key == "imu.sigma_ba") rig.noise.accel_walk = to_double(key, value);
    else if (key == "imu.bias_g") rig.gyro_bias = to_vec3(key, value);
    else if (key == "imu.bias_a") rig.accel_bias = to_vec3(key, value);
    else if (key == "rig.rbc_ypr_deg") { rbc_ypr_deg = to_vec3(key, value); rbc_dirty = true; }
    else if (key == "rig.pbc") rig.extrinsics.p_bc = to_vec3(key, value);
    else if (key == "rig.time_offset_ms") rig.time_offset = to_double(key, value) * 1e-3;
    else if (key == "rig.camera_rate") rig.camera_rate = to_double(key, value);
    else if (key == "rig.max_features") rig.max_features = to_int(key, value);
    else if (key == "rig.pixel_noise") rig.pixel_noise = to_double(key, value);
    else if (key == "rig.wrong_id_fraction") rig.wrong_id_fraction = to_double(key, value);
    else if (key == "rig.gravity") rig.gravity_magnitude = to_double(key, value);
    else if (key == "rig.landmarks") rig.landmark_count = to_int(key, value);
    else if (key == "rig.landmark_radius") rig.landmark_radius = to_double(key, value);
    else if (key == "rig.landmark_z_min") rig.landmark_z_min = to_double(key, value);
    else if (key == "rig.landmark_z_max") rig.landmark_z_max = to_double(key, value);
    else if (key == "cam.fx") rig.intrinsics.fx = to_double(key, value);
    else if (key == "cam.fy") rig.intrinsics.fy = to_double(key, value);
    else if (key == "cam.cx") rig.intrinsics.cx = to_double(key, value);
    else if (key == "cam.cy") rig.intrinsics.cy = to_double(key, value);
    else if (key == "cam.width") rig.intrinsics.width = to_int(key, value);
    else if (key == "cam.height") rig.intrinsics.height = to_int(key, value);
    else if (key == "pipeline.applied_scale") cfg->applied_scale = to_double(key, value);
    else if (key == "pipeline.keyframe_stride") cfg->keyframe_stride = to_int(key, value);
    else if (key == "pipeline.run_global_ba") cfg->run_global_ba = to_bool(key, value);
    else if (key == "init.min_keyframes") pol.min_keyframes = to_int(key, value);
    else if (key == "init.relaunch_threshold_ms") pol.relaunch_threshold = to_double(key, value) * 1e-3;
    else if (key == "init.convergence_window") pol.convergence_window = to_int(key, value);
    else if (key == "init.conv_rot_deg") pol.conv_rot_deg = to_double(key, value);
    else if (key == "init.conv_trans_m") pol.conv_trans_m = to_double(key, value);
    else if (key == "init.conv_td_ms") pol.conv_td_s = to_double(key, value) * 1e-3;
    else if (key == "init.conv_scale_rel") pol.conv_scale_rel = to_double(key, value);
    else if (key == "init.max_time_offset") pol.max_time_offset = to_double(key, value);
    else if (key == "init.max_iterations") pol.step1.max_iterations = to_int(key, value);
    else if (key == "init.lambda_init") pol.step1.lambda_init = to_double(key, value);
    else if (key == "init.identity_weighting") pol.step1.identity_weighting = to_bool(key, value);
    else if (key == "init.wahba_init") pol.step1.wahba_init = to_bool(key, value);
    else if (key == "init.irls") pol.linear.irls = to_bool(key, value);
    else if (key == "solver.max_iterations") sol.max_iterations = to_int(key, value);
    else if (key == "solver.lambda_init") sol.lambda_init = to_double(key, value);
    else if (key == "solver.huber_reproj") sol.huber_reproj = to_double(key, value);
    else if (key == "solver.huber_imu") sol.huber_imu = to_double(key, value);
    else if (key == "solver.robust") sol.robust = to_bool(key, value);
    else if (key == "solver.pixel_info") sol.pixel_info = to_double(key, value);
    else if (key == "solver.schur_threshold") sol.schur_threshold = to_int(key, value);
    else if (key == "sweep.axis") { if (sweep) sweep->axis = axis_from_name(value); }
    else if (key == "sweep.multipliers") { if (sweep) sweep->multipliers = to_list(key, value); }
    else if (key == "sweep.offsets_ms") { if (sweep) sweep->offsets_ms = to_list(key, value); }
    else if (key == "sweep.seeds") { if (sweep) sweep->seeds = to_int(key, value); }
    else if (key == "sweep.baseline_multiplier") { if (sweep) sweep->baseline_multiplier = to_double(key, value); }
    else throw ConfigError("unknown config key: " + key);
  }

  if (rbc_dirty) {
    const Vec3 r = rbc_ypr_deg * M_PI / 180.0;
    cfg->rig.extrinsics.r_bc = from_ypr(r.x(), r.y(), r.z());
  }
}

}  // namespace stcal

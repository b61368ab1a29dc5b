#pragma once

#include <atomic>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "stcal/metrics.hpp"
#include "stcal/pipeline.hpp"

namespace stcal {

enum class NoiseAxis {
  gyro_density,
  accel_density,
  gyro_bias,
  accel_bias,
  gyro_walk,
  accel_walk,
};

inline const char* axis_name(NoiseAxis a) {
  switch (a) {
    case NoiseAxis::gyro_density: return "gyro_density";
    case NoiseAxis::accel_density: return "accel_density";
    case NoiseAxis::gyro_bias: return "gyro_bias";
    case NoiseAxis::accel_bias: return "accel_bias";
    case NoiseAxis::gyro_walk: return "gyro_walk";
    case NoiseAxis::accel_walk: return "accel_walk";
  }
  return "unknown";
}

inline NoiseAxis axis_from_name(const std::string& s) {
  for (const NoiseAxis a :
       {NoiseAxis::gyro_density, NoiseAxis::accel_density, NoiseAxis::gyro_bias,
        NoiseAxis::accel_bias, NoiseAxis::gyro_walk, NoiseAxis::accel_walk}) {
    if (s == axis_name(a)) return a;
  }
  throw ConfigError("unknown sweep axis: " + s);
}

struct SweepSpec {
  NoiseAxis axis = NoiseAxis::gyro_density;
  std::vector<double> multipliers = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<double> offsets_ms = {0.0, 50.0, 100.0};
  int seeds = 25;
  // Scale applied to the non-swept IMU parameters: 0 zeroes them (the sweep
  // isolates one axis), 1 keeps them at their nominal values.
  double baseline_multiplier = 0.0;
  uint64_t seed_base = 1;

  void validate() const {
    if (seeds < 1) throw ConfigError("SweepSpec: seeds must be >= 1");
    for (double m : multipliers) {
      if (m < 0.0) throw ConfigError("SweepSpec: multipliers must be >= 0");
    }
  }
};

struct MetricsRow {
  RunMetrics metrics;
  bool failed = false;
  std::string fail_reason;
};

/// Rig for one sweep cell: the swept parameter at `multiplier` times its
/// nominal value, every other IMU parameter at baseline times nominal.
inline RigConfig make_cell_rig(const RigConfig& nominal, NoiseAxis axis,
                               double multiplier, double baseline,
                               double offset_ms) {
  RigConfig rig = nominal;
  rig.time_offset = offset_ms * 1e-3;
  rig.noise.gyro_density = baseline * nominal.noise.gyro_density;
  rig.noise.accel_density = baseline * nominal.noise.accel_density;
  rig.noise.gyro_walk = baseline * nominal.noise.gyro_walk;
  rig.noise.accel_walk = baseline * nominal.noise.accel_walk;
  rig.gyro_bias = baseline * nominal.gyro_bias;
  rig.accel_bias = baseline * nominal.accel_bias;
  switch (axis) {
    case NoiseAxis::gyro_density:
      rig.noise.gyro_density = multiplier * nominal.noise.gyro_density;
      break;
    case NoiseAxis::accel_density:
      rig.noise.accel_density = multiplier * nominal.noise.accel_density;
      break;
    case NoiseAxis::gyro_bias:
      rig.gyro_bias = multiplier * nominal.gyro_bias;
      break;
    case NoiseAxis::accel_bias:
      rig.accel_bias = multiplier * nominal.accel_bias;
      break;
    case NoiseAxis::gyro_walk:
      rig.noise.gyro_walk = multiplier * nominal.noise.gyro_walk;
      break;
    case NoiseAxis::accel_walk:
      rig.noise.accel_walk = multiplier * nominal.noise.accel_walk;
      break;
  }
  return rig;
}

/// One full pipeline run; pipeline errors become a failed-row marker rather
/// than aborting the sweep. Deterministic per (cell, seed).
inline MetricsRow run_cell(const PipelineConfig& cell_cfg, uint64_t seed) {
  MetricsRow row;
  try {
    const PipelineResult res = run_pipeline(cell_cfg, seed);
    row.metrics = evaluate_run(cell_cfg, res, seed);
  } catch (const Error& e) {
    row.failed = true;
    row.fail_reason = e.what();
  }
  return row;
}

struct AggregatedCell {
  NoiseAxis axis = NoiseAxis::gyro_density;
  double multiplier = 0.0;
  double offset_ms = 0.0;
  RunMetrics median_metrics;
  int failures = 0;
  int runs = 0;
};

/// Component-wise median over the successful rows.
inline AggregatedCell aggregate(const std::vector<MetricsRow>& rows) {
  AggregatedCell out;
  out.runs = static_cast<int>(rows.size());
  std::vector<const RunMetrics*> ok;
  for (const MetricsRow& r : rows) {
    if (r.failed) {
      ++out.failures;
    } else {
      ok.push_back(&r.metrics);
    }
  }
  if (ok.empty()) throw AllRunsFailed("aggregate: every run in the cell failed");

  const auto med = [&](auto field) {
    std::vector<double> v;
    v.reserve(ok.size());
    for (const RunMetrics* m : ok) v.push_back(field(*m));
    return median(std::move(v));
  };
  RunMetrics& m = out.median_metrics;
  m.rotation_error_deg = med([](const RunMetrics& x) { return x.rotation_error_deg; });
  m.translation_error_m = med([](const RunMetrics& x) { return x.translation_error_m; });
  m.offset_error_ms = med([](const RunMetrics& x) { return x.offset_error_ms; });
  m.scale_error_rel = med([](const RunMetrics& x) { return x.scale_error_rel; });
  m.gyro_bias_error = med([](const RunMetrics& x) { return x.gyro_bias_error; });
  m.accel_bias_error = med([](const RunMetrics& x) { return x.accel_bias_error; });
  m.velocity_rmse = med([](const RunMetrics& x) { return x.velocity_rmse; });
  m.trajectory_rmse = med([](const RunMetrics& x) { return x.trajectory_rmse; });
  m.wall_time_s = med([](const RunMetrics& x) { return x.wall_time_s; });
  m.keyframe_count = static_cast<int>(
      med([](const RunMetrics& x) { return double(x.keyframe_count); }));
  return out;
}

struct SweepResult {
  std::vector<AggregatedCell> cells;  // |multipliers| x |offsets| entries
  int total_failures = 0;
};

/// Runs every (multiplier, offset, seed) pipeline in a worker pool and
/// aggregates per cell. Each worker owns its full pipeline state; results are
/// deterministic for a fixed seed base.
inline SweepResult run_sweep(const SweepSpec& spec, const PipelineConfig& base,
                             int threads = 0,
                             const std::function<void(int, int)>& progress = {}) {
  spec.validate();
  struct Job {
    int cell;
    int seed_idx;
  };
  const int n_cells =
      static_cast<int>(spec.multipliers.size() * spec.offsets_ms.size());
  std::vector<PipelineConfig> cell_cfgs(n_cells);
  for (size_t mi = 0; mi < spec.multipliers.size(); ++mi) {
    for (size_t oi = 0; oi < spec.offsets_ms.size(); ++oi) {
      const int c = static_cast<int>(mi * spec.offsets_ms.size() + oi);
      cell_cfgs[c] = base;
      cell_cfgs[c].rig =
          make_cell_rig(base.rig, spec.axis, spec.multipliers[mi],
                        spec.baseline_multiplier, spec.offsets_ms[oi]);
    }
  }

  std::vector<Job> jobs;
  jobs.reserve(n_cells * spec.seeds);
  for (int c = 0; c < n_cells; ++c) {
    for (int s = 0; s < spec.seeds; ++s) jobs.push_back({c, s});
  }

  std::vector<std::vector<MetricsRow>> rows(n_cells,
                                            std::vector<MetricsRow>(spec.seeds));
  std::atomic<size_t> next{0};
  std::atomic<int> done{0};
  const int n_threads =
      threads > 0 ? threads
                  : std::max(1u, std::thread::hardware_concurrency());

  const auto worker = [&]() {
    while (true) {
      const size_t j = next.fetch_add(1);
      if (j >= jobs.size()) break;
      const Job& job = jobs[j];
      const uint64_t seed =
          spec.seed_base + 1000003ULL * static_cast<uint64_t>(job.cell) +
          static_cast<uint64_t>(job.seed_idx);
      rows[job.cell][job.seed_idx] = run_cell(cell_cfgs[job.cell], seed);
      const int d = ++done;
      if (progress) progress(d, static_cast<int>(jobs.size()));
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < n_threads - 1; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  SweepResult out;
  for (size_t mi = 0; mi < spec.multipliers.size(); ++mi) {
    for (size_t oi = 0; oi < spec.offsets_ms.size(); ++oi) {
      const int c = static_cast<int>(mi * spec.offsets_ms.size() + oi);
      AggregatedCell cell = aggregate(rows[c]);
      cell.axis = spec.axis;
      cell.multiplier = spec.multipliers[mi];
      cell.offset_ms = spec.offsets_ms[oi];
      out.total_failures += cell.failures;
      out.cells.push_back(std::move(cell));
    }
  }
  return out;
}

}  // namespace stcal

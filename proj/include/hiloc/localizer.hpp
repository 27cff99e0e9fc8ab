#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "hiloc/geometry.hpp"
#include "hiloc/maps.hpp"
#include "hiloc/pointcloud.hpp"

namespace hiloc {

// Pose-grid MLE configuration. The sample grid spans +-range per axis with
// endpoints included; z, pitch, and roll are held at the refined center pose.
struct LocalizerConfig {
  int nx = 20;
  int ny = 40;
  int nyaw = 10;
  double range_x = 0.5;        // m
  double range_y = 1.0;        // m
  double range_yaw_deg = 0.5;  // degrees
  std::size_t ndt_points = 5000;
  std::size_t intensity_points = 30000;
  bool use_ndt = true;
  bool use_intensity = true;
  double beta = 50.0;               // soft-max temperature on per-point mean cost
  double mahalanobis_clamp = 9.0;   // per-point cost cap
  double intensity_min_matched = 0.2;  // below this fraction the mode is degenerate

  int n_samples() const { return nx * ny * nyaw; }
};

struct PoseSampleSet {
  std::vector<Pose> poses;
  std::vector<double> log_likelihoods;
  std::vector<double> probs;
};

struct LocalizerEstimate {
  Pose pose;
  Mat6 W = Mat6::Identity();  // over (position, rotation tangent)
  double ndt_matched = 0.0;
  double intensity_matched = 0.0;
  bool ndt_degenerate = false;
  bool intensity_degenerate = false;
};

// n offsets spanning [-range, +range] inclusive; n == 1 gives {0}.
std::vector<double> grid_offsets(double range, int n);

// Regular (nx, ny, nyaw) grid around `center`; yaw offsets are
// right-multiplied z-rotations. Index layout: x fastest, then y, then yaw.
std::vector<Pose> sample_poses(const Pose& center, const LocalizerConfig& cfg);

inline std::size_t sample_index(const LocalizerConfig& cfg, int i, int j, int k) {
  return (static_cast<std::size_t>(k) * cfg.ny + j) * cfg.nx + i;
}

struct LikelihoodValue {
  double L = 0.0;          // sum of clamped per-point costs plus miss penalties
  std::size_t matched = 0;
  std::size_t total = 0;
  double matched_fraction() const { return total == 0 ? 0.0 : double(matched) / double(total); }
};

// Reference per-point evaluations (also the single-pose path). Matched points
// contribute their clamped quadratic cost; unmatched points contribute
// `miss_penalty`. `matched_costs` (optional) receives the clamped cost of
// every matched point, in scan order.
LikelihoodValue ndt_log_likelihood(const Pose& pose, const NdtMap& map, const PointCloud& pts,
                                   double miss_penalty = 0.0, double clamp = 9.0,
                                   std::vector<double>* matched_costs = nullptr);
LikelihoodValue intensity_log_likelihood(const Pose& pose, const IntensityMap& map,
                                         const PointCloud& pts, double miss_penalty = 0.0,
                                         double clamp = 9.0,
                                         std::vector<double>* matched_costs = nullptr);

// Batch evaluation over the whole sample grid, equal to looping the
// reference evaluation over every sample (within accumulation roundoff).
// Factorizes the grid: one rotation per (point, yaw), then per-point cell
// lookups shared across runs of x/y offsets that fall in the same cell, with
// rectangle difference accumulation.
struct GridEval {
  std::vector<double> L;         // n_samples, sample_index layout
  std::vector<int> matched;      // matched point count per sample
};
GridEval eval_ndt_grid(const NdtMap& map, const PointCloud& pts, const Pose& center,
                       const LocalizerConfig& cfg, double miss_penalty, double clamp);
GridEval eval_intensity_grid(const IntensityMap& map, const PointCloud& pts, const Pose& center,
                             const LocalizerConfig& cfg, double miss_penalty, double clamp);

// exp(-beta (L - min L)), normalized to sum 1.
std::vector<double> softmax_weights(const std::vector<double>& L, double beta);

// Sorted-order percentile (p in [0,1]) used for the per-cycle miss penalty.
double cost_percentile(std::vector<double> values, double p);

struct MeanCov {
  Pose pose;
  Mat6 W = Mat6::Zero();
};

// Probability-weighted position mean, tangent-space rotation mean (fixed
// point, <= 5 iterations, tol 1e-10), and weighted covariance of the 6D
// residuals. Diagonal floored at 1e-6.
MeanCov weighted_mean_and_covariance(const PoseSampleSet& samples);

// Refines z, pitch, and roll of `prior` by Levenberg-Marquardt on the summed
// voxel quadratic cost, holding x, y, yaw fixed. Stops when the step norm
// drops below 1e-4 or after 20 iterations. Throws InsufficientOverlapError
// when fewer than 10% of the points match any voxel at the prior.
// `zrp_cov` (optional) receives the Gauss-Newton covariance over
// (z, roll, pitch), scaled by the reduced residual.
Pose initial_optimization(const Pose& prior, const NdtMap& map, const PointCloud& z_ndt,
                          Mat3* zrp_cov = nullptr);

// Full cycle: refine z/pitch/roll, downsample, score the pose grid under the
// enabled likelihood modes, and return the weighted mean pose with its
// tangent-space covariance. Deterministic; `seed` is part of the interface
// for callers that schedule cycles but no stage currently draws from it.
LocalizerEstimate localize(const Pose& prior, const NdtMap& ndt_map,
                           const IntensityMap& intensity_map, const PointCloud& cloud,
                           const LocalizerConfig& cfg, std::uint64_t seed = 0);

// Per-axis marginal probability profiles of a scored sample set, as CSV
// (axis, index, offset, prob) for likelihood-shape diagnostics.
void dump_marginals(const PoseSampleSet& samples, const LocalizerConfig& cfg,
                    const std::filesystem::path& csv_path);

}  // namespace hiloc

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiloc/clip.hpp"
#include "hiloc/geometry.hpp"
#include "hiloc/pointcloud.hpp"

namespace hiloc {

// ---------------------------------------------------------------------------
// Point-to-plane registration
// ---------------------------------------------------------------------------

struct RegistrationParams {
  double voxel = 0.5;          // working resolution; both clouds are thinned to it
  double max_corr_dist = 1.0;  // correspondence gate, m
  int max_iterations = 50;
  double step_tol = 1e-5;      // converged when the update norm drops below this
  double min_fitness = 0.3;    // below this the registration is rejected
  std::size_t min_matches = 20;
  // Target points whose PCA neighborhood deviates from a plane by more than
  // this residual variance get no normal and never match.
  double max_plane_var = 1e-3;
};

struct RegistrationResult {
  // Maps source-frame points into the target frame: target ~ relative * source.
  Pose relative;
  // Fraction of (thinned) source points with a gated correspondence at the
  // optimum.
  double fitness = 0.0;
  // Gauss-Newton Hessian at the optimum scaled by the residual variance,
  // block order (translation, rotation). Weak directions of the scan pair
  // (e.g. along a featureless road) show up as small eigenvalues here, so
  // downstream solvers weight them accordingly.
  Mat6 information = Mat6::Zero();
};

// Iterative point-to-plane alignment of source onto target. Target normals
// come from a PCA over grid neighborhoods. Throws RegistrationFailedError
// when the final inlier fraction is below params.min_fitness (in particular
// for disjoint clouds).
RegistrationResult register_clouds(const PointCloud& source, const PointCloud& target,
                                   const Pose& initial, const RegistrationParams& params = {});

// ---------------------------------------------------------------------------
// Factor graph
// ---------------------------------------------------------------------------

enum class FactorType { kMapPrior, kOdometry, kLoopClosure, kGnssPrior };
const char* factor_type_name(FactorType type);

// Residual conventions, block order (translation, rotation):
//   map_prior   (on a):    r_p = Rm^T (p_a - pm),          r_th = Log(Rm^T R_a)
//   odometry / loop (a,b): r_p = R_a^T (p_b - p_a) - pm,   r_th = Log(Rm^T R_a^T R_b)
//   gnss_prior  (on a):    r   = p_a - pm                  (position only)
// where (pm, Rm) is the measured pose. Absolute pose residuals live in the
// measurement frame, which makes the solution equivariant under a rigid
// remapping of all priors.
struct Factor {
  FactorType type = FactorType::kOdometry;
  int a = 0;
  int b = -1;  // second node for relative factors, -1 otherwise
  Pose measured;
  // 6x6 information in the residual convention above; GNSS factors use only
  // the top-left 3x3 block.
  Mat6 information = Mat6::Identity();
};

struct GraphNode {
  double t = 0.0;
  int session = 0;
  Pose initial;
};

struct FactorGraph {
  std::vector<GraphNode> nodes;
  std::vector<Factor> factors;
};

void save_graph(const FactorGraph& graph, const std::filesystem::path& path);
FactorGraph load_graph(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

// Scan-to-scan registration for every consecutive frame pair, initialized
// from ground truth. Failed registrations come back as nullopt; entry k
// relates frames k and k+1.
std::vector<std::optional<RegistrationResult>> compute_scan_odometry(
    const Clip& clip, const RegistrationParams& params = {});

struct LocalizationGraphParams {
  RegistrationParams reg;
  double map_crop_radius = 90.0;  // map neighborhood per frame, m
};

// One node per frame. Absolute map_prior factors come from registering each
// frame against a crop of the dense map (initialized at `initials`, or at
// clip ground truth when empty); odometry factors link consecutive frames.
// Failed registrations drop the factor. Throws GraphConstructionError when a
// chain segment ends up with no map prior at all (nothing grounds it).
FactorGraph build_localization_gt_graph(const Clip& clip, const PointCloud& map_cloud,
                                        const std::vector<std::optional<RegistrationResult>>& odom,
                                        std::vector<Pose> initials = {},
                                        const LocalizationGraphParams& params = {});

struct GnssSample {
  int session = 0;
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  double sigma = 0.1;  // isotropic position noise, m
};

struct MappingGraphParams {
  RegistrationParams reg;
  double keyframe_spacing = 1.0;  // or one frame, whichever is coarser
  double loop_gate = 30.0;        // co-visibility radius between sessions, m
  int loop_stride = 1;            // try a closure every n-th keyframe
};

// Keyframe nodes per session with intra-session odometry factors; inter-
// session loop closures registered between co-visible keyframes (each
// keyframe pairs with the nearest keyframe of every later session within the
// gate); GNSS samples attach to the nearest keyframe in time as position
// priors. With more than one session and no loop closure at all, prints a
// warning and leaves the sessions as independent components (the solver
// anchors each).
FactorGraph build_mapping_gt_graph(const std::vector<Clip>& sessions,
                                   const std::vector<GnssSample>& gnss,
                                   const MappingGraphParams& params = {});

// ---------------------------------------------------------------------------
// MAP solver
// ---------------------------------------------------------------------------

struct SolveParams {
  int max_iterations = 100;
  double rel_tol = 1e-9;     // relative cost decrease that counts as converged
  double huber_delta = 1.0;  // robust width on loop closures, Mahalanobis units
};

struct FactorTypeStats {
  std::size_t count = 0;
  double rms = 0.0;  // root mean square Mahalanobis norm
  double max = 0.0;
};

struct SolveReport {
  bool converged = false;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> cost_trace;  // accepted-step costs, starting at initial
  std::vector<int> anchored_nodes;
  std::vector<FactorTypeStats> stats;  // indexed by FactorType
  nlohmann::json to_json() const;
};

struct SolveResult {
  std::vector<Pose> poses;
  SolveReport report;
};

// Levenberg-Marquardt on the total (robustified) squared Mahalanobis
// residual. Components without any absolute factor get their first node
// anchored to its initial value. Throws RankDeficiencyError naming the nodes
// when some node is touched by no factor or the normal equations stay
// singular under damping.
SolveResult solve_map(const FactorGraph& graph, const SolveParams& params = {});

// Residual statistics per factor type at the given poses.
std::vector<FactorTypeStats> residual_stats(const FactorGraph& graph,
                                            const std::vector<Pose>& poses,
                                            double huber_delta = 1.0);

// Trajectory export in the clip gt.csv schema. Velocities are central
// differences of the solved positions.
void save_gt_csv(const std::filesystem::path& path, const std::vector<double>& times,
                 const std::vector<Pose>& poses);

}  // namespace hiloc

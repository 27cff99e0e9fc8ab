#include "hiloc/gt_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "hiloc/errors.hpp"
#include "hiloc/maps.hpp"
#include "hiloc/parallel.hpp"

namespace hiloc {
namespace {

std::int64_t cell_of(double v, double inv_cell) {
  return static_cast<std::int64_t>(std::floor(v * inv_cell));
}

// Uniform grid with cell size equal to the search radius, so a radius query
// only ever touches the 27 surrounding cells.
struct NeighborGrid {
  double inv_cell = 1.0;
  std::vector<std::uint32_t> order;    // point indices sorted by cell
  std::vector<std::uint32_t> offsets;  // CSR offsets per unique cell
  CellTable table;

  void build(const PointCloud& pc, double cell) {
    inv_cell = 1.0 / cell;
    const std::size_t n = pc.size();
    std::vector<std::pair<std::uint64_t, std::uint32_t>> refs(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3& p = pc.points[i];
      refs[i] = {pack_cell3(cell_of(p.x(), inv_cell), cell_of(p.y(), inv_cell),
                            cell_of(p.z(), inv_cell)),
                 static_cast<std::uint32_t>(i)};
    }
    std::sort(refs.begin(), refs.end());
    order.resize(n);
    offsets.clear();
    std::vector<std::uint64_t> keys;
    for (std::size_t i = 0; i < n; ++i) {
      if (i == 0 || refs[i].first != refs[i - 1].first) {
        keys.push_back(refs[i].first);
        offsets.push_back(static_cast<std::uint32_t>(i));
      }
      order[i] = refs[i].second;
    }
    offsets.push_back(static_cast<std::uint32_t>(n));
    table.build(keys);
  }

  template <typename Fn>
  void for_neighbors(const Vec3& q, Fn&& fn) const {
    const std::int64_t cx = cell_of(q.x(), inv_cell);
    const std::int64_t cy = cell_of(q.y(), inv_cell);
    const std::int64_t cz = cell_of(q.z(), inv_cell);
    for (std::int64_t dz = -1; dz <= 1; ++dz) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const std::int32_t e = table.find(pack_cell3(cx + dx, cy + dy, cz + dz));
          if (e < 0) continue;
          const std::uint32_t lo = offsets[static_cast<std::size_t>(e)];
          const std::uint32_t hi = offsets[static_cast<std::size_t>(e) + 1];
          for (std::uint32_t k = lo; k < hi; ++k) fn(order[k]);
        }
      }
    }
  }
};

struct TargetModel {
  PointCloud pts;
  std::vector<Vec3> normal;
  std::vector<char> valid;
  NeighborGrid grid;
};

TargetModel build_target_model(const PointCloud& target, const RegistrationParams& params) {
  TargetModel m;
  m.pts = downsample_voxel(target, params.voxel, 0);
  const std::size_t n = m.pts.size();
  m.grid.build(m.pts, params.max_corr_dist);
  m.normal.assign(n, Vec3::UnitZ());
  m.valid.assign(n, 0);
  const double r2 = params.max_corr_dist * params.max_corr_dist;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& pi = m.pts.points[i];
    Vec3 mean = Vec3::Zero();
    Mat3 acc = Mat3::Zero();
    int cnt = 0;
    m.grid.for_neighbors(pi, [&](std::uint32_t j) {
      const Vec3& pj = m.pts.points[j];
      if ((pj - pi).squaredNorm() > r2) return;
      mean += pj;
      acc += pj * pj.transpose();
      ++cnt;
    });
    if (cnt < 5) continue;
    mean /= cnt;
    const Mat3 cov = acc / cnt - mean * mean.transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    // Point-to-plane residuals are only meaningful on locally planar
    // neighborhoods; strongly curved ones (embankments, box edges) would
    // bias the alignment.
    if (es.eigenvalues()(0) > params.max_plane_var) continue;
    m.normal[i] = es.eigenvectors().col(0);
    m.valid[i] = 1;
  }
  return m;
}

}  // namespace

RegistrationResult register_clouds(const PointCloud& source, const PointCloud& target,
                                   const Pose& initial, const RegistrationParams& params) {
  if (!(params.voxel > 0.0) || !(params.max_corr_dist > 0.0)) {
    throw InvalidArgumentError("registration: non-positive resolution");
  }
  const TargetModel tm = build_target_model(target, params);
  const PointCloud src = downsample_voxel(source, params.voxel, 0);
  const double gate2 = params.max_corr_dist * params.max_corr_dist;

  // One point-to-plane Gauss-Newton pass; fills the normal equations at
  // `pose` and reports match statistics.
  auto accumulate = [&](const Pose& pose, Mat6* H, Vec6* g, double* rss,
                        std::size_t* matched) {
    H->setZero();
    g->setZero();
    *rss = 0.0;
    *matched = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      const Vec3& q = src.points[i];
      const Vec3 w = pose.R * q + pose.p;
      std::int64_t best = -1;
      double best_d2 = gate2;
      tm.grid.for_neighbors(w, [&](std::uint32_t j) {
        if (!tm.valid[j]) return;
        const double d2 = (tm.pts.points[j] - w).squaredNorm();
        if (d2 < best_d2) {
          best_d2 = d2;
          best = j;
        }
      });
      if (best < 0) continue;
      const Vec3& n = tm.normal[static_cast<std::size_t>(best)];
      const double r = n.dot(w - tm.pts.points[static_cast<std::size_t>(best)]);
      const Vec3 a = pose.R.transpose() * n;
      Vec6 J;
      J.head<3>() = n;
      J.tail<3>() = q.cross(a);
      *H += J * J.transpose();
      *g += J * r;
      *rss += r * r;
      ++(*matched);
    }
  };

  // Damped iteration with explicit step acceptance. Highway scenes are close
  // to rank-deficient along the travel direction (parallel ground, walls,
  // barriers), so a raw Gauss-Newton step can slide far along the weak
  // direction; a step only counts if it lowers the mean squared residual
  // under its own re-formed correspondences.
  Pose T = initial;
  Mat6 H;
  Vec6 g;
  double rss = 0.0;
  std::size_t matched = 0;
  accumulate(T, &H, &g, &rss, &matched);
  double lambda = 1e-6;
  for (int iter = 0; iter < params.max_iterations && matched >= params.min_matches; ++iter) {
    double step_norm = 0.0;
    bool stepped = false;
    for (int attempt = 0; attempt < 12; ++attempt) {
      const Mat6 Hd = H + lambda * std::max(1.0, H.trace()) * Mat6::Identity();
      const Vec6 d = Hd.ldlt().solve(-g);
      if (d.allFinite()) {
        Pose Tc = T;
        Tc.p += d.head<3>();
        Tc.R = T.R * exp_so3(d.tail<3>());
        Mat6 Hc;
        Vec6 gc;
        double rss_c = 0.0;
        std::size_t matched_c = 0;
        accumulate(Tc, &Hc, &gc, &rss_c, &matched_c);
        if (matched_c >= params.min_matches &&
            rss_c * static_cast<double>(matched) < rss * static_cast<double>(matched_c)) {
          T = Tc;
          H = Hc;
          g = gc;
          rss = rss_c;
          matched = matched_c;
          lambda = std::max(lambda / 3.0, 1e-12);
          step_norm = d.norm();
          stepped = true;
          break;
        }
      }
      lambda *= 10.0;
      if (lambda > 1e10) break;
    }
    if (!stepped || step_norm < params.step_tol) break;
  }

  RegistrationResult out;
  out.relative = T;
  out.fitness = src.size() == 0 ? 0.0 : static_cast<double>(matched) / src.size();
  if (out.fitness < params.min_fitness || matched < params.min_matches) {
    throw RegistrationFailedError("registration: inlier fraction " +
                                      std::to_string(out.fitness) + " below threshold",
                                  out.fitness);
  }
  // Residual-variance scaling turns the Hessian into an information matrix;
  // the variance floor keeps synthetic perfect fits finite.
  const double dof = std::max(1.0, static_cast<double>(matched) - 6.0);
  const double s2 = std::max(rss / dof, 1e-6);
  out.information = H / s2;
  return out;
}

// ---------------------------------------------------------------------------
// Factor residuals and Jacobians
// ---------------------------------------------------------------------------

const char* factor_type_name(FactorType type) {
  switch (type) {
    case FactorType::kMapPrior:
      return "map_prior";
    case FactorType::kOdometry:
      return "odometry";
    case FactorType::kLoopClosure:
      return "loop_closure";
    case FactorType::kGnssPrior:
      return "gnss_prior";
  }
  return "unknown";
}

namespace {

struct FactorEval {
  Vec6 r = Vec6::Zero();
  Mat6 Ja = Mat6::Zero();
  Mat6 Jb = Mat6::Zero();
  int dim = 6;
};

FactorEval eval_factor(const Factor& f, const Pose& xa, const Pose& xb, bool with_jacobians) {
  FactorEval e;
  switch (f.type) {
    case FactorType::kMapPrior: {
      const Mat3 RmT = f.measured.R.transpose();
      e.r.head<3>() = RmT * (xa.p - f.measured.p);
      const Vec3 rth = log_so3(RmT * xa.R);
      e.r.tail<3>() = rth;
      if (with_jacobians) {
        e.Ja.topLeftCorner<3, 3>() = RmT;
        e.Ja.bottomRightCorner<3, 3>() = right_jacobian_inv(rth);
      }
      break;
    }
    case FactorType::kOdometry:
    case FactorType::kLoopClosure: {
      const Mat3 RaT = xa.R.transpose();
      const Vec3 u = RaT * (xb.p - xa.p);
      e.r.head<3>() = u - f.measured.p;
      const Vec3 rth = log_so3(f.measured.R.transpose() * RaT * xb.R);
      e.r.tail<3>() = rth;
      if (with_jacobians) {
        const Mat3 Jri = right_jacobian_inv(rth);
        e.Ja.topLeftCorner<3, 3>() = -RaT;
        e.Ja.topRightCorner<3, 3>() = skew(u);
        e.Ja.bottomRightCorner<3, 3>() = -Jri * (xb.R.transpose() * xa.R);
        e.Jb.topLeftCorner<3, 3>() = RaT;
        e.Jb.bottomRightCorner<3, 3>() = Jri;
      }
      break;
    }
    case FactorType::kGnssPrior: {
      e.dim = 3;
      e.r.head<3>() = xa.p - f.measured.p;
      if (with_jacobians) e.Ja.topLeftCorner<3, 3>() = Mat3::Identity();
      break;
    }
  }
  return e;
}

// Squared Mahalanobis norm of a factor residual.
double mahalanobis2(const Factor& f, const FactorEval& e) {
  if (e.dim == 3) {
    const Vec3 r = e.r.head<3>();
    return r.dot(f.information.topLeftCorner<3, 3>() * r);
  }
  return e.r.dot(f.information * e.r);
}

struct RobustTerm {
  double cost = 0.0;
  double weight = 1.0;  // IRLS scale on the Gauss-Newton blocks
};

RobustTerm robustify(FactorType type, double e2, double huber_delta) {
  RobustTerm t;
  const bool robust = type == FactorType::kLoopClosure;
  const double e = std::sqrt(std::max(e2, 0.0));
  if (robust && e > huber_delta) {
    t.cost = huber_delta * e - 0.5 * huber_delta * huber_delta;
    t.weight = huber_delta / e;
  } else {
    t.cost = 0.5 * e2;
  }
  return t;
}

void validate_graph(const FactorGraph& graph) {
  const int n = static_cast<int>(graph.nodes.size());
  for (const Factor& f : graph.factors) {
    const bool relative = f.type == FactorType::kOdometry || f.type == FactorType::kLoopClosure;
    if (f.a < 0 || f.a >= n || (relative && (f.b < 0 || f.b >= n || f.b == f.a))) {
      throw GraphConstructionError("graph: factor references a missing node");
    }
  }
}

struct Dsu {
  std::vector<int> parent;
  explicit Dsu(int n) : parent(static_cast<std::size_t>(n)) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int a) {
    while (parent[static_cast<std::size_t>(a)] != a) {
      parent[static_cast<std::size_t>(a)] =
          parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
      a = parent[static_cast<std::size_t>(a)];
    }
    return a;
  }
  void unite(int a, int b) { parent[static_cast<std::size_t>(find(a))] = find(b); }
};

}  // namespace

std::vector<FactorTypeStats> residual_stats(const FactorGraph& graph,
                                            const std::vector<Pose>& poses,
                                            double huber_delta) {
  (void)huber_delta;
  validate_graph(graph);
  if (poses.size() != graph.nodes.size()) {
    throw InvalidArgumentError("residuals: pose count does not match the graph");
  }
  std::vector<FactorTypeStats> stats(4);
  std::vector<double> sq(4, 0.0);
  for (const Factor& f : graph.factors) {
    const Pose& xa = poses[static_cast<std::size_t>(f.a)];
    const Pose& xb = f.b >= 0 ? poses[static_cast<std::size_t>(f.b)] : xa;
    const FactorEval e = eval_factor(f, xa, xb, false);
    const double e2 = mahalanobis2(f, e);
    const auto k = static_cast<std::size_t>(f.type);
    ++stats[k].count;
    sq[k] += e2;
    stats[k].max = std::max(stats[k].max, std::sqrt(std::max(e2, 0.0)));
  }
  for (std::size_t k = 0; k < 4; ++k) {
    if (stats[k].count > 0) stats[k].rms = std::sqrt(sq[k] / static_cast<double>(stats[k].count));
  }
  return stats;
}

nlohmann::json SolveReport::to_json() const {
  nlohmann::json types = nlohmann::json::object();
  for (std::size_t k = 0; k < stats.size(); ++k) {
    const auto& s = stats[k];
    types[factor_type_name(static_cast<FactorType>(k))] = {
        {"count", s.count}, {"rms", s.rms}, {"max", s.max}};
  }
  return nlohmann::json{{"converged", converged},
                        {"iterations", iterations},
                        {"initial_cost", initial_cost},
                        {"final_cost", final_cost},
                        {"anchored_nodes", anchored_nodes},
                        {"factor_types", types}};
}

SolveResult solve_map(const FactorGraph& graph, const SolveParams& params) {
  validate_graph(graph);
  const int n = static_cast<int>(graph.nodes.size());
  if (n == 0) throw InvalidArgumentError("solver: empty graph");

  // Structural analysis: every node must be touched by some factor, and
  // components without an absolute factor get their first node anchored.
  std::vector<int> touches(static_cast<std::size_t>(n), 0);
  Dsu dsu(n);
  std::vector<char> grounded(static_cast<std::size_t>(n), 0);
  for (const Factor& f : graph.factors) {
    ++touches[static_cast<std::size_t>(f.a)];
    if (f.type == FactorType::kOdometry || f.type == FactorType::kLoopClosure) {
      ++touches[static_cast<std::size_t>(f.b)];
      dsu.unite(f.a, f.b);
    } else {
      grounded[static_cast<std::size_t>(f.a)] = 1;
    }
  }
  std::vector<int> loose;
  for (int i = 0; i < n; ++i) {
    if (touches[static_cast<std::size_t>(i)] == 0) loose.push_back(i);
  }
  if (!loose.empty()) {
    throw RankDeficiencyError("solver: nodes touched by no factor", loose);
  }

  std::vector<char> root_grounded(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    if (grounded[static_cast<std::size_t>(i)]) root_grounded[static_cast<std::size_t>(dsu.find(i))] = 1;
  }
  SolveReport report;
  std::vector<char> anchored(static_cast<std::size_t>(n), 0);
  std::vector<char> seen_root(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const int r = dsu.find(i);
    if (root_grounded[static_cast<std::size_t>(r)] || seen_root[static_cast<std::size_t>(r)]) {
      seen_root[static_cast<std::size_t>(r)] = 1;
      continue;
    }
    seen_root[static_cast<std::size_t>(r)] = 1;
    anchored[static_cast<std::size_t>(i)] = 1;
    report.anchored_nodes.push_back(i);
  }

  std::vector<int> free_idx(static_cast<std::size_t>(n), -1);
  int nfree = 0;
  for (int i = 0; i < n; ++i) {
    if (!anchored[static_cast<std::size_t>(i)]) free_idx[static_cast<std::size_t>(i)] = nfree++;
  }

  std::vector<Pose> x(graph.nodes.size());
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) x[i] = graph.nodes[i].initial;

  auto total_cost = [&](const std::vector<Pose>& poses) {
    double c = 0.0;
    for (const Factor& f : graph.factors) {
      const Pose& xa = poses[static_cast<std::size_t>(f.a)];
      const Pose& xb = f.b >= 0 ? poses[static_cast<std::size_t>(f.b)] : xa;
      const FactorEval e = eval_factor(f, xa, xb, false);
      c += robustify(f.type, mahalanobis2(f, e), params.huber_delta).cost;
    }
    return c;
  };

  double cost = total_cost(x);
  report.initial_cost = cost;
  report.cost_trace.push_back(cost);

  const int dim = 6 * nfree;
  double lambda = 1e-4;
  bool converged = nfree == 0;
  int iter = 0;

  std::vector<Eigen::Triplet<double>> base;
  Eigen::VectorXd grad(dim);
  Eigen::VectorXd diag(dim);

  for (; iter < params.max_iterations && !converged; ++iter) {
    base.clear();
    grad.setZero();
    // Linearize every factor at the current estimate.
    auto add_block = [&](int ra, int rb, const Mat6& m) {
      for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 6; ++j) {
          if (m(i, j) != 0.0) base.emplace_back(6 * ra + i, 6 * rb + j, m(i, j));
        }
      }
    };
    for (const Factor& f : graph.factors) {
      const Pose& xa = x[static_cast<std::size_t>(f.a)];
      const Pose& xb = f.b >= 0 ? x[static_cast<std::size_t>(f.b)] : xa;
      const FactorEval e = eval_factor(f, xa, xb, true);
      const double w = robustify(f.type, mahalanobis2(f, e), params.huber_delta).weight;
      Mat6 L = Mat6::Zero();
      if (e.dim == 3) {
        L.topLeftCorner<3, 3>() = f.information.topLeftCorner<3, 3>();
      } else {
        L = f.information;
      }
      L *= w;
      const int ia = free_idx[static_cast<std::size_t>(f.a)];
      const int ib = f.b >= 0 ? free_idx[static_cast<std::size_t>(f.b)] : -1;
      const Vec6 Lr = L * e.r;
      if (ia >= 0) {
        add_block(ia, ia, e.Ja.transpose() * L * e.Ja);
        grad.segment<6>(6 * ia) += e.Ja.transpose() * Lr;
      }
      if (ib >= 0) {
        add_block(ib, ib, e.Jb.transpose() * L * e.Jb);
        grad.segment<6>(6 * ib) += e.Jb.transpose() * Lr;
      }
      if (ia >= 0 && ib >= 0) {
        add_block(ia, ib, e.Ja.transpose() * L * e.Jb);
        add_block(ib, ia, e.Jb.transpose() * L * e.Ja);
      }
    }

    Eigen::SparseMatrix<double> Hbase(dim, dim);
    Hbase.setFromTriplets(base.begin(), base.end());
    diag = Hbase.diagonal();
    const double max_diag = std::max(diag.maxCoeff(), 1e-12);

    bool accepted = false;
    bool solver_failed = true;
    for (int attempt = 0; attempt < 30; ++attempt) {
      Eigen::SparseMatrix<double> Hd = Hbase;
      for (int i = 0; i < dim; ++i) {
        Hd.coeffRef(i, i) += lambda * std::max(diag(i), 1e-12 * max_diag);
      }
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(Hd);
      if (ldlt.info() != Eigen::Success) {
        lambda *= 10.0;
        if (lambda > 1e14) break;
        continue;
      }
      const Eigen::VectorXd d = ldlt.solve(-grad);
      if (!d.allFinite()) {
        lambda *= 10.0;
        if (lambda > 1e14) break;
        continue;
      }
      solver_failed = false;
      std::vector<Pose> xn = x;
      for (int i = 0; i < n; ++i) {
        const int fi = free_idx[static_cast<std::size_t>(i)];
        if (fi < 0) continue;
        xn[static_cast<std::size_t>(i)].p += d.segment<3>(6 * fi);
        xn[static_cast<std::size_t>(i)].R =
            xn[static_cast<std::size_t>(i)].R * exp_so3(d.segment<3>(6 * fi + 3));
      }
      const double new_cost = total_cost(xn);
      if (std::isfinite(new_cost) && new_cost <= cost) {
        const double drop = cost - new_cost;
        x = std::move(xn);
        cost = new_cost;
        report.cost_trace.push_back(cost);
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        if (drop <= params.rel_tol * std::max(cost + drop, 1e-300)) converged = true;
        break;
      }
      lambda *= 10.0;
      if (lambda > 1e14) break;
    }

    if (!accepted) {
      if (solver_failed) {
        // Persistent factorization failure: name the weakly constrained nodes.
        std::vector<int> suspects;
        for (int i = 0; i < n; ++i) {
          const int fi = free_idx[static_cast<std::size_t>(i)];
          if (fi < 0) continue;
          if (diag.segment<6>(6 * fi).minCoeff() < 1e-9 * max_diag) suspects.push_back(i);
        }
        throw RankDeficiencyError("solver: normal equations singular under damping", suspects);
      }
      break;  // no downhill step left at this linearization
    }
  }

  report.converged = converged;
  report.iterations = iter;
  report.final_cost = cost;
  report.stats = residual_stats(graph, x, params.huber_delta);
  return SolveResult{std::move(x), std::move(report)};
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

std::vector<std::optional<RegistrationResult>> compute_scan_odometry(
    const Clip& clip, const RegistrationParams& params) {
  const std::size_t n = clip.frame_count();
  if (n < 2) return {};
  std::vector<std::optional<RegistrationResult>> out(n - 1);
  std::vector<Pose> gt(n);
  for (std::size_t f = 0; f < n; ++f) gt[f] = clip.gt_pose_at(clip.frame_times[f]);
  parallel_chunks(n - 1, n - 1, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      try {
        out[k] = register_clouds(clip.frame(k + 1), clip.frame(k), between(gt[k], gt[k + 1]),
                                 params);
      } catch (const RegistrationFailedError&) {
        out[k] = std::nullopt;
      }
    }
  });
  return out;
}

FactorGraph build_localization_gt_graph(const Clip& clip, const PointCloud& map_cloud,
                                        const std::vector<std::optional<RegistrationResult>>& odom,
                                        std::vector<Pose> initials,
                                        const LocalizationGraphParams& params) {
  const std::size_t n = clip.frame_count();
  if (n == 0) throw InvalidArgumentError("localization graph: clip has no frames");
  if (odom.size() + 1 != n) {
    throw InvalidArgumentError("localization graph: need one odometry slot per frame pair");
  }
  if (initials.empty()) {
    initials.resize(n);
    for (std::size_t f = 0; f < n; ++f) initials[f] = clip.gt_pose_at(clip.frame_times[f]);
  }
  if (initials.size() != n) {
    throw InvalidArgumentError("localization graph: initial pose count mismatch");
  }

  FactorGraph g;
  g.nodes.reserve(n);
  for (std::size_t f = 0; f < n; ++f) {
    g.nodes.push_back({clip.frame_times[f], 0, initials[f]});
  }

  const PointCloud map_thin = downsample_voxel(map_cloud, params.reg.voxel, 0);
  std::vector<std::optional<RegistrationResult>> priors(n);
  parallel_chunks(n, n, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t f = b; f < e; ++f) {
      const PointCloud crop = crop_xy(
          map_thin, Vec2(initials[f].p.x(), initials[f].p.y()), params.map_crop_radius);
      try {
        priors[f] = register_clouds(clip.frame(f), crop, initials[f], params.reg);
      } catch (const RegistrationFailedError&) {
        priors[f] = std::nullopt;
      }
    }
  });

  std::size_t dropped = 0;
  for (std::size_t f = 0; f < n; ++f) {
    if (priors[f].has_value()) {
      g.factors.push_back({FactorType::kMapPrior, static_cast<int>(f), -1,
                           priors[f]->relative, priors[f]->information});
    } else {
      ++dropped;
    }
  }
  for (std::size_t k = 0; k + 1 < n; ++k) {
    if (odom[k].has_value()) {
      g.factors.push_back({FactorType::kOdometry, static_cast<int>(k),
                           static_cast<int>(k + 1), odom[k]->relative, odom[k]->information});
    }
  }
  if (dropped > 0) {
    std::fprintf(stderr, "localization graph: dropped %zu of %zu map priors\n", dropped, n);
  }

  // Every odometry-connected segment needs at least one surviving map prior;
  // a floating segment has no absolute reference at all.
  Dsu dsu(static_cast<int>(n));
  for (std::size_t k = 0; k + 1 < n; ++k) {
    if (odom[k].has_value()) dsu.unite(static_cast<int>(k), static_cast<int>(k + 1));
  }
  std::vector<char> has_prior(n, 0);
  for (std::size_t f = 0; f < n; ++f) {
    if (priors[f].has_value()) has_prior[static_cast<std::size_t>(dsu.find(static_cast<int>(f)))] = 1;
  }
  for (std::size_t f = 0; f < n; ++f) {
    if (!has_prior[static_cast<std::size_t>(dsu.find(static_cast<int>(f)))]) {
      throw GraphConstructionError("localization graph: frames around " +
                                   std::to_string(clip.frame_times[f]) +
                                   " s have no map prior and no anchored neighbor");
    }
  }
  return g;
}

FactorGraph build_mapping_gt_graph(const std::vector<Clip>& sessions,
                                   const std::vector<GnssSample>& gnss,
                                   const MappingGraphParams& params) {
  if (sessions.empty()) throw InvalidArgumentError("mapping graph: no sessions");

  struct Keyframe {
    int session;
    std::size_t frame;
    double t;
    Pose gt;
    int node = -1;
  };
  std::vector<Keyframe> kfs;
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    const Clip& clip = sessions[s];
    if (clip.frame_count() == 0) throw InvalidArgumentError("mapping graph: session without frames");
    Vec3 last = Vec3::Constant(std::numeric_limits<double>::infinity());
    for (std::size_t f = 0; f < clip.frame_count(); ++f) {
      const Pose gt_pose = clip.gt_pose_at(clip.frame_times[f]);
      if ((gt_pose.p - last).norm() < params.keyframe_spacing) continue;
      kfs.push_back({static_cast<int>(s), f, clip.frame_times[f], gt_pose});
      last = gt_pose.p;
    }
  }

  FactorGraph g;
  g.nodes.reserve(kfs.size());
  for (std::size_t i = 0; i < kfs.size(); ++i) {
    kfs[i].node = static_cast<int>(i);
    g.nodes.push_back({kfs[i].t, kfs[i].session, kfs[i].gt});
  }

  // Load each keyframe scan once.
  std::vector<PointCloud> scans(kfs.size());
  parallel_chunks(kfs.size(), kfs.size(), [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      scans[i] = sessions[static_cast<std::size_t>(kfs[i].session)].frame(kfs[i].frame);
    }
  });

  struct Job {
    FactorType type;
    int a, b;  // keyframe indices
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i + 1 < kfs.size(); ++i) {
    if (kfs[i].session == kfs[i + 1].session) {
      jobs.push_back({FactorType::kOdometry, static_cast<int>(i), static_cast<int>(i + 1)});
    }
  }
  const int stride = std::max(params.loop_stride, 1);
  for (std::size_t i = 0; i < kfs.size(); ++i) {
    if (static_cast<int>(i) % stride != 0) continue;
    for (std::size_t ss = static_cast<std::size_t>(kfs[i].session) + 1; ss < sessions.size();
         ++ss) {
      int best = -1;
      double best_d = params.loop_gate;
      for (std::size_t j = 0; j < kfs.size(); ++j) {
        if (kfs[j].session != static_cast<int>(ss)) continue;
        const double d = (kfs[j].gt.p - kfs[i].gt.p).norm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(j);
        }
      }
      if (best >= 0) jobs.push_back({FactorType::kLoopClosure, static_cast<int>(i), best});
    }
  }

  std::vector<std::optional<RegistrationResult>> results(jobs.size());
  parallel_chunks(jobs.size(), jobs.size(), [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      const Job& j = jobs[k];
      try {
        results[k] = register_clouds(scans[static_cast<std::size_t>(j.b)],
                                     scans[static_cast<std::size_t>(j.a)],
                                     between(kfs[static_cast<std::size_t>(j.a)].gt,
                                             kfs[static_cast<std::size_t>(j.b)].gt),
                                     params.reg);
      } catch (const RegistrationFailedError&) {
        results[k] = std::nullopt;
      }
    }
  });

  std::size_t loops = 0;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    if (!results[k].has_value()) continue;
    g.factors.push_back({jobs[k].type, jobs[k].a, jobs[k].b, results[k]->relative,
                         results[k]->information});
    if (jobs[k].type == FactorType::kLoopClosure) ++loops;
  }

  for (const GnssSample& s : gnss) {
    int best = -1;
    double best_dt = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < kfs.size(); ++i) {
      if (kfs[i].session != s.session) continue;
      const double dt = std::abs(kfs[i].t - s.t);
      if (dt < best_dt) {
        best_dt = dt;
        best = static_cast<int>(i);
      }
    }
    if (best < 0) continue;
    Factor f;
    f.type = FactorType::kGnssPrior;
    f.a = best;
    f.measured.p = s.p;
    f.information = Mat6::Zero();
    f.information.topLeftCorner<3, 3>() = Mat3::Identity() / (s.sigma * s.sigma);
    g.factors.push_back(f);
  }

  if (sessions.size() > 1 && loops == 0) {
    std::fprintf(stderr,
                 "mapping graph: no inter-session loop closures; sessions are solved "
                 "independently\n");
  }
  return g;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json pose_to_json(const Pose& pose) {
  const Eigen::Quaterniond q(pose.R);
  return nlohmann::json{{"p", {pose.p.x(), pose.p.y(), pose.p.z()}},
                        {"q", {q.w(), q.x(), q.y(), q.z()}}};
}

Pose pose_from_json(const nlohmann::json& j) {
  Pose pose;
  const auto& p = j.at("p");
  const auto& q = j.at("q");
  pose.p = Vec3(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
  Eigen::Quaterniond quat(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                          q.at(3).get<double>());
  quat.normalize();
  pose.R = quat.toRotationMatrix();
  return pose;
}

FactorType factor_type_from_name(const std::string& name) {
  for (int k = 0; k < 4; ++k) {
    if (name == factor_type_name(static_cast<FactorType>(k))) return static_cast<FactorType>(k);
  }
  throw FormatError("graph: unknown factor type '" + name + "'", 0);
}

}  // namespace

void save_graph(const FactorGraph& graph, const std::filesystem::path& path) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (const GraphNode& node : graph.nodes) {
    nlohmann::json nj = pose_to_json(node.initial);
    nj["t"] = node.t;
    nj["session"] = node.session;
    j["nodes"].push_back(std::move(nj));
  }
  j["factors"] = nlohmann::json::array();
  for (const Factor& f : graph.factors) {
    nlohmann::json fj = pose_to_json(f.measured);
    fj["type"] = factor_type_name(f.type);
    fj["a"] = f.a;
    fj["b"] = f.b;
    std::vector<double> info(36);
    for (int r = 0; r < 6; ++r) {
      for (int c = 0; c < 6; ++c) info[static_cast<std::size_t>(6 * r + c)] = f.information(r, c);
    }
    fj["information"] = info;
    j["factors"].push_back(std::move(fj));
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << j.dump(1) << "\n";
  if (!f) throw IoError("write failed: " + path.string());
}

FactorGraph load_graph(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  FactorGraph graph;
  try {
    const nlohmann::json j = nlohmann::json::parse(f);
    for (const auto& nj : j.at("nodes")) {
      GraphNode node;
      node.t = nj.at("t").get<double>();
      node.session = nj.at("session").get<int>();
      node.initial = pose_from_json(nj);
      graph.nodes.push_back(node);
    }
    for (const auto& fj : j.at("factors")) {
      Factor fac;
      fac.type = factor_type_from_name(fj.at("type").get<std::string>());
      fac.a = fj.at("a").get<int>();
      fac.b = fj.at("b").get<int>();
      fac.measured = pose_from_json(fj);
      const auto& info = fj.at("information");
      if (info.size() != 36) throw FormatError("graph: information must have 36 entries", 0);
      for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 6; ++c) {
          fac.information(r, c) = info.at(static_cast<std::size_t>(6 * r + c)).get<double>();
        }
      }
      graph.factors.push_back(fac);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
  validate_graph(graph);
  return graph;
}

void save_gt_csv(const std::filesystem::path& path, const std::vector<double>& times,
                 const std::vector<Pose>& poses) {
  if (times.size() != poses.size()) {
    throw InvalidArgumentError("gt csv: time and pose counts differ");
  }
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) {
      throw TimestampError("gt csv: timestamps must be strictly increasing");
    }
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << "t,x,y,z,qw,qx,qy,qz,vx,vy,vz\n";
  char buf[32];
  const std::size_t n = times.size();
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 v = Vec3::Zero();
    if (n >= 2) {
      const std::size_t lo = i == 0 ? 0 : i - 1;
      const std::size_t hi = i + 1 == n ? i : i + 1;
      v = (poses[hi].p - poses[lo].p) / (times[hi] - times[lo]);
    }
    const Eigen::Quaterniond q(poses[i].R);
    const double row[11] = {times[i], poses[i].p.x(), poses[i].p.y(), poses[i].p.z(),
                            q.w(),    q.x(),          q.y(),          q.z(),
                            v.x(),    v.y(),          v.z()};
    for (int c = 0; c < 11; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", row[c]);
      f << buf << (c < 10 ? "," : "\n");
    }
  }
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace hiloc

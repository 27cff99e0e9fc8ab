#include "hiloc/localizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Dense>

#include "hiloc/errors.hpp"
#include "hiloc/parallel.hpp"

namespace hiloc {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kWFloor = 1e-6;

inline std::int64_t cell_of(double v, double inv_cell) {
  return static_cast<std::int64_t>(std::floor(v * inv_cell));
}

void validate(const LocalizerConfig& cfg) {
  if (cfg.nx < 1 || cfg.ny < 1 || cfg.nyaw < 1)
    throw InvalidArgumentError("localizer grid shape must be at least 1 per axis");
  if (!(cfg.range_x > 0.0) || !(cfg.range_y > 0.0) || !(cfg.range_yaw_deg > 0.0))
    throw InvalidArgumentError("localizer sampling ranges must be positive");
}

// Splits the sorted offsets into maximal runs whose shifted positions share
// one map cell. Writes the inclusive end index and cell of each run; returns
// the run count.
int axis_runs(const std::vector<double>& offs, double base, double inv_cell, int* last,
              std::int64_t* cell) {
  const int n = static_cast<int>(offs.size());
  int r = 0;
  std::int64_t c = cell_of(base + offs[0], inv_cell);
  for (int i = 1; i < n; ++i) {
    const std::int64_t ci = cell_of(base + offs[i], inv_cell);
    if (ci != c) {
      last[r] = i - 1;
      cell[r] = c;
      ++r;
      c = ci;
    }
  }
  last[r] = n - 1;
  cell[r] = c;
  return r + 1;
}

// 2D difference plane over the sample grid: rectangle adds become four point
// updates, a prefix sum recovers the per-sample totals.
template <typename T>
struct DiffPlane {
  int w = 0, h = 0;
  std::vector<T> d;

  void init(int nx, int ny) {
    w = nx + 1;
    h = ny + 1;
    d.assign(static_cast<std::size_t>(w) * h, T(0));
  }
  void clear() { std::fill(d.begin(), d.end(), T(0)); }
  void add(int i0, int i1, int j0, int j1, T v) {
    T* p = d.data();
    p[static_cast<std::size_t>(j0) * w + i0] += v;
    p[static_cast<std::size_t>(j0) * w + i1 + 1] -= v;
    p[static_cast<std::size_t>(j1 + 1) * w + i0] -= v;
    p[static_cast<std::size_t>(j1 + 1) * w + i1 + 1] += v;
  }
  void prefix() {
    for (int j = 0; j < h; ++j) {
      T* row = d.data() + static_cast<std::size_t>(j) * w;
      for (int i = 1; i < w; ++i) row[i] += row[i - 1];
    }
    for (int j = 1; j < h; ++j) {
      T* row = d.data() + static_cast<std::size_t>(j) * w;
      const T* prev = row - w;
      for (int i = 0; i < w; ++i) row[i] += prev[i];
    }
  }
  T at(int i, int j) const { return d[static_cast<std::size_t>(j) * w + i]; }
};

// Exact minimum of the convex quadratic c0 + c1 dx + c2 dy + c3 dx^2 +
// c4 dx dy + c5 dy^2 over [dx0, dx1] x [dy0, dy1]: the interior stationary
// point if it lies inside, otherwise the best of the four edge minima.
double rect_quad_min(double c0, double c1, double c2, double c3, double c4, double c5, double dx0,
                     double dx1, double dy0, double dy1) {
  auto q = [&](double dx, double dy) {
    return c0 + dx * (c1 + c3 * dx) + dy * (c2 + c5 * dy) + c4 * dx * dy;
  };
  if (!(c3 > 0.0) || !(c5 > 0.0)) return -std::numeric_limits<double>::infinity();
  const double det = 4.0 * c3 * c5 - c4 * c4;
  if (det > 0.0) {
    const double mx = (-2.0 * c5 * c1 + c4 * c2) / det;
    const double my = (-2.0 * c3 * c2 + c4 * c1) / det;
    if (mx >= dx0 && mx <= dx1 && my >= dy0 && my <= dy1) return q(mx, my);
  }
  auto clampv = [](double v, double lo, double hi) { return std::min(std::max(v, lo), hi); };
  const double ya = clampv(-(c2 + c4 * dx0) / (2.0 * c5), dy0, dy1);
  const double yb = clampv(-(c2 + c4 * dx1) / (2.0 * c5), dy0, dy1);
  const double xa = clampv(-(c1 + c4 * dy0) / (2.0 * c3), dx0, dx1);
  const double xb = clampv(-(c1 + c4 * dy1) / (2.0 * c3), dx0, dx1);
  return std::min(std::min(q(dx0, ya), q(dx1, yb)), std::min(q(xa, dy0), q(xb, dy1)));
}

}  // namespace

std::vector<double> grid_offsets(double range, int n) {
  if (n <= 1) return {0.0};
  std::vector<double> offs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    offs[static_cast<std::size_t>(i)] = -range + 2.0 * range * i / (n - 1);
  return offs;
}

std::vector<Pose> sample_poses(const Pose& center, const LocalizerConfig& cfg) {
  validate(cfg);
  const auto xs = grid_offsets(cfg.range_x, cfg.nx);
  const auto ys = grid_offsets(cfg.range_y, cfg.ny);
  const auto psis = grid_offsets(cfg.range_yaw_deg * kPi / 180.0, cfg.nyaw);
  std::vector<Pose> poses;
  poses.reserve(static_cast<std::size_t>(cfg.n_samples()));
  for (int k = 0; k < cfg.nyaw; ++k) {
    const Mat3 R = center.R * rot_z(psis[static_cast<std::size_t>(k)]);
    for (int j = 0; j < cfg.ny; ++j)
      for (int i = 0; i < cfg.nx; ++i)
        poses.push_back(Pose{center.p + Vec3(xs[static_cast<std::size_t>(i)],
                                             ys[static_cast<std::size_t>(j)], 0.0),
                             R});
  }
  return poses;
}

LikelihoodValue ndt_log_likelihood(const Pose& pose, const NdtMap& map, const PointCloud& pts,
                                   double miss_penalty, double clamp,
                                   std::vector<double>* matched_costs) {
  LikelihoodValue out;
  out.total = pts.size();
  if (matched_costs) {
    matched_costs->clear();
    matched_costs->reserve(pts.size());
  }
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const Vec3 w = pose.R * pts.points[n] + pose.p;
    const NdtVoxel* v = map.find_point(w);
    if (v == nullptr) {
      out.L += miss_penalty;
      continue;
    }
    const Vec3 r = w - v->mean;
    const double q = std::min(r.dot(v->info * r), clamp);
    out.L += q;
    ++out.matched;
    if (matched_costs) matched_costs->push_back(q);
  }
  return out;
}

LikelihoodValue intensity_log_likelihood(const Pose& pose, const IntensityMap& map,
                                         const PointCloud& pts, double miss_penalty, double clamp,
                                         std::vector<double>* matched_costs) {
  LikelihoodValue out;
  out.total = pts.size();
  if (matched_costs) {
    matched_costs->clear();
    matched_costs->reserve(pts.size());
  }
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const Vec3 w = pose.R * pts.points[n] + pose.p;
    const IntensityCell* c = map.find_point(w.x(), w.y());
    if (c == nullptr) {
      out.L += miss_penalty;
      continue;
    }
    const double d = pts.intensity[n] - c->mean;
    const double q = std::min(d * d / c->var, clamp);
    out.L += q;
    ++out.matched;
    if (matched_costs) matched_costs->push_back(q);
  }
  return out;
}

GridEval eval_ndt_grid(const NdtMap& map, const PointCloud& pts, const Pose& center,
                       const LocalizerConfig& cfg, double miss_penalty, double clamp) {
  validate(cfg);
  const auto xs = grid_offsets(cfg.range_x, cfg.nx);
  const auto ys = grid_offsets(cfg.range_y, cfg.ny);
  const auto psis = grid_offsets(cfg.range_yaw_deg * kPi / 180.0, cfg.nyaw);
  const int nx = cfg.nx, ny = cfg.ny;
  const double inv = 1.0 / map.cell();
  const std::size_t total = pts.size();

  GridEval out;
  out.L.assign(static_cast<std::size_t>(cfg.n_samples()), 0.0);
  out.matched.assign(static_cast<std::size_t>(cfg.n_samples()), 0);

  // One chunk per yaw slice: every slice owns its planes and a disjoint
  // stretch of the output, so thread scheduling cannot reorder any sum.
  parallel_chunks(static_cast<std::size_t>(cfg.nyaw), static_cast<std::size_t>(cfg.nyaw),
                  [&](std::size_t, std::size_t kb, std::size_t ke) {
    std::array<DiffPlane<double>, 6> D;
    for (auto& p : D) p.init(nx, ny);
    DiffPlane<std::int64_t> miss;
    miss.init(nx, ny);
    std::vector<double> direct(static_cast<std::size_t>(nx) * ny);
    std::vector<int> xlast(static_cast<std::size_t>(nx)), ylast(static_cast<std::size_t>(ny));
    std::vector<std::int64_t> xcell(static_cast<std::size_t>(nx)),
        ycell(static_cast<std::size_t>(ny));

    for (std::size_t k = kb; k < ke; ++k) {
      for (auto& p : D) p.clear();
      miss.clear();
      std::fill(direct.begin(), direct.end(), 0.0);
      const Mat3 R = center.R * rot_z(psis[k]);

      for (std::size_t n = 0; n < total; ++n) {
        const Vec3 w0 = R * pts.points[n] + center.p;
        const std::int64_t cz = cell_of(w0.z(), inv);
        const int nxr = axis_runs(xs, w0.x(), inv, xlast.data(), xcell.data());
        const int nyr = axis_runs(ys, w0.y(), inv, ylast.data(), ycell.data());
        int j0 = 0;
        for (int b = 0; b < nyr; ++b) {
          const int j1 = ylast[static_cast<std::size_t>(b)];
          int i0 = 0;
          for (int a = 0; a < nxr; ++a) {
            const int i1 = xlast[static_cast<std::size_t>(a)];
            const NdtVoxel* vox =
                map.find(xcell[static_cast<std::size_t>(a)], ycell[static_cast<std::size_t>(b)], cz);
            if (vox == nullptr) {
              miss.add(i0, i1, j0, j1, 1);
              i0 = i1 + 1;
              continue;
            }
            // Within the rectangle the cost is the quadratic
            // c0 + c1 dx + c2 dy + c3 dx^2 + c4 dx dy + c5 dy^2.
            const Vec3 r0 = w0 - vox->mean;
            const Vec3 lr = vox->info * r0;
            const double c0 = r0.dot(lr);
            const double c1 = 2.0 * lr.x(), c2 = 2.0 * lr.y();
            const double c3 = vox->info(0, 0), c4 = 2.0 * vox->info(0, 1),
                         c5 = vox->info(1, 1);
            auto q = [&](double dx, double dy) {
              return c0 + dx * (c1 + c3 * dx) + dy * (c2 + c5 * dy) + c4 * dx * dy;
            };
            const double dx0 = xs[static_cast<std::size_t>(i0)],
                         dx1 = xs[static_cast<std::size_t>(i1)];
            const double dy0 = ys[static_cast<std::size_t>(j0)],
                         dy1 = ys[static_cast<std::size_t>(j1)];
            // Convexity puts the rectangle max at a corner.
            const double qmax = std::max(std::max(q(dx0, dy0), q(dx1, dy0)),
                                         std::max(q(dx0, dy1), q(dx1, dy1)));
            if (qmax <= clamp) {
              D[0].add(i0, i1, j0, j1, c0);
              D[1].add(i0, i1, j0, j1, c1);
              D[2].add(i0, i1, j0, j1, c2);
              D[3].add(i0, i1, j0, j1, c3);
              D[4].add(i0, i1, j0, j1, c4);
              D[5].add(i0, i1, j0, j1, c5);
            } else if (rect_quad_min(c0, c1, c2, c3, c4, c5, dx0, dx1, dy0, dy1) >= clamp) {
              D[0].add(i0, i1, j0, j1, clamp);
            } else {
              // Clamp boundary crosses this rectangle: evaluate those
              // samples directly.
              for (int j = j0; j <= j1; ++j) {
                const double dy = ys[static_cast<std::size_t>(j)];
                double* row = direct.data() + static_cast<std::size_t>(j) * nx;
                for (int i = i0; i <= i1; ++i)
                  row[i] += std::min(q(xs[static_cast<std::size_t>(i)], dy), clamp);
              }
            }
            i0 = i1 + 1;
          }
          j0 = j1 + 1;
        }
      }

      for (auto& p : D) p.prefix();
      miss.prefix();
      for (int j = 0; j < ny; ++j) {
        const double dy = ys[static_cast<std::size_t>(j)];
        for (int i = 0; i < nx; ++i) {
          const double dx = xs[static_cast<std::size_t>(i)];
          const std::size_t s = (k * ny + static_cast<std::size_t>(j)) * nx +
                                static_cast<std::size_t>(i);
          const std::int64_t m = miss.at(i, j);
          out.L[s] = D[0].at(i, j) + D[1].at(i, j) * dx + D[2].at(i, j) * dy +
                     D[3].at(i, j) * dx * dx + D[4].at(i, j) * dx * dy +
                     D[5].at(i, j) * dy * dy + direct[static_cast<std::size_t>(j) * nx + i] +
                     static_cast<double>(m) * miss_penalty;
          out.matched[s] = static_cast<int>(total - static_cast<std::size_t>(m));
        }
      }
    }
  });
  return out;
}

GridEval eval_intensity_grid(const IntensityMap& map, const PointCloud& pts, const Pose& center,
                             const LocalizerConfig& cfg, double miss_penalty, double clamp) {
  validate(cfg);
  const auto xs = grid_offsets(cfg.range_x, cfg.nx);
  const auto ys = grid_offsets(cfg.range_y, cfg.ny);
  const auto psis = grid_offsets(cfg.range_yaw_deg * kPi / 180.0, cfg.nyaw);
  const int nx = cfg.nx, ny = cfg.ny;
  const double inv = 1.0 / map.cell();
  const std::size_t total = pts.size();

  GridEval out;
  out.L.assign(static_cast<std::size_t>(cfg.n_samples()), 0.0);
  out.matched.assign(static_cast<std::size_t>(cfg.n_samples()), 0);

  parallel_chunks(static_cast<std::size_t>(cfg.nyaw), static_cast<std::size_t>(cfg.nyaw),
                  [&](std::size_t, std::size_t kb, std::size_t ke) {
    DiffPlane<double> cost;
    cost.init(nx, ny);
    DiffPlane<std::int64_t> miss;
    miss.init(nx, ny);
    std::vector<int> xlast(static_cast<std::size_t>(nx)), ylast(static_cast<std::size_t>(ny));
    std::vector<std::int64_t> xcell(static_cast<std::size_t>(nx)),
        ycell(static_cast<std::size_t>(ny));

    for (std::size_t k = kb; k < ke; ++k) {
      cost.clear();
      miss.clear();
      const Mat3 R = center.R * rot_z(psis[k]);

      for (std::size_t n = 0; n < total; ++n) {
        const Vec3 w0 = R * pts.points[n] + center.p;
        const double in = pts.intensity[n];
        const int nxr = axis_runs(xs, w0.x(), inv, xlast.data(), xcell.data());
        const int nyr = axis_runs(ys, w0.y(), inv, ylast.data(), ycell.data());
        int j0 = 0;
        for (int b = 0; b < nyr; ++b) {
          const int j1 = ylast[static_cast<std::size_t>(b)];
          int i0 = 0;
          for (int a = 0; a < nxr; ++a) {
            const int i1 = xlast[static_cast<std::size_t>(a)];
            const IntensityCell* c =
                map.find(xcell[static_cast<std::size_t>(a)], ycell[static_cast<std::size_t>(b)]);
            if (c == nullptr) {
              miss.add(i0, i1, j0, j1, 1);
            } else {
              const double d = in - c->mean;
              cost.add(i0, i1, j0, j1, std::min(d * d / c->var, clamp));
            }
            i0 = i1 + 1;
          }
          j0 = j1 + 1;
        }
      }

      cost.prefix();
      miss.prefix();
      for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
          const std::size_t s = (k * ny + static_cast<std::size_t>(j)) * nx +
                                static_cast<std::size_t>(i);
          const std::int64_t m = miss.at(i, j);
          out.L[s] = cost.at(i, j) + static_cast<double>(m) * miss_penalty;
          out.matched[s] = static_cast<int>(total - static_cast<std::size_t>(m));
        }
      }
    }
  });
  return out;
}

std::vector<double> softmax_weights(const std::vector<double>& L, double beta) {
  std::vector<double> w(L.size());
  if (L.empty()) return w;
  const double lo = *std::min_element(L.begin(), L.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    w[i] = std::exp(-beta * (L[i] - lo));
    sum += w[i];
  }
  for (auto& x : w) x /= sum;
  return w;
}

double cost_percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

MeanCov weighted_mean_and_covariance(const PoseSampleSet& samples) {
  const std::size_t n = samples.poses.size();
  if (n == 0) throw InvalidArgumentError("weighted_mean_and_covariance: empty sample set");
  if (samples.probs.size() != n)
    throw InvalidArgumentError("weighted_mean_and_covariance: probs/poses size mismatch");

  Vec3 pbar = Vec3::Zero();
  std::size_t best = 0;
  for (std::size_t i = 0; i < n; ++i) {
    pbar += samples.probs[i] * samples.poses[i].p;
    if (samples.probs[i] > samples.probs[best]) best = i;
  }

  Mat3 Rbar = samples.poses[best].R;
  for (int it = 0; it < 5; ++it) {
    Vec3 delta = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i)
      delta += samples.probs[i] * log_so3(Rbar.transpose() * samples.poses[i].R);
    Rbar = Rbar * exp_so3(delta);
    if (delta.norm() < 1e-10) break;
  }

  Mat6 W = Mat6::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    Vec6 u;
    u.head<3>() = samples.poses[i].p - pbar;
    u.tail<3>() = log_so3(Rbar.transpose() * samples.poses[i].R);
    W.noalias() += samples.probs[i] * u * u.transpose();
  }
  const Mat6 Wt = W.transpose();
  W = 0.5 * (W + Wt);
  for (int d = 0; d < 6; ++d) W(d, d) = std::max(W(d, d), kWFloor);

  MeanCov out;
  out.pose = Pose{pbar, Rbar};
  out.W = W;
  return out;
}

namespace {

struct VerticalAssoc {
  std::vector<std::pair<const NdtVoxel*, std::size_t>> hits;
  double cost = 0.0;
};

// Full (unclamped) quadratic residuals: a prior that starts several sigma off
// the ground still sees a gradient. Points off the map pay a fixed charge so
// the optimum cannot slide out of coverage.
constexpr double kVerticalMissCost = 9.0;

void associate_vertical(const Pose& pose, const NdtMap& map, const PointCloud& pts,
                        VerticalAssoc& out) {
  out.hits.clear();
  out.cost = 0.0;
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const Vec3 w = pose.R * pts.points[n] + pose.p;
    const NdtVoxel* v = map.find_point(w);
    if (v == nullptr) {
      out.cost += kVerticalMissCost;
      continue;
    }
    const Vec3 r = w - v->mean;
    out.cost += r.dot(v->info * r);
    out.hits.emplace_back(v, n);
  }
}

// Normal equations over (z, roll, pitch) for the current associations.
void vertical_normal_equations(const Pose& pose, const PointCloud& pts, const VerticalAssoc& assoc,
                               Mat3& H, Vec3& g, double& ssq) {
  H.setZero();
  g.setZero();
  ssq = 0.0;
  for (const auto& [vox, n] : assoc.hits) {
    const Vec3& q = pts.points[n];
    const Vec3 w = pose.R * q + pose.p;
    const Vec3 r = w - vox->mean;
    Mat3 J;
    J.col(0) = Vec3::UnitZ();
    const Mat3 Rq = -pose.R * skew(q);
    J.col(1) = Rq.col(0);
    J.col(2) = Rq.col(1);
    H.noalias() += J.transpose() * vox->info * J;
    g.noalias() += J.transpose() * (vox->info * r);
    ssq += r.dot(vox->info * r);
  }
}

}  // namespace

Pose initial_optimization(const Pose& prior, const NdtMap& map, const PointCloud& z_ndt,
                          Mat3* zrp_cov) {
  if (z_ndt.empty()) throw InvalidArgumentError("initial_optimization: empty cloud");
  constexpr int kMaxIter = 20;
  constexpr double kStepTol = 1e-4;

  Pose pose = prior;
  VerticalAssoc assoc, trial_assoc;
  associate_vertical(pose, map, z_ndt, assoc);
  if (assoc.hits.size() * 10 < z_ndt.size())
    throw InsufficientOverlapError("vertical alignment: under 10% of scan points hit the map");

  Mat3 H;
  Vec3 g;
  double ssq = 0.0;
  double lambda = 1e-4;
  for (int it = 0; it < kMaxIter; ++it) {
    vertical_normal_equations(pose, z_ndt, assoc, H, g, ssq);
    if (assoc.hits.empty()) break;
    bool stepped = false;
    double step_norm = 0.0;
    for (int tries = 0; tries < 8 && !stepped; ++tries) {
      Mat3 A = H;
      A.diagonal() += lambda * H.diagonal();
      A.diagonal().array() += 1e-12;
      const Vec3 d = A.ldlt().solve(-g);
      Pose trial = pose;
      trial.p.z() += d(0);
      trial.R = pose.R * exp_so3(Vec3(d(1), d(2), 0.0));
      associate_vertical(trial, map, z_ndt, trial_assoc);
      if (trial_assoc.cost < assoc.cost) {
        pose = trial;
        std::swap(assoc, trial_assoc);
        lambda = std::max(lambda * 0.1, 1e-9);
        step_norm = d.norm();
        stepped = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!stepped || step_norm < kStepTol) break;
  }

  if (zrp_cov != nullptr) {
    vertical_normal_equations(pose, z_ndt, assoc, H, g, ssq);
    const std::size_t m = assoc.hits.size();
    const double dof = std::max(3.0 * static_cast<double>(m) - 3.0, 1.0);
    const double s2 = m == 0 ? 1.0 : ssq / dof;
    Mat3 Hs = H;
    Hs.diagonal().array() += 1e-9;
    const Mat3 cov = s2 * Hs.inverse();
    *zrp_cov = 0.5 * (cov + cov.transpose());
  }
  return pose;
}

LocalizerEstimate localize(const Pose& prior, const NdtMap& ndt_map,
                           const IntensityMap& intensity_map, const PointCloud& cloud,
                           const LocalizerConfig& cfg, std::uint64_t /*seed*/) {
  validate(cfg);
  if (!cfg.use_ndt && !cfg.use_intensity)
    throw InvalidArgumentError("localize: no likelihood mode enabled");
  if (cloud.empty()) throw InvalidArgumentError("localize: empty scan");

  const PointCloud z_ndt = downsample_voxel(cloud, 0.5, cfg.ndt_points);
  const PointCloud z_int = downsample_grid_2d(cloud, 0.1, cfg.intensity_points);

  Mat3 zrp_cov = Mat3::Identity() * kWFloor;
  const Pose center = initial_optimization(prior, ndt_map, z_ndt, &zrp_cov);

  const double clamp = cfg.mahalanobis_clamp;
  LocalizerEstimate est;
  std::vector<double> costs;
  double pen_ndt = clamp, pen_int = clamp;
  if (cfg.use_ndt) {
    const LikelihoodValue c = ndt_log_likelihood(center, ndt_map, z_ndt, 0.0, clamp, &costs);
    est.ndt_matched = c.matched_fraction();
    est.ndt_degenerate = c.matched == 0;
    if (!est.ndt_degenerate) pen_ndt = cost_percentile(costs, 0.95);
  }
  if (cfg.use_intensity) {
    const LikelihoodValue c =
        intensity_log_likelihood(center, intensity_map, z_int, 0.0, clamp, &costs);
    est.intensity_matched = c.matched_fraction();
    est.intensity_degenerate = c.matched_fraction() < cfg.intensity_min_matched;
    if (!est.intensity_degenerate) pen_int = cost_percentile(costs, 0.95);
  }
  const bool run_ndt = cfg.use_ndt && !est.ndt_degenerate;
  const bool run_int = cfg.use_intensity && !est.intensity_degenerate;
  if (!run_ndt && !run_int)
    throw LocalizationLostError("every enabled likelihood mode is degenerate", 0.0);

  // Per-mode per-point mean cost keeps the 5k-point geometric term and the
  // 30k-point intensity term on one scale before fusion.
  std::vector<double> L(static_cast<std::size_t>(cfg.n_samples()), 0.0);
  if (run_ndt) {
    const GridEval ge = eval_ndt_grid(ndt_map, z_ndt, center, cfg, pen_ndt, clamp);
    for (std::size_t s = 0; s < L.size(); ++s) L[s] += ge.L[s] / std::max(ge.matched[s], 1);
  }
  if (run_int) {
    const GridEval ge = eval_intensity_grid(intensity_map, z_int, center, cfg, pen_int, clamp);
    for (std::size_t s = 0; s < L.size(); ++s) L[s] += ge.L[s] / std::max(ge.matched[s], 1);
  }

  PoseSampleSet set;
  set.poses = sample_poses(center, cfg);
  set.log_likelihoods = std::move(L);
  set.probs = softmax_weights(set.log_likelihoods, cfg.beta);

  const MeanCov mc = weighted_mean_and_covariance(set);
  est.pose = mc.pose;
  est.W = mc.W;
  // The grid holds z, roll, and pitch fixed; their uncertainty comes from
  // the vertical alignment instead of the (floored) sample spread.
  est.W(2, 2) = std::max(zrp_cov(0, 0), kWFloor);
  est.W(3, 3) = std::max(zrp_cov(1, 1), kWFloor);
  est.W(4, 4) = std::max(zrp_cov(2, 2), kWFloor);
  est.W(2, 3) = est.W(3, 2) = zrp_cov(0, 1);
  est.W(2, 4) = est.W(4, 2) = zrp_cov(0, 2);
  est.W(3, 4) = est.W(4, 3) = zrp_cov(1, 2);
  return est;
}

void dump_marginals(const PoseSampleSet& samples, const LocalizerConfig& cfg,
                    const std::filesystem::path& csv_path) {
  if (samples.probs.size() != static_cast<std::size_t>(cfg.n_samples()))
    throw InvalidArgumentError("dump_marginals: sample count does not match config");
  std::vector<double> mx(static_cast<std::size_t>(cfg.nx), 0.0);
  std::vector<double> my(static_cast<std::size_t>(cfg.ny), 0.0);
  std::vector<double> myaw(static_cast<std::size_t>(cfg.nyaw), 0.0);
  for (int k = 0; k < cfg.nyaw; ++k)
    for (int j = 0; j < cfg.ny; ++j)
      for (int i = 0; i < cfg.nx; ++i) {
        const double p = samples.probs[sample_index(cfg, i, j, k)];
        mx[static_cast<std::size_t>(i)] += p;
        my[static_cast<std::size_t>(j)] += p;
        myaw[static_cast<std::size_t>(k)] += p;
      }

  std::ofstream f(csv_path);
  if (!f) throw IoError("dump_marginals: cannot open " + csv_path.string());
  f << "axis,index,offset,prob\n";
  const auto xs = grid_offsets(cfg.range_x, cfg.nx);
  const auto ys = grid_offsets(cfg.range_y, cfg.ny);
  const auto psis = grid_offsets(cfg.range_yaw_deg, cfg.nyaw);
  f.precision(17);
  for (int i = 0; i < cfg.nx; ++i)
    f << "x," << i << ',' << xs[static_cast<std::size_t>(i)] << ','
      << mx[static_cast<std::size_t>(i)] << '\n';
  for (int j = 0; j < cfg.ny; ++j)
    f << "y," << j << ',' << ys[static_cast<std::size_t>(j)] << ','
      << my[static_cast<std::size_t>(j)] << '\n';
  for (int k = 0; k < cfg.nyaw; ++k)
    f << "yaw," << k << ',' << psis[static_cast<std::size_t>(k)] << ','
      << myaw[static_cast<std::size_t>(k)] << '\n';
  if (!f) throw IoError("dump_marginals: write failed for " + csv_path.string());
}

}  // namespace hiloc

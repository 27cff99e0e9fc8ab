#include "hiloc/pointcloud.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hiloc/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "frame files are little-endian; byte swapping is not implemented");

namespace hiloc {

PointCloud transform_cloud(const PointCloud& cloud, const Pose& T) {
  PointCloud out;
  out.points.resize(cloud.size());
  out.intensity = cloud.intensity;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out.points[i] = T.R * cloud.points[i] + T.p;
  }
  return out;
}

void append_cloud(PointCloud& dst, const PointCloud& src) {
  dst.points.insert(dst.points.end(), src.points.begin(), src.points.end());
  dst.intensity.insert(dst.intensity.end(), src.intensity.begin(), src.intensity.end());
}

namespace {

inline std::int64_t cell_of(double v, double inv_cell) {
  return static_cast<std::int64_t>(std::floor(v * inv_cell));
}

struct CellRef {
  std::array<std::int64_t, 3> cell;
  std::size_t point;
  bool operator<(const CellRef& o) const { return cell < o.cell; }
};

PointCloud select_cells(const PointCloud& cloud, std::vector<CellRef>& refs,
                        std::size_t max_points) {
  // First point per cell by scan order, then a stable cell-index order so
  // the strided cap does not depend on container iteration order.
  std::stable_sort(refs.begin(), refs.end(),
                   [](const CellRef& a, const CellRef& b) { return a.cell < b.cell; });
  std::vector<CellRef> unique_cells;
  unique_cells.reserve(refs.size());
  for (const auto& r : refs) {
    if (unique_cells.empty() || unique_cells.back().cell != r.cell) {
      unique_cells.push_back(r);
    } else if (r.point < unique_cells.back().point) {
      unique_cells.back().point = r.point;
    }
  }

  PointCloud out;
  if (max_points == 0 || unique_cells.size() <= max_points) {
    out.reserve(unique_cells.size());
    for (const auto& c : unique_cells) out.push_back(cloud.points[c.point], cloud.intensity[c.point]);
    return out;
  }
  out.reserve(max_points);
  const std::size_t n = unique_cells.size();
  for (std::size_t i = 0; i < max_points; ++i) {
    const std::size_t j = i * n / max_points;
    out.push_back(cloud.points[unique_cells[j].point], cloud.intensity[unique_cells[j].point]);
  }
  return out;
}

}  // namespace

PointCloud downsample_voxel(const PointCloud& cloud, double cell, std::size_t max_points) {
  if (cell <= 0.0) throw InvalidArgumentError("downsample_voxel: cell must be positive");
  const double inv = 1.0 / cell;
  std::vector<CellRef> refs;
  refs.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    refs.push_back({{cell_of(p.x(), inv), cell_of(p.y(), inv), cell_of(p.z(), inv)}, i});
  }
  return select_cells(cloud, refs, max_points);
}

PointCloud downsample_grid_2d(const PointCloud& cloud, double cell, std::size_t max_points) {
  if (cell <= 0.0) throw InvalidArgumentError("downsample_grid_2d: cell must be positive");
  const double inv = 1.0 / cell;
  std::vector<CellRef> refs;
  refs.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    refs.push_back({{cell_of(p.x(), inv), cell_of(p.y(), inv), 0}, i});
  }
  return select_cells(cloud, refs, max_points);
}

PointCloud crop_xy(const PointCloud& cloud, const Vec2& center, double radius) {
  PointCloud out;
  const double r2 = radius * radius;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    const double dx = p.x() - center.x();
    const double dy = p.y() - center.y();
    if (dx * dx + dy * dy <= r2) out.push_back(p, cloud.intensity[i]);
  }
  return out;
}

namespace {
constexpr char kFrameMagic[4] = {'B', 'L', 'P', 'C'};
constexpr std::uint32_t kFrameVersion = 1;
}  // namespace

void save_frame(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(kFrameMagic, 4);
  const std::uint32_t ver = kFrameVersion;
  f.write(reinterpret_cast<const char*>(&ver), 4);
  const std::uint64_t count = cloud.size();
  f.write(reinterpret_cast<const char*>(&count), 8);
  std::vector<double> rec(4);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    rec[0] = cloud.points[i].x();
    rec[1] = cloud.points[i].y();
    rec[2] = cloud.points[i].z();
    rec[3] = cloud.intensity[i];
    f.write(reinterpret_cast<const char*>(rec.data()), 32);
  }
  if (!f) throw IoError("write failed: " + path.string());
}

PointCloud load_frame(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());

  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, kFrameMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic", 0);
  }
  std::uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  if (f.gcount() != 4) throw FormatError(path.string() + ": truncated header", 4);
  if (ver != kFrameVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(ver), 4);
  }
  std::uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 8);
  if (f.gcount() != 8) throw FormatError(path.string() + ": truncated header", 8);

  PointCloud out;
  out.reserve(count);
  std::vector<double> rec(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    f.read(reinterpret_cast<char*>(rec.data()), 32);
    if (f.gcount() != 32) {
      throw FormatError(path.string() + ": truncated point record",
                        16 + i * 32 + static_cast<std::uint64_t>(f.gcount()));
    }
    out.push_back(Vec3(rec[0], rec[1], rec[2]), rec[3]);
  }
  // Trailing bytes mean the count field lies about the payload.
  f.peek();
  if (!f.eof()) {
    throw FormatError(path.string() + ": trailing bytes after point records", 16 + count * 32);
  }
  return out;
}

}  // namespace hiloc

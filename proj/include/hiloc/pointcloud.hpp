#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "hiloc/geometry.hpp"

namespace hiloc {

// Structure-of-arrays keeps the hot likelihood loops cache friendly.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<double> intensity;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  void push_back(const Vec3& p, double i) {
    points.push_back(p);
    intensity.push_back(i);
  }
  void reserve(std::size_t n) {
    points.reserve(n);
    intensity.reserve(n);
  }
};

PointCloud transform_cloud(const PointCloud& cloud, const Pose& T);
void append_cloud(PointCloud& dst, const PointCloud& src);

// Keeps the first point (scan order) of every occupied cubic cell. When the
// number of occupied cells exceeds max_points, cells are sorted by their
// integer index triple and an evenly strided subset is kept, so the result
// depends only on the input and the arguments.
PointCloud downsample_voxel(const PointCloud& cloud, double cell, std::size_t max_points);

// Same policy on xy cells only, for ground texture work.
PointCloud downsample_grid_2d(const PointCloud& cloud, double cell, std::size_t max_points);

// Points whose xy distance to center is at most radius.
PointCloud crop_xy(const PointCloud& cloud, const Vec2& center, double radius);

// Binary frame file: magic "BLPC", u32 version = 1, u64 point count, then
// per point x, y, z, intensity as little-endian f64.
void save_frame(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud load_frame(const std::filesystem::path& path);

}  // namespace hiloc

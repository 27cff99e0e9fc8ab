#pragma once

#include <cstdint>
#include <filesystem>
#include <unordered_map>
#include <vector>

#include "hiloc/geometry.hpp"
#include "hiloc/pointcloud.hpp"

namespace hiloc {

// Packs a signed cell index triple into one key; 21 bits per axis covers
// +-1e6 cells, far beyond any map this handles.
std::uint64_t pack_cell3(std::int64_t ix, std::int64_t iy, std::int64_t iz);
std::uint64_t pack_cell2(std::int64_t ix, std::int64_t iy);

// Open-addressing table from packed cell key to entry index. Built once,
// then read-only; linear probing over a power-of-two table.
class CellTable {
 public:
  void build(const std::vector<std::uint64_t>& keys);
  // Returns the entry index or -1.
  std::int32_t find(std::uint64_t key) const;
  bool empty() const { return mask_ == 0; }

 private:
  std::vector<std::uint64_t> keys_;
  std::vector<std::int32_t> vals_;
  std::uint64_t mask_ = 0;
};

struct NdtVoxel {
  std::int64_t ix = 0, iy = 0, iz = 0;
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Zero();   // population covariance, eigenvalue floored
  Mat3 info = Mat3::Zero();  // inverse of cov, cached
  std::uint64_t count = 0;
};

struct NdtMapConfig {
  double cell = 0.8;            // m
  std::uint64_t min_points = 5; // voxels with fewer points are dropped
  double eig_floor = 1e-3;      // m^2, keeps thin surfaces invertible
};

class NdtMap {
 public:
  explicit NdtMap(const NdtMapConfig& cfg = {}) : cfg_(cfg) {}

  void insert(const PointCloud& world_cloud);
  // Computes floored covariances and their inverses, drops sparse voxels,
  // and freezes the map for lookup. Insertion after this throws.
  void finalize();

  double cell() const { return cfg_.cell; }
  const NdtMapConfig& config() const { return cfg_; }
  bool finalized() const { return finalized_; }
  std::size_t size() const { return voxels_.size(); }
  const std::vector<NdtVoxel>& voxels() const { return voxels_; }

  const NdtVoxel* find(std::int64_t ix, std::int64_t iy, std::int64_t iz) const;
  const NdtVoxel* find_point(const Vec3& p) const;

  // Installs fully formed voxels (e.g. from a map file) and finalizes.
  void adopt(std::vector<NdtVoxel> voxels);

 private:
  struct Accum {
    std::uint64_t n = 0;
    Vec3 mean = Vec3::Zero();
    Mat3 m2 = Mat3::Zero();
  };

  NdtMapConfig cfg_;
  std::unordered_map<std::uint64_t, Accum> accum_;
  std::vector<NdtVoxel> voxels_;  // sorted by (ix, iy, iz)
  CellTable table_;
  bool finalized_ = false;
};

struct IntensityCell {
  std::int64_t ix = 0, iy = 0;
  double mean = 0.0;
  double var = 0.0;  // floored
  std::uint64_t count = 0;
};

struct IntensityMapConfig {
  double cell = 0.125;          // m
  std::uint64_t min_points = 3;
  double var_floor = 4.0;       // intensity units squared
};

class IntensityMap {
 public:
  explicit IntensityMap(const IntensityMapConfig& cfg = {}) : cfg_(cfg) {}

  void insert(const PointCloud& world_cloud);
  void finalize();

  double cell() const { return cfg_.cell; }
  const IntensityMapConfig& config() const { return cfg_; }
  bool finalized() const { return finalized_; }
  std::size_t size() const { return cells_.size(); }
  const std::vector<IntensityCell>& cells() const { return cells_; }

  const IntensityCell* find(std::int64_t ix, std::int64_t iy) const;
  const IntensityCell* find_point(double x, double y) const;

  void adopt(std::vector<IntensityCell> cells);

 private:
  struct Accum {
    std::uint64_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;
  };

  IntensityMapConfig cfg_;
  std::unordered_map<std::uint64_t, Accum> accum_;
  std::vector<IntensityCell> cells_;  // sorted by (ix, iy)
  CellTable table_;
  bool finalized_ = false;
};

// Map file: magic "BLMP", u32 version = 1, u8 kind (0 = ndt, 1 = intensity),
// f64 cell size, u64 entry count, then fixed-width little-endian entries.
void save_ndt_map(const NdtMap& map, const std::filesystem::path& path);
NdtMap load_ndt_map(const std::filesystem::path& path);
void save_intensity_map(const IntensityMap& map, const std::filesystem::path& path);
IntensityMap load_intensity_map(const std::filesystem::path& path);

}  // namespace hiloc

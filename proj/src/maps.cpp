#include "hiloc/maps.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hiloc/errors.hpp"

namespace hiloc {

std::uint64_t pack_cell3(std::int64_t ix, std::int64_t iy, std::int64_t iz) {
  constexpr std::int64_t bias = 1 << 20;
  const std::int64_t x = ix + bias, y = iy + bias, z = iz + bias;
  if ((x | y | z) < 0 || x >= (1 << 21) || y >= (1 << 21) || z >= (1 << 21)) {
    throw InvalidArgumentError("cell index out of packable range");
  }
  return (static_cast<std::uint64_t>(x) << 42) | (static_cast<std::uint64_t>(y) << 21) |
         static_cast<std::uint64_t>(z);
}

std::uint64_t pack_cell2(std::int64_t ix, std::int64_t iy) {
  constexpr std::int64_t bias = 1ll << 30;
  const std::int64_t x = ix + bias, y = iy + bias;
  if ((x | y) < 0 || x >= (1ll << 31) || y >= (1ll << 31)) {
    throw InvalidArgumentError("cell index out of packable range");
  }
  return (static_cast<std::uint64_t>(x) << 31) | static_cast<std::uint64_t>(y);
}

namespace {

constexpr std::uint64_t kEmptyKey = ~std::uint64_t{0};

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::int64_t cell_of(double v, double inv_cell) {
  return static_cast<std::int64_t>(std::floor(v * inv_cell));
}

}  // namespace

void CellTable::build(const std::vector<std::uint64_t>& keys) {
  if (keys.empty()) {
    mask_ = 0;
    keys_.clear();
    vals_.clear();
    return;
  }
  std::size_t cap = 16;
  while (cap < keys.size() * 2) cap <<= 1;
  keys_.assign(cap, kEmptyKey);
  vals_.assign(cap, -1);
  mask_ = cap - 1;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    std::uint64_t slot = mix64(keys[i]) & mask_;
    while (keys_[slot] != kEmptyKey) slot = (slot + 1) & mask_;
    keys_[slot] = keys[i];
    vals_[slot] = static_cast<std::int32_t>(i);
  }
}

std::int32_t CellTable::find(std::uint64_t key) const {
  if (mask_ == 0) return -1;
  std::uint64_t slot = mix64(key) & mask_;
  for (;;) {
    const std::uint64_t k = keys_[slot];
    if (k == key) return vals_[slot];
    if (k == kEmptyKey) return -1;
    slot = (slot + 1) & mask_;
  }
}

// ---------------------------------------------------------------------------
// NdtMap
// ---------------------------------------------------------------------------

void NdtMap::insert(const PointCloud& world_cloud) {
  if (finalized_) throw InvalidArgumentError("NdtMap: insert after finalize");
  const double inv = 1.0 / cfg_.cell;
  for (const Vec3& p : world_cloud.points) {
    const std::uint64_t key =
        pack_cell3(cell_of(p.x(), inv), cell_of(p.y(), inv), cell_of(p.z(), inv));
    Accum& a = accum_[key];
    a.n += 1;
    const Vec3 delta = p - a.mean;
    a.mean += delta / static_cast<double>(a.n);
    a.m2 += delta * (p - a.mean).transpose();
  }
}

void NdtMap::finalize() {
  if (finalized_) return;
  constexpr std::int64_t bias = 1 << 20;
  voxels_.clear();
  voxels_.reserve(accum_.size());
  for (const auto& [key, a] : accum_) {
    if (a.n < cfg_.min_points) continue;
    NdtVoxel v;
    v.ix = static_cast<std::int64_t>(key >> 42) - bias;
    v.iy = static_cast<std::int64_t>((key >> 21) & 0x1fffff) - bias;
    v.iz = static_cast<std::int64_t>(key & 0x1fffff) - bias;
    v.mean = a.mean;
    v.count = a.n;
    const Mat3 cov = 0.5 * (a.m2 + a.m2.transpose()) / static_cast<double>(a.n);
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const Vec3 lam = es.eigenvalues().cwiseMax(cfg_.eig_floor);
    // Exact symmetry so the in-memory matrices match their file form, which
    // stores one triangle only.
    const Mat3 raw_cov = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
    const Mat3 raw_info =
        es.eigenvectors() * lam.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
    v.cov = 0.5 * (raw_cov + raw_cov.transpose());
    v.info = 0.5 * (raw_info + raw_info.transpose());
    voxels_.push_back(std::move(v));
  }
  adopt(std::move(voxels_));
}

const NdtVoxel* NdtMap::find(std::int64_t ix, std::int64_t iy, std::int64_t iz) const {
  if (!finalized_) throw InvalidArgumentError("NdtMap: find before finalize");
  constexpr std::int64_t bias = 1 << 20;
  const std::int64_t x = ix + bias, y = iy + bias, z = iz + bias;
  if ((x | y | z) < 0 || x >= (1 << 21) || y >= (1 << 21) || z >= (1 << 21)) return nullptr;
  const std::int32_t i = table_.find((static_cast<std::uint64_t>(x) << 42) |
                                     (static_cast<std::uint64_t>(y) << 21) |
                                     static_cast<std::uint64_t>(z));
  return i < 0 ? nullptr : &voxels_[static_cast<std::size_t>(i)];
}

const NdtVoxel* NdtMap::find_point(const Vec3& p) const {
  const double inv = 1.0 / cfg_.cell;
  return find(cell_of(p.x(), inv), cell_of(p.y(), inv), cell_of(p.z(), inv));
}

void NdtMap::adopt(std::vector<NdtVoxel> voxels) {
  voxels_ = std::move(voxels);
  accum_.clear();
  std::sort(voxels_.begin(), voxels_.end(), [](const NdtVoxel& a, const NdtVoxel& b) {
    return std::tie(a.ix, a.iy, a.iz) < std::tie(b.ix, b.iy, b.iz);
  });
  std::vector<std::uint64_t> keys;
  keys.reserve(voxels_.size());
  for (const auto& v : voxels_) keys.push_back(pack_cell3(v.ix, v.iy, v.iz));
  table_.build(keys);
  finalized_ = true;
}

// ---------------------------------------------------------------------------
// IntensityMap
// ---------------------------------------------------------------------------

void IntensityMap::insert(const PointCloud& world_cloud) {
  if (finalized_) throw InvalidArgumentError("IntensityMap: insert after finalize");
  const double inv = 1.0 / cfg_.cell;
  for (std::size_t i = 0; i < world_cloud.size(); ++i) {
    const Vec3& p = world_cloud.points[i];
    const std::uint64_t key = pack_cell2(cell_of(p.x(), inv), cell_of(p.y(), inv));
    Accum& a = accum_[key];
    a.n += 1;
    const double x = world_cloud.intensity[i];
    const double delta = x - a.mean;
    a.mean += delta / static_cast<double>(a.n);
    a.m2 += delta * (x - a.mean);
  }
}

void IntensityMap::finalize() {
  if (finalized_) return;
  constexpr std::int64_t bias = 1ll << 30;
  cells_.clear();
  cells_.reserve(accum_.size());
  for (const auto& [key, a] : accum_) {
    if (a.n < cfg_.min_points) continue;
    IntensityCell c;
    c.ix = static_cast<std::int64_t>(key >> 31) - bias;
    c.iy = static_cast<std::int64_t>(key & 0x7fffffff) - bias;
    c.mean = a.mean;
    c.var = std::max(a.m2 / static_cast<double>(a.n), cfg_.var_floor);
    c.count = a.n;
    cells_.push_back(c);
  }
  adopt(std::move(cells_));
}

const IntensityCell* IntensityMap::find(std::int64_t ix, std::int64_t iy) const {
  if (!finalized_) throw InvalidArgumentError("IntensityMap: find before finalize");
  constexpr std::int64_t bias = 1ll << 30;
  const std::int64_t x = ix + bias, y = iy + bias;
  if ((x | y) < 0 || x >= (1ll << 31) || y >= (1ll << 31)) return nullptr;
  const std::int32_t i =
      table_.find((static_cast<std::uint64_t>(x) << 31) | static_cast<std::uint64_t>(y));
  return i < 0 ? nullptr : &cells_[static_cast<std::size_t>(i)];
}

const IntensityCell* IntensityMap::find_point(double x, double y) const {
  const double inv = 1.0 / cfg_.cell;
  return find(cell_of(x, inv), cell_of(y, inv));
}

void IntensityMap::adopt(std::vector<IntensityCell> cells) {
  cells_ = std::move(cells);
  accum_.clear();
  std::sort(cells_.begin(), cells_.end(), [](const IntensityCell& a, const IntensityCell& b) {
    return std::tie(a.ix, a.iy) < std::tie(b.ix, b.iy);
  });
  std::vector<std::uint64_t> keys;
  keys.reserve(cells_.size());
  for (const auto& c : cells_) keys.push_back(pack_cell2(c.ix, c.iy));
  table_.build(keys);
  finalized_ = true;
}

// ---------------------------------------------------------------------------
// Map file IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kMapMagic[4] = {'B', 'L', 'M', 'P'};
constexpr std::uint32_t kMapVersion = 1;

struct MapHeader {
  std::uint8_t kind = 0;
  double cell = 0.0;
  std::uint64_t count = 0;
};

void write_header(std::ofstream& f, std::uint8_t kind, double cell, std::uint64_t count) {
  f.write(kMapMagic, 4);
  const std::uint32_t ver = kMapVersion;
  f.write(reinterpret_cast<const char*>(&ver), 4);
  f.write(reinterpret_cast<const char*>(&kind), 1);
  f.write(reinterpret_cast<const char*>(&cell), 8);
  f.write(reinterpret_cast<const char*>(&count), 8);
}

MapHeader read_header(std::ifstream& f, const std::string& path, std::uint8_t expected_kind) {
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, kMapMagic, 4) != 0) {
    throw FormatError(path + ": bad magic", 0);
  }
  std::uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  if (f.gcount() != 4) throw FormatError(path + ": truncated header", 4);
  if (ver != kMapVersion) throw FormatError(path + ": unsupported version", 4);
  MapHeader h;
  f.read(reinterpret_cast<char*>(&h.kind), 1);
  if (f.gcount() != 1) throw FormatError(path + ": truncated header", 8);
  if (h.kind != expected_kind) {
    throw FormatError(path + ": wrong map kind " + std::to_string(h.kind), 8);
  }
  f.read(reinterpret_cast<char*>(&h.cell), 8);
  if (f.gcount() != 8 || !(h.cell > 0.0) || !std::isfinite(h.cell)) {
    throw FormatError(path + ": bad cell size", 9);
  }
  f.read(reinterpret_cast<char*>(&h.count), 8);
  if (f.gcount() != 8) throw FormatError(path + ": truncated header", 17);
  return h;
}

constexpr std::uint64_t kHeaderSize = 25;

}  // namespace

void save_ndt_map(const NdtMap& map, const std::filesystem::path& path) {
  if (!map.finalized()) throw InvalidArgumentError("save_ndt_map: map not finalized");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  write_header(f, 0, map.cell(), map.size());
  for (const auto& v : map.voxels()) {
    f.write(reinterpret_cast<const char*>(&v.ix), 8);
    f.write(reinterpret_cast<const char*>(&v.iy), 8);
    f.write(reinterpret_cast<const char*>(&v.iz), 8);
    f.write(reinterpret_cast<const char*>(v.mean.data()), 24);
    const double tri[6] = {v.cov(0, 0), v.cov(0, 1), v.cov(0, 2),
                           v.cov(1, 1), v.cov(1, 2), v.cov(2, 2)};
    f.write(reinterpret_cast<const char*>(tri), 48);
    f.write(reinterpret_cast<const char*>(&v.count), 8);
  }
  if (!f) throw IoError("write failed: " + path.string());
}

NdtMap load_ndt_map(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  const MapHeader h = read_header(f, path.string(), 0);

  NdtMapConfig cfg;
  cfg.cell = h.cell;
  NdtMap map(cfg);
  constexpr std::uint64_t rec_size = 104;
  std::vector<NdtVoxel> voxels;
  voxels.reserve(h.count);
  char rec[rec_size];
  for (std::uint64_t i = 0; i < h.count; ++i) {
    f.read(rec, rec_size);
    if (f.gcount() != static_cast<std::streamsize>(rec_size)) {
      throw FormatError(path.string() + ": truncated voxel record",
                        kHeaderSize + i * rec_size + static_cast<std::uint64_t>(f.gcount()));
    }
    NdtVoxel v;
    std::memcpy(&v.ix, rec, 8);
    std::memcpy(&v.iy, rec + 8, 8);
    std::memcpy(&v.iz, rec + 16, 8);
    std::memcpy(v.mean.data(), rec + 24, 24);
    double tri[6];
    std::memcpy(tri, rec + 48, 48);
    v.cov << tri[0], tri[1], tri[2], tri[1], tri[3], tri[4], tri[2], tri[4], tri[5];
    std::memcpy(&v.count, rec + 96, 8);
    if (!v.mean.allFinite() || !v.cov.allFinite()) {
      throw FormatError(path.string() + ": non-finite voxel values", kHeaderSize + i * rec_size);
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(v.cov);
    if (es.eigenvalues().minCoeff() <= 0.0) {
      throw FormatError(path.string() + ": covariance not positive definite",
                        kHeaderSize + i * rec_size);
    }
    v.info = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
             es.eigenvectors().transpose();
    voxels.push_back(std::move(v));
  }
  f.peek();
  if (!f.eof()) {
    throw FormatError(path.string() + ": trailing bytes", kHeaderSize + h.count * rec_size);
  }

  NdtMap out(cfg);
  out.adopt(std::move(voxels));
  return out;
}

void save_intensity_map(const IntensityMap& map, const std::filesystem::path& path) {
  if (!map.finalized()) throw InvalidArgumentError("save_intensity_map: map not finalized");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  write_header(f, 1, map.cell(), map.size());
  for (const auto& c : map.cells()) {
    f.write(reinterpret_cast<const char*>(&c.ix), 8);
    f.write(reinterpret_cast<const char*>(&c.iy), 8);
    f.write(reinterpret_cast<const char*>(&c.mean), 8);
    f.write(reinterpret_cast<const char*>(&c.var), 8);
    f.write(reinterpret_cast<const char*>(&c.count), 8);
  }
  if (!f) throw IoError("write failed: " + path.string());
}

IntensityMap load_intensity_map(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  const MapHeader h = read_header(f, path.string(), 1);

  IntensityMapConfig cfg;
  cfg.cell = h.cell;
  constexpr std::uint64_t rec_size = 40;
  std::vector<IntensityCell> cells;
  cells.reserve(h.count);
  char rec[rec_size];
  for (std::uint64_t i = 0; i < h.count; ++i) {
    f.read(rec, rec_size);
    if (f.gcount() != static_cast<std::streamsize>(rec_size)) {
      throw FormatError(path.string() + ": truncated cell record",
                        kHeaderSize + i * rec_size + static_cast<std::uint64_t>(f.gcount()));
    }
    IntensityCell c;
    std::memcpy(&c.ix, rec, 8);
    std::memcpy(&c.iy, rec + 8, 8);
    std::memcpy(&c.mean, rec + 16, 8);
    std::memcpy(&c.var, rec + 24, 8);
    std::memcpy(&c.count, rec + 32, 8);
    if (!std::isfinite(c.mean) || !(c.var > 0.0) || !std::isfinite(c.var)) {
      throw FormatError(path.string() + ": bad cell statistics", kHeaderSize + i * rec_size);
    }
    cells.push_back(c);
  }
  f.peek();
  if (!f.eof()) {
    throw FormatError(path.string() + ": trailing bytes", kHeaderSize + h.count * rec_size);
  }

  IntensityMap out(cfg);
  out.adopt(std::move(cells));
  return out;
}

}  // namespace hiloc

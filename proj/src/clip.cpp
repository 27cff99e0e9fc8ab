#include "hiloc/clip.hpp"

#include <algorithm>
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>

#include "hiloc/errors.hpp"

namespace hiloc {

namespace {

std::string frame_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05zu.blpc", i);
  return buf;
}

// Minimal strict CSV reader: fixed header, doubles only. Reports the byte
// offset of the offending line on malformed input.
std::vector<std::vector<double>> read_csv(const std::filesystem::path& path,
                                          const std::string& header, std::size_t cols) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string line;
  std::uint64_t offset = 0;
  if (!std::getline(f, line)) throw FormatError(path.string() + ": empty file", 0);
  if (line != header) throw FormatError(path.string() + ": bad header", 0);
  offset += line.size() + 1;

  std::vector<std::vector<double>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    std::vector<double> row;
    row.reserve(cols);
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p < end) {
      double v = 0.0;
      const auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc{}) {
        throw FormatError(path.string() + ": bad number",
                          offset + static_cast<std::uint64_t>(p - line.data()));
      }
      row.push_back(v);
      p = res.ptr;
      if (p < end) {
        if (*p != ',') {
          throw FormatError(path.string() + ": expected comma",
                            offset + static_cast<std::uint64_t>(p - line.data()));
        }
        ++p;
      }
    }
    if (row.size() != cols) {
      throw FormatError(path.string() + ": expected " + std::to_string(cols) + " columns",
                        offset);
    }
    rows.push_back(std::move(row));
    offset += line.size() + 1;
  }
  return rows;
}

void write_csv(const std::filesystem::path& path, const std::string& header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << header << "\n";
  char buf[32];
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", row[i]);
      f << buf << (i + 1 < row.size() ? "," : "\n");
    }
  }
  if (!f) throw IoError("write failed: " + path.string());
}

void check_monotonic(const std::vector<double>& ts, const std::string& what) {
  for (std::size_t i = 1; i < ts.size(); ++i) {
    if (!(ts[i] > ts[i - 1])) {
      throw TimestampError(what + ": timestamps must be strictly increasing at row " +
                           std::to_string(i));
    }
  }
}

}  // namespace

PointCloud Clip::frame(std::size_t i) const {
  if (i >= frame_times.size()) throw InvalidArgumentError("frame index out of range");
  if (!frames.empty()) return frames[i];
  return load_frame(dir / "frames" / frame_name(i));
}

Pose Clip::gt_pose_at(double t) const {
  if (gt.empty()) throw InvalidArgumentError("clip has no ground truth");
  if (t <= gt.front().t) return gt.front().pose;
  if (t >= gt.back().t) return gt.back().pose;
  const auto it = std::lower_bound(gt.begin(), gt.end(), t,
                                   [](const GtSample& s, double v) { return s.t < v; });
  const auto& b = *it;
  const auto& a = *(it - 1);
  const double alpha = (t - a.t) / (b.t - a.t);
  return interpolate(a.pose, b.pose, alpha);
}

Vec3 Clip::gt_velocity_at(double t) const {
  if (gt.empty()) throw InvalidArgumentError("clip has no ground truth");
  if (t <= gt.front().t) return gt.front().velocity;
  if (t >= gt.back().t) return gt.back().velocity;
  const auto it = std::lower_bound(gt.begin(), gt.end(), t,
                                   [](const GtSample& s, double v) { return s.t < v; });
  const auto& b = *it;
  const auto& a = *(it - 1);
  const double alpha = (t - a.t) / (b.t - a.t);
  return (1.0 - alpha) * a.velocity + alpha * b.velocity;
}

void save_clip(const Clip& clip, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");

  {
    std::ofstream f(dir / "manifest.json");
    if (!f) throw IoError("cannot open for writing: " + (dir / "manifest.json").string());
    nlohmann::json m = clip.manifest;
    m["frame_count"] = clip.frame_times.size();
    m["frame_times"] = clip.frame_times;
    f << m.dump(2) << "\n";
  }

  std::vector<std::vector<double>> rows;
  rows.reserve(clip.imu.size());
  for (const auto& s : clip.imu) {
    rows.push_back({s.t, s.accel.x(), s.accel.y(), s.accel.z(), s.gyro.x(), s.gyro.y(), s.gyro.z()});
  }
  write_csv(dir / "imu.csv", "t,ax,ay,az,wx,wy,wz", rows);

  rows.clear();
  for (const auto& s : clip.commands) rows.push_back({s.t, s.steer, s.accel});
  write_csv(dir / "commands.csv", "t,steer_cmd,accel_cmd", rows);

  rows.clear();
  for (const auto& s : clip.gt) {
    const Eigen::Quaterniond q(s.pose.R);
    rows.push_back({s.t, s.pose.p.x(), s.pose.p.y(), s.pose.p.z(), q.w(), q.x(), q.y(), q.z(),
                    s.velocity.x(), s.velocity.y(), s.velocity.z()});
  }
  write_csv(dir / "gt.csv", "t,x,y,z,qw,qx,qy,qz,vx,vy,vz", rows);

  for (std::size_t i = 0; i < clip.frame_times.size(); ++i) {
    save_frame(clip.frame(i), dir / "frames" / frame_name(i));
  }
}

Clip load_clip(const std::filesystem::path& dir) {
  Clip clip;
  clip.dir = dir;

  {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw IoError("cannot open: " + (dir / "manifest.json").string());
    try {
      f >> clip.manifest;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError((dir / "manifest.json").string() + ": " + e.what(), 0);
    }
  }
  if (!clip.manifest.contains("frame_times")) {
    throw FormatError((dir / "manifest.json").string() + ": missing frame_times", 0);
  }
  clip.frame_times = clip.manifest["frame_times"].get<std::vector<double>>();
  check_monotonic(clip.frame_times, "frames");

  for (const auto& row : read_csv(dir / "imu.csv", "t,ax,ay,az,wx,wy,wz", 7)) {
    clip.imu.push_back({row[0], Vec3(row[1], row[2], row[3]), Vec3(row[4], row[5], row[6])});
  }
  for (const auto& row : read_csv(dir / "commands.csv", "t,steer_cmd,accel_cmd", 3)) {
    clip.commands.push_back({row[0], row[1], row[2]});
  }
  for (const auto& row : read_csv(dir / "gt.csv", "t,x,y,z,qw,qx,qy,qz,vx,vy,vz", 11)) {
    GtSample s;
    s.t = row[0];
    s.pose.p = Vec3(row[1], row[2], row[3]);
    s.pose.R = Eigen::Quaterniond(row[4], row[5], row[6], row[7]).normalized().toRotationMatrix();
    s.velocity = Vec3(row[8], row[9], row[10]);
    clip.gt.push_back(s);
  }

  std::vector<double> ts;
  for (const auto& s : clip.imu) ts.push_back(s.t);
  check_monotonic(ts, "imu");
  ts.clear();
  for (const auto& s : clip.gt) ts.push_back(s.t);
  check_monotonic(ts, "gt");

  return clip;
}

}  // namespace hiloc

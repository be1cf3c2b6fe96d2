#pragma once

#include "dpc/filters.hpp"
#include "dpc/types.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace dpc {

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw DataError("truncated file: " + path);
  return v;
}

inline std::ifstream open_in(const std::string& path, bool binary = true) {
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw DataError("cannot open for reading: " + path);
  return is;
}

inline std::ofstream open_out(const std::string& path, bool binary = true) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw DataError("cannot open for writing: " + path);
  return os;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Grids: "DPCG" | u32 version | u32 dims | u32 B | f64 extent | f64 data.
// ---------------------------------------------------------------------------

template <typename T>
void write_grid(const std::string& path, const Grid3<T>& g) {
  auto os = detail::open_out(path);
  os.write("DPCG", 4);
  detail::put<std::uint32_t>(os, 1);
  detail::put<std::uint32_t>(os, 3);
  detail::put<std::uint32_t>(os, std::uint32_t(g.B));
  detail::put<double>(os, g.extent);
  for (Eigen::Index i = 0; i < g.data.size(); ++i) detail::put<double>(os, double(g.data[i]));
}

template <typename T>
void write_grid(const std::string& path, const Grid2<T>& g) {
  auto os = detail::open_out(path);
  os.write("DPCG", 4);
  detail::put<std::uint32_t>(os, 1);
  detail::put<std::uint32_t>(os, 2);
  detail::put<std::uint32_t>(os, std::uint32_t(g.B));
  detail::put<double>(os, g.extent);
  for (Eigen::Index i = 0; i < g.data.size(); ++i) detail::put<double>(os, double(g.data[i]));
}

namespace detail {

inline std::pair<int, double> read_grid_header(std::istream& is, int want_dims,
                                               const std::string& path) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DPCG", 4) != 0)
    throw DataError("not a DPCG grid file: " + path);
  const auto version = get<std::uint32_t>(is, path);
  if (version != 1) throw DataError("unsupported DPCG version in " + path);
  const auto dims = get<std::uint32_t>(is, path);
  if (int(dims) != want_dims)
    throw DataError("grid dims mismatch in " + path + " (file has " +
                    std::to_string(dims) + "D)");
  const auto B = get<std::uint32_t>(is, path);
  if (B < 1 || B > 4096) throw DataError("implausible bandwidth in " + path);
  const double extent = get<double>(is, path);
  return {int(B), extent};
}

}  // namespace detail

inline Grid3<double> read_grid3(const std::string& path) {
  auto is = detail::open_in(path);
  auto [B, extent] = detail::read_grid_header(is, 3, path);
  Grid3<double> g(B, extent);
  for (Eigen::Index i = 0; i < g.data.size(); ++i)
    g.data[i] = detail::get<double>(is, path);
  return g;
}

inline Grid2<double> read_grid2(const std::string& path) {
  auto is = detail::open_in(path);
  auto [B, extent] = detail::read_grid_header(is, 2, path);
  Grid2<double> g(B, extent);
  for (Eigen::Index i = 0; i < g.data.size(); ++i)
    g.data[i] = detail::get<double>(is, path);
  return g;
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit) for quick image interchange; values scaled to the data max.
// ---------------------------------------------------------------------------

template <typename T>
void write_pgm(const std::string& path, const Grid2<T>& g) {
  auto os = detail::open_out(path);
  const int n = g.n();
  os << "P5\n" << n << " " << n << "\n255\n";
  const double mx = std::max(1e-300, double(g.data.maxCoeff()));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double v = std::clamp(double(g(i, j)) / mx, 0.0, 1.0);
      const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
      os.write(reinterpret_cast<const char*>(&b), 1);
    }
}

inline Grid2<double> read_pgm(const std::string& path) {
  auto is = detail::open_in(path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw DataError("not a binary PGM (P5): " + path);
  auto next_int = [&is, &path]() {
    // skip whitespace and # comments
    for (;;) {
      int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
      if (!is) throw DataError("truncated PGM header: " + path);
    }
    long v;
    if (!(is >> v)) throw DataError("bad PGM header: " + path);
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w != h || w < 2 || w % 2 != 0)
    throw DataError("PGM must be square with even side: " + path);
  if (maxval <= 0 || maxval > 255) throw DataError("unsupported PGM maxval: " + path);
  is.get();  // single whitespace after maxval
  Grid2<double> g(int(w / 2), double(w));
  std::vector<unsigned char> row(size_t(w));
  for (long i = 0; i < h; ++i) {
    if (!is.read(reinterpret_cast<char*>(row.data()), w))
      throw DataError("truncated PGM data: " + path);
    for (long j = 0; j < w; ++j) g(int(i), int(j)) = double(row[size_t(j)]) / double(maxval);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Point clouds: plain "x y z" per line.
// ---------------------------------------------------------------------------

inline void write_xyz(const std::string& path, const PointCloud& c) {
  auto os = detail::open_out(path, false);
  os.precision(12);
  for (const auto& p : c.points) os << p.x() << " " << p.y() << " " << p.z() << "\n";
}

inline PointCloud read_xyz(const std::string& path) {
  auto is = detail::open_in(path, false);
  PointCloud c;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double x, y, z;
    if (!(ss >> x >> y >> z))
      throw DataError("bad xyz line " + std::to_string(lineno) + " in " + path);
    c.points.emplace_back(x, y, z);
  }
  if (c.points.empty()) throw EmptyInput("no points in " + path);
  return c;
}

// ---------------------------------------------------------------------------
// FilterStack checkpoints: "DPCW" | u32 version | u32 stage count | per stage
// u32 tensor count | per tensor u32 rank, u32 dims[rank], f32 data.
// ---------------------------------------------------------------------------

inline void write_checkpoint(const std::string& path, const FilterStack& s) {
  auto os = detail::open_out(path);
  os.write("DPCW", 4);
  detail::put<std::uint32_t>(os, 1);
  detail::put<std::uint32_t>(os, 4);
  for (const Extractor* ex : {&s.rs1, &s.rs2, &s.t1, &s.t2}) {
    detail::put<std::uint32_t>(os, std::uint32_t(ex->layers.size()));
    for (const ConvKernel& ker : ex->layers) {
      detail::put<std::uint32_t>(os, std::uint32_t(ker.dims));
      for (int d = 0; d < ker.dims; ++d) detail::put<std::uint32_t>(os, std::uint32_t(ker.k));
      for (Eigen::Index i = 0; i < ker.w.size(); ++i)
        detail::put<float>(os, float(ker.w[i]));
    }
  }
}

inline FilterStack read_checkpoint(const std::string& path) {
  auto is = detail::open_in(path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DPCW", 4) != 0)
    throw DataError("not a DPCW checkpoint: " + path);
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != 1) throw DataError("unsupported DPCW version in " + path);
  const auto nstage = detail::get<std::uint32_t>(is, path);
  if (nstage != 4) throw DataError("checkpoint must hold 4 extractors: " + path);
  FilterStack s;
  for (Extractor* ex : {&s.rs1, &s.rs2, &s.t1, &s.t2}) {
    ex->layers.clear();
    const auto nlayer = detail::get<std::uint32_t>(is, path);
    if (nlayer < 1 || nlayer > 8) throw DataError("implausible layer count: " + path);
    for (std::uint32_t li = 0; li < nlayer; ++li) {
      const auto rank = detail::get<std::uint32_t>(is, path);
      if (rank != 2 && rank != 3) throw DataError("kernel rank must be 2 or 3: " + path);
      int side = -1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        const auto dim = detail::get<std::uint32_t>(is, path);
        if (side == -1) side = int(dim);
        if (int(dim) != side) throw DataError("non-cubic kernel in " + path);
      }
      if (side < 1 || side % 2 == 0 || side > 31)
        throw DataError("implausible kernel side in " + path);
      ConvKernel ker(side, int(rank));
      for (Eigen::Index i = 0; i < ker.w.size(); ++i)
        ker.w[i] = double(detail::get<float>(is, path));
      ex->layers.push_back(std::move(ker));
    }
  }
  s.dims = s.rs1.layers.empty() ? 2 : s.rs1.layers[0].dims;
  return s;
}

// ---------------------------------------------------------------------------
// Manifests and result records.
// ---------------------------------------------------------------------------

struct ManifestRow {
  std::string pair_id, source_path, target_path;
  int dims = 2;
  Pose4 pose2;
  Pose7 pose3;
  std::uint64_t seed = 0;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  auto os = detail::open_out(path, false);
  os.precision(12);
  if (rows.empty()) throw EmptyInput("write_manifest: no rows");
  const int dims = rows.front().dims;
  os << (dims == 2 ? "pair_id,source_path,target_path,tx,ty,theta,mu,seed\n"
                   : "pair_id,source_path,target_path,tx,ty,tz,alpha,beta,gamma,mu,seed\n");
  for (const auto& r : rows) {
    os << r.pair_id << "," << r.source_path << "," << r.target_path << ",";
    if (dims == 2) {
      os << r.pose2.t[0] << "," << r.pose2.t[1] << "," << r.pose2.theta << "," << r.pose2.mu;
    } else {
      os << r.pose3.t[0] << "," << r.pose3.t[1] << "," << r.pose3.t[2] << "," << r.pose3.alpha
         << "," << r.pose3.beta << "," << r.pose3.gamma << "," << r.pose3.mu;
    }
    os << "," << r.seed << "\n";
  }
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  auto is = detail::open_in(path, false);
  std::string header;
  if (!std::getline(is, header)) throw DataError("empty manifest: " + path);
  int dims;
  if (header.find(",tz,") != std::string::npos)
    dims = 3;
  else if (header.find(",theta,") != std::string::npos)
    dims = 2;
  else
    throw DataError("unrecognized manifest header in " + path);
  std::vector<ManifestRow> rows;
  std::string line;
  size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    const size_t want = dims == 2 ? 8 : 11;
    if (f.size() != want)
      throw DataError("manifest line " + std::to_string(lineno) + " in " + path + " has " +
                      std::to_string(f.size()) + " fields, want " + std::to_string(want));
    ManifestRow r;
    r.dims = dims;
    r.pair_id = f[0];
    r.source_path = f[1];
    r.target_path = f[2];
    try {
      if (dims == 2) {
        r.pose2.t = Eigen::Vector2d(std::stod(f[3]), std::stod(f[4]));
        r.pose2.theta = std::stod(f[5]);
        r.pose2.mu = std::stod(f[6]);
        r.seed = std::stoull(f[7]);
      } else {
        r.pose3.t = Eigen::Vector3d(std::stod(f[3]), std::stod(f[4]), std::stod(f[5]));
        r.pose3.alpha = std::stod(f[6]);
        r.pose3.beta = std::stod(f[7]);
        r.pose3.gamma = std::stod(f[8]);
        r.pose3.mu = std::stod(f[9]);
        r.seed = std::stoull(f[10]);
      }
    } catch (const std::exception&) {
      throw DataError("unparseable number on manifest line " + std::to_string(lineno) +
                      " in " + path);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError("manifest has no rows: " + path);
  return rows;
}

// One line per registered pair, mirroring the pose fields plus stage peaks.
inline std::string format_result(const Pose7& p, double peak_r, double peak_mu,
                                 double peak_t) {
  std::ostringstream os;
  os.precision(9);
  os << p.t[0] << " " << p.t[1] << " " << p.t[2] << " " << p.alpha << " " << p.beta << " "
     << p.gamma << " " << p.mu << " " << peak_r << " " << peak_mu << " " << peak_t;
  return os.str();
}

inline std::string format_result(const Pose4& p) {
  std::ostringstream os;
  os.precision(9);
  os << p.t[0] << " " << p.t[1] << " " << p.theta << " " << p.mu;
  return os.str();
}

inline void write_loss_csv(const std::string& path,
                           const std::vector<Eigen::Vector4d>& rows) {
  auto os = detail::open_out(path, false);
  os << "step,loss_total,loss_r,loss_mu,loss_t\n";
  os.precision(9);
  for (size_t i = 0; i < rows.size(); ++i)
    os << i << "," << rows[i][0] << "," << rows[i][1] << "," << rows[i][2] << ","
       << rows[i][3] << "\n";
}

}  // namespace dpc

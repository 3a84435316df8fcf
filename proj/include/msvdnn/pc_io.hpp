#pragma once

// Point-cloud I/O: ASCII PLY parsing/writing, min-max voxelization onto a
// 2^n grid, and deterministic synthetic occupancy data for training and
// benchmarks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "msvdnn/blocks.hpp"
#include "msvdnn/common.hpp"

namespace msvdnn {

// ---------------------------------------------------------------------------
// PointCloud: integer coordinates (x, y, z), each in [0, 2^n). Canonical
// storage is deduplicated and sorted in raster (z, y, x) order.

struct PointCloud {
  int precision_bits = 0;
  std::vector<std::array<int, 3>> points;  // (x, y, z)

  long grid_extent() const { return 1L << precision_bits; }

  void canonicalize() {
    std::sort(points.begin(), points.end(),
              [](const std::array<int, 3>& a, const std::array<int, 3>& b) {
                return std::array{a[2], a[1], a[0]} < std::array{b[2], b[1], b[0]};
              });
    points.erase(std::unique(points.begin(), points.end()), points.end());
  }

  void validate() const {
    require(precision_bits >= 1 && precision_bits <= 30, "PointCloud: precision out of range");
    const long ext = grid_extent();
    for (const auto& p : points)
      for (int c : p)
        require(c >= 0 && c < ext, "PointCloud: coordinate outside the voxel grid");
  }

  bool operator==(const PointCloud& o) const {
    return precision_bits == o.precision_bits && points == o.points;
  }
};

// ---------------------------------------------------------------------------
// ASCII PLY. The only dialect accepted: "format ascii 1.0", a vertex
// element with scalar x, y, z properties (extra scalar properties are
// ignored). A "comment precision_bits <n>" line declares the grid size;
// otherwise the smallest n with 2^n > max coordinate is inferred.

namespace detail {
// Parser-side require: failures are format errors, not internal ones.
inline void require_ply(bool cond, const std::string& msg) {
  if (!cond) throw ParseError(msg);
}
}  // namespace detail

// Raw vertex list of an ASCII PLY: coordinates as read, plus any declared
// precision comment. Integer validation happens in parse_ply; callers that
// quantize real-valued scans use this directly.
struct RawPly {
  std::vector<std::array<double, 3>> points;
  int declared_bits = 0;
};

inline RawPly parse_ply_vertices(const std::string& text) {
  std::istringstream in(text);
  std::string line;

  auto next_line = [&](const char* what) {
    detail::require_ply(static_cast<bool>(std::getline(in, line)), std::string("ply: truncated before ") + what);
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
  };

  next_line("magic");
  detail::require_ply(line == "ply", "ply: missing magic");

  long vertex_count = -1;
  int declared_bits = 0;
  int col_x = -1, col_y = -1, col_z = -1;
  int vertex_columns = 0;
  bool format_seen = false;
  bool in_vertex_element = false;

  for (;;) {
    next_line("end_header");
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "end_header") break;
    if (tok == "comment") {
      std::string key;
      ls >> key;
      if (key == "precision_bits") {
        int n = 0;
        if (ls >> n && n >= 1 && n <= 30) declared_bits = n;
      }
      continue;
    }
    if (tok == "format") {
      std::string kind, version;
      ls >> kind >> version;
      detail::require_ply(kind == "ascii", "ply: only ASCII format is supported");
      format_seen = true;
      continue;
    }
    if (tok == "element") {
      std::string name;
      long count = 0;
      ls >> name >> count;
      if (name == "vertex") {
        detail::require_ply(vertex_count < 0, "ply: duplicate vertex element");
        vertex_count = count;
        in_vertex_element = true;
      } else {
        in_vertex_element = false;
      }
      continue;
    }
    if (tok == "property") {
      if (!in_vertex_element) continue;
      std::string type, name;
      ls >> type >> name;
      detail::require_ply(type != "list", "ply: list properties are not supported on vertices");
      if (name == "x") col_x = vertex_columns;
      if (name == "y") col_y = vertex_columns;
      if (name == "z") col_z = vertex_columns;
      ++vertex_columns;
      continue;
    }
    throw ParseError("ply: unexpected header line: " + line);
  }
  detail::require_ply(format_seen, "ply: missing format line");
  detail::require_ply(vertex_count >= 0, "ply: missing vertex element");
  detail::require_ply(col_x >= 0 && col_y >= 0 && col_z >= 0, "ply: vertex needs x, y, z properties");

  RawPly raw;
  raw.declared_bits = declared_bits;
  raw.points.reserve(static_cast<std::size_t>(vertex_count));
  for (long i = 0; i < vertex_count; ++i) {
    next_line("vertex data");
    std::istringstream ls(line);
    std::array<double, 3> val{};
    double field = 0.0;
    for (int c = 0; c < vertex_columns; ++c) {
      detail::require_ply(static_cast<bool>(ls >> field), "ply: short vertex line");
      if (c == col_x) val[0] = field;
      if (c == col_y) val[1] = field;
      if (c == col_z) val[2] = field;
    }
    for (int c = 0; c < 3; ++c)
      detail::require_ply(std::isfinite(val[c]), "ply: non-finite coordinate");
    raw.points.push_back(val);
  }
  return raw;
}

inline PointCloud parse_ply(const std::string& text, int precision_override = 0) {
  const RawPly raw = parse_ply_vertices(text);
  PointCloud pc;
  pc.points.reserve(raw.points.size());
  long max_coord = 0;
  for (const auto& val : raw.points) {
    std::array<int, 3> p{};
    for (int c = 0; c < 3; ++c) {
      detail::require_ply(val[c] >= 0.0, "ply: negative coordinate; voxelize the cloud first");
      detail::require_ply(val[c] <= static_cast<double>(1L << 30), "ply: coordinate exceeds 2^30");
      const double r = std::floor(val[c] + 0.5);
      detail::require_ply(std::abs(val[c] - r) <= 1e-9, "ply: non-integer coordinate; voxelize the cloud first");
      p[c] = static_cast<int>(r);
      max_coord = std::max(max_coord, static_cast<long>(p[c]));
    }
    pc.points.push_back(p);
  }

  int n = precision_override > 0 ? precision_override : raw.declared_bits;
  if (n == 0) {
    n = 1;
    while ((1L << n) <= max_coord) ++n;
  }
  pc.precision_bits = n;
  pc.canonicalize();
  pc.validate();
  detail::require_ply(!pc.points.empty(), "ply: no vertices");
  return pc;
}

inline std::string write_ply(const PointCloud& pc) {
  pc.validate();
  PointCloud sorted = pc;
  sorted.canonicalize();
  std::ostringstream out;
  out << "ply\n"
      << "format ascii 1.0\n"
      << "comment precision_bits " << pc.precision_bits << "\n"
      << "element vertex " << sorted.points.size() << "\n"
      << "property int x\nproperty int y\nproperty int z\n"
      << "end_header\n";
  for (const auto& p : sorted.points) out << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Voxelization: per-axis min-max normalization onto [0, 2^n - 1], rounded
// half-up, deduplicated. An axis with zero extent collapses to 0.

inline PointCloud voxelize(const std::vector<std::array<double, 3>>& points, int n) {
  require(n >= 1 && n <= 16, "voxelize: precision must be in [1, 16]");
  require(!points.empty(), "voxelize: empty input");
  std::array<double, 3> lo{}, hi{};
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (const auto& p : points)
    for (int c = 0; c < 3; ++c) {
      require(std::isfinite(p[c]), "voxelize: non-finite coordinate");
      lo[c] = std::min(lo[c], p[c]);
      hi[c] = std::max(hi[c], p[c]);
    }
  const double top = static_cast<double>((1 << n) - 1);
  std::array<double, 3> scale{};
  for (int c = 0; c < 3; ++c) {
    const double extent = hi[c] - lo[c];
    scale[c] = extent > 0.0 ? top / extent : 0.0;
  }
  PointCloud pc;
  pc.precision_bits = n;
  pc.points.reserve(points.size());
  for (const auto& p : points) {
    std::array<int, 3> q{};
    for (int c = 0; c < 3; ++c)
      q[c] = static_cast<int>(std::floor((p[c] - lo[c]) * scale[c] + 0.5));
    pc.points.push_back(q);
  }
  pc.canonicalize();
  pc.validate();
  return pc;
}

// ---------------------------------------------------------------------------
// Synthetic occupancy shapes. A SynthSpec pins every free choice, so equal
// specs generate bit-identical data.

struct SynthSpec {
  enum class Kind { Plane, SphereShell, BoxShell, Union };

  Kind kind = Kind::Plane;
  int edge = 64;                // block edge for synth_blocks
  int precision_bits = 9;       // grid for synth_cloud
  int count = 1;                // number of blocks
  std::uint64_t seed = 0;
  // Plane controls; -1 randomizes per block (axis-aligned or oblique).
  int plane_axis = -1;          // 0 = z, 1 = y, 2 = x
  int plane_offset = -1;
  // Shell controls; negative radius randomizes per block.
  double shell_radius = -1.0;
  double thickness = 1.0;
};

inline SynthSpec::Kind parse_kind(const std::string& s) {
  if (s == "plane") return SynthSpec::Kind::Plane;
  if (s == "sphere-shell" || s == "sphere") return SynthSpec::Kind::SphereShell;
  if (s == "box-shell" || s == "box") return SynthSpec::Kind::BoxShell;
  if (s == "union") return SynthSpec::Kind::Union;
  throw ParseError("synth: unknown shape kind: " + s);
}

// Flat key=value lines; '#' starts a comment.
inline SynthSpec parse_synth_config(const std::string& text) {
  SynthSpec spec;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    require(eq != std::string::npos, "synth config: expected key=value, got: " + line);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "kind") spec.kind = parse_kind(val);
    else if (key == "edge") spec.edge = std::stoi(val);
    else if (key == "precision_bits") spec.precision_bits = std::stoi(val);
    else if (key == "count") spec.count = std::stoi(val);
    else if (key == "seed") spec.seed = std::stoull(val);
    else if (key == "plane_axis") spec.plane_axis = std::stoi(val);
    else if (key == "plane_offset") spec.plane_offset = std::stoi(val);
    else if (key == "shell_radius") spec.shell_radius = std::stod(val);
    else if (key == "thickness") spec.thickness = std::stod(val);
    else throw ParseError("synth config: unknown key: " + key);
  }
  return spec;
}

namespace detail {

// Fills one block with the spec's shape; per-block randomness comes from rng.
inline void fill_shape(VoxelBlock& b, const SynthSpec& spec, SynthSpec::Kind kind, Rng& rng) {
  const int e = b.edge;
  const double half = spec.thickness * 0.5;
  switch (kind) {
    case SynthSpec::Kind::Plane: {
      if (spec.plane_axis >= 0) {
        const int axis = spec.plane_axis;
        const int off = spec.plane_offset >= 0 ? spec.plane_offset
                                               : static_cast<int>(rng.uniform_int(0, e - 1));
        require(axis <= 2 && off < e, "synth: plane outside the block");
        for (int z = 0; z < e; ++z)
          for (int y = 0; y < e; ++y)
            for (int x = 0; x < e; ++x) {
              const int c = axis == 0 ? z : (axis == 1 ? y : x);
              if (c == off) b.set(z, y, x, 1);
            }
      } else {
        // Oblique slab |n.p - d| <= half thickness, random unit normal
        // through a random interior point.
        double nx = 0, ny = 0, nz = 0, len = 0;
        do {
          nz = rng.normal();
          ny = rng.normal();
          nx = rng.normal();
          len = std::sqrt(nz * nz + ny * ny + nx * nx);
        } while (len < 1e-6);
        nz /= len, ny /= len, nx /= len;
        const double pz = rng.uniform() * e, py = rng.uniform() * e, px = rng.uniform() * e;
        const double d = nz * pz + ny * py + nx * px;
        for (int z = 0; z < e; ++z)
          for (int y = 0; y < e; ++y)
            for (int x = 0; x < e; ++x)
              if (std::abs(nz * (z + 0.5) + ny * (y + 0.5) + nx * (x + 0.5) - d) <= half)
                b.set(z, y, x, 1);
      }
      break;
    }
    case SynthSpec::Kind::SphereShell: {
      const double r = spec.shell_radius >= 0.0
                           ? spec.shell_radius
                           : e / 8.0 + rng.uniform() * (e * 0.375 - 1.0);
      const double cz = spec.shell_radius >= 0.0 ? e / 2 : e * (0.3 + 0.4 * rng.uniform());
      const double cy = spec.shell_radius >= 0.0 ? e / 2 : e * (0.3 + 0.4 * rng.uniform());
      const double cx = spec.shell_radius >= 0.0 ? e / 2 : e * (0.3 + 0.4 * rng.uniform());
      for (int z = 0; z < e; ++z)
        for (int y = 0; y < e; ++y)
          for (int x = 0; x < e; ++x) {
            const double dist = std::sqrt((z - cz) * (z - cz) + (y - cy) * (y - cy) +
                                          (x - cx) * (x - cx));
            if (std::abs(dist - r) < std::max(half, 0.5)) b.set(z, y, x, 1);
          }
      break;
    }
    case SynthSpec::Kind::BoxShell: {
      const int margin = spec.shell_radius >= 0.0
                             ? std::max(0, e / 2 - 1 - static_cast<int>(spec.shell_radius))
                             : static_cast<int>(rng.uniform_int(1, std::max(1, e / 4)));
      const int lo = margin, hi = e - 1 - margin;
      require(lo <= hi, "synth: box margin leaves no volume");
      for (int z = lo; z <= hi; ++z)
        for (int y = lo; y <= hi; ++y)
          for (int x = lo; x <= hi; ++x) {
            const bool surface = z == lo || z == hi || y == lo || y == hi || x == lo || x == hi;
            if (surface) b.set(z, y, x, 1);
          }
      break;
    }
    case SynthSpec::Kind::Union: {
      fill_shape(b, spec, SynthSpec::Kind::Plane, rng);
      fill_shape(b, spec, SynthSpec::Kind::SphereShell, rng);
      break;
    }
  }
}

}  // namespace detail

inline std::vector<VoxelBlock> synth_blocks(const SynthSpec& spec) {
  require(spec.count >= 1, "synth: count must be positive");
  Rng rng(spec.seed);
  std::vector<VoxelBlock> blocks;
  blocks.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) {
    VoxelBlock b(spec.edge);
    detail::fill_shape(b, spec, spec.kind, rng);
    for (int attempt = 0; b.count_occupied() == 0; ++attempt) {
      require(attempt < 16, "synth: shape parameters keep producing empty blocks");
      std::fill(b.v.begin(), b.v.end(), 0);
      detail::fill_shape(b, spec, spec.kind, rng);  // jittered by rng advance
    }
    blocks.push_back(std::move(b));
  }
  return blocks;
}

inline double occupancy_fraction(const VoxelBlock& b) {
  return static_cast<double>(b.count_occupied()) / static_cast<double>(b.v.size());
}

// A whole synthetic cloud on the 2^n grid: a large shell (plus an oblique
// slab for Union/Plane kinds) guaranteed non-empty and deterministic.
inline PointCloud synth_cloud(const SynthSpec& spec) {
  const int n = spec.precision_bits;
  require(n >= 2 && n <= 12, "synth_cloud: precision must be in [2, 12]");
  Rng rng(spec.seed);
  const long e = 1L << n;
  PointCloud pc;
  pc.precision_bits = n;

  const double cz = e * (0.4 + 0.2 * rng.uniform());
  const double cy = e * (0.4 + 0.2 * rng.uniform());
  const double cx = e * (0.4 + 0.2 * rng.uniform());
  const double r = spec.shell_radius > 0.0 ? spec.shell_radius : e * (0.25 + 0.12 * rng.uniform());
  const double half = std::max(spec.thickness * 0.5, 0.5);

  const bool want_shell =
      spec.kind == SynthSpec::Kind::SphereShell || spec.kind == SynthSpec::Kind::Union ||
      spec.kind == SynthSpec::Kind::BoxShell;
  const bool want_plane = spec.kind == SynthSpec::Kind::Plane || spec.kind == SynthSpec::Kind::Union;

  double nz = 0, ny = 0, nx = 0, d = 0;
  if (want_plane) {
    double len = 0;
    do {
      nz = rng.normal(), ny = rng.normal(), nx = rng.normal();
      len = std::sqrt(nz * nz + ny * ny + nx * nx);
    } while (len < 1e-6);
    nz /= len, ny /= len, nx /= len;
    d = nz * cz + ny * cy + nx * cx;
  }

  for (long z = 0; z < e; ++z)
    for (long y = 0; y < e; ++y)
      for (long x = 0; x < e; ++x) {
        bool on = false;
        if (want_shell) {
          const double dist =
              std::sqrt((z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx));
          on = std::abs(dist - r) < half;
        }
        if (!on && want_plane) {
          const double dz = z + 0.5 - cz, dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          on = std::abs(nz * (z + 0.5) + ny * (y + 0.5) + nx * (x + 0.5) - d) <= half &&
               dz * dz + dy * dy + dx * dx <= r * r * 2.25;
        }
        if (on)
          pc.points.push_back({static_cast<int>(x), static_cast<int>(y), static_cast<int>(z)});
      }
  pc.canonicalize();
  pc.validate();
  require(!pc.points.empty(), "synth_cloud: empty cloud");
  return pc;
}

}  // namespace msvdnn

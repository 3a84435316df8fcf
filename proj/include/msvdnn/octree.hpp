#pragma once

// High-level octree: splits an n-bit cloud into an (n-6)-level octree of
// child-occupancy bytes plus dense 64^3 leaf blocks, and serializes the
// octree as raw breadth-first bytes.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <map>
#include <vector>

#include "msvdnn/blocks.hpp"
#include "msvdnn/common.hpp"
#include "msvdnn/pc_io.hpp"

namespace msvdnn {

constexpr int kBlockEdge = 64;
constexpr int kBlockBits = 6;  // log2(kBlockEdge)

struct HighLevelOctree {
  int precision_bits = 0;  // n; depth is max(n - 6, 0)
  // levels[k] holds the 8-bit child-occupancy bytes of level k in
  // breadth-first order; bit j addresses octant j = dz*4 + dy*2 + dx.
  std::vector<std::vector<std::uint8_t>> levels;

  int depth() const { return static_cast<int>(levels.size()); }

  bool operator==(const HighLevelOctree& o) const {
    return precision_bits == o.precision_bits && levels == o.levels;
  }
};

struct BlockEntry {
  std::array<int, 3> origin{};  // voxel offset (x, y, z), each a multiple of 64
  VoxelBlock block;
};

using BlockSet = std::vector<BlockEntry>;

namespace detail {

// Raster comparison of (x, y, z) origins: scan order is (z, y, x).
inline bool raster_less(const std::array<int, 3>& a, const std::array<int, 3>& b) {
  return std::array{a[2], a[1], a[0]} < std::array{b[2], b[1], b[0]};
}

// Breadth-first node coordinates per level, children visited in octant
// order, given the set of occupied leaf cells at the deepest level.
// Returns one ordered list per level from root (level 0, grid 1) down to
// the leaf grid (level depth); the byte pyramid is filled along the way.
inline std::vector<std::vector<std::array<int, 3>>> walk_levels(
    const std::vector<std::array<int, 3>>& leaf_cells, int depth,
    std::vector<std::vector<std::uint8_t>>* bytes_out) {
  // Occupancy sets per level, leaf upward. Cells are (x, y, z) grid coords.
  std::vector<std::vector<std::array<int, 3>>> occupied(depth + 1);
  occupied[depth] = leaf_cells;
  std::sort(occupied[depth].begin(), occupied[depth].end());
  occupied[depth].erase(std::unique(occupied[depth].begin(), occupied[depth].end()),
                        occupied[depth].end());
  for (int k = depth - 1; k >= 0; --k) {
    occupied[k].reserve(occupied[k + 1].size());
    for (const auto& c : occupied[k + 1]) occupied[k].push_back({c[0] / 2, c[1] / 2, c[2] / 2});
    std::sort(occupied[k].begin(), occupied[k].end());
    occupied[k].erase(std::unique(occupied[k].begin(), occupied[k].end()), occupied[k].end());
  }

  std::vector<std::vector<std::array<int, 3>>> ordered(depth + 1);
  ordered[0] = {{0, 0, 0}};
  if (bytes_out) bytes_out->assign(depth, {});
  for (int k = 0; k < depth; ++k) {
    ordered[k + 1].reserve(occupied[k + 1].size());
    for (const auto& c : ordered[k]) {
      std::uint8_t byte = 0;
      for (int j = 0; j < 8; ++j) {
        const int dz = (j >> 2) & 1, dy = (j >> 1) & 1, dx = j & 1;
        const std::array<int, 3> child{2 * c[0] + dx, 2 * c[1] + dy, 2 * c[2] + dz};
        if (std::binary_search(occupied[k + 1].begin(), occupied[k + 1].end(), child)) {
          byte |= static_cast<std::uint8_t>(1u << j);
          ordered[k + 1].push_back(child);
        }
      }
      if (bytes_out) (*bytes_out)[k].push_back(byte);
    }
  }
  return ordered;
}

}  // namespace detail

// Leaf-block voxel origins (x, y, z) in raster order of the block grid —
// the canonical block order shared by encoder and decoder.
inline std::vector<std::array<int, 3>> leaf_origins_raster(const HighLevelOctree& tree) {
  if (tree.depth() == 0) return {{0, 0, 0}};
  // Recover the leaf cells by walking the stored bytes breadth-first.
  std::vector<std::array<int, 3>> cells = {{0, 0, 0}};
  for (const auto& level : tree.levels) {
    require(level.size() == cells.size(), "octree: level size inconsistent with parents");
    std::vector<std::array<int, 3>> next;
    for (std::size_t i = 0; i < level.size(); ++i) {
      require(level[i] != 0, "octree: empty node byte");
      for (int j = 0; j < 8; ++j)
        if (level[i] & (1u << j)) {
          const int dz = (j >> 2) & 1, dy = (j >> 1) & 1, dx = j & 1;
          next.push_back({2 * cells[i][0] + dx, 2 * cells[i][1] + dy, 2 * cells[i][2] + dz});
        }
    }
    cells = std::move(next);
  }
  std::sort(cells.begin(), cells.end(), detail::raster_less);
  for (auto& c : cells) c = {c[0] * kBlockEdge, c[1] * kBlockEdge, c[2] * kBlockEdge};
  return cells;
}

inline std::pair<HighLevelOctree, BlockSet> partition(const PointCloud& pc) {
  pc.validate();
  require(!pc.points.empty(), "partition: empty cloud");
  const int n = pc.precision_bits;
  const int depth = std::max(n - kBlockBits, 0);

  HighLevelOctree tree;
  tree.precision_bits = n;

  // Group points by their 64^3 cell.
  std::map<std::array<int, 3>, std::vector<std::array<int, 3>>> cells;  // (x,y,z) cell
  for (const auto& p : pc.points)
    cells[{p[0] >> kBlockBits, p[1] >> kBlockBits, p[2] >> kBlockBits}].push_back(p);

  if (depth > 0) {
    std::vector<std::array<int, 3>> leaf_cells;
    leaf_cells.reserve(cells.size());
    for (const auto& [c, pts] : cells) leaf_cells.push_back(c);
    detail::walk_levels(leaf_cells, depth, &tree.levels);
  }

  // Blocks in raster order of their origins.
  std::vector<std::array<int, 3>> ordered_cells;
  ordered_cells.reserve(cells.size());
  for (const auto& [c, pts] : cells) ordered_cells.push_back(c);
  std::sort(ordered_cells.begin(), ordered_cells.end(), detail::raster_less);

  BlockSet blocks;
  blocks.reserve(ordered_cells.size());
  for (const auto& c : ordered_cells) {
    BlockEntry e;
    e.origin = {c[0] * kBlockEdge, c[1] * kBlockEdge, c[2] * kBlockEdge};
    e.block = VoxelBlock(kBlockEdge);
    for (const auto& p : cells[c])
      e.block.set(p[2] - e.origin[2], p[1] - e.origin[1], p[0] - e.origin[0], 1);
    blocks.push_back(std::move(e));
  }
  return {std::move(tree), std::move(blocks)};
}

inline PointCloud reassemble(const HighLevelOctree& tree, const BlockSet& blocks) {
  const auto origins = leaf_origins_raster(tree);
  require(origins.size() == blocks.size(), "reassemble: leaf count mismatch");
  PointCloud pc;
  pc.precision_bits = tree.precision_bits;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    require(blocks[i].origin == origins[i], "reassemble: block origin does not match octree leaf");
    const VoxelBlock& b = blocks[i].block;
    require(b.edge == kBlockEdge, "reassemble: block edge must be 64");
    for (int z = 0; z < b.edge; ++z)
      for (int y = 0; y < b.edge; ++y)
        for (int x = 0; x < b.edge; ++x)
          if (b.at(z, y, x))
            pc.points.push_back(
                {blocks[i].origin[0] + x, blocks[i].origin[1] + y, blocks[i].origin[2] + z});
  }
  pc.canonicalize();
  pc.validate();
  return pc;
}

inline std::vector<std::uint8_t> serialize_octree(const HighLevelOctree& tree) {
  std::vector<std::uint8_t> out;
  for (const auto& level : tree.levels) out.insert(out.end(), level.begin(), level.end());
  return out;
}

inline HighLevelOctree deserialize_octree(const std::vector<std::uint8_t>& bytes, int n) {
  HighLevelOctree tree;
  tree.precision_bits = n;
  const int depth = std::max(n - kBlockBits, 0);
  if (depth == 0) {
    require(bytes.empty(), "octree: excess bytes for a depthless tree");
    return tree;
  }
  tree.levels.assign(depth, {});
  std::size_t pos = 0;
  std::size_t expect = 1;
  for (int k = 0; k < depth; ++k) {
    require(pos + expect <= bytes.size(), "octree: truncated stream");
    std::size_t children = 0;
    for (std::size_t i = 0; i < expect; ++i) {
      const std::uint8_t byte = bytes[pos + i];
      require(byte != 0, "octree: zero byte where children were promised");
      children += std::popcount(byte);
    }
    tree.levels[k].assign(bytes.begin() + pos, bytes.begin() + pos + expect);
    pos += expect;
    expect = children;
  }
  require(pos == bytes.size(), "octree: trailing bytes after the last level");
  return tree;
}

}  // namespace msvdnn

#pragma once

// Dense-block geometry: cubic occupancy blocks, the 2x2x2 OR-pool pyramid,
// the 8-corner group partition, and feature-map patch split/merge.

#include <array>
#include <cstdint>
#include <vector>

#include "msvdnn/common.hpp"
#include "msvdnn/tensor.hpp"

namespace msvdnn {

// ---------------------------------------------------------------------------
// VoxelBlock: edge^3 binary occupancy in raster (z, y, x) order.

struct VoxelBlock {
  int edge = 0;
  std::vector<std::uint8_t> v;

  VoxelBlock() = default;
  explicit VoxelBlock(int e) : edge(e) {
    require(e >= 2 && e <= 64 && (e & (e - 1)) == 0,
            "VoxelBlock: edge must be a power of two in [2, 64]");
    v.assign(static_cast<std::size_t>(e) * e * e, 0);
  }

  std::uint8_t at(int z, int y, int x) const {
    return v[(static_cast<std::size_t>(z) * edge + y) * edge + x];
  }
  void set(int z, int y, int x, std::uint8_t bit) {
    v[(static_cast<std::size_t>(z) * edge + y) * edge + x] = bit;
  }

  long count_occupied() const {
    long n = 0;
    for (std::uint8_t b : v) n += b;
    return n;
  }

  std::array<int, 3> dims() const { return {edge, edge, edge}; }

  // Single-channel float tensor view for model input.
  Tensor to_tensor() const {
    Tensor t({1, edge, edge, edge});
    for (std::size_t i = 0; i < v.size(); ++i) t.v[i] = v[i];
    return t;
  }

  bool operator==(const VoxelBlock& o) const { return edge == o.edge && v == o.v; }
};

// ---------------------------------------------------------------------------
// 2x2x2 OR-pool (binary max-pool): output voxel = OR of its 8 children.

inline VoxelBlock max_pool_down(const VoxelBlock& b) {
  require(b.edge >= 2 && b.edge % 2 == 0, "max_pool_down: edge must be even");
  VoxelBlock out(b.edge / 2);
  for (int z = 0; z < out.edge; ++z)
    for (int y = 0; y < out.edge; ++y)
      for (int x = 0; x < out.edge; ++x) {
        std::uint8_t bit = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              bit |= b.at(2 * z + dz, 2 * y + dy, 2 * x + dx);
        out.set(z, y, x, bit);
      }
  return out;
}

// Pyramid [base, ..., full]; level k has edge base * 2^k, level 0 is the
// base and the last level is the input block itself.
inline std::vector<VoxelBlock> build_pyramid(const VoxelBlock& b, int num_scales) {
  require(num_scales >= 0, "build_pyramid: negative scale count");
  const int base = b.edge >> num_scales;
  require(base >= 2 && (base << num_scales) == b.edge,
          "build_pyramid: edge must be base * 2^num_scales with base >= 2");
  std::vector<VoxelBlock> levels(num_scales + 1);
  levels[num_scales] = b;
  for (int k = num_scales - 1; k >= 0; --k) levels[k] = max_pool_down(levels[k + 1]);
  return levels;
}

// ---------------------------------------------------------------------------
// Corner groups. Group g covers the stride-2 lattice anchored at corner
// offset (dz, dy, dx), with g = 1 + dz*4 + dy*2 + dx.

inline std::array<int, 3> group_offset(int g) {
  require(g >= 1 && g <= 8, "group_offset: group id out of range");
  const int c = g - 1;
  return {(c >> 2) & 1, (c >> 1) & 1, c & 1};
}

struct GroupVolume {
  int g = 0;
  std::array<int, 3> dims{};  // (D, H, W) of the group volume itself
  std::vector<std::uint8_t> v;

  std::uint8_t at(int z, int y, int x) const {
    return v[(static_cast<std::size_t>(z) * dims[1] + y) * dims[2] + x];
  }

  Tensor to_tensor() const {
    Tensor t({1, dims[0], dims[1], dims[2]});
    for (std::size_t i = 0; i < v.size(); ++i) t.v[i] = v[i];
    return t;
  }
};

inline GroupVolume extract_group(const std::uint8_t* vol, const std::array<int, 3>& dims,
                                 int g) {
  require(dims[0] % 2 == 0 && dims[1] % 2 == 0 && dims[2] % 2 == 0,
          "extract_group: volume dims must be even");
  const auto [dz, dy, dx] = group_offset(g);
  GroupVolume gv;
  gv.g = g;
  gv.dims = {dims[0] / 2, dims[1] / 2, dims[2] / 2};
  gv.v.resize(static_cast<std::size_t>(gv.dims[0]) * gv.dims[1] * gv.dims[2]);
  std::size_t o = 0;
  for (int z = 0; z < gv.dims[0]; ++z)
    for (int y = 0; y < gv.dims[1]; ++y)
      for (int x = 0; x < gv.dims[2]; ++x)
        gv.v[o++] = vol[(static_cast<std::size_t>(2 * z + dz) * dims[1] + (2 * y + dy)) *
                            dims[2] +
                        (2 * x + dx)];
  return gv;
}

inline GroupVolume extract_group(const VoxelBlock& b, int g) {
  return extract_group(b.v.data(), b.dims(), g);
}

inline void scatter_group(const GroupVolume& gv, std::uint8_t* vol,
                          const std::array<int, 3>& dims) {
  require(dims[0] == 2 * gv.dims[0] && dims[1] == 2 * gv.dims[1] && dims[2] == 2 * gv.dims[2],
          "scatter_group: volume dims must be twice the group dims");
  const auto [dz, dy, dx] = group_offset(gv.g);
  std::size_t o = 0;
  for (int z = 0; z < gv.dims[0]; ++z)
    for (int y = 0; y < gv.dims[1]; ++y)
      for (int x = 0; x < gv.dims[2]; ++x)
        vol[(static_cast<std::size_t>(2 * z + dz) * dims[1] + (2 * y + dy)) * dims[2] +
            (2 * x + dx)] = gv.v[o++];
}

inline void scatter_group(const GroupVolume& gv, VoxelBlock& b) {
  scatter_group(gv, b.v.data(), b.dims());
}

// ---------------------------------------------------------------------------
// Patch split/merge on (C, D, H, W) feature maps: contiguous octants along
// each spatial axis, channels untouched. Patches are returned in raster
// order of their (pz, py, px) coordinates.

inline std::vector<Tensor> split_patches(const Tensor& fm, int P) {
  require(fm.rank() == 4, "split_patches: feature map must be (C, D, H, W)");
  require(P >= 1, "split_patches: P must be positive");
  const int C = fm.dims[0], D = fm.dims[1], H = fm.dims[2], W = fm.dims[3];
  require(D % P == 0 && H % P == 0 && W % P == 0,
          "split_patches: spatial dims must be divisible by P");
  const int d = D / P, h = H / P, w = W / P;
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(P) * P * P);
  for (int pz = 0; pz < P; ++pz)
    for (int py = 0; py < P; ++py)
      for (int px = 0; px < P; ++px) {
        Tensor t({C, d, h, w});
        for (int c = 0; c < C; ++c)
          for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
              for (int x = 0; x < w; ++x)
                t.at4(c, z, y, x) = fm.at4(c, pz * d + z, py * h + y, px * w + x);
        out.push_back(std::move(t));
      }
  return out;
}

inline Tensor merge_patches(const std::vector<Tensor>& patches, int P) {
  require(P >= 1 && patches.size() == static_cast<std::size_t>(P) * P * P,
          "merge_patches: expected P^3 patches");
  const int C = patches[0].dims[0], d = patches[0].dims[1], h = patches[0].dims[2],
            w = patches[0].dims[3];
  Tensor fm({C, d * P, h * P, w * P});
  std::size_t idx = 0;
  for (int pz = 0; pz < P; ++pz)
    for (int py = 0; py < P; ++py)
      for (int px = 0; px < P; ++px) {
        const Tensor& t = patches[idx++];
        require(t.dims == patches[0].dims, "merge_patches: patch shape mismatch");
        for (int c = 0; c < C; ++c)
          for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
              for (int x = 0; x < w; ++x)
                fm.at4(c, pz * d + z, py * h + y, px * w + x) = t.at4(c, z, y, x);
      }
  return fm;
}

}  // namespace msvdnn

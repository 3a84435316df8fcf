#pragma once

// Learned occupancy context models and their training loop:
//  - BaseVoxelDNN: causal (masked) CNN coding the base-resolution block one
//    voxel at a time in raster order.
//  - GroupPredictor: per (scale, group) CNN predicting a whole corner group
//    in one evaluation from already-coded context.
//  - ModelBundle: one base model plus num_scales x 8 group predictors, with
//    a binary container format ("MSVB") and a content fingerprint.
//  - train(): independent per-model optimization with Adam on binary
//    cross-entropy (the code length the arithmetic coder will realize).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msvdnn/blocks.hpp"
#include "msvdnn/serial.hpp"
#include "msvdnn/tensor.hpp"

namespace msvdnn {

// ---------------------------------------------------------------------------
// Configuration.

struct ModelConfig {
  int base_edge = 8;   // edge of the sequentially coded base block
  int num_scales = 3;  // grouped scales above the base: edges base*2^(1..num_scales)

  // Base model: type-A masked conv -> ResNet blocks (type-B 3x3x3) ->
  // type-B conv -> 1x1x1 logit head.
  int base_width = 32;
  int base_first_kernel = 7;
  int base_resnet_blocks = 2;
  int base_tail_kernel = 3;

  // Group predictors: stage 1 = plain conv + ResNet blocks over the context;
  // stage 2 = shallow masked CNN run independently on each spatial patch.
  int group_width = 32;
  int group_first_kernel = 7;
  int group_resnet_blocks = 4;
  int stage2_kernel = 3;
  int patches_per_axis = 2;

  int top_edge() const { return base_edge << num_scales; }
  int scale_edge(int scale_idx) const { return base_edge << (scale_idx + 1); }

  void validate() const {
    require(base_edge >= 2 && (base_edge & (base_edge - 1)) == 0,
            "config: base edge must be a power of two >= 2");
    require(num_scales >= 0 && num_scales <= 8, "config: num_scales out of range");
    require(base_width >= 1 && group_width >= 1, "config: widths must be positive");
    for (int k : {base_first_kernel, base_tail_kernel, group_first_kernel, stage2_kernel})
      require(k >= 1 && k % 2 == 1, "config: kernel sizes must be odd");
    require(base_resnet_blocks >= 0 && group_resnet_blocks >= 0,
            "config: block counts must be non-negative");
    require(patches_per_axis >= 1, "config: patches_per_axis must be positive");
    for (int s = 0; s < num_scales; ++s)
      require((scale_edge(s) / 2) % patches_per_axis == 0,
              "config: group volumes must split evenly into patches");
  }

  // Full-size architecture (32 filters, k7 first layers).
  static ModelConfig full() { return ModelConfig{}; }

  // Sized so that training and a ~100-cloud codec run fit in CPU minutes.
  static ModelConfig desk() {
    ModelConfig c;
    c.base_width = 8;
    c.base_first_kernel = 5;
    c.base_resnet_blocks = 1;
    c.group_width = 4;
    c.group_first_kernel = 3;
    c.group_resnet_blocks = 2;
    return c;
  }

  // Minimal shapes for unit tests.
  static ModelConfig tiny() {
    ModelConfig c;
    c.num_scales = 1;
    c.base_width = 4;
    c.base_first_kernel = 3;
    c.base_resnet_blocks = 1;
    c.group_width = 4;
    c.group_first_kernel = 3;
    c.group_resnet_blocks = 1;
    return c;
  }

  bool operator==(const ModelConfig& o) const = default;
};

inline void write_config(const ModelConfig& c, ByteWriter& w) {
  w.u16(static_cast<std::uint16_t>(c.base_edge));
  w.u16(static_cast<std::uint16_t>(c.num_scales));
  w.u16(static_cast<std::uint16_t>(c.base_width));
  w.u16(static_cast<std::uint16_t>(c.base_first_kernel));
  w.u16(static_cast<std::uint16_t>(c.base_resnet_blocks));
  w.u16(static_cast<std::uint16_t>(c.base_tail_kernel));
  w.u16(static_cast<std::uint16_t>(c.group_width));
  w.u16(static_cast<std::uint16_t>(c.group_first_kernel));
  w.u16(static_cast<std::uint16_t>(c.group_resnet_blocks));
  w.u16(static_cast<std::uint16_t>(c.stage2_kernel));
  w.u16(static_cast<std::uint16_t>(c.patches_per_axis));
}

inline ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.base_edge = r.u16();
  c.num_scales = r.u16();
  c.base_width = r.u16();
  c.base_first_kernel = r.u16();
  c.base_resnet_blocks = r.u16();
  c.base_tail_kernel = r.u16();
  c.group_width = r.u16();
  c.group_first_kernel = r.u16();
  c.group_resnet_blocks = r.u16();
  c.stage2_kernel = r.u16();
  c.patches_per_axis = r.u16();
  return c;
}

// ---------------------------------------------------------------------------
// Logit -> probability. Clamping bounds the per-symbol code length and keeps
// both symbols representable after 16-bit quantization. Encoder and decoder
// share this exact function (bit-identical probabilities).

inline float prob_from_logit(float z) {
  const double zc = std::min(15.0, std::max(-15.0, static_cast<double>(z)));
  return static_cast<float>(1.0 / (1.0 + std::exp(-zc)));
}

inline Tensor probs_from_logits(const Tensor& z) {
  Tensor p = Tensor::zeros_like(z);
  for (std::size_t i = 0; i < z.size(); ++i) p.v[i] = prob_from_logit(z.v[i]);
  return p;
}

// ---------------------------------------------------------------------------
// Tape-aware patch slicing (gradient-carrying counterparts of
// split_patches/merge_patches, used by the stage-2 per-patch head).

inline Var slice_patch(Tape* tape, const Var& x, int P, int pz, int py, int px) {
  const Tensor& v = x->val;
  require(v.rank() == 4, "slice_patch: feature map must be (C, D, H, W)");
  require(v.dims[1] % P == 0 && v.dims[2] % P == 0 && v.dims[3] % P == 0,
          "slice_patch: spatial dims must be divisible by P");
  const int C = v.dims[0], d = v.dims[1] / P, h = v.dims[2] / P, w = v.dims[3] / P;
  Tensor out({C, d, h, w});
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          out.at4(c, z, y, xx) = v.at4(c, pz * d + z, py * h + y, px * w + xx);
  Var r = make_var(std::move(out));
  if (tape && x->needs_grad) {
    r->needs_grad = true;
    tape->record([x, r, P, pz, py, px, C, d, h, w]() {
      x->ensure_grad();
      for (int c = 0; c < C; ++c)
        for (int z = 0; z < d; ++z)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
              x->grad.at4(c, pz * d + z, py * h + y, px * w + xx) += r->grad.at4(c, z, y, xx);
    });
  }
  return r;
}

inline Var merge_patch_vars(Tape* tape, const std::vector<Var>& patches, int P) {
  require(static_cast<long>(patches.size()) == static_cast<long>(P) * P * P,
          "merge_patch_vars: expected P^3 patches");
  const Tensor& first = patches[0]->val;
  require(first.rank() == 4, "merge_patch_vars: patches must be (C, D, H, W)");
  const int C = first.dims[0], d = first.dims[1], h = first.dims[2], w = first.dims[3];
  Tensor out({C, d * P, h * P, w * P});
  bool any_grad = false;
  int idx = 0;
  for (int pz = 0; pz < P; ++pz)
    for (int py = 0; py < P; ++py)
      for (int px = 0; px < P; ++px, ++idx) {
        const Var& t = patches[idx];
        require(t->val.dims == first.dims, "merge_patch_vars: patch shape mismatch");
        any_grad = any_grad || t->needs_grad;
        for (int c = 0; c < C; ++c)
          for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
              for (int xx = 0; xx < w; ++xx)
                out.at4(c, pz * d + z, py * h + y, px * w + xx) = t->val.at4(c, z, y, xx);
      }
  Var r = make_var(std::move(out));
  if (tape && any_grad) {
    r->needs_grad = true;
    tape->record([patches, r, P, C, d, h, w]() {
      int i = 0;
      for (int pz = 0; pz < P; ++pz)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px, ++i) {
            const Var& t = patches[i];
            if (!t->needs_grad) continue;
            t->ensure_grad();
            for (int c = 0; c < C; ++c)
              for (int z = 0; z < d; ++z)
                for (int y = 0; y < h; ++y)
                  for (int xx = 0; xx < w; ++xx)
                    t->grad.at4(c, z, y, xx) += r->grad.at4(c, pz * d + z, py * h + y, px * w + xx);
          }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Named parameter plumbing.

using NamedParams = std::vector<std::pair<std::string, Var>>;

namespace detail {

inline void collect_conv(const std::string& name, const ConvLayer& c, NamedParams& out) {
  out.push_back({name + ".w", c.w});
  out.push_back({name + ".b", c.b});
}

inline void collect_resnet(const std::string& name, const ResNetBlock& b, NamedParams& out) {
  collect_conv(name + "/reduce", b.reduce, out);
  collect_conv(name + "/spatial", b.spatial, out);
  collect_conv(name + "/expand", b.expand, out);
}

inline std::vector<Var> flat(const NamedParams& named) {
  std::vector<Var> out;
  out.reserve(named.size());
  for (const auto& [n, v] : named) out.push_back(v);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Base-scale causal model. The type-A first layer makes every output depend
// only on strictly-prior voxels in raster order, so one full pass yields the
// probability schedule for the whole block, and a prefix-limited pass
// reproduces the same values during sequential decoding.

class BaseVoxelDNN {
 public:
  BaseVoxelDNN() = default;
  BaseVoxelDNN(const ModelConfig& cfg, Rng& rng)
      : edge_(cfg.base_edge),
        first_({1, cfg.base_width, cfg.base_first_kernel, Mask::A}, rng),
        tail_({cfg.base_width, cfg.base_width, cfg.base_tail_kernel, Mask::B}, rng),
        head_({cfg.base_width, 1, 1, Mask::None}, rng) {
    for (int i = 0; i < cfg.base_resnet_blocks; ++i) res_.emplace_back(cfg.base_width, 3, Mask::B, rng);
  }

  int edge() const { return edge_; }

  Var logits(Tape* tape, const Var& x, long limit = -1) const {
    Var h = relu(tape, first_(tape, x, limit));
    for (const auto& b : res_) h = b(tape, h, limit);
    h = relu(tape, tail_(tape, h, limit));
    return head_(tape, h, limit);
  }

  // Probability schedule for every voxel in one pass (teacher-forced).
  Tensor forward_full_probs(const VoxelBlock& b) const {
    require(b.edge == edge_, "base model: wrong block edge");
    Var z = logits(nullptr, make_var(b.to_tensor()));
    return probs_from_logits(z->val);
  }

  // Probability for voxel i given voxels < i (rest of the block zero).
  // Computes the identical arithmetic prefix the full pass would, so the
  // value matches forward_full_probs at position i bit-for-bit.
  float step_prob(const VoxelBlock& partial, long i) const {
    require(partial.edge == edge_, "base model: wrong block edge");
    const long n = static_cast<long>(edge_) * edge_ * edge_;
    require(i >= 0 && i < n, "base model: voxel index out of range");
    Var z = logits(nullptr, make_var(partial.to_tensor()), i + 1);
    return prob_from_logit(z->val.v[static_cast<std::size_t>(i)]);
  }

  void named_params(const std::string& prefix, NamedParams& out) const {
    detail::collect_conv(prefix + "/first", first_, out);
    for (std::size_t i = 0; i < res_.size(); ++i)
      detail::collect_resnet(prefix + "/res" + std::to_string(i), res_[i], out);
    detail::collect_conv(prefix + "/tail", tail_, out);
    detail::collect_conv(prefix + "/head", head_, out);
  }
  Var head_bias() const { return head_.b; }

 private:
  int edge_ = 0;
  ConvLayer first_, tail_, head_;
  std::vector<ResNetBlock> res_;
};

// ---------------------------------------------------------------------------
// Per-(scale, group) predictor. Stage 1 extracts features from the context
// (lower-scale block for group 1, previously coded groups otherwise); stage 2
// runs a shallow masked CNN on each spatial patch with shared weights. The
// target group's own occupancies are never an input, so all of its voxels
// can be coded against this one evaluation.

class GroupPredictor {
 public:
  GroupPredictor() = default;
  GroupPredictor(const ModelConfig& cfg, int scale_edge, int group_id, Rng& rng)
      : scale_edge_(scale_edge),
        group_id_(group_id),
        in_ch_(group_id == 1 ? 1 : group_id - 1),
        patches_(cfg.patches_per_axis),
        stage1_first_({in_ch_, cfg.group_width, cfg.group_first_kernel, Mask::None}, rng),
        patch_first_({cfg.group_width, cfg.group_width, cfg.stage2_kernel, Mask::A}, rng),
        patch_res_(cfg.group_width, 3, Mask::B, rng),
        patch_head_({cfg.group_width, 1, 1, Mask::None}, rng) {
    require(group_id >= 1 && group_id <= 8, "group id must be in 1..8");
    require(scale_edge >= 2 && scale_edge % 2 == 0, "scale edge must be even");
    for (int i = 0; i < cfg.group_resnet_blocks; ++i)
      stage1_res_.emplace_back(cfg.group_width, 3, Mask::None, rng);
  }

  int volume_edge() const { return scale_edge_ / 2; }
  int in_channels() const { return in_ch_; }
  int group_id() const { return group_id_; }
  int scale_edge() const { return scale_edge_; }

  Var logits(Tape* tape, const Var& context) const {
    const int h = volume_edge();
    require(context->val.rank() == 4 && context->val.dims[0] == in_ch_ &&
                context->val.dims[1] == h && context->val.dims[2] == h &&
                context->val.dims[3] == h,
            "group predictor: wrong context channel count or edge");
    Var f = relu(tape, stage1_first_(tape, context));
    for (const auto& b : stage1_res_) f = b(tape, f);
    const int P = patches_;
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(P) * P * P);
    for (int pz = 0; pz < P; ++pz)
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px) {
          Var patch = slice_patch(tape, f, P, pz, py, px);
          Var s = relu(tape, patch_first_(tape, patch));
          s = patch_res_(tape, s);
          outs.push_back(patch_head_(tape, s));
        }
    return merge_patch_vars(tape, outs, P);
  }

  // One evaluation -> probabilities for every voxel of the group.
  Tensor predict(const Tensor& context) const {
    Var z = logits(nullptr, make_var(context));
    return probs_from_logits(z->val);
  }

  void named_params(const std::string& prefix, NamedParams& out) const {
    detail::collect_conv(prefix + "/stage1", stage1_first_, out);
    for (std::size_t i = 0; i < stage1_res_.size(); ++i)
      detail::collect_resnet(prefix + "/res" + std::to_string(i), stage1_res_[i], out);
    detail::collect_conv(prefix + "/patch_first", patch_first_, out);
    detail::collect_resnet(prefix + "/patch_res", patch_res_, out);
    detail::collect_conv(prefix + "/patch_head", patch_head_, out);
  }
  Var head_bias() const { return patch_head_.b; }

 private:
  int scale_edge_ = 0;
  int group_id_ = 0;
  int in_ch_ = 0;
  int patches_ = 2;
  ConvLayer stage1_first_, patch_first_, patch_head_;
  ResNetBlock patch_res_;
  std::vector<ResNetBlock> stage1_res_;
};

// Context assembly shared by training, encoding, and decoding: group 1 is
// predicted from the lower-scale block, group g >= 2 from groups 1..g-1 of
// the current level (ascending id order as channels).
inline Tensor group_context(const VoxelBlock& level, const VoxelBlock& lower, int g) {
  require(g >= 1 && g <= 8, "group id must be in 1..8");
  const int h = level.edge / 2;
  if (g == 1) {
    require(lower.edge == h, "group context: lower level has wrong edge");
    return lower.to_tensor();
  }
  Tensor ctx({g - 1, h, h, h});
  for (int j = 1; j < g; ++j) {
    const GroupVolume gv = extract_group(level, j);
    for (int z = 0; z < h; ++z)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < h; ++x) ctx.at4(j - 1, z, y, x) = gv.at(z, y, x);
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// Bundle.

struct ModelBundle {
  ModelConfig config;
  std::uint64_t seed = 0;
  float loss_at_save = 0.0f;
  BaseVoxelDNN base;
  std::vector<GroupPredictor> groups;  // index = scale_idx * 8 + (group - 1)

  int model_count() const { return 1 + config.num_scales * 8; }

  GroupPredictor& predictor(int scale_idx, int g) {
    require(scale_idx >= 0 && scale_idx < config.num_scales && g >= 1 && g <= 8,
            "predictor index out of range");
    return groups[static_cast<std::size_t>(scale_idx) * 8 + (g - 1)];
  }
  const GroupPredictor& predictor(int scale_idx, int g) const {
    return const_cast<ModelBundle*>(this)->predictor(scale_idx, g);
  }

  NamedParams named_params() const {
    NamedParams out;
    base.named_params("base", out);
    for (int s = 0; s < config.num_scales; ++s)
      for (int g = 1; g <= 8; ++g)
        predictor(s, g).named_params(
            "s" + std::to_string(config.scale_edge(s)) + "/g" + std::to_string(g), out);
    return out;
  }

  std::uint64_t fingerprint() const {
    ByteWriter w;
    write_config(config, w);
    std::uint64_t h = fnv1a64(w.bytes().data(), w.bytes().size());
    for (const auto& [name, v] : named_params()) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(v->val.v.data(), v->val.size() * sizeof(float), h);
    }
    return h;
  }
};

inline ModelBundle make_bundle(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelBundle b;
  b.config = cfg;
  b.seed = seed;
  Rng rng(seed);
  b.base = BaseVoxelDNN(cfg, rng);
  for (int s = 0; s < cfg.num_scales; ++s)
    for (int g = 1; g <= 8; ++g) b.groups.emplace_back(cfg, cfg.scale_edge(s), g, rng);
  return b;
}

// ---------------------------------------------------------------------------
// Bundle container ("MSVB"): config + named little-endian float arrays in a
// fixed order, guarded by a trailing CRC32 over everything before it.

inline std::vector<std::uint8_t> bundle_bytes(const ModelBundle& b) {
  ByteWriter w;
  w.raw("MSVB", 4);
  w.u16(1);  // version
  write_config(b.config, w);
  w.u64(b.seed);
  w.f32(b.loss_at_save);
  const NamedParams named = b.named_params();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, v] : named) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(v->val.rank()));
    for (int d : v->val.dims) w.u32(static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < v->val.size(); ++i) w.f32(v->val.v[i]);
  }
  w.u32(crc32(w.bytes().data(), w.size()));
  return w.take();
}

inline void save_bundle(const ModelBundle& b, const std::string& path) {
  const std::vector<std::uint8_t> bytes = bundle_bytes(b);
  std::ofstream f(path, std::ios::binary);
  if (!f || !f.write(reinterpret_cast<const char*>(bytes.data()),
                     static_cast<std::streamsize>(bytes.size())))
    throw IoError("cannot write bundle file: " + path);
}

inline ModelBundle bundle_from_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), "MSVB", 4) != 0)
    throw ParseError("not a model bundle (bad magic)");
  const std::uint32_t stored = ByteReader(bytes.data() + bytes.size() - 4, 4).u32();
  if (crc32(bytes.data(), bytes.size() - 4) != stored)
    throw ParseError("bundle checksum mismatch (file truncated or corrupted)");
  ByteReader r(bytes.data(), bytes.size() - 4);
  r.skip(4);
  const std::uint16_t version = r.u16();
  if (version != 1) throw ParseError("unsupported bundle version");
  const ModelConfig cfg = read_config(r);
  cfg.validate();
  const std::uint64_t seed = r.u64();
  const float loss = r.f32();

  ModelBundle b = make_bundle(cfg, seed);
  b.loss_at_save = loss;
  const NamedParams named = b.named_params();
  const std::uint32_t count = r.u32();
  if (count != named.size()) throw ParseError("bundle parameter count does not match its config");
  for (const auto& [name, v] : named) {
    if (r.str() != name) throw ParseError("bundle parameter order mismatch: expected " + name);
    const int rank = r.u8();
    std::vector<int> dims(static_cast<std::size_t>(rank));
    for (int& d : dims) d = static_cast<int>(r.u32());
    if (dims != v->val.dims)
      throw ParseError("bundle parameter shape mismatch vs config: " + name);
    for (std::size_t i = 0; i < v->val.size(); ++i) v->val.v[i] = r.f32();
  }
  if (!r.done()) throw ParseError("trailing bytes in bundle");
  return b;
}

inline ModelBundle load_bundle(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read bundle file: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return bundle_from_bytes(bytes);
}

// ---------------------------------------------------------------------------
// Training-data block files: one text header line, then edge^3 occupancy
// bits packed LSB-first in raster order.

inline void write_block_file(const VoxelBlock& b, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write block file: " + path);
  f << "msvdnn-block " << b.edge << "\n";
  std::vector<std::uint8_t> packed((b.v.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < b.v.size(); ++i)
    if (b.v[i]) packed[i >> 3] |= static_cast<std::uint8_t>(1u << (i & 7));
  if (!f.write(reinterpret_cast<const char*>(packed.data()),
               static_cast<std::streamsize>(packed.size())))
    throw IoError("cannot write block file: " + path);
}

inline VoxelBlock read_block_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read block file: " + path);
  std::string header;
  std::getline(f, header);
  int edge = 0;
  if (std::sscanf(header.c_str(), "msvdnn-block %d", &edge) != 1)
    throw ParseError("not a block file: " + path);
  VoxelBlock b(edge);
  std::vector<std::uint8_t> packed((b.v.size() + 7) / 8);
  if (!f.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size())))
    throw ParseError("block file shorter than its header promises: " + path);
  for (std::size_t i = 0; i < b.v.size(); ++i)
    b.v[i] = (packed[i >> 3] >> (i & 7)) & 1;
  return b;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  float lr = 1e-5f;
  int epochs = 100;
  int batch_top = 32;    // mini-batch at the largest scale
  int batch_other = 64;  // mini-batch everywhere else (base included)
  int max_steps_per_epoch = 0;  // 0 = full pass over the data
  std::uint64_t seed = 1;
  bool prior_bias_init = true;  // start the head bias at the dataset's logit mean
  // Fit each group predictor only on voxels whose lower-scale parent is
  // occupied — the exact subset the reduced coding schedule codes. The base
  // model is always fully coded and trains unmasked either way.
  bool skip_empty_parents = false;

  void validate() const {
    require(epochs >= 0, "train: epochs must be non-negative");
    require(batch_top >= 1 && batch_other >= 1, "train: batch sizes must be positive");
    require(max_steps_per_epoch >= 0, "train: step cap must be non-negative");
  }
};

struct LossCurve {
  std::string model;
  std::vector<float> bits_per_voxel;  // mean training loss per epoch
};

inline void scale_grads(const std::vector<Var>& params, float c) {
  for (const auto& p : params)
    if (!p->grad.v.empty())
      for (float& g : p->grad.v) g *= c;
}

namespace detail {

inline float prior_logit(double occupied, double total) {
  const double p = std::min(1.0 - 1e-4, std::max(1e-4, occupied / std::max(total, 1.0)));
  return static_cast<float>(std::log(p / (1.0 - p)));
}

// One training example: an empty mask means every position contributes.
struct TrainSample {
  Tensor input, target, mask;
};

// One model's optimization loop: independent Adam over mini-batches of
// (context, target) samples; returns the per-epoch loss curve in bits.
template <typename MakeSample, typename Forward>
LossCurve train_one_model(const std::string& name, const std::vector<Var>& params,
                          const TrainConfig& tc, std::size_t dataset_size,
                          MakeSample&& make_sample, Forward&& forward, int batch) {
  LossCurve curve{name, {}};
  Adam opt({tc.lr});
  Rng rng(tc.seed ^ fnv1a64(name.data(), name.size()));
  std::vector<std::size_t> order(dataset_size);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    // Fisher-Yates shuffle from the model's own deterministic stream.
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<long>(i) - 1)]);
    long steps = (static_cast<long>(dataset_size) + batch - 1) / batch;
    if (tc.max_steps_per_epoch > 0) steps = std::min<long>(steps, tc.max_steps_per_epoch);
    double epoch_loss = 0.0;
    for (long s = 0; s < steps; ++s) {
      zero_grads(params);
      double batch_loss = 0.0;
      int used = 0;
      for (int k = 0; k < batch; ++k) {
        const std::size_t idx = order[(static_cast<std::size_t>(s) * batch + k) % dataset_size];
        TrainSample sample = make_sample(idx);
        Tape tape;
        Var z = forward(&tape, make_var(std::move(sample.input)));
        Var loss = sample.mask.v.empty()
                       ? bce_with_logits_mean(&tape, z, sample.target)
                       : bce_with_logits_masked_mean(&tape, z, sample.target, sample.mask);
        require(std::isfinite(loss->val.v[0]), "training loss is not finite");
        tape.backward(loss);
        batch_loss += loss->val.v[0];
        ++used;
      }
      scale_grads(params, 1.0f / static_cast<float>(used));
      opt.step(params);
      epoch_loss += batch_loss / used;
    }
    curve.bits_per_voxel.push_back(
        static_cast<float>(steps > 0 ? epoch_loss / steps / std::log(2.0) : 0.0));
  }
  return curve;
}

}  // namespace detail

// Trains every model in the bundle independently: the base model on pooled
// base-resolution blocks (teacher-forced), each (scale, group) predictor on
// (context, group occupancy) pairs from the pyramid of every block.
inline std::vector<LossCurve> train(ModelBundle& bundle, const TrainConfig& tc,
                                    const std::vector<VoxelBlock>& blocks) {
  tc.validate();
  require(!blocks.empty(), "train: empty dataset");
  const ModelConfig& cfg = bundle.config;
  for (const auto& b : blocks)
    require(b.edge == cfg.top_edge(), "train: block edge does not match the bundle config");

  std::vector<std::vector<VoxelBlock>> pyramids;
  pyramids.reserve(blocks.size());
  for (const auto& b : blocks) pyramids.push_back(build_pyramid(b, cfg.num_scales));

  std::vector<LossCurve> curves;

  {  // Base model: input and target are the same base-level block.
    if (tc.prior_bias_init) {
      double occ = 0.0, tot = 0.0;
      for (const auto& p : pyramids) {
        occ += static_cast<double>(p[0].count_occupied());
        tot += static_cast<double>(p[0].v.size());
      }
      bundle.base.head_bias()->val.v[0] = detail::prior_logit(occ, tot);
    }
    NamedParams named;
    bundle.base.named_params("base", named);
    curves.push_back(detail::train_one_model(
        "base", detail::flat(named), tc, pyramids.size(),
        [&](std::size_t idx) {
          Tensor x = pyramids[idx][0].to_tensor();
          Tensor target = x;
          return detail::TrainSample{std::move(x), std::move(target), {}};
        },
        [&](Tape* tape, Var x) { return bundle.base.logits(tape, x); }, tc.batch_other));
  }

  for (int s = 0; s < cfg.num_scales; ++s) {
    const int level = s + 1;
    const bool top = cfg.scale_edge(s) == cfg.top_edge();
    for (int g = 1; g <= 8; ++g) {
      GroupPredictor& model = bundle.predictor(s, g);
      const std::string name =
          "s" + std::to_string(cfg.scale_edge(s)) + "/g" + std::to_string(g);
      if (tc.prior_bias_init) {
        double occ = 0.0, tot = 0.0;
        for (const auto& p : pyramids) {
          const GroupVolume gv = extract_group(p[level], g);
          if (tc.skip_empty_parents) {
            // Conditional prior over the coded subset: a child is only
            // coded when its parent is occupied.
            const VoxelBlock& lower = p[level - 1];
            const int h = lower.edge;
            for (int z = 0; z < h; ++z)
              for (int y = 0; y < h; ++y)
                for (int x = 0; x < h; ++x)
                  if (lower.at(z, y, x)) {
                    occ += gv.at(z, y, x);
                    tot += 1.0;
                  }
          } else {
            for (std::uint8_t bit : gv.v) occ += bit;
            tot += static_cast<double>(gv.v.size());
          }
        }
        model.head_bias()->val.v[0] = detail::prior_logit(occ, tot);
      }
      NamedParams named;
      model.named_params(name, named);
      curves.push_back(detail::train_one_model(
          name, detail::flat(named), tc, pyramids.size(),
          [&, g, level](std::size_t idx) {
            const std::vector<VoxelBlock>& pyr = pyramids[idx];
            Tensor ctx = group_context(pyr[level], pyr[level - 1], g);
            Tensor target = extract_group(pyr[level], g).to_tensor();
            Tensor mask;
            if (tc.skip_empty_parents) mask = pyr[level - 1].to_tensor();
            return detail::TrainSample{std::move(ctx), std::move(target), std::move(mask)};
          },
          [&model](Tape* tape, Var x) { return model.logits(tape, x); },
          top ? tc.batch_top : tc.batch_other));
    }
  }
  return curves;
}

}  // namespace msvdnn

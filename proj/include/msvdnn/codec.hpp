#pragma once

// Lossless codec tying the pieces together: a cloud is partitioned into
// 64^3 blocks behind a high-level octree, each block is expanded into its
// occupancy pyramid, and one range-coded payload carries the base level
// voxel-by-voxel plus every grouped scale, lowest first. Encoder and
// decoder walk the identical symbol schedule, so the probability model
// may be a deep network evaluated on previously coded context only.
//
// Container layout ("MSVX", all integers little-endian):
//   magic            4 bytes  'M' 'S' 'V' 'X'
//   version          u16      currently 1
//   flags            u8       bit 0: children of empty parents are omitted
//   precision_bits   u8       n; coordinates live in [0, 2^n)
//   base_edge        u8       edge of the sequentially coded base level
//   num_scales       u8       grouped scales above the base
//   model_fingerprint u64     hash of the bundle config and weights
//   octree_len       u32      byte length of the octree section
//   block_count      u32      number of 64^3 leaf blocks
//   payload_len      u32      byte length of the range-coded payload
//   octree bytes     octree_len bytes (breadth-first child-occupancy bytes)
//   payload bytes    payload_len bytes (one stream across all blocks,
//                    blocks in raster order of their origins)

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "msvdnn/blocks.hpp"
#include "msvdnn/common.hpp"
#include "msvdnn/entropy.hpp"
#include "msvdnn/models.hpp"
#include "msvdnn/octree.hpp"
#include "msvdnn/serial.hpp"

namespace msvdnn {

constexpr std::uint16_t kBitstreamVersion = 1;
constexpr std::size_t kBitstreamHeaderBytes = 30;
constexpr std::uint8_t kFlagSkipEmptyParents = 0x01;

struct BitstreamHeader {
  std::uint16_t version = kBitstreamVersion;
  std::uint8_t flags = 0;
  std::uint8_t precision_bits = 0;
  std::uint8_t base_edge = 0;
  std::uint8_t num_scales = 0;
  std::uint64_t model_fingerprint = 0;
  std::uint32_t octree_len = 0;
  std::uint32_t block_count = 0;
  std::uint32_t payload_len = 0;
};

inline void write_header(const BitstreamHeader& h, ByteWriter& w) {
  w.raw("MSVX", 4);
  w.u16(h.version);
  w.u8(h.flags);
  w.u8(h.precision_bits);
  w.u8(h.base_edge);
  w.u8(h.num_scales);
  w.u64(h.model_fingerprint);
  w.u32(h.octree_len);
  w.u32(h.block_count);
  w.u32(h.payload_len);
}

inline BitstreamHeader read_header(ByteReader& r) {
  char magic[4];
  r.raw(magic, 4);
  if (std::string(magic, 4) != "MSVX") throw ParseError("not an MSVX bitstream (bad magic)");
  BitstreamHeader h;
  h.version = r.u16();
  if (h.version != kBitstreamVersion)
    throw ParseError("unsupported MSVX bitstream version " + std::to_string(h.version));
  h.flags = r.u8();
  h.precision_bits = r.u8();
  h.base_edge = r.u8();
  h.num_scales = r.u8();
  h.model_fingerprint = r.u64();
  h.octree_len = r.u32();
  h.block_count = r.u32();
  h.payload_len = r.u32();
  return h;
}

inline BitstreamHeader parse_bitstream_header(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  return read_header(r);
}

// ---------------------------------------------------------------------------
// Instrumentation shared by both coder directions. The schedule hash folds
// every (probability, symbol) pair into one value, so a decoder that walks
// even one symbol differently from the encoder is caught by comparing the
// two hashes in tests.

struct EvalCounter {
  long long base_full = 0;  // whole-block causal passes (encoding side)
  long long base_step = 0;  // single-voxel causal steps (decoding side)
  long long group = 0;      // group-predictor passes

  long long total() const { return base_full + base_step + group; }
};

struct CodingStats {
  EvalCounter evals;
  long long symbols = 0;
  std::uint64_t schedule_hash = fnv1a64("", 0);
  double base_ce_bits = 0.0;
  std::vector<double> scale_ce_bits;

  double ce_bits() const {
    double t = base_ce_bits;
    for (double s : scale_ce_bits) t += s;
    return t;
  }

  void note(int symbol, std::uint16_t q, double& ce_slot) {
    const std::uint8_t buf[3] = {static_cast<std::uint8_t>(q & 0xFF),
                                 static_cast<std::uint8_t>(q >> 8),
                                 static_cast<std::uint8_t>(symbol)};
    schedule_hash = fnv1a64(buf, 3, schedule_hash);
    ++symbols;
    ce_slot += bits_for(symbol, q);
  }
};

// ---------------------------------------------------------------------------
// Per-block coding. The schedule is frozen: base level in raster order,
// then scales lowest to highest, within a scale groups 1..8, within a
// group its half-resolution volume in raster order. When
// skip_empty_parents is set, a voxel whose parent in the level below is
// empty is forced to zero on both sides and never coded.

inline void encode_block(const VoxelBlock& b, const ModelBundle& bundle, RangeEncoder& enc,
                         CodingStats& stats, bool skip_empty_parents = false) {
  const ModelConfig& cfg = bundle.config;
  require(b.edge == cfg.top_edge(), "encode_block: block edge does not match the bundle");
  if (stats.scale_ce_bits.size() != static_cast<std::size_t>(cfg.num_scales))
    stats.scale_ce_bits.assign(cfg.num_scales, 0.0);

  const std::vector<VoxelBlock> pyramid = build_pyramid(b, cfg.num_scales);

  // Base level: one causal pass predicts every voxel of the true block.
  {
    const VoxelBlock& base = pyramid[0];
    const Tensor probs = bundle.base.forward_full_probs(base);
    ++stats.evals.base_full;
    for (std::size_t i = 0; i < base.v.size(); ++i) {
      const int sym = base.v[i];
      const std::uint16_t q = quantize_prob(probs.v[i]);
      enc.encode(sym, q);
      stats.note(sym, q, stats.base_ce_bits);
    }
  }

  for (int s = 0; s < cfg.num_scales; ++s) {
    const VoxelBlock& lower = pyramid[s];
    const VoxelBlock& level = pyramid[s + 1];
    const int h = level.edge / 2;
    for (int g = 1; g <= 8; ++g) {
      const Tensor ctx = group_context(level, lower, g);
      const Tensor probs = bundle.predictor(s, g).predict(ctx);
      ++stats.evals.group;
      const GroupVolume gv = extract_group(level, g);
      std::size_t o = 0;
      for (int z = 0; z < h; ++z)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < h; ++x, ++o) {
            if (skip_empty_parents && lower.at(z, y, x) == 0) continue;
            const int sym = gv.v[o];
            const std::uint16_t q = quantize_prob(probs.v[o]);
            enc.encode(sym, q);
            stats.note(sym, q, stats.scale_ce_bits[s]);
          }
    }
  }
}

inline VoxelBlock decode_block(RangeDecoder& dec, const ModelBundle& bundle, CodingStats& stats,
                               bool skip_empty_parents = false) {
  const ModelConfig& cfg = bundle.config;
  if (stats.scale_ce_bits.size() != static_cast<std::size_t>(cfg.num_scales))
    stats.scale_ce_bits.assign(cfg.num_scales, 0.0);

  // Base level: strictly sequential; each step conditions on the voxels
  // decoded so far and reproduces the encoder's probabilities bit-for-bit.
  VoxelBlock lower(cfg.base_edge);
  for (long i = 0; i < static_cast<long>(lower.v.size()); ++i) {
    const float p = bundle.base.step_prob(lower, i);
    ++stats.evals.base_step;
    const std::uint16_t q = quantize_prob(p);
    const int sym = dec.decode(q);
    lower.v[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(sym);
    stats.note(sym, q, stats.base_ce_bits);
  }

  for (int s = 0; s < cfg.num_scales; ++s) {
    VoxelBlock level(cfg.scale_edge(s));
    const int h = level.edge / 2;
    for (int g = 1; g <= 8; ++g) {
      // Groups below g are already scattered into `level`, so the context
      // here equals the encoder's context extracted from the true level.
      const Tensor ctx = group_context(level, lower, g);
      const Tensor probs = bundle.predictor(s, g).predict(ctx);
      ++stats.evals.group;
      GroupVolume gv;
      gv.g = g;
      gv.dims = {h, h, h};
      gv.v.resize(static_cast<std::size_t>(h) * h * h);
      std::size_t o = 0;
      for (int z = 0; z < h; ++z)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < h; ++x, ++o) {
            if (skip_empty_parents && lower.at(z, y, x) == 0) {
              gv.v[o] = 0;
              continue;
            }
            const std::uint16_t q = quantize_prob(probs.v[o]);
            const int sym = dec.decode(q);
            gv.v[o] = static_cast<std::uint8_t>(sym);
            stats.note(sym, q, stats.scale_ce_bits[s]);
          }
      scatter_group(gv, level);
    }
    lower = std::move(level);
  }
  return lower;
}

// ---------------------------------------------------------------------------
// Rate accounting. Segment bit counts always sum to total_bits; the
// cross-entropy fields are the ideal cost of the coded symbols under the
// quantized probabilities and bound the payload from below.

struct RateReport {
  long long total_bits = 0;
  long long header_bits = 0;
  long long octree_bits = 0;
  long long side_bits = 0;  // per-block probability scalars (static baseline only)
  long long payload_bits = 0;
  long long occupied = 0;  // occupied voxels in the cloud
  double bpov = 0.0;       // total_bits / occupied
  long long block_count = 0;
  long long symbols = 0;
  double ce_bits = 0.0;
  double base_ce_bits = 0.0;
  std::vector<double> scale_ce_bits;
  std::vector<int> scale_edges;
  EvalCounter evals;  // whichever side produced this report
  std::uint64_t schedule_hash = 0;
  bool skip_empty_parents = false;

  bool segments_sum_to_total() const {
    return header_bits + octree_bits + side_bits + payload_bits == total_bits;
  }
};

namespace detail {

inline RateReport make_report(const BitstreamHeader& h, const CodingStats& stats,
                              std::size_t occupied, const ModelConfig& cfg) {
  RateReport r;
  r.header_bits = 8LL * static_cast<long long>(kBitstreamHeaderBytes);
  r.octree_bits = 8LL * h.octree_len;
  r.payload_bits = 8LL * h.payload_len;
  r.total_bits = r.header_bits + r.octree_bits + r.side_bits + r.payload_bits;
  r.occupied = static_cast<long long>(occupied);
  r.bpov = occupied ? static_cast<double>(r.total_bits) / static_cast<double>(occupied) : 0.0;
  r.block_count = h.block_count;
  r.symbols = stats.symbols;
  r.ce_bits = stats.ce_bits();
  r.base_ce_bits = stats.base_ce_bits;
  r.scale_ce_bits = stats.scale_ce_bits;
  for (int s = 0; s < cfg.num_scales; ++s) r.scale_edges.push_back(cfg.scale_edge(s));
  r.evals = stats.evals;
  r.schedule_hash = stats.schedule_hash;
  r.skip_empty_parents = (h.flags & kFlagSkipEmptyParents) != 0;
  return r;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string fmt_hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Whole-cloud coding.

struct EncodedCloud {
  std::vector<std::uint8_t> bytes;
  RateReport report;
};

struct DecodedCloud {
  PointCloud pc;
  RateReport report;
};

inline EncodedCloud encode_pc(const PointCloud& pc, const ModelBundle& bundle,
                              bool skip_empty_parents = false) {
  const ModelConfig& cfg = bundle.config;
  require(cfg.top_edge() == kBlockEdge,
          "encode_pc: bundle must cover " + std::to_string(kBlockEdge) + "^3 blocks");
  auto [tree, blocks] = partition(pc);
  const std::vector<std::uint8_t> tree_bytes = serialize_octree(tree);

  RangeEncoder enc;
  CodingStats stats;
  for (const BlockEntry& e : blocks)
    encode_block(e.block, bundle, enc, stats, skip_empty_parents);
  const CodedStream payload = enc.finish();

  BitstreamHeader h;
  h.flags = skip_empty_parents ? kFlagSkipEmptyParents : 0;
  h.precision_bits = static_cast<std::uint8_t>(pc.precision_bits);
  h.base_edge = static_cast<std::uint8_t>(cfg.base_edge);
  h.num_scales = static_cast<std::uint8_t>(cfg.num_scales);
  h.model_fingerprint = bundle.fingerprint();
  h.octree_len = static_cast<std::uint32_t>(tree_bytes.size());
  h.block_count = static_cast<std::uint32_t>(blocks.size());
  h.payload_len = static_cast<std::uint32_t>(payload.bytes.size());

  ByteWriter w;
  write_header(h, w);
  w.raw(tree_bytes.data(), tree_bytes.size());
  w.raw(payload.bytes.data(), payload.bytes.size());

  EncodedCloud out;
  out.bytes = w.take();
  out.report = detail::make_report(h, stats, pc.points.size(), cfg);
  return out;
}

inline DecodedCloud decode_pc(const std::vector<std::uint8_t>& bytes, const ModelBundle& bundle) {
  const ModelConfig& cfg = bundle.config;
  ByteReader r(bytes);
  const BitstreamHeader h = read_header(r);
  if (h.model_fingerprint != bundle.fingerprint())
    throw MismatchError("bitstream was coded with a different model bundle (fingerprint "
                        "mismatch)");
  if (h.base_edge != cfg.base_edge || h.num_scales != cfg.num_scales)
    throw MismatchError("bitstream scale layout does not match the bundle config");
  if (r.remaining() != static_cast<std::size_t>(h.octree_len) + h.payload_len)
    throw ParseError("bitstream length does not match its header");

  std::vector<std::uint8_t> tree_bytes(h.octree_len);
  r.raw(tree_bytes.data(), tree_bytes.size());
  HighLevelOctree tree;
  try {
    tree = deserialize_octree(tree_bytes, h.precision_bits);
  } catch (const Error& e) {
    throw ParseError(e.what());
  }
  const std::vector<std::array<int, 3>> origins = leaf_origins_raster(tree);
  if (origins.size() != h.block_count)
    throw ParseError("octree leaf count disagrees with the header block count");

  std::vector<std::uint8_t> payload(h.payload_len);
  r.raw(payload.data(), payload.size());
  RangeDecoder dec(payload.data(), payload.size());
  const bool skip = (h.flags & kFlagSkipEmptyParents) != 0;

  CodingStats stats;
  BlockSet blocks;
  blocks.reserve(origins.size());
  for (const auto& origin : origins) {
    BlockEntry e;
    e.origin = origin;
    e.block = decode_block(dec, bundle, stats, skip);
    blocks.push_back(std::move(e));
  }
  if (dec.bytes_consumed() != payload.size())
    throw ParseError("payload has trailing bytes after the last block");

  DecodedCloud out;
  out.pc = reassemble(tree, blocks);
  out.report = detail::make_report(h, stats, out.pc.points.size(), cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Static per-block baseline: one occupancy probability per block (a 16-bit
// side scalar) drives the same range coder over every voxel of the full
// block. This is the reference any learned model must beat.

inline RateReport static_baseline_encode(const PointCloud& pc) {
  auto [tree, blocks] = partition(pc);
  const std::vector<std::uint8_t> tree_bytes = serialize_octree(tree);

  RangeEncoder enc;
  long long symbols = 0;
  for (const BlockEntry& e : blocks) {
    const std::vector<std::uint8_t>& v = e.block.v;
    long long ones = 0;
    for (std::uint8_t bit : v) ones += bit;
    const std::uint16_t q =
        quantize_prob(static_cast<float>(static_cast<double>(ones) / v.size()));
    for (std::uint8_t bit : v) enc.encode(bit, q);
    symbols += static_cast<long long>(v.size());
  }
  const CodedStream payload = enc.finish();

  RateReport r;
  r.header_bits = 8LL * static_cast<long long>(kBitstreamHeaderBytes);
  r.octree_bits = 8LL * static_cast<long long>(tree_bytes.size());
  r.side_bits = 16LL * static_cast<long long>(blocks.size());
  r.payload_bits = 8LL * static_cast<long long>(payload.bytes.size());
  r.total_bits = r.header_bits + r.octree_bits + r.side_bits + r.payload_bits;
  r.occupied = static_cast<long long>(pc.points.size());
  r.bpov = r.occupied ? static_cast<double>(r.total_bits) / static_cast<double>(r.occupied) : 0.0;
  r.block_count = static_cast<long long>(blocks.size());
  r.symbols = symbols;
  r.ce_bits = enc.cross_entropy_bits();
  return r;
}

// ---------------------------------------------------------------------------
// Report emission: a machine-readable key=value form and a human table.

inline std::string rate_report_kv(const RateReport& r) {
  std::string out;
  auto kv = [&out](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
  kv("total_bits", std::to_string(r.total_bits));
  kv("header_bits", std::to_string(r.header_bits));
  kv("octree_bits", std::to_string(r.octree_bits));
  kv("side_bits", std::to_string(r.side_bits));
  kv("payload_bits", std::to_string(r.payload_bits));
  kv("occupied_voxels", std::to_string(r.occupied));
  kv("bpov", detail::fmt_double(r.bpov));
  kv("block_count", std::to_string(r.block_count));
  kv("symbols", std::to_string(r.symbols));
  kv("ce_bits", detail::fmt_double(r.ce_bits));
  kv("base_ce_bits", detail::fmt_double(r.base_ce_bits));
  for (std::size_t s = 0; s < r.scale_ce_bits.size(); ++s) {
    const std::string tag = s < r.scale_edges.size() ? std::to_string(r.scale_edges[s])
                                                     : "idx" + std::to_string(s);
    kv("scale" + tag + "_ce_bits", detail::fmt_double(r.scale_ce_bits[s]));
  }
  kv("octree_fraction",
     detail::fmt_double(r.total_bits ? static_cast<double>(r.octree_bits) / r.total_bits : 0.0));
  kv("evals_base_full", std::to_string(r.evals.base_full));
  kv("evals_base_step", std::to_string(r.evals.base_step));
  kv("evals_group", std::to_string(r.evals.group));
  kv("evals_total", std::to_string(r.evals.total()));
  kv("schedule_hash", detail::fmt_hex64(r.schedule_hash));
  kv("skip_empty_parents", r.skip_empty_parents ? "1" : "0");
  return out;
}

inline std::string rate_report_table(const RateReport& r) {
  char buf[256];
  std::string out;
  auto row = [&out, &buf](const char* label, const std::string& v) {
    std::snprintf(buf, sizeof buf, "  %-22s %s\n", label, v.c_str());
    out += buf;
  };
  out += "rate report\n";
  row("total bits", std::to_string(r.total_bits));
  row("  header", std::to_string(r.header_bits));
  row("  octree", std::to_string(r.octree_bits));
  if (r.side_bits) row("  block probabilities", std::to_string(r.side_bits));
  row("  payload", std::to_string(r.payload_bits));
  row("occupied voxels", std::to_string(r.occupied));
  row("bits per occupied voxel", detail::fmt_double(r.bpov));
  row("blocks", std::to_string(r.block_count));
  row("coded symbols", std::to_string(r.symbols));
  row("ideal payload bits", detail::fmt_double(r.ce_bits));
  if (r.evals.total()) {
    row("model evals: base full", std::to_string(r.evals.base_full));
    row("model evals: base step", std::to_string(r.evals.base_step));
    row("model evals: group", std::to_string(r.evals.group));
  }
  return out;
}

}  // namespace msvdnn

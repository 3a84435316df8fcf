// msvdnn command-line tool: voxelize point clouds, train model bundles,
// encode/decode losslessly, benchmark, and inspect bitstreams.
//
// Exit codes:
//   0  success
//   2  usage error (bad flags, missing arguments)
//   3  filesystem error (missing or unwritable files)
//   4  format error (malformed PLY/bitstream/bundle, fingerprint mismatch)
//   5  internal error
//
// The only environment variable consulted is MSVDNN_VERBOSE: set it to a
// nonzero value for progress lines on stderr. A key=value config file can
// seed any option via --config (sections name subcommands).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "msvdnn/codec.hpp"
#include "msvdnn/models.hpp"
#include "msvdnn/octree.hpp"
#include "msvdnn/pc_io.hpp"

namespace m = msvdnn;

namespace {

bool verbose() {
  const char* v = std::getenv("MSVDNN_VERBOSE");
  return v != nullptr && *v != '\0' && std::string(v) != "0";
}

void note(const std::string& line) {
  if (verbose()) std::cerr << "msvdnn: " << line << "\n";
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw m::IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::uint8_t> read_binary_file(const std::string& path) {
  const std::string s = read_text_file(path);
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

void write_file(const std::string& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw m::IoError("cannot open " + path + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw m::IoError("failed writing " + path);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void emit_report(const m::RateReport& r, const std::string& format, std::ostream& os) {
  os << (format == "table" ? m::rate_report_table(r) : m::rate_report_kv(r));
}

// ---------------------------------------------------------------------------

struct VoxelizeOpts {
  std::string input, output;
  int precision = 0;  // 0: keep/infer from the input
};

int cmd_voxelize(const VoxelizeOpts& o) {
  const std::string text = read_text_file(o.input);
  const m::RawPly raw = m::parse_ply_vertices(text);

  bool integral = true;
  double max_coord = 0.0;
  for (const auto& p : raw.points)
    for (int c = 0; c < 3; ++c) {
      if (p[c] < 0.0 || std::abs(p[c] - std::floor(p[c] + 0.5)) > 1e-9) integral = false;
      max_coord = std::max(max_coord, p[c]);
    }

  // Input that is already on a fitting integer grid passes through
  // unchanged; anything else is min-max quantized onto the 2^n grid.
  m::PointCloud pc;
  if (integral && !raw.points.empty() &&
      (o.precision == 0 || max_coord < static_cast<double>(1L << o.precision))) {
    pc = m::parse_ply(text, o.precision);
  } else {
    if (o.precision <= 0)
      throw m::ParseError("voxelize: input has real-valued coordinates; pass --precision");
    pc = m::voxelize(raw.points, o.precision);
  }

  const std::string out = m::write_ply(pc);
  write_file(o.output, out.data(), out.size());
  std::cout << "points=" << pc.points.size() << "\n"
            << "precision_bits=" << pc.precision_bits << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainOpts {
  std::vector<std::string> inputs;
  std::string synthetic;  // shape kind; empty means PLY inputs only
  int synth_blocks = 50;
  std::string output;
  std::string curve_file;
  std::string preset = "desk";
  int scales = -1;  // -1 keeps the preset's value
  std::uint64_t seed = 1;
  double lr = -1.0;  // <0 picks the mode default
  int epochs = -1;
  int batch_top = -1;
  int batch_other = -1;
  int max_steps = -1;
  bool skip_empty_parents = false;
};

m::ModelConfig config_for_preset(const std::string& preset, int scales) {
  m::ModelConfig cfg;
  if (preset == "full") cfg = m::ModelConfig::full();
  else if (preset == "desk") cfg = m::ModelConfig::desk();
  else if (preset == "tiny") cfg = m::ModelConfig::tiny();
  else throw CLI::ValidationError("--preset", "unknown preset: " + preset);
  if (scales >= 0) cfg.num_scales = scales;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainOpts& o) {
  const m::ModelConfig cfg = config_for_preset(o.preset, o.scales);

  std::vector<m::VoxelBlock> dataset;
  if (!o.synthetic.empty()) {
    m::SynthSpec spec;
    spec.kind = m::parse_kind(o.synthetic);
    spec.edge = cfg.top_edge();
    spec.count = o.synth_blocks;
    spec.seed = o.seed;
    dataset = m::synth_blocks(spec);
    note("generated " + std::to_string(dataset.size()) + " synthetic blocks (" + o.synthetic +
         ", edge " + std::to_string(spec.edge) + ")");
  }
  for (const std::string& path : o.inputs) {
    const m::PointCloud pc = m::parse_ply(read_text_file(path));
    auto [tree, blocks] = m::partition(pc);
    m::require(m::kBlockEdge == cfg.top_edge(),
               "train: this preset codes " + std::to_string(cfg.top_edge()) +
                   "^3 blocks, but clouds partition into 64^3 blocks");
    for (auto& e : blocks) dataset.push_back(std::move(e.block));
    note("loaded " + path);
  }
  m::require(!dataset.empty(), "train: no training blocks; give --input and/or --synthetic");

  m::TrainConfig tc;
  tc.seed = o.seed;
  // The full-size preset is tuned around lr 1e-5; small synthetic corpora need a faster
  // schedule, so synthetic mode defaults to 1e-3. Either way the value
  // used is echoed below.
  tc.lr = o.lr >= 0.0 ? static_cast<float>(o.lr) : (!o.synthetic.empty() ? 1e-3f : 1e-5f);
  if (o.epochs >= 0) tc.epochs = o.epochs;
  if (o.batch_top > 0) tc.batch_top = o.batch_top;
  if (o.batch_other > 0) tc.batch_other = o.batch_other;
  if (o.max_steps >= 0) tc.max_steps_per_epoch = o.max_steps;
  tc.skip_empty_parents = o.skip_empty_parents;
  tc.validate();

  m::ModelBundle bundle = m::make_bundle(cfg, o.seed);
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<m::LossCurve> curves = m::train(bundle, tc, dataset);
  const double train_seconds = seconds_since(t0);

  m::save_bundle(bundle, o.output);

  if (!o.curve_file.empty()) {
    std::ostringstream cs;
    cs << "model,epoch,bits_per_voxel\n";
    for (const auto& c : curves)
      for (std::size_t e = 0; e < c.bits_per_voxel.size(); ++e)
        cs << c.model << "," << (e + 1) << "," << fmt(c.bits_per_voxel[e]) << "\n";
    const std::string s = cs.str();
    write_file(o.curve_file, s.data(), s.size());
  }

  std::cout << "bundle=" << o.output << "\n"
            << "models=" << bundle.model_count() << "\n"
            << "blocks=" << dataset.size() << "\n"
            << "lr=" << fmt(tc.lr) << "\n"
            << "epochs=" << tc.epochs << "\n"
            << "skip_empty_parents=" << (tc.skip_empty_parents ? 1 : 0) << "\n"
            << "seed=" << o.seed << "\n"
            << "train_seconds=" << fmt(train_seconds) << "\n"
            << "fingerprint=" << m::detail::fmt_hex64(bundle.fingerprint()) << "\n";
  for (const auto& c : curves)
    if (!c.bits_per_voxel.empty())
      std::cout << "loss_" << c.model << "=" << fmt(c.bits_per_voxel.back()) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct CodecOpts {
  std::string input, output, bundle;
  bool skip_empty_parents = false;
  std::string report = "kv";
};

int cmd_encode(const CodecOpts& o) {
  const m::ModelBundle bundle = m::load_bundle(o.bundle);
  const m::PointCloud pc = m::parse_ply(read_text_file(o.input));
  const auto t0 = std::chrono::steady_clock::now();
  const m::EncodedCloud enc = m::encode_pc(pc, bundle, o.skip_empty_parents);
  const double sec = seconds_since(t0);
  write_file(o.output, enc.bytes.data(), enc.bytes.size());
  emit_report(enc.report, o.report, std::cout);
  std::cout << "encode_seconds=" << fmt(sec) << "\n";
  note("wrote " + std::to_string(enc.bytes.size()) + " bytes to " + o.output);
  return 0;
}

int cmd_decode(const CodecOpts& o) {
  const m::ModelBundle bundle = m::load_bundle(o.bundle);
  const std::vector<std::uint8_t> bytes = read_binary_file(o.input);
  const auto t0 = std::chrono::steady_clock::now();
  const m::DecodedCloud dec = m::decode_pc(bytes, bundle);
  const double sec = seconds_since(t0);
  const std::string out = m::write_ply(dec.pc);
  write_file(o.output, out.data(), out.size());
  emit_report(dec.report, o.report, std::cout);
  std::cout << "decode_seconds=" << fmt(sec) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct BenchOpts {
  std::string input, bundle;
  bool baseline = false;
  bool skip_empty_parents = false;
  std::string report = "kv";
};

int cmd_bench(const BenchOpts& o) {
  const m::ModelBundle bundle = m::load_bundle(o.bundle);
  const m::PointCloud pc = m::parse_ply(read_text_file(o.input));

  const auto t0 = std::chrono::steady_clock::now();
  const m::EncodedCloud enc = m::encode_pc(pc, bundle, o.skip_empty_parents);
  const double enc_sec = seconds_since(t0);

  const auto t1 = std::chrono::steady_clock::now();
  const m::DecodedCloud dec = m::decode_pc(enc.bytes, bundle);
  const double dec_sec = seconds_since(t1);

  emit_report(enc.report, o.report, std::cout);
  std::cout << "lossless=" << (dec.pc == pc ? 1 : 0) << "\n"
            << "encode_seconds=" << fmt(enc_sec) << "\n"
            << "decode_seconds=" << fmt(dec_sec) << "\n";

  // Decoding cost in model evaluations, against a simulated fully
  // sequential decoder that runs one pass per voxel of the block.
  const long long blocks = enc.report.block_count;
  const long long edge = bundle.config.top_edge();
  const long long pervoxel = edge * edge * edge;
  const long long grouped = dec.report.evals.total() / std::max(1LL, blocks);
  std::cout << "decode_evals_per_block=" << grouped << "\n"
            << "pervoxel_evals_per_block=" << pervoxel << "\n"
            << "eval_ratio=" << fmt(static_cast<double>(pervoxel) / static_cast<double>(grouped))
            << "\n";

  if (o.baseline) {
    const m::RateReport base = m::static_baseline_encode(pc);
    std::cout << "baseline_total_bits=" << base.total_bits << "\n"
              << "baseline_payload_bits=" << base.payload_bits << "\n"
              << "baseline_bpov=" << fmt(base.bpov) << "\n"
              << "bpov_vs_baseline="
              << fmt(base.bpov > 0 ? enc.report.bpov / base.bpov : 0.0) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct StatsOpts {
  std::string input;
};

int cmd_stats(const StatsOpts& o) {
  const std::vector<std::uint8_t> bytes = read_binary_file(o.input);
  const m::BitstreamHeader h = m::parse_bitstream_header(bytes);
  const std::size_t expect = m::kBitstreamHeaderBytes + h.octree_len + h.payload_len;
  if (bytes.size() != expect)
    throw m::ParseError("file is " + std::to_string(bytes.size()) + " bytes but the header "
                        "promises " + std::to_string(expect));

  std::cout << "version=" << h.version << "\n"
            << "flags=" << static_cast<int>(h.flags) << "\n"
            << "skip_empty_parents=" << ((h.flags & m::kFlagSkipEmptyParents) ? 1 : 0) << "\n"
            << "precision_bits=" << static_cast<int>(h.precision_bits) << "\n"
            << "base_edge=" << static_cast<int>(h.base_edge) << "\n"
            << "num_scales=" << static_cast<int>(h.num_scales) << "\n"
            << "model_fingerprint=" << m::detail::fmt_hex64(h.model_fingerprint) << "\n"
            << "block_count=" << h.block_count << "\n"
            << "header_bytes=" << m::kBitstreamHeaderBytes << "\n"
            << "octree_bytes=" << h.octree_len << "\n"
            << "payload_bytes=" << h.payload_len << "\n"
            << "file_bytes=" << bytes.size() << "\n"
            << "octree_fraction=" << fmt(static_cast<double>(h.octree_len) / bytes.size())
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msvdnn: multiscale learned lossless codec for voxelized point clouds"};
  app.require_subcommand(1);
  app.set_config("--config")->description("key=value config file; sections name subcommands");

  VoxelizeOpts vo;
  CLI::App* vox = app.add_subcommand("voxelize", "quantize a PLY cloud onto a 2^n grid");
  vox->add_option("--input", vo.input, "input PLY file")->required();
  vox->add_option("--output", vo.output, "output PLY file")->required();
  vox->add_option("--precision", vo.precision, "grid precision n (0: infer from the input)");

  TrainOpts to;
  CLI::App* train = app.add_subcommand("train", "train a model bundle");
  train->add_option("--input", to.inputs, "training PLY files (each is split into blocks)");
  train->add_option("--synthetic", to.synthetic,
                    "generate training blocks: plane, sphere-shell, box-shell, union");
  train->add_option("--blocks", to.synth_blocks, "synthetic block count")
      ->check(CLI::PositiveNumber);
  train->add_option("--output", to.output, "output bundle file")->required();
  train->add_option("--curve", to.curve_file, "write per-model loss curves (CSV)");
  train->add_option("--preset", to.preset, "model size: full, desk, tiny (default desk)");
  train->add_option("--scales", to.scales, "override the preset's grouped scale count");
  train->add_option("--seed", to.seed, "weight init and shuffling seed");
  train->add_option("--lr", to.lr, "learning rate (default 1e-5; 1e-3 with --synthetic)");
  train->add_option("--epochs", to.epochs, "training epochs");
  train->add_option("--batch-top", to.batch_top, "batch size for the largest scale");
  train->add_option("--batch-other", to.batch_other, "batch size for everything else");
  train->add_option("--max-steps", to.max_steps, "cap on optimizer steps per epoch (0: none)");
  train->add_flag("--skip-empty-parents", to.skip_empty_parents,
                  "fit group models only on children of occupied parents, matching "
                  "the encoder flag of the same name");

  CodecOpts eo;
  CLI::App* enc = app.add_subcommand("encode", "compress a voxelized PLY to an MSVX bitstream");
  enc->add_option("--input", eo.input, "input PLY file")->required();
  enc->add_option("--bundle", eo.bundle, "model bundle file")->required();
  enc->add_option("--output", eo.output, "output MSVX file")->required();
  enc->add_flag("--skip-empty-parents", eo.skip_empty_parents,
                "omit voxels whose parent in the level below is empty");
  enc->add_option("--report", eo.report, "report format: kv or table")
      ->check(CLI::IsMember({"kv", "table"}));

  CodecOpts dopts;
  CLI::App* dec = app.add_subcommand("decode", "decompress an MSVX bitstream to PLY");
  dec->add_option("--input", dopts.input, "input MSVX file")->required();
  dec->add_option("--bundle", dopts.bundle, "model bundle file")->required();
  dec->add_option("--output", dopts.output, "output PLY file")->required();
  dec->add_option("--report", dopts.report, "report format: kv or table")
      ->check(CLI::IsMember({"kv", "table"}));

  BenchOpts bo;
  CLI::App* bench = app.add_subcommand("bench", "encode + decode, report rate/time/eval counts");
  bench->add_option("--input", bo.input, "input PLY file")->required();
  bench->add_option("--bundle", bo.bundle, "model bundle file")->required();
  bench->add_flag("--baseline", bo.baseline, "also run the static per-block baseline");
  bench->add_flag("--skip-empty-parents", bo.skip_empty_parents,
                  "omit voxels whose parent in the level below is empty");
  bench->add_option("--report", bo.report, "report format: kv or table")
      ->check(CLI::IsMember({"kv", "table"}));

  StatsOpts so;
  CLI::App* stats = app.add_subcommand("stats", "dump an MSVX header and segment sizes");
  stats->add_option("--input", so.input, "input MSVX file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (vox->parsed()) return cmd_voxelize(vo);
    if (train->parsed()) return cmd_train(to);
    if (enc->parsed()) return cmd_encode(eo);
    if (dec->parsed()) return cmd_decode(dopts);
    if (bench->parsed()) return cmd_bench(bo);
    if (stats->parsed()) return cmd_stats(so);
    std::cerr << "msvdnn: no subcommand\n";
    return 2;
  } catch (const m::MismatchError& e) {
    std::cerr << "msvdnn: " << e.what() << "\n";
    return 4;
  } catch (const m::ParseError& e) {
    std::cerr << "msvdnn: " << e.what() << "\n";
    return 4;
  } catch (const m::IoError& e) {
    std::cerr << "msvdnn: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "msvdnn: internal error: " << e.what() << "\n";
    return 5;
  }
}

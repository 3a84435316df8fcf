// End-to-end tests of the msvdnn command-line tool, run as subprocesses:
// exit codes, file round trips by exact bytes, deterministic training, and
// machine-readable report output.

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "msvdnn/pc_io.hpp"

#ifndef MSVDNN_CLI_PATH
#error "MSVDNN_CLI_PATH must point at the msvdnn binary"
#endif

namespace m = msvdnn;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(MSVDNN_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  EXPECT_NE(pipe, nullptr) << cmd;
  RunResult r;
  char buf[4096];
  std::size_t got = 0;
  while ((got = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, got);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// One scratch directory for the whole binary; file names are per-test.
const std::string& work_dir() {
  static std::string dir = [] {
    char tmpl[] = "/tmp/msvdnn_cli_XXXXXX";
    const char* d = mkdtemp(tmpl);
    EXPECT_NE(d, nullptr);
    return std::string(d ? d : "/tmp");
  }();
  return dir;
}

std::string path_of(const std::string& name) { return work_dir() + "/" + name; }

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  ASSERT_TRUE(out) << path;
  out << content;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in) << path;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

// A small deterministic voxelized cloud written as PLY.
std::string make_cloud_ply(const std::string& name, std::uint64_t seed, int precision) {
  m::SynthSpec spec;
  spec.kind = m::SynthSpec::Kind::Union;
  spec.precision_bits = precision;
  spec.seed = seed;
  spec.thickness = 1.5;
  const m::PointCloud pc = m::synth_cloud(spec);
  const std::string p = path_of(name);
  write_file(p, m::write_ply(pc));
  return p;
}

// Shared tiny full-depth bundle, trained once (briefly) for all tests.
const std::string& shared_bundle() {
  static std::string path = [] {
    const std::string p = path_of("shared.msvb");
    const RunResult r = run("train --synthetic union --blocks 3 --preset tiny --scales 3 "
                            "--epochs 1 --seed 11 --output " + p);
    EXPECT_EQ(r.exit_code, 0) << r.out;
    return p;
  }();
  return path;
}

TEST(Voxelize, QuantizesRealCoordinatesAndPassesIntegerOnesThrough) {
  const std::string raw = path_of("raw.ply");
  write_file(raw,
             "ply\nformat ascii 1.0\nelement vertex 4\n"
             "property float x\nproperty float y\nproperty float z\nend_header\n"
             "0.0 0.25 1.75\n9.5 3.125 2.5\n4.75 8.875 0.125\n9.5 0.0 9.25\n");
  const std::string vox = path_of("vox.ply");
  RunResult r = run("voxelize --input " + raw + " --output " + vox + " --precision 5");
  ASSERT_EQ(r.exit_code, 0);
  auto kv = parse_kv(r.out);
  EXPECT_EQ(kv["precision_bits"], "5");

  const m::PointCloud pc = m::parse_ply(read_file(vox));
  EXPECT_EQ(pc.precision_bits, 5);
  for (const auto& p : pc.points)
    for (int c : p) EXPECT_LT(c, 32);

  // Already-voxelized input passes through byte-identically.
  const std::string vox2 = path_of("vox2.ply");
  r = run("voxelize --input " + vox + " --output " + vox2);
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_EQ(read_file(vox2), read_file(vox));
}

TEST(Voxelize, MalformedPlyFailsWithFormatExitCode) {
  const std::string bad = path_of("bad.ply");
  write_file(bad, "ply\nformat ascii 1.0\nelement vertex 2\n"
                  "property float x\nproperty float y\nproperty float z\nend_header\n"
                  "1 2 3\n");  // one vertex short
  const RunResult r = run("voxelize --input " + bad + " --output " + path_of("x.ply") +
                          " --precision 5");
  EXPECT_EQ(r.exit_code, 4);

  // Real coordinates without --precision cannot be quantized.
  const std::string real = path_of("real.ply");
  write_file(real, "ply\nformat ascii 1.0\nelement vertex 1\n"
                   "property float x\nproperty float y\nproperty float z\nend_header\n"
                   "0.5 1.5 2.25\n");
  EXPECT_EQ(run("voxelize --input " + real + " --output " + path_of("y.ply")).exit_code, 4);
}

TEST(Pipeline, EncodeDecodeRoundTripsByFileBytes) {
  const std::string cloud = make_cloud_ply("rt.ply", 42, 7);
  const std::string msvx = path_of("rt.msvx");
  const std::string back = path_of("rt_back.ply");

  RunResult enc = run("encode --input " + cloud + " --bundle " + shared_bundle() +
                      " --output " + msvx);
  ASSERT_EQ(enc.exit_code, 0) << enc.out;
  auto kv = parse_kv(enc.out);

  // Printed bpov must agree with its own total/occupied fields.
  const double total = std::stod(kv["total_bits"]);
  const double occupied = std::stod(kv["occupied_voxels"]);
  const double bpov = std::stod(kv["bpov"]);
  ASSERT_GT(occupied, 0);
  EXPECT_NEAR(bpov, total / occupied, 1e-4);

  RunResult dec = run("decode --input " + msvx + " --bundle " + shared_bundle() +
                      " --output " + back);
  ASSERT_EQ(dec.exit_code, 0) << dec.out;

  // The PLY writer is canonical, so lossless means byte-identical files.
  EXPECT_EQ(read_file(back), read_file(cloud));

  auto dkv = parse_kv(dec.out);
  EXPECT_EQ(dkv["total_bits"], kv["total_bits"]);
  EXPECT_EQ(dkv["schedule_hash"], kv["schedule_hash"]);
}

TEST(Pipeline, WrongBundleIsRefusedWithDistinctExitCode) {
  const std::string cloud = make_cloud_ply("wb.ply", 43, 7);
  const std::string msvx = path_of("wb.msvx");
  ASSERT_EQ(run("encode --input " + cloud + " --bundle " + shared_bundle() + " --output " +
                msvx).exit_code, 0);

  const std::string other = path_of("other.msvb");
  ASSERT_EQ(run("train --synthetic plane --blocks 2 --preset tiny --scales 3 --epochs 1 "
                "--seed 77 --output " + other).exit_code, 0);

  const RunResult r = run("decode --input " + msvx + " --bundle " + other + " --output " +
                          path_of("wb_back.ply"));
  EXPECT_EQ(r.exit_code, 4);
}

TEST(Pipeline, MissingFilesAndBadUsageHaveTheirOwnExitCodes) {
  EXPECT_EQ(run("decode --input " + path_of("absent.msvx") + " --bundle " + shared_bundle() +
                " --output " + path_of("z.ply")).exit_code, 3);
  EXPECT_EQ(run("encode --input onlyinput.ply").exit_code, 2);      // missing required flags
  EXPECT_EQ(run("frobnicate").exit_code, 2);                        // unknown subcommand
  EXPECT_EQ(run("--help").exit_code, 0);
}

TEST(Train, FixedSeedGivesByteIdenticalBundles) {
  const std::string a = path_of("det_a.msvb");
  const std::string b = path_of("det_b.msvb");
  const std::string c = path_of("det_c.msvb");
  const std::string cmd = "train --synthetic sphere-shell --blocks 2 --preset tiny "
                          "--epochs 1 --seed 5 --output ";
  ASSERT_EQ(run(cmd + a).exit_code, 0);
  ASSERT_EQ(run(cmd + b).exit_code, 0);
  EXPECT_EQ(read_file(a), read_file(b));

  ASSERT_EQ(run("train --synthetic sphere-shell --blocks 2 --preset tiny --epochs 1 "
                "--seed 6 --output " + c).exit_code, 0);
  EXPECT_NE(read_file(a), read_file(c));
}

TEST(Train, SkipEmptyParentsFlagChangesTheFitAndIsEchoed) {
  const std::string plain = path_of("fit_plain.msvb");
  const std::string masked = path_of("fit_masked.msvb");
  const std::string base = "train --synthetic sphere-shell --blocks 2 --preset tiny "
                           "--epochs 1 --seed 5 --output ";
  const RunResult rp = run(base + plain);
  ASSERT_EQ(rp.exit_code, 0);
  EXPECT_EQ(parse_kv(rp.out)["skip_empty_parents"], "0");

  const RunResult rm = run(base + masked + " --skip-empty-parents");
  ASSERT_EQ(rm.exit_code, 0);
  EXPECT_EQ(parse_kv(rm.out)["skip_empty_parents"], "1");
  EXPECT_NE(read_file(plain), read_file(masked));
}

TEST(Train, ZeroLearningRateKeepsLossFlatAndWritesCurves) {
  const std::string bundle = path_of("lr0.msvb");
  const std::string curve = path_of("lr0_curve.csv");
  const RunResult r = run("train --synthetic plane --blocks 2 --preset tiny --epochs 3 "
                          "--lr 0 --seed 9 --output " + bundle + " --curve " + curve);
  ASSERT_EQ(r.exit_code, 0);
  auto kv = parse_kv(r.out);
  EXPECT_EQ(kv["lr"], "0.000000");

  // Every model's loss is identical across the three epochs.
  std::istringstream in(read_file(curve));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "model,epoch,bits_per_voxel");
  std::map<std::string, std::set<std::string>> losses_by_model;
  int rows = 0;
  while (std::getline(in, line)) {
    const auto c1 = line.find(',');
    const auto c2 = line.rfind(',');
    ASSERT_NE(c1, std::string::npos);
    losses_by_model[line.substr(0, c1)].insert(line.substr(c2 + 1));
    ++rows;
  }
  EXPECT_EQ(rows, 9 * 3);  // 1 base + 8 group models, 3 epochs each
  for (const auto& [model, losses] : losses_by_model)
    EXPECT_EQ(losses.size(), 1u) << model << " loss moved with lr 0";
}

TEST(Bench, ReportsEvalRatioLosslessnessAndBaseline) {
  const std::string cloud = make_cloud_ply("bench.ply", 44, 7);
  const RunResult r = run("bench --input " + cloud + " --bundle " + shared_bundle() +
                          " --baseline");
  ASSERT_EQ(r.exit_code, 0) << r.out;
  auto kv = parse_kv(r.out);

  EXPECT_EQ(kv["lossless"], "1");
  EXPECT_EQ(kv["decode_evals_per_block"], "536");
  EXPECT_EQ(kv["pervoxel_evals_per_block"], "262144");
  EXPECT_NEAR(std::stod(kv["eval_ratio"]), 262144.0 / 536.0, 1e-3);
  EXPECT_GT(std::stod(kv["baseline_bpov"]), 0.0);
  EXPECT_GT(std::stod(kv["encode_seconds"]), 0.0);
  EXPECT_GT(std::stod(kv["decode_seconds"]), 0.0);

  // Machine-readable contract: every line is key=value.
  std::istringstream in(r.out);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EXPECT_NE(line.find('='), std::string::npos) << line;
  }
}

TEST(Stats, SegmentSizesSumToFileSize) {
  const std::string cloud = make_cloud_ply("st.ply", 45, 7);
  const std::string msvx = path_of("st.msvx");
  ASSERT_EQ(run("encode --input " + cloud + " --bundle " + shared_bundle() + " --output " +
                msvx).exit_code, 0);

  const RunResult r = run("stats --input " + msvx);
  ASSERT_EQ(r.exit_code, 0) << r.out;
  auto kv = parse_kv(r.out);
  const long header = std::stol(kv["header_bytes"]);
  const long octree = std::stol(kv["octree_bytes"]);
  const long payload = std::stol(kv["payload_bytes"]);
  const long file = std::stol(kv["file_bytes"]);
  EXPECT_EQ(header + octree + payload, file);
  EXPECT_EQ(static_cast<std::size_t>(file), read_file(msvx).size());
  EXPECT_EQ(kv["base_edge"], "8");
  EXPECT_EQ(kv["num_scales"], "3");
  EXPECT_EQ(kv["precision_bits"], "7");

  write_file(path_of("junk.msvx"), "this is not a bitstream");
  EXPECT_EQ(run("stats --input " + path_of("junk.msvx")).exit_code, 4);
}

}  // namespace

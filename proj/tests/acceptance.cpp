// Acceptance gate. Runs every advertised guarantee end to end and prints
// one PASS/FAIL line per criterion; exits nonzero if any line fails.
//
//   1. exhaustive crash matrix on a 30-op script: atomicity + fsck
//   2. torn-entry freedom under ordered persistence; relaxed model torn
//   3. recovery idempotence at every interior recovery boundary
//   4. deferred-reset hazard: a freed block is never re-owned early
//   5. engine/reference-model equivalence over random traffic
//   6. exact 64-per-block data flush accounting
//   7. durable-vs-noflush degradation report (direction asserted only)
//   8. on-image layout golden tuples, header bytes compared exactly

#include <cinttypes>
#include <cstdio>
#include <chrono>
#include <set>
#include <string>
#include <vector>

#include "durablefs/bench.hpp"
#include "durablefs/errors.hpp"
#include "durablefs/fs.hpp"
#include "durablefs/harness.hpp"
#include "durablefs/layout.hpp"
#include "durablefs/pm_device.hpp"
#include "durablefs/recovery.hpp"
#include "durablefs/wal.hpp"

using namespace durablefs;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int n, const char* name, bool ok, const std::string& detail,
            double secs) {
  std::printf("%s  %d. %-44s %s  [%.1fs]\n", ok ? "PASS" : "FAIL", n, name,
              detail.c_str(), secs);
  std::fflush(stdout);
  if (!ok) g_failures++;
}

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// The 30-op mixed workload driving criteria 1-3: multi-block writes,
// overwrites, sparse growth, namespace churn, and interleaved reads.
const char* k30 =
    "mkdir /d\n"
    "create /d/small\n"
    "open cw h1 /d/big\n"
    "write h1 0 163840 seed1\n"
    "write h1 163840 163840 seed2\n"
    "close h1\n"
    "open w h2 /d/big\n"
    "write h2 4096 8192 seed3\n"
    "read h2 0 4096\n"
    "close h2\n"
    "open cw h3 /d/f2\n"
    "write h3 0 32768 seed4\n"
    "close h3\n"
    "open r r1 /d/big\n"
    "read r1 0 327680\n"
    "close r1\n"
    "unlink /d/small\n"
    "create /d/small2\n"
    "open w h4 /d/f2\n"
    "write h4 8192 4096 seed5\n"
    "write h4 131072 4096 seed6\n"
    "close h4\n"
    "mkdir /d/e\n"
    "open cw h5 /d/e/x\n"
    "write h5 0 12288 seed7\n"
    "close h5\n"
    "unlink /d/f2\n"
    "open cw h6 /d/y\n"
    "write h6 0 4096 seed8\n"
    "close h6\n";

int height_of(uint64_t i_size) {
  if (i_size <= kBlockSize) return 0;
  uint64_t need = (i_size + kBlockSize - 1) / kBlockSize;
  int h = 0;
  for (uint64_t cap = 1; cap < need; cap *= 1024) h++;
  return h;
}

void collect_node(const PmDevice& dev, uint32_t blk, int lvl,
                  std::set<uint32_t>& out) {
  if (blk == 0) return;
  out.insert(blk);
  if (lvl == 0) return;
  for (int i = 0; i < 1024; i++) {
    uint32_t c = dev.read_u32(uint64_t(blk) * kBlockSize + uint64_t(i) * 4);
    collect_node(dev, c, lvl - 1, out);
  }
}

std::set<uint32_t> tree_blocks(const PmDevice& dev, const Inode& ino) {
  std::set<uint32_t> out;
  if (ino.i_block != 0)
    collect_node(dev, ino.i_block, height_of(ino.i_size), out);
  return out;
}

std::vector<uint8_t> read_path(DurableFs& fs, const std::string& p) {
  auto st = fs.stat(p);
  std::vector<uint8_t> out(st.size);
  if (st.size > 0) {
    auto h = fs.open(p, OpenMode::Read);
    fs.read(h, out, 0);
    fs.close(h);
  }
  return out;
}

std::vector<uint8_t> pattern_vec(uint64_t seed, uint64_t len) {
  std::vector<uint8_t> v(len);
  pattern_fill(seed, 0, v);
  return v;
}

// ---------------------------------------------------------------------------

void criterion_1_and_2(const ScriptTrace& st, MatrixReport& rep_out) {
  auto t0 = Clock::now();
  MatrixOptions opt;
  opt.model = OrderingModel::StrictOrdered;
  opt.sample = false;  // every device-op boundary
  opt.seed = 1;
  uint64_t done = 0;
  opt.on_point = [&](uint64_t, bool, const std::string&) {
    if (++done % 2000 == 0)
      std::fprintf(stderr, "  matrix: %" PRIu64 " points...\n", done);
  };
  MatrixReport rep = run_crash_matrix(st, opt);
  rep_out = rep;

  char buf[160];
  std::snprintf(buf, sizeof buf,
                "%" PRIu64 " boundaries, %" PRIu64
                " images, oracle failures %" PRIu64 ", fsck failures %" PRIu64,
                rep.points, rep.images, rep.oracle_failures,
                rep.fsck_failures);
  bool ok = rep.points == st.ops.size() + 1 && rep.oracle_failures == 0 &&
            rep.fsck_failures == 0 && rep.mount_failures == 0;
  report(1, "crash-matrix atomicity and durability", ok, buf, since(t0));
}

void criterion_2(const ScriptTrace& st, const MatrixReport& matrix) {
  auto t0 = Clock::now();
  TornProbe relaxed = probe_torn(st, OrderingModel::RelaxedSubset, 10000);
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "ordered torn findings %" PRIu64
                ", relaxed probe found one after %" PRIu64 " seeds",
                matrix.torn_findings, relaxed.seeds_tried);
  bool ok = matrix.torn_findings == 0 && relaxed.found &&
            relaxed.seeds_tried <= 10000;
  report(2, "torn-entry freedom (ordered vs relaxed)", ok, buf, since(t0));
}

void criterion_3(const ScriptTrace& st) {
  auto t0 = Clock::now();
  IdempotenceReport rep = run_recovery_idempotence(st, 1000, 7);
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "%" PRIu64 " outer points, %" PRIu64
                " interrupted recoveries, %" PRIu64 " mismatches",
                rep.outer_points, rep.inner_points, rep.mismatches);
  bool ok = rep.outer_points == 1000 && rep.inner_points > 0 &&
            rep.mismatches == 0;
  report(3, "recovery idempotence", ok, buf, since(t0));
}

void criterion_4() {
  auto t0 = Clock::now();
  bool ok = true;
  std::string why;

  // Live half: with A's free still uncommitted, B's allocation must not
  // receive A's old block, and the block must stay owned until A commits.
  PmDevice live(2ull << 20, OrderingModel::StrictOrdered);
  DurableFs lfs = DurableFs::format(live);
  {
    auto a = lfs.open("/A", OpenMode::CreateWrite);
    lfs.write(a, pattern_vec(100, kBlockSize), 0);
    lfs.close(a);
  }
  uint64_t inumA = lfs.stat("/A").inum;
  uint32_t x = lfs.txns().committed_inode(inumA).i_block;  // A's old block

  auto a2 = lfs.open("/A", OpenMode::Write);
  lfs.write(a2, pattern_vec(101, kBlockSize), 0);  // frees x, deferred
  auto b = lfs.open("/B", OpenMode::CreateWrite);
  lfs.write(b, pattern_vec(102, 4 * kBlockSize), 0);
  lfs.close(b);  // B commits first

  auto blocksB =
      tree_blocks(live, lfs.txns().committed_inode(lfs.stat("/B").inum));
  if (blocksB.count(x)) {
    ok = false;
    why = "B was granted A's still-referenced block";
  }
  uint64_t xbit = lfs.rm().fb_map_off + x / 8;
  if ((live.read_u8(xbit) >> (x % 8) & 1) != 1) {
    ok = false;
    why = "A's block was released before A committed";
  }
  lfs.close(a2);  // now the free lands
  if ((live.read_u8(xbit) >> (x % 8) & 1) != 0) {
    ok = false;
    why = "A's commit failed to release the freed block";
  }

  // Crash half: every boundary of the scripted A/B interleaving. At every
  // crash image the committed trees of /A and /B must be disjoint, every
  // reachable block owned, and fsck clean.
  WorkloadScript s = parse_script(
      "open cw a /A\n"
      "write a 0 4096 seed100\n"
      "close a\n"
      "open w a2 /A\n"
      "write a2 0 4096 seed101\n"
      "open cw b /B\n"
      "write b 0 16384 seed102\n"
      "close b\n"
      "close a2\n");
  ScriptTrace st = record_script_run(s, 2ull << 20);

  uint64_t hazard_points = 0, violations = 0;
  PmDevice replay = PmDevice::from_image(st.base_image,
                                         OrderingModel::StrictOrdered);
  for (uint64_t k = 0; k <= st.ops.size(); k++) {
    if (k > 0) replay.apply(st.ops[k - 1]);
    PmDevice img = PmDevice::from_image(replay.crash_image(1),
                                        OrderingModel::StrictOrdered);
    DurableFs fs = DurableFs::mount(img);
    if (!fsck(img).empty()) {
      violations++;
      continue;
    }
    std::set<uint32_t> ta, tb;
    if (fs.exists("/A"))
      ta = tree_blocks(img, fs.txns().committed_inode(fs.stat("/A").inum));
    if (fs.exists("/B"))
      tb = tree_blocks(img, fs.txns().committed_inode(fs.stat("/B").inum));
    for (uint32_t blk : ta)
      if (tb.count(blk)) violations++;
    for (uint32_t blk : ta) {
      uint64_t byte = fs.rm().fb_map_off + blk / 8;
      if ((img.read_u8(byte) >> (blk % 8) & 1) != 1) violations++;
    }
    for (uint32_t blk : tb) {
      uint64_t byte = fs.rm().fb_map_off + blk / 8;
      if ((img.read_u8(byte) >> (blk % 8) & 1) != 1) violations++;
    }
    // Inside the hazard window: A still shows its old version while B's
    // data is already committed.
    if (fs.exists("/A") && fs.exists("/B") &&
        read_path(fs, "/A") == pattern_vec(100, kBlockSize) &&
        read_path(fs, "/B") == pattern_vec(102, 16384))
      hazard_points++;
  }
  if (violations > 0) {
    ok = false;
    why = "crash sweep found " + std::to_string(violations) + " violations";
  }
  if (hazard_points == 0) {
    ok = false;
    why = "hazard window never observed; scenario did not exercise the race";
  }

  char buf[160];
  std::snprintf(buf, sizeof buf,
                "%zu boundaries, %" PRIu64 " in hazard window, %" PRIu64
                " violations%s%s",
                st.ops.size() + 1, hazard_points, violations,
                why.empty() ? "" : " — ", why.c_str());
  report(4, "deferred-reset hazard (A frees, B allocates)", ok, buf,
         since(t0));
}

void criterion_5() {
  auto t0 = Clock::now();
  uint64_t passed = 0;
  std::string first_fail;
  for (uint64_t seed = 1; seed <= 100; seed++) {
    EquivalenceReport rep = run_equivalence(10000, seed);
    if (rep.ok) {
      passed++;
    } else if (first_fail.empty()) {
      first_fail = "seed " + std::to_string(seed) + ": " + rep.detail;
    }
    if (seed % 10 == 0)
      std::fprintf(stderr, "  equivalence: %" PRIu64 "/100 traces...\n", seed);
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "%" PRIu64 "/100 traces matched%s%s", passed,
                first_fail.empty() ? "" : " — ", first_fail.c_str());
  report(5, "reference-model equivalence (100 x 10k ops)", passed == 100, buf,
         since(t0));
}

void criterion_6() {
  auto t0 = Clock::now();
  BenchConfig cfg;
  cfg.workload = Workload::SingleBlock;
  cfg.mode = BenchMode::Durable;
  BenchReport rep = run_bench(cfg);
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "N=%" PRIu64 " blocks, data clwbs %" PRIu64 " (want %" PRIu64
                ")",
                rep.data_blocks_written, rep.stats.clwbs_data,
                64 * rep.data_blocks_written);
  bool ok = rep.data_blocks_written == 256 &&
            rep.stats.clwbs_data == 64 * rep.data_blocks_written;
  report(6, "flush accounting: exactly 64 clwbs per block", ok, buf,
         since(t0));
}

void criterion_7() {
  auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (Workload w :
       {Workload::Fio, Workload::Fileserver, Workload::Webserver}) {
    BenchComparison cmp = run_bench_compare(w, 1.0 / 64.0, 42);
    ok = ok && cmp.overhead_positive && cmp.noflush_zero_data_clwbs &&
         cmp.content_match;
    char line[160];
    std::snprintf(line, sizeof line,
                  "%s wall %.1f%% ops %.1f%%%s", workload_name(w),
                  cmp.wall_degradation * 100.0,
                  cmp.device_op_overhead * 100.0,
                  w == Workload::Webserver ? "" : "; ");
    detail += line;
    std::fprintf(stderr, "  %s\n", cmp.text().c_str());
  }
  report(7, "durable-vs-noflush degradation (reported)", ok, detail,
         since(t0));
}

void criterion_8() {
  auto t0 = Clock::now();
  struct Golden {
    uint32_t ts;
    uint8_t bb, ib;
    uint64_t K;
    uint64_t hdr_off, data_off, data_start_block;
  };
  const Golden rows[] = {
      {4096, 1, 1, 8, 1056776, 1093632, 267},
      {8192, 2, 1, 8, 1060872, 1097728, 268},
      {4096, 1, 2, 16, 2109448, 2179072, 532},
      {16384, 4, 2, 32, 2121736, 2256896, 551},
      {2048, 1, 1, 4, 1056776, 1077248, 263},
  };
  int bad = 0;
  for (const Golden& g : rows) {
    PmDevice dev(uint64_t(g.ts) * 1024);
    MkfsOptions mo;
    mo.log_blocks = g.K;
    mo.bb = g.bb;
    mo.ib = g.ib;
    RegionMap rm = mkfs(dev, mo);
    const auto& img = dev.durable_bytes();

    // Superblock bytes 0..6: TS u32 LE, BS, BB, IB.
    uint8_t sb[7] = {uint8_t(g.ts),      uint8_t(g.ts >> 8),
                     uint8_t(g.ts >> 16), uint8_t(g.ts >> 24),
                     4,                   g.bb,
                     g.ib};
    for (int i = 0; i < 7; i++)
      if (img[size_t(i)] != sb[i]) bad++;

    // 32-byte log header at its 8-aligned offset: {K, start=0, end=0, pad}.
    uint8_t hdr[32] = {0};
    for (int i = 0; i < 8; i++) hdr[i] = uint8_t(g.K >> (8 * i));
    for (int i = 0; i < 32; i++)
      if (img[size_t(g.hdr_off) + size_t(i)] != hdr[i]) bad++;

    if (rm.log_header_off != g.hdr_off || rm.data_off != g.data_off ||
        rm.data_start_block != g.data_start_block)
      bad++;
  }
  char buf[120];
  std::snprintf(buf, sizeof buf, "5 geometry tuples, %d byte mismatches",
                bad);
  report(8, "layout golden headers byte-exact", bad == 0, buf, since(t0));
}

}  // namespace

int main() {
  std::printf("acceptance: building the 30-op trace...\n");
  std::fflush(stdout);
  ScriptTrace st30 = record_script_run(parse_script(k30), 2048ull * 1024);
  std::printf("acceptance: %zu device ops recorded\n", st30.ops.size());
  std::fflush(stdout);

  MatrixReport matrix;
  criterion_1_and_2(st30, matrix);
  criterion_2(st30, matrix);
  criterion_3(st30);
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();

  if (g_failures) {
    std::printf("acceptance: %d criterion(s) FAILED\n", g_failures);
    return 1;
  }
  std::printf("acceptance: all 8 criteria passed\n");
  return 0;
}

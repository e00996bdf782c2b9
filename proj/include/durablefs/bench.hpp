#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "durablefs/fs.hpp"
#include "durablefs/pm_device.hpp"

namespace durablefs {

// Deterministic desk-scale analogues of the measured workloads. Thread
// counts map to interleaved logical streams chosen round-robin, since
// wall-clock parallelism against a simulated device measures nothing
// physical. `scale` multiplies the full-size file sizes (default 1/64:
// fio files 256MB -> 4MB, fileserver 128KB -> 2KB, webserver 64KB -> 1KB);
// file counts and read/write ratios are kept as specified (fio 10 files
// 1:1, fileserver 1000 files 1:2, webserver 1000 files 10:1).
//
// SingleBlock is the flush-accounting profile: N single-block files are
// created during prep; the measured phase runs exactly one
// open/write-4096/close transaction per file, so a durable run must issue
// exactly 64 data-region cache-line flushes per block written.
enum class Workload { Fio, Fileserver, Webserver, SingleBlock };

enum class BenchMode { Durable, Noflush };

struct BenchConfig {
  Workload workload = Workload::Fio;
  BenchMode mode = BenchMode::Durable;
  double scale = 1.0 / 64.0;
  uint64_t seed = 42;
};

struct BenchReport {
  std::string workload;
  std::string mode;
  uint64_t measured_ops = 0;          // transactions in the measured phase
  uint64_t data_blocks_written = 0;   // full 4KB user-data blocks stored
  uint64_t bytes_written = 0;         // user bytes issued via write()
  double seconds = 0.0;
  double ops_per_sec = 0.0;
  DeviceStats stats;                  // measured-phase deltas
  uint64_t content_hash = 0;          // committed-tree hash after the run
  std::string text() const;
};

// Builds a fresh image sized for the workload, preps it, resets device
// stats, and times the measured phase. When `final_image` is non-null it
// receives the durable bytes of the device after the run.
BenchReport run_bench(const BenchConfig& cfg,
                      std::vector<uint8_t>* final_image = nullptr);

struct BenchComparison {
  BenchReport durable;
  BenchReport noflush;
  // (noflush ops/s - durable ops/s) / noflush ops/s; wall-clock, reported
  // but not asserted (simulated persistent memory has no media latency).
  double wall_degradation = 0.0;
  // (durable device ops - noflush device ops) / noflush device ops;
  // deterministic and necessarily positive: durability adds the data-block
  // flush traffic.
  double device_op_overhead = 0.0;
  bool noflush_zero_data_clwbs = false;
  bool overhead_positive = false;
  bool content_match = false;  // flushing must not change visible contents
  std::string text() const;
};

BenchComparison run_bench_compare(Workload w, double scale = 1.0 / 64.0,
                                  uint64_t seed = 42);

// Total mutating device operations (stores + nt stores + clwbs + sfences).
uint64_t device_ops(const DeviceStats& s);

// FNV-1a over every committed path, type, size, and content byte.
uint64_t fs_content_hash(DurableFs& fs);

const char* workload_name(Workload w);

}  // namespace durablefs

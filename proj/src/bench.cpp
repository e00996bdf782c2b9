#include "durablefs/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>
#include <sstream>
#include <vector>

#include "durablefs/errors.hpp"
#include "durablefs/harness.hpp"
#include "durablefs/layout.hpp"

namespace durablefs {

namespace {

struct RunCounters {
  uint64_t ops = 0;
  uint64_t data_blocks = 0;  // full, block-aligned 4KB user writes
  uint64_t bytes = 0;
};

struct WorkloadParams {
  uint64_t capacity = 0;
  uint64_t file_size = 0;
  uint64_t file_count = 0;
  uint64_t measure_ops = 0;
  uint64_t streams = 10;  // logical thread analogue, round-robin
};

uint64_t scaled_size(uint64_t full, double scale) {
  if (scale <= 0.0 || scale > 1.0)
    throw FormatError("bench scale must be in (0, 1]");
  return std::max<uint64_t>(512, uint64_t(double(full) * scale));
}

WorkloadParams params_for(Workload w, double scale) {
  WorkloadParams p;
  switch (w) {
    case Workload::Fio:
      p.file_size = std::max<uint64_t>(
          kBlockSize,
          scaled_size(256ull << 20, scale) / kBlockSize * kBlockSize);
      p.file_count = 10;
      p.measure_ops = 2048;
      p.capacity = std::max<uint64_t>(
          16ull << 20, p.file_size * p.file_count * 5 / 4 + (8ull << 20));
      break;
    case Workload::Fileserver:
      p.file_size = scaled_size(128ull << 10, scale);
      p.file_count = 1000;
      p.measure_ops = 4000;
      p.capacity = std::max<uint64_t>(
          16ull << 20, p.file_size * p.file_count * 4 + (8ull << 20));
      break;
    case Workload::Webserver:
      p.file_size = scaled_size(64ull << 10, scale);
      p.file_count = 1000;
      p.measure_ops = 4400;
      p.capacity = std::max<uint64_t>(
          16ull << 20, p.file_size * p.file_count * 4 + (8ull << 20));
      break;
    case Workload::SingleBlock:
      p.file_size = kBlockSize;
      p.file_count = 256;
      p.measure_ops = 256;
      p.capacity = 16ull << 20;
      break;
  }
  // The image is sized in whole KB.
  p.capacity = (p.capacity + 1023) / 1024 * 1024;
  return p;
}

// One open-to-close transaction writing [0, size) in 4KB chunks.
void write_whole_file(DurableFs& fs, const std::string& path, uint64_t size,
                      uint64_t seed, RunCounters* c) {
  FileHandle h = fs.open(path, OpenMode::CreateWrite);
  std::vector<uint8_t> buf(kBlockSize);
  for (uint64_t off = 0; off < size; off += kBlockSize) {
    uint64_t n = std::min<uint64_t>(kBlockSize, size - off);
    pattern_fill(seed, off, std::span(buf).subspan(0, n));
    fs.write(h, std::span<const uint8_t>(buf).subspan(0, n), off);
    if (c) {
      c->bytes += n;
      if (n == kBlockSize) ++c->data_blocks;
    }
  }
  fs.close(h);
}

void read_whole_file(DurableFs& fs, const std::string& path) {
  Stat s = fs.stat(path);
  if (s.size == 0) return;
  std::vector<uint8_t> buf(s.size);
  FileHandle h = fs.open(path, OpenMode::Read);
  fs.read(h, buf, 0);
  fs.close(h);
}

void block_write(DurableFs& fs, const std::string& path, uint64_t off,
                 uint64_t seed, RunCounters& c) {
  std::vector<uint8_t> buf(kBlockSize);
  pattern_fill(seed, off, buf);
  FileHandle h = fs.open(path, OpenMode::Write);
  fs.write(h, buf, off);
  fs.close(h);
  ++c.ops;
  c.bytes += kBlockSize;
  if (off % kBlockSize == 0) ++c.data_blocks;
}

void block_read(DurableFs& fs, const std::string& path, uint64_t off,
                RunCounters& c) {
  std::vector<uint8_t> buf(kBlockSize);
  FileHandle h = fs.open(path, OpenMode::Read);
  fs.read(h, buf, off);
  fs.close(h);
  ++c.ops;
}

std::string numbered(const std::string& prefix, uint64_t i) {
  return prefix + std::to_string(i);
}

void prep_fio(DurableFs& fs, const WorkloadParams& p, uint64_t seed) {
  fs.mkdir("/fio");
  for (uint64_t f = 0; f < p.file_count; ++f)
    write_whole_file(fs, numbered("/fio/f", f), p.file_size,
                     mix64(seed ^ (f + 1)), nullptr);
}

void measure_fio(DurableFs& fs, const WorkloadParams& p, std::mt19937_64& rng,
                 uint64_t seed, RunCounters& c) {
  const uint64_t bpf = p.file_size / kBlockSize;
  for (uint64_t i = 0; i < p.measure_ops; ++i) {
    std::string path = numbered("/fio/f", i % p.streams);
    uint64_t off = (rng() % bpf) * kBlockSize;
    if (i % 2 == 0)
      block_write(fs, path, off, mix64(seed + i), c);
    else
      block_read(fs, path, off, c);
  }
}

void prep_fileserver(DurableFs& fs, const WorkloadParams& p, uint64_t seed,
                     std::vector<std::string>& live) {
  fs.mkdir("/srv");
  for (uint64_t f = 0; f < p.file_count; ++f) {
    std::string path = numbered("/srv/f", f);
    write_whole_file(fs, path, p.file_size, mix64(seed ^ (f + 1)), nullptr);
    live.push_back(std::move(path));
  }
}

void measure_fileserver(DurableFs& fs, const WorkloadParams& p,
                        std::mt19937_64& rng, uint64_t seed,
                        std::vector<std::string>& live, RunCounters& c) {
  uint64_t next_new = 0;
  auto pick = [&]() -> const std::string& { return live[rng() % live.size()]; };
  for (uint64_t i = 0; i < p.measure_ops; ++i) {
    uint64_t r = rng() % 100;
    if (r >= 79 && live.size() <= p.file_count / 2) r = 0;  // keep pool up
    if (r < 33) {
      read_whole_file(fs, pick());
      ++c.ops;
    } else if (r < 58) {
      // 4KB append, the common server write
      const std::string& path = pick();
      uint64_t off = fs.stat(path).size;
      std::vector<uint8_t> buf(kBlockSize);
      pattern_fill(mix64(seed + i), off, buf);
      FileHandle h = fs.open(path, OpenMode::Write);
      fs.write(h, buf, off);
      fs.close(h);
      ++c.ops;
      c.bytes += kBlockSize;
      if (off % kBlockSize == 0) ++c.data_blocks;
    } else if (r < 79) {
      std::string path = numbered("/srv/n", next_new++);
      RunCounters sub;
      write_whole_file(fs, path, p.file_size, mix64(seed ^ (i + 77)), &sub);
      c.bytes += sub.bytes;
      c.data_blocks += sub.data_blocks;
      ++c.ops;
      live.push_back(std::move(path));
    } else {
      size_t vi = size_t(rng() % live.size());
      fs.unlink(live[vi]);
      live.erase(live.begin() + long(vi));
      ++c.ops;
    }
  }
}

void prep_webserver(DurableFs& fs, const WorkloadParams& p, uint64_t seed) {
  fs.mkdir("/web");
  for (uint64_t f = 0; f < p.file_count; ++f)
    write_whole_file(fs, numbered("/web/f", f), p.file_size,
                     mix64(seed ^ (f + 1)), nullptr);
  fs.create("/weblog");
}

void measure_webserver(DurableFs& fs, const WorkloadParams& p,
                       std::mt19937_64& rng, uint64_t seed, RunCounters& c) {
  uint64_t log_off = 0;
  for (uint64_t i = 0; i < p.measure_ops; ++i) {
    if (i % 11 < 10) {
      read_whole_file(fs, numbered("/web/f", rng() % p.file_count));
      ++c.ops;
    } else {
      // one 4KB log append per ten page reads
      std::vector<uint8_t> buf(kBlockSize);
      pattern_fill(mix64(seed + i), log_off, buf);
      FileHandle h = fs.open("/weblog", OpenMode::Write);
      fs.write(h, buf, log_off);
      fs.close(h);
      log_off += kBlockSize;
      ++c.ops;
      c.bytes += kBlockSize;
      ++c.data_blocks;
    }
  }
}

void prep_single_block(DurableFs& fs, const WorkloadParams& p) {
  fs.mkdir("/sb");
  for (uint64_t f = 0; f < p.file_count; ++f)
    fs.create(numbered("/sb/f", f));
}

void measure_single_block(DurableFs& fs, const WorkloadParams& p,
                          uint64_t seed, RunCounters& c) {
  for (uint64_t f = 0; f < p.file_count; ++f)
    block_write(fs, numbered("/sb/f", f), 0, mix64(seed + f), c);
}

}  // namespace

uint64_t device_ops(const DeviceStats& s) {
  return s.stores + s.nt_stores + s.clwbs + s.sfences;
}

const char* workload_name(Workload w) {
  switch (w) {
    case Workload::Fio:
      return "fio";
    case Workload::Fileserver:
      return "fileserver";
    case Workload::Webserver:
      return "webserver";
    case Workload::SingleBlock:
      return "single_block";
  }
  return "?";
}

uint64_t fs_content_hash(DurableFs& fs) {
  uint64_t h = 1469598103934665603ull;
  auto fnv = [&h](const uint8_t* b, size_t n) {
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [path, mf] : walk_tree(fs)) {
    fnv(reinterpret_cast<const uint8_t*>(path.data()), path.size());
    uint8_t t = uint8_t(mf.type);
    fnv(&t, 1);
    uint64_t sz = mf.data.size();
    fnv(reinterpret_cast<const uint8_t*>(&sz), sizeof sz);
    fnv(mf.data.data(), mf.data.size());
  }
  return h;
}

BenchReport run_bench(const BenchConfig& cfg, std::vector<uint8_t>* final_image) {
  WorkloadParams p = params_for(cfg.workload, cfg.scale);
  PmDevice dev(p.capacity, OrderingModel::StrictOrdered);
  MkfsOptions mo;
  mo.log_blocks = 64;
  mkfs(dev, mo);
  FsOptions fo;
  fo.flush_data = cfg.mode == BenchMode::Durable;
  DurableFs fs = DurableFs::mount(dev, fo);

  std::mt19937_64 rng(mix64(cfg.seed));
  std::vector<std::string> live;
  switch (cfg.workload) {
    case Workload::Fio:
      prep_fio(fs, p, cfg.seed);
      break;
    case Workload::Fileserver:
      prep_fileserver(fs, p, cfg.seed, live);
      break;
    case Workload::Webserver:
      prep_webserver(fs, p, cfg.seed);
      break;
    case Workload::SingleBlock:
      prep_single_block(fs, p);
      break;
  }

  dev.reset_stats();
  RunCounters c;
  auto t0 = std::chrono::steady_clock::now();
  switch (cfg.workload) {
    case Workload::Fio:
      measure_fio(fs, p, rng, cfg.seed, c);
      break;
    case Workload::Fileserver:
      measure_fileserver(fs, p, rng, cfg.seed, live, c);
      break;
    case Workload::Webserver:
      measure_webserver(fs, p, rng, cfg.seed, c);
      break;
    case Workload::SingleBlock:
      measure_single_block(fs, p, cfg.seed, c);
      break;
  }
  auto t1 = std::chrono::steady_clock::now();

  BenchReport r;
  r.workload = workload_name(cfg.workload);
  r.mode = cfg.mode == BenchMode::Durable ? "durable" : "noflush";
  r.measured_ops = c.ops;
  r.data_blocks_written = c.data_blocks;
  r.bytes_written = c.bytes;
  r.seconds = std::chrono::duration<double>(t1 - t0).count();
  r.ops_per_sec = double(c.ops) / std::max(r.seconds, 1e-9);
  r.stats = dev.stats();
  r.content_hash = fs_content_hash(fs);
  if (final_image) *final_image = dev.durable_bytes();
  return r;
}

std::string BenchReport::text() const {
  std::ostringstream out;
  char buf[160];
  out << "workload " << workload << ", mode " << mode << "\n";
  std::snprintf(buf, sizeof buf,
                "  measured ops      : %llu (%.0f ops/s, %.4f s)\n",
                (unsigned long long)measured_ops, ops_per_sec, seconds);
  out << buf;
  std::snprintf(buf, sizeof buf,
                "  user bytes written: %llu (%llu full 4KB blocks)\n",
                (unsigned long long)bytes_written,
                (unsigned long long)data_blocks_written);
  out << buf;
  std::snprintf(
      buf, sizeof buf,
      "  device            : stores=%llu nt=%llu clwb=%llu (data %llu) "
      "sfence=%llu bytes=%llu\n",
      (unsigned long long)stats.stores, (unsigned long long)stats.nt_stores,
      (unsigned long long)stats.clwbs, (unsigned long long)stats.clwbs_data,
      (unsigned long long)stats.sfences,
      (unsigned long long)stats.bytes_written);
  out << buf;
  std::snprintf(buf, sizeof buf, "  content hash      : %016llx\n",
                (unsigned long long)content_hash);
  out << buf;
  return out.str();
}

BenchComparison run_bench_compare(Workload w, double scale, uint64_t seed) {
  BenchComparison cmp;
  cmp.durable = run_bench(BenchConfig{w, BenchMode::Durable, scale, seed});
  cmp.noflush = run_bench(BenchConfig{w, BenchMode::Noflush, scale, seed});
  double n_ops_s = std::max(cmp.noflush.ops_per_sec, 1e-9);
  cmp.wall_degradation = (n_ops_s - cmp.durable.ops_per_sec) / n_ops_s;
  uint64_t dd = device_ops(cmp.durable.stats);
  uint64_t nd = device_ops(cmp.noflush.stats);
  cmp.device_op_overhead = nd ? (double(dd) - double(nd)) / double(nd) : 0.0;
  cmp.noflush_zero_data_clwbs = cmp.noflush.stats.clwbs_data == 0;
  cmp.overhead_positive = dd > nd;
  cmp.content_match = cmp.durable.content_hash == cmp.noflush.content_hash;
  return cmp;
}

std::string BenchComparison::text() const {
  std::ostringstream out;
  out << durable.text() << noflush.text();
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "degradation durable vs noflush: wall %.2f%%, device-op "
                "overhead %.2f%%\n",
                wall_degradation * 100.0, device_op_overhead * 100.0);
  out << buf;
  out << "noflush data clwbs zero: " << (noflush_zero_data_clwbs ? "yes" : "NO")
      << ", device-op overhead positive: " << (overhead_positive ? "yes" : "NO")
      << ", contents identical: " << (content_match ? "yes" : "NO") << "\n";
  return out.str();
}

}  // namespace durablefs

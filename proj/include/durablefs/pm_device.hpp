#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "durablefs/errors.hpp"

namespace durablefs {

inline constexpr uint64_t kCacheLineSize = 64;

// How unfenced non-temporal stores behave at a crash.
//
// StrictOrdered: a program-order prefix of the pending nt stores reaches the
// medium. This is the assumption under which a 16-byte log entry written as
// two movnti followed by a movnti of the end pointer can never be observed
// torn: if the end update persisted, both entry words did.
//
// RelaxedSubset: any subset of the pending nt stores may persist, which is
// what weaker write-combining buffers would allow. Under this model torn
// log entries are observable.
enum class OrderingModel : uint8_t {
  StrictOrdered,
  RelaxedSubset,
};

enum class LineState : uint8_t {
  Clean,     // durable content matches the last fenced write
  Dirty,     // written since the last clwb/fence; may or may not survive
  Flushing,  // clwb issued, fence pending
};

enum class OpKind : uint8_t { Store, NtStore, Clwb, Sfence };

// One recorded mutating device op, replayable with PmDevice::apply().
struct TraceOp {
  OpKind kind;
  uint64_t addr = 0;
  uint64_t value = 0;          // NtStore payload
  std::vector<uint8_t> data;   // Store payload
};

struct DeviceStats {
  uint64_t stores = 0;
  uint64_t nt_stores = 0;
  uint64_t clwbs = 0;
  uint64_t clwbs_data = 0;  // clwbs at or above the stats boundary
  uint64_t sfences = 0;
  uint64_t bytes_written = 0;
};

// Simulated byte-addressable persistent memory with explicit persistence
// ordering.
//
// Two byte images are kept: `visible` is what loads return, `durable` is
// what survives a crash. Ordinary stores land in `visible` and dirty
// 64-byte cache lines; clwb snapshots a line for writeback; sfence drains
// snapshots and pending nt stores into `durable`. crash(seed) produces the
// durable image plus a seed-chosen subset of the unfenced state, under the
// configured ordering model.
//
// Mutating ops (store/nt_store/clwb/sfence) advance op_index(); reads do
// not. A trap set at index k throws CrashInjected before executing op k,
// i.e. with exactly k ops completed.
class PmDevice {
 public:
  explicit PmDevice(uint64_t capacity_bytes,
                    OrderingModel model = OrderingModel::StrictOrdered);
  static PmDevice from_image(std::vector<uint8_t> image,
                             OrderingModel model = OrderingModel::StrictOrdered);

  uint64_t capacity() const { return capacity_; }
  OrderingModel model() const { return model_; }
  uint64_t epoch() const { return epoch_; }

  void store(uint64_t addr, std::span<const uint8_t> data);
  void store_u8(uint64_t addr, uint8_t v);
  void store_u16(uint64_t addr, uint16_t v);
  void store_u32(uint64_t addr, uint32_t v);
  void store_u64(uint64_t addr, uint64_t v);

  // 8-byte non-temporal store; addr must be 8-byte aligned. Bypasses the
  // line state entirely (no clwb needed, fence still required).
  void nt_store(uint64_t addr, uint64_t value);

  void clwb(uint64_t addr);
  void sfence();

  void read(uint64_t addr, std::span<uint8_t> out) const;
  uint8_t read_u8(uint64_t addr) const;
  uint16_t read_u16(uint64_t addr) const;
  uint32_t read_u32(uint64_t addr) const;
  uint64_t read_u64(uint64_t addr) const;

  LineState line_state(uint64_t addr) const;

  // Post-crash image: durable base plus a seed-chosen subset of dirty /
  // flushing lines, plus a seed-chosen prefix (StrictOrdered) or subset
  // (RelaxedSubset) of the pending nt stores. Deterministic in `seed`.
  std::vector<uint8_t> crash_image(uint64_t seed) const;
  PmDevice crash(uint64_t seed) const;

  // Exhaustive mode for short traces: every admissible crash image.
  // Throws LogicError if more than `limit` images would be produced.
  std::vector<std::vector<uint8_t>> enumerate_crash_images(
      size_t limit = 4096) const;

  const DeviceStats& stats() const { return stats_; }
  void reset_stats() { stats_ = DeviceStats{}; }
  // Addresses >= boundary count as data-region clwbs in stats().clwbs_data.
  void set_stats_boundary(uint64_t addr) { stats_boundary_ = addr; }
  std::string stats_report() const;

  uint64_t op_index() const { return op_index_; }
  void set_trap(uint64_t op_index) { trap_ = op_index; }
  void clear_trap() { trap_.reset(); }

  void enable_trace() { tracing_ = true; }
  void disable_trace() { tracing_ = false; }
  std::vector<TraceOp> take_trace();
  void apply(const TraceOp& op);

  const std::vector<uint8_t>& visible_bytes() const { return visible_; }
  const std::vector<uint8_t>& durable_bytes() const { return durable_; }

  // Raw image file of the durable bytes only.
  void save(const std::string& path) const;
  static PmDevice load(const std::string& path,
                       OrderingModel model = OrderingModel::StrictOrdered);

 private:
  struct LineInfo {
    LineState state = LineState::Dirty;
    // Content captured at clwb time; drains to durable at the next fence
    // even if the line is re-dirtied in between.
    std::optional<std::array<uint8_t, kCacheLineSize>> snap;
  };

  void check_range(uint64_t addr, uint64_t len) const;
  void before_mutation(OpKind kind, uint64_t addr, uint64_t value,
                       std::span<const uint8_t> data);

  uint64_t capacity_ = 0;
  OrderingModel model_;
  std::vector<uint8_t> visible_;
  std::vector<uint8_t> durable_;
  std::map<uint64_t, LineInfo> lines_;  // non-clean lines only
  std::vector<uint64_t> flush_pending_;  // lines clwb'd since the last sfence
  std::vector<std::pair<uint64_t, uint64_t>> nt_pending_;
  uint64_t epoch_ = 0;
  DeviceStats stats_;
  uint64_t stats_boundary_ = UINT64_MAX;
  uint64_t op_index_ = 0;
  std::optional<uint64_t> trap_;
  bool tracing_ = false;
  std::vector<TraceOp> trace_;
};

}  // namespace durablefs

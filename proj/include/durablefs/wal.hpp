#pragma once

#include <cstdint>
#include <set>
#include <utility>
#include <vector>

#include "durablefs/layout.hpp"
#include "durablefs/pm_device.hpp"

namespace durablefs {

enum class LogType : uint8_t {
  SetInodeBit = 1,
  ResetInodeBit = 2,
  SetFbbBit = 3,
  ResetFbbBit = 4,
  UpdBlockAddr = 5,
  UpdISize = 6,
  UpdIBlocks = 7,
  Begin = 8,
  Commit = 9,
  End = 10,
};

inline constexpr uint32_t kNoPrev = 0xFFFFFFFFu;
inline constexpr uint32_t kTxnNoMask = 0x00FFFFFFu;
// data2 value marking an UpdBlockAddr entry that retargets i_block itself
// rather than one logical block (see txn module).
inline constexpr uint16_t kRootBlockSlot = 0xFFFF;

// 16 bytes on the device, packed as two 8-byte words so one entry is exactly
// two nt stores. word0 = type | txn_no<<8 | prev<<32; word1 = data1 |
// data2<<16 | data3<<32.
struct LogEntry {
  LogType type = LogType::Begin;
  uint32_t txn_no = 0;  // 24 bits
  uint32_t prev = kNoPrev;
  uint16_t data1 = 0;
  uint16_t data2 = 0;
  uint32_t data3 = 0;

  uint64_t word0() const;
  uint64_t word1() const;
  static LogEntry from_words(uint64_t w0, uint64_t w1);  // CorruptError on bad type

  bool operator==(const LogEntry&) const = default;
};

// Circular redo log over the device's log region. Entry indices are logical
// (monotonic); the slot is index % capacity. start/end live in the log
// header and are advanced with nt stores. An append is: nt word0, nt word1,
// nt end, sfence — so a durable end index implies fully durable entries
// below it (under ordered persistence).
class Wal {
 public:
  Wal(PmDevice& dev, const RegionMap& rm);

  // Appends and fences. Runs trim() first when usage exceeds the threshold;
  // throws LogFullError if the log is still full afterwards.
  uint64_t append(const LogEntry& e);

  // Advances start past the longest prefix of entries whose transactions
  // are no longer running. Returns entries freed.
  size_t trim();

  // start := end (used after recovery has replayed everything).
  void clear();

  std::vector<std::pair<uint64_t, LogEntry>> scan() const;

  LogEntry entry_at(uint64_t idx) const;
  uint64_t word1_at(uint64_t idx) const;  // raw read-back for commit step 3

  // A transaction that aborts writes no End entry; this unblocks trim.
  void retire(uint32_t txn_no);
  bool is_running(uint32_t txn_no) const { return running_.count(txn_no) > 0; }

  uint64_t start() const { return start_; }
  uint64_t end() const { return end_; }
  uint64_t capacity() const { return rm_.log_capacity; }
  uint64_t used() const { return end_ - start_; }
  uint64_t slot_addr(uint64_t idx) const {
    return rm_.log_entry_off + (idx % rm_.log_capacity) * 16;
  }

  // Device-op indices bracketing the last append's durability window:
  // first = op index right after the end-pointer nt store, second = op index
  // after the fence. A crash strictly before first cannot expose the entry;
  // at or after second the entry is durable. The harness uses this to place
  // exact atomicity windows around commits.
  std::pair<uint64_t, uint64_t> last_append_window() const {
    return last_window_;
  }

  double trim_threshold = 0.75;

 private:
  PmDevice& dev_;
  RegionMap rm_;
  uint64_t start_ = 0;
  uint64_t end_ = 0;
  std::set<uint32_t> running_;  // Begin seen, no End, not retired
  std::pair<uint64_t, uint64_t> last_window_{0, 0};
};

}  // namespace durablefs

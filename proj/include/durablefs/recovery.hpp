#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "durablefs/layout.hpp"
#include "durablefs/pm_device.hpp"
#include "durablefs/wal.hpp"

namespace durablefs {

// Applies one redo record to PM metadata. Every write is an absolute store
// (bit values, whole fields), so replaying any suffix or the whole chain
// again lands on the same bytes. Used by both commit and recovery.
void apply_log_entry(PmDevice& dev, const RegionMap& rm, const LogEntry& e,
                     TouchedLines& touched);

struct RecoveryReport {
  uint64_t replayed = 0;   // committed but not ended: redone
  uint64_t discarded = 0;  // no commit record: dropped
  uint64_t skipped = 0;    // ended: already applied
};

// Scans the live log once, replays every transaction that has a Commit but
// no End (in commit order), appends the missing End records, then clears
// the log. Safe to interrupt at any device op and run again.
RecoveryReport recover(PmDevice& dev);

// Offline consistency check over a recovered image. Returns human-readable
// violations; empty means consistent.
std::vector<std::string> fsck(const PmDevice& dev);

}  // namespace durablefs

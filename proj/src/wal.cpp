#include "durablefs/wal.hpp"

#include "durablefs/errors.hpp"

namespace durablefs {

uint64_t LogEntry::word0() const {
  return uint64_t(uint8_t(type)) | (uint64_t(txn_no & kTxnNoMask) << 8) |
         (uint64_t(prev) << 32);
}

uint64_t LogEntry::word1() const {
  return uint64_t(data1) | (uint64_t(data2) << 16) | (uint64_t(data3) << 32);
}

LogEntry LogEntry::from_words(uint64_t w0, uint64_t w1) {
  uint8_t t = uint8_t(w0 & 0xFF);
  if (t < uint8_t(LogType::SetInodeBit) || t > uint8_t(LogType::End))
    throw CorruptError("unknown log entry type");
  LogEntry e;
  e.type = LogType(t);
  e.txn_no = uint32_t(w0 >> 8) & kTxnNoMask;
  e.prev = uint32_t(w0 >> 32);
  e.data1 = uint16_t(w1);
  e.data2 = uint16_t(w1 >> 16);
  e.data3 = uint32_t(w1 >> 32);
  return e;
}

Wal::Wal(PmDevice& dev, const RegionMap& rm) : dev_(dev), rm_(rm) {
  start_ = dev_.read_u64(rm_.log_header_off + 8);
  end_ = dev_.read_u64(rm_.log_header_off + 16);
  if (end_ < start_ || end_ - start_ > rm_.log_capacity)
    throw CorruptError("log bounds out of range");
  // Rebuild the running set: transactions with a Begin but no End in the
  // live window are candidates recovery has not yet resolved.
  for (uint64_t i = start_; i < end_; i++) {
    LogEntry e = entry_at(i);
    if (e.type == LogType::Begin) running_.insert(e.txn_no);
    if (e.type == LogType::End) running_.erase(e.txn_no);
  }
}

uint64_t Wal::append(const LogEntry& e) {
  if ((e.txn_no & ~kTxnNoMask) != 0)
    throw LogicError("txn_no exceeds 24 bits");
  if (used() >= uint64_t(double(rm_.log_capacity) * trim_threshold)) trim();
  if (used() == rm_.log_capacity)
    throw LogFullError("log full: oldest entries belong to running txns");

  uint64_t idx = end_;
  if (idx > 0xFFFFFFFFull)
    throw LogicError("log index exceeds 32-bit prev field");
  uint64_t addr = slot_addr(idx);
  dev_.nt_store(addr, e.word0());
  dev_.nt_store(addr + 8, e.word1());
  dev_.nt_store(rm_.log_header_off + 16, idx + 1);
  uint64_t after_end_store = dev_.op_index();
  dev_.sfence();
  last_window_ = {after_end_store, dev_.op_index()};
  end_ = idx + 1;

  if (e.type == LogType::Begin) running_.insert(e.txn_no);
  if (e.type == LogType::End) running_.erase(e.txn_no);
  return idx;
}

size_t Wal::trim() {
  uint64_t s = start_;
  while (s < end_) {
    LogEntry e = entry_at(s);
    if (running_.count(e.txn_no)) break;
    s++;
  }
  if (s == start_) return 0;
  size_t freed = size_t(s - start_);
  start_ = s;
  dev_.nt_store(rm_.log_header_off + 8, start_);
  dev_.sfence();
  return freed;
}

void Wal::clear() {
  start_ = end_;
  running_.clear();
  dev_.nt_store(rm_.log_header_off + 8, start_);
  dev_.sfence();
}

std::vector<std::pair<uint64_t, LogEntry>> Wal::scan() const {
  std::vector<std::pair<uint64_t, LogEntry>> out;
  out.reserve(size_t(used()));
  for (uint64_t i = start_; i < end_; i++) out.emplace_back(i, entry_at(i));
  return out;
}

LogEntry Wal::entry_at(uint64_t idx) const {
  if (idx < start_ || idx >= end_)
    throw BoundsError("log index outside live window");
  uint64_t addr = slot_addr(idx);
  return LogEntry::from_words(dev_.read_u64(addr), dev_.read_u64(addr + 8));
}

uint64_t Wal::word1_at(uint64_t idx) const {
  if (idx < start_ || idx >= end_)
    throw BoundsError("log index outside live window");
  return dev_.read_u64(slot_addr(idx) + 8);
}

void Wal::retire(uint32_t txn_no) { running_.erase(txn_no); }

}  // namespace durablefs

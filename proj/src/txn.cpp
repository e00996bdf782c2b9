#include "durablefs/txn.hpp"

#include <algorithm>

#include "durablefs/errors.hpp"
#include "durablefs/recovery.hpp"

namespace durablefs {

TxnManager::TxnManager(PmDevice& dev, const RegionMap& rm)
    : dev_(dev), rm_(rm), wal_(dev, rm) {
  fbb_.resize(rm_.fb_map_len);
  fib_.resize(rm_.fi_map_len);
  dev_.read(rm_.fb_map_off, fbb_);
  dev_.read(rm_.fi_map_off, fib_);
  block_hint_ = rm_.data_start_block;
}

bool TxnManager::ram_bit(const std::vector<uint8_t>& map, uint64_t idx) {
  return (map[idx / 8] >> (idx % 8)) & 1;
}

void TxnManager::ram_set(std::vector<uint8_t>& map, uint64_t idx, bool v) {
  uint8_t mask = uint8_t(1u << (idx % 8));
  if (v)
    map[idx / 8] |= mask;
  else
    map[idx / 8] &= uint8_t(~mask);
}

uint64_t TxnManager::find_free(const std::vector<uint8_t>& map,
                               uint64_t bit_count, uint64_t hint) const {
  for (uint64_t pass = 0; pass < 2; pass++) {
    uint64_t from = pass == 0 ? hint : 0;
    uint64_t to = pass == 0 ? bit_count : hint;
    for (uint64_t i = from; i < to; i++) {
      if (map[i / 8] == 0xFF) {
        i |= 7;  // skip the rest of a full byte
        continue;
      }
      if (!ram_bit(map, i)) return i;
    }
  }
  throw NoSpaceError("no free bits");
}

std::shared_ptr<Txn> TxnManager::begin(const std::vector<uint64_t>& inums) {
  for (uint64_t n : inums) {
    if (n >= rm_.inode_count || !ram_bit(fib_, n))
      throw NotFoundError("inode not allocated");
    if (writer_locks_.count(n)) throw BusyError("inode has an active writer");
  }
  auto txn = std::make_shared<Txn>();
  txn->txn_no = next_txn_;
  next_txn_ = (next_txn_ + 1) & kTxnNoMask;
  while (wal_.is_running(next_txn_)) next_txn_ = (next_txn_ + 1) & kTxnNoMask;

  LogEntry e;
  e.type = LogType::Begin;
  e.txn_no = txn->txn_no;
  e.prev = kNoPrev;
  txn->begin_idx = wal_.append(e);
  txn->last_entry = txn->begin_idx;

  for (uint64_t n : inums) {
    writer_locks_.insert(n);
    TxnFile tf;
    tf.inum = n;
    tf.orig = committed_inode(n);
    tf.ram = tf.orig;
    txn->files.emplace(n, std::move(tf));
  }
  return txn;
}

void TxnManager::add_file(Txn& txn, uint64_t inum, const Inode& initial) {
  if (txn.state != TxnState::Active) throw LogicError("txn not active");
  if (txn.files.count(inum)) throw LogicError("inode already in txn");
  writer_locks_.insert(inum);
  TxnFile tf;
  tf.inum = inum;
  tf.orig = Inode{};  // freshly allocated: nothing committed yet
  tf.ram = initial;
  txn.files.emplace(inum, std::move(tf));
}

uint64_t TxnManager::append_chained(Txn& txn, LogEntry e) {
  if (txn.state != TxnState::Active) throw LogicError("txn not active");
  e.txn_no = txn.txn_no;
  e.prev = uint32_t(txn.last_entry);
  uint64_t idx = wal_.append(e);
  txn.last_entry = idx;
  return idx;
}

uint32_t TxnManager::reserve_block(Txn& txn) {
  if (txn.state != TxnState::Active) throw LogicError("txn not active");
  uint64_t b = find_free(fbb_, rm_.fb_map_len * 8, block_hint_);
  ram_set(fbb_, b, true);
  block_hint_ = b + 1;
  txn.set_bits.emplace_back(BitmapKind::Block, b);
  txn.reserved_unlogged.insert(uint32_t(b));
  return uint32_t(b);
}

void TxnManager::log_block_alloc(Txn& txn, uint32_t b) {
  if (!txn.reserved_unlogged.erase(b))
    throw LogicError("block was not reserved by this txn");
  LogEntry e;
  e.type = LogType::SetFbbBit;
  e.data3 = b;
  append_chained(txn, e);
}

uint32_t TxnManager::alloc_block(Txn& txn) {
  uint32_t b = reserve_block(txn);
  log_block_alloc(txn, b);
  return b;
}

uint64_t TxnManager::alloc_inode(Txn& txn, InodeType type) {
  if (txn.state != TxnState::Active) throw LogicError("txn not active");
  uint64_t n = find_free(fib_, rm_.inode_count, inode_hint_);
  if (n > 0xFFFF)
    throw LogicError("inode number exceeds 16-bit log field");
  ram_set(fib_, n, true);
  inode_hint_ = n + 1;
  txn.set_bits.emplace_back(BitmapKind::Inode, n);
  LogEntry e;
  e.type = LogType::SetInodeBit;
  e.data1 = uint16_t(type);
  e.data3 = uint32_t(n);
  append_chained(txn, e);
  return n;
}

void TxnManager::free_block(Txn& txn, uint32_t b) {
  if (b >= rm_.total_blocks || !ram_bit(fbb_, b))
    throw LogicError("freeing a block that is not allocated");
  for (auto& [kind, bit] : txn.deferred_resets)
    if (kind == BitmapKind::Block && bit == b)
      throw LogicError("double free of block in one txn");
  LogEntry e;
  e.type = LogType::ResetFbbBit;
  e.data3 = b;
  append_chained(txn, e);
  txn.deferred_resets.emplace_back(BitmapKind::Block, b);
}

void TxnManager::free_inode(Txn& txn, uint64_t n) {
  if (n >= rm_.inode_count || !ram_bit(fib_, n))
    throw LogicError("freeing an inode that is not allocated");
  if (n == kRootInode) throw LogicError("cannot free the root inode");
  for (auto& [kind, bit] : txn.deferred_resets)
    if (kind == BitmapKind::Inode && bit == n)
      throw LogicError("double free of inode in one txn");
  LogEntry e;
  e.type = LogType::ResetInodeBit;
  e.data3 = uint32_t(n);
  append_chained(txn, e);
  txn.deferred_resets.emplace_back(BitmapKind::Inode, n);
}

void TxnManager::stage_block_addr(Txn& txn, uint64_t inum, uint16_t slot,
                                  uint32_t b) {
  auto it = txn.files.find(inum);
  if (it == txn.files.end()) throw LogicError("inode not part of txn");
  if (inum > 0xFFFF) throw LogicError("inode number exceeds 16-bit log field");
  LogEntry e;
  e.type = LogType::UpdBlockAddr;
  e.data1 = uint16_t(inum);
  e.data2 = slot;
  e.data3 = b;
  append_chained(txn, e);
  if (slot == 0 || slot == kRootBlockSlot) it->second.ram.i_block = b;
}

void TxnManager::stage_isize(Txn& txn, uint64_t inum, uint64_t size) {
  auto it = txn.files.find(inum);
  if (it == txn.files.end()) throw LogicError("inode not part of txn");
  if (inum > 0xFFFF || size > 0xFFFFFFFFull)
    throw LogicError("value exceeds log field width");
  LogEntry e;
  e.type = LogType::UpdISize;
  e.data1 = uint16_t(inum);
  e.data3 = uint32_t(size);
  append_chained(txn, e);
  it->second.ram.i_size = size;
}

void TxnManager::stage_iblocks(Txn& txn, uint64_t inum, uint32_t count) {
  auto it = txn.files.find(inum);
  if (it == txn.files.end()) throw LogicError("inode not part of txn");
  if (inum > 0xFFFF) throw LogicError("inode number exceeds 16-bit log field");
  LogEntry e;
  e.type = LogType::UpdIBlocks;
  e.data1 = uint16_t(inum);
  e.data3 = count;
  append_chained(txn, e);
  it->second.ram.i_blocks = count;
}

void TxnManager::commit(Txn& txn) {
  if (txn.state != TxnState::Active) throw LogicError("txn not active");
  if (!txn.reserved_unlogged.empty())
    throw LogicError("reserved blocks never logged");

  // (1)+(2) Commit record, fenced by the append itself.
  LogEntry ce;
  ce.type = LogType::Commit;
  ce.txn_no = txn.txn_no;
  ce.prev = uint32_t(txn.last_entry);
  uint64_t commit_idx = wal_.append(ce);
  last_commit_window_ = wal_.last_append_window();

  // (3) Read back the record's second word and compare.
  if (wal_.word1_at(commit_idx) != ce.word1())
    throw LogicError("commit record read-back mismatch");

  // (4) Apply the whole chain, oldest first, to PM metadata.
  std::vector<LogEntry> chain;
  uint64_t idx = commit_idx;
  while (true) {
    LogEntry e = wal_.entry_at(idx);
    chain.push_back(e);
    if (e.prev == kNoPrev) break;
    idx = e.prev;
  }
  std::reverse(chain.begin(), chain.end());
  TouchedLines touched;
  for (const LogEntry& e : chain) apply_log_entry(dev_, rm_, e, touched);

  // (5) Deferred resets reach the RAM copies only now.
  for (auto& [kind, bit] : txn.deferred_resets) {
    if (kind == BitmapKind::Block)
      ram_set(fbb_, bit, false);
    else {
      ram_set(fib_, bit, false);
      inode_cache_.erase(bit);
    }
  }
  for (auto& [inum, tf] : txn.files)
    if (ram_bit(fib_, inum)) inode_cache_[inum] = tf.ram;

  // (6)+(7) Flush every touched metadata line, then fence.
  touched.flush(dev_);
  dev_.sfence();

  // (8) End record: replay becomes unnecessary.
  LogEntry ee;
  ee.type = LogType::End;
  ee.txn_no = txn.txn_no;
  ee.prev = uint32_t(commit_idx);
  wal_.append(ee);

  txn.state = TxnState::Ended;
  for (auto& [inum, tf] : txn.files) writer_locks_.erase(inum);
}

void TxnManager::abort(Txn& txn) {
  if (txn.state != TxnState::Active) throw LogicError("txn not active");
  for (auto& [kind, bit] : txn.set_bits) {
    if (kind == BitmapKind::Block)
      ram_set(fbb_, bit, false);
    else
      ram_set(fib_, bit, false);
  }
  txn.state = TxnState::Aborted;
  wal_.retire(txn.txn_no);
  for (auto& [inum, tf] : txn.files) writer_locks_.erase(inum);
}

Inode TxnManager::committed_inode(uint64_t inum) {
  auto it = inode_cache_.find(inum);
  if (it != inode_cache_.end()) return it->second;
  Inode ino = inode_read(dev_, rm_, inum);
  inode_cache_.emplace(inum, ino);
  return ino;
}

bool TxnManager::inode_allocated(uint64_t n) const {
  return n < rm_.inode_count && ram_bit(fib_, n);
}

bool TxnManager::block_allocated(uint32_t b) const {
  return b < rm_.total_blocks && ram_bit(fbb_, b);
}

uint64_t TxnManager::free_data_blocks() const {
  uint64_t free = 0;
  for (uint64_t b = rm_.data_start_block; b < rm_.total_blocks; b++)
    if (!ram_bit(fbb_, b)) free++;
  return free;
}

}  // namespace durablefs

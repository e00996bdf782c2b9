#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <vector>

#include "durablefs/layout.hpp"
#include "durablefs/pm_device.hpp"
#include "durablefs/wal.hpp"

namespace durablefs {

enum class BitmapKind : uint8_t { Block, Inode };

enum class TxnState : uint8_t { Active, Ended, Aborted };

// Per-inode staging inside a transaction. pending_blocks remaps logical
// blocks to freshly allocated copies; nothing in here touches PM metadata
// until commit.
struct TxnFile {
  uint64_t inum = 0;
  Inode orig;  // committed image at begin
  Inode ram;   // staged copy
  std::map<uint64_t, uint32_t> pending_blocks;
};

struct Txn {
  uint32_t txn_no = 0;
  TxnState state = TxnState::Active;
  uint64_t begin_idx = 0;
  uint64_t last_entry = 0;  // newest log index of this txn (chain head)
  std::vector<std::pair<BitmapKind, uint64_t>> set_bits;
  std::vector<std::pair<BitmapKind, uint64_t>> deferred_resets;
  std::set<uint32_t> reserved_unlogged;  // blocks granted but not yet logged
  std::map<uint64_t, TxnFile> files;
};

// Owns the RAM copies of both bitmaps, the inode cache, the log, and the
// writer locks. Allocation grants set RAM bits immediately so concurrent
// transactions cannot receive the same block; frees are logged but deferred
// until commit, on both PM and the RAM copies.
class TxnManager {
 public:
  TxnManager(PmDevice& dev, const RegionMap& rm);

  std::shared_ptr<Txn> begin(const std::vector<uint64_t>& inums);
  // Joins a freshly allocated inode into an active transaction.
  void add_file(Txn& txn, uint64_t inum, const Inode& initial);

  // Grants a free block (RAM bit set immediately) without logging it yet;
  // the caller must flush the block's contents and then call
  // log_block_alloc before commit. Keeps data durable before the first log
  // entry that references it.
  uint32_t reserve_block(Txn& txn);
  void log_block_alloc(Txn& txn, uint32_t b);
  uint32_t alloc_block(Txn& txn);  // reserve + log in one step

  uint64_t alloc_inode(Txn& txn, InodeType type);
  void free_block(Txn& txn, uint32_t b);
  void free_inode(Txn& txn, uint64_t n);

  // slot is a logical block number, or kRootBlockSlot to retarget i_block.
  void stage_block_addr(Txn& txn, uint64_t inum, uint16_t slot, uint32_t b);
  void stage_isize(Txn& txn, uint64_t inum, uint64_t size);
  void stage_iblocks(Txn& txn, uint64_t inum, uint32_t count);

  void commit(Txn& txn);
  void abort(Txn& txn);

  Inode committed_inode(uint64_t inum);
  bool inode_allocated(uint64_t n) const;
  bool block_allocated(uint32_t b) const;
  bool writer_locked(uint64_t inum) const {
    return writer_locks_.count(inum) > 0;
  }

  uint64_t free_data_blocks() const;

  Wal& wal() { return wal_; }
  const RegionMap& rm() const { return rm_; }

  // Durability window of the most recent Commit append (see Wal).
  std::pair<uint64_t, uint64_t> last_commit_window() const {
    return last_commit_window_;
  }

 private:
  uint64_t append_chained(Txn& txn, LogEntry e);
  static bool ram_bit(const std::vector<uint8_t>& map, uint64_t idx);
  static void ram_set(std::vector<uint8_t>& map, uint64_t idx, bool v);
  uint64_t find_free(const std::vector<uint8_t>& map, uint64_t bit_count,
                     uint64_t hint) const;

  PmDevice& dev_;
  RegionMap rm_;
  Wal wal_;
  std::vector<uint8_t> fbb_;  // RAM free-block bitmap
  std::vector<uint8_t> fib_;  // RAM free-inode bitmap
  std::map<uint64_t, Inode> inode_cache_;
  std::set<uint64_t> writer_locks_;
  uint32_t next_txn_ = 1;
  uint64_t block_hint_ = 0;
  uint64_t inode_hint_ = 0;
  std::pair<uint64_t, uint64_t> last_commit_window_{0, 0};
};

}  // namespace durablefs

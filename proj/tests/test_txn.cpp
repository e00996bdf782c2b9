// Transaction manager: allocation grants vs deferred frees, commit protocol
// effects on PM metadata, abort rollback, and the free/reuse hazard where a
// block freed by an uncommitted transaction must survive a crash intact.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <vector>

#include "doctest.h"
#include "durablefs/errors.hpp"
#include "durablefs/layout.hpp"
#include "durablefs/pm_device.hpp"
#include "durablefs/recovery.hpp"
#include "durablefs/txn.hpp"
#include "durablefs/wal.hpp"

using namespace durablefs;

namespace {

struct Rig {
  PmDevice dev;
  RegionMap rm;
  TxnManager tm;
  Rig() : dev(4ull << 20), rm(mkfs(dev, {})), tm(dev, rm) {}

  uint64_t make_file() {
    auto txn = tm.begin({});
    uint64_t n = tm.alloc_inode(*txn, InodeType::File);
    tm.commit(*txn);
    return n;
  }

  std::vector<LogEntry> tail(size_t n) {
    auto all = tm.wal().scan();
    std::vector<LogEntry> out;
    for (size_t i = all.size() > n ? all.size() - n : 0; i < all.size(); ++i)
      out.push_back(all[i].second);
    return out;
  }
};

}  // namespace

TEST_CASE("begin logs a Begin entry and locks the inode") {
  Rig r;
  uint64_t f = r.make_file();
  uint64_t before = r.tm.wal().end();
  auto txn = r.tm.begin({f});
  CHECK(r.tm.wal().end() == before + 1);
  CHECK(r.tm.wal().entry_at(before).type == LogType::Begin);
  CHECK(r.tm.wal().entry_at(before).txn_no == txn->txn_no);
  CHECK(r.tm.writer_locked(f));

  CHECK_THROWS_AS(r.tm.begin({f}), BusyError);       // second writer
  CHECK_THROWS_AS(r.tm.begin({9999}), NotFoundError);  // never allocated

  auto other = r.tm.begin({});  // distinct transaction number
  CHECK(other->txn_no != txn->txn_no);
  r.tm.abort(*other);
  r.tm.abort(*txn);
  CHECK(!r.tm.writer_locked(f));
}

TEST_CASE("allocation sets the RAM bit immediately; no double grant") {
  Rig r;
  auto a = r.tm.begin({});
  auto b = r.tm.begin({});
  std::vector<uint32_t> blocks;
  for (int i = 0; i < 8; ++i) {
    blocks.push_back(r.tm.alloc_block(*a));
    blocks.push_back(r.tm.alloc_block(*b));
  }
  std::sort(blocks.begin(), blocks.end());
  CHECK(std::adjacent_find(blocks.begin(), blocks.end()) == blocks.end());
  for (uint32_t blk : blocks) CHECK(blk >= r.rm.data_start_block);

  // PM bitmap is untouched until commit.
  for (uint32_t blk : blocks) CHECK(!pm_get_bit(r.dev, r.rm.fb_map_off, blk));
  r.tm.commit(*a);
  r.tm.abort(*b);
}

TEST_CASE("abort returns grants to the free pool and leaves PM untouched") {
  Rig r;
  auto before_img = r.dev.durable_bytes();
  auto txn = r.tm.begin({});
  uint32_t blk = r.tm.alloc_block(*txn);
  uint64_t ino = r.tm.alloc_inode(*txn, InodeType::File);
  CHECK(r.tm.block_allocated(blk));
  CHECK(r.tm.inode_allocated(ino));
  r.tm.abort(*txn);
  CHECK(!r.tm.block_allocated(blk));
  CHECK(!r.tm.inode_allocated(ino));
  CHECK_THROWS_AS(r.tm.commit(*txn), LogicError);  // already aborted

  // Only log bytes moved; bitmaps and inode table are as before.
  auto after_img = r.dev.durable_bytes();
  CHECK(std::equal(after_img.begin() + long(r.rm.fb_map_off),
                   after_img.begin() + long(r.rm.log_off),
                   before_img.begin() + long(r.rm.fb_map_off)));

  // The freed block is genuinely reusable: a fresh transaction sweeping the
  // pool receives it again (the allocator's rotating hint may hand out
  // other blocks first).
  auto again = r.tm.begin({});
  bool seen = false;
  try {
    while (!seen) seen = r.tm.alloc_block(*again) == blk;
  } catch (const NoSpaceError&) {
  }
  CHECK(seen);
  r.tm.abort(*again);
}

TEST_CASE("commit applies staged inode updates and bitmap changes to PM") {
  Rig r;
  auto txn = r.tm.begin({});
  uint64_t f = r.tm.alloc_inode(*txn, InodeType::File);
  r.tm.add_file(*txn, f, Inode{0, 0, 0, InodeType::File});
  uint32_t blk = r.tm.alloc_block(*txn);
  r.tm.stage_block_addr(*txn, f, kRootBlockSlot, blk);
  r.tm.stage_isize(*txn, f, 4096);
  r.tm.stage_iblocks(*txn, f, 1);
  r.tm.commit(*txn);
  CHECK(txn->state == TxnState::Ended);
  CHECK_THROWS_AS(r.tm.commit(*txn), LogicError);  // double commit

  CHECK(pm_get_bit(r.dev, r.rm.fi_map_off, f));
  CHECK(pm_get_bit(r.dev, r.rm.fb_map_off, blk));
  Inode got = inode_read(r.dev, r.rm, f);
  CHECK(got.type == InodeType::File);
  CHECK(got.i_block == blk);
  CHECK(got.i_size == 4096);
  CHECK(got.i_blocks == 1);

  // Chain tail: Commit then End, back-chained.
  auto entries = r.tm.wal().scan();
  REQUIRE(entries.size() >= 2);
  CHECK(entries[entries.size() - 2].second.type == LogType::Commit);
  CHECK(entries.back().second.type == LogType::End);
  CHECK(entries.back().second.txn_no == txn->txn_no);
}

TEST_CASE("no PM metadata byte changes before the commit record is durable") {
  Rig r;
  auto base = r.dev.durable_bytes();
  auto txn = r.tm.begin({});
  uint64_t f = r.tm.alloc_inode(*txn, InodeType::File);
  r.tm.add_file(*txn, f, Inode{0, 0, 0, InodeType::File});
  uint32_t blk = r.tm.alloc_block(*txn);
  r.tm.stage_block_addr(*txn, f, kRootBlockSlot, blk);
  r.tm.stage_isize(*txn, f, 512);
  r.tm.stage_iblocks(*txn, f, 1);

  // Still active: every durable metadata byte outside the log region is
  // exactly the pre-transaction image.
  auto now = r.dev.durable_bytes();
  CHECK(std::equal(now.begin(), now.begin() + long(r.rm.log_off),
                   base.begin()));
  r.tm.commit(*txn);
  auto committed = r.dev.durable_bytes();
  CHECK(!std::equal(committed.begin(), committed.begin() + long(r.rm.log_off),
                    base.begin()));
}

TEST_CASE("free is logged immediately but deferred on both PM and RAM maps") {
  Rig r;

  // Commit a file owning one block.
  auto setup = r.tm.begin({});
  uint64_t f = r.tm.alloc_inode(*setup, InodeType::File);
  r.tm.add_file(*setup, f, Inode{0, 0, 0, InodeType::File});
  uint32_t blk = r.tm.alloc_block(*setup);
  r.tm.stage_block_addr(*setup, f, kRootBlockSlot, blk);
  r.tm.stage_isize(*setup, f, 100);
  r.tm.stage_iblocks(*setup, f, 1);
  r.tm.commit(*setup);

  auto txn = r.tm.begin({f});
  r.tm.free_block(*txn, blk);
  CHECK_THROWS_AS(r.tm.free_block(*txn, blk), LogicError);  // double free
  // Deferred: the block still reads allocated everywhere, so no concurrent
  // transaction can be granted it.
  CHECK(r.tm.block_allocated(blk));
  CHECK(pm_get_bit(r.dev, r.rm.fb_map_off, blk));
  auto other = r.tm.begin({});
  for (int i = 0; i < 4; ++i) CHECK(r.tm.alloc_block(*other) != blk);
  r.tm.abort(*other);

  r.tm.stage_block_addr(*txn, f, kRootBlockSlot, 0);
  r.tm.stage_isize(*txn, f, 0);
  r.tm.stage_iblocks(*txn, f, 0);
  r.tm.commit(*txn);
  CHECK(!r.tm.block_allocated(blk));
  CHECK(!pm_get_bit(r.dev, r.rm.fb_map_off, blk));

  CHECK_THROWS_AS(
      [&] {
        auto t2 = r.tm.begin({f});
        r.tm.free_block(*t2, blk);  // already free
      }(),
      LogicError);
}

TEST_CASE("crash between Commit and End replays to the uninterrupted image") {
  auto run = [](bool inject) {
    PmDevice dev(4ull << 20);
    RegionMap rm = mkfs(dev, {});
    TxnManager tm(dev, rm);
    auto txn = tm.begin({});
    uint64_t f = tm.alloc_inode(*txn, InodeType::File);
    tm.add_file(*txn, f, Inode{0, 0, 0, InodeType::File});
    uint32_t blk = tm.alloc_block(*txn);
    tm.stage_block_addr(*txn, f, kRootBlockSlot, blk);
    tm.stage_isize(*txn, f, 4096);
    tm.stage_iblocks(*txn, f, 1);
    if (!inject) {
      tm.commit(*txn);
      recover(dev);  // clears the log, as a post-crash mount would
      return dev.durable_bytes();
    }
    // Stop right after the Commit append's fence (3 nt stores + sfence):
    // the record is durable but nothing has been applied yet.
    bool crashed = false;
    dev.set_trap(dev.op_index() + 4);
    try {
      tm.commit(*txn);
    } catch (const CrashInjected&) {
      crashed = true;
    }
    REQUIRE(crashed);
    PmDevice after = dev.crash(7);
    RecoveryReport rep = recover(after);
    CHECK(rep.replayed == 1);
    return after.durable_bytes();
  };
  auto clean = run(false);
  auto recovered = run(true);
  RegionMap rm = compute_region_map(Superblock{4096, 4, 1, 1}, 8);
  // Metadata regions identical; (data region untouched by this txn anyway).
  CHECK(std::equal(clean.begin(), clean.begin() + long(rm.data_off),
                   recovered.begin()));
}

TEST_CASE("crash before the commit record leaves the transaction aborted") {
  PmDevice dev(4ull << 20);
  RegionMap rm = mkfs(dev, {});
  auto base = dev.durable_bytes();
  TxnManager tm(dev, rm);
  auto txn = tm.begin({});
  uint64_t f = tm.alloc_inode(*txn, InodeType::File);
  tm.add_file(*txn, f, Inode{0, 0, 0, InodeType::File});
  uint32_t blk = tm.alloc_block(*txn);
  tm.stage_block_addr(*txn, f, kRootBlockSlot, blk);

  PmDevice after = dev.crash(3);
  RecoveryReport rep = recover(after);
  CHECK(rep.discarded == 1);
  CHECK(rep.replayed == 0);
  CHECK(!pm_get_bit(after, rm.fi_map_off, f));
  CHECK(!pm_get_bit(after, rm.fb_map_off, blk));
  // Metadata equals the pre-transaction image (log region may differ).
  CHECK(std::equal(after.durable_bytes().begin(),
                   after.durable_bytes().begin() + long(rm.log_off),
                   base.begin()));
}

TEST_CASE("free/reuse hazard: an uncommitted free never leaks its block") {
  // A frees x but never commits; B allocates and commits. x must not be
  // granted to B, and after a crash x is still owned by A's file.
  PmDevice dev(4ull << 20);
  RegionMap rm = mkfs(dev, {});
  TxnManager tm(dev, rm);

  auto setup = tm.begin({});
  uint64_t fa = tm.alloc_inode(*setup, InodeType::File);
  tm.add_file(*setup, fa, Inode{0, 0, 0, InodeType::File});
  uint32_t x = tm.alloc_block(*setup);
  tm.stage_block_addr(*setup, fa, kRootBlockSlot, x);
  tm.stage_isize(*setup, fa, 4096);
  tm.stage_iblocks(*setup, fa, 1);
  tm.commit(*setup);

  auto a = tm.begin({fa});
  tm.free_block(*a, x);  // logged, deferred

  auto b = tm.begin({});
  uint64_t fb = tm.alloc_inode(*b, InodeType::File);
  tm.add_file(*b, fb, Inode{0, 0, 0, InodeType::File});
  uint32_t interior = tm.alloc_block(*b);
  CHECK(interior != x);
  std::vector<uint32_t> b_blocks;
  for (int i = 0; i < 16; ++i) b_blocks.push_back(tm.alloc_block(*b));
  for (uint32_t blk : b_blocks) CHECK(blk != x);
  // Reference every grant through a height-one tree so the committed file
  // owns all 17 blocks. The interior node is flushed like any data block.
  std::vector<uint8_t> node(kBlockSize, 0);
  for (int i = 0; i < 16; ++i)
    for (int by = 0; by < 4; ++by)
      node[size_t(i) * 4 + size_t(by)] = uint8_t(b_blocks[size_t(i)] >> (8 * by));
  dev.store(uint64_t(interior) * kBlockSize, node);
  for (uint64_t l = 0; l < kBlockSize / 64; ++l)
    dev.clwb(uint64_t(interior) * kBlockSize + l * 64);
  dev.sfence();
  tm.stage_block_addr(*b, fb, kRootBlockSlot, interior);
  tm.stage_isize(*b, fb, 16 * kBlockSize);
  tm.stage_iblocks(*b, fb, 16);
  tm.commit(*b);

  // Crash with A unfinished; after recovery A is discarded, so x must
  // still be marked allocated and referenced by fa.
  PmDevice after = dev.crash(11);
  RecoveryReport rep = recover(after);
  CHECK(rep.discarded == 1);  // A
  CHECK(pm_get_bit(after, rm.fb_map_off, x));
  CHECK(inode_read(after, rm, fa).i_block == x);
  CHECK(pm_get_bit(after, rm.fb_map_off, b_blocks[0]));
  // Full fsck is not applicable here: this rig links no directory entries,
  // so every inode is "unreachable" by construction. Namespace-level crash
  // consistency is covered by the fs and harness suites.
}

TEST_CASE("inode allocation logs the type for replay") {
  Rig r;
  auto txn = r.tm.begin({});
  uint64_t d = r.tm.alloc_inode(*txn, InodeType::Directory);
  r.tm.commit(*txn);
  CHECK(inode_read(r.dev, r.rm, d).type == InodeType::Directory);
  CHECK(r.tm.committed_inode(d).type == InodeType::Directory);
}

TEST_CASE("staging values that exceed log field widths is a hard error") {
  Rig r;
  auto txn = r.tm.begin({});
  uint64_t f = r.tm.alloc_inode(*txn, InodeType::File);
  r.tm.add_file(*txn, f, Inode{0, 0, 0, InodeType::File});
  CHECK_THROWS_AS(r.tm.stage_isize(*txn, f, 5ull << 32), LogicError);
  CHECK_THROWS_AS(r.tm.stage_block_addr(*txn, 0x10000, 0, 1), LogicError);
  r.tm.abort(*txn);
}

TEST_CASE("commit window matches the Commit append's device-op bracket") {
  Rig r;
  auto txn = r.tm.begin({});
  uint64_t f = r.tm.alloc_inode(*txn, InodeType::File);
  r.tm.add_file(*txn, f, Inode{0, 0, 0, InodeType::File});
  r.tm.stage_isize(*txn, f, 0);
  r.tm.commit(*txn);
  auto [lo, hi] = r.tm.last_commit_window();
  CHECK(lo < hi);
  CHECK(hi <= r.dev.op_index());
  // Replaying to `hi` must make the commit durable; to `lo` it may not be,
  // but at lo-1 it cannot be. Verified exhaustively by the crash matrix;
  // here just sanity-check ordering.
  CHECK(hi - lo == 1);  // nt end -> sfence
}

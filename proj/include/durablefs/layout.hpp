#pragma once

#include <cstdint>
#include <set>
#include <span>

#include "durablefs/pm_device.hpp"

namespace durablefs {

inline constexpr uint32_t kBlockSize = 4096;
inline constexpr uint32_t kInodeSize = 32;
inline constexpr uint32_t kRootInode = 0;
inline constexpr uint32_t kLogHeaderSize = 32;

enum class InodeType : uint8_t {
  Free = 0,
  File = 1,
  Directory = 2,
  Symlink = 3,  // type tag reserved; no operations implemented
};

struct Inode {
  uint32_t i_blocks = 0;  // data (leaf) blocks in use
  uint32_t i_block = 0;   // root of the block-reference tree, 0 = none
  uint64_t i_size = 0;    // bytes
  InodeType type = InodeType::Free;

  bool operator==(const Inode&) const = default;
};

void encode_inode(const Inode& ino, std::span<uint8_t, kInodeSize> out);
Inode decode_inode(std::span<const uint8_t, kInodeSize> in);

// Bytes 0..6 of the image: TS (u32 LE, total KB), BS, BB, IB.
struct Superblock {
  uint32_t ts = 0;
  uint8_t bs = 4;
  uint8_t bb = 1;
  uint8_t ib = 1;
};

// Computed byte extents of every on-image region. All multi-byte fields are
// little-endian. The free block bitmap starts at byte 7; subsequent regions
// are packed with no padding, so they are not block-aligned. The log region
// begins at the inode table's end; inside it, the 32-byte log header sits at
// the first 8-byte-aligned offset (movnti alignment) and the 16-byte entry
// array follows the header.
struct RegionMap {
  uint64_t capacity = 0;
  Superblock sb;
  uint64_t total_blocks = 0;

  uint64_t fb_map_off = 7;
  uint64_t fb_map_len = 0;
  uint64_t fi_map_off = 0;
  uint64_t fi_map_len = 0;
  uint64_t inode_count = 0;
  uint64_t itable_off = 0;
  uint64_t itable_len = 0;
  uint64_t log_off = 0;
  uint64_t log_blocks = 0;
  uint64_t log_header_off = 0;
  uint64_t log_entry_off = 0;
  uint64_t log_capacity = 0;  // entries
  uint64_t data_off = 0;
  uint64_t data_start_block = 0;
  uint64_t data_blocks = 0;

  uint64_t inode_addr(uint64_t n) const { return itable_off + n * kInodeSize; }
};

RegionMap compute_region_map(const Superblock& sb, uint64_t log_blocks);

struct MkfsOptions {
  uint64_t log_blocks = 8;
  uint8_t bb = 0;  // 0 = derive from capacity
  uint8_t ib = 1;
};

// Formats the device: superblock, bitmaps (metadata blocks pre-allocated),
// zeroed inode table, log header, root directory inode. Everything written
// is flushed and fenced before return.
RegionMap mkfs(PmDevice& dev, const MkfsOptions& opts);

// Validates the superblock and log header and returns the region map.
// Does not run recovery.
RegionMap read_region_map(const PmDevice& dev);

Inode inode_read(const PmDevice& dev, const RegionMap& rm, uint64_t n);
// Plain stores only; caller is responsible for flush/fence.
void inode_write(PmDevice& dev, const RegionMap& rm, uint64_t n,
                 const Inode& ino);

// Accumulates cache lines touched by commit/recovery metadata writes so
// they can be flushed once, deduplicated.
class TouchedLines {
 public:
  void add(uint64_t addr, uint64_t len);
  void flush(PmDevice& dev) const;
  size_t count() const { return lines_.size(); }

 private:
  std::set<uint64_t> lines_;
};

bool pm_get_bit(const PmDevice& dev, uint64_t map_off, uint64_t idx);
void pm_set_bit(PmDevice& dev, uint64_t map_off, uint64_t idx, bool value,
                TouchedLines* touched);

}  // namespace durablefs

#include "durablefs/layout.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#include "durablefs/errors.hpp"

namespace durablefs {

namespace {

uint64_t align8(uint64_t x) { return (x + 7) & ~uint64_t{7}; }
uint64_t align_block(uint64_t x) {
  return (x + kBlockSize - 1) & ~uint64_t{kBlockSize - 1};
}

}  // namespace

void encode_inode(const Inode& ino, std::span<uint8_t, kInodeSize> out) {
  std::fill(out.begin(), out.end(), uint8_t{0});
  for (int i = 0; i < 4; i++) out[i] = uint8_t(ino.i_blocks >> (8 * i));
  for (int i = 0; i < 4; i++) out[4 + i] = uint8_t(ino.i_block >> (8 * i));
  for (int i = 0; i < 8; i++) out[8 + i] = uint8_t(ino.i_size >> (8 * i));
  out[16] = uint8_t(ino.type);
}

Inode decode_inode(std::span<const uint8_t, kInodeSize> in) {
  Inode ino;
  for (int i = 0; i < 4; i++) ino.i_blocks |= uint32_t(in[i]) << (8 * i);
  for (int i = 0; i < 4; i++) ino.i_block |= uint32_t(in[4 + i]) << (8 * i);
  for (int i = 0; i < 8; i++) ino.i_size |= uint64_t(in[8 + i]) << (8 * i);
  ino.type = InodeType(in[16]);
  return ino;
}

RegionMap compute_region_map(const Superblock& sb, uint64_t log_blocks) {
  if (sb.bs != 4) throw FormatError("unsupported block size");
  if (sb.bb == 0 || sb.ib == 0) throw FormatError("empty bitmap region");
  if (log_blocks == 0) throw FormatError("empty log region");

  RegionMap rm;
  rm.sb = sb;
  rm.capacity = uint64_t(sb.ts) * 1024;
  rm.total_blocks = rm.capacity / kBlockSize;

  rm.fb_map_off = 7;
  rm.fb_map_len = uint64_t(sb.bs) * 1024 * sb.bb;
  rm.fi_map_off = rm.fb_map_off + rm.fb_map_len;
  rm.fi_map_len = uint64_t(sb.bs) * 1024 * sb.ib;
  rm.inode_count = rm.fi_map_len * 8;
  rm.itable_off = rm.fi_map_off + rm.fi_map_len;
  rm.itable_len = rm.inode_count * kInodeSize;
  rm.log_off = rm.itable_off + rm.itable_len;
  rm.log_blocks = log_blocks;
  rm.log_header_off = align8(rm.log_off);
  rm.log_entry_off = rm.log_header_off + kLogHeaderSize;
  uint64_t log_end = rm.log_off + log_blocks * kBlockSize;
  rm.log_capacity = (log_end - rm.log_entry_off) / 16;
  rm.data_off = align_block(log_end);
  rm.data_start_block = rm.data_off / kBlockSize;
  rm.data_blocks = rm.total_blocks > rm.data_start_block
                       ? rm.total_blocks - rm.data_start_block
                       : 0;

  if (rm.fb_map_len * 8 < rm.total_blocks)
    throw FormatError("block bitmap too small for device");
  if (rm.data_blocks == 0) throw FormatError("no room for data blocks");
  return rm;
}

RegionMap mkfs(PmDevice& dev, const MkfsOptions& opts) {
  uint64_t capacity = dev.capacity();
  uint64_t total_blocks = capacity / kBlockSize;
  if (capacity / 1024 > UINT32_MAX) throw FormatError("device too large");

  Superblock sb;
  sb.ts = uint32_t(capacity / 1024);
  sb.bs = 4;
  uint64_t bits_per_bitmap_block = uint64_t(sb.bs) * 1024 * 8;
  uint8_t bb = opts.bb;
  if (bb == 0) {
    uint64_t need =
        (total_blocks + bits_per_bitmap_block - 1) / bits_per_bitmap_block;
    if (need > 255) throw FormatError("device too large for block bitmap");
    bb = uint8_t(need);
  }
  sb.bb = bb;
  sb.ib = opts.ib;

  RegionMap rm = compute_region_map(sb, opts.log_blocks);

  // Zero the whole metadata area, then fill in the nonzero fields. Mkfs on
  // a previously used device must not leave stale metadata behind.
  {
    std::vector<uint8_t> zeros(kBlockSize, 0);
    for (uint64_t off = 0; off < rm.data_off; off += kBlockSize)
      dev.store(off, std::span<const uint8_t>(
                         zeros.data(), std::min<uint64_t>(kBlockSize,
                                                          rm.data_off - off)));
  }

  dev.store_u32(0, sb.ts);
  dev.store_u8(4, sb.bs);
  dev.store_u8(5, sb.bb);
  dev.store_u8(6, sb.ib);

  // Metadata blocks are permanently allocated; bitmap bits past the end of
  // the device are set so the allocator never hands them out.
  for (uint64_t b = 0; b < rm.data_start_block; b++)
    pm_set_bit(dev, rm.fb_map_off, b, true, nullptr);
  for (uint64_t b = rm.total_blocks; b < rm.fb_map_len * 8; b++)
    pm_set_bit(dev, rm.fb_map_off, b, true, nullptr);

  pm_set_bit(dev, rm.fi_map_off, kRootInode, true, nullptr);
  Inode root;
  root.type = InodeType::Directory;
  inode_write(dev, rm, kRootInode, root);

  dev.store_u64(rm.log_header_off, rm.log_blocks);
  dev.store_u64(rm.log_header_off + 8, 0);   // start
  dev.store_u64(rm.log_header_off + 16, 0);  // end
  dev.store_u64(rm.log_header_off + 24, 0);

  uint64_t flush_end = align_block(rm.data_off);
  for (uint64_t line = 0; line < flush_end; line += kCacheLineSize)
    dev.clwb(line);
  dev.sfence();
  return rm;
}

RegionMap read_region_map(const PmDevice& dev) {
  if (dev.capacity() < kBlockSize) throw FormatError("device too small");
  Superblock sb;
  sb.ts = dev.read_u32(0);
  sb.bs = dev.read_u8(4);
  sb.bb = dev.read_u8(5);
  sb.ib = dev.read_u8(6);
  if (uint64_t(sb.ts) * 1024 != dev.capacity())
    throw FormatError("superblock size disagrees with device");
  if (sb.bs != 4) throw FormatError("unsupported block size");
  if (sb.bb == 0 || sb.ib == 0) throw FormatError("corrupt superblock");

  // The log header's position depends only on the superblock; the log's
  // block count is the header's first word.
  RegionMap probe = compute_region_map(sb, 1);
  if (probe.log_header_off + kLogHeaderSize > dev.capacity())
    throw FormatError("log header out of range");
  uint64_t log_blocks = dev.read_u64(probe.log_header_off);
  if (log_blocks == 0 || log_blocks > probe.total_blocks)
    throw FormatError("corrupt log header");

  RegionMap rm = compute_region_map(sb, log_blocks);
  uint64_t start = dev.read_u64(rm.log_header_off + 8);
  uint64_t end = dev.read_u64(rm.log_header_off + 16);
  if (end < start || end - start > rm.log_capacity)
    throw FormatError("corrupt log bounds");
  return rm;
}

Inode inode_read(const PmDevice& dev, const RegionMap& rm, uint64_t n) {
  if (n >= rm.inode_count) throw BoundsError("inode number out of range");
  std::array<uint8_t, kInodeSize> buf;
  dev.read(rm.inode_addr(n), buf);
  return decode_inode(buf);
}

void inode_write(PmDevice& dev, const RegionMap& rm, uint64_t n,
                 const Inode& ino) {
  if (n >= rm.inode_count) throw BoundsError("inode number out of range");
  std::array<uint8_t, kInodeSize> buf;
  encode_inode(ino, buf);
  dev.store(rm.inode_addr(n), buf);
}

void TouchedLines::add(uint64_t addr, uint64_t len) {
  if (len == 0) return;
  uint64_t first = addr & ~uint64_t{kCacheLineSize - 1};
  uint64_t last = (addr + len - 1) & ~uint64_t{kCacheLineSize - 1};
  for (uint64_t line = first; line <= last; line += kCacheLineSize)
    lines_.insert(line);
}

void TouchedLines::flush(PmDevice& dev) const {
  for (uint64_t line : lines_) dev.clwb(line);
}

bool pm_get_bit(const PmDevice& dev, uint64_t map_off, uint64_t idx) {
  uint8_t byte = dev.read_u8(map_off + idx / 8);
  return (byte >> (idx % 8)) & 1;
}

void pm_set_bit(PmDevice& dev, uint64_t map_off, uint64_t idx, bool value,
                TouchedLines* touched) {
  uint64_t addr = map_off + idx / 8;
  uint8_t byte = dev.read_u8(addr);
  uint8_t mask = uint8_t(1u << (idx % 8));
  uint8_t next = value ? uint8_t(byte | mask) : uint8_t(byte & ~mask);
  if (next != byte) dev.store_u8(addr, next);
  if (touched) touched->add(addr, 1);
}

}  // namespace durablefs

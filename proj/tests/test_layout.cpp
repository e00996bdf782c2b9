// On-image format: golden region arithmetic recomputed by hand from the
// layout formulas, mkfs/mount round-trips, inode codec, bitmap mapping.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>
#include <vector>

#include "doctest.h"
#include "durablefs/errors.hpp"
#include "durablefs/layout.hpp"
#include "durablefs/recovery.hpp"

using namespace durablefs;

namespace {

// Independently recomputed golden tuples. Derivation, all in bytes:
//   fb map starts at 7 and holds bs*1024*bb bytes
//   fi map follows, bs*1024*ib bytes
//   inode table follows, (bs*1024*ib*8) inodes of 32 bytes
//   log region follows, K blocks; its 32-byte header sits at the first
//     8-aligned byte, entries right after, capacity = (region end-entries)/16
//   data region starts at the next 4096 multiple after the log region
struct Golden {
  uint32_t ts;  // KB
  uint8_t bb, ib;
  uint64_t K;
  uint64_t fi_off, it_off, log_off, hdr_off, data_off, data_start_block;
  uint64_t total_blocks, inode_count;
};

const Golden kGolden[] = {
    // ts     bb ib  K   fi_off  it_off   log_off  hdr_off  data_off  dsb  blocks inodes
    {4096, 1, 1, 8, 4103, 8199, 1056775, 1056776, 1093632, 267, 1024, 32768},
    {8192, 2, 1, 8, 8199, 12295, 1060871, 1060872, 1097728, 268, 2048, 32768},
    {4096, 1, 2, 16, 4103, 12295, 2109447, 2109448, 2179072, 532, 1024, 65536},
    {16384, 4, 2, 32, 16391, 24583, 2121735, 2121736, 2256896, 551, 4096, 65536},
    {2048, 1, 1, 4, 4103, 8199, 1056775, 1056776, 1077248, 263, 512, 32768},
};

}  // namespace

TEST_CASE("region arithmetic matches the hand-computed golden table") {
  for (const Golden& g : kGolden) {
    CAPTURE(g.ts);
    CAPTURE(g.bb);
    CAPTURE(g.ib);
    CAPTURE(g.K);
    Superblock sb{g.ts, 4, g.bb, g.ib};
    RegionMap rm = compute_region_map(sb, g.K);
    CHECK(rm.fb_map_off == 7);
    CHECK(rm.fb_map_len == uint64_t(4096) * g.bb);
    CHECK(rm.fi_map_off == g.fi_off);
    CHECK(rm.fi_map_len == uint64_t(4096) * g.ib);
    CHECK(rm.itable_off == g.it_off);
    CHECK(rm.inode_count == g.inode_count);
    CHECK(rm.itable_len == g.inode_count * 32);
    CHECK(rm.log_off == g.log_off);
    CHECK(rm.log_header_off == g.hdr_off);
    CHECK(rm.log_entry_off == g.hdr_off + 32);
    CHECK(rm.log_capacity ==
          (g.log_off + g.K * 4096 - (g.hdr_off + 32)) / 16);
    CHECK(rm.data_off == g.data_off);
    CHECK(rm.data_off % 4096 == 0);
    CHECK(rm.data_start_block == g.data_start_block);
    CHECK(rm.total_blocks == g.total_blocks);
    CHECK(rm.data_blocks == g.total_blocks - g.data_start_block);
  }
}

TEST_CASE("mkfs writes the golden headers byte-exactly") {
  for (const Golden& g : kGolden) {
    CAPTURE(g.ts);
    PmDevice dev(uint64_t(g.ts) * 1024);
    MkfsOptions mo;
    mo.log_blocks = g.K;
    mo.bb = g.bb;
    mo.ib = g.ib;
    RegionMap rm = mkfs(dev, mo);
    const auto& img = dev.durable_bytes();

    // Superblock, bytes 0..6: TS u32 LE, BS, BB, IB.
    CHECK(img[0] == uint8_t(g.ts & 0xFF));
    CHECK(img[1] == uint8_t((g.ts >> 8) & 0xFF));
    CHECK(img[2] == uint8_t((g.ts >> 16) & 0xFF));
    CHECK(img[3] == uint8_t((g.ts >> 24) & 0xFF));
    CHECK(img[4] == 4);
    CHECK(img[5] == g.bb);
    CHECK(img[6] == g.ib);

    // Log header: {log_size_blocks u64, start u64, end u64, pad u64} LE.
    std::vector<uint8_t> want(32, 0);
    for (int i = 0; i < 8; ++i) want[size_t(i)] = uint8_t((g.K >> (8 * i)) & 0xFF);
    std::vector<uint8_t> got(img.begin() + long(g.hdr_off),
                             img.begin() + long(g.hdr_off) + 32);
    CHECK(got == want);

    CHECK(rm.data_off == g.data_off);
    CHECK(read_region_map(dev).data_off == g.data_off);
  }
}

TEST_CASE("4MB default-geometry example: FI at 7+4096, table at 7+8192, 32768 inodes") {
  PmDevice dev(4ull << 20);
  RegionMap rm = mkfs(dev, MkfsOptions{8, 1, 1});
  CHECK(rm.fb_map_off == 7);
  CHECK(rm.fi_map_off == 7 + 4096);
  CHECK(rm.itable_off == 7 + 8192);
  CHECK(rm.inode_count == 32768);
  CHECK(rm.sb.ts * 1024ull == dev.capacity());
}

TEST_CASE("freshly formatted image is consistent and self-allocated") {
  PmDevice dev(4ull << 20);
  RegionMap rm = mkfs(dev, {});
  CHECK(fsck(dev).empty());

  // Every metadata block below the data region is marked allocated; every
  // data block is free.
  for (uint64_t b = 0; b < rm.total_blocks; ++b) {
    bool want = b < rm.data_start_block;
    if (pm_get_bit(dev, rm.fb_map_off, b) != want) {
      CAPTURE(b);
      CHECK(pm_get_bit(dev, rm.fb_map_off, b) == want);
      break;
    }
  }

  // All inodes free except the root directory.
  CHECK(pm_get_bit(dev, rm.fi_map_off, kRootInode));
  CHECK(inode_read(dev, rm, kRootInode).type == InodeType::Directory);
  CHECK(inode_read(dev, rm, kRootInode).i_size == 0);
  for (uint64_t n = 1; n < 64; ++n) CHECK(!pm_get_bit(dev, rm.fi_map_off, n));
}

TEST_CASE("mkfs rejects images with no room") {
  PmDevice tiny(64 * 1024);
  CHECK_THROWS_AS(mkfs(tiny, {}), FormatError);
  PmDevice small(1ull << 20);  // itable alone needs 1MB at ib=1
  CHECK_THROWS_AS(mkfs(small, {}), FormatError);
}

TEST_CASE("mount validation rejects corrupted superblocks") {
  PmDevice dev(4ull << 20);
  mkfs(dev, {});
  auto img = dev.durable_bytes();

  auto corrupt = [&](size_t off, uint8_t v) {
    auto bad = img;
    bad[off] = v;
    return PmDevice::from_image(bad);
  };
  PmDevice wrong_ts = corrupt(0, 0x01);
  CHECK_THROWS_AS(read_region_map(wrong_ts), FormatError);
  PmDevice wrong_bs = corrupt(4, 8);
  CHECK_THROWS_AS(read_region_map(wrong_bs), FormatError);
  PmDevice wrong_bb = corrupt(5, 0);
  CHECK_THROWS_AS(read_region_map(wrong_bb), FormatError);
}

TEST_CASE("region sweep: extents ordered, disjoint, and in range") {
  for (uint32_t ts : {2048u, 4096u, 8192u, 32768u}) {
    for (uint8_t bb : {1, 2, 4}) {
      for (uint8_t ib : {1, 2}) {
        for (uint64_t K : {1ull, 4ull, 8ull, 32ull}) {
          Superblock sb{ts, 4, bb, ib};
          RegionMap rm;
          try {
            rm = compute_region_map(sb, K);
          } catch (const FormatError&) {
            continue;  // geometry does not fit this capacity
          }
          CAPTURE(ts);
          CAPTURE(int(bb));
          CAPTURE(int(ib));
          CAPTURE(K);
          CHECK(rm.fb_map_off == 7);
          CHECK(rm.fi_map_off == rm.fb_map_off + rm.fb_map_len);
          CHECK(rm.itable_off == rm.fi_map_off + rm.fi_map_len);
          CHECK(rm.log_off == rm.itable_off + rm.itable_len);
          CHECK(rm.log_header_off % 8 == 0);
          CHECK(rm.log_header_off >= rm.log_off);
          CHECK(rm.log_entry_off + rm.log_capacity * 16 <=
                rm.log_off + K * 4096);
          CHECK(rm.data_off >= rm.log_off + K * 4096);
          CHECK(rm.data_off % 4096 == 0);
          CHECK(rm.data_off + rm.data_blocks * 4096 <= uint64_t(ts) * 1024);
          CHECK(rm.inode_count == uint64_t(4096) * 8 * ib);
          CHECK(rm.fb_map_len * 8 >= rm.total_blocks);
        }
      }
    }
  }
}

TEST_CASE("inode codec round-trips all fields") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 2000; ++i) {
    Inode ino;
    ino.i_blocks = uint32_t(rng());
    ino.i_block = uint32_t(rng());
    ino.i_size = rng();
    ino.type = InodeType(rng() % 4);
    uint8_t buf[kInodeSize];
    encode_inode(ino, std::span<uint8_t, kInodeSize>(buf));
    CHECK(decode_inode(std::span<const uint8_t, kInodeSize>(buf)) == ino);
  }
}

TEST_CASE("inode table read/write round-trip on the device") {
  PmDevice dev(4ull << 20);
  RegionMap rm = mkfs(dev, {});
  Inode ino;
  ino.i_blocks = 3;
  ino.i_block = 270;
  ino.i_size = 12288;
  ino.type = InodeType::File;
  inode_write(dev, rm, 5, ino);
  CHECK(inode_read(dev, rm, 5) == ino);
  CHECK_THROWS_AS((void)inode_read(dev, rm, rm.inode_count), BoundsError);
  CHECK_THROWS_AS(inode_write(dev, rm, rm.inode_count, ino), BoundsError);
}

TEST_CASE("bitmap helpers address bit i of block/inode i") {
  PmDevice dev(4ull << 20);
  RegionMap rm = mkfs(dev, {});
  // Bit 9 of a map lives in byte 1, bit 1.
  TouchedLines touched;
  pm_set_bit(dev, rm.fi_map_off, 9, true, &touched);
  CHECK(pm_get_bit(dev, rm.fi_map_off, 9));
  CHECK((dev.read_u8(rm.fi_map_off + 1) & 0x02) != 0);
  pm_set_bit(dev, rm.fi_map_off, 9, false, &touched);
  CHECK(!pm_get_bit(dev, rm.fi_map_off, 9));
  CHECK(touched.count() >= 1);
}

TEST_CASE("mkfs is idempotent over reformat") {
  PmDevice dev(4ull << 20);
  RegionMap rm = mkfs(dev, {});
  // Scribble over metadata and data, then reformat.
  dev.store_u64(rm.fi_map_off, ~0ull);
  dev.store_u64(rm.data_off, 0x12345678ull);
  dev.clwb(rm.fi_map_off);
  dev.sfence();
  mkfs(dev, {});
  CHECK(fsck(dev).empty());
  CHECK(inode_read(dev, read_region_map(dev), kRootInode).type ==
        InodeType::Directory);
}

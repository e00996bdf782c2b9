#include "durablefs/recovery.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <map>
#include <optional>
#include <set>

#include "durablefs/errors.hpp"

namespace durablefs {

void apply_log_entry(PmDevice& dev, const RegionMap& rm, const LogEntry& e,
                     TouchedLines& touched) {
  switch (e.type) {
    case LogType::SetInodeBit: {
      if (e.data3 >= rm.inode_count)
        throw CorruptError("inode bit index out of range");
      pm_set_bit(dev, rm.fi_map_off, e.data3, true, &touched);
      Inode ino;
      ino.type = InodeType(uint8_t(e.data1));
      inode_write(dev, rm, e.data3, ino);
      touched.add(rm.inode_addr(e.data3), kInodeSize);
      break;
    }
    case LogType::ResetInodeBit: {
      if (e.data3 >= rm.inode_count)
        throw CorruptError("inode bit index out of range");
      pm_set_bit(dev, rm.fi_map_off, e.data3, false, &touched);
      std::array<uint8_t, kInodeSize> zeros{};
      dev.store(rm.inode_addr(e.data3), zeros);
      touched.add(rm.inode_addr(e.data3), kInodeSize);
      break;
    }
    case LogType::SetFbbBit:
    case LogType::ResetFbbBit: {
      if (e.data3 >= rm.fb_map_len * 8)
        throw CorruptError("block bit index out of range");
      pm_set_bit(dev, rm.fb_map_off, e.data3,
                 e.type == LogType::SetFbbBit, &touched);
      break;
    }
    case LogType::UpdBlockAddr: {
      // Logical-block entries carry their mapping inside rebuilt tree
      // blocks; only the root reference lives in the inode. Slot 0 targets
      // i_block directly (a one-block file's root IS its data block); the
      // sentinel slot is the explicit root update staged at close, which is
      // always the chain's last UpdBlockAddr, so chain order leaves i_block
      // correct for taller trees too.
      if (e.data2 == 0 || e.data2 == kRootBlockSlot) {
        if (e.data1 >= rm.inode_count)
          throw CorruptError("inode index out of range");
        dev.store_u32(rm.inode_addr(e.data1) + 4, e.data3);
        touched.add(rm.inode_addr(e.data1) + 4, 4);
      }
      break;
    }
    case LogType::UpdISize: {
      if (e.data1 >= rm.inode_count)
        throw CorruptError("inode index out of range");
      dev.store_u64(rm.inode_addr(e.data1) + 8, e.data3);
      touched.add(rm.inode_addr(e.data1) + 8, 8);
      break;
    }
    case LogType::UpdIBlocks: {
      if (e.data1 >= rm.inode_count)
        throw CorruptError("inode index out of range");
      dev.store_u32(rm.inode_addr(e.data1), e.data3);
      touched.add(rm.inode_addr(e.data1), 4);
      break;
    }
    case LogType::Begin:
    case LogType::Commit:
    case LogType::End:
      break;
  }
}

RecoveryReport recover(PmDevice& dev) {
  RegionMap rm = read_region_map(dev);
  Wal wal(dev, rm);

  // One transaction number can appear in several Begin..End episodes within
  // the window, so classify per episode, in log order. Entries whose Begin
  // was already trimmed open an implicit episode; such episodes always
  // carry an End later in the window (trim only passes finished txns) or
  // never committed at all.
  struct Episode {
    uint32_t txn_no = 0;
    std::optional<uint64_t> commit_idx;
    bool ended = false;
  };
  std::vector<Episode> episodes;
  std::map<uint32_t, size_t> open_episode;
  for (auto& [idx, e] : wal.scan()) {
    auto it = open_episode.find(e.txn_no);
    if (e.type == LogType::Begin || it == open_episode.end()) {
      it = open_episode.insert_or_assign(e.txn_no, episodes.size()).first;
      episodes.push_back(Episode{e.txn_no, {}, false});
      if (e.type == LogType::Begin) continue;
    }
    Episode& ep = episodes[it->second];
    if (e.type == LogType::Commit) ep.commit_idx = idx;
    if (e.type == LogType::End) {
      ep.ended = true;
      open_episode.erase(it);
    }
  }

  RecoveryReport report;
  std::vector<Episode*> replay;
  for (Episode& ep : episodes) {
    if (ep.ended)
      report.skipped++;
    else if (ep.commit_idx)
      replay.push_back(&ep);
    else
      report.discarded++;
  }
  std::sort(replay.begin(), replay.end(), [](Episode* a, Episode* b) {
    return *a->commit_idx < *b->commit_idx;
  });

  for (Episode* ep : replay) {
    std::vector<LogEntry> chain;
    uint64_t idx = *ep->commit_idx;
    while (true) {
      LogEntry e = wal.entry_at(idx);
      chain.push_back(e);
      if (e.prev == kNoPrev) break;
      idx = e.prev;
    }
    std::reverse(chain.begin(), chain.end());
    TouchedLines touched;
    for (const LogEntry& e : chain) apply_log_entry(dev, rm, e, touched);
    touched.flush(dev);
    dev.sfence();

    LogEntry end_entry;
    end_entry.type = LogType::End;
    end_entry.txn_no = ep->txn_no;
    end_entry.prev = uint32_t(*ep->commit_idx);
    wal.append(end_entry);
    report.replayed++;
  }

  wal.clear();
  return report;
}

namespace {

struct FsckState {
  const PmDevice& dev;
  const RegionMap& rm;
  std::vector<uint8_t> fb, fi, itable;
  std::vector<std::string> out;
  std::map<uint32_t, uint64_t> block_owner;  // block -> first owning inode

  bool fb_bit(uint64_t b) const { return (fb[b / 8] >> (b % 8)) & 1; }
  bool fi_bit(uint64_t n) const { return (fi[n / 8] >> (n % 8)) & 1; }

  Inode inode(uint64_t n) const {
    std::span<const uint8_t, kInodeSize> s(itable.data() + n * kInodeSize,
                                           kInodeSize);
    return decode_inode(s);
  }

  void fail(std::string msg) { out.push_back(std::move(msg)); }

  static int tree_height(uint64_t i_size) {
    if (i_size <= kBlockSize) return 0;
    uint64_t need = (i_size + kBlockSize - 1) / kBlockSize;
    int h = 0;
    uint64_t cap = 1;
    while (cap < need) {
      cap *= 1024;
      h++;
    }
    return h;
  }

  // Records ownership of every reachable block of inode n and returns the
  // leaf logicals. Interior nodes count as owned blocks but not leaves.
  void walk_tree(uint64_t n, const Inode& ino,
                 std::vector<uint64_t>& leaf_logicals) {
    if (ino.i_block == 0) return;
    walk_node(n, ino.i_block, tree_height(ino.i_size), 0, leaf_logicals);
  }

  // True when the block is fresh and safe to descend into. Refusing to
  // descend on a duplicate claim keeps reference cycles finite.
  bool claim(uint64_t n, uint32_t b) {
    if (b >= rm.total_blocks) {
      fail("inode " + std::to_string(n) + " references block " +
           std::to_string(b) + " beyond device");
      return false;
    }
    if (b < rm.data_start_block) {
      fail("inode " + std::to_string(n) + " references metadata block " +
           std::to_string(b));
      return false;
    }
    auto [it, fresh] = block_owner.emplace(b, n);
    if (!fresh) {
      fail("block " + std::to_string(b) + " referenced by inode " +
           std::to_string(it->second) + " and inode " + std::to_string(n));
      return false;
    }
    if (!fb_bit(b))
      fail("block " + std::to_string(b) + " reachable from inode " +
           std::to_string(n) + " but free in FB map");
    return true;
  }

  void walk_node(uint64_t n, uint32_t block, int level, uint64_t base,
                 std::vector<uint64_t>& leaf_logicals) {
    if (!claim(n, block)) return;
    if (level == 0) {
      leaf_logicals.push_back(base);
      return;
    }
    uint64_t span = 1;
    for (int i = 1; i < level; i++) span *= 1024;
    std::array<uint8_t, kBlockSize> node;
    dev.read(uint64_t(block) * kBlockSize, node);
    for (uint64_t i = 0; i < 1024; i++) {
      uint32_t child;
      std::memcpy(&child, node.data() + i * 4, 4);
      if (child != 0)
        walk_node(n, child, level - 1, base + i * span, leaf_logicals);
    }
  }

  // Returns child entries of a directory, checking dirent tiling.
  std::vector<std::pair<std::string, uint64_t>> parse_dir(
      uint64_t n, const Inode& ino, const std::vector<uint64_t>& leaves) {
    std::vector<std::pair<std::string, uint64_t>> children;
    for (uint64_t logical : leaves) {
      uint32_t block = resolve_leaf(ino, logical);
      if (block == 0) continue;
      std::array<uint8_t, kBlockSize> buf;
      dev.read(uint64_t(block) * kBlockSize, buf);
      uint64_t off = 0;
      bool bad = false;
      while (off < kBlockSize) {
        if (off + 8 > kBlockSize) {
          fail("dir inode " + std::to_string(n) + " block " +
               std::to_string(block) + " truncated dirent");
          bad = true;
          break;
        }
        uint32_t inum;
        uint16_t rec_len;
        std::memcpy(&inum, buf.data() + off, 4);
        std::memcpy(&rec_len, buf.data() + off + 4, 2);
        uint8_t name_len = buf[off + 6];
        if (rec_len < 8 + name_len || rec_len % 4 != 0 ||
            off + rec_len > kBlockSize) {
          fail("dir inode " + std::to_string(n) + " block " +
               std::to_string(block) + " bad dirent at offset " +
               std::to_string(off));
          bad = true;
          break;
        }
        if (inum != 0) {
          std::string name(reinterpret_cast<const char*>(buf.data() + off + 8),
                           name_len);
          children.emplace_back(std::move(name), inum);
        }
        off += rec_len;
      }
      if (!bad && off != kBlockSize)
        fail("dir inode " + std::to_string(n) + " block " +
             std::to_string(block) + " does not tile exactly");
    }
    return children;
  }

  uint32_t resolve_leaf(const Inode& ino, uint64_t logical) const {
    if (ino.i_block == 0) return 0;
    int h = tree_height(ino.i_size);
    uint32_t block = ino.i_block;
    uint64_t span = 1;
    for (int i = 0; i < h; i++) span *= 1024;
    if (logical >= span) return 0;
    for (int level = h; level > 0; level--) {
      span /= 1024;
      uint64_t idx = logical / span;
      logical %= span;
      uint32_t child;
      if (uint64_t(block) * kBlockSize + idx * 4 + 4 > rm.capacity) return 0;
      child = dev.read_u32(uint64_t(block) * kBlockSize + idx * 4);
      if (child == 0) return 0;
      block = child;
    }
    return block;
  }
};

}  // namespace

std::vector<std::string> fsck(const PmDevice& dev) {
  RegionMap rm = read_region_map(dev);
  FsckState st{dev, rm, {}, {}, {}, {}, {}};
  st.fb.resize(rm.fb_map_len);
  st.fi.resize(rm.fi_map_len);
  st.itable.resize(rm.itable_len);
  dev.read(rm.fb_map_off, st.fb);
  dev.read(rm.fi_map_off, st.fi);
  dev.read(rm.itable_off, st.itable);

  // (f) metadata self-allocation
  for (uint64_t b = 0; b < rm.data_start_block; b++)
    if (!st.fb_bit(b)) {
      st.fail("metadata block " + std::to_string(b) + " free in FB map");
      break;
    }

  // Bitmap/type agreement: type == free iff FI bit clear.
  for (uint64_t n = 0; n < rm.inode_count; n++) {
    Inode ino = st.inode(n);
    bool bit = st.fi_bit(n);
    if (bit && ino.type == InodeType::Free)
      st.fail("inode " + std::to_string(n) + " allocated but typed free");
    if (!bit && ino.type != InodeType::Free)
      st.fail("inode " + std::to_string(n) + " free but typed " +
              std::to_string(int(ino.type)));
  }

  if (!st.fi_bit(kRootInode) ||
      st.inode(kRootInode).type != InodeType::Directory) {
    st.fail("root inode is not an allocated directory");
    return st.out;
  }

  // Reachability walk from the root; claims blocks, checks sizes and
  // dirent structure along the way.
  std::set<uint64_t> visited;
  std::vector<uint64_t> queue{kRootInode};
  while (!queue.empty()) {
    uint64_t n = queue.back();
    queue.pop_back();
    if (!visited.insert(n).second) {
      st.fail("inode " + std::to_string(n) + " referenced more than once");
      continue;
    }
    Inode ino = st.inode(n);
    std::vector<uint64_t> leaves;
    st.walk_tree(n, ino, leaves);

    // (d) size/extent agreement
    if (leaves.size() != ino.i_blocks)
      st.fail("inode " + std::to_string(n) + " has " +
              std::to_string(leaves.size()) + " leaves but i_blocks=" +
              std::to_string(ino.i_blocks));
    if (leaves.empty()) {
      if (ino.i_size != 0)
        st.fail("inode " + std::to_string(n) + " has size " +
                std::to_string(ino.i_size) + " with no blocks");
    } else {
      uint64_t last = *std::max_element(leaves.begin(), leaves.end());
      if (ino.i_size <= last * kBlockSize ||
          ino.i_size > (last + 1) * kBlockSize)
        st.fail("inode " + std::to_string(n) + " size " +
                std::to_string(ino.i_size) + " outside last leaf extent");
    }

    if (ino.type == InodeType::Directory) {
      // Directories are dense: logicals 0..i_blocks-1.
      std::set<uint64_t> ls(leaves.begin(), leaves.end());
      for (uint64_t i = 0; i < ino.i_blocks; i++)
        if (!ls.count(i)) {
          st.fail("directory inode " + std::to_string(n) + " has a hole");
          break;
        }
      for (auto& [name, child] : st.parse_dir(n, ino, leaves)) {
        if (child >= rm.inode_count || !st.fi_bit(child)) {
          st.fail("dirent '" + name + "' in inode " + std::to_string(n) +
                  " references unallocated inode " + std::to_string(child));
          continue;
        }
        queue.push_back(child);
      }
    }
  }

  // (c) every allocated inode reachable from the root
  for (uint64_t n = 0; n < rm.inode_count; n++)
    if (st.fi_bit(n) && !visited.count(n))
      st.fail("inode " + std::to_string(n) + " allocated but unreachable");

  // (g) no leaked data blocks
  for (uint64_t b = rm.data_start_block; b < rm.total_blocks; b++)
    if (st.fb_bit(b) && !st.block_owner.count(uint32_t(b)))
      st.fail("block " + std::to_string(b) + " allocated but unreachable");

  return st.out;
}

}  // namespace durablefs

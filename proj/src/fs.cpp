#include "durablefs/fs.hpp"

#include <algorithm>
#include <array>
#include <cstring>

#include "durablefs/errors.hpp"

namespace durablefs {

namespace {

constexpr uint16_t kDirentHeader = 8;

uint16_t dirent_len(size_t name_len) {
  return uint16_t((kDirentHeader + name_len + 3) & ~size_t{3});
}

void put_u16(uint8_t* p, uint16_t v) {
  p[0] = uint8_t(v);
  p[1] = uint8_t(v >> 8);
}
void put_u32(uint8_t* p, uint32_t v) {
  for (int i = 0; i < 4; i++) p[i] = uint8_t(v >> (8 * i));
}
uint16_t get_u16(const uint8_t* p) {
  return uint16_t(p[0] | (uint16_t(p[1]) << 8));
}
uint32_t get_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= uint32_t(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::string> split_path(const std::string& path) {
  if (path.empty() || path[0] != '/')
    throw LogicError("path must be absolute");
  std::vector<std::string> parts;
  size_t i = 1;
  while (i < path.size()) {
    size_t j = path.find('/', i);
    if (j == std::string::npos) j = path.size();
    if (j > i) {
      if (j - i > 255) throw LogicError("path component too long");
      parts.push_back(path.substr(i, j - i));
    }
    i = j + 1;
  }
  return parts;
}

DurableFs DurableFs::format(PmDevice& dev, const MkfsOptions& mo,
                            const FsOptions& fo) {
  mkfs(dev, mo);
  return mount(dev, fo);
}

DurableFs DurableFs::mount(PmDevice& dev, const FsOptions& fo) {
  RecoveryReport rep = recover(dev);
  RegionMap rm = read_region_map(dev);
  return DurableFs(dev, rm, fo, rep);
}

DurableFs::DurableFs(PmDevice& dev, const RegionMap& rm, const FsOptions& fo,
                     const RecoveryReport& rep)
    : dev_(dev), rm_(rm), opts_(fo), recovery_(rep), txns_(dev, rm) {
  dev_.set_stats_boundary(rm_.data_off);
}

int DurableFs::tree_height(uint64_t i_size) {
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

uint32_t DurableFs::committed_leaf(const Inode& ino, uint64_t logical) const {
  if (ino.i_block == 0) return 0;
  int h = tree_height(ino.i_size);
  uint64_t span = 1;
  for (int i = 0; i < h; i++) span *= 1024;
  if (logical >= span) return 0;
  uint32_t block = ino.i_block;
  for (int level = h; level > 0; level--) {
    span /= 1024;
    uint32_t child = dev_.read_u32(uint64_t(block) * kBlockSize +
                                   (logical / span) * 4);
    if (child == 0) return 0;
    logical %= span;
    block = child;
  }
  return block;
}

void DurableFs::collect_tree_blocks(const Inode& ino,
                                    std::vector<uint32_t>& out) const {
  if (ino.i_block == 0) return;
  struct Frame {
    uint32_t block;
    int level;
  };
  std::vector<Frame> stack{{ino.i_block, tree_height(ino.i_size)}};
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    out.push_back(f.block);
    if (f.level == 0) continue;
    for (uint64_t i = 0; i < 1024; i++) {
      uint32_t child = dev_.read_u32(uint64_t(f.block) * kBlockSize + i * 4);
      if (child != 0) stack.push_back({child, f.level - 1});
    }
  }
}

std::vector<uint8_t> DurableFs::load_block(const TxnFile* tf,
                                           const Inode& committed,
                                           uint64_t logical) const {
  std::vector<uint8_t> buf(kBlockSize, 0);
  uint32_t block = 0;
  if (tf) {
    auto it = tf->pending_blocks.find(logical);
    if (it != tf->pending_blocks.end()) block = it->second;
  }
  if (block == 0) block = committed_leaf(committed, logical);
  if (block != 0) dev_.read(uint64_t(block) * kBlockSize, buf);
  return buf;
}

void DurableFs::flush_block(uint32_t block) {
  if (!opts_.flush_data) return;
  uint64_t addr = uint64_t(block) * kBlockSize;
  for (uint64_t line = 0; line < kBlockSize; line += kCacheLineSize)
    dev_.clwb(addr + line);
  dev_.sfence();
}

void DurableFs::flush_range(uint32_t block, uint64_t off, uint64_t len) {
  if (!opts_.flush_data || len == 0) return;
  uint64_t addr = uint64_t(block) * kBlockSize;
  uint64_t first = (addr + off) & ~uint64_t{kCacheLineSize - 1};
  uint64_t last = (addr + off + len - 1) & ~uint64_t{kCacheLineSize - 1};
  for (uint64_t line = first; line <= last; line += kCacheLineSize)
    dev_.clwb(line);
  dev_.sfence();
}

// The per-block copy-on-write path. For each affected block: a fresh block
// is reserved, filled (copying the committed block around a partial write),
// flushed and fenced, and only then logged; the replaced committed block is
// logged as a deferred free. Size and block-count updates are staged
// unconditionally at the end.
void DurableFs::write_staged(Txn& txn, TxnFile& tf, uint64_t offset,
                             std::span<const uint8_t> data) {
  if (data.empty()) return;
  uint64_t end = offset + data.size();
  if ((end - 1) / kBlockSize > 0xFFFE)
    throw LogicError("logical block exceeds 16-bit log field");

  for (uint64_t pos = offset; pos < end;) {
    uint64_t logical = pos / kBlockSize;
    uint64_t in_off = pos % kBlockSize;
    uint64_t in_len = std::min<uint64_t>(kBlockSize - in_off, end - pos);
    std::span<const uint8_t> slice = data.subspan(pos - offset, in_len);

    auto pend = tf.pending_blocks.find(logical);
    if (pend != tf.pending_blocks.end()) {
      // Block already copied by this transaction: owned exclusively, write
      // in place and reflush the touched lines.
      uint32_t f = pend->second;
      dev_.store(uint64_t(f) * kBlockSize + in_off, slice);
      flush_range(f, in_off, in_len);
    } else {
      uint32_t s = committed_leaf(tf.orig, logical);
      uint32_t f = txns_.reserve_block(txn);
      if (in_len < kBlockSize) {
        std::vector<uint8_t> buf(kBlockSize, 0);
        if (s != 0) dev_.read(uint64_t(s) * kBlockSize, buf);
        std::memcpy(buf.data() + in_off, slice.data(), in_len);
        dev_.store(uint64_t(f) * kBlockSize, buf);
      } else {
        dev_.store(uint64_t(f) * kBlockSize, slice);
      }
      flush_block(f);
      txns_.log_block_alloc(txn, f);
      if (s != 0) txns_.free_block(txn, s);
      txns_.stage_block_addr(txn, tf.inum, uint16_t(logical), f);
      tf.pending_blocks.emplace(logical, f);
    }
    pos += in_len;
  }

  uint64_t new_size = std::max(tf.ram.i_size, end);
  uint32_t added = 0;
  for (auto& [logical, f] : tf.pending_blocks)
    if (committed_leaf(tf.orig, logical) == 0) added++;
  txns_.stage_isize(txn, tf.inum, new_size);
  txns_.stage_iblocks(txn, tf.inum, tf.orig.i_blocks + added);
}

// Path-copies the reference tree: subtrees without pending leaves are
// reused; every node on a path to a changed leaf is rewritten into a fresh
// block (flushed before it is logged, like data) and its committed
// predecessor freed. old_lvl < lvl means the committed subtree covers only
// the leading child range (the tree grew).
uint32_t DurableFs::build_node(Txn& txn, TxnFile& tf, int lvl, uint64_t base,
                               uint32_t old, int old_lvl) {
  if (lvl == 0) {
    auto it = tf.pending_blocks.find(base);
    return it != tf.pending_blocks.end() ? it->second : old;
  }
  uint64_t child_span = 1;
  for (int i = 0; i < lvl - 1; i++) child_span *= 1024;
  uint64_t span = child_span * 1024;

  auto it = tf.pending_blocks.lower_bound(base);
  bool touched = it != tf.pending_blocks.end() && it->first < base + span;
  bool aligned = old != 0 && old_lvl == lvl;
  if (!touched) {
    if (aligned) return old;   // committed subtree unchanged: share it
    if (old == 0) return 0;    // hole stays a hole
    // else: an existing shallower subtree must be wrapped at this level
  }

  std::array<uint32_t, 1024> old_kids{};
  if (aligned)
    for (uint64_t i = 0; i < 1024; i++)
      old_kids[i] = dev_.read_u32(uint64_t(old) * kBlockSize + i * 4);

  std::vector<uint8_t> node(kBlockSize, 0);
  for (uint64_t i = 0; i < 1024; i++) {
    uint32_t oc = 0;
    int oc_lvl = -1;
    if (aligned) {
      oc = old_kids[i];
      oc_lvl = oc != 0 ? lvl - 1 : -1;
    } else if (i == 0 && old != 0) {
      oc = old;
      oc_lvl = old_lvl;
    }
    uint32_t child = build_node(txn, tf, lvl - 1, base + i * child_span, oc,
                                oc_lvl);
    put_u32(node.data() + i * 4, child);
  }

  uint32_t f = txns_.reserve_block(txn);
  dev_.store(uint64_t(f) * kBlockSize, node);
  flush_block(f);
  txns_.log_block_alloc(txn, f);
  if (aligned) txns_.free_block(txn, old);  // replaced interior node
  return f;
}

void DurableFs::stage_trees(Txn& txn) {
  for (auto& [inum, tf] : txn.files) {
    if (tf.pending_blocks.empty()) continue;
    int h_old = tf.orig.i_block != 0 ? tree_height(tf.orig.i_size) : -1;
    int h_new = tree_height(tf.ram.i_size);
    uint32_t root =
        build_node(txn, tf, h_new, 0, tf.orig.i_block, h_old);
    txns_.stage_block_addr(txn, inum, kRootBlockSlot, root);
  }
}

void DurableFs::close_txn(Txn& txn) {
  stage_trees(txn);
  txns_.commit(txn);
}

DurableFs::OpenFile& DurableFs::lookup(const FileHandle& h) {
  auto it = handles_.find(h.id);
  if (h.id == 0 || it == handles_.end())
    throw LogicError("handle is not open");
  return it->second;
}

FileHandle DurableFs::open(const std::string& path, OpenMode mode) {
  std::lock_guard<std::mutex> g(mu_);
  return open_impl(path, mode);
}

FileHandle DurableFs::open_impl(const std::string& path, OpenMode mode) {
  auto found = resolve(path);
  if (!found) {
    if (mode != OpenMode::CreateWrite) throw NotFoundError(path);
    // Creation is its own committed transaction; the write transaction
    // then opens over the (empty, durable) file.
    create_impl(path, InodeType::File);
    found = resolve(path);
  }
  uint64_t inum = *found;
  Inode ino = txns_.committed_inode(inum);
  if (ino.type != InodeType::File)
    throw TypeError(path + " is not a regular file");

  OpenFile of;
  of.inum = inum;
  of.mode = mode;
  if (mode == OpenMode::Read)
    of.snapshot = ino;
  else
    of.txn = txns_.begin({inum});
  uint64_t id = next_handle_++;
  handles_.emplace(id, std::move(of));
  return FileHandle{id, inum, mode};
}

std::vector<FileHandle> DurableFs::open_many(
    const std::vector<std::string>& paths) {
  std::lock_guard<std::mutex> g(mu_);
  std::vector<uint64_t> inums;
  for (const auto& p : paths) {
    auto found = resolve(p);
    if (!found) throw NotFoundError(p);
    if (txns_.committed_inode(*found).type != InodeType::File)
      throw TypeError(p + " is not a regular file");
    inums.push_back(*found);
  }
  auto txn = txns_.begin(inums);
  std::vector<FileHandle> out;
  for (uint64_t inum : inums) {
    OpenFile of;
    of.inum = inum;
    of.mode = OpenMode::Write;
    of.txn = txn;
    uint64_t id = next_handle_++;
    handles_.emplace(id, std::move(of));
    out.push_back(FileHandle{id, inum, OpenMode::Write});
  }
  return out;
}

size_t DurableFs::write(FileHandle& h, std::span<const uint8_t> data,
                        uint64_t offset) {
  std::lock_guard<std::mutex> g(mu_);
  OpenFile& of = lookup(h);
  if (of.mode == OpenMode::Read) throw LogicError("handle is read-only");
  Txn& txn = *of.txn;
  write_staged(txn, txn.files.at(of.inum), offset, data);
  return data.size();
}

size_t DurableFs::read(const FileHandle& h, std::span<uint8_t> out,
                       uint64_t offset) {
  std::lock_guard<std::mutex> g(mu_);
  OpenFile& of = lookup(h);
  const Inode* ino;
  const TxnFile* tf = nullptr;
  if (of.mode == OpenMode::Read) {
    ino = &of.snapshot;
  } else {
    tf = &of.txn->files.at(of.inum);
    ino = &tf->ram;
  }
  if (offset >= ino->i_size) return 0;
  uint64_t n = std::min<uint64_t>(out.size(), ino->i_size - offset);
  uint64_t done = 0;
  while (done < n) {
    uint64_t logical = (offset + done) / kBlockSize;
    uint64_t in_off = (offset + done) % kBlockSize;
    uint64_t chunk = std::min<uint64_t>(kBlockSize - in_off, n - done);
    uint32_t block = 0;
    if (tf) {
      auto it = tf->pending_blocks.find(logical);
      if (it != tf->pending_blocks.end()) block = it->second;
    }
    if (block == 0)
      block = committed_leaf(tf ? tf->orig : *ino, logical);
    if (block != 0)
      dev_.read(uint64_t(block) * kBlockSize + in_off,
                out.subspan(done, chunk));
    else
      std::fill_n(out.begin() + done, chunk, uint8_t{0});
    done += chunk;
  }
  return size_t(n);
}

void DurableFs::close(FileHandle& h) {
  std::lock_guard<std::mutex> g(mu_);
  OpenFile& of = lookup(h);
  if (of.txn) {
    for (auto& [id, other] : handles_)
      if (id != h.id && other.txn == of.txn)
        throw LogicError("other handles still open on this transaction");
    close_txn(*of.txn);
  }
  handles_.erase(h.id);
  h.id = 0;
}

void DurableFs::close_many(std::vector<FileHandle>& hs) {
  std::lock_guard<std::mutex> g(mu_);
  if (hs.empty()) return;
  std::shared_ptr<Txn> txn;
  for (auto& h : hs) {
    OpenFile& of = lookup(h);
    if (!of.txn) throw LogicError("close_many requires write handles");
    if (!txn) txn = of.txn;
    if (of.txn != txn)
      throw LogicError("handles do not share one transaction");
  }
  size_t members = 0;
  for (auto& [id, of] : handles_)
    if (of.txn == txn) members++;
  if (members != hs.size())
    throw LogicError("close_many must cover every handle of the transaction");
  close_txn(*txn);
  for (auto& h : hs) {
    handles_.erase(h.id);
    h.id = 0;
  }
}

void DurableFs::abort(FileHandle& h) {
  std::lock_guard<std::mutex> g(mu_);
  OpenFile& of = lookup(h);
  if (of.txn) {
    auto txn = of.txn;
    txns_.abort(*txn);
    for (auto it = handles_.begin(); it != handles_.end();)
      it = it->second.txn == txn ? handles_.erase(it) : std::next(it);
  } else {
    handles_.erase(h.id);
  }
  h.id = 0;
}

void DurableFs::create(const std::string& path) {
  std::lock_guard<std::mutex> g(mu_);
  create_impl(path, InodeType::File);
}

void DurableFs::mkdir(const std::string& path) {
  std::lock_guard<std::mutex> g(mu_);
  create_impl(path, InodeType::Directory);
}

void DurableFs::create_impl(const std::string& path, InodeType type) {
  auto [parent, name] = resolve_parent(path);
  if (dir_lookup(parent, name)) throw ExistsError(path);
  auto txn = txns_.begin({parent});
  try {
    uint64_t inum = txns_.alloc_inode(*txn, type);
    Inode fresh;
    fresh.type = type;
    txns_.add_file(*txn, inum, fresh);
    dir_insert(*txn, parent, name, inum, type);
    close_txn(*txn);
  } catch (...) {
    txns_.abort(*txn);
    throw;
  }
}

void DurableFs::unlink(const std::string& path) {
  std::lock_guard<std::mutex> g(mu_);
  remove_impl(path, InodeType::File);
}

void DurableFs::rmdir(const std::string& path) {
  std::lock_guard<std::mutex> g(mu_);
  remove_impl(path, InodeType::Directory);
}

void DurableFs::remove_impl(const std::string& path, InodeType type) {
  auto [parent, name] = resolve_parent(path);
  auto target = dir_lookup(parent, name);
  if (!target) throw NotFoundError(path);
  Inode ino = txns_.committed_inode(*target);
  if (ino.type != type)
    throw TypeError(path + (type == InodeType::File ? " is not a file"
                                                    : " is not a directory"));
  if (type == InodeType::Directory && !dir_list(*target).empty())
    throw NotEmptyError(path);

  auto txn = txns_.begin({parent, *target});
  try {
    dir_remove(*txn, parent, name);
    std::vector<uint32_t> blocks;
    collect_tree_blocks(ino, blocks);
    for (uint32_t b : blocks) txns_.free_block(*txn, b);
    txns_.free_inode(*txn, *target);
    close_txn(*txn);
  } catch (...) {
    txns_.abort(*txn);
    throw;
  }
}

std::vector<DirentInfo> DurableFs::readdir(const std::string& path) {
  std::lock_guard<std::mutex> g(mu_);
  auto found = resolve(path);
  if (!found) throw NotFoundError(path);
  if (txns_.committed_inode(*found).type != InodeType::Directory)
    throw TypeError(path + " is not a directory");
  return dir_list(*found);
}

Stat DurableFs::stat(const std::string& path) {
  std::lock_guard<std::mutex> g(mu_);
  auto found = resolve(path);
  if (!found) throw NotFoundError(path);
  Inode ino = txns_.committed_inode(*found);
  return Stat{*found, ino.type, ino.i_size, ino.i_blocks};
}

bool DurableFs::exists(const std::string& path) {
  std::lock_guard<std::mutex> g(mu_);
  return resolve(path).has_value();
}

std::optional<uint64_t> DurableFs::resolve(const std::string& path) {
  uint64_t cur = kRootInode;
  for (const auto& comp : split_path(path)) {
    if (txns_.committed_inode(cur).type != InodeType::Directory)
      return std::nullopt;
    auto next = dir_lookup(cur, comp);
    if (!next) return std::nullopt;
    cur = *next;
  }
  return cur;
}

std::pair<uint64_t, std::string> DurableFs::resolve_parent(
    const std::string& path) {
  auto parts = split_path(path);
  if (parts.empty()) throw LogicError("root has no parent");
  std::string name = parts.back();
  uint64_t cur = kRootInode;
  for (size_t i = 0; i + 1 < parts.size(); i++) {
    if (txns_.committed_inode(cur).type != InodeType::Directory)
      throw TypeError("path component is not a directory");
    auto next = dir_lookup(cur, parts[i]);
    if (!next) throw NotFoundError(parts[i]);
    cur = *next;
  }
  if (txns_.committed_inode(cur).type != InodeType::Directory)
    throw TypeError("parent is not a directory");
  return {cur, name};
}

std::optional<uint64_t> DurableFs::dir_lookup(uint64_t dir_inum,
                                              const std::string& name) {
  for (const auto& d : dir_list(dir_inum))
    if (d.name == name) return d.inum;
  return std::nullopt;
}

std::vector<DirentInfo> DurableFs::dir_list(uint64_t dir_inum) {
  Inode dir = txns_.committed_inode(dir_inum);
  std::vector<DirentInfo> out;
  for (uint64_t logical = 0; logical * kBlockSize < dir.i_size; logical++) {
    uint32_t block = committed_leaf(dir, logical);
    if (block == 0) continue;
    std::array<uint8_t, kBlockSize> buf;
    dev_.read(uint64_t(block) * kBlockSize, buf);
    uint64_t off = 0;
    while (off + kDirentHeader <= kBlockSize) {
      uint32_t inum = get_u32(buf.data() + off);
      uint16_t rec = get_u16(buf.data() + off + 4);
      uint8_t nl = buf[off + 6];
      if (rec < kDirentHeader + nl || off + rec > kBlockSize)
        throw CorruptError("bad dirent");
      if (inum != 0)
        out.push_back(DirentInfo{
            std::string(reinterpret_cast<const char*>(buf.data() + off + 8),
                        nl),
            inum, InodeType(buf[off + 7])});
      off += rec;
    }
  }
  return out;
}

void DurableFs::dir_insert(Txn& txn, uint64_t dir_inum,
                           const std::string& name, uint64_t child,
                           InodeType type) {
  TxnFile& tf = txn.files.at(dir_inum);
  uint16_t need = dirent_len(name.size());
  uint64_t nblocks = tf.ram.i_size / kBlockSize;

  for (uint64_t logical = 0; logical < nblocks; logical++) {
    std::vector<uint8_t> buf = load_block(&tf, tf.orig, logical);
    uint64_t off = 0;
    while (off + kDirentHeader <= kBlockSize) {
      uint32_t inum = get_u32(buf.data() + off);
      uint16_t rec = get_u16(buf.data() + off + 4);
      uint8_t nl = buf[off + 6];
      uint64_t write_at = kBlockSize;  // sentinel: no slot here
      uint16_t write_rec = 0;
      if (inum == 0 && rec >= need) {
        write_at = off;
        write_rec = rec;
      } else if (inum != 0 && rec >= dirent_len(nl) + need) {
        uint16_t used = dirent_len(nl);
        put_u16(buf.data() + off + 4, used);
        write_at = off + used;
        write_rec = uint16_t(rec - used);
      }
      if (write_at < kBlockSize) {
        put_u32(buf.data() + write_at, uint32_t(child));
        put_u16(buf.data() + write_at + 4, write_rec);
        buf[write_at + 6] = uint8_t(name.size());
        buf[write_at + 7] = uint8_t(type);
        std::memcpy(buf.data() + write_at + 8, name.data(), name.size());
        write_staged(txn, tf, logical * kBlockSize, buf);
        return;
      }
      off += rec;
    }
  }

  // No room in any existing block: the directory grows by one block holding
  // a single entry whose record spans the whole block.
  std::vector<uint8_t> buf(kBlockSize, 0);
  put_u32(buf.data(), uint32_t(child));
  put_u16(buf.data() + 4, uint16_t(kBlockSize));
  buf[6] = uint8_t(name.size());
  buf[7] = uint8_t(type);
  std::memcpy(buf.data() + 8, name.data(), name.size());
  write_staged(txn, tf, nblocks * kBlockSize, buf);
}

void DurableFs::dir_remove(Txn& txn, uint64_t dir_inum,
                           const std::string& name) {
  TxnFile& tf = txn.files.at(dir_inum);
  uint64_t nblocks = tf.ram.i_size / kBlockSize;
  for (uint64_t logical = 0; logical < nblocks; logical++) {
    std::vector<uint8_t> buf = load_block(&tf, tf.orig, logical);
    uint64_t off = 0;
    uint64_t prev_off = kBlockSize;  // sentinel: no previous entry
    while (off + kDirentHeader <= kBlockSize) {
      uint32_t inum = get_u32(buf.data() + off);
      uint16_t rec = get_u16(buf.data() + off + 4);
      uint8_t nl = buf[off + 6];
      if (inum != 0 && nl == name.size() &&
          std::memcmp(buf.data() + off + 8, name.data(), nl) == 0) {
        if (prev_off < kBlockSize) {
          // Merge the record into its predecessor.
          uint16_t prev_rec = get_u16(buf.data() + prev_off + 4);
          put_u16(buf.data() + prev_off + 4, uint16_t(prev_rec + rec));
        } else {
          put_u32(buf.data() + off, 0);  // leading entry: tombstone
        }
        write_staged(txn, tf, logical * kBlockSize, buf);
        return;
      }
      prev_off = off;
      off += rec;
    }
  }
  throw NotFoundError(name);
}

}  // namespace durablefs

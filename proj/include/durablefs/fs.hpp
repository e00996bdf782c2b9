#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "durablefs/layout.hpp"
#include "durablefs/pm_device.hpp"
#include "durablefs/recovery.hpp"
#include "durablefs/txn.hpp"

namespace durablefs {

enum class OpenMode { Read, Write, CreateWrite };

struct FileHandle {
  uint64_t id = 0;  // 0 = closed/invalid
  uint64_t inum = 0;
  OpenMode mode = OpenMode::Read;
};

struct Stat {
  uint64_t inum = 0;
  InodeType type = InodeType::Free;
  uint64_t size = 0;
  uint32_t blocks = 0;
};

struct DirentInfo {
  std::string name;
  uint64_t inum = 0;
  InodeType type = InodeType::Free;
};

struct FsOptions {
  // When false, data-block flushes (and their fences) are skipped; log and
  // metadata persistence is unchanged. Benchmark comparison mode only:
  // visibility is unaffected but data durability is forfeited.
  bool flush_data = true;
};

// Open-to-close file transactions over the persistent-memory image. A write
// handle owns a transaction: every modified block is copied to a fresh
// block, flushed, then logged; close commits metadata via the redo log.
// Readers see last-committed state. Namespace operations commit themselves
// immediately. All public methods serialize on one internal lock.
class DurableFs {
 public:
  static DurableFs format(PmDevice& dev, const MkfsOptions& mo = {},
                          const FsOptions& fo = {});
  static DurableFs mount(PmDevice& dev, const FsOptions& fo = {});

  DurableFs(const DurableFs&) = delete;
  DurableFs& operator=(const DurableFs&) = delete;

  FileHandle open(const std::string& path, OpenMode mode);
  size_t write(FileHandle& h, std::span<const uint8_t> data, uint64_t offset);
  size_t read(const FileHandle& h, std::span<uint8_t> out, uint64_t offset);
  void close(FileHandle& h);
  void abort(FileHandle& h);  // discard a write handle's staged changes

  // One shared transaction across several files; a single commit at
  // close_many makes all of them durable together.
  std::vector<FileHandle> open_many(const std::vector<std::string>& paths);
  void close_many(std::vector<FileHandle>& hs);

  void create(const std::string& path);
  void mkdir(const std::string& path);
  void unlink(const std::string& path);
  void rmdir(const std::string& path);
  std::vector<DirentInfo> readdir(const std::string& path);
  Stat stat(const std::string& path);
  bool exists(const std::string& path);

  const RecoveryReport& recovery_report() const { return recovery_; }
  const RegionMap& rm() const { return rm_; }
  PmDevice& device() { return dev_; }
  TxnManager& txns() { return txns_; }
  std::pair<uint64_t, uint64_t> last_commit_window() const {
    return txns_.last_commit_window();
  }

 private:
  DurableFs(PmDevice& dev, const RegionMap& rm, const FsOptions& fo,
            const RecoveryReport& rep);

  struct OpenFile {
    uint64_t inum = 0;
    OpenMode mode = OpenMode::Read;
    std::shared_ptr<Txn> txn;  // write modes only
    Inode snapshot;            // read mode only
  };

  FileHandle open_impl(const std::string& path, OpenMode mode);
  void create_impl(const std::string& path, InodeType type);
  void remove_impl(const std::string& path, InodeType type);
  void close_txn(Txn& txn);
  OpenFile& lookup(const FileHandle& h);

  static int tree_height(uint64_t i_size);
  uint32_t committed_leaf(const Inode& ino, uint64_t logical) const;
  void collect_tree_blocks(const Inode& ino, std::vector<uint32_t>& out) const;
  std::vector<uint8_t> load_block(const TxnFile* tf, const Inode& committed,
                                  uint64_t logical) const;

  void flush_block(uint32_t block);
  void flush_range(uint32_t block, uint64_t off, uint64_t len);
  void write_staged(Txn& txn, TxnFile& tf, uint64_t offset,
                    std::span<const uint8_t> data);
  uint32_t build_node(Txn& txn, TxnFile& tf, int lvl, uint64_t base,
                      uint32_t old, int old_lvl);
  void stage_trees(Txn& txn);

  std::optional<uint64_t> resolve(const std::string& path);
  std::pair<uint64_t, std::string> resolve_parent(const std::string& path);
  std::optional<uint64_t> dir_lookup(uint64_t dir_inum,
                                     const std::string& name);
  std::vector<DirentInfo> dir_list(uint64_t dir_inum);
  void dir_insert(Txn& txn, uint64_t dir_inum, const std::string& name,
                  uint64_t child, InodeType type);
  void dir_remove(Txn& txn, uint64_t dir_inum, const std::string& name);

  PmDevice& dev_;
  RegionMap rm_;
  FsOptions opts_;
  RecoveryReport recovery_;
  TxnManager txns_;
  std::map<uint64_t, OpenFile> handles_;
  uint64_t next_handle_ = 1;
  std::mutex mu_;
};

std::vector<std::string> split_path(const std::string& path);

}  // namespace durablefs

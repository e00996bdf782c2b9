#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "durablefs/fs.hpp"
#include "durablefs/layout.hpp"
#include "durablefs/pm_device.hpp"

namespace durablefs {

// ---------------------------------------------------------------------------
// Deterministic data patterns
// ---------------------------------------------------------------------------

// 64-bit finalizer (splitmix64); used for pattern bytes and derived seeds.
uint64_t mix64(uint64_t x);

// Byte at absolute file offset `off` of the pattern stream named by `seed`.
// Stateless, so any byte range of any write is reproducible independently.
uint8_t pattern_byte(uint64_t seed, uint64_t off);
void pattern_fill(uint64_t seed, uint64_t off, std::span<uint8_t> out);

// ---------------------------------------------------------------------------
// Workload scripts
// ---------------------------------------------------------------------------

struct OpCreate {
  std::string path;
};
struct OpMkdir {
  std::string path;
};
struct OpOpen {
  std::string name;  // script handle name
  OpenMode mode = OpenMode::Write;
  std::string path;
};
struct OpWrite {
  std::string name;
  uint64_t offset = 0;
  uint64_t length = 0;
  uint64_t seed = 0;
};
struct OpRead {
  std::string name;
  uint64_t offset = 0;
  uint64_t length = 0;
};
struct OpClose {
  std::string name;
};
struct OpUnlink {
  std::string path;
};
struct OpRmdir {
  std::string path;
};

using ScriptOp = std::variant<OpCreate, OpMkdir, OpOpen, OpWrite, OpRead,
                              OpClose, OpUnlink, OpRmdir>;

struct WorkloadScript {
  std::vector<ScriptOp> ops;
};

// Line-oriented text form. One op per line:
//   create /a
//   mkdir /d
//   open <r|w|cw> [name] /path      (handle name defaults to "h")
//   write <name> <offset> <length> seed<N>
//   read <name> <offset> <length>
//   close <name>
//   unlink /a
//   rmdir /d
// '#' starts a comment; blank lines are ignored. Throws FormatError.
WorkloadScript parse_script(const std::string& text);
std::string script_to_text(const WorkloadScript& s);

// ---------------------------------------------------------------------------
// Reference model
// ---------------------------------------------------------------------------

struct ModelFile {
  InodeType type = InodeType::File;
  std::vector<uint8_t> data;  // empty for directories

  bool operator==(const ModelFile&) const = default;
};

// What one script op moved into committed state. Empty optional when the op
// committed nothing (opens of existing files, writes, reads, read closes).
struct CommitEffect {
  std::string path;
  bool exists = false;
  InodeType type = InodeType::File;
  std::vector<uint8_t> content;
};

// Pure in-memory mirror of the committed-state semantics, with zero storage
// machinery: write handles stage into a private buffer applied atomically by
// close; namespace ops commit instantly; opening a missing path for create
// commits an empty file first and then stages, mirroring the engine.
class ReferenceModel {
 public:
  ReferenceModel();
  // Starts from pre-existing committed content (root is added if missing).
  explicit ReferenceModel(std::map<std::string, ModelFile> initial);

  // Throws LogicError when the op is invalid against current state; valid
  // scripts never trigger this.
  std::optional<CommitEffect> apply(const ScriptOp& op);

  // Read through an open handle: write handles see their staged bytes, read
  // handles the committed content captured at open.
  std::vector<uint8_t> read(const std::string& name, uint64_t off,
                            uint64_t len) const;

  bool exists(const std::string& path) const;
  const ModelFile* find(const std::string& path) const;
  const std::map<std::string, ModelFile>& files() const { return committed_; }
  bool handle_open(const std::string& name) const;
  bool path_busy(const std::string& path) const;  // any open handle on it

 private:
  struct Staged {
    std::string path;
    bool writable = false;
    std::vector<uint8_t> data;
  };
  std::map<std::string, ModelFile> committed_;
  std::map<std::string, Staged> handles_;
};

// ---------------------------------------------------------------------------
// Script execution against a live file system
// ---------------------------------------------------------------------------

// Runs one op; `handles` maps script handle names to fs handles. Returns the
// device-op window of the commit if the op committed a transaction (an open
// that had to create the file commits once; a write-handle close commits).
std::optional<std::pair<uint64_t, uint64_t>> apply_script_op(
    DurableFs& fs, const ScriptOp& op,
    std::map<std::string, FileHandle>& handles);

// ---------------------------------------------------------------------------
// Recorded runs and crash matrices
// ---------------------------------------------------------------------------

// One committed version of a path. `lo` is the first trace-prefix length at
// which the producing commit record can be durable (its end-pointer nt store
// has executed), `hi` the first at which it is certainly durable (fence
// executed). A crash at prefix k admits: the last version with hi <= k, and
// additionally the version with lo <= k < hi when one exists.
struct PathVersion {
  uint64_t lo = 0;
  uint64_t hi = 0;
  bool exists = false;
  InodeType type = InodeType::File;
  std::vector<uint8_t> content;
};

struct ScriptTrace {
  std::vector<uint8_t> base_image;  // durable image before mount + script
  std::vector<TraceOp> ops;         // every mutating device op after that
  RegionMap rm;
  std::map<std::string, std::vector<PathVersion>> timelines;
};

// Runs the script once on a fresh image (or a caller-provided base image)
// with tracing enabled and builds per-path admissible-image timelines from
// the reference model plus the exact commit windows the log reported.
ScriptTrace record_script_run(const WorkloadScript& s,
                              uint64_t capacity_bytes = 4ull << 20,
                              const MkfsOptions& mo = {},
                              const FsOptions& fo = {});
ScriptTrace record_script_run_on(std::vector<uint8_t> base_image,
                                 const WorkloadScript& s,
                                 const FsOptions& fo = {});

// Intended (word0, word1) per logical log index, captured at the op where
// the end pointer first moved past that index. Crash images are checked
// against this map: any mismatch below a durable end pointer is a torn
// entry.
std::map<uint64_t, std::pair<uint64_t, uint64_t>> build_log_intent(
    const ScriptTrace& st);

struct MatrixOptions {
  OrderingModel model = OrderingModel::StrictOrdered;
  bool sample = false;  // false = every boundary in [0, ops]
  uint64_t sample_n = 1000;
  uint64_t seed = 1;  // seeds both sampling and crash images
  uint32_t images_per_point = 1;
  // Called once per crash image with the point, pass/fail, and detail.
  std::function<void(uint64_t point, bool ok, const std::string& what)>
      on_point;
};

struct MatrixFailure {
  uint64_t point = 0;
  uint64_t image_seed = 0;
  std::string kind;  // "oracle" | "fsck" | "mount" | "torn"
  std::string what;
};

struct MatrixReport {
  uint64_t points = 0;
  uint64_t images = 0;
  uint64_t oracle_failures = 0;
  uint64_t fsck_failures = 0;
  uint64_t mount_failures = 0;
  uint64_t torn_findings = 0;
  std::vector<MatrixFailure> failures;  // first 64 kept
  bool clean() const {
    return oracle_failures == 0 && fsck_failures == 0 && mount_failures == 0 &&
           torn_findings == 0;
  }
  std::string summary() const;
};

// For each chosen trace-prefix length: build the crash image, check the log
// for torn entries, mount (which recovers), fsck, and compare every path in
// the timelines against its admissible versions.
MatrixReport run_crash_matrix(const ScriptTrace& st,
                              const MatrixOptions& opt = {});

// Torn-entry probe: replay to the middle of the first commit append (all
// three nt stores pending, fence not yet executed) and sweep crash seeds
// until some entry below a durable end pointer carries bytes other than the
// intended ones. Under ordered persistence this never fires; under the
// relaxed model it should fire within a few seeds.
struct TornProbe {
  bool found = false;
  uint64_t seeds_tried = 0;
  uint64_t point = 0;
};
TornProbe probe_torn(const ScriptTrace& st, OrderingModel model,
                     uint64_t max_seeds);

// Crash during recovery: for sampled outer crash points, run recovery to
// completion once (reference), then re-run it with an injected crash at
// every interior device-op boundary followed by a full second recovery; the
// metadata region must be byte-identical to the reference in every case.
struct IdempotenceReport {
  uint64_t outer_points = 0;
  uint64_t inner_points = 0;
  uint64_t mismatches = 0;
  std::vector<std::string> failures;  // first 16 kept
  std::string summary() const;
};
IdempotenceReport run_recovery_idempotence(
    const ScriptTrace& st, uint64_t outer_samples, uint64_t seed,
    OrderingModel model = OrderingModel::StrictOrdered);

// ---------------------------------------------------------------------------
// Model equivalence
// ---------------------------------------------------------------------------

// Seeded random op sequence, valid by construction (no busy/no-space/missing
// -path conditions), closing every handle at the end.
WorkloadScript generate_random_script(uint64_t n_ops, uint64_t seed);

struct EquivalenceReport {
  bool ok = true;
  uint64_t ops = 0;
  std::string detail;
};

// Executes the generated script against both the engine and the reference
// model, comparing every read's bytes on the way and the full committed
// tree (paths, types, sizes, contents) plus an fsck at the end.
EquivalenceReport run_equivalence(uint64_t n_ops, uint64_t seed,
                                  uint64_t capacity_bytes = 8ull << 20,
                                  const MkfsOptions& mo = {});

// Recursive committed-tree walk used by equivalence and content hashing.
std::map<std::string, ModelFile> walk_tree(DurableFs& fs);

}  // namespace durablefs

#include "durablefs/harness.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "durablefs/errors.hpp"
#include "durablefs/recovery.hpp"

namespace durablefs {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

uint64_t le64_at(const std::vector<uint8_t>& img, uint64_t addr) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | img[size_t(addr) + size_t(i)];
  return v;
}

std::string parent_of(const std::string& p) {
  auto pos = p.find_last_of('/');
  if (pos == 0) return "/";
  return p.substr(0, pos);
}

}  // namespace

// ---------------------------------------------------------------------------
// Patterns
// ---------------------------------------------------------------------------

uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

uint8_t pattern_byte(uint64_t seed, uint64_t off) {
  uint64_t w = mix64(seed ^ mix64(off >> 3));
  return uint8_t(w >> ((off & 7) * 8));
}

void pattern_fill(uint64_t seed, uint64_t off, std::span<uint8_t> out) {
  uint64_t word = 0;
  uint64_t cur = ~uint64_t{0};
  for (size_t i = 0; i < out.size(); ++i) {
    uint64_t o = off + i;
    if ((o >> 3) != cur) {
      cur = o >> 3;
      word = mix64(seed ^ mix64(cur));
    }
    out[i] = uint8_t(word >> ((o & 7) * 8));
  }
}

// ---------------------------------------------------------------------------
// Script text form
// ---------------------------------------------------------------------------

WorkloadScript parse_script(const std::string& text) {
  WorkloadScript ws;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line.resize(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    std::string t;
    while (ls >> t) tok.push_back(t);
    if (tok.empty()) continue;

    auto fail = [&](const std::string& m) {
      return FormatError("script line " + std::to_string(lineno) + ": " + m);
    };
    auto num = [&](const std::string& s) -> uint64_t {
      try {
        size_t pos = 0;
        uint64_t v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
      } catch (const std::exception&) {
        throw fail("bad number '" + s + "'");
      }
    };
    auto path_at = [&](size_t i) -> const std::string& {
      if (i >= tok.size() || tok[i].empty() || tok[i][0] != '/')
        throw fail("expected absolute path");
      return tok[i];
    };
    auto arity = [&](size_t n, const char* usage) {
      if (tok.size() != n) throw fail(std::string("usage: ") + usage);
    };

    const std::string& kw = tok[0];
    if (kw == "create") {
      arity(2, "create /path");
      ws.ops.push_back(OpCreate{path_at(1)});
    } else if (kw == "mkdir") {
      arity(2, "mkdir /path");
      ws.ops.push_back(OpMkdir{path_at(1)});
    } else if (kw == "open") {
      if (tok.size() != 3 && tok.size() != 4)
        throw fail("usage: open <r|w|cw> [name] /path");
      OpenMode m;
      if (tok[1] == "r")
        m = OpenMode::Read;
      else if (tok[1] == "w")
        m = OpenMode::Write;
      else if (tok[1] == "cw")
        m = OpenMode::CreateWrite;
      else
        throw fail("bad open mode '" + tok[1] + "'");
      std::string name = tok.size() == 4 ? tok[2] : "h";
      ws.ops.push_back(OpOpen{std::move(name), m, path_at(tok.size() - 1)});
    } else if (kw == "write") {
      arity(5, "write <name> <offset> <length> seed<N>");
      if (tok[4].rfind("seed", 0) != 0) throw fail("expected seed<N>");
      ws.ops.push_back(
          OpWrite{tok[1], num(tok[2]), num(tok[3]), num(tok[4].substr(4))});
    } else if (kw == "read") {
      arity(4, "read <name> <offset> <length>");
      ws.ops.push_back(OpRead{tok[1], num(tok[2]), num(tok[3])});
    } else if (kw == "close") {
      arity(2, "close <name>");
      ws.ops.push_back(OpClose{tok[1]});
    } else if (kw == "unlink") {
      arity(2, "unlink /path");
      ws.ops.push_back(OpUnlink{path_at(1)});
    } else if (kw == "rmdir") {
      arity(2, "rmdir /path");
      ws.ops.push_back(OpRmdir{path_at(1)});
    } else {
      throw fail("unknown op '" + kw + "'");
    }
  }
  return ws;
}

std::string script_to_text(const WorkloadScript& s) {
  std::ostringstream out;
  for (const ScriptOp& op : s.ops) {
    std::visit(
        overloaded{
            [&](const OpCreate& o) { out << "create " << o.path; },
            [&](const OpMkdir& o) { out << "mkdir " << o.path; },
            [&](const OpOpen& o) {
              const char* m = o.mode == OpenMode::Read      ? "r"
                              : o.mode == OpenMode::Write   ? "w"
                                                            : "cw";
              out << "open " << m << ' ' << o.name << ' ' << o.path;
            },
            [&](const OpWrite& o) {
              out << "write " << o.name << ' ' << o.offset << ' ' << o.length
                  << " seed" << o.seed;
            },
            [&](const OpRead& o) {
              out << "read " << o.name << ' ' << o.offset << ' ' << o.length;
            },
            [&](const OpClose& o) { out << "close " << o.name; },
            [&](const OpUnlink& o) { out << "unlink " << o.path; },
            [&](const OpRmdir& o) { out << "rmdir " << o.path; },
        },
        op);
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Reference model
// ---------------------------------------------------------------------------

ReferenceModel::ReferenceModel() {
  committed_["/"] = ModelFile{InodeType::Directory, {}};
}

ReferenceModel::ReferenceModel(std::map<std::string, ModelFile> initial)
    : committed_(std::move(initial)) {
  committed_["/"] = ModelFile{InodeType::Directory, {}};
}

bool ReferenceModel::exists(const std::string& path) const {
  return committed_.count(path) > 0;
}

const ModelFile* ReferenceModel::find(const std::string& path) const {
  auto it = committed_.find(path);
  return it == committed_.end() ? nullptr : &it->second;
}

bool ReferenceModel::handle_open(const std::string& name) const {
  return handles_.count(name) > 0;
}

bool ReferenceModel::path_busy(const std::string& path) const {
  for (const auto& [n, h] : handles_)
    if (h.path == path) return true;
  return false;
}

std::optional<CommitEffect> ReferenceModel::apply(const ScriptOp& op) {
  auto require = [](bool c, const std::string& m) {
    if (!c) throw LogicError("model: " + m);
  };
  auto writer_on = [&](const std::string& path) {
    for (const auto& [n, h] : handles_)
      if (h.writable && h.path == path) return true;
    return false;
  };
  auto check_parent = [&](const std::string& path) {
    const ModelFile* par = find(parent_of(path));
    require(par && par->type == InodeType::Directory,
            "missing parent dir for " + path);
  };

  return std::visit(
      overloaded{
          [&](const OpCreate& o) -> std::optional<CommitEffect> {
            require(!exists(o.path), "create over existing " + o.path);
            check_parent(o.path);
            committed_[o.path] = ModelFile{InodeType::File, {}};
            return CommitEffect{o.path, true, InodeType::File, {}};
          },
          [&](const OpMkdir& o) -> std::optional<CommitEffect> {
            require(!exists(o.path), "mkdir over existing " + o.path);
            check_parent(o.path);
            committed_[o.path] = ModelFile{InodeType::Directory, {}};
            return CommitEffect{o.path, true, InodeType::Directory, {}};
          },
          [&](const OpOpen& o) -> std::optional<CommitEffect> {
            require(!handle_open(o.name), "handle name in use: " + o.name);
            std::optional<CommitEffect> eff;
            if (o.mode == OpenMode::CreateWrite && !exists(o.path)) {
              check_parent(o.path);
              committed_[o.path] = ModelFile{InodeType::File, {}};
              eff = CommitEffect{o.path, true, InodeType::File, {}};
            }
            const ModelFile* f = find(o.path);
            require(f != nullptr, "open missing path " + o.path);
            require(f->type == InodeType::File, "open non-file " + o.path);
            bool writable = o.mode != OpenMode::Read;
            if (writable)
              require(!writer_on(o.path), "second writer on " + o.path);
            handles_[o.name] = Staged{o.path, writable, f->data};
            return eff;
          },
          [&](const OpWrite& o) -> std::optional<CommitEffect> {
            auto it = handles_.find(o.name);
            require(it != handles_.end() && it->second.writable,
                    "write on bad handle " + o.name);
            auto& d = it->second.data;
            if (o.offset + o.length > d.size())
              d.resize(o.offset + o.length, 0);
            pattern_fill(o.seed, o.offset,
                         std::span(d).subspan(o.offset, o.length));
            return std::nullopt;
          },
          [&](const OpRead& o) -> std::optional<CommitEffect> {
            require(handle_open(o.name), "read on bad handle " + o.name);
            return std::nullopt;
          },
          [&](const OpClose& o) -> std::optional<CommitEffect> {
            auto it = handles_.find(o.name);
            require(it != handles_.end(), "close on bad handle " + o.name);
            Staged st = std::move(it->second);
            handles_.erase(it);
            if (!st.writable) return std::nullopt;
            require(exists(st.path), "commit to missing path " + st.path);
            committed_[st.path].data = st.data;
            return CommitEffect{st.path, true, InodeType::File,
                                std::move(st.data)};
          },
          [&](const OpUnlink& o) -> std::optional<CommitEffect> {
            const ModelFile* f = find(o.path);
            require(f && f->type == InodeType::File, "unlink " + o.path);
            require(!writer_on(o.path), "unlink of write-locked " + o.path);
            committed_.erase(o.path);
            return CommitEffect{o.path, false, InodeType::File, {}};
          },
          [&](const OpRmdir& o) -> std::optional<CommitEffect> {
            require(o.path != "/", "rmdir of root");
            const ModelFile* f = find(o.path);
            require(f && f->type == InodeType::Directory, "rmdir " + o.path);
            std::string prefix = o.path + "/";
            for (const auto& [p, mf] : committed_)
              require(p.rfind(prefix, 0) != 0, "rmdir of non-empty " + o.path);
            committed_.erase(o.path);
            return CommitEffect{o.path, false, InodeType::Directory, {}};
          },
      },
      op);
}

std::vector<uint8_t> ReferenceModel::read(const std::string& name,
                                          uint64_t off, uint64_t len) const {
  auto it = handles_.find(name);
  if (it == handles_.end()) throw LogicError("model: read on closed handle");
  const auto& d = it->second.data;
  if (off >= d.size()) return {};
  uint64_t n = std::min<uint64_t>(len, d.size() - off);
  return std::vector<uint8_t>(d.begin() + long(off), d.begin() + long(off + n));
}

// ---------------------------------------------------------------------------
// Script execution against a live file system
// ---------------------------------------------------------------------------

std::optional<std::pair<uint64_t, uint64_t>> apply_script_op(
    DurableFs& fs, const ScriptOp& op,
    std::map<std::string, FileHandle>& handles) {
  auto before = fs.last_commit_window();
  std::visit(
      overloaded{
          [&](const OpCreate& o) { fs.create(o.path); },
          [&](const OpMkdir& o) { fs.mkdir(o.path); },
          [&](const OpOpen& o) {
            if (handles.count(o.name))
              throw LogicError("script handle name in use: " + o.name);
            handles[o.name] = fs.open(o.path, o.mode);
          },
          [&](const OpWrite& o) {
            std::vector<uint8_t> buf(o.length);
            pattern_fill(o.seed, o.offset, buf);
            fs.write(handles.at(o.name), buf, o.offset);
          },
          [&](const OpRead& o) {
            std::vector<uint8_t> buf(o.length);
            fs.read(handles.at(o.name), buf, o.offset);
          },
          [&](const OpClose& o) {
            auto it = handles.find(o.name);
            if (it == handles.end())
              throw LogicError("close of unknown handle: " + o.name);
            fs.close(it->second);
            handles.erase(it);
          },
          [&](const OpUnlink& o) { fs.unlink(o.path); },
          [&](const OpRmdir& o) { fs.rmdir(o.path); },
      },
      op);
  auto after = fs.last_commit_window();
  if (after != before) return after;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Recording
// ---------------------------------------------------------------------------

namespace {

ScriptTrace record_from_device(PmDevice& dev, const WorkloadScript& s,
                               const FsOptions& fo) {
  ScriptTrace st;
  st.base_image = dev.durable_bytes();
  st.rm = read_region_map(dev);

  // Pre-existing content (caller-provided bases with files on them): walk a
  // scratch mount so those paths get oracle timelines too.
  std::map<std::string, ModelFile> initial;
  {
    PmDevice scratch =
        PmDevice::from_image(st.base_image, OrderingModel::StrictOrdered);
    DurableFs sfs = DurableFs::mount(scratch);
    initial = walk_tree(sfs);
  }
  for (const auto& [p, mf] : initial)
    st.timelines[p] = {PathVersion{0, 0, true, mf.type, mf.data}};

  dev.enable_trace();
  uint64_t base_ops = dev.op_index();
  DurableFs fs = DurableFs::mount(dev, fo);
  ReferenceModel model(std::move(initial));
  std::map<std::string, FileHandle> hm;
  for (const ScriptOp& op : s.ops) {
    auto win = apply_script_op(fs, op, hm);
    auto eff = model.apply(op);
    if (win.has_value() != eff.has_value())
      throw LogicError("commit bookkeeping diverged between engine and model");
    if (eff) {
      auto& tl = st.timelines[eff->path];
      if (tl.empty())
        tl.push_back(PathVersion{0, 0, false, eff->type, {}});
      tl.push_back(PathVersion{win->first - base_ops, win->second - base_ops,
                               eff->exists, eff->type,
                               std::move(eff->content)});
    }
  }
  st.ops = dev.take_trace();
  return st;
}

}  // namespace

ScriptTrace record_script_run(const WorkloadScript& s, uint64_t capacity_bytes,
                              const MkfsOptions& mo, const FsOptions& fo) {
  PmDevice dev(capacity_bytes, OrderingModel::StrictOrdered);
  mkfs(dev, mo);
  return record_from_device(dev, s, fo);
}

ScriptTrace record_script_run_on(std::vector<uint8_t> base_image,
                                 const WorkloadScript& s,
                                 const FsOptions& fo) {
  PmDevice dev =
      PmDevice::from_image(std::move(base_image), OrderingModel::StrictOrdered);
  return record_from_device(dev, s, fo);
}

// ---------------------------------------------------------------------------
// Log intent and crash-image checks
// ---------------------------------------------------------------------------

std::map<uint64_t, std::pair<uint64_t, uint64_t>> build_log_intent(
    const ScriptTrace& st) {
  const RegionMap& rm = st.rm;
  const uint64_t end_addr = rm.log_header_off + 16;
  const uint64_t ebeg = rm.log_entry_off;
  const uint64_t eend = rm.log_entry_off + rm.log_capacity * 16;

  std::map<uint64_t, uint64_t> words;  // entry-region addr -> latest nt value
  std::map<uint64_t, std::pair<uint64_t, uint64_t>> intent;
  uint64_t cur_end = le64_at(st.base_image, end_addr);
  auto word_at = [&](uint64_t a) {
    auto it = words.find(a);
    return it != words.end() ? it->second : le64_at(st.base_image, a);
  };
  for (const TraceOp& op : st.ops) {
    if (op.kind != OpKind::NtStore) continue;
    if (op.addr == end_addr) {
      for (uint64_t idx = cur_end; idx < op.value; ++idx) {
        uint64_t a = ebeg + (idx % rm.log_capacity) * 16;
        intent[idx] = {word_at(a), word_at(a + 8)};
      }
      cur_end = std::max(cur_end, op.value);
    } else if (op.addr >= ebeg && op.addr < eend) {
      words[op.addr] = op.value;
    }
  }
  return intent;
}

namespace {

bool matches_version(DurableFs& fs, const std::string& path,
                     const PathVersion& v, std::string& why) {
  bool ex = fs.exists(path);
  if (!v.exists) {
    if (ex) {
      why = "present, want absent";
      return false;
    }
    return true;
  }
  if (!ex) {
    why = "absent";
    return false;
  }
  Stat s = fs.stat(path);
  if (s.type != v.type) {
    why = "type mismatch";
    return false;
  }
  if (v.type != InodeType::File) return true;
  if (s.size != v.content.size()) {
    why = "size " + std::to_string(s.size) + ", want " +
          std::to_string(v.content.size());
    return false;
  }
  if (s.size == 0) return true;
  std::vector<uint8_t> buf(s.size);
  FileHandle h = fs.open(path, OpenMode::Read);
  size_t got = fs.read(h, buf, 0);
  fs.close(h);
  if (got != buf.size() ||
      !std::equal(buf.begin(), buf.end(), v.content.begin())) {
    why = "content differs";
    return false;
  }
  return true;
}

void check_one_image(const ScriptTrace& st,
                     const std::map<uint64_t, std::pair<uint64_t, uint64_t>>&
                         intent,
                     std::vector<uint8_t> img, const MatrixOptions& opt,
                     uint64_t k, uint64_t iseed, MatrixReport& rep) {
  bool ok = true;
  std::string what;
  auto fail = [&](const char* kind, uint64_t& counter, const std::string& d) {
    ok = false;
    ++counter;
    if (!what.empty()) what += "; ";
    what += std::string(kind) + ": " + d;
    if (rep.failures.size() < 64)
      rep.failures.push_back(MatrixFailure{k, iseed, kind, d});
  };

  const RegionMap& rm = st.rm;
  uint64_t ls = le64_at(img, rm.log_header_off + 8);
  uint64_t le = le64_at(img, rm.log_header_off + 16);
  if (le < ls || le - ls > rm.log_capacity) {
    fail("torn", rep.torn_findings,
         "log bounds start=" + std::to_string(ls) +
             " end=" + std::to_string(le));
  } else {
    uint64_t torn = 0;
    std::string d;
    for (uint64_t idx = ls; idx < le; ++idx) {
      uint64_t a = rm.log_entry_off + (idx % rm.log_capacity) * 16;
      uint64_t w0 = le64_at(img, a);
      uint64_t w1 = le64_at(img, a + 8);
      auto it = intent.find(idx);
      if (it == intent.end() || it->second.first != w0 ||
          it->second.second != w1) {
        ++torn;
        if (d.empty())
          d = "entry " + std::to_string(idx) + " differs from intended bytes";
      }
    }
    if (torn)
      fail("torn", rep.torn_findings,
           d + " (" + std::to_string(torn) + " entries)");
  }

  PmDevice dev = PmDevice::from_image(std::move(img), opt.model);
  try {
    DurableFs fs = DurableFs::mount(dev);
    auto viol = fsck(dev);
    if (!viol.empty()) {
      std::string d = viol[0];
      if (viol.size() > 1)
        d += " (+" + std::to_string(viol.size() - 1) + " more)";
      fail("fsck", rep.fsck_failures, d);
    }
    for (const auto& [path, versions] : st.timelines) {
      const PathVersion* committed = &versions[0];
      const PathVersion* pending = nullptr;
      for (size_t i = 1; i < versions.size(); ++i) {
        const PathVersion& v = versions[i];
        if (v.hi <= k) {
          committed = &v;
        } else {
          if (v.lo <= k) pending = &v;
          break;
        }
      }
      std::string w1s, w2s;
      bool m = matches_version(fs, path, *committed, w1s);
      if (!m && pending) m = matches_version(fs, path, *pending, w2s);
      if (!m)
        fail("oracle", rep.oracle_failures,
             path + ": committed[" + w1s + "]" +
                 (pending ? " pending[" + w2s + "]" : ""));
    }
  } catch (const Error& e) {
    fail("mount", rep.mount_failures, e.what());
  }
  if (opt.on_point) opt.on_point(k, ok, what);
}

}  // namespace

MatrixReport run_crash_matrix(const ScriptTrace& st, const MatrixOptions& opt) {
  MatrixReport rep;
  auto intent = build_log_intent(st);
  const uint64_t n = st.ops.size();

  std::vector<uint64_t> points;
  if (!opt.sample || opt.sample_n >= n + 1) {
    points.resize(n + 1);
    std::iota(points.begin(), points.end(), uint64_t{0});
  } else {
    std::mt19937_64 rng(mix64(opt.seed));
    std::set<uint64_t> chosen;
    while (chosen.size() < opt.sample_n) chosen.insert(rng() % (n + 1));
    points.assign(chosen.begin(), chosen.end());
  }

  PmDevice replay = PmDevice::from_image(st.base_image, opt.model);
  uint64_t applied = 0;
  for (uint64_t k : points) {
    while (applied < k) replay.apply(st.ops[applied++]);
    ++rep.points;
    for (uint32_t i = 0; i < opt.images_per_point; ++i) {
      uint64_t iseed =
          mix64(opt.seed * 0x9E3779B97F4A7C15ull + k * 0x100000001B3ull + i);
      ++rep.images;
      check_one_image(st, intent, replay.crash_image(iseed), opt, k, iseed,
                      rep);
    }
  }
  return rep;
}

std::string MatrixReport::summary() const {
  std::ostringstream out;
  out << "crash matrix: " << points << " points, " << images << " images"
      << ", oracle failures " << oracle_failures << ", fsck failures "
      << fsck_failures << ", mount failures " << mount_failures
      << ", torn findings " << torn_findings << " -> "
      << (clean() ? "CLEAN" : "VIOLATIONS");
  return out.str();
}

TornProbe probe_torn(const ScriptTrace& st, OrderingModel model,
                     uint64_t max_seeds) {
  TornProbe res;
  uint64_t point = ~uint64_t{0};
  for (const auto& [p, tl] : st.timelines)
    for (const PathVersion& v : tl)
      if (v.hi > 0 && v.lo < point) point = v.lo;
  if (point == ~uint64_t{0} || point > st.ops.size()) return res;
  res.point = point;

  auto intent = build_log_intent(st);
  PmDevice replay = PmDevice::from_image(st.base_image, model);
  for (uint64_t i = 0; i < point; ++i) replay.apply(st.ops[i]);

  const RegionMap& rm = st.rm;
  for (uint64_t sd = 1; sd <= max_seeds; ++sd) {
    res.seeds_tried = sd;
    auto img = replay.crash_image(mix64(sd * 0x9E3779B97F4A7C15ull));
    uint64_t ls = le64_at(img, rm.log_header_off + 8);
    uint64_t le = le64_at(img, rm.log_header_off + 16);
    bool torn = le < ls || le - ls > rm.log_capacity;
    for (uint64_t idx = ls; !torn && idx < le; ++idx) {
      uint64_t a = rm.log_entry_off + (idx % rm.log_capacity) * 16;
      auto it = intent.find(idx);
      torn = it == intent.end() || it->second.first != le64_at(img, a) ||
             it->second.second != le64_at(img, a + 8);
    }
    if (torn) {
      res.found = true;
      return res;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Recovery idempotence
// ---------------------------------------------------------------------------

IdempotenceReport run_recovery_idempotence(const ScriptTrace& st,
                                           uint64_t outer_samples,
                                           uint64_t seed,
                                           OrderingModel model) {
  IdempotenceReport rep;
  const uint64_t n = st.ops.size();
  std::vector<uint64_t> points;
  if (outer_samples >= n + 1) {
    points.resize(n + 1);
    std::iota(points.begin(), points.end(), uint64_t{0});
  } else {
    std::mt19937_64 rng(mix64(seed));
    std::set<uint64_t> chosen;
    while (chosen.size() < outer_samples) chosen.insert(rng() % (n + 1));
    points.assign(chosen.begin(), chosen.end());
  }

  PmDevice replay = PmDevice::from_image(st.base_image, model);
  uint64_t applied = 0;
  for (uint64_t k : points) {
    while (applied < k) replay.apply(st.ops[applied++]);
    ++rep.outer_points;
    auto crash = replay.crash_image(mix64(seed ^ (k * 0x100000001B3ull)));

    PmDevice ref = PmDevice::from_image(crash, model);
    recover(ref);
    const uint64_t inner_ops = ref.op_index();
    std::span<const uint8_t> ref_meta(ref.durable_bytes().data(),
                                      st.rm.data_off);

    for (uint64_t j = 0; j <= inner_ops; ++j) {
      ++rep.inner_points;
      PmDevice d2 = PmDevice::from_image(crash, model);
      d2.set_trap(j);
      try {
        recover(d2);
      } catch (const CrashInjected&) {
      }
      d2.clear_trap();
      auto img2 = d2.crash_image(mix64(seed ^ k ^ (j * 0x9E3779B9ull)));
      PmDevice d3 = PmDevice::from_image(std::move(img2), model);
      recover(d3);
      if (!std::equal(ref_meta.begin(), ref_meta.end(),
                      d3.durable_bytes().begin())) {
        ++rep.mismatches;
        if (rep.failures.size() < 16)
          rep.failures.push_back("point " + std::to_string(k) + " inner " +
                                 std::to_string(j) +
                                 ": metadata differs after second recovery");
      }
    }
  }
  return rep;
}

std::string IdempotenceReport::summary() const {
  std::ostringstream out;
  out << "recovery idempotence: " << outer_points << " crash points, "
      << inner_points << " interior boundaries, " << mismatches
      << " mismatches -> " << (mismatches == 0 ? "CLEAN" : "VIOLATIONS");
  return out.str();
}

// ---------------------------------------------------------------------------
// Random scripts and model equivalence
// ---------------------------------------------------------------------------

WorkloadScript generate_random_script(uint64_t n_ops, uint64_t seed) {
  std::mt19937_64 rng(mix64(seed));
  WorkloadScript ws;
  ReferenceModel model;  // replica that keeps generated ops valid

  struct H {
    std::string name;
    std::string path;
    bool writable;
    uint64_t opened_at;
  };
  std::vector<std::string> dirs{"/"};
  std::vector<std::string> avail;  // committed files with no open handle
  std::vector<H> writers, readers;
  uint64_t next_file = 0, next_dir = 0, next_handle = 0;
  uint64_t n_files = 0;
  uint64_t cur_op = 0;

  constexpr uint64_t kMaxFileBytes = 16384;  // trees stay at height <= 1
  constexpr uint64_t kMaxFiles = 48;
  constexpr uint64_t kMaxDirs = 6;
  constexpr size_t kMaxWriters = 5;
  constexpr size_t kMaxReaders = 4;
  // An open handle pins its transaction's oldest redo-log entry, so log trim
  // cannot pass it. Bounding handle lifetime bounds that pinned window: at
  // most ~10 entries are appended per op (a four-block write plus size and
  // block-count updates), so 150 ops stays well inside the default
  // eight-block log (~2045 entries) no matter how long the script runs.
  constexpr uint64_t kMaxHandleLife = 150;

  auto rnd = [&](uint64_t m) -> uint64_t { return m ? rng() % m : 0; };
  auto emit = [&](ScriptOp op) {
    model.apply(op);
    ws.ops.push_back(std::move(op));
  };
  auto new_file_path = [&] {
    const std::string& d = dirs[rnd(dirs.size())];
    return (d == "/" ? std::string{} : d) + "/f" + std::to_string(next_file++);
  };
  auto take_avail = [&]() -> std::string {
    size_t i = rnd(avail.size());
    std::string p = avail[i];
    avail.erase(avail.begin() + long(i));
    return p;
  };

  auto try_create = [&]() -> bool {
    if (n_files >= kMaxFiles) return false;
    std::string p = new_file_path();
    emit(OpCreate{p});
    avail.push_back(std::move(p));
    ++n_files;
    return true;
  };
  auto try_mkdir = [&]() -> bool {
    if (dirs.size() - 1 >= kMaxDirs) return false;
    std::string p = "/d" + std::to_string(next_dir++);
    emit(OpMkdir{p});
    dirs.push_back(std::move(p));
    return true;
  };
  auto try_open_cw = [&]() -> bool {
    if (writers.size() >= kMaxWriters) return false;
    std::string p;
    if ((rng() & 1) == 0 && !avail.empty()) {
      p = take_avail();
    } else if (n_files < kMaxFiles) {
      p = new_file_path();
      ++n_files;
    } else if (!avail.empty()) {
      p = take_avail();
    } else {
      return false;
    }
    std::string name = "h" + std::to_string(next_handle++);
    emit(OpOpen{name, OpenMode::CreateWrite, p});
    writers.push_back(H{std::move(name), std::move(p), true, cur_op});
    return true;
  };
  auto try_open_w = [&]() -> bool {
    if (writers.size() >= kMaxWriters || avail.empty()) return false;
    std::string p = take_avail();
    std::string name = "h" + std::to_string(next_handle++);
    emit(OpOpen{name, OpenMode::Write, p});
    writers.push_back(H{std::move(name), std::move(p), true, cur_op});
    return true;
  };
  auto try_open_r = [&]() -> bool {
    if (readers.size() >= kMaxReaders || avail.empty()) return false;
    std::string p = take_avail();
    std::string name = "h" + std::to_string(next_handle++);
    emit(OpOpen{name, OpenMode::Read, p});
    readers.push_back(H{std::move(name), std::move(p), false, cur_op});
    return true;
  };
  auto try_write = [&]() -> bool {
    if (writers.empty()) return false;
    const H& w = writers[rnd(writers.size())];
    uint64_t len = 1 + rnd(9000);
    uint64_t off = rnd(kMaxFileBytes - len + 1);
    emit(OpWrite{w.name, off, len, rng()});
    return true;
  };
  auto try_read = [&]() -> bool {
    size_t total = writers.size() + readers.size();
    if (total == 0) return false;
    size_t i = rnd(total);
    const H& h = i < writers.size() ? writers[i] : readers[i - writers.size()];
    emit(OpRead{h.name, rnd(kMaxFileBytes + 512), 1 + rnd(8192)});
    return true;
  };
  auto close_at = [&](std::vector<H>& v, size_t i) {
    emit(OpClose{v[i].name});
    avail.push_back(std::move(v[i].path));
    v.erase(v.begin() + long(i));
  };
  auto try_close = [&]() -> bool {
    size_t total = writers.size() + readers.size();
    if (total == 0) return false;
    size_t i = rnd(total);
    if (i < writers.size())
      close_at(writers, i);
    else
      close_at(readers, i - writers.size());
    return true;
  };
  auto try_unlink = [&]() -> bool {
    if (avail.empty()) return false;
    emit(OpUnlink{take_avail()});
    --n_files;
    return true;
  };
  auto try_rmdir = [&]() -> bool {
    if (dirs.size() <= 1) return false;
    size_t i = 1 + rnd(dirs.size() - 1);
    const std::string prefix = dirs[i] + "/";
    for (const auto& [p, mf] : model.files())
      if (p.rfind(prefix, 0) == 0) return false;
    emit(OpRmdir{dirs[i]});
    dirs.erase(dirs.begin() + long(i));
    return true;
  };

  auto close_stale = [&](std::vector<H>& v) -> bool {
    for (size_t j = 0; j < v.size(); ++j)
      if (cur_op - v[j].opened_at >= kMaxHandleLife) {
        close_at(v, j);
        return true;
      }
    return false;
  };

  for (uint64_t i = 0; i < n_ops; ++i) {
    cur_op = i;
    if (close_stale(writers) || close_stale(readers)) continue;
    uint64_t r = rng() % 100;
    bool done = false;
    if (r < 10)
      done = try_create();
    else if (r < 15)
      done = try_mkdir();
    else if (r < 28)
      done = try_open_cw();
    else if (r < 36)
      done = try_open_w();
    else if (r < 44)
      done = try_open_r();
    else if (r < 66)
      done = try_write();
    else if (r < 76)
      done = try_read();
    else if (r < 88)
      done = try_close();
    else if (r < 95)
      done = try_unlink();
    else
      done = try_rmdir();
    if (!done) done = try_write() || try_create() || try_close() ||
                      try_open_cw() || try_unlink();
    (void)done;
  }
  while (!writers.empty()) close_at(writers, writers.size() - 1);
  while (!readers.empty()) close_at(readers, readers.size() - 1);
  return ws;
}

std::map<std::string, ModelFile> walk_tree(DurableFs& fs) {
  std::map<std::string, ModelFile> out;
  out["/"] = ModelFile{InodeType::Directory, {}};
  std::vector<std::string> stack{"/"};
  while (!stack.empty()) {
    std::string d = std::move(stack.back());
    stack.pop_back();
    for (const DirentInfo& de : fs.readdir(d)) {
      std::string p = (d == "/" ? std::string{} : d) + "/" + de.name;
      if (de.type == InodeType::Directory) {
        out[p] = ModelFile{InodeType::Directory, {}};
        stack.push_back(std::move(p));
      } else {
        Stat s = fs.stat(p);
        std::vector<uint8_t> data(s.size);
        if (s.size > 0) {
          FileHandle h = fs.open(p, OpenMode::Read);
          fs.read(h, data, 0);
          fs.close(h);
        }
        out[std::move(p)] = ModelFile{InodeType::File, std::move(data)};
      }
    }
  }
  return out;
}

EquivalenceReport run_equivalence(uint64_t n_ops, uint64_t seed,
                                  uint64_t capacity_bytes,
                                  const MkfsOptions& mo) {
  EquivalenceReport rep;
  WorkloadScript ws = generate_random_script(n_ops, seed);
  rep.ops = ws.ops.size();

  PmDevice dev(capacity_bytes, OrderingModel::StrictOrdered);
  mkfs(dev, mo);
  DurableFs fs = DurableFs::mount(dev);
  ReferenceModel model;
  std::map<std::string, FileHandle> hm;

  for (size_t i = 0; i < ws.ops.size(); ++i) {
    const ScriptOp& op = ws.ops[i];
    if (const OpRead* rd = std::get_if<OpRead>(&op)) {
      std::vector<uint8_t> buf(rd->length);
      size_t got = fs.read(hm.at(rd->name), buf, rd->offset);
      auto want = model.read(rd->name, rd->offset, rd->length);
      if (got != want.size() ||
          !std::equal(want.begin(), want.end(), buf.begin())) {
        rep.ok = false;
        rep.detail = "op " + std::to_string(i) + " (read " + rd->name +
                     "): got " + std::to_string(got) + " bytes, want " +
                     std::to_string(want.size());
        return rep;
      }
      model.apply(op);
      continue;
    }
    apply_script_op(fs, op, hm);
    model.apply(op);
  }

  auto got = walk_tree(fs);
  const auto& want = model.files();
  if (got != want) {
    rep.ok = false;
    for (const auto& [p, mf] : want) {
      auto it = got.find(p);
      if (it == got.end()) {
        rep.detail = "missing path " + p;
        return rep;
      }
      if (!(it->second == mf)) {
        rep.detail = "content/type mismatch at " + p;
        return rep;
      }
    }
    for (const auto& [p, mf] : got)
      if (!want.count(p)) {
        rep.detail = "extra path " + p;
        return rep;
      }
    rep.detail = "tree mismatch";
    return rep;
  }
  auto viol = fsck(dev);
  if (!viol.empty()) {
    rep.ok = false;
    rep.detail = "fsck: " + viol[0];
  }
  return rep;
}

}  // namespace durablefs

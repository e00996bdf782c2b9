#include "durablefs/pm_device.hpp"

#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace durablefs {

namespace {

void write_le64(std::vector<uint8_t>& buf, uint64_t addr, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf[addr + i] = static_cast<uint8_t>(v >> (8 * i));
}

uint64_t mix_seed(uint64_t seed) {
  // splitmix64 finalizer; keeps adjacent seeds uncorrelated.
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

PmDevice::PmDevice(uint64_t capacity_bytes, OrderingModel model)
    : capacity_(capacity_bytes),
      model_(model),
      visible_(capacity_bytes, 0),
      durable_(capacity_bytes, 0) {
  if (capacity_bytes == 0 || capacity_bytes % 4096 != 0) {
    throw FormatError("device capacity must be a nonzero multiple of 4096");
  }
}

PmDevice PmDevice::from_image(std::vector<uint8_t> image, OrderingModel model) {
  PmDevice dev(image.size(), model);
  dev.visible_ = image;
  dev.durable_ = std::move(image);
  return dev;
}

void PmDevice::check_range(uint64_t addr, uint64_t len) const {
  if (addr > capacity_ || len > capacity_ - addr) {
    throw BoundsError("device access out of range: addr=" + std::to_string(addr) +
                      " len=" + std::to_string(len) +
                      " capacity=" + std::to_string(capacity_));
  }
}

void PmDevice::before_mutation(OpKind kind, uint64_t addr, uint64_t value,
                               std::span<const uint8_t> data) {
  if (trap_ && op_index_ == *trap_) throw CrashInjected{op_index_};
  if (tracing_) {
    TraceOp op;
    op.kind = kind;
    op.addr = addr;
    op.value = value;
    op.data.assign(data.begin(), data.end());
    trace_.push_back(std::move(op));
  }
  ++op_index_;
}

void PmDevice::store(uint64_t addr, std::span<const uint8_t> data) {
  if (data.empty()) return;
  check_range(addr, data.size());
  before_mutation(OpKind::Store, addr, 0, data);
  std::memcpy(visible_.data() + addr, data.data(), data.size());
  uint64_t first = addr / kCacheLineSize;
  uint64_t last = (addr + data.size() - 1) / kCacheLineSize;
  for (uint64_t line = first; line <= last; ++line) {
    lines_[line].state = LineState::Dirty;
  }
  ++stats_.stores;
  stats_.bytes_written += data.size();
}

void PmDevice::store_u8(uint64_t addr, uint8_t v) { store(addr, {&v, 1}); }

void PmDevice::store_u16(uint64_t addr, uint16_t v) {
  uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
  store(addr, b);
}

void PmDevice::store_u32(uint64_t addr, uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  store(addr, b);
}

void PmDevice::store_u64(uint64_t addr, uint64_t v) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  store(addr, b);
}

void PmDevice::nt_store(uint64_t addr, uint64_t value) {
  if (addr % 8 != 0) {
    throw AlignmentError("nt_store requires 8-byte alignment, got addr=" +
                         std::to_string(addr));
  }
  check_range(addr, 8);
  before_mutation(OpKind::NtStore, addr, value, {});
  write_le64(visible_, addr, value);
  nt_pending_.emplace_back(addr, value);
  ++stats_.nt_stores;
  stats_.bytes_written += 8;
}

void PmDevice::clwb(uint64_t addr) {
  check_range(addr, 1);
  before_mutation(OpKind::Clwb, addr, 0, {});
  ++stats_.clwbs;
  if (addr >= stats_boundary_) ++stats_.clwbs_data;
  uint64_t line = addr / kCacheLineSize;
  auto it = lines_.find(line);
  if (it == lines_.end()) return;  // clean (or nt-only) line: nothing cached
  auto& info = it->second;
  info.snap.emplace();
  std::memcpy(info.snap->data(), visible_.data() + line * kCacheLineSize,
              kCacheLineSize);
  if (info.state != LineState::Flushing) flush_pending_.push_back(line);
  info.state = LineState::Flushing;
}

void PmDevice::sfence() {
  before_mutation(OpKind::Sfence, 0, 0, {});
  // Only lines clwb'd since the last fence can hold a snapshot; visiting just
  // those keeps sfence O(flushed lines), independent of how many lines sit
  // dirty-unflushed (a noflush benchmark leaves every data line dirty).
  for (uint64_t line : flush_pending_) {
    auto it = lines_.find(line);
    if (it == lines_.end()) continue;  // duplicate entry already handled
    auto& info = it->second;
    if (info.snap) {
      std::memcpy(durable_.data() + line * kCacheLineSize, info.snap->data(),
                  kCacheLineSize);
      info.snap.reset();
    }
    if (info.state == LineState::Flushing) {
      lines_.erase(it);
    }
    // else: re-dirtied after clwb, newest bytes still need a flush
  }
  flush_pending_.clear();
  for (const auto& [addr, value] : nt_pending_) {
    write_le64(durable_, addr, value);
  }
  nt_pending_.clear();
  ++epoch_;
  ++stats_.sfences;
}

void PmDevice::read(uint64_t addr, std::span<uint8_t> out) const {
  if (out.empty()) return;
  check_range(addr, out.size());
  std::memcpy(out.data(), visible_.data() + addr, out.size());
}

uint8_t PmDevice::read_u8(uint64_t addr) const {
  check_range(addr, 1);
  return visible_[addr];
}

uint16_t PmDevice::read_u16(uint64_t addr) const {
  check_range(addr, 2);
  return static_cast<uint16_t>(visible_[addr] | (visible_[addr + 1] << 8));
}

uint32_t PmDevice::read_u32(uint64_t addr) const {
  check_range(addr, 4);
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | visible_[addr + i];
  return v;
}

uint64_t PmDevice::read_u64(uint64_t addr) const {
  check_range(addr, 8);
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | visible_[addr + i];
  return v;
}

LineState PmDevice::line_state(uint64_t addr) const {
  check_range(addr, 1);
  auto it = lines_.find(addr / kCacheLineSize);
  return it == lines_.end() ? LineState::Clean : it->second.state;
}

std::vector<uint8_t> PmDevice::crash_image(uint64_t seed) const {
  std::vector<uint8_t> img(durable_);
  std::mt19937_64 rng(mix_seed(seed));
  for (const auto& [line, info] : lines_) {
    if ((rng() & 1) == 0) continue;
    const uint8_t* src =
        (info.state == LineState::Flushing && info.snap)
            ? info.snap->data()
            : visible_.data() + line * kCacheLineSize;
    std::memcpy(img.data() + line * kCacheLineSize, src, kCacheLineSize);
  }
  if (!nt_pending_.empty()) {
    if (model_ == OrderingModel::StrictOrdered) {
      size_t prefix = rng() % (nt_pending_.size() + 1);
      for (size_t i = 0; i < prefix; ++i) {
        write_le64(img, nt_pending_[i].first, nt_pending_[i].second);
      }
    } else {
      for (const auto& [addr, value] : nt_pending_) {
        if (rng() & 1) write_le64(img, addr, value);
      }
    }
  }
  return img;
}

PmDevice PmDevice::crash(uint64_t seed) const {
  return from_image(crash_image(seed), model_);
}

std::vector<std::vector<uint8_t>> PmDevice::enumerate_crash_images(
    size_t limit) const {
  size_t nlines = lines_.size();
  size_t npend = nt_pending_.size();
  if (nlines > 20 || npend > 20) {
    throw LogicError("enumerate_crash_images: too much pending state");
  }
  size_t nt_choices = model_ == OrderingModel::StrictOrdered
                          ? npend + 1
                          : (size_t{1} << npend);
  size_t total = (size_t{1} << nlines) * nt_choices;
  if (total > limit) {
    throw LogicError("enumerate_crash_images: " + std::to_string(total) +
                     " images exceed limit " + std::to_string(limit));
  }
  std::vector<uint64_t> line_ids;
  line_ids.reserve(nlines);
  for (const auto& [line, info] : lines_) line_ids.push_back(line);

  std::vector<std::vector<uint8_t>> out;
  out.reserve(total);
  for (size_t lmask = 0; lmask < (size_t{1} << nlines); ++lmask) {
    std::vector<uint8_t> base(durable_);
    for (size_t i = 0; i < nlines; ++i) {
      if (!(lmask & (size_t{1} << i))) continue;
      uint64_t line = line_ids[i];
      const auto& info = lines_.at(line);
      const uint8_t* src =
          (info.state == LineState::Flushing && info.snap)
              ? info.snap->data()
              : visible_.data() + line * kCacheLineSize;
      std::memcpy(base.data() + line * kCacheLineSize, src, kCacheLineSize);
    }
    for (size_t choice = 0; choice < nt_choices; ++choice) {
      std::vector<uint8_t> img(base);
      if (model_ == OrderingModel::StrictOrdered) {
        for (size_t i = 0; i < choice; ++i) {
          write_le64(img, nt_pending_[i].first, nt_pending_[i].second);
        }
      } else {
        for (size_t i = 0; i < npend; ++i) {
          if (choice & (size_t{1} << i)) {
            write_le64(img, nt_pending_[i].first, nt_pending_[i].second);
          }
        }
      }
      out.push_back(std::move(img));
    }
  }
  return out;
}

std::string PmDevice::stats_report() const {
  std::ostringstream os;
  os << "capacity_bytes=" << capacity_ << "\n"
     << "epoch=" << epoch_ << "\n"
     << "stores=" << stats_.stores << "\n"
     << "nt_stores=" << stats_.nt_stores << "\n"
     << "clwbs=" << stats_.clwbs << "\n"
     << "clwbs_data=" << stats_.clwbs_data << "\n"
     << "sfences=" << stats_.sfences << "\n"
     << "bytes_written=" << stats_.bytes_written << "\n";
  return os.str();
}

std::vector<TraceOp> PmDevice::take_trace() {
  std::vector<TraceOp> out;
  out.swap(trace_);
  return out;
}

void PmDevice::apply(const TraceOp& op) {
  switch (op.kind) {
    case OpKind::Store:
      store(op.addr, op.data);
      break;
    case OpKind::NtStore:
      nt_store(op.addr, op.value);
      break;
    case OpKind::Clwb:
      clwb(op.addr);
      break;
    case OpKind::Sfence:
      sfence();
      break;
  }
}

void PmDevice::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(durable_.data()),
            static_cast<std::streamsize>(durable_.size()));
  if (!out) throw IoError("short write to " + path);
}

PmDevice PmDevice::load(const std::string& path, OrderingModel model) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path);
  auto size = static_cast<uint64_t>(in.tellg());
  if (size == 0 || size % 4096 != 0) {
    throw FormatError("image file size must be a nonzero multiple of 4096: " +
                      path);
  }
  std::vector<uint8_t> bytes(size);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(size));
  if (!in) throw IoError("short read from " + path);
  return from_image(std::move(bytes), model);
}

}  // namespace durablefs

// Copyright 2026 The lotrsim Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef LOTRSIM_MACHINE_HPP
#define LOTRSIM_MACHINE_HPP

#include <array>
#include <cassert>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

// Core privilege machine: four rings, segmentation with per-descriptor
// bitness, GDT/LDT descriptor tables, callgate descriptors, a TSS with
// per-ring stack pointers, and 4 KiB paging with the User/Supervisor
// access class plus SMEP/SMAP switches.
//
// There is deliberately no instruction decoder. The machine exposes the
// privilege checks and memory operations; control transfers live in
// transfer.hpp and drive this state.

namespace lotrsim {

inline constexpr uint64_t kPageSize = 4096;
inline constexpr uint64_t kPageMask = kPageSize - 1;

inline constexpr uint64_t page_of(uint64_t addr) { return addr / kPageSize; }
inline constexpr uint64_t page_base(uint64_t page) { return page * kPageSize; }

// ---------------------------------------------------------------------------
// Rings and bitness

// Privilege ring, 0..3. Numerically lower is more privileged.
class Ring {
public:
  constexpr Ring() = default;
  constexpr explicit Ring(unsigned n) : n_(static_cast<uint8_t>(n)) {
    assert(n <= 3);
  }
  constexpr unsigned num() const { return n_; }
  friend constexpr bool operator==(Ring, Ring) = default;
  friend constexpr auto operator<=>(Ring, Ring) = default;

private:
  uint8_t n_ = 3;
};

inline constexpr Ring kRing0{0};
inline constexpr Ring kRing1{1};
inline constexpr Ring kRing2{2};
inline constexpr Ring kRing3{3};

inline constexpr std::array<Ring, 4> kAllRings{kRing0, kRing1, kRing2, kRing3};

// Execution bitness of a code segment (the L flag). X32 truncates every
// effective address to 32 bits before translation; registers stay 64-bit.
enum class Bitness : uint8_t { x64, x32 };

inline const char* to_string(Bitness b) {
  return b == Bitness::x64 ? "x64" : "x32";
}

// ---------------------------------------------------------------------------
// Faults

enum class FaultKind : uint8_t {
  general_protection,
  page_fault,
  invalid_gate,
  invalid_selector,
  unmapped,
};

inline const char* to_string(FaultKind k) {
  switch (k) {
    case FaultKind::general_protection: return "GeneralProtection";
    case FaultKind::page_fault: return "PageFault";
    case FaultKind::invalid_gate: return "InvalidGate";
    case FaultKind::invalid_selector: return "InvalidSelector";
    case FaultKind::unmapped: return "Unmapped";
  }
  return "?";
}

inline std::optional<FaultKind> fault_kind_from_string(const std::string& s) {
  for (FaultKind k :
       {FaultKind::general_protection, FaultKind::page_fault,
        FaultKind::invalid_gate, FaultKind::invalid_selector,
        FaultKind::unmapped}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

struct Fault {
  FaultKind kind = FaultKind::general_protection;
  std::string detail;

  std::string describe() const {
    std::string s = to_string(kind);
    if (!detail.empty()) {
      s += "(";
      s += detail;
      s += ")";
    }
    return s;
  }
};

// Value-or-fault result for machine operations.
template <typename T>
class Outcome {
public:
  Outcome(T v) : v_(std::move(v)) {}
  Outcome(Fault f) : v_(std::move(f)) {}

  bool ok() const { return std::holds_alternative<T>(v_); }
  explicit operator bool() const { return ok(); }
  const T& value() const { return std::get<T>(v_); }
  T& value() { return std::get<T>(v_); }
  const Fault& fault() const { return std::get<Fault>(v_); }

private:
  std::variant<T, Fault> v_;
};

// ---------------------------------------------------------------------------
// Selectors and descriptors

enum class TableKind : uint8_t { gdt = 0, ldt = 1 };

inline const char* to_string(TableKind t) {
  return t == TableKind::gdt ? "gdt" : "ldt";
}

// 16-bit segment selector: table slot, table indicator, and the 2-bit
// privilege field. For CS the rpl field is the CPL of the running context.
struct SegmentSelector {
  uint16_t index = 0;
  TableKind ti = TableKind::gdt;
  Ring rpl = kRing0;

  friend constexpr bool operator==(const SegmentSelector&,
                                   const SegmentSelector&) = default;

  // x86 wire format: index<<3 | ti<<2 | rpl. Frames on stacks hold this
  // packed form, so forged frames are plain attacker-chosen integers.
  uint16_t pack() const {
    return static_cast<uint16_t>((index << 3) |
                                 (static_cast<uint16_t>(ti) << 2) |
                                 rpl.num());
  }
  static SegmentSelector unpack(uint64_t raw) {
    SegmentSelector s;
    s.index = static_cast<uint16_t>((raw >> 3) & 0x1fff);
    s.ti = ((raw >> 2) & 1) ? TableKind::ldt : TableKind::gdt;
    s.rpl = Ring{static_cast<unsigned>(raw & 3)};
    return s;
  }

  std::string describe() const {
    return std::string(to_string(ti)) + ":" + std::to_string(index) + "." +
           std::to_string(rpl.num());
  }
};

enum class SegmentKind : uint8_t { code, data };

struct SegmentDescriptor {
  SegmentKind kind = SegmentKind::data;
  Ring dpl = kRing3;
  Bitness bitness = Bitness::x64;  // meaningful for code segments only
  uint64_t base = 0;
  uint64_t limit = 0;  // byte length of the segment window

  friend bool operator==(const SegmentDescriptor&,
                         const SegmentDescriptor&) = default;
};

inline SegmentDescriptor make_code_desc(Ring dpl, Bitness bitness,
                                        uint64_t base, uint64_t limit) {
  return SegmentDescriptor{SegmentKind::code, dpl, bitness, base, limit};
}

inline SegmentDescriptor make_data_desc(Ring dpl, uint64_t base,
                                        uint64_t limit) {
  return SegmentDescriptor{SegmentKind::data, dpl, Bitness::x64, base, limit};
}

// Callgate: controlled privilege-escalating entry point. rmpl is the
// numerically largest caller CPL admitted.
struct GateDescriptor {
  SegmentSelector target_selector;
  uint64_t target_offset = 0;
  Ring rmpl = kRing3;

  friend bool operator==(const GateDescriptor&,
                         const GateDescriptor&) = default;
};

using Descriptor = std::variant<SegmentDescriptor, GateDescriptor>;

inline bool is_code(const Descriptor& d) {
  const auto* s = std::get_if<SegmentDescriptor>(&d);
  return s && s->kind == SegmentKind::code;
}

inline bool is_data(const Descriptor& d) {
  const auto* s = std::get_if<SegmentDescriptor>(&d);
  return s && s->kind == SegmentKind::data;
}

inline bool is_gate(const Descriptor& d) {
  return std::holds_alternative<GateDescriptor>(d);
}

// Slot 0 is the null selector and stays permanently empty.
class DescriptorTable {
public:
  static constexpr uint16_t kCapacity = 16;

  bool occupied(uint16_t slot) const {
    return slot < kCapacity && slots_[slot].has_value();
  }
  const Descriptor* at(uint16_t slot) const {
    if (!occupied(slot)) return nullptr;
    return &*slots_[slot];
  }
  void set(uint16_t slot, Descriptor d) { slots_[slot] = std::move(d); }
  void clear(uint16_t slot) { slots_[slot].reset(); }

private:
  std::array<std::optional<Descriptor>, kCapacity> slots_{};
};

// ---------------------------------------------------------------------------
// TSS, pages, registers

// Stack pointers consulted when a callgate escalates into ring 0..2.
struct TaskStateSegment {
  struct RingStack {
    SegmentSelector ss;
    uint64_t rsp = 0;
  };
  std::array<std::optional<RingStack>, 3> stacks{};  // index = ring number

  const std::optional<RingStack>& stack_for(Ring r) const {
    assert(r.num() <= 2);
    return stacks[r.num()];
  }
  void set_stack(Ring r, SegmentSelector ss, uint64_t rsp) {
    assert(r.num() <= 2);
    stacks[r.num()] = RingStack{ss, rsp};
  }
};

enum class PageAccess : uint8_t { user, supervisor };

struct PageFlags {
  PageAccess access = PageAccess::user;
  bool writable = false;
  bool executable = false;

  friend bool operator==(const PageFlags&, const PageFlags&) = default;
};

// Page-granular permission map. Unmapped pages reject every access.
class PageMap {
public:
  bool mapped(uint64_t page) const { return entries_.contains(page); }
  const PageFlags* flags(uint64_t page) const {
    auto it = entries_.find(page);
    return it == entries_.end() ? nullptr : &it->second;
  }
  void map(uint64_t page, PageFlags f) { entries_[page] = f; }
  void unmap(uint64_t page) { entries_.erase(page); }
  void set_access(uint64_t page, PageAccess a) {
    auto it = entries_.find(page);
    assert(it != entries_.end());
    it->second.access = a;
  }
  void set_writable(uint64_t page, bool w) {
    auto it = entries_.find(page);
    assert(it != entries_.end());
    it->second.writable = w;
  }
  const std::map<uint64_t, PageFlags>& entries() const { return entries_; }

  // Supervisor-marking undo log: pages whose access class was flipped to
  // Supervisor, so the marking can be reverted later.
  std::vector<uint64_t> revert_list;

private:
  std::map<uint64_t, PageFlags> entries_;
};

enum class Gpr : uint8_t {
  rax, rbx, rcx, rdx, rsi, rdi, rbp, rsp,
  r8, r9, r10, r11, r12, r13, r14, r15,
};

inline constexpr size_t kGprCount = 16;

inline const char* to_string(Gpr g) {
  static constexpr const char* names[kGprCount] = {
      "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
      "r8",  "r9",  "r10", "r11", "r12", "r13", "r14", "r15"};
  return names[static_cast<size_t>(g)];
}

struct RegisterFile {
  std::array<uint64_t, kGprCount> gpr{};
  uint64_t rip = 0;
  SegmentSelector cs;  // CPL == cs.rpl; there is no other privilege field
  SegmentSelector ss;
  SegmentSelector ds;

  uint64_t& operator[](Gpr g) { return gpr[static_cast<size_t>(g)]; }
  uint64_t operator[](Gpr g) const { return gpr[static_cast<size_t>(g)]; }
};

// Event counters feeding the abstract step-cost model. Counts, not cycles.
struct OpCounters {
  uint64_t ring_transitions = 0;
  uint64_t descriptor_loads = 0;
  uint64_t context_ops = 0;
};

// ---------------------------------------------------------------------------
// Machine

class Machine {
public:
  RegisterFile regs;
  DescriptorTable gdt;
  DescriptorTable ldt;
  TaskStateSegment tss;
  PageMap pages;
  bool smep = false;
  bool smap = false;  // default off so the shared argument page works
  OpCounters counters;

  // --- status ---------------------------------------------------------

  bool running() const { return !pending_fault_.has_value(); }
  const std::optional<Fault>& pending_fault() const { return pending_fault_; }
  void clear_fault() { pending_fault_.reset(); }

  // Records the fault and wedges the machine: a faulted machine executes
  // nothing further until clear_fault().
  Fault raise(FaultKind kind, std::string detail) {
    Fault f{kind, std::move(detail)};
    if (!pending_fault_) pending_fault_ = f;
    return f;
  }

  std::optional<Fault> require_running() const {
    if (pending_fault_) return pending_fault_;
    return std::nullopt;
  }

  // --- privilege view --------------------------------------------------

  Ring cpl() const { return regs.cs.rpl; }

  Bitness bitness() const {
    auto d = resolve_selector(regs.cs);
    if (d.ok()) {
      if (const auto* s = std::get_if<SegmentDescriptor>(&d.value());
          s && s->kind == SegmentKind::code) {
        return s->bitness;
      }
    }
    return Bitness::x64;  // bootstrap state before a code segment is loaded
  }

  // --- descriptor tables -----------------------------------------------

  DescriptorTable& table(TableKind t) {
    return t == TableKind::gdt ? gdt : ldt;
  }
  const DescriptorTable& table(TableKind t) const {
    return t == TableKind::gdt ? gdt : ldt;
  }

  Outcome<Descriptor> resolve_selector(SegmentSelector sel) const {
    const DescriptorTable& tbl = table(sel.ti);
    if (sel.index == 0)
      return Fault{FaultKind::invalid_selector, "null selector"};
    if (sel.index >= DescriptorTable::kCapacity)
      return Fault{FaultKind::invalid_selector,
                   "selector index " + std::to_string(sel.index) +
                       " beyond table capacity"};
    const Descriptor* d = tbl.at(sel.index);
    if (!d)
      return Fault{FaultKind::invalid_selector,
                   "empty slot " + sel.describe()};
    return *d;
  }

  // Validated install. Gate descriptors are checked against the
  // hardware constraint that a callgate cannot target a 32-bit code
  // segment, so violating configurations are unconstructible here.
  std::optional<Fault> install_descriptor(TableKind t, uint16_t slot,
                                          Descriptor desc) {
    if (slot == 0)
      return Fault{FaultKind::invalid_selector, "slot 0 is the null selector"};
    if (slot >= DescriptorTable::kCapacity)
      return Fault{FaultKind::invalid_selector,
                   "slot " + std::to_string(slot) + " beyond capacity"};
    if (const auto* seg = std::get_if<SegmentDescriptor>(&desc)) {
      if (seg->limit > UINT64_MAX - seg->base)
        return Fault{FaultKind::general_protection,
                     "descriptor base+limit overflows the address space"};
    }
    if (const auto* gate = std::get_if<GateDescriptor>(&desc)) {
      auto target = resolve_selector(gate->target_selector);
      if (!target.ok() || !is_code(target.value()))
        return Fault{FaultKind::invalid_gate,
                     "gate target " + gate->target_selector.describe() +
                         " is not a code segment"};
      const auto& seg = std::get<SegmentDescriptor>(target.value());
      if (seg.bitness == Bitness::x32)
        return Fault{FaultKind::invalid_gate,
                     "gate targets a 32-bit code segment"};
    }
    table(t).set(slot, std::move(desc));
    counters.descriptor_loads++;
    return std::nullopt;
  }

  // Unvalidated install. Exists for the verifier's mutation harness,
  // which needs to plant configurations that install_descriptor rejects.
  void inject_descriptor_raw(TableKind t, uint16_t slot, Descriptor desc) {
    assert(slot >= 1 && slot < DescriptorTable::kCapacity);
    table(t).set(slot, std::move(desc));
  }

  // --- address formation -----------------------------------------------

  // Effective-to-linear address step. In x32 the address is truncated to
  // its low 32 bits and must fall inside the segment window; in x64 the
  // model is flat and the address passes through unchanged.
  static Outcome<uint64_t> effective_address(uint64_t addr,
                                             const SegmentDescriptor& seg,
                                             Bitness bitness) {
    if (bitness == Bitness::x64) return addr;
    uint64_t lin = addr & 0xffffffffull;
    if (lin < seg.base || lin - seg.base >= seg.limit)
      return Fault{FaultKind::general_protection,
                   "address outside segment window"};
    return lin;
  }

  // --- access checks (Table-1 semantics plus SMEP/SMAP) -----------------

  std::optional<Fault> check_data_access(Ring ring, uint64_t page,
                                         bool write) const {
    const PageFlags* f = pages.flags(page);
    if (!f)
      return Fault{FaultKind::unmapped, "page not mapped"};
    if (f->access == PageAccess::supervisor) {
      if (ring > kRing2)
        return Fault{FaultKind::page_fault,
                     "supervisor page inaccessible to ring 3"};
    } else if (smap && ring <= kRing2) {
      return Fault{FaultKind::page_fault, "smap blocks user-page data access"};
    }
    if (write && !f->writable)
      return Fault{FaultKind::page_fault, "page not writable"};
    return std::nullopt;
  }

  std::optional<Fault> check_exec(Ring ring, uint64_t page) const {
    const PageFlags* f = pages.flags(page);
    if (!f)
      return Fault{FaultKind::unmapped, "page not mapped"};
    if (!f->executable)
      return Fault{FaultKind::page_fault, "page not executable"};
    if (f->access == PageAccess::supervisor) {
      if (ring > kRing2)
        return Fault{FaultKind::page_fault,
                     "supervisor page not executable from ring 3"};
    } else if (smep && ring <= kRing2) {
      return Fault{FaultKind::page_fault, "smep blocks user-page execution"};
    }
    return std::nullopt;
  }

  static std::optional<Fault> privileged_instruction_check(Ring ring) {
    if (ring != kRing0)
      return Fault{FaultKind::general_protection,
                   "privileged instruction outside ring 0"};
    return std::nullopt;
  }

  // --- memory ----------------------------------------------------------

  // Map [addr, addr+len) with the given flags; len rounds up to pages.
  void map_range(uint64_t addr, uint64_t len, PageFlags f) {
    for (uint64_t p = page_of(addr); p <= page_of(addr + len - 1); ++p)
      pages.map(p, f);
  }

  // Raw access for setup and inspection. No privilege checks.
  void poke(uint64_t addr, const uint8_t* data, size_t len) {
    for (size_t i = 0; i < len; ++i)
      frame_for(page_of(addr + i))[(addr + i) & kPageMask] = data[i];
  }
  void poke_u64(uint64_t addr, uint64_t v) {
    uint8_t buf[8];
    std::memcpy(buf, &v, 8);
    poke(addr, buf, 8);
  }
  std::vector<uint8_t> peek(uint64_t addr, size_t len) const {
    std::vector<uint8_t> out(len, 0);
    for (size_t i = 0; i < len; ++i) {
      auto it = memory_.find(page_of(addr + i));
      if (it != memory_.end()) out[i] = it->second[(addr + i) & kPageMask];
    }
    return out;
  }
  uint64_t peek_u64(uint64_t addr) const {
    auto b = peek(addr, 8);
    uint64_t v;
    std::memcpy(&v, b.data(), 8);
    return v;
  }
  const std::map<uint64_t, std::array<uint8_t, kPageSize>>& memory_frames()
      const {
    return memory_;
  }

  // Checked read at the current CPL and bitness through the given segment
  // register. All pages are vetted before any byte is copied, so a
  // faulting access never returns a partial result.
  Outcome<std::vector<uint8_t>> read_mem(uint64_t addr, uint64_t len,
                                         const SegmentSelector* seg_override =
                                             nullptr) {
    if (auto f = require_running()) return *f;
    auto lin = linearize(addr, len, seg_override);
    if (!lin.ok()) return raise(lin.fault().kind, lin.fault().detail);
    for (uint64_t p = page_of(lin.value()); p <= page_of(lin.value() + len - 1);
         ++p) {
      if (auto f = check_data_access(cpl(), p, /*write=*/false))
        return raise(f->kind, f->detail);
    }
    return peek(lin.value(), len);
  }

  uint64_t read_u64_or_fault(uint64_t addr, bool* ok) {
    auto r = read_mem(addr, 8);
    *ok = r.ok();
    if (!r.ok()) return 0;
    uint64_t v;
    std::memcpy(&v, r.value().data(), 8);
    return v;
  }

  std::optional<Fault> write_mem(uint64_t addr, const uint8_t* data,
                                 uint64_t len,
                                 const SegmentSelector* seg_override =
                                     nullptr) {
    if (auto f = require_running()) return *f;
    auto lin = linearize(addr, len, seg_override);
    if (!lin.ok()) return raise(lin.fault().kind, lin.fault().detail);
    for (uint64_t p = page_of(lin.value()); p <= page_of(lin.value() + len - 1);
         ++p) {
      if (auto f = check_data_access(cpl(), p, /*write=*/true))
        return raise(f->kind, f->detail);
    }
    poke(lin.value(), data, len);
    return std::nullopt;
  }

  std::optional<Fault> write_u64(uint64_t addr, uint64_t v,
                                 const SegmentSelector* seg_override =
                                     nullptr) {
    uint8_t buf[8];
    std::memcpy(buf, &v, 8);
    return write_mem(addr, buf, 8, seg_override);
  }

  std::optional<Fault> write_u32(uint64_t addr, uint32_t v) {
    uint8_t buf[4];
    std::memcpy(buf, &v, 4);
    return write_mem(addr, buf, 4);
  }

  // Stack push/pop through SS. Frame slots are 8 bytes wide throughout;
  // registers are uniformly 64-bit even in x32 mode.
  std::optional<Fault> push64(uint64_t v) {
    regs[Gpr::rsp] -= 8;
    auto f = write_u64(regs[Gpr::rsp], v, &regs.ss);
    if (f) regs[Gpr::rsp] += 8;
    return f;
  }

  Outcome<uint64_t> pop64() {
    bool ok = false;
    auto r = read_mem(regs[Gpr::rsp], 8, &regs.ss);
    if (!r.ok()) return r.fault();
    uint64_t v;
    std::memcpy(&v, r.value().data(), 8);
    regs[Gpr::rsp] += 8;
    (void)ok;
    return v;
  }

  // --- supervisor marking ----------------------------------------------

  // Marks [addr, addr+len) Supervisor, logging flipped pages so the
  // marking can be reverted. Already-Supervisor pages are left alone.
  std::optional<Fault> set_page_supervisor(uint64_t addr, uint64_t len) {
    uint64_t first = page_of(addr), last = page_of(addr + len - 1);
    for (uint64_t p = first; p <= last; ++p)
      if (!pages.mapped(p))
        return Fault{FaultKind::unmapped,
                     "page " + std::to_string(p) + " not mapped"};
    for (uint64_t p = first; p <= last; ++p) {
      if (pages.flags(p)->access == PageAccess::user) {
        pages.set_access(p, PageAccess::supervisor);
        pages.revert_list.push_back(p);
      }
    }
    return std::nullopt;
  }

  // Replays the revert list, restoring the original User marking.
  void revert_supervisor_marks() {
    for (auto it = pages.revert_list.rbegin(); it != pages.revert_list.rend();
         ++it) {
      if (pages.mapped(*it)) pages.set_access(*it, PageAccess::user);
    }
    pages.revert_list.clear();
  }

  // --- context posing ---------------------------------------------------

  // Loads a full execution context. Used by setup code, the verifier and
  // the scenario runner to place the machine in a given mode.
  std::optional<Fault> pose(SegmentSelector cs, SegmentSelector ss,
                            SegmentSelector ds, uint64_t rsp, uint64_t rip) {
    auto d = resolve_selector(cs);
    if (!d.ok()) return d.fault();
    if (!is_code(d.value()))
      return Fault{FaultKind::general_protection, "cs must name code"};
    regs.cs = cs;
    regs.cs.rpl = std::get<SegmentDescriptor>(d.value()).dpl;
    regs.ss = ss;
    regs.ds = ds;
    regs[Gpr::rsp] = rsp;
    regs.rip = rip;
    return std::nullopt;
  }

private:
  Outcome<uint64_t> linearize(uint64_t addr, uint64_t len,
                              const SegmentSelector* seg_override) {
    if (len == 0) return addr;
    const SegmentSelector& sel = seg_override ? *seg_override : regs.ds;
    auto d = resolve_selector(sel);
    if (!d.ok()) return d.fault();
    const auto* seg = std::get_if<SegmentDescriptor>(&d.value());
    if (!seg)
      return Fault{FaultKind::general_protection,
                   "data access through a gate selector"};
    auto lo = effective_address(addr, *seg, bitness());
    if (!lo.ok()) return lo.fault();
    auto hi = effective_address(addr + len - 1, *seg, bitness());
    if (!hi.ok()) return hi.fault();
    if (hi.value() != lo.value() + len - 1)
      return Fault{FaultKind::general_protection,
                   "access wraps the 32-bit address space"};
    return lo.value();
  }

  std::array<uint8_t, kPageSize>& frame_for(uint64_t page) {
    auto it = memory_.find(page);
    if (it == memory_.end())
      it = memory_.emplace(page, std::array<uint8_t, kPageSize>{}).first;
    return it->second;
  }

  std::optional<Fault> pending_fault_;
  std::map<uint64_t, std::array<uint8_t, kPageSize>> memory_;
};

}  // namespace lotrsim

#endif  // LOTRSIM_MACHINE_HPP

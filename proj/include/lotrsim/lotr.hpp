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

#ifndef LOTRSIM_LOTR_HPP
#define LOTRSIM_LOTR_HPP

#include <functional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lotrsim/machine.hpp"
#include "lotrsim/transfer.hpp"

// The PrivUser architecture on top of the privilege machine:
//
//  - an LDT holding Gate-mode (Ring1, x64) and PrivUser-mode (Ring2, x32)
//    code/data segments plus the two callgates CG1 (Ring3->Ring1) and
//    CG2 (Ring2->Ring1),
//  - Enter/Exit gate programs interpreted as micro-op lists at fixed
//    Supervisor addresses,
//  - the privcall register ABI with the PrivUser Call Table,
//  - Supervisor marking of the PrivUser space and the guarded
//    mprotect/munlock rule that refuses permission changes touching it.

namespace lotrsim {

// ---------------------------------------------------------------------------
// API-level errors (distinct from machine faults)

enum class LotrErrc : uint8_t {
  already_initialized,
  config_invalid,
  unmapped_range,
  install_failed,
  registry_closed,
  arity_too_large,
  wrong_context,
  out_of_memory,
  privuser_overlap,
};

inline const char* to_string(LotrErrc e) {
  switch (e) {
    case LotrErrc::already_initialized: return "already-initialized";
    case LotrErrc::config_invalid: return "config-invalid";
    case LotrErrc::unmapped_range: return "unmapped-range";
    case LotrErrc::install_failed: return "install-failed";
    case LotrErrc::registry_closed: return "registry-closed";
    case LotrErrc::arity_too_large: return "arity-too-large";
    case LotrErrc::wrong_context: return "wrong-context";
    case LotrErrc::out_of_memory: return "out-of-memory";
    case LotrErrc::privuser_overlap: return "privuser-overlap";
  }
  return "?";
}

struct LotrError {
  LotrErrc code;
  std::string detail;
};

template <typename T>
class ApiResult {
public:
  ApiResult(T v) : v_(std::move(v)) {}
  ApiResult(LotrError e) : v_(std::move(e)) {}
  bool ok() const { return std::holds_alternative<T>(v_); }
  explicit operator bool() const { return ok(); }
  const T& value() const { return std::get<T>(v_); }
  T& value() { return std::get<T>(v_); }
  const LotrError& error() const { return std::get<LotrError>(v_); }

private:
  std::variant<T, LotrError> v_;
};

struct Unit {};

// ---------------------------------------------------------------------------
// Configuration

struct AddrRange {
  uint64_t base = 0;
  uint64_t len = 0;

  uint64_t end() const { return base + len; }
  bool empty() const { return len == 0; }
  bool contains(uint64_t a) const { return a >= base && a < end(); }
  bool below_4g() const { return end() <= (1ull << 32); }
};

struct LotrConfig {
  AddrRange privuser_code;
  AddrRange privuser_data;
  AddrRange privuser_stack;  // grows down from privuser_stack.end()
  AddrRange privuser_heap;
  AddrRange arg_page;  // stays User so Ring3 can stage arguments
  uint64_t entry_point = 0;
  uint64_t gate_stack_top = 0;
  uint64_t enter_gate_addr = 0;
  uint64_t exit_gate_addr = 0;

  uint64_t privuser_stack_top() const { return privuser_stack.end(); }

  // Segment window covering the PrivUser ranges plus the argument page.
  AddrRange window() const {
    uint64_t lo = UINT64_MAX, hi = 0;
    for (const AddrRange* r : {&privuser_code, &privuser_data,
                               &privuser_stack, &privuser_heap, &arg_page}) {
      if (r->empty()) continue;
      lo = std::min(lo, r->base);
      hi = std::max(hi, r->end());
    }
    return AddrRange{lo, hi - lo};
  }
};

// One-shot initialization lock, standing in for the kernel module's
// per-PID lock.
struct InitLock {
  std::optional<int> locked_pid;
};

// ---------------------------------------------------------------------------
// Gate programs

// Fake 32-bit return address occupying slot 0 of the PrivUser frame.
inline constexpr uint32_t kDummyEip = 0xdeadc0de;

// The 60-byte PrivUser stack image: DummyEIP, then the seven 64-bit ABI
// slots (RAX, RDI, RSI, RDX, R10, R8, R9) at offsets 4, 12, ..., 52.
inline constexpr uint64_t kPrivUserFrameSize = 60;
inline constexpr std::array<Gpr, 7> kAbiSlots{Gpr::rax, Gpr::rdi, Gpr::rsi,
                                              Gpr::rdx, Gpr::r10, Gpr::r8,
                                              Gpr::r9};

// Scratch registers scrubbed by the Exit gate. RAX is excluded: it
// carries the privcall return value.
inline constexpr std::array<Gpr, 6> kScrubSet{Gpr::rcx, Gpr::rdx, Gpr::rsi,
                                              Gpr::rdi, Gpr::r10, Gpr::r11};

// Callee-saved registers preserved across the privcall round trip.
inline constexpr std::array<Gpr, 6> kCalleeSaved{Gpr::rbx, Gpr::rbp, Gpr::r12,
                                                 Gpr::r13, Gpr::r14, Gpr::r15};

// Size of one saved far frame (RIP, CS, RSP, SS) on the gate stack.
inline constexpr uint64_t kFarFrameSize = 32;

enum class GateOpKind : uint8_t {
  check_caller_ring,    // compares the saved CS ring on the gate stack
  copy_saved_frame,     // re-saves the four hardware-pushed values deeper
  save_callee_regs,     // pushes the callee-saved set
  build_privuser_frame, // writes DummyEIP + seven ABI slots onto the PU stack
  load_privuser_ds,     // ds := PrivUser DS
  push_privuser_entry,  // pushes {PU SS, PU RSP, PU CS, entry point}
  scrub_scratch,        // zeroes the scratch set
  rewind_gate_stack,    // rsp := base of the callee-saved block
  restore_callee_regs,  // pops the callee-saved set
  restore_caller_ds,    // ds := the saved frame's SS selector
  long_ret,
};

struct GateOp {
  GateOpKind kind;
  uint64_t imm = 0;
};

struct GateProgram {
  std::vector<GateOp> ops;
};

// ---------------------------------------------------------------------------
// Privcall table

enum class ArgWidth : uint8_t { w8, w16, w32, w64 };

inline uint64_t narrow_arg(uint64_t v, ArgWidth w) {
  switch (w) {
    case ArgWidth::w8: return v & 0xff;
    case ArgWidth::w16: return v & 0xffff;
    case ArgWidth::w32: return v & 0xffffffff;
    case ArgWidth::w64: return v;
  }
  return v;
}

class HandlerContext;
using PrivcallHandler =
    std::function<Outcome<uint64_t>(HandlerContext&, std::span<const uint64_t>)>;

inline constexpr unsigned kMaxPrivcallArity = 6;  // seven ABI registers, one is the number

struct PrivcallRoutine {
  uint32_t number = 0;
  std::string name;
  unsigned arity = 0;
  std::vector<ArgWidth> widths;  // one per argument
  PrivcallHandler handler;
};

struct PrivcallTable {
  std::vector<PrivcallRoutine> routines;  // dense, numbers 1..size()
  uint32_t max_privcall() const { return static_cast<uint32_t>(routines.size()); }
};

// Error-return value for an out-of-range privcall number.
inline constexpr uint64_t kPrivcallError = ~0ull;

// Observation of the PrivUser stack image, read back through CPL-2
// memory accesses at dispatch time.
struct PrivcallFrame {
  uint32_t dummy_eip = 0;
  std::array<uint64_t, 7> slots{};
};

// ---------------------------------------------------------------------------
// Handle

struct LotrHandle {
  LotrConfig cfg;
  InitLock lock;

  SegmentSelector gate_cs, gate_ds, pu_cs, pu_ds, cg1, cg2;
  GateProgram enter_gate, exit_gate;

  PrivcallTable pct;
  bool registry_closed = false;

  // PrivUser pages marked Supervisor at init (the M-SR1 domain).
  std::vector<uint64_t> privuser_pages;
  // Mapped pages that belong to the kernel region (the M-SR2 domain).
  std::set<uint64_t> kernel_pages;

  uint64_t heap_cursor = 0;
  PrivcallFrame last_frame;  // most recent dispatch observation
};

// ---------------------------------------------------------------------------
// init_lotr

inline ApiResult<LotrHandle> init_lotr(Machine& m, const LotrConfig& cfg,
                                       InitLock& lock, int pid = 1) {
  if (lock.locked_pid)
    return LotrError{LotrErrc::already_initialized,
                     "lock held by pid " + std::to_string(*lock.locked_pid)};

  for (const AddrRange* r : {&cfg.privuser_code, &cfg.privuser_data,
                             &cfg.privuser_stack, &cfg.privuser_heap,
                             &cfg.arg_page}) {
    if (r->empty())
      return LotrError{LotrErrc::config_invalid, "empty PrivUser range"};
    if (!r->below_4g())
      return LotrError{LotrErrc::config_invalid,
                       "PrivUser range reaches beyond the 32-bit space"};
    for (uint64_t p = page_of(r->base); p <= page_of(r->end() - 1); ++p)
      if (!m.pages.mapped(p))
        return LotrError{LotrErrc::unmapped_range,
                         "page " + std::to_string(p) + " not mapped"};
  }
  if (!cfg.privuser_code.contains(cfg.entry_point))
    return LotrError{LotrErrc::config_invalid,
                     "entry point outside the PrivUser code range"};
  for (uint16_t slot = 1; slot <= 6; ++slot)
    if (m.ldt.occupied(slot))
      return LotrError{LotrErrc::already_initialized,
                       "LDT slot " + std::to_string(slot) + " already in use"};

  LotrHandle h;
  h.cfg = cfg;
  AddrRange win = cfg.window();

  h.gate_cs = SegmentSelector{1, TableKind::ldt, kRing1};
  h.gate_ds = SegmentSelector{2, TableKind::ldt, kRing1};
  h.pu_cs = SegmentSelector{3, TableKind::ldt, kRing2};
  h.pu_ds = SegmentSelector{4, TableKind::ldt, kRing2};
  h.cg1 = SegmentSelector{5, TableKind::ldt, kRing3};
  h.cg2 = SegmentSelector{6, TableKind::ldt, kRing3};

  const uint64_t flat_limit = UINT64_MAX;
  struct Row {
    uint16_t slot;
    Descriptor desc;
  };
  const Row rows[] = {
      {1, make_code_desc(kRing1, Bitness::x64, 0, flat_limit)},
      {2, make_data_desc(kRing1, 0, flat_limit)},
      {3, make_code_desc(kRing2, Bitness::x32, win.base, win.len)},
      {4, make_data_desc(kRing2, win.base, win.len)},
      {5, GateDescriptor{h.gate_cs, cfg.enter_gate_addr, kRing3}},
      {6, GateDescriptor{h.gate_cs, cfg.exit_gate_addr, kRing2}},
  };
  for (const Row& r : rows) {
    if (auto f = m.install_descriptor(TableKind::ldt, r.slot, r.desc)) {
      for (uint16_t s = 1; s < r.slot; ++s) m.ldt.clear(s);
      return LotrError{LotrErrc::install_failed, f->describe()};
    }
  }

  m.tss.set_stack(kRing1, h.gate_ds, cfg.gate_stack_top);

  for (const AddrRange* r : {&cfg.privuser_code, &cfg.privuser_data,
                             &cfg.privuser_stack, &cfg.privuser_heap}) {
    size_t before = m.pages.revert_list.size();
    if (auto f = m.set_page_supervisor(r->base, r->len))
      return LotrError{LotrErrc::unmapped_range, f->describe()};
    for (size_t i = before; i < m.pages.revert_list.size(); ++i)
      h.privuser_pages.push_back(m.pages.revert_list[i]);
  }

  // Gate programs live in kernel memory: Supervisor, executable, far
  // above the 32-bit space.
  for (uint64_t a : {cfg.enter_gate_addr, cfg.exit_gate_addr})
    if (!m.pages.mapped(page_of(a)))
      m.pages.map(page_of(a),
                  PageFlags{PageAccess::supervisor, false, true});

  h.enter_gate.ops = {
      {GateOpKind::check_caller_ring, 3},
      {GateOpKind::copy_saved_frame},
      {GateOpKind::save_callee_regs},
      {GateOpKind::build_privuser_frame},
      {GateOpKind::load_privuser_ds},
      {GateOpKind::push_privuser_entry},
      {GateOpKind::long_ret},
  };
  h.exit_gate.ops = {
      {GateOpKind::scrub_scratch},
      {GateOpKind::rewind_gate_stack},
      {GateOpKind::restore_callee_regs},
      {GateOpKind::restore_caller_ds},
      {GateOpKind::long_ret},
  };

  for (const auto& [page, flags] : m.pages.entries())
    if (page_base(page) >= (1ull << 32)) h.kernel_pages.insert(page);

  h.heap_cursor = cfg.privuser_heap.base;
  lock.locked_pid = pid;
  h.lock = lock;
  return h;
}

// ---------------------------------------------------------------------------
// Gate interpreter

// Runs a gate program at the current privilege. All memory traffic goes
// through the checked machine operations, so a gate running on a broken
// configuration faults exactly where real gate code would.
inline std::optional<Fault> run_gate_program(Machine& m, const LotrHandle& h,
                                             const GateProgram& prog) {
  if (auto f = m.require_running()) return f;
  if (auto f = m.check_exec(m.cpl(), page_of(m.regs.rip)))
    return m.raise(f->kind, "gate page: " + f->detail);

  const uint64_t top = h.cfg.gate_stack_top;
  for (const GateOp& op : prog.ops) {
    switch (op.kind) {
      case GateOpKind::check_caller_ring: {
        bool ok = false;
        uint64_t saved_cs = m.read_u64_or_fault(m.regs[Gpr::rsp] + 8, &ok);
        if (!ok) return m.pending_fault();
        if ((saved_cs & 3) != op.imm)
          return m.raise(FaultKind::general_protection,
                         "enter gate: caller ring " +
                             std::to_string(saved_cs & 3) + " != " +
                             std::to_string(op.imm));
        break;
      }
      case GateOpKind::copy_saved_frame: {
        // The next CG transit reloads RSP from the TSS and overwrites the
        // top frame slot, so the caller frame has to move out of its way.
        uint64_t base = m.regs[Gpr::rsp];
        std::array<uint64_t, 4> f{};
        for (int i = 0; i < 4; ++i) {
          bool ok = false;
          f[i] = m.read_u64_or_fault(base + 8 * i, &ok);
          if (!ok) return m.pending_fault();
        }
        for (int i = 3; i >= 0; --i)
          if (auto e = m.push64(f[i])) return e;
        m.counters.context_ops++;
        break;
      }
      case GateOpKind::save_callee_regs: {
        for (Gpr g : kCalleeSaved)
          if (auto e = m.push64(m.regs[g])) return e;
        m.counters.context_ops++;
        break;
      }
      case GateOpKind::build_privuser_frame: {
        uint64_t frame = h.cfg.privuser_stack_top() - kPrivUserFrameSize;
        if (auto e = m.write_u32(frame, kDummyEip)) return e;
        for (size_t i = 0; i < kAbiSlots.size(); ++i)
          if (auto e = m.write_u64(frame + 4 + 8 * i, m.regs[kAbiSlots[i]]))
            return e;
        m.counters.context_ops++;
        break;
      }
      case GateOpKind::load_privuser_ds:
        m.regs.ds = h.pu_ds;
        break;
      case GateOpKind::push_privuser_entry: {
        uint64_t pu_rsp = h.cfg.privuser_stack_top() - kPrivUserFrameSize;
        uint64_t vals[4] = {h.pu_ds.pack(), pu_rsp, h.pu_cs.pack(),
                            h.cfg.entry_point};
        for (uint64_t v : vals)
          if (auto e = m.push64(v)) return e;
        break;
      }
      case GateOpKind::scrub_scratch: {
        for (Gpr g : kScrubSet) m.regs[g] = 0;
        m.counters.context_ops++;
        break;
      }
      case GateOpKind::rewind_gate_stack:
        m.regs[Gpr::rsp] = top - 2 * kFarFrameSize - 8 * kCalleeSaved.size();
        break;
      case GateOpKind::restore_callee_regs: {
        for (size_t i = kCalleeSaved.size(); i-- > 0;) {
          auto v = m.pop64();
          if (!v.ok()) return v.fault();
          m.regs[kCalleeSaved[i]] = v.value();
        }
        m.counters.context_ops++;
        break;
      }
      case GateOpKind::restore_caller_ds: {
        bool ok = false;
        uint64_t ss = m.read_u64_or_fault(m.regs[Gpr::rsp] + 24, &ok);
        if (!ok) return m.pending_fault();
        m.regs.ds = SegmentSelector::unpack(ss);
        break;
      }
      case GateOpKind::long_ret:
        if (auto e = long_return(m)) return e;
        break;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Privcall registry

inline ApiResult<uint32_t> register_privcall(
    LotrHandle& h, std::string name, unsigned arity, PrivcallHandler handler,
    std::vector<ArgWidth> widths = {}) {
  if (h.registry_closed)
    return LotrError{LotrErrc::registry_closed,
                     "privcall table is fixed after close"};
  if (arity > kMaxPrivcallArity)
    return LotrError{LotrErrc::arity_too_large,
                     "at most six argument slots exist"};
  if (widths.empty()) widths.assign(arity, ArgWidth::w64);
  PrivcallRoutine r;
  r.number = h.pct.max_privcall() + 1;
  r.name = std::move(name);
  r.arity = arity;
  r.widths = std::move(widths);
  r.handler = std::move(handler);
  h.pct.routines.push_back(std::move(r));
  return h.pct.routines.back().number;
}

inline void close_privcall_registry(LotrHandle& h) { h.registry_closed = true; }

// ---------------------------------------------------------------------------
// Privcall round trip

struct PrivcallResult {
  enum class Status : uint8_t { ok, bad_number, faulted } status =
      Status::faulted;
  uint64_t rax = 0;
  std::optional<Fault> fault;

  bool ok() const { return status == Status::ok; }
};

class HandlerContext {
public:
  HandlerContext(Machine& m, LotrHandle& h) : m_(m), h_(h) {}

  Machine& machine() { return m_; }
  LotrHandle& handle() { return h_; }

  Outcome<std::vector<uint8_t>> read(uint64_t addr, uint64_t len) {
    return m_.read_mem(addr, len);
  }
  Outcome<uint64_t> read_u64(uint64_t addr) {
    auto r = m_.read_mem(addr, 8);
    if (!r.ok()) return r.fault();
    uint64_t v;
    std::memcpy(&v, r.value().data(), 8);
    return v;
  }
  std::optional<Fault> write(uint64_t addr, const uint8_t* data,
                             uint64_t len) {
    return m_.write_mem(addr, data, len);
  }
  std::optional<Fault> write_u64(uint64_t addr, uint64_t v) {
    return m_.write_u64(addr, v);
  }
  ApiResult<uint64_t> alloc(uint64_t len);
  PrivcallResult privcall(uint64_t nr, std::span<const uint64_t> args);

private:
  Machine& m_;
  LotrHandle& h_;
};

inline PrivcallResult privcall(Machine& m, LotrHandle& h, uint64_t nr,
                               std::span<const uint64_t> args) {
  PrivcallResult res;
  auto faulted = [&](const Fault& f) {
    res.status = PrivcallResult::Status::faulted;
    res.fault = f;
    res.rax = m.regs[Gpr::rax];
    return res;
  };

  if (auto f = m.require_running()) return faulted(*f);

  m.regs[Gpr::rax] = nr;
  for (size_t i = 0; i < 6; ++i)
    m.regs[kAbiSlots[i + 1]] = i < args.size() ? args[i] : 0;

  if (auto f = long_call(m, h.cg1)) return faulted(*f);
  if (auto f = run_gate_program(m, h, h.enter_gate)) return faulted(*f);

  // PrivUser entry: bound-check the number in EAX, then dispatch through
  // the PCT. Arguments are taken from the stack image the Enter gate
  // built, read back with PrivUser-privilege accesses.
  uint32_t nr32 = static_cast<uint32_t>(m.regs[Gpr::rax]);
  if (nr32 < 1 || nr32 > h.pct.max_privcall()) {
    m.regs[Gpr::rax] = kPrivcallError;
    res.status = PrivcallResult::Status::bad_number;
  } else {
    uint64_t frame = h.cfg.privuser_stack_top() - kPrivUserFrameSize;
    auto head = m.read_mem(frame, 4);
    if (!head.ok()) return faulted(head.fault());
    std::memcpy(&h.last_frame.dummy_eip, head.value().data(), 4);
    for (size_t i = 0; i < 7; ++i) {
      auto slot = m.read_mem(frame + 4 + 8 * i, 8);
      if (!slot.ok()) return faulted(slot.fault());
      std::memcpy(&h.last_frame.slots[i], slot.value().data(), 8);
    }

    const PrivcallRoutine& rt = h.pct.routines[nr32 - 1];
    std::vector<uint64_t> call_args(rt.arity);
    for (unsigned i = 0; i < rt.arity; ++i)
      call_args[i] = narrow_arg(h.last_frame.slots[i + 1], rt.widths[i]);

    HandlerContext ctx(m, h);
    auto r = rt.handler(ctx, call_args);
    if (!r.ok()) {
      if (m.running()) m.raise(r.fault().kind, r.fault().detail);
      return faulted(*m.pending_fault());
    }
    if (auto f = m.require_running()) return faulted(*f);
    m.regs[Gpr::rax] = r.value();
    res.status = PrivcallResult::Status::ok;
  }

  if (auto f = long_call(m, h.cg2)) return faulted(*f);
  if (auto f = run_gate_program(m, h, h.exit_gate)) return faulted(*f);

  res.rax = m.regs[Gpr::rax];
  return res;
}

inline PrivcallResult HandlerContext::privcall(uint64_t nr,
                                               std::span<const uint64_t> args) {
  return lotrsim::privcall(m_, h_, nr, args);
}

// ---------------------------------------------------------------------------
// PrivUser heap

// Hands out blocks from the fixed PrivUser heap only; secrets and their
// by-products never land on User pages. Callable from handler context
// (PrivUser privilege) only.
inline ApiResult<uint64_t> privuser_alloc(Machine& m, LotrHandle& h,
                                          uint64_t len) {
  if (m.cpl() != kRing2)
    return LotrError{LotrErrc::wrong_context,
                     "allocation outside PrivUser dispatch"};
  uint64_t aligned = (len + 15) & ~15ull;
  if (aligned == 0 || aligned > h.cfg.privuser_heap.end() - h.heap_cursor)
    return LotrError{LotrErrc::out_of_memory, "PrivUser heap exhausted"};
  uint64_t addr = h.heap_cursor;
  h.heap_cursor += aligned;
  return addr;
}

inline ApiResult<uint64_t> HandlerContext::alloc(uint64_t len) {
  return privuser_alloc(m_, h_, len);
}

// ---------------------------------------------------------------------------
// Guarded memory-permission syscalls

namespace detail {

// The kernel-side rule: a user-space address whose page is Supervisor
// belongs to the PrivUser space and is off limits to permission changes.
inline ApiResult<Unit> privuser_overlap_check(const Machine& m, uint64_t addr,
                                              uint64_t len) {
  if (len == 0) return Unit{};
  for (uint64_t p = page_of(addr); p <= page_of(addr + len - 1); ++p) {
    const PageFlags* f = m.pages.flags(p);
    if (!f)
      return LotrError{LotrErrc::unmapped_range,
                       "page " + std::to_string(p) + " not mapped"};
    if (f->access == PageAccess::supervisor && page_base(p) < (1ull << 32))
      return LotrError{LotrErrc::privuser_overlap,
                       "range touches PrivUser page " + std::to_string(p)};
  }
  return Unit{};
}

}  // namespace detail

// mprotect as seen by the host process: refused outright when the range
// includes any PrivUser page, applied atomically otherwise.
inline ApiResult<Unit> guarded_mprotect(Machine& m, LotrHandle&, uint64_t addr,
                                        uint64_t len, bool writable,
                                        bool executable) {
  auto chk = detail::privuser_overlap_check(m, addr, len);
  if (!chk.ok()) return chk;
  for (uint64_t p = page_of(addr); p <= page_of(addr + len - 1); ++p) {
    PageFlags f = *m.pages.flags(p);
    f.writable = writable;
    f.executable = executable;
    m.pages.map(p, f);
  }
  return Unit{};
}

// munlock shares the refusal rule; there is no lock state to model, so a
// permitted call is a no-op.
inline ApiResult<Unit> guarded_munlock(Machine& m, LotrHandle&, uint64_t addr,
                                       uint64_t len) {
  return detail::privuser_overlap_check(m, addr, len);
}

// ---------------------------------------------------------------------------
// LDT dump

namespace detail {

inline std::string hex(uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

}  // namespace detail

// One line per occupied slot, diffable against the checked-in golden
// file for the canonical configuration.
inline std::string format_ldt(const Machine& m) {
  std::ostringstream os;
  for (uint16_t i = 1; i < DescriptorTable::kCapacity; ++i) {
    const Descriptor* d = m.ldt.at(i);
    if (!d) continue;
    os << i << " ";
    if (const auto* seg = std::get_if<SegmentDescriptor>(d)) {
      os << (seg->kind == SegmentKind::code ? "code" : "data")
         << " ring=" << seg->dpl.num() << " "
         << (seg->kind == SegmentKind::code ? to_string(seg->bitness) : "---")
         << " base=" << detail::hex(seg->base)
         << " limit=" << detail::hex(seg->limit);
    } else {
      const auto& gate = std::get<GateDescriptor>(*d);
      os << "gate target=" << to_string(gate.target_selector.ti) << ":"
         << gate.target_selector.index << " rmpl=" << gate.rmpl.num()
         << " offset=" << detail::hex(gate.target_offset);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace lotrsim

#endif  // LOTRSIM_LOTR_HPP

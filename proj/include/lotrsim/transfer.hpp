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

#ifndef LOTRSIM_TRANSFER_HPP
#define LOTRSIM_TRANSFER_HPP

#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "lotrsim/machine.hpp"

// Inter-segment control transfers. The callgate long call is the only
// privilege-escalating (controlled) transfer; far jumps and long returns
// are non-controlled and can only reach equal or lower privilege. Long
// returns pop whatever bytes sit on the stack, so forged frames are a
// first-class attacker capability here.

namespace lotrsim {

struct SavedFrame {
  uint64_t rip = 0;
  uint64_t cs = 0;  // packed selector; no authenticity is assumed
  uint64_t rsp = 0;
  uint64_t ss = 0;
};

enum class Mechanism : uint8_t { callgate, far_jump, long_return, near };

inline const char* to_string(Mechanism m) {
  switch (m) {
    case Mechanism::callgate: return "callgate";
    case Mechanism::far_jump: return "far-jump";
    case Mechanism::long_return: return "long-return";
    case Mechanism::near: return "near";
  }
  return "?";
}

// Callgate long call. Denies when CPL > RMPL (caller too unprivileged) or
// CPL <= target ring (no de-escalation, and no same-ring transit). On
// success the caller context is saved on the ring-m stack taken from the
// TSS and execution continues at the gate's target entrance.
inline std::optional<Fault> long_call(Machine& m, SegmentSelector sel) {
  if (auto f = m.require_running()) return f;

  auto d = m.resolve_selector(sel);
  if (!d.ok()) return m.raise(d.fault().kind, d.fault().detail);
  const auto* gate = std::get_if<GateDescriptor>(&d.value());
  if (!gate)
    return m.raise(FaultKind::invalid_gate,
                   "long call through " + sel.describe() + " which is not a gate");

  auto target = m.resolve_selector(gate->target_selector);
  if (!target.ok() || !is_code(target.value()))
    return m.raise(FaultKind::invalid_gate, "gate target is not code");
  const auto& tseg = std::get<SegmentDescriptor>(target.value());
  if (tseg.bitness == Bitness::x32)
    return m.raise(FaultKind::invalid_gate,
                   "gate targets a 32-bit code segment");

  unsigned n = m.cpl().num();
  unsigned tgt = tseg.dpl.num();
  if (n > gate->rmpl.num() || n <= tgt)
    return m.raise(FaultKind::general_protection,
                   "callgate privilege check: cpl=" + std::to_string(n) +
                       " rmpl=" + std::to_string(gate->rmpl.num()) +
                       " target=" + std::to_string(tgt));

  const auto& stk = m.tss.stack_for(tseg.dpl);
  if (!stk)
    return m.raise(FaultKind::general_protection,
                   "no TSS stack for ring " + std::to_string(tgt));
  auto ssd = m.resolve_selector(stk->ss);
  if (!ssd.ok() || !is_data(ssd.value()))
    return m.raise(FaultKind::general_protection,
                   "TSS stack selector does not name a data segment");

  uint64_t saved_rip = m.regs.rip;
  uint64_t saved_cs = m.regs.cs.pack();
  uint64_t saved_rsp = m.regs[Gpr::rsp];
  uint64_t saved_ss = m.regs.ss.pack();

  // Load the new context, escalate, then push the saved caller context
  // onto the ring-m stack. A stack fault here lands after the switch.
  m.regs.ss = stk->ss;
  m.regs[Gpr::rsp] = stk->rsp;
  m.regs.cs = gate->target_selector;
  m.regs.cs.rpl = tseg.dpl;
  m.regs.rip = gate->target_offset;
  m.counters.ring_transitions++;
  m.counters.descriptor_loads += 2;  // CS and SS

  for (uint64_t v : {saved_ss, saved_rsp, saved_cs, saved_rip})
    if (auto f = m.push64(v)) return f;
  return std::nullopt;
}

// Long return. Pops RIP, CS, RSP, SS and refuses any destination more
// privileged than the current ring. The frame is trusted as-is.
inline std::optional<Fault> long_return(Machine& m) {
  if (auto f = m.require_running()) return f;

  auto rip = m.pop64();
  if (!rip.ok()) return rip.fault();
  auto cs_raw = m.pop64();
  if (!cs_raw.ok()) return cs_raw.fault();

  SegmentSelector cs = SegmentSelector::unpack(cs_raw.value());
  auto d = m.resolve_selector(cs);
  if (!d.ok() || !is_code(d.value()))
    return m.raise(FaultKind::general_protection,
                   "return CS " + cs.describe() + " is not a code segment");
  const auto& seg = std::get<SegmentDescriptor>(d.value());
  if (seg.dpl != cs.rpl)
    return m.raise(FaultKind::general_protection,
                   "return CS rpl does not match descriptor privilege");
  if (seg.dpl < m.cpl())
    return m.raise(FaultKind::general_protection,
                   "long return to higher privilege denied");

  auto tmp_rsp = m.pop64();
  if (!tmp_rsp.ok()) return tmp_rsp.fault();
  auto tmp_ss_raw = m.pop64();
  if (!tmp_ss_raw.ok()) return tmp_ss_raw.fault();
  SegmentSelector ss = SegmentSelector::unpack(tmp_ss_raw.value());
  auto ssd = m.resolve_selector(ss);
  if (!ssd.ok() || !is_data(ssd.value()))
    return m.raise(FaultKind::invalid_selector,
                   "return SS " + ss.describe() + " is not a data segment");

  if (m.cpl() != seg.dpl) m.counters.ring_transitions++;
  m.counters.descriptor_loads += 2;
  m.regs.rip = rip.value();
  m.regs.cs = cs;
  m.regs[Gpr::rsp] = tmp_rsp.value();
  m.regs.ss = ss;
  return std::nullopt;
}

// Non-controlled far jump. Never escalates: the destination descriptor
// privilege must be numerically >= CPL. Gates are not a jump target in
// this model; escalation exists only through long_call.
inline std::optional<Fault> far_jump(Machine& m, SegmentSelector sel,
                                     uint64_t offset) {
  if (auto f = m.require_running()) return f;

  auto d = m.resolve_selector(sel);
  if (!d.ok()) return m.raise(d.fault().kind, d.fault().detail);
  if (is_gate(d.value()))
    return m.raise(FaultKind::general_protection,
                   "far jump cannot transit a gate");
  const auto& seg = std::get<SegmentDescriptor>(d.value());
  if (seg.kind != SegmentKind::code)
    return m.raise(FaultKind::general_protection,
                   "far jump target must be a code segment");
  if (seg.dpl < m.cpl())
    return m.raise(FaultKind::general_protection,
                   "far jump to higher privilege denied");
  if (seg.bitness == Bitness::x32) {
    auto lin = Machine::effective_address(offset, seg, Bitness::x32);
    if (!lin.ok()) return m.raise(lin.fault().kind, lin.fault().detail);
  }

  if (m.cpl() != seg.dpl) m.counters.ring_transitions++;
  m.counters.descriptor_loads += 1;
  m.regs.cs = sel;
  m.regs.cs.rpl = seg.dpl;
  m.regs.rip = offset;
  return std::nullopt;
}

// Intra-segment transfer; only moves the program counter.
inline std::optional<Fault> near_transfer(Machine& m, uint64_t offset) {
  if (auto f = m.require_running()) return f;
  m.regs.rip = offset;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// One-step reachability

struct ModeRef {
  Ring ring = kRing3;
  Bitness bitness = Bitness::x64;
  SegmentSelector cs;  // identity of the code descriptor defining the mode

  friend bool operator==(const ModeRef&, const ModeRef&) = default;

  std::string describe() const {
    return "R" + std::to_string(ring.num()) +
           (bitness == Bitness::x32 ? "_x32" : "_x64") + "@" + cs.describe();
  }
};

struct ReachableMode {
  ModeRef to;
  bool controlled = false;
  Mechanism mechanism = Mechanism::near;
  SegmentSelector via;  // gate selector for callgate edges
};

namespace detail {

inline bool any_data_descriptor(const Machine& m) {
  for (TableKind t : {TableKind::gdt, TableKind::ldt})
    for (uint16_t i = 1; i < DescriptorTable::kCapacity; ++i)
      if (const Descriptor* d = m.table(t).at(i); d && is_data(*d))
        return true;
  return false;
}

inline bool tss_stack_usable(const Machine& m, Ring r) {
  if (r.num() > 2) return false;
  const auto& stk = m.tss.stack_for(r);
  if (!stk) return false;
  auto d = m.resolve_selector(stk->ss);
  return d.ok() && is_data(d.value());
}

}  // namespace detail

// Enumerates every execution mode reachable in one step from `from` via
// any transfer mechanism and any forgeable return frame. Results are
// ordered by (table, slot, mechanism), GDT first.
inline std::vector<ReachableMode> enumerate_transfers(const Machine& m,
                                                      Ring from_ring,
                                                      Bitness from_bitness,
                                                      SegmentSelector from_cs) {
  std::vector<ReachableMode> out;
  if (!m.running()) return out;

  unsigned n = from_ring.num();
  bool have_data = detail::any_data_descriptor(m);

  // Staying put is always possible.
  out.push_back(ReachableMode{ModeRef{from_ring, from_bitness, from_cs},
                              /*controlled=*/false, Mechanism::near,
                              SegmentSelector{}});

  for (TableKind t : {TableKind::gdt, TableKind::ldt}) {
    for (uint16_t i = 1; i < DescriptorTable::kCapacity; ++i) {
      const Descriptor* d = m.table(t).at(i);
      if (!d) continue;
      SegmentSelector sel{i, t, kRing0};

      if (const auto* gate = std::get_if<GateDescriptor>(d)) {
        auto target = m.resolve_selector(gate->target_selector);
        if (!target.ok() || !is_code(target.value())) continue;
        const auto& tseg = std::get<SegmentDescriptor>(target.value());
        if (tseg.bitness == Bitness::x32) continue;  // rejected at call time
        unsigned tgt = tseg.dpl.num();
        if (n > gate->rmpl.num() || n <= tgt) continue;
        if (!detail::tss_stack_usable(m, tseg.dpl)) continue;
        SegmentSelector tcs = gate->target_selector;
        tcs.rpl = tseg.dpl;
        out.push_back(ReachableMode{ModeRef{tseg.dpl, tseg.bitness, tcs},
                                    /*controlled=*/true, Mechanism::callgate,
                                    sel});
        continue;
      }

      const auto& seg = std::get<SegmentDescriptor>(*d);
      if (seg.kind != SegmentKind::code) continue;
      if (seg.dpl.num() < n) continue;  // no escalation without a gate
      if (seg.bitness == Bitness::x32 && seg.limit == 0) continue;
      SegmentSelector tcs = sel;
      tcs.rpl = seg.dpl;
      ModeRef dest{seg.dpl, seg.bitness, tcs};
      out.push_back(ReachableMode{dest, /*controlled=*/false,
                                  Mechanism::far_jump, sel});
      if (have_data)
        out.push_back(ReachableMode{dest, /*controlled=*/false,
                                    Mechanism::long_return, sel});
    }
  }
  return out;
}

}  // namespace lotrsim

#endif  // LOTRSIM_TRANSFER_HPP

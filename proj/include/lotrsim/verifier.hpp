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

#ifndef LOTRSIM_VERIFIER_HPP
#define LOTRSIM_VERIFIER_HPP

#include <algorithm>
#include <deque>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lotrsim/lotr.hpp"
#include "lotrsim/machine.hpp"
#include "lotrsim/transfer.hpp"

// Security-requirement checker. Builds the complete one-step transfer
// graph over a configured machine, then decides:
//
//   M-SR1  user mode cannot touch the PrivUser space
//   M-SR2  PrivUser mode cannot touch kernel memory
//   CT-SR  no non-controlled transfer from R2_x32 reaches x64 ring < 3
//   P1     every gate-entry ring is strictly above the PrivUser ring
//   P2     no x64 code segment exists at the PrivUser ring
//   C      every installed gate targets an x64 code segment
//   GATE   a privcall issued from PrivUser mode is rejected at the
//          Enter gate's caller-ring check
//
// GATE is not one of the named requirements; it is the behavioural probe
// that makes the gate-program mutation observable, since none of the
// other checks inspect gate contents.
//
// Failing verdicts carry a witness that replays on the machine.

namespace lotrsim {

enum class Requirement : uint8_t { msr1, msr2, ctsr, p1, p2, c, gate };

inline const char* to_string(Requirement r) {
  switch (r) {
    case Requirement::msr1: return "M-SR1";
    case Requirement::msr2: return "M-SR2";
    case Requirement::ctsr: return "CT-SR";
    case Requirement::p1: return "P1";
    case Requirement::p2: return "P2";
    case Requirement::c: return "C";
    case Requirement::gate: return "GATE";
  }
  return "?";
}

struct TransferEdge {
  ModeRef from;
  ModeRef to;
  bool controlled = false;
  Mechanism mechanism = Mechanism::near;
  SegmentSelector via;  // gate selector for callgate edges

  std::string describe() const {
    return from.describe() + " --" + to_string(mechanism) + "--> " +
           to.describe();
  }
};

struct TransferGraph {
  std::vector<ModeRef> nodes;
  std::vector<TransferEdge> edges;

  std::vector<const TransferEdge*> edges_from(const ModeRef& n) const {
    std::vector<const TransferEdge*> out;
    for (const auto& e : edges)
      if (e.from == n) out.push_back(&e);
    return out;
  }
};

// Memory-access witness: a probe that succeeded where it had to fault
// (or vice versa), replayable from the recorded mode.
struct AccessProbe {
  enum class Op : uint8_t { read, write, exec } op = Op::read;
  uint64_t addr = 0;
  ModeRef posed;
  std::string note;

  std::string describe() const {
    const char* ops[] = {"read", "write", "exec"};
    std::ostringstream os;
    os << ops[static_cast<int>(op)] << " 0x" << std::hex << addr << " from "
       << posed.describe();
    if (!note.empty()) os << " (" << note << ")";
    return os.str();
  }
};

struct Verdict {
  Requirement req = Requirement::ctsr;
  bool holds = true;
  std::vector<TransferEdge> path;   // transfer-style witness
  std::optional<AccessProbe> probe; // access-style witness
  std::string note;
  std::vector<std::string> warnings;

  std::string render() const {
    std::string s = "REQ ";
    s += to_string(req);
    s += holds ? " HOLDS" : " FAILS";
    if (!holds) {
      s += " [witness:";
      if (!path.empty()) {
        for (const auto& e : path) {
          s += " ";
          s += e.describe();
        }
      } else if (probe) {
        s += " " + probe->describe();
      } else {
        s += " " + note;
      }
      s += "]";
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Graph construction

inline std::vector<ModeRef> installed_modes(const Machine& m) {
  std::vector<ModeRef> nodes;
  for (TableKind t : {TableKind::gdt, TableKind::ldt}) {
    for (uint16_t i = 1; i < DescriptorTable::kCapacity; ++i) {
      const Descriptor* d = m.table(t).at(i);
      if (!d || !is_code(*d)) continue;
      const auto& seg = std::get<SegmentDescriptor>(*d);
      nodes.push_back(ModeRef{seg.dpl, seg.bitness,
                              SegmentSelector{i, t, seg.dpl}});
    }
  }
  return nodes;
}

inline TransferGraph build_transfer_graph(const Machine& m) {
  TransferGraph g;
  g.nodes = installed_modes(m);
  for (const ModeRef& n : g.nodes) {
    for (const ReachableMode& r :
         enumerate_transfers(m, n.ring, n.bitness, n.cs)) {
      g.edges.push_back(TransferEdge{n, r.to, r.controlled, r.mechanism,
                                     r.via});
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// CT-SR

// BFS over non-controlled edges from every R2_x32 node; a reachable x64
// node with ring < 3 breaks the requirement. The shortest offending path
// is the witness. Reached x32 nodes below ring 3 are only flagged.
inline Verdict check_ctsr(const TransferGraph& g) {
  Verdict v;
  v.req = Requirement::ctsr;

  auto key = [](const ModeRef& n) {
    return std::tuple(n.cs.ti, n.cs.index);
  };

  for (const ModeRef& start : g.nodes) {
    if (!(start.ring == kRing2 && start.bitness == Bitness::x32)) continue;

    std::map<std::tuple<TableKind, uint16_t>, const TransferEdge*> parent;
    std::deque<ModeRef> queue{start};
    parent[key(start)] = nullptr;

    while (!queue.empty()) {
      ModeRef cur = queue.front();
      queue.pop_front();
      for (const TransferEdge* e : g.edges_from(cur)) {
        if (e->controlled) continue;
        auto k = key(e->to);
        if (parent.contains(k)) continue;
        parent[k] = e;

        if (e->to.bitness == Bitness::x64 && e->to.ring < kRing3) {
          std::vector<TransferEdge> path{*e};
          for (const TransferEdge* p = parent[key(e->from)]; p;
               p = parent[key(p->from)])
            path.push_back(*p);
          std::reverse(path.begin(), path.end());
          v.holds = false;
          v.path = path;
          return v;
        }
        if (e->to.bitness == Bitness::x32 && e->to.ring < kRing3 &&
            !(e->to == start))
          v.warnings.push_back("non-controlled transfer reaches " +
                               e->to.describe() +
                               ", an x32 segment below ring 3");
        queue.push_back(e->to);
      }
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// M-SR1 / M-SR2

namespace detail {

inline std::optional<ModeRef> find_mode(const Machine& m, Ring ring,
                                        std::optional<Bitness> bitness) {
  for (const ModeRef& n : installed_modes(m))
    if (n.ring == ring && (!bitness || n.bitness == *bitness)) return n;
  return std::nullopt;
}

inline std::optional<SegmentSelector> find_data_selector(const Machine& m,
                                                         Ring dpl) {
  for (TableKind t : {TableKind::gdt, TableKind::ldt})
    for (uint16_t i = 1; i < DescriptorTable::kCapacity; ++i)
      if (const Descriptor* d = m.table(t).at(i); d && is_data(*d) &&
          std::get<SegmentDescriptor>(*d).dpl == dpl)
        return SegmentSelector{i, t, dpl};
  return std::nullopt;
}

}  // namespace detail

// Exhaustively attempts read/write/exec at CPL 3 against every PrivUser
// page; all of them must fault.
inline Verdict check_msr1(const Machine& machine, const LotrHandle& h) {
  Verdict v;
  v.req = Requirement::msr1;

  if (h.privuser_pages.empty()) {
    v.note = "no PrivUser pages; vacuously holds";
    return v;
  }
  auto mode = detail::find_mode(machine, kRing3, std::nullopt);
  auto data = detail::find_data_selector(machine, kRing3);
  if (!mode || !data) {
    v.note = "no ring-3 execution mode installed; vacuously holds";
    return v;
  }

  Machine m = machine;  // probes run on a scratch copy
  m.pose(mode->cs, *data, *data, 0, 0);

  for (uint64_t page : h.privuser_pages) {
    uint64_t addr = page_base(page);

    auto r = m.read_mem(addr, 1);
    if (r.ok()) {
      v.holds = false;
      v.probe = AccessProbe{AccessProbe::Op::read, addr, *mode,
                            "user-mode read of a PrivUser page succeeded"};
      return v;
    }
    m.clear_fault();

    uint8_t b = 0;
    if (!m.write_mem(addr, &b, 1)) {
      v.holds = false;
      v.probe = AccessProbe{AccessProbe::Op::write, addr, *mode,
                            "user-mode write of a PrivUser page succeeded"};
      return v;
    }
    m.clear_fault();

    if (!m.check_exec(kRing3, page)) {
      v.holds = false;
      v.probe = AccessProbe{AccessProbe::Op::exec, addr, *mode,
                            "user-mode execution of a PrivUser page allowed"};
      return v;
    }
  }
  return v;
}

// From PrivUser context, attempts to reach every kernel-region page via
// the direct 64-bit address, its wrapped 32-bit alias, and the segment
// window edges. A successful access landing on a kernel page fails the
// requirement.
inline Verdict check_msr2(const Machine& machine, const LotrHandle& h) {
  Verdict v;
  v.req = Requirement::msr2;

  if (h.kernel_pages.empty()) {
    v.note = "kernel region empty; vacuously holds";
    return v;
  }
  auto mode = detail::find_mode(machine, kRing2, Bitness::x32);
  if (!mode) {
    v.note = "no PrivUser mode installed; vacuously holds";
    return v;
  }

  Machine m = machine;
  m.pose(mode->cs, h.pu_ds, h.pu_ds, h.cfg.privuser_stack_top() - 0x100,
         h.cfg.entry_point);

  auto attempt = [&](uint64_t addr, const char* what) -> bool {
    auto r = m.read_mem(addr, 1);
    if (r.ok()) {
      uint64_t lin = addr & 0xffffffffull;  // PrivUser mode is x32
      if (h.kernel_pages.contains(page_of(lin))) {
        v.holds = false;
        v.probe = AccessProbe{AccessProbe::Op::read, addr, *mode, what};
        return true;
      }
    }
    m.clear_fault();
    return false;
  };

  for (uint64_t page : h.kernel_pages) {
    uint64_t addr = page_base(page);
    if (attempt(addr, "direct address reached a kernel page")) return v;
    if (attempt(addr & 0xffffffffull,
                "wrapped 32-bit alias reached a kernel page"))
      return v;
  }

  AddrRange win = h.cfg.window();
  for (uint64_t edge : {win.base - 1, win.base, win.end() - 1, win.end()}) {
    if (attempt(edge, "segment window edge reached a kernel page")) return v;
  }
  return v;
}

// ---------------------------------------------------------------------------
// P1 / P2 / C

inline std::array<Verdict, 3> check_p1_p2_c(const Machine& m) {
  Verdict p1, p2, c;
  p1.req = Requirement::p1;
  p2.req = Requirement::p2;
  c.req = Requirement::c;

  std::vector<Ring> privuser_rings;
  std::vector<std::pair<SegmentSelector, SegmentDescriptor>> code_descs;
  for (TableKind t : {TableKind::gdt, TableKind::ldt}) {
    for (uint16_t i = 1; i < DescriptorTable::kCapacity; ++i) {
      const Descriptor* d = m.table(t).at(i);
      if (!d || !is_code(*d)) continue;
      const auto& seg = std::get<SegmentDescriptor>(*d);
      code_descs.emplace_back(SegmentSelector{i, t, seg.dpl}, seg);
      if (seg.bitness == Bitness::x32) privuser_rings.push_back(seg.dpl);
    }
  }

  for (TableKind t : {TableKind::gdt, TableKind::ldt}) {
    for (uint16_t i = 1; i < DescriptorTable::kCapacity; ++i) {
      const Descriptor* d = m.table(t).at(i);
      if (!d || !is_gate(*d)) continue;
      const auto& gate = std::get<GateDescriptor>(*d);
      SegmentSelector here{i, t, kRing0};

      auto target = m.resolve_selector(gate.target_selector);
      if (!target.ok() || !is_code(target.value())) {
        c.holds = false;
        c.note = "gate " + here.describe() + " targets a non-code descriptor";
        continue;
      }
      const auto& tseg = std::get<SegmentDescriptor>(target.value());
      if (tseg.bitness == Bitness::x32) {
        c.holds = false;
        c.note = "gate " + here.describe() + " targets an x32 code segment";
      }
      for (Ring p : privuser_rings) {
        if (!(tseg.dpl < p)) {
          p1.holds = false;
          p1.note = "gate " + here.describe() + " enters ring " +
                    std::to_string(tseg.dpl.num()) +
                    " which is not above the PrivUser ring " +
                    std::to_string(p.num());
        }
      }
    }
  }

  for (Ring p : privuser_rings) {
    for (const auto& [sel, seg] : code_descs) {
      if (seg.dpl == p && seg.bitness == Bitness::x64) {
        p2.holds = false;
        p2.note = "x64 code segment " + sel.describe() +
                  " exists at the PrivUser ring " + std::to_string(p.num());
      }
    }
  }
  return {p1, p2, c};
}

// ---------------------------------------------------------------------------
// Enter-gate guard probe

// Issues a privcall while posed in PrivUser mode. The Enter gate must
// bounce it with a general protection fault at its caller-ring check.
inline Verdict check_gate_guard(const Machine& machine, const LotrHandle& h) {
  Verdict v;
  v.req = Requirement::gate;

  auto mode = detail::find_mode(machine, kRing2, Bitness::x32);
  if (!mode) {
    v.note = "no PrivUser mode installed; vacuously holds";
    return v;
  }

  Machine m = machine;
  LotrHandle hc = h;
  m.pose(mode->cs, h.pu_ds, h.pu_ds, h.cfg.privuser_stack_top() - 0x100,
         h.cfg.entry_point);

  auto r = privcall(m, hc, 1, {});
  bool rejected = r.status == PrivcallResult::Status::faulted && r.fault &&
                  r.fault->kind == FaultKind::general_protection;
  if (!rejected) {
    v.holds = false;
    v.note = "privcall issued at CPL 2 was not rejected by the Enter gate";
    v.probe = AccessProbe{AccessProbe::Op::exec, h.cfg.enter_gate_addr, *mode,
                          v.note};
  }
  return v;
}

// ---------------------------------------------------------------------------
// Full battery

inline std::vector<Verdict> run_verification(const Machine& m,
                                             const LotrHandle& h) {
  std::vector<Verdict> out;
  out.push_back(check_msr1(m, h));
  out.push_back(check_msr2(m, h));
  out.push_back(check_ctsr(build_transfer_graph(m)));
  auto ppc = check_p1_p2_c(m);
  out.insert(out.end(), ppc.begin(), ppc.end());
  out.push_back(check_gate_guard(m, h));
  return out;
}

// ---------------------------------------------------------------------------
// Witness replay

// Re-executes a transfer-path witness step by step on a copy of the
// machine and confirms the claimed end mode. Access witnesses re-run the
// recorded probe.
inline bool replay_witness(const Machine& machine, const LotrHandle& h,
                           const Verdict& v) {
  if (v.holds) return true;

  Machine m = machine;
  if (v.probe && v.path.empty()) {
    const AccessProbe& p = *v.probe;
    if (v.req == Requirement::gate) {
      LotrHandle hc = h;
      m.pose(p.posed.cs, h.pu_ds, h.pu_ds,
             h.cfg.privuser_stack_top() - 0x100, h.cfg.entry_point);
      auto r = privcall(m, hc, 1, {});
      return !(r.status == PrivcallResult::Status::faulted && r.fault &&
               r.fault->kind == FaultKind::general_protection);
    }
    auto data = detail::find_data_selector(m, p.posed.ring);
    SegmentSelector ds = data ? *data : h.pu_ds;
    if (p.posed.ring == kRing2) ds = h.pu_ds;
    m.pose(p.posed.cs, ds, ds, 0, 0);
    switch (p.op) {
      case AccessProbe::Op::read: return m.read_mem(p.addr, 1).ok();
      case AccessProbe::Op::write: {
        uint8_t b = 0;
        return !m.write_mem(p.addr, &b, 1).has_value();
      }
      case AccessProbe::Op::exec:
        return !m.check_exec(p.posed.ring, page_of(p.addr)).has_value();
    }
    return false;
  }

  if (v.path.empty()) return false;

  // Pose at the path head. Stack space for forged frames lives in the
  // PrivUser stack for x32 modes and in a scratch page otherwise.
  const ModeRef& start = v.path.front().from;
  auto data = detail::find_data_selector(m, start.ring);
  SegmentSelector ss = data ? *data : h.pu_ds;
  uint64_t rsp;
  if (start.bitness == Bitness::x32) {
    ss = h.pu_ds;
    rsp = h.cfg.privuser_stack_top() - 0x200;
  } else {
    constexpr uint64_t kScratch = 0x00700000;
    if (!m.pages.mapped(page_of(kScratch)))
      m.pages.map(page_of(kScratch), PageFlags{PageAccess::user, true, false});
    rsp = kScratch + 0x800;
  }
  if (m.pose(start.cs, ss, ss, rsp, 0)) return false;

  for (const TransferEdge& e : v.path) {
    std::optional<Fault> f;
    switch (e.mechanism) {
      case Mechanism::callgate:
        f = long_call(m, e.via);
        break;
      case Mechanism::far_jump: {
        auto d = m.resolve_selector(e.via);
        if (!d.ok()) return false;
        uint64_t off = std::get<SegmentDescriptor>(d.value()).base;
        f = far_jump(m, e.via, off);
        break;
      }
      case Mechanism::long_return: {
        auto d = m.resolve_selector(e.via);
        if (!d.ok()) return false;
        const auto& seg = std::get<SegmentDescriptor>(d.value());
        SegmentSelector cs = e.via;
        cs.rpl = seg.dpl;
        uint64_t frame[4] = {seg.base, cs.pack(), m.regs[Gpr::rsp],
                             m.regs.ss.pack()};
        for (int i = 3; i >= 0; --i)
          if (m.push64(frame[i])) return false;
        f = long_return(m);
        break;
      }
      case Mechanism::near:
        f = near_transfer(m, 0);
        break;
    }
    if (f) return false;
    if (!(m.cpl() == e.to.ring && m.bitness() == e.to.bitness)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Mutation suite

struct Mutation {
  std::string name;
  std::function<void(Machine&, LotrHandle&)> apply;
};

// Each mutation breaks exactly one pillar of the architecture; the suite
// proves every check is load-bearing by requiring a verdict flip.
inline std::vector<Mutation> shipped_mutations() {
  std::vector<Mutation> muts;

  muts.push_back({"drop-supervisor-mark", [](Machine& m, LotrHandle& h) {
                    m.pages.set_access(h.privuser_pages.front(),
                                       PageAccess::user);
                  }});

  muts.push_back({"add-ring2-x64-code", [](Machine& m, LotrHandle&) {
                    m.install_descriptor(
                        TableKind::ldt, 7,
                        make_code_desc(kRing2, Bitness::x64, 0, UINT64_MAX));
                  }});

  muts.push_back({"demote-gate-ring", [](Machine& m, LotrHandle&) {
                    m.inject_descriptor_raw(
                        TableKind::ldt, 1,
                        make_code_desc(kRing2, Bitness::x64, 0, UINT64_MAX));
                  }});

  muts.push_back({"widen-privuser-limit", [](Machine& m, LotrHandle& h) {
                    AddrRange win = h.cfg.window();
                    m.inject_descriptor_raw(
                        TableKind::ldt, 4,
                        make_data_desc(kRing2, win.base,
                                       UINT64_MAX - win.base));
                    constexpr uint64_t kAlias = 0x50000000;
                    m.pages.map(page_of(kAlias),
                                PageFlags{PageAccess::supervisor, true, false});
                    h.kernel_pages.insert(page_of(kAlias));
                  }});

  muts.push_back({"gate-to-x32-injection", [](Machine& m, LotrHandle& h) {
                    m.inject_descriptor_raw(
                        TableKind::ldt, 6,
                        GateDescriptor{h.pu_cs, h.cfg.entry_point, kRing2});
                  }});

  muts.push_back({"remove-enter-gate-check", [](Machine&, LotrHandle& h) {
                    auto& ops = h.enter_gate.ops;
                    ops.erase(std::remove_if(
                                  ops.begin(), ops.end(),
                                  [](const GateOp& op) {
                                    return op.kind ==
                                           GateOpKind::check_caller_ring;
                                  }),
                              ops.end());
                  }});

  return muts;
}

struct MutationOutcome {
  std::string name;
  bool detected = false;
  std::vector<Requirement> flipped;
};

struct MutationReport {
  std::vector<MutationOutcome> rows;
  bool all_detected = true;

  std::string render() const {
    std::ostringstream os;
    for (const auto& r : rows) {
      os << "MUTATION " << r.name << " "
         << (r.detected ? "DETECTED" : "UNDETECTED");
      if (!r.flipped.empty()) {
        os << " [flips:";
        for (Requirement q : r.flipped) os << " " << to_string(q);
        os << "]";
      }
      os << "\n";
    }
    return os.str();
  }
};

// Applies every shipped mutation to a fresh copy of the machine, reruns
// the battery, and reports which verdicts flipped. The original machine
// is never touched.
inline MutationReport run_mutation_suite(const Machine& machine,
                                         const LotrHandle& h) {
  MutationReport report;
  auto baseline = run_verification(machine, h);

  for (const Mutation& mut : shipped_mutations()) {
    Machine mc = machine;
    LotrHandle hc = h;
    mut.apply(mc, hc);

    auto verdicts = run_verification(mc, hc);
    MutationOutcome row;
    row.name = mut.name;
    for (size_t i = 0; i < verdicts.size(); ++i)
      if (baseline[i].holds && !verdicts[i].holds)
        row.flipped.push_back(verdicts[i].req);
    row.detected = !row.flipped.empty();
    report.all_detected = report.all_detected && row.detected;
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace lotrsim

#endif  // LOTRSIM_VERIFIER_HPP

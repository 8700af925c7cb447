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

// Acceptance suite. Each criterion prints one PASS/FAIL line with its
// case count and runtime; the binary exits nonzero if any fails. Time
// budgets are enforced, not just reported.

#include <chrono>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "lotrsim/canonical.hpp"
#include "lotrsim/costmodel.hpp"
#include "lotrsim/scenario.hpp"
#include "lotrsim/verifier.hpp"
#include "oracles.hpp"

using namespace lotrsim;

namespace {

int g_failures = 0;

struct Criterion {
  const char* name;
  double budget_seconds;
  int checked = 0;
  int mismatches = 0;
  std::string note;

  void expect(bool ok, const char* what = "") {
    ++checked;
    if (!ok) {
      ++mismatches;
      if (note.empty()) note = what;
    }
  }
};

template <typename Fn>
void run_criterion(int index, const char* name, double budget, Fn&& body) {
  Criterion c{name, budget, 0, 0, {}};
  auto start = std::chrono::steady_clock::now();
  body(c);
  double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();

  bool pass = c.mismatches == 0 && secs < budget;
  if (!pass) ++g_failures;
  std::printf("[%d] %-28s %s  (%d checks, %d mismatches, %.2fs / budget %.0fs)%s%s\n",
              index, name, pass ? "PASS" : "FAIL", c.checked, c.mismatches,
              secs, budget, c.note.empty() ? "" : "  note: ",
              c.note.c_str());
}

Scenario parse_or_die(const std::string& text, Criterion& c) {
  auto r = parse_scenario(text);
  if (auto* e = std::get_if<ParseError>(&r)) {
    c.expect(false, "scenario parse error");
    static Scenario empty;
    (void)e;
    return empty;
  }
  return std::get<Scenario>(r);
}

}  // namespace

// Criterion 1: the access-check suite over every ring x class x op and
// SMEP/SMAP variant matches the transcribed matrix.
static void criterion_access_matrix(Criterion& c) {
  for (unsigned ring = 0; ring <= 3; ++ring) {
    for (bool sup : {false, true}) {
      for (bool smep : {false, true}) {
        for (bool smap : {false, true}) {
          Machine m;
          m.pages.map(0x100, PageFlags{sup ? PageAccess::supervisor
                                           : PageAccess::user,
                                       true, true});
          m.smep = smep;
          m.smap = smap;
          c.expect(!m.check_data_access(Ring{ring}, 0x100, false) ==
                       oracles::data_access_allowed(ring, sup, false, smap,
                                                    true),
                   "read row");
          c.expect(!m.check_data_access(Ring{ring}, 0x100, true) ==
                       oracles::data_access_allowed(ring, sup, true, smap,
                                                    true),
                   "write row");
          c.expect(!m.check_exec(Ring{ring}, 0x100) ==
                       oracles::exec_allowed(ring, sup, smep, true),
                   "exec row");
          c.expect(!Machine::privileged_instruction_check(Ring{ring}) ==
                       oracles::kPrivInstrAllowed[ring],
                   "privileged instruction row");
        }
      }
    }
  }
}

// Criterion 2: callgate and long-return outcomes equal the independent
// oracles, exhaustively.
static void criterion_transfer_oracles(Criterion& c) {
  for (unsigned n = 0; n <= 3; ++n) {
    for (unsigned tgt = 0; tgt <= 3; ++tgt) {
      for (unsigned rmpl = 0; rmpl <= 3; ++rmpl) {
        std::vector<oracles::TableEntry> e;
        for (unsigned r = 0; r <= 3; ++r)
          e.push_back({TableKind::gdt, static_cast<uint16_t>(r + 1),
                       make_code_desc(Ring{r}, Bitness::x64, 0, UINT64_MAX)});
        e.push_back({TableKind::gdt, 5, make_data_desc(kRing3, 0, UINT64_MAX)});
        e.push_back({TableKind::ldt, 1,
                     GateDescriptor{
                         SegmentSelector{static_cast<uint16_t>(tgt + 1),
                                         TableKind::gdt, kRing0},
                         0x7000, Ring{rmpl}}});
        Machine base = oracles::build_machine(e);
        ModeRef mode{Ring{n}, Bitness::x64,
                     SegmentSelector{static_cast<uint16_t>(n + 1),
                                     TableKind::gdt, Ring{n}}};
        Machine m = oracles::posed_at(base, mode);
        bool allowed = !long_call(m, SegmentSelector{1, TableKind::ldt, kRing3});
        c.expect(allowed == oracles::callgate_allowed(n, tgt, rmpl),
                 "callgate triple");
        if (allowed) c.expect(m.cpl().num() == tgt, "callgate target ring");
      }
    }
  }

  for (unsigned cur = 0; cur <= 3; ++cur) {
    for (unsigned dest = 0; dest <= 3; ++dest) {
      std::vector<oracles::TableEntry> e;
      for (unsigned r = 0; r <= 3; ++r)
        e.push_back({TableKind::gdt, static_cast<uint16_t>(r + 1),
                     make_code_desc(Ring{r}, Bitness::x64, 0, UINT64_MAX)});
      e.push_back({TableKind::gdt, 5, make_data_desc(kRing3, 0, UINT64_MAX)});
      Machine base = oracles::build_machine(e);
      ModeRef mode{Ring{cur}, Bitness::x64,
                   SegmentSelector{static_cast<uint16_t>(cur + 1),
                                   TableKind::gdt, Ring{cur}}};
      Machine m = oracles::posed_at(base, mode);
      SegmentSelector dest_cs{static_cast<uint16_t>(dest + 1), TableKind::gdt,
                              Ring{dest}};
      SegmentSelector ss{5, TableKind::gdt, kRing3};
      uint64_t frame[4] = {0x1234, dest_cs.pack(), oracles::kScratchTop - 0x80,
                           ss.pack()};
      bool planted = true;
      for (int i = 3; i >= 0 && planted; --i)
        if (m.push64(frame[i])) planted = false;
      c.expect(planted, "frame plant");
      bool allowed = planted && !long_return(m);
      c.expect(allowed == oracles::long_return_allowed(cur, dest),
               "long return pair");
    }
  }
}

// Criterion 3: canonical verification holds and the mutation suite
// detects every shipped mutation.
static void criterion_canonical_verification(Criterion& c) {
  auto setup = make_canonical_setup();
  auto verdicts = run_verification(setup.machine, setup.handle);
  for (const auto& v : verdicts) c.expect(v.holds, "canonical verdict");
  c.expect(verdicts.size() == 7, "verdict count");

  auto report = run_mutation_suite(setup.machine, setup.handle);
  c.expect(report.rows.size() == 6, "mutation count");
  for (const auto& row : report.rows) {
    c.expect(row.detected, row.name.c_str());
    c.expect(!row.flipped.empty(), "mutation flips a verdict");
  }
}

// Criterion 4: 1000 randomized privcall round trips through an echo
// handler, bit-exact returns, context restored, scratch set scrubbed.
static void criterion_privcall_roundtrip(Criterion& c) {
  auto setup = make_canonical_setup();
  auto& m = setup.machine;
  auto& h = setup.handle;
  register_privcall(h, "echo", 6,
                    [](HandlerContext&, std::span<const uint64_t> a)
                        -> Outcome<uint64_t> { return a[0]; });

  std::mt19937_64 rng(0xacceb7);
  std::uniform_int_distribution<uint64_t> any;
  for (int i = 0; i < 1000; ++i) {
    uint64_t args[6];
    for (auto& a : args) a = any(rng);
    uint64_t pre_rsp = m.regs[Gpr::rsp];
    uint64_t pre_rip = m.regs.rip;
    SegmentSelector pre_cs = m.regs.cs, pre_ss = m.regs.ss;

    auto r = privcall(m, h, 1, args);
    c.expect(r.ok(), "privcall status");
    c.expect(r.rax == args[0], "bit-exact return");
    c.expect(m.cpl() == kRing3, "CPL restored");
    c.expect(m.regs[Gpr::rsp] == pre_rsp, "RSP restored");
    c.expect(m.regs.rip == pre_rip, "RIP restored");
    c.expect(m.regs.cs == pre_cs, "CS restored");
    c.expect(m.regs.ss == pre_ss, "SS restored");
    for (Gpr g : kScrubSet) c.expect(m.regs[g] == 0, "scratch scrubbed");
  }
}

// Criterion 5: the attack suite ends in the mandated faults and the
// leak detector stays silent everywhere.
static void criterion_attack_suite(Criterion& c) {
  const char* texts[] = {
      // HeartBleed-style over-read across the PrivUser boundary.
      "MAP 0x12fff000 0x1000 user rw\n"
      "SECRET 0x13000000 \"PRIVATE-KEY-BYTES\"\n"
      "ATTACK-READ 0x12fff000 0x1040\n"
      "EXPECT FAULT PageFault\n",
      // Arbitrary far jump into PrivUser code.
      "SECRET 0x11000000 \"PRIVATE-KEY-BYTES\"\n"
      "ATTACK-JUMP ldt:3 0x10000000\n"
      "EXPECT FAULT GeneralProtection\n",
      // Forged-frame privilege forgery via long return.
      "SECRET 0x11000000 \"PRIVATE-KEY-BYTES\"\n"
      "ATTACK-LRET 1\n"
      "EXPECT FAULT GeneralProtection\n"
      "ATTACK-LRET 0\n"
      "EXPECT FAULT GeneralProtection\n",
  };
  for (const char* text : texts) {
    RunReport r = run_scenario(parse_or_die(text, c));
    c.expect(r.pass, "attack scenario expectations");
    c.expect(r.total_leaks == 0, "leak detector clean");
  }

  // CPL-2 re-entry into the Enter gate.
  auto setup = make_canonical_setup();
  register_privcall(setup.handle, "echo", 1,
                    [](HandlerContext&, std::span<const uint64_t> a)
                        -> Outcome<uint64_t> { return a[0]; });
  setup.pose_privuser();
  auto r = privcall(setup.machine, setup.handle, 1, {});
  c.expect(r.status == PrivcallResult::Status::faulted &&
               r.fault->kind == FaultKind::general_protection,
           "CPL-2 re-entry rejected at the gate");
}

// Criterion 6: privcall < mprotect-pair < rpc on the check_password
// workload, under the default weights and uniform scalings.
static void criterion_mechanism_ordering(Criterion& c) {
  std::string text =
      "SECRET 0x11000000 \"opensesame\"\n"
      "REGISTER check_password 1\n"
      "CLOSE-REGISTRY\n";
  for (int i = 0; i < 5; ++i) text += "PRIVCALL 1 \"opensesame\"\nEXPECT RAX 1\n";
  Scenario w = parse_or_die(text, c);

  for (double f : {0.1, 1.0, 10.0}) {
    auto r = compare_mechanisms(w, CostWeights{}.scaled(f));
    bool ok = std::holds_alternative<CostTable>(r);
    c.expect(ok, "cost table");
    if (ok) {
      const auto& t = std::get<CostTable>(r);
      c.expect(t.ordering_holds(), "privcall < mprotect-pair < rpc");
      c.expect(t.rows[0].per_call > 0, "positive per-call cost");
    }
  }
}

// Criterion 7: check_ctsr equals the brute-force execution oracle on
// 500 generated tables of up to 8 slots.
static void criterion_verifier_completeness(Criterion& c) {
  std::mt19937_64 rng(0x5eedc0de);
  for (int t = 0; t < 500; ++t) {
    Machine m = oracles::build_machine(oracles::random_table(rng, 8));
    bool graph_says = check_ctsr(build_transfer_graph(m)).holds;
    bool exec_says = oracles::ctsr_holds_by_execution(m);
    c.expect(graph_says == exec_says, "CT-SR vs execution oracle");
  }
}

int main() {
  std::printf("acceptance suite\n");
  run_criterion(1, "table-1 access matrix", 1.0, criterion_access_matrix);
  run_criterion(2, "callgate/lret oracles", 1.0, criterion_transfer_oracles);
  run_criterion(3, "canonical verification", 10.0,
                criterion_canonical_verification);
  run_criterion(4, "privcall round trips", 5.0, criterion_privcall_roundtrip);
  run_criterion(5, "attack suite", 10.0, criterion_attack_suite);
  run_criterion(6, "mechanism ordering", 10.0, criterion_mechanism_ordering);
  run_criterion(7, "verifier completeness", 30.0,
                criterion_verifier_completeness);

  std::printf("ACCEPTANCE: %s (%d criterion failure%s)\n",
              g_failures == 0 ? "PASS" : "FAIL", g_failures,
              g_failures == 1 ? "" : "s");
  return g_failures == 0 ? 0 : 1;
}

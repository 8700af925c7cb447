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

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "lotrsim/canonical.hpp"
#include "lotrsim/verifier.hpp"
#include "oracles.hpp"

using namespace lotrsim;

namespace {

Verdict find_req(const std::vector<Verdict>& vs, Requirement r) {
  for (const auto& v : vs)
    if (v.req == r) return v;
  FAIL("requirement missing from battery");
  return {};
}

}  // namespace

TEST_CASE("canonical configuration satisfies every requirement") {
  auto setup = make_canonical_setup();
  auto verdicts = run_verification(setup.machine, setup.handle);
  REQUIRE(verdicts.size() == 7);
  for (const auto& v : verdicts) {
    CAPTURE(v.render());
    CHECK(v.holds);
    CHECK(v.warnings.empty());
  }
}

TEST_CASE("canonical transfer graph has the expected node set") {
  auto setup = make_canonical_setup();
  TransferGraph g = build_transfer_graph(setup.machine);

  REQUIRE(g.nodes.size() == 4);  // kernel, user, gate mode, PrivUser
  auto has_node = [&](Ring r, Bitness b) {
    for (const auto& n : g.nodes)
      if (n.ring == r && n.bitness == b) return true;
    return false;
  };
  CHECK(has_node(kRing0, Bitness::x64));
  CHECK(has_node(kRing3, Bitness::x64));
  CHECK(has_node(kRing1, Bitness::x64));
  CHECK(has_node(kRing2, Bitness::x32));

  // No non-controlled edge leaves R2_x32 for an x64 ring below 3.
  for (const auto& e : g.edges)
    if (!e.controlled && e.from.ring == kRing2 &&
        e.from.bitness == Bitness::x32)
      CHECK_FALSE((e.to.bitness == Bitness::x64 && e.to.ring < kRing3));
}

TEST_CASE("an added Ring2-x64 segment breaks CT-SR with a one-edge witness") {
  auto setup = make_canonical_setup();
  setup.machine.install_descriptor(
      TableKind::ldt, 7, make_code_desc(kRing2, Bitness::x64, 0, UINT64_MAX));

  TransferGraph g = build_transfer_graph(setup.machine);
  REQUIRE(g.nodes.size() == 5);

  Verdict v = check_ctsr(g);
  REQUIRE_FALSE(v.holds);
  REQUIRE(v.path.size() == 1);
  CHECK(v.path[0].from.ring == kRing2);
  CHECK(v.path[0].from.bitness == Bitness::x32);
  CHECK(v.path[0].to.ring == kRing2);
  CHECK(v.path[0].to.bitness == Bitness::x64);
  CHECK_FALSE(v.path[0].controlled);

  // The witness replays on the machine and lands where it claims.
  CHECK(replay_witness(setup.machine, setup.handle, v));
  // On the intact canonical machine the same transfer is impossible.
  auto clean = make_canonical_setup();
  CHECK_FALSE(replay_witness(clean.machine, clean.handle, v));
}

TEST_CASE("a gate-mode segment at the PrivUser ring breaks P1 and CT-SR") {
  auto setup = make_canonical_setup();
  setup.machine.inject_descriptor_raw(
      TableKind::ldt, 1, make_code_desc(kRing2, Bitness::x64, 0, UINT64_MAX));

  auto verdicts = run_verification(setup.machine, setup.handle);
  CHECK_FALSE(find_req(verdicts, Requirement::p1).holds);
  Verdict ctsr = find_req(verdicts, Requirement::ctsr);
  REQUIRE_FALSE(ctsr.holds);
  CHECK(replay_witness(setup.machine, setup.handle, ctsr));
}

TEST_CASE("M-SR1 catches a page left User-marked") {
  auto setup = make_canonical_setup();
  auto baseline = check_msr1(setup.machine, setup.handle);
  CHECK(baseline.holds);

  uint64_t victim = setup.handle.privuser_pages[3];
  setup.machine.pages.set_access(victim, PageAccess::user);

  Verdict v = check_msr1(setup.machine, setup.handle);
  REQUIRE_FALSE(v.holds);
  REQUIRE(v.probe);
  CHECK(page_of(v.probe->addr) == victim);
  CHECK(replay_witness(setup.machine, setup.handle, v));
}

TEST_CASE("M-SR1 is vacuous without PrivUser pages") {
  Machine m;
  LotrHandle h;
  CHECK(check_msr1(m, h).holds);
}

TEST_CASE("M-SR2 catches a widened limit plus kernel alias") {
  auto setup = make_canonical_setup();
  CHECK(check_msr2(setup.machine, setup.handle).holds);

  AddrRange win = setup.handle.cfg.window();
  setup.machine.inject_descriptor_raw(
      TableKind::ldt, 4, make_data_desc(kRing2, win.base, UINT64_MAX - win.base));
  constexpr uint64_t kAlias = 0x50000000;
  setup.machine.pages.map(page_of(kAlias),
                          PageFlags{PageAccess::supervisor, true, false});
  setup.handle.kernel_pages.insert(page_of(kAlias));

  Verdict v = check_msr2(setup.machine, setup.handle);
  REQUIRE_FALSE(v.holds);
  REQUIRE(v.probe);
  CHECK(replay_witness(setup.machine, setup.handle, v));

  auto clean = make_canonical_setup();
  CHECK_FALSE(replay_witness(clean.machine, clean.handle, v));
}

TEST_CASE("M-SR2 is vacuous without kernel pages") {
  Machine m;
  LotrHandle h;
  CHECK(check_msr2(m, h).holds);
}

TEST_CASE("constraint C catches a raw-injected x32 gate") {
  auto setup = make_canonical_setup();
  setup.machine.inject_descriptor_raw(
      TableKind::ldt, 6,
      GateDescriptor{setup.handle.pu_cs, layout::kEntryPoint, kRing2});

  auto ppc = check_p1_p2_c(setup.machine);
  CHECK_FALSE(ppc[2].holds);
}

TEST_CASE("the gate guard probe notices a stripped ring check") {
  auto setup = make_canonical_setup();
  CHECK(check_gate_guard(setup.machine, setup.handle).holds);

  auto& ops = setup.handle.enter_gate.ops;
  ops.erase(ops.begin());  // the caller-ring check is the first op

  Verdict v = check_gate_guard(setup.machine, setup.handle);
  REQUIRE_FALSE(v.holds);
  CHECK(replay_witness(setup.machine, setup.handle, v));
}

TEST_CASE("mutation suite detects all six shipped mutations") {
  auto setup = make_canonical_setup();
  auto report = run_mutation_suite(setup.machine, setup.handle);

  REQUIRE(report.rows.size() == 6);
  for (const auto& row : report.rows) {
    CAPTURE(row.name);
    CHECK(row.detected);
    CHECK_FALSE(row.flipped.empty());
  }
  CHECK(report.all_detected);

  // Expected minimal flips per mutation.
  auto flips = [&](const std::string& name, Requirement r) {
    for (const auto& row : report.rows)
      if (row.name == name)
        for (Requirement q : row.flipped)
          if (q == r) return true;
    return false;
  };
  CHECK(flips("drop-supervisor-mark", Requirement::msr1));
  CHECK(flips("add-ring2-x64-code", Requirement::ctsr));
  CHECK(flips("add-ring2-x64-code", Requirement::p2));
  CHECK(flips("demote-gate-ring", Requirement::p1));
  CHECK(flips("widen-privuser-limit", Requirement::msr2));
  CHECK(flips("gate-to-x32-injection", Requirement::c));
  CHECK(flips("remove-enter-gate-check", Requirement::gate));

  // The suite works on copies: the original machine still verifies.
  for (const auto& v : run_verification(setup.machine, setup.handle))
    CHECK(v.holds);
}

TEST_CASE("no mutation means an empty report") {
  auto setup = make_canonical_setup();
  auto verdicts = run_verification(setup.machine, setup.handle);
  int failing = 0;
  for (const auto& v : verdicts) failing += v.holds ? 0 : 1;
  CHECK(failing == 0);
}

TEST_CASE("empty LDT yields a single-node graph per code descriptor") {
  Machine m;
  m.install_descriptor(TableKind::gdt, 1,
                       make_code_desc(kRing3, Bitness::x64, 0, UINT64_MAX));
  TransferGraph g = build_transfer_graph(m);
  REQUIRE(g.nodes.size() == 1);
  CHECK(check_ctsr(g).holds);
}

TEST_CASE("check_ctsr agrees with the execution oracle on random tables") {
  std::mt19937_64 rng(0xc75a);
  int disagreements = 0;
  for (int t = 0; t < 200; ++t) {
    Machine m = oracles::build_machine(oracles::random_table(rng, 8));
    bool graph_says = check_ctsr(build_transfer_graph(m)).holds;
    bool exec_says = oracles::ctsr_holds_by_execution(m);
    CAPTURE(t);
    CHECK(graph_says == exec_says);
    if (graph_says != exec_says) ++disagreements;
  }
  REQUIRE(disagreements == 0);
}

TEST_CASE("multi-step CT-SR violations carry full witness paths") {
  // R2_x32 -> R3_x64 is legal; plant an extra gateless descriptor chain
  // where the violation is only reachable through an intermediate mode:
  // R2_x32 -> R2_x32' (second PrivUser segment) -> R1_x64 cannot happen
  // without escalation, so use a demoted target instead: R2_x32 ->
  // R2_x64 via an added segment reached from a second x32 segment.
  auto setup = make_canonical_setup();
  Machine& m = setup.machine;
  // A second x32 ring-2 segment and an x64 ring-2 segment.
  m.install_descriptor(TableKind::ldt, 7,
                       make_code_desc(kRing2, Bitness::x32, 0, 1ull << 32));
  m.install_descriptor(TableKind::ldt, 8,
                       make_code_desc(kRing2, Bitness::x64, 0, UINT64_MAX));

  Verdict v = check_ctsr(build_transfer_graph(m));
  REQUIRE_FALSE(v.holds);
  REQUIRE_FALSE(v.path.empty());
  CHECK(v.path.back().to.bitness == Bitness::x64);
  CHECK(v.path.back().to.ring < kRing3);
  CHECK(replay_witness(m, setup.handle, v));
}

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

#include "lotrsim/machine.hpp"
#include "oracles.hpp"

using namespace lotrsim;

namespace {

Machine machine_with_page(PageAccess access, bool writable, bool executable) {
  Machine m;
  m.pages.map(0x100, PageFlags{access, writable, executable});
  return m;
}

// Flat segments and a stack page so checked accesses can run at any ring.
Machine flat_machine() {
  Machine m;
  m.install_descriptor(TableKind::gdt, 1,
                       make_code_desc(kRing3, Bitness::x64, 0, UINT64_MAX));
  m.install_descriptor(TableKind::gdt, 2, make_data_desc(kRing3, 0, UINT64_MAX));
  m.install_descriptor(TableKind::gdt, 3,
                       make_code_desc(kRing2, Bitness::x32, 0, 1ull << 32));
  m.map_range(0x10000, 4 * kPageSize, PageFlags{PageAccess::user, true, false});
  m.pose(SegmentSelector{1, TableKind::gdt, kRing3},
         SegmentSelector{2, TableKind::gdt, kRing3},
         SegmentSelector{2, TableKind::gdt, kRing3}, 0x12000, 0);
  return m;
}

}  // namespace

TEST_CASE("access matrix matches the transcribed table") {
  // Exhaustive over ring x page-class x operation x smep x smap.
  for (unsigned ring = 0; ring <= 3; ++ring) {
    for (bool sup : {false, true}) {
      for (bool smep : {false, true}) {
        for (bool smap : {false, true}) {
          Machine m = machine_with_page(
              sup ? PageAccess::supervisor : PageAccess::user,
              /*writable=*/true, /*executable=*/true);
          m.smep = smep;
          m.smap = smap;

          CAPTURE(ring, sup, smep, smap);
          bool read_ok = !m.check_data_access(Ring{ring}, 0x100, false);
          bool write_ok = !m.check_data_access(Ring{ring}, 0x100, true);
          bool exec_ok = !m.check_exec(Ring{ring}, 0x100);
          bool priv_ok = !Machine::privileged_instruction_check(Ring{ring});

          CHECK(read_ok ==
                oracles::data_access_allowed(ring, sup, false, smap, true));
          CHECK(write_ok ==
                oracles::data_access_allowed(ring, sup, true, smap, true));
          CHECK(exec_ok == oracles::exec_allowed(ring, sup, smep, true));
          CHECK(priv_ok == oracles::kPrivInstrAllowed[ring]);
        }
      }
    }
  }
}

TEST_CASE("write requires the writable flag, exec the executable flag") {
  Machine m = machine_with_page(PageAccess::user, false, false);
  CHECK_FALSE(m.check_data_access(kRing3, 0x100, false));
  auto w = m.check_data_access(kRing3, 0x100, true);
  REQUIRE(w);
  CHECK(w->kind == FaultKind::page_fault);
  auto x = m.check_exec(kRing3, 0x100);
  REQUIRE(x);
  CHECK(x->kind == FaultKind::page_fault);
}

TEST_CASE("unmapped pages reject every access") {
  Machine m;
  CHECK(m.check_data_access(kRing0, 0x5, false)->kind == FaultKind::unmapped);
  CHECK(m.check_exec(kRing0, 0x5)->kind == FaultKind::unmapped);
}

TEST_CASE("table 1 spot values") {
  Machine m = machine_with_page(PageAccess::supervisor, true, true);
  // Ring3 may not touch supervisor pages; Ring2 may.
  CHECK(m.check_data_access(kRing3, 0x100, false)->kind ==
        FaultKind::page_fault);
  CHECK_FALSE(m.check_data_access(kRing2, 0x100, false));
  // SMAP blocks ring 0-2 data access to user pages.
  Machine u = machine_with_page(PageAccess::user, true, true);
  u.smap = true;
  CHECK(u.check_data_access(kRing1, 0x100, false)->kind ==
        FaultKind::page_fault);
  CHECK_FALSE(u.check_data_access(kRing3, 0x100, false));
  // SMEP blocks ring 0-2 execution of user pages; ring 3 still runs them.
  u.smep = true;
  CHECK(u.check_exec(kRing2, 0x100)->kind == FaultKind::page_fault);
  CHECK_FALSE(u.check_exec(kRing3, 0x100));
  // Privileged instructions are ring 0 only.
  CHECK_FALSE(Machine::privileged_instruction_check(kRing0));
  CHECK(Machine::privileged_instruction_check(kRing1)->kind ==
        FaultKind::general_protection);
  CHECK(Machine::privileged_instruction_check(kRing3)->kind ==
        FaultKind::general_protection);
}

TEST_CASE("effective address truncates and window-checks in x32") {
  SegmentDescriptor seg = make_data_desc(kRing2, 0x10000000, 0x30000000);

  // A kernel address truncates below 4 GiB and lands outside the window.
  auto r = Machine::effective_address(0xffff800000001000ull, seg, Bitness::x32);
  CHECK_FALSE(r.ok());

  // Flat pass-through in x64.
  auto f = Machine::effective_address(0x402000, seg, Bitness::x64);
  REQUIRE(f.ok());
  CHECK(f.value() == 0x402000);

  // In-window x32 access resolves to the truncated address itself.
  auto in = Machine::effective_address(0xaaaa000010001000ull, seg, Bitness::x32);
  REQUIRE(in.ok());
  CHECK(in.value() == 0x10001000);

  // Beyond the limit.
  auto out = Machine::effective_address(0x40000000, seg, Bitness::x32);
  CHECK_FALSE(out.ok());
  CHECK(out.fault().kind == FaultKind::general_protection);
}

TEST_CASE("effective address agrees with the independent recomputation") {
  std::mt19937_64 rng(0x5eed5eedull);
  std::uniform_int_distribution<uint64_t> any;
  for (int i = 0; i < 5000; ++i) {
    uint64_t base = any(rng) & 0xffffffff;
    uint64_t limit = any(rng) & 0xffffffff;
    uint64_t addr = any(rng);
    SegmentDescriptor seg = make_data_desc(kRing2, base, limit);
    for (Bitness b : {Bitness::x32, Bitness::x64}) {
      auto got = Machine::effective_address(addr, seg, b);
      auto want =
          oracles::effective_address(addr, base, limit, b == Bitness::x32);
      CAPTURE(base, limit, addr, b == Bitness::x32);
      REQUIRE(got.ok() == want.ok);
      if (want.ok) CHECK(got.value() == want.linear);
    }
  }
}

TEST_CASE("x32 addresses always land below 4 GiB") {
  SegmentDescriptor flat = make_data_desc(kRing2, 0, 1ull << 32);
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<uint64_t> any;
  for (int i = 0; i < 5000; ++i) {
    auto r = Machine::effective_address(any(rng), flat, Bitness::x32);
    REQUIRE(r.ok());
    CHECK(r.value() < (1ull << 32));
  }
  for (uint64_t a : {0ull, 0xffffffffull, 0x100000000ull,
                     0xffffffffffffffffull}) {
    auto r = Machine::effective_address(a, flat, Bitness::x32);
    if (r.ok()) CHECK(r.value() < (1ull << 32));
  }
}

TEST_CASE("selector resolution errors") {
  Machine m = flat_machine();

  auto null_sel = m.resolve_selector(SegmentSelector{0, TableKind::gdt, kRing0});
  REQUIRE_FALSE(null_sel.ok());
  CHECK(null_sel.fault().kind == FaultKind::invalid_selector);

  auto oob = m.resolve_selector(SegmentSelector{200, TableKind::ldt, kRing0});
  REQUIRE_FALSE(oob.ok());
  CHECK(oob.fault().kind == FaultKind::invalid_selector);

  auto empty = m.resolve_selector(SegmentSelector{9, TableKind::ldt, kRing0});
  REQUIRE_FALSE(empty.ok());
  CHECK(empty.fault().kind == FaultKind::invalid_selector);
}

TEST_CASE("descriptor install validates slots and gates") {
  Machine m = flat_machine();

  // Slot 0 is the null selector.
  auto f0 = m.install_descriptor(TableKind::ldt, 0,
                                 make_data_desc(kRing3, 0, 0x1000));
  REQUIRE(f0);
  CHECK(f0->kind == FaultKind::invalid_selector);

  // A gate must target a 64-bit code segment.
  auto ok = m.install_descriptor(
      TableKind::ldt, 5,
      GateDescriptor{SegmentSelector{1, TableKind::gdt, kRing0}, 0x1234,
                     kRing3});
  CHECK_FALSE(ok);

  auto x32 = m.install_descriptor(
      TableKind::ldt, 6,
      GateDescriptor{SegmentSelector{3, TableKind::gdt, kRing0}, 0x1234,
                     kRing3});
  REQUIRE(x32);
  CHECK(x32->kind == FaultKind::invalid_gate);

  auto data_target = m.install_descriptor(
      TableKind::ldt, 7,
      GateDescriptor{SegmentSelector{2, TableKind::gdt, kRing0}, 0x1234,
                     kRing3});
  REQUIRE(data_target);
  CHECK(data_target->kind == FaultKind::invalid_gate);

  auto overflow = m.install_descriptor(TableKind::ldt, 8,
                                       make_data_desc(kRing3, 0x100, UINT64_MAX));
  REQUIRE(overflow);
}

TEST_CASE("selector pack/unpack round-trips") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    SegmentSelector s;
    s.index = static_cast<uint16_t>(rng() % DescriptorTable::kCapacity);
    s.ti = rng() % 2 ? TableKind::ldt : TableKind::gdt;
    s.rpl = Ring{static_cast<unsigned>(rng() % 4)};
    CHECK(SegmentSelector::unpack(s.pack()) == s);
  }
}

TEST_CASE("multi-page reads never leak partial bytes") {
  Machine m = flat_machine();
  // Two adjacent pages: the first user, the second supervisor.
  m.pages.map(0x20, PageFlags{PageAccess::user, true, false});
  m.pages.map(0x21, PageFlags{PageAccess::supervisor, true, false});
  std::vector<uint8_t> fill(2 * kPageSize, 0xab);
  m.poke(0x20 * kPageSize, fill.data(), fill.size());

  auto r = m.read_mem(0x21 * kPageSize - 16, 32);
  REQUIRE_FALSE(r.ok());
  CHECK(r.fault().kind == FaultKind::page_fault);

  // The same span is fully readable at ring 2.
  Machine m2 = flat_machine();
  m2.pages.map(0x20, PageFlags{PageAccess::user, true, false});
  m2.pages.map(0x21, PageFlags{PageAccess::supervisor, true, false});
  m2.poke(0x20 * kPageSize, fill.data(), fill.size());
  m2.pose(SegmentSelector{3, TableKind::gdt, kRing2},
          SegmentSelector{2, TableKind::gdt, kRing3},
          SegmentSelector{2, TableKind::gdt, kRing3}, 0x12000, 0);
  auto r2 = m2.read_mem(0x21 * kPageSize - 16, 32);
  REQUIRE(r2.ok());
  CHECK(r2.value() == std::vector<uint8_t>(32, 0xab));

  // Reads of unmapped memory report Unmapped.
  Machine m3 = flat_machine();
  auto r3 = m3.read_mem(0x900000, 8);
  REQUIRE_FALSE(r3.ok());
  CHECK(r3.fault().kind == FaultKind::unmapped);
}

TEST_CASE("faulted machines are inert until reset") {
  Machine m = flat_machine();
  auto first = m.read_mem(0x900000, 8);  // unmapped -> fault
  REQUIRE_FALSE(first.ok());
  REQUIRE_FALSE(m.running());

  // Any further operation returns the stored fault unchanged.
  auto second = m.read_mem(0x10000, 8);
  REQUIRE_FALSE(second.ok());
  CHECK(second.fault().kind == first.fault().kind);
  CHECK(second.fault().detail == first.fault().detail);

  uint8_t b = 1;
  auto w = m.write_mem(0x10000, &b, 1);
  REQUIRE(w);
  CHECK(w->kind == first.fault().kind);

  m.clear_fault();
  CHECK(m.running());
  CHECK(m.read_mem(0x10000, 8).ok());
}

TEST_CASE("supervisor marking is idempotent and revertible") {
  Machine m = flat_machine();
  m.map_range(0x40000, 4 * kPageSize, PageFlags{PageAccess::user, true, false});

  // Snapshot for the revert comparison.
  auto before = m.pages.entries();

  REQUIRE_FALSE(m.set_page_supervisor(0x40000, 4 * kPageSize));
  for (uint64_t p = page_of(0x40000); p <= page_of(0x40000 + 4 * kPageSize - 1);
       ++p)
    CHECK(m.pages.flags(p)->access == PageAccess::supervisor);
  CHECK(m.pages.revert_list.size() == 4);

  // Marking an already-supervisor page adds nothing to the revert list.
  REQUIRE_FALSE(m.set_page_supervisor(0x40000, kPageSize));
  CHECK(m.pages.revert_list.size() == 4);

  // Ring3 touches fault while marked.
  auto r = m.read_mem(0x40000, 1);
  REQUIRE_FALSE(r.ok());
  m.clear_fault();

  m.revert_supervisor_marks();
  CHECK(m.pages.entries() == before);
  CHECK(m.read_mem(0x40000, 1).ok());

  // Unmapped ranges are rejected outright.
  auto f = m.set_page_supervisor(0x80000000, kPageSize);
  REQUIRE(f);
  CHECK(f->kind == FaultKind::unmapped);
}

TEST_CASE("cpl derives from cs only") {
  Machine m = flat_machine();
  CHECK(m.cpl() == kRing3);
  m.pose(SegmentSelector{3, TableKind::gdt, kRing2},
         SegmentSelector{2, TableKind::gdt, kRing3},
         SegmentSelector{2, TableKind::gdt, kRing3}, 0x12000, 0);
  CHECK(m.cpl() == kRing2);
  CHECK(m.bitness() == Bitness::x32);
}

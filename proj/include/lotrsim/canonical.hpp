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

#ifndef LOTRSIM_CANONICAL_HPP
#define LOTRSIM_CANONICAL_HPP

#include "lotrsim/lotr.hpp"

// Canonical address-space layout and machine construction. The kernel
// sits in the negative half far above the 32-bit space; the PrivUser
// carve-out lies inside 32-bit reach so the x32 PrivUser mode can run,
// with the normal user regions around it.

namespace lotrsim {
namespace layout {

inline constexpr uint64_t kKernelBase = 0xffff800000000000ull;
inline constexpr uint64_t kKernelTextBase = kKernelBase;            // 4 pages, x
inline constexpr uint64_t kKernelDataBase = kKernelBase + 0x4000;   // 4 pages, rw
inline constexpr uint64_t kEnterGateAddr = kKernelBase + 0x10000;
inline constexpr uint64_t kExitGateAddr = kKernelBase + 0x11000;
inline constexpr uint64_t kGateStackTop = kKernelBase + 0x20000;    // 4 pages below

inline constexpr uint64_t kUserCodeBase = 0x00400000;   // 2 pages, x
inline constexpr uint64_t kUserDataBase = 0x00500000;   // 4 pages, rw
inline constexpr uint64_t kUserStackTop = 0x60010000;   // 4 pages below, rw

inline constexpr uint64_t kPuCodeBase = 0x10000000;     // 4 pages, x
inline constexpr uint64_t kPuDataBase = 0x11000000;     // 4 pages, rw
inline constexpr uint64_t kPuStackTop = 0x12004000;     // 4 pages below, rw
inline constexpr uint64_t kPuHeapBase = 0x13000000;     // 16 pages, rw
inline constexpr uint64_t kArgPageBase = 0x3ffff000;    // 1 page, User rw

inline constexpr uint64_t kEntryPoint = kPuCodeBase;

// Demo password store inside the PrivUser data range.
inline constexpr uint64_t kSecretAddr = kPuDataBase;
inline constexpr uint64_t kSecretCapacity = 256;

}  // namespace layout

inline LotrConfig canonical_config() {
  LotrConfig cfg;
  cfg.privuser_code = {layout::kPuCodeBase, 4 * kPageSize};
  cfg.privuser_data = {layout::kPuDataBase, 4 * kPageSize};
  cfg.privuser_stack = {layout::kPuStackTop - 4 * kPageSize, 4 * kPageSize};
  cfg.privuser_heap = {layout::kPuHeapBase, 16 * kPageSize};
  cfg.arg_page = {layout::kArgPageBase, kPageSize};
  cfg.entry_point = layout::kEntryPoint;
  cfg.gate_stack_top = layout::kGateStackTop;
  cfg.enter_gate_addr = layout::kEnterGateAddr;
  cfg.exit_gate_addr = layout::kExitGateAddr;
  return cfg;
}

struct CanonicalSetup {
  Machine machine;
  InitLock lock;
  LotrHandle handle;

  SegmentSelector kernel_cs{1, TableKind::gdt, kRing0};
  SegmentSelector kernel_ds{2, TableKind::gdt, kRing0};
  SegmentSelector user_cs{3, TableKind::gdt, kRing3};
  SegmentSelector user_ds{4, TableKind::gdt, kRing3};

  // Places the machine back in the normal user-mode context.
  void pose_user() {
    machine.pose(user_cs, user_ds, user_ds, layout::kUserStackTop - 0x100,
                 layout::kUserCodeBase);
  }

  // Places the machine in PrivUser mode, as if mid-dispatch.
  void pose_privuser() {
    machine.pose(handle.pu_cs, handle.pu_ds, handle.pu_ds,
                 layout::kPuStackTop - 0x100, handle.cfg.entry_point);
  }
};

// Builds the machine the whole artifact revolves around: canonical page
// map, flat GDT segments for kernel and user, the Table-2 LDT via
// init_lotr, posed in user mode.
inline CanonicalSetup make_canonical_setup() {
  CanonicalSetup s;
  Machine& m = s.machine;

  const PageFlags sup_x{PageAccess::supervisor, false, true};
  const PageFlags sup_rw{PageAccess::supervisor, true, false};
  const PageFlags usr_x{PageAccess::user, false, true};
  const PageFlags usr_rw{PageAccess::user, true, false};

  m.map_range(layout::kKernelTextBase, 4 * kPageSize, sup_x);
  m.map_range(layout::kKernelDataBase, 4 * kPageSize, sup_rw);
  m.map_range(layout::kGateStackTop - 4 * kPageSize, 4 * kPageSize, sup_rw);

  m.map_range(layout::kUserCodeBase, 2 * kPageSize, usr_x);
  m.map_range(layout::kUserDataBase, 4 * kPageSize, usr_rw);
  m.map_range(layout::kUserStackTop - 4 * kPageSize, 4 * kPageSize, usr_rw);

  // PrivUser ranges start out User; init_lotr marks them Supervisor.
  m.map_range(layout::kPuCodeBase, 4 * kPageSize, usr_x);
  m.map_range(layout::kPuDataBase, 4 * kPageSize, usr_rw);
  m.map_range(layout::kPuStackTop - 4 * kPageSize, 4 * kPageSize, usr_rw);
  m.map_range(layout::kPuHeapBase, 16 * kPageSize, usr_rw);
  m.map_range(layout::kArgPageBase, kPageSize, usr_rw);

  const uint64_t flat = UINT64_MAX;
  m.install_descriptor(TableKind::gdt, 1,
                       make_code_desc(kRing0, Bitness::x64, 0, flat));
  m.install_descriptor(TableKind::gdt, 2, make_data_desc(kRing0, 0, flat));
  m.install_descriptor(TableKind::gdt, 3,
                       make_code_desc(kRing3, Bitness::x64, 0, flat));
  m.install_descriptor(TableKind::gdt, 4, make_data_desc(kRing3, 0, flat));

  auto h = init_lotr(m, canonical_config(), s.lock);
  assert(h.ok());
  s.handle = std::move(h.value());
  s.pose_user();
  return s;
}

}  // namespace lotrsim

#endif  // LOTRSIM_CANONICAL_HPP

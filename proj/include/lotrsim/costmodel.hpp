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

#ifndef LOTRSIM_COSTMODEL_HPP
#define LOTRSIM_COSTMODEL_HPP

#include <set>
#include <sstream>
#include <string>
#include <variant>

#include "lotrsim/scenario.hpp"

// Abstract step-cost comparison of three in-process protection schemes
// running the same privcall workload:
//
//   privcall        the simulated chain, measured from machine counters
//   mprotect-pair   unprotect -> call -> reprotect, charged as two
//                   page-table flag-flip walks over the protected data
//                   range plus the two syscall round trips
//   rpc             serialize, two inter-process messages, deserialize,
//                   plus the socket syscall round trips
//
// Results are step counts in documented units, never cycles. The handler
// body itself is identical across mechanisms and excluded.

namespace lotrsim {

struct CostWeights {
  double ring_transition = 30;
  double descriptor_load = 10;
  double context_save = 10;
  double page_flip = 150;  // per page
  double ipc_message = 800;

  CostWeights scaled(double f) const {
    CostWeights w = *this;
    w.ring_transition *= f;
    w.descriptor_load *= f;
    w.context_save *= f;
    w.page_flip *= f;
    w.ipc_message *= f;
    return w;
  }

  bool positive() const {
    return ring_transition > 0 && descriptor_load > 0 && context_save > 0 &&
           page_flip > 0 && ipc_message > 0;
  }

  bool set_by_name(const std::string& name, double v) {
    if (v <= 0) return false;
    if (name == "ring-transition") ring_transition = v;
    else if (name == "descriptor-load") descriptor_load = v;
    else if (name == "context-save") context_save = v;
    else if (name == "page-flip") page_flip = v;
    else if (name == "ipc-message") ipc_message = v;
    else return false;
    return true;
  }
};

struct MechanismRow {
  std::string name;
  double session = 0;   // one-time setup cost
  double per_call = 0;
  uint64_t calls = 0;
  double total = 0;
};

struct CostTable {
  std::array<MechanismRow, 3> rows;  // privcall, mprotect-pair, rpc

  bool ordering_holds() const {
    return rows[0].total < rows[1].total && rows[1].total < rows[2].total;
  }

  std::string render() const {
    std::ostringstream os;
    os << "mechanism      session      per-call     calls  total\n";
    for (const auto& r : rows) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-14s %-12g %-12g %-6llu %g\n",
                    r.name.c_str(), r.session, r.per_call,
                    static_cast<unsigned long long>(r.calls), r.total);
      os << buf;
    }
    return os.str();
  }
};

// Runs the workload's privcalls on a canonical machine and prices the
// three mechanisms. The workload may contain setup directives and
// PRIVCALLs only.
inline std::variant<CostTable, std::string> compare_mechanisms(
    const Scenario& workload, const CostWeights& w = CostWeights{}) {
  if (!w.positive()) return std::string("weights must be strictly positive");

  for (const Directive& d : workload.directives) {
    if (d.as<AttackReadDirective>() || d.as<AttackJumpDirective>() ||
        d.as<AttackLretDirective>())
      return "line " + std::to_string(d.line) +
             ": workload must contain only privcall-able operations";
  }

  CanonicalSetup setup = make_canonical_setup();
  Machine& m = setup.machine;
  LotrHandle& h = setup.handle;

  auto weigh = [&](const OpCounters& c) {
    return c.ring_transitions * w.ring_transition +
           c.descriptor_loads * w.descriptor_load +
           c.context_ops * w.context_save;
  };
  double session_priv = weigh(m.counters);

  std::set<uint64_t> secret_pages;
  uint64_t staging = h.cfg.arg_page.base;
  uint64_t calls = 0;

  for (const Directive& d : workload.directives) {
    if (const auto* map = d.as<MapDirective>()) {
      m.map_range(map->addr, map->len, map->flags);
    } else if (const auto* sec = d.as<SecretDirective>()) {
      m.poke(sec->addr, sec->bytes.data(), sec->bytes.size());
      for (uint64_t p = page_of(sec->addr);
           p <= page_of(sec->addr + sec->bytes.size() - 1); ++p)
        secret_pages.insert(p);
    } else if (const auto* reg = d.as<RegisterDirective>()) {
      auto handler = builtin_handler(reg->name);
      if (!handler)
        return "line " + std::to_string(d.line) + ": unknown routine " +
               reg->name;
      register_privcall(h, reg->name, reg->arity, *handler);
    } else if (d.as<CloseRegistryDirective>()) {
      close_privcall_registry(h);
    } else if (const auto* pc = d.as<PrivcallDirective>()) {
      std::vector<uint64_t> args;
      for (const PrivcallArg& a : pc->args) {
        if (!a.is_string) {
          args.push_back(a.value);
          continue;
        }
        std::vector<uint8_t> buf(a.text.begin(), a.text.end());
        buf.push_back(0);
        if (staging + buf.size() > h.cfg.arg_page.end())
          return std::string("argument page exhausted");
        m.write_mem(staging, buf.data(), buf.size());
        args.push_back(staging);
        staging = (staging + buf.size() + 15) & ~15ull;
      }
      privcall(m, h, pc->nr, args);
      m.clear_fault();
      ++calls;
    }
    // EXPECT lines are pairing syntax; nothing to price.
  }

  double total_priv = weigh(m.counters);
  double per_call_priv =
      calls ? (total_priv - session_priv) / static_cast<double>(calls) : 0;

  // Protected data range for the page-table scheme: the pages holding
  // declared secrets, at least one page.
  double pages = static_cast<double>(std::max<size_t>(1, secret_pages.size()));
  double session_mpro = pages * w.page_flip;  // initial protection walk
  double per_call_mpro =
      2 * pages * w.page_flip + 4 * w.ring_transition;  // two mprotect calls

  double session_rpc = 2 * w.ipc_message;  // connection handshake
  double per_call_rpc =
      2 * w.ipc_message + 2 * w.context_save + 4 * w.ring_transition;

  CostTable t;
  t.rows[0] = {"privcall", session_priv, per_call_priv, calls, total_priv};
  t.rows[1] = {"mprotect-pair", session_mpro, per_call_mpro, calls,
               session_mpro + per_call_mpro * static_cast<double>(calls)};
  t.rows[2] = {"rpc", session_rpc, per_call_rpc, calls,
               session_rpc + per_call_rpc * static_cast<double>(calls)};
  return t;
}

}  // namespace lotrsim

#endif  // LOTRSIM_COSTMODEL_HPP

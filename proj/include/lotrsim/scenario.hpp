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

#ifndef LOTRSIM_SCENARIO_HPP
#define LOTRSIM_SCENARIO_HPP

#include <cctype>
#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "lotrsim/canonical.hpp"
#include "lotrsim/lotr.hpp"
#include "lotrsim/transfer.hpp"

// Line-oriented scenario DSL and its run engine.
//
// One directive per line, `#` starts a comment, tokens are separated by
// whitespace, numbers are decimal or 0x-prefixed hex, string literals
// are double-quoted. Every PRIVCALL/ATTACK-* directive must be followed
// by exactly one EXPECT.
//
//   MAP <addr> <len> <user|supervisor> [r|rw|rx|rwx]
//   SECRET <addr> <"text" | hexbytes>
//   REGISTER <name> <arity>
//   CLOSE-REGISTRY
//   PRIVCALL <nr> [arg...]          arg = number | "text" staged on the
//                                   argument page, passed by address
//   ATTACK-READ <addr> <len>
//   ATTACK-JUMP <gdt|ldt>:<slot> <offset>
//   ATTACK-LRET <ring>
//   SET-FLAG <smep|smap> <on|off>
//   EXPECT OK | RAX <value> | ERROR | FAULT <kind>
//
// Config files for `verify --config` reuse the same grammar plus:
//
//   CANONICAL
//   SEGMENT <gdt|ldt>:<slot> <code|data> <ring> <x32|x64|-> <base> <limit>
//   GATE     <gdt|ldt>:<slot> <gdt|ldt>:<target> <offset> <rmpl>
//   GATE-RAW <gdt|ldt>:<slot> <gdt|ldt>:<target> <offset> <rmpl>

namespace lotrsim {

// ---------------------------------------------------------------------------
// Directives

struct MapDirective {
  uint64_t addr = 0, len = 0;
  PageFlags flags;
};

struct SecretDirective {
  uint64_t addr = 0;
  std::vector<uint8_t> bytes;
};

struct RegisterDirective {
  std::string name;
  unsigned arity = 0;
};

struct CloseRegistryDirective {};

struct PrivcallArg {
  bool is_string = false;
  uint64_t value = 0;
  std::string text;
};

struct PrivcallDirective {
  uint64_t nr = 0;
  std::vector<PrivcallArg> args;
};

struct AttackReadDirective {
  uint64_t addr = 0, len = 0;
};

struct AttackJumpDirective {
  TableKind table = TableKind::ldt;
  uint16_t slot = 0;
  uint64_t offset = 0;
};

struct AttackLretDirective {
  Ring ring = kRing0;
};

struct SetFlagDirective {
  bool is_smap = false;  // otherwise smep
  bool value = false;
};

struct ExpectDirective {
  enum class Kind : uint8_t { ok, rax, error, fault } kind = Kind::ok;
  uint64_t value = 0;
  FaultKind fault = FaultKind::general_protection;
};

struct CanonicalDirective {};

struct SegmentDirective {
  TableKind table = TableKind::ldt;
  uint16_t slot = 0;
  SegmentDescriptor desc;
};

struct GateDirective {
  TableKind table = TableKind::ldt;
  uint16_t slot = 0;
  GateDescriptor desc;
  bool raw = false;
};

using DirectivePayload =
    std::variant<MapDirective, SecretDirective, RegisterDirective,
                 CloseRegistryDirective, PrivcallDirective,
                 AttackReadDirective, AttackJumpDirective,
                 AttackLretDirective, SetFlagDirective, ExpectDirective,
                 CanonicalDirective, SegmentDirective, GateDirective>;

struct Directive {
  int line = 0;
  std::string raw;
  DirectivePayload payload;

  template <typename T>
  const T* as() const {
    return std::get_if<T>(&payload);
  }
  bool is_action() const {
    return as<PrivcallDirective>() || as<AttackReadDirective>() ||
           as<AttackJumpDirective>() || as<AttackLretDirective>();
  }
};

struct Scenario {
  std::vector<Directive> directives;
};

struct ParseError {
  int line = 0;
  int col = 0;
  std::string message;

  std::string describe() const {
    return "line " + std::to_string(line) + ":" + std::to_string(col) + ": " +
           message;
  }
};

// ---------------------------------------------------------------------------
// Parser

namespace parse_detail {

struct Token {
  std::string text;
  int col = 0;
  bool is_string = false;
};

inline std::optional<std::vector<Token>> tokenize(std::string_view line,
                                                  int lineno,
                                                  ParseError& err) {
  std::vector<Token> out;
  size_t i = 0;
  while (i < line.size()) {
    if (std::isspace(static_cast<unsigned char>(line[i]))) {
      ++i;
      continue;
    }
    if (line[i] == '#') break;
    int col = static_cast<int>(i) + 1;
    if (line[i] == '"') {
      size_t j = line.find('"', i + 1);
      if (j == std::string_view::npos) {
        err = ParseError{lineno, col, "unterminated string literal"};
        return std::nullopt;
      }
      out.push_back(Token{std::string(line.substr(i + 1, j - i - 1)), col,
                          /*is_string=*/true});
      i = j + 1;
      continue;
    }
    size_t j = i;
    while (j < line.size() &&
           !std::isspace(static_cast<unsigned char>(line[j])) &&
           line[j] != '#')
      ++j;
    out.push_back(Token{std::string(line.substr(i, j - i)), col, false});
    i = j;
  }
  return out;
}

inline bool parse_u64(const std::string& s, uint64_t& out) {
  if (s.empty()) return false;
  size_t pos = 0;
  try {
    out = std::stoull(s, &pos, 0);
  } catch (...) {
    return false;
  }
  return pos == s.size();
}

inline bool parse_selector(const std::string& s, TableKind& tbl,
                           uint16_t& slot) {
  size_t colon = s.find(':');
  if (colon == std::string::npos) return false;
  std::string t = s.substr(0, colon);
  if (t == "gdt" || t == "GDT")
    tbl = TableKind::gdt;
  else if (t == "ldt" || t == "LDT")
    tbl = TableKind::ldt;
  else
    return false;
  uint64_t v = 0;
  if (!parse_u64(s.substr(colon + 1), v) || v >= DescriptorTable::kCapacity)
    return false;
  slot = static_cast<uint16_t>(v);
  return true;
}

inline bool parse_hex_bytes(const std::string& s, std::vector<uint8_t>& out) {
  if (s.size() < 2 || s.size() % 2 != 0) return false;
  for (size_t i = 0; i < s.size(); i += 2) {
    auto nib = [](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'a' && c <= 'f') return c - 'a' + 10;
      if (c >= 'A' && c <= 'F') return c - 'A' + 10;
      return -1;
    };
    int hi = nib(s[i]), lo = nib(s[i + 1]);
    if (hi < 0 || lo < 0) return false;
    out.push_back(static_cast<uint8_t>(hi << 4 | lo));
  }
  return true;
}

}  // namespace parse_detail

inline std::variant<Scenario, ParseError> parse_scenario(
    std::string_view text) {
  using namespace parse_detail;
  Scenario scn;
  ParseError err;
  int lineno = 0;
  size_t pos = 0;

  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? text.size() - pos
                                                      : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;

    auto tokens_opt = tokenize(line, lineno, err);
    if (!tokens_opt) return err;
    auto& tk = *tokens_opt;
    if (tk.empty()) continue;

    auto fail = [&](int col, std::string msg) {
      return ParseError{lineno, col, std::move(msg)};
    };
    auto need = [&](size_t n) { return tk.size() == n; };
    auto num = [&](size_t idx, uint64_t& out) {
      return idx < tk.size() && !tk[idx].is_string &&
             parse_u64(tk[idx].text, out);
    };

    Directive d;
    d.line = lineno;
    d.raw = std::string(line.substr(0, line.find('#')));
    while (!d.raw.empty() && std::isspace(static_cast<unsigned char>(
                                 d.raw.back())))
      d.raw.pop_back();

    const std::string& kw = tk[0].text;

    if (kw == "MAP") {
      MapDirective m;
      if (tk.size() < 4 || tk.size() > 5 || !num(1, m.addr) || !num(2, m.len))
        return fail(tk[0].col, "usage: MAP <addr> <len> <user|supervisor> [perms]");
      if (tk[3].text == "user")
        m.flags.access = PageAccess::user;
      else if (tk[3].text == "supervisor")
        m.flags.access = PageAccess::supervisor;
      else
        return fail(tk[3].col, "expected user or supervisor");
      std::string perms = tk.size() == 5 ? tk[4].text : "rw";
      m.flags.writable = perms.find('w') != std::string::npos;
      m.flags.executable = perms.find('x') != std::string::npos;
      if (m.len == 0) return fail(tk[2].col, "zero-length MAP");
      d.payload = m;
    } else if (kw == "SECRET") {
      SecretDirective s;
      if (!need(3) || !num(1, s.addr))
        return fail(tk[0].col, "usage: SECRET <addr> <\"text\"|hexbytes>");
      if (tk[2].is_string)
        s.bytes.assign(tk[2].text.begin(), tk[2].text.end());
      else if (!parse_hex_bytes(tk[2].text, s.bytes))
        return fail(tk[2].col, "expected a string literal or hex bytes");
      if (s.bytes.empty()) return fail(tk[2].col, "empty secret");
      d.payload = s;
    } else if (kw == "REGISTER") {
      RegisterDirective r;
      uint64_t arity = 0;
      if (!need(3) || tk[1].is_string || !num(2, arity))
        return fail(tk[0].col, "usage: REGISTER <name> <arity>");
      r.name = tk[1].text;
      r.arity = static_cast<unsigned>(arity);
      d.payload = r;
    } else if (kw == "CLOSE-REGISTRY") {
      if (!need(1)) return fail(tk[0].col, "CLOSE-REGISTRY takes no operands");
      d.payload = CloseRegistryDirective{};
    } else if (kw == "PRIVCALL") {
      PrivcallDirective p;
      if (tk.size() < 2 || !num(1, p.nr))
        return fail(tk[0].col, "usage: PRIVCALL <nr> [arg...]");
      if (tk.size() > 2 + kMaxPrivcallArity)
        return fail(tk[0].col, "more than six privcall arguments");
      for (size_t i = 2; i < tk.size(); ++i) {
        PrivcallArg a;
        if (tk[i].is_string) {
          a.is_string = true;
          a.text = tk[i].text;
        } else if (!parse_u64(tk[i].text, a.value)) {
          return fail(tk[i].col, "bad privcall argument");
        }
        p.args.push_back(std::move(a));
      }
      d.payload = p;
    } else if (kw == "ATTACK-READ") {
      AttackReadDirective a;
      if (!need(3) || !num(1, a.addr) || !num(2, a.len) || a.len == 0)
        return fail(tk[0].col, "usage: ATTACK-READ <addr> <len>");
      d.payload = a;
    } else if (kw == "ATTACK-JUMP") {
      AttackJumpDirective a;
      if (!need(3) || !parse_selector(tk[1].text, a.table, a.slot) ||
          !num(2, a.offset))
        return fail(tk[0].col, "usage: ATTACK-JUMP <gdt|ldt>:<slot> <offset>");
      d.payload = a;
    } else if (kw == "ATTACK-LRET") {
      AttackLretDirective a;
      uint64_t ring = 0;
      if (!need(2) || !num(1, ring) || ring > 3)
        return fail(tk[0].col, "usage: ATTACK-LRET <ring 0..3>");
      a.ring = Ring{static_cast<unsigned>(ring)};
      d.payload = a;
    } else if (kw == "SET-FLAG") {
      SetFlagDirective f;
      if (!need(3)) return fail(tk[0].col, "usage: SET-FLAG <smep|smap> <on|off>");
      if (tk[1].text == "smap")
        f.is_smap = true;
      else if (tk[1].text == "smep")
        f.is_smap = false;
      else
        return fail(tk[1].col, "expected smep or smap");
      const std::string& v = tk[2].text;
      if (v == "on" || v == "true" || v == "1")
        f.value = true;
      else if (v == "off" || v == "false" || v == "0")
        f.value = false;
      else
        return fail(tk[2].col, "expected on or off");
      d.payload = f;
    } else if (kw == "EXPECT") {
      ExpectDirective e;
      if (tk.size() < 2) return fail(tk[0].col, "EXPECT needs an outcome");
      const std::string& what = tk[1].text;
      if (what == "OK" && need(2)) {
        e.kind = ExpectDirective::Kind::ok;
      } else if (what == "RAX" && need(3) && num(2, e.value)) {
        e.kind = ExpectDirective::Kind::rax;
      } else if (what == "ERROR" && need(2)) {
        e.kind = ExpectDirective::Kind::error;
      } else if (what == "FAULT" && need(3)) {
        auto k = fault_kind_from_string(tk[2].text);
        if (!k) return fail(tk[2].col, "unknown fault kind " + tk[2].text);
        e.kind = ExpectDirective::Kind::fault;
        e.fault = *k;
      } else {
        return fail(tk[1].col, "expected OK, RAX <v>, ERROR or FAULT <kind>");
      }
      d.payload = e;
    } else if (kw == "CANONICAL") {
      if (!need(1)) return fail(tk[0].col, "CANONICAL takes no operands");
      d.payload = CanonicalDirective{};
    } else if (kw == "SEGMENT") {
      SegmentDirective s;
      uint64_t ring = 0;
      if (!need(7) || !parse_selector(tk[1].text, s.table, s.slot) ||
          !num(3, ring) || ring > 3 || !num(5, s.desc.base) ||
          !num(6, s.desc.limit))
        return fail(tk[0].col,
                    "usage: SEGMENT <tbl>:<slot> <code|data> <ring> "
                    "<x32|x64|-> <base> <limit>");
      if (tk[2].text == "code")
        s.desc.kind = SegmentKind::code;
      else if (tk[2].text == "data")
        s.desc.kind = SegmentKind::data;
      else
        return fail(tk[2].col, "expected code or data");
      s.desc.dpl = Ring{static_cast<unsigned>(ring)};
      if (tk[4].text == "x32")
        s.desc.bitness = Bitness::x32;
      else if (tk[4].text == "x64" || tk[4].text == "-")
        s.desc.bitness = Bitness::x64;
      else
        return fail(tk[4].col, "expected x32, x64 or -");
      d.payload = s;
    } else if (kw == "GATE" || kw == "GATE-RAW") {
      GateDirective g;
      g.raw = kw == "GATE-RAW";
      TableKind ttbl;
      uint16_t tslot;
      uint64_t rmpl = 0;
      if (!need(5) || !parse_selector(tk[1].text, g.table, g.slot) ||
          !parse_selector(tk[2].text, ttbl, tslot) ||
          !num(3, g.desc.target_offset) || !num(4, rmpl) || rmpl > 3)
        return fail(tk[0].col,
                    "usage: GATE <tbl>:<slot> <tbl>:<target> <offset> <rmpl>");
      g.desc.target_selector = SegmentSelector{tslot, ttbl, kRing0};
      g.desc.rmpl = Ring{static_cast<unsigned>(rmpl)};
      d.payload = g;
    } else {
      return fail(tk[0].col, "unknown directive " + kw);
    }
    scn.directives.push_back(std::move(d));
  }

  // Pairing rule: every action directive is followed by exactly one
  // EXPECT, and EXPECT appears nowhere else.
  for (size_t i = 0; i < scn.directives.size(); ++i) {
    const Directive& d = scn.directives[i];
    if (d.is_action()) {
      if (i + 1 >= scn.directives.size() ||
          !scn.directives[i + 1].as<ExpectDirective>())
        return ParseError{d.line, 1,
                          "action directive is missing its EXPECT line"};
    } else if (d.as<ExpectDirective>()) {
      if (i == 0 || !scn.directives[i - 1].is_action())
        return ParseError{d.line, 1,
                          "EXPECT without a preceding PRIVCALL/ATTACK"};
    }
  }
  return scn;
}

// ---------------------------------------------------------------------------
// Built-in privcall routines

// Handlers run host-side while the simulated machine sits in PrivUser
// mode; all their memory traffic goes through the checked CPL-2 paths.
namespace handlers {

inline Outcome<std::vector<uint8_t>> read_cstr(HandlerContext& ctx,
                                               uint64_t addr, size_t cap) {
  std::vector<uint8_t> out;
  for (size_t i = 0; i < cap; ++i) {
    auto b = ctx.read(addr + i, 1);
    if (!b.ok()) return b.fault();
    if (b.value()[0] == 0) break;
    out.push_back(b.value()[0]);
  }
  return out;
}

inline PrivcallHandler echo() {
  return [](HandlerContext&, std::span<const uint64_t> a) -> Outcome<uint64_t> {
    return a.empty() ? 0 : a[0];
  };
}

inline PrivcallHandler add() {
  return [](HandlerContext&, std::span<const uint64_t> a) -> Outcome<uint64_t> {
    uint64_t s = 0;
    for (uint64_t v : a) s += v;
    return s;
  };
}

// Copies a NUL-terminated string from the argument page into the fixed
// secret buffer. Returns the stored length.
inline PrivcallHandler store_secret() {
  return [](HandlerContext& ctx,
            std::span<const uint64_t> a) -> Outcome<uint64_t> {
    if (a.empty()) return Fault{FaultKind::general_protection, "missing arg"};
    auto s = read_cstr(ctx, a[0], layout::kSecretCapacity - 1);
    if (!s.ok()) return s.fault();
    std::vector<uint8_t> buf(layout::kSecretCapacity, 0);
    std::copy(s.value().begin(), s.value().end(), buf.begin());
    if (auto f = ctx.write(layout::kSecretAddr, buf.data(), buf.size()))
      return *f;
    return s.value().size();
  };
}

// Constant-time comparison of the staged attempt against the stored
// secret, over the whole fixed window.
inline PrivcallHandler check_password() {
  return [](HandlerContext& ctx,
            std::span<const uint64_t> a) -> Outcome<uint64_t> {
    if (a.empty()) return Fault{FaultKind::general_protection, "missing arg"};
    constexpr size_t kWindow = 64;
    auto secret = ctx.read(layout::kSecretAddr, kWindow);
    if (!secret.ok()) return secret.fault();
    uint8_t diff = 0;
    for (size_t i = 0; i < kWindow; ++i) {
      auto b = ctx.read(a[0] + i, 1);
      if (!b.ok()) return b.fault();
      uint8_t attempt = b.value()[0];
      diff |= static_cast<uint8_t>(attempt ^ secret.value()[i]);
      if (attempt == 0) {
        // Compare the tail of the window against the stored bytes so the
        // scan length stays fixed.
        for (size_t j = i + 1; j < kWindow; ++j)
          diff |= secret.value()[j];
        break;
      }
    }
    return diff == 0 ? 1 : 0;
  };
}

// Keyed digest standing in for an RSA signature: FNV-1a over the secret
// window followed by the message.
inline PrivcallHandler sign() {
  return [](HandlerContext& ctx,
            std::span<const uint64_t> a) -> Outcome<uint64_t> {
    if (a.empty()) return Fault{FaultKind::general_protection, "missing arg"};
    uint64_t hash = 0xcbf29ce484222325ull;
    auto mix = [&hash](uint8_t b) {
      hash ^= b;
      hash *= 0x100000001b3ull;
    };
    auto secret = ctx.read(layout::kSecretAddr, 64);
    if (!secret.ok()) return secret.fault();
    for (uint8_t b : secret.value()) mix(b);
    auto msg = read_cstr(ctx, a[0], 256);
    if (!msg.ok()) return msg.fault();
    for (uint8_t b : msg.value()) mix(b);
    return hash;
  };
}

// Reads one qword at the given address with PrivUser privilege. The
// SMAP demonstration points this at the argument page.
inline PrivcallHandler read_user() {
  return [](HandlerContext& ctx,
            std::span<const uint64_t> a) -> Outcome<uint64_t> {
    if (a.empty()) return Fault{FaultKind::general_protection, "missing arg"};
    return ctx.read_u64(a[0]);
  };
}

// PrivUser heap allocation probe; returns the block address, 0 when the
// heap is exhausted.
inline PrivcallHandler alloc_probe() {
  return [](HandlerContext& ctx,
            std::span<const uint64_t> a) -> Outcome<uint64_t> {
    auto r = ctx.alloc(a.empty() ? 16 : a[0]);
    return r.ok() ? r.value() : 0;
  };
}

}  // namespace handlers

inline std::optional<PrivcallHandler> builtin_handler(const std::string& name) {
  if (name == "echo") return handlers::echo();
  if (name == "add") return handlers::add();
  if (name == "store_secret") return handlers::store_secret();
  if (name == "check_password") return handlers::check_password();
  if (name == "sign") return handlers::sign();
  if (name == "read_user") return handlers::read_user();
  if (name == "alloc_probe") return handlers::alloc_probe();
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Leak detector

// Byte-level search for secret material in everything a user-mode
// context can observe: mapped User pages and the register file.
class LeakDetector {
public:
  void add_needle(std::vector<uint8_t> bytes) {
    needles_.push_back(std::move(bytes));
  }
  bool has_needles() const { return !needles_.empty(); }

  int scan(const Machine& m, bool exclude_rax) const {
    int hits = 0;
    if (needles_.empty()) return 0;

    // Contiguous runs of mapped User pages, so needles spanning a page
    // boundary are still found.
    std::vector<uint64_t> user_pages;
    for (const auto& [page, flags] : m.pages.entries())
      if (flags.access == PageAccess::user) user_pages.push_back(page);

    size_t i = 0;
    while (i < user_pages.size()) {
      size_t j = i;
      while (j + 1 < user_pages.size() &&
             user_pages[j + 1] == user_pages[j] + 1)
        ++j;
      uint64_t base = page_base(user_pages[i]);
      uint64_t len = (user_pages[j] - user_pages[i] + 1) * kPageSize;
      std::vector<uint8_t> run = m.peek(base, len);
      for (const auto& n : needles_) hits += count_occurrences(run, n);
      i = j + 1;
    }

    for (size_t g = 0; g < kGprCount; ++g) {
      if (exclude_rax && static_cast<Gpr>(g) == Gpr::rax) continue;
      uint64_t v = m.regs.gpr[g];
      std::vector<uint8_t> img(8);
      std::memcpy(img.data(), &v, 8);
      for (const auto& n : needles_)
        if (n.size() <= 8) hits += count_occurrences(img, n);
    }
    return hits;
  }

private:
  static int count_occurrences(const std::vector<uint8_t>& hay,
                               const std::vector<uint8_t>& needle) {
    if (needle.empty() || hay.size() < needle.size()) return 0;
    int c = 0;
    for (size_t i = 0; i + needle.size() <= hay.size(); ++i)
      if (std::memcmp(hay.data() + i, needle.data(), needle.size()) == 0) ++c;
    return c;
  }

  std::vector<std::vector<uint8_t>> needles_;
};

// ---------------------------------------------------------------------------
// Run engine

struct DirectiveReport {
  int index = 0;
  int line = 0;
  std::string text;
  std::string kind;
  std::string outcome;  // ok | rax:0x... | error | fault:Kind
  bool is_expect = false;
  bool expect_pass = false;
  std::string expect_diff;
  int leaks = 0;
  uint64_t steps = 0;
};

struct RunReport {
  std::vector<DirectiveReport> rows;
  bool pass = true;
  int expects_total = 0;
  int expects_passed = 0;
  int total_leaks = 0;
  std::string error;  // runner-level failure (bad handler name etc.)

  std::string render() const {
    std::ostringstream os;
    for (const auto& r : rows) {
      os << "[" << r.index << "] line " << r.line << ": " << r.text << "\n";
      os << "    kind=" << r.kind;
      if (r.is_expect) {
        os << " result=" << (r.expect_pass ? "pass" : "FAIL");
        if (!r.expect_diff.empty()) os << " diff=\"" << r.expect_diff << "\"";
      } else {
        os << " outcome=" << r.outcome << " leaks=" << r.leaks
           << " steps=" << r.steps;
      }
      os << "\n";
    }
    if (!error.empty()) os << "ERROR " << error << "\n";
    os << "RESULT " << (pass ? "PASS" : "FAIL") << " expects="
       << expects_passed << "/" << expects_total << " leaks=" << total_leaks
       << "\n";
    return os.str();
  }
};

namespace run_detail {

struct ActionOutcome {
  enum class Kind : uint8_t { ok, rax, error, fault } kind = Kind::ok;
  uint64_t rax = 0;
  std::optional<Fault> fault;

  std::string describe() const {
    switch (kind) {
      case Kind::ok: return "ok";
      case Kind::rax: {
        char buf[32];
        std::snprintf(buf, sizeof buf, "rax:0x%llx",
                      static_cast<unsigned long long>(rax));
        return buf;
      }
      case Kind::error: return "error";
      case Kind::fault:
        return "fault:" + (fault ? fault->describe()
                                 : std::string("<none>"));
    }
    return "?";
  }
};

inline bool expect_matches(const ExpectDirective& e, const ActionOutcome& o,
                           std::string& diff) {
  using K = ExpectDirective::Kind;
  using A = ActionOutcome::Kind;
  switch (e.kind) {
    case K::ok:
      if (o.kind == A::ok || o.kind == A::rax) return true;
      diff = "expected success, got " + o.describe();
      return false;
    case K::rax:
      if (o.kind == A::rax && o.rax == e.value) return true;
      {
        char buf[32];
        std::snprintf(buf, sizeof buf, "0x%llx",
                      static_cast<unsigned long long>(e.value));
        diff = "expected rax:" + std::string(buf) + ", got " + o.describe();
      }
      return false;
    case K::error:
      if (o.kind == A::error) return true;
      diff = "expected error return, got " + o.describe();
      return false;
    case K::fault:
      if (o.kind == A::fault && o.fault && o.fault->kind == e.fault)
        return true;
      diff = "expected fault:" + std::string(to_string(e.fault)) + ", got " +
             o.describe();
      return false;
  }
  return false;
}

}  // namespace run_detail

// Executes a scenario on a fresh canonical machine. Machine faults are
// directive outcomes, not runner errors; an expectation mismatch halts
// the run. The leak detector sweeps after every directive.
inline RunReport run_scenario(const Scenario& scn) {
  using run_detail::ActionOutcome;

  RunReport report;
  CanonicalSetup setup = make_canonical_setup();
  Machine& m = setup.machine;
  LotrHandle& h = setup.handle;
  LeakDetector leaks;

  uint64_t staging_cursor = h.cfg.arg_page.base;
  ActionOutcome last_action;
  bool have_action = false;

  auto weighted_steps = [](const OpCounters& a, const OpCounters& b) {
    return (b.ring_transitions - a.ring_transitions) * 30 +
           (b.descriptor_loads - a.descriptor_loads) * 10 +
           (b.context_ops - a.context_ops) * 10;
  };

  int index = 0;
  for (const Directive& d : scn.directives) {
    DirectiveReport row;
    row.index = ++index;
    row.line = d.line;
    row.text = d.raw;

    OpCounters before = m.counters;
    ActionOutcome out;
    bool runner_error = false;

    if (const auto* map = d.as<MapDirective>()) {
      row.kind = "MAP";
      m.map_range(map->addr, map->len, map->flags);
    } else if (const auto* sec = d.as<SecretDirective>()) {
      row.kind = "SECRET";
      m.poke(sec->addr, sec->bytes.data(), sec->bytes.size());
      leaks.add_needle(sec->bytes);
    } else if (const auto* reg = d.as<RegisterDirective>()) {
      row.kind = "REGISTER";
      auto handler = builtin_handler(reg->name);
      if (!handler) {
        report.error = "line " + std::to_string(d.line) +
                       ": unknown routine " + reg->name;
        runner_error = true;
      } else {
        auto r = register_privcall(h, reg->name, reg->arity, *handler);
        if (!r.ok()) out.kind = ActionOutcome::Kind::error;
      }
    } else if (d.as<CloseRegistryDirective>()) {
      row.kind = "CLOSE-REGISTRY";
      close_privcall_registry(h);
    } else if (const auto* pc = d.as<PrivcallDirective>()) {
      row.kind = "PRIVCALL";
      std::vector<uint64_t> args;
      std::vector<std::pair<uint64_t, uint64_t>> staged;  // addr, len
      uint64_t cursor = staging_cursor;
      bool stage_fail = false;
      for (const PrivcallArg& a : pc->args) {
        if (!a.is_string) {
          args.push_back(a.value);
          continue;
        }
        uint64_t need = a.text.size() + 1;
        if (cursor + need > h.cfg.arg_page.end()) {
          report.error = "argument page exhausted";
          stage_fail = runner_error = true;
          break;
        }
        std::vector<uint8_t> buf(a.text.begin(), a.text.end());
        buf.push_back(0);
        if (auto f = m.write_mem(cursor, buf.data(), buf.size())) {
          out.kind = ActionOutcome::Kind::fault;
          out.fault = f;
          m.clear_fault();
          stage_fail = true;
          break;
        }
        staged.emplace_back(cursor, need);
        args.push_back(cursor);
        cursor = (cursor + need + 15) & ~15ull;
      }
      if (!stage_fail) {
        auto r = privcall(m, h, pc->nr, args);
        switch (r.status) {
          case PrivcallResult::Status::ok:
            out.kind = ActionOutcome::Kind::rax;
            out.rax = r.rax;
            break;
          case PrivcallResult::Status::bad_number:
            out.kind = ActionOutcome::Kind::error;
            out.rax = r.rax;
            break;
          case PrivcallResult::Status::faulted:
            out.kind = ActionOutcome::Kind::fault;
            out.fault = r.fault;
            break;
        }
      }
      // The caller wipes its own staged input; anything still holding
      // secret bytes afterwards is a genuine leak.
      for (auto [addr, len] : staged) {
        std::vector<uint8_t> zero(len, 0);
        m.poke(addr, zero.data(), len);
      }
    } else if (const auto* ar = d.as<AttackReadDirective>()) {
      row.kind = "ATTACK-READ";
      auto r = m.read_mem(ar->addr, ar->len);
      if (r.ok()) {
        out.kind = ActionOutcome::Kind::ok;
      } else {
        out.kind = ActionOutcome::Kind::fault;
        out.fault = r.fault();
      }
    } else if (const auto* aj = d.as<AttackJumpDirective>()) {
      row.kind = "ATTACK-JUMP";
      SegmentSelector sel{aj->slot, aj->table, m.cpl()};
      if (auto f = far_jump(m, sel, aj->offset)) {
        out.kind = ActionOutcome::Kind::fault;
        out.fault = f;
      }
    } else if (const auto* al = d.as<AttackLretDirective>()) {
      row.kind = "ATTACK-LRET";
      // Forge a frame aimed at a code segment of the requested ring and
      // pop it. The frame is planted with ordinary user-mode writes.
      std::optional<SegmentSelector> target;
      uint64_t target_base = 0;
      for (TableKind t : {TableKind::gdt, TableKind::ldt}) {
        for (uint16_t i = 1; i < DescriptorTable::kCapacity && !target; ++i) {
          const Descriptor* desc = m.table(t).at(i);
          if (!desc || !is_code(*desc)) continue;
          const auto& seg = std::get<SegmentDescriptor>(*desc);
          if (seg.dpl == al->ring) {
            target = SegmentSelector{i, t, seg.dpl};
            target_base = seg.base;
          }
        }
      }
      if (!target) {
        out.kind = ActionOutcome::Kind::fault;
        out.fault = Fault{FaultKind::invalid_selector,
                          "no code segment at ring " +
                              std::to_string(al->ring.num())};
      } else {
        uint64_t frame[4] = {target_base, target->pack(), m.regs[Gpr::rsp],
                             m.regs.ss.pack()};
        bool planted = true;
        for (int i = 3; i >= 0 && planted; --i)
          if (auto f = m.push64(frame[i])) {
            out.kind = ActionOutcome::Kind::fault;
            out.fault = f;
            planted = false;
          }
        if (planted) {
          if (auto f = long_return(m)) {
            out.kind = ActionOutcome::Kind::fault;
            out.fault = f;
          }
        }
      }
    } else if (const auto* sf = d.as<SetFlagDirective>()) {
      row.kind = "SET-FLAG";
      (sf->is_smap ? m.smap : m.smep) = sf->value;
    } else if (const auto* ex = d.as<ExpectDirective>()) {
      row.kind = "EXPECT";
      row.is_expect = true;
      report.expects_total++;
      std::string diff;
      row.expect_pass = have_action &&
                        run_detail::expect_matches(*ex, last_action, diff);
      row.expect_diff = diff;
      if (row.expect_pass) {
        report.expects_passed++;
      } else {
        report.pass = false;
      }
      report.rows.push_back(std::move(row));
      if (!report.pass) return report;  // mismatch halts the run
      continue;
    } else {
      report.error = "line " + std::to_string(d.line) +
                     ": directive is only valid in config files";
      runner_error = true;
    }

    if (d.is_action()) {
      last_action = out;
      have_action = true;
    }
    row.outcome = out.describe();
    row.steps = weighted_steps(before, m.counters);
    row.leaks = leaks.scan(m, /*exclude_rax=*/d.as<PrivcallDirective>() !=
                                              nullptr);
    report.total_leaks += row.leaks;
    if (row.leaks > 0) report.pass = false;

    // A fault is this directive's outcome; it conceptually kills the
    // victim context, so the next directive starts from a fresh
    // user-mode pose on the same machine.
    if (!m.running() || out.kind == ActionOutcome::Kind::fault) {
      m.clear_fault();
      setup.pose_user();
    }

    report.rows.push_back(std::move(row));
    if (runner_error) {
      report.pass = false;
      return report;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Config files

struct BuiltConfig {
  Machine machine;
  InitLock lock;
  LotrHandle handle;
  bool canonical = false;
};

// Builds a machine for `verify --config`. Starts empty; the CANONICAL
// directive pulls in the full canonical setup, and MAP/SEGMENT/GATE
// directives refine it. Action directives are rejected here.
inline std::variant<BuiltConfig, std::string> build_machine_from_config(
    const Scenario& scn) {
  BuiltConfig out;
  for (const Directive& d : scn.directives) {
    if (d.as<CanonicalDirective>()) {
      CanonicalSetup s = make_canonical_setup();
      out.machine = std::move(s.machine);
      out.lock = s.lock;
      out.handle = std::move(s.handle);
      out.canonical = true;
    } else if (const auto* map = d.as<MapDirective>()) {
      out.machine.map_range(map->addr, map->len, map->flags);
    } else if (const auto* seg = d.as<SegmentDirective>()) {
      if (auto f = out.machine.install_descriptor(seg->table, seg->slot,
                                                  seg->desc))
        return "line " + std::to_string(d.line) + ": " + f->describe();
    } else if (const auto* gate = d.as<GateDirective>()) {
      if (gate->raw) {
        out.machine.inject_descriptor_raw(gate->table, gate->slot, gate->desc);
      } else if (auto f = out.machine.install_descriptor(
                     gate->table, gate->slot, gate->desc)) {
        return "line " + std::to_string(d.line) + ": " + f->describe();
      }
    } else if (const auto* sec = d.as<SecretDirective>()) {
      out.machine.poke(sec->addr, sec->bytes.data(), sec->bytes.size());
    } else {
      return "line " + std::to_string(d.line) +
             ": directive not allowed in a config file";
    }
  }
  return out;
}

}  // namespace lotrsim

#endif  // LOTRSIM_SCENARIO_HPP

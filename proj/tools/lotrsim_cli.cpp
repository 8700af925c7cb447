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

// lotrsim command-line front end.
//
//   lotrsim verify [--config FILE]   run the security checks (+ mutation
//                                    suite on the canonical setup)
//   lotrsim run FILE                 execute a scenario script
//   lotrsim dump-ldt                 print the canonical LDT
//   lotrsim bench FILE [--weight k=v ...]
//                                    three-mechanism step comparison
//
// Exit codes: 0 success, 1 failed checks/expectations, 2 usage error,
// 3 file error.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "lotrsim/canonical.hpp"
#include "lotrsim/costmodel.hpp"
#include "lotrsim/scenario.hpp"
#include "lotrsim/verifier.hpp"

namespace {

constexpr int kExitFail = 1;
constexpr int kExitUsage = 2;
constexpr int kExitFile = 3;

bool read_file(const std::string& path, std::string& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::ostringstream ss;
  ss << in.rdbuf();
  out = ss.str();
  return true;
}

int cmd_verify(const std::string& config_path) {
  lotrsim::Machine machine;
  lotrsim::LotrHandle handle;
  bool canonical = false;

  if (config_path.empty()) {
    auto setup = lotrsim::make_canonical_setup();
    machine = std::move(setup.machine);
    handle = std::move(setup.handle);
    canonical = true;
  } else {
    std::string text;
    if (!read_file(config_path, text)) {
      std::cerr << "cannot read " << config_path << "\n";
      return kExitFile;
    }
    auto parsed = lotrsim::parse_scenario(text);
    if (auto* err = std::get_if<lotrsim::ParseError>(&parsed)) {
      std::cerr << config_path << ": " << err->describe() << "\n";
      return kExitFile;
    }
    auto built =
        lotrsim::build_machine_from_config(std::get<lotrsim::Scenario>(parsed));
    if (auto* err = std::get_if<std::string>(&built)) {
      std::cerr << config_path << ": " << *err << "\n";
      return kExitFile;
    }
    auto& cfg = std::get<lotrsim::BuiltConfig>(built);
    machine = std::move(cfg.machine);
    handle = std::move(cfg.handle);
    canonical = cfg.canonical;
  }

  bool all_hold = true;
  for (const auto& v : lotrsim::run_verification(machine, handle)) {
    std::cout << v.render() << "\n";
    for (const auto& w : v.warnings) std::cout << "WARN " << w << "\n";
    all_hold = all_hold && v.holds;
  }

  bool mutations_ok = true;
  if (canonical) {
    auto report = lotrsim::run_mutation_suite(machine, handle);
    std::cout << report.render();
    mutations_ok = report.all_detected;
  }
  return all_hold && mutations_ok ? 0 : kExitFail;
}

int cmd_run(const std::string& path) {
  std::string text;
  if (!read_file(path, text)) {
    std::cerr << "cannot read " << path << "\n";
    return kExitFile;
  }
  auto parsed = lotrsim::parse_scenario(text);
  if (auto* err = std::get_if<lotrsim::ParseError>(&parsed)) {
    std::cerr << path << ": " << err->describe() << "\n";
    return kExitFile;
  }
  auto report = lotrsim::run_scenario(std::get<lotrsim::Scenario>(parsed));
  std::cout << report.render();
  return report.pass ? 0 : kExitFail;
}

int cmd_dump_ldt() {
  auto setup = lotrsim::make_canonical_setup();
  std::cout << lotrsim::format_ldt(setup.machine);
  return 0;
}

int cmd_bench(const std::string& path,
              const std::vector<std::string>& weight_args) {
  lotrsim::CostWeights weights;
  for (const std::string& w : weight_args) {
    size_t eq = w.find('=');
    double value = 0;
    bool ok = eq != std::string::npos;
    if (ok) {
      try {
        value = std::stod(w.substr(eq + 1));
      } catch (...) {
        ok = false;
      }
    }
    if (!ok || !weights.set_by_name(w.substr(0, eq), value)) {
      std::cerr << "bad --weight '" << w
                << "' (ring-transition, descriptor-load, context-save, "
                   "page-flip, ipc-message; value > 0)\n";
      return kExitUsage;
    }
  }

  std::string text;
  if (!read_file(path, text)) {
    std::cerr << "cannot read " << path << "\n";
    return kExitFile;
  }
  auto parsed = lotrsim::parse_scenario(text);
  if (auto* err = std::get_if<lotrsim::ParseError>(&parsed)) {
    std::cerr << path << ": " << err->describe() << "\n";
    return kExitFile;
  }
  auto table = lotrsim::compare_mechanisms(std::get<lotrsim::Scenario>(parsed),
                                           weights);
  if (auto* err = std::get_if<std::string>(&table)) {
    std::cerr << path << ": " << *err << "\n";
    return kExitFile;
  }
  std::cout << std::get<lotrsim::CostTable>(table).render();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LOTRx86 privilege-architecture simulator"};
  app.require_subcommand(1);

  std::string config_path, scenario_path, workload_path;
  std::vector<std::string> weight_args;

  auto* verify = app.add_subcommand("verify", "run the security checks");
  verify->add_option("--config", config_path, "config file (scenario grammar)");

  auto* run = app.add_subcommand("run", "execute a scenario");
  run->add_option("file", scenario_path, "scenario file")->required();

  app.add_subcommand("dump-ldt", "print the canonical LDT");

  auto* bench = app.add_subcommand("bench", "compare protection mechanisms");
  bench->add_option("file", workload_path, "workload scenario")->required();
  bench->add_option("--weight", weight_args, "override a weight, name=value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (app.got_subcommand("verify")) return cmd_verify(config_path);
  if (app.got_subcommand("run")) return cmd_run(scenario_path);
  if (app.got_subcommand("dump-ldt")) return cmd_dump_ldt();
  if (app.got_subcommand("bench")) return cmd_bench(workload_path, weight_args);
  return kExitUsage;
}

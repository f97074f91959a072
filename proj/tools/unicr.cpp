/* Copyright 2026 The unicr Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// unicr: checkpoint/restore of simulated CPU+GPU process trees.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "unicr/container.hpp"
#include "unicr/engine.hpp"
#include "unicr/intercept.hpp"
#include "unicr/scenario.hpp"

namespace fs = std::filesystem;
using namespace unicr;

namespace {

fs::path default_images_root() {
  if (const char* env = std::getenv("UNICR_IMAGES_DIR"); env != nullptr && *env != '\0') return env;
  return fs::current_path() / "unicr-images";
}

StatsFormat parse_format(const std::string& f) {
  if (f == "text") return StatsFormat::Text;
  if (f == "json") return StatsFormat::Json;
  throw Error(ErrorKind::UsageError, "--format must be text or json");
}

std::vector<std::uint32_t> parse_list(const std::string& s, const char* flag) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      auto v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::exception&) {
      throw Error(ErrorKind::UsageError, std::string(flag) + ": not a number list: " + s);
    }
  }
  if (out.empty()) throw Error(ErrorKind::UsageError, std::string(flag) + " is empty");
  return out;
}

fs::path fresh_temp_root() {
  std::random_device rd;
  std::ostringstream name;
  name << "unicr-" << std::hex << rd() << rd();
  auto p = fs::temp_directory_path() / name.str();
  fs::create_directories(p);
  return p;
}

// --machine FILE[#NAME] or, with a scenario, a machine name.
MachineSpec resolve_machine(const std::string& arg, const std::optional<Scenario>& sc) {
  if (sc && sc->machines.contains(arg)) return sc->machines.at(arg);
  auto hash = arg.find('#');
  fs::path file = arg.substr(0, hash);
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::UsageError, "no machine named or file called " + arg);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SpecError, file.string() + ": " + e.what());
  }
  if (doc.contains("machines")) {
    auto scenario = parse_scenario(doc);
    auto name = hash == std::string::npos ? scenario.machine : arg.substr(hash + 1);
    if (!scenario.machines.contains(name)) throw Error(ErrorKind::SpecError, "scenario has no machine " + name);
    return scenario.machines.at(name);
  }
  return parse_machine_spec(doc);
}

struct DumpArgs {
  std::string scenario;
  std::string images_dir;
  double timeout = 10.0;
  bool leave_running = false;
  bool leave_frozen = false;
  std::string format = "text";
};

int cmd_dump(const DumpArgs& a) {
  auto sc = load_scenario(a.scenario);
  auto dir = a.images_dir.empty() ? default_images_root() / sc.name : fs::path(a.images_dir);
  ScenarioRunner runner(sc, dir.parent_path().empty() ? fs::path(".") : dir.parent_path());
  runner.setup();
  // Replay the workload steps that lead up to the first checkpoint.
  ScenarioStep dump_step;
  dump_step.kind = StepKind::Dump;
  for (const auto& st : runner.scenario().steps) {
    if (st.kind == StepKind::Dump) {
      dump_step = st;
      break;
    }
    if (st.kind == StepKind::Run || st.kind == StepKind::Freeze || st.kind == StepKind::Thaw) runner.run_step(st);
  }
  dump_step.dir = dir.filename().string();
  dump_step.timeout = std::chrono::duration_cast<SimDuration>(std::chrono::duration<double>(a.timeout));
  if (a.leave_running) dump_step.final_state = FinalState::Running;
  if (a.leave_frozen) dump_step.final_state = FinalState::Frozen;
  auto r = runner.dump(dump_step);
  auto fmt = parse_format(a.format);
  if (fmt == StatsFormat::Json) {
    auto j = nlohmann::json::parse(format_stats(r->stats, fmt));
    j["images_dir"] = r->path.string();
    j["has_gpu_state"] = r->has_gpu_state;
    j["plugins"] = r->plugins;
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "images dir        " << r->path.string() << "\n"
              << "has gpu state     " << (r->has_gpu_state ? "true" : "false") << "\n"
              << format_stats(r->stats, fmt);
  }
  return 0;
}

struct RestoreArgs {
  std::string images_dir;
  std::string machine;
  std::string scenario;
  std::uint32_t steps = 0;
  std::string format = "text";
};

int cmd_restore(const RestoreArgs& a) {
  std::optional<Scenario> sc;
  if (!a.scenario.empty()) sc = load_scenario(a.scenario);
  if (a.machine.empty() && !sc) throw Error(ErrorKind::UsageError, "restore needs --machine or --scenario");
  auto spec = a.machine.empty() ? sc->machines.at(sc->machine) : resolve_machine(a.machine, sc);
  Machine m(spec);
  Engine engine;
  register_default_plugins(engine);

  bool is_container = fs::exists(fs::path(a.images_dir) / kContainerConfigFile);
  RestoreResult r;
  std::unique_ptr<SimContainer> container;
  LayerStore layers;
  if (is_container) {
    if (sc && sc->container) {
      for (const auto& files : sc->container->layers) layers.add(make_layer(files));
    }
    container = std::make_unique<SimContainer>(container_restore(engine, a.images_dir, m, layers, &r));
  } else {
    r = engine.restore(a.images_dir, m);
  }
  for (std::uint32_t i = 0; i < a.steps; ++i) {
    for (auto pid : m.tree().pids()) container ? (void)container->step(pid) : (void)m.step(pid);
  }
  if (parse_format(a.format) == StatsFormat::Json) {
    nlohmann::json j{{"machine", spec.name},
                     {"pids", r.pids},
                     {"restore_total_us", r.stats.restore_total.count()},
                     {"state_digest", to_hex(canonical_digest(m))}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "machine           " << spec.name << "\n"
              << "restored pids     ";
    for (std::size_t i = 0; i < r.pids.size(); ++i) std::cout << (i ? "," : "") << r.pids[i];
    std::cout << "\nrestore total     " << r.stats.restore_total.count() << " us\n"
              << "state digest      " << to_hex(canonical_digest(m)) << "\n";
  }
  return 0;
}

int cmd_stats(const std::string& dir, const std::string& format) {
  auto snap = read_image_set(dir);
  auto fmt = parse_format(format);
  if (fmt == StatsFormat::Json) {
    auto j = nlohmann::json::parse(format_stats(snap.stats, fmt));
    j["process_count"] = snap.inventory.process_count;
    j["has_gpu_state"] = snap.inventory.has_gpu_state;
    j["plugins"] = snap.inventory.plugin_ids;
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "processes         " << snap.inventory.process_count << "\n"
              << "has gpu state     " << (snap.inventory.has_gpu_state ? "true" : "false") << "\n"
              << format_stats(snap.stats, fmt);
  }
  return 0;
}

struct BenchArgs {
  std::string mode = "driver";
  std::string epochs = "1";
  std::string gpus = "1";
  std::uint64_t param_bytes = 1 << 20;
  std::uint64_t host_bytes = 1 << 20;
};

int cmd_bench(const BenchArgs& a) {
  if (a.mode != "driver" && a.mode != "proxy") throw Error(ErrorKind::UsageError, "--mode must be driver or proxy");
  auto epochs = parse_list(a.epochs, "--epochs");
  auto gpus = parse_list(a.gpus, "--gpus");
  std::cout << "mode\tgpus\tepochs\tgpu_bytes\tcpu_bytes\tpages_scanned\tcheckpoint_total_us\tfrozen_us\t"
               "mem_dump_us\tmem_write_us\tintercepted_calls\toverhead_us\tepoch_us\n";
  auto root = fresh_temp_root();
  for (auto n : gpus) {
    if (n == 0) throw Error(ErrorKind::UsageError, "--gpus entries must be positive");
    for (auto e : epochs) {
      TrainingSpec ts;
      ts.param_bytes = a.param_bytes;
      ts.batch_bytes = a.param_bytes / 4;
      std::cout << a.mode << "\t" << n << "\t" << e << "\t";
      if (a.mode == "proxy") {
        std::uint64_t calls = 0;
        SimDuration overhead{0};
        SimDuration elapsed{0};
        const auto setup = run_intercepted(ts, 0).elapsed;
        for (std::uint32_t g = 0; g < n; ++g) {
          auto r = run_intercepted(ts, e);
          calls += r.call_count;
          overhead += r.total_overhead;
          elapsed += r.elapsed - setup;
        }
        std::cout << "0\t0\t0\t0\t0\t0\t0\t" << calls << "\t" << overhead.count() << "\t"
                  << (e ? elapsed.count() / e : 0) << "\n";
        continue;
      }
      // One data-parallel rank per GPU, each holding a replica of the model.
      MachineSpec ms;
      ms.name = "bench";
      ms.cuda_devices.assign(n, CudaDeviceInfo{"A100", 80ULL << 30});
      Machine m(ms);
      TreeSpec tree;
      for (std::uint32_t g = 0; g < n; ++g) {
        ProcessSpec p;
        p.pid = static_cast<Pid>(g + 1);
        p.vmas.push_back(VmaSpec{0x400000, a.host_bytes, std::nullopt, 0, std::nullopt});
        tree.processes.processes.push_back(p);
        tree.cuda[p.pid] = CudaTaskSpec{};
      }
      m.spawn(tree);
      std::vector<TrainingWorkload> ranks;
      for (std::uint32_t g = 0; g < n; ++g) {
        auto spec = ts;
        spec.ordinal = g;
        ranks.emplace_back(spec);
        ranks.back().init(m.cuda(), static_cast<Pid>(g + 1));
      }
      const auto t0 = m.clock().now();
      for (std::uint32_t i = 0; i < e; ++i) {
        for (std::uint32_t g = 0; g < n; ++g) ranks[g].epoch(m.cuda(), static_cast<Pid>(g + 1));
      }
      const auto epoch_us = e ? (m.clock().now() - t0).count() / e : 0;
      Engine engine;
      register_default_plugins(engine);
      DumpOptions o;
      o.images_dir = root / ("gpus" + std::to_string(n) + "-epochs" + std::to_string(e));
      auto r = engine.dump(m, o);
      const auto& s = r.stats;
      std::cout << s.gpu_bytes << "\t" << s.cpu_bytes << "\t" << s.pages_scanned << "\t" << s.checkpoint_total.count()
                << "\t" << s.frozen_time.count() << "\t" << s.mem_dump_time.count() << "\t"
                << s.mem_write_time.count() << "\t" << m.cuda().interposed_calls() << "\t0\t" << epoch_us << "\n";
      fs::remove_all(o.images_dir);
    }
  }
  fs::remove_all(root);
  return 0;
}

int cmd_run(const std::string& path, const std::string& images_dir, bool keep) {
  auto sc = load_scenario(path);
  bool temp = images_dir.empty();
  auto root = temp ? fresh_temp_root() : fs::path(images_dir);
  ScenarioRunner runner(sc, root);
  try {
    runner.run_all(std::cout);
  } catch (...) {
    if (temp && !keep) fs::remove_all(root);
    throw;
  }
  if (temp && !keep) fs::remove_all(root);
  std::cout << "scenario " << sc.name << " passed\n";
  return 0;
}

int report(const Error& e) {
  std::cerr << "error: class=" << to_string(e.kind()) << " code=" << exit_code(e.kind());
  if (!e.subject().empty()) std::cerr << " subject=" << e.subject();
  std::cerr << " message=\"" << e.what() << "\"\n";
  return exit_code(e.kind());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unicr: checkpoint/restore for simulated CPU+GPU process trees"};
  app.require_subcommand(1);

  DumpArgs dump;
  auto* d = app.add_subcommand("dump", "Run a scenario up to its first checkpoint and dump it");
  d->add_option("--scenario", dump.scenario, "Scenario file")->required();
  d->add_option("--images-dir", dump.images_dir, "Image directory to create (default $UNICR_IMAGES_DIR/<scenario>)");
  d->add_option("--timeout", dump.timeout, "Device lock timeout in simulated seconds")->capture_default_str();
  auto* lr = d->add_flag("--leave-running", dump.leave_running, "Resume the tree after the dump");
  auto* lf = d->add_flag("--leave-frozen", dump.leave_frozen, "Leave the tree frozen after the dump");
  lr->excludes(lf);
  d->add_option("--format", dump.format, "text or json")->capture_default_str();

  RestoreArgs restore;
  auto* r = app.add_subcommand("restore", "Restore an image set onto a machine");
  r->add_option("--images-dir", restore.images_dir, "Image directory")->required();
  r->add_option("--machine", restore.machine, "Machine spec file, SCENARIO#NAME, or a name from --scenario (default: its machine)");
  r->add_option("--scenario", restore.scenario, "Scenario providing machines and container layers");
  r->add_option("--steps", restore.steps, "Workload steps to run after restoring");
  r->add_option("--format", restore.format, "text or json")->capture_default_str();

  std::string stats_dir;
  std::string stats_format = "text";
  auto* s = app.add_subcommand("stats", "Print the statistics of an image set");
  s->add_option("--images-dir", stats_dir, "Image directory")->required();
  s->add_option("--format", stats_format, "text or json")->capture_default_str();

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Compare the driver path with a device proxy");
  b->add_option("--mode", bench.mode, "driver or proxy")->capture_default_str();
  b->add_option("--epochs", bench.epochs, "Comma-separated epoch counts")->capture_default_str();
  b->add_option("--gpus", bench.gpus, "Comma-separated GPU counts")->capture_default_str();
  b->add_option("--param-bytes", bench.param_bytes, "Model size per GPU")->capture_default_str();
  b->add_option("--host-bytes", bench.host_bytes, "Host memory per rank")->capture_default_str();

  std::string run_path;
  std::string run_dir;
  bool run_keep = false;
  auto* run = app.add_subcommand("run", "Execute every step of a scenario");
  run->add_option("scenario", run_path, "Scenario file")->required();
  run->add_option("--images-dir", run_dir, "Root for image directories (default: a temporary directory)");
  run->add_flag("--keep", run_keep, "Keep the temporary image root");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    auto rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(ErrorKind::UsageError);
  }

  try {
    if (*d) return cmd_dump(dump);
    if (*r) return cmd_restore(restore);
    if (*s) return cmd_stats(stats_dir, stats_format);
    if (*b) return cmd_bench(bench);
    if (*run) return cmd_run(run_path, run_dir, run_keep);
  } catch (const Error& e) {
    return report(e);
  } catch (const std::exception& e) {
    std::cerr << "error: class=Internal code=1 message=\"" << e.what() << "\"\n";
    return 1;
  }
  return 0;
}

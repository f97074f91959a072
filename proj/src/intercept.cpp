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

#include "unicr/intercept.hpp"

#include <map>

#include "unicr/engine.hpp"

namespace unicr {

namespace {

constexpr Pid kWorkloadPid = 1;

Bytes pattern(std::uint64_t seed, std::uint64_t n) {
  Bytes b(n);
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + 1;
  for (auto& v : b) {
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    v = static_cast<std::uint8_t>(x);
  }
  return b;
}

std::uint64_t result_digest(const ApiResult& r) { return fingerprint(r.data); }

}  // namespace

void TrainingWorkload::init(CudaDriver& d, Pid pid) {
  ApiCall c;
  c.op = ApiOp::StreamCreate;
  c.ordinal = spec_.ordinal;
  stream_ = d.call(pid, c).handle;
  auto malloc = [&](std::uint64_t size) {
    ApiCall m;
    m.op = ApiOp::Malloc;
    m.ordinal = spec_.ordinal;
    m.size = size;
    return d.call(pid, m).handle;
  };
  params_ = malloc(spec_.param_bytes);
  batch_ = malloc(spec_.batch_bytes);
  grad_ = malloc(spec_.param_bytes);
  ApiCall h;
  h.op = ApiOp::MemcpyHtoD;
  h.handle = params_;
  h.payload = pattern(spec_.seed, spec_.param_bytes);
  d.call(pid, h);
}

void TrainingWorkload::epoch(CudaDriver& d, Pid pid) {
  for (std::uint32_t b = 0; b < spec_.batches_per_epoch; ++b) {
    const auto step = epochs_ * spec_.batches_per_epoch + b;
    ApiCall load;
    load.op = ApiOp::MemcpyAsync;
    load.handle = batch_;
    load.stream = stream_;
    load.payload = pattern(spec_.seed ^ (step + 1), spec_.batch_bytes);
    d.call(pid, load);

    ApiCall fwd;
    fwd.op = ApiOp::LaunchKernel;
    fwd.handle = grad_;
    fwd.source = batch_;
    fwd.stream = stream_;
    fwd.param = step;
    fwd.nondeterministic = spec_.variant == WorkloadVariant::Nondeterministic;
    d.call(pid, fwd);

    ApiCall bwd;
    bwd.op = ApiOp::LaunchKernel;
    bwd.handle = grad_;
    bwd.source = params_;
    bwd.stream = stream_;
    bwd.param = step * 3 + 1;
    d.call(pid, bwd);

    ApiCall upd;
    upd.op = ApiOp::LaunchKernel;
    upd.handle = params_;
    upd.source = grad_;
    upd.stream = stream_;
    upd.param = step * 7 + 2;
    if (spec_.variant == WorkloadVariant::HostImplicit) upd.host_addr = kHostAddr;
    d.call(pid, upd);

    ApiCall loss;
    loss.op = ApiOp::MemcpyDtoH;
    loss.handle = params_;
    loss.size = std::min<std::uint64_t>(64, spec_.param_bytes);
    d.call(pid, loss);

    ApiCall sync;
    sync.op = ApiOp::Synchronize;
    sync.stream = stream_;
    d.call(pid, sync);
  }
  ++epochs_;
}

SimDuration CallLog::total_overhead() const {
  SimDuration t{0};
  for (const auto& e : entries) t += e.overhead;
  return t;
}

std::uint64_t params_digest(const ApiCall& c) {
  Hasher h;
  h.add_u64(static_cast<std::uint64_t>(c.op)).add_u64(c.ordinal).add_u64(c.handle).add_u64(c.source);
  h.add_u64(c.stream).add_u64(c.offset).add_u64(c.size).add_u64(c.param).add(c.payload);
  h.add_u64(c.nondeterministic).add_u64(c.host_addr.value_or(~0ULL));
  return h.digest();
}

ApiResult DeviceProxy::intercept(Pid, const ApiCall& call, const std::function<ApiResult(const ApiCall&)>& forward) {
  auto fwd = call;
  if (fwd.op == ApiOp::MemcpyAsync) {
    fwd.op = ApiOp::MemcpyHtoD;
    fwd.stream = 0;
  }
  clock_.advance(overhead_);
  auto r = forward(fwd);
  CallLogEntry e;
  e.api_name = std::string(to_string(call.op));
  e.params_digest = params_digest(fwd);
  if (fwd.op == ApiOp::Malloc || fwd.op == ApiOp::StreamCreate) e.handles_created.push_back(r.handle);
  e.overhead = overhead_;
  e.call = fwd;
  e.result_digest = result_digest(r);
  log_.entries.push_back(std::move(e));
  return r;
}

InterceptRun run_intercepted(const TrainingSpec& spec, std::uint32_t epochs, SimDuration per_call_overhead) {
  SimClock clock;
  CudaDriver driver(clock, {CudaDeviceInfo{"A100", 1ULL << 30}});
  std::uint64_t host_version = 0;
  driver.set_host_reader([&](Pid, std::uint64_t, std::uint64_t len) { return pattern(~host_version, len); });
  DeviceProxy proxy(clock, per_call_overhead);
  driver.set_interposer(&proxy);
  driver.create_task(kWorkloadPid);
  TrainingWorkload w(spec);
  const auto t0 = clock.now();
  w.init(driver, kWorkloadPid);
  for (std::uint32_t e = 0; e < epochs; ++e) {
    w.epoch(driver, kWorkloadPid);
    ++host_version;
  }
  InterceptRun r;
  r.call_count = driver.interposed_calls();
  r.log = proxy.log();
  r.total_overhead = r.log.total_overhead();
  r.elapsed = clock.now() - t0;
  r.state = driver.task(kWorkloadPid);
  return r;
}

DriverRun run_driver_path(const TrainingSpec& spec, std::uint32_t epochs, bool checkpoint_support) {
  MachineSpec ms;
  ms.name = "bench";
  ms.cuda_devices.assign(spec.ordinal + 1, CudaDeviceInfo{"A100", 1ULL << 30});
  Machine m(ms);
  std::unique_ptr<Engine> engine;
  if (checkpoint_support) {
    engine = std::make_unique<Engine>();
    register_default_plugins(*engine);
  }
  TreeSpec ts;
  ts.processes.processes.push_back(ProcessSpec{kWorkloadPid, 0, 1, 0, {}, {}, {}});
  ts.cuda[kWorkloadPid] = CudaTaskSpec{};
  m.spawn(ts);
  TrainingWorkload w(spec);
  DriverRun r;
  const auto t0 = m.clock().now();
  w.init(m.cuda(), kWorkloadPid);
  for (std::uint32_t e = 0; e < epochs; ++e) {
    const auto s = m.clock().now();
    w.epoch(m.cuda(), kWorkloadPid);
    r.epoch_times.push_back(m.clock().now() - s);
  }
  r.elapsed = m.clock().now() - t0;
  r.interposed_calls = m.cuda().interposed_calls();
  r.state = m.cuda().task(kWorkloadPid);
  return r;
}

const CudaTaskState& replay_log(const CallLog& log, CudaDriver& fresh, Pid pid) {
  if (!fresh.has_task(pid)) fresh.create_task(pid);
  std::map<std::uint64_t, std::uint64_t> allocs;
  std::map<std::uint64_t, std::uint64_t> streams;
  auto remap = [](const std::map<std::uint64_t, std::uint64_t>& table, std::uint64_t h) {
    auto it = table.find(h);
    return it == table.end() ? h : it->second;
  };
  for (std::size_t i = 0; i < log.entries.size(); ++i) {
    const auto& e = log.entries[i];
    auto c = e.call;
    c.handle = remap(allocs, c.handle);
    c.source = remap(allocs, c.source);
    c.stream = remap(streams, c.stream);
    auto r = fresh.call(pid, c);
    if (!e.handles_created.empty()) {
      (c.op == ApiOp::StreamCreate ? streams : allocs)[e.handles_created.front()] = r.handle;
    }
    if (result_digest(r) != e.result_digest) {
      throw Error(ErrorKind::NonDeterministicDivergence,
                  "replay of call " + std::to_string(i) + " (" + e.api_name + ") produced a different result");
    }
  }
  return fresh.task(pid);
}

}  // namespace unicr

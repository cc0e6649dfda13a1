"""Scenario runners. Each returns a :class:`ScenarioResult` built from simulated runs."""

from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Optional

from ..bgd import Promoter
from ..cluster import Cluster, ClusterConfig
from ..nic import (DctRoute, Nic, NicCostModel, Opcode, PhysicalQP, QPKind, WcStatus, WorkRequest)
from ..simcore import NS_PER_S, Fabric, NodeId, Resource, SimClock, make_gid
from ..vplane import KernelNode, VirtualQP
from .config import Calibration, ScenarioConfig
from .metrics import MetricRow, TimelineRow, nearest_rank


@dataclass
class ScenarioResult:
    rows: list[MetricRow]
    timeline: list[TimelineRow] = field(default_factory=list)
    detail: dict[str, Any] = field(default_factory=dict)

    def row(self, baseline: str, clients: Optional[int] = None) -> MetricRow:
        for r in self.rows:
            if r.baseline == baseline and (clients is None or r.clients == clients):
                return r
        raise KeyError((baseline, clients))


# -- builders -------------------------------------------------------------------

def _cluster(cal: Calibration, hosts: int, cpus: int = 1, boot: bool = True) -> Cluster:
    vp = copy.copy(cal.vplane)
    vp.cpus = cpus
    return Cluster(ClusterConfig(hosts=hosts, nic=copy.copy(cal.nic), fabric=copy.deepcopy(cal.fabric),
                                 meta=copy.copy(cal.meta), vplane=vp), boot=boot)


class _Fabric:
    """Hosts without the virtualization layer, for the RC baselines."""

    def __init__(self, cal: Calibration, hosts: int):
        self.clock = SimClock()
        self.fabric = Fabric(self.clock, copy.deepcopy(cal.fabric))
        self.nics = [Nic(self.clock, self.fabric, make_gid(i), copy.copy(cal.nic), index=i) for i in range(hosts)]


class ConnServer:
    """Passive end of RC connection setup: acknowledges at once, then creates and configures its QP."""

    def __init__(self, nic: Nic, handlers: int, port: int = 0):
        self.nic = nic
        self.addr = NodeId(nic.gid, port)
        self.handlers = Resource(nic.clock, handlers, name="conn-handler")
        self.accepted = 0

    def accept(self, client: NodeId):
        return self.nic.clock.spawn(self._serve(client), "accept")

    def _serve(self, client: NodeId) -> Generator[Any, Any, PhysicalQP]:
        yield self.handlers.acquire()
        try:
            qp = yield from self.nic.create_qp(QPKind.RC)
            yield from self.nic.configure_qp(qp, client, handshake=False)
        finally:
            self.handlers.release()
        self.accepted += 1
        return qp


def rc_connect(nic: Nic, server: ConnServer) -> Generator[Any, Any, PhysicalQP]:
    """Client side of an RC connection: create, exchange metadata by datagram, configure."""
    qp = yield from nic.create_qp(QPKind.RC)
    server.accept(NodeId(nic.gid, 0))
    yield from nic.configure_qp(qp, server.addr)
    return qp


def _wire_pair(clock: SimClock, a: Nic, b: Nic) -> PhysicalQP:
    """Connected RC pair for data-path runs; set up before the measured window."""
    qa = clock.call(a.create_qp(QPKind.RC))
    qb = clock.call(b.create_qp(QPKind.RC))
    clock.call(a.configure_qp(qa, NodeId(b.gid, 0), qb.qpn, handshake=False))
    clock.call(b.configure_qp(qb, NodeId(a.gid, 0), qa.qpn, handshake=False))
    return qa


def _wait_raw(nic: Nic, qp: PhysicalQP) -> Generator[Any, Any, Any]:
    while True:
        wc = nic.poll_cq(qp)
        if wc is not None:
            return wc
        yield qp.cq_trigger.wait()


def _throughput(count: int, span_ns: int) -> float:
    return count * NS_PER_S / span_ns if span_ns > 0 else 0.0


# -- single connect ----------------------------------------------------------------

def _client_hosts(n: int, servers: int) -> int:
    return max(1, min(n, max(1, 10 - servers)))


def run_single_connect(cfg: ScenarioConfig) -> ScenarioResult:
    n = cfg.clients or 1
    rows: list[MetricRow] = []
    detail: dict[str, Any] = {}
    for b in cfg.baselines:
        if b == "krcore":
            cold, warm = _krcore_single(cfg, n)
            rows += [cold, warm]
        else:
            rows.append(_rc_single(cfg, n, verbs=b == "verbs"))
    return ScenarioResult(rows, detail=detail)


def _krcore_single(cfg: ScenarioConfig, n: int) -> tuple[MetricRow, MetricRow]:
    hosts = 1 + _client_hosts(n, 1)
    cl = _cluster(cfg.calibration, hosts)
    clock = cl.clock
    server = cl.nodes[0]
    out = []
    for label in ("krcore", "krcore-warm"):
        lat: list[int] = []
        t0, mark = clock.now, cl.fabric.mark()

        def client(i: int):
            node = cl.nodes[1 + i % (hosts - 1)]
            start = clock.now
            vq = yield from node.vqp_create()
            yield from node.qconnect(vq, server.addr)
            lat.append(clock.now - start)

        for i in range(n):
            clock.spawn(client(i), f"client{i}")
        clock.run_until_idle()
        span = clock.now - t0
        mem = sum(nd.nic.mem_bytes for nd in cl.nodes[1:])
        out.append(MetricRow.from_samples("single_connect", label, n, 0, lat, _throughput(n, span),
                                          cl.fabric.ops_since(mark), mem))
    return out[0], out[1]


def _rc_single(cfg: ScenarioConfig, n: int, verbs: bool) -> MetricRow:
    hosts = 1 + _client_hosts(n, 1)
    env = _Fabric(cfg.calibration, hosts)
    clock = env.clock
    server = ConnServer(env.nics[0], cfg.calibration.bench.server_handlers)
    lat: list[int] = []

    def client(i: int):
        nic = env.nics[1 + i % (hosts - 1)]
        start = clock.now
        if verbs:
            yield from nic.init_driver()
        yield from rc_connect(nic, server)
        lat.append(clock.now - start)

    for i in range(n):
        clock.spawn(client(i), f"client{i}")
    clock.run_until_idle()
    mem = sum(nic.mem_bytes for nic in env.nics)
    return MetricRow.from_samples("single_connect", "verbs" if verbs else "lite", n, 0, lat,
                                  _throughput(n, clock.now), len(env.fabric.tap), mem)


# -- full mesh ---------------------------------------------------------------------------

def run_full_mesh(cfg: ScenarioConfig) -> ScenarioResult:
    workers = cfg.clients or 240
    machines = cfg.servers or 10
    rows = []
    detail: dict[str, Any] = {}
    for b in cfg.baselines:
        if b == "krcore":
            row, span = _krcore_mesh(cfg, workers, machines)
        else:
            row, span = _rc_mesh(cfg, workers, machines, verbs=b == "verbs")
        rows.append(row)
        detail[f"{b}_total_ns"] = span
    return ScenarioResult(rows, detail=detail)


def _krcore_mesh(cfg: ScenarioConfig, workers: int, machines: int) -> tuple[MetricRow, int]:
    cl = _cluster(cfg.calibration, machines)
    clock = cl.clock
    t0, mark = clock.now, cl.fabric.mark()
    lat: list[int] = []

    def worker(w: int):
        node = cl.nodes[w % machines]
        peers = [cl.nodes[j % machines].addr for j in range(w + 1, workers)]
        yield from node.qconnect_many(peers)
        lat.append(clock.now - t0)

    for w in range(workers):
        clock.spawn(worker(w), f"worker{w}")
    clock.run_until_idle()
    span = clock.now - t0
    mem = sum(nd.nic.mem_bytes for nd in cl.nodes)
    pairs = workers * (workers - 1) // 2
    return MetricRow.from_samples("full_mesh", "krcore", workers, 0, lat, _throughput(pairs, span),
                                  cl.fabric.ops_since(mark), mem), span


def _rc_mesh(cfg: ScenarioConfig, workers: int, machines: int, verbs: bool) -> tuple[MetricRow, int]:
    env = _Fabric(cfg.calibration, machines)
    clock = env.clock
    handlers = cfg.calibration.bench.mesh_handlers
    servers = [ConnServer(env.nics[w % machines], handlers, port=w) for w in range(workers)]
    lat: list[int] = []

    def worker(w: int):
        nic = env.nics[w % machines]
        if verbs:
            yield from nic.init_driver()
        for j in range(w + 1, workers):
            yield from rc_connect(nic, servers[j])
        lat.append(clock.now)

    for w in range(workers):
        clock.spawn(worker(w), f"worker{w}")
    clock.run_until_idle()
    span = clock.now
    mem = sum(nic.mem_bytes for nic in env.nics)
    pairs = workers * (workers - 1) // 2
    return MetricRow.from_samples("full_mesh", "verbs" if verbs else "lite", workers, 0, lat,
                                  _throughput(pairs, span), len(env.fabric.tap), mem), span


# -- data path ------------------------------------------------------------------------------

@dataclass
class _Target:
    addr: int
    rkey: int


def _server_region(nic: Nic, payload: int) -> tuple[int, int]:
    size = max(payload, 64)
    base = nic.memory.alloc(size)
    nic.memory.write(base, bytes((i * 7) & 0xFF for i in range(min(size, 256))))
    return base, size


def run_data_path(cfg: ScenarioConfig) -> ScenarioResult:
    n = cfg.clients or 1
    servers = cfg.servers or 1
    return _run_reads(cfg, "data_path", n, servers, pin_one_cpu=False)


def run_tail_latency(cfg: ScenarioConfig) -> ScenarioResult:
    n = cfg.clients or 50
    servers = cfg.servers or 5
    return _run_reads(cfg, "tail_latency", n, servers, pin_one_cpu=True)


def _run_reads(cfg: ScenarioConfig, scenario: str, n: int, servers: int, pin_one_cpu: bool) -> ScenarioResult:
    rows: list[MetricRow] = []
    detail: dict[str, Any] = {}
    for b in cfg.baselines:
        if b == "krcore":
            for transport in ("rc", "dc"):
                res = _krcore_reads(cfg, n, servers, transport, pin_one_cpu)
                label = f"krcore-{transport}"
                rows.append(_read_row(cfg, scenario, label, n, res))
                detail[label] = res
                if transport == "rc" and cfg.mode == "sync":
                    first = res["first"]
                    rows.append(MetricRow.from_samples(scenario, "krcore-rc-mrmiss", n, cfg.payload, first,
                                                       0.0, 0, res["mem"]))
        elif b == "verbs":
            res = _verbs_reads(cfg, n, servers)
            rows.append(_read_row(cfg, scenario, "verbs", n, res))
            detail["verbs"] = res
    return ScenarioResult(rows, detail=detail)


def _read_row(cfg: ScenarioConfig, scenario: str, label: str, n: int, res: dict[str, Any]) -> MetricRow:
    return MetricRow.from_samples(scenario, label, n, cfg.payload, res["lat"],
                                  _throughput(res["ops"], res["span"]), res["wire_ops"], res["mem"])


def _client_rng(cfg: ScenarioConfig, i: int) -> random.Random:
    return random.Random(cfg.seed * 1_000_003 + i)


def _verbs_reads(cfg: ScenarioConfig, n: int, servers: int) -> dict[str, Any]:
    bp = cfg.calibration.bench
    chosts = _client_hosts(n, servers)
    env = _Fabric(cfg.calibration, servers + chosts)
    clock = env.clock
    payload = cfg.payload
    targets = []
    for s in range(servers):
        base, size = _server_region(env.nics[s], payload)
        targets.append(_Target(base, env.nics[s].register_mr(base, size).rkey))
    clients = []
    for i in range(n):
        nic = env.nics[servers + i % chosts]
        qps = [_wire_pair(clock, nic, env.nics[s]) for s in range(servers)]
        buf = nic.memory.alloc(max(payload, 64) * bp.batch)
        nic.register_mr(buf, max(payload, 64) * bp.batch)
        clients.append((nic, qps, buf))
    lat: list[int] = []
    t0, mark = clock.now, env.fabric.mark()

    def sync_client(i: int):
        nic, qps, buf = clients[i]
        rng = _client_rng(cfg, i)
        for k in range(bp.ops):
            s = rng.randrange(servers)
            start = clock.now
            nic.post_send(qps[s], [WorkRequest(Opcode.READ, k, True, (buf, payload), (targets[s].addr, targets[s].rkey))])
            yield from _wait_raw(nic, qps[s])
            lat.append(clock.now - start)

    def async_client(i: int):
        nic, qps, buf = clients[i]
        rng = _client_rng(cfg, i)
        for k in range(max(1, bp.ops // bp.batch)):
            s = rng.randrange(servers)
            start = clock.now
            wrs = [WorkRequest(Opcode.READ, j, j == bp.batch - 1, (buf + j * max(payload, 64), payload),
                               (targets[s].addr, targets[s].rkey)) for j in range(bp.batch)]
            nic.post_send(qps[s], wrs)
            yield from _wait_raw(nic, qps[s])
            lat.append(clock.now - start)

    body = sync_client if cfg.mode == "sync" else async_client
    for i in range(n):
        clock.spawn(body(i), f"client{i}")
    clock.run_until_idle()
    ops = len(lat) * (1 if cfg.mode == "sync" else bp.batch)
    mem = sum(env.nics[servers + h].mem_bytes for h in range(chosts))
    return {"lat": lat, "first": lat[:n], "ops": ops, "span": clock.now - t0,
            "wire_ops": env.fabric.ops_since(mark), "mem": mem}


def _krcore_reads(cfg: ScenarioConfig, n: int, servers: int, transport: str, pin_one_cpu: bool) -> dict[str, Any]:
    bp = cfg.calibration.bench
    chosts = _client_hosts(n, servers)
    per_host = -(-n // chosts)
    cpus = 1 if pin_one_cpu else per_host
    cl = _cluster(cfg.calibration, servers + chosts, cpus=cpus)
    clock = cl.clock
    payload = cfg.payload
    targets = []
    for s in range(servers):
        node = cl.nodes[s]
        base, size = _server_region(node.nic, payload)
        mr = cl.run(node.register_mr(base, size))
        targets.append(_Target(base, mr.rkey))
    clients = []
    for i in range(n):
        node = cl.nodes[servers + i % chosts]
        cpu = 0 if pin_one_cpu else (i // chosts) % cpus
        if transport == "rc":
            for s in range(servers):
                if not node.cpus[cpu].rc.get(cl.nodes[s].addr):
                    cl.run(node.create_rc(cpu, cl.nodes[s].addr))
        vqs = []
        for s in range(servers):
            vq = cl.run(node.vqp_create(cpu))
            cl.run(node.qconnect(vq, cl.nodes[s].addr))
            vqs.append(vq)
        size = max(payload, 64) * bp.batch
        buf = node.nic.memory.alloc(size)
        cl.run(node.register_mr(buf, size))
        clients.append((node, vqs, buf))
    lat: list[int] = []
    first: list[int] = []
    t0, mark = clock.now, cl.fabric.mark()

    def sync_client(i: int):
        node, vqs, buf = clients[i]
        rng = _client_rng(cfg, i)
        used: set[int] = set()
        for k in range(bp.ops):
            s = rng.randrange(servers)
            start = clock.now
            yield from node.post_send(vqs[s], [WorkRequest(Opcode.READ, k, True, (buf, payload),
                                                           (targets[s].addr, targets[s].rkey))])
            yield from node.wait_completion(vqs[s])
            # the first request to each server pays the MR check; keep it out of the steady-state sample
            (lat if s in used else first).append(clock.now - start)
            used.add(s)

    def async_client(i: int):
        node, vqs, buf = clients[i]
        rng = _client_rng(cfg, i)
        for k in range(max(1, bp.ops // bp.batch)):
            s = rng.randrange(servers)
            start = clock.now
            wrs = [WorkRequest(Opcode.READ, j, j == bp.batch - 1, (buf + j * max(payload, 64), payload),
                               (targets[s].addr, targets[s].rkey)) for j in range(bp.batch)]
            yield from node.post_send(vqs[s], wrs)
            yield from node.wait_completion(vqs[s])
            lat.append(clock.now - start)

    body = sync_client if cfg.mode == "sync" else async_client
    for i in range(n):
        clock.spawn(body(i), f"client{i}")
    clock.run_until_idle()
    ops = (len(lat) + len(first)) * (1 if cfg.mode == "sync" else bp.batch)
    mem = sum(cl.nodes[servers + h].nic.mem_bytes for h in range(chosts))
    return {"lat": lat or first, "first": first or lat, "ops": ops, "span": clock.now - t0,
            "wire_ops": cl.fabric.ops_since(mark), "mem": mem,
            "reconnects": sum(pq.phys.reconnects for nd in cl.nodes for sub in nd.cpus for pq in sub.dc)}


# -- pool sweep -------------------------------------------------------------------------------

def run_pool_sweep(cfg: ScenarioConfig) -> ScenarioResult:
    bp = cfg.calibration.bench
    targets = cfg.servers or bp.pool_targets
    rows = []
    detail: dict[str, Any] = {}
    rc = _pool_batch(cfg, targets, None)
    rows.append(MetricRow.from_samples("pool_sweep", "krcore-rc", targets, cfg.payload, rc["lat"],
                                       _throughput(rc["ops"], rc["span"]), rc["wire_ops"], rc["mem"]))
    detail["rc"] = rc
    for pool in bp.int_list("pool_sizes"):
        if pool <= 0:
            continue
        dc = _pool_batch(cfg, targets, pool)
        rows.append(MetricRow.from_samples("pool_sweep", "krcore-dc", pool, cfg.payload, dc["lat"],
                                           _throughput(dc["ops"], dc["span"]), dc["wire_ops"], dc["mem"]))
        detail[f"dc{pool}"] = dc
    return ScenarioResult(rows, detail=detail)


def _pool_batch(cfg: ScenarioConfig, n_targets: int, pool: Optional[int]) -> dict[str, Any]:
    """One kernel thread issuing batches of READs to random targets, on RC QPs or a DC pool."""
    bp = cfg.calibration.bench
    env = _Fabric(cfg.calibration, 1 + n_targets)
    clock = env.clock
    me = env.nics[0]
    payload = max(cfg.payload, 1)
    regions, routes = [], []
    for t in range(n_targets):
        nic = env.nics[1 + t]
        base, size = _server_region(nic, payload)
        regions.append(_Target(base, nic.register_mr(base, size).rkey))
        routes.append(DctRoute.of(nic.create_dct_target(NodeId(nic.gid, 0), 0xD00D + t)))
    buf = me.memory.alloc(payload * bp.batch)
    me.register_mr(buf, payload * bp.batch)
    if pool is None:
        qps = [_wire_pair(clock, me, env.nics[1 + t]) for t in range(n_targets)]
    else:
        qps = [clock.call(me.create_qp(QPKind.DC)) for _ in range(pool)]
    rng = random.Random(cfg.seed)
    lat: list[int] = []
    t0, mark = clock.now, env.fabric.mark()

    def read(j: int, t: int, signaled: bool) -> WorkRequest:
        return WorkRequest(Opcode.READ, j, signaled, (buf + j * payload, payload),
                           (regions[t].addr, regions[t].rkey), dct_route=None if pool is None else routes[t])

    def run():
        for _ in range(bp.pool_reps):
            picks = [rng.randrange(n_targets) for _ in range(bp.batch)]
            start = clock.now
            if pool is None:
                for j, t in enumerate(picks):
                    yield bp.post_cpu_ns + bp.per_wr_cpu_ns
                    me.post_send(qps[t], [read(j, t, True)])
                for t in picks:
                    yield from _wait_raw(me, qps[t])
                    yield bp.poll_cpu_ns
            else:
                lanes: list[list[int]] = [[] for _ in range(pool)]
                for j in range(bp.batch):
                    lanes[j % pool].append(j)
                used = [q for q in range(pool) if lanes[q]]
                for q in used:
                    yield bp.post_cpu_ns + bp.per_wr_cpu_ns * len(lanes[q])
                    me.post_send(qps[q], [read(j, picks[j], j == lanes[q][-1]) for j in lanes[q]])
                for q in used:
                    yield from _wait_raw(me, qps[q])
                    yield bp.poll_cpu_ns
            lat.append(clock.now - start)

    clock.call(run())
    return {"lat": lat, "ops": bp.batch * bp.pool_reps, "span": clock.now - t0,
            "wire_ops": env.fabric.ops_since(mark), "mem": me.mem_bytes,
            "reconnects": sum(q.reconnects for q in qps)}


# -- memory model -------------------------------------------------------------------------------

def memory_lite(n: int, cost: NicCostModel) -> int:
    return n * cost.rc_qp_mem_bytes


def memory_krcore(n: int, cost: NicCostModel, dc_qps: int) -> int:
    return dc_qps * cost.dc_qp_mem_bytes + n * 12


def run_memory_model(cfg: ScenarioConfig) -> ScenarioResult:
    cal = cfg.calibration
    dc_qps = cal.bench.dc_pool_cpus * cal.vplane.dc_pool_size
    rows = []
    for n in cal.bench.int_list("memory_sweep"):
        for b in cfg.baselines:
            mem = memory_krcore(n, cal.nic, dc_qps) if b == "krcore" else memory_lite(n, cal.nic)
            rows.append(MetricRow("memory_model", b, n, 0, 0, 0, 0, 0.0, 0, mem))
    return ScenarioResult(rows, detail={"dc_qps": dc_qps})


# -- transfer demo ---------------------------------------------------------------------------------

def run_transfer_demo(cfg: ScenarioConfig) -> ScenarioResult:
    base = _transfer_stream(cfg, transfer=False)
    moved = _transfer_stream(cfg, transfer=True)
    rows = [MetricRow.from_samples("transfer_demo", "krcore-dc", 1, cfg.payload, base["lat"],
                                   _throughput(len(base["lat"]), base["span"]), base["wire_ops"], base["mem"]),
            MetricRow.from_samples("transfer_demo", "krcore-dc-to-rc", 1, cfg.payload, moved["lat"],
                                   _throughput(len(moved["lat"]), moved["span"]), moved["wire_ops"], moved["mem"])]
    detail = {"trace_equal": base["trace"] == moved["trace"], "transferred": moved["transferred"],
              "before": base, "after": moved}
    return ScenarioResult(rows, detail=detail)


def _transfer_stream(cfg: ScenarioConfig, transfer: bool) -> dict[str, Any]:
    bp = cfg.calibration.bench
    cl = _cluster(cfg.calibration, 2)
    clock = cl.clock
    a, b = cl.nodes
    payload = max(cfg.payload, 1)
    rbase, rsize = _server_region(b.nic, payload)
    rmr = cl.run(b.register_mr(rbase, rsize))
    buf = a.nic.memory.alloc(payload * bp.batch)
    cl.run(a.register_mr(buf, payload * bp.batch))
    vq = cl.run(a.vqp_create())
    cl.run(a.qconnect(vq, b.addr))
    rng = random.Random(cfg.seed)
    trace: list[tuple[int, str]] = []
    lat: list[int] = []
    state = {"transferred": False}
    t0, mark = clock.now, cl.fabric.mark()

    def mover():
        pq = yield from a.create_rc(0, b.addr)
        state["transferred"] = yield from a.transfer_physical_qp(vq, pq)

    def stream():
        wr_id = 0
        for k in range(bp.ops // 4):
            if transfer and k == bp.ops // 8:
                clock.spawn(mover(), "mover")
            n = rng.randint(1, 4)
            wrs = []
            for j in range(n):
                wrs.append(WorkRequest(Opcode.READ, wr_id, rng.random() < 0.5 or j == n - 1,
                                       (buf + j * payload, payload), (rbase, rmr.rkey)))
                wr_id += 1
            start = clock.now
            yield from a.post_send(vq, wrs)
            for _ in [w for w in wrs if w.signaled]:
                wc = yield from a.wait_completion(vq)
                trace.append((wc.wr_id, wc.status.value))
            lat.append(clock.now - start)
        while not state["transferred"] and transfer and clock.pending():
            yield 1_000_000

    clock.call(stream())
    clock.run_until_idle()
    return {"lat": lat, "trace": trace, "span": clock.now - t0, "wire_ops": cl.fabric.ops_since(mark),
            "mem": a.nic.mem_bytes, "transferred": state["transferred"]}


# -- load spike ------------------------------------------------------------------------------------

def run_load_spike(cfg: ScenarioConfig) -> ScenarioResult:
    workers = cfg.clients or 180
    rows: list[MetricRow] = []
    timeline: list[TimelineRow] = []
    detail: dict[str, Any] = {}
    for b in cfg.baselines:
        res = _spike(cfg, workers, b)
        detail[b] = res
        timeline.extend(res["timeline"])
        rows.append(MetricRow.from_samples("load_spike", b, workers, cfg.payload, res["latencies"],
                                           res["steady_throughput"], res["wire_ops"], res["mem"]))
    return ScenarioResult(rows, timeline=timeline, detail=detail)


def _spike(cfg: ScenarioConfig, workers: int, baseline: str) -> dict[str, Any]:
    cal = cfg.calibration
    bp = cal.bench
    compute = bp.spike_compute_hosts
    mem_servers = cfg.servers or bp.spike_memory_servers
    per_host = -(-workers // compute)
    spawner_done: list[int] = []
    ready: dict[int, int] = {}
    # (time, worker, fraction of its connections on RC) for krcore
    rc_share: list[tuple[int, int, float]] = []
    if baseline == "krcore":
        cl = _cluster(cal, compute + mem_servers, cpus=per_host)
        clock, fabric = cl.clock, cl.fabric
        t0, mark = clock.now, fabric.mark()
        promoters = [Promoter(cl.nodes[h], copy.copy(cal.bgd)) for h in range(compute)]
        vqps: dict[int, list[VirtualQP]] = {}
        addrs = [cl.nodes[compute + s].addr for s in range(mem_servers)]

        def worker(w: int):
            node = cl.nodes[w % compute]
            cpu = w // compute
            vqps[w] = yield from node.qconnect_many([a for a in addrs for _ in range(bp.spike_qps_per_server)], cpu)
            ready[w] = clock.now - t0
            rate = bp.rc_cap_per_s / workers
            per_tick = max(1, int(rate * bp.tick_ns / NS_PER_S / mem_servers))
            promoter = promoters[w % compute]
            pending = set(addrs)
            while pending:
                for a in sorted(pending):
                    promoter.record(cpu, a, per_tick)
                    if node.cpus[cpu].rc.get(a) and all(vq.qp.kind is QPKind.RC for vq in vqps[w] if vq.peer_addr == a):
                        pending.discard(a)
                        on_rc = sum(1 for vq in vqps[w] if vq.qp.kind is QPKind.RC)
                        rc_share.append((clock.now - t0, w, on_rc / len(vqps[w])))
                if clock.now - t0 > bp.spike_duration_ns:
                    break
                yield bp.tick_ns

    else:
        env = _Fabric(cal, compute + mem_servers)
        clock, fabric = env.clock, env.fabric
        t0, mark = clock.now, fabric.mark()
        servers = [ConnServer(env.nics[compute + s], bp.mesh_handlers) for s in range(mem_servers)]

        def worker(w: int):
            nic = env.nics[w % compute]
            if baseline == "verbs":
                yield from nic.init_driver()
            for s in range(mem_servers):
                for _ in range(bp.spike_qps_per_server):
                    yield from rc_connect(nic, servers[s])
            ready[w] = clock.now - t0

    def spawner():
        for w in range(workers):
            yield bp.process_start_ns
            spawner_done.append(clock.now - t0)
            clock.spawn(worker(w), f"worker{w}")

    clock.spawn(spawner(), "spawner")
    clock.run_until_idle()
    startup = max(ready.values())
    mem = sum(n.mem_bytes for n in (cl.nics[:compute] if baseline == "krcore" else env.nics[:compute]))
    timeline, latencies, steady = _spike_timeline(cfg, baseline, workers, spawner_done, ready, rc_share, startup)
    return {"startup_ns": startup, "ready": ready, "timeline": timeline, "latencies": latencies,
            "steady_throughput": steady, "wire_ops": fabric.ops_since(mark), "mem": mem}


def _spike_timeline(cfg: ScenarioConfig, baseline: str, workers: int, forked: list[int], ready: dict[int, int],
                    rc_share: list[tuple[int, int, float]], startup: int
                    ) -> tuple[list[TimelineRow], list[int], float]:
    """Fluid traffic model on a fixed tick, driven by the simulated readiness and promotion times."""
    cal = cfg.calibration
    bp = cal.bench
    per_worker = {"verbs": bp.rc_cap_per_s, "lite": bp.lite_cap_per_s}.get(baseline, bp.dc_cap_per_s) / workers
    rc_rate = bp.rc_cap_per_s / workers
    base_lat = _op_latency(cal, baseline)
    share_at: dict[int, list[tuple[int, float]]] = {}
    for t, w, f in sorted(rc_share):
        share_at.setdefault(w, []).append((t, f))
    ticks = bp.spike_duration_ns // bp.tick_ns
    per_bucket = max(1, bp.bucket_ns // bp.tick_ns)
    rows: list[TimelineRow] = []
    all_lat: list[int] = []
    bucket_ops = 0.0
    bucket_lat: list[int] = []
    last_full = 0.0
    order = sorted(ready)
    for tick in range(ticks):
        now = tick * bp.tick_ns
        ops = 0.0
        n_ready = 0
        for w in order:
            if w < len(forked) and forked[w] > now:
                continue
            if ready[w] > now:
                # requests routed to a forked worker queue until its connections exist
                wait = ready[w] - now
                bucket_lat.append(wait + base_lat["rc"])
                continue
            n_ready += 1
            if baseline == "krcore":
                f = 0.0
                for t, frac in share_at.get(w, ()):
                    if t <= now:
                        f = frac
                rate = per_worker * (1 - f) + rc_rate * f
                bucket_lat.append(int(base_lat["dc"] * (1 - f) + base_lat["rc"] * f))
            else:
                rate = per_worker
                bucket_lat.append(base_lat["rc"])
            ops += rate * bp.tick_ns / NS_PER_S
        bucket_ops += ops
        if n_ready == workers:
            last_full = ops * NS_PER_S / bp.tick_ns
        if (tick + 1) % per_bucket == 0:
            p99 = nearest_rank(bucket_lat, 99) if bucket_lat else 0
            rows.append(TimelineRow(baseline, (tick + 1 - per_bucket) * bp.tick_ns, n_ready,
                                    bucket_ops * NS_PER_S / bp.bucket_ns, p99, startup))
            all_lat.extend(bucket_lat)
            bucket_ops = 0.0
            bucket_lat = []
    return rows, all_lat or [0], last_full


def _op_latency(cal: Calibration, baseline: str) -> dict[str, int]:
    cost = cal.nic
    wire = cal.fabric.wire_latency_ns
    raw = cost.data_op_base_ns + cost.transfer_ns(cal.bench.read_payload) + 2 * wire
    sys = cal.fabric.syscall_overhead_ns
    if baseline == "verbs":
        return {"rc": raw, "dc": raw}
    return {"rc": raw + sys, "dc": raw + sys + cost.dc_op_extra_ns}


RUNNERS: dict[str, Callable[[ScenarioConfig], ScenarioResult]] = {
    "single_connect": run_single_connect,
    "full_mesh": run_full_mesh,
    "data_path": run_data_path,
    "pool_sweep": run_pool_sweep,
    "tail_latency": run_tail_latency,
    "load_spike": run_load_spike,
    "memory_model": run_memory_model,
    "transfer_demo": run_transfer_demo,
}


def run(cfg: ScenarioConfig) -> ScenarioResult:
    cfg.validate()
    return RUNNERS[cfg.scenario](cfg)

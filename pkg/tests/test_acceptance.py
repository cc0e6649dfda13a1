"""The thirteen primary acceptance criteria, one test (or parametrized group) each.

A summary line per criterion is printed at the end of the session by conftest.py.
Scenario-based criteria read their numbers back from CSV before checking them.
"""

import random

import pytest
from hypothesis import given, settings, strategies as st

from vqpsim.bench import checks
from vqpsim.bench.config import ScenarioConfig
from vqpsim.bench.metrics import CSV_HEADER, TIMELINE_HEADER, read_rows, read_timeline, rows_to_csv
from vqpsim.bench.scenarios import run
from vqpsim.cluster import Cluster, ClusterConfig
from vqpsim.nic import Opcode, QPState, WcStatus, WorkRequest
from vqpsim.simcore import NodeId
from vqpsim.vplane import RequestRejected

from workloads import (random_case, random_stream, run_raw_shared, run_raw_stream, run_shared, run_transfer_stream,
                       run_vqp_stream)

SHARED_CASES = 10_000
STREAMS = 1_000


def _csv_rows(scenario, **top):
    return read_rows(rows_to_csv(run(ScenarioConfig.build(scenario, **top)).rows, CSV_HEADER))


def _assert_all(results):
    bad = [r.line() for r in results if not r.passed]
    assert not bad, "\n".join(bad)


# -- 1 -----------------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.data())
def test_criterion_01_cold_connect_two_reads_warm_zero(hosts, data):
    cl = Cluster(ClusterConfig(hosts=hosts, meta_servers=data.draw(st.integers(1, 3))))
    src = cl.nodes[0]
    dst = cl.nodes[data.draw(st.integers(1, hosts - 1))]
    cpu = data.draw(st.integers(0, src.config.cpus - 1))
    cold = cl.run(src.vqp_create(cpu))
    mark = cl.fabric.mark()
    cl.run(src.qconnect(cold, dst.addr))
    assert cl.fabric.ops_since(mark, "READ") == 2 and cl.fabric.ops_since(mark) == 2
    warm = cl.run(src.vqp_create(data.draw(st.integers(0, src.config.cpus - 1))))
    mark = cl.fabric.mark()
    cl.run(src.qconnect(warm, dst.addr))
    assert cl.fabric.ops_since(mark) == 0


# -- 2, 3, 4 -------------------------------------------------------------------------------

def test_criterion_02_connection_latency_ratios():
    _assert_all(checks.check_connect(_csv_rows("single_connect")))


def test_criterion_03_full_mesh_240_workers():
    rows = _csv_rows("full_mesh")
    assert {r.clients for r in rows} == {240}
    _assert_all(checks.check_full_mesh(rows, checks.mesh_totals(rows)))


def test_criterion_04_memory_model():
    _assert_all(checks.check_memory(_csv_rows("memory_model")))


# -- 5, 6 ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def shared_runs():
    outcomes = []
    for seed in range(SHARED_CASES):
        case = random_case(random.Random(seed))
        outcomes.append((seed, case, run_shared(case)))
    return outcomes


def test_criterion_05_safety_under_sharing(shared_runs):
    failures = [seed for seed, _, out in shared_runs if out.err or not out.shared or not out.rejected_ok]
    assert not failures, f"physical QP broke or was not shared for seeds {failures[:10]}"
    # the same streams on a raw DC QP without the kernel in front
    raw_errs = 0
    for seed, case, _ in shared_runs:
        if run_raw_shared(case):
            raw_errs += 1
            break
    assert raw_errs >= 1


def test_criterion_06_dispatch_totality_and_fifo(shared_runs):
    for seed, _, out in shared_runs:
        for i, want in out.expected.items():
            got = out.got[i]
            assert [w for w, _ in got] == want, f"seed {seed} vqp {i}"
            assert all(s is WcStatus.OK for _, s in got), f"seed {seed} vqp {i}"
        assert out.uncomp == 0, f"seed {seed}"
        assert out.slots_posted == out.slots_freed == out.posted, f"seed {seed}"


# -- 7, 8 ------------------------------------------------------------------------------------

def test_criterion_07_oracle_equivalence():
    for seed in range(STREAMS):
        stream = random_stream(random.Random(seed))
        raw = run_raw_stream(stream)
        assert run_vqp_stream(stream) == raw, f"seed {seed}"
        assert len(raw) == sum(r.signaled for reqs in stream.posts for r in reqs)


def test_criterion_08_transfer_transparency():
    for seed in range(STREAMS):
        rng = random.Random(10_000 + seed)
        stream = random_stream(rng)
        gaps = [rng.randint(0, 5_000) for _ in stream.posts]
        switch_at = rng.randint(0, sum(gaps) + 10_000)
        oracle = run_transfer_stream(stream, gaps, None)
        moved = run_transfer_stream(stream, gaps, switch_at)
        assert moved.transferred, f"seed {seed}"
        assert moved.trace == oracle.trace, f"seed {seed}"
        assert [w for w, _ in moved.trace] == moved.expected, f"seed {seed}"
        assert moved.fenced, f"seed {seed}: old-QP completions outstanding at the swap"


# -- 9 ---------------------------------------------------------------------------------------

def _zero_copy_ops(size):
    cl = Cluster(ClusterConfig(hosts=2))
    a, b = cl.nodes
    buf = 1 << 17
    abase, bbase = a.nic.memory.alloc(buf), b.nic.memory.alloc(buf)
    cl.run(a.register_mr(abase, buf))
    cl.run(b.register_mr(bbase, buf))
    srv = cl.run(b.vqp_create())
    addr = NodeId(b.gid, 9)
    cl.run(b.qbind(srv, addr))
    cl.clock.run_until_idle()
    cli = cl.run(a.vqp_create())
    cl.run(a.qconnect(cli, addr))
    b.post_recv_virtualized(srv, [(1, bbase, buf)])
    payload = bytes(i % 251 for i in range(size))
    a.nic.memory.write(abase, payload)
    mark = cl.fabric.mark()
    cl.run(a.post_send(cli, [WorkRequest(Opcode.SEND, 1, True, local=(abase, size))]))
    assert cl.run(a.wait_completion(cli)).status is WcStatus.OK
    msgs = cl.run(b.qpop_msgs(srv))
    assert msgs[0].data == payload
    return cl.fabric.ops_since(mark, "SEND"), cl.fabric.ops_since(mark, "READ"), cl.fabric.ops_since(mark)


@pytest.mark.parametrize("size", [1, 4096, 16 * 1024, 16 * 1024 + 1, 100_000])
def test_criterion_09_zero_copy_wire_ops(size):
    threshold = ClusterConfig().vplane.recv_buf_bytes
    sends, reads, total = _zero_copy_ops(size)
    if size > threshold:
        assert (sends, reads, total) == (1, 1, 2)
    else:
        assert (sends, reads, total) == (1, 0, 1)


# -- 10 --------------------------------------------------------------------------------------

def _lease_post(offset):
    """Cache a remote MR, deregister it at that same instant, then post ``offset`` ns later."""
    cl = Cluster(ClusterConfig(hosts=2))
    a, b = cl.nodes
    abase, bbase = a.nic.memory.alloc(64), b.nic.memory.alloc(64)
    cl.run(a.register_mr(abase, 64))
    mr = cl.run(b.register_mr(bbase, 64))
    vq = cl.run(a.vqp_create())
    cl.run(a.qconnect(vq, b.addr))
    cl.run(a.mrstore.get(b.gid, mr.rkey))
    t0 = cl.clock.now
    assert a.mrstore.entries[(b.gid, mr.rkey)][1] == t0
    b.deregister_mr(mr)
    cl.clock.run_until(t0 + a.config.lease_period_ns + offset)
    wr = WorkRequest(Opcode.READ, 1, True, local=(abase, 8), remote=(bbase, mr.rkey))
    checked_at = cl.clock.now
    try:
        cl.run(a.post_send_virtualized(vq, [wr]))
    except RequestRejected:
        assert vq.qp.phys.state is QPState.RTS
        return checked_at - t0, None
    return checked_at - t0, cl.run(a.wait_completion(vq)).status


def test_criterion_10_lease_boundary():
    lease = ClusterConfig().vplane.lease_period_ns
    assert _lease_post(-1) == (lease - 1, WcStatus.OK)
    assert _lease_post(0) == (lease, None)
    assert _lease_post(1) == (lease + 1, None)


# -- 11, 12, 13 --------------------------------------------------------------------------------

def test_criterion_11_data_path_deltas():
    _assert_all(checks.check_data_path(_csv_rows("data_path")))


def test_criterion_12_pool_sweep_shape():
    _assert_all(checks.check_pool_sweep(_csv_rows("pool_sweep")))


def test_criterion_13_load_spike_timeline():
    first = run(ScenarioConfig.build("load_spike", seed=7))
    second = run(ScenarioConfig.build("load_spike", seed=7))
    texts = [(rows_to_csv(r.rows, CSV_HEADER), rows_to_csv(r.timeline, TIMELINE_HEADER)) for r in (first, second)]
    timeline = read_timeline(texts[0][1])
    _assert_all(checks.check_load_spike(timeline, texts[0] == texts[1]))

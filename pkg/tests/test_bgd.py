from vqpsim.bgd import BgdConfig, LruState, Promoter, TrafficSampler
from vqpsim.cluster import Cluster, ClusterConfig
from vqpsim.nic import Opcode, QPKind, WorkRequest
from vqpsim.simcore import NodeId, SimClock, make_gid

PEER = NodeId(make_gid(1))


def test_threshold_63_vs_64():
    s = TrafficSampler(SimClock(), 1_000_000_000, 64)
    assert not s.record(0, PEER, 63)
    assert s.record(0, PEER, 1)
    # fires once until released
    assert not s.record(0, PEER, 500)
    s.release(0, PEER)
    assert s.record(0, PEER, 64)


def test_window_reset_without_promotion():
    clock = SimClock()
    s = TrafficSampler(clock, 1_000, 64)
    assert not s.record(0, PEER, 60)
    clock.run_until(1_000)
    assert not s.record(0, PEER, 60)
    assert s.counts[(0, PEER)] == 60


def test_counters_are_per_cpu_and_peer():
    s = TrafficSampler(SimClock(), 10**9, 2)
    assert not s.record(0, PEER)
    assert not s.record(1, PEER)
    assert not s.record(0, NodeId(make_gid(2)))
    assert s.record(0, PEER)


class _Q:
    def __init__(self, last, qpn):
        self.last_use = last
        self.phys = type("P", (), {"qpn": qpn})()


def test_lru_victim_skips_busy():
    lru = LruState(2)
    qs = [_Q(30, 1), _Q(10, 2), _Q(20, 3)]
    assert lru.over(3) and not lru.over(2)
    assert lru.victim(qs, set()) is qs[1]
    assert lru.victim(qs, {id(qs[1])}) is qs[2]
    assert lru.victim(qs, {id(q) for q in qs}) is None


def _cluster(hosts, **bgd):
    cl = Cluster(ClusterConfig(hosts=hosts))
    a = cl.nodes[0]
    bufs = {}
    for n in cl.nodes:
        base = n.nic.memory.alloc(4096)
        bufs[n.gid] = (base, cl.run(n.register_mr(base, 4096)).rkey)
    return cl, a, Promoter(a, BgdConfig(**bgd)), bufs


def _read(a, bufs, peer, wr_id=1):
    base, rkey = bufs[peer.gid]
    return WorkRequest(Opcode.READ, wr_id, True, local=(bufs[a.gid][0], 8), remote=(base, rkey))


def test_promotion_moves_vqps_to_rc_and_later_connects_hit_rc():
    cl, a, bgd, bufs = _cluster(2)
    peer = cl.nodes[1]
    vq = cl.run(a.vqp_create())
    cl.run(a.qconnect(vq, peer.addr))
    assert vq.qp.kind is QPKind.DC
    assert bgd.record(0, peer.addr, 64)
    cl.clock.run_until_idle()
    assert vq.qp.kind is QPKind.RC
    mark = cl.fabric.mark()
    vq2 = cl.run(a.vqp_create())
    cl.run(a.qconnect(vq2, peer.addr))
    assert vq2.qp is vq.qp and cl.fabric.ops_since(mark) == 0
    assert [e[1] for e in bgd.log] == ["schedule", "created", "promoted"]


def _read_latency(with_promotion):
    cl, a, bgd, bufs = _cluster(2)
    peer = cl.nodes[1]
    vq = cl.run(a.vqp_create())
    cl.run(a.qconnect(vq, peer.addr))
    cl.run(a.post_send(vq, [_read(a, bufs, peer)]))
    cl.run(a.wait_completion(vq))
    if with_promotion:
        bgd.record(0, peer.addr, 64)
    cl.clock.run_until(cl.clock.now + 100_000)
    t0 = cl.clock.now

    def fg():
        yield from a.post_send(vq, [_read(a, bufs, peer, 2)])
        yield from a.wait_completion(vq)
        return cl.clock.now - t0

    return cl.run(fg())


def test_foreground_latency_unchanged_during_creation():
    assert _read_latency(True) == _read_latency(False)


def test_capacity_17th_promotion_reclaims_exactly_lru():
    cl, a, bgd, bufs = _cluster(18, rc_capacity=16)
    peers = cl.nodes[1:]
    vqs = {}
    for p in peers:
        vq = cl.run(a.vqp_create())
        cl.run(a.qconnect(vq, p.addr))
        vqs[p.gid] = vq
    for p in peers[:16]:
        bgd.record(0, p.addr, 64)
        cl.clock.run_until_idle()
    assert len(a.cpus[0].rc_qps()) == 16
    # touch the oldest RC so the second-oldest becomes the LRU victim
    first = peers[0]
    cl.run(a.post_send(vqs[first.gid], [_read(a, bufs, first)]))
    cl.run(a.wait_completion(vqs[first.gid]))
    mem = a.nic.mem_bytes
    bgd.record(0, peers[16].addr, 64)
    cl.clock.run_until_idle()
    reclaimed = [e for e in bgd.log if e[1] == "reclaimed"]
    assert len(reclaimed) == 1 and reclaimed[0][3] == peers[1].addr
    assert len(a.cpus[0].rc_qps()) == 16
    # one RC created, one freed: net zero; the victim's own share is rc_qp_mem_bytes
    assert a.nic.mem_bytes == mem
    assert vqs[peers[1].gid].qp.kind is QPKind.DC
    # re-promotion of the reclaimed peer is allowed again
    assert bgd.record(0, peers[1].addr, 64)


def test_reclaim_refunds_memory():
    cl, a, bgd, bufs = _cluster(3, rc_capacity=1)
    for p in cl.nodes[1:]:
        vq = cl.run(a.vqp_create())
        cl.run(a.qconnect(vq, p.addr))
    bgd.record(0, cl.nodes[1].addr, 64)
    cl.clock.run_until_idle()
    mem = a.nic.mem_bytes
    pq = cl.run(a.create_rc(0, cl.nodes[2].addr))
    assert a.nic.mem_bytes == mem + a.nic.cost.rc_qp_mem_bytes
    assert cl.run(bgd.reclaim(0)) == 1
    assert a.nic.mem_bytes == mem
    assert a.cpus[0].rc_qps() == [pq]


def test_creation_failure_retries_with_backoff():
    cl, a, bgd, bufs = _cluster(2, max_retries=3)
    peer = cl.nodes[1]
    peer.nic.cost.max_qps = len(peer.nic.qps)
    mem = a.nic.mem_bytes
    t0 = cl.clock.now
    bgd.record(0, peer.addr, 64)
    cl.clock.run_until_idle()
    retries = [e[0] - t0 for e in bgd.log if e[1] == "retry"]
    create = a.nic.cost.create_qp_ns
    assert retries == [create, 2 * create + 1_000_000, 3 * create + 3_000_000]
    assert bgd.failures == 3 and a.nic.mem_bytes == mem
    assert not a.cpus[0].rc_qps()
    assert bgd.record(0, peer.addr, 64)  # released after giving up

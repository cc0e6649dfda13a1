import struct

import pytest
from hypothesis import given, strategies as st

from vqpsim.bench.config import preset
from vqpsim.cluster import Cluster, ClusterConfig
from vqpsim.nic import Opcode, QPKind, QPState, WcStatus, WorkRequest
from vqpsim.simcore import NodeId, make_gid
from vqpsim.vplane import (DESCRIPTOR, HEADER, ConnectError, Descriptor, MessageHeader, RequestRejected,
                           VPlaneConfig, VQPError, WrId)

SIZE = 1 << 17


class Env:
    def __init__(self, hosts=2, cal=None, **vp):
        if cal is not None:
            cfg = ClusterConfig(hosts=hosts, nic=cal.nic, fabric=cal.fabric, meta=cal.meta, vplane=cal.vplane)
        else:
            cfg = ClusterConfig(hosts=hosts, vplane=VPlaneConfig(**vp))
        self.cl = Cluster(cfg)
        self.clock = self.cl.clock
        self.fabric = self.cl.fabric
        self.nodes = self.cl.nodes
        self.bufs = []
        self.mrs = []
        for n in self.nodes:
            base = n.nic.memory.alloc(SIZE)
            self.bufs.append(base)
            self.mrs.append(self.cl.run(n.register_mr(base, SIZE)))

    def run(self, gen):
        return self.cl.run(gen)

    def vqp(self, i=0, to=1, cpu=0):
        node = self.nodes[i]
        vq = self.run(node.vqp_create(cpu))
        self.run(node.qconnect(vq, self.nodes[to].addr))
        return vq

    def read(self, wr_id, i=0, to=1, n=8, signaled=True, off=0):
        return WorkRequest(Opcode.READ, wr_id, signaled, local=(self.bufs[i] + off, n),
                           remote=(self.bufs[to], self.mrs[to].rkey))

    def write(self, wr_id, i=0, to=1, n=8, signaled=True):
        return WorkRequest(Opcode.WRITE, wr_id, signaled, local=(self.bufs[i], n),
                           remote=(self.bufs[to], self.mrs[to].rkey))

    def send(self, wr_id, i=0, n=8, off=0):
        return WorkRequest(Opcode.SEND, wr_id, True, local=(self.bufs[i] + off, n))


# -- encodings ------------------------------------------------------------------

@given(st.one_of(st.none(), st.integers(min_value=0, max_value=2**40)), st.integers(min_value=0, max_value=2**16 - 1))
def test_wr_id_round_trip(ref, cnt):
    assert WrId.decode(WrId(ref, cnt).encode()) == WrId(ref, cnt)


def test_wr_id_rejects_oversized_count():
    with pytest.raises(ValueError):
        WrId(1, 1 << 16).encode()


def test_header_layout_is_bit_exact():
    sender = NodeId(make_gid(7), 0x1234)
    raw = MessageHeader(sender, 0xA1B2C3D4, 0x1122334455667788, True, 65536).pack(b"tail")
    assert HEADER.size == 37 and DESCRIPTOR.size == 16
    assert raw[0:2] == struct.pack("<H", 0x4B52)
    assert raw[2:18] == sender.gid
    assert raw[18:20] == struct.pack("<H", 0x1234)
    assert raw[20:24] == struct.pack("<I", 0xA1B2C3D4)
    assert raw[24:32] == struct.pack("<Q", 0x1122334455667788)
    assert raw[32] == 1
    assert raw[33:37] == struct.pack("<I", 65536)
    assert raw[37:] == b"tail"
    header, body = MessageHeader.unpack(raw)
    assert header.sender == sender and header.zero_copy and body == b"tail"
    d = Descriptor(0xDEADBEEF, 4096, 9).pack()
    assert d == struct.pack("<QII", 0xDEADBEEF, 4096, 9)


# -- control path -------------------------------------------------------------------

def test_create_gives_distinct_unconnected_vqps():
    e = Env()
    a = e.nodes[0]
    v1 = e.run(a.vqp_create())
    v2 = e.run(a.vqp_create())
    assert v1.id != v2.id and v1.qp is None and v2.qp is None


def test_cold_connect_is_two_reads_warm_is_none():
    e = Env(cal=preset("fig3b"))
    a, b = e.nodes
    mark, t0 = e.fabric.mark(), e.clock.now
    vq = e.run(a.vqp_create())
    e.run(a.qconnect(vq, b.addr))
    assert e.fabric.ops_since(mark) == 2 and e.fabric.ops_since(mark, "READ") == 2
    assert abs(e.clock.now - t0 - 5_400) <= 540
    mark, t0 = e.fabric.mark(), e.clock.now
    vq2 = e.run(a.vqp_create())
    e.run(a.qconnect(vq2, b.addr))
    assert e.fabric.ops_since(mark) == 0
    assert e.clock.now - t0 == 900
    assert vq.dct_meta == vq2.dct_meta == b.targets[0]


def test_concurrent_cold_connects_share_one_lookup():
    e = Env()
    a, b = e.nodes
    vqs = [e.run(a.vqp_create()) for _ in range(5)]
    mark = e.fabric.mark()
    for vq in vqs:
        e.clock.spawn(a.qconnect(vq, b.addr))
    e.clock.run_until_idle()
    assert e.fabric.ops_since(mark, "READ") == 2 and a.dccache.lookups == 1
    assert all(vq.qp is not None for vq in vqs)


def test_rc_is_preferred_when_present():
    e = Env()
    a, b = e.nodes
    pq = e.run(a.create_rc(0, b.addr))
    mark = e.fabric.mark()
    vq = e.vqp()
    assert vq.qp is pq and e.fabric.ops_since(mark) == 0


def test_connect_errors():
    e = Env()
    a, b = e.nodes
    vq = e.run(a.vqp_create())
    with pytest.raises(ConnectError):
        e.run(a.qconnect(vq, NodeId(make_gid(55))))
    e.run(a.qconnect(vq, b.addr))
    e.run(a.qconnect(vq, b.addr))  # same address: no-op
    with pytest.raises(ConnectError):
        e.run(a.qconnect(vq, NodeId(b.gid, 3)))
    with pytest.raises(VQPError):
        e.run(a.vqp_create(cpu=4))


def test_dc_pool_is_round_robin_and_per_cpu():
    e = Env(cpus=2, dc_pool_size=3)
    a = e.nodes[0]
    qps = [e.vqp(cpu=0).qp for _ in range(4)]
    assert qps[0] is qps[3] and len({id(q) for q in qps[:3]}) == 3
    other = e.vqp(cpu=1).qp
    assert other in a.cpus[1].dc and other not in a.cpus[0].dc


# -- posting and polling ---------------------------------------------------------------

def test_signaled_read_returns_user_wr_id():
    e = Env()
    a = e.nodes[0]
    e.nodes[1].nic.memory.write(e.bufs[1], b"12345678")
    vq = e.vqp()
    e.run(a.post_send(vq, [e.read(42)]))
    assert [(c.wr_id, c.ready) for c in vq.comp_queue] == [(42, False)]
    wc = e.run(a.wait_completion(vq))
    assert (wc.wr_id, wc.status) == (42, WcStatus.OK)
    assert a.nic.memory.read(e.bufs[0], 8) == b"12345678"
    assert a.poll_cq_virtualized(vq) is None


def test_unsignaled_tail_is_forced_and_frees_all():
    e = Env()
    a = e.nodes[0]
    vq = e.vqp()
    pq = vq.qp
    e.run(a.post_send(vq, [e.write(i, signaled=False) for i in range(3)]))
    assert pq.uncomp == 3 and not vq.comp_queue
    e.clock.run_until_idle()
    assert len(pq.phys.cq) == 1
    assert WrId.decode(pq.phys.cq[0].wr_id) == WrId(None, 3)
    assert a.poll_inner(pq)[0] == WrId(None, 3)
    assert pq.uncomp == 0


def test_injected_signal_of_five():
    e = Env()
    a = e.nodes[0]
    vq = e.vqp()
    pq = vq.qp
    e.run(a.post_send(vq, [e.write(i, signaled=False) for i in range(5)]))
    e.clock.run_until_idle()
    code, _ = a.poll_inner(pq)
    assert code == WrId(None, 5) and pq.uncomp == 0 and not vq.comp_queue
    assert a.poll_inner(pq) is None


def test_signaled_after_unsignaled_frees_both():
    e = Env()
    a = e.nodes[0]
    vq = e.vqp()
    e.run(a.post_send(vq, [e.write(1, signaled=False), e.read(2)]))
    e.clock.run_until_idle()
    assert WrId.decode(vq.qp.phys.cq[0].wr_id) == WrId(vq.id, 2)


def test_full_queue_drains_before_posting():
    e = Env(qp_depths=(4, 4, 0))
    a = e.nodes[0]
    vq = e.vqp()
    e.run(a.post_send(vq, [e.read(i) for i in range(4)]))
    assert vq.qp.uncomp == 4
    polls = a.stats["drain_polls"]
    e.run(a.post_send(vq, [e.read(9)]))
    assert a.stats["drain_polls"] > polls
    assert vq.qp.phys.state is QPState.RTS


def test_long_list_is_segmented_in_order():
    e = Env(qp_depths=(3, 5, 0))
    a = e.nodes[0]
    vq = e.vqp()
    e.run(a.post_send(vq, [e.read(i) for i in range(10)]))
    got = [e.run(a.wait_completion(vq)).wr_id for _ in range(10)]
    assert got == list(range(10)) and vq.qp.phys.state is QPState.RTS


def test_cross_dispatch_between_sharing_vqps():
    e = Env(dc_pool_size=1)
    a = e.nodes[0]
    va, vb = e.vqp(), e.vqp()
    assert va.qp is vb.qp
    e.run(a.post_send(va, [e.read(1)]))
    e.run(a.post_send(vb, [e.read(2)]))
    e.clock.run_until_idle()
    assert a.poll_cq_virtualized(vb) is None  # polls A's completion, marks A Ready
    assert va.comp_queue[0].ready
    assert a.poll_cq_virtualized(va).wr_id == 1
    assert a.poll_cq_virtualized(vb).wr_id == 2


def test_rejections_post_nothing():
    e = Env()
    a = e.nodes[0]
    vq = e.vqp()
    mark = e.fabric.mark()
    bad = WorkRequest(Opcode.READ, 5, True, local=(e.bufs[0], 8), remote=(e.bufs[1], 0xBAD))
    with pytest.raises(RequestRejected) as info:
        e.run(a.post_send(vq, [e.read(4), bad]))
    assert info.value.index == 1
    assert not vq.comp_queue and vq.qp.uncomp == 0
    # only MR checks against the meta server; nothing reaches the peer
    assert not [op for op in e.fabric.tap[mark:] if op.dst == e.nodes[1].gid]
    with pytest.raises(RequestRejected):
        e.run(a.post_send(vq, [WorkRequest("CAS", 1, True, local=(e.bufs[0], 8), remote=(e.bufs[1], 1))]))
    with pytest.raises(RequestRejected):
        e.run(a.post_send(vq, [WorkRequest(Opcode.WRITE, 1, True, local=(0x20, 8),
                                           remote=(e.bufs[1], e.mrs[1].rkey))]))
    with pytest.raises(VQPError):
        e.run(a.post_send(vq, []))


def test_mr_check_cached_after_first_request():
    e = Env()
    a = e.nodes[0]
    vq = e.vqp()
    mark = e.fabric.mark()
    e.run(a.post_send(vq, [e.read(1)]))
    first = e.fabric.ops_since(mark, "READ")
    e.run(a.wait_completion(vq))
    mark = e.fabric.mark()
    e.run(a.post_send(vq, [e.read(2)]))
    e.run(a.wait_completion(vq))
    assert first == 3 and e.fabric.ops_since(mark, "READ") == 1
    assert a.mrstore.misses == 1


def test_read_after_dereg_and_lease_expiry_is_rejected():
    e = Env()
    a, b = e.nodes
    vq = e.vqp()
    e.run(a.post_send(vq, [e.read(1)]))
    e.run(a.wait_completion(vq))
    b.deregister_mr(e.mrs[1])
    e.clock.run_until(e.clock.now + a.config.lease_period_ns + a.config.lease_grace_ns + 1)
    with pytest.raises(RequestRejected):
        e.run(a.post_send(vq, [e.read(2)]))
    assert vq.qp.phys.state is QPState.RTS


# -- two-sided ----------------------------------------------------------------------

def _server(e, port=7):
    b = e.nodes[1]
    srv = e.run(b.vqp_create())
    addr = NodeId(b.gid, port)
    e.run(b.qbind(srv, addr))
    e.clock.run_until_idle()
    return srv, addr


def test_bind_connect_send_and_reply():
    e = Env()
    a, b = e.nodes
    srv, addr = _server(e)
    assert all(addr in s.entries for s in e.cl.meta_servers)
    a.nic.memory.write(e.bufs[0], b"ping")
    cli = e.run(a.vqp_create())
    e.run(a.qconnect(cli, addr))
    e.run(a.post_send(cli, [e.send(1, n=4)]))
    assert e.run(a.wait_completion(cli)).status is WcStatus.OK
    b.post_recv_virtualized(srv, [(100, e.bufs[1], 64)])
    msgs = e.run(b.qpop_msgs(srv))
    assert [(m.wr_id, m.byte_len, m.data) for m in msgs] == [(100, 4, b"ping")]
    # reply without any meta lookup, using the piggybacked metadata
    mark = e.fabric.mark()
    peer = msgs[0].src
    b.nic.memory.write(e.bufs[1], b"pong")
    e.run(b.post_send(peer, [e.send(2, i=1, n=4)]))
    assert e.run(b.wait_completion(peer)).status is WcStatus.OK
    assert e.fabric.ops_since(mark, "READ") == 0


def test_double_bind_fails():
    e = Env()
    b = e.nodes[1]
    _, addr = _server(e)
    other = e.run(b.vqp_create())
    with pytest.raises(VQPError):
        e.run(b.qbind(other, addr))


def test_messages_are_held_until_buffers_arrive_and_keep_order():
    e = Env()
    a, b = e.nodes
    srv, addr = _server(e)
    cli = e.run(a.vqp_create())
    e.run(a.qconnect(cli, addr))
    for k, word in enumerate((b"first", b"second!")):
        a.nic.memory.write(e.bufs[0] + 64 * k, word)
        e.run(a.post_send(cli, [e.send(k, n=len(word), off=64 * k)]))
        e.run(a.wait_completion(cli))
    assert e.run(b.qpop_msgs(srv)) == []
    b.post_recv_virtualized(srv, [(1, e.bufs[1], 32), (2, e.bufs[1] + 32, 32)])
    msgs = e.run(b.qpop_msgs(srv))
    assert [(m.wr_id, m.data) for m in msgs] == [(1, b"first"), (2, b"second!")]
    assert msgs[0].src is msgs[1].src
    with pytest.raises(ValueError):
        b.post_recv_virtualized(srv, [(3, e.bufs[1], 0)])


def test_backlog_overflow_is_receiver_not_ready():
    e = Env(recv_backlog=2)
    a = e.nodes[0]
    _, addr = _server(e)
    cli = e.run(a.vqp_create())
    e.run(a.qconnect(cli, addr))
    statuses = []
    for k in range(3):
        e.run(a.post_send(cli, [e.send(k)]))
        statuses.append(e.run(a.wait_completion(cli)).status)
    assert statuses == [WcStatus.OK, WcStatus.OK, WcStatus.RNR_ERR]
    assert cli.qp.phys.state is QPState.RTS


@pytest.mark.parametrize("size,zero_copy", [(1024, False), (16 * 1024, False), (64 * 1024, True)])
def test_zero_copy_wire_ops(size, zero_copy):
    e = Env()
    a, b = e.nodes
    srv, addr = _server(e)
    payload = bytes(range(256)) * (size // 256)
    a.nic.memory.write(e.bufs[0], payload)
    cli = e.run(a.vqp_create())
    e.run(a.qconnect(cli, addr))
    b.post_recv_virtualized(srv, [(1, e.bufs[1], SIZE)])
    mark = e.fabric.mark()
    e.run(a.post_send(cli, [e.send(1, n=size)]))
    e.run(a.wait_completion(cli))
    msgs = e.run(b.qpop_msgs(srv))
    assert e.fabric.ops_since(mark, "SEND") == 1
    assert e.fabric.ops_since(mark, "READ") == (1 if zero_copy else 0)
    assert e.fabric.ops_since(mark) == (2 if zero_copy else 1)
    assert msgs[0].data == payload and msgs[0].byte_len == size


# -- transfer ------------------------------------------------------------------------

def test_transfer_to_rc_and_abort_keeps_old_qp():
    e = Env()
    a, b = e.nodes
    vq = e.vqp()
    dc = vq.qp
    pq = e.run(a.create_rc(0, b.addr))
    e.run(a.post_send(vq, [e.read(i) for i in range(3)]))
    assert e.run(a.transfer_physical_qp(vq, pq)) is True
    assert vq.qp is pq and all(c.ready for c in vq.comp_queue)
    assert [e.run(a.wait_completion(vq)).wr_id for _ in range(3)] == [0, 1, 2]
    b.ack_transfers = False
    assert e.run(a.transfer_physical_qp(vq, dc)) is False
    assert vq.qp is pq and a.stats["transfer_aborts"] == 1
    e.run(a.post_send(vq, [e.read(7)]))
    assert e.run(a.wait_completion(vq)).wr_id == 7


def test_transfer_rejects_foreign_qp():
    e = Env(hosts=3, cpus=2)
    a = e.nodes[0]
    vq = e.vqp()
    other = e.run(a.create_rc(0, e.nodes[2].addr))
    with pytest.raises(VQPError):
        e.run(a.transfer_physical_qp(vq, other))
    with pytest.raises(VQPError):
        e.run(a.transfer_physical_qp(vq, a.cpus[1].dc[0]))


def test_rc_creation_charges_both_sides():
    e = Env()
    a, b = e.nodes
    before = a.nic.mem_bytes, b.nic.mem_bytes
    pq = e.run(a.create_rc(0, b.addr))
    cost = a.nic.cost.rc_qp_mem_bytes
    assert (a.nic.mem_bytes - before[0], b.nic.mem_bytes - before[1]) == (cost, cost)
    assert pq.kind is QPKind.RC
    a.destroy_rc(pq)
    assert (a.nic.mem_bytes, b.nic.mem_bytes) == before


def test_declare_down_evicts_cache():
    e = Env(hosts=3)
    a = e.nodes[0]
    e.vqp(to=1)
    e.vqp(to=2)
    m = a.nic.mem_bytes
    assert a.declare_down(e.nodes[1].gid) == 1
    assert a.nic.mem_bytes == m - 12 and e.nodes[1].addr not in a.dccache

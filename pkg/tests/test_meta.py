import io

import pytest

from vqpsim.cluster import Cluster, ClusterConfig
from vqpsim.meta import MetaClient, MetaNotFound, MetaServer, MrEntry, broadcast_meta
from vqpsim.nic import DctTarget, NicCostModel, Perm
from vqpsim.simcore import Fabric, NodeId, SimClock, make_gid


def _setup(lat=1000):
    clock = SimClock()
    fabric = Fabric(clock)
    fabric.config.meta_latency_ns = lat
    server = MetaServer(clock, fabric, make_gid(900))
    client = MetaClient(clock, fabric, make_gid(0), [server])
    return clock, fabric, server, client


def _one_read(lat, nbytes=17):
    cost = NicCostModel()
    return cost.data_op_base_ns + round(nbytes * cost.per_byte_ns) + 2 * lat


def test_boot_broadcasts_one_entry_per_node_to_every_server():
    cl = Cluster(ClusterConfig(hosts=10, meta_servers=2))
    for s in cl.meta_servers:
        assert len(s.entries) == 10
        assert s.store_bytes == 10 * 17


def test_thousand_nodes_is_17kb_and_rebroadcast_is_idempotent():
    clock, fabric, server, _ = _setup()
    for i in range(1000):
        node = NodeId(make_gid(i))
        server.install(node, DctTarget(i, i * 3, node))
    assert server.store_bytes == 17_000
    node = NodeId(make_gid(5))
    broadcast_meta(fabric, [server], node, DctTarget(5, 15, node))
    clock.run_until_idle()
    assert server.store_bytes == 17_000


def test_lookup_is_two_reads_without_server_cpu():
    clock, fabric, server, client = _setup(lat=1050)
    node = NodeId(make_gid(3))
    server.install(node, DctTarget(1, 2, node))
    got = clock.call(client.lookup_dct_meta(node))
    assert got == DctTarget(1, 2, node)
    assert fabric.count("READ") == 2
    assert clock.now == 2 * _one_read(1050)
    assert server.cpu_events == 0


def test_lookup_unknown_node():
    clock, _, _, client = _setup()
    with pytest.raises(MetaNotFound):
        clock.call(client.lookup_dct_meta(NodeId(make_gid(77))))


def test_mr_check_bounds_and_copy():
    clock, _, server, client = _setup()
    owner = make_gid(1)
    server.publish_mr(MrEntry(owner, 0x1001, 0x4000, 4096, Perm.READ))
    e = clock.call(client.check_remote_mr(owner, 0x1001))
    assert e.covers(0x4000, 4096, Perm.READ)
    assert not e.covers(0x4000, 4097, Perm.READ)
    assert not e.covers(0x4000, 8, Perm.WRITE)
    server.invalidate_mr(owner, 0x1001)
    # the earlier copy does not change under the client's feet
    assert e.valid
    again = clock.call(client.check_remote_mr(owner, 0x1001))
    assert not again.valid
    assert clock.call(client.check_remote_mr(owner, 0x9999)) is None


def test_rpc_baseline_costs_and_queueing():
    clock, fabric, server, client = _setup(lat=1000)
    node = NodeId(make_gid(3))
    server.install(node, DctTarget(1, 2, node))
    svc = server.config.rpc_service_ns
    assert clock.call(client.rpc_lookup_dct_meta(node)) == DctTarget(1, 2, node)
    assert clock.now == 2 * 1000 + svc
    assert server.cpu_events == 1
    # two simultaneous clients: the second waits one service time at the single worker
    other = MetaClient(clock, fabric, make_gid(1), [server])
    t0 = clock.now
    done = []

    def timed(c):
        yield from c.rpc_lookup_dct_meta(node)
        done.append(clock.now - t0)

    clock.spawn(timed(client))
    clock.spawn(timed(other))
    clock.run_until_idle()
    assert sorted(done) == [2000 + svc, 2000 + 2 * svc]
    assert server.cpu_events == 3


def test_remove_owner_and_dump():
    _, _, server, _ = _setup()
    for port in (0, 5):
        node = NodeId(make_gid(2), port)
        server.install(node, DctTarget(port, 9, node))
    buf = io.StringIO()
    server.dump_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "gid,port,dct_num,dct_key" and len(lines) == 3
    assert server.remove_owner(make_gid(2)) == 2 and server.store_bytes == 0

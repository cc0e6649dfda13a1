"""Replicated meta server: DCT metadata and the ValidMR store, read with one-sided READs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Any, Generator, Iterable, Optional, TextIO

from .nic import DctTarget, NicCostModel, Perm
from .simcore import Fabric, NodeId, Resource, SimClock

META_VALUE_BYTES = 12


class MetaNotFound(KeyError):
    pass


@dataclass
class MetaConfig:
    lookup_round_trips: int = 2
    mr_check_round_trips: int = 2
    entry_bytes: int = 17
    nic_op_ns: int = 10
    rpc_service_ns: int = 500

    def validate(self) -> None:
        for name in ("lookup_round_trips", "mr_check_round_trips", "entry_bytes", "nic_op_ns", "rpc_service_ns"):
            if getattr(self, name) <= 0:
                raise ValueError(f"meta.{name} must be positive")
        if self.entry_bytes < META_VALUE_BYTES:
            raise ValueError("meta.entry_bytes must hold the 12-byte value")


@dataclass
class MrEntry:
    owner: bytes
    rkey: int
    base: int
    length: int
    perms: Perm
    valid: bool = True

    def covers(self, addr: int, length: int, need: Perm) -> bool:
        in_range = self.base <= addr and addr + length <= self.base + self.length
        return self.valid and in_range and need in self.perms


class MetaServer:
    def __init__(self, clock: SimClock, fabric: Fabric, gid: bytes, config: Optional[MetaConfig] = None):
        self.clock = clock
        self.fabric = fabric
        self.gid = gid
        self.config = config or MetaConfig()
        self.config.validate()
        self.entries: dict[NodeId, DctTarget] = {}
        self.mr_entries: dict[tuple[bytes, int], MrEntry] = {}
        self.worker = Resource(clock, 1, name="meta-rpc")
        self.cpu_events = 0
        self.reads_served = 0
        self._nic_free = 0
        fabric.mark_meta(gid)

    @property
    def store_bytes(self) -> int:
        return len(self.entries) * self.config.entry_bytes

    def install(self, node: NodeId, target: DctTarget) -> None:
        self.entries[node] = target

    def remove_owner(self, gid: bytes) -> int:
        """Drop every entry of a host that was declared down."""
        dead = [k for k in self.entries if k.gid == gid]
        for k in dead:
            del self.entries[k]
        return len(dead)

    def publish_mr(self, entry: MrEntry) -> None:
        self.mr_entries[(entry.owner, entry.rkey)] = entry

    def invalidate_mr(self, owner: bytes, rkey: int) -> None:
        entry = self.mr_entries.get((owner, rkey))
        if entry is not None:
            entry.valid = False

    def drop_mr(self, owner: bytes, rkey: int) -> None:
        self.mr_entries.pop((owner, rkey), None)

    def _serve_read(self, arrive: int) -> int:
        """Queueing delay at the meta server's NIC for a READ arriving at ``arrive``."""
        begin = max(arrive, self._nic_free)
        self._nic_free = begin + self.config.nic_op_ns
        self.reads_served += 1
        return begin - arrive

    def dump_csv(self, out: TextIO) -> None:
        w = csv.writer(out)
        w.writerow(["gid", "port", "dct_num", "dct_key"])
        for node in sorted(self.entries):
            t = self.entries[node]
            w.writerow([node.gid.hex(), node.port, t.dct_num, t.dct_key])


def broadcast_meta(fabric: Fabric, servers: Iterable[MetaServer], node: NodeId, target: DctTarget) -> None:
    """Publish ``node``'s DCT metadata to every meta server; visible on arrival."""
    for server in servers:
        fabric.send(node.gid, server.gid, "SEND", META_VALUE_BYTES + 18, server.install, node, target)


class MetaClient:
    """A host's view of the meta servers over RC QPs pre-connected at boot."""

    def __init__(self, clock: SimClock, fabric: Fabric, gid: bytes, servers: list[MetaServer],
                 nic_cost: Optional[NicCostModel] = None):
        if not servers:
            raise ValueError("at least one meta server is required")
        self.clock = clock
        self.fabric = fabric
        self.gid = gid
        self.servers = servers
        self.nic_cost = nic_cost or NicCostModel()
        self.lookups = 0
        self.mr_checks = 0
        self.rpc_lookups = 0

    @property
    def nearest(self) -> MetaServer:
        return min(self.servers, key=lambda s: self.fabric.latency(self.gid, s.gid))

    def _one_sided_read(self, server: MetaServer, nbytes: int) -> Generator[Any, Any, None]:
        lat = self.fabric.latency(self.gid, server.gid)
        self.fabric.record(self.gid, server.gid, "READ", nbytes)
        wait = server._serve_read(self.clock.now + lat)
        yield wait + self.nic_cost.data_op_base_ns + self.nic_cost.transfer_ns(nbytes) + 2 * lat

    def lookup_dct_meta(self, target: NodeId) -> Generator[Any, Any, DctTarget]:
        server = self.nearest
        self.lookups += 1
        for _ in range(server.config.lookup_round_trips):
            yield from self._one_sided_read(server, server.config.entry_bytes)
        found = server.entries.get(target)
        if found is None:
            raise MetaNotFound(target)
        return found

    def check_remote_mr(self, owner: bytes, rkey: int) -> Generator[Any, Any, Optional[MrEntry]]:
        """Fetch the ValidMR record for ``(owner, rkey)``; ``None`` when unknown."""
        server = self.nearest
        self.mr_checks += 1
        for _ in range(server.config.mr_check_round_trips):
            yield from self._one_sided_read(server, server.config.entry_bytes)
        entry = server.mr_entries.get((owner, rkey))
        if entry is None:
            return None
        return MrEntry(entry.owner, entry.rkey, entry.base, entry.length, entry.perms, entry.valid)

    def rpc_lookup_dct_meta(self, target: NodeId) -> Generator[Any, Any, DctTarget]:
        """Baseline: a datagram RPC served by a single meta-server CPU worker."""
        server = self.nearest
        self.rpc_lookups += 1
        arrived = self.clock.signal()
        self.fabric.send(self.gid, server.gid, "SEND", 32, arrived.fire)
        yield arrived
        yield server.worker.acquire()
        server.cpu_events += 1
        yield server.config.rpc_service_ns
        found = server.entries.get(target)
        server.worker.release()
        back = self.clock.signal()
        self.fabric.send(server.gid, self.gid, "SEND", 32, back.fire)
        yield back
        if found is None:
            raise MetaNotFound(target)
        return found

"""Virtual queue pairs multiplexed over a per-CPU hybrid pool of physical QPs.

A :class:`KernelNode` is one host's kernel-side control plane. It owns the
hybrid pool (boot-time DC QPs plus RC QPs added in the background), the
DCT-metadata cache, the remote-MR store and every :class:`VirtualQP` created
on the host. Operations that take simulated time are generators to be driven
by :class:`~vqpsim.simcore.SimClock`; polling is synchronous.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Generator, Iterable, Optional, Sequence

from .meta import MetaClient, MetaNotFound, MetaServer, MrEntry, broadcast_meta
from .nic import (KERNEL_RKEY, Completion, DctRoute, DctTarget, MemoryRegion, Nic, Opcode, Perm,
                  PhysicalQP, QPKind, QPState, WcStatus, WorkRequest)
from .simcore import Fabric, NodeId, Signal, SimClock, Trigger

HEADER = struct.Struct("<H16sHIQBI")
DESCRIPTOR = struct.Struct("<QII")
MAGIC = 0x4B52
FLAG_ZERO_COPY = 0x1
DCT_ENTRY_BYTES = 12
NODE_PORT = 0
EPHEMERAL_BASE = 0x8000


class VQPError(Exception):
    pass


class ConnectError(VQPError):
    pass


class RequestRejected(VQPError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"request {index}: {reason}")
        self.index = index
        self.reason = reason


class TransferAborted(VQPError):
    pass


@dataclass
class VPlaneConfig:
    cpus: int = 1
    dc_pool_size: int = 8
    qp_depths: tuple[int, int, int] = (292, 257, 0)
    ctrl_syscall_ns: int = 375
    vqp_create_ns: int = 75
    qconnect_ns: int = 75
    recv_buf_bytes: int = 16 * 1024
    recv_backlog: int = 64
    copy_ns_per_byte: float = 0.1
    lease_period_ns: int = 1_000_000_000
    lease_grace_ns: int = 1_000_000
    transfer_ack_timeout_ns: int = 100_000
    max_vqps: int = 1 << 20

    def validate(self) -> None:
        if self.cpus <= 0 or self.dc_pool_size <= 0:
            raise ValueError("vplane.cpus and vplane.dc_pool_size must be positive")
        sq, cq, rq = self.qp_depths
        if sq <= 0 or cq <= 0 or rq < 0:
            raise ValueError("vplane.qp_depths must be positive")
        if min(sq, cq) >= 1 << WrId.CNT_BITS:
            raise ValueError("queue depth does not fit the wr_id slot counter")
        for name in ("ctrl_syscall_ns", "vqp_create_ns", "qconnect_ns", "recv_buf_bytes",
                     "recv_backlog", "lease_period_ns", "transfer_ack_timeout_ns", "max_vqps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"vplane.{name} must be positive")
        if self.copy_ns_per_byte < 0 or self.lease_grace_ns < 0:
            raise ValueError("vplane.copy_ns_per_byte and vplane.lease_grace_ns must be >= 0")


# -- wire formats -------------------------------------------------------------

@dataclass(frozen=True)
class WrId:
    """Kernel rewrite of a request's wr_id: which VQP to notify and how many slots it frees."""

    vqp_ref: Optional[int]
    comp_cnt: int

    CNT_BITS = 16

    def encode(self) -> int:
        if not 0 <= self.comp_cnt < 1 << self.CNT_BITS:
            raise ValueError("comp_cnt out of range")
        ref = 0 if self.vqp_ref is None else self.vqp_ref + 1
        return (ref << self.CNT_BITS) | self.comp_cnt

    @classmethod
    def decode(cls, raw: int) -> "WrId":
        if raw < 0:
            raise ValueError("negative wr_id")
        ref = raw >> cls.CNT_BITS
        return cls(None if ref == 0 else ref - 1, raw & ((1 << cls.CNT_BITS) - 1))


@dataclass(frozen=True)
class MessageHeader:
    sender: NodeId
    dct_num: int
    dct_key: int
    zero_copy: bool
    length: int

    SIZE = HEADER.size

    def pack(self, body: bytes) -> bytes:
        flags = FLAG_ZERO_COPY if self.zero_copy else 0
        return HEADER.pack(MAGIC, self.sender.gid, self.sender.port, self.dct_num,
                           self.dct_key, flags, self.length) + body

    @classmethod
    def unpack(cls, data: bytes) -> tuple["MessageHeader", bytes]:
        if len(data) < HEADER.size:
            raise ValueError("short message")
        magic, gid, port, num, key, flags, length = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError("bad magic")
        return cls(NodeId(gid, port), num, key, bool(flags & FLAG_ZERO_COPY), length), data[HEADER.size:]

    @property
    def target(self) -> DctTarget:
        return DctTarget(self.dct_num, self.dct_key, self.sender)


@dataclass(frozen=True)
class Descriptor:
    addr: int
    size: int
    dest_vqp: int

    def pack(self) -> bytes:
        return DESCRIPTOR.pack(self.addr, self.size, self.dest_vqp)

    @classmethod
    def unpack(cls, data: bytes) -> "Descriptor":
        return cls(*DESCRIPTOR.unpack(data[:DESCRIPTOR.size]))


# -- per-VQP and pool state ---------------------------------------------------

@dataclass
class _CompEntry:
    wr_id: int
    ready: bool = False
    status: WcStatus = WcStatus.OK
    byte_len: int = 0
    opcode: Any = None


@dataclass
class _Held:
    header: MessageHeader
    body: bytes


@dataclass
class ReceivedMessage:
    src: "VirtualQP"
    wr_id: int
    status: WcStatus
    byte_len: int
    data: bytes = b""


class PooledQP:
    """A physical QP in a sub-pool plus the kernel's own slot count for it."""

    def __init__(self, phys: PhysicalQP, cpu: int, peer: Optional[NodeId] = None):
        self.phys = phys
        self.cpu = cpu
        self.peer = peer
        self.uncomp = 0
        self.last_use = 0
        self.remote: Optional[PhysicalQP] = None

    @property
    def kind(self) -> QPKind:
        return self.phys.kind

    @property
    def depth(self) -> int:
        return min(self.phys.sq_max_depth, self.phys.cq_max_depth)

    def __repr__(self) -> str:
        return f"<Pooled {self.phys!r} cpu={self.cpu} uncomp={self.uncomp}>"


class SubPool:
    def __init__(self, cpu: int):
        self.cpu = cpu
        self.dc: list[PooledQP] = []
        self.rc: dict[NodeId, list[PooledQP]] = {}
        self._dc_rr = 0
        self._rc_rr: dict[NodeId, int] = {}

    def select_dc(self) -> PooledQP:
        assert self.dc, "DC pool is created at boot and never empty"
        pq = self.dc[self._dc_rr % len(self.dc)]
        self._dc_rr += 1
        return pq

    def select_rc(self, addr: NodeId) -> Optional[PooledQP]:
        qps = self.rc.get(addr)
        if not qps:
            return None
        i = self._rc_rr.get(addr, 0)
        self._rc_rr[addr] = i + 1
        return qps[i % len(qps)]

    def add_rc(self, addr: NodeId, pq: PooledQP) -> None:
        self.rc.setdefault(addr, []).append(pq)

    def remove_rc(self, pq: PooledQP) -> None:
        qps = self.rc.get(pq.peer, [])
        if pq in qps:
            qps.remove(pq)
        if not qps:
            self.rc.pop(pq.peer, None)

    def rc_qps(self) -> list[PooledQP]:
        return [pq for qps in self.rc.values() for pq in qps]


class VirtualQP:
    def __init__(self, node: "KernelNode", vid: int, cpu: int, internal: bool = False):
        self.node = node
        self.id = vid
        self.cpu = cpu
        self.internal = internal
        self.comp_queue: deque[_CompEntry] = deque()
        self.recv_queue: deque[tuple[int, int, int]] = deque()
        self.inbox: deque[_Held] = deque()
        self.qp: Optional[PooledQP] = None
        self.dct_meta: Optional[DctTarget] = None
        self.bound_addr: Optional[NodeId] = None
        self.peer_addr: Optional[NodeId] = None
        self.peers: dict[NodeId, VirtualQP] = {}
        self.arrival = Trigger(node.clock)
        self.transferring: Optional[Signal] = None
        self.posting = 0
        self.idle = Trigger(node.clock)
        self.origin: Optional[VirtualQP] = None

    @property
    def connected(self) -> bool:
        return self.qp is not None

    def __repr__(self) -> str:
        return f"<VQP {self.id} cpu={self.cpu} peer={self.peer_addr} qp={self.qp}>"


class DCCache:
    """Per-node DCT metadata cache; concurrent misses on one address share a lookup."""

    def __init__(self, node: "KernelNode"):
        self.node = node
        self.entries: dict[NodeId, DctTarget] = {}
        self._inflight: dict[NodeId, Signal] = {}
        self.lookups = 0
        self.epoch = 0

    def __contains__(self, addr: NodeId) -> bool:
        return addr in self.entries

    def insert(self, addr: NodeId, target: DctTarget) -> None:
        if addr not in self.entries:
            self.node.nic.charge(DCT_ENTRY_BYTES)
        self.entries[addr] = target

    def evict_owner(self, gid: bytes) -> int:
        dead = [a for a in self.entries if a.gid == gid]
        for a in dead:
            del self.entries[a]
            self.node.nic.refund(DCT_ENTRY_BYTES)
        self.epoch += 1
        return len(dead)

    def get(self, addr: NodeId) -> Generator[Any, Any, DctTarget]:
        hit = self.entries.get(addr)
        if hit is not None:
            return hit
        pending = self._inflight.get(addr)
        if pending is not None:
            result = yield pending
            if isinstance(result, BaseException):
                raise ConnectError(f"no DCT metadata for {addr}") from result
            return result
        sig = self.node.clock.signal()
        self._inflight[addr] = sig
        self.lookups += 1
        try:
            target = yield from self.node.meta.lookup_dct_meta(addr)
        except MetaNotFound as exc:
            del self._inflight[addr]
            sig.fire(exc)
            raise ConnectError(f"no DCT metadata for {addr}") from exc
        del self._inflight[addr]
        self.insert(addr, target)
        sig.fire(target)
        return target


class MRStore:
    """Checked remote MRs; an entry is trusted for one lease period after it was fetched."""

    def __init__(self, node: "KernelNode", lease_period_ns: int):
        self.node = node
        self.lease_period_ns = lease_period_ns
        self.entries: dict[tuple[bytes, int], tuple[MrEntry, int]] = {}
        self.misses = 0

    def cached(self, owner: bytes, rkey: int) -> Optional[MrEntry]:
        hit = self.entries.get((owner, rkey))
        if hit is None:
            return None
        entry, cached_at = hit
        if self.node.clock.now >= cached_at + self.lease_period_ns:
            del self.entries[(owner, rkey)]
            return None
        return entry

    def get(self, owner: bytes, rkey: int) -> Generator[Any, Any, Optional[MrEntry]]:
        entry = self.cached(owner, rkey)
        if entry is not None:
            return entry
        self.misses += 1
        entry = yield from self.node.meta.check_remote_mr(owner, rkey)
        if entry is not None and entry.valid:
            self.entries[(owner, rkey)] = (entry, self.node.clock.now)
        return entry


# -- the node -----------------------------------------------------------------

class KernelNode:
    def __init__(self, clock: SimClock, fabric: Fabric, nic: Nic, meta_servers: Sequence[MetaServer],
                 config: Optional[VPlaneConfig] = None):
        self.clock = clock
        self.fabric = fabric
        self.nic = nic
        self.gid = nic.gid
        self.config = config or VPlaneConfig()
        self.config.validate()
        self.meta_servers = list(meta_servers)
        self.meta = MetaClient(clock, fabric, nic.gid, self.meta_servers, nic.cost)
        self.cpus = [SubPool(c) for c in range(self.config.cpus)]
        self.dccache = DCCache(self)
        self.mrstore = MRStore(self, self.config.lease_period_ns)
        self.vqps: dict[int, VirtualQP] = {}
        self.bound: dict[int, VirtualQP] = {}
        self.targets: dict[int, DctTarget] = {}
        self.live_mrs: dict[int, MemoryRegion] = {}
        self.ack_transfers = True
        self.booted = False
        self.stats = {"drain_polls": 0, "rejected": 0, "unsignaled_errors": 0, "transfers": 0,
                      "transfer_aborts": 0, "zero_copy_reads": 0, "slots_posted": 0, "slots_freed": 0}
        self._next_vid = 0
        self._next_port = EPHEMERAL_BASE
        self._kernel_vqps: dict[tuple[int, NodeId], VirtualQP] = {}
        nic.kernel = self

    @property
    def addr(self) -> NodeId:
        return NodeId(self.gid, NODE_PORT)

    # -- boot ------------------------------------------------------------------
    def boot(self) -> Generator[Any, Any, None]:
        """Create the DC pool of every CPU and publish the node-level DCT target."""
        for sub in self.cpus:
            for _ in range(self.config.dc_pool_size):
                phys = yield from self.nic.create_qp(QPKind.DC, self.config.qp_depths)
                sub.dc.append(PooledQP(phys, sub.cpu))
        target = self._make_target(NODE_PORT)
        broadcast_meta(self.fabric, self.meta_servers, self.addr, target)
        self.booted = True

    def _make_target(self, port: int) -> DctTarget:
        digest = hashlib.blake2b(self.gid + port.to_bytes(2, "little"), digest_size=8).digest()
        target = self.nic.create_dct_target(NodeId(self.gid, port), int.from_bytes(digest, "little"),
                                            handler=self._dct_handler(port))
        self.targets[port] = target
        return target

    # -- control path ------------------------------------------------------------
    def _new_vqp(self, cpu: int, internal: bool = False) -> VirtualQP:
        if not 0 <= cpu < len(self.cpus):
            raise VQPError(f"no CPU {cpu}")
        if len(self.vqps) >= self.config.max_vqps:
            raise VQPError("virtual QP identifiers exhausted")
        vq = VirtualQP(self, self._next_vid, cpu, internal)
        self._next_vid += 1
        self.vqps[vq.id] = vq
        return vq

    def vqp_create(self, cpu: int = 0) -> Generator[Any, Any, VirtualQP]:
        yield self.config.ctrl_syscall_ns + self.config.vqp_create_ns
        return self._new_vqp(cpu)

    def vqp_destroy(self, vq: VirtualQP) -> None:
        self.vqps.pop(vq.id, None)
        if vq.bound_addr is not None and self.bound.get(vq.bound_addr.port) is vq:
            del self.bound[vq.bound_addr.port]

    def qconnect(self, vq: VirtualQP, addr: NodeId) -> Generator[Any, Any, None]:
        yield self.config.ctrl_syscall_ns + self.config.qconnect_ns
        yield from self._connect(vq, addr)

    def qconnect_many(self, addrs: Iterable[NodeId], cpu: int = 0) -> Generator[Any, Any, list[VirtualQP]]:
        """Create and connect one VQP per address under a single system call."""
        yield self.config.ctrl_syscall_ns
        out = []
        for addr in addrs:
            yield self.config.vqp_create_ns + self.config.qconnect_ns
            vq = self._new_vqp(cpu)
            yield from self._connect(vq, addr)
            out.append(vq)
        return out

    def _connect(self, vq: VirtualQP, addr: NodeId) -> Generator[Any, Any, None]:
        if vq.qp is not None:
            if vq.peer_addr == addr:
                return
            raise ConnectError(f"VQP {vq.id} is already connected to {vq.peer_addr}")
        sub = self.cpus[vq.cpu]
        rc = sub.select_rc(addr)
        if rc is not None:
            vq.qp = rc
            vq.peer_addr = addr
            vq.dct_meta = self.dccache.entries.get(addr)
            return
        target = yield from self.dccache.get(addr)
        if vq.qp is not None:
            raise ConnectError(f"VQP {vq.id} was connected concurrently")
        vq.qp = sub.select_dc()
        vq.peer_addr = addr
        vq.dct_meta = target

    def qbind(self, vq: VirtualQP, addr: NodeId) -> Generator[Any, Any, None]:
        yield self.config.ctrl_syscall_ns
        if addr.gid != self.gid:
            raise VQPError("can only bind a local address")
        if addr.port in self.bound:
            raise VQPError(f"address {addr} already bound")
        if vq.bound_addr is not None:
            raise VQPError(f"VQP {vq.id} already bound to {vq.bound_addr}")
        self.bound[addr.port] = vq
        vq.bound_addr = addr
        if addr.port not in self.targets:
            target = self._make_target(addr.port)
            broadcast_meta(self.fabric, self.meta_servers, addr, target)

    def _sender_addr(self, vq: VirtualQP) -> tuple[NodeId, DctTarget]:
        """The address replies should use; unbound senders get an unpublished ephemeral port."""
        if vq.origin is not None:
            vq = vq.origin
        if vq.bound_addr is None:
            while self._next_port in self.bound or self._next_port in self.targets:
                self._next_port += 1
            port = self._next_port
            self._next_port += 1
            self.bound[port] = vq
            vq.bound_addr = NodeId(self.gid, port)
        port = vq.bound_addr.port
        target = self.targets.get(port) or self._make_target(port)
        return vq.bound_addr, target

    def declare_down(self, gid: bytes) -> int:
        return self.dccache.evict_owner(gid)

    # -- memory registration -----------------------------------------------------
    def register_mr(self, base: int, length: int, perms: Perm = Perm.RW) -> Generator[Any, Any, MemoryRegion]:
        yield self.config.ctrl_syscall_ns + self.nic.cost.register_mr_ns
        mr = self.nic.register_mr(base, length, perms)
        self.live_mrs[mr.rkey] = mr
        for server in self.meta_servers:
            server.publish_mr(MrEntry(self.gid, mr.rkey, base, length, perms))
        return mr

    def deregister_mr(self, mr: MemoryRegion) -> None:
        """Invalidate now; the device keeps the region until every cached copy has expired."""
        self.live_mrs.pop(mr.rkey, None)
        for server in self.meta_servers:
            server.invalidate_mr(self.gid, mr.rkey)
        self.clock.schedule(self.config.lease_period_ns + self.config.lease_grace_ns,
                            self.nic.deregister_mr, mr, label="mr:free")

    def local_ok(self, addr: int, length: int) -> bool:
        if length == 0:
            return True
        return any(mr.contains(addr, length) for mr in self.live_mrs.values())

    # -- data path: posting ------------------------------------------------------
    def post_send(self, vq: VirtualQP, wr_list: Sequence[WorkRequest]) -> Generator[Any, Any, None]:
        """User entry point: one system call, validation, then segmented virtualized posts."""
        yield self.fabric.config.syscall_overhead_ns
        yield from self.post_send_virtualized(vq, wr_list)

    def post_send_virtualized(self, vq: VirtualQP, wr_list: Sequence[WorkRequest]) -> Generator[Any, Any, None]:
        wrs = list(wr_list)
        if not wrs:
            raise VQPError("empty request list")
        if vq.qp is None:
            raise VQPError(f"VQP {vq.id} is not connected")
        while vq.transferring is not None:
            yield vq.transferring
        vq.posting += 1
        try:
            yield from self._validate(vq, wrs)
            wrs = [self._encapsulate(vq, wr) if wr.op is Opcode.SEND else wr for wr in wrs]
            pq = vq.qp
            depth = pq.depth
            for i in range(0, len(wrs), depth):
                yield from self._post_chunk(vq, pq, wrs[i:i + depth])
        finally:
            vq.posting -= 1
            if vq.posting == 0:
                vq.idle.pulse()

    def _validate(self, vq: VirtualQP, wrs: list[WorkRequest]) -> Generator[Any, Any, None]:
        for i, wr in enumerate(wrs):
            reason = yield from self._check(vq, wr)
            if reason is not None:
                self.stats["rejected"] += 1
                raise RequestRejected(i, reason)

    def _check(self, vq: VirtualQP, wr: WorkRequest) -> Generator[Any, Any, Optional[str]]:
        if not isinstance(wr.op, Opcode):
            return "unsupported opcode"
        if wr.inline is None and not self.local_ok(*wr.local):
            return "local buffer outside a registered MR"
        if wr.op is Opcode.SEND:
            return None
        if wr.remote is None:
            return "missing remote address"
        raddr, rkey = wr.remote
        if rkey == KERNEL_RKEY:
            return "reserved rkey"
        assert vq.peer_addr is not None
        entry = yield from self.mrstore.get(vq.peer_addr.gid, rkey)
        need = Perm.READ if wr.op is Opcode.READ else Perm.WRITE
        if entry is None or not entry.covers(raddr, wr.length, need):
            return "invalid remote MR"
        return None

    def _encapsulate(self, vq: VirtualQP, wr: WorkRequest) -> WorkRequest:
        sender, target = self._sender_addr(vq)
        size = wr.length
        if wr.inline is None and size > self.config.recv_buf_bytes:
            dest = vq.peer_addr.port if vq.peer_addr is not None else 0
            header = MessageHeader(sender, target.dct_num, target.dct_key, True, size)
            body = Descriptor(wr.local[0], size, dest).pack()
        else:
            payload = wr.inline if wr.inline is not None else self.nic.memory.read(*wr.local)
            header = MessageHeader(sender, target.dct_num, target.dct_key, False, size)
            body = payload
        return replace(wr, inline=header.pack(body))

    def _post_chunk(self, vq: VirtualQP, pq: PooledQP, wrs: list[WorkRequest]) -> Generator[Any, Any, None]:
        while pq.depth - pq.uncomp < len(wrs):
            self.stats["drain_polls"] += 1
            if self.poll_inner(pq) is None:
                yield pq.phys.cq_trigger.wait()
        route = None
        if pq.kind is QPKind.DC:
            assert vq.dct_meta is not None
            route = DctRoute.of(vq.dct_meta)
        out = []
        unsignaled = 0
        last = len(wrs) - 1
        for i, wr in enumerate(wrs):
            if wr.signaled:
                vq.comp_queue.append(_CompEntry(wr.wr_id))
                code = WrId(vq.id, unsignaled + 1)
                unsignaled = 0
                signaled = True
            else:
                unsignaled += 1
                signaled = i == last
                # a forced tail signal frees the trailing unsignaled requests, itself included
                code = WrId(None, unsignaled) if signaled else WrId(vq.id, 0)
            out.append(replace(wr, wr_id=code.encode(), signaled=signaled, dct_route=route))
        pq.uncomp += len(out)
        self.stats["slots_posted"] += len(out)
        pq.last_use = self.clock.now
        self.nic.post_send(pq.phys, out)

    # -- data path: polling --------------------------------------------------------
    def poll_inner(self, pq: PooledQP) -> Optional[tuple[WrId, Completion]]:
        wc = self.nic.poll_cq(pq.phys)
        if wc is None:
            return None
        code = WrId.decode(wc.wr_id)
        pq.uncomp -= code.comp_cnt
        self.stats["slots_freed"] += code.comp_cnt
        assert pq.uncomp >= 0, "slot accounting underflow"
        if code.comp_cnt == 0:
            # an unsignaled request failed; the next signaled completion frees its slot
            self.stats["unsignaled_errors"] += 1
            return code, wc
        if code.vqp_ref is not None:
            target = self.vqps.get(code.vqp_ref)
            assert target is not None, f"completion for unknown VQP {code.vqp_ref}"
            for entry in target.comp_queue:
                if not entry.ready:
                    entry.ready = True
                    entry.status = wc.status
                    entry.byte_len = wc.byte_len
                    entry.opcode = wc.opcode
                    break
            else:
                raise AssertionError(f"VQP {code.vqp_ref} has no pending completion")
        return code, wc

    def drain(self, pq: PooledQP) -> Generator[Any, Any, None]:
        """Poll ``pq`` until every slot the kernel handed out has been freed."""
        while pq.uncomp:
            if self.poll_inner(pq) is None:
                yield pq.phys.cq_trigger.wait()

    def poll_cq_virtualized(self, vq: VirtualQP) -> Optional[Completion]:
        if vq.qp is not None:
            self.poll_inner(vq.qp)
        if vq.comp_queue and vq.comp_queue[0].ready:
            e = vq.comp_queue.popleft()
            return Completion(e.wr_id, e.status, e.byte_len, e.opcode, vq.qp.phys.qpn if vq.qp else 0)
        return None

    def wait_completion(self, vq: VirtualQP) -> Generator[Any, Any, Completion]:
        """Block until ``vq`` has a completion at its head and return it."""
        while True:
            wc = self.poll_cq_virtualized(vq)
            if wc is not None:
                return wc
            pq = vq.qp
            if pq is None:
                raise VQPError(f"VQP {vq.id} is not connected")
            while self.poll_inner(pq) is not None:
                pass
            if vq.comp_queue and vq.comp_queue[0].ready:
                continue
            if not vq.comp_queue:
                raise VQPError(f"VQP {vq.id} has nothing outstanding")
            yield pq.phys.cq_trigger.wait()

    # -- two-sided -------------------------------------------------------------------
    def post_recv_virtualized(self, vq: VirtualQP, buffers: Iterable[tuple[int, int, int]]) -> None:
        bufs = list(buffers)
        for wr_id, addr, length in bufs:
            if length <= 0:
                raise ValueError("receive buffer must be non-empty")
            if not self.local_ok(addr, length):
                raise VQPError("receive buffer outside a registered MR")
        vq.recv_queue.extend(bufs)

    def _accept(self, port: int, data: bytes) -> bool:
        vq = self.bound.get(port)
        if vq is None or len(vq.inbox) >= self.config.recv_backlog:
            return False
        try:
            header, body = MessageHeader.unpack(data)
        except ValueError:
            return False
        vq.inbox.append(_Held(header, body))
        vq.arrival.pulse()
        return True

    def _dct_handler(self, port: int):
        return lambda data, src_gid: self._accept(port, data)

    def _rc_handler(self, port: int):
        return lambda data, qp: self._accept(port, data)

    def _peer_vqp(self, vq: VirtualQP, header: MessageHeader) -> Generator[Any, Any, VirtualQP]:
        peer = vq.peers.get(header.sender)
        if peer is not None:
            return peer
        self.dccache.insert(header.sender, header.target)
        yield self.config.vqp_create_ns + self.config.qconnect_ns
        peer = self._new_vqp(vq.cpu)
        peer.origin = vq
        yield from self._connect(peer, header.sender)
        vq.peers[header.sender] = peer
        return peer

    def _kernel_vqp(self, cpu: int, addr: NodeId) -> Generator[Any, Any, VirtualQP]:
        key = (cpu, addr)
        ivq = self._kernel_vqps.get(key)
        if ivq is None:
            ivq = self._new_vqp(cpu, internal=True)
            yield from self._connect(ivq, addr)
            self._kernel_vqps[key] = ivq
        return ivq

    def _wait_internal(self, ivq: VirtualQP, pq: PooledQP) -> Generator[Any, Any, _CompEntry]:
        while not (ivq.comp_queue and ivq.comp_queue[0].ready):
            if self.poll_inner(pq) is None:
                yield pq.phys.cq_trigger.wait()
        return ivq.comp_queue.popleft()

    def qpop_msgs(self, vq: VirtualQP) -> Generator[Any, Any, list[ReceivedMessage]]:
        """Deliver held messages into posted user buffers; messages without a buffer stay held."""
        if vq.bound_addr is None:
            raise VQPError(f"VQP {vq.id} is not bound")
        yield self.fabric.config.syscall_overhead_ns
        out: list[ReceivedMessage] = []
        while vq.inbox and vq.recv_queue:
            held = vq.inbox.popleft()
            wr_id, addr, cap = vq.recv_queue.popleft()
            src = yield from self._peer_vqp(vq, held.header)
            size = held.header.length
            if size > cap:
                out.append(ReceivedMessage(src, wr_id, WcStatus.LOC_ERR, size))
                continue
            if held.header.zero_copy:
                status = yield from self._recv_zero_copy(vq, held, addr)
            else:
                yield int(round(size * self.config.copy_ns_per_byte))
                self.nic.memory.write(addr, held.body[:size])
                status = WcStatus.OK
            data = self.nic.memory.read(addr, size) if status is WcStatus.OK else b""
            out.append(ReceivedMessage(src, wr_id, status, size, data))
        return out

    def _recv_zero_copy(self, vq: VirtualQP, held: _Held, addr: int) -> Generator[Any, Any, WcStatus]:
        desc = Descriptor.unpack(held.body)
        ivq = yield from self._kernel_vqp(vq.cpu, held.header.sender)
        pq = ivq.qp
        wr = WorkRequest(Opcode.READ, 0, True, local=(addr, desc.size), remote=(desc.addr, KERNEL_RKEY))
        self.stats["zero_copy_reads"] += 1
        yield from self._post_chunk(ivq, pq, [wr])
        entry = yield from self._wait_internal(ivq, pq)
        return WcStatus.OK if entry.status is WcStatus.OK else WcStatus.REM_ACCESS_ERR

    def wait_msgs(self, vq: VirtualQP) -> Generator[Any, Any, None]:
        while not vq.inbox:
            yield vq.arrival.wait()

    # -- physical QP transfer ------------------------------------------------------------
    def transfer_physical_qp(self, vq: VirtualQP, new_pq: PooledQP) -> Generator[Any, Any, bool]:
        """Swap ``vq`` onto ``new_pq`` behind a fence; returns False if the peer never acks."""
        old = vq.qp
        if old is None:
            raise VQPError(f"VQP {vq.id} is not connected")
        if new_pq is old:
            return True
        if new_pq.cpu != vq.cpu:
            raise VQPError("a VQP only uses QPs from its home CPU")
        if new_pq.kind is QPKind.RC and new_pq.peer != vq.peer_addr:
            raise VQPError("new QP targets a different peer")
        if new_pq.kind is QPKind.DC and vq.dct_meta is None:
            vq.dct_meta = yield from self.dccache.get(vq.peer_addr)
        while vq.transferring is not None:
            yield vq.transferring
        gate = self.clock.signal()
        vq.transferring = gate
        try:
            while vq.posting:
                yield vq.idle.wait()
            outcome = self.clock.signal()
            timer = self.clock.schedule(self.config.transfer_ack_timeout_ns, outcome.fire, "timeout")
            self._notify_peer(vq, outcome)
            fence = self._new_vqp(vq.cpu, internal=True)
            fence.qp, fence.peer_addr, fence.dct_meta = old, vq.peer_addr, vq.dct_meta
            fake = WorkRequest(Opcode.READ, 0, True, local=(0, 0), remote=(0, KERNEL_RKEY))
            yield from self._post_chunk(fence, old, [fake])
            yield from self._wait_internal(fence, old)
            self.vqps.pop(fence.id, None)
            result = yield outcome
            timer.cancel()
            if result != "ack":
                self.stats["transfer_aborts"] += 1
                return False
            vq.qp = new_pq
            self.stats["transfers"] += 1
            return True
        finally:
            vq.transferring = None
            gate.fire()

    def _notify_peer(self, vq: VirtualQP, outcome: Signal) -> None:
        peer_gid = vq.peer_addr.gid
        peer_nic = self.fabric.nics.get(peer_gid)
        peer = getattr(peer_nic, "kernel", None)
        if peer is None:
            return
        self.fabric.send(self.gid, peer_gid, "CTRL", 16, peer._on_transfer_notify, self.gid, outcome)

    def _on_transfer_notify(self, src_gid: bytes, outcome: Signal) -> None:
        if self.ack_transfers:
            self.fabric.send(self.gid, src_gid, "CTRL", 16, outcome.fire, "ack")

    # -- RC QPs (created in the background) -------------------------------------------
    def create_rc(self, cpu: int, addr: NodeId) -> Generator[Any, Any, PooledQP]:
        """Create and connect an RC QP to ``addr`` and add it to ``cpu``'s sub-pool."""
        peer_nic = self.fabric.nics.get(addr.gid)
        peer = getattr(peer_nic, "kernel", None)
        if peer is None:
            raise ConnectError(f"no kernel at {addr}")
        local_p = self.clock.spawn(self.nic.create_qp(QPKind.RC, self.config.qp_depths), "rc-local")
        remote_p = self.clock.spawn(peer_nic.create_qp(QPKind.RC, peer.config.qp_depths), "rc-remote")
        local = yield local_p
        try:
            remote = yield remote_p
        except Exception:
            self.nic.destroy_qp(local)
            raise
        remote.recv_handler = peer._rc_handler(addr.port)
        cfg_remote = self.clock.spawn(peer_nic.configure_qp(remote, NodeId(self.gid, NODE_PORT), local.qpn,
                                                            handshake=False), "rc-remote-cfg")
        yield from self.nic.configure_qp(local, addr, remote.qpn)
        yield cfg_remote
        pq = PooledQP(local, cpu, addr)
        pq.remote = remote
        pq.last_use = self.clock.now
        self.cpus[cpu].add_rc(addr, pq)
        return pq

    def users_of(self, pq: PooledQP) -> list[VirtualQP]:
        return [vq for vq in self.vqps.values() if vq.qp is pq and not vq.internal]

    def connected_to(self, cpu: int, addr: NodeId) -> list[VirtualQP]:
        return [vq for vq in self.vqps.values()
                if vq.cpu == cpu and vq.peer_addr == addr and not vq.internal]

    def destroy_rc(self, pq: PooledQP) -> None:
        self.cpus[pq.cpu].remove_rc(pq)
        for key, ivq in list(self._kernel_vqps.items()):
            if ivq.qp is pq:
                del self._kernel_vqps[key]
                self.vqps.pop(ivq.id, None)
        self.nic.destroy_qp(pq.phys)
        if pq.remote is not None:
            pq.remote.nic.destroy_qp(pq.remote)

    def pool_in_err(self) -> list[PooledQP]:
        return [pq for sub in self.cpus for pq in sub.dc + sub.rc_qps() if pq.phys.state is QPState.ERR]

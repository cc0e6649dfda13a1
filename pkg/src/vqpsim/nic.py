"""Simulated RNIC: RC/DC queue pairs, memory regions, DCT targets and the control-path cost model."""

from __future__ import annotations

import bisect
import enum
import struct
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Generator, Iterable, Optional, Union

from .simcore import Fabric, NodeId, Resource, SimClock, Trigger, WireOp


class QPKind(enum.Enum):
    RC = "RC"
    DC = "DC"


class QPState(enum.Enum):
    RESET = "RESET"
    INIT = "INIT"
    RTR = "RTR"
    RTS = "RTS"
    ERR = "ERR"


class Opcode(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    SEND = "SEND"


class WcStatus(enum.Enum):
    OK = "OK"
    LOC_ERR = "LOC_ERR"
    REM_ACCESS_ERR = "REM_ACCESS_ERR"
    FLUSH_ERR = "FLUSH_ERR"
    OVERFLOW_ERR = "OVERFLOW_ERR"
    RNR_ERR = "RNR_ERR"


class Perm(enum.Flag):
    NONE = 0
    READ = enum.auto()
    WRITE = enum.auto()
    RW = READ | WRITE


class NicError(Exception):
    pass


class ResourceError(NicError):
    pass


class QPStateError(NicError):
    pass


KERNEL_RKEY = 0
"""Reserved rkey of the kernel's whole-memory region; accepted for any range covered by a valid MR."""


@dataclass
class NicCostModel:
    """Per-operation NIC costs (ns) and memory footprints (bytes)."""

    init_ns: int = 13_700_000
    create_qp_ns: int = 413_000
    configure_qp_ns: int = 1_210_200
    handshake_ns: int = 376_800
    dc_reconnect_ns: int = 1_000
    dc_op_extra_ns: int = 90
    data_op_base_ns: int = 150
    per_byte_ns: float = 0.08
    qp_issue_ns: int = 480
    inbound_op_ns: int = 7
    dc_inbound_extra_ns: int = 1
    register_mr_ns: int = 1_400
    rc_qp_mem_bytes: int = 162_816
    dc_qp_mem_bytes: int = 136_376
    sq_entry_bytes: int = 448
    cq_entry_bytes: int = 64
    max_qps: int = 1 << 20

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("dc_inbound_extra_ns",):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def verbs_control_path_ns(self) -> int:
        return self.init_ns + self.create_qp_ns + self.configure_qp_ns + self.handshake_ns

    def rc_queue_bytes(self, sq: int = 292, cq: int = 257) -> int:
        """Raw queue bytes before the driver rounds to hardware granularity."""
        return sq * self.sq_entry_bytes + cq * self.cq_entry_bytes

    def transfer_ns(self, nbytes: int) -> int:
        return int(round(nbytes * self.per_byte_ns))


@dataclass(frozen=True)
class DctTarget:
    dct_num: int
    dct_key: int
    owner: NodeId

    PACKED = struct.Struct("<IQ")

    def pack(self) -> bytes:
        """12-byte wire form (number + key); the owner is the lookup key, not stored."""
        return self.PACKED.pack(self.dct_num, self.dct_key)

    @classmethod
    def unpack(cls, data: bytes, owner: NodeId) -> "DctTarget":
        num, key = cls.PACKED.unpack(data)
        return cls(num, key, owner)


@dataclass(frozen=True)
class DctRoute:
    owner: NodeId
    dct_num: int
    dct_key: int

    @classmethod
    def of(cls, target: DctTarget) -> "DctRoute":
        return cls(target.owner, target.dct_num, target.dct_key)


@dataclass
class MemoryRegion:
    mr_id: int
    base: int
    length: int
    rkey: int
    perms: Perm
    registered_at: int
    owner: bytes = b""
    valid: bool = True

    def contains(self, addr: int, length: int) -> bool:
        return self.base <= addr and addr + length <= self.base + self.length


@dataclass
class WorkRequest:
    op: Any
    wr_id: int
    signaled: bool = True
    local: tuple[int, int] = (0, 0)
    remote: Optional[tuple[int, int]] = None
    dct_route: Optional[DctRoute] = None
    inline: Optional[bytes] = None

    @property
    def length(self) -> int:
        return len(self.inline) if self.inline is not None else self.local[1]


@dataclass
class Completion:
    wr_id: int
    status: WcStatus
    byte_len: int = 0
    opcode: Any = None
    qpn: int = 0
    seq: int = field(default=0, repr=False, compare=False)


class Memory:
    """Sparse host memory made of allocated blocks."""

    def __init__(self, base: int = 0x10000):
        self._bases: list[int] = []
        self._blocks: dict[int, bytearray] = {}
        self._next = base

    def alloc(self, length: int, align: int = 64) -> int:
        if length <= 0:
            raise ValueError("length must be positive")
        addr = -(-self._next // align) * align
        self._bases.append(addr)
        self._blocks[addr] = bytearray(length)
        self._next = addr + length
        return addr

    def _block(self, addr: int, length: int) -> tuple[bytearray, int]:
        i = bisect.bisect_right(self._bases, addr) - 1
        if i < 0:
            raise IndexError(f"address {addr:#x} not allocated")
        base = self._bases[i]
        buf = self._blocks[base]
        off = addr - base
        if off + length > len(buf):
            raise IndexError(f"range {addr:#x}+{length} crosses allocation")
        return buf, off

    def allocated(self, addr: int, length: int) -> bool:
        try:
            self._block(addr, length)
        except IndexError:
            return False
        return True

    def read(self, addr: int, length: int) -> bytes:
        if length == 0:
            return b""
        buf, off = self._block(addr, length)
        return bytes(buf[off:off + length])

    def write(self, addr: int, data: bytes) -> None:
        if not data:
            return
        buf, off = self._block(addr, len(data))
        buf[off:off + len(data)] = data


@dataclass
class _Inflight:
    seq: int
    wr: WorkRequest
    slot: bool
    dst: Optional["Nic"] = None
    status: Optional[WcStatus] = None
    soft: bool = False


class PhysicalQP:
    def __init__(self, nic: "Nic", qpn: int, kind: QPKind, sq: int, cq: int, rq: int):
        self.nic = nic
        self.qpn = qpn
        self.kind = kind
        # DC initiators need no peer, so they are ready to send once created
        self.state = QPState.RTS if kind is QPKind.DC else QPState.INIT
        self.sq_max_depth = sq
        self.cq_max_depth = cq
        self.rq_max_depth = rq
        self.uncomp_cnt = 0
        self.connected_peer: Optional[NodeId] = None
        self.remote_qpn: Optional[int] = None
        self.cq: deque[Completion] = deque()
        self.recv_cq: deque[Completion] = deque()
        self.posted_recv_buffers: deque[tuple[int, int, int]] = deque()
        self.recv_handler: Optional[Callable[[bytes, "PhysicalQP"], bool]] = None
        self.cq_trigger = Trigger(nic.clock)
        self.reconnects = 0
        self.posted = 0
        self.cq_overrun = False
        self._next_seq = 1
        self._slots: deque[int] = deque()
        self._hw_free_at = 0
        self._last_done = 0

    @property
    def host(self) -> bytes:
        return self.nic.gid

    def __repr__(self) -> str:
        return f"<{self.kind.value}QP {self.qpn}@h{self.nic.index} {self.state.value} uncomp={self.uncomp_cnt}>"


class Nic:
    """One host's RNIC. All mutation happens from simulation events."""

    def __init__(self, clock: SimClock, fabric: Fabric, gid: bytes,
                 cost: Optional[NicCostModel] = None, index: int = 0):
        self.clock = clock
        self.fabric = fabric
        self.gid = gid
        self.index = index
        self.cost = cost or NicCostModel()
        self.cost.validate()
        self.memory = Memory()
        self.rnic = Resource(clock, 1, name=f"rnic{index}")
        self.qps: dict[int, PhysicalQP] = {}
        self.mrs: dict[int, MemoryRegion] = {}
        self.dct_targets: dict[int, DctTarget] = {}
        self._dct_handlers: dict[int, Callable[[bytes, bytes], bool]] = {}
        self.mem_bytes = 0
        self._next_qpn = 0x100
        self._next_rkey = 0x1000 + index * 0x100000
        self._next_mr_id = 1
        self._inbound_free = 0
        self.kernel: Any = None
        fabric.nics[gid] = self

    # -- memory meter --------------------------------------------------------
    def charge(self, nbytes: int) -> None:
        self.mem_bytes += nbytes

    def refund(self, nbytes: int) -> None:
        self.mem_bytes -= nbytes
        assert self.mem_bytes >= 0

    # -- control path ----------------------------------------------------------
    def init_driver(self) -> Generator[Any, Any, None]:
        """User-space driver context setup; occupies the RNIC command interface."""
        yield from self.rnic.hold(self.cost.init_ns)

    def create_qp(self, kind: QPKind, depths: tuple[int, int, int] = (292, 257, 0)
                  ) -> Generator[Any, Any, PhysicalQP]:
        sq, cq, rq = depths
        if sq <= 0 or cq <= 0 or rq < 0:
            raise ValueError("queue depths must be positive")
        if len(self.qps) >= self.cost.max_qps:
            raise ResourceError(f"host {self.index}: QP budget {self.cost.max_qps} exhausted")
        qpn = self._next_qpn
        self._next_qpn += 1
        # reserve the number now so concurrent creations respect the budget
        self.qps[qpn] = None  # type: ignore[assignment]
        yield from self.rnic.hold(self.cost.create_qp_ns)
        qp = PhysicalQP(self, qpn, kind, sq, cq, rq)
        self.qps[qpn] = qp
        self.charge(self.cost.rc_qp_mem_bytes if kind is QPKind.RC else self.cost.dc_qp_mem_bytes)
        return qp

    def destroy_qp(self, qp: PhysicalQP) -> None:
        if self.qps.pop(qp.qpn, None) is None:
            return
        self.refund(self.cost.rc_qp_mem_bytes if qp.kind is QPKind.RC else self.cost.dc_qp_mem_bytes)
        qp.state = QPState.RESET

    def configure_qp(self, qp: PhysicalQP, peer: NodeId, remote_qpn: Optional[int] = None,
                     handshake: bool = True) -> Generator[Any, Any, None]:
        """INIT -> RTR -> RTS for an RC QP, optionally including the datagram handshake."""
        if qp.kind is not QPKind.RC:
            raise QPStateError("only RC QPs are configured with a peer")
        if qp.state is not QPState.INIT:
            raise QPStateError(f"configure requires INIT, QP is {qp.state.value}")
        qp.state = QPState.RTR
        if handshake:
            self.fabric.record(self.gid, peer.gid, "UD_SEND", 64)
            self.fabric.record(peer.gid, self.gid, "UD_SEND", 64)
            yield self.cost.handshake_ns
        yield self.cost.configure_qp_ns
        qp.connected_peer = peer
        qp.remote_qpn = remote_qpn
        qp.state = QPState.RTS

    def create_dct_target(self, owner: NodeId, key: int, dct_num: Optional[int] = None,
                          handler: Optional[Callable[[bytes, bytes], bool]] = None) -> DctTarget:
        num = dct_num if dct_num is not None else 0x10000 + len(self.dct_targets)
        if num in self.dct_targets:
            raise ResourceError(f"duplicate dct_num {num}")
        target = DctTarget(num, key, owner)
        self.dct_targets[num] = target
        if handler is not None:
            self._dct_handlers[num] = handler
        return target

    def set_dct_handler(self, dct_num: int, handler: Callable[[bytes, bytes], bool]) -> None:
        self._dct_handlers[dct_num] = handler

    def register_mr(self, base: int, length: int, perms: Perm = Perm.RW) -> MemoryRegion:
        """Device-level registration; the caller accounts ``cost.register_mr_ns``."""
        if length <= 0:
            raise ValueError("MR length must be positive")
        if not self.memory.allocated(base, length):
            raise ValueError("MR must cover allocated memory")
        mr = MemoryRegion(self._next_mr_id, base, length, self._next_rkey, perms,
                          self.clock.now, owner=self.gid)
        self._next_mr_id += 1
        self._next_rkey += 1
        self.mrs[mr.rkey] = mr
        return mr

    def deregister_mr(self, mr: MemoryRegion) -> None:
        mr.valid = False
        self.mrs.pop(mr.rkey, None)

    # -- access checks ---------------------------------------------------------
    def local_ok(self, addr: int, length: int) -> bool:
        if length == 0:
            return True
        return any(mr.valid and mr.contains(addr, length) for mr in self.mrs.values())

    def remote_ok(self, addr: int, rkey: int, length: int, need: Perm) -> bool:
        if rkey == KERNEL_RKEY:
            return self.local_ok(addr, length)
        mr = self.mrs.get(rkey)
        if mr is None or not mr.valid:
            return False
        if length and not mr.contains(addr, length):
            return False
        return need in mr.perms

    # -- data path -------------------------------------------------------------
    def post_send(self, qp: PhysicalQP, wr_list: Iterable[WorkRequest]) -> None:
        if qp.nic is not self:
            raise ValueError("QP belongs to another NIC")
        if qp.state is QPState.RESET or (qp.kind is QPKind.RC and qp.state in (QPState.INIT, QPState.RTR)):
            raise QPStateError(f"cannot post on {qp.kind.value} QP in {qp.state.value}")
        for wr in wr_list:
            self._post_one(qp, wr)

    def _post_one(self, qp: PhysicalQP, wr: WorkRequest) -> None:
        seq = qp._next_seq
        qp._next_seq += 1
        qp.posted += 1
        if qp.state is QPState.ERR:
            self._schedule_final(qp, _Inflight(seq, wr, False, status=WcStatus.FLUSH_ERR))
            return
        if qp.uncomp_cnt >= qp.sq_max_depth:
            self._enter_err(qp)
            self._schedule_final(qp, _Inflight(seq, wr, False, status=WcStatus.OVERFLOW_ERR))
            return
        qp.uncomp_cnt += 1
        qp._slots.append(seq)
        entry = _Inflight(seq, wr, True)
        if self._malformed(qp, wr):
            self._enter_err(qp)
            entry.status = WcStatus.LOC_ERR
            self._schedule_final(qp, entry)
            return
        self._issue(qp, entry)

    def _malformed(self, qp: PhysicalQP, wr: WorkRequest) -> bool:
        if not isinstance(wr.op, Opcode):
            return True
        if wr.op in (Opcode.READ, Opcode.WRITE) and wr.remote is None:
            return True
        if qp.kind is QPKind.DC and wr.dct_route is None:
            return True
        if wr.inline is None and not self.local_ok(*wr.local):
            return True
        return False

    def _enter_err(self, qp: PhysicalQP) -> None:
        qp.state = QPState.ERR

    def _schedule_final(self, qp: PhysicalQP, entry: _Inflight) -> None:
        done = max(self.clock.now, qp._last_done)
        qp._last_done = done
        self.clock.schedule(done - self.clock.now, self._complete, qp, entry, label="nic:flush")

    def _issue(self, qp: PhysicalQP, entry: _Inflight) -> None:
        wr = entry.wr
        cost = self.cost
        now = self.clock.now
        start = max(now, qp._hw_free_at)
        extra = 0
        if qp.kind is QPKind.DC:
            route = wr.dct_route
            assert route is not None
            if qp.connected_peer is None or route.owner.gid != qp.connected_peer.gid:
                start += cost.dc_reconnect_ns
                qp.connected_peer = route.owner
                qp.reconnects += 1
            extra = cost.dc_op_extra_ns
            dst_gid = route.owner.gid
        else:
            assert qp.connected_peer is not None
            dst_gid = qp.connected_peer.gid
        qp._hw_free_at = start + cost.qp_issue_ns
        dst = self.fabric.nics.get(dst_gid)
        entry.dst = dst
        lat = self.fabric.latency(self.gid, dst_gid)
        self.fabric.tap.append(WireOp(start, self.gid, dst_gid, wr.op.value, wr.length))
        done = start + extra + cost.data_op_base_ns + cost.transfer_ns(wr.length) + 2 * lat
        if dst is not None:
            arrive = start + lat
            begin = max(arrive, dst._inbound_free)
            dst._inbound_free = begin + dst.cost.inbound_op_ns + (
                dst.cost.dc_inbound_extra_ns if qp.kind is QPKind.DC else 0)
            done += begin - arrive
        done = max(done, qp._last_done)
        qp._last_done = done
        self.clock.schedule(done - now, self._complete, qp, entry, label=f"nic:{wr.op.value}")

    def _execute(self, qp: PhysicalQP, entry: _Inflight) -> WcStatus:
        wr = entry.wr
        dst = entry.dst
        if dst is None:
            return WcStatus.REM_ACCESS_ERR
        if qp.kind is QPKind.DC:
            route = wr.dct_route
            target = dst.dct_targets.get(route.dct_num)
            if target is None or target.dct_key != route.dct_key:
                return WcStatus.REM_ACCESS_ERR
        if wr.op is Opcode.READ:
            raddr, rkey = wr.remote
            if not dst.remote_ok(raddr, rkey, wr.local[1], Perm.READ):
                return WcStatus.REM_ACCESS_ERR
            if not self.local_ok(*wr.local):
                return WcStatus.LOC_ERR
            self.memory.write(wr.local[0], dst.memory.read(raddr, wr.local[1]))
            return WcStatus.OK
        if wr.op is Opcode.WRITE:
            raddr, rkey = wr.remote
            data = wr.inline if wr.inline is not None else self.memory.read(*wr.local)
            if not dst.remote_ok(raddr, rkey, len(data), Perm.WRITE):
                return WcStatus.REM_ACCESS_ERR
            dst.memory.write(raddr, data)
            return WcStatus.OK
        data = wr.inline if wr.inline is not None else self.memory.read(*wr.local)
        if qp.kind is QPKind.DC:
            handler = dst._dct_handlers.get(wr.dct_route.dct_num)
            if handler is None:
                return WcStatus.REM_ACCESS_ERR
            return WcStatus.OK if handler(data, self.gid) else WcStatus.RNR_ERR
        peer = dst.qps.get(qp.remote_qpn) if qp.remote_qpn is not None else None
        if peer is None:
            return WcStatus.REM_ACCESS_ERR
        if peer.recv_handler is not None:
            # a software receiver that declines applies back-pressure without breaking the connection
            if peer.recv_handler(data, peer):
                return WcStatus.OK
            entry.soft = True
            return WcStatus.RNR_ERR
        return dst._receive_rc(peer, data)

    def _receive_rc(self, qp: PhysicalQP, data: bytes) -> WcStatus:
        if not qp.posted_recv_buffers:
            return WcStatus.RNR_ERR
        wr_id, addr, length = qp.posted_recv_buffers.popleft()
        if len(data) > length:
            qp.recv_cq.append(Completion(wr_id, WcStatus.LOC_ERR, len(data), Opcode.SEND, qp.qpn))
            return WcStatus.REM_ACCESS_ERR
        self.memory.write(addr, data)
        qp.recv_cq.append(Completion(wr_id, WcStatus.OK, len(data), Opcode.SEND, qp.qpn))
        return WcStatus.OK

    def _complete(self, qp: PhysicalQP, entry: _Inflight) -> None:
        status = entry.status
        if status is None:
            if qp.state is QPState.ERR:
                status = WcStatus.FLUSH_ERR
            else:
                status = self._execute(qp, entry)
                # RC treats any remote failure as fatal; DC connections are hardware-managed
                if status is not WcStatus.OK and qp.kind is QPKind.RC and not entry.soft:
                    self._enter_err(qp)
        if status is WcStatus.OK and not entry.wr.signaled:
            return
        if len(qp.cq) >= qp.cq_max_depth:
            qp.cq_overrun = True
            self._enter_err(qp)
            return
        qp.cq.append(Completion(entry.wr.wr_id, status, entry.wr.length, entry.wr.op, qp.qpn, entry.seq))
        qp.cq_trigger.pulse()

    def poll_cq(self, qp: PhysicalQP) -> Optional[Completion]:
        if not qp.cq:
            return None
        wc = qp.cq.popleft()
        freed = 0
        while qp._slots and qp._slots[0] <= wc.seq:
            qp._slots.popleft()
            freed += 1
        qp.uncomp_cnt -= freed
        return wc

    def post_recv(self, qp: PhysicalQP, buffers: Iterable[tuple[int, int, int]]) -> None:
        for wr_id, addr, length in buffers:
            if length <= 0:
                raise ValueError("receive buffer must be non-empty")
            if len(qp.posted_recv_buffers) >= max(qp.rq_max_depth, 1):
                raise ResourceError("receive queue full")
            qp.posted_recv_buffers.append((wr_id, addr, length))

    def poll_recv_cq(self, qp: PhysicalQP) -> Optional[Completion]:
        return qp.recv_cq.popleft() if qp.recv_cq else None


def op_from(value: Union[str, Opcode]) -> Opcode:
    return value if isinstance(value, Opcode) else Opcode(value.upper())

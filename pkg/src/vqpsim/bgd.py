"""Background daemon: promote busy peers to RC QPs and reclaim idle ones by LRU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Generator, Optional

from .nic import NicError, QPKind
from .simcore import NodeId, SimClock
from .vplane import ConnectError, KernelNode, PooledQP


@dataclass
class BgdConfig:
    window_ns: int = 1_000_000_000
    threshold: int = 64
    rc_capacity: int = 16
    retry_base_ns: int = 1_000_000
    retry_cap_ns: int = 1_000_000_000
    max_retries: int = 32

    def validate(self) -> None:
        for name in ("window_ns", "threshold", "rc_capacity", "retry_base_ns", "retry_cap_ns", "max_retries"):
            if getattr(self, name) <= 0:
                raise ValueError(f"bgd.{name} must be positive")
        if self.retry_cap_ns < self.retry_base_ns:
            raise ValueError("bgd.retry_cap_ns must be >= bgd.retry_base_ns")


class TrafficSampler:
    """Per-(cpu, peer) request counters over fixed windows aligned to time zero."""

    def __init__(self, clock: SimClock, window_ns: int, threshold: int):
        self.clock = clock
        self.window_ns = window_ns
        self.threshold = threshold
        self.counts: dict[tuple[int, NodeId], int] = {}
        self.promoted: set[tuple[int, NodeId]] = set()
        self.window_start = 0

    def _roll(self) -> None:
        now = self.clock.now
        if now >= self.window_start + self.window_ns:
            self.window_start = now - now % self.window_ns
            self.counts.clear()

    def record(self, cpu: int, peer: NodeId, n: int = 1) -> bool:
        """Count ``n`` requests; True exactly when this crosses the threshold for an unpromoted peer."""
        self._roll()
        key = (cpu, peer)
        before = self.counts.get(key, 0)
        after = before + n
        self.counts[key] = after
        if before < self.threshold <= after and key not in self.promoted:
            self.promoted.add(key)
            return True
        return False

    def release(self, cpu: int, peer: NodeId) -> None:
        self.promoted.discard((cpu, peer))
        self.counts.pop((cpu, peer), None)


class LruState:
    """Picks the least recently used RC QP that is safe to reclaim."""

    def __init__(self, capacity: int):
        self.capacity = capacity

    def over(self, rc_count: int) -> bool:
        return rc_count > self.capacity

    def victim(self, candidates: list[PooledQP], busy: set[int]) -> Optional[PooledQP]:
        ok = [pq for pq in candidates if id(pq) not in busy]
        if not ok:
            return None
        return min(ok, key=lambda pq: (pq.last_use, pq.phys.qpn))


class Promoter:
    def __init__(self, node: KernelNode, config: Optional[BgdConfig] = None):
        self.node = node
        self.clock = node.clock
        self.config = config or BgdConfig()
        self.config.validate()
        self.sampler = TrafficSampler(self.clock, self.config.window_ns, self.config.threshold)
        self.lru = LruState(self.config.rc_capacity)
        self.busy: set[int] = set()
        self.log: list[tuple[int, str, int, NodeId]] = []
        self.failures = 0

    def record(self, cpu: int, peer: NodeId, n: int = 1) -> bool:
        if self.sampler.record(cpu, peer, n):
            self.log.append((self.clock.now, "schedule", cpu, peer))
            self.clock.spawn(self.promote(cpu, peer), f"promote{cpu}")
            return True
        return False

    def promote(self, cpu: int, peer: NodeId) -> Generator[Any, Any, Optional[PooledQP]]:
        sub = self.node.cpus[cpu]
        if sub.rc.get(peer):
            return sub.rc[peer][0]
        backoff = self.config.retry_base_ns
        for _ in range(self.config.max_retries):
            try:
                pq = yield from self.node.create_rc(cpu, peer)
                break
            except (NicError, ConnectError):
                self.failures += 1
                self.log.append((self.clock.now, "retry", cpu, peer))
                yield backoff
                backoff = min(2 * backoff, self.config.retry_cap_ns)
        else:
            self.sampler.release(cpu, peer)
            return None
        self.log.append((self.clock.now, "created", cpu, peer))
        self.busy.add(id(pq))
        try:
            for vq in self.node.connected_to(cpu, peer):
                if vq.qp is not None and vq.qp.kind is QPKind.DC:
                    yield from self.node.transfer_physical_qp(vq, pq)
        finally:
            self.busy.discard(id(pq))
        self.log.append((self.clock.now, "promoted", cpu, peer))
        yield from self.reclaim(cpu)
        return pq

    def _has_unconsumed(self, pq: PooledQP) -> bool:
        return any(vq.inbox for vq in self.node.users_of(pq))

    def reclaim(self, cpu: int) -> Generator[Any, Any, int]:
        """Evict LRU RC QPs until the sub-pool is back within capacity; returns the count."""
        sub = self.node.cpus[cpu]
        evicted = 0
        while self.lru.over(len(sub.rc_qps())):
            held = {id(pq) for pq in sub.rc_qps() if self._has_unconsumed(pq)}
            pq = self.lru.victim(sub.rc_qps(), self.busy | held)
            if pq is None:
                break
            self.busy.add(id(pq))
            sub.remove_rc(pq)
            try:
                for vq in self.node.users_of(pq):
                    moved = yield from self.node.transfer_physical_qp(vq, sub.select_dc())
                    if not moved:
                        # keep the QP alive for VQPs whose peer never acknowledged
                        sub.add_rc(pq.peer, pq)
                        break
                else:
                    self.node.destroy_rc(pq)
                    self.sampler.release(cpu, pq.peer)
                    self.log.append((self.clock.now, "reclaimed", cpu, pq.peer))
                    evicted += 1
                    continue
                break
            finally:
                self.busy.discard(id(pq))
        return evicted

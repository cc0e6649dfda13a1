"""Deterministic discrete-event clock, generator processes and the simulated fabric.

All times are integer nanoseconds. Events with the same fire time run in
insertion order, so a scenario replayed with the same seed produces the same
trace byte for byte.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable, Optional

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class SimError(RuntimeError):
    pass


class EventBudgetExceeded(SimError):
    pass


class Deadlock(SimError):
    """Raised by :meth:`SimClock.call` when the queue drains before the process ends."""


@dataclass(order=True)
class SimEvent:
    time: int
    seq: int
    callback: Callable[..., Any] = field(compare=False)
    args: tuple = field(compare=False, default=())
    label: str = field(compare=False, default="")
    cancelled: bool = field(compare=False, default=False)


class EventHandle:
    __slots__ = ("_event",)

    def __init__(self, event: SimEvent):
        self._event = event

    @property
    def time(self) -> int:
        return self._event.time

    def cancel(self) -> None:
        self._event.cancelled = True


class Signal:
    """One-shot condition a process can wait on by yielding it."""

    __slots__ = ("clock", "fired", "value", "_waiters")

    def __init__(self, clock: "SimClock"):
        self.clock = clock
        self.fired = False
        self.value: Any = None
        self._waiters: list[Callable[[Any], None]] = []

    def fire(self, value: Any = None) -> bool:
        """Fire once; later calls are ignored and return False."""
        if self.fired:
            return False
        self.fired = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for w in waiters:
            self.clock.schedule(0, w, value)
        return True

    def subscribe(self, callback: Callable[[Any], None]) -> None:
        if self.fired:
            self.clock.schedule(0, callback, self.value)
        else:
            self._waiters.append(callback)


class Trigger:
    """Re-armable notifier: each ``wait()`` returns a signal fired by the next ``pulse()``."""

    __slots__ = ("clock", "_current")

    def __init__(self, clock: "SimClock"):
        self.clock = clock
        self._current: Optional[Signal] = None

    def wait(self) -> Signal:
        if self._current is None:
            self._current = Signal(self.clock)
        return self._current

    def pulse(self, value: Any = None) -> None:
        sig, self._current = self._current, None
        if sig is not None:
            sig.fire(value)


class Process:
    """A generator driven by the clock.

    The generator may yield an ``int`` (sleep that many ns), a :class:`Signal`
    (resume with its value once fired) or another :class:`Process` (join it and
    resume with its result; its exception is re-raised in the joiner).
    """

    def __init__(self, clock: "SimClock", gen: Generator, label: str = ""):
        self.clock = clock
        self.gen = gen
        self.label = label
        self.done = Signal(clock)
        self.result: Any = None
        self.error: Optional[BaseException] = None

    def _step(self, send_value: Any = None, throw: Optional[BaseException] = None) -> None:
        try:
            if throw is not None:
                item = self.gen.throw(throw)
            else:
                item = self.gen.send(send_value)
        except StopIteration as stop:
            self.result = stop.value
            self.done.fire(self)
            return
        except BaseException as exc:  # noqa: BLE001 - surfaced to joiners
            self.error = exc
            self.done.fire(self)
            return
        self._wait_on(item)

    def _wait_on(self, item: Any) -> None:
        if isinstance(item, bool) or item is None:
            raise SimError(f"process {self.label!r} yielded {item!r}")
        if isinstance(item, int):
            if item < 0:
                self._step(throw=SimError("negative sleep"))
                return
            self.clock.schedule(item, self._step, None)
        elif isinstance(item, Signal):
            item.subscribe(self._step)
        elif isinstance(item, Process):
            item.done.subscribe(self._joined)
        else:
            raise SimError(f"process {self.label!r} yielded unsupported {item!r}")

    def _joined(self, other: "Process") -> None:
        if other.error is not None:
            self._step(throw=other.error)
        else:
            self._step(other.result)


class SimClock:
    def __init__(self, event_budget: Optional[int] = None, trace: bool = False):
        self.now = 0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self.event_budget = event_budget
        self.events_run = 0
        self.trace: Optional[list[tuple[int, str]]] = [] if trace else None

    def schedule(self, delay: int, callback: Callable[..., Any], *args: Any, label: str = "") -> EventHandle:
        if delay < 0:
            raise ValueError("delay must be >= 0")
        ev = SimEvent(self.now + int(delay), self._seq, callback, args, label)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return EventHandle(ev)

    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def step(self) -> bool:
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            if ev.time < self.now:
                raise SimError("event scheduled in the past")
            self.now = ev.time
            self.events_run += 1
            if self.event_budget is not None and self.events_run > self.event_budget:
                raise EventBudgetExceeded(f"more than {self.event_budget} events processed")
            if self.trace is not None:
                self.trace.append((ev.time, ev.label or getattr(ev.callback, "__qualname__", "?")))
            ev.callback(*ev.args)
            return True
        return False

    def run_until_idle(self) -> int:
        while self.step():
            pass
        return self.now

    def run_until(self, time_ns: int) -> int:
        """Run every event due at or before ``time_ns`` and leave the clock there."""
        while self._queue:
            head = self._queue[0]
            if head.cancelled:
                heapq.heappop(self._queue)
                continue
            if head.time > time_ns:
                break
            self.step()
        self.now = max(self.now, time_ns)
        return self.now

    def signal(self) -> Signal:
        return Signal(self)

    def timeout(self, delay: int, value: Any = None) -> Signal:
        sig = Signal(self)
        self.schedule(delay, sig.fire, value)
        return sig

    def spawn(self, gen: Generator, label: str = "") -> Process:
        proc = Process(self, gen, label)
        self.schedule(0, proc._step, None, label=label)
        return proc

    def call(self, gen: Generator, label: str = "") -> Any:
        """Run ``gen`` as a process until it finishes and return its result."""
        proc = self.spawn(gen, label)
        while not proc.done.fired:
            if not self.step():
                raise Deadlock(f"process {label or gen!r} never completed")
        if proc.error is not None:
            raise proc.error
        return proc.result

    def sleep(self, delay: int) -> Generator[int, None, None]:
        yield delay


def all_of(clock: SimClock, procs: Iterable[Process]) -> Generator[Any, Any, list]:
    results = []
    for p in procs:
        results.append((yield p))
    return results


class Resource:
    """FIFO server with ``capacity`` parallel slots (RNIC command queue, RPC worker...)."""

    def __init__(self, clock: SimClock, capacity: int = 1, name: str = ""):
        self.clock = clock
        self.capacity = capacity
        self.name = name
        self.in_use = 0
        self.busy_ns = 0
        self._waiting: deque[Signal] = deque()

    def acquire(self) -> Signal:
        sig = Signal(self.clock)
        if self.in_use < self.capacity:
            self.in_use += 1
            sig.fire()
        else:
            self._waiting.append(sig)
        return sig

    def release(self) -> None:
        if self._waiting:
            self._waiting.popleft().fire()
        else:
            self.in_use -= 1

    def hold(self, ns: int) -> Generator[Any, Any, None]:
        yield self.acquire()
        try:
            self.busy_ns += ns
            if ns:
                yield ns
        finally:
            self.release()


@dataclass(frozen=True, order=True)
class NodeId:
    """Fabric endpoint: 16-byte gid plus a small port number."""

    gid: bytes
    port: int = 0

    def __post_init__(self) -> None:
        if len(self.gid) != 16:
            raise ValueError("gid must be 16 bytes")
        if not 0 <= self.port < 1 << 16:
            raise ValueError("port out of range")

    @property
    def host(self) -> int:
        return int.from_bytes(self.gid[-4:], "big")

    def __repr__(self) -> str:
        return f"NodeId(h{self.host}:{self.port})"


def make_gid(host_index: int) -> bytes:
    return b"\xfe\x80" + bytes(10) + host_index.to_bytes(4, "big")


@dataclass
class FabricConfig:
    wire_latency_ns: int = 1_000
    syscall_overhead_ns: int = 1_000
    meta_latency_ns: int = 1_000
    pair_latency_ns: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("wire_latency_ns", "syscall_overhead_ns", "meta_latency_ns"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for key, v in self.pair_latency_ns.items():
            if v <= 0:
                raise ValueError(f"latency for {key} must be positive")


@dataclass(frozen=True)
class WireOp:
    time: int
    src: bytes
    dst: bytes
    kind: str
    nbytes: int


class Fabric:
    """Single-switch fabric: reliable, ordered delivery with a fixed per-pair latency.

    Every packet-level operation is recorded in ``tap`` so that benchmarks can
    count wire operations independently of the component that issued them.
    """

    def __init__(self, clock: SimClock, config: Optional[FabricConfig] = None):
        self.clock = clock
        self.config = config or FabricConfig()
        self.config.validate()
        self.tap: list[WireOp] = []
        self.nics: dict[bytes, Any] = {}
        self._meta_gids: set[bytes] = set()

    def mark_meta(self, gid: bytes) -> None:
        self._meta_gids.add(gid)

    def latency(self, src: bytes, dst: bytes) -> int:
        cfg = self.config
        hit = cfg.pair_latency_ns.get((src, dst)) or cfg.pair_latency_ns.get((dst, src))
        if hit:
            return hit
        if src in self._meta_gids or dst in self._meta_gids:
            return cfg.meta_latency_ns
        return cfg.wire_latency_ns

    def record(self, src: bytes, dst: bytes, kind: str, nbytes: int = 0) -> None:
        self.tap.append(WireOp(self.clock.now, src, dst, kind, nbytes))

    def send(self, src: bytes, dst: bytes, kind: str, nbytes: int,
             callback: Callable[..., Any], *args: Any) -> EventHandle:
        """Record a one-way transmission and deliver ``callback(*args)`` on arrival."""
        self.record(src, dst, kind, nbytes)
        return self.clock.schedule(self.latency(src, dst), callback, *args, label=f"wire:{kind}")

    def count(self, kind: Optional[str] = None, since: int = 0, until: Optional[int] = None) -> int:
        n = 0
        for op in self.tap:
            if op.time < since or (until is not None and op.time > until):
                continue
            if kind is None or op.kind == kind:
                n += 1
        return n

    def mark(self) -> int:
        """Index into the tap, for counting operations issued after this point."""
        return len(self.tap)

    def ops_since(self, mark: int, kind: Optional[str] = None) -> int:
        return sum(1 for op in self.tap[mark:] if kind is None or op.kind == kind)

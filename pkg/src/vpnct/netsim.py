"""Deterministic discrete-event network.

Hosts are attached by name and own addresses either on the public wire or
inside the VPN tunnel. Packets travel along explicit routes keyed by
``(from, to, path)``; every route subtracts its hop count from the TTL and a
packet survives iff ``ttl >= hops``. The receiving host always processes what
arrives (even with TTL 0) and only fails later if it tries to forward.

A *train* is a run of packets that differ in one field (sequence number,
port, TxID) and leave a host at a fixed spacing. Trains are scheduled as a
single event; the receiver works through them packet by packet but may use
a bulk kernel for the stretch before the next queued event. Processing a
train is semantically identical to sending its packets one at a time.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
import random
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, TextIO

import numpy as np

from .packets import SEQ_MASK, DnsMessage, Packet


class Path(enum.Enum):
    TUNNEL = "tunnel"
    DIRECT = "direct"


class SimError(Exception):
    pass


class UnknownRoute(SimError):
    pass


@dataclass(frozen=True)
class Route:
    src: str
    dst: str
    hops: int
    latency_s: float

    def __post_init__(self):
        if self.hops < 1:
            raise ValueError("a route has at least one hop")
        if self.latency_s < 0:
            raise ValueError("negative latency")


class Train:
    """``count`` packets built from ``template``; packet i differs in ``field``.

    ``field`` is ``seq`` (value = start + i*stride mod 2**32), or one of
    ``sport``/``dport``/``txid`` with explicit ``values``. ``mark`` of packet i
    is its varying value unless the template carries a mark.
    """

    __slots__ = ("template", "count", "spacing", "field", "start", "stride",
                 "values", "lost", "offset", "t_first", "ttl_after", "origin", "path", "dest")

    FIELDS = ("seq", "sport", "dport", "txid")

    def __init__(self, template: Packet, count: int, spacing: float, field: str,
                 start: int = 0, stride: int = 1, values: Optional[Iterable[int]] = None):
        if field not in self.FIELDS:
            raise ValueError(f"train field {field!r} not in {self.FIELDS}")
        if count < 0 or spacing < 0:
            raise ValueError("train needs count >= 0 and spacing >= 0")
        self.template = template
        self.count = count
        self.spacing = spacing
        self.field = field
        self.start = start
        self.stride = stride
        self.values = None
        if values is not None:
            self.values = np.ascontiguousarray(np.asarray(values, dtype=np.uint32))
            if len(self.values) != count:
                raise ValueError("values length must equal count")
        elif field != "seq":
            raise ValueError(f"train over {field} needs explicit values")
        self.lost: Optional[np.ndarray] = None
        # Packet i is packet offset+i of the train this one was cut from, and
        # t_first is that original's index-0 time. Timing by absolute index
        # keeps arrivals bit-identical however a train gets split.
        self.offset = 0
        self.t_first = 0.0
        self.ttl_after = template.ttl
        self.origin = ""
        self.path = Path.DIRECT
        self.dest = ""

    def value(self, i: int) -> int:
        if self.values is not None:
            return int(self.values[i])
        return (self.start + i * self.stride) & SEQ_MASK

    def arrival(self, i: int) -> float:
        return self.t_first + (self.offset + i) * self.spacing

    def packet(self, i: int) -> Packet:
        t = self.template
        v = self.value(i)
        p = t.copy(ttl=self.ttl_after, via_tunnel=self.path is Path.TUNNEL)
        if t.mark is None:
            p.mark = v
        f = self.field
        if f == "seq":
            p.seq = v
        elif f == "sport":
            p.src = t.src._replace(port=v)
        elif f == "dport":
            p.dst = t.dst._replace(port=v)
        else:
            d = t.payload
            p.payload = DnsMessage(v, d.qname, d.is_response, d.answer, d.ttl_s)
        return p

    def is_lost(self, i: int) -> bool:
        return self.lost is not None and bool(self.lost[i])

    def subtrain(self, lo: int, hi: int) -> "Train":
        """Packets [lo, hi) as a fresh train (same template, spacing)."""
        if self.values is not None:
            t = Train(self.template, hi - lo, self.spacing, self.field, values=self.values[lo:hi])
        else:
            t = Train(self.template, hi - lo, self.spacing, self.field,
                      (self.start + lo * self.stride) & SEQ_MASK, self.stride)
        if self.lost is not None:
            t.lost = self.lost[lo:hi]
        t.offset = self.offset + lo
        return t


class Host:
    """Base class for anything attached to the simulator."""

    def __init__(self, name: str):
        self.name = name
        self.sim: Optional["Simulator"] = None

    def attach(self, sim: "Simulator") -> None:
        self.sim = sim

    def receive(self, packet: Packet) -> None:
        pass

    #: A passive host never reacts to what it receives, so the simulator may
    #: hand it packets through :meth:`defer` instead of queueing events.
    passive = False

    def defer(self, at: float, packet: Packet) -> None:
        raise NotImplementedError

    def stretch_end(self, train: Train, lo: int, hi: int) -> int:
        """First index in [lo, hi] whose arrival does not precede the next event."""
        ok = self.sim.train_may_run
        if lo >= hi or not ok(train.arrival(lo)):
            return lo
        # Gallop from lo, then bisect: short stretches are the common case.
        good, step = lo, 1
        while True:
            probe = good + step
            if probe >= hi:
                if ok(train.arrival(hi - 1)):
                    return hi
                probe = hi - 1
                break
            if not ok(train.arrival(probe)):
                break
            good = probe
            step *= 2
        a, b = good + 1, probe
        while a < b:
            m = (a + b) // 2
            if ok(train.arrival(m)):
                a = m + 1
            else:
                b = m
        return a

    def receive_train(self, train: Train, lo: int, hi: int) -> int:
        """Process packets from ``lo`` while they precede every queued event.

        Returns the index of the first unprocessed packet. Subclasses may
        override to handle a whole stretch with a bulk kernel.
        """
        sim = self.sim
        i = lo
        while i < hi:
            t = train.arrival(i)
            if not sim.train_may_run(t):
                break
            sim.advance(t)
            if train.is_lost(i):
                sim.record(self.name, "drop", train.packet(i), reason="loss")
            else:
                pkt = train.packet(i)
                if sim.tracing:
                    sim.record(self.name, "deliver", pkt)
                self.receive(pkt)
            i += 1
        return i


TraceRecord = dict


class Simulator:
    """Virtual clock, event queue, routes, address registry, trace."""

    def __init__(self, seed: int = 0, trace: Optional[TextIO] = None,
                 record_trace: bool = False, drop_probability: float = 0.0):
        if not 0.0 <= drop_probability < 1.0:
            raise ValueError("drop_probability must be in [0, 1)")
        self.seed = seed
        self.now = 0.0
        self.drop_probability = drop_probability
        self._queue: list = []
        self._seq = itertools.count()
        self.hosts: dict[str, Host] = {}
        self.routes: dict[tuple[str, str, Path], Route] = {}
        self.public_addrs: dict[int, str] = {}
        self.tunnel_addrs: dict[int, str] = {}
        self.tunnel_hub: Optional[str] = None
        self._streams: dict[str, random.Random] = {}
        self._advance_hooks: list[Callable[[float], None]] = []
        self._trace_file = trace
        self.records: Optional[list[TraceRecord]] = [] if record_trace else None
        self.tracing = trace is not None or record_trace
        self.events_run = 0
        self._t_end = float("inf")

    # ---- randomness -------------------------------------------------------

    def rng(self, name: str) -> random.Random:
        """Named sub-stream; draws on one never perturb another."""
        r = self._streams.get(name)
        if r is None:
            r = self._streams[name] = random.Random(f"{self.seed}:{name}")
        return r

    # ---- topology -----------------------------------------------------------

    def add_host(self, host: Host, public_addr: Optional[int] = None) -> Host:
        if host.name in self.hosts:
            raise SimError(f"duplicate host {host.name}")
        self.hosts[host.name] = host
        host.attach(self)
        if public_addr is not None:
            self.register_public(public_addr, host.name)
        return host

    def register_public(self, addr: int, host: str) -> None:
        self.public_addrs[addr] = host

    def register_tunnel(self, addr: int, host: str) -> None:
        self.tunnel_addrs[addr] = host

    def set_tunnel_hub(self, host: str) -> None:
        self.tunnel_hub = host

    def add_route(self, src: str, dst: str, hops: int, latency_s: float,
                  path: Path = Path.DIRECT, both_ways: bool = True) -> None:
        self.routes[(src, dst, path)] = Route(src, dst, hops, latency_s)
        if both_ways:
            self.routes[(dst, src, path)] = Route(dst, src, hops, latency_s)

    def route(self, src: str, dst: str, path: Path) -> Route:
        r = self.routes.get((src, dst, path))
        if r is None:
            raise UnknownRoute(f"no {path.value} route {src}->{dst}")
        return r

    def hops(self, src: str, dst: str, path: Path = Path.DIRECT) -> int:
        return self.route(src, dst, path).hops

    def _destination(self, origin: str, packet: Packet, path: Path) -> Optional[str]:
        if path is Path.TUNNEL:
            if origin == self.tunnel_hub:
                return self.tunnel_addrs.get(packet.dst.addr)
            return self.tunnel_hub
        return self.public_addrs.get(packet.dst.addr)

    # ---- clock and events --------------------------------------------------

    def on_advance(self, hook: Callable[[float], None]) -> None:
        self._advance_hooks.append(hook)

    def advance(self, t: float) -> None:
        if t < self.now:
            raise SimError(f"clock would go backwards: {t} < {self.now}")
        self.now = t
        for hook in self._advance_hooks:
            hook(t)

    def call_at(self, at: float, fn: Callable, *args) -> None:
        if at < self.now:
            raise SimError(f"event scheduled in the past: {at} < {self.now}")
        heapq.heappush(self._queue, (at, next(self._seq), fn, args))

    def call_later(self, delay: float, fn: Callable, *args) -> None:
        self.call_at(self.now + delay, fn, *args)

    def train_may_run(self, t: float) -> bool:
        """True if a train packet arriving at ``t`` goes before every queued event."""
        if t > self._t_end:
            return False
        q = self._queue
        return not q or t < q[0][0]

    def run_until(self, t_end: float) -> int:
        if t_end < self.now:
            raise SimError("run_until into the past")
        q = self._queue
        count = 0
        self._t_end = t_end
        try:
            while q and q[0][0] <= t_end:
                at, _, fn, args = heapq.heappop(q)
                self.advance(at)
                fn(*args)
                count += 1
        finally:
            self._t_end = float("inf")
        self.advance(t_end)
        self.events_run += count
        return count

    def run(self, max_time: float = float("inf")) -> int:
        """Run until the queue drains (or ``max_time``)."""
        count = 0
        q = self._queue
        while q and q[0][0] <= max_time:
            count += self.run_until(q[0][0])
        return count

    def pending(self) -> int:
        return len(self._queue)

    # ---- sending -------------------------------------------------------------

    def _lost(self) -> bool:
        return self.drop_probability > 0 and self.rng("loss").random() < self.drop_probability

    def send(self, origin: str, packet: Packet, path: Path) -> bool:
        """Put ``packet`` on the wire; returns True if a delivery was scheduled."""
        if path is Path.TUNNEL:
            packet.via_tunnel = True
            if origin != self.tunnel_hub:
                # The tunnel interface stamps the sender's own internal address.
                hub = self.hosts[self.tunnel_hub]
                own = hub.internal_addr_of(origin)  # type: ignore[attr-defined]
                if own is None:
                    raise SimError(f"{origin} is not attached to the tunnel")
                if packet.src.addr != own:
                    packet.src = packet.src._replace(addr=own)
        else:
            packet.via_tunnel = False
        if self.tracing:
            self.record(origin, "send", packet, path=path.value)
        dest = self._destination(origin, packet, path)
        r = self.routes.get((origin, dest, path)) if dest is not None else None
        if r is None:
            self.record(origin, "drop", packet, reason="unroutable")
            return False
        if packet.ttl < r.hops:
            self.record(origin, "drop", packet, reason="ttl", hops=r.hops)
            return False
        if self._lost():
            self.record(origin, "drop", packet, reason="loss")
            return False
        packet.ttl -= r.hops
        host = self.hosts[dest]
        if host.passive and not self.tracing:
            host.defer(self.now + r.latency_s, packet)
        else:
            self.call_at(self.now + r.latency_s, self._deliver, dest, packet)
        return True

    def _deliver(self, dest: str, packet: Packet) -> None:
        if self.tracing:
            self.record(dest, "deliver", packet)
        self.hosts[dest].receive(packet)

    def send_train(self, origin: str, train: Train, path: Path,
                   spacing_start: Optional[float] = None) -> float:
        """Send every packet of ``train``; packet i departs at start + (offset+i)*spacing.

        ``start`` defaults to now. Returns the departure time of the last
        packet. Route, TTL and path are shared by the whole train, so they
        are checked once.
        """
        start = self.now if spacing_start is None else spacing_start
        if train.count == 0:
            return start
        tpl = train.template
        if path is Path.TUNNEL and origin != self.tunnel_hub:
            own = self.hosts[self.tunnel_hub].internal_addr_of(origin)  # type: ignore[attr-defined]
            if own is None:
                raise SimError(f"{origin} is not attached to the tunnel")
            tpl.src = tpl.src._replace(addr=own)
        tpl.via_tunnel = path is Path.TUNNEL
        train.origin = origin
        train.path = path
        dest = self._destination(origin, tpl, path)
        r = self.routes.get((origin, dest, path)) if dest is not None else None
        off = train.offset
        last = start + (off + train.count - 1) * train.spacing
        reason = None
        if r is None:
            reason = "unroutable"
        elif tpl.ttl < r.hops:
            reason = "ttl"
        if self.tracing:
            self.call_at(start + off * train.spacing, self._trace_departures, train, 0, reason, start)
        if reason is not None:
            return last
        if self.drop_probability > 0:
            rng = self.rng("loss")
            p = self.drop_probability
            lost = np.array([rng.random() < p for _ in range(train.count)], dtype=bool)
            train.lost = lost if train.lost is None else (lost | train.lost)
        train.ttl_after = tpl.ttl - r.hops
        train.t_first = start + r.latency_s
        train.dest = dest
        self.call_at(train.arrival(0), self._train_step, train, 0)
        return last

    def _trace_departures(self, train: Train, i: int, reason: Optional[str], start: float) -> None:
        while i < train.count:
            t = start + (train.offset + i) * train.spacing
            if not self.train_may_run(t) and t > self.now:
                self.call_at(t, self._trace_departures, train, i, reason, start)
                return
            self.advance(t)
            pkt = train.packet(i)
            pkt.ttl = train.template.ttl
            self.record(train.origin, "send", pkt, path=train.path.value)
            if reason is not None:
                self.record(train.origin, "drop", pkt, reason=reason)
            i += 1

    def _train_step(self, train: Train, lo: int) -> None:
        host = self.hosts[train.dest]
        i = host.receive_train(train, lo, train.count)
        if i <= lo:
            # The host must make progress on the packet this event was scheduled for.
            self.advance(train.arrival(lo))
            pkt = train.packet(lo)
            if train.is_lost(lo):
                self.record(host.name, "drop", pkt, reason="loss")
            else:
                if self.tracing:
                    self.record(host.name, "deliver", pkt)
                host.receive(pkt)
            i = lo + 1
        if i < train.count:
            self.call_at(train.arrival(i), self._train_step, train, i)

    # ---- trace ------------------------------------------------------------------

    def record(self, host: str, verb: str, packet: Optional[Packet] = None,
               entry: object = None, **detail) -> None:
        if not self.tracing:
            return
        rec = {
            "time": round(self.now, 9),
            "host": host,
            "verb": verb,
            "pkt": packet.summary() if packet is not None else None,
            "entry": entry.summary() if entry is not None else None,  # type: ignore[attr-defined]
            "detail": detail,
        }
        if self.records is not None:
            self.records.append(rec)
        if self._trace_file is not None:
            self._trace_file.write(json.dumps(rec, separators=(",", ":"), default=str) + "\n")

"""Connection-tracking table with per-framework NAT and TCP state behaviour.

The table is keyed two ways: by ``(proto, internal, remote)`` for outbound
packets and by ``(proto, translated port, remote)`` for inbound ones. The
second key is the NAT uniqueness constraint: at most one live entry may own
a given public port toward a given remote endpoint.

Expiry is lazy plus explicit: lookups never return an entry whose expiry has
passed, and :meth:`ConnTrackTable.expire_sweep` drains a heap of deadlines.
An entry is dead once ``expiry <= now``.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Union

from . import kernels
from .packets import ACK, RST, SYN, SEQ_MASK, Endpoint, Packet, Protocol, seq_distance


class TcpConnState(enum.Enum):
    SYN_SENT = "SYN_SENT"
    ESTABLISHED = "ESTABLISHED"
    CLOSE = "CLOSE"


class Direction(enum.Enum):
    OUTBOUND = "out"
    INBOUND = "in"


# --------------------------------------------------------------------------
# Profile model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoCheck:
    """Any RST moves the entry to CLOSE."""


@dataclass(frozen=True)
class InWindow:
    """RSTs near the expected sequence shorten the timeout and await a challenge ACK."""

    window: int = 65536
    reduced_timeout_s: float = 10.0
    restore_timeout_s: float = 300.0

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("in-window RST policy needs a positive window")
        if not self.reduced_timeout_s < self.restore_timeout_s:
            raise ValueError("reduced_timeout_s must be below restore_timeout_s")


@dataclass(frozen=True)
class Strict:
    """Only an RST carrying exactly the expected sequence number is honoured."""


RstPolicy = Union[NoCheck, InWindow, Strict]


@dataclass(frozen=True)
class Preservation:
    pass


@dataclass(frozen=True)
class RandomPorts:
    range_lo: int
    range_hi: int

    def __post_init__(self):
        if not 1 <= self.range_lo <= self.range_hi <= 65535:
            raise ValueError(f"bad random port range {self.range_lo}-{self.range_hi}")


PortAllocation = Union[Preservation, RandomPorts]


class ExhaustionBehavior(enum.Enum):
    DROP_PACKET = "drop"
    BYPASS_NAT = "bypass_nat"


@dataclass(frozen=True)
class Timeouts:
    syn_sent_s: float = 120.0
    established_s: float = 432000.0
    close_s: float = 10.0
    udp_s: float = 30.0
    loose_s: float = 300.0

    def __post_init__(self):
        for name in ("syn_sent_s", "established_s", "close_s", "udp_s", "loose_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"timeout {name} must be positive")


@dataclass(frozen=True)
class FrameworkProfile:
    name: str
    allocation: PortAllocation
    rst_policy: RstPolicy
    timeouts: Timeouts = Timeouts()
    framework: str = ""
    table_limit: Optional[int] = None
    loose_instantiation: bool = True
    exhaustion: ExhaustionBehavior = ExhaustionBehavior.DROP_PACKET
    # Where a preserved port that collides gets remapped to.
    ephemeral_range: tuple[int, int] = (32768, 65535)
    # Random draws per allocation before giving up; None searches exhaustively.
    alloc_attempts: Optional[int] = None
    # Countermeasure: cap on live entries per (client address, destination).
    conn_limit_per_dest: Optional[int] = None
    # Parameters with no published value (flagged when dumped).
    unverified: frozenset = frozenset()

    @property
    def rst_mode(self) -> int:
        if isinstance(self.rst_policy, NoCheck):
            return kernels.MODE_NOCHECK
        if isinstance(self.rst_policy, InWindow):
            return kernels.MODE_INWINDOW
        return kernels.MODE_STRICT

    @property
    def rst_window(self) -> int:
        return self.rst_policy.window if isinstance(self.rst_policy, InWindow) else 0

    @property
    def preserves_ports(self) -> bool:
        return isinstance(self.allocation, Preservation)

    def __post_init__(self):
        if self.table_limit is not None and self.table_limit < 1:
            raise ValueError("table_limit must be positive")
        if self.alloc_attempts is not None and self.alloc_attempts < 1:
            raise ValueError("alloc_attempts must be positive")
        if self.conn_limit_per_dest is not None and self.conn_limit_per_dest < 1:
            raise ValueError("conn_limit_per_dest must be positive")
        lo, hi = self.ephemeral_range
        if not 1 <= lo <= hi <= 65535:
            raise ValueError(f"bad ephemeral range {lo}-{hi}")


# --------------------------------------------------------------------------
# Entries
# --------------------------------------------------------------------------

class SessionKey(NamedTuple):
    proto: Protocol
    internal: Endpoint
    translated: Endpoint
    remote: Endpoint


@dataclass(slots=True)
class SeqTrack:
    last_seq: int = 0   # end of the highest segment seen from the remote side
    last_ack: int = 0   # last ACK sent by the internal side: expected seq of inbound RSTs
    window: int = 65536
    peer_ack: int = 0   # last ACK sent by the remote side: expected seq of outbound RSTs
    internal_next: int = 0


class SessionEntry:
    __slots__ = ("key", "state", "expiry", "seq", "created", "armed",
                 "synack_seen", "loose", "removed")

    def __init__(self, key: SessionKey, state: Optional[TcpConnState], expiry: float,
                 created: float, window: int = 65536, loose: bool = False):
        if expiry < created:
            raise ValueError("expiry precedes creation")
        self.key = key
        self.state = state
        self.expiry = expiry
        self.seq = SeqTrack(window=window)
        self.created = created
        self.armed = False
        self.synack_seen = False
        self.loose = loose
        self.removed = False

    @property
    def proto(self) -> Protocol:
        return self.key.proto

    def alive(self, now: float) -> bool:
        return not self.removed and self.expiry > now

    def summary(self) -> str:
        k = self.key
        state = self.state.value if self.state else "UDP"
        return (f"[{k.internal}<->{k.translated.port}]<->[{k.remote}] {state} "
                f"exp={self.expiry:.6f}{' armed' if self.armed else ''}")

    def __repr__(self) -> str:
        return f"SessionEntry({self.summary()})"


# --------------------------------------------------------------------------
# Results and failures
# --------------------------------------------------------------------------

class ConnTrackError(Exception):
    pass


class PortsExhausted(ConnTrackError):
    """No free external port; ``bypass`` means the profile leaks the packet untranslated."""

    def __init__(self, bypass: bool):
        super().__init__("bypass_nat" if bypass else "exhausted")
        self.bypass = bypass


class TableFull(ConnTrackError):
    def __init__(self, limit: int, kind: str = "table"):
        super().__init__(f"{kind} limit {limit} reached")
        self.limit = limit
        self.kind = kind


class RstAction(enum.Enum):
    IGNORED = "ignored"
    TIMEOUT_REDUCED = "timeout_reduced"
    CLOSED = "closed"
    REMOVED = "removed"


@dataclass(frozen=True)
class RstResult:
    action: RstAction
    challenge_ack_armed: bool = False


@dataclass(frozen=True)
class TransitionResult:
    new_state: Optional[TcpConnState]
    new_expiry: float
    forward: bool = True
    side_effect: Optional[str] = None


# (entry, verb, detail) -> None; used by the simulator's trace.
Observer = Callable[[SessionEntry, str, dict], None]

_RST_REJECTING = (RstAction.IGNORED,)


class ConnTrackTable:
    """One gateway's connection-tracking state under a given framework profile."""

    def __init__(self, profile: FrameworkProfile, public_addr: int,
                 rng: Optional[random.Random] = None, observer: Optional[Observer] = None):
        self.profile = profile
        self.public_addr = public_addr
        self.rng = rng or random.Random(0)
        self.observer = observer
        self._by_translated: dict[tuple, SessionEntry] = {}
        self._by_internal: dict[tuple, SessionEntry] = {}
        self._heap: list = []
        self._tick = itertools.count()
        self._occupied: dict[tuple, bytearray] = {}
        # Free-port counts per (proto, remote) for each allocation range, so
        # an exhausted range is detected without scanning it.
        ranges = {profile.ephemeral_range}
        if isinstance(profile.allocation, RandomPorts):
            ranges.add((profile.allocation.range_lo, profile.allocation.range_hi))
        self._ranges: tuple = tuple(sorted(ranges))
        self._free: dict[tuple, list[int]] = {}
        self._per_dest: Counter = Counter()
        self.stats: Counter = Counter()
        self._window = profile.rst_window or 65536

    # ---- inspection ---------------------------------------------------

    def __len__(self) -> int:
        return len(self._by_translated)

    def __iter__(self):
        return iter(list(self._by_translated.values()))

    def entries(self, now: Optional[float] = None) -> list[SessionEntry]:
        if now is None:
            return list(self._by_translated.values())
        return [e for e in self._by_translated.values() if e.expiry > now]

    def get(self, proto: Protocol, port: int, remote: Endpoint, now: float) -> Optional[SessionEntry]:
        """Entry owning public ``port`` toward ``remote``, if live."""
        e = self._by_translated.get((proto, port, remote))
        if e is not None and e.expiry <= now:
            self._remove(e, "expired")
            return None
        return e

    def find_outbound(self, proto: Protocol, internal: Endpoint, remote: Endpoint,
                      now: float) -> Optional[SessionEntry]:
        e = self._by_internal.get((proto, internal, remote))
        if e is not None and e.expiry <= now:
            self._remove(e, "expired")
            return None
        return e

    def is_free(self, proto: Protocol, port: int, remote: Endpoint, now: float) -> bool:
        return self.get(proto, port, remote, now) is None

    def free_ports(self, proto: Protocol, remote: Endpoint, lo: int, hi: int) -> int:
        occ = self._occupied.get((proto, remote))
        if occ is None:
            return hi - lo + 1
        return kernels.count_free(occ, lo, hi)

    # ---- allocation -----------------------------------------------------

    def _occ(self, proto: Protocol, remote: Endpoint) -> bytearray:
        occ = self._occupied.get((proto, remote))
        if occ is None:
            occ = self._occupied[(proto, remote)] = bytearray(65536)
            self._free[(proto, remote)] = [hi - lo + 1 for lo, hi in self._ranges]
        return occ

    def _mark(self, proto: Protocol, remote: Endpoint, port: int, used: bool) -> None:
        occ = self._occ(proto, remote)
        if bool(occ[port]) == used:
            return
        occ[port] = used
        free = self._free[(proto, remote)]
        for i, (lo, hi) in enumerate(self._ranges):
            if lo <= port <= hi:
                free[i] += -1 if used else 1

    def _random_free(self, occ: bytearray, lo: int, hi: int, attempts: Optional[int],
                     free: Optional[int] = None) -> int:
        if free == 0:
            return -1
        rand = self.rng.random
        span = hi - lo + 1
        tries = attempts if attempts is not None else 8
        for _ in range(tries):
            p = lo + int(rand() * span)
            if not occ[p]:
                return p
        if attempts is not None:
            return -1
        return kernels.pick_free(occ, lo, hi, rand())

    def _reclaim(self, proto: Protocol, port: int, remote: Endpoint) -> bool:
        """Free ``port`` if its holder is only lingering in CLOSE."""
        holder = self._by_translated.get((proto, port, remote))
        if holder is None or holder.state is not TcpConnState.CLOSE:
            return False
        self._remove(holder, "reclaimed")
        return True

    def _free_in(self, proto: Protocol, remote: Endpoint, lo: int, hi: int) -> Optional[int]:
        try:
            return self._free[(proto, remote)][self._ranges.index((lo, hi))]
        except (KeyError, ValueError):
            return None

    def allocate_port(self, proto: Protocol, internal: Endpoint, remote: Endpoint,
                      now: float) -> int:
        """Choose the public port for a new session; raises :class:`PortsExhausted`."""
        prof = self.profile
        occ = self._occ(proto, remote)
        if isinstance(prof.allocation, Preservation):
            if internal.port and not occ[internal.port]:
                return internal.port
            if internal.port and self._reclaim(proto, internal.port, remote):
                return internal.port
            lo, hi = prof.ephemeral_range
            port = self._random_free(occ, lo, hi, prof.alloc_attempts,
                                     self._free_in(proto, remote, lo, hi))
        else:
            lo, hi = prof.allocation.range_lo, prof.allocation.range_hi
            port = self._random_free(occ, lo, hi, prof.alloc_attempts,
                                     self._free_in(proto, remote, lo, hi))
        if port < 0:
            bypass = prof.exhaustion is ExhaustionBehavior.BYPASS_NAT
            self.stats["bypass_nat" if bypass else "exhausted"] += 1
            raise PortsExhausted(bypass)
        return port

    # ---- entry lifecycle ------------------------------------------------

    def _timeout_for(self, entry: SessionEntry) -> float:
        t = self.profile.timeouts
        if entry.state is None:
            return t.udp_s
        if entry.state is TcpConnState.SYN_SENT:
            return t.syn_sent_s
        if entry.state is TcpConnState.CLOSE:
            return t.close_s
        return t.loose_s if entry.loose else t.established_s

    def _set_expiry(self, entry: SessionEntry, value: float) -> None:
        entry.expiry = value
        heapq.heappush(self._heap, (value, next(self._tick), entry))

    def _emit(self, entry: SessionEntry, verb: str, **detail) -> None:
        if self.observer is not None:
            self.observer(entry, verb, detail)

    def create_entry(self, key: SessionKey, initial_state: Optional[TcpConnState], now: float,
                     loose: bool = False) -> SessionEntry:
        """Insert a fresh entry; raises :class:`TableFull` at a configured cap."""
        prof = self.profile
        tkey = (key.proto, key.translated.port, key.remote)
        if tkey in self._by_translated:
            live = self.get(key.proto, key.translated.port, key.remote, now)
            if live is not None:
                raise ValueError(f"public port {key.translated.port} already live toward {key.remote}")
        if prof.table_limit is not None and len(self._by_translated) >= prof.table_limit:
            self.stats["table_full"] += 1
            raise TableFull(prof.table_limit)
        dkey = (key.proto, key.internal.addr, key.remote)
        if prof.conn_limit_per_dest is not None and self._per_dest[dkey] >= prof.conn_limit_per_dest:
            self.stats["conn_limit"] += 1
            raise TableFull(prof.conn_limit_per_dest, "conn_limit")
        entry = SessionEntry(key, initial_state, now, now, self._window, loose)
        expiry = entry.expiry = now + self._timeout_for(entry)
        heapq.heappush(self._heap, (expiry, next(self._tick), entry))
        self._by_translated[tkey] = entry
        self._by_internal[(key.proto, key.internal, key.remote)] = entry
        self._mark(key.proto, key.remote, key.translated.port, True)
        self._per_dest[dkey] += 1
        self.stats["created"] += 1
        if self.observer is not None:
            self.observer(entry, "create", {})
        return entry

    def _remove(self, entry: SessionEntry, reason: str) -> None:
        if entry.removed:
            return
        k = entry.key
        entry.removed = True
        tkey = (k.proto, k.translated.port, k.remote)
        if self._by_translated.get(tkey) is entry:
            del self._by_translated[tkey]
            self._mark(k.proto, k.remote, k.translated.port, False)
        ikey = (k.proto, k.internal, k.remote)
        if self._by_internal.get(ikey) is entry:
            del self._by_internal[ikey]
        dkey = (k.proto, k.internal.addr, k.remote)
        self._per_dest[dkey] -= 1
        if self._per_dest[dkey] <= 0:
            del self._per_dest[dkey]
        self.stats["removed_" + reason] += 1
        self._emit(entry, "remove", reason=reason)

    def remove(self, entry: SessionEntry) -> None:
        self._remove(entry, "explicit")

    def expire_sweep(self, now: float) -> list[SessionEntry]:
        removed = []
        heap = self._heap
        while heap and heap[0][0] <= now:
            exp, _, entry = heapq.heappop(heap)
            if entry.removed or entry.expiry != exp:
                continue
            self._remove(entry, "expired")
            removed.append(entry)
        return removed

    def next_deadline(self) -> Optional[float]:
        heap = self._heap
        while heap:
            exp, _, entry = heap[0]
            if entry.removed or entry.expiry != exp:
                heapq.heappop(heap)
                continue
            return exp
        return None

    def lookup(self, packet: Packet, direction: Direction, now: float) -> Optional[SessionEntry]:
        if direction is Direction.OUTBOUND:
            return self.find_outbound(packet.proto, packet.src, packet.dst, now)
        if packet.dst.addr != self.public_addr:
            return None
        return self.get(packet.proto, packet.dst.port, packet.src, now)

    # ---- TCP / UDP state machine ---------------------------------------

    @staticmethod
    def _track(entry: SessionEntry, packet: Packet, direction: Direction) -> None:
        st = entry.seq
        span = packet.payload_len + (1 if packet.flags & SYN else 0)
        if direction is Direction.OUTBOUND:
            st.internal_next = (packet.seq + span) & SEQ_MASK
            if packet.flags & ACK:
                st.last_ack = packet.ack
        else:
            st.last_seq = (packet.seq + span) & SEQ_MASK
            if packet.flags & ACK:
                st.peer_ack = packet.ack

    def handle_segment(self, entry: SessionEntry, packet: Packet, direction: Direction,
                       now: float) -> TransitionResult:
        if packet.proto is Protocol.UDP:
            self._set_expiry(entry, now + self.profile.timeouts.udp_s)
            return TransitionResult(None, entry.expiry)
        flags = packet.flags
        if flags & RST:
            res = self.handle_rst(entry, packet, now, direction)
            return TransitionResult(entry.state, entry.expiry, True,
                                    "challenge_ack_expected" if res.challenge_ack_armed else None)
        self._track(entry, packet, direction)
        state = entry.state
        t = self.profile.timeouts
        if state is TcpConnState.SYN_SENT:
            if direction is Direction.OUTBOUND and flags & SYN:
                self._set_expiry(entry, now + t.syn_sent_s)
            elif direction is Direction.INBOUND and flags & SYN and flags & ACK:
                entry.synack_seen = True
                self._set_expiry(entry, now + t.syn_sent_s)
            elif direction is Direction.OUTBOUND and flags & ACK and entry.synack_seen:
                old = entry.expiry
                entry.state = TcpConnState.ESTABLISHED
                self._set_expiry(entry, now + t.established_s)
                self._emit(entry, "transition", old_state="SYN_SENT", old_expiry=old)
        elif state is TcpConnState.ESTABLISHED:
            if entry.armed and direction is Direction.OUTBOUND and flags == ACK \
                    and packet.payload_len == 0:
                self.on_challenge_ack(entry, now)
            else:
                old = entry.expiry
                was_armed = entry.armed
                entry.armed = False
                self._set_expiry(entry, now + (t.loose_s if entry.loose else t.established_s))
                if was_armed:
                    self._emit(entry, "refresh", old_expiry=old)
        # CLOSE entries keep forwarding but are never refreshed.
        return TransitionResult(entry.state, entry.expiry)

    def _apply_rst(self, entry: SessionEntry, seq: int, expected: int, now: float) -> RstResult:
        policy = self.profile.rst_policy
        old_state, old_expiry = entry.state, entry.expiry
        if isinstance(policy, NoCheck):
            entry.state = TcpConnState.CLOSE
            entry.armed = False
            self._set_expiry(entry, now + self.profile.timeouts.close_s)
            self.stats["rst_closed"] += 1
            self._emit(entry, "rst", action="closed", seq=seq,
                       old_state=old_state.value, old_expiry=old_expiry)
            return RstResult(RstAction.CLOSED)
        if seq == expected:
            self.stats["rst_removed"] += 1
            self._emit(entry, "rst", action="removed", seq=seq, old_expiry=old_expiry)
            self._remove(entry, "rst")
            return RstResult(RstAction.REMOVED)
        if isinstance(policy, InWindow) and seq_distance(seq, expected) < policy.window:
            entry.armed = True
            self._set_expiry(entry, now + policy.reduced_timeout_s)
            self.stats["rst_reduced"] += 1
            self._emit(entry, "rst", action="timeout_reduced", seq=seq,
                       old_expiry=old_expiry)
            return RstResult(RstAction.TIMEOUT_REDUCED, True)
        self.stats["rst_ignored"] += 1
        return RstResult(RstAction.IGNORED)

    def expected_rst_seq(self, entry: SessionEntry, direction: Direction = Direction.INBOUND) -> int:
        return entry.seq.last_ack if direction is Direction.INBOUND else entry.seq.peer_ack

    def handle_rst(self, entry: SessionEntry, rst_packet: Packet, now: float,
                   direction: Direction = Direction.INBOUND) -> RstResult:
        if not rst_packet.flags & RST:
            raise ValueError("handle_rst needs an RST segment")
        if entry.proto is not Protocol.TCP:
            return RstResult(RstAction.IGNORED)
        return self._apply_rst(entry, rst_packet.seq,
                               self.expected_rst_seq(entry, direction), now)

    def on_challenge_ack(self, entry: SessionEntry, now: float) -> SessionEntry:
        policy = self.profile.rst_policy
        if entry.armed and isinstance(policy, InWindow):
            old = entry.expiry
            entry.armed = False
            self._set_expiry(entry, now + policy.restore_timeout_s)
            self._emit(entry, "challenge_ack", old_expiry=old)
        return entry

    def loose_instantiate(self, packet: Packet, now: float) -> Optional[SessionEntry]:
        """Pick up a mid-stream outbound TCP segment as a new ESTABLISHED entry.

        Returns None when the profile refuses loose pickup. Allocation and
        table limits raise like :meth:`allocate_port`/:meth:`create_entry`.
        """
        if not self.profile.loose_instantiation or packet.proto is not Protocol.TCP \
                or packet.flags & SYN:
            return None
        port = self.allocate_port(packet.proto, packet.src, packet.dst, now)
        key = SessionKey(packet.proto, packet.src, Endpoint(self.public_addr, port), packet.dst)
        entry = self.create_entry(key, TcpConnState.ESTABLISHED, now, loose=True)
        self._track(entry, packet, Direction.OUTBOUND)
        return entry

    # ---- bulk RST path ---------------------------------------------------

    def rst_sweep(self, entry: SessionEntry, start: int, stride: int, lo: int, hi: int,
                  time_of: Callable[[int], float],
                  direction: Direction = Direction.INBOUND,
                  skip=None, max_hits: Optional[int] = None) -> tuple[list[tuple[int, RstResult]], int]:
        """Apply RSTs with seq ``start + i*stride`` for i in [lo, hi) to one entry.

        Equivalent to calling :meth:`handle_rst` for each packet in order at
        ``time_of(i)``, but only the accepted ones are visited. ``skip`` masks
        packets that never arrive. Returns the hits and the index where
        processing stopped (``hi``, or just past the hit that ended it).
        """
        mode = self.profile.rst_mode
        hits: list[tuple[int, RstResult]] = []
        i = lo
        while i < hi:
            expected = self.expected_rst_seq(entry, direction)
            window = self.profile.rst_window
            i = kernels.rst_next_hit(start, stride, i, hi, expected, window, mode)
            if i >= hi:
                break
            if skip is not None and skip[i]:
                i += 1
                continue
            t = time_of(i)
            if entry.removed or entry.expiry <= t:
                return hits, i
            res = self._apply_rst(entry, (start + i * stride) & SEQ_MASK, expected, t)
            hits.append((i, res))
            i += 1
            if res.action is RstAction.REMOVED or (max_hits is not None and len(hits) >= max_hits):
                return hits, i
            if mode == kernels.MODE_NOCHECK and self.observer is None and skip is None \
                    and max_hits is None and i < hi \
                    and time_of(i) - time_of(i - 1) < self.profile.timeouts.close_s:
                # Every later RST hits too and keeps the entry alive; only the
                # last one decides the final expiry.
                last = hi - 1
                self.stats["rst_closed"] += last - i
                res = self._apply_rst(entry, (start + last * stride) & SEQ_MASK, expected,
                                      time_of(last))
                hits.append((last, res))
                return hits, hi
        return hits, hi

"""Side-channel inference of a victim's public port (TCP or UDP).

For each candidate port p the attacker sends a tunneled, TTL-limited probe
from its own local port p to the target, then a spoofed packet from the
target to ``V:p``. If p is free, the probe's entry claims V:p and the
spoofed packet comes back to the attacker. If the victim already holds V:p,
the probe gets some other port and the spoofed packet goes to the victim
instead. Ports whose spoofed packet never returns are *active*.

Port tables with an entry cap make probes fail silently once full, which
looks like a run of active ports at the tail of the batch; the scanner then
waits for its own probe entries to expire and retries in smaller chunks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..netsim import Train
from ..packets import SYN, SYNACK, Endpoint, Packet, Protocol
from .attacker import AttackerHost
from .report import AttackReport

PROBE = b"probe"
VERIFY = b"verify"


@dataclass
class InferOptions:
    port_range: tuple[int, int] = (1024, 65535)
    rate_pps: float = 100_000.0
    probe_ttl: int = 2
    rescreen: int = 2
    # Confirmed actives beyond this many mean the result is not a victim's sessions.
    max_active: int = 64
    # A pass whose actives exceed this fraction of its ports is read as random
    # allocation; loss alone leaves a few percent.
    scatter_fraction: float = 0.25
    # Shortest active run at the end of a pass that is read as a full table.
    min_tail: int = 4
    settle_s: float = 0.1
    # Ports per probe/verify pass; scattered actives in a pass end the scan early.
    chunk: Optional[int] = 8192
    min_chunk: int = 256
    # How long the attacker assumes its probe entries live; None picks a
    # protocol default a little above the usual SYN_SENT / UDP timeouts.
    probe_lifetime_s: Optional[float] = None
    deadline: Optional[float] = None
    start_offset: int = 0
    # Return as soon as a chunk yields active ports (DNS queries are short-lived).
    stop_early: bool = False

    def lifetime(self, proto: Protocol) -> float:
        if self.probe_lifetime_s is not None:
            return self.probe_lifetime_s
        return 125.0 if proto is Protocol.TCP else 35.0


def _templates(attacker: AttackerHost, remote: Endpoint, proto: Protocol, ttl: int):
    rng = attacker.sim.rng(f"{attacker.name}:infer")
    local = attacker.local(0)
    public = attacker.gateway(0)
    if proto is Protocol.TCP:
        probe = Packet.tcp(local, remote, SYN, rng.getrandbits(32), ttl=ttl)
        verify = Packet.tcp(remote, public, SYNACK, rng.getrandbits(32), rng.getrandbits(32))
    else:
        probe = Packet.udp(local, remote, PROBE, ttl=ttl)
        verify = Packet.udp(remote, public, VERIFY)
    return probe, verify


def _is_verify(p: Packet, remote: Endpoint, proto: Protocol) -> bool:
    if p.src != remote or p.proto is not proto or not isinstance(p.mark, int):
        return False
    if proto is Protocol.TCP:
        return p.flags == SYNACK
    return p.payload == VERIFY


def probe_verify(attacker: AttackerHost, remote: Endpoint, ports, proto: Protocol,
                 opts: InferOptions) -> tuple[set[int], int]:
    """One probe/verify pass over ``ports``.

    Returns the ports that look active and how many returned verifies landed
    on a local port other than their candidate. Under port preservation the
    latter only happens for the few probes that collided with a victim port.
    """
    sim = attacker.sim
    ports = np.asarray(ports, dtype=np.uint32)
    n = len(ports)
    if n == 0:
        return set(), 0
    spacing = 1.0 / opts.rate_pps
    probe, verify = _templates(attacker, remote, proto, opts.probe_ttl)
    attacker.drain()
    last = attacker.tunnel_train(Train(probe, n, spacing, "sport", values=ports))
    # Verify i leaves after probe i has been processed at the gateway.
    start = last + spacing
    sim.run_until(start)
    vlast = attacker.direct_train(Train(verify, n, spacing, "dport", values=ports))
    sim.run_until(vlast + opts.settle_s)
    returned = [p for p in attacker.drain() if _is_verify(p, remote, proto)]
    back = {p.mark for p in returned}
    moved = sum(1 for p in returned if p.dst.port != p.mark)
    return {int(p) for p in ports if int(p) not in back}, moved


@dataclass
class ScanState:
    """What a scanner has learned about the table; reused across scans."""
    chunk: Optional[int] = None
    limited: bool = False
    ready_at: float = 0.0  # when the scanner's own probe entries are gone


def _tail_run(batch: np.ndarray, active: set[int], slack: float = 0.01) -> int:
    """Length of the longest mostly-active suffix of ``batch`` starting on an active port.

    A full table fails every later probe, but a handful of ports inside that
    stretch can still come back (fallback ports handed out earlier), hence
    the ``slack`` fraction of allowed holes.
    """
    best = 0
    holes = 0
    for n, p in enumerate(batch[::-1], start=1):
        if int(p) in active:
            if holes <= slack * n + 1:
                best = n
        else:
            holes += 1
            if holes > slack * len(batch) + 1:
                break
    return best


def infer_ports(attacker: AttackerHost, remote: Endpoint, proto: Protocol,
                opts: Optional[InferOptions] = None,
                state: Optional[ScanState] = None) -> tuple[set[int], AttackReport]:
    """Scan ``opts.port_range`` and return the ports the victim holds toward ``remote``."""
    opts = opts or InferOptions()
    state = state or ScanState()
    sim = attacker.sim
    kind = "infer_tcp_port" if proto is Protocol.TCP else "infer_dns_port"
    report = AttackReport(kind)
    lo, hi = opts.port_range
    candidates = np.arange(lo, hi + 1, dtype=np.uint32)
    if opts.start_offset:
        candidates = np.roll(candidates, -(opts.start_offset % len(candidates)))
    chunk = state.chunk or opts.chunk or len(candidates)
    found: set[int] = set()
    pos = 0
    waits = 0
    rounds = 0
    lifetime = opts.lifetime(proto)
    recheck = False
    with report.phase("infer", attacker):
        while pos < len(candidates):
            if state.limited and sim.now < state.ready_at:
                sim.run_until(state.ready_at)
                waits += 1
            if opts.deadline is not None and sim.now >= opts.deadline:
                report.details.update(scanned=pos)
                report.fail("deadline")
                return set(), report
            if recheck and found:
                # Ports confirmed just before the table filled may have been
                # failed probes; the table has drained since.
                found &= probe_verify(attacker, remote, sorted(found), proto, opts)[0]
                state.ready_at = sim.now + lifetime
            recheck = False
            batch = candidates[pos:pos + chunk]
            active, moved = probe_verify(attacker, remote, batch, proto, opts)
            state.ready_at = sim.now + lifetime
            rounds += 1
            tail = _tail_run(batch, active)
            if tail < opts.min_tail:
                tail = 0
            tail_set = {int(p) for p in batch[len(batch) - tail:]} if tail else set()
            # Under preservation each collision's fallback port lands in the
            # free space ahead of the scan and is hit again there, so a few
            # collisions leave chains of moved verifies; random allocation
            # moves an eighth or more of the batch.
            moved_cap = max(opts.max_active, len(batch) // 16)
            scatter_cap = max(opts.max_active, int(len(batch) * opts.scatter_fraction))
            if moved > moved_cap or len(active - tail_set) > scatter_cap:
                # Actives scattered through the batch: allocation does not
                # preserve ports, so no single port can be singled out.
                report.details.update(chunk=chunk, rounds=rounds, waits=waits,
                                      actives=len(active), moved=moved)
                report.fail("inconclusive")
                return set(), report
            if tail:
                # A run of actives at the end of the batch: the table filled up
                # and later probes failed. Retry smaller once our entries expire.
                if len(batch) <= opts.min_chunk:
                    report.details.update(chunk=chunk, rounds=rounds, waits=waits, actives=len(active))
                    report.fail("inconclusive")
                    return set(), report
                state.limited = True
                recheck = True
                chunk = max(opts.min_chunk, min(len(batch) // 2, int((len(batch) - tail) * 0.9)))
                state.chunk = chunk
                continue
            for _ in range(opts.rescreen):
                if not active:
                    break
                active &= probe_verify(attacker, remote, sorted(active), proto, opts)[0]
                state.ready_at = sim.now + lifetime
            found |= active
            if len(found) > opts.max_active:
                report.details.update(chunk=chunk, rounds=rounds, waits=waits, actives=len(found))
                report.fail("inconclusive")
                return set(), report
            pos += len(batch)
            if found and opts.stop_early:
                break
    report.details.update(chunk=chunk, rounds=rounds, waits=waits, scanned=pos)
    report.recovered = set(found)
    report.success = bool(found)
    if not found:
        report.failure_reason = "no_active_ports"
    return found, report


def infer_tcp_port(attacker: AttackerHost, remote: Endpoint,
                   port_range: tuple[int, int] = (1024, 65535),
                   opts: Optional[InferOptions] = None,
                   state: Optional[ScanState] = None) -> tuple[set[int], AttackReport]:
    opts = opts or InferOptions()
    opts.port_range = port_range
    return infer_ports(attacker, remote, Protocol.TCP, opts, state)


def infer_dns_port(attacker: AttackerHost, resolver: Endpoint,
                   port_range: tuple[int, int] = (32768, 65535),
                   opts: Optional[InferOptions] = None,
                   state: Optional[ScanState] = None) -> tuple[set[int], AttackReport]:
    opts = opts or InferOptions()
    opts.port_range = port_range
    found, report = infer_ports(attacker, resolver, Protocol.UDP, opts, state)
    redirect = attacker.client_config.get("dns_redirect")
    if not found and redirect is not None:
        # The VPN pushes its own resolver; queries never create client-keyed entries.
        report.failure_reason = "redirected"
    return found, report

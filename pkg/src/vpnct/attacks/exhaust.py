"""Port-exhaustion DoS against one destination.

The attacker opens a session toward the target from every local port, with
a TTL that dies just past the gateway, so the target never sees a thing.
With port preservation (or a narrow random range) that leaves no public port
for the victim toward the same destination. Half-open entries expire after
the SYN_SENT timeout; the attacker either re-sends periodically or completes
the handshakes with spoofed SYN/ACKs so the entries live on as ESTABLISHED.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..netsim import Train
from ..packets import ACK, SEQ_MASK, SYN, SYNACK, Endpoint, Packet, Protocol
from ..world import World
from .report import AttackReport


@dataclass
class ExhaustOptions:
    target: Endpoint
    ports: tuple[int, int] = (1, 65535)
    rate_pps: float = 100_000.0
    probe_ttl: int = 2
    escalate: bool = False
    refresh_period_s: Optional[float] = None
    hold_until: Optional[float] = None
    # Absolute virtual times at which the victim tries to connect; None means
    # once, right after the occupation burst.
    check_at: Optional[list[float]] = None
    check_gap_s: float = 0.5
    # Parallel connections per check, as a browser opens; any one getting
    # through means the victim is served.
    victim_connections: int = 6
    settle_s: float = 0.2

    def __post_init__(self):
        lo, hi = self.ports
        if not 1 <= lo <= hi <= 65535:
            raise ValueError(f"bad port range {self.ports}")
        if self.refresh_period_s is not None and self.refresh_period_s <= 0:
            raise ValueError("refresh_period_s must be positive")
        if self.victim_connections < 1:
            raise ValueError("victim_connections must be at least 1")


@dataclass
class VictimCheck:
    at: float
    connected: bool
    verdict: Optional[str]
    local_port: int = 0
    syn_attempts: int = 0
    details: dict = field(default_factory=dict)


def _syn_train(world: World, opts: ExhaustOptions, iss: int) -> Train:
    a = world.attacker
    lo, hi = opts.ports
    tpl = Packet.tcp(a.local(0), opts.target, SYN, iss, ttl=opts.probe_ttl)
    return Train(tpl, hi - lo + 1, 1.0 / opts.rate_pps, "sport",
                 values=np.arange(lo, hi + 1, dtype=np.uint32))


def _escalate(world: World, opts: ExhaustOptions, iss: int) -> int:
    """Complete every half-open handshake the attacker holds; returns how many."""
    sim, a, gw = world.sim, world.attacker, world.gateway
    prof = gw.config.profile
    if prof.preserves_ports:
        lo, hi = 1, 65535
    else:
        lo, hi = prof.allocation.range_lo, prof.allocation.range_hi
    peer_isn = sim.rng(f"{a.name}:escalate").getrandbits(32)
    spacing = 1.0 / opts.rate_pps
    # Spoofed SYN/ACKs from the target to every public port: each one that
    # lands on an attacker entry comes back through the tunnel.
    tpl = Packet.tcp(opts.target, a.gateway(0), SYNACK, peer_isn, (iss + 1) & SEQ_MASK)
    a.drain()
    last = a.direct_train(Train(tpl, hi - lo + 1, spacing, "dport",
                                values=np.arange(lo, hi + 1, dtype=np.uint32)))
    sim.run_until(last + opts.settle_s)
    mine = sorted({p.dst.port for p in a.drain()
                   if p.src == opts.target and p.flags == SYNACK})
    if not mine:
        return 0
    ack = Packet.tcp(a.local(0), opts.target, ACK, (iss + 1) & SEQ_MASK,
                     (peer_isn + 1) & SEQ_MASK, ttl=opts.probe_ttl)
    last = a.tunnel_train(Train(ack, len(mine), spacing, "sport", values=mine))
    sim.run_until(last + opts.settle_s)
    return len(mine)


def _victim_check(world: World, target: Endpoint, connections: int = 1) -> VictimCheck:
    """Open ``connections`` sessions at once and follow them until each settles."""
    sim, victim, gw = world.sim, world.victim, world.gateway
    t0 = sim.now
    sessions = [victim.open_tcp(target, interval=None) for _ in range(connections)]
    flows = [(Protocol.TCP, Endpoint(victim.addr, s.local_port), target) for s in sessions]
    first = None
    while any(s.state == "SYN_SENT" for s in sessions):
        sim.run_until(sim.now + 1.0)
        if first is None:
            first = gw.verdicts.get(flows[0])
    verdict = gw.verdicts.get(flows[0]) if first is None else first
    up = [s for s in sessions if s.state == "ESTABLISHED"]
    return VictimCheck(t0, bool(up), verdict, sessions[0].local_port,
                       sum(s.syn_sent for s in sessions),
                       {"final_verdict": gw.verdicts.get(flows[0]), "established": len(up),
                        "connections": connections})


def exhaust_ports(world: World, opts: ExhaustOptions) -> AttackReport:
    """Occupy every public port toward ``opts.target`` and test the victim."""
    sim, a, gw = world.sim, world.attacker, world.gateway
    report = AttackReport("dos")
    iss = sim.rng(f"{a.name}:exhaust").getrandbits(32)
    table_full_before = gw.stats["drop_table_full"] + gw.stats["drop_conn_limit"]

    with report.phase("occupy", a):
        last = a.tunnel_train(_syn_train(world, opts, iss))
        sim.run_until(last + opts.settle_s)
    held = sum(1 for e in gw.table.entries(sim.now)
               if e.key.internal.addr == a.addr and e.key.remote == opts.target)
    capped = gw.stats["drop_table_full"] + gw.stats["drop_conn_limit"] > table_full_before
    report.details.update(held=held, bypass=gw.stats["bypass_nat"],
                          exhausted_drops=gw.stats["drop_exhausted"])

    if opts.escalate:
        with report.phase("escalate", a):
            report.details["escalated"] = _escalate(world, opts, iss)

    if opts.refresh_period_s is not None:
        until = opts.hold_until if opts.hold_until is not None else float("inf")

        def refresh() -> None:
            if sim.now > until:
                return
            a.tunnel_train(_syn_train(world, opts, iss))
            sim.call_later(opts.refresh_period_s, refresh)

        sim.call_later(opts.refresh_period_s, refresh)

    checks = []
    times = opts.check_at if opts.check_at is not None else [sim.now + opts.check_gap_s]
    with report.phase("hold", a):
        for t in times:
            if t > sim.now:
                sim.run_until(t)
            checks.append(_victim_check(world, opts.target, opts.victim_connections))
    report.details["checks"] = [
        {"at": round(c.at, 6), "connected": c.connected, "verdict": c.verdict,
         "syn_attempts": c.syn_attempts, "established": c.details["established"]}
        for c in checks]
    report.recovered = held
    blocked = bool(checks) and not checks[0].connected
    if capped:
        # The table cap stopped occupation; anything the victim suffers is
        # a full table, not per-destination exhaustion.
        report.details["capped"] = True
        return report.fail("table_limit")
    if not blocked:
        return report.fail("victim_connected")
    report.success = True
    return report

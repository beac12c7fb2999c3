"""DNS hijack: find the victim's query port, then race the resolver on TxID."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..endpoints import FORGED, DnsQuery
from ..netsim import Train
from ..packets import DnsMessage, Packet, Protocol, ip
from ..world import World
from .infer import InferOptions, ScanState, infer_dns_port
from .report import AttackReport

FORGED_ADDR = ip("6.6.6.6")


@dataclass
class DnsOptions:
    qname: str = "a.com"
    forged_addr: int = FORGED_ADDR
    rate_pps: float = 100_000.0
    order: str = "ascending"  # or "shuffle"
    infer: InferOptions = field(default_factory=lambda: InferOptions(
        port_range=(32768, 65535), stop_early=True))
    rounds: int = 1
    round_gap_s: float = 1.0
    deadline: Optional[float] = None
    settle_s: float = 0.1

    def __post_init__(self):
        if self.order not in ("ascending", "shuffle"):
            raise ValueError(f"unknown TxID order {self.order!r}")
        if self.rate_pps <= 0:
            raise ValueError("rate_pps must be positive")


def txid_order(world: World, order: str) -> np.ndarray:
    vals = np.arange(65536, dtype=np.uint32)
    if order == "shuffle":
        world.sim.rng(f"{world.attacker.name}:txid").shuffle(vals)
    return vals


def _victim_query(world: World, port: int) -> Optional[DnsQuery]:
    """Ground truth: the victim query behind public port ``port``, if any."""
    entry = world.gateway.table.get(Protocol.UDP, port, world.resolver_ep, world.sim.now)
    if entry is None or entry.key.internal.addr != world.victim.addr:
        return None
    internal = entry.key.internal.port
    for q in reversed(world.victim.queries):
        if q.port == internal:
            return q
    return None


def _judge(q: Optional[DnsQuery]) -> tuple[bool, Optional[str]]:
    if q is None or q.outcome is None or q.outcome == "expired":
        return False, "timeout_expired"
    if q.forged:
        return True, None
    return False, "legit_response_first"


def launch_txid_trains(world: World, ports, opts: DnsOptions) -> float:
    """Queue one spoofed-response sweep per port, back to back at the full rate.

    Returns the last departure time.
    """
    a = world.attacker
    vals = txid_order(world, opts.order)
    spacing = 1.0 / opts.rate_pps
    start = world.sim.now
    last = start
    for port in ports:
        msg = DnsMessage(0, opts.qname, True, opts.forged_addr)
        tpl = Packet.udp(world.resolver_ep, a.gateway(port), msg)
        tpl.mark = FORGED
        last = a.direct_train(Train(tpl, len(vals), spacing, "txid", values=vals), start)
        start = last + spacing
    return last


def dns_inject(world: World, port: int, opts: Optional[DnsOptions] = None) -> AttackReport:
    """Sweep the TxID space toward ``V:port`` and report whether the victim bit."""
    return _inject_ports(world, [port], opts or DnsOptions())


def _inject_ports(world: World, ports, opts: DnsOptions) -> AttackReport:
    sim, a = world.sim, world.attacker
    report = AttackReport("dns_inject")
    queries = {p: _victim_query(world, p) for p in ports}
    with report.phase("inject", a):
        start = sim.now
        last = launch_txid_trains(world, ports, opts)
        live = [q for q in queries.values() if q is not None and q.outcome is None]
        end = last + opts.settle_s
        if live:
            end = min(end, max(q.deadline for q in live) + opts.settle_s)
        while sim.now < end:
            sim.run_until(min(end, sim.now + 0.25))
            if live and all(q.outcome is not None for q in live):
                break
    report.details.update(inject_start=start, ports=sorted(ports))
    best = None
    for p, q in queries.items():
        ok, reason = _judge(q)
        if ok:
            report.success = True
            report.recovered = q.txid
            report.details.update(port=p, accepted_at=q.resolved_at)
            return report
        if best is None or reason == "legit_response_first":
            best = reason
    return report.fail(best or "timeout_expired")


def dns_hijack(world: World, opts: Optional[DnsOptions] = None) -> AttackReport:
    """Infer the query port(s) and inject; repeat for up to ``opts.rounds`` rounds."""
    opts = opts or DnsOptions()
    sim, a = world.sim, world.attacker
    report = AttackReport("dns_hijack")
    offset = opts.infer.start_offset
    state = ScanState()
    for rnd in range(opts.rounds):
        if opts.deadline is not None and sim.now >= opts.deadline:
            break
        iopts = InferOptions(**{**opts.infer.__dict__, "start_offset": offset,
                                "deadline": opts.deadline})
        found, irep = infer_dns_port(a, world.resolver_ep, iopts.port_range, iopts, state)
        report.absorb(irep)
        report.details["rounds"] = rnd + 1
        if not found:
            if irep.failure_reason in ("inconclusive", "redirected"):
                return report.fail(irep.failure_reason)
            report.failure_reason = irep.failure_reason
            sim.run_until(sim.now + opts.round_gap_s)
            continue
        # Resume the next round's scan after the chunk that paid off.
        offset += irep.details.get("scanned", 0)
        irep2 = _inject_ports(world, sorted(found), opts)
        report.absorb(irep2)
        report.details["found"] = sorted(found)
        if irep2.success:
            report.success = True
            report.recovered = irep2.recovered
            report.failure_reason = None
            return report
        report.failure_reason = irep2.failure_reason
        sim.run_until(sim.now + opts.round_gap_s)
    report.success = False
    if report.failure_reason is None:
        report.failure_reason = "timeout_expired"
    return report

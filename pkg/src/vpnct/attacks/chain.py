"""End-to-end attack chains: each composes the phase operations in order."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..packets import Endpoint
from ..world import World
from .dns_hijack import DnsOptions, dns_hijack
from .exhaust import ExhaustOptions, exhaust_ports
from .infer import InferOptions, ScanState, infer_tcp_port
from .report import AttackReport
from .tcp_hijack import HijackOptions, acquire_seq_ack, tcp_inject

KINDS = ("dos", "tcp_hijack", "dns_hijack")


@dataclass
class ChainOptions:
    kind: str
    target_port: int = 21
    infer: InferOptions = field(default_factory=InferOptions)
    hijack: HijackOptions = field(default_factory=HijackOptions)
    dns: DnsOptions = field(default_factory=DnsOptions)
    exhaust: Optional[ExhaustOptions] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")


def tcp_hijack(world: World, remote: Endpoint, opts: Optional[ChainOptions] = None) -> AttackReport:
    """Port inference, then (SEQ, ACK) acquisition, then injection."""
    opts = opts or ChainOptions("tcp_hijack", remote.port)
    a = world.attacker
    report = AttackReport("tcp_hijack")
    scan = ScanState()
    ports, irep = infer_tcp_port(a, remote, opts.infer.port_range, opts.infer, scan)
    report.absorb(irep)
    if not ports:
        return report.fail(irep.failure_reason or "no_active_ports")
    port = min(ports)
    report.details["victim_port"] = port
    # Our probe from the victim's port number still holds an entry (on some
    # fallback port); the replacement packet must not reuse it.
    with report.phase("settle", a):
        world.sim.run_until(max(world.sim.now, scan.ready_at))
    seq_ack, arep = acquire_seq_ack(world, port, remote, opts.hijack)
    report.absorb(arep)
    if seq_ack is None:
        return report.fail(arep.failure_reason)
    jrep = tcp_inject(world, port, remote, *seq_ack, opts.hijack)
    report.absorb(jrep)
    report.recovered = {"port": port, "seq": seq_ack[0], "ack": seq_ack[1]}
    if not jrep.success:
        return report.fail(jrep.failure_reason)
    report.success = True
    return report


def full_chain(world: World, opts: ChainOptions) -> AttackReport:
    if opts.kind == "dos":
        ex = opts.exhaust or ExhaustOptions(world.server_ep(opts.target_port))
        return exhaust_ports(world, ex)
    if opts.kind == "tcp_hijack":
        return tcp_hijack(world, world.server_ep(opts.target_port), opts)
    return dns_hijack(world, opts.dns)

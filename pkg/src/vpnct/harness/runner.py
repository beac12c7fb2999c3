"""Runs a scenario over its seeds: one independent simulation per seed."""

from __future__ import annotations

import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, TextIO

from ..attacks.chain import ChainOptions, tcp_hijack
from ..attacks.dns_hijack import dns_hijack
from ..attacks.exhaust import ExhaustOptions, exhaust_ports
from ..attacks.infer import infer_dns_port, infer_tcp_port
from ..attacks.report import AttackReport
from ..endpoints import ClientBehavior
from ..packets import Protocol
from ..world import World, WorldConfig, build_world
from .scenario import Scenario


def build_scenario_world(scn: Scenario, seed: int, trace: Optional[TextIO] = None,
                         record_trace: bool = False) -> World:
    """Build the world for one seed and run the victim's workload up to the attack."""
    c, g = scn.client, scn.gateway
    behavior = ClientBehavior(
        request_interval_s=c.request_interval_s or ClientBehavior.request_interval_s,
        dns_query_timeout_s=c.dns_timeout_s,
        ephemeral_range=c.ephemeral_range,
    )
    w = build_world(WorldConfig(
        scn.profile, seed,
        client_isolation=g.client_isolation,
        dns_redirect=g.dns_redirect,
        proxy_ports=frozenset(g.proxy_ports),
        behavior=behavior,
        resolver_delay_s=scn.resolver.delay_s,
        resolver_muted=scn.resolver.muted,
        drop_probability=scn.drop_probability,
    ), trace=trace, record_trace=record_trace)
    sim, victim = w.sim, w.victim
    target = w.server_ep(c.target_port)
    phase_rng = sim.rng("scenario:phase")
    for _ in range(c.tcp_sessions):
        first = None
        if c.random_phase and c.request_interval_s is not None:
            first = phase_rng.uniform(0, c.request_interval_s)
        victim.open_tcp(target, interval=c.request_interval_s, first_request_after=first)

    if c.dns_queries:
        def fire(k: int) -> None:
            for _ in range(c.dns_parallel):
                victim.query_dns(c.qname, c.dns_timeout_s)
            if k + 1 < c.dns_queries:
                sim.call_later(c.dns_interval_s, fire, k + 1)
        sim.call_at(c.dns_start_s, fire, 0)
    sim.run_until(c.attack_at_s)
    return w


def _victim_ports(w: World, proto: Protocol, remote) -> set[int]:
    """Ground truth: public ports of the victim's live entries toward ``remote``."""
    return {e.key.translated.port for e in w.gateway.table.entries(w.sim.now)
            if e.key.proto is proto and e.key.internal.addr == w.victim.addr
            and e.key.remote == remote}


def execute(scn: Scenario, w: World) -> AttackReport:
    target = w.server_ep(scn.client.target_port)
    if scn.attack == "dos":
        return exhaust_ports(w, scn.exhaust or ExhaustOptions(target))
    if scn.attack == "infer":
        if scn.client.tcp_sessions or not scn.client.dns_queries:
            truth = _victim_ports(w, Protocol.TCP, target)
            found, rep = infer_tcp_port(w.attacker, target, scn.infer.port_range, scn.infer)
        else:
            truth = _victim_ports(w, Protocol.UDP, w.resolver_ep)
            found, rep = infer_dns_port(w.attacker, w.resolver_ep, scn.dns.infer.port_range,
                                        scn.dns.infer)
        rep.details.update(truth=sorted(truth), exact=found == truth)
        return rep
    if scn.attack == "tcp_hijack":
        opts = ChainOptions("tcp_hijack", scn.client.target_port, scn.infer, scn.hijack)
        return tcp_hijack(w, target, opts)
    return dns_hijack(w, scn.dns)


@dataclass
class SeedResult:
    seed: int
    report: AttackReport
    trace: Optional[str] = None


def run_seed(scn: Scenario, seed: int, trace: Optional[TextIO] = None) -> SeedResult:
    w = build_scenario_world(scn, seed, trace=trace)
    return SeedResult(seed, execute(scn, w))


def _run_seed_captured(scn: Scenario, seed: int, capture: bool) -> SeedResult:
    buf = io.StringIO() if capture else None
    res = run_seed(scn, seed, buf)
    if buf is not None:
        res.trace = buf.getvalue()
    return res


@dataclass
class Summary:
    runs: int
    successes: int
    success_rate: float
    mean_virtual_seconds: float
    mean_packets: float
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"runs": self.runs, "successes": self.successes,
                "success_rate": round(self.success_rate, 6),
                "mean_virtual_seconds": round(self.mean_virtual_seconds, 6),
                "mean_packets": round(self.mean_packets, 3),
                "failures": dict(sorted(self.failures.items()))}


def summarize(reports: list[AttackReport]) -> Summary:
    n = len(reports)
    wins = sum(r.success for r in reports)
    failures: dict = {}
    for r in reports:
        if not r.success:
            key = r.failure_reason or "unknown"
            failures[key] = failures.get(key, 0) + 1
    # Denominator is always the seed count: no early stopping.
    return Summary(n, wins, wins / n if n else 0.0,
                   sum(r.virtual_seconds for r in reports) / n if n else 0.0,
                   sum(r.packets_sent for r in reports) / n if n else 0.0,
                   failures)


@dataclass
class Batch:
    scenario: str
    results: list[SeedResult]
    summary: Summary

    @property
    def reports(self) -> list[AttackReport]:
        return [r.report for r in self.results]


def run_scenario(scn: Scenario, seeds: Optional[list[int]] = None,
                 trace: Optional[TextIO] = None, workers: int = 1) -> Batch:
    """One simulation per seed, merged in seed-list order.

    With ``trace`` set, each seed's records follow a header line naming it.
    """
    seeds = list(scn.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("seeds must be non-empty")
    results: list[SeedResult] = []
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_run_seed_captured, scn, s, trace is not None) for s in seeds]
            for f in futs:
                res = f.result()
                if trace is not None:
                    trace.write(_header(scn, res.seed))
                    trace.write(res.trace or "")
                    res.trace = None
                results.append(res)
    else:
        for s in seeds:
            if trace is not None:
                trace.write(_header(scn, s))
            results.append(run_seed(scn, s, trace))
    return Batch(scn.name, results, summarize([r.report for r in results]))


def _header(scn: Scenario, seed: int) -> str:
    return f'{{"run":"{scn.name}","seed":{seed}}}\n'

"""Attack building blocks run against small worlds."""

from __future__ import annotations

import json

import pytest

from vpnct.attacks.dns_hijack import DnsOptions, dns_inject
from vpnct.attacks.exhaust import ExhaustOptions
from vpnct.attacks.infer import InferOptions, infer_dns_port, infer_tcp_port
from vpnct.attacks.tcp_hijack import acquire_seq_ack
from vpnct.harness.matrix import Knobs, run_cell
from vpnct.packets import Endpoint
from vpnct.world import VPN_PUBLIC


@pytest.mark.parametrize("kw", [
    {"ports": (0, 10)}, {"ports": (500, 100)}, {"ports": (1, 70000)},
    {"refresh_period_s": 0.0}, {"victim_connections": 0},
])
def test_exhaust_options_validate(kw):
    with pytest.raises(ValueError):
        ExhaustOptions(Endpoint(1, 80), **kw)


def _victim_on(w, port, remote_port=21):
    s = w.victim.open_tcp(w.server_ep(remote_port), local_port=port, interval=None)
    w.sim.run_until(w.sim.now + 1.0)
    assert s.state == "ESTABLISHED"
    return s


@pytest.mark.parametrize("port", [1024, 40000, 45055, 65535])
def test_infer_finds_exact_port(make_world, port):
    w = make_world()
    _victim_on(w, port)
    lo, hi = max(1024, port - 3000), min(65535, port + 3000)
    found, rep = infer_tcp_port(w.attacker, w.server_ep(21), (lo, hi))
    assert found == {port} and rep.success
    assert rep.recovered == {port}


def test_infer_reports_nothing_without_victim(make_world):
    w = make_world()
    found, rep = infer_tcp_port(w.attacker, w.server_ep(21), (30000, 34000))
    assert found == set() and rep.failure_reason == "no_active_ports"


def test_infer_is_inconclusive_under_random_allocation(make_world):
    w = make_world("netfilter_rand")
    _victim_on(w, 40000)
    found, rep = infer_tcp_port(w.attacker, w.server_ep(21), (1024, 65535))
    assert found == set() and rep.failure_reason == "inconclusive"


def test_infer_dns_port_redirected(make_world):
    w = make_world(dns_redirect=True)
    w.victim.query_dns("a.com", 30.0)
    w.sim.run_until(0.5)
    found, rep = infer_dns_port(w.attacker, w.resolver_ep, opts=InferOptions(stop_early=True))
    assert found == set() and rep.failure_reason == "redirected"


def test_infer_deadline(make_world):
    w = make_world()
    found, rep = infer_tcp_port(w.attacker, w.server_ep(21), (1024, 65535),
                                InferOptions(chunk=1024, deadline=0.0))
    assert rep.failure_reason == "deadline" and not found


def test_acquire_returns_server_counters(make_world):
    w = make_world(seed=4)
    s = _victim_on(w, 41000)
    got, rep = acquire_seq_ack(w, s.local_port, s.remote)
    assert rep.success
    assert got == w.server.expected(21, Endpoint(VPN_PUBLIC, s.local_port))
    assert s.challenge_acks == 0


def test_acquire_fails_under_strict_rst(make_world):
    w = make_world("ipfw_pre")
    s = _victim_on(w, 41000)
    got, rep = acquire_seq_ack(w, s.local_port, s.remote)
    assert got is None and rep.failure_reason == "rst_rejected"


def test_dns_inject_known_port(make_world):
    w = make_world(seed=2, resolver_muted=True)
    q = w.victim.query_dns("a.com", 10.0)
    w.sim.run_until(0.5)
    rep = dns_inject(w, q.port, DnsOptions("a.com"))
    assert rep.success and q.forged and q.outcome == "accepted"


def test_report_serializes():
    rep = run_cell("netfilter_pre", "tcp_hijack")
    assert rep.success
    d = json.loads(rep.to_json())
    assert d["attack"] == rep.attack and d["packets_sent"] == rep.packets_sent
    assert sum(p["packets_sent"] for p in d["phases"]) == d["packets_sent"]


def test_dns_cell_fails_with_redirect():
    rep = run_cell("netfilter_pre", "dns_hijack", Knobs(dns_redirect=True))
    assert not rep.success and rep.failure_reason == "redirected"

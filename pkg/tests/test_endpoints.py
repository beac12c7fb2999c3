"""Victim client, server and resolver behaviour."""

from __future__ import annotations

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from vpnct.endpoints import FORGED
from vpnct.netsim import Train
from vpnct.packets import RST, DnsMessage, Endpoint, Packet
from vpnct.world import VPN_PUBLIC


def test_handshake_and_periodic_requests(make_world):
    w = make_world()
    s = w.victim.open_tcp(w.server_ep(21), interval=5.0)
    w.sim.run_until(21.0)
    assert s.state == "ESTABLISHED"
    assert s.requests_sent == 4
    c = w.server.conns[(21, Endpoint(VPN_PUBLIC, s.local_port))]
    assert c.requests == 4 and len(s.accepted) == 4


def test_in_window_rst_draws_challenge_ack(make_world):
    w = make_world(client_isolation=False)
    s = w.victim.open_tcp(w.server_ep(21), interval=None)
    w.sim.run_until(1.0)
    w.victim.receive(Packet.tcp(s.remote, Endpoint(w.victim.addr, s.local_port), RST,
                                s.rcv_nxt + 5))
    assert s.challenge_acks == 1 and s.state == "ESTABLISHED"
    w.victim.receive(Packet.tcp(s.remote, Endpoint(w.victim.addr, s.local_port), RST, s.rcv_nxt))
    assert s.state == "CLOSED" and s.close_reason == "reset"


def test_syn_retries_then_fail(make_world):
    w = make_world(server_ports=frozenset({80}))
    w.gateway.table.profile  # noqa: B018 - world builds fine
    s = w.victim.open_tcp(w.server_ep(9), interval=None)
    w.sim.run_until(5.0)
    assert s.state == "CLOSED" and s.close_reason == "refused"


def _race(make_world, txids, true_txid_index, seed=0):
    w = make_world(seed=seed, resolver_muted=True)
    q = w.victim.query_dns("a.com", 100.0)
    w.sim.run_until(0.5)
    vals = list(txids)
    vals[true_txid_index] = q.txid
    # Any earlier copies of the true TxID would win first; keep the oracle honest.
    vals = [v if (v != q.txid or i == true_txid_index) else (v + 1) % 65536
            for i, v in enumerate(vals)]
    tpl = Packet.udp(w.resolver_ep, w.attacker.gateway(0), DnsMessage(0, "a.com", True, 0x06060606))
    tpl.mark = FORGED
    entry = next(e for e in w.gateway.table.entries(w.sim.now) if e.key.proto.name == "UDP")
    tpl.dst = w.attacker.gateway(entry.key.translated.port)
    w.attacker.direct_train(Train(tpl, len(vals), 1e-4, "txid", values=vals))
    w.sim.run_until(5.0)
    return w, q


# make_world is a stateless factory, so sharing it across examples is safe.
@settings(max_examples=25, deadline=None,
          suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.integers(0, 65535), min_size=1, max_size=200), st.data())
def test_first_matching_response_wins(make_world, txids, data):
    idx = data.draw(st.integers(0, len(txids) - 1))
    w, q = _race(make_world, txids, idx)
    assert q.outcome == "accepted" and q.forged
    # Oracle: accepted when the idx-th spoofed reply arrives.
    assert q.ignored == idx
    assert q.answer == 0x06060606


def test_legit_response_before_race(make_world):
    w = make_world()
    q = w.victim.query_dns("a.com", 5.0)
    w.sim.run_until(1.0)
    assert q.outcome == "accepted" and not q.forged
    assert q.answer == w.resolver.zone["a.com"]


def test_query_times_out_when_resolver_muted(make_world):
    w = make_world(resolver_muted=True)
    q = w.victim.query_dns("a.com", 2.0)
    w.sim.run_until(3.0)
    assert q.outcome == "expired" and q.resolved_at == 2.0


def test_server_leaks_counters_on_desync(make_world):
    w = make_world()
    s = w.victim.open_tcp(w.server_ep(21), interval=None)
    w.sim.run_until(1.0)
    key = (21, Endpoint(VPN_PUBLIC, s.local_port))
    before = w.server.expected(*key)
    w.server.receive(Packet.tcp(key[1], w.server_ep(21), 0x18, 1, 1, 1))
    assert w.server.stats["desync_ack"] == 1
    assert w.server.expected(*key) == before

"""VPN gateway: isolation, NAT forwarding, proxy, DNS redirect, bypass."""

from __future__ import annotations

from hypothesis import given, settings
from hypothesis import strategies as st

from vpnct.netsim import Path
from vpnct.packets import ACK, PSHACK, RST, SYN, Endpoint, Packet, Protocol
from vpnct.world import VPN_PUBLIC


def _established(w, port=21, interval=None):
    s = w.victim.open_tcp(w.server_ep(port), interval=interval)
    w.sim.run_until(w.sim.now + 1.0)
    assert s.state == "ESTABLISHED"
    return s


def _entry(w, s):
    return w.gateway.table.find_outbound(Protocol.TCP, Endpoint(w.victim.addr, s.local_port),
                                         s.remote, w.sim.now)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 65535), st.integers(1, 65535), st.sampled_from([SYN, ACK, RST, PSHACK]))
def test_isolation_blocks_client_to_client(sport, dport, flags):
    from vpnct.profiles import get_profile
    from vpnct.world import WorldConfig, build_world
    w = build_world(WorldConfig(get_profile("netfilter_pre"), 0))
    got = []
    w.victim.receive = got.append  # type: ignore[method-assign]
    pkt = Packet.tcp(w.attacker.local(sport), Endpoint(w.victim.addr, dport), flags)
    w.attacker.tunnel(pkt)
    w.sim.run_until(1.0)
    assert got == []
    assert w.gateway.stats["drop_isolation"] == 1


def test_isolation_off_forwards(make_world):
    w = make_world(client_isolation=False)
    got = []
    w.victim.receive = got.append  # type: ignore[method-assign]
    w.attacker.tunnel(Packet.tcp(w.attacker.local(1), Endpoint(w.victim.addr, 2), SYN))
    w.sim.run_until(1.0)
    assert len(got) == 1


def test_nat_preserves_port_and_forwards_replies(make_world):
    w = make_world()
    s = _established(w)
    e = _entry(w, s)
    assert e.key.translated == Endpoint(VPN_PUBLIC, s.local_port)
    assert (21, Endpoint(VPN_PUBLIC, s.local_port)) in w.server.conns


def test_forged_data_dropped_after_entry_removed(make_world):
    w = make_world()
    s = _established(w)
    e = _entry(w, s)
    w.gateway.table.remove(e)
    c = w.server.expected(21, Endpoint(VPN_PUBLIC, s.local_port))
    w.attacker.direct(Packet.tcp(w.server_ep(21), w.attacker.gateway(s.local_port), PSHACK,
                                 c[0], c[1], 10))
    w.sim.run_until(w.sim.now + 1.0)
    assert s.accepted == []
    assert w.gateway.stats["drop_no_entry"] == 1


def test_strict_gateway_rejects_off_by_one_rst(make_world):
    w = make_world("ipfw_pre")
    s = _established(w)
    e = _entry(w, s)
    exp = w.gateway.table.expected_rst_seq(e)
    w.attacker.direct(Packet.tcp(w.server_ep(21), w.attacker.gateway(s.local_port), RST, exp + 1))
    w.sim.run_until(w.sim.now + 1.0)
    assert w.gateway.stats["drop_rst_rejected"] == 1 and not e.removed


def test_proxy_hides_client_port(make_world):
    w = make_world(proxy_ports=frozenset({21}))
    s = _established(w)
    assert _entry(w, s) is None  # no client-keyed entry exists at all
    (port, remote), = w.server.conns
    assert remote.addr == VPN_PUBLIC and port == 21
    assert remote.port != s.local_port or remote.port >= 32768


def test_dns_redirect_keeps_queries_off_the_table(make_world):
    w = make_world(dns_redirect=True)
    q = w.victim.query_dns("a.com", 5.0)
    w.sim.run_until(1.0)
    assert q.outcome == "accepted" and not q.forged
    assert not [e for e in w.gateway.table.entries(w.sim.now) if e.key.proto is Protocol.UDP]
    assert w.gateway.stats["relayed"] == 1


def test_bypass_leaks_internal_address(make_world):
    import dataclasses
    from vpnct.conntrack import RandomPorts
    from vpnct.profiles import get_profile
    from vpnct.world import WorldConfig, build_world
    prof = dataclasses.replace(get_profile("pf_rand"), allocation=RandomPorts(60000, 60001))
    w = build_world(WorldConfig(prof, 0))
    for _ in range(3):
        w.victim.open_tcp(w.server_ep(80), interval=None)
    w.sim.run_until(1.0)
    assert w.gateway.stats["bypass_nat"] >= 1
    assert w.server.seen_from[w.victim.addr] >= 1
    assert w.server.seen_from[VPN_PUBLIC] >= 2


def test_direct_packet_to_unknown_public_port_dropped(make_world):
    w = make_world()
    w.sim.send(w.attacker.name, Packet.tcp(w.server_ep(80), w.attacker.gateway(5555), ACK),
               Path.DIRECT)
    w.sim.run_until(1.0)
    assert w.gateway.stats["drop_no_entry"] == 1

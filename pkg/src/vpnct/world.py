"""Builds the standard attack topology around one VPN gateway.

    victim ==tunnel== vpn ---- server
    attacker ==tunnel== vpn ---- resolver
    attacker ----------- vpn   (open Internet path, used for spoofing)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, TextIO

from .attacks.attacker import AttackerHost
from .conntrack import FrameworkProfile
from .endpoints import ClientBehavior, DnsResolver, TcpServer, VictimClient
from .gateway import GatewayConfig, VpnGateway
from .netsim import Path, Simulator
from .packets import Endpoint, ip

VPN_PUBLIC = ip("203.0.113.1")
ATTACKER_PUBLIC = ip("192.0.2.66")
SERVER_ADDR = ip("198.51.100.10")
RESOLVER_ADDR = ip("198.51.100.53")


@dataclass
class Topology:
    tunnel_hops: int = 1
    tunnel_latency_s: float = 0.02
    attacker_direct_hops: int = 5
    attacker_direct_latency_s: float = 0.02
    server_hops: int = 4
    server_latency_s: float = 0.03
    resolver_hops: int = 4
    resolver_latency_s: float = 0.03


@dataclass
class WorldConfig:
    profile: FrameworkProfile
    seed: int = 0
    client_isolation: bool = True
    dns_redirect: bool = False
    proxy_ports: frozenset = frozenset()
    behavior: ClientBehavior = field(default_factory=ClientBehavior)
    server_ports: Optional[frozenset] = None
    resolver_delay_s: float = 0.05
    resolver_muted: bool = False
    zone: dict = field(default_factory=lambda: {"a.com": ip("93.184.216.34")})
    drop_probability: float = 0.0
    topology: Topology = field(default_factory=Topology)


@dataclass
class World:
    sim: Simulator
    gateway: VpnGateway
    victim: VictimClient
    attacker: AttackerHost
    server: TcpServer
    resolver: DnsResolver

    @property
    def resolver_ep(self) -> Endpoint:
        return Endpoint(self.resolver.addr, 53)

    def server_ep(self, port: int) -> Endpoint:
        return Endpoint(self.server.addr, port)


def build_world(cfg: WorldConfig, trace: Optional[TextIO] = None,
                record_trace: bool = False) -> World:
    sim = Simulator(cfg.seed, trace=trace, record_trace=record_trace,
                    drop_probability=cfg.drop_probability)
    resolver_ep = Endpoint(RESOLVER_ADDR, 53)
    gw = VpnGateway(GatewayConfig(
        cfg.profile, VPN_PUBLIC, client_isolation=cfg.client_isolation,
        dns_redirect=resolver_ep if cfg.dns_redirect else None,
        proxy_ports=cfg.proxy_ports))
    sim.add_host(gw)
    server = TcpServer(listen_ports=set(cfg.server_ports) if cfg.server_ports else None)
    sim.add_host(server, SERVER_ADDR)
    server.addr = SERVER_ADDR
    resolver = DnsResolver(response_delay_s=cfg.resolver_delay_s, muted=cfg.resolver_muted,
                           zone=cfg.zone)
    sim.add_host(resolver, RESOLVER_ADDR)
    resolver.addr = RESOLVER_ADDR

    attacker = AttackerHost(gateway_host=gw.name)
    sim.add_host(attacker, ATTACKER_PUBLIC)
    victim = VictimClient(behavior=cfg.behavior, resolver=resolver_ep)
    sim.add_host(victim)
    # Attach order fixes internal addresses: attacker .2, victim .3.
    attacker.addr = gw.attach_client(attacker.name)
    victim.addr = gw.attach_client(victim.name)
    attacker.gateway_addr = VPN_PUBLIC
    if cfg.dns_redirect:
        attacker.client_config["dns_redirect"] = resolver_ep

    t = cfg.topology
    for client in (attacker.name, victim.name):
        sim.add_route(client, gw.name, t.tunnel_hops, t.tunnel_latency_s, Path.TUNNEL)
    sim.add_route(attacker.name, gw.name, t.attacker_direct_hops, t.attacker_direct_latency_s)
    sim.add_route(gw.name, server.name, t.server_hops, t.server_latency_s)
    sim.add_route(gw.name, resolver.name, t.resolver_hops, t.resolver_latency_s)
    return World(sim, gw, victim, attacker, server, resolver)

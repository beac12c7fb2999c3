"""The VPN server: tunnel endpoint, NAT via connection tracking, client isolation.

Tunneled packets from clients are translated outbound; wire packets to the
public address are reverse-translated inbound. Two optional paths bypass the
shared table: ``proxy_ports`` (the gateway terminates those flows itself on
random ports with strict RST checks) and ``dns_redirect`` (UDP/53 queries are
relayed to a fixed resolver from gateway-owned ports).
"""

from __future__ import annotations

import ipaddress
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .conntrack import (
    ConnTrackTable,
    Direction,
    FrameworkProfile,
    PortsExhausted,
    RstAction,
    SessionEntry,
    SessionKey,
    TableFull,
    TcpConnState,
)
from .netsim import Host, Path, Simulator, Train
from .packets import RST, SYN, Endpoint, Packet, Protocol, ip

PROXY_RANGE = (32768, 65535)
RELAY_TIMEOUT_S = 30.0
PROXY_IDLE_S = 300.0


class SubnetFull(Exception):
    pass


@dataclass
class GatewayConfig:
    profile: FrameworkProfile
    public_addr: int = ip("203.0.113.1")
    internal_subnet: str = "10.8.0.0/24"
    client_isolation: bool = True
    dns_redirect: Optional[Endpoint] = None
    proxy_ports: frozenset = frozenset()

    def __post_init__(self):
        net = ipaddress.IPv4Network(self.internal_subnet)
        if ipaddress.IPv4Address(self.public_addr) in net:
            raise ValueError("public address inside the internal subnet")
        self.proxy_ports = frozenset(self.proxy_ports)


@dataclass(slots=True)
class _Relay:
    client: Endpoint
    original: Endpoint
    expiry: float


@dataclass(slots=True)
class _ProxyFlow:
    client: Endpoint
    remote: Endpoint
    port: int
    expiry: float
    # Next sequence number the remote must use in an RST for it to count.
    remote_next: int = 0


class VpnGateway(Host):
    def __init__(self, config: GatewayConfig, name: str = "vpn"):
        super().__init__(name)
        self.config = config
        self.profile = config.profile
        self.public_addr = config.public_addr
        self._net = ipaddress.IPv4Network(config.internal_subnet)
        self._hosts_iter = self._net.hosts()
        next(self._hosts_iter)  # .1 is the gateway's own tunnel address
        self.clients: dict[str, int] = {}
        self._client_by_addr: dict[int, str] = {}
        self.table: Optional[ConnTrackTable] = None
        self.stats: Counter = Counter()
        # Last gateway verdict per outbound flow (proto, src, dst): ground truth for reports.
        self.verdicts: dict[tuple, str] = {}
        self._relays: dict[int, _Relay] = {}
        self._proxy_by_client: dict[tuple, _ProxyFlow] = {}
        self._proxy_by_port: dict[tuple, _ProxyFlow] = {}
        self._proxy_ports_to: dict[Endpoint, set[int]] = {}

    # ---- setup -----------------------------------------------------------

    def attach(self, sim: Simulator) -> None:
        super().attach(sim)
        sim.register_public(self.public_addr, self.name)
        sim.set_tunnel_hub(self.name)
        observer = self._observe if sim.tracing else None
        self.table = ConnTrackTable(self.profile, self.public_addr, sim.rng("ports"), observer)
        sim.on_advance(self.table.expire_sweep)

    def _observe(self, entry: SessionEntry, verb: str, detail: dict) -> None:
        d = {"change": verb}
        d.update(detail)
        d["new_expiry"] = entry.expiry
        self.sim.record(self.name, "state", entry=entry, **d)

    def attach_client(self, host_name: str) -> int:
        if host_name in self.clients:
            raise ValueError(f"{host_name} already attached")
        try:
            addr = int(next(self._hosts_iter))
        except StopIteration:
            raise SubnetFull(self.config.internal_subnet) from None
        self.clients[host_name] = addr
        self._client_by_addr[addr] = host_name
        self.sim.register_tunnel(addr, host_name)
        return addr

    def internal_addr_of(self, host_name: str) -> Optional[int]:
        return self.clients.get(host_name)

    def is_internal(self, addr: int) -> bool:
        return addr in self._client_by_addr or ipaddress.IPv4Address(addr) in self._net

    # ---- dispatch ----------------------------------------------------------

    def receive(self, packet: Packet) -> None:
        if packet.via_tunnel:
            self.outbound(packet)
        else:
            self.inbound(packet)

    def _drop(self, packet: Packet, reason: str, entry: Optional[SessionEntry] = None) -> str:
        self.stats["drop_" + reason] += 1
        self.sim.record(self.name, "drop", packet, entry, reason=reason)
        return "dropped:" + reason

    # ---- outbound ------------------------------------------------------------

    def outbound(self, packet: Packet) -> str:
        sim = self.sim
        now = sim.now
        flow = (packet.proto, packet.src, packet.dst)
        if packet.src.addr not in self._client_by_addr:
            return self._drop(packet, "spoofed_inner")
        if self.is_internal(packet.dst.addr):
            if self.config.client_isolation:
                verdict = self._drop(packet, "isolation")
            else:
                out = packet.copy()
                verdict = "forwarded" if sim.send(self.name, out, Path.TUNNEL) else "lost"
            self.verdicts[flow] = verdict
            return verdict
        cfg = self.config
        if cfg.dns_redirect is not None and packet.proto is Protocol.UDP and packet.dst.port == 53:
            verdict = self._relay_query(packet, now)
        elif packet.proto is Protocol.TCP and packet.dst.port in cfg.proxy_ports:
            verdict = self._proxy_out(packet, now)
        else:
            verdict = self._nat_out(packet, now)
        self.verdicts[flow] = verdict
        return verdict

    def _nat_out(self, packet: Packet, now: float) -> str:
        table = self.table
        entry = table.lookup(packet, Direction.OUTBOUND, now)
        try:
            if entry is None:
                if packet.proto is Protocol.UDP or packet.flags & SYN:
                    port = table.allocate_port(packet.proto, packet.src, packet.dst, now)
                    key = SessionKey(packet.proto, packet.src, Endpoint(self.public_addr, port),
                                     packet.dst)
                    state = TcpConnState.SYN_SENT if packet.proto is Protocol.TCP else None
                    entry = table.create_entry(key, state, now)
                else:
                    entry = table.loose_instantiate(packet, now)
                    if entry is None:
                        return self._drop(packet, "refused")
                    self.stats["loose"] += 1
                    return self._forward_out(packet, entry)
        except PortsExhausted as e:
            if e.bypass:
                self.stats["bypass_nat"] += 1
                self.sim.record(self.name, "bypass_nat", packet, reason="ports_exhausted")
                out = packet.copy(via_tunnel=False)
                self.sim.send(self.name, out, Path.DIRECT)
                return "bypass_nat"
            return self._drop(packet, "exhausted")
        except TableFull as e:
            return self._drop(packet, "table_full" if e.kind == "table" else e.kind)
        table.handle_segment(entry, packet, Direction.OUTBOUND, now)
        return self._forward_out(packet, entry)

    def _forward_out(self, packet: Packet, entry: SessionEntry) -> str:
        out = packet.copy(src=entry.key.translated, via_tunnel=False)
        self.stats["out"] += 1
        return "forwarded" if self.sim.send(self.name, out, Path.DIRECT) else "lost"

    # DNS redirect: the gateway owns the upstream socket.

    def _gateway_port(self, taken) -> Optional[int]:
        """A random port from the gateway's own pool not in ``taken``; None when full."""
        lo, hi = PROXY_RANGE
        if len(taken) > hi - lo:
            return None
        rng = self.sim.rng("proxy")
        while True:
            p = rng.randint(lo, hi)
            if p not in taken:
                return p

    def _relay_query(self, packet: Packet, now: float) -> str:
        for p in [p for p, r in self._relays.items() if r.expiry <= now]:
            del self._relays[p]
        port = self._gateway_port(self._relays)
        if port is None:
            return self._drop(packet, "relay_exhausted")
        self._relays[port] = _Relay(packet.src, packet.dst, now + RELAY_TIMEOUT_S)
        out = packet.copy(src=Endpoint(self.public_addr, port), dst=self.config.dns_redirect,
                          via_tunnel=False)
        self.stats["relayed"] += 1
        self.sim.record(self.name, "state", packet, detail="dns_redirect", port=port)
        return "relayed" if self.sim.send(self.name, out, Path.DIRECT) else "lost"

    def _relay_reply(self, packet: Packet, now: float) -> Optional[str]:
        r = self._relays.get(packet.dst.port)
        if r is None or r.expiry <= now or packet.src != self.config.dns_redirect:
            return None
        del self._relays[packet.dst.port]
        back = packet.copy(src=r.original, dst=r.client)
        return "forwarded" if self.sim.send(self.name, back, Path.TUNNEL) else "lost"

    # Proxy: flows the gateway terminates itself.

    def _proxy_out(self, packet: Packet, now: float) -> str:
        key = (packet.src, packet.dst)
        flow = self._proxy_by_client.get(key)
        if flow is not None and flow.expiry <= now:
            self._proxy_close(flow)
            flow = None
        if flow is None:
            taken = self._proxy_ports_to.setdefault(packet.dst, set())
            port = self._gateway_port(taken)
            if port is None:
                return self._drop(packet, "proxy_exhausted")
            flow = _ProxyFlow(packet.src, packet.dst, port, now + PROXY_IDLE_S)
            self._proxy_by_client[key] = flow
            self._proxy_by_port[(port, packet.dst)] = flow
            taken.add(port)
            self.stats["proxied"] += 1
        flow.expiry = now + PROXY_IDLE_S
        out = packet.copy(src=Endpoint(self.public_addr, flow.port), via_tunnel=False)
        return "proxied" if self.sim.send(self.name, out, Path.DIRECT) else "lost"

    def _proxy_close(self, flow: _ProxyFlow) -> None:
        self._proxy_by_client.pop((flow.client, flow.remote), None)
        self._proxy_by_port.pop((flow.port, flow.remote), None)
        self._proxy_ports_to.get(flow.remote, set()).discard(flow.port)

    def _proxy_in(self, packet: Packet, now: float) -> Optional[str]:
        flow = self._proxy_by_port.get((packet.dst.port, packet.src))
        if flow is None:
            return None
        if flow.expiry <= now:
            self._proxy_close(flow)
            return None
        if packet.flags & RST:
            if packet.seq != flow.remote_next:
                return self._drop(packet, "rst_rejected")
            self._proxy_close(flow)
        else:
            flow.remote_next = (packet.seq + packet.payload_len + (1 if packet.flags & SYN else 0)) \
                & 0xFFFFFFFF
            flow.expiry = now + PROXY_IDLE_S
        back = packet.copy(dst=flow.client)
        return "forwarded" if self.sim.send(self.name, back, Path.TUNNEL) else "lost"

    # ---- inbound ----------------------------------------------------------------

    def inbound(self, packet: Packet) -> str:
        now = self.sim.now
        if packet.dst.addr != self.public_addr:
            return self._drop(packet, "unroutable")
        if self._relays and packet.proto is Protocol.UDP:
            v = self._relay_reply(packet, now)
            if v is not None:
                return v
        if self._proxy_by_port and packet.proto is Protocol.TCP:
            v = self._proxy_in(packet, now)
            if v is not None:
                return v
        table = self.table
        entry = table.lookup(packet, Direction.INBOUND, now)
        if entry is None:
            return self._drop(packet, "no_entry")
        internal = entry.key.internal
        if packet.proto is Protocol.TCP and packet.flags & RST:
            res = table.handle_rst(entry, packet, now, Direction.INBOUND)
            if res.action is RstAction.IGNORED:
                return self._drop(packet, "rst_rejected", entry)
        else:
            table.handle_segment(entry, packet, Direction.INBOUND, now)
        back = packet.copy(dst=internal)
        self.stats["in"] += 1
        return "forwarded" if self.sim.send(self.name, back, Path.TUNNEL) else "lost"

    # ---- trains --------------------------------------------------------------------

    def _forward_dies(self, internal_addr: int, ttl_after: int) -> bool:
        client = self._client_by_addr.get(internal_addr)
        r = self.sim.routes.get((self.name, client, Path.TUNNEL)) if client else None
        return r is None or ttl_after < r.hops

    def receive_train(self, train: Train, lo: int, hi: int) -> int:
        sim = self.sim
        tpl = train.template
        if sim.tracing:
            return super().receive_train(train, lo, hi)
        if train.path is Path.TUNNEL:
            if train.field == "sport" and self._probe_train_ok(train):
                return self._probe_train(train, lo, hi)
            return super().receive_train(train, lo, hi)
        if tpl.dst.addr != self.public_addr:
            return super().receive_train(train, lo, hi)
        if train.field == "dport" and not tpl.flags & RST and not self._relays \
                and not self._proxy_by_port:
            return self._dport_train(train, lo, hi)
        if train.field == "seq" and tpl.proto is Protocol.TCP and tpl.flags & RST:
            return self._rst_train(train, lo, hi)
        if train.field == "txid" and tpl.proto is Protocol.UDP and not self._relays:
            return self._dns_train(train, lo, hi)
        return super().receive_train(train, lo, hi)

    def _rst_train(self, train: Train, lo: int, hi: int) -> int:
        sim = self.sim
        table = self.table
        tpl = train.template
        if self._proxy_by_port.get((tpl.dst.port, tpl.src)) is not None:
            return super().receive_train(train, lo, hi)
        i = lo
        while i < hi:
            j = self.stretch_end(train, i, hi)
            if j <= i:
                return i
            sim.advance(train.arrival(i))
            entry = table.lookup(tpl, Direction.INBOUND, sim.now)
            if entry is None:
                self.stats["drop_no_entry"] += j - i
                sim.advance(train.arrival(j - 1))
                i = j
                continue
            dies = self._forward_dies(entry.key.internal.addr, train.ttl_after)
            hits, stop = table.rst_sweep(
                entry, train.start, train.stride, i, j, train.arrival, Direction.INBOUND,
                skip=train.lost, max_hits=None if dies else 1)
            self.stats["drop_rst_rejected"] += (stop - i) - len(hits)
            self.stats["in"] += len(hits)
            if hits:
                k = hits[-1][0]
                sim.advance(train.arrival(k))
                if not dies:
                    pkt = train.packet(k)
                    sim.send(self.name, pkt.copy(dst=entry.key.internal), Path.TUNNEL)
            i = stop
        return i

    def _dns_train(self, train: Train, lo: int, hi: int) -> int:
        sim = self.sim
        table = self.table
        tpl = train.template
        j = self.stretch_end(train, lo, hi)
        if j <= lo:
            return lo
        sim.advance(train.arrival(lo))
        entry = table.lookup(tpl, Direction.INBOUND, sim.now)
        if entry is None:
            self.stats["drop_no_entry"] += j - lo
            sim.advance(train.arrival(j - 1))
            return j
        client = self._client_by_addr.get(entry.key.internal.addr)
        r = sim.routes.get((self.name, client, Path.TUNNEL))
        if r is not None:
            # Forwarded packets must not reach the client before this stretch ends.
            horizon = train.arrival(lo) + r.latency_s
            while j - 1 > lo and train.arrival(j - 1) >= horizon:
                j = lo + max(1, (j - lo) // 2)
        last = j - 1
        sim.advance(train.arrival(last))
        table.handle_segment(entry, tpl, Direction.INBOUND, sim.now)
        sub = train.subtrain(lo, j)
        sub.template = tpl.copy(dst=entry.key.internal, ttl=train.ttl_after)
        self.stats["in"] += j - lo
        sim.send_train(self.name, sub, Path.TUNNEL, spacing_start=train.t_first)
        return j

    # Bulk paths. Each reproduces the per-packet result of outbound()/inbound()
    # for its train shape without building a Packet per element.

    def _probe_train_ok(self, train: Train) -> bool:
        tpl = train.template
        cfg = self.config
        if tpl.src.addr not in self._client_by_addr or self.is_internal(tpl.dst.addr):
            return False
        if tpl.proto is Protocol.TCP:
            if tpl.flags != SYN or tpl.dst.port in cfg.proxy_ports:
                return False
        elif cfg.dns_redirect is not None and tpl.dst.port == 53:
            return False
        dest = self.sim.public_addrs.get(tpl.dst.addr)
        r = self.sim.routes.get((self.name, dest, Path.DIRECT)) if dest else None
        # Only trains whose forwards die before leaving the gateway's hop budget.
        return r is not None and train.ttl_after < r.hops

    def _probe_train(self, train: Train, lo: int, hi: int) -> int:
        sim = self.sim
        table = self.table
        tpl = train.template
        proto, dst, addr = tpl.proto, tpl.dst, tpl.src.addr
        public = self.public_addr
        state = TcpConnState.SYN_SENT if proto is Protocol.TCP else None
        bypass_verdict = "bypass_nat"
        stats, verdicts = self.stats, self.verdicts
        values, lost = train.values, train.lost
        t_first, spacing, off = train.t_first, train.spacing, train.offset
        advance, find = sim.advance, table.find_outbound
        allocate, create, track = table.allocate_port, table.create_entry, table._track
        out = 0
        j = self.stretch_end(train, lo, hi)
        for k in range(lo, j):
            now = t_first + (off + k) * spacing
            advance(now)
            if lost is not None and lost[k]:
                continue
            src = Endpoint(addr, int(values[k]))
            entry = find(proto, src, dst, now)
            if entry is None:
                try:
                    port = allocate(proto, src, dst, now)
                    entry = create(SessionKey(proto, src, Endpoint(public, port), dst), state, now)
                except PortsExhausted as e:
                    if e.bypass:
                        stats["bypass_nat"] += 1
                        verdicts[(proto, src, dst)] = bypass_verdict
                    else:
                        stats["drop_exhausted"] += 1
                        verdicts[(proto, src, dst)] = "dropped:exhausted"
                    continue
                except TableFull as e:
                    reason = "table_full" if e.kind == "table" else e.kind
                    stats["drop_" + reason] += 1
                    verdicts[(proto, src, dst)] = "dropped:" + reason
                    continue
                # A fresh entry already carries this packet's timeout.
                track(entry, tpl, Direction.OUTBOUND)
            else:
                table.handle_segment(entry, tpl, Direction.OUTBOUND, now)
            out += 1
            verdicts[(proto, src, dst)] = "lost"
        stats["out"] += out
        return j

    def _dport_train(self, train: Train, lo: int, hi: int) -> int:
        sim = self.sim
        table = self.table
        tpl = train.template
        proto, src = tpl.proto, tpl.src
        stats = self.stats
        values, lost = train.values, train.lost
        ttl = train.ttl_after
        j = self.stretch_end(train, lo, hi)
        may_run, advance, get = sim.train_may_run, sim.advance, table.get
        handle, send, name = table.handle_segment, sim.send, self.name
        t_first, spacing, off = train.t_first, train.spacing, train.offset
        flags, seq, ack, plen, payload, mark = (tpl.flags, tpl.seq, tpl.ack, tpl.payload_len,
                                                tpl.payload, tpl.mark)
        inbound, tunnel = Direction.INBOUND, Path.TUNNEL
        n_in = n_none = 0
        k = lo
        try:
            for k in range(lo, j):
                now = t_first + (off + k) * spacing
                if not may_run(now):
                    # A forwarded packet is now queued ahead of this one.
                    return k
                advance(now)
                if lost is not None and lost[k]:
                    continue
                v = int(values[k])
                entry = get(proto, v, src, now)
                if entry is None:
                    n_none += 1
                    continue
                handle(entry, tpl, inbound, now)
                n_in += 1
                send(name, Packet(src, entry.key.internal, proto, ttl, flags, seq, ack, plen,
                                  payload, False, v if mark is None else mark), tunnel)
        finally:
            stats["in"] += n_in
            stats["drop_no_entry"] += n_none
        return j

"""Victim client, target TCP server and DNS resolver.

The client speaks just enough TCP to matter here: a handshake with SYN
retransmission, periodic request/response exchanges, RFC 5961 challenge ACKs
for RSTs that do not match exactly, and in-order acceptance of data. The
server answers desynchronised segments with a pure ACK carrying its exact
``(snd_nxt, rcv_nxt)``, which is what lets an off-path attacker read them.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import kernels
from .netsim import Host, Path, Train
from .packets import ACK, PSHACK, RST, SEQ_MASK, SYN, SYNACK, DnsMessage, Endpoint, Packet, Protocol

FORGED = "forged"


def _in_range(lo: int, x: int, hi: int) -> bool:
    """lo <= x <= hi on the sequence circle."""
    return ((x - lo) & SEQ_MASK) <= ((hi - lo) & SEQ_MASK)


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------

@dataclass
class ClientBehavior:
    request_interval_s: float = 12.0
    request_len: int = 64
    dns_query_timeout_s: float = 10.0
    syn_retries: int = 6
    syn_rto_s: float = 1.0
    ephemeral_range: tuple[int, int] = (32768, 65535)

    def __post_init__(self):
        if self.request_interval_s <= 0 or self.dns_query_timeout_s <= 0:
            raise ValueError("intervals and timeouts must be positive")


@dataclass(slots=True)
class TcpSession:
    local_port: int
    remote: Endpoint
    iss: int
    interval: Optional[float]
    request_len: int
    first_request_after: Optional[float] = None
    state: str = "SYN_SENT"
    snd_una: int = 0
    snd_nxt: int = 0
    rcv_nxt: int = 0
    opened_at: float = 0.0
    established_at: Optional[float] = None
    closed_at: Optional[float] = None
    close_reason: Optional[str] = None
    syn_sent: int = 0
    requests_sent: int = 0
    challenge_acks: int = 0
    accepted: list = field(default_factory=list)
    forged_accepted_at: Optional[float] = None


@dataclass(slots=True)
class DnsQuery:
    port: int
    txid: int
    qname: str
    server: Endpoint
    sent_at: float
    deadline: float
    outcome: Optional[str] = None  # accepted | expired
    answer: Optional[int] = None
    forged: bool = False
    resolved_at: Optional[float] = None
    ignored: int = 0


class VictimClient(Host):
    def __init__(self, name: str = "victim", behavior: Optional[ClientBehavior] = None,
                 resolver: Optional[Endpoint] = None):
        super().__init__(name)
        self.behavior = behavior or ClientBehavior()
        self.resolver = resolver
        self.addr = 0
        self.sessions: dict[tuple[int, Endpoint], TcpSession] = {}
        self.queries: list[DnsQuery] = []
        self._dns_by_port: dict[int, DnsQuery] = {}
        self.stats: Counter = Counter()

    # ---- helpers ----------------------------------------------------------

    def _send(self, packet: Packet) -> None:
        self.sim.send(self.name, packet, Path.TUNNEL)

    def _fresh_port(self) -> int:
        lo, hi = self.behavior.ephemeral_range
        rng = self.sim.rng(f"{self.name}:ports")
        used = {p for p, _ in self.sessions} | set(self._dns_by_port)
        while True:
            p = rng.randint(lo, hi)
            if p not in used:
                return p

    def _ep(self, port: int) -> Endpoint:
        return Endpoint(self.addr, port)

    # ---- TCP -----------------------------------------------------------------

    def open_tcp(self, remote: Endpoint, local_port: Optional[int] = None,
                 interval: Optional[float] = -1.0, first_request_after: Optional[float] = None
                 ) -> TcpSession:
        """Connect to ``remote``; once established, send a request every ``interval``.

        ``interval=None`` opens a session that never sends requests on its own;
        the default takes the behaviour's interval.
        """
        b = self.behavior
        port = self._fresh_port() if local_port is None else local_port
        if interval is not None and interval < 0:
            interval = b.request_interval_s
        iss = self.sim.rng(f"{self.name}:isn").getrandbits(32)
        s = TcpSession(port, remote, iss, interval, b.request_len, first_request_after,
                       snd_una=iss, snd_nxt=(iss + 1) & SEQ_MASK, opened_at=self.sim.now)
        self.sessions[(port, remote)] = s
        self._syn(s)
        return s

    def _syn(self, s: TcpSession) -> None:
        if s.state != "SYN_SENT":
            return
        b = self.behavior
        if s.syn_sent > b.syn_retries:
            s.state = "FAILED"
            s.closed_at = self.sim.now
            s.close_reason = "connect_timeout"
            return
        self._send(Packet.tcp(self._ep(s.local_port), s.remote, SYN, s.iss))
        s.syn_sent += 1
        self.sim.call_later(b.syn_rto_s * (2 ** (s.syn_sent - 1)), self._syn, s)

    def _request(self, s: TcpSession) -> None:
        if s.state != "ESTABLISHED":
            return
        self.send_request(s)
        if s.interval is not None:
            self.sim.call_later(s.interval, self._request, s)

    def send_request(self, s: TcpSession, length: Optional[int] = None) -> None:
        n = s.request_len if length is None else length
        self._send(Packet.tcp(self._ep(s.local_port), s.remote, PSHACK, s.snd_nxt, s.rcv_nxt, n,
                              payload=b"request"))
        s.snd_nxt = (s.snd_nxt + n) & SEQ_MASK
        s.requests_sent += 1

    def _ack(self, s: TcpSession) -> None:
        self._send(Packet.tcp(self._ep(s.local_port), s.remote, ACK, s.snd_nxt, s.rcv_nxt))

    def _on_tcp(self, p: Packet) -> None:
        s = self.sessions.get((p.dst.port, p.src))
        flags = p.flags
        if s is None or s.state in ("CLOSED", "FAILED"):
            if not flags & RST:
                self.stats["rst_sent"] += 1
                self._send(Packet.tcp(p.dst, p.src, RST | ACK, p.ack, 0))
            return
        if flags & RST:
            if s.state == "SYN_SENT":
                if flags & ACK and p.ack == s.snd_nxt:
                    self._close(s, "refused")
                return
            if p.seq == s.rcv_nxt:
                self._close(s, "reset")
            else:
                s.challenge_acks += 1
                self.stats["challenge_acks"] += 1
                self._ack(s)
            return
        if s.state == "SYN_SENT":
            if flags & SYN and flags & ACK and p.ack == s.snd_nxt:
                s.state = "ESTABLISHED"
                s.rcv_nxt = (p.seq + 1) & SEQ_MASK
                s.snd_una = p.ack
                s.established_at = self.sim.now
                self._ack(s)
                if s.interval is not None:
                    first = s.first_request_after
                    self.sim.call_later(s.interval if first is None else first, self._request, s)
            return
        if flags & SYN:
            # Stray SYN/ACK on a live session: answer with the current ACK.
            self.stats["dup_acks"] += 1
            self._ack(s)
            return
        ack_ok = flags & ACK and _in_range(s.snd_una, p.ack, s.snd_nxt)
        if p.payload_len > 0:
            if p.seq == s.rcv_nxt and ack_ok:
                s.rcv_nxt = (s.rcv_nxt + p.payload_len) & SEQ_MASK
                s.snd_una = p.ack
                s.accepted.append((self.sim.now, p.mark, p.payload_len))
                if p.mark == FORGED and s.forged_accepted_at is None:
                    s.forged_accepted_at = self.sim.now
                self._ack(s)
            else:
                self.stats["dup_acks"] += 1
                self._ack(s)
        elif ack_ok:
            s.snd_una = p.ack

    def _close(self, s: TcpSession, reason: str) -> None:
        s.state = "CLOSED"
        s.closed_at = self.sim.now
        s.close_reason = reason

    # ---- DNS -------------------------------------------------------------------

    def query_dns(self, qname: str, timeout: Optional[float] = None,
                  resolver: Optional[Endpoint] = None) -> DnsQuery:
        server = resolver or self.resolver
        if server is None:
            raise ValueError("client has no resolver configured")
        t = self.behavior.dns_query_timeout_s if timeout is None else timeout
        port = self._fresh_port()
        txid = self.sim.rng(f"{self.name}:txid").randrange(65536)
        now = self.sim.now
        q = DnsQuery(port, txid, qname, server, now, now + t)
        self.queries.append(q)
        self._dns_by_port[port] = q
        self._send(Packet.udp(self._ep(port), server, DnsMessage(txid, qname)))
        self.sim.call_at(q.deadline, self._dns_timeout, q)
        return q

    def dns_every(self, qname: str, interval: float, count: int,
                  timeout: Optional[float] = None) -> None:
        """Issue ``count`` queries for ``qname``, one every ``interval`` seconds."""
        def fire(k: int) -> None:
            self.query_dns(qname, timeout)
            if k + 1 < count:
                self.sim.call_later(interval, fire, k + 1)
        fire(0)

    def _dns_timeout(self, q: DnsQuery) -> None:
        if q.outcome is None:
            q.outcome = "expired"
            q.resolved_at = self.sim.now
            self._dns_by_port.pop(q.port, None)

    def _dns_accept(self, q: DnsQuery, msg: DnsMessage, mark) -> None:
        q.outcome = "accepted"
        q.answer = msg.answer
        q.forged = mark == FORGED
        q.resolved_at = self.sim.now
        self._dns_by_port.pop(q.port, None)

    def _on_udp(self, p: Packet) -> str:
        q = self._dns_by_port.get(p.dst.port)
        msg = p.dns
        if q is None:
            self.stats["udp_closed_port"] += 1
            return "closed"
        if msg is None or not msg.is_response or p.src != q.server:
            self.stats["udp_garbage"] += 1
            return "garbage"
        if msg.txid != q.txid:
            q.ignored += 1
            return "ignored_txid"
        self._dns_accept(q, msg, p.mark)
        return "accepted"

    # ---- dispatch -----------------------------------------------------------------

    def receive(self, packet: Packet) -> None:
        if packet.proto is Protocol.TCP:
            self._on_tcp(packet)
        else:
            self._on_udp(packet)

    def receive_train(self, train: Train, lo: int, hi: int) -> int:
        sim = self.sim
        tpl = train.template
        if sim.tracing or train.field != "txid" or tpl.proto is not Protocol.UDP:
            return super().receive_train(train, lo, hi)
        # Spoofed responses never make the client send anything, so the whole
        # rest of the train is settled now: only the first matching TxID
        # matters, and it is accepted at its own arrival if the query is
        # still open then.
        q = self._dns_by_port.get(tpl.dst.port)
        msg = tpl.dns
        if q is None or msg is None or not msg.is_response or tpl.src != q.server:
            self.stats["udp_closed_port" if q is None else "udp_garbage"] += hi - lo
            return hi
        k = kernels.first_match(train.values, lo, hi, q.txid)
        while k < hi and train.is_lost(k):
            k = kernels.first_match(train.values, k + 1, hi, q.txid)
        if k >= hi:
            q.ignored += hi - lo
            return hi
        q.ignored += k - lo
        at = train.arrival(k)
        if at <= sim.now:
            pkt = train.packet(k)
            self._dns_accept(q, pkt.dns, pkt.mark)
        else:
            sim.call_at(at, self._late_accept, q, train, k)
        return hi

    def _late_accept(self, q: DnsQuery, train: Train, k: int) -> None:
        if q.outcome is None:
            pkt = train.packet(k)
            self._dns_accept(q, pkt.dns, pkt.mark)


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------

@dataclass(slots=True)
class ServerConn:
    snd_nxt: int
    rcv_nxt: int
    established: bool = False
    requests: int = 0


class TcpServer(Host):
    def __init__(self, name: str = "server", listen_ports: Optional[set] = None,
                 response_len: int = 128):
        super().__init__(name)
        self.addr = 0
        self.listen_ports = listen_ports
        self.response_len = response_len
        self.conns: dict[tuple[int, Endpoint], ServerConn] = {}
        self.stats: Counter = Counter()
        # Every packet that reached the server, by source address (stealth checks).
        self.seen_from: Counter = Counter()

    def expected(self, local_port: int, remote: Endpoint) -> Optional[tuple[int, int]]:
        """The connection's hidden (seq, ack) pair, i.e. (snd_nxt, rcv_nxt)."""
        c = self.conns.get((local_port, remote))
        return None if c is None else (c.snd_nxt, c.rcv_nxt)

    def _reply(self, p: Packet, flags: int, seq: int, ack: int, length: int = 0) -> None:
        self.sim.send(self.name, Packet.tcp(p.dst, p.src, flags, seq, ack, length,
                                            payload=b"response" if length else None),
                      Path.DIRECT)

    def receive(self, p: Packet) -> None:
        self.seen_from[p.src.addr] += 1
        if p.proto is not Protocol.TCP:
            return
        key = (p.dst.port, p.src)
        c = self.conns.get(key)
        flags = p.flags
        if flags & RST:
            if c is not None and p.seq == c.rcv_nxt:
                del self.conns[key]
                self.stats["reset"] += 1
            return
        if flags & SYN and not flags & ACK:
            if self.listen_ports is not None and p.dst.port not in self.listen_ports:
                self._reply(p, RST | ACK, 0, p.seq + 1)
                return
            if c is None or c.established:
                isn = self.sim.rng(f"{self.name}:isn").getrandbits(32)
                c = self.conns[key] = ServerConn((isn + 1) & SEQ_MASK, (p.seq + 1) & SEQ_MASK)
            self._reply(p, SYNACK, (c.snd_nxt - 1) & SEQ_MASK, c.rcv_nxt)
            return
        if c is None:
            if flags & ACK:
                self.stats["rst_unknown"] += 1
                self._reply(p, RST, p.ack, 0)
            return
        if p.seq == c.rcv_nxt and flags & ACK and p.ack == c.snd_nxt:
            c.established = True
            if p.payload_len > 0:
                c.rcv_nxt = (c.rcv_nxt + p.payload_len) & SEQ_MASK
                c.requests += 1
                n = self.response_len
                self._reply(p, PSHACK, c.snd_nxt, c.rcv_nxt, n)
                c.snd_nxt = (c.snd_nxt + n) & SEQ_MASK
            return
        if flags & SYN:
            return
        # Out-of-sync segment: answer with exactly where we are.
        self.stats["desync_ack"] += 1
        self._reply(p, ACK, c.snd_nxt, c.rcv_nxt)


# --------------------------------------------------------------------------
# Resolver
# --------------------------------------------------------------------------

class DnsResolver(Host):
    def __init__(self, name: str = "resolver", response_delay_s: float = 0.05,
                 muted: bool = False, zone: Optional[dict] = None):
        super().__init__(name)
        if response_delay_s < 0:
            raise ValueError("negative resolver delay")
        self.addr = 0
        self.response_delay_s = response_delay_s
        self.muted = muted
        self.zone = dict(zone or {})
        self.queries = 0

    def receive(self, p: Packet) -> None:
        msg = p.dns
        if p.proto is not Protocol.UDP or msg is None or msg.is_response:
            return
        self.queries += 1
        if self.muted:
            return
        resp = DnsMessage(msg.txid, msg.qname, True, self.zone.get(msg.qname))
        out = Packet.udp(p.dst, p.src, resp)
        self.sim.call_later(self.response_delay_s, self.sim.send, self.name, out, Path.DIRECT)

"""Simulated L3/L4 datagrams and the addressing types shared by every module."""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

SEQ_MOD = 1 << 32
SEQ_MASK = SEQ_MOD - 1


class Protocol(enum.IntEnum):
    TCP = 6
    UDP = 17


class Flags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10


SYN = int(Flags.SYN)
ACK = int(Flags.ACK)
RST = int(Flags.RST)
PSH = int(Flags.PSH)
FIN = int(Flags.FIN)
SYNACK = SYN | ACK
PSHACK = PSH | ACK


def ip(text: str) -> int:
    return int(ipaddress.IPv4Address(text))


def ip_str(addr: int) -> str:
    return str(ipaddress.IPv4Address(addr))


class Endpoint(NamedTuple):
    addr: int
    port: int

    def __str__(self) -> str:
        return f"{ip_str(self.addr)}:{self.port}"


@dataclass(slots=True)
class DnsMessage:
    txid: int
    qname: str
    is_response: bool = False
    answer: Optional[int] = None
    ttl_s: float = 60.0

    def summary(self) -> str:
        kind = "resp" if self.is_response else "query"
        ans = ip_str(self.answer) if self.answer is not None else "-"
        return f"dns {kind} txid={self.txid} {self.qname} ans={ans}"


Payload = Union[bytes, str, DnsMessage, None]


class Packet:
    """A datagram in flight.

    TCP packets carry ``flags``/``seq``/``ack``/``payload_len``; UDP packets
    carry ``payload`` (opaque bytes or a :class:`DnsMessage`). ``mark`` is an
    opaque tag the sender can use to recognise its own packets when they come
    back (e.g. which candidate port a verify packet was testing).
    """

    __slots__ = (
        "src", "dst", "proto", "ttl", "flags", "seq", "ack",
        "payload_len", "payload", "via_tunnel", "mark",
    )

    def __init__(
        self,
        src: Endpoint,
        dst: Endpoint,
        proto: Protocol,
        ttl: int = 64,
        flags: int = 0,
        seq: int = 0,
        ack: int = 0,
        payload_len: int = 0,
        payload: Payload = None,
        via_tunnel: bool = False,
        mark: object = None,
    ):
        self.src = src
        self.dst = dst
        self.proto = proto
        self.ttl = ttl
        self.flags = flags
        self.seq = seq
        self.ack = ack
        self.payload_len = payload_len
        self.payload = payload
        self.via_tunnel = via_tunnel
        self.mark = mark

    @classmethod
    def tcp(cls, src, dst, flags, seq=0, ack=0, payload_len=0, ttl=64, payload=None, mark=None):
        return cls(src, dst, Protocol.TCP, ttl, flags, seq & SEQ_MASK, ack & SEQ_MASK,
                   payload_len, payload, False, mark)

    @classmethod
    def udp(cls, src, dst, payload=None, ttl=64, mark=None):
        return cls(src, dst, Protocol.UDP, ttl, payload=payload, mark=mark)

    def copy(self, **changes) -> "Packet":
        p = Packet(self.src, self.dst, self.proto, self.ttl, self.flags, self.seq,
                   self.ack, self.payload_len, self.payload, self.via_tunnel, self.mark)
        for k, v in changes.items():
            setattr(p, k, v)
        return p

    @property
    def is_tcp(self) -> bool:
        return self.proto == Protocol.TCP

    @property
    def dns(self) -> Optional[DnsMessage]:
        return self.payload if isinstance(self.payload, DnsMessage) else None

    def has(self, flag: int) -> bool:
        return bool(self.flags & flag)

    def flag_str(self) -> str:
        names = [f.name for f in (Flags.SYN, Flags.ACK, Flags.RST, Flags.PSH, Flags.FIN)
                 if self.flags & f]
        return "|".join(names) or "-"

    def summary(self) -> str:
        head = f"{self.proto.name} {self.src}>{self.dst} ttl={self.ttl}"
        if self.proto == Protocol.TCP:
            body = f"{self.flag_str()} seq={self.seq} ack={self.ack} len={self.payload_len}"
        elif isinstance(self.payload, DnsMessage):
            body = self.payload.summary()
        else:
            body = f"udp len={len(self.payload) if self.payload else 0}"
        return f"{head} {body}{' tun' if self.via_tunnel else ''}"

    def __repr__(self) -> str:
        return f"Packet({self.summary()})"


def seq_distance(a: int, b: int) -> int:
    """Shortest distance between two points on the 32-bit sequence circle."""
    d = (a - b) & SEQ_MASK
    return min(d, SEQ_MOD - d)

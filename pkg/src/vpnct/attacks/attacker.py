"""The attacker: an ordinary VPN client that can also spoof packets off-tunnel."""

from __future__ import annotations

import heapq
from typing import Callable, Optional

from ..netsim import Host, Path, Train
from ..packets import Endpoint, Packet


class AttackerHost(Host):
    """Sends tunneled packets as itself and Direct packets with any source.

    Everything delivered back through the tunnel lands in :attr:`inbox`.
    ``gateway_addr`` is the VPN server's public address and ``client_config``
    holds whatever the VPN pushes to every client (e.g. a forced resolver).
    """

    def __init__(self, name: str = "attacker", gateway_host: str = "vpn"):
        super().__init__(name)
        self.addr = 0
        self.gateway_host = gateway_host
        self.gateway_addr = 0
        self.client_config: dict = {}
        self._inbox: list[Packet] = []
        self._pending: list[tuple[float, int, Packet]] = []
        self._n = 0
        self.listeners: list[Callable[[Packet], None]] = []
        self.sent = 0

    @property
    def passive(self) -> bool:
        return not self.listeners

    def defer(self, at: float, packet: Packet) -> None:
        heapq.heappush(self._pending, (at, self._n, packet))
        self._n += 1

    def _flush(self) -> None:
        pend, now = self._pending, self.sim.now
        while pend and pend[0][0] <= now:
            self._inbox.append(heapq.heappop(pend)[2])

    @property
    def inbox(self) -> list[Packet]:
        """Packets that have arrived by now, oldest first."""
        self._flush()
        return self._inbox

    def receive(self, packet: Packet) -> None:
        self._flush()
        self._inbox.append(packet)
        for fn in self.listeners:
            fn(packet)

    def drain(self) -> list[Packet]:
        self._flush()
        got, self._inbox = self._inbox, []
        return got

    def hops_to_gateway(self) -> int:
        """Hop distance to the VPN server on the open path (what traceroute would say)."""
        return self.sim.hops(self.name, self.gateway_host, Path.DIRECT)

    def local(self, port: int) -> Endpoint:
        return Endpoint(self.addr, port)

    def gateway(self, port: int) -> Endpoint:
        return Endpoint(self.gateway_addr, port)

    def tunnel(self, packet: Packet) -> bool:
        self.sent += 1
        return self.sim.send(self.name, packet, Path.TUNNEL)

    def direct(self, packet: Packet) -> bool:
        self.sent += 1
        return self.sim.send(self.name, packet, Path.DIRECT)

    def tunnel_train(self, train: Train, start: Optional[float] = None) -> float:
        self.sent += train.count
        return self.sim.send_train(self.name, train, Path.TUNNEL, start)

    def direct_train(self, train: Train, start: Optional[float] = None) -> float:
        self.sent += train.count
        return self.sim.send_train(self.name, train, Path.DIRECT, start)

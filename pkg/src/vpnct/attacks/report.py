"""Attack outcome records."""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Any, Optional


@dataclass
class Phase:
    name: str
    virtual_seconds: float
    packets_sent: int


@dataclass
class AttackReport:
    attack: str
    success: bool = False
    phases: list[Phase] = field(default_factory=list)
    recovered: Any = None
    failure_reason: Optional[str] = None
    details: dict = field(default_factory=dict)

    @contextmanager
    def phase(self, name: str, attacker):
        """Record virtual time and attacker packets spent inside the block."""
        sim = attacker.sim
        t0, n0 = sim.now, attacker.sent
        try:
            yield
        finally:
            self.phases.append(Phase(name, sim.now - t0, attacker.sent - n0))

    @property
    def virtual_seconds(self) -> float:
        return sum(p.virtual_seconds for p in self.phases)

    @property
    def packets_sent(self) -> int:
        return sum(p.packets_sent for p in self.phases)

    def fail(self, reason: str) -> "AttackReport":
        self.success = False
        self.failure_reason = reason
        return self

    def absorb(self, other: "AttackReport") -> None:
        """Append another report's phases (used when chaining attacks)."""
        self.phases.extend(other.phases)
        for k, v in other.details.items():
            self.details.setdefault(k, v)

    def to_dict(self) -> dict:
        rec = self.recovered
        if isinstance(rec, (set, frozenset)):
            rec = sorted(rec)
        elif isinstance(rec, tuple):
            rec = list(rec)
        d = {
            "attack": self.attack,
            "success": self.success,
            "failure_reason": self.failure_reason,
            "recovered": rec,
            "virtual_seconds": round(self.virtual_seconds, 6),
            "packets_sent": self.packets_sent,
            "phases": [
                {"name": p.name, "virtual_seconds": round(p.virtual_seconds, 6),
                 "packets_sent": p.packets_sent} for p in self.phases
            ],
            "details": self.details,
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, default=_jsonable)


def _jsonable(x):
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    if hasattr(x, "__dataclass_fields__"):
        return asdict(x)
    return str(x)

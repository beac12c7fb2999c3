"""The vulnerability matrix: every attack against every built-in profile.

Each cell is decided by running the attack in a fresh world and reading its
report; nothing here looks at the profile to predict the answer.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

from ..attacks.chain import ChainOptions, tcp_hijack
from ..attacks.dns_hijack import DnsOptions, dns_hijack
from ..attacks.exhaust import ExhaustOptions, exhaust_ports
from ..attacks.report import AttackReport
from ..conntrack import FrameworkProfile
from ..profiles import FRAMEWORKS, VARIANTS, apply_overrides, get_profile
from ..world import World, WorldConfig, build_world

CELLS = ("dos", "tcp_hijack", "dns_hijack")

DOS_PORT = 80
TCP_PORT = 21
QNAME = "a.com"

# (DoS, TCP hijack, DNS hijack) per profile, as measured on the real stacks.
EXPECTED: dict[str, tuple[bool, bool, bool]] = {
    "netfilter_pre": (True, True, True),
    "netfilter_rand": (False, False, False),
    "pf_pre": (True, True, True),
    "pf_rand": (True, False, False),
    "ipfilter_pre": (False, True, True),
    "ipfilter_rand": (False, False, False),
    "ipfw_pre": (False, False, True),
    "ipfw_rand": (False, False, False),
    "natd_pre": (True, False, True),
    "natd_rand": (True, False, False),
}


@dataclass
class MatrixRow:
    framework: str
    allocation: str
    dos_vulnerable: bool
    tcp_hijack_vulnerable: bool
    dns_hijack_vulnerable: bool
    reports: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def profile(self) -> str:
        return f"{self.framework}_{'pre' if self.allocation == 'preservation' else 'rand'}"

    @property
    def cells(self) -> tuple[bool, bool, bool]:
        return (self.dos_vulnerable, self.tcp_hijack_vulnerable, self.dns_hijack_vulnerable)

    def to_dict(self) -> dict:
        return {"framework": self.framework, "allocation": self.allocation,
                "dos": self.dos_vulnerable, "tcp_hijack": self.tcp_hijack_vulnerable,
                "dns_hijack": self.dns_hijack_vulnerable,
                "reasons": {k: r.failure_reason for k, r in self.reports.items()}}


@dataclass(frozen=True)
class Knobs:
    """Defensive settings applied on top of every profile."""
    profile: Mapping[str, str] = field(default_factory=dict)
    proxy_ports: frozenset = frozenset()
    dns_redirect: bool = False


def _world(profile: FrameworkProfile, knobs: Knobs, seed: int, muted: bool = False) -> World:
    return build_world(WorldConfig(profile, seed, proxy_ports=frozenset(knobs.proxy_ports),
                                   dns_redirect=knobs.dns_redirect, resolver_muted=muted))


def dos_cell(profile: FrameworkProfile, knobs: Knobs = Knobs(), seed: int = 0) -> AttackReport:
    """Occupy every port toward a web server, then let the victim try to connect."""
    w = _world(profile, knobs, seed)
    return exhaust_ports(w, ExhaustOptions(w.server_ep(DOS_PORT)))


def tcp_cell(profile: FrameworkProfile, knobs: Knobs = Knobs(), seed: int = 0) -> AttackReport:
    """Hijack an FTP-style control connection that sends a request every minute."""
    w = _world(profile, knobs, seed)
    w.victim.open_tcp(w.server_ep(TCP_PORT), interval=60.0)
    w.sim.run_until(5.0)
    return tcp_hijack(w, w.server_ep(TCP_PORT), ChainOptions("tcp_hijack", TCP_PORT))


def dns_cell(profile: FrameworkProfile, knobs: Knobs = Knobs(), seed: int = 0) -> AttackReport:
    """Race a resolver (kept silent by the attacker) for a periodic lookup."""
    w = _world(profile, knobs, seed, muted=True)
    w.victim.dns_every(QNAME, 15.0, 40, timeout=10.0)
    w.sim.run_until(0.5)
    return dns_hijack(w, DnsOptions(QNAME, rounds=40, deadline=600.0))


_CELL_FNS = {"dos": dos_cell, "tcp_hijack": tcp_cell, "dns_hijack": dns_cell}


def apply_knobs(profile: FrameworkProfile, knobs: Knobs) -> FrameworkProfile:
    if not knobs.profile:
        return profile
    values = dict(knobs.profile)
    if values.get("allocation") == "random" and not profile.preserves_ports:
        # Already random: keep the framework's own range.
        values.pop("random_range", None)
    return apply_overrides(profile, values)


def run_cell(name: str, cell: str, knobs: Knobs = Knobs(), seed: int = 0) -> AttackReport:
    return _CELL_FNS[cell](apply_knobs(get_profile(name), knobs), knobs, seed)


def _job(args) -> tuple[str, str, AttackReport]:
    name, cell, knobs, seed = args
    return name, cell, run_cell(name, cell, knobs, seed)


def run_matrix(profiles: Optional[list[str]] = None, knobs: Knobs = Knobs(), seed: int = 0,
               workers: int = 1, cells: tuple[str, ...] = CELLS) -> list[MatrixRow]:
    """Execute the chosen attacks for each profile; rows come back in profile order."""
    names = profiles or [f"{fw}_{v}" for fw in FRAMEWORKS for v in VARIANTS]
    jobs = [(n, c, knobs, seed) for n in names for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_job, jobs))
    else:
        done = [_job(j) for j in jobs]
    reports: dict[str, dict[str, AttackReport]] = {n: {} for n in names}
    for n, c, rep in done:
        reports[n][c] = rep
    rows = []
    for n in names:
        prof = get_profile(n)
        r = reports[n]
        alloc = "preservation" if prof.preserves_ports else "random"
        rows.append(MatrixRow(prof.framework, alloc,
                              r["dos"].success if "dos" in r else False,
                              r["tcp_hijack"].success if "tcp_hijack" in r else False,
                              r["dns_hijack"].success if "dns_hijack" in r else False,
                              reports=r))
    return rows


def mismatches(rows: list[MatrixRow]) -> list[str]:
    """Profiles whose row differs from the expected matrix."""
    return [r.profile for r in rows if r.profile in EXPECTED and r.cells != EXPECTED[r.profile]]


def _mark(b: bool) -> str:
    return "yes" if b else "no"


def format_matrix(rows: list[MatrixRow]) -> str:
    head = f"{'framework':<10} {'allocation':<13} {'dos':<4} {'tcp':<4} {'dns':<4}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.framework:<10} {r.allocation:<13} {_mark(r.dos_vulnerable):<4} "
                     f"{_mark(r.tcp_hijack_vulnerable):<4} {_mark(r.dns_hijack_vulnerable):<4}")
    return "\n".join(lines) + "\n"


def knobs_from_flags(strict_rst: bool = False, random_alloc: bool = False,
                     conn_limit: Optional[int] = None, proxy_ports=(),
                     dns_redirect: bool = False) -> Knobs:
    """The countermeasures, expressed as profile and gateway settings."""
    prof: dict[str, str] = {}
    if strict_rst:
        prof["rst_policy"] = "strict"
    if random_alloc:
        prof["allocation"] = "random"
        prof["random_range"] = "1024-65535"
    if conn_limit is not None:
        prof["conn_limit_per_dest"] = str(conn_limit)
    return Knobs(prof, frozenset(proxy_ports), dns_redirect)

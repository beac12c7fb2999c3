"""Scenario files: sectioned key=value text describing one experiment.

A scenario names a profile (optionally overridden), the gateway flags, the
victim's workload, the resolver, the attack and its options, and the seeds.
Every error carries the offending key and its line number. Example::

    [scenario]
    attack = tcp_hijack
    profile = netfilter_pre
    seeds = 0-19

    [client]
    tcp_sessions = 1
    request_interval_s = 12

    [hijack]
    retries = 30

Sections ``[infer]``, ``[hijack]``, ``[dns]`` and ``[exhaust]`` set fields of
the matching attack option objects by name.
"""

from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any, Optional, Union

from ..attacks.dns_hijack import DnsOptions
from ..attacks.exhaust import ExhaustOptions
from ..attacks.infer import InferOptions
from ..attacks.tcp_hijack import HijackOptions
from ..conntrack import FrameworkProfile
from ..profiles import ConfigError, apply_overrides, get_profile, parse_range

ATTACK_KINDS = ("dos", "infer", "tcp_hijack", "dns_hijack")
_ALIASES = {"hijack": "tcp_hijack", "dns": "dns_hijack", "exhaust": "dos"}

_SECTION = re.compile(r"^\[([^\]]+)\]\s*$")


@dataclass
class Value:
    text: str
    line: Optional[int] = None  # None for values that did not come from a file


Sections = dict[str, dict[str, Value]]


def read_ini(text: str) -> Sections:
    """Parse sectioned key=value text, remembering each value's line."""
    out: Sections = {}
    current: Optional[dict[str, Value]] = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            name = m.group(1).strip()
            if name in out:
                raise ConfigError(f"duplicate section [{name}]", name, n)
            current = out[name] = {}
            continue
        if current is None:
            raise ConfigError("key outside any section", None, n)
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", None, n)
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", None, n)
        if key in current:
            raise ConfigError(f"duplicate key {key!r}", key, n)
        current[key] = Value(val, n)
    return out


def parse_seeds(text: str) -> list[int]:
    """``0-19`` or ``1,2,5`` or a mix; order is kept, duplicates rejected."""
    seeds: list[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if lo > hi:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds")
    return seeds


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coerce(tp: Any, text: str) -> Any:
    """Convert ``text`` to the annotated field type ``tp``."""
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() in ("none", ""):
            return None
        return _coerce(args[0], text)
    if origin is tuple:
        return parse_range("range", text)
    if origin is list:
        (inner,) = typing.get_args(tp)
        return [_coerce(inner, p) for p in text.split(",") if p.strip()]
    if tp is bool:
        return _bool(text)
    if tp is int:
        return int(text, 0)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise ValueError(f"cannot set a field of type {tp} from config")


def apply_fields(obj: Any, values: dict[str, Value], skip: frozenset = frozenset()) -> Any:
    """Return a copy of dataclass ``obj`` with textual field overrides."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)} - skip
    changes = {}
    for key, v in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} for {type(obj).__name__}", key, v.line)
        try:
            changes[key] = _coerce(hints[key], v.text)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}", key, v.line) from None
    try:
        return dataclasses.replace(obj, **changes)
    except ValueError as e:
        line = min((v.line for v in values.values() if v.line is not None), default=None)
        raise ConfigError(str(e), None, line) from None


@dataclass
class ClientSpec:
    """What the victim does before and during the attack."""
    tcp_sessions: int = 1
    target_port: int = 21
    request_interval_s: Optional[float] = 60.0  # None: an idle connection
    # Draw each session's first request uniformly within one interval.
    random_phase: bool = False
    dns_queries: int = 0
    dns_parallel: int = 1
    dns_interval_s: float = 15.0
    dns_timeout_s: float = 10.0
    dns_start_s: float = 0.0
    qname: str = "a.com"
    ephemeral_range: tuple[int, int] = (32768, 65535)
    # The attack starts at this virtual time.
    attack_at_s: float = 5.0

    def __post_init__(self):
        if self.tcp_sessions < 0 or self.dns_queries < 0 or self.dns_parallel < 1:
            raise ValueError("session and query counts must be non-negative")
        if self.request_interval_s is not None and self.request_interval_s <= 0:
            raise ValueError("request_interval_s must be positive")
        if self.attack_at_s < 0:
            raise ValueError("attack_at_s must be non-negative")


@dataclass
class GatewaySpec:
    client_isolation: bool = True
    dns_redirect: bool = False
    proxy_ports: list[int] = field(default_factory=list)


@dataclass
class ResolverSpec:
    muted: bool = False
    delay_s: float = 0.05


@dataclass
class Scenario:
    name: str
    attack: str
    profile: FrameworkProfile
    seeds: list[int]
    gateway: GatewaySpec = field(default_factory=GatewaySpec)
    client: ClientSpec = field(default_factory=ClientSpec)
    resolver: ResolverSpec = field(default_factory=ResolverSpec)
    infer: InferOptions = field(default_factory=InferOptions)
    hijack: HijackOptions = field(default_factory=HijackOptions)
    dns: DnsOptions = field(default_factory=DnsOptions)
    exhaust: Optional[ExhaustOptions] = None
    drop_probability: float = 0.0

    def __post_init__(self):
        if self.attack not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.attack!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")


_TOP_KEYS = frozenset({"name", "attack", "profile", "seeds", "drop_probability"})
_SECTIONS = frozenset({"scenario", "profile", "gateway", "client", "resolver",
                       "infer", "hijack", "dns", "exhaust"})


def _need(sec: dict[str, Value], key: str, section: str) -> Value:
    if key not in sec:
        raise ConfigError(f"[{section}] needs {key!r}", key)
    return sec[key]


def scenario_from_text(text: str, default_name: str = "scenario") -> Scenario:
    return scenario_from_sections(read_ini(text), default_name)


def scenario_from_sections(secs: Sections, default_name: str = "scenario") -> Scenario:
    for name, body in secs.items():
        if name not in _SECTIONS:
            line = min((v.line for v in body.values() if v.line is not None), default=None)
            raise ConfigError(f"unknown section [{name}]", name, line)
    top = secs.get("scenario")
    if top is None:
        raise ConfigError("missing [scenario] section", "scenario")
    for key, v in top.items():
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r} in [scenario]", key, v.line)

    v = _need(top, "attack", "scenario")
    attack = _ALIASES.get(v.text, v.text)
    if attack not in ATTACK_KINDS:
        raise ConfigError(f"attack: unknown kind {v.text!r} (known: {', '.join(ATTACK_KINDS)})",
                          "attack", v.line)

    v = _need(top, "profile", "scenario")
    try:
        profile = get_profile(v.text)
    except ConfigError as e:
        raise ConfigError(f"profile: {e}", "profile", v.line) from None
    overrides = secs.get("profile", {})
    if overrides:
        try:
            profile = apply_overrides(profile, {k: x.text for k, x in overrides.items()})
        except ConfigError as e:
            line = overrides[e.key].line if e.key in overrides else None
            raise ConfigError(str(e), e.key, line) from None

    v = _need(top, "seeds", "scenario")
    try:
        seeds = parse_seeds(v.text)
    except ValueError as e:
        raise ConfigError(f"seeds: {e}", "seeds", v.line) from None

    drop = 0.0
    if "drop_probability" in top:
        v = top["drop_probability"]
        try:
            drop = float(v.text)
        except ValueError:
            raise ConfigError(f"drop_probability: expected a number, got {v.text!r}",
                              "drop_probability", v.line) from None
        if not 0.0 <= drop < 1.0:
            raise ConfigError("drop_probability must be in [0, 1)", "drop_probability", v.line)

    client = apply_fields(ClientSpec(), secs.get("client", {}))
    gateway = apply_fields(GatewaySpec(), secs.get("gateway", {}))
    resolver = apply_fields(ResolverSpec(), secs.get("resolver", {}))
    infer = apply_fields(InferOptions(), secs.get("infer", {}))
    hijack = apply_fields(HijackOptions(), secs.get("hijack", {}))
    dns = apply_fields(DnsOptions(), secs.get("dns", {}), skip=frozenset({"infer"}))
    # DNS inference starts from its own defaults (query-port range, stop early).
    dns.infer = apply_fields(dns.infer, secs.get("infer", {}))
    exhaust = None
    if "exhaust" in secs:
        from ..packets import Endpoint
        from ..world import SERVER_ADDR
        base = ExhaustOptions(Endpoint(SERVER_ADDR, client.target_port))
        exhaust = apply_fields(base, secs["exhaust"], skip=frozenset({"target"}))
    name = top["name"].text if "name" in top else default_name
    return Scenario(name, attack, profile, seeds, gateway, client, resolver,
                    infer, hijack, dns, exhaust, drop)


def load_scenario(path: Union[str, FsPath]) -> Scenario:
    p = FsPath(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {p}: {e.strerror}") from None
    return scenario_from_text(text, p.stem)


def builtin_scenarios() -> dict[str, FsPath]:
    root = FsPath(__file__).resolve().parent.parent / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.ini"))}


def find_scenario(name_or_path: str) -> FsPath:
    """A file path, or the name of a scenario shipped with the package."""
    p = FsPath(name_or_path)
    if p.exists():
        return p
    shipped = builtin_scenarios()
    if name_or_path in shipped:
        return shipped[name_or_path]
    raise ConfigError(f"no scenario file {name_or_path!r} (shipped: {', '.join(shipped)})",
                      "scenario")

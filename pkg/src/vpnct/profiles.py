"""Built-in framework profiles and their plain-text config form.

Each framework ships in two variants, ``<name>_pre`` (port preservation) and
``<name>_rand`` (random selection). Parameters without a published value are
listed in ``FrameworkProfile.unverified`` and flagged when dumped.

Config sections look like::

    [netfilter_pre]
    rst_policy = inwindow
    window = 65536
    reduced_timeout_s = 10

A section may name a ``base`` profile to start from; otherwise the section
name itself must be a built-in (so ``[pf_rand]`` overrides the shipped PF
random profile) or the section must set ``framework``.
"""

from __future__ import annotations

import configparser
import dataclasses
from typing import Mapping, Optional

from .conntrack import (
    ExhaustionBehavior,
    FrameworkProfile,
    InWindow,
    NoCheck,
    Preservation,
    RandomPorts,
    Strict,
    Timeouts,
)

FRAMEWORKS = ("netfilter", "pf", "ipfilter", "ipfw", "natd")
VARIANTS = ("pre", "rand")

# Frameworks whose NAT engine leaks untranslated packets once ports run out.
_BYPASS_FRAMEWORKS = frozenset({"pf", "natd"})

# Linux keeps trying random offsets only a bounded number of times.
NETFILTER_ALLOC_ATTEMPTS = 128


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.key = key
        self.line = line


def _netfilter(rand: bool) -> FrameworkProfile:
    return FrameworkProfile(
        name="netfilter_rand" if rand else "netfilter_pre",
        framework="netfilter",
        allocation=RandomPorts(1024, 65535) if rand else Preservation(),
        rst_policy=InWindow(65536, 10.0, 300.0),
        timeouts=Timeouts(syn_sent_s=120.0, established_s=432000.0, close_s=10.0,
                          udp_s=30.0, loose_s=300.0),
        alloc_attempts=NETFILTER_ALLOC_ATTEMPTS if rand else None,
        unverified=frozenset({"udp_s", "ephemeral_range"}
                             | ({"random_range", "alloc_attempts"} if rand else set())),
    )


def _pf(rand: bool) -> FrameworkProfile:
    return FrameworkProfile(
        name="pf_rand" if rand else "pf_pre",
        framework="pf",
        allocation=RandomPorts(50001, 65535) if rand else Preservation(),
        rst_policy=NoCheck(),
        timeouts=Timeouts(close_s=90.0),
        exhaustion=ExhaustionBehavior.BYPASS_NAT if rand else ExhaustionBehavior.DROP_PACKET,
        unverified=frozenset({"syn_sent_s", "established_s", "udp_s", "loose_s",
                              "ephemeral_range"}),
    )


def _ipfilter(rand: bool) -> FrameworkProfile:
    return FrameworkProfile(
        name="ipfilter_rand" if rand else "ipfilter_pre",
        framework="ipfilter",
        allocation=RandomPorts(1024, 65535) if rand else Preservation(),
        rst_policy=NoCheck(),
        timeouts=Timeouts(close_s=60.0),
        table_limit=256 if rand else 30000,
        unverified=frozenset({"syn_sent_s", "established_s", "udp_s", "loose_s",
                              "ephemeral_range"} | ({"random_range"} if rand else set())),
    )


def _ipfw(rand: bool) -> FrameworkProfile:
    return FrameworkProfile(
        name="ipfw_rand" if rand else "ipfw_pre",
        framework="ipfw",
        allocation=RandomPorts(32768, 65535) if rand else Preservation(),
        rst_policy=Strict(),
        timeouts=Timeouts(),
        table_limit=16384,
        unverified=frozenset({"syn_sent_s", "established_s", "close_s", "udp_s",
                              "loose_s", "ephemeral_range"}
                             | ({"random_range"} if rand else set())),
    )


def _natd(rand: bool) -> FrameworkProfile:
    return FrameworkProfile(
        name="natd_rand" if rand else "natd_pre",
        framework="natd",
        allocation=RandomPorts(32768, 65535) if rand else Preservation(),
        rst_policy=Strict(),
        timeouts=Timeouts(),
        exhaustion=ExhaustionBehavior.BYPASS_NAT,
        unverified=frozenset({"syn_sent_s", "established_s", "close_s", "udp_s", "loose_s"}),
    )


_BUILDERS = {"netfilter": _netfilter, "pf": _pf, "ipfilter": _ipfilter,
             "ipfw": _ipfw, "natd": _natd}

BUILTIN: dict[str, FrameworkProfile] = {
    f"{fw}_{v}": _BUILDERS[fw](v == "rand") for fw in FRAMEWORKS for v in VARIANTS
}


def profile_names() -> list[str]:
    return list(BUILTIN)


def get_profile(name: str) -> FrameworkProfile:
    """Look up a built-in; a bare framework name means its preservation variant."""
    if name in BUILTIN:
        return BUILTIN[name]
    if name in FRAMEWORKS:
        return BUILTIN[f"{name}_pre"]
    raise ConfigError(f"unknown profile {name!r} (known: {', '.join(BUILTIN)})", key=name)


# --------------------------------------------------------------------------
# Text form
# --------------------------------------------------------------------------

def _range_text(lo: int, hi: int) -> str:
    return f"{lo}-{hi}"


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def profile_items(profile: FrameworkProfile) -> list[tuple[str, str]]:
    """Every effective parameter as (key, text) pairs, in canonical order."""
    items: list[tuple[str, str]] = [("framework", profile.framework or profile.name)]
    alloc = profile.allocation
    if isinstance(alloc, RandomPorts):
        items += [("allocation", "random"), ("random_range", _range_text(alloc.range_lo, alloc.range_hi))]
    else:
        items.append(("allocation", "preservation"))
    items.append(("ephemeral_range", _range_text(*profile.ephemeral_range)))
    pol = profile.rst_policy
    if isinstance(pol, InWindow):
        items += [("rst_policy", "inwindow"), ("window", str(pol.window)),
                  ("reduced_timeout_s", _num(pol.reduced_timeout_s)),
                  ("restore_timeout_s", _num(pol.restore_timeout_s))]
    else:
        items.append(("rst_policy", "nocheck" if isinstance(pol, NoCheck) else "strict"))
    t = profile.timeouts
    for key in ("syn_sent_s", "established_s", "close_s", "udp_s", "loose_s"):
        items.append((key, _num(getattr(t, key))))
    items.append(("table_limit", "none" if profile.table_limit is None else str(profile.table_limit)))
    items.append(("loose_instantiation", "true" if profile.loose_instantiation else "false"))
    items.append(("exhaustion", profile.exhaustion.value))
    items.append(("alloc_attempts", "none" if profile.alloc_attempts is None
                  else str(profile.alloc_attempts)))
    items.append(("conn_limit_per_dest", "none" if profile.conn_limit_per_dest is None
                  else str(profile.conn_limit_per_dest)))
    return items


def format_profile(profile: FrameworkProfile) -> str:
    lines = [f"[{profile.name}]"]
    for key, value in profile_items(profile):
        line = f"{key} = {value}"
        if key in profile.unverified:
            line += "  ; unverified: no published value"
        lines.append(line)
    return "\n".join(lines) + "\n"


def dump_profile(name: str) -> str:
    """Canonical config text; a bare framework name dumps both variants."""
    if name in FRAMEWORKS:
        return "\n".join(format_profile(BUILTIN[f"{name}_{v}"]) for v in VARIANTS)
    return format_profile(get_profile(name))


def _parse_int(key: str, text: str, lo: int = 0, hi: Optional[int] = None) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}", key) from None
    if v < lo or (hi is not None and v > hi):
        raise ConfigError(f"{key}: {v} out of range", key)
    return v


def _parse_opt_int(key: str, text: str) -> Optional[int]:
    if text.strip().lower() in ("none", "off", ""):
        return None
    return _parse_int(key, text, 1)


def _parse_float(key: str, text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}", key) from None
    if not v > 0:
        raise ConfigError(f"{key}: must be positive", key)
    return v


def _parse_bool(key: str, text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}", key)


def parse_range(key: str, text: str) -> tuple[int, int]:
    parts = text.replace(" ", "").split("-")
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected lo-hi, got {text!r}", key)
    lo, hi = (_parse_int(key, p, 1, 65535) for p in parts)
    if lo > hi:
        raise ConfigError(f"{key}: empty range {text!r}", key)
    return lo, hi


PROFILE_KEYS = frozenset({
    "base", "framework", "allocation", "random_range", "ephemeral_range", "rst_policy",
    "window", "reduced_timeout_s", "restore_timeout_s", "syn_sent_s", "established_s",
    "close_s", "udp_s", "loose_s", "table_limit", "loose_instantiation", "exhaustion",
    "alloc_attempts", "conn_limit_per_dest",
})


def apply_overrides(profile: FrameworkProfile, values: Mapping[str, str],
                    name: Optional[str] = None) -> FrameworkProfile:
    """Return ``profile`` with textual overrides applied; raises ConfigError naming the key."""
    for key in values:
        if key not in PROFILE_KEYS:
            raise ConfigError(f"unknown profile key {key!r}", key)
    v = {k: str(x).strip() for k, x in values.items() if k != "base"}
    changes: dict = {}

    if "framework" in v:
        if v["framework"] not in FRAMEWORKS:
            raise ConfigError(f"framework: unknown framework {v['framework']!r}", "framework")
        changes["framework"] = v["framework"]
    framework = changes.get("framework", profile.framework)

    alloc = profile.allocation
    if "allocation" in v:
        kind = v["allocation"].lower()
        if kind == "preservation":
            alloc = Preservation()
        elif kind == "random":
            if isinstance(alloc, RandomPorts):
                pass
            elif "random_range" not in v:
                raise ConfigError("allocation: random needs random_range", "random_range")
            else:
                alloc = RandomPorts(*parse_range("random_range", v["random_range"]))
        else:
            raise ConfigError(f"allocation: expected preservation|random, got {kind!r}", "allocation")
    if "random_range" in v:
        if not isinstance(alloc, RandomPorts):
            raise ConfigError("random_range: profile does not use random allocation", "random_range")
        alloc = RandomPorts(*parse_range("random_range", v["random_range"]))
    changes["allocation"] = alloc
    if "ephemeral_range" in v:
        changes["ephemeral_range"] = parse_range("ephemeral_range", v["ephemeral_range"])

    pol = profile.rst_policy
    if "rst_policy" in v:
        kind = v["rst_policy"].lower()
        if kind == "nocheck":
            pol = NoCheck()
        elif kind == "strict":
            pol = Strict()
        elif kind == "inwindow":
            pol = pol if isinstance(pol, InWindow) else InWindow()
        else:
            raise ConfigError(f"rst_policy: expected nocheck|inwindow|strict, got {kind!r}", "rst_policy")
    win_keys = [k for k in ("window", "reduced_timeout_s", "restore_timeout_s") if k in v]
    if win_keys:
        if not isinstance(pol, InWindow):
            raise ConfigError(f"{win_keys[0]}: only meaningful with rst_policy = inwindow", win_keys[0])
        try:
            pol = InWindow(
                _parse_int("window", v["window"], 1) if "window" in v else pol.window,
                _parse_float("reduced_timeout_s", v["reduced_timeout_s"])
                if "reduced_timeout_s" in v else pol.reduced_timeout_s,
                _parse_float("restore_timeout_s", v["restore_timeout_s"])
                if "restore_timeout_s" in v else pol.restore_timeout_s,
            )
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e), win_keys[0]) from None
    changes["rst_policy"] = pol

    tchanges = {}
    for key in ("syn_sent_s", "established_s", "close_s", "udp_s", "loose_s"):
        if key in v:
            tchanges[key] = _parse_float(key, v[key])
    if tchanges:
        changes["timeouts"] = dataclasses.replace(profile.timeouts, **tchanges)
    if "table_limit" in v:
        changes["table_limit"] = _parse_opt_int("table_limit", v["table_limit"])
    if "loose_instantiation" in v:
        changes["loose_instantiation"] = _parse_bool("loose_instantiation", v["loose_instantiation"])
    if "exhaustion" in v:
        kind = v["exhaustion"].lower()
        if kind in ("drop", "droppacket"):
            changes["exhaustion"] = ExhaustionBehavior.DROP_PACKET
        elif kind in ("bypass_nat", "bypassnat"):
            if framework not in _BYPASS_FRAMEWORKS:
                raise ConfigError(f"exhaustion: bypass_nat models the pf/natd bug, not {framework}",
                                  "exhaustion")
            changes["exhaustion"] = ExhaustionBehavior.BYPASS_NAT
        else:
            raise ConfigError(f"exhaustion: expected drop|bypass_nat, got {kind!r}", "exhaustion")
    if "alloc_attempts" in v:
        changes["alloc_attempts"] = _parse_opt_int("alloc_attempts", v["alloc_attempts"])
    if "conn_limit_per_dest" in v:
        changes["conn_limit_per_dest"] = _parse_opt_int("conn_limit_per_dest", v["conn_limit_per_dest"])
    if name is not None:
        changes["name"] = name
    try:
        out = dataclasses.replace(profile, **changes)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    # A value set explicitly to something new is the user's, not a placeholder.
    before = dict(profile_items(profile))
    after = dict(profile_items(out))
    unverified = {k for k in profile.unverified if k in after and before.get(k) == after[k]}
    return dataclasses.replace(out, unverified=frozenset(unverified))


def resolve_profile(name: str, values: Mapping[str, str]) -> FrameworkProfile:
    """Build a profile from a config section called ``name``."""
    base = values.get("base")
    if base is not None:
        start = get_profile(str(base).strip())
    elif name in BUILTIN or name in FRAMEWORKS:
        start = get_profile(name)
    elif "framework" in values:
        fw = str(values["framework"]).strip()
        if fw not in FRAMEWORKS:
            raise ConfigError(f"framework: unknown framework {fw!r}", "framework")
        start = get_profile(fw)
    else:
        raise ConfigError(f"profile {name!r} needs base or framework", "base")
    return apply_overrides(start, values, name=name)


def load_profiles(text: str) -> dict[str, FrameworkProfile]:
    """Parse config text whose every section is a profile."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e), line=getattr(e, "lineno", None)) from None
    return {sec: resolve_profile(sec, dict(cp[sec])) for sec in cp.sections()}

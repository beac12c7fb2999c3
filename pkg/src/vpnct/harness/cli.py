"""Command-line entry point.

    vpnct matrix
    vpnct run <scenario> --seeds 0,1,2
    vpnct dump-profile <name>
    vpnct attack {dos|infer|hijack|dns} [--profile P] [--set section.key=value ...]

``--seed`` and ``--trace FILE`` work before or after the subcommand. Exit
status: 0 when the run completes (whatever the attacks achieved), 1 for
configuration errors, 2 when the simulation breaks one of its own
invariants.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import nullcontext
from typing import Optional, Sequence

from ..netsim import SimError
from ..profiles import ConfigError, dump_profile, profile_names
from . import matrix as mx
from .runner import run_scenario
from .scenario import Sections, Value, find_scenario, load_scenario, parse_seeds, \
    scenario_from_sections

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INTERNAL = 2

# Victim workload and attack settings each `attack` kind starts from.
ATTACK_DEFAULTS: dict[str, dict[str, dict[str, str]]] = {
    "dos": {
        "scenario": {"attack": "dos"},
        "client": {"tcp_sessions": "0", "target_port": "80", "attack_at_s": "0"},
    },
    "infer": {
        "scenario": {"attack": "infer"},
        "client": {"tcp_sessions": "1", "target_port": "21", "request_interval_s": "60"},
    },
    "hijack": {
        "scenario": {"attack": "tcp_hijack"},
        "client": {"tcp_sessions": "1", "target_port": "21", "request_interval_s": "60"},
    },
    "dns": {
        "scenario": {"attack": "dns_hijack"},
        "client": {"tcp_sessions": "0", "dns_queries": "40", "dns_interval_s": "15",
                   "dns_timeout_s": "10", "attack_at_s": "0.5"},
        "resolver": {"muted": "true"},
        "dns": {"rounds": "40", "deadline": "600"},
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # Bad arguments are configuration errors, not internal failures.
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _globals(p: argparse.ArgumentParser, top: bool) -> None:
    d = None if top else argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=0 if top else d,
                   help="RNG seed (default 0)")
    p.add_argument("--trace", metavar="FILE", default=d,
                   help="write the line-delimited event trace here ('-' for stdout)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vpnct", description="VPN connection-tracking attack simulator")
    _globals(p, True)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    m = sub.add_parser("matrix", help="run every attack against every built-in profile")
    _globals(m, False)
    m.add_argument("--profiles", help="comma-separated subset of profiles")
    m.add_argument("--strict-rst", action="store_true", help="defense: strict RST checking")
    m.add_argument("--random-alloc", action="store_true", help="defense: random port selection")
    m.add_argument("--conn-limit", type=int, help="defense: entries per client and destination")
    m.add_argument("--proxy-ports", help="defense: comma-separated ports handled by a proxy")
    m.add_argument("--dns-redirect", action="store_true", help="defense: gateway-owned resolver")
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--json", action="store_true", help="one JSON record per row")

    r = sub.add_parser("run", help="run a scenario file over its seeds")
    _globals(r, False)
    r.add_argument("scenario", help="path, or the name of a shipped scenario")
    r.add_argument("--seeds", help="override the scenario's seeds, e.g. 0-9 or 1,4,7")
    r.add_argument("--workers", type=int, default=1)

    d = sub.add_parser("dump-profile", help="print a profile's effective parameters")
    _globals(d, False)
    d.add_argument("name", help=f"one of {', '.join(profile_names())} or a framework name")

    a = sub.add_parser("attack", help="run one attack in a default world")
    _globals(a, False)
    a.add_argument("kind", choices=sorted(ATTACK_DEFAULTS))
    a.add_argument("--profile", default="netfilter_pre")
    a.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any scenario setting, e.g. exhaust.escalate=true")
    return p


def _attack_sections(kind: str, profile: str, seed: int, sets: Sequence[str]) -> Sections:
    secs: Sections = {}
    for name, body in ATTACK_DEFAULTS[kind].items():
        secs[name] = {k: Value(v) for k, v in body.items()}
    top = secs["scenario"]
    top["profile"] = Value(profile)
    top["seeds"] = Value(str(seed))
    top["name"] = Value(f"attack-{kind}")
    for item in sets:
        key, sep, val = item.partition("=")
        section, dot, field = key.strip().partition(".")
        if not sep or not dot or not field:
            raise ConfigError(f"--set expects section.key=value, got {item!r}", key)
        secs.setdefault(section, {})[field] = Value(val.strip())
    return secs


def _open_trace(path: Optional[str]):
    if path is None:
        return nullcontext(None)
    if path == "-":
        return nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8")


def _cmd_matrix(args, out) -> int:
    knobs = mx.knobs_from_flags(
        strict_rst=args.strict_rst, random_alloc=args.random_alloc, conn_limit=args.conn_limit,
        proxy_ports=[int(x) for x in args.proxy_ports.split(",")] if args.proxy_ports else (),
        dns_redirect=args.dns_redirect)
    names = [n.strip() for n in args.profiles.split(",")] if args.profiles else None
    if names:
        for n in names:
            if n not in profile_names():
                raise ConfigError(f"unknown profile {n!r}", "profiles")
    t0 = time.perf_counter()
    rows = mx.run_matrix(names, knobs, seed=args.seed, workers=args.workers)
    elapsed = time.perf_counter() - t0
    if args.json:
        for row in rows:
            out.write(json.dumps(row.to_dict()) + "\n")
    else:
        out.write(mx.format_matrix(rows))
        out.write(f"elapsed {elapsed:.1f} s\n")
    return EXIT_OK


def _emit_batch(batch, out) -> None:
    for res in batch.results:
        rec = {"seed": res.seed, **res.report.to_dict()}
        out.write(json.dumps(rec, default=_jsonable) + "\n")
    out.write(json.dumps({"scenario": batch.scenario, "summary": batch.summary.to_dict()}) + "\n")


def _jsonable(o):
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    return str(o)


def _cmd_run(args, out) -> int:
    scn = load_scenario(find_scenario(args.scenario))
    seeds = None
    if args.seeds:
        try:
            seeds = parse_seeds(args.seeds)
        except ValueError as e:
            raise ConfigError(f"--seeds: {e}", "seeds") from None
    with _open_trace(getattr(args, "trace", None)) as tr:
        batch = run_scenario(scn, seeds, trace=tr, workers=args.workers)
    _emit_batch(batch, out)
    return EXIT_OK


def _cmd_attack(args, out) -> int:
    scn = scenario_from_sections(_attack_sections(args.kind, args.profile, args.seed, args.sets),
                                 f"attack-{args.kind}")
    with _open_trace(getattr(args, "trace", None)) as tr:
        batch = run_scenario(scn, trace=tr)
    _emit_batch(batch, out)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        if args.cmd == "dump-profile":
            out.write(dump_profile(args.name))
            return EXIT_OK
        if args.cmd == "matrix":
            return _cmd_matrix(args, out)
        if args.cmd == "run":
            return _cmd_run(args, out)
        return _cmd_attack(args, out)
    except (ConfigError, UsageError) as e:
        print(f"vpnct: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimError, AssertionError) as e:
        print(f"vpnct: internal invariant violated: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

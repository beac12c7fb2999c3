"""Scenario parsing, the seed runner and the command line."""

from __future__ import annotations

import io
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vpnct.harness.cli import EXIT_CONFIG, EXIT_INTERNAL, EXIT_OK, main
from vpnct.harness.matrix import run_cell
from vpnct.harness.runner import build_scenario_world, execute, run_scenario
from vpnct.harness.scenario import builtin_scenarios, load_scenario, parse_seeds, \
    scenario_from_text
from vpnct.profiles import ConfigError

BASE = """\
[scenario]
attack = dns_hijack
profile = netfilter_pre
seeds = 0-2

[client]
tcp_sessions = 0
dns_queries = 1
dns_timeout_s = 10
attack_at_s = 0.05

[resolver]
muted = true
"""


@pytest.mark.parametrize("text,key,line", [
    (BASE + "\n[clinet]\nx = 1\n", "clinet", 16),
    (BASE.replace("tcp_sessions = 0", "tcp_session = 0"), "tcp_session", 7),
    (BASE.replace("seeds = 0-2", "seeds = 3-1"), "seeds", 4),
    (BASE.replace("profile = netfilter_pre", "profile = lwip"), "profile", 3),
    (BASE.replace("attack = dns_hijack", "attack = smurf"), "attack", 2),
    (BASE.replace("dns_timeout_s = 10", "dns_timeout_s = soon"), "dns_timeout_s", 9),
    (BASE + "[profile]\nrst_policy = lenient\n", "rst_policy", 15),
    (BASE.replace("muted = true", "muted = maybe"), "muted", 13),
    (BASE.replace("[scenario]\n", "[scenario]\ncolour = red\n"), "colour", 2),
])
def test_errors_name_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as ei:
        scenario_from_text(text)
    assert ei.value.key == key
    assert ei.value.line == line
    assert f"line {line}" in str(ei.value)


def test_key_outside_section():
    with pytest.raises(ConfigError) as ei:
        scenario_from_text("attack = dos\n")
    assert ei.value.line == 1


def test_shipped_scenarios_load():
    names = set(builtin_scenarios())
    assert {"exhaustion", "ftp_frequency", "dns_race", "dns_parallel", "failure_modes"} <= names
    for path in builtin_scenarios().values():
        load_scenario(path)


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=30, unique=True))
def test_parse_seeds_roundtrip(seeds):
    assert parse_seeds(",".join(map(str, seeds))) == seeds


@given(st.integers(0, 500), st.integers(0, 50))
def test_parse_seed_ranges(lo, n):
    assert parse_seeds(f"{lo}-{lo + n}") == list(range(lo, lo + n + 1))


@pytest.mark.parametrize("bad", ["", ",", "1,1", "0-3,2", "5-1", "a"])
def test_parse_seeds_rejects(bad):
    with pytest.raises(ValueError):
        parse_seeds(bad)


def _reports(batch):
    return [(r.seed, r.report.to_json()) for r in batch.results]


def test_same_seeds_same_summary():
    scn = scenario_from_text(BASE)
    a, b = run_scenario(scn), run_scenario(scn)
    assert a.summary == b.summary and _reports(a) == _reports(b)


def test_seeds_are_independent():
    scn = scenario_from_text(BASE)
    fwd = dict(_reports(run_scenario(scn, [0, 1, 2])))
    rev = dict(_reports(run_scenario(scn, [2, 0])))
    assert rev[2] == fwd[2] and rev[0] == fwd[0]


def test_tracing_does_not_change_outcomes():
    scn = scenario_from_text(BASE)
    quiet = _reports(run_scenario(scn, [1]))
    buf = io.StringIO()
    loud = _reports(run_scenario(scn, [1], trace=buf))
    assert quiet == loud
    lines = buf.getvalue().splitlines()
    assert json.loads(lines[0]) == {"run": "scenario", "seed": 1}
    assert len(lines) > 100


def test_traced_matrix_cell_matches_untraced():
    scn = scenario_from_text(BASE.replace("dns_hijack", "tcp_hijack")
                             .replace("tcp_sessions = 0", "tcp_sessions = 1"))
    w = build_scenario_world(scn, 0, record_trace=True)
    traced = execute(scn, w)
    plain = execute(scn, build_scenario_world(scn, 0))
    assert traced.to_json() == plain.to_json()
    assert run_cell("pf_rand", "dos").success == run_cell("pf_rand", "dos").success


def _cli(*argv):
    out = io.StringIO()
    return main(list(argv), out=out), out.getvalue()


def test_cli_dump_profile():
    code, text = _cli("dump-profile", "pf_rand")
    assert code == EXIT_OK and "50001" in text


@pytest.mark.parametrize("argv", [
    ("dump-profile", "lwip"),
    ("matrix", "--profiles", "nope"),
    ("run", "no_such_scenario"),
    ("run", "dns_race", "--seeds", "4-1"),
    ("attack", "dns", "--set", "dns.rate=5"),
    ("attack", "dns", "--set", "norate"),
    ("attack", "smurf"),
    ("frobnicate",),
])
def test_cli_config_errors(argv):
    assert _cli(*argv)[0] == EXIT_CONFIG


def test_cli_internal_error(monkeypatch):
    from vpnct.harness import cli
    from vpnct.netsim import SimError

    def boom(*a, **k):
        raise SimError("clock went backwards")
    monkeypatch.setattr(cli, "run_scenario", boom)
    assert _cli("run", "dns_race", "--seeds", "0")[0] == EXIT_INTERNAL


def test_cli_run_emits_records():
    code, text = _cli("run", "dns_race", "--seeds", "0,3")
    assert code == EXIT_OK
    recs = [json.loads(x) for x in text.splitlines()]
    assert [r["seed"] for r in recs[:2]] == [0, 3]
    assert recs[-1]["summary"]["runs"] == 2


def test_cli_attack_with_overrides(tmp_path):
    trace = tmp_path / "t.jsonl"
    code, text = _cli("attack", "dos", "--profile", "natd_pre", "--seed", "5",
                      "--trace", str(trace), "--set", "exhaust.check_at=1")
    assert code == EXIT_OK
    first = json.loads(text.splitlines()[0])
    assert first["seed"] == 5 and first["success"] is True
    assert trace.read_text().startswith('{"run":"attack-dos","seed":5}')


def test_cli_matrix_subset():
    code, text = _cli("matrix", "--profiles", "ipfw_pre", "--json")
    assert code == EXIT_OK
    row = json.loads(text)
    assert (row["dos"], row["tcp_hijack"], row["dns_hijack"]) == (False, False, True)

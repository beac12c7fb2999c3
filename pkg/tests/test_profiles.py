"""Built-in profiles, their text form and override validation."""

from __future__ import annotations

import pytest

from vpnct.conntrack import ExhaustionBehavior, InWindow, NoCheck, RandomPorts, Strict
from vpnct.profiles import (
    BUILTIN,
    ConfigError,
    apply_overrides,
    dump_profile,
    get_profile,
    load_profiles,
    profile_names,
)


def test_ten_builtins():
    assert len(profile_names()) == 10
    assert get_profile("pf") is get_profile("pf_pre")


def test_netfilter_dump_shows_window_and_timeouts():
    text = dump_profile("netfilter_pre")
    for line in ("window = 65536", "reduced_timeout_s = 10", "restore_timeout_s = 300"):
        assert line in text


def test_pf_dump_shows_range_and_close():
    text = dump_profile("pf")
    assert "random_range = 50001-65535" in text
    assert "close_s = 90" in text


def test_ipfilter_dump_shows_limits():
    text = dump_profile("ipfilter")
    assert "table_limit = 30000" in text and "table_limit = 256" in text


def test_unverified_values_are_flagged():
    text = dump_profile("netfilter_pre")
    flagged = [line for line in text.splitlines() if "unverified" in line]
    assert flagged and all(line.split(" = ")[0] in get_profile("netfilter_pre").unverified
                           for line in flagged)


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_dump_round_trips(name):
    assert load_profiles(dump_profile(name))[name] == get_profile(name)


def test_policies_per_framework():
    assert isinstance(get_profile("netfilter_pre").rst_policy, InWindow)
    assert isinstance(get_profile("pf_pre").rst_policy, NoCheck)
    assert isinstance(get_profile("ipfilter_pre").rst_policy, NoCheck)
    assert isinstance(get_profile("ipfw_pre").rst_policy, Strict)
    assert isinstance(get_profile("natd_pre").rst_policy, Strict)
    assert get_profile("pf_rand").exhaustion is ExhaustionBehavior.BYPASS_NAT
    assert get_profile("ipfw_pre").table_limit == 16384
    alloc = get_profile("natd_rand").allocation
    assert isinstance(alloc, RandomPorts) and (alloc.range_lo, alloc.range_hi) == (32768, 65535)


def test_override_applies():
    p = apply_overrides(get_profile("netfilter_pre"), {"rst_policy": "strict"})
    assert isinstance(p.rst_policy, Strict)


@pytest.mark.parametrize("values,key", [
    ({"bogus": "1"}, "bogus"),
    ({"window": "-5"}, "window"),
    ({"random_range": "9-3"}, "random_range"),
    ({"table_limit": "lots"}, "table_limit"),
    ({"rst_policy": "sometimes"}, "rst_policy"),
])
def test_bad_override_names_key(values, key):
    with pytest.raises(ConfigError) as e:
        apply_overrides(get_profile("netfilter_pre"), values)
    assert e.value.key == key
    assert key in str(e.value)


def test_unknown_profile_named():
    with pytest.raises(ConfigError) as e:
        get_profile("cisco")
    assert "cisco" in str(e.value)

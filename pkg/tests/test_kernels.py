"""The compiled kernels and the NumPy fallback agree everywhere."""

from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpnct import _kernels_py as py
from vpnct import kernels

try:
    from vpnct import _kernels as cy  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - only without a compiler
    cy = None

needs_compiled = pytest.mark.skipif(cy is None, reason="compiled kernels not built")
MODES = [kernels.MODE_NOCHECK, kernels.MODE_INWINDOW, kernels.MODE_STRICT]


def brute_rst(start, stride, lo, hi, expected, window, mode):
    for i in range(lo, hi):
        s = (start + i * stride) & 0xFFFFFFFF
        if mode == kernels.MODE_NOCHECK:
            return i
        if mode == kernels.MODE_STRICT and s == expected:
            return i
        if mode == kernels.MODE_INWINDOW:
            d = (s - expected) & 0xFFFFFFFF
            if min(d, (1 << 32) - d) < window:
                return i
    return hi


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 2**32 - 1), st.integers(0, 300),
       st.integers(0, 300), st.integers(0, 2**32 - 1), st.integers(1, 2**20),
       st.sampled_from(MODES))
def test_rst_next_hit_matches_brute_force(start, stride, lo, span, expected, window, mode):
    hi = lo + span
    want = brute_rst(start, stride, lo, hi, expected, window, mode)
    assert py.rst_next_hit(start, stride, lo, hi, expected, window, mode) == want
    if cy is not None:
        assert cy.rst_next_hit(start, stride, lo, hi, expected, window, mode) == want


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=0, max_size=200), st.integers(0, 20),
       st.data())
def test_first_match(values, target, data):
    arr = np.array(values, dtype=np.uint32)
    lo = data.draw(st.integers(0, len(values)))
    hi = data.draw(st.integers(lo, len(values)))
    want = next((i for i in range(lo, hi) if values[i] == target), hi)
    assert py.first_match(arr, lo, hi, target) == want
    if cy is not None:
        assert cy.first_match(arr, lo, hi, target) == want


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=300), st.floats(0.0, 0.999999),
       st.data())
def test_pick_free_and_count_free(bits, u, data):
    occ = bytearray(1 if b else 0 for b in bits)
    lo = data.draw(st.integers(0, len(bits) - 1))
    hi = data.draw(st.integers(lo, len(bits) - 1))
    free = [i for i in range(lo, hi + 1) if not occ[i]]
    want = free[min(int(u * len(free)), len(free) - 1)] if free else -1
    assert py.pick_free(occ, lo, hi, u) == want
    assert py.count_free(occ, lo, hi) == len(free)
    if cy is not None:
        assert cy.pick_free(occ, lo, hi, u) == want
        assert cy.count_free(occ, lo, hi) == len(free)


@needs_compiled
def test_compiled_backend_selected_by_default():
    if os.environ.get("VPNCT_PURE"):
        pytest.skip("fallback forced in this environment")
    assert kernels.BACKEND == "compiled"


def test_env_var_forces_fallback():
    out = subprocess.run(
        [sys.executable, "-c", "from vpnct import kernels; print(kernels.BACKEND)"],
        env={**os.environ, "VPNCT_PURE": "1"}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"

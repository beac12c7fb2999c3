"""Compare the compiled kernels with the NumPy fallback.

Micro timings call both implementations directly on the same inputs. The
end-to-end timing runs one workload in a child process, once with the default
backend and once with ``VPNCT_PURE=1``.

    python3 benchmarks/bench_kernels.py [--repeat N] [--rounds N] [--no-e2e]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vpnct import _kernels_py
from vpnct._kernels_py import MODE_INWINDOW, MODE_STRICT

try:
    from vpnct import _kernels as _compiled
except ImportError:
    _compiled = None

# Cells that lean on the kernels: RST sweeps, TxID matching, random picks.
E2E = """
import time
from vpnct.harness.matrix import run_cell
from vpnct.kernels import BACKEND
t0 = time.perf_counter()
run_cell("netfilter_pre", "tcp_hijack")
run_cell("netfilter_pre", "dns_hijack")
run_cell("natd_rand", "dos")
print(BACKEND, time.perf_counter() - t0)
"""


def _cases():
    rng = np.random.default_rng(0)
    occupied = np.zeros(65536, dtype=np.uint8)
    occupied[1:60000] = 1  # a nearly full table
    values = rng.integers(0, 65536, 65536).astype(np.uint32)
    target = int(values[-1])
    return {
        # A 60000-stride RST sweep whose one hit sits near the end.
        "rst_next_hit/inwindow": lambda k: k.rst_next_hit(7, 60000, 0, 71583, 60000 * 71000 + 7,
                                                          65536, MODE_INWINDOW),
        "rst_next_hit/strict": lambda k: k.rst_next_hit(7, 1, 0, 1 << 20, (1 << 20) - 1 + 7,
                                                        0, MODE_STRICT),
        "first_match": lambda k: k.first_match(values, 0, len(values), target),
        "pick_free": lambda k: k.pick_free(occupied, 1, 65535, 0.5),
        "count_free": lambda k: k.count_free(occupied, 1, 65535),
    }


def micro(repeat: int) -> None:
    if _compiled is None:
        print("compiled extension not built; micro timings skipped")
        return
    print(f"{'kernel':<24} {'fallback us':>12} {'compiled us':>12} {'speedup':>8}")
    for name, fn in _cases().items():
        assert fn(_kernels_py) == fn(_compiled), name
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=repeat, repeat=3)) / repeat
        cy = min(timeit.repeat(lambda: fn(_compiled), number=repeat, repeat=3)) / repeat
        print(f"{name:<24} {py * 1e6:>12.1f} {cy * 1e6:>12.1f} {py / cy:>7.1f}x")


def e2e(rounds: int) -> None:
    # Alternate backends so machine noise hits both alike; report the best.
    best: dict[str, float] = {}
    for _ in range(rounds):
        for pure in ("0", "1"):
            env = dict(os.environ, VPNCT_PURE=pure)
            out = subprocess.run([sys.executable, "-c", E2E], env=env, check=True,
                                 capture_output=True, text=True).stdout.split()
            best[out[0]] = min(best.get(out[0], float("inf")), float(out[1]))
    print(f"end to end (3 matrix cells, best of {rounds})")
    for backend, secs in best.items():
        print(f"  {backend:<10} {secs:7.2f} s")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--rounds", type=int, default=3, help="end-to-end rounds per backend")
    p.add_argument("--no-e2e", action="store_true")
    args = p.parse_args()
    micro(args.repeat)
    if not args.no_e2e:
        e2e(args.rounds)


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--skip-e2e]

Part one times each loss/gradient kernel on a range of batch shapes. Part two
runs a short federated experiment end to end under each backend (selected
through FEDWARM_BACKEND in a subprocess, since the choice is fixed at import).
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedwarm.kernels import available_backends, get_backend

SHAPES = [  # (batch, input dim, classes, hidden)
    (8, 2, 6, 16),
    (16, 2, 6, 16),
    (64, 10, 10, 32),
    (256, 32, 10, 64),
]

E2E = """
import time
from fedwarm.config import parse_config
from fedwarm.server import run_sessions
from fedwarm.config import prepare_run
cfg = parse_config(dict(dataset_name="gaussian", num_classes=6, num_clients=20, num_sessions=4,
                        num_rounds_actual=30, labels_per_session=3, session_recurrence="3:1",
                        model="{model}", seed=0))
spec, sessions, schedule, settings = prepare_run(cfg)
rounds = [schedule.rounds_in(s) for s in range(schedule.num_sessions)]
tic = time.perf_counter()
run_sessions(spec, sessions, 1, rounds, settings, "proposed")
print(time.perf_counter() - tic)
"""


def bench_kernels(repeat: int) -> None:
    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':<18}{'B':>5}{'d':>4}{'C':>4}{'H':>4}" + "".join(f"{b + ' us':>14}" for b in backends)
          + ("    speedup" if len(backends) == 2 else ""))
    rng = np.random.default_rng(0)
    for B, d, C, H in SHAPES:
        X = rng.normal(size=(B, d))
        y = rng.integers(0, C, B).astype(np.int64)
        cases = {
            "linear_loss_grad": (d * C + C, lambda k, w: k.linear_loss_grad(w, X, y, C)),
            "mlp_loss_grad": (d * H + H + H * C + C, lambda k, w: k.mlp_loss_grad(w, X, y, H, C)),
        }
        for name, (M, call) in cases.items():
            w = rng.normal(scale=0.3, size=M)
            times = []
            for b in backends:
                k = get_backend(b)
                call(k, w)
                t = timeit.Timer(lambda: call(k, w))
                n, _ = t.autorange()
                times.append(min(t.repeat(repeat, n)) / n * 1e6)
            row = f"{name:<18}{B:>5}{d:>4}{C:>4}{H:>4}" + "".join(f"{t:>14.2f}" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>10.2f}x"
            print(row)


def bench_end_to_end() -> None:
    print("\nend to end: 20 clients, 4 sessions x 30 rounds, proposed variant (seconds)")
    for model in ("softmax_linear", "mlp1"):
        cells = []
        for b in available_backends():
            env = dict(os.environ, FEDWARM_BACKEND=b)
            out = subprocess.run([sys.executable, "-c", E2E.format(model=model)], env=env,
                                 capture_output=True, text=True, check=True)
            cells.append(f"{b}={float(out.stdout.strip()):.2f}")
        print(f"  {model:<16}" + "  ".join(cells))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if not args.skip_e2e:
        bench_end_to_end()


if __name__ == "__main__":
    main()

"""Time the compiled and pure-numpy kernel paths on experiment-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Compilation happens in a warm-up call, so the numbers are steady-state.
"""
import argparse
import timeit

import numpy as np

from bandit_control import _kernels as K


def cases(rng):
    T, dx, du, dy, H = 2000, 2, 1, 2, 5
    A = np.array([[0.9, 0.9], [-0.01, 0.9]])
    B = np.array([[0.0], [1.0]])
    C = np.eye(2)
    U = rng.standard_normal((T, du))
    W = rng.standard_normal((T, dx))
    E = rng.standard_normal((T, dy))
    G = rng.standard_normal((H, dy, du))
    ynat = rng.standard_normal((T, dy))
    n = H * du * dy
    Mx = rng.standard_normal((n, n))
    P = Mx @ Mx.T + np.eye(n)
    q = rng.standard_normal(n) * 10
    step = 1.0 / (2 * np.linalg.eigvalsh(P)[-1])
    lin = rng.standard_normal(n) * 1e3
    lo, hi = -np.ones(n), np.ones(n)
    center = np.zeros(n)
    return {
        "lds_rollout (T=2000)": ("lds_rollout", (A, B, C, np.zeros(dx), U, W, E)),
        "markov_convolve (T=2000, H=5)": ("markov_convolve", (G, U)),
        "drc_design (T=2000, H=5)": ("drc_design", (G, ynat, H, du)),
        "moving_average (T=2000, w=50)": ("moving_average", (rng.standard_normal(T), 50)),
        "ball_argmin (n=10)": ("ball_argmin", (lin, 0.5, 0.01, center, 1.0, 200)),
        "box_argmin (n=10)": ("box_argmin", (lin, 0.5, 0.01, lo, hi, 200)),
        "ball_qp_pgd (n=10)": ("ball_qp_pgd", (P, q, 0.5, np.zeros(n), step, 1e-9, 100000)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numba':>12s} {'numpy':>12s} {'speedup':>8s}")
    for label, (name, call_args) in cases(rng).items():
        jit = getattr(K, name + "_jit")
        ref = getattr(K, name + "_np")
        jit(*call_args)  # compile
        times = []
        for fn in (jit, ref):
            timer = timeit.Timer(lambda: fn(*call_args))
            number, _ = timer.autorange()
            times.append(min(timer.repeat(args.repeat, number)) / number)
        print(f"{label:34s} {times[0] * 1e6:10.1f}us {times[1] * 1e6:10.1f}us "
              f"{times[1] / times[0]:7.1f}x")


if __name__ == "__main__":
    main()

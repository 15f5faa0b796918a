"""Fitted vs predicted exponents of the building-block norms over one-parameter sweeps."""
import argparse
import time

from stochmikado.mikado_blocks import BlockParams, mikado_estimate_probe
from stochmikado.spectral_grid import GridSpec

BLOCKS = ("theta", "Q", "W", "W_corr", "A_N")
SWEEPS = {"mu": [1, 2, 4], "nu": [192, 288, 384], "lam": [1, 2, 4], "sigma": [1.0, 2.0, 4.0]}


def table(n=2048, r=2.0, ks=(0, 1), s=12 / 5, N=1, resolution_tol=1e-6):
    grid = GridSpec(2, n, 8)
    base = BlockParams(1, 2, 3.0, 384, s, 0, N)
    rows = []
    for block in BLOCKS:
        for k in ks:
            for param, values in SWEEPS.items():
                b = base.with_(mu=1) if param == "lam" else base
                fit = mikado_estimate_probe(grid, b, block, param, values, k, r, resolution_tol=resolution_tol)
                rows.append(fit)
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2048)
    ap.add_argument("--r", type=float, default=2.0)
    args = ap.parse_args()
    t0 = time.time()
    for fit in table(args.n, args.r):
        tol = 0.1 if fit.k == 0 else 0.2
        print(f"{fit.block:7s} k={fit.k} {fit.param:6s} fitted {fit.fitted:+.4f} predicted {fit.predicted:+.4f} "
              f"{'ok' if fit.error <= tol else 'off'}")
    print(f"{time.time() - t0:.1f} s")

"""Defect-term lambda exponents under a small surrogate power schedule.

The faithful exponents (alpha = 27, ...) cannot be represented on any desk
grid, so this sweeps lam in {1, 2, 4} with mu = 1, nu = nu0 lam, sigma =
sigma0 lam and ell = ell0 / lam, and compares each fitted slope with the
exponent table evaluated at those surrogate powers.
"""
import argparse

from stochmikado.iteration_stage import (PowerSchedule, StageConfig, choose_parameters, defect_exponent_sweep,
                                         initial_stage, make_ensemble)
from stochmikado.spectral_grid import GridSpec

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=512)
ap.add_argument("--n-t", type=int, default=512)
ap.add_argument("--eps", type=float, default=0.08)
ap.add_argument("--diffusion", action="store_true")
args = ap.parse_args()

exps = choose_parameters(2, 1.5, 0, 2)
grid = GridSpec(2, args.n, args.n_t)
tr = initial_stage(2.0, grid, make_ensemble([11, 12], grid, 4.2221, exps.kappa), diffusion=args.diffusion)
schedule = PowerSchedule(alpha=0, beta=1, gamma=1, zeta=1, N=1, nu0=8, sigma0=4, ell0=16 / (args.n_t - 1))
res = defect_exponent_sweep(tr, [1, 2, 4], args.eps, StageConfig(time_stride=32, members=1), schedule)
print(f"{'term':8s} {'fitted':>8s} {'table':>8s}  norms")
for k, slope in res["slopes"].items():
    fitted = "n/a" if slope is None else f"{slope:+.3f}"
    print(f"{k:8s} {fitted:>8s} {res['predicted'][k]:+8.3f}  {['%.3g' % v for v in res['norms'][k]]}")

"""One stage at desk scale with explicit (lam, mu, sigma, nu); prints the contract and term norms."""
import argparse
import time

from stochmikado.brownian import calibrate_L
from stochmikado.iteration_stage import (StageConfig, StageInfeasible, StageParams, choose_parameters,
                                         defect_norm, initial_stage, make_ensemble, run_stage)
from stochmikado.spectral_grid import GridSpec

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=256)
ap.add_argument("--n-t", type=int, default=512)
ap.add_argument("--lam", type=int, default=1)
ap.add_argument("--mu", type=int, default=1)
ap.add_argument("--sigma", type=float, default=4.0)
ap.add_argument("--nu", type=int, default=8)
ap.add_argument("--delta", type=float, default=None, help="default: half the initial defect norm")
ap.add_argument("--seeds", type=int, default=4)
ap.add_argument("--stride", type=int, default=16)
ap.add_argument("--diffusion", action="store_true")
args = ap.parse_args()

exps = choose_parameters(2, 1.5, 0, 2)
grid = GridSpec(2, args.n, args.n_t)
L = calibrate_L(0.9, exps.kappa, n_t=args.n_t)
tr = initial_stage(2.0, grid, make_ensemble(range(args.seeds), grid, L, exps.kappa), diffusion=args.diffusion)
cfg = StageConfig(time_stride=args.stride)
delta = args.delta or 0.5 * defect_norm(tr, args.stride)
params = StageParams(delta=delta, eps=None, ell=4.0 / (args.n_t - 1), lam=args.lam, mu=args.mu,
                     sigma=args.sigma, nu=args.nu, N=1, s=exps.s, kappa=exps.kappa)
t0 = time.time()
try:
    _, rep, _ = run_stage(tr, delta, cfg, params=params)
except StageInfeasible as exc:
    print("infeasible:", exc)
    raise SystemExit(1)
print(f"delta {delta:.4f}  eps {rep.params['eps']:.4f}  passed {rep.passed}  ({time.time() - t0:.0f} s)")
for name, c in rep.contract.items():
    print(f"  {name:18s} {c['value']:.4g}  bound {c['bound']:.4g}")
print(f"  div u {rep.div_u:.2e}  member spread {rep.u_member_spread:.1e}  window {rep.window['holds']}")
for name, v in sorted(rep.breakdown["norms"].items(), key=lambda kv: -kv[1]):
    print(f"  R_{name:8s} {v:.4g}")

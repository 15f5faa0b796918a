"""How the excess ||f g(lam .)||_r - ||f||_r ||g||_r behaves for band-limited pairs.

For r = 2 the excess vanishes once lam exceeds twice the bandwidth of f, so
no power law can be fitted.  For r = 1 the exact excess decays faster than
1/lam, and what remains on the grid is the quadrature error of |g(lam x)|,
which grows with lam.  A finer grid shrinks that floor.
"""
import numpy as np

from stochmikado.spectral_grid import GridSpec, improved_holder_check, random_bandlimited

lams = [8, 16, 32, 64]
for n in (512, 1024):
    grid = GridSpec(2, n, 8)
    rng = np.random.default_rng(505)
    pairs = [(random_bandlimited(grid, rng, 2), random_bandlimited(grid, rng, 3)) for _ in range(10)]
    for r in (1.0, 2.0):
        ex = [np.mean([abs(improved_holder_check(f, g, lam, r).excess) for f, g in pairs]) for lam in lams]
        slope = np.polyfit(np.log(lams), np.log(np.maximum(ex, 1e-300)), 1)[0]
        print(f"n={n} r={r:g}: mean |excess| {['%.2e' % e for e in ex]}  slope {slope:+.2f}")

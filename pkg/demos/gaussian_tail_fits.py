"""Why power-law fits of Stokes exterior norms miss the r2 gate.

Solenoidal data evolve under the Stokes semigroup exactly as under heat flow,
so the exterior norm of a compact bump falls off like a Gaussian.  A log-log
line through a Gaussian has an r2 fixed by the sample window alone.
"""

import numpy as np

from nse_transfer.data import BumpSpec, solenoidal_bump
from nse_transfer.fitting import fit_loglog
from nse_transfer.solver import exterior_norm, stokes_evolve
from nse_transfer.spectral import Grid

for window in ([1, 2, 3, 4], [1, 2, 4, 8], [3, 4, 5, 6]):
    x = np.array(window, dtype=float)
    print(f"window {window}: r2 of a pure Gaussian tail {fit_loglog(x, np.exp(-x**2 / 2))[2]:.3f}")

grid = Grid(3, 16.0, 64)
v0 = solenoidal_bump(grid, BumpSpec(radius=1.0, amplitude=0.01))
u = stokes_evolve(v0, [0.0, 0.5]).slices[1]
radii = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
ys = [exterior_norm(u, 0, 2.0, R) for R in radii]
local = np.diff(np.log(ys)) / np.diff(np.log(radii))
print("measured exterior L2 norms at t = 0.5:", " ".join(f"{y:.2e}" for y in ys))
print("local log-log slopes:", " ".join(f"{s:.1f}" for s in local))

"""Where does a moving hot spot make the amplifier break down?

A single Gaussian hot spot of width 0.1 crosses the unit torus once in unit
time.  Fixed points only see it for a moment, so the straight-path value of
mu is 1.  A path that rides along with the spot collects the full intensity,
and mu jumps to 1/(sigma sqrt(pi)) ~ 5.64.  The critical coupling
lambda_q = 1/(q mu) is therefore set by the moving path.  Growth slopes of
ln|E| in ||s||^2 confirm that value independently, at real, imaginary and
complex mass.
"""

import numpy as np

from ampbreak.lattice import make_time_grid, make_torus_grid, synthesize_modal_set
from ampbreak.moments import estimate_lambda_q
from ampbreak.spectrum import gamma_field, optimize_mu

grid = make_torus_grid(1, [1.0], [128])
times = make_time_grid(1.0, 4000)
modes = synthesize_modal_set(grid, times, "moving-hotspot", width=0.1, velocity=[1.0])
gamma = gamma_field(modes)

report = optimize_mu(gamma, [0.0], method="both", q=(1, 2), restarts=6, seed=1)
print(report.to_text())
print(f"closed form          = {1 / (0.1 * np.sqrt(np.pi)):.6f}")

for mass in (1.0, 1j, 1 + 1j):
    rep = estimate_lambda_q((1, 2), modes, [0.0], mass, None, report=report)
    print(f"m = {mass}: H* = {rep.H_star:.4f}, lambda_1 from slope = {rep.lambda_slope[1]:.5f}, "
          f"from mu = {rep.lambda_q[1]:.5f}")

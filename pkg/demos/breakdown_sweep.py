"""Watching a moment diverge.

For the uniform mode the moment <|E|^q> is 1/(1 - q lam t) exactly, so the
Monte Carlo estimator can be compared directly with the truth as lam
approaches lambda_q = 1/(q t).  Without importance tilting the relative
error blows up before the threshold; the tilted estimator stays usable up to
about c = q lam t = 0.95.  Past the threshold the flag is raised and the
finite sample average has no meaning.
"""

from ampbreak.lattice import make_time_grid, make_torus_grid, synthesize_modal_set
from ampbreak.moments import mc_moment

modes = synthesize_modal_set(make_torus_grid(1, [1.0], [32]), make_time_grid(1.0, 50), "uniform")
q = 1
print(" c      exact     plain (rel SE)      tilted (rel SE)   tail  flag")
for c in (0.2, 0.5, 0.8, 0.9, 0.95, 1.05):
    lam = c / q
    plain = mc_moment(q, lam, 1.0, modes, None, [0.0], 10_000, seed=1)
    tilt = mc_moment(q, lam, 1.0, modes, None, [0.0], 10_000, seed=1, tilt="auto")
    exact = 1 / (1 - c) if c < 1 else float("inf")
    print(f"{c:4.2f} {exact:9.3f} {plain.mean:9.3f} ({plain.std_error / plain.mean:6.1%}) "
          f"{tilt.mean:9.3f} ({tilt.std_error / tilt.mean:6.1%}) "
          f"{plain.tail_index or float('nan'):6.2f}  {tilt.diverged_flag}")

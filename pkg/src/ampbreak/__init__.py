"""Amplifier breakdown in a random potential.

Simulates ``d_t E = (i/2m) Lap E + (lam |S|^2 - i rho) E`` on a periodic box
with a finite-rank Gaussian driver ``S`` and estimates the critical couplings
at which the moments ``<|E|^q>`` blow up.

Modules: :mod:`~ampbreak.lattice` (grids, modes, potentials),
:mod:`~ampbreak.evolve` (split-step solvers, Feynman-Kac oracle),
:mod:`~ampbreak.spectrum` (gamma matrices, path functionals, mu optimization),
:mod:`~ampbreak.moments` (Monte Carlo moments, slope fits, support checks) and
:mod:`~ampbreak.cli` (named experiments).
"""

__version__ = "0.1.0"

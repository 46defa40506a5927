"""The ten acceptance criteria at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL ...`` line; the lines are also
collected into the terminal summary.  Run standalone with
``python tests/test_acceptance.py``.
"""

import numpy as np
import pytest

from ampbreak.evolve import FieldState, feynman_kac_psi, solve_amplifier, solve_psi, step_strang
from ampbreak.lattice import (PotentialSpec, make_time_grid, make_torus_grid,
                              synthesize_modal_set, synthesize_potential)
from ampbreak.moments import (exact_moment_straight, g_support_numeric, growth_slope,
                              mc_moment, mc_moment_joint)
from ampbreak.spectrum import (gamma_field, gram_along_path, h_direction, make_path,
                               nystrom_covariance_eigs, optimize_mu)

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # standalone run
    ACCEPTANCE_LINES = []

pytestmark = pytest.mark.slow

MASSES = (1.0, 1j, 1 + 1j)
GAINS = (2000.0, 4000.0, 8000.0, 16000.0, 32000.0)


def report(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def modal(recipe, n=64, steps=200, t=1.0):
    g = make_torus_grid(1, [1.0], [n])
    tg = make_time_grid(t, steps)
    return g, tg, synthesize_modal_set(g, tg, recipe)


def l2(v, g):
    return float(np.sqrt(np.sum(np.abs(v) ** 2) * g.cell_volume))


# 1 ------------------------------------------------------------------------------------------

def test_criterion_1_uniform_oracle():
    _, tg, ms = modal("uniform", steps=100)
    t = tg.t_end
    parts, ok = [], True
    for k, (q, lt) in enumerate([(1, 0.2), (1, 0.5), (2, 0.4)]):
        lam = lt / t
        est = mc_moment(q, lam, 1.0, ms, None, [0.0], 10_000, seed=100 + k, tilt="auto")
        oracle = 1 / (1 - q * lam * t)
        z = (est.mean - oracle) / est.std_error if est.std_error > 0 else 0.0
        ok &= abs(z) < 3
        parts.append(f"(q={q}, lam t={lt}) z={z:+.2f}")
    report(1, ok, "; ".join(parts))


# 2 ------------------------------------------------------------------------------------------

def test_criterion_2_uniform_mu_exact():
    parts, ok = [], True
    for t in (0.5, 1.0, 2.0):
        _, _, ms = modal("uniform", steps=100, t=t)
        rep = optimize_mu(gamma_field(ms), [0.3], method="both", q=(1, 2, 3), restarts=4,
                          n_iter=500)
        err = max(abs(rep.mu_separable - t), abs(rep.mu_path - t))
        lam_err = max(abs(rep.lambda_q[q] * q * t - 1) for q in (1, 2, 3))
        ok &= err < 1e-6 and lam_err < 1e-12
        parts.append(f"t={t}: |mu-t|={err:.1e}, rel lambda err={lam_err:.1e}")
    report(2, ok, "; ".join(parts))


# 3 ------------------------------------------------------------------------------------------

def test_criterion_3_straight_path_oracle():
    _, _, ms = modal("plane-wave-pair", steps=100)
    x = [0.1]
    G = gram_along_path(gamma_field(ms), make_path([0, 1], [x, x], x))
    mu1 = float(np.linalg.eigvalsh(G)[-1])
    parts, ok = [], True
    for k, c in enumerate((0.2, 0.5, 0.8)):
        lam = c / mu1
        est = mc_moment(1, lam, np.inf, ms, None, x, 10_000, seed=300 + k, tilt="auto")
        exact = exact_moment_straight(1, lam, ms, x)
        z = (est.mean - exact) / est.std_error
        ok &= abs(z) < 3
        parts.append(f"c={c}: z={z:+.2f}")
    report(3, ok, "; ".join(parts))


# 4 and 5 -----------------------------------------------------------------------------------------

def _hotspot_slopes(potential_seeds):
    """Relative slope errors for each mass and potential on the resolved hotspot setup."""
    g, tg, ms = modal("moving-hotspot", n=128, steps=4000)
    gm = gamma_field(ms)
    H = h_direction(gm, [1.0]).value
    mu = optimize_mu(gm, [0.0], method="separable").mu_opt
    radii = np.sqrt(np.asarray(GAINS) / mu)
    out = {}
    for seed in potential_seeds:
        pot = None if seed is None else synthesize_potential(
            g, tg, PotentialSpec("frozen-gaussian", seed=seed))
        for m in MASSES:
            out[(seed, m)] = growth_slope([1.0], radii, 1, 1.0, m, ms, pot, [0.0], H=H)
    return out, H, mu


def test_criterion_4_growth_slope():
    parts, ok = [], True
    _, _, um = modal("uniform", n=64, steps=200)
    for m in MASSES:
        fit = growth_slope([1.0], [1, 2, 4, 8, 16], 2, 0.5, m, um, None, [0.0])
        ok &= abs(fit.relative_error) < 1e-8
        parts.append(f"uniform m={m}: {fit.relative_error:+.1e}")
    fits, H, _ = _hotspot_slopes([None])
    for m in MASSES:
        err = fits[(None, m)].relative_error
        ok &= abs(err) < 0.05
        parts.append(f"hotspot m={m}: {err:+.2%}")
    report(4, ok, f"H={H:.4f}; " + "; ".join(parts))


def test_criterion_5_potential_no_effect():
    seeds = [None, 11, 12, 13]
    fits, H, mu = _hotspot_slopes(seeds)
    parts, ok = [], True
    for m in MASSES:
        base = fits[(None, m)].H_fit
        worst = max(abs(fits[(s, m)].H_fit / base - 1) for s in seeds[1:])
        # lambda_hat from the slope is 1/(q H_fit), so its relative change is the same
        lam_base = 1 / base
        lam_worst = max(abs((1 / fits[(s, m)].H_fit) / lam_base - 1) for s in seeds[1:])
        ok &= worst < 0.05 and lam_worst < 0.05
        parts.append(f"m={m}: slope {worst:.1e}, lambda {lam_worst:.1e} relative")
    # mu_opt depends on the modes only, so the critical coupling 1/(q mu) is potential-free
    report(5, ok, f"mu_hat={mu:.4f}; " + "; ".join(parts))


# 6 ------------------------------------------------------------------------------------------

def test_criterion_6_nystrom_correspondence():
    rng = np.random.default_rng(6)
    worst = 0.0
    for recipe in ("uniform", "plane-wave-pair", "moving-hotspot"):
        _, _, ms = modal(recipe, n=64, steps=255)
        gm = gamma_field(ms)
        for _ in range(5):
            ep = np.array([rng.uniform()])
            kt = np.linspace(0, 1, 8)
            kp = ep + np.cumsum(rng.normal(0, 0.3, (8, 1)), axis=0)
            kp += ep - kp[-1]
            path = make_path(kt, kp, ep)
            ny = nystrom_covariance_eigs(ms, path, n_quad=256)
            gr = np.linalg.eigvalsh(gram_along_path(gm, path))[::-1]
            gr = gr[gr > 1e-10 * gr[0]]
            if ny.size != gr.size:
                worst = np.inf
                continue
            worst = max(worst, float(np.max(np.abs(ny - gr) / gr)))
    report(6, worst < 1e-6, f"max relative eigenvalue difference {worst:.2e} over 15 paths")


# 7 ------------------------------------------------------------------------------------------

def _strang(n_steps, m):
    g = make_torus_grid(1, [1.0], [32])
    tg = make_time_grid(1.0, n_steps)
    x = g.axes()[0]
    st = FieldState(np.exp(1j * np.sin(2 * np.pi * x)), 0.0, np.array(0.0))
    for j in range(n_steps):
        tm = tg.midpoints[j]
        a = -1j * np.cos(2 * np.pi * x) * (1 + tm ** 2) + 0.3 * np.sin(2 * np.pi * x)
        st = step_strang(st, g, m, a, tg.dt)
    return st.physical()


def test_criterion_7_solver_integrity():
    g, tg, ms = modal("plane-wave-pair", steps=400)
    pot = synthesize_potential(g, tg, PotentialSpec("time-dependent-gaussian", seed=7))
    st = solve_amplifier(ms, [1.0, 0.5j], pot, 0.0, 1.0)
    drift = abs(l2(st.physical(), g) - 1.0)

    ratios = []
    for m in (1.0, 1 + 1j):
        ref = _strang(5120, m)
        errs = [np.max(np.abs(_strang(n, m) - ref)) for n in (40, 80, 160)]
        ratios += [errs[0] / errs[1], errs[1] / errs[2]]

    _, tr = solve_amplifier(ms, [1.0, 0.0], pot, 0.0, 0.5 + 1j, trajectory=True)
    norms = np.array([l2(v * np.exp(o), g) for v, o in zip(tr.values, tr.log_offsets)])
    contractive = bool(np.all(np.diff(norms) <= 1e-14 * norms[0]))

    ok = drift < 1e-8 and all(3.5 <= r <= 4.5 for r in ratios) and contractive
    report(7, ok, f"unitarity drift {drift:.1e}; Strang ratios "
                  + ", ".join(f"{r:.2f}" for r in ratios)
                  + f"; contractive={contractive}")


# 8 ------------------------------------------------------------------------------------------

def test_criterion_8_feynman_kac():
    g, tg, ms = modal("moving-hotspot", n=64, steps=200)
    pot = synthesize_potential(g, tg, PotentialSpec("time-dependent-gaussian", seed=8))
    kappa = 0.7
    d = np.array([1.0 + 0j])
    fk = feynman_kac_psi(pot, [0.0], 1.0, 1.0, n_paths=10_000, rng=88,
                         h=lambda a: np.exp(-kappa * a), modal_set=ms, direction=d)
    spec = solve_psi(ms, d, -1j * kappa, pot, 1j, potential_scale=-1j)
    ref = complex(spec.physical()[g.nearest_index([0.0])])
    z = (fk.mean - ref.real) / fk.std_error
    ok = abs(z) < 3 and abs(ref.imag) < 1e-10
    report(8, ok, f"FK {fk.mean:.6f} +- {fk.std_error:.1e}, spectral {ref.real:.6f}, z={z:+.2f}")


# 9 ------------------------------------------------------------------------------------------

def test_criterion_9_g_support():
    g, tg, ms = modal("plane-wave-pair", n=128, steps=1000)
    delta = 0.08
    d = np.array([1.0, 0.0])
    H = h_direction(gamma_field(ms), d).value
    parts, ok = [], True
    for label, pot in [("rho=0", None),
                       ("rho", synthesize_potential(g, tg, PotentialSpec("frozen-gaussian",
                                                                         seed=9)))]:
        r = g_support_numeric(ms, d, 1j, pot, 3 * 2 * np.pi / delta, 512, delta, [0.0])
        edge = r.right_edge_error / delta
        ok &= r.outside_mass < 1e-2 and abs(edge) <= 3 and abs(r.b - H) < 1e-12
        parts.append(f"{label}: outside mass {r.outside_mass:.1e}, right edge {edge:+.2f} delta")
    report(9, ok, f"b={H:.4f}; " + "; ".join(parts))


# 10 -----------------------------------------------------------------------------------------

def test_criterion_10_joint_moment():
    _, _, ms = modal("moving-hotspot", n=64, steps=200)
    mu = optimize_mu(gamma_field(ms), [0.0], method="separable").mu_opt
    spec = PotentialSpec("time-dependent-gaussian")
    lam = 0.8 / mu
    est = mc_moment_joint(1, lam, 1j, ms, spec, [0.0], 20, 500, seed=10, mu_hat=mu, tilt="auto")
    var = est.running_variation(0.5)
    flags = {}
    for f in (0.8, 0.95, 1.05, 1.25):
        e = mc_moment(1, f / mu, 1j, ms, None, [0.0], 100, seed=11, mu_hat=mu)
        flags[f] = e.diverged_flag
    flags_ok = not flags[0.8] and not flags[0.95] and flags[1.05] and flags[1.25]
    ok = var < 0.02 and flags_ok and not est.diverged_flag
    report(10, ok, f"mean {est.mean:.4f} +- {est.std_error:.1e}, running variation "
                   f"{var:.2%} over last half; flags {flags}")


if __name__ == "__main__":
    import sys
    fails = 0
    tests = [(int(name.split("_")[2]), fn) for name, fn in list(globals().items())
             if name.startswith("test_criterion_")]
    for _, fn in sorted(tests, key=lambda item: item[0]):
        try:
            fn()
        except AssertionError:
            fails += 1
    sys.exit(1 if fails else 0)

import numpy as np
import pytest

from ampbreak.lattice import (PotentialSpec, make_time_grid, make_torus_grid,
                              synthesize_modal_set, synthesize_potential)
from ampbreak.moments import (DivergentMomentError, MomentEstimate, auto_tilt,
                              estimate_lambda_q, exact_moment_straight, g_support_numeric,
                              growth_slope, hill_tail_index, mc_moment, mc_moment_joint)


def modal(recipe, n=32, steps=50, t=1.0):
    g = make_torus_grid(1, [1.0], [n])
    return synthesize_modal_set(g, make_time_grid(t, steps), recipe)


def within(est, ref, k=3.0):
    # the rounding term covers zero-variance estimators (tilt equal to c for one mode)
    return abs(est.mean - ref) <= k * est.std_error + 1e-12 * abs(ref)


# --- Monte Carlo moments ----------------------------------------------------------------

@pytest.mark.parametrize("q,lam", [(1, 0.3), (2, 0.15), (3, 0.05)])
def test_uniform_oracle(q, lam):
    ms = modal("uniform")
    est = mc_moment(q, lam, 1.0, ms, None, [0.0], 4000, seed=q)
    assert within(est, 1 / (1 - q * lam))
    assert est.mu_hat == pytest.approx(1.0, abs=1e-6)
    assert not est.diverged_flag and "<" in est.criterion


@pytest.mark.parametrize("beta", [0.3, 0.6])
def test_tilted_estimator_unbiased(beta):
    ms = modal("uniform")
    est = mc_moment(1, 0.6, 1.0, ms, None, [0.0], 4000, seed=3, tilt=beta)
    assert est.tilt == beta
    assert within(est, 1 / (1 - 0.6))


def test_tilt_reduces_error_near_threshold():
    ms = modal("uniform")
    plain = mc_moment(1, 0.7, 1.0, ms, None, [0.0], 4000, seed=1)
    tilted = mc_moment(1, 0.7, 1.0, ms, None, [0.0], 4000, seed=1, tilt="auto")
    assert tilted.std_error < plain.std_error
    assert within(tilted, 1 / 0.3)


def test_auto_tilt_finite_variance():
    assert auto_tilt(0.2) == 0.0
    for c in (0.4, 0.6, 0.8, 0.95):
        b = auto_tilt(c)
        assert 2 * c - 1 < b < 1 and b <= 0.95


def test_invalid_tilt_and_inputs():
    ms = modal("uniform")
    with pytest.raises(ValueError):
        mc_moment(1, 0.1, 1.0, ms, None, [0.0], 1000, 0, tilt=1.0)
    with pytest.raises(ValueError):
        mc_moment(1, 0.1, 1.0, ms, None, [0.0], 99, 0)
    with pytest.raises(ValueError):
        mc_moment(0, 0.1, 1.0, ms, None, [0.0], 1000, 0)
    with pytest.raises(ValueError):
        mc_moment(1, -0.1, 1.0, ms, None, [0.0], 1000, 0)


def test_lambda_zero_is_one_without_potential():
    est = mc_moment(2, 0.0, 1 + 1j, modal("plane-wave-pair"), None, [0.3], 1000, 0)
    assert est.mean == pytest.approx(1.0, abs=1e-13) and est.std_error == 0.0


def test_divergence_flag():
    ms = modal("uniform")
    est = mc_moment(2, 0.6, 1.0, ms, None, [0.0], 500, 0, mu_hat=1.0)
    assert est.diverged_flag and ">=" in est.criterion


def test_running_mean_ends_at_estimate():
    est = mc_moment(1, 0.3, 1.0, modal("uniform"), None, [0.0], 2000, 4, chunk_size=300)
    assert est.running_mean.size == 20
    assert est.running_mean[-1] == pytest.approx(est.mean, rel=1e-12)
    assert est.running_variation() >= 0


def test_deterministic_across_workers():
    ms = modal("plane-wave-pair")
    a = mc_moment(1, 0.3, 1j, ms, None, [0.1], 1200, 11, chunk_size=200, workers=1)
    b = mc_moment(1, 0.3, 1j, ms, None, [0.1], 1200, 11, chunk_size=200, workers=4)
    assert a.log_mean == b.log_mean and a.std_error == b.std_error


def test_csv_row_fields():
    est = mc_moment(1, 0.3, 1.0, modal("uniform"), None, [0.0], 500, 0)
    row = est.csv_row()
    assert {"q", "lambda", "n_samples", "mean", "std_error", "diverged_flag"} <= set(row)
    assert isinstance(est, MomentEstimate)


# --- no-kinetic closed form ---------------------------------------------------------------------

def test_exact_straight_plane_wave():
    ms = modal("plane-wave-pair")
    assert exact_moment_straight(2, 0.2, ms, [0.1]) == pytest.approx(1 / 0.6, rel=1e-9)
    assert exact_moment_straight(2, 0.0, ms, [0.1]) == 1.0
    with pytest.raises(DivergentMomentError):
        exact_moment_straight(2, 0.5, ms, [0.1])


@pytest.mark.parametrize("recipe", ["plane-wave-pair", "moving-hotspot"])
def test_mc_infinite_mass_matches_exact(recipe):
    ms = modal(recipe, n=64)
    lam = 0.3 / exact_eig(ms, [0.2])
    est = mc_moment(1, lam, np.inf, ms, None, [0.2], 4000, 5)
    assert within(est, exact_moment_straight(1, lam, ms, [0.2]))


def exact_eig(ms, x):
    from ampbreak.spectrum import constant_path, gamma_field, gram_along_path
    G = gram_along_path(gamma_field(ms), constant_path(x, ms.time_grid.t_end))
    return np.linalg.eigvalsh(G)[-1]


# --- joint potential/coefficient moments ----------------------------------------------------------

def test_joint_zero_potential_oracle():
    ms = modal("uniform")
    est = mc_moment_joint(1, 0.3, 1.0, ms, PotentialSpec("zero"), [0.0], 5, 800, seed=2)
    assert est.n_outer == 5 and est.running_mean.size == 5 and est.n_samples == 4000
    assert within(est, 1 / 0.7, k=4)


def test_joint_deterministic():
    ms = modal("uniform", steps=20)
    spec = PotentialSpec("frozen-gaussian", amplitude=0.3)
    a = mc_moment_joint(1, 0.2, 1.0, ms, spec, [0.0], 3, 200, seed=9)
    b = mc_moment_joint(1, 0.2, 1.0, ms, spec, [0.0], 3, 200, seed=9)
    assert a.log_mean == b.log_mean


def test_lambda_zero_with_potential_factorizes_for_uniform_mode():
    # with a single uniform mode |E| does not depend on rho's effect through s
    g = make_torus_grid(1, [1.0], [32])
    tg = make_time_grid(1.0, 100)
    ms = synthesize_modal_set(g, tg, "uniform")
    pot = synthesize_potential(g, tg, PotentialSpec("frozen-gaussian", seed=1))
    base = mc_moment(1, 0.0, 1.0, ms, pot, [0.0], 500, 0).mean
    est = mc_moment(1, 0.3, 1.0, ms, pot, [0.0], 2000, 0)
    assert est.mean / base == pytest.approx(1 / 0.7, rel=3 * est.std_error / est.mean)


# --- tails --------------------------------------------------------------------------------------

def test_hill_tail_index_pareto():
    rng = np.random.default_rng(0)
    logv = np.log(rng.pareto(3.0, 200_000) + 1.0)
    assert hill_tail_index(logv) == pytest.approx(3.0, rel=0.1)
    assert hill_tail_index(logv[:10]) is None


# --- slopes -------------------------------------------------------------------------------------

@pytest.mark.parametrize("m", [1.0, 1j, np.inf])
def test_growth_slope_uniform_exact(m):
    ms = modal("uniform", t=0.8)
    fit = growth_slope([1.0], [1, 2, 4, 8], 2, 0.5, m, ms, None, [0.0])
    assert fit.H == pytest.approx(0.8)
    assert fit.slope == pytest.approx(2 * 0.5 * 0.8, rel=1e-10)
    assert fit.r2 == pytest.approx(1.0) and not fit.flagged
    assert abs(fit.relative_error) < 1e-10


def test_growth_slope_validates_radii():
    with pytest.raises(ValueError):
        growth_slope([1.0], [1, 2, 2, 3], 1, 1.0, 1.0, modal("uniform"), None, [0.0])


def test_estimate_lambda_uniform():
    rep = estimate_lambda_q((1, 2), modal("uniform", t=0.5), [0.0], 1.0, None)
    assert rep.lambda_slope[1] == pytest.approx(2.0, rel=1e-8)
    assert rep.lambda_slope[2] == pytest.approx(1.0, rel=1e-8)
    assert rep.lambda_q[2] == pytest.approx(1.0, rel=1e-6)


# --- g support --------------------------------------------------------------------------------------

def test_g_support_uniform_is_point_mass():
    delta = 0.08
    r = g_support_numeric(modal("uniform"), [1.0], 1.0, None, 3 * 2 * np.pi / delta, 512, delta,
                          [0.0])
    assert r.a == r.b == pytest.approx(1.0)
    du = r.u[1] - r.u[0]
    assert abs(r.u[np.argmax(np.abs(r.g))] - 1.0) <= du
    # a unit Gaussian of width delta leaves 0.27% outside +-3 delta
    assert r.outside_mass == pytest.approx(0.0027, abs=5e-4)
    assert r.right_edge - 1.0 == pytest.approx(np.sqrt(2 * np.log(1e3)) * delta, abs=2 * du)


def test_g_support_argument_checks():
    ms = modal("uniform")
    with pytest.raises(ValueError):
        g_support_numeric(ms, [1.0], 1.0, None, 200.0, 128, 0.08, [0.0])
    with pytest.raises(ValueError):
        g_support_numeric(ms, [1.0], 1.0, None, 50.0, 512, 0.08, [0.0])
    with pytest.raises(ValueError, match="window too narrow"):
        g_support_numeric(ms, [1.0], 1.0, None, 2000.0, 256, 0.08, [0.0])


@pytest.mark.parametrize("recipe,m", [("uniform", 1j), ("moving-hotspot", 1j),
                                      ("moving-hotspot", 1.0)])
def test_g_outside_mass_decreases_with_eta_max(recipe, m):
    ms = modal(recipe, n=64, steps=200)
    delta = 0.08
    vals = [g_support_numeric(ms, [1.0], m, None, f * 2 * np.pi / delta, 1024, delta,
                              [0.0]).outside_mass for f in (1.02, 1.2, 1.5, 2.0, 3.0)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


# --- invariance statements ----------------------------------------------------------------------

def test_divergence_flag_monotone_in_lambda():
    ms = modal("uniform")
    flags = [mc_moment(2, lam, 1.0, ms, None, [0.0], 100, 0, mu_hat=1.0).diverged_flag
             for lam in np.linspace(0.1, 1.0, 10)]
    assert flags == sorted(flags) and flags[-1] and not flags[0]


@pytest.mark.slow
def test_slope_invariant_across_masses():
    g = make_torus_grid(1, [1.0], [128])
    tg = make_time_grid(1.0, 4000)
    ms = synthesize_modal_set(g, tg, "moving-hotspot")
    radii = np.sqrt(np.array([2000.0, 4000.0, 8000.0, 16000.0, 32000.0]) / 5.64)
    slopes = [growth_slope([1.0], radii, 1, 1.0, m, ms, None, [0.0]).slope
              for m in (1.0, 2j, 1 + 1j)]
    assert (max(slopes) - min(slopes)) / max(slopes) < 0.05


# --- further operation examples ----------------------------------------------------------------

def test_uniform_above_threshold_flagged():
    est = mc_moment(1, 1.1, 1.0, modal("uniform"), None, [0.0], 200, 0)
    assert est.diverged_flag


def test_joint_lambda_zero_is_one():
    est = mc_moment_joint(2, 0.0, 1j, modal("uniform"), PotentialSpec("zero"), [0.0], 3, 100, 0)
    assert est.mean == 1.0 and est.std_error == 0.0


def test_joint_uniform_frozen_rho_is_a_phase_without_kinetics():
    ms = modal("uniform")
    spec = PotentialSpec("frozen-gaussian", amplitude=2.0)
    with_rho = mc_moment_joint(1, 0.3, np.inf, ms, spec, [0.0], 4, 1000, seed=4)
    without = mc_moment_joint(1, 0.3, np.inf, ms, PotentialSpec("zero"), [0.0], 4, 1000, seed=4)
    assert abs(with_rho.mean - without.mean) < 1e-12 * without.mean
    assert with_rho.mean >= 1


def test_exact_straight_examples():
    assert exact_moment_straight(1, 0.5, modal("uniform"), [0.0]) == pytest.approx(2.0)
    assert exact_moment_straight(1, 0.5, modal("plane-wave-pair"), [0.37]) == pytest.approx(2.0)


def test_lambda_plane_wave_both_methods():
    rep = estimate_lambda_q(1, modal("plane-wave-pair", n=64, steps=200), [0.0], 1.0, None)
    assert rep.lambda_q[1] == pytest.approx(1.0, rel=0.02)
    assert rep.lambda_slope[1] == pytest.approx(1.0, rel=0.02)


@pytest.mark.slow
def test_lambda_hotspot_slope_lower_bound():
    g = make_torus_grid(1, [1.0], [128])
    ms = synthesize_modal_set(g, make_time_grid(1.0, 4000), "moving-hotspot")
    rep = estimate_lambda_q(1, ms, [0.0], 1j, None)
    assert rep.lambda_slope[1] >= rep.lambda_q[1] * 0.95

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from merf_sae.exceptions import ConfigError
from merf_sae.mixed import (RandomEffects, VarianceComponents, blup, blup_matrix,
                            fit_variance_components, gll, loglik, shrinkage)


def balanced_ml_oracle(e, D, m):
    """Textbook ML for a balanced one-way layout with known zero mean.

    The likelihood factorizes into a within part in sigma2_eps and a between
    part in lambda = sigma2_eps + m sigma2_v, each maximized in closed form;
    if lambda < sigma2_eps the maximum lies on the boundary sigma2_v = 0.
    """
    E = e.reshape(D, m)
    ebar = E.mean(axis=1)
    ssw = np.sum((E - ebar[:, None]) ** 2)
    s2e = ssw / (D * (m - 1))
    lam = m * np.sum(ebar ** 2) / D
    if lam >= s2e:
        return (lam - s2e) / m, s2e
    return 0.0, (ssw + m * np.sum(ebar ** 2)) / (D * m)


def grouped(D, m):
    return np.repeat([f"area{i}" for i in range(D)], m)


@pytest.mark.parametrize("seed", range(6))
def test_balanced_anova_oracle(seed):
    rng = np.random.default_rng(seed)
    D, m = 5, 20
    sd_v = [0.0, 0.3, 1.0, 2.0, 0.1, 5.0][seed]
    e = np.repeat(rng.normal(0, sd_v, D), m) + rng.normal(0, 1.0, D * m)
    s2v, s2e = balanced_ml_oracle(e, D, m)
    vc = fit_variance_components(np.zeros_like(e), e, grouped(D, m))
    assert vc.sigma2_v == pytest.approx(s2v, rel=1e-6, abs=1e-9)
    assert vc.sigma2_eps == pytest.approx(s2e, rel=1e-6)


def test_offset_is_subtracted_with_coefficient_one():
    rng = np.random.default_rng(1)
    area = grouped(6, 10)
    offset = rng.normal(0, 50, 60)
    e = np.repeat(rng.normal(size=6), 10) + rng.normal(size=60)
    a = fit_variance_components(offset, offset + e, area)
    b = fit_variance_components(np.zeros(60), e, area)
    # (offset + e) - offset differs from e in the last bits only
    assert a.sigma2_v == pytest.approx(b.sigma2_v, rel=1e-6)
    assert a.sigma2_eps == pytest.approx(b.sigma2_eps, rel=1e-6)


def test_unbalanced_matches_numeric_maximum():
    rng = np.random.default_rng(2)
    n_i = [1, 3, 7, 15, 2, 30]
    area = np.repeat([f"a{i}" for i in range(6)], n_i)
    e = np.repeat(rng.normal(0, 1.5, 6), n_i) + rng.normal(0, 1, sum(n_i))
    vc = fit_variance_components(np.zeros_like(e), e, area)

    def neg(t):
        return -loglik(e, area, VarianceComponents(np.exp(t[0]), np.exp(t[1])))

    res = optimize.minimize(neg, x0=[0.0, 0.0], method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    assert vc.loglik == pytest.approx(-res.fun, abs=1e-7)
    assert vc.loglik >= -res.fun - 1e-9
    assert vc.loglik == pytest.approx(loglik(e, area, vc), rel=1e-12)


def test_zero_between_area_signal_hits_boundary():
    rng = np.random.default_rng(3)
    area = grouped(30, 200)
    e = rng.normal(size=area.size)
    vc = fit_variance_components(np.zeros_like(e), e, area)
    assert vc.sigma2_v < 0.01
    # explicit boundary: area means all exactly zero
    e0 = (rng.normal(size=(10, 5)) - rng.normal(size=(10, 5)).mean(axis=1, keepdims=True))
    e0 = (e0 - e0.mean(axis=1, keepdims=True)).ravel()
    vc0 = fit_variance_components(np.zeros_like(e0), e0, grouped(10, 5))
    assert vc0.sigma2_v == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
def test_scale_consistency(seed, c):
    rng = np.random.default_rng(seed)
    area = grouped(5, 8)
    e = np.repeat(rng.normal(size=5), 8) + rng.normal(size=40)
    a = fit_variance_components(np.zeros(40), e, area)
    b = fit_variance_components(np.zeros(40), c * e, area)
    assert b.sigma2_eps == pytest.approx(c * c * a.sigma2_eps, rel=1e-6)
    assert b.sigma2_v == pytest.approx(c * c * a.sigma2_v, rel=1e-5, abs=1e-12 * c * c)


def test_variance_fit_errors():
    with pytest.raises(ConfigError):
        fit_variance_components(np.zeros(4), np.ones(4), ["a"] * 4)
    with pytest.raises(ConfigError, match="jitter"):
        fit_variance_components(np.zeros(4), np.full(4, 3.0), ["a", "a", "b", "b"])
    with pytest.raises(ConfigError):
        fit_variance_components(np.array([0, np.nan, 0, 0]), np.ones(4), ["a", "a", "b", "b"])
    with pytest.raises(ConfigError):
        VarianceComponents(sigma2_v=-1.0, sigma2_eps=1.0)
    with pytest.raises(ConfigError):
        VarianceComponents(sigma2_v=1.0, sigma2_eps=0.0)
    with pytest.raises(ConfigError):
        VarianceComponents(sigma2_v=1.0, sigma2_eps=1.0, sigma2_bc=2.0)


def test_blup_examples():
    vc0 = VarianceComponents(0.0, 1.0)
    assert np.all(blup([1.0, 2.0, -3.0], ["a", "b", "b"], vc0).v_hat == 0.0)
    one = blup([2.0], ["a"], VarianceComponents(1.0, 1.0))
    assert one.v_hat[0] == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_blup_closed_form_equals_matrix_form(seed):
    rng = np.random.default_rng(seed)
    D = int(rng.integers(2, 11))
    n_i = rng.integers(1, 21, D)
    area = np.repeat([f"a{i}" for i in range(D)], n_i)
    area = area[rng.permutation(area.size)]
    e = rng.normal(size=area.size) * 3
    vc = VarianceComponents(float(rng.uniform(0.01, 4)), float(rng.uniform(0.1, 4)))
    a, b = blup(e, area, vc), blup_matrix(e, area, vc)
    assert list(a.labels) == list(b.labels)
    np.testing.assert_allclose(a.v_hat, b.v_hat, rtol=0, atol=1e-10)


def test_blup_is_numeric_gll_minimizer():
    rng = np.random.default_rng(11)
    area = np.repeat(["a", "b", "c"], [2, 5, 9])
    e = rng.normal(size=16) + np.repeat([1.0, -2.0, 0.5], [2, 5, 9])
    vc = VarianceComponents(0.8, 1.3)
    closed = blup(e, area, vc)
    matrix = blup_matrix(e, area, vc)

    def crit(v):
        return gll(e, RandomEffects(closed.labels, np.asarray(v)), vc, area)

    # coordinate-wise grid refinement (the criterion separates over areas)
    v = np.zeros(3)
    for k in range(3):
        lo, hi = -10.0, 10.0
        for _ in range(40):
            grid = np.linspace(lo, hi, 21)
            vals = []
            for g in grid:
                trial = v.copy()
                trial[k] = g
                vals.append(crit(trial))
            j = int(np.argmin(vals))
            v[k] = grid[j]
            step = grid[1] - grid[0]
            lo, hi = grid[j] - step, grid[j] + step
    np.testing.assert_allclose(closed.v_hat, matrix.v_hat, atol=1e-10)
    np.testing.assert_allclose(closed.v_hat, v, atol=1e-8)


def test_gll_examples():
    zero = RandomEffects(np.array(["a", "b"], dtype=object), np.zeros(2))
    unit = VarianceComponents(1.0, 1.0)
    assert gll([0.0, 0.0], zero, unit, ["a", "b"]) == 0.0
    assert gll([1.0, 1.0], zero, unit, ["a", "b"]) == pytest.approx(2.0)


def test_gll_by_hand():
    area = ["a", "a", "b"]
    e = np.array([1.0, 3.0, -2.0])
    v = RandomEffects(np.array(["a", "b"], dtype=object), np.array([1.5, -1.0]))
    vc = VarianceComponents(2.0, 0.5)
    hand = ((-0.5) ** 2 + 1.5 ** 2 + (-1.0) ** 2) / 0.5 + 3 * np.log(0.5) \
        + (1.5 ** 2 + 1.0) / 2.0 + 2 * np.log(2.0)
    assert gll(e, v, vc, area) == pytest.approx(hand, rel=1e-14)
    # boundary convention: v forced to 0 and the sigma2_v terms dropped
    vc0 = VarianceComponents(0.0, 0.5)
    assert gll(e, v, vc0, area) == pytest.approx(np.sum(e ** 2) / 0.5 + 3 * np.log(0.5))


def test_blup_beats_random_perturbations():
    rng = np.random.default_rng(4)
    D = 7
    n_i = rng.integers(1, 12, D)
    area = np.repeat([f"a{i}" for i in range(D)], n_i)
    e = rng.normal(size=area.size) + np.repeat(rng.normal(size=D), n_i)
    vc = VarianceComponents(0.9, 1.1)
    best = blup(e, area, vc)
    at_best = gll(e, best, vc, area)
    for _ in range(1000):
        scale = 10 ** rng.uniform(-4, 1)
        other = RandomEffects(best.labels, best.v_hat + rng.normal(0, scale, D))
        assert at_best <= gll(e, other, vc, area)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.floats(0.0, 10.0), st.floats(0.01, 10.0))
def test_shrinkage_bounds_and_monotonicity(n, s2v, s2e):
    vc = VarianceComponents(s2v, s2e)
    k = shrinkage([n, n + 1], vc)
    assert 0.0 <= k[0] <= k[1] <= 1.0
    more = shrinkage([n], VarianceComponents(s2v * 2 + 0.1, s2e))
    assert more[0] >= k[0]


def test_random_effects_lookup():
    v = RandomEffects(np.array(["x", "y"], dtype=object), np.array([0.5, -1.0]))
    assert v.get("y") == -1.0
    assert v.get("unseen") == 0.0
    assert v.as_dict() == {"x": 0.5, "y": -1.0}

import math

import numpy as np
import pytest
from scipy import stats

from dpsde.privacy import (
    PrivacyParams,
    calibrate_sigma_analytic,
    clip,
    epsilon_from_sigma_analytic,
    epsilon_of_sigma_rdp,
    epsilon_star,
    phi,
    privatize,
    rdp_sampled_gaussian,
    steps_for_epochs,
)


def test_clip_examples():
    assert np.allclose(clip(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
    assert np.array_equal(clip(np.array([3.0, 4.0]), 10.0), [3.0, 4.0])
    assert np.array_equal(clip(np.zeros(2), 2.0), np.zeros(2))
    with pytest.raises(ValueError):
        clip(np.ones(2), 0.0)


def test_clip_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.standard_normal(5) * rng.choice([0.1, 1.0, 10.0])
        c = rng.uniform(0.2, 3.0)
        y = clip(x, c)
        assert np.linalg.norm(y) <= min(np.linalg.norm(x), c) + 1e-12
        assert np.array_equal(clip(y, c), y)  # idempotent
        lam = rng.uniform(0.1, 5.0)
        z = clip(lam * x, c)
        if np.linalg.norm(x) > 0:
            cos = z @ x / (np.linalg.norm(z) * np.linalg.norm(x) + 1e-300)
            assert cos > 1 - 1e-9  # stays parallel to x


def test_privatize_exact_and_errors():
    rng = np.random.default_rng(1)
    s = np.array([2.0, -4.0])
    assert np.array_equal(privatize(s, 2, 1.0, 0.0, rng), s / 2)
    with pytest.raises(ValueError):
        privatize(s, 0, 1.0, 1.0, rng)
    with pytest.raises(ValueError):
        privatize(s, 2, 1.0, -0.1, rng)


def test_privatize_covariance():
    rng = np.random.default_rng(2)
    B, C, sigma = 3, 2.0, 0.7
    s = np.array([1.0, 2.0, 3.0, 4.0])
    draws = privatize(np.broadcast_to(s, (10**6, 4)), B, C, sigma, rng) - s / B
    target = (C * sigma / B) ** 2
    assert np.allclose(draws.var(axis=0), target, rtol=0.02)


def test_privatize_standard_normal_ks():
    rng = np.random.default_rng(3)
    s = np.zeros(1)
    out = privatize(np.broadcast_to(s, (10**5, 1)), 1, 1.0, 1.0, rng)
    assert stats.kstest(out[:, 0], "norm").pvalue > 0.01


def test_phi_examples():
    assert phi(64 / 25000, 1e-5) == pytest.approx(0.0086862, abs=1e-6)
    assert phi(0.5, 1 - 1e-12) == pytest.approx(0.0, abs=1e-5)  # delta -> 1 limit
    assert phi(0.0, 1e-5) == 0.0


def test_calibrate_analytic():
    sigma = calibrate_sigma_analytic(1.0, 1e-5, 0.01, 10**4)
    assert sigma == pytest.approx(math.sqrt(math.log(1e5)), rel=1e-9)
    # 1/eps and sqrt(T) homogeneity, exact
    assert calibrate_sigma_analytic(2.0, 1e-5, 0.01, 10**4) == sigma / 2
    assert calibrate_sigma_analytic(1.0, 1e-5, 0.01, 4 * 10**4) == 2 * sigma
    with pytest.raises(ValueError):
        calibrate_sigma_analytic(0.0, 1e-5, 0.01, 100)


def test_analytic_round_trip_exact():
    for eps in (0.1, 0.5, 1.0, 3.0, 10.0):
        sigma = calibrate_sigma_analytic(eps, 1e-6, 0.004, 2500)
        back = math.sqrt(2500) * phi(0.004, 1e-6) / sigma
        assert back == eps  # exact, not approx
        assert epsilon_from_sigma_analytic(sigma, 1e-6, 0.004, 2500) == eps


def test_rdp_plain_gaussian_reduction():
    for alpha in (2, 8, 64):
        assert rdp_sampled_gaussian(1.0, 1.3, alpha) == pytest.approx(
            alpha / (2 * 1.3**2), rel=1e-12
        )
    # conversion from the q=1 curve stays below the minimum over orders
    eps = epsilon_of_sigma_rdp(1.3, 1e-5, 1.0, 1)
    direct = min(
        a / (2 * 1.3**2) + math.log(1e5) / (a - 1) for a in range(2, 257)
    )
    assert eps == pytest.approx(direct, rel=1e-12)


def test_rdp_monotonicity():
    q, delta, T = 0.01, 1e-5, 1000
    sig = [epsilon_of_sigma_rdp(s, delta, q, T) for s in (0.8, 1.0, 1.5, 2.0)]
    assert all(a > b for a, b in zip(sig, sig[1:]))  # decreasing in sigma
    ts = [epsilon_of_sigma_rdp(1.0, delta, q, t) for t in (100, 1000, 10000)]
    assert all(a < b for a, b in zip(ts, ts[1:]))  # increasing in T
    qs = [epsilon_of_sigma_rdp(1.0, delta, qq, T) for qq in (0.005, 0.01, 0.05)]
    assert all(a < b for a, b in zip(qs, qs[1:]))  # increasing in q
    assert math.isinf(epsilon_of_sigma_rdp(0.0, delta, q, T))


def test_epsilon_star_examples():
    assert math.isinf(epsilon_star(5.0, 100, 64, 1000, 8.0, 1e-5))  # sigma^2 = B
    assert math.isinf(epsilon_star(5.0, 100, 64, 1000, 9.0, 1e-5))
    val = epsilon_star(5.0, 100, 64, 1000, 1.0, 1e-5)
    assert val == pytest.approx(0.1710, abs=2e-4)


def test_epsilon_star_monotone_direction_matches_symbolic():
    # the sign of d eps*/dB from sympy is the oracle for the grid direction
    import sympy as sp

    C, T, B, n, sg, delta = sp.symbols("C T B n sigma delta", positive=True)
    expr = sp.sqrt(C**2 * T * B * sp.log(1 / delta) / (n**2 * (B - sg**2)))
    dB = sp.diff(expr, B)
    point = {C: 5.0, T: 100, n: 1000, sg: 1.0, delta: 1e-5}
    values = []
    for b in (48, 56, 64, 72, 80):
        sign_symbolic = sp.sign(dB.subs({**point, B: b}))
        assert sign_symbolic == -1
        values.append(epsilon_star(5.0, 100, b, 1000, 1.0, 1e-5))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_privacy_params_consistency():
    p = PrivacyParams(delta=1e-5, n=1000, batch_size=50, steps=400,
                      clip_threshold=1.0, epsilon=2.0)
    assert p.q == 50 / 1000
    assert p.phi == pytest.approx(p.q * math.sqrt(math.log(1e5)), rel=1e-15)
    assert math.sqrt(p.steps) * p.phi / p.sigma_dp == pytest.approx(2.0, rel=1e-12)
    # privatize noise scale follows the exact 1/eps law
    p2 = PrivacyParams(delta=1e-5, n=1000, batch_size=50, steps=400,
                       clip_threshold=1.0, epsilon=4.0)
    assert p2.sigma_dp == pytest.approx(p.sigma_dp / 2, rel=1e-12)
    with pytest.raises(ValueError):
        PrivacyParams(delta=1e-5, n=10, batch_size=20, steps=1, clip_threshold=1.0,
                      sigma_dp=1.0)


def test_steps_for_epochs():
    assert steps_for_epochs(25000, 64, 100) == 391 * 100
    assert steps_for_epochs(246092, 64, 50) == 3846 * 50

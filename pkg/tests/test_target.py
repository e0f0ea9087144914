import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from cmflow import diffcore as dc
from cmflow import target as tg


def random_spd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + d * np.eye(d)


def test_wishart_scalar_and_identity():
    t = tg.GGMTarget(np.array([[3.0]]), n=7)
    w = 2.5
    assert tg.wishart_loglik(np.array([[math.sqrt(w)]]), t) == pytest.approx(3.5 * math.log(w) - 1.5 * w)
    S = random_spd(np.random.default_rng(0), 3)
    t = tg.GGMTarget(S, n=4)
    assert tg.wishart_loglik(np.eye(3), t) == pytest.approx(-0.5 * np.trace(S))


def test_posterior_d3_dense_formula(rng):
    S = random_spd(rng, 3)
    W = random_spd(rng, 3) / 3
    n, lam, q = 9, 1.7, 0.6
    t = tg.GGMTarget(S, n)
    dense = (0.5 * n * math.log(np.linalg.det(W)) - 0.5 * np.trace(W @ S)
             - 0.5 * lam * np.trace(W) + 3 * math.log(lam / 2))
    for i in range(3):
        for j in range(i + 1, 3):
            dense += (math.log(q) + math.log(lam) / q - math.log(2) - math.lgamma(1 / q)
                      - lam * abs(W[i, j]) ** q)
    assert tg.unnorm_log_posterior(W, t, lam, q) == pytest.approx(dense, abs=1e-12 * abs(dense) + 1e-12)


def test_laplace_and_gaussian_constants():
    assert tg.gen_normal_log_const(2.3, 1.0) == pytest.approx(math.log(2.3 / 2))
    assert tg.gen_normal_logpdf(0.0, 1.0, 2.0) == pytest.approx(-0.5 * math.log(math.pi))


@pytest.mark.parametrize("q", [0.25, 0.5, 1.0, 2.0])
@pytest.mark.parametrize("lam", [0.5, 3.0])
def test_gen_normal_normalized(q, lam):
    f = lambda x: math.exp(tg.gen_normal_logpdf(x, lam, q))  # noqa: E731
    half, _ = quad(f, 0, np.inf, limit=400, epsabs=1e-13, epsrel=1e-12)
    assert 2 * half == pytest.approx(1.0, abs=1e-6)


def test_bgl_reduction_q1(rng):
    S = random_spd(rng, 3)
    W = random_spd(rng, 3) / 3
    t = tg.GGMTarget(S, 5)
    lam = 0.8
    iu = np.triu_indices(3, 1)
    bgl = (2.5 * np.linalg.slogdet(W)[1] - 0.5 * np.trace(S @ W) - 0.5 * lam * np.trace(W)
           + 3 * math.log(lam / 2) + np.sum(math.log(lam / 2) - lam * np.abs(W[iu])))
    assert tg.unnorm_log_posterior(W, t, lam, 1.0) == pytest.approx(bgl, rel=1e-12)


def test_small_lambda_bound(rng):
    S = random_spd(rng, 3)
    W = random_spd(rng, 3) / 3
    t = tg.GGMTarget(S, 5)
    lam, q = 1e-4, 0.7
    iu = np.triu_indices(3, 1)
    prior_const = 3 * (math.log(q) + math.log(lam) / q - math.log(2) - math.lgamma(1 / q)) \
        + 3 * math.log(lam / 2)
    diff = tg.unnorm_log_posterior(W, t, lam, q) - prior_const - tg.wishart_loglik(np.linalg.cholesky(W), t)
    assert abs(diff) <= lam * (np.trace(W) / 2 + np.sum(np.abs(W[iu]) ** q)) + 1e-12


def test_tempering():
    assert tg.tempered_log_posterior(-3.0, 1.0) == -3.0
    assert tg.tempered_log_posterior(-3.0, 0.01) == pytest.approx(-300.0)
    assert abs(tg.tempered_log_posterior(-3.0, 5.0)) < 3.0
    with pytest.raises(tg.ConditionError):
        tg.tempered_log_posterior(-3.0, 0.0)


def test_condition_validation():
    for lam, q in [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (1.0, 10.0), (float("nan"), 1.0)]:
        with pytest.raises(tg.ConditionError):
            tg.check_condition(lam, q)


def test_block_degenerate_cases(rng):
    S = random_spd(rng, 3)
    W = random_spd(rng, 2) / 2
    full = tg.GGMTarget(S[:2, :2], 6)
    blk0 = tg.GGMTarget(S[:2, :2], 6, block=(2, 0))
    lam, q = 0.9, 0.5
    assert tg.block_unnorm_log_posterior(W, np.zeros((2, 0)), blk0, lam, q) == pytest.approx(
        tg.unnorm_log_posterior(W, full, lam, q), rel=1e-12)
    blk = tg.GGMTarget(S, 6, block=(2, 1))
    z12 = tg.block_unnorm_log_posterior(W, np.zeros((2, 1)), blk, lam, q)
    only11 = (3 * np.linalg.slogdet(W)[1] - 0.5 * np.sum(W * (S[:2, :2] + lam * np.eye(2)))
              - lam * abs(W[0, 1]) ** q + 3 * tg.gen_normal_log_const(lam, q) + 2 * math.log(lam / 2))
    assert z12 == pytest.approx(only11, rel=1e-12)


def test_block_scalar_hand_evaluation():
    S = np.array([[4.0, 1.5], [1.5, 3.0]])
    t = tg.GGMTarget(S, 8, block=(1, 1))
    w11, w12, lam, q = 1.3, -0.4, 2.0, 0.5
    hand = (4 * math.log(w11)
            - 0.5 * ((4.0 + lam) * w11 + 2 * 1.5 * w12 + (3.0 + lam) * w12 ** 2 / w11)
            - lam * abs(w12) ** q
            + math.log(q) + math.log(lam) / q - math.log(2) - math.lgamma(1 / q) + math.log(lam / 2))
    val = tg.block_unnorm_log_posterior(np.array([[w11]]), np.array([[w12]]), t, lam, q)
    assert val == pytest.approx(hand, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 10), st.floats(0.25, 2.0))
def test_graph_matches_numpy(seed, lam, q):
    rng = np.random.default_rng(seed)
    d = 3
    S = random_spd(rng, d)
    Ls = np.linalg.cholesky(np.stack([random_spd(rng, d) / d for _ in range(4)]))
    t = tg.GGMTarget(S, 6)
    lamv, qv = np.full(4, lam), np.full(4, q)
    g = tg.log_posterior_graph(t, dc.Var(Ls), dc.Var(np.log(np.diagonal(Ls, axis1=1, axis2=2))),
                               lamv, qv)
    ref = [tg.unnorm_log_posterior(L @ L.T, t, lam, q) for L in Ls]
    assert np.allclose(g.value, ref, rtol=1e-10)
    tb = tg.GGMTarget(S, 6, block=(2, 1))
    L11 = Ls[:, :2, :2]
    O12 = rng.normal(size=(4, 2, 1))
    gb = tg.log_posterior_graph(tb, dc.Var(L11), dc.Var(np.log(np.diagonal(L11, axis1=1, axis2=2))),
                                lamv, qv, dc.Var(O12))
    refb = [tg.block_unnorm_log_posterior(L @ L.T, o, tb, lam, q) for L, o in zip(L11, O12)]
    assert np.allclose(gb.value, refb, rtol=1e-10)


def test_target_validation():
    with pytest.raises(ValueError):
        tg.GGMTarget(np.array([[1.0, 2.0], [0.0, 1.0]]), 3)
    with pytest.raises(ValueError):
        tg.GGMTarget(np.eye(3), 3, block=(1, 1))
    with pytest.raises(ValueError):
        tg.unnorm_log_posterior(-np.eye(2), tg.GGMTarget(np.eye(2), 3), 1.0, 1.0)

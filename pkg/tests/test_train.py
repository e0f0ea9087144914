import math

import numpy as np
import pytest
from scipy.special import gammaln

from cmflow import flow as fl
from cmflow import train as tr
from cmflow.target import GGMTarget


def test_schedule_values():
    s = tr.AnnealingSchedule(5.0, 0.01, 100)
    assert s.temperature(0) == 5.0
    assert s.temperature(100) == 0.01
    assert s.temperature(50) == pytest.approx(math.sqrt(5 * 0.01))
    with pytest.raises(ValueError):
        s.temperature(101)
    temps = [s.temperature(i) for i in range(101)]
    assert all(a > b for a, b in zip(temps, temps[1:]))
    levels = [s.level(e, 1010) for e in range(1010)]
    assert levels[0] == 0 and levels[-1] == 100
    assert all(b - a in (0, 1) for a, b in zip(levels, levels[1:]))


def test_adam_examples():
    h = tr.AdamConfig(lr=0.1)
    th, st = tr.adam_step(np.array([1.0]), np.zeros(1), tr.AdamState.zeros(1), h)
    assert th[0] == 1.0
    th, _ = tr.adam_step(np.array([1.0]), np.array([2.0]), tr.AdamState.zeros(1), h)
    assert th[0] < 1.0
    theta, state = np.zeros(1), tr.AdamState.zeros(1)
    steps = []
    for _ in range(200):
        new, state = tr.adam_step(theta, np.array([3.7]), state, h)
        steps.append(theta[0] - new[0])
        theta = new
    assert steps[-1] == pytest.approx(0.1, rel=1e-6)
    with pytest.raises(tr.NonFiniteLossError):
        tr.adam_step(np.zeros(1), np.array([np.nan]), tr.AdamState.zeros(1), h)


def test_clip_by_norm():
    g = np.array([300.0, 400.0])
    assert np.linalg.norm(tr.clip_by_norm(g, 100.0)) == pytest.approx(100.0)
    assert np.array_equal(tr.clip_by_norm(np.ones(2), 100.0), np.ones(2))


def test_sample_conditions():
    cfg = tr.TrainConfig(lambda_range=(0.1, 10.0), q_range=(0.25, 1.0), conditions_per_batch=100000)
    conds = np.array(tr.sample_conditions(cfg, np.random.default_rng(0)))
    loglam = np.log(conds[:, 0])
    sd = (math.log(10) - math.log(0.1)) / math.sqrt(12)
    assert abs(loglam.mean() - 0.0) <= 3 * sd / math.sqrt(len(loglam))
    assert conds[:, 1].min() >= 0.25 and conds[:, 1].max() <= 1.0
    cfg = tr.TrainConfig(lambda_range=(2.0, 2.0), conditions_per_batch=10)
    assert all(c[0] == pytest.approx(2.0) for c in tr.sample_conditions(cfg, np.random.default_rng(1)))


def _d3_setup(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 3))
    target = GGMTarget(X.T @ X, 12)
    flow = fl.ConditionalMatrixFlow(fl.FlowConfig(d=3, k=3, hidden=8, n_layers=2), seed=seed)
    return target, flow


def test_kl_gradient_finite_differences():
    target, flow = _d3_setup()
    conds = [(0.7, 0.5), (3.0, 1.0)]
    theta = flow.params + 0.05 * np.random.default_rng(3).normal(size=flow.n_params)
    _, grad = tr.kl_loss_and_grad(flow, theta, conds, target, 4, 0.5, np.random.default_rng(9))
    idx = np.random.default_rng(4).choice(flow.n_params, 25, replace=False)
    for i in idx:
        h = 1e-5
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fp = tr.kl_loss(flow, conds, target, 4, 0.5, np.random.default_rng(9), theta=tp)
        fm = tr.kl_loss(flow, conds, target, 4, 0.5, np.random.default_rng(9), theta=tm)
        fd = (fp - fm) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-5 * max(1.0, abs(grad[i]))


def test_temperature_scales_target_term():
    target, flow = _d3_setup()
    conds = [(1.0, 0.5)]
    a = tr.kl_loss(flow, conds, target, 8, 1.0, np.random.default_rng(0), return_per_sample=True)
    b = tr.kl_loss(flow, conds, target, 8, 2.0, np.random.default_rng(0), return_per_sample=True)
    c = tr.kl_loss(flow, conds, target, 8, 4.0, np.random.default_rng(0), return_per_sample=True)
    # loss = log q - logp / T: the target term halves exactly when T doubles
    assert np.allclose((a - b), 2 * (b - c), rtol=1e-10)


def test_loss_variance_scales_as_inverse_m():
    target, flow = _d3_setup()
    rng = np.random.default_rng(0)
    Ms = [4, 16, 64]
    var = [np.var([tr.kl_loss(flow, [(1.0, 1.0)], target, M, 1.0, rng) for _ in range(200)])
           for M in Ms]
    slope = np.polyfit(np.log(Ms), np.log(var), 1)[0]
    assert abs(slope + 1) <= 0.2


def test_loss_validation():
    target, flow = _d3_setup()
    with pytest.raises(ValueError):
        tr.kl_loss(flow, [(1.0, 1.0)], target, 0, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        tr.kl_loss(flow, [(1.0, 1.0)], target, 4, 0.0, np.random.default_rng(0))


def _toy_target(s=6.0, n=10):
    return GGMTarget(np.array([[s]]), n)


def _toy_evidence(s, n, lam):
    # Gamma integral of omega^(n/2) exp(-(s + lam) omega / 2) times lam / 2
    return math.log(lam / 2) + gammaln(n / 2 + 1) - (n / 2 + 1) * math.log((s + lam) / 2)


@pytest.fixture(scope="module")
def toy_flow():
    cfg = tr.TrainConfig(lambda_range=(0.5, 2.0), q_range=(1.0, 1.0), mc_samples=64,
                         conditions_per_batch=4, epochs=1500, seed=1,
                         schedule=tr.AnnealingSchedule(1.0, 1.0, 0), lr_final_fraction=0.1,
                         adam=tr.AdamConfig(lr=3e-3))
    flow = fl.ConditionalMatrixFlow(fl.FlowConfig(d=1, lambda_range=(0.5, 2.0), q_range=(1.0, 1.0)))
    return tr.train(cfg, _toy_target(), flow)


def test_conjugate_toy_evidence(toy_flow):
    rng = np.random.default_rng(5)
    for lam in (0.5, 1.0, 2.0):
        est, se = tr.estimate_marginal_loglik(toy_flow.flow_T1, _toy_target(), lam, 1.0, 10000, rng)
        assert abs(est - _toy_evidence(6.0, 10, lam)) <= 0.05
    e3, s3 = tr.estimate_marginal_loglik(toy_flow.flow_T1, _toy_target(), 1.0, 1.0, 1000, rng)
    e4, s4 = tr.estimate_marginal_loglik(toy_flow.flow_T1, _toy_target(), 1.0, 1.0, 10000, rng)
    assert abs(e3 - e4) <= 3 * math.hypot(s3, s4)


def test_train_snapshots_and_trace(toy_flow):
    assert toy_flow.T1 == 1.0 and toy_flow.epoch_T1 == 1499
    assert len(toy_flow.trace) == 1500
    early = np.mean([t[2] for t in toy_flow.trace[:50]])
    late = np.mean([t[2] for t in toy_flow.trace[-50:]])
    assert late < early


def test_train_is_deterministic():
    target, flow = _d3_setup()
    cfg = tr.TrainConfig(epochs=30, mc_samples=4, conditions_per_batch=2, seed=3,
                         schedule=tr.AnnealingSchedule(5.0, 0.5, 5))
    a = tr.train(cfg, target, flow)
    b = tr.train(cfg, target, flow)
    assert np.array_equal(a.flow_Tn.params, b.flow_Tn.params)
    assert a.trace == b.trace
    assert a.T1 <= 1.0 and a.epoch_T1 is not None


def test_divergence_guard():
    target, flow = _d3_setup()
    cfg = tr.TrainConfig(epochs=20, mc_samples=2, conditions_per_batch=1,
                         divergence_threshold=-1e9, divergence_patience=5)
    with pytest.raises(tr.DivergenceError):
        tr.train(cfg, target, flow)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm
from sklearn.covariance import graphical_lasso as sk_graphical_lasso

from cmflow import data as dt
from cmflow import evaluation as ev
from cmflow import flow as fl


def _summary(lower, upper, labels):
    n = len(labels)
    return ev.CredibleSummary(labels, np.array(lower), np.array(upper), np.zeros(n), np.zeros(n),
                              100, 0.9)


def test_posterior_samples_contract():
    flow = fl.ConditionalMatrixFlow(fl.FlowConfig(d=3), seed=0)
    assert ev.posterior_samples(flow, 1.0, 0.5, 0, np.random.default_rng(0)) is None
    a = ev.posterior_samples(flow, 1.0, 0.5, 3000, np.random.default_rng(0), batch=1000)
    b = ev.posterior_samples(flow, 1.0, 0.5, 3000, np.random.default_rng(0), batch=1000)
    assert len(a) == 3000 and np.array_equal(a.omega, b.omega)
    assert np.linalg.eigvalsh(a.omega).min() > 0
    with pytest.raises(fl.FlowError):
        ev.posterior_samples(flow, 50.0, 0.5, 10, np.random.default_rng(0))


def test_credible_interval_examples():
    s = ev.credible_intervals(np.full((50, 2), 0.7), 0.9)
    assert np.all(s.lower == 0.7) and np.all(s.upper == 0.7)
    x = np.random.default_rng(0).standard_normal(10000)
    s = ev.credible_intervals(x, 0.9)
    z = norm.ppf(0.95)
    assert s.lower[0] == pytest.approx(-z, abs=0.05) and s.upper[0] == pytest.approx(z, abs=0.05)
    # nearest rank: ceil(p N)-th smallest
    s = ev.credible_intervals(np.arange(1.0, 11.0), 0.8)
    assert (s.lower[0], s.upper[0]) == (1.0, 9.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 0.9), st.floats(0.05, 0.09))
def test_quantile_sandwich(seed, g1, dg):
    x = np.random.default_rng(seed).standard_t(3, size=(301, 4))
    labels = [(0, 1), (0, 2), (1, 2), (2, 3)]
    a = ev.credible_intervals(x + 0.3, g1, labels=labels)
    b = ev.credible_intervals(x + 0.3, g1 + dg, labels=labels)
    assert np.all(b.lower <= a.lower) and np.all(a.upper <= b.upper)
    assert ev.edge_set(b).keys() <= ev.edge_set(a).keys()


def test_edge_rules():
    labels = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    s = _summary([1, 0.2, -0.1, 1, -0.8, 1], [2, 0.9, 0.3, 2, -0.2, 2], labels)
    assert ev.edge_set(s) == {(0, 1): 1, (1, 2): -1}
    s = _summary([1, -0.2, -0.1, 1, -0.8, 1], [2, 0.9, 0.3, 2, 0.2, 2], labels)
    assert ev.edge_set(s) == {}
    blk = _summary([1, 0.5, -1.0], [2, 1.0, -0.5], [(0, 0), ("12", 0, 0), ("12", 0, 1)])
    assert ev.edge_set(blk) == {(0, 1): 1, (0, 2): -1}


def test_f1_examples():
    assert ev.f1_score([], []) == 1.0
    assert ev.f1_score([(0, 1)], []) == 0.0
    assert ev.f1_score([(0, 1), (2, 3)], [(1, 0), (2, 3)]) == 1.0
    assert ev.f1_score([(0, 1)], [(2, 3)]) == 0.0
    truth = [(0, j) for j in range(1, 11)]
    pred = truth[:5] + [(1, j) for j in range(2, 7)]
    assert ev.f1_score(pred, truth) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_f1_relabel_symmetry(seed):
    rng = np.random.default_rng(seed)
    d = 8
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    pred = [p for p in pairs if rng.random() < 0.3]
    truth = [p for p in pairs if rng.random() < 0.3]
    perm = rng.permutation(d)
    relabel = lambda es: [(perm[i], perm[j]) for i, j in es]  # noqa: E731
    assert ev.f1_score(pred, truth) == pytest.approx(ev.f1_score(relabel(pred), relabel(truth)))


def test_path_mse_and_grid():
    lams = ev.log_lambda_grid(1.0, 10.0, 20)
    assert len(lams) == 21 and lams[0] == pytest.approx(1.0) and lams[-1] == pytest.approx(10.0)
    est = np.random.default_rng(0).normal(size=(21, 3))
    a = ev.SolutionPath(lams, 1.0, est, [(0, 0), (0, 1), (1, 1)])
    b = ev.SolutionPath(lams, 1.0, est + 0.3, [(0, 0), (0, 1), (1, 1)])
    assert ev.path_mse(a, a) == 0.0
    assert ev.path_mse(a, b) == pytest.approx(0.09)
    c = ev.SolutionPath(lams * 2, 1.0, est, [(0, 0), (0, 1), (1, 1)])
    with pytest.raises(ValueError):
        ev.path_mse(a, c)


def _data(d=5, n=40, seed=1):
    gt = dt.generate_sparse_precision(d, 0.6, seed)
    return gt, dt.sample_gaussian(gt, n, seed + 1)


@pytest.mark.parametrize("lam", [0.3, 2.0, 8.0])
def test_glasso_matches_sklearn(lam):
    _, ds = _data()
    A, rho = ev.map_problem(ds.S, ds.n, lam)
    W = ev.graphical_lasso(A, rho)
    _, P = sk_graphical_lasso(A, alpha=rho / 2, tol=1e-12, max_iter=10000)
    assert np.abs(W - P).max() < 1e-6
    assert ev.kkt_residual(W, A, rho) <= 1e-6


def test_glasso_unpenalized_and_lambda_max():
    _, ds = _data()
    A = ds.S / ds.n
    W = ev.graphical_lasso(A, 0.0)
    assert np.abs(W - np.linalg.inv(A)).max() < 1e-6
    lmax = ev.lambda_max(ds.S)
    W = ev.graphical_lasso(*ev.map_problem(ds.S, ds.n, lmax))
    assert np.all(W[np.triu_indices(5, 1)] == 0.0)
    W = ev.graphical_lasso(*ev.map_problem(ds.S, ds.n, 0.9 * lmax))
    assert np.any(W[np.triu_indices(5, 1)] != 0.0)


def test_glasso_closed_form_2x2():
    A = np.array([[2.0, 0.9], [0.9, 1.5]])
    rho = 0.6
    Sig = np.array([[2.0, 0.9 - rho / 2], [0.9 - rho / 2, 1.5]])
    W = ev.graphical_lasso(A, rho)
    assert np.abs(W - np.linalg.inv(Sig)).max() < 1e-6
    W = ev.graphical_lasso(A, 2.0)
    assert np.allclose(W, np.diag([0.5, 1 / 1.5]), atol=1e-9)


def test_reference_path_shape_and_sparsity():
    _, ds = _data()
    lams = ev.log_lambda_grid(0.5, ev.lambda_max(ds.S) * 1.2, 20)
    path = ev.reference_glasso_path(ds.S, ds.n, lams)
    assert path.estimates.shape == (len(lams), 15)
    off = [k for k, (i, j) in enumerate(path.labels) if i != j]
    counts = (np.abs(path.estimates[:, off]) > 0).sum(axis=1)
    assert np.sum(np.diff(counts) > 0) <= 2
    assert np.all(path.estimates[-1, off] == 0.0)


def test_reference_cv_picks_interior_value():
    gt, ds = _data(d=5, n=80, seed=3)
    lams = ev.log_lambda_grid(0.5, 100.0, 10)
    lam, scores = ev.reference_cv_lambda(ds.X, lams)
    assert lams[0] <= lam <= lams[-1] and np.all(np.isfinite(scores))
    lam_pen, _ = ev.reference_cv_lambda(ds.X, lams, convention="penalty")
    # a fixed penalty weight is stronger per fold than the same prior on fewer samples
    assert lam <= lam_pen
    with pytest.raises(ValueError):
        ev.reference_cv_lambda(ds.X, lams, convention="bogus")


def test_grid_oracle_d1_quadrature():
    s, n, lam = 5.0, 9, 1.5
    g = ev.grid_oracle_posterior(np.array([[s]]), n, lam, 1.0, n_points=4001)
    f = lambda w: math.exp(0.5 * n * math.log(w) - 0.5 * w * (s + lam))  # noqa: E731
    Z, _ = quad(f, 0, np.inf)
    assert g.extra["log_evidence"] == pytest.approx(math.log(Z) + math.log(lam / 2), abs=1e-5)
    med = g.quantile(0, 0.5)
    lower, _ = quad(f, 0, med)
    assert lower / Z == pytest.approx(0.5, abs=1e-4)


def test_grid_oracle_mass_and_boundary():
    S = np.array([[40.0, 12.0], [12.0, 50.0]])
    g = ev.grid_oracle_posterior(S, 50, 1.0, 1.0)
    assert g.mass == pytest.approx(1.0, abs=1e-8)
    assert g.boundary_mass < 1e-4
    lo, hi = g.interval(2, 0.9)
    assert lo < hi
    with pytest.raises(ev.GridError):
        ev.grid_oracle_posterior(S, 50, 1.0, 1.0, ranges=[(0.8, 1.0), (0.8, 1.0), (-0.2, 0.0)])
    with pytest.raises(ev.GridError):
        ev.grid_oracle_posterior(np.eye(3), 5, 1.0, 1.0)


def test_select_lambda_tie_rule(monkeypatch):
    monkeypatch.setattr(ev, "estimate_marginal_loglik", lambda *a, **k: (1.0, 0.0))
    lam, est, _ = ev.select_lambda(None, None, np.array([0.5, 1.0, 2.0]), 1.0, 10,
                                   np.random.default_rng(0))
    assert lam == 0.5
    curve = {0.5: -3.0, 1.0: -1.0, 2.0: -2.0}
    monkeypatch.setattr(ev, "estimate_marginal_loglik", lambda f, t, l, *a, **k: (curve[l], 0.0))
    lam, _, _ = ev.select_lambda(None, None, np.array([0.5, 1.0, 2.0]), 1.0, 10,
                                 np.random.default_rng(0))
    assert lam == 1.0


def test_output_writers(tmp_path):
    flow = fl.ConditionalMatrixFlow(fl.FlowConfig(block=(2, 1)), seed=0)
    b = ev.posterior_samples(flow, 1.0, 0.5, 200, np.random.default_rng(0))
    s = ev.credible_intervals(b, 0.75)
    s.to_csv(tmp_path / "iv.csv")
    ev.write_edges(s, tmp_path / "e.csv", s=2)
    header = (tmp_path / "iv.csv").read_text().splitlines()
    assert header[0] == "entry,lower,median,upper,mean" and len(header) == 1 + 3 + 2
    assert (tmp_path / "e.csv").read_text().startswith("i,j,sign,lower,upper")

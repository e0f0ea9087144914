"""Posterior summaries, solution paths, edge recovery and the two validation oracles.

Lambda convention: every lambda here is the prior's lambda (the Bayesian one). The
MAP of the target at T -> 0 and q = 1 solves

    max  log det W - Tr(W (S + lambda I) / n) - (2 lambda / n) sum_{i<j} |w_ij|,

so the penalized-likelihood weight is lambda_freq = lambda / (n / 2), and the prior's
diagonal term shows up as the (lambda / n) I shift of the scatter matrix.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .flow import ConditionalMatrixFlow, PrecisionBatch
from .target import GGMTarget, check_condition, gen_normal_log_const
from .train import estimate_marginal_loglik


class SolverError(RuntimeError):
    pass


class GridError(RuntimeError):
    pass


# ------------------------------------------------------------------ sampling & summaries

def posterior_samples(flow: ConditionalMatrixFlow, lam: float, q: float, N: int,
                      rng: np.random.Generator, batch: int = 2048) -> PrecisionBatch | None:
    """N independent generator passes at (lam, q); None when N == 0."""
    flow.check_condition(lam, q)
    if N == 0:
        return None
    parts = []
    left = N
    while left > 0:
        m = min(batch, left)
        parts.append(flow.sample(m, lam, q, rng))
        left -= m
    if len(parts) == 1:
        return parts[0]
    cat = lambda name: None if getattr(parts[0], name) is None else np.concatenate(  # noqa: E731
        [getattr(p, name) for p in parts])
    return PrecisionBatch(omega=cat("omega"), L=cat("L"), log_q=cat("log_q"), z=cat("z"),
                          omega12=cat("omega12"), lam=cat("lam"), q=cat("q"))


def nearest_rank(sorted_vals: np.ndarray, p: float) -> np.ndarray:
    """Nearest-rank quantile along axis 0: the ceil(p N)-th smallest value (1-based)."""
    N = sorted_vals.shape[0]
    rank = min(N, max(1, math.ceil(p * N - 1e-12)))
    return sorted_vals[rank - 1]


@dataclass
class CredibleSummary:
    labels: list
    lower: np.ndarray
    upper: np.ndarray
    median: np.ndarray
    mean: np.ndarray
    N: int
    gamma: float
    lam: float = float("nan")
    q: float = float("nan")
    T: float = float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["entry", "lower", "median", "upper", "mean"])
            for lab, lo, me, up, mu in zip(self.labels, self.lower, self.median, self.upper,
                                           self.mean):
                w.writerow([_label_str(lab), repr(float(lo)), repr(float(me)), repr(float(up)),
                            repr(float(mu))])


def _label_str(lab) -> str:
    if lab[0] == "12":
        return f"12:({lab[1]},{lab[2]})"
    return f"({lab[0]},{lab[1]})"


def credible_intervals(samples, gamma: float, labels=None, lam=float("nan"), q=float("nan"),
                       T=float("nan")) -> CredibleSummary:
    """Per-entry nearest-rank interval at (1-gamma)/2 and (1+gamma)/2.

    ``samples`` is a PrecisionBatch or an (N, E) array of entries.
    """
    if isinstance(samples, PrecisionBatch):
        vals, labels = samples.entries()
    else:
        vals = np.asarray(samples, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        labels = labels if labels is not None else [(i,) for i in range(vals.shape[1])]
    if vals.shape[0] < 2:
        raise ValueError("need at least two samples")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    srt = np.sort(vals, axis=0)
    return CredibleSummary(labels=list(labels),
                           lower=nearest_rank(srt, (1 - gamma) / 2),
                           upper=nearest_rank(srt, (1 + gamma) / 2),
                           median=nearest_rank(srt, 0.5),
                           mean=vals.mean(axis=0), N=vals.shape[0], gamma=gamma,
                           lam=lam, q=q, T=T)


def edge_set(summary: CredibleSummary, s: int | None = None) -> dict[tuple[int, int], int]:
    """Edges whose interval excludes zero, mapped to their sign (+1 / -1).

    Diagonal entries are never edges. Omega12 entries (i, j) become (i, s + j)
    in the joint indexing; ``s`` defaults to the Omega11 size found in the labels.
    """
    if s is None:
        firsts = [lab for lab in summary.labels if lab[0] != "12"]
        s = 1 + max((lab[1] for lab in firsts), default=-1)
    edges = {}
    for lab, lo, up in zip(summary.labels, summary.lower, summary.upper):
        if lab[0] == "12":
            key = (lab[1], s + lab[2])
        else:
            i, j = lab[0], lab[1]
            if i == j:
                continue
            key = (min(i, j), max(i, j))
        if lo > 0:
            edges[key] = 1
        elif up < 0:
            edges[key] = -1
    return edges


def write_edges(summary: CredibleSummary, path, s: int | None = None):
    edges = edge_set(summary, s)
    lookup = {}
    for lab, lo, up in zip(summary.labels, summary.lower, summary.upper):
        if lab[0] == "12":
            lookup[(lab[1], (s if s is not None else 0) + lab[2])] = (lo, up)
        else:
            lookup[(lab[0], lab[1])] = (lo, up)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "sign", "lower", "upper"])
        for (i, j), sg in sorted(edges.items()):
            lo, up = lookup.get((i, j), (float("nan"), float("nan")))
            w.writerow([i, j, sg, repr(float(lo)), repr(float(up))])


def f1_score(predicted, truth) -> float:
    """F1 over unordered off-diagonal pairs; 1 if both sets are empty."""
    pred = {(min(i, j), max(i, j)) for i, j in predicted}
    true = {(min(i, j), max(i, j)) for i, j in truth}
    if not pred and not true:
        return 1.0
    if not pred or not true:
        return 0.0
    tp = len(pred & true)
    if tp == 0:
        return 0.0
    precision = tp / len(pred)
    recall = tp / len(true)
    return 2 * precision * recall / (precision + recall)


# ------------------------------------------------------------------ solution paths

@dataclass
class SolutionPath:
    lambdas: np.ndarray
    q: float
    estimates: np.ndarray  # (G, E)
    labels: list
    T: float = float("nan")

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        if np.any(np.diff(self.lambdas) <= 0):
            raise ValueError("lambda grid must be strictly increasing")
        if not np.all(np.isfinite(self.estimates)):
            raise ValueError("non-finite path estimates")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda"] + [_label_str(lab) for lab in self.labels])
            for lam, row in zip(self.lambdas, self.estimates):
                w.writerow([repr(float(lam))] + [repr(float(v)) for v in row])


def _upper_entries(mats: np.ndarray):
    d = mats.shape[-1]
    iu, ju = np.triu_indices(d)
    return mats[..., iu, ju], [(int(i), int(j)) for i, j in zip(iu, ju)]


def log_lambda_grid(lo: float, hi: float, per_decade: int = 20) -> np.ndarray:
    n = max(2, int(round(per_decade * math.log10(hi / lo))) + 1)
    return np.exp(np.linspace(math.log(lo), math.log(hi), n))


def solution_path(flow: ConditionalMatrixFlow, lambdas, q: float, N_map: int,
                  rng: np.random.Generator, T: float = float("nan")) -> SolutionPath:
    """Component-wise median of N_map low-temperature samples at each grid point."""
    rows = []
    labels = None
    for lam in lambdas:
        batch = posterior_samples(flow, float(lam), q, N_map, rng)
        vals, labels = batch.entries()
        rows.append(np.median(vals, axis=0))
    return SolutionPath(np.asarray(lambdas, dtype=float), q, np.array(rows), labels, T)


def path_mse(a: SolutionPath, b: SolutionPath) -> float:
    if a.lambdas.shape != b.lambdas.shape or not np.allclose(a.lambdas, b.lambdas, rtol=1e-12):
        raise ValueError("paths use different lambda grids")
    if list(a.labels) != list(b.labels):
        raise ValueError("paths cover different entries")
    return float(np.mean((a.estimates - b.estimates) ** 2))


def select_lambda(flow: ConditionalMatrixFlow, target: GGMTarget, lambdas, q: float, M: int,
                  rng: np.random.Generator):
    """argmax of the estimated evidence over the grid (first maximum -> smaller lambda).

    Returns (lambda*, estimates, standard errors).
    """
    est, se = [], []
    for lam in lambdas:
        e, s = estimate_marginal_loglik(flow, target, float(lam), q, M, rng)
        est.append(e)
        se.append(s)
    est = np.array(est)
    return float(lambdas[int(np.argmax(est))]), est, np.array(se)


# ------------------------------------------------------------------ reference solver

def _objective(W, A, rho):
    L = np.linalg.cholesky(W)
    off = np.abs(W[np.triu_indices(W.shape[0], 1)]).sum()
    return -2.0 * np.log(np.diag(L)).sum() + np.sum(A * W) + rho * off


def _soft_offdiag(X, thr):
    out = np.sign(X) * np.maximum(np.abs(X) - thr, 0.0)
    np.fill_diagonal(out, np.diag(X))
    return out


def kkt_residual(W, A, rho) -> float:
    """Max violation of the subgradient conditions of min -logdet W + Tr(AW) + rho sum_{i<j}|w_ij|."""
    G = A - np.linalg.inv(W)
    d = W.shape[0]
    res = np.abs(np.diag(G)).max()
    half = rho / 2.0
    for i in range(d):
        for j in range(i + 1, d):
            if W[i, j] != 0:
                r = abs(G[i, j] + half * np.sign(W[i, j]))
            else:
                r = max(0.0, abs(G[i, j]) - half)
            res = max(res, r)
    return float(res)


def graphical_lasso(A, rho: float, W0=None, tol: float = 1e-8, max_iter: int = 50000):
    """Proximal gradient (Barzilai-Borwein step, SPD-preserving backtracking).

    Minimizes -log det W + Tr(A W) + rho * sum_{i<j} |w_ij|. Stops when the relative
    objective change drops below ``tol`` and the KKT residual is below 1e-9.
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    W = np.diag(1.0 / np.maximum(np.diag(A), 1e-12)) if W0 is None else np.array(W0, float)
    thr = rho / 2.0  # symmetric matrix: each pair appears twice in the Frobenius geometry
    Winv = np.linalg.inv(W)
    G = A - Winv
    F = _objective(W, A, rho)
    t = 1.0
    for it in range(max_iter):
        while True:
            Wn = _soft_offdiag(W - t * G, t * thr)
            Wn = 0.5 * (Wn + Wn.T)
            try:
                Ln = np.linalg.cholesky(Wn)
            except np.linalg.LinAlgError:
                t *= 0.5
                if t < 1e-20:
                    raise SolverError("step size underflow") from None
                continue
            fn = -2.0 * np.log(np.diag(Ln)).sum() + np.sum(A * Wn)
            f = -np.linalg.slogdet(W)[1] + np.sum(A * W)
            D = Wn - W
            if fn <= f + np.sum(G * D) + np.sum(D * D) / (2 * t) + 1e-15 * abs(f):
                break
            t *= 0.5
            if t < 1e-20:
                raise SolverError("step size underflow")
        Fn = fn + rho * np.abs(Wn[np.triu_indices(d, 1)]).sum()
        Winv_n = np.linalg.inv(Wn)
        Gn = A - Winv_n
        S_ = Wn - W
        Y_ = Gn - G
        sy = np.sum(S_ * Y_)
        t = float(np.sum(S_ * S_) / sy) if sy > 0 else t * 2.0
        t = min(max(t, 1e-12), 1e6)
        converged = abs(F - Fn) <= tol * max(1.0, abs(Fn))
        W, G, F = Wn, Gn, Fn
        if converged and kkt_residual(W, A, rho) < 1e-9:
            return W
    if kkt_residual(W, A, rho) < 1e-6:
        return W
    raise SolverError(f"graphical lasso did not converge in {max_iter} iterations")


def map_problem(S, n: int, lam: float):
    """(A, rho) of the penalized-likelihood problem equal to the q = 1, T -> 0 MAP."""
    S = np.asarray(S, dtype=np.float64)
    return (S + lam * np.eye(S.shape[0])) / n, 2.0 * lam / n


def reference_glasso_path(S, n: int, lambdas) -> SolutionPath:
    """Warm-started q = 1 MAP path on the lambda grid (prior's lambda convention)."""
    lambdas = np.asarray(lambdas, dtype=float)
    mats = []
    W = None
    for lam in lambdas[::-1]:
        # descending lambda: start from the sparse end
        A, rho = map_problem(S, n, lam)
        W = graphical_lasso(A, rho, W0=W)
        mats.append(W)
    mats = np.array(mats[::-1])
    est, labels = _upper_entries(mats)
    return SolutionPath(lambdas, 1.0, est, labels, T=0.0)


def lambda_max(S) -> float:
    """Smallest prior lambda at which the q = 1 MAP is diagonal: max_{i != j} |S_ij|."""
    S = np.asarray(S, dtype=np.float64)
    off = S - np.diag(np.diag(S))
    return float(np.abs(off).max())


def reference_cv_lambda(X, lambdas, n_folds: int = 5, seed: int = 0, convention: str = "prior"):
    """K-fold cross-validated lambda for the q = 1 MAP problem.

    ``convention="prior"`` cross-validates the prior hyperparameter itself: every fold
    solves the MAP problem of its own data under prior lambda (A = (S_tr + lambda I)/n_tr,
    rho = 2 lambda / n_tr). ``convention="penalty"`` instead holds the penalty weight
    rho = 2 lambda / n fixed at the full sample size, the usual graphical-lasso CV.
    Folds are scored by the held-out Gaussian log-likelihood log det W - Tr(W S_test / n_test).
    Returns (lambda*, mean scores); ties go to the smaller lambda.
    """
    if convention not in ("prior", "penalty"):
        raise ValueError("convention must be 'prior' or 'penalty'")
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    lambdas = np.asarray(lambdas, dtype=float)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, n_folds)
    scores = np.zeros(len(lambdas))
    for k in range(n_folds):
        test = folds[k]
        train = np.concatenate([folds[j] for j in range(n_folds) if j != k])
        Xtr = X[train] - X[train].mean(axis=0)
        Xte = X[test] - X[train].mean(axis=0)
        Ste = Xte.T @ Xte / len(test)
        W = None
        for g in range(len(lambdas) - 1, -1, -1):
            if convention == "prior":
                A, rho = map_problem(Xtr.T @ Xtr, len(train), lambdas[g])
            else:
                rho = 2.0 * lambdas[g] / n
                A = Xtr.T @ Xtr / len(train) + 0.5 * rho * np.eye(d)
            W = graphical_lasso(A, rho, W0=W)
            scores[g] += (np.linalg.slogdet(W)[1] - np.sum(W * Ste)) / n_folds
    return float(lambdas[int(np.argmax(scores))]), scores


# ------------------------------------------------------------------ grid oracle

@dataclass
class GridPosterior:
    """Normalized posterior on a rectangular grid (d <= 2) with marginal quantiles."""

    axes: list[np.ndarray]
    labels: list
    density: np.ndarray
    mass: float
    boundary_mass: float
    extra: dict = field(default_factory=dict)

    def marginal(self, idx: int):
        dens = self.density
        for ax in reversed(range(dens.ndim)):
            if ax != idx:
                dens = trapezoid(dens, self.axes[ax], axis=ax)
        return self.axes[idx], dens

    def quantile(self, idx: int, p: float) -> float:
        x, f = self.marginal(idx)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])
        cdf /= cdf[-1]
        return float(np.interp(p, cdf, x))

    def interval(self, idx: int, gamma: float) -> tuple[float, float]:
        return self.quantile(idx, (1 - gamma) / 2), self.quantile(idx, (1 + gamma) / 2)


def _grid_logpost(w11, w22, w12, S, n, lam, q):
    det = w11 * w22 - w12 * w12
    with np.errstate(invalid="ignore", divide="ignore"):
        val = (0.5 * n * np.log(det)
               - 0.5 * (S[0, 0] * w11 + S[1, 1] * w22 + 2 * S[0, 1] * w12)
               - 0.5 * lam * (w11 + w22) - lam * np.abs(w12) ** q
               + gen_normal_log_const(lam, q) + 2 * math.log(lam / 2))
    return np.where((det > 0) & (w11 > 0), val, -np.inf)


def _auto_ranges(S, n, lam, width):
    d = S.shape[0]
    center = n * np.linalg.inv(S + lam * np.eye(d))
    sd = np.sqrt((center ** 2 + np.outer(np.diag(center), np.diag(center))) / max(n, 1))
    return center, sd * width


def grid_oracle_posterior(S, n: int, lam: float, q: float, n_points: int = 161,
                          width: float = 9.0, ranges=None, boundary_tol: float = 1e-4):
    """Brute-force posterior on a grid over (w11, w22, w12) restricted to SPD points.

    d = 1 uses a grid over w > 0. Ranges default to +-width approximate standard
    deviations around n (S + lambda I)^-1; pass ``ranges`` [(lo, hi), ...] in the
    order of ``labels`` to override. Raises GridError if the outermost grid cells
    hold more than ``boundary_tol`` of the mass.
    """
    check_condition(lam, q)
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    d = S.shape[0]
    if d not in (1, 2):
        raise GridError("grid oracle supports d in {1, 2}")
    center, half = _auto_ranges(S, n, lam, width)
    if d == 1:
        lo, hi = ranges[0] if ranges else (max(1e-12, center[0, 0] - half[0, 0]),
                                           center[0, 0] + half[0, 0])
        lo = max(lo, 1e-300)
        x = np.linspace(lo, hi, n_points)
        lp = 0.5 * n * np.log(x) - 0.5 * S[0, 0] * x - 0.5 * lam * x + math.log(lam / 2)
        axes, labels = [x], [(0, 0)]
    else:
        if ranges is None:
            ranges = [(max(1e-12, center[0, 0] - half[0, 0]), center[0, 0] + half[0, 0]),
                      (max(1e-12, center[1, 1] - half[1, 1]), center[1, 1] + half[1, 1]),
                      (center[0, 1] - half[0, 1], center[0, 1] + half[0, 1])]
        axes = [np.linspace(lo, hi, n_points) for lo, hi in ranges]
        w11, w22, w12 = np.meshgrid(*axes, indexing="ij")
        lp = _grid_logpost(w11, w22, w12, S, n, lam, q)
        labels = [(0, 0), (1, 1), (0, 1)]
    peak = np.max(lp)
    dens = np.exp(lp - peak)
    mass = dens
    for ax in reversed(range(dens.ndim)):
        mass = trapezoid(mass, axes[ax], axis=ax)
    dens = dens / mass
    log_evidence = float(math.log(mass) + peak)
    # boundary mass: probability in the outermost cell layer of every axis
    cell = np.ones_like(dens)
    for ax, x in enumerate(axes):
        wts = np.gradient(x)
        shape = [1] * dens.ndim
        shape[ax] = -1
        cell = cell * wts.reshape(shape)
    prob = dens * cell
    edge = np.zeros(dens.shape, dtype=bool)
    for ax in range(dens.ndim):
        sl = [slice(None)] * dens.ndim
        sl[ax] = 0
        if not (d == 1 and ax == 0 and axes[0][0] <= 1e-12) and not (
                d == 2 and ax in (0, 1) and axes[ax][0] <= 1e-12):
            edge[tuple(sl)] = True
        sl[ax] = -1
        edge[tuple(sl)] = True
    bmass = float(prob[edge].sum() / prob.sum())
    total = float(np.sum(prob) / np.sum(prob))
    if bmass > boundary_tol:
        raise GridError(f"boundary mass {bmass:.2e} exceeds {boundary_tol:g}; enlarge the grid")
    return GridPosterior(axes=axes, labels=labels, density=dens, mass=total,
                         boundary_mass=bmass, extra={"log_evidence": log_evidence})


def summary_json(summary: CredibleSummary) -> str:
    return json.dumps({"gamma": summary.gamma, "N": summary.N,
                       "entries": [_label_str(lab) for lab in summary.labels]})

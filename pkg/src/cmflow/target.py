"""Unnormalized log-posteriors over precision matrices.

Likelihood: Wishart W_d(n, Omega^-1) in Omega, i.e. (n/2) log det Omega - Tr(Omega S)/2,
with Omega-free constants (powers of det S, multivariate gamma) dropped.

Prior: exp(-lambda/2 Tr Omega) times a zero-centred generalized Normal on every
off-diagonal entry, f(x) = q lambda^(1/q) / (2 Gamma(1/q)) exp(-lambda |x|^q).
The diagonal factor exp(-lambda omega_ii / 2) is normalized as an exponential
density (log(lambda/2) per diagonal entry), so the only constant left out is the
mass of the positive-definite cone, which is invariant in lambda at q = 1.

Every density comes in two flavours: numpy functions taking matrices, and
``*_graph`` functions taking diffcore Vars from the flow (factor L, log diag).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import diffcore as dc

Q_BOUNDS = (0.05, 5.0)
LAMBDA_MAX = 1e3


class ConditionError(ValueError):
    pass


@dataclass(frozen=True)
class Condition:
    lam: float
    q: float
    T: float = 1.0

    def __post_init__(self):
        check_condition(self.lam, self.q)
        if not self.T > 0:
            raise ConditionError("temperature must be positive")


def check_condition(lam, q):
    lam, q = np.asarray(lam, dtype=float), np.asarray(q, dtype=float)
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0) or np.any(lam > LAMBDA_MAX):
        raise ConditionError(f"lambda must lie in (0, {LAMBDA_MAX:g}]")
    if np.any(~np.isfinite(q)) or np.any(q < Q_BOUNDS[0]) or np.any(q > Q_BOUNDS[1]):
        raise ConditionError(f"q must lie in [{Q_BOUNDS[0]}, {Q_BOUNDS[1]}]")


class GGMTarget:
    """Scatter statistics for the full or block (Omega11, Omega12) posterior."""

    def __init__(self, S, n: int, block: tuple[int, int] | None = None):
        S = np.asarray(S, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("S must be square")
        if not np.allclose(S, S.T, atol=1e-10 * max(1.0, np.abs(S).max())):
            raise ValueError("S must be symmetric")
        if n < 1:
            raise ValueError("n must be positive")
        self.S = 0.5 * (S + S.T)
        self.n = int(n)
        self.block = block
        if block is not None:
            s, t = block
            if s + t != S.shape[0]:
                raise ValueError(f"block sizes ({s}, {t}) do not tile a {S.shape[0]}x{S.shape[0]} S")
            self.S11 = self.S[:s, :s]
            self.S12 = self.S[:s, s:]
            self.S22 = self.S[s:, s:]

    @property
    def d(self) -> int:
        return self.S.shape[0]

    @property
    def mode(self) -> str:
        return "full" if self.block is None else "block"

    @classmethod
    def from_dataset(cls, ds) -> "GGMTarget":
        block = None if ds.s is None else (ds.s, ds.t)
        return cls(ds.S, ds.n, block)


# ------------------------------------------------------------ element densities

def gen_normal_log_const(lam, q):
    """log( q lambda^(1/q) / (2 Gamma(1/q)) )."""
    lam, q = np.asarray(lam, dtype=float), np.asarray(q, dtype=float)
    return np.log(q) + np.log(lam) / q - math.log(2.0) - gammaln(1.0 / q)


def gen_normal_logpdf(x, lam, q):
    """Log-density of the zero-centred generalized Normal in (lambda, q) form."""
    check_condition(lam, q)
    return gen_normal_log_const(lam, q) - lam * np.abs(np.asarray(x, dtype=float)) ** q


# ------------------------------------------------------------ numpy evaluators

def _factor(omega):
    omega = np.asarray(omega, dtype=np.float64)
    try:
        return np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Omega is not positive definite") from exc


def wishart_loglik(L, target: GGMTarget):
    """(n/2) log det Omega - Tr(Omega S)/2 from the Cholesky factor L of Omega."""
    L = np.asarray(L, dtype=np.float64)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    omega = L @ np.swapaxes(L, -1, -2)
    return 0.5 * target.n * logdet - 0.5 * np.sum(omega * target.S, axis=(-2, -1))


def gen_normal_logprior(omega, lam, q):
    """Generalized-Normal off-diagonal prior times the exponential diagonal factor."""
    check_condition(lam, q)
    omega = np.asarray(omega, dtype=np.float64)
    d = omega.shape[-1]
    iu, ju = np.triu_indices(d, 1)
    lam_ = np.asarray(lam, dtype=float)[..., None]
    q_ = np.asarray(q, dtype=float)[..., None]
    off = np.sum(gen_normal_log_const(lam_, q_) - lam_ * np.abs(omega[..., iu, ju]) ** q_, axis=-1)
    lam = np.asarray(lam, dtype=float)
    diag = d * np.log(lam / 2.0) - 0.5 * lam * np.trace(omega, axis1=-2, axis2=-1)
    return off + diag


def unnorm_log_posterior(omega, target: GGMTarget, lam, q):
    """log p(S | Omega) + log p(Omega | lambda, q), up to the SPD-cone mass."""
    L = _factor(omega)
    return wishart_loglik(L, target) + gen_normal_logprior(omega, lam, q)


def tempered_log_posterior(logp, T):
    if np.any(np.asarray(T) <= 0):
        raise ConditionError("temperature must be positive")
    return logp / T


def block_unnorm_log_posterior(omega11, omega12, target: GGMTarget, lam, q):
    """Joint log-density of (Omega11, Omega12) after integrating out the Schur complement."""
    check_condition(lam, q)
    if target.block is None:
        raise ValueError("target has no block structure")
    s, t = target.block
    L = _factor(omega11)
    omega11 = np.asarray(omega11, dtype=np.float64)
    omega12 = np.asarray(omega12, dtype=np.float64)
    lam_f = float(lam)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    Y = np.linalg.solve(L, omega12) if t else np.zeros((s, 0))
    quad = (np.sum(omega11 * (target.S11 + lam_f * np.eye(s)))
            + 2.0 * np.sum(omega12 * target.S12)
            + np.sum((Y @ (target.S22 + lam_f * np.eye(t))) * Y))
    iu, ju = np.triu_indices(s, 1)
    n_off = len(iu) + s * t
    prior = (n_off * gen_normal_log_const(lam_f, q) + s * math.log(lam_f / 2.0)
             - lam_f * np.sum(np.abs(omega11[iu, ju]) ** q)
             - lam_f * np.sum(np.abs(omega12) ** q))
    return 0.5 * target.n * logdet - 0.5 * quad + float(prior)


# ------------------------------------------------------------ graph evaluators

def log_posterior_graph(target: GGMTarget, L, log_diag, lam, q, omega12=None):
    """Batched log-posterior from flow outputs.

    L: Var (B, m, m) lower-triangular factor; log_diag: Var (B, m) = log L_ii;
    lam, q: arrays (B,). In block mode ``omega12`` is a Var (B, s, t).
    """
    lam = np.asarray(lam, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = L.shape[-1]
    omega = L @ L.T
    iu, ju = np.triu_indices(m, 1)
    flat = dc.reshape(omega, omega.shape[:-2] + (m * m,))
    off = dc.take(flat, iu * m + ju, axis=-1)
    pen = dc.sum(dc.abs_pow(off, q[:, None]), axis=-1)
    n_off = len(iu)
    if target.block is None:
        S_eff = target.S[None] + lam[:, None, None] * np.eye(m)
        quad = dc.sum(dc.reshape(omega * S_eff, omega.shape[:-2] + (m * m,)), axis=-1)
    else:
        s, t = target.block
        S11 = target.S11[None] + lam[:, None, None] * np.eye(s)
        quad = dc.sum(dc.reshape(omega * S11, omega.shape[:-2] + (s * s,)), axis=-1)
        if t:
            cross = dc.sum(dc.reshape(omega12 * target.S12, omega12.shape[:-2] + (s * t,)), axis=-1)
            Y = dc.tri_solve(L, omega12)
            S22 = target.S22[None] + lam[:, None, None] * np.eye(t)
            schur = dc.sum(dc.reshape((Y @ S22) * Y, Y.shape[:-2] + (s * t,)), axis=-1)
            quad = quad + 2.0 * cross + schur
            pen = pen + dc.sum(dc.reshape(dc.abs_pow(omega12, q[:, None, None]),
                                          omega12.shape[:-2] + (s * t,)), axis=-1)
            n_off += s * t
    const = n_off * gen_normal_log_const(lam, q) + m * np.log(lam / 2.0)
    loglik_logdet = target.n * dc.sum(log_diag, axis=-1)
    return loglik_logdet - 0.5 * quad - lam * pen + const

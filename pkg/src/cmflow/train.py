"""Monte-Carlo reverse-KL training with geometric simulated annealing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .flow import ConditionalMatrixFlow
from .target import GGMTarget, check_condition, log_posterior_graph

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnnealingSchedule:
    T0: float = 5.0
    Tn: float = 0.01
    n_steps: int = 100

    def __post_init__(self):
        if not (self.T0 >= self.Tn > 0):
            raise ValueError("need T0 >= Tn > 0")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")

    @property
    def a(self) -> float:
        return self.Tn / self.T0

    def temperature(self, i: int) -> float:
        return geometric_schedule(self, i)

    def level(self, epoch: int, epochs_total: int) -> int:
        """Cooling step active at ``epoch``: n_steps + 1 plateaus of equal length."""
        return min(self.n_steps, epoch * (self.n_steps + 1) // epochs_total)


def geometric_schedule(sched: AnnealingSchedule, i: int) -> float:
    """T_i = T0 * a**(i / n) with a = Tn / T0."""
    if not 0 <= i <= sched.n_steps:
        raise ValueError(f"cooling step {i} outside [0, {sched.n_steps}]")
    if sched.n_steps == 0:
        return sched.T0
    if i == sched.n_steps:
        return sched.Tn
    return sched.T0 * sched.a ** (i / sched.n_steps)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 100.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def clip_by_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamConfig,
              lr: float | None = None):
    """One bias-corrected Adam update; returns (theta', state')."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLossError("non-finite gradient")
    if grad.shape != theta.shape:
        raise ValueError("gradient shape does not match parameters")
    lr = hyper.lr if lr is None else lr
    t = state.t + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return theta, AdamState(m, v, t)


@dataclass
class TrainConfig:
    lambda_range: tuple[float, float] = (0.1, 10.0)
    q_range: tuple[float, float] = (0.25, 1.0)
    mc_samples: int = 64
    conditions_per_batch: int = 8
    epochs: int = 3000
    seed: int = 0
    schedule: AnnealingSchedule = field(default_factory=AnnealingSchedule)
    adam: AdamConfig = field(default_factory=AdamConfig)
    # final learning rate as a fraction of adam.lr, reached by cosine decay; 1 = constant
    lr_final_fraction: float = 1.0
    divergence_threshold: float = 1e6
    divergence_patience: int = 50
    log_every: int = 0

    def __post_init__(self):
        l1, l2 = self.lambda_range
        q1, q2 = self.q_range
        if not (0 < l1 <= l2 and 0 < q1 <= q2):
            raise ValueError("lambda and q ranges must be positive and ordered")
        if self.mc_samples < 1 or self.conditions_per_batch < 1 or self.epochs < 1:
            raise ValueError("mc_samples, conditions_per_batch and epochs must be >= 1")


def sample_conditions(cfg: TrainConfig, rng: np.random.Generator, n: int | None = None):
    """lambda log-uniform on the lambda range, q uniform on the q range."""
    n = cfg.conditions_per_batch if n is None else n
    l1, l2 = cfg.lambda_range
    q1, q2 = cfg.q_range
    lam = np.exp(rng.uniform(math.log(l1), math.log(l2), n))
    q = rng.uniform(q1, q2, n)
    return list(zip(lam.tolist(), q.tolist()))


def _loss_graph(flow, theta, z, lam, q, target, T):
    g = flow.generate_graph(theta, z, lam, q)
    logp = log_posterior_graph(target, g["L"], g["log_diag"], lam, q, g.get("omega12"))
    per = g["log_q"] - logp * (1.0 / np.asarray(T, dtype=float))
    return per


def _expand(conditions, M):
    lam = np.repeat([c[0] for c in conditions], M).astype(float)
    q = np.repeat([c[1] for c in conditions], M).astype(float)
    return lam, q


def _check_finite(per: np.ndarray, conditions, M):
    if np.all(np.isfinite(per)):
        return
    bad = np.where(~np.isfinite(per.reshape(len(conditions), M)).any(axis=1))[0][0]
    raise NonFiniteLossError(f"non-finite loss at condition {conditions[bad]}", conditions[bad])


def kl_loss(flow: ConditionalMatrixFlow, conditions, target: GGMTarget, M: int, T: float,
            rng: np.random.Generator, theta=None, return_per_sample=False):
    """Mean over conditions and M samples of log q(Omega) - log p(Omega | S, lambda, q) / T."""
    if M < 1 or T <= 0:
        raise ValueError("need M >= 1 and T > 0")
    check_condition([c[0] for c in conditions], [c[1] for c in conditions])
    lam, q = _expand(conditions, M)
    z = rng.standard_normal((len(lam), flow.config.dim))
    per = _loss_graph(flow, flow.params if theta is None else theta, z, lam, q, target, T).value
    _check_finite(per, conditions, M)
    return per if return_per_sample else float(per.mean())


def kl_loss_and_grad(flow, theta, conditions, target, M, T, rng):
    lam, q = _expand(conditions, M)
    z = rng.standard_normal((len(lam), flow.config.dim))
    tape = dc.Tape()
    th = tape.var(theta)
    per = _loss_graph(flow, th, z, lam, q, target, T)
    _check_finite(per.value, conditions, M)
    loss = dc.sum(per) * (1.0 / per.value.size)
    (grad,) = tape.backward(loss, [th])
    return float(loss.value), grad


@dataclass
class TrainResult:
    flow_T1: ConditionalMatrixFlow | None
    flow_Tn: ConditionalMatrixFlow
    trace: list[tuple[int, float, float]]
    epoch_T1: int | None = None
    T1: float | None = None

    def write_trace(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,T,loss\n")
            for e, T, loss in self.trace:
                fh.write(f"{e},{T!r},{loss!r}\n")


def train(cfg: TrainConfig, target: GGMTarget, flow: ConditionalMatrixFlow) -> TrainResult:
    """Anneal from T0 to Tn; snapshot after the first plateau with T <= 1 and at the end."""
    rng = np.random.default_rng(cfg.seed)
    sched = cfg.schedule
    theta = flow.params.copy()
    state = AdamState.zeros(theta.size)
    trace = []
    snapshot_T1, epoch_T1, T1 = None, None, None
    over = 0
    for epoch in range(cfg.epochs):
        level = sched.level(epoch, cfg.epochs)
        T = sched.temperature(level)
        conds = sample_conditions(cfg, rng)
        try:
            loss, grad = kl_loss_and_grad(flow, theta, conds, target, cfg.mc_samples, T, rng)
        except (NonFiniteLossError, dc.DomainError, FloatingPointError) as exc:
            log.warning("epoch %d: step skipped (%s)", epoch, exc)
            loss = float("nan")
        else:
            grad = clip_by_norm(grad, cfg.adam.clip_norm)
            lr = cfg.adam.lr
            if cfg.lr_final_fraction != 1.0:
                frac = 0.5 * (1 + math.cos(math.pi * epoch / max(1, cfg.epochs - 1)))
                lr = lr * (cfg.lr_final_fraction + (1 - cfg.lr_final_fraction) * frac)
            theta, state = adam_step(theta, grad, state, cfg.adam, lr=lr)
        trace.append((epoch, T, loss))
        over = over + 1 if not (loss <= cfg.divergence_threshold) else 0
        if over >= cfg.divergence_patience:
            raise DivergenceError(
                f"loss above {cfg.divergence_threshold:g} (or non-finite) for "
                f"{cfg.divergence_patience} epochs at epoch {epoch}, T={T:.4g}")
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d T=%.4g loss=%.6g", epoch, T, loss)
        plateau_end = epoch == cfg.epochs - 1 or sched.level(epoch + 1, cfg.epochs) != level
        if snapshot_T1 is None and plateau_end and T <= 1.0:
            snapshot_T1, epoch_T1, T1 = theta.copy(), epoch, T
    flow_Tn = ConditionalMatrixFlow(flow.config, theta)
    flow_T1 = None if snapshot_T1 is None else ConditionalMatrixFlow(flow.config, snapshot_T1)
    return TrainResult(flow_T1, flow_Tn, trace, epoch_T1, T1)


def estimate_marginal_loglik(flow: ConditionalMatrixFlow, target: GGMTarget, lam: float,
                             q: float, M: int, rng: np.random.Generator, batch: int = 4096):
    """-loss at T = 1: a lower bound on log p(S | lambda, q), tight when KL -> 0.

    Returns (estimate, Monte-Carlo standard error).
    """
    vals = []
    left = M
    while left > 0:
        m = min(batch, left)
        vals.append(-kl_loss(flow, [(lam, q)], target, m, 1.0, rng, return_per_sample=True))
        left -= m
    vals = np.concatenate(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0

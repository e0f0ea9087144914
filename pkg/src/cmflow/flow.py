"""Conditional matrix flow: Sum-of-Sigmoids autoregressive layers + SPD matrix head.

A base sample z in R^D (D = d(d+1)/2, or s(s+1)/2 + s*t in block mode) is pushed
through ``n_layers`` masked autoregressive Sum-of-Sigmoids layers whose
parameters come from a MADE-style hypernetwork fed with the embedded condition
(log lambda, q). The result is filled row-major into a lower-triangular matrix,
its diagonal is made positive with a softplus, and Omega = L L^T.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from numba import njit

from . import diffcore as dc
from .diffcore import Var

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_MAGIC = b"CMFLOWCK"
CHECKPOINT_VERSION = 1


class FlowError(ValueError):
    pass


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class FlowConfig:
    """Architecture and dimension metadata. Either ``d`` or ``block`` is set."""

    d: int | None = None
    block: tuple[int, int] | None = None
    n_layers: int = 4
    k: int = 8
    s_const: float = 10.0
    hidden: int = 64
    n_hidden: int = 2
    lambda_range: tuple[float, float] = (0.1, 10.0)
    q_range: tuple[float, float] = (0.25, 1.0)

    def __post_init__(self):
        if (self.d is None) == (self.block is None):
            raise FlowError("exactly one of d or block must be given")
        if self.d is not None and self.d < 1:
            raise FlowError("d must be >= 1")
        if self.block is not None:
            s, t = self.block
            if s < 1 or t < 0:
                raise FlowError("block sizes need s >= 1, t >= 0")
        lo, hi = self.lambda_range
        if not 0 < lo <= hi:
            raise FlowError("invalid lambda range")
        lo, hi = self.q_range
        if not 0 < lo <= hi:
            raise FlowError("invalid q range")

    @property
    def tri_size(self) -> int:
        """Number of factor dimensions (the s or d of the Cholesky head)."""
        return self.d if self.d is not None else self.block[0]

    @property
    def dim(self) -> int:
        m = self.tri_size
        extra = 0 if self.block is None else self.block[0] * self.block[1]
        return m * (m + 1) // 2 + extra

    @property
    def n_sos_params(self) -> int:
        # k logits, k raw slopes, k offsets, raw amplitude, shift
        return 3 * self.k + 2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["block"] = list(self.block) if self.block else None
        out["lambda_range"] = list(self.lambda_range)
        out["q_range"] = list(self.q_range)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FlowConfig":
        data = dict(data)
        if data.get("block") is not None:
            data["block"] = tuple(data["block"])
        data["lambda_range"] = tuple(data["lambda_range"])
        data["q_range"] = tuple(data["q_range"])
        return cls(**data)


# ------------------------------------------------------------------ SoS layer

@dataclass
class SoSLayerParams:
    """Constrained Sum-of-Sigmoids parameters for one dimension (or broadcast arrays).

    ``v`` sums to one over the last axis; ``w`` and ``a`` are positive. ``c`` is an
    additive shift (zero reproduces the bare sum-of-sigmoids map).
    """

    v: np.ndarray
    w: np.ndarray
    b: np.ndarray
    a: float | np.ndarray
    s: float = 10.0
    c: float | np.ndarray = 0.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if np.any(self.v <= 0) or not np.allclose(self.v.sum(axis=-1), 1.0):
            raise FlowError("mixture weights must be positive and sum to one")
        if np.any(self.w <= 0) or np.any(np.asarray(self.a) <= 0) or self.s <= 0:
            raise FlowError("slopes, amplitude and s must be positive")

    @classmethod
    def random(cls, k: int, rng: np.random.Generator, s: float = 10.0) -> "SoSLayerParams":
        logits = rng.normal(size=k)
        v = np.exp(logits - logits.max())
        return cls(v=v / v.sum(), w=rng.uniform(0.1, 3.0, k), b=rng.normal(0, 2, k),
                   a=rng.uniform(0.1, 5.0), s=s, c=rng.normal())


def _sos(z, v, w, b, a, c, s):
    """Graph-level Sum-of-Sigmoids map; parameters carry a trailing k axis where needed.

    Returns (y, log phi'(z)).
    """
    z = dc._const(z)
    u = w * dc.reshape(z, z.shape + (1,)) + b
    sig = dc.sigmoid(u)
    y = a * dc.sum(v * sig, axis=-1) + c + dc.softplus(z - s) - dc.softplus(-z - s)
    body = a * dc.sum(v * w * sig * (1.0 - sig), axis=-1)
    deriv = body + dc.sigmoid(z - s) + dc.sigmoid(-z - s)
    return y, dc.log(deriv)


@njit(cache=True, fastmath=True, error_model="numpy")
def _sig(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, fastmath=True, error_model="numpy")
def _splus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@njit(cache=True, fastmath=True, error_model="numpy")
def _sos_raw_kernel(z, raw, k, s, want_grad, gy, gl, gz, graw):
    """Forward (and optionally backward) of the SoS map over rows of ``raw``.

    Returns (y, log phi'). When ``want_grad`` the adjoints w.r.t. z and raw are
    written into gz / graw given upstream adjoints gy (for y) and gl (for log phi').
    """
    n = z.shape[0]
    y = np.empty(n)
    ld = np.empty(n)
    v = np.empty(k)
    w = np.empty(k)
    sg = np.empty(k)
    for r in range(n):
        zr = z[r]
        mx = raw[r, 0]
        for j in range(1, k):
            mx = max(mx, raw[r, j])
        tot = 0.0
        for j in range(k):
            v[j] = math.exp(raw[r, j] - mx)
            tot += v[j]
        for j in range(k):
            v[j] /= tot
            w[j] = _splus(raw[r, k + j])
        a = _splus(raw[r, 3 * k])
        c = raw[r, 3 * k + 1]
        sum_vs = 0.0
        body = 0.0
        for j in range(k):
            sg[j] = _sig(w[j] * zr + raw[r, 2 * k + j])
            sum_vs += v[j] * sg[j]
            body += v[j] * w[j] * sg[j] * (1.0 - sg[j])
        tp = _sig(zr - s)
        tm = _sig(-zr - s)
        deriv = a * body + tp + tm
        y[r] = a * sum_vs + c + _splus(zr - s) - _splus(-zr - s)
        ld[r] = math.log(deriv)
        if not want_grad:
            continue
        g_y = gy[r]
        gli = gl[r] / deriv
        dd = 0.0
        dot = 0.0
        for j in range(k):
            d1 = sg[j] * (1.0 - sg[j])
            d2 = d1 * (1.0 - 2.0 * sg[j])
            dd += v[j] * w[j] * w[j] * d2
            g_v = a * (g_y * sg[j] + gli * w[j] * d1)
            graw[r, j] = g_v  # softmax chain applied below
            dot += g_v * v[j]
            g_w = a * v[j] * (g_y * d1 * zr + gli * (d1 + w[j] * d2 * zr))
            graw[r, k + j] = g_w * _sig(raw[r, k + j])
            graw[r, 2 * k + j] = a * v[j] * (g_y * d1 + gli * w[j] * d2)
        for j in range(k):
            graw[r, j] = v[j] * (graw[r, j] - dot)
        graw[r, 3 * k] = (g_y * sum_vs + gli * body) * _sig(raw[r, 3 * k])
        graw[r, 3 * k + 1] = g_y
        dd = a * dd + tp * (1.0 - tp) - tm * (1.0 - tm)
        gz[r] = g_y * deriv + gli * dd
    return y, ld


def sos_from_raw(z, raw, k: int, s: float):
    """Sum-of-Sigmoids layer as one tape primitive, straight from raw conditioner output.

    ``raw`` (..., D, 3k+2) holds [mixture logits, raw slopes, offsets, raw amplitude,
    shift]; constraints (softmax, softplus) are applied inside. Returns a Var of
    shape (..., D, 2) stacking y and log phi'(z). Gradients are closed form; the
    composite :func:`_sos` on generic primitives computes the same map.
    """
    z, raw = dc._const(z), dc._const(raw)
    shape = z.value.shape
    zf = np.ascontiguousarray(z.value.reshape(-1))
    rf = np.ascontiguousarray(raw.value.reshape(-1, raw.value.shape[-1]))
    dummy = np.empty(0)
    y, ld = _sos_raw_kernel(zf, rf, k, float(s), False, dummy, dummy, dummy, np.empty((0, 0)))
    out = np.stack([y.reshape(shape), ld.reshape(shape)], axis=-1)
    cache = {}

    def _grads(g):
        key = id(g)
        if cache.get("key") != key:
            gz = np.empty_like(zf)
            graw = np.empty_like(rf)
            gy = np.ascontiguousarray(g[..., 0].reshape(-1))
            gl = np.ascontiguousarray(g[..., 1].reshape(-1))
            _sos_raw_kernel(zf, rf, k, float(s), True, gy, gl, gz, graw)
            cache.update(key=key, gz=gz.reshape(shape), graw=graw.reshape(raw.value.shape))
        return cache

    return dc._make(out, (z, raw), (lambda g: _grads(g)["gz"], lambda g: _grads(g)["graw"]))


def sos_forward(z, params: SoSLayerParams):
    """Evaluate the monotone map and its log-derivative (numpy in, numpy out)."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(params.a, dtype=np.float64)
    c = np.asarray(params.c, dtype=np.float64)
    y, ld = _sos(Var(z), params.v, params.w, params.b, a, c, params.s)
    return y.value, ld.value


def _sos_np(z, v, w, b, a, c, s):
    u = w * z[..., None] + b
    sig = dc._sigmoid(u)
    y = a * np.sum(v * sig, axis=-1) + c + dc._softplus(z - s) - dc._softplus(-z - s)
    d = a * np.sum(v * w * sig * (1.0 - sig), axis=-1) + dc._sigmoid(z - s) + dc._sigmoid(-z - s)
    return y, d


def _sos_inverse_np(y, v, w, b, a, c, s, tol=1e-10, max_widen=60):
    """Vectorized safeguarded Newton/bisection inverse of the monotone SoS map."""
    y = np.asarray(y, dtype=np.float64)
    lo = np.full(y.shape, -1.0)
    hi = np.full(y.shape, 1.0)
    for _ in range(max_widen):
        flo, _ = _sos_np(lo, v, w, b, a, c, s)
        fhi, _ = _sos_np(hi, v, w, b, a, c, s)
        bad_lo, bad_hi = flo > y, fhi < y
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, lo * 2.0, lo)
        hi = np.where(bad_hi, hi * 2.0, hi)
    else:
        raise FlowError("could not bracket the SoS inverse")
    z = 0.5 * (lo + hi)
    for _ in range(300):
        f, d = _sos_np(z, v, w, b, a, c, s)
        r = f - y
        lo = np.where(r < 0, z, lo)
        hi = np.where(r > 0, z, hi)
        step = z - r / d
        inside = (step >= lo) & (step <= hi)
        # stop only at round-off level: a loose residual test costs |r| / slope in z
        conv = np.abs(r) <= 4 * np.finfo(float).eps * (1.0 + np.abs(y))
        z_new = np.where(inside, step, 0.5 * (lo + hi))
        done = conv | (hi - lo <= 1e-14 * (1.0 + np.abs(z)))
        z = np.where(conv, z, z_new)
        if done.all():
            break
    f, _ = _sos_np(z, v, w, b, a, c, s)
    if np.any(np.abs(f - y) > tol * max(1.0, float(np.max(np.abs(y), initial=0.0)))):
        raise FlowError("SoS inverse did not reach tolerance")
    return z


def sos_inverse(y, params: SoSLayerParams, tol: float = 1e-10):
    """Numerically invert :func:`sos_forward`; ``|forward(z) - y| <= tol`` on return."""
    if tol <= 0:
        raise FlowError("tol must be positive")
    return _sos_inverse_np(y, params.v, params.w, params.b, np.asarray(params.a),
                           np.asarray(params.c), params.s, tol=tol)


# ------------------------------------------------------------------ matrix head

def tril_indices(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major order over the lower triangle: (0,0), (1,0), (1,1), (2,0), ..."""
    rows, cols = [], []
    for i in range(m):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


def diag_positions(m: int) -> np.ndarray:
    return np.array([i * (i + 1) // 2 + i for i in range(m)])


def fill_triangular(v, m: int | None = None):
    """Vector of length m(m+1)/2 -> lower-triangular m x m (batched over leading axes)."""
    n = dc.value_of(v).shape[-1]
    if m is None:
        m = int(round((math.sqrt(8 * n + 1) - 1) / 2))
    if m * (m + 1) // 2 != n:
        raise FlowError(f"length {n} is not triangular for m={m}")
    rows, cols = tril_indices(m)
    if isinstance(v, Var):
        return dc.scatter_last2(v, rows, cols, m, m)
    out = np.zeros(np.shape(v)[:-1] + (m, m))
    out[..., rows, cols] = v
    return out


def unfill_triangular(L):
    m = np.shape(L)[-1]
    rows, cols = tril_indices(m)
    return np.asarray(L)[..., rows, cols]


def positive_diagonal(L):
    """Softplus on the diagonal of lower-triangular L; returns (L', logdet)."""
    L = np.asarray(L, dtype=np.float64)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    out = L.copy()
    m = L.shape[-1]
    out[..., np.arange(m), np.arange(m)] = dc._softplus(diag)
    logdet = -dc._softplus(-diag).sum(axis=-1)
    return out, logdet


def cholesky_product(L):
    """Omega = L L^T with log|det J| = m log 2 + sum_i (m - i + 1) log L_ii (1-based i)."""
    L = np.asarray(L, dtype=np.float64)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag <= 0):
        raise FlowError("Cholesky product needs a positive diagonal")
    m = L.shape[-1]
    omega = L @ np.swapaxes(L, -1, -2)
    omega = 0.5 * (omega + np.swapaxes(omega, -1, -2))
    logdet = m * math.log(2.0) + np.sum((m - np.arange(m)) * np.log(diag), axis=-1)
    return omega, logdet


def _head_graph(x, m: int):
    """Graph version of fill -> positive diagonal -> Cholesky product on x (B, m(m+1)/2)."""
    pos = diag_positions(m)
    mask = np.zeros(x.shape[-1])
    mask[pos] = 1.0
    x_pos = x + mask * (dc.softplus(x) - x)
    diag_raw = dc.take(x, pos, axis=-1)
    logdet_pd = dc.sum(dc.log_sigmoid(diag_raw), axis=-1)
    log_diag = dc.log(dc.take(x_pos, pos, axis=-1))
    L = fill_triangular(x_pos, m)
    logdet_chol = m * math.log(2.0) + dc.sum(log_diag * (m - np.arange(m)), axis=-1)
    return L, log_diag, logdet_pd + logdet_chol


# ------------------------------------------------------------------ hypernetwork

def made_masks(dim: int, hidden: int, n_hidden: int, n_out_per_dim: int, n_cond: int = 2):
    """Masks for a MADE whose output block i depends on inputs < i and on the condition.

    Input layout is [z_1..z_dim, cond_1..cond_n]; condition units have degree 0.
    """
    in_deg = np.concatenate([np.arange(1, dim + 1), np.zeros(n_cond, dtype=int)])
    hid_deg = np.arange(hidden) % max(dim, 1)
    masks = [(in_deg[:, None] <= hid_deg[None, :]).astype(np.float64)]
    for _ in range(n_hidden - 1):
        masks.append((hid_deg[:, None] <= hid_deg[None, :]).astype(np.float64))
    out_deg = np.repeat(np.arange(1, dim + 1), n_out_per_dim)
    masks.append((hid_deg[:, None] < out_deg[None, :]).astype(np.float64))
    return masks


def _inv_softplus(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def _identity_init(k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, float]:
    """Raw SoS outputs making phi(0) = 0 and phi'(0) = 1 with unit slopes."""
    b = np.linspace(-3.0, 3.0, k) if k > 1 else np.zeros(1)
    sig = dc._sigmoid(b)
    a = 1.0 / np.mean(sig * (1.0 - sig))
    c = -a * np.mean(sig)
    return np.zeros(k), np.full(k, _inv_softplus(1.0)), b, _inv_softplus(a), c


class ConditionalMatrixFlow:
    """Flow definition plus its flat parameter vector (the FlowParameters)."""

    def __init__(self, config: FlowConfig, params: np.ndarray | None = None, seed: int = 0):
        self.config = config
        self.layout = self._layout()
        self.n_params = sum(int(np.prod(shape)) for _, shape in self.layout)
        cfg = config
        self.masks = made_masks(cfg.dim, cfg.hidden, cfg.n_hidden, cfg.n_sos_params)
        if params is None:
            params = self.init_params(np.random.default_rng(seed))
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise FlowError(f"expected {self.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise FlowError("non-finite flow parameters")
        self.params = params

    # -- parameter bookkeeping
    def _layout(self):
        cfg = self.config
        D, H, P = cfg.dim, cfg.hidden, cfg.n_sos_params
        out = []
        for layer in range(cfg.n_layers):
            fan_in = D + 2
            for h in range(cfg.n_hidden):
                out.append((f"l{layer}.W{h}", (fan_in, H)))
                out.append((f"l{layer}.b{h}", (H,)))
                fan_in = H
            out.append((f"l{layer}.Wout", (H, D * P)))
            out.append((f"l{layer}.bout", (D * P,)))
        return out

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        chunks = []
        logits, raw_w, b, raw_a, c = _identity_init(cfg.k)
        per_dim = np.concatenate([logits, raw_w, b, [raw_a, c]])
        for name, shape in self.layout:
            if name.endswith("bout"):
                chunks.append(np.tile(per_dim, cfg.dim))
            elif name.endswith("Wout"):
                chunks.append(rng.normal(0.0, 1e-3, shape).ravel())
            elif ".W" in name:
                chunks.append(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape).ravel())
            else:
                chunks.append(np.zeros(shape).ravel())
        return np.concatenate(chunks)

    def unflatten(self, theta):
        out, pos = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            piece = theta[pos:pos + size]
            out[name] = dc.reshape(piece, shape) if isinstance(theta, Var) else piece.reshape(shape)
            pos += size
        return out

    # -- conditioning
    def embed_condition(self, lam, q) -> np.ndarray:
        """(log lambda, q) rescaled to [-1, 1] over the configured ranges; shape (B, 2)."""
        lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        if np.any(lam <= 0) or np.any(q <= 0):
            raise FlowError("lambda and q must be positive")

        def scale(x, lo, hi):
            if hi == lo:
                return np.zeros_like(x)
            return 2.0 * (x - lo) / (hi - lo) - 1.0

        l1, l2 = self.config.lambda_range
        q1, q2 = self.config.q_range
        return np.stack([scale(np.log(lam), math.log(l1), math.log(l2)), scale(q, q1, q2)], axis=-1)

    def check_condition(self, lam, q, slack: float = 1e-9):
        l1, l2 = self.config.lambda_range
        q1, q2 = self.config.q_range
        lam, q = np.asarray(lam), np.asarray(q)
        if np.any(lam < l1 * (1 - slack)) or np.any(lam > l2 * (1 + slack)):
            raise FlowError(f"lambda outside trained range [{l1}, {l2}]")
        if np.any(q < q1 - slack) or np.any(q > q2 + slack):
            raise FlowError(f"q outside trained range [{q1}, {q2}]")

    # -- graph-level building blocks
    def conditioner(self, p: dict, layer: int, z, cond: np.ndarray):
        """MADE hypernetwork output reshaped to (B, D, n_sos_params)."""
        cfg = self.config
        h = dc.concat([z, cond], axis=-1)
        for i in range(cfg.n_hidden):
            W = p[f"l{layer}.W{i}"] * self.masks[i]
            h = dc.tanh(h @ W + p[f"l{layer}.b{i}"])
        W = p[f"l{layer}.Wout"] * self.masks[-1]
        out = h @ W + p[f"l{layer}.bout"]
        return dc.reshape(out, out.shape[:-1] + (cfg.dim, cfg.n_sos_params))

    def split_sos(self, raw):
        k = self.config.k
        logv = dc.log_softmax(raw[..., 0:k], axis=-1)
        v = dc.exp(logv)
        w = dc.softplus(raw[..., k:2 * k])
        b = raw[..., 2 * k:3 * k]
        a = dc.softplus(raw[..., 3 * k])
        c = raw[..., 3 * k + 1]
        return v, w, b, a, c

    def layer_forward(self, p: dict, layer: int, z, cond: np.ndarray):
        """One masked autoregressive SoS layer in natural order: (z', logdet)."""
        raw = self.conditioner(p, layer, z, cond)
        out = sos_from_raw(z, raw, self.config.k, self.config.s_const)
        return out[..., 0], dc.sum(out[..., 1], axis=-1)

    def generate_graph(self, theta, z: np.ndarray, lam, q):
        """Differentiable generation. Returns dict of Vars: L, log_diag, omega12, log_q."""
        cfg = self.config
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[-1] != cfg.dim:
            raise FlowError(f"base sample has {z.shape[-1]} dims, flow expects {cfg.dim}")
        cond = self.embed_condition(lam, q)
        if cond.shape[0] == 1 and z.shape[0] > 1:
            cond = np.repeat(cond, z.shape[0], axis=0)
        p = self.unflatten(theta)
        x = Var(z)
        total = None
        for layer in range(cfg.n_layers):
            if layer % 2 == 1:
                x = dc.flip_last(x)
            x, ld = self.layer_forward(p, layer, x, cond)
            if layer % 2 == 1:
                x = dc.flip_last(x)
            total = ld if total is None else total + ld
        m = cfg.tri_size
        ntri = m * (m + 1) // 2
        tri = x if cfg.block is None else x[..., :ntri]
        L, log_diag, ld_head = _head_graph(tri, m)
        total = ld_head if total is None else total + ld_head
        log_base = -0.5 * np.sum(z * z, axis=-1) - 0.5 * cfg.dim * LOG_2PI
        out = {"L": L, "log_diag": log_diag, "log_q": log_base - total, "z": z}
        if cfg.block is not None:
            s, t = cfg.block
            out["omega12"] = dc.reshape(x[..., ntri:], z.shape[:-1] + (s, t))
        return out

    # -- numpy API
    def generate(self, z, lam, q) -> "PrecisionBatch":
        g = self.generate_graph(self.params, z, lam, q)
        L = g["L"].value
        omega = L @ np.swapaxes(L, -1, -2)
        omega = 0.5 * (omega + np.swapaxes(omega, -1, -2))
        o12 = g["omega12"].value if "omega12" in g else None
        return PrecisionBatch(omega=omega, L=L, log_q=g["log_q"].value, z=g["z"], omega12=o12,
                              lam=np.broadcast_to(lam, (L.shape[0],)).astype(float),
                              q=np.broadcast_to(q, (L.shape[0],)).astype(float))

    def sample(self, n: int, lam, q, rng: np.random.Generator) -> "PrecisionBatch":
        z = rng.standard_normal((n, self.config.dim))
        return self.generate(z, lam, q)

    def layer_sos_params(self, layer: int, z, lam, q):
        """Constrained SoS parameters for a layer input ``z`` (natural order)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        cond = np.repeat(self.embed_condition(lam, q), z.shape[0], axis=0) \
            if np.ndim(lam) == 0 else self.embed_condition(lam, q)
        p = self.unflatten(self.params)
        raw = self.conditioner(p, layer, Var(z), cond)
        return [t.value for t in self.split_sos(raw)]

    def invert(self, omega, lam, q, omega12=None) -> np.ndarray:
        """Recover base samples from matrices (numerical SoS inversion, sequential per dim)."""
        cfg = self.config
        omega = np.asarray(omega, dtype=np.float64)
        single = omega.ndim == 2
        omega = np.atleast_3d(omega) if not single else omega[None]
        L = np.linalg.cholesky(omega)
        diag = np.diagonal(L, axis1=-2, axis2=-1)
        x = unfill_triangular(L)
        x[..., diag_positions(cfg.tri_size)] = np.log(np.expm1(diag))
        if cfg.block is not None:
            o12 = np.asarray(omega12, dtype=np.float64).reshape(omega.shape[0], -1)
            x = np.concatenate([x, o12], axis=-1)
        for layer in reversed(range(cfg.n_layers)):
            if layer % 2 == 1:
                x = x[..., ::-1]
            zin = np.zeros_like(x)
            for i in range(cfg.dim):
                v, w, b, a, c = self.layer_sos_params(layer, zin, lam, q)
                zin[:, i] = _sos_inverse_np(x[:, i], v[:, i], w[:, i], b[:, i], a[:, i], c[:, i],
                                            cfg.s_const)
            x = zin[..., ::-1] if layer % 2 == 1 else zin
        return x[0] if single else x

    # -- persistence
    def save(self, path: str | Path, extra: dict | None = None):
        save_checkpoint(path, self, extra)

    @classmethod
    def load(cls, path: str | Path) -> "ConditionalMatrixFlow":
        flow, _ = load_checkpoint(path)
        return flow


@dataclass
class PrecisionBatch:
    """A batch of generated precision matrices (full mode) or (Omega11, Omega12) pairs."""

    omega: np.ndarray
    L: np.ndarray
    log_q: np.ndarray
    z: np.ndarray
    omega12: np.ndarray | None = None
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    q: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return self.omega.shape[0]

    def __getitem__(self, i) -> "PrecisionSample":
        return PrecisionSample(omega=self.omega[i], log_q=float(self.log_q[i]), z=self.z[i],
                               omega12=None if self.omega12 is None else self.omega12[i],
                               lam=float(self.lam[i]), q=float(self.q[i]))

    def entries(self) -> tuple[np.ndarray, list[tuple]]:
        """Flattened per-sample entries and their labels.

        Full mode: upper triangle (i <= j) of Omega. Block mode: upper triangle of
        Omega11 followed by all of Omega12, labelled ("12", i, j).
        """
        m = self.omega.shape[-1]
        iu, ju = np.triu_indices(m)
        cols = [self.omega[:, iu, ju]]
        labels = [(int(i), int(j)) for i, j in zip(iu, ju)]
        if self.omega12 is not None:
            s, t = self.omega12.shape[-2:]
            cols.append(self.omega12.reshape(len(self), -1))
            labels += [("12", i, j) for i in range(s) for j in range(t)]
        return np.concatenate(cols, axis=-1), labels


@dataclass
class PrecisionSample:
    omega: np.ndarray
    log_q: float
    z: np.ndarray
    omega12: np.ndarray | None = None
    lam: float = float("nan")
    q: float = float("nan")

    def to_json(self) -> dict:
        out = {"lambda": self.lam, "q": self.q, "log_q": self.log_q,
               "omega": self.omega.tolist()}
        if self.omega12 is not None:
            out["omega12"] = self.omega12.tolist()
        return out


def cmf_generate(z, lam, q, flow: ConditionalMatrixFlow) -> PrecisionBatch:
    return flow.generate(z, lam, q)


def block_cmf_generate(z, lam, q, flow: ConditionalMatrixFlow) -> PrecisionBatch:
    if flow.config.block is None:
        raise FlowError("flow is not configured for block mode")
    return flow.generate(z, lam, q)


# ------------------------------------------------------------------ checkpoints
#
# Layout (all integers little-endian):
#   bytes 0-7    magic b"CMFLOWCK"
#   bytes 8-11   uint32 format version
#   bytes 12-15  uint32 header length H
#   next H bytes UTF-8 JSON header (sorted keys): flow config, n_params, extra metadata
#   remainder    n_params float64 values, little-endian, in FlowParameters layout order

def save_checkpoint(path, flow: ConditionalMatrixFlow, extra: dict | None = None):
    header = {"format_version": CHECKPOINT_VERSION, "flow": flow.config.to_dict(),
              "n_params": flow.n_params, "layout": [[n, list(s)] for n, s in flow.layout],
              "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(flow.params.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ConditionalMatrixFlow, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FlowError(f"{path} is not a flow checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise FlowError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    params = np.frombuffer(raw[16 + hlen:], dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise FlowError("checkpoint parameter count mismatch")
    flow = ConditionalMatrixFlow(FlowConfig.from_dict(header["flow"]), params)
    return flow, header

"""Synthetic ground truth, Gaussian sampling, CSV ingestion and scatter matrices."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Centered observations with their scatter matrix S = X^T X (never divided by n)."""

    X: np.ndarray
    S: np.ndarray
    columns: list[str] = field(default_factory=list)
    s: int | None = None
    t: int | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def S11(self):
        return self.S[:self.s, :self.s]

    @property
    def S12(self):
        return self.S[:self.s, self.s:]

    @property
    def S22(self):
        return self.S[self.s:, self.s:]

    @classmethod
    def from_observations(cls, X, columns=None, s=None) -> "Dataset":
        X = center(np.asarray(X, dtype=np.float64))
        cols = list(columns) if columns is not None else [f"x{i}" for i in range(X.shape[1])]
        t = None if s is None else X.shape[1] - s
        return cls(X=X, S=scatter_matrix(X), columns=cols, s=s, t=t)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.X:
                w.writerow([repr(float(v)) for v in row])


@dataclass
class GroundTruth:
    omega: np.ndarray
    edges: set[tuple[int, int]]
    alpha: float

    @property
    def d(self) -> int:
        return self.omega.shape[0]

    def edge_signs(self) -> dict[tuple[int, int], int]:
        return {(i, j): int(np.sign(self.omega[i, j])) for i, j in sorted(self.edges)}


def center(X: np.ndarray) -> np.ndarray:
    return X - X.mean(axis=0, keepdims=True)


def scatter_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    S = X.T @ X
    return 0.5 * (S + S.T)


def realized_edges(omega: np.ndarray, tol: float = 0.0) -> set[tuple[int, int]]:
    d = omega.shape[0]
    return {(i, j) for i in range(d) for j in range(i + 1, d) if abs(omega[i, j]) > tol}


def generate_sparse_precision(d: int, alpha: float, seed: int | np.random.Generator,
                              low: float = 0.3, high: float = 0.9) -> GroundTruth:
    """Sparse SPD precision Omega = A A^T from a unit lower-triangular factor A.

    Each strictly-lower entry of A is active with probability 1 - alpha and then
    drawn uniformly from +-[low, high].
    """
    if d < 2:
        raise DataError("d must be at least 2")
    if not 0 <= alpha < 1:
        raise DataError("alpha must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    A = np.eye(d)
    rows, cols = np.tril_indices(d, -1)
    active = rng.random(len(rows)) < 1.0 - alpha
    mags = rng.uniform(low, high, len(rows))
    signs = rng.choice([-1.0, 1.0], len(rows))
    A[rows, cols] = np.where(active, mags * signs, 0.0)
    omega = A @ A.T
    # structural zeros stay exact: products of exact zeros
    return GroundTruth(omega=omega, edges=realized_edges(omega), alpha=alpha)


def sample_gaussian(gt: GroundTruth, n: int, seed: int | np.random.Generator) -> Dataset:
    """Rows from N(0, Omega^-1): x = L^-T e with Omega = L L^T, then centered."""
    if n < 1:
        raise DataError("n must be positive")
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(gt.omega)
    E = rng.standard_normal((gt.d, n))
    X = solve_triangular(L.T, E, lower=False).T
    return Dataset.from_observations(X)


def load_csv(path, query_columns: list[str] | None = None) -> Dataset:
    """Read a numeric CSV with a header; drop incomplete rows; center columns.

    With ``query_columns`` the queries are moved to the front and the block sizes
    (s, t) are set.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        if len(set(header)) != len(header):
            raise DataError("duplicate column names")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            cells = [c.strip() for c in row]
            if any(c == "" or c.lower() in ("na", "nan") for c in cells):
                continue
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric cell") from None
            if not all(math.isfinite(v) for v in vals):
                continue
            rows.append(vals)
    if not rows:
        raise DataError("no complete rows")
    X = np.array(rows, dtype=np.float64)
    s = None
    if query_columns:
        missing = [c for c in query_columns if c not in header]
        if missing:
            raise DataError(f"unknown query column(s): {missing}")
        order = [header.index(c) for c in query_columns]
        order += [i for i in range(len(header)) if i not in order]
        X = X[:, order]
        header = [header[i] for i in order]
        s = len(query_columns)
    return Dataset.from_observations(X, header, s=s)


def read_edges(path) -> dict[tuple[int, int], dict]:
    """Edge list CSV (i, j, sign[, lower, upper]) -> {(i, j): row}."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i, j = int(row["i"]), int(row["j"])
            out[(min(i, j), max(i, j))] = row
    return out


def write_ground_truth(gt: GroundTruth, path_prefix):
    """Writes <prefix>_omega.csv (dense matrix) and <prefix>_edges.csv."""
    prefix = Path(path_prefix)
    np.savetxt(f"{prefix}_omega.csv", gt.omega, delimiter=",", fmt="%.17g")
    with open(f"{prefix}_edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "sign", "value"])
        for (i, j), sg in gt.edge_signs().items():
            w.writerow([i, j, sg, repr(float(gt.omega[i, j]))])

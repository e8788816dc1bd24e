"""Evaluation metrics: NMSE, normalised EMD and amplitude-weighted cosine distance."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse
from scipy.spatial.distance import cdist

# POT probes every array backend on import (TensorFlow, JAX, ...); only numpy is needed
for _backend in ("PYTORCH", "JAX", "TENSORFLOW", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

from .geometry import SourceSpace  # noqa: E402

MARGINAL_TOL = 1e-9


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TransportProblem:
    supply: np.ndarray
    demand: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.supply, dtype=np.float64)
        b = np.asarray(self.demand, dtype=np.float64)
        c = np.asarray(self.cost, dtype=np.float64)
        n = a.size
        if a.shape != (n,) or b.shape != (n,) or c.shape != (n, n):
            raise MetricError("supply, demand and cost shapes disagree")
        if (a < 0).any() or (b < 0).any() or (c < 0).any():
            raise MetricError("negative mass or cost")
        if abs(a.sum() - 1) > MARGINAL_TOL or abs(b.sum() - 1) > MARGINAL_TOL:
            raise MetricError(
                f"marginals must each sum to 1 (got {a.sum():.12g} and {b.sum():.12g})"
            )
        object.__setattr__(self, "supply", a)
        object.__setattr__(self, "demand", b)
        object.__setattr__(self, "cost", c)


def _check_truth(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise MetricError(f"expected an (N, 3) field, got {x.shape}")
    if not np.any(x):
        raise MetricError("ground truth is identically zero")
    return x


def nmse(x: np.ndarray, xhat: np.ndarray) -> float:
    x = _check_truth(x)
    xhat = np.asarray(xhat, dtype=np.float64)
    return float(((x - xhat) ** 2).sum() / (x**2).sum())


def weighted_cos(x: np.ndarray, xhat: np.ndarray) -> float:
    """``1 − Σ W_i cos(x_i, x̂_i)`` with ``W_i = ‖x_i‖ / Σ‖x_j‖``; zero x̂_i counts as cosine 0."""
    x = _check_truth(x)
    xhat = np.asarray(xhat, dtype=np.float64)
    nx = np.sqrt((x**2).sum(axis=1))
    nh = np.sqrt((xhat**2).sum(axis=1))
    denom = nx * nh
    cos = np.divide((x * xhat).sum(axis=1), denom, out=np.zeros_like(nx), where=denom > 0)
    return float(1.0 - (nx / nx.sum()) @ cos)


def amplitudes(x: np.ndarray) -> np.ndarray:
    """Per-voxel magnitude normalised to unit total."""
    a = np.sqrt((np.asarray(x, dtype=np.float64) ** 2).sum(axis=1))
    total = a.sum()
    if not total > 0:
        raise MetricError("field has zero total amplitude")
    return a / total


def emd_exact(p: TransportProblem, metric_cost: bool = True):
    """Optimal transport cost and plan (sparse ``n×n``) by network simplex.

    With ``metric_cost`` the mass shared by both marginals is left in place and
    only the excess is transported; this is exact whenever the cost obeys the
    triangle inequality and shrinks the LP considerably.
    """
    a, b, c = p.supply, p.demand, p.cost
    n = a.size
    if metric_cost:
        shared = np.minimum(a, b)
        ra, rb = a - shared, b - shared
    else:
        shared = np.zeros(n)
        ra, rb = a, b
    src = np.flatnonzero(ra > 0)
    dst = np.flatnonzero(rb > 0)
    rows = [np.flatnonzero(shared > 0)]
    cols = [rows[0]]
    vals = [shared[rows[0]]]
    cost = 0.0
    if src.size and dst.size:
        sa, sb = ra[src], rb[dst]
        sb = sb * (sa.sum() / sb.sum())
        sub = np.ascontiguousarray(c[np.ix_(src, dst)])
        plan, log = ot.emd(sa, sb, sub, numItermax=50_000_000, log=True)
        if log.get("warning"):
            raise MetricError(f"network simplex failed: {log['warning']}")
        i, j = np.nonzero(plan)
        rows.append(src[i])
        cols.append(dst[j])
        vals.append(plan[i, j])
        cost = float((plan[i, j] * sub[i, j]).sum())
    plan = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    return cost, plan


def emd_sinkhorn(p: TransportProblem, eps_rel: float = 1e-3, n_iter: int = 1000) -> float:
    """Entropic approximation, for large problems where the exact solve is too slow."""
    reg = eps_rel * float(p.cost.mean())
    plan = ot.sinkhorn(p.supply, p.demand, p.cost, reg, method="sinkhorn_log", numItermax=n_iter)
    return float((plan * p.cost).sum())


@lru_cache(maxsize=8)
def _distances(digest: str, centers_bytes: bytes) -> np.ndarray:
    pts = np.frombuffer(centers_bytes, dtype=np.float64).reshape(-1, 3)
    d = cdist(pts, pts)
    d.flags.writeable = False
    return d


def distance_matrix(space: SourceSpace) -> np.ndarray:
    """Pairwise voxel-centre distances in mm (cached per source space)."""
    centers = np.ascontiguousarray(space.centers_mm, dtype=np.float64)
    return _distances(space.digest(), centers.tobytes())


def emd_fields(x: np.ndarray, xhat: np.ndarray, space: SourceSpace, sinkhorn: bool = False) -> float:
    p = TransportProblem(amplitudes(x), amplitudes(xhat), distance_matrix(space))
    return emd_sinkhorn(p) if sinkhorn else emd_exact(p)[0]


def emd_to_uniform(x: np.ndarray, space: SourceSpace, sinkhorn: bool = False) -> float:
    """NEMD denominator; compute once per ground truth when scoring several estimates."""
    return emd_fields(x, np.ones((space.n, 3)), space, sinkhorn)


def nemd(x: np.ndarray, xhat: np.ndarray, space: SourceSpace, denominator: float | None = None,
         sinkhorn: bool = False) -> float:
    """``EMD(x, x̂) / EMD(x, uniform)`` on normalised voxel amplitudes."""
    x = _check_truth(x)
    if denominator is None:
        denominator = emd_to_uniform(x, space, sinkhorn)
    if not denominator > 0:
        raise MetricError("ground truth is already uniform; NEMD undefined")
    return emd_fields(x, xhat, space, sinkhorn) / denominator


def evaluate(x: np.ndarray, xhat: np.ndarray, space: SourceSpace,
             denominator: float | None = None) -> dict:
    """All three metrics; NEMD becomes NaN when the estimate is identically zero."""
    out = {"nmse": nmse(x, xhat), "wcos": weighted_cos(x, xhat)}
    try:
        out["nemd"] = nemd(x, xhat, space, denominator)
    except MetricError:
        if np.any(xhat):
            raise
        out["nemd"] = float("nan")
    return out

"""Linear pseudo-inverse operators for free-orientation lead fields.

All regularisation parameters are relative: the absolute Tikhonov weight is
``reg * trace(G) / M`` for the relevant sensor-space Gram matrix ``G``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorfile
from .geometry import LeadField

log = logging.getLogger(__name__)

METHODS = ("mne", "dspm", "sloreta", "eloreta", "pinv")
OPERATOR_FORMAT_VERSION = 1


class InverseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PseudoInverseOperator:
    kernel: np.ndarray  # (3N, M)
    method: str
    alpha: float
    iterations_used: int = 0
    converged: bool = True
    info: dict = field(default_factory=dict)
    weights: np.ndarray | None = None  # eLORETA (N, 3, 3) blocks

    def __post_init__(self):
        if self.method not in METHODS:
            raise InverseError(f"unknown method {self.method!r}")
        if not np.all(np.isfinite(self.kernel)):
            raise InverseError("operator kernel is not finite")

    @property
    def n(self) -> int:
        return self.kernel.shape[0] // 3

    @property
    def m(self) -> int:
        return self.kernel.shape[1]


def sym_sqrt(a: np.ndarray, inverse: bool = False, floor: float = 0.0):
    """Square root (or inverse square root) of symmetric PSD matrices, batched."""
    w, v = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))
    w = np.clip(w, floor, None)
    if inverse:
        w = np.where(w > 0, 1.0 / np.sqrt(np.where(w > 0, w, 1.0)), 0.0)
    else:
        w = np.sqrt(w)
    return (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)


def _blocks(gain: np.ndarray) -> np.ndarray:
    """(M, 3N) -> (N, M, 3)."""
    m = gain.shape[0]
    return gain.reshape(m, -1, 3).transpose(1, 0, 2)


def mne_operator(lf: LeadField, alpha: float = 0.05) -> PseudoInverseOperator:
    L = lf.gain
    if alpha < 0:
        raise InverseError("alpha must be non-negative")
    gram = L @ L.T
    lam = alpha * np.trace(gram) / L.shape[0]
    system = gram + lam * np.eye(L.shape[0])
    if np.linalg.cond(system) > 1e12:
        raise InverseError(
            "L L^T + alpha I is singular; use alpha > 0 (average-referenced lead fields "
            "always need regularisation)"
        )
    kernel = np.linalg.solve(system, L).T
    return PseudoInverseOperator(kernel, "mne", float(alpha))


def normalized_operator(lf: LeadField, alpha: float = 0.05, variant: str = "sloreta") -> PseudoInverseOperator:
    base = mne_operator(lf, alpha)
    K0 = base.kernel
    info = {}
    if variant == "dspm":
        norms = np.sqrt((K0**2).sum(axis=1))
        kernel = K0 / norms[:, None]
    elif variant == "sloreta":
        n = lf.n
        Kb = K0.reshape(n, 3, -1)  # (N, 3, M)
        R = Kb @ _blocks(lf.gain)  # (N, 3, 3) diagonal blocks of K0 L
        R = 0.5 * (R + R.transpose(0, 2, 1))
        w = np.linalg.eigvalsh(R)
        bad = w.min(axis=1) <= 0
        if bad.any():
            R[bad] += 1e-12 * np.eye(3)
            info["jittered_blocks"] = int(bad.sum())
            log.warning("sLORETA: %d resolution blocks not PD, jitter added", bad.sum())
        kernel = (sym_sqrt(R, inverse=True) @ Kb).reshape(3 * n, -1)
    else:
        raise InverseError(f"unknown variant {variant!r}")
    return PseudoInverseOperator(kernel, variant, float(alpha), info=info)


def eloreta_operator(lf: LeadField, reg: float = 0.05, tol: float = 1e-6,
                     max_iter: int = 100) -> PseudoInverseOperator:
    """Exact LORETA with per-voxel 3x3 weights.

    Iterates ``W_i <- sqrt(L_i^T (L W^-1 L^T + a H)^+ L_i)`` with the
    average-reference centring matrix ``H``; the final kernel is
    ``W^-1 L^T (L W^-1 L^T + a H)^+``.
    """
    if reg <= 0 or tol <= 0:
        raise InverseError("reg and tol must be positive")
    L = lf.gain
    m, n = L.shape[0], lf.n
    Lb = _blocks(L)  # (N, M, 3)
    H = np.eye(m) - np.full((m, m), 1.0 / m)
    W = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    Winv = W.copy()
    converged = False
    it = 0
    change = np.inf

    def gram_inverse(Winv):
        LW = np.einsum("nmk,nkj->nmj", Lb, Winv)  # L_i W_i^-1
        G = np.einsum("nmk,npk->mp", LW, Lb)
        lam = reg * np.trace(G) / m
        return np.linalg.pinv(G + lam * H, hermitian=True), lam

    for it in range(1, max_iter + 1):
        Minv, lam = gram_inverse(Winv)
        LM = np.einsum("mp,npk->nmk", Minv, Lb)
        S = np.einsum("nmk,nmj->nkj", Lb, LM)
        W_new = sym_sqrt(S)
        w_min = np.linalg.eigvalsh(W_new).min()
        if w_min < -1e-12 * np.abs(W_new).max():
            raise InverseError("eLORETA weight left the PSD cone")
        num = np.sqrt(((W_new - W) ** 2).sum(axis=(1, 2)))
        den = np.sqrt((W_new**2).sum(axis=(1, 2)))
        change = float((num / den).max())
        W = W_new
        top = np.linalg.eigvalsh(W).max(axis=1)
        Winv = sym_sqrt(S, inverse=True, floor=1e-24 * float(top.max()) ** 2)
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("eLORETA did not converge in %d iterations (last change %.2e)", max_iter, change)
    Minv, lam = gram_inverse(Winv)
    kernel = np.einsum("nkj,nmj->nkm", Winv, Lb).reshape(3 * n, m) @ Minv
    info = {"last_change": change, "lambda": float(lam)}
    return PseudoInverseOperator(kernel, "eloreta", float(reg), it, converged, info, W)


def pinv_operator(lf: LeadField, rcond: float = 1e-10) -> PseudoInverseOperator:
    if not 0 < rcond < 1:
        raise InverseError("rcond must lie in (0, 1)")
    u, s, vt = np.linalg.svd(lf.gain, full_matrices=False)
    keep = s >= rcond * s[0]
    kernel = (vt[keep].T / s[keep]) @ u[:, keep].T
    return PseudoInverseOperator(kernel, "pinv", float(rcond), info={"rank": int(keep.sum())})


def make_operator(lf: LeadField, method: str = "eloreta", reg: float | None = None) -> PseudoInverseOperator:
    """Build any supported operator; ``info["leadfield_digest"]`` records its lead field."""
    method = method.lower()
    if method == "eloreta":
        op = eloreta_operator(lf, 0.05 if reg is None else reg)
    elif method == "mne":
        op = mne_operator(lf, 0.05 if reg is None else reg)
    elif method in ("dspm", "sloreta"):
        op = normalized_operator(lf, 0.05 if reg is None else reg, method)
    elif method == "pinv":
        op = pinv_operator(lf, 1e-10 if reg is None else reg)
    else:
        raise InverseError(f"unknown method {method!r}")
    return dataclasses.replace(op, info={**op.info, "leadfield_digest": lf.digest()})


def apply(op: PseudoInverseOperator, y: np.ndarray) -> np.ndarray:
    """Source estimate ``K y`` as an (N, 3) field; accepts a (B, M) batch too."""
    y = np.asarray(y)
    if y.shape[-1] != op.m:
        raise InverseError(f"measurement length {y.shape[-1]} != operator M={op.m}")
    if y.ndim == 1:
        return (op.kernel @ y).reshape(op.n, 3)
    return (y @ op.kernel.T).reshape(y.shape[0], op.n, 3)


def mask_sensors(lf: LeadField, y: np.ndarray | None, dead) -> tuple[LeadField, np.ndarray | None]:
    """Zero the rows of ``L`` and entries of ``y`` at the dead sensor indices."""
    dead = np.unique(np.asarray(list(dead), dtype=np.int64))
    if dead.size >= lf.m:
        raise InverseError("all sensors are dead")
    if dead.size and (dead.min() < 0 or dead.max() >= lf.m):
        raise InverseError("dead sensor index out of range")
    if dead.size == 0:
        return lf, (None if y is None else np.asarray(y))
    gain = lf.gain.copy()
    gain[dead] = 0.0
    masked = LeadField(gain, lf.head, lf.sensors, lf.space, lf.reference,
                       {**lf.meta, "dead_sensors": dead.tolist()})
    if y is None:
        return masked, None
    y = np.array(y, dtype=np.float64, copy=True)
    y[..., dead] = 0.0
    return masked, y


def save_operator(op: PseudoInverseOperator, path) -> None:
    path = Path(path)
    tensorfile.save(path, op.kernel)
    side = path.with_name(path.stem + ".meta.json")
    side.write_text(json.dumps({
        "format_version": OPERATOR_FORMAT_VERSION,
        "kind": "operator",
        "method": op.method,
        "alpha": op.alpha,
        "iterations_used": op.iterations_used,
        "converged": op.converged,
        "kernel_digest": tensorfile.digest(op.kernel),
        "info": op.info,
    }))


def load_operator(path) -> PseudoInverseOperator:
    path = Path(path)
    meta = json.loads(path.with_name(path.stem + ".meta.json").read_text())
    if meta.get("kind") != "operator" or meta.get("format_version") != OPERATOR_FORMAT_VERSION:
        raise tensorfile.TensorFileError("not an operator sidecar")
    kernel = tensorfile.load(path)
    if tensorfile.digest(kernel) != meta["kernel_digest"]:
        raise tensorfile.TensorFileError("operator digest mismatch")
    return PseudoInverseOperator(kernel, meta["method"], meta["alpha"], meta["iterations_used"],
                                 meta["converged"], meta.get("info", {}))

"""Head model, sensor layout, volumetric source space and lead field.

The forward model is the analytic solution for a current dipole inside a set
of concentric conducting spheres.  For every Legendre order ``n`` the
potential in each shell is ``A r^n + B r^-(n+1)``; the coefficients follow
from continuity of potential and normal current at each interface and a
current-free outer surface.  Each shell uses basis functions scaled to stay
in ``[0, 1]`` inside the shell so the per-order system stays well
conditioned up to a few hundred terms.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorfile

log = logging.getLogger(__name__)

DEFAULT_RADII_MM = (79.0, 82.0, 87.0)
#: brain, skull, scalp (S/m)
DEFAULT_CONDUCTIVITIES = (0.3, 0.006, 0.3)
#: test-time forward model used to avoid the inverse crime
TEST_CONDUCTIVITIES = (0.332, 0.0113, 0.332)
DEFAULT_SPACING_MM = 10.0
DEFAULT_MIN_DEPTH_MM = 5.0
DEFAULT_SERIES_TERMS = 200
SERIES_TOL = 1e-8

LEADFIELD_FORMAT_VERSION = 1


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class HeadModel:
    shell_radii_mm: tuple[float, ...] = DEFAULT_RADII_MM
    conductivities_s_per_m: tuple[float, ...] = DEFAULT_CONDUCTIVITIES
    series_terms: int = DEFAULT_SERIES_TERMS

    def __post_init__(self):
        radii = tuple(float(r) for r in self.shell_radii_mm)
        sig = tuple(float(s) for s in self.conductivities_s_per_m)
        object.__setattr__(self, "shell_radii_mm", radii)
        object.__setattr__(self, "conductivities_s_per_m", sig)
        if len(radii) != len(sig) or not radii:
            raise GeometryError("need one conductivity per shell")
        if radii[0] <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
            raise GeometryError(f"shell radii must be positive and increasing: {radii}")
        if any(s <= 0 for s in sig):
            raise GeometryError(f"conductivities must be positive: {sig}")
        if int(self.series_terms) < 1:
            raise GeometryError("series_terms must be >= 1")

    @property
    def inner_radius_mm(self) -> float:
        return self.shell_radii_mm[0]

    @property
    def scalp_radius_mm(self) -> float:
        return self.shell_radii_mm[-1]

    def to_dict(self) -> dict:
        return {
            "shell_radii_mm": list(self.shell_radii_mm),
            "conductivities_s_per_m": list(self.conductivities_s_per_m),
            "series_terms": int(self.series_terms),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadModel":
        return cls(tuple(d["shell_radii_mm"]), tuple(d["conductivities_s_per_m"]),
                   int(d["series_terms"]))


@dataclass(frozen=True, eq=False)
class SensorArray:
    positions_mm: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        pos = np.asarray(self.positions_mm, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 2:
            raise GeometryError("sensor positions must be an (M, 3) array with M >= 2")
        if len(self.labels) != pos.shape[0] or len(set(self.labels)) != len(self.labels):
            raise GeometryError("need one unique label per sensor")
        object.__setattr__(self, "positions_mm", pos)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def m(self) -> int:
        return self.positions_mm.shape[0]

    def to_dict(self) -> dict:
        return {"positions_mm": self.positions_mm.tolist(), "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorArray":
        return cls(np.array(d["positions_mm"], dtype=np.float64), tuple(d["labels"]))

    def digest(self) -> str:
        return tensorfile.digest(self.positions_mm)


@dataclass(frozen=True, eq=False)
class SourceSpace:
    """Voxel centres on a regular lattice centred at the head origin.

    ``voxel_to_grid[i]`` is the lattice index of voxel ``i`` relative to the
    lower corner of the bounding box, so ``centers_mm == origin_mm +
    spacing_mm * voxel_to_grid``.
    """

    centers_mm: np.ndarray
    spacing_mm: float
    grid_dims: tuple[int, int, int]
    voxel_to_grid: np.ndarray
    min_depth_mm: float
    origin_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "centers_mm", np.asarray(self.centers_mm, dtype=np.float64))
        object.__setattr__(self, "voxel_to_grid", np.asarray(self.voxel_to_grid, dtype=np.int64))
        object.__setattr__(self, "origin_mm", np.asarray(self.origin_mm, dtype=np.float64))
        object.__setattr__(self, "grid_dims", tuple(int(g) for g in self.grid_dims))
        if self.centers_mm.ndim != 2 or self.centers_mm.shape[1] != 3:
            raise GeometryError("centers must be (N, 3)")
        if self.voxel_to_grid.shape != self.centers_mm.shape:
            raise GeometryError("voxel_to_grid must match centers")
        flat = np.ravel_multi_index(self.voxel_to_grid.T, self.grid_dims)
        if np.unique(flat).size != flat.size:
            raise GeometryError("voxel_to_grid is not injective")

    @property
    def n(self) -> int:
        return self.centers_mm.shape[0]

    def to_dict(self) -> dict:
        return {
            "centers_mm": self.centers_mm.tolist(),
            "spacing_mm": float(self.spacing_mm),
            "grid_dims": list(self.grid_dims),
            "voxel_to_grid": self.voxel_to_grid.tolist(),
            "min_depth_mm": float(self.min_depth_mm),
            "origin_mm": self.origin_mm.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSpace":
        return cls(
            np.array(d["centers_mm"], dtype=np.float64).reshape(-1, 3),
            float(d["spacing_mm"]),
            tuple(d["grid_dims"]),
            np.array(d["voxel_to_grid"], dtype=np.int64).reshape(-1, 3),
            float(d["min_depth_mm"]),
            np.array(d["origin_mm"], dtype=np.float64),
        )

    def digest(self) -> str:
        return tensorfile.digest(self.centers_mm)


@dataclass(frozen=True, eq=False)
class LeadField:
    """Average-referenced gain matrix, column ``3*i + k`` = voxel ``i``, axis ``k``."""

    gain: np.ndarray
    head: HeadModel | None
    sensors: SensorArray
    space: SourceSpace
    reference: str = "average"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.gain)
        if g.shape != (self.sensors.m, 3 * self.space.n):
            raise GeometryError(
                f"gain shape {g.shape} inconsistent with M={self.sensors.m}, N={self.space.n}"
            )
        if not np.all(np.isfinite(g)):
            raise GeometryError("gain contains NaN/Inf")

    @property
    def m(self) -> int:
        return self.gain.shape[0]

    @property
    def n(self) -> int:
        return self.space.n

    def block(self, i: int) -> np.ndarray:
        return self.gain[:, 3 * i : 3 * i + 3]

    def digest(self) -> str:
        return tensorfile.digest(self.gain)


def build_source_space(inner_radius_mm: float, spacing_mm: float,
                       min_depth_mm: float = DEFAULT_MIN_DEPTH_MM) -> SourceSpace:
    """All lattice points ``spacing * (i, j, k)`` within ``inner_radius - min_depth``."""
    if spacing_mm <= 0 or inner_radius_mm <= 0 or min_depth_mm < 0:
        raise GeometryError("need positive spacing and radius, non-negative depth")
    rmax = inner_radius_mm - min_depth_mm
    if rmax < 0:
        raise GeometryError("empty source space: min_depth exceeds the brain radius")
    kmax = int(np.floor(rmax / spacing_mm))
    ax = np.arange(-kmax, kmax + 1)
    idx = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = idx * spacing_mm
    keep = np.linalg.norm(pts, axis=1) <= rmax
    if not keep.any():
        raise GeometryError("empty source space: spacing too large for the brain radius")
    idx = idx[keep]
    lo = idx.min(axis=0)
    dims = tuple(int(d) for d in idx.max(axis=0) - lo + 1)
    return SourceSpace(
        centers_mm=idx * spacing_mm,
        spacing_mm=float(spacing_mm),
        grid_dims=dims,
        voxel_to_grid=idx - lo,
        min_depth_mm=float(min_depth_mm),
        origin_mm=lo * float(spacing_mm),
    )


def place_sensors(m: int, scalp_radius_mm: float, cap_fraction: float = 0.5) -> SensorArray:
    """Fibonacci lattice on the spherical cap ``z >= (1 - 2 cap_fraction) r``."""
    if m < 2:
        raise GeometryError("need at least two sensors")
    if not 0 < cap_fraction <= 1:
        raise GeometryError("cap_fraction must lie in (0, 1]")
    i = np.arange(m, dtype=np.float64)
    z = 1.0 - 2.0 * cap_fraction * (i + 0.5) / m
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    unit = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    labels = tuple(f"E{k + 1:03d}" for k in range(m))
    return SensorArray(unit * float(scalp_radius_mm), labels)


def shell_coefficients(head: HeadModel, n_terms: int | None = None) -> np.ndarray:
    """Surface transfer coefficients ``g_n`` for ``n = 1..n_terms``.

    With the source term normalised as ``(R1/r)^(n+1)`` in the inner sphere,
    the outer-surface potential of order ``n`` is ``g_n`` times that
    normalisation.  For a homogeneous sphere ``g_n = (2n + 1) / n``.
    """
    n_terms = int(n_terms or head.series_terms)
    radii = np.asarray(head.shell_radii_mm, dtype=np.float64)
    # only conductivity ratios enter; dividing keeps power-of-two rescaling exact
    sig = np.asarray(head.conductivities_s_per_m, dtype=np.float64)
    sig = sig / sig[0]
    K = radii.size
    out = np.empty(n_terms)
    for n in range(1, n_terms + 1):
        if K == 1:
            out[n - 1] = 1.0 + (n + 1) / n
            continue
        size = 2 * K - 1
        A = np.zeros((size, size))
        rhs = np.zeros(size)

        # unknown layout: a1, then (a_k, b_k) for k = 2..K
        def ia(k):
            return 0 if k == 1 else 2 * k - 3

        def ib(k):
            return 2 * k - 2

        row = 0
        for k in range(1, K):
            s_next = (radii[k - 1] / radii[k]) ** n
            q_k = 1.0 if k == 1 else (radii[k - 2] / radii[k - 1]) ** (n + 1)
            # potential continuity at R_k
            A[row, ia(k)] = 1.0
            if k == 1:
                rhs[row] -= 1.0
            else:
                A[row, ib(k)] = q_k
            A[row, ia(k + 1)] = -s_next
            A[row, ib(k + 1)] = -1.0
            row += 1
            # normal current continuity at R_k (multiplied through by r)
            A[row, ia(k)] = sig[k - 1] * n
            if k == 1:
                rhs[row] += sig[0] * (n + 1)
            else:
                A[row, ib(k)] = -sig[k - 1] * (n + 1) * q_k
            A[row, ia(k + 1)] = -sig[k] * n * s_next
            A[row, ib(k + 1)] = sig[k] * (n + 1)
            row += 1
        q_K = (radii[K - 2] / radii[K - 1]) ** (n + 1)
        A[row, ia(K)] = n
        A[row, ib(K)] = -(n + 1) * q_K
        sol = np.linalg.solve(A, rhs)
        out[n - 1] = sol[ia(K)] + sol[ib(K)] * q_K
    return out


def _dipole_series(head: HeadModel, sensors_m: np.ndarray, sources_m: np.ndarray):
    """Unreferenced scalp potentials; returns (gain, last-term relative size)."""
    n_terms = int(head.series_terms)
    R1 = head.shell_radii_mm[0] * 1e-3
    sigma1 = head.conductivities_s_per_m[0]
    g = shell_coefficients(head, n_terms)

    r_hat = sensors_m / np.linalg.norm(sensors_m, axis=1, keepdims=True)
    b = np.linalg.norm(sources_m, axis=1)
    r0_hat = np.where(b[:, None] > 0, sources_m / np.where(b > 0, b, 1.0)[:, None],
                      np.array([0.0, 0.0, 1.0]))
    c = np.clip(r_hat @ r0_hat.T, -1.0, 1.0)  # (M, N)
    ratio = b / R1

    s1 = np.zeros_like(c)
    s2 = np.zeros_like(c)
    p_prev, p_cur = np.ones_like(c), c.copy()
    dp_prev, dp_cur = np.zeros_like(c), np.ones_like(c)
    last = None
    for n in range(1, n_terms + 1):
        coef = g[n - 1] * ratio ** (n - 1) / R1**2  # (N,)
        t1 = coef * n * p_cur
        t2 = coef * dp_cur
        s1 += t1
        s2 += t2
        last = (t1, t2)
        p_next = ((2 * n + 1) * c * p_cur - n * p_prev) / (n + 1)
        dp_next = dp_prev + (2 * n + 1) * p_cur
        p_prev, p_cur = p_cur, p_next
        dp_prev, dp_cur = dp_cur, dp_next

    pref = 1.0 / (4.0 * np.pi * sigma1)
    M, N = c.shape
    gain = np.empty((M, N, 3))
    tail = np.empty((M, N, 3))
    for k in range(3):
        tang = r_hat[:, k][:, None] - c * r0_hat[:, k][None, :]
        gain[:, :, k] = pref * (s1 * r0_hat[:, k][None, :] + s2 * tang)
        tail[:, :, k] = pref * (last[0] * r0_hat[:, k][None, :] + last[1] * tang)
    scale = np.abs(gain).max()
    rel = float(np.abs(tail).max() / scale) if scale > 0 else 0.0
    return gain.reshape(M, 3 * N), rel


def compute_leadfield(head: HeadModel, sensors: SensorArray, space: SourceSpace) -> LeadField:
    """Average-referenced lead field of the concentric-sphere head (V per A m)."""
    depth = np.linalg.norm(space.centers_mm, axis=1)
    if np.any(depth >= head.inner_radius_mm):
        raise GeometryError("source on or outside the innermost shell")
    gain, rel = _dipole_series(head, sensors.positions_mm * 1e-3, space.centers_mm * 1e-3)
    gain = gain - gain.mean(axis=0, keepdims=True)
    converged = rel < SERIES_TOL
    if not converged:
        warnings.warn(
            f"Legendre series not converged at {head.series_terms} terms "
            f"(last term relative size {rel:.2e})",
            RuntimeWarning,
            stacklevel=2,
        )
    meta = {"series_converged": bool(converged), "series_last_rel": rel}
    return LeadField(gain, head, sensors, space, "average", meta)


def perturb_conductivity(head: HeadModel, new_sigma=TEST_CONDUCTIVITIES) -> HeadModel:
    if any(float(s) <= 0 for s in new_sigma):
        raise GeometryError("conductivities must be positive")
    return dataclasses.replace(head, conductivities_s_per_m=tuple(float(s) for s in new_sigma))


def default_setup(spacing_mm: float = DEFAULT_SPACING_MM, m: int = 61,
                  conductivities=DEFAULT_CONDUCTIVITIES,
                  series_terms: int = DEFAULT_SERIES_TERMS) -> LeadField:
    """Desk-scale lead field: three shells, Fibonacci cap, 10 mm lattice."""
    head = HeadModel(DEFAULT_RADII_MM, tuple(conductivities), series_terms)
    space = build_source_space(head.inner_radius_mm, spacing_mm, DEFAULT_MIN_DEPTH_MM)
    sensors = place_sensors(m, head.scalp_radius_mm, 0.5)
    return compute_leadfield(head, sensors, space)


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".meta.json")


def save_leadfield(lf: LeadField, path) -> None:
    path = Path(path)
    tensorfile.save(path, np.asarray(lf.gain))
    meta = {
        "format_version": LEADFIELD_FORMAT_VERSION,
        "kind": "leadfield",
        "reference": lf.reference,
        "shape": list(lf.gain.shape),
        "gain_digest": lf.digest(),
        "head": lf.head.to_dict() if lf.head is not None else None,
        "sensors": lf.sensors.to_dict(),
        "sensors_digest": lf.sensors.digest(),
        "space": lf.space.to_dict(),
        "space_digest": lf.space.digest(),
        "meta": lf.meta,
    }
    sidecar_path(path).write_text(json.dumps(meta))


def load_leadfield(path) -> LeadField:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise tensorfile.TensorFileError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    if meta.get("format_version") != LEADFIELD_FORMAT_VERSION or meta.get("kind") != "leadfield":
        raise tensorfile.TensorFileError(
            f"unsupported lead-field sidecar version {meta.get('format_version')!r}"
        )
    sensors = SensorArray.from_dict(meta["sensors"])
    space = SourceSpace.from_dict(meta["space"])
    gain = tensorfile.load(path)
    if gain.shape != (sensors.m, 3 * space.n):
        raise tensorfile.TensorFileError(
            f"gain shape {gain.shape} does not match M={sensors.m}, 3N={3 * space.n}"
        )
    if tensorfile.digest(gain) != meta["gain_digest"]:
        raise tensorfile.TensorFileError("gain digest mismatch: file is corrupt")
    head = HeadModel.from_dict(meta["head"]) if meta.get("head") else None
    return LeadField(gain, head, sensors, space, meta.get("reference", "average"),
                     meta.get("meta", {}))

"""Synthetic single-time-step source activity and sensor measurements.

Each sample is a sum of ``S`` Gaussian blobs centred on source-space voxels,
projected through the lead field, with white sensor noise at a prescribed SNR.
Every sample is a pure function of ``(base_seed, index)``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .geometry import LeadField, SourceSpace

MASK64 = (1 << 64) - 1
DATASET_FORMAT_VERSION = 1
_BIN_MAGIC = b"NLDS"
_BIN_HEADER = struct.Struct("<4sIQ")


class DatasetError(ValueError):
    pass


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def sample_seed(base_seed: int, index: int) -> int:
    """Seed of sample ``index``: the index-th output of a splitmix64 stream."""
    return splitmix64((int(base_seed) + int(index) * 0x9E3779B97F4A7C15) & MASK64)


@dataclass(frozen=True)
class SimConfig:
    n_activ_max: int = 20
    sigma_range_mm: tuple[float, float] = (10.0, 80.0)
    snr_range_db: tuple[float, float] = (0.0, 30.0)
    base_seed: int = 0
    n_activ_min: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sigma_range_mm", tuple(float(v) for v in self.sigma_range_mm))
        object.__setattr__(self, "snr_range_db", tuple(float(v) for v in self.snr_range_db))
        lo, hi = self.sigma_range_mm
        if not (0 < lo <= hi):
            raise ValueError(f"bad sigma range {self.sigma_range_mm}")
        if self.snr_range_db[0] > self.snr_range_db[1]:
            raise ValueError(f"bad SNR range {self.snr_range_db}")
        if not 1 <= self.n_activ_min <= self.n_activ_max:
            raise ValueError("need 1 <= n_activ_min <= n_activ_max")
        if not 0 <= int(self.base_seed) <= MASK64:
            raise ValueError("base_seed must fit in u64")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sigma_range_mm"] = list(self.sigma_range_mm)
        d["snr_range_db"] = list(self.snr_range_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class Sample:
    x: np.ndarray  # (N, 3)
    y: np.ndarray  # (M,)
    centers_mm: np.ndarray  # (S, 3)
    widths_mm: np.ndarray  # (S,)
    amplitudes: np.ndarray  # (S,)
    directions: np.ndarray  # (S, 3)
    snr_db: float
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def s(self) -> int:
        return int(self.widths_mm.size)


def sample_activation(space: SourceSpace, centers_mm, widths_mm, amplitudes, directions) -> np.ndarray:
    """Sum of Gaussian blobs, evaluated exactly at every voxel centre."""
    centers = np.atleast_2d(np.asarray(centers_mm, dtype=np.float64))
    widths = np.atleast_1d(np.asarray(widths_mm, dtype=np.float64))
    amps = np.atleast_1d(np.asarray(amplitudes, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    d2 = ((space.centers_mm[:, None, :] - centers[None, :, :]) ** 2).sum(-1)  # (N, S)
    bump = np.exp(-d2 / (2.0 * widths**2)) / np.sqrt(2.0 * np.pi * widths**2)
    return (bump * amps) @ dirs


def noise_std(y_clean: np.ndarray, snr_db: float) -> float:
    """``std(y_clean) / sqrt(10^(snr_db / 10))``."""
    return float(np.std(y_clean)) * 10.0 ** (-float(snr_db) / 20.0)


def add_noise(y_clean: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    y_clean = np.asarray(y_clean, dtype=np.float64)
    sd = noise_std(y_clean, snr_db)
    if sd == 0.0:
        return y_clean.copy()
    return y_clean + sd * rng.standard_normal(y_clean.shape)


def _uniform(rng, lo, hi, size=None):
    if lo == hi:
        return np.full(size, lo) if size is not None else lo
    return rng.uniform(lo, hi, size)


def generate_sample(cfg: SimConfig, lf: LeadField, index: int) -> Sample:
    seed = sample_seed(cfg.base_seed, index)
    rng = np.random.Generator(np.random.PCG64(seed))
    space = lf.space
    s = int(rng.integers(cfg.n_activ_min, cfg.n_activ_max + 1))
    widths = np.asarray(_uniform(rng, *cfg.sigma_range_mm, size=s), dtype=np.float64)
    centers = space.centers_mm[rng.integers(0, space.n, size=s)]
    dirs = rng.standard_normal((s, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.standard_normal(s)
    snr = float(_uniform(rng, *cfg.snr_range_db))
    x = sample_activation(space, centers, widths, amps, dirs)
    y_clean = lf.gain @ x.reshape(-1)
    y = add_noise(y_clean, snr, rng)
    meta = {"noise_skipped": True} if np.std(y_clean) == 0 else {}
    return Sample(x, y, centers, widths, amps, dirs, snr, seed, meta)


def generate_dataset(cfg: SimConfig, lf: LeadField, n_samples: int, start: int = 0) -> Iterator[Sample]:
    for i in range(start, start + n_samples):
        yield generate_sample(cfg, lf, i)


def record_size(n: int, m: int, s: int) -> int:
    return 4 + 32 * s + 4 + 8 + 12 * n + 4 * m


def _pack(sample: Sample) -> bytes:
    s = sample.s
    per_source = np.concatenate(
        [sample.centers_mm, sample.widths_mm[:, None], sample.amplitudes[:, None], sample.directions],
        axis=1,
    ).astype("<f4")
    return b"".join(
        [
            struct.pack("<I", s),
            per_source.tobytes(),
            struct.pack("<fQ", sample.snr_db, sample.seed),
            np.asarray(sample.x, dtype="<f4").tobytes(),
            np.asarray(sample.y, dtype="<f4").tobytes(),
        ]
    )


def save_dataset(samples: Iterable[Sample], path, cfg: SimConfig | None = None,
                 lf: LeadField | None = None) -> int:
    """Write ``path/manifest.json`` and ``path/samples.bin``; return the sample count."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    count = 0
    n = m = None
    with open(path / "samples.bin", "wb") as fh:
        fh.write(_BIN_HEADER.pack(_BIN_MAGIC, DATASET_FORMAT_VERSION, 0))
        for sample in samples:
            if n is None:
                n, m = sample.x.shape[0], sample.y.shape[0]
            elif sample.x.shape[0] != n or sample.y.shape[0] != m:
                raise DatasetError("inconsistent sample shapes in stream")
            fh.write(_pack(sample))
            count += 1
        fh.seek(0)
        fh.write(_BIN_HEADER.pack(_BIN_MAGIC, DATASET_FORMAT_VERSION, count))
    if lf is not None:
        n, m = lf.n, lf.m
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "N": n,
        "M": m,
        "n_samples": count,
        "cfg": cfg.to_dict() if cfg is not None else None,
        "leadfield_digest": lf.digest() if lf is not None else None,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return count


def read_manifest(path) -> dict:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('format_version')!r}")
    return manifest


def load_dataset(path) -> Iterator[Sample]:
    """Stream samples back; float payloads come back as float32."""
    path = Path(path)
    manifest = read_manifest(path)
    n, m, expected = manifest["N"], manifest["M"], manifest["n_samples"]
    buf = (path / "samples.bin").read_bytes()
    if len(buf) < _BIN_HEADER.size:
        raise DatasetError("samples.bin is truncated")
    magic, version, count = _BIN_HEADER.unpack_from(buf, 0)
    if magic != _BIN_MAGIC or version != DATASET_FORMAT_VERSION:
        raise DatasetError("samples.bin has a bad header")
    if count != expected:
        raise DatasetError(f"manifest lists {expected} samples, file holds {count}")

    def records():
        off = _BIN_HEADER.size
        for _ in range(count):
            if off + 4 > len(buf):
                raise DatasetError("truncated record")
            (s,) = struct.unpack_from("<I", buf, off)
            size = record_size(n, m, s)
            if s < 1 or off + size > len(buf):
                raise DatasetError(
                    f"record at byte {off} does not fit N={n}, M={m}; wrong shapes in manifest?"
                )
            off += 4
            src = np.frombuffer(buf, "<f4", 8 * s, off).reshape(s, 8).astype(np.float32)
            off += 32 * s
            snr, seed = struct.unpack_from("<fQ", buf, off)
            off += 12
            x = np.frombuffer(buf, "<f4", 3 * n, off).reshape(n, 3).astype(np.float32)
            off += 12 * n
            y = np.frombuffer(buf, "<f4", m, off).astype(np.float32)
            off += 4 * m
            yield Sample(x, y, src[:, :3], src[:, 3], src[:, 4], src[:, 5:8], float(snr), int(seed))
        if off != len(buf):
            raise DatasetError(
                f"{len(buf) - off} unread bytes after the last record; wrong shapes in manifest?"
            )

    return records()

"""End-to-end fully connected baseline: measurements straight to a source field."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tensor, ops
from .autodiff.params import load_params, save_params

MODEL_FORMAT_VERSION = 1


class FcnError(ValueError):
    pass


@dataclass(frozen=True)
class FcnConfig:
    m: int
    n: int
    width: int = 128
    hidden_layers: int = 3
    input_scaling: str = "maxnorm"  # or "none"
    output_scale: float = 1.0  # fixed multiplier on the last layer, see calibrate_output_scale

    def __post_init__(self):
        if min(self.m, self.n, self.width, self.hidden_layers) < 1:
            raise FcnError("dims must be positive")
        if not self.output_scale > 0:
            raise FcnError("output_scale must be positive")
        if self.input_scaling not in ("maxnorm", "none"):
            raise FcnError(f"unknown input scaling {self.input_scaling!r}")

    @classmethod
    def paper(cls, m: int, n: int, **kw) -> "FcnConfig":
        return cls(m, n, width=1024, **kw)

    def dims(self) -> list[int]:
        return [self.m] + [self.width] * self.hidden_layers + [3 * self.n]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FcnConfig":
        return cls(**d)


def count_parameters(cfg: FcnConfig) -> int:
    d = cfg.dims()
    return sum(a * b + b for a, b in zip(d[:-1], d[1:]))


class FcnModel:
    def __init__(self, config: FcnConfig, params: ParamStore):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: FcnConfig, seed: int = 0, dtype=np.float32) -> "FcnModel":
        rng = np.random.default_rng(seed)
        ps = ParamStore()
        d = config.dims()
        for i, (a, b) in enumerate(zip(d[:-1], d[1:])):
            bound = 1.0 / np.sqrt(a)
            ps.add(f"fc{i}.w", rng.uniform(-bound, bound, size=(b, a)).astype(dtype))
            ps.add(f"fc{i}.b", np.zeros(b, dtype=dtype))
        return cls(config, ps)

    @property
    def dtype(self):
        return self.params["fc0.w"].dtype

    @property
    def n_layers(self) -> int:
        return self.config.hidden_layers + 1

    def forward(self, y: Tensor | np.ndarray) -> Tensor:
        """``(B, M)`` -> ``(B, N, 3)``: affine + ReLU per hidden layer, affine output."""
        h = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=self.dtype))
        if h.values.ndim != 2 or h.shape[1] != self.config.m:
            raise FcnError(f"expected (B, {self.config.m}) measurements, got {h.shape}")
        for i in range(self.n_layers):
            h = ops.linear(h, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            if i < self.n_layers - 1:
                h = ops.relu(h)
        if self.config.output_scale != 1.0:
            h = ops.scale(h, self.config.output_scale)
        return ops.reshape(h, (h.shape[0], self.config.n, 3))

    def predict(self, y: np.ndarray) -> np.ndarray:
        """``(M,)`` or ``(B, M)`` measurements to float64 fields, undoing the input scaling."""
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        yb = y[None] if single else y
        s = measurement_scale(yb, self.config.input_scaling)
        out = self.forward((yb / s[:, None]).astype(self.dtype)).values.astype(np.float64)
        out *= s[:, None, None]
        return out[0] if single else out

    def num_parameters(self) -> int:
        return self.params.count()


def measurement_scale(y: np.ndarray, mode: str) -> np.ndarray:
    """Per-sample divisor: the largest absolute sensor value, or 1."""
    y = np.asarray(y)
    if mode == "none":
        return np.ones(y.shape[0])
    m = np.abs(y).max(axis=-1)
    return np.where(m > 0, m, 1.0)


def calibrate_output_scale(x: np.ndarray, y: np.ndarray, mode: str = "maxnorm") -> float:
    """Median peak source norm per unit of scaled measurement over ``(B, N, 3)`` / ``(B, M)`` samples."""
    peak = np.sqrt((np.asarray(x) ** 2).sum(axis=-1)).max(axis=-1)
    return float(np.median(peak / measurement_scale(y, mode)))


def save_model(model: FcnModel, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(model.params, directory / "params")
    meta = {"format_version": MODEL_FORMAT_VERSION, "kind": "fcn",
            "config": model.config.to_dict(), "params_digest": model.params.digest()}
    meta.update(extra or {})
    (directory / "model.json").write_text(json.dumps(meta, indent=2))


def load_model(directory) -> FcnModel:
    path = Path(directory) / "model.json"
    if not path.exists():
        raise FileNotFoundError(f"missing model checkpoint {path}")
    meta = json.loads(path.read_text())
    if meta.get("kind") != "fcn" or meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise FcnError(f"{path} is not an fcn checkpoint")
    model = FcnModel.init(FcnConfig.from_dict(meta["config"]))
    load_params(model.params, Path(directory) / "params")
    if model.params.digest() != meta["params_digest"]:
        raise FcnError("parameter digest mismatch")
    return model

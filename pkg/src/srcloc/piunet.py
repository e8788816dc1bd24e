"""Pseudo-inverse refinement U-Net on a cubic voxel grid.

The pseudo-inverse estimate is zero-padded onto a ``G^3`` grid, refined by a
residual U-Net and read back at the source voxels. Layout per resolution
level ``l`` (channels ``C * 2^l``): two residual blocks, then a residual
down-block (except at the coarsest level). The bottleneck is residual block,
attention, residual block. Each decoder level has three residual blocks fed by
concatenated encoder skips, then a residual up-block (except at full
resolution). Attention also follows every block at the coarsest level.
Internal tensors are channels-last ``(B, D, H, W, C)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lininv
from .autodiff import ParamStore, Tensor, ops
from .autodiff.params import load_params, save_params
from .geometry import SourceSpace

MODEL_FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class PiuNetConfig:
    grid: int = 16
    base_channels: int = 8
    depth: int = 2
    blocks_per_level: int = 2
    attn_at_bottleneck: bool = True
    in_channels: int = 3
    out_channels: int = 3
    groupnorm_groups: int = 8
    input_scaling: str = "maxnorm"  # or "none"
    gn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ModelError("depth must be >= 1")
        if self.grid % (2**self.depth):
            raise ModelError(f"grid {self.grid} not divisible by 2^depth = {2**self.depth}")
        if self.base_channels < 1 or self.blocks_per_level < 1:
            raise ModelError("channels and blocks per level must be positive")
        if self.input_scaling not in ("maxnorm", "none"):
            raise ModelError(f"unknown input scaling {self.input_scaling!r}")

    @classmethod
    def desk(cls) -> "PiuNetConfig":
        return cls()

    @classmethod
    def paper(cls) -> "PiuNetConfig":
        return cls(grid=32, base_channels=32, depth=2)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def groups(self, channels: int) -> int:
        g = min(self.groupnorm_groups, channels)
        while channels % g:
            g -= 1
        return g

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PiuNetConfig":
        return cls(**d)


# --- architecture plan -------------------------------------------------------------

@dataclass(frozen=True)
class _Block:
    kind: str  # res | down | up | attn
    name: str
    cin: int
    cout: int
    push: bool = False  # output goes onto the skip stack


def plan(cfg: PiuNetConfig) -> tuple[list, list, list]:
    """Encoder, bottleneck and decoder blocks; decoder res blocks consume one skip each."""
    top = cfg.depth
    nb = cfg.blocks_per_level
    ch = cfg.base_channels
    skips = [ch]
    enc = []
    for lvl in range(top + 1):
        for i in range(nb):
            attn = lvl == top and cfg.attn_at_bottleneck
            enc.append(_Block("res", f"enc{lvl}.{i}", ch, cfg.channels(lvl), push=not attn))
            ch = cfg.channels(lvl)
            if attn:
                enc.append(_Block("attn", f"enc{lvl}.{i}.attn", ch, ch, push=True))
            skips.append(ch)
        if lvl < top:
            enc.append(_Block("down", f"enc{lvl}.down", ch, ch, push=True))
            skips.append(ch)
    mid = [_Block("res", "mid.0", ch, ch)]
    if cfg.attn_at_bottleneck:
        mid.append(_Block("attn", "mid.attn", ch, ch))
    mid.append(_Block("res", "mid.1", ch, ch))
    dec = []
    for lvl in reversed(range(top + 1)):
        for i in range(nb + 1):
            skip = skips.pop()
            dec.append(_Block("res", f"dec{lvl}.{i}", ch + skip, cfg.channels(lvl)))
            ch = cfg.channels(lvl)
            if lvl == top and cfg.attn_at_bottleneck:
                dec.append(_Block("attn", f"dec{lvl}.{i}.attn", ch, ch))
        if lvl > 0:
            dec.append(_Block("up", f"dec{lvl}.up", ch, ch))
    return enc, mid, dec


def _block_params(b: _Block) -> int:
    if b.kind == "attn":
        return 2 * b.cin + 4 * (b.cin * b.cin + b.cin)
    n = 2 * b.cin + 27 * b.cin * b.cout + b.cout + 2 * b.cout + 27 * b.cout * b.cout + b.cout
    if b.cin != b.cout:
        n += b.cin * b.cout + b.cout
    return n


def count_parameters(cfg: PiuNetConfig) -> int:
    """Parameter total from the configuration alone."""
    enc, mid, dec = plan(cfg)
    c = cfg.base_channels
    lift = 27 * cfg.in_channels * c + c
    head = 2 * c + 27 * c * cfg.out_channels + cfg.out_channels
    return lift + head + sum(_block_params(b) for b in enc + mid + dec)


# --- model ---------------------------------------------------------------------------

class PiuNetModel:
    def __init__(self, config: PiuNetConfig, params: ParamStore):
        self.config = config
        self.params = params
        self.enc, self.mid, self.dec = plan(config)

    @classmethod
    def init(cls, config: PiuNetConfig, seed: int = 0, dtype=np.float32) -> "PiuNetModel":
        rng = np.random.default_rng(seed)
        ps = ParamStore()

        def conv(name, cin, cout, k=3, zero=False):
            shape = (cout, cin, k, k, k) if k == 3 else (cout, cin)
            fan_in = cin * (27 if k == 3 else 1)
            bound = 1.0 / np.sqrt(fan_in)
            w = np.zeros(shape) if zero else rng.uniform(-bound, bound, size=shape)
            ps.add(f"{name}.w", w.astype(dtype))
            ps.add(f"{name}.b", np.zeros(cout, dtype=dtype))

        def norm(name, ch):
            ps.add(f"{name}.gain", np.ones(ch, dtype=dtype))
            ps.add(f"{name}.bias", np.zeros(ch, dtype=dtype))

        model = cls(config, ps)
        c = config.base_channels
        conv("lift", config.in_channels, c)
        for b in model.enc + model.mid + model.dec:
            if b.kind == "attn":
                norm(f"{b.name}.norm", b.cin)
                for proj in ("q", "k", "v", "o"):
                    conv(f"{b.name}.{proj}", b.cin, b.cin, k=1)
                continue
            norm(f"{b.name}.norm1", b.cin)
            conv(f"{b.name}.conv1", b.cin, b.cout)
            norm(f"{b.name}.norm2", b.cout)
            conv(f"{b.name}.conv2", b.cout, b.cout)
            if b.cin != b.cout:
                conv(f"{b.name}.skip", b.cin, b.cout, k=1)
        norm("out.norm", c)
        # zero head: the network starts as the identity on its input
        conv("out.conv", c, config.out_channels, zero=True)
        return model

    @property
    def dtype(self):
        return self.params["lift.w"].dtype

    def _gn_silu(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        g = ops.group_norm(x, self.config.groups(x.shape[-1]), p[f"{name}.gain"], p[f"{name}.bias"],
                           self.config.gn_eps, act="silu")
        return g

    def _conv(self, x: Tensor, name: str) -> Tensor:
        return ops.conv3d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _block(self, b: _Block, x: Tensor) -> Tensor:
        p = self.params
        if b.kind == "attn":
            h = ops.group_norm(x, self.config.groups(b.cin), p[f"{b.name}.norm.gain"],
                               p[f"{b.name}.norm.bias"], self.config.gn_eps)
            w = [p[f"{b.name}.{proj}.{kind}"] for proj in "qkvo" for kind in "wb"]
            return ops.attention(x, *w, normed=h)
        h = self._gn_silu(x, f"{b.name}.norm1")
        if b.kind == "down":
            h, x = ops.avg_pool2x(h), ops.avg_pool2x(x)
        elif b.kind == "up":
            h, x = ops.upsample_nearest2x(h), ops.upsample_nearest2x(x)
        h = self._conv(h, f"{b.name}.conv1")
        h = self._conv(self._gn_silu(h, f"{b.name}.norm2"), f"{b.name}.conv2")
        if b.cin != b.cout:
            x = ops.linear(x, p[f"{b.name}.skip.w"], p[f"{b.name}.skip.b"])
        return ops.add(x, h)

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        """Network body: ``(B, G, G, G, 3)`` -> ``(B, G, G, G, 3)``."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        g = self.config.grid
        if x.shape[1:] != (g, g, g, self.config.in_channels):
            raise ModelError(f"input shape {x.shape} does not match grid {g} with "
                             f"{self.config.in_channels} channels")
        h = self._conv(x, "lift")
        skips = [h]
        for b in self.enc:
            h = self._block(b, h)
            if b.push:
                skips.append(h)
        for b in self.mid:
            h = self._block(b, h)
        for b in self.dec:
            if b.kind == "res":
                h = ops.concat([h, skips.pop()])
            h = self._block(b, h)
        return self._conv(self._gn_silu(h, "out.norm"), "out.conv")

    def refine(self, grid: np.ndarray, flat_index: np.ndarray) -> Tensor:
        """``grid + forward(grid)`` read at the source sites, as a differentiable ``(B, N, 3)``."""
        z = Tensor(np.asarray(grid, dtype=self.dtype))
        return ops.take_voxels(ops.add(z, self.forward(z)), flat_index)

    def predict(self, op: lininv.PseudoInverseOperator, y: np.ndarray, space: SourceSpace) -> np.ndarray:
        """Full inference path from measurements to an ``(N, 3)`` (or batched) field."""
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        x0 = lininv.apply(op, y)
        x0 = x0[None] if single else x0
        out = self.refine_fields(x0, space)
        return out[0] if single else out

    def refine_fields(self, x0: np.ndarray, space: SourceSpace, batch: int = 8) -> np.ndarray:
        """Refine ``(B, N, 3)`` pseudo-inverse fields in float64 output."""
        idx = grid_index(space, self.config.grid)
        out = np.empty(x0.shape, dtype=np.float64)
        for lo in range(0, x0.shape[0], batch):
            chunk = x0[lo:lo + batch]
            scale = input_scale(chunk, self.config.input_scaling)
            grid = embed_to_grid(chunk / scale[:, None, None], space, self.config.grid)
            body = self.forward(grid.astype(self.dtype)).values
            delta = body.reshape(body.shape[0], -1, body.shape[-1])[:, idx].astype(np.float64)
            out[lo:lo + batch] = chunk + scale[:, None, None] * delta
        return out

    def num_parameters(self) -> int:
        return self.params.count()


def input_scale(fields: np.ndarray, mode: str) -> np.ndarray:
    """Per-sample divisor: the largest voxel norm, or 1 for no scaling."""
    fields = np.asarray(fields)
    if mode == "none":
        return np.ones(fields.shape[0])
    m = np.sqrt((fields**2).sum(axis=-1)).max(axis=-1)
    return np.where(m > 0, m, 1.0)


# --- grid embedding ----------------------------------------------------------------

def grid_offset(space: SourceSpace, g: int) -> np.ndarray:
    dims = np.asarray(space.grid_dims)
    if (dims > g).any():
        raise ModelError(f"source lattice {tuple(dims)} does not fit a {g}^3 grid")
    return (g - dims) // 2


def grid_index(space: SourceSpace, g: int) -> np.ndarray:
    """Flattened ``G^3`` site of every source voxel (bounding box centred)."""
    sites = space.voxel_to_grid + grid_offset(space, g)
    return np.ravel_multi_index(sites.T, (g, g, g))


def embed_to_grid(field: np.ndarray, space: SourceSpace, g: int) -> np.ndarray:
    """``(N, 3)`` or ``(B, N, 3)`` -> channels-last ``(G, G, G, 3)`` / ``(B, G, G, G, 3)``."""
    field = np.asarray(field)
    single = field.ndim == 2
    f = field[None] if single else field
    if f.shape[1] != space.n:
        raise ModelError(f"field has {f.shape[1]} voxels, source space has {space.n}")
    out = np.zeros((f.shape[0], g * g * g, f.shape[2]), dtype=f.dtype)
    out[:, grid_index(space, g)] = f
    out = out.reshape(f.shape[0], g, g, g, f.shape[2])
    return out[0] if single else out


def extract_from_grid(grid: np.ndarray, space: SourceSpace) -> np.ndarray:
    grid = np.asarray(grid)
    single = grid.ndim == 4
    t = grid[None] if single else grid
    g = t.shape[1]
    if t.shape[1:4] != (g, g, g):
        raise ModelError(f"expected a cubic grid, got {t.shape}")
    out = t.reshape(t.shape[0], -1, t.shape[-1])[:, grid_index(space, g)]
    return out[0] if single else out


# --- checkpoints --------------------------------------------------------------------

def save_model(model: PiuNetModel, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(model.params, directory / "params")
    meta = {"format_version": MODEL_FORMAT_VERSION, "kind": "piunet",
            "config": model.config.to_dict(), "params_digest": model.params.digest()}
    meta.update(extra or {})
    (directory / "model.json").write_text(json.dumps(meta, indent=2))


def load_model(directory) -> PiuNetModel:
    directory = Path(directory)
    path = directory / "model.json"
    if not path.exists():
        raise FileNotFoundError(f"missing model checkpoint {path}")
    meta = json.loads(path.read_text())
    if meta.get("kind") != "piunet" or meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelError(f"{path} is not a piunet checkpoint")
    cfg = PiuNetConfig.from_dict(meta["config"])
    model = PiuNetModel.init(cfg)
    load_params(model.params, directory / "params")
    if model.params.digest() != meta["params_digest"]:
        raise ModelError("parameter digest mismatch")
    return model

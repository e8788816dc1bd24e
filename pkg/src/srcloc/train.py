"""Training loop: simulator -> pseudo-inverse -> network -> loss -> Adam.

Training samples are generated on the fly, one fresh batch per step, with the
sample at position ``j`` of step ``t`` drawn from counter index
``t * batch + j``. The held-out set is simulated with a different lead field
(perturbed conductivities) while the operator only ever sees the training one.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import fcn_baseline, lininv, metrics, piunet
from . import simulate as sim
from .autodiff import AdamState, adam_step, losses, ops
from .autodiff.params import load_arrays, save_arrays
from .geometry import LeadField

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "eval_nmse", "eval_nemd", "eval_wcos", "wallclock_s")
STATE_FORMAT_VERSION = 1
EVAL_SEED_SALT = 0xE5A1
FCN_CALIBRATION = 64  # training samples used to fix the FCN output scale


class TrainingError(RuntimeError):
    pass


class NumericError(TrainingError):
    """Non-finite loss; ``checkpoint`` points at the last good state."""

    def __init__(self, msg: str, checkpoint: Path | None):
        super().__init__(msg)
        self.checkpoint = checkpoint


def desk_sim(seed: int = 0) -> sim.SimConfig:
    """Single source at 20 dB."""
    return sim.SimConfig(n_activ_max=1, n_activ_min=1, snr_range_db=(20.0, 20.0), base_seed=seed)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 8
    lr: float = 1e-4
    loss_kind: str = "l1"
    lambda_rec: float = losses.DEFAULT_LAMBDA_REC
    seed: int = 0
    sim: sim.SimConfig = field(default_factory=desk_sim)
    eval_every: int = 500
    eval_size: int = 200
    operator_method: str = "eloreta"
    operator_reg: float = 0.05
    model_kind: str = "piunet"  # or "fcn"

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.eval_every < 1 or self.eval_size < 1:
            raise ValueError("steps >= 0, batch, eval_every and eval_size >= 1 required")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.loss_kind not in losses.LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.model_kind not in ("piunet", "fcn"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(steps=60000, batch=32, lr=1e-5, sim=sim.SimConfig())
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sim"] = self.sim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "sim" in d:
            d["sim"] = sim.SimConfig.from_dict(d["sim"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def train_sim(self) -> sim.SimConfig:
        return dataclasses.replace(self.sim, base_seed=self.seed)

    def eval_sim(self) -> sim.SimConfig:
        return dataclasses.replace(self.sim, base_seed=sim.sample_seed(self.seed, EVAL_SEED_SALT))


# --- held-out evaluation -------------------------------------------------------------

@dataclass
class EvalSet:
    x: np.ndarray  # (S, N, 3)
    y: np.ndarray  # (S, M)
    denominators: np.ndarray  # NEMD denominators per sample
    leadfield_digest: str
    space: object

    @property
    def size(self) -> int:
        return self.x.shape[0]


def make_eval_set(cfg: sim.SimConfig, lf_test: LeadField, n: int) -> EvalSet:
    samples = list(sim.generate_dataset(cfg, lf_test, n))
    x = np.stack([s.x for s in samples])
    y = np.stack([s.y for s in samples])
    den = np.array([metrics.emd_to_uniform(xi, lf_test.space) for xi in x])
    return EvalSet(x, y, den, lf_test.digest(), lf_test.space)


def score(estimates: np.ndarray, ev: EvalSet) -> dict[str, np.ndarray]:
    """Per-sample NMSE, NEMD and weighted cosine distance."""
    out = {"nmse": [], "nemd": [], "wcos": []}
    for xi, ei, di in zip(ev.x, estimates, ev.denominators):
        r = metrics.evaluate(xi, ei, ev.space, denominator=di)
        for k in out:
            out[k].append(r[k])
    return {k: np.asarray(v) for k, v in out.items()}


def model_estimates(model, op: lininv.PseudoInverseOperator, y: np.ndarray, space) -> np.ndarray:
    if isinstance(model, piunet.PiuNetModel):
        return model.refine_fields(lininv.apply(op, y), space)
    return model.predict(y)


# --- checkpoints ----------------------------------------------------------------------

def _save_model(model, directory: Path, extra: dict):
    if isinstance(model, piunet.PiuNetModel):
        piunet.save_model(model, directory, extra)
    else:
        fcn_baseline.save_model(model, directory, extra)


def load_any_model(directory):
    meta = json.loads((Path(directory) / "model.json").read_text())
    if meta.get("kind") == "fcn":
        return fcn_baseline.load_model(directory)
    return piunet.load_model(directory)


def save_checkpoint(directory, model, opt: AdamState, step: int, cfg: TrainConfig, wiring: dict) -> Path:
    directory = Path(directory)
    _save_model(model, directory, {"train_config": cfg.to_dict()})
    names = list(opt.m)
    save_arrays({**{f"m/{k}": opt.m[k] for k in names}, **{f"v/{k}": opt.v[k] for k in names}},
                directory / "adam")
    state = {"format_version": STATE_FORMAT_VERSION, "step": step, "adam": opt.hyper(),
             "rng": {"kind": "counter", "base_seed": cfg.seed, "next_index": step * cfg.batch},
             "config_digest": cfg.digest(), "wiring": wiring}
    (directory / "train-state.json").write_text(json.dumps(state, indent=2))
    return directory


def load_checkpoint(directory):
    """``(model, AdamState, state dict)`` from a training checkpoint directory."""
    directory = Path(directory)
    state_path = directory / "train-state.json"
    if not state_path.exists():
        raise FileNotFoundError(f"missing training state {state_path}")
    state = json.loads(state_path.read_text())
    model = load_any_model(directory)
    hyper = state["adam"]
    opt = AdamState(lr=hyper["lr"], beta1=hyper["beta1"], beta2=hyper["beta2"], eps=hyper["eps"],
                    t=hyper["t"])
    if (directory / "adam.json").exists() and hyper["t"] > 0:
        arrays = load_arrays(directory / "adam")
        opt.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
        opt.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
    return model, opt, state


# --- the loop ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    rows: list[dict]
    checkpoint: Path | None
    wallclock_s: float
    operator: lininv.PseudoInverseOperator
    eval_set: EvalSet
    baseline: dict  # operator-only eval metrics per sample

    def final_eval(self) -> dict:
        return next(r for r in reversed(self.rows) if r.get("eval_nemd") is not None)


def init_model(cfg: TrainConfig, lf: LeadField, model_config=None):
    if cfg.model_kind == "fcn":
        if model_config is None:
            x, y = _batch(dataclasses.replace(cfg, batch=FCN_CALIBRATION), lf, 0)
            model_config = fcn_baseline.FcnConfig(
                lf.m, lf.n, output_scale=fcn_baseline.calibrate_output_scale(x, y))
        return fcn_baseline.FcnModel.init(model_config, seed=cfg.seed)
    mc = model_config or piunet.PiuNetConfig.desk()
    return piunet.PiuNetModel.init(mc, seed=cfg.seed)


def _batch(cfg: TrainConfig, lf: LeadField, step: int):
    tsim = cfg.train_sim()
    samples = [sim.generate_sample(tsim, lf, step * cfg.batch + j) for j in range(cfg.batch)]
    return np.stack([s.x for s in samples]), np.stack([s.y for s in samples])


def _loss(cfg: TrainConfig, model, op, idx, lf: LeadField, x: np.ndarray, y: np.ndarray):
    """Loss in the model's normalised space (targets divided by the same per-sample scale)."""
    if isinstance(model, piunet.PiuNetModel):
        x0 = lininv.apply(op, y)
        s = piunet.input_scale(x0, model.config.input_scaling)
        grid = piunet.embed_to_grid(x0 / s[:, None, None], lf.space, model.config.grid)
        pred = model.refine(grid.astype(model.dtype), idx)
    else:
        ms = fcn_baseline.measurement_scale(y, model.config.input_scaling)
        pred = model.forward((y / ms[:, None]).astype(model.dtype))
        # loss in units of the output scale, or Adam's eps swamps the tiny gradients
        c = model.config.output_scale
        pred = ops.scale(pred, 1.0 / c)
        s = ms * c
    target = x / s[:, None, None]
    return losses.compute_loss(cfg.loss_kind, pred, target, gain=lf.gain, y=y / s[:, None],
                               lambda_rec=cfg.lambda_rec)


def _write_log(rows: list[dict], path: Path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in csv.DictReader(f)]


def train(cfg: TrainConfig, lf_train: LeadField, lf_test: LeadField, model=None, out_dir=None,
          eval_set: EvalSet | None = None, allow_inverse_crime: bool = False,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` (fresh if None); writes ``metrics.csv`` and checkpoints under ``out_dir``."""
    if lf_train.digest() == lf_test.digest() and not allow_inverse_crime:
        raise TrainingError("held-out lead field equals the training one (inverse crime)")
    if lf_train.space.digest() != lf_test.space.digest():
        raise TrainingError("train and test lead fields use different source spaces")
    t0 = time.perf_counter()
    model = model if model is not None else init_model(cfg, lf_train)
    op = lininv.make_operator(lf_train, cfg.operator_method, cfg.operator_reg)
    if op.info["leadfield_digest"] != lf_train.digest():
        raise TrainingError("operator was not built from the training lead field")
    ev = eval_set if eval_set is not None else make_eval_set(cfg.eval_sim(), lf_test, cfg.eval_size)
    if ev.leadfield_digest != lf_test.digest():
        raise TrainingError("eval set was not generated from the held-out lead field")
    wiring = {"train_leadfield": lf_train.digest(), "eval_leadfield": ev.leadfield_digest,
              "operator_leadfield": op.info["leadfield_digest"]}
    baseline = score(lininv.apply(op, ev.y), ev)
    idx = piunet.grid_index(lf_train.space, model.config.grid) if isinstance(model, piunet.PiuNetModel) else None

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(
            {"train_config": cfg.to_dict(), "config_digest": cfg.digest(), "wiring": wiring}, indent=2))
    opt = AdamState(lr=cfg.lr)
    rows: list[dict] = []
    ckpt = None

    def evaluate(step, row):
        m = score(model_estimates(model, op, ev.y, ev.space), ev)
        row.update(eval_nmse=float(m["nmse"].mean()), eval_nemd=float(np.nanmean(m["nemd"])),
                   eval_wcos=float(m["wcos"].mean()))
        if out is not None:
            nonlocal ckpt
            ckpt = save_checkpoint(out / "checkpoint", model, opt, step, cfg, wiring)

    row = {"step": 0, "loss": None}
    evaluate(0, row)
    row["wallclock_s"] = time.perf_counter() - t0
    rows.append(row)
    if progress:
        progress(row)
    for step in range(1, cfg.steps + 1):
        x, y = _batch(cfg, lf_train, step - 1)
        model.params.zero_grad()
        loss = _loss(cfg, model, op, idx, lf_train, x, y)
        value = float(loss.values)
        if not math.isfinite(value):
            if out is not None:
                _write_log(rows, out / "metrics.csv")
            raise NumericError(f"non-finite loss {value} at step {step}", ckpt)
        loss.backward()
        adam_step(model.params, opt)
        row = {"step": step, "loss": value}
        if step % cfg.eval_every == 0 or step == cfg.steps:
            evaluate(step, row)
        row["wallclock_s"] = time.perf_counter() - t0
        rows.append(row)
        if progress and row.get("eval_nemd") is not None:
            progress(row)
    if out is not None:
        _write_log(rows, out / "metrics.csv")
    return TrainResult(model, rows, ckpt, time.perf_counter() - t0, op, ev, baseline)


def compare_losses(base: TrainConfig, kinds, lf_train: LeadField, lf_test: LeadField,
                   out_dir=None) -> list[dict]:
    """One run per loss kind with identical seeds and data; a row per (kind, eval point)."""
    ev = make_eval_set(base.eval_sim(), lf_test, base.eval_size)
    report = []
    for i, kind in enumerate(kinds):
        cfg = dataclasses.replace(base, loss_kind=kind)
        sub = None if out_dir is None else Path(out_dir) / f"{i:02d}-{kind}"
        res = train(cfg, lf_train, lf_test, out_dir=sub, eval_set=ev)
        for r in res.rows:
            if r.get("eval_nemd") is not None:
                report.append({"loss_kind": kind, "step": r["step"], "nmse": r["eval_nmse"],
                               "nemd": r["eval_nemd"], "wcos": r["eval_wcos"]})
    return report


def loss_trend(losses_: list[float], window: int = 500) -> tuple[float, float]:
    """Median training loss over the first and over the last ``window`` steps."""
    v = np.asarray(losses_, dtype=np.float64)
    if v.size < 2 * window:
        raise ValueError(f"need at least {2 * window} logged losses, got {v.size}")
    return float(np.median(v[:window])), float(np.median(v[-window:]))

"""Experiment harness: sweeps over SNR, source extent, source count and dead sensors.

Every experiment evaluates a list of methods at each grid point on a held-out
set simulated with the test lead field only. Results go to ``results.csv``
(columns fixed by ``CSV_COLUMNS``), ``results.json`` and
``resolved-config.json``; the last one reruns the experiment exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lininv, sparseinv
from . import simulate as sim
from . import train as tr
from .geometry import LeadField

log = logging.getLogger(__name__)

KINDS = ("snr_sweep", "extent_sweep", "count_sweep", "missing_sensors", "method_table")
METHODS = ("eloreta", "lasso", "fcn", "piunet")
CSV_COLUMNS = ("experiment", "grid_value", "method", "metric", "mean", "std", "n", "wallclock_s")
METRICS = ("nmse", "nemd", "wcos")
LASSO_FRACTIONS = (0.01, 0.03, 0.1, 0.3)

DEFAULT_GRIDS = {
    "snr_sweep": [0.0, 10.0, 20.0, 30.0, 40.0],
    "extent_sweep": [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0],
    "count_sweep": [1, 2, 3, 5, 10],
    "missing_sensors": [11],
    "method_table": [20.0],
}


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class HeldOutLeadField:
    """Marks the lead field that eval data may be simulated from.

    Built explicitly next to the training lead field, so an eval set cannot be
    drawn from the operator's own forward model by accident.
    """

    lf: LeadField
    train_digest: str

    def __post_init__(self):
        if self.lf.digest() == self.train_digest:
            raise BenchError("held-out lead field is the training lead field (inverse crime)")

    @classmethod
    def pair(cls, lf_train: LeadField, lf_test: LeadField) -> "HeldOutLeadField":
        if lf_train.space.digest() != lf_test.space.digest():
            raise BenchError("train and test lead fields use different source spaces")
        return cls(lf_test, lf_train.digest())


@dataclass(frozen=True)
class Experiment:
    kind: str
    grid: tuple = ()
    methods: tuple = METHODS
    eval_size: int = 200
    seed: int = 0
    snr_db: tuple = (20.0,)  # extent/count sweeps run once per level here
    n_masks: int = 5
    operator_method: str = "eloreta"
    operator_reg: float = 0.05
    lasso_fractions: tuple = LASSO_FRACTIONS
    lasso_calibration: int = 20
    checkpoints: dict = field(default_factory=dict)  # method -> directory
    timing: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BenchError(f"unknown experiment kind {self.kind!r}")
        grid = tuple(self.grid) if self.grid else tuple(DEFAULT_GRIDS[self.kind])
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in np.atleast_1d(self.snr_db)))
        object.__setattr__(self, "lasso_fractions", tuple(self.lasso_fractions))
        object.__setattr__(self, "checkpoints", dict(self.checkpoints))
        if not grid or not self.methods:
            raise BenchError("grid and methods must be nonempty")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise BenchError(f"unknown methods {sorted(bad)}")
        if self.eval_size < 1 or self.n_masks < 1:
            raise BenchError("eval_size and n_masks must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["checkpoints"] = {k: str(v) for k, v in self.checkpoints.items()}
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Experiment":
        return cls(**d)

    def points(self) -> list[tuple[str, dict]]:
        """``(grid label, simulation overrides)`` per grid point."""
        out = []
        if self.kind in ("snr_sweep", "method_table"):
            for v in self.grid:
                out.append((f"{float(v):g}", {"snr": float(v)}))
        elif self.kind == "extent_sweep":
            for snr in self.snr_db:
                for v in self.grid:
                    out.append((f"{float(v):g}mm@{snr:g}dB", {"snr": snr, "sigma": float(v)}))
        elif self.kind == "count_sweep":
            for snr in self.snr_db:
                for v in self.grid:
                    out.append((f"{int(v)}@{snr:g}dB", {"snr": snr, "count": int(v)}))
        else:
            for v in self.grid:
                out.append((f"{int(v)}", {"snr": self.snr_db[0], "dead": int(v)}))
        return out


def sim_config(overrides: dict, base_seed: int) -> sim.SimConfig:
    snr = overrides["snr"]
    cfg = sim.SimConfig(n_activ_max=1, n_activ_min=1, snr_range_db=(snr, snr), base_seed=base_seed)
    if "sigma" in overrides:
        cfg = dataclasses.replace(cfg, sigma_range_mm=(overrides["sigma"], overrides["sigma"]))
    if "count" in overrides:
        cfg = dataclasses.replace(cfg, n_activ_max=overrides["count"], n_activ_min=overrides["count"])
    return cfg


def eval_seed(e: Experiment, point_index: int) -> int:
    # SNR sweeps share sources across grid points: only the noise level changes
    if e.kind in ("snr_sweep", "method_table"):
        return sim.sample_seed(e.seed, 0)
    return sim.sample_seed(e.seed, point_index)


def dead_masks(e: Experiment, m: int, n_dead: int) -> list[np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(sim.sample_seed(e.seed, 0xDEAD + n_dead)))
    return [np.sort(rng.choice(m, size=n_dead, replace=False)) for _ in range(e.n_masks)]


# --- methods ---------------------------------------------------------------------------

def lasso_estimates(lf: LeadField, y: np.ndarray, fraction: float) -> np.ndarray:
    out = np.empty((y.shape[0], lf.n, 3))
    for i, yi in enumerate(y):
        lam = fraction * sparseinv.lambda_max(lf, yi)
        x, _ = sparseinv.solve_group_lasso(sparseinv.GroupLassoProblem(lf, yi, lam, max_iter=2000, tol=1e-8))
        out[i] = x
    return out


def _load_checkpoint(e: Experiment, method: str):
    path = e.checkpoints.get(method)
    if path is None:
        raise BenchError(f"method {method!r} needs a checkpoint; none given")
    if not (Path(path) / "model.json").exists():
        raise BenchError(f"missing {method} checkpoint {Path(path) / 'model.json'}")
    return tr.load_any_model(path)


class _Context:
    """Everything a (grid point, method) task needs; shared with worker processes by fork."""

    def __init__(self, e: Experiment, lf_train: LeadField, held: HeldOutLeadField):
        self.e = e
        self.lf_train = lf_train
        self.held = held
        self.models = {m: _load_checkpoint(e, m) for m in e.methods if m in ("fcn", "piunet")}
        self.points = e.points()
        self._eval: dict = {}
        self._ops: dict = {}
        self.lasso_fraction = None

    def eval_set(self, i: int) -> tr.EvalSet:
        if i not in self._eval:
            cfg = sim_config(self.points[i][1], eval_seed(self.e, i))
            self._eval[i] = tr.make_eval_set(cfg, self.held.lf, self.e.eval_size)
        return self._eval[i]

    def operator(self, dead: tuple = ()) -> tuple[lininv.PseudoInverseOperator, LeadField]:
        if dead not in self._ops:
            lf, _ = lininv.mask_sensors(self.lf_train, None, dead)
            self._ops[dead] = (lininv.make_operator(lf, self.e.operator_method, self.e.operator_reg), lf)
        return self._ops[dead]

    def calibrate_lasso(self) -> float:
        """Pick the λ / λ_max fraction with the lowest mean NEMD on training-model data."""
        if self.lasso_fraction is None:
            cfg = sim_config({"snr": self.e.snr_db[0]}, sim.sample_seed(self.e.seed, 0xCA1B))
            # tuning happens on the training forward model, never on held-out data
            ev = tr.make_eval_set(cfg, self.lf_train, self.e.lasso_calibration)
            scores = [np.nanmean(tr.score(lasso_estimates(self.lf_train, ev.y, f), ev)["nemd"])
                      for f in self.e.lasso_fractions]
            self.lasso_fraction = float(self.e.lasso_fractions[int(np.argmin(scores))])
            self.lasso_scores = [float(s) for s in scores]
        return self.lasso_fraction

    def estimate(self, method: str, y: np.ndarray, dead: tuple = ()) -> np.ndarray:
        op, lf = self.operator(dead)
        if dead:
            y = y.copy()
            y[:, list(dead)] = 0.0
        if method == "eloreta":
            return lininv.apply(op, y)
        if method == "lasso":
            return lasso_estimates(lf, y, self.calibrate_lasso())
        model = self.models[method]
        return tr.model_estimates(model, op, y, self.lf_train.space)


def _run_task(ctx: _Context, i: int, method: str) -> list[dict]:
    label, over = ctx.points[i]
    ev = ctx.eval_set(i)
    masks = dead_masks(ctx.e, ctx.lf_train.m, over["dead"]) if "dead" in over else [np.array([], int)]
    per_mask = {k: [] for k in METRICS}
    pooled = {k: [] for k in METRICS}
    elapsed = 0.0
    for mask in masks:
        dead = tuple(int(d) for d in mask)
        ctx.operator(dead)  # operator construction is not inference time
        t0 = time.perf_counter()
        est = ctx.estimate(method, ev.y, dead)
        elapsed += time.perf_counter() - t0
        if not np.all(np.isfinite(est)):
            raise BenchError(f"{method} produced non-finite estimates at {label}")
        s = tr.score(est, ev)
        for k in METRICS:
            per_mask[k].append(float(np.nanmean(s[k])))
            pooled[k].append(s[k])
    rows = []
    for k in METRICS:
        if len(masks) > 1:
            # spread across random dead-sensor subsets
            mean, std, n = float(np.mean(per_mask[k])), float(np.std(per_mask[k])), len(masks)
        else:
            v = pooled[k][0]
            mean, std, n = float(np.nanmean(v)), float(np.nanstd(v)), int(np.isfinite(v).sum())
        rows.append({"experiment": ctx.e.kind, "grid_value": label, "method": method, "metric": k,
                     "mean": mean, "std": std, "n": n,
                     "wallclock_s": elapsed / ev.size if ctx.e.timing else 0.0})
    return rows


_CTX: _Context | None = None


def _worker(args):
    i, method = args
    return _run_task(_CTX, i, method)


def run_experiment(e: Experiment, lf_train: LeadField, held: HeldOutLeadField, out_dir=None,
                   workers: int = 1) -> list[dict]:
    """Rows ordered by grid point then method, whatever the worker count."""
    global _CTX
    if not isinstance(held, HeldOutLeadField):
        raise BenchError("eval data must come from a HeldOutLeadField")
    if held.train_digest != lf_train.digest():
        raise BenchError("held-out lead field was paired with a different training lead field")
    ctx = _Context(e, lf_train, held)
    tasks = [(i, m) for i in range(len(ctx.points)) for m in e.methods]
    if "lasso" in e.methods:
        ctx.calibrate_lasso()
    if workers > 1:
        for i in range(len(ctx.points)):
            ctx.eval_set(i)
        _CTX = ctx
        try:
            import multiprocessing as mp

            with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as pool:
                results = list(pool.map(_worker, tasks))
        finally:
            _CTX = None
    else:
        results = [_run_task(ctx, i, m) for i, m in tasks]
    rows = [r for rs in results for r in rs]
    if e.kind == "snr_sweep":
        _log_trend(rows)
    if out_dir is not None:
        write_reports(e, rows, ctx, Path(out_dir))
    return rows


def _log_trend(rows: list[dict]):
    for method in sorted({r["method"] for r in rows}):
        means = [r["mean"] for r in rows if r["method"] == method and r["metric"] == "nemd"
                 and float(r["grid_value"]) <= 30]
        if count_inversions(means) > 1:
            log.warning("NEMD of %s is not monotone in SNR: %s", method, means)


def count_inversions(values) -> int:
    """Number of increases in a sequence that should be non-increasing."""
    v = np.asarray(values, dtype=np.float64)
    return int((np.diff(v) > 0).sum())


# --- reports ----------------------------------------------------------------------------

def csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def _digest_dir(path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file() and p.suffix in (".nlt", ".json") and p.name != "train-state.json":
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_reports(e: Experiment, rows: list[dict], ctx: _Context, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = csv_text(rows)
    (out / "results.csv").write_text(text)
    digests = {"train_leadfield": ctx.lf_train.digest(), "test_leadfield": ctx.held.lf.digest(),
               "checkpoints": {m: _digest_dir(p) for m, p in e.checkpoints.items() if m in e.methods}}
    resolved = {"experiment": e.to_dict(), "digests": digests,
                "lasso_fraction": ctx.lasso_fraction}
    (out / "resolved-config.json").write_text(json.dumps(resolved, indent=2))
    report = {"experiment": e.kind, "resolved_config": resolved, "rows": rows,
              "csv_digest": hashlib.sha256(text.encode()).hexdigest()[:16]}
    if ctx.lasso_fraction is not None:
        report["lasso_calibration"] = dict(zip(map(str, e.lasso_fractions), ctx.lasso_scores))
    (out / "results.json").write_text(json.dumps(report, indent=2))


def load_resolved(path) -> Experiment:
    d = json.loads(Path(path).read_text())
    return Experiment.from_dict(d["experiment"] if "experiment" in d else d)

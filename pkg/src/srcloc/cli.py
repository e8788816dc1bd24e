"""Command-line entry point: ``srcloc <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 bad or missing data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(p: argparse.ArgumentParser, defaults: bool):
    # defaults only on the top-level parser, or subcommand parsing would clobber them
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(0), help="base seed (default 0)")
    p.add_argument("--config", type=Path, default=d(None), help="JSON config file")
    p.add_argument("--out", type=Path, default=d(None), help="output file or directory")
    p.add_argument("--threads", type=int, default=d(1), help="BLAS threads (default 1)")
    p.add_argument("--precision", choices=("f32", "f64"), default=d("f32"))


def _leadfield_flags(p):
    p.add_argument("--leadfield", type=Path, help="training lead field (.nlt); default: built")
    p.add_argument("--test-leadfield", type=Path, help="held-out lead field (.nlt); default: built")
    p.add_argument("--spacing", type=float, default=10.0, help="lattice spacing in mm when building")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srcloc", description=__doc__.splitlines()[0])
    _global_flags(p, True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("leadfield", help="build, perturb or export a lead field")
    _global_flags(s, False)
    s.add_argument("action", choices=("build", "perturb", "export"))
    s.add_argument("--spacing", type=float, default=10.0)
    s.add_argument("--sensors", type=int, default=61)
    s.add_argument("--input", type=Path, help="lead field to export")

    s = sub.add_parser("simulate", help="write a simulated dataset")
    _global_flags(s, False)
    _leadfield_flags(s)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--snr", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--sources", type=int, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--use-train-leadfield", action="store_true",
                   help="simulate from the training forward model (inverse crime)")

    s = sub.add_parser("solve", help="solve one simulated sample and print its metrics")
    _global_flags(s, False)
    _leadfield_flags(s)
    s.add_argument("--method", default="eloreta",
                   choices=("mne", "dspm", "sloreta", "eloreta", "pinv", "lasso"))
    s.add_argument("--reg", type=float, default=None)
    s.add_argument("--lam", type=float, default=0.1, help="lasso λ as a fraction of λ_max")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--snr", type=float, default=20.0)

    s = sub.add_parser("train", help="train the refinement network or the FCN baseline")
    _global_flags(s, False)
    _leadfield_flags(s)
    s.add_argument("--steps", type=int)
    s.add_argument("--model", choices=("piunet", "fcn"))
    s.add_argument("--loss", choices=("l1", "l2", "cosine", "l1_plus_recon"))
    s.add_argument("--paper", action="store_true", help="full-scale presets (60000 steps, batch 32, 32^3 grid)")

    s = sub.add_parser("eval", help="evaluate a checkpoint on a held-out set")
    _global_flags(s, False)
    _leadfield_flags(s)
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--snr", type=float, default=20.0)

    s = sub.add_parser("bench", help="run an experiment sweep")
    _global_flags(s, False)
    _leadfield_flags(s)
    s.add_argument("--kind", choices=("snr_sweep", "extent_sweep", "count_sweep",
                                      "missing_sensors", "method_table"))
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("inspect", help="print the header of an artifact file")
    _global_flags(s, False)
    s.add_argument("path", type=Path)
    return p


# --- helpers ------------------------------------------------------------------------------

def _read_config(args) -> dict:
    if args.config is None:
        return {}
    try:
        return json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{args.config}: invalid JSON ({exc})") from exc


def _dtype(args):
    import numpy as np

    return np.float32 if args.precision == "f32" else np.float64


def _leadfields(args):
    from . import geometry as geo

    lf = geo.load_leadfield(args.leadfield) if args.leadfield else geo.default_setup(args.spacing)
    if args.test_leadfield:
        lft = geo.load_leadfield(args.test_leadfield)
    elif lf.head is not None:
        lft = geo.compute_leadfield(geo.perturb_conductivity(lf.head), lf.sensors, lf.space)
    else:
        raise ValueError("imported lead field has no head model; pass --test-leadfield")
    return lf, lft


def _print(obj):
    print(json.dumps(obj, indent=2, default=float))


# --- commands ---------------------------------------------------------------------------

def cmd_leadfield(args):
    from . import geometry as geo

    if args.action == "export":
        import numpy as np

        if args.input is None or args.out is None:
            raise UsageError("export needs --input and --out")
        lf = geo.load_leadfield(args.input)
        np.savetxt(args.out, lf.gain, delimiter=",")
        return
    sigma = geo.TEST_CONDUCTIVITIES if args.action == "perturb" else geo.DEFAULT_CONDUCTIVITIES
    lf = geo.default_setup(args.spacing, args.sensors, conductivities=sigma)
    out = args.out or Path(f"leadfield-{args.action}.nlt")
    geo.save_leadfield(lf, out)
    _print({"path": str(out), "M": lf.m, "N": lf.n, "digest": lf.digest()})


def cmd_simulate(args):
    from . import simulate as sim

    lf, lft = _leadfields(args)
    cfg = sim.SimConfig.from_dict({**sim.SimConfig().to_dict(), **_read_config(args), "base_seed": args.seed})
    if args.snr:
        cfg = dataclasses.replace(cfg, snr_range_db=tuple(args.snr))
    if args.sources:
        cfg = dataclasses.replace(cfg, n_activ_min=args.sources[0], n_activ_max=args.sources[1])
    source = lf if args.use_train_leadfield else lft
    out = args.out or Path("dataset")
    n = sim.save_dataset(sim.generate_dataset(cfg, source, args.n), out, cfg, source)
    _print({"path": str(out), "n_samples": n, "leadfield_digest": source.digest()})


def cmd_solve(args):
    import numpy as np

    from . import lininv, metrics, sparseinv
    from . import simulate as sim

    lf, lft = _leadfields(args)
    cfg = sim.SimConfig(n_activ_max=1, snr_range_db=(args.snr, args.snr), base_seed=args.seed)
    sample = sim.generate_sample(cfg, lft, args.index)
    if args.method == "lasso":
        lam = args.lam * sparseinv.lambda_max(lf, sample.y)
        est, diag = sparseinv.solve_group_lasso(sparseinv.GroupLassoProblem(lf, sample.y, lam))
        info = {"iterations": diag.iterations, "converged": diag.converged}
    else:
        op = lininv.make_operator(lf, args.method, args.reg)
        est = lininv.apply(op, sample.y)
        info = {"iterations": op.iterations_used, "converged": op.converged}
    if not np.all(np.isfinite(est)):
        raise FloatingPointError(f"{args.method} produced a non-finite estimate")
    _print({"method": args.method, "index": args.index, **info,
            **metrics.evaluate(sample.x, est, lf.space)})


def cmd_train(args):
    from . import train as tr

    lf, lft = _leadfields(args)
    base = tr.TrainConfig.paper() if args.paper else tr.TrainConfig.desk()
    d = {**base.to_dict(), **_read_config(args), "seed": args.seed}
    if args.steps is not None:
        d["steps"] = args.steps
    if args.model:
        d["model_kind"] = args.model
    if args.loss:
        d["loss_kind"] = args.loss
    cfg = tr.TrainConfig.from_dict(d)
    model = tr.init_model(cfg, lf)
    if cfg.model_kind == "piunet" and args.paper:
        from . import piunet

        model = piunet.PiuNetModel.init(piunet.PiuNetConfig.paper(), seed=cfg.seed)
    model.params.astype(_dtype(args))
    out = args.out or Path("run")
    res = tr.train(cfg, lf, lft, model=model, out_dir=out,
                   progress=lambda r: logging.info("step %d: %s", r["step"], r))
    _print({"checkpoint": str(res.checkpoint), "final": res.final_eval(),
            "eloreta_nemd": float(res.baseline["nemd"].mean()), "wallclock_s": res.wallclock_s})


def cmd_eval(args):
    import numpy as np

    from . import lininv
    from . import train as tr

    lf, lft = _leadfields(args)
    model, _, state = tr.load_checkpoint(args.checkpoint)
    model.params.astype(_dtype(args))
    saved = tr.TrainConfig.from_dict(json.loads((args.checkpoint / "model.json").read_text())["train_config"])
    cfg = dataclasses.replace(saved.sim, snr_range_db=(args.snr, args.snr),
                              base_seed=tr.sim.sample_seed(args.seed, tr.EVAL_SEED_SALT))
    ev = tr.make_eval_set(cfg, lft, args.n)
    op = lininv.make_operator(lf, saved.operator_method, saved.operator_reg)
    m = tr.score(tr.model_estimates(model, op, ev.y, lf.space), ev)
    b = tr.score(lininv.apply(op, ev.y), ev)
    _print({"step": state["step"], "n": args.n,
            "model": {k: float(np.nanmean(v)) for k, v in m.items()},
            saved.operator_method: {k: float(np.nanmean(v)) for k, v in b.items()}})


def cmd_bench(args):
    from . import bench

    lf, lft = _leadfields(args)
    d = _read_config(args)
    d = dict(d.get("experiment", d))  # accepts a resolved-config.json as well
    if args.kind:
        d["kind"] = args.kind
    if "kind" not in d:
        raise UsageError("bench needs --kind or a config with 'kind'")
    d.setdefault("seed", args.seed)
    e = bench.Experiment.from_dict(d)
    out = args.out or Path(f"bench-{e.kind}")
    rows = bench.run_experiment(e, lf, bench.HeldOutLeadField.pair(lf, lft), out_dir=out,
                                workers=args.workers)
    _print({"out": str(out), "rows": len(rows)})


def cmd_inspect(args):
    from . import tensorfile

    path = args.path
    if path.is_dir():
        if (path / "manifest.json").exists():
            from . import simulate as sim

            _print(sim.read_manifest(path))
        elif (path / "model.json").exists():
            _print(json.loads((path / "model.json").read_text()))
        else:
            raise FileNotFoundError(f"{path}: no manifest.json or model.json")
        return
    if path.suffix == ".json":
        _print(json.loads(path.read_text()))
        return
    _print(tensorfile.describe(path))


COMMANDS = {"leadfield": cmd_leadfield, "simulate": cmd_simulate, "solve": cmd_solve,
            "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("srcloc: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    import numpy as np
    from threadpoolctl import threadpool_limits

    from .bench import BenchError
    from .train import NumericError, TrainingError

    try:
        with threadpool_limits(args.threads):
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"srcloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"srcloc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, BenchError, TrainingError) as exc:
        print(f"srcloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front door for reproducible experiment runs.

Subcommands: gen-target, train, evidence, modes, grid, elbo. Every command is
seed-driven (no wall-clock entropy) and writes machine-readable artifacts next
to a human summary on stdout. Exit codes: 0 success, 1 usage/config error,
2 runtime failure.

The output base directory can be overridden with the FLOWTEMPER_OUTDIR
environment variable; explicit absolute paths win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .evaluate import export_samples, grid_transform, mode_capture, save_modes_json, transform_drift, write_grid_csv
from .evidence import save_evidence_json, temperature_sweep
from .mathcore import RngStream
from .targets import GmSpec, eight_schools_target, get_target, gm_target, make_gm, ring_gm_2d
from .trainer import (
    METHODS,
    TrainConfig,
    estimate_elbo,
    load_checkpoint,
    train,
)

OUTDIR_ENV = "FLOWTEMPER_OUTDIR"


class CliError(Exception):
    """Usage or configuration problem (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _outpath(path: str) -> str:
    base = os.environ.get(OUTDIR_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


# -- experiment config ---------------------------------------------------------

_TOP_KEYS = {"method", "target", "preset", "seed", "out", "train"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_DUP_KEYS = {"method", "seed", "preset"}


def _validate_experiment_config(obj: dict) -> None:
    if not isinstance(obj, dict):
        raise CliError("config must be a JSON object")
    unknown = sorted(set(obj) - _TOP_KEYS)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    train_part = obj.get("train", {})
    if not isinstance(train_part, dict):
        raise CliError("config key 'train' must be an object")
    bad = sorted(set(train_part) - _TRAIN_KEYS)
    if bad:
        raise CliError(f"unknown train config keys: {', '.join(bad)}")
    for key in _DUP_KEYS:
        if key in train_part and key in obj and train_part[key] != obj[key]:
            raise CliError(f"config key '{key}' conflicts between top level and train section")


def resolve_target_descriptor(desc):
    """Returns (resolved_descriptor, GmSpec or None, TargetModel)."""
    if isinstance(desc, str):
        if desc == "ring2d":
            spec = ring_gm_2d()
            return "ring2d", spec, gm_target(spec, name="ring2d")
        if desc == "eight_schools":
            return "eight_schools", None, eight_schools_target()[1]
        if desc.endswith(".json"):
            spec = GmSpec.load(desc)
            return {"gm": spec.to_json()}, spec, gm_target(spec)
        raise CliError(f"unknown target '{desc}' (ring2d, eight_schools, or a gm_spec .json path)")
    if isinstance(desc, dict):
        if "gm" in desc:
            spec = GmSpec.from_json(desc["gm"])
            return {"gm": spec.to_json()}, spec, gm_target(spec)
        if "gm_spec" in desc:
            spec = GmSpec.load(desc["gm_spec"])
            return {"gm": spec.to_json()}, spec, gm_target(spec)
    raise CliError(f"cannot interpret target descriptor {desc!r}")


def _load_run(run_dir: str):
    """(config dict, GmSpec or None, TargetModel, FlowModel) for a finished run."""
    cfg_path = os.path.join(run_dir, "config.json")
    ckpt_path = os.path.join(run_dir, "checkpoint.bin")
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(f"{run_dir}: missing config.json")
    if not os.path.exists(ckpt_path):
        raise FileNotFoundError(f"{run_dir}: missing checkpoint.bin")
    with open(cfg_path) as f:
        cfg = json.load(f)
    _, spec, target = resolve_target_descriptor(cfg.get("target", "ring2d"))
    model = load_checkpoint(ckpt_path)
    if model.dim != target.dim:
        raise CliError(f"checkpoint is {model.dim}-d but target is {target.dim}-d")
    return cfg, spec, target, model


# -- subcommands ------------------------------------------------------------------


def cmd_gen_target(args) -> int:
    spec, _ = make_gm(args.dim, K=args.modes, seed=args.seed)
    out = _outpath(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    spec.save(out)
    print(f"wrote {out}")
    print(f"d_min={spec.d_min:.6g} d_max={spec.d_max:.6g} (dim {args.dim}, {args.modes} modes)")
    return 0


def cmd_train(args) -> int:
    if args.config:
        with open(args.config) as f:
            obj = json.load(f)
        _validate_experiment_config(obj)
        method = obj.get("method", "flowvat")
        target_desc = obj.get("target", "ring2d")
        preset = obj.get("preset") or "desk"
        seed = int(obj.get("seed", 0))
        overrides = {k: v for k, v in obj.get("train", {}).items() if k not in _DUP_KEYS}
        out = args.out or obj.get("out")
    else:
        method = args.method
        target_desc = args.target
        preset = args.preset
        seed = args.seed
        overrides = {}
        if args.pretrain_epochs is not None:
            overrides["pretrain_epochs"] = args.pretrain_epochs
        if args.finetune_epochs is not None:
            overrides["finetune_epochs"] = args.finetune_epochs
        if args.batch_size is not None:
            overrides["batch_size"] = args.batch_size
        if args.interval is not None:
            overrides["interval_halfwidth"] = args.interval / 2.0
        out = args.out
    if method not in METHODS:
        raise CliError(f"unknown method '{method}' (have {', '.join(METHODS)})")
    for key in ("hidden", "pretrain_T_range", "finetune_T_range"):
        if key in overrides and overrides[key] is not None:
            overrides[key] = tuple(overrides[key])

    resolved_desc, _, target = resolve_target_descriptor(target_desc)
    try:
        cfg = TrainConfig.from_preset(preset, method, seed=seed, **overrides)
    except (ValueError, TypeError) as err:
        raise CliError(str(err)) from err

    target_tag = target.name if isinstance(resolved_desc, str) else "gm"
    run_dir = _outpath(out or f"runs/{method}_{target_tag}_seed{seed}")
    snapshot = {
        "method": method,
        "seed": seed,
        "preset": preset,
        "target": resolved_desc,
        "train": cfg.snapshot(),
    }
    print(f"training {method} on {target.name} (preset {preset}, seed {seed}) -> {run_dir}")
    model, art = train(cfg, target, run_dir=run_dir, progress=not args.quiet,
                       config_snapshot=snapshot)
    e = art.elbo
    print(f"done in {art.meta['wall_clock_s']}s; ELBO(T=1) = {e.mean:.4f} +/- {e.std_err:.4f} (n={e.n})")
    return 0


def cmd_evidence(args) -> int:
    run_dir = _outpath(args.run)
    _, _, target, model = _load_run(run_dir)
    temps = [float(t) for t in args.temps.split(",") if t]
    if not temps:
        raise CliError("empty --temps list")
    sweep = temperature_sweep(model, target, temps, n=args.n, rng=RngStream(args.seed))
    out = os.path.join(run_dir, "evidence.json")
    save_evidence_json(sweep, out)
    print(f"wrote {out}")
    print(f"{'T':>6} {'log_Z_hat':>12} {'std_err':>10} {'ESS':>10} {'max_w':>8}")
    for est in sweep:
        flag = "  (low ESS)" if est.flagged_unreliable else ""
        print(
            f"{est.T:6.3g} {est.log_Z_hat:12.5f} {est.std_err_log:10.5f} "
            f"{est.ess:10.1f} {est.max_weight_fraction:8.4f}{flag}"
        )
    return 0


def cmd_modes(args) -> int:
    run_dir = _outpath(args.run)
    cfg, spec, target, model = _load_run(run_dir)
    if args.target_spec:
        spec = GmSpec.load(args.target_spec)
    if spec is None:
        raise CliError("target has no mode centers; mode capture needs a Gaussian-mixture target")
    rng = RngStream(args.seed)
    samples, _ = model.sample(rng.child("modes"), args.n, 1.0)
    report = mode_capture(samples, spec, quantile=args.quantile, threshold=args.threshold)
    out = os.path.join(run_dir, "modes.json")
    save_modes_json(report, out)
    export_samples(model, target, args.n, 1.0, os.path.join(run_dir, "samples.csv"),
                   rng=rng.child("export"))
    print(f"wrote {out} and samples.csv")
    print(
        f"modes captured: {report.modes_captured}/{len(report.captured)} "
        f"(radius {report.radius:.4f}, threshold {report.threshold})"
    )
    print("per-mode inlier fractions:", np.array2string(report.fractions, precision=4))
    return 0


def cmd_grid(args) -> int:
    run_dir = _outpath(args.run)
    _, _, _, model = _load_run(run_dir)
    if model.dim != 2:
        raise CliError("grid diagnostic requires a 2-d model")
    temps = [float(t) for t in args.temps.split(",") if t]
    if len(temps) < 2:
        raise CliError("need at least two temperatures for the drift diagnostic")
    gt = grid_transform(model, (args.range_lo, args.range_hi), args.spacing, temps)
    out = os.path.join(run_dir, "grid.csv")
    write_grid_csv(gt, out)
    drift = transform_drift(gt)
    print(f"wrote {out}")
    print(f"transform drift across T={temps}: {drift:.6f} grid spacings")
    return 0


def cmd_elbo(args) -> int:
    run_dir = _outpath(args.run)
    _, _, target, model = _load_run(run_dir)
    est = estimate_elbo(model, target, T=args.T, n=args.n, rng=RngStream(args.seed))
    out = os.path.join(run_dir, "elbo.json")
    with open(out, "w") as f:
        json.dump(est.to_json(), f, indent=1)
    print(f"wrote {out}")
    print(f"ELBO(T={est.T:g}) = {est.mean:.4f} +/- {est.std_err:.4f} (n={est.n}, excluded {est.excluded})")
    return 0


# -- wiring --------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="flowtemper", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-target", help="generate a randomized Gaussian-mixture target")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--modes", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="gm_spec.json")
    g.set_defaults(func=cmd_gen_target)

    t = sub.add_parser("train", help="train a flow with a given method and target")
    t.add_argument("--config", help="experiment config JSON (overrides the flags)")
    t.add_argument("--method", default="flowvat", choices=METHODS)
    t.add_argument("--target", default="ring2d",
                   help="ring2d, eight_schools, or path to a gm_spec.json")
    t.add_argument("--preset", default="desk", help="desk or paper")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", help="run directory (default runs/<method>_<target>_seed<seed>)")
    t.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    t.add_argument("--finetune-epochs", type=int, dest="finetune_epochs")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--interval", type=float,
                   help="full spline interval width (halfwidth B = interval/2)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evidence", help="importance-sampling evidence sweep from a checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--temps", default="0.95,1.0,1.25,1.5")
    e.add_argument("--n", type=int, default=50_000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evidence)

    m = sub.add_parser("modes", help="mode-capture score of a trained run")
    m.add_argument("--run", required=True)
    m.add_argument("--target-spec", dest="target_spec", help="gm_spec.json override")
    m.add_argument("--n", type=int, default=2000)
    m.add_argument("--quantile", type=float, default=0.9)
    m.add_argument("--threshold", type=float, default=0.05)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_modes)

    gr = sub.add_parser("grid", help="grid-transform drift diagnostic (2-d models)")
    gr.add_argument("--run", required=True)
    gr.add_argument("--temps", default="0.95,1.0,2.0,5.0,10.0")
    gr.add_argument("--range-lo", type=float, default=-3.0)
    gr.add_argument("--range-hi", type=float, default=3.0)
    gr.add_argument("--spacing", type=float, default=0.5)
    gr.set_defaults(func=cmd_grid)

    el = sub.add_parser("elbo", help="re-estimate the ELBO from a checkpoint")
    el.add_argument("--run", required=True)
    el.add_argument("--n", type=int, default=5000)
    el.add_argument("--T", type=float, default=1.0)
    el.add_argument("--seed", type=int, default=0)
    el.set_defaults(func=cmd_elbo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

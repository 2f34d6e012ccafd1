"""Command-line front end.

Every subcommand writes into an output directory holding its artifacts,
``resolved_config.json`` (defaults, then ``--config`` file, then flags) and a
``manifest.json`` with sha256 checksums. Logs go to stderr; ``--json`` prints a
summary to stdout.

Exit codes: 0 success, 2 invalid input, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as dg
from . import emulator as em
from . import exact_geometry as eg
from .analytic_surrogate import SoftGeomConfig, gamma_soft_value
from .grid_core import Field2D, RasterError, Units, read_raster, synthetic_corpus, write_raster
from .target_pipeline import (
    DEFAULT_LEVELS,
    StoreError,
    ThresholdSpec,
    calibrate_thresholds,
    generate_targets,
    list_corpus,
    load_store,
)

log = logging.getLogger("minkgeom")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ helpers


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_files(out: Path, config: dict, manifest_name: str = "manifest.json") -> None:
    """Write the resolved config and a checksum manifest of ``out``.

    Directories whose module already owns ``manifest.json`` (target stores and
    checkpoints) get the listing under ``manifest_name`` instead.
    """
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"tool": "minkgeom", "version": __version__, **config}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=_jsonable) + "\n")
    skip = {manifest_name, "resolved_config.json"}
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in skip)
    listing = {
        "tool": "minkgeom",
        "version": __version__,
        "files": [{"path": str(p.relative_to(out)), "sha256": _sha256(p)} for p in files],
    }
    (out / manifest_name).write_text(json.dumps(listing, indent=2, sort_keys=True) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Layer defaults, then the JSON ``--config`` file, then explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config {path}: {exc}") from exc
        unknown = set(data) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(data)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _emit(args, summary: dict) -> None:
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=_jsonable))
    else:
        for k, v in summary.items():
            print(f"{k}: {v}")


def _thresholds_from(cfg: dict) -> ThresholdSpec:
    if cfg.get("thresholds_file"):
        path = Path(cfg["thresholds_file"])
        if not path.is_file():
            raise FileNotFoundError(f"thresholds file not found: {path}")
        return ThresholdSpec.from_dict(json.loads(path.read_text()))
    if cfg.get("thresholds"):
        return ThresholdSpec.fixed(cfg["thresholds"], cfg.get("drizzle", 0.1))
    raise UsageError("give --thresholds or --thresholds-file")


# -------------------------------------------------------------- subcommands

GEN_SYNTHETIC = {"n": 100, "seed": 0, "height": 32, "width": 32, "max_peaks": 5, "pixel_size": 2.0}


def cmd_gen_synthetic(args) -> dict:
    cfg = resolve(args, GEN_SYNTHETIC)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = synthetic_corpus(cfg["n"], cfg["seed"], cfg["height"], cfg["width"], cfg["max_peaks"], cfg["pixel_size"])
    width = max(5, len(str(cfg["n"])))
    for i, f in enumerate(fields):
        write_raster(f, out / f"field_{i:0{width}d}.mgf")
    write_run_files(out, cfg)
    return {"n_fields": len(fields), "out": str(out)}


CALIBRATE = {"levels": list(DEFAULT_LEVELS), "cap": 50_000_000, "seed": 0, "drizzle": 0.1}


def cmd_calibrate(args) -> dict:
    cfg = resolve(args, CALIBRATE)
    paths = list_corpus(args.corpus)
    fields = (read_raster(p) for p in paths)
    spec = calibrate_thresholds(fields, cfg["levels"], cfg["cap"], cfg["seed"], cfg["drizzle"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "thresholds.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    write_run_files(out, {**cfg, "corpus": str(Path(args.corpus).resolve())})
    return {"thresholds": list(spec.physical_thresholds), "levels": list(spec.quantile_levels)}


GEN_TARGETS = {
    "thresholds": None, "thresholds_file": None, "levels": None, "cap": 50_000_000, "seed": 0,
    "drizzle": 0.1, "epsilon": 0.05, "cutoff": 0.01, "workers": 1, "with_holes": False,
}


def cmd_gen_targets(args) -> dict:
    cfg = resolve(args, GEN_TARGETS)
    if cfg["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    if cfg["levels"] and not (cfg["thresholds"] or cfg["thresholds_file"]):
        fields = (read_raster(p) for p in list_corpus(args.corpus))
        spec = calibrate_thresholds(fields, cfg["levels"], cfg["cap"], cfg["seed"], cfg["drizzle"])
    else:
        spec = _thresholds_from(cfg)
    out = Path(args.out)
    summary = generate_targets(
        args.corpus, out, spec, cfg["workers"], cfg["epsilon"], cfg["cutoff"], cfg["with_holes"],
    )
    write_run_files(out, {**cfg, "corpus": str(Path(args.corpus).resolve())}, "run_manifest.json")
    return {"count": summary["count"], "skipped": summary["skipped"],
            "iso_violation_rate": summary["iso_violation_rate"], "out": str(out)}


TRAIN = {
    "arch": "constrained", "preset": "desk", "epochs": None, "lr": None, "batch": None,
    "weight_decay": None, "patience": None, "seed": 0, "val_fraction": 0.1,
    "loss_weights": None, "pixel_hidden": 32, "pixel_blocks": 1, "hidden": 32, "n_blocks": 2,
}


def _train_config(cfg: dict) -> em.TrainConfig:
    base = em.DESK_TRAIN_CONFIG if cfg["preset"] == "desk" else em.TrainConfig()
    over = {k: cfg[k] for k in ("epochs", "lr", "batch", "weight_decay", "patience", "loss_weights") if cfg[k] is not None}
    d = {**base.__dict__, **over, "seed": cfg["seed"], "val_fraction": cfg["val_fraction"]}
    return em.TrainConfig.from_dict(d)


def _store_and_fields(data: str, corpus: str | None):
    store = load_store(data)
    fields = store.fields(corpus)
    return store, fields


def cmd_train_emulator(args) -> dict:
    cfg = resolve(args, TRAIN)
    if cfg["preset"] not in ("desk", "paper"):
        raise UsageError("--preset must be desk or paper")
    tcfg = _train_config(cfg)
    store, fields = _store_and_fields(args.data, args.corpus)
    if not fields:
        raise UsageError("target store is empty")
    h, w = fields[0].shape
    ecfg = em.EmulatorConfig(
        arch=cfg["arch"], height=h, width=w, n_levels=store.n_levels, pixel_hidden=cfg["pixel_hidden"],
        pixel_blocks=cfg["pixel_blocks"], hidden=cfg["hidden"], n_blocks=cfg["n_blocks"],
        pixel_size=fields[0].pixel_size,
    )
    res = em.train_emulator(fields, store.gammas, tcfg, emulator_cfg=ecfg)
    out = Path(args.out)
    _, va = em.split_indices(len(fields), tcfg.val_fraction, tcfg.seed)
    metrics = em.evaluate(res.emulator, [fields[i] for i in va], store.gammas[va]) if va.size else {}
    em.save_checkpoint(res.emulator, out, {"train": tcfg.__dict__, "best_epoch": res.best_epoch, "val_metrics": metrics})
    dg.write_csv(out / "history.csv", ["epoch", "train_loss", "val_loss", "lr"],
                 [[h["epoch"], h["train_loss"], h["val_loss"], h["lr"]] for h in res.history])
    write_run_files(out, {**cfg, "data": str(Path(args.data).resolve()), "train_config": tcfg.__dict__},
                    "run_manifest.json")
    return {"best_epoch": res.best_epoch, "epochs_run": len(res.history), **{f"val_{k}": v for k, v in metrics.items()}}


def cmd_eval_emulator(args) -> dict:
    emu = em.load_checkpoint(args.ckpt)
    store, fields = _store_and_fields(args.data, args.corpus)
    if store.n_levels != emu.cfg.n_levels:
        raise UsageError(f"store has {store.n_levels} levels, checkpoint expects {emu.cfg.n_levels}")
    metrics = em.evaluate(emu, fields, store.gammas)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        write_run_files(out, {"ckpt": str(Path(args.ckpt).resolve()), "data": str(Path(args.data).resolve())})
    return metrics


ANALYTIC = {
    "thresholds": [2.5, 3.0, 3.5], "tau": 0.05, "tau_mask": 0.02, "delta": 0.0,
    "morph_filter": True, "persistence_mask": True,
}

INVERT = {
    **ANALYTIC, "surrogate": "analytic", "steps": 200, "lr": 0.1, "lambda_tv": 1e-5, "lambda_l2": 1e-6,
    "seed": 0, "height": 32, "width": 32, "blob_amplitude": 4.0, "blob_sigma": 4.0,
    "tau_start": 1.0, "tau_end": 0.05, "unsquared": False, "loss_weights": list(em.DEFAULT_LOSS_WEIGHTS),
}


def _soft_config(cfg: dict) -> SoftGeomConfig:
    return SoftGeomConfig(
        tuple(cfg["thresholds"]), tau=cfg["tau"], tau_mask=cfg["tau_mask"], persistence_delta=cfg["delta"],
        use_morph_filter=cfg["morph_filter"], use_persistence_mask=cfg["persistence_mask"],
    )


def _blob(h: int, w: int, amp: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return amp * np.exp(-((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / (2 * sigma * sigma))


def _weights(w) -> tuple[float, float, float]:
    if len(w) != 3:
        raise UsageError("--loss-weights needs three values")
    return tuple(float(v) for v in w)


def cmd_invert(args) -> dict:
    cfg = resolve(args, INVERT)
    if cfg["surrogate"] == "analytic":
        soft = _soft_config(cfg)
        sur = dg.analytic_surrogate(soft)
        if args.target:
            target_field = read_raster(args.target)
        else:
            target_field = Field2D(_blob(cfg["height"], cfg["width"], cfg["blob_amplitude"], cfg["blob_sigma"]), 1.0,
                                   Units.NORMALIZED)
        target = gamma_soft_value(target_field, soft, tau=cfg["tau_end"])
        shape = target_field.shape
    elif cfg["surrogate"] == "emulator":
        if not args.ckpt:
            raise UsageError("--surrogate emulator needs --ckpt")
        emu = em.load_checkpoint(args.ckpt)
        sur = dg.emulator_surrogate(emu)
        if not args.target:
            raise UsageError("--surrogate emulator needs --target (a raster)")
        target_field = read_raster(args.target)
        target = emu.predict(target_field)[0]
        shape = (emu.cfg.height, emu.cfg.width)
    else:
        raise UsageError("--surrogate must be analytic or emulator")
    icfg = dg.InversionConfig(
        target, shape, cfg["steps"], cfg["lr"], cfg["lambda_tv"], cfg["lambda_l2"], cfg["seed"],
        squared=not cfg["unsquared"], tau_start=cfg["tau_start"], tau_end=cfg["tau_end"],
        weights=_weights(cfg["loss_weights"]),
    )
    res = dg.invert(icfg, sur)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dg.write_csv(out / "trace.csv", ["step", "loss"], list(enumerate(res.trace)))
    write_raster(Field2D(res.x, target_field.pixel_size, target_field.units), out / "x_star.mgf")
    dg.write_pgm(out / "x_star.pgm", res.x)
    dg.write_pgm(out / "target.pgm", target_field.values)
    write_run_files(out, cfg)
    return {"initial": res.baseline, "final": res.trace[-1], "reduction": res.reduction}


GRADCHECK = {
    **ANALYTIC, "thresholds": [0.2, 0.5, 0.8], "surrogate": "analytic", "n_fields": 10, "h": 1e-6,
    "seed": 0, "size": 16,
}


def cmd_gradcheck(args) -> dict:
    cfg = resolve(args, GRADCHECK)
    if cfg["surrogate"] == "analytic":
        sur = dg.analytic_surrogate(_soft_config(cfg))
        fields = dg.random_smooth_fields(cfg["n_fields"], cfg["size"], cfg["seed"])
    elif cfg["surrogate"] == "emulator":
        if not args.ckpt:
            raise UsageError("--surrogate emulator needs --ckpt")
        emu = em.load_checkpoint(args.ckpt)
        sur = dg.emulator_surrogate(emu)
        fields = dg.random_smooth_fields(cfg["n_fields"], emu.cfg.height, cfg["seed"])
    else:
        raise UsageError("--surrogate must be analytic or emulator")
    rep = dg.gradcheck(sur, fields, cfg["h"], seed=cfg["seed"])
    out = Path(args.out)
    dg.write_csv(out / "gradcheck.csv", ["field", "max_rel_err"], list(enumerate(rep.max_rel_err)))
    write_run_files(out, cfg)
    return {"worst": rep.worst, "flagged": rep.flagged, "ok": rep.ok}


def cmd_raps(args) -> dict:
    f = read_raster(args.field)
    spec = dg.rapsd(f)
    out = Path(args.out)
    dg.write_csv(out / "spectrum.csv", ["k", "S"], [[k, float(s)] for k, s in enumerate(spec)])
    summary = {"n_bins": int(spec.size), "field": str(args.field)}
    if args.ref:
        ref = read_raster(args.ref)
        ratio = dg.spectral_ratio(f, ref)
        dg.write_csv(out / "ratio.csv", ["k", "ratio"], [[k, float(r)] for k, r in enumerate(ratio)])
        summary["raps_error"] = dg.raps_error(f, ref)
    write_run_files(out, {"field": str(Path(args.field).resolve()), "ref": args.ref and str(Path(args.ref).resolve())})
    return summary


SWEEP = {
    **ANALYTIC, "thresholds": [1.0, 5.0, 10.0], "tau": 0.5, "alphas": [0.5, 0.75, 1.0, 1.25, 1.5],
    "mask": None, "epsilon": 0.0, "cutoff": math.inf,
}


def _parse_mask(text: str | None, shape) -> np.ndarray:
    """``y0:y1,x0:x1`` in pixels; default is the central quarter."""
    h, w = shape
    if text is None:
        y0, y1, x0, x1 = h // 4, 3 * h // 4, w // 4, 3 * w // 4
    else:
        try:
            ys, xs = text.split(",")
            y0, y1 = (int(t) for t in ys.split(":"))
            x0, x1 = (int(t) for t in xs.split(":"))
        except ValueError:
            raise UsageError(f"mask must look like y0:y1,x0:x1, got {text!r}") from None
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise UsageError(f"mask {text!r} is outside the {h}x{w} domain")
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def cmd_mech_sweep(args) -> dict:
    cfg = resolve(args, SWEEP)
    base = read_raster(args.field)
    mask = _parse_mask(cfg["mask"], base.shape)
    sur = dg.analytic_surrogate(_soft_config(cfg), base.pixel_size)
    rows = dg.mechanistic_sweep(base, mask, cfg["alphas"], sur, cfg["thresholds"], cfg["epsilon"], cfg["cutoff"])
    header, table = dg.sweep_rows(rows)
    out = Path(args.out)
    dg.write_csv(out / "sweep.csv", header, table)
    write_run_files(out, {**cfg, "field": str(Path(args.field).resolve())})
    return {"n_alphas": len(rows)}


STEINER = {"radii": [0.0, 0.01, 0.02, 0.03, 0.04, 0.05], "disk_radius": 0.25, "resolution": 512}


def cmd_steiner_check(args) -> dict:
    cfg = resolve(args, STEINER)
    rows = eg.steiner_check(cfg["radii"], cfg["disk_radius"], cfg["resolution"])
    table = [[r, lhs, rhs, abs(lhs - rhs) / rhs] for r, lhs, rhs in rows]
    worst = max(t[3] for t in table)
    if args.out:
        out = Path(args.out)
        dg.write_csv(out / "steiner.csv", ["r", "measured", "polynomial", "rel_err"], table)
        write_run_files(out, cfg)
    return {"max_rel_err": worst}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="minkgeom",
        description="Exact and differentiable integral-geometric descriptors of 2-D fields.",
    )
    p.add_argument("--version", action="version", version=f"minkgeom {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    common.add_argument("--config", help="JSON file of settings; explicit flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    s = add("gen-synthetic", cmd_gen_synthetic, "Write a seeded corpus of multipeak Gaussian rain fields (mm/h).")
    s.add_argument("--out", required=True, help="output directory for .mgf rasters")
    s.add_argument("--n", type=int, help="number of fields (default 100)")
    s.add_argument("--seed", type=int, help="master seed (default 0)")
    s.add_argument("--height", type=int, help="grid height in pixels (default 32)")
    s.add_argument("--width", type=int, help="grid width in pixels (default 32)")
    s.add_argument("--max-peaks", type=int, help="peaks per field are 1..max (default 5)")
    s.add_argument("--pixel-size", type=float, help="pixel edge length in km (default 2.0)")

    s = add("calibrate", cmd_calibrate, "Map quantile levels to physical thresholds (mm/h) over wet pixels.")
    s.add_argument("--corpus", required=True, help="directory of .mgf rasters in mm/h")
    s.add_argument("--out", required=True, help="output directory; thresholds.json is written there")
    s.add_argument("--levels", type=_floats, help="quantile levels in (0,1), comma separated (unitless)")
    s.add_argument("--cap", type=int, help="reservoir size in pixels (default 5e7)")
    s.add_argument("--seed", type=int, help="reservoir seed (default 0)")
    s.add_argument("--drizzle", type=float, help="wet-pixel threshold in mm/h (default 0.1)")

    s = add("gen-targets", cmd_gen_targets, "Compute exact gamma vectors for a corpus into a chunked store.")
    s.add_argument("--corpus", required=True, help="directory of .mgf rasters in mm/h")
    s.add_argument("--out", required=True, help="store directory")
    s.add_argument("--thresholds", type=_floats, help="explicit thresholds in mm/h, comma separated")
    s.add_argument("--thresholds-file", help="thresholds.json written by calibrate")
    s.add_argument("--levels", type=_floats, help="calibrate inline at these quantile levels (unitless)")
    s.add_argument("--cap", type=int, help="reservoir size for inline calibration (pixels)")
    s.add_argument("--seed", type=int, help="seed for inline calibration")
    s.add_argument("--drizzle", type=float, help="wet-pixel threshold in mm/h (default 0.1)")
    s.add_argument("--epsilon", type=float, help="persistence filter in mm/h (default 0.05)")
    s.add_argument("--cutoff", type=float, help="essential-class threshold cutoff in mm/h (default 0.01; 'inf' keeps it)")
    s.add_argument("--workers", type=int, help="worker processes (default 1); output does not depend on it")
    s.add_argument("--with-holes", action="store_true", default=None, help="also store hole counts per level")

    s = add("train-emulator", cmd_train_emulator, "Train a gamma-vector emulator on a target store.")
    s.add_argument("--data", required=True, help="target store from gen-targets")
    s.add_argument("--corpus", help="raster directory (default: the one recorded in the store)")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--arch", choices=["constrained", "unconstrained", "nosn", "unconstrained_no_sn"])
    s.add_argument("--preset", choices=["desk", "paper"], help="optimizer defaults: desk (small data) or paper")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float, help="Adam learning rate (per step, unitless)")
    s.add_argument("--batch", type=int, help="fields per minibatch")
    s.add_argument("--weight-decay", type=float, help="L2 coefficient (unitless)")
    s.add_argument("--patience", type=int, help="early-stopping patience in epochs")
    s.add_argument("--loss-weights", type=_floats, help="lambda_A,lambda_P,lambda_CC (unitless)")
    s.add_argument("--seed", type=int)
    s.add_argument("--val-fraction", type=float, help="held-out share for early stopping (0..1)")
    s.add_argument("--pixel-hidden", type=int, help="width of the per-pixel network")
    s.add_argument("--pixel-blocks", type=int, help="residual blocks in the per-pixel network")
    s.add_argument("--hidden", type=int, help="width of the field-level network")
    s.add_argument("--n-blocks", type=int, help="residual blocks in the field-level network")

    s = add("eval-emulator", cmd_eval_emulator, "Report M, log-space R2 and isoperimetric violation rates.")
    s.add_argument("--ckpt", required=True, help="checkpoint directory")
    s.add_argument("--data", required=True, help="target store")
    s.add_argument("--corpus", help="raster directory (default: the one recorded in the store)")
    s.add_argument("--out", help="optional directory for metrics.json")

    s = add("invert", cmd_invert, "Optimize a field so the surrogate matches a target gamma vector.")
    s.add_argument("--out", required=True, help="output directory (trace.csv, x_star.mgf, PGM snapshots)")
    s.add_argument("--surrogate", choices=["analytic", "emulator"])
    s.add_argument("--ckpt", help="emulator checkpoint (emulator surrogate)")
    s.add_argument("--target", help="raster whose surrogate gamma is the target (default: a centred blob)")
    s.add_argument("--steps", type=int, help="gradient steps (default 200)")
    s.add_argument("--lr", type=float, help="step size in field units per unit gradient (default 0.1)")
    s.add_argument("--lambda-tv", type=float, help="total-variation weight (default 1e-5)")
    s.add_argument("--lambda-l2", type=float, help="squared-norm weight (default 1e-6)")
    s.add_argument("--seed", type=int, help="seed of the N(0,1) starting field")
    s.add_argument("--height", type=int, help="blob target grid height in pixels")
    s.add_argument("--width", type=int, help="blob target grid width in pixels")
    s.add_argument("--blob-amplitude", type=float, help="blob peak in normalized units (noise std = 1)")
    s.add_argument("--blob-sigma", type=float, help="blob width in pixels")
    s.add_argument("--thresholds", type=_floats, help="surrogate thresholds in normalized units")
    s.add_argument("--tau", type=float, help="sigmoid temperature in normalized units")
    s.add_argument("--tau-start", type=float, help="annealing start temperature in normalized units (default 1.0)")
    s.add_argument("--tau-end", type=float, help="annealing end temperature in normalized units (default 0.05)")
    s.add_argument("--unsquared", action="store_true", default=None, help="use the unsquared L2 data term")
    s.add_argument("--loss-weights", type=_floats, help="A,P,CC weights on the log residual (default 3,1,1.5; unitless)")

    s = add("gradcheck", cmd_gradcheck, "Compare reverse-mode and central-difference gradients of the loss.")
    s.add_argument("--out", required=True, help="output directory (gradcheck.csv)")
    s.add_argument("--surrogate", choices=["analytic", "emulator"])
    s.add_argument("--ckpt", help="emulator checkpoint (emulator surrogate)")
    s.add_argument("--n-fields", type=int, help="number of smooth random fields")
    s.add_argument("--size", type=int, help="field edge in pixels (analytic surrogate)")
    s.add_argument("--h", type=float, help="difference step in normalized units, 1e-8..1e-3")
    s.add_argument("--seed", type=int)
    s.add_argument("--thresholds", type=_floats, help="surrogate thresholds in normalized units")
    s.add_argument("--tau", type=float, help="sigmoid temperature in normalized units")

    s = add("raps", cmd_raps, "Radially averaged power spectrum of a raster (units of field squared).")
    s.add_argument("--field", required=True, help="raster file")
    s.add_argument("--ref", help="reference raster for spectral ratio and RAPS error")
    s.add_argument("--out", required=True, help="output directory (spectrum.csv, ratio.csv)")

    s = add("mech-sweep", cmd_mech_sweep, "Scale a masked region and compare exact and surrogate descriptors.")
    s.add_argument("--field", required=True, help="raster in mm/h")
    s.add_argument("--out", required=True, help="output directory (sweep.csv)")
    s.add_argument("--mask", help="region y0:y1,x0:x1 in pixels (default: central quarter)")
    s.add_argument("--alphas", type=_floats, help="amplitude factors (unitless), comma separated")
    s.add_argument("--thresholds", type=_floats, help="thresholds in mm/h")
    s.add_argument("--tau", type=float, help="sigmoid temperature in mm/h")
    s.add_argument("--epsilon", type=float, help="persistence filter for exact counts in mm/h (default 0)")
    s.add_argument("--cutoff", type=float, help="essential-class cutoff in mm/h (default inf)")

    s = add("steiner-check", cmd_steiner_check, "Compare rasterized disk dilations with the Steiner polynomial.")
    s.add_argument("--radii", type=_floats, help="dilation radii as fractions of the unit domain")
    s.add_argument("--disk-radius", type=float, help="disk radius as a fraction of the unit domain")
    s.add_argument("--resolution", type=int, help="raster edge in pixels (default 512)")
    s.add_argument("--out", help="optional output directory (steiner.csv)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        summary = args.fn(args)
    except (em.TrainingDiverged, dg.InversionDiverged, FloatingPointError) as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (UsageError, FileNotFoundError, RasterError, StoreError, em.CheckpointError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    _emit(args, summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

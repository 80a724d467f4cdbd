"""Command-line pipeline: synth -> fuse -> train / baseline -> eval -> export.

Every run writes ``manifest.json`` next to its outputs.  ``rerun`` replays a
manifest and checks that the outputs come back byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    FormatError, read_stack, write_stack, read_stations, write_stations, parse_kv, format_kv,
    save_checkpoint, load_checkpoint, export_heatmap, export_scatter,
)
from .fusion import FusionParams, FusionError, gap_fill
from .grid import FieldStack, GridError, regrid_stations
from .synth import preset, synth_generate
from .training import (
    TrainConfig, TrainingError, METRIC_NAMES, kfold_split, train, evaluate, linear_baseline,
    average_metrics,
)
from .vit import ViTConfig, ConfigError

log = logging.getLogger("pollutionnet")


class CLIError(Exception):
    pass


# --------------------------------------------------------------------------
# parameters


def _coerce(value: str, default, key: str):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CLIError(f"parameter {key}: expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except ValueError:
        raise CLIError(f"parameter {key}: expected {type(default).__name__}, got {value!r}") from None


def resolve(cls_list, file_values: dict, flag_values: dict):
    """Build dataclass instances from defaults, then the params file, then flags (flags win)."""
    known = {}
    for cls in cls_list:
        for f in dataclasses.fields(cls):
            known[f.name] = cls
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise CLIError(f"unknown parameter(s) in params file: {', '.join(unknown)}")
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    out = []
    for cls in cls_list:
        base = cls()
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in merged:
                v = merged[f.name]
                kw[f.name] = _coerce(v, getattr(base, f.name), f.name) if isinstance(v, str) else v
        out.append(cls(**kw))
    return out


def _params_file(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CLIError(f"cannot read params file {path}: {exc.strerror}") from None
    return parse_kv(text, path)


# --------------------------------------------------------------------------
# manifest


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, argv, params: dict, inputs: dict, outputs, seed, t0: float):
    manifest = {
        "command": command,
        "argv": list(argv),
        "params": params,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "seed": seed,
        "timing": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t0)),
                   "seconds": round(time.time() - t0, 3)},
        "version": __version__,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {d}: {exc.strerror}") from None
    return d


# --------------------------------------------------------------------------
# rows


def _write_rows(path: Path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "epoch", "metric", "value"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])


def _metric_rows(per_fold: dict, epoch):
    """One row per (fold, metric) plus an ``avg`` row per metric."""
    rows = []
    for k, m in per_fold.items():
        rows += [(k, epoch, name, getattr(m, name)) for name in METRIC_NAMES]
    avg = average_metrics(per_fold.values())
    rows += [("avg", epoch, name, getattr(avg, name)) for name in METRIC_NAMES]
    return rows


def _fold_list(spec: str, n: int):
    if spec == "all":
        return list(range(5))
    try:
        ks = sorted({int(s) for s in spec.split(",")})
    except ValueError:
        raise CLIError(f"--folds must be 'all' or comma-separated fold numbers, got {spec!r}") from None
    if any(k < 0 or k > 4 for k in ks):
        raise CLIError(f"fold numbers must lie in 0..4, got {spec!r}")
    return ks


def _ground(fused: FieldStack, stations_path) -> FieldStack:
    recs = read_stations(stations_path, fused.spec)
    return regrid_stations(recs, fused.spec, fused.times)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(a, argv, t0):
    out = _out_dir(a.out_dir)
    overrides = {"seed": a.seed}
    if a.days is not None:
        overrides["n_days"] = a.days
    if a.gap_fraction is not None:
        overrides["gap_fraction"] = a.gap_fraction
    cfg = preset(a.preset, **overrides)
    if cfg.n_days < 1:
        raise CLIError("--days must be >= 1")
    if not 0 <= cfg.gap_fraction < 1:
        raise CLIError("--gap-fraction must lie in [0, 1)")
    sat, recs, truth = synth_generate(cfg)
    paths = [out / "satellite.gstk", out / "truth.gstk", out / "stations.csv"]
    write_stack(sat, paths[0])
    write_stack(truth, paths[1])
    write_stations(recs, paths[2])
    params = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "spec"}
    params["preset"] = a.preset
    params["grid"] = dataclasses.asdict(cfg.spec)
    write_manifest(out, "synth", argv, params, {}, paths, cfg.seed, t0)
    print(f"wrote {len(sat)} days on a {cfg.spec.rows}x{cfg.spec.cols} grid to {out}")


def cmd_fuse(a, argv, t0):
    flags = {"tau_spatial": a.tau_spatial, "tau_consistency": a.tau_consistency,
             "max_neighbors": a.max_neighbors, "max_reference_times": a.max_reference_times}
    (params,) = resolve([FusionParams], _params_file(a.params_file), flags)
    sat = read_stack(a.satellite)
    ground = _ground(sat, a.stations)
    fused, report = gap_fill(sat, ground, params)
    out = Path(a.out)
    _out_dir(out.parent)
    write_stack(fused, out)
    report_path = Path(a.report) if a.report else out.with_suffix(".report.txt")
    report_path.write_text(report.to_text())
    write_manifest(out.parent, "fuse", argv, params.to_dict(),
                   {"satellite": a.satellite, "stations": a.stations, "params_file": a.params_file},
                   [out, report_path], None, t0)
    print(f"copied {report.copied}, filled {report.filled}, unfilled {report.unfilled}")


def cmd_defaults(a, argv, t0):
    classes = {"fuse": [FusionParams], "train": [TrainConfig, ViTConfig]}[a.kind]
    d = {}
    for cls in classes:
        d.update(dataclasses.asdict(cls()))
    sys.stdout.write(format_kv(d))


def _train_configs(a):
    flags = {"fraction": a.fraction, "seed": a.seed, "epochs": a.epochs}
    return resolve([TrainConfig, ViTConfig], _params_file(a.config), flags)


def cmd_train(a, argv, t0):
    out = _out_dir(a.out_dir)
    tcfg, vcfg = _train_configs(a)
    fused = read_stack(a.fused)
    ground = _ground(fused, a.stations)
    folds = kfold_split(len(fused), tcfg.seed)
    ks = _fold_list(a.folds, len(fused))
    history, metrics, outputs = [], {}, []
    for k in ks:
        split = folds[k]
        log.info("training fold %d on %d days", k, len(split.train_indices))
        model, hist = train(fused, ground, split, vcfg, tcfg)
        ck = out / f"fold{k}.ckpt"
        save_checkpoint(model, ck, {"fold": k, "train": tcfg.to_dict()})
        outputs.append(ck)
        for h in hist:
            history += [(k, h["epoch"], key, h[key]) for key in ("train_mse", "val_mse") if key in h]
        metrics[k] = evaluate(model, fused, ground, split.validation_indices)
    _write_rows(out / "history.csv", history)
    _write_rows(out / "metrics.csv", _metric_rows(metrics, tcfg.epochs))
    outputs += [out / "history.csv", out / "metrics.csv"]
    params = {"train": tcfg.to_dict(), "vit": vcfg.to_dict(), "folds": ks}
    write_manifest(out, "train", argv, params, {"fused": a.fused, "stations": a.stations, "config": a.config},
                   outputs, tcfg.seed, t0)
    _print_metrics(metrics)


def _print_metrics(metrics):
    avg = average_metrics(metrics.values())
    for k, m in list(metrics.items()) + [("avg", avg)]:
        print(f"fold {k}: " + " ".join(f"{n}={getattr(m, n):.4f}" for n in METRIC_NAMES))


def _indices(spec: str, n: int, seed: int):
    if spec == "all":
        return np.arange(n), "all"
    parts = spec.split(":")
    if len(parts) == 2 and parts[1] in ("train", "val"):
        try:
            k = int(parts[0])
        except ValueError:
            k = -1
        if not 0 <= k <= 4:
            raise CLIError(f"bad fold in --indices {spec!r}")
        f = kfold_split(n, seed)[k]
        return (f.train_indices if parts[1] == "train" else f.validation_indices), k
    try:
        idx = np.array(sorted({int(s) for s in spec.split(",")}))
    except ValueError:
        raise CLIError(f"--indices must be all, K:train, K:val or a comma-separated list, got {spec!r}") from None
    if idx.min() < 0 or idx.max() >= n:
        raise CLIError(f"indices out of range 0..{n - 1}")
    return idx, "custom"


def cmd_eval(a, argv, t0):
    out = _out_dir(a.out_dir)
    model, extra = load_checkpoint(a.checkpoint)
    fused = read_stack(a.fused)
    ground = _ground(fused, a.stations)
    seed = int(extra.get("train", {}).get("seed", 0)) if a.seed is None else a.seed
    idx, label = _indices(a.indices, len(fused), seed)
    m = evaluate(model, fused, ground, idx)
    pred = FieldStack(fused.spec, fused.times[idx], model.predict(fused.values[idx]))
    paths = [out / "metrics.csv", out / "predictions.gstk"]
    _write_rows(paths[0], [(label, "", n, getattr(m, n)) for n in METRIC_NAMES])
    write_stack(pred, paths[1])
    write_manifest(out, "eval", argv, {"indices": a.indices, "seed": seed},
                   {"checkpoint": a.checkpoint, "fused": a.fused, "stations": a.stations}, paths, seed, t0)
    _print_metrics({label: m})


def cmd_baseline(a, argv, t0):
    out = _out_dir(a.out_dir)
    fused = read_stack(a.fused)
    ground = _ground(fused, a.stations)
    folds = kfold_split(len(fused), a.seed)
    metrics = {k: linear_baseline(fused, ground, folds[k]) for k in _fold_list(a.folds, len(fused))}
    path = out / "metrics.csv"
    _write_rows(path, _metric_rows(metrics, ""))
    write_manifest(out, "baseline", argv, {"folds": a.folds, "seed": a.seed},
                   {"fused": a.fused, "stations": a.stations}, [path], a.seed, t0)
    _print_metrics(metrics)


def cmd_export(a, argv, t0):
    out = _out_dir(a.out_dir)
    pred = read_stack(a.pred)
    pos = np.flatnonzero(pred.times == a.day)
    if len(pos) == 0:
        raise CLIError(f"day {a.day} is not in {a.pred}; available days {pred.times[0]}..{pred.times[-1]}")
    img, table = export_heatmap(pred[int(pos[0])], out / f"day{a.day}")
    outputs = [img, table]
    if a.stations:
        ground = _ground(pred, a.stations)
        outputs.append(export_scatter(ground.values, pred.values, out / "scatter.csv"))
    write_manifest(out, "export", argv, {"day": a.day}, {"pred": a.pred, "stations": a.stations}, outputs,
                   None, t0)
    print("wrote " + ", ".join(str(p) for p in outputs))


def cmd_rerun(a, argv, t0):
    try:
        manifest = json.loads(Path(a.manifest).read_text())
        old_argv = manifest["argv"]
        expected = manifest["outputs"]
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError(f"cannot use manifest {a.manifest}: {exc}") from None
    code = main(old_argv)
    if code:
        return code
    changed = [p for p, h in expected.items() if not Path(p).exists() or _sha256(Path(p)) != h]
    if changed:
        raise CLIError("rerun produced different bytes for: " + ", ".join(changed))
    print(f"reproduced {len(expected)} output file(s) bit-identically")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pollutionnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic satellite/station/truth dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--preset", choices=["no2", "so2"], default="no2")
    s.add_argument("--days", type=int)
    s.add_argument("--gap-fraction", type=float)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fuse", help="regrid stations and gap-fill a satellite stack")
    s.add_argument("--satellite", required=True)
    s.add_argument("--stations", required=True)
    s.add_argument("--params-file")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--tau-spatial", type=float)
    s.add_argument("--tau-consistency", type=float)
    s.add_argument("--max-neighbors", type=int)
    s.add_argument("--max-reference-times", type=int)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("defaults", help="print default parameters as key = value lines")
    s.add_argument("kind", choices=["fuse", "train"])
    s.set_defaults(func=cmd_defaults, no_manifest=True)

    s = sub.add_parser("train", help="five-fold training of the transformer regressor")
    s.add_argument("--fused", required=True)
    s.add_argument("--stations", required=True)
    s.add_argument("--folds", default="all")
    s.add_argument("--fraction", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fused", required=True)
    s.add_argument("--stations", required=True)
    s.add_argument("--indices", default="all", help="all, K:train, K:val or a list like 0,3,7")
    s.add_argument("--seed", type=int, help="fold seed (default: the checkpoint's training seed)")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="per-cell linear regression baseline")
    s.add_argument("--fused", required=True)
    s.add_argument("--stations", required=True)
    s.add_argument("--folds", default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("export", help="heatmap and scatter data for a predicted stack")
    s.add_argument("--pred", required=True)
    s.add_argument("--day", type=int, required=True)
    s.add_argument("--stations")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("rerun", help="replay a manifest and verify identical outputs")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return a.func(a, argv, time.time()) or 0
    except (CLIError, FormatError, GridError, FusionError, TrainingError, ConfigError, ValueError, OSError) as exc:
        print(f"pollutionnet {a.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

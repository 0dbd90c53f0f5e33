"""``avuseg`` command line: gen, train, eval, heatmap, sweep.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``AVUSEG_THREADS`` caps BLAS/OpenMP threads; it is applied before numpy is
imported, so heavy imports live inside the command functions.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
REPORT_SCHEMA_VERSION = 1
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


def _apply_thread_env() -> None:
    n = os.environ.get("AVUSEG_THREADS")
    if n:
        for var in THREAD_VARS:
            os.environ[var] = n


def _read_json(path, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise UsageError(f"{what} file {path} must hold a JSON object")
    return data


def _write_atomic(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data)
    os.replace(tmp, path)


def _file_crc(path: Path) -> str:
    from .volumes import crc64
    return f"{crc64(path.read_bytes()):016x}"


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict,
                   outputs: list, started: float) -> None:
    """One run manifest per command, stamping every output with its CRC64."""
    out_dir = Path(out_dir)
    stamped = {}
    for p in outputs:
        p = Path(p)
        stamped[str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p)] = _file_crc(p)
    manifest = {"command": command, "tool_version": __version__, "seed": seed, "config": config,
                "inputs": inputs, "outputs": stamped, "wall_time_s": round(time.time() - started, 3)}
    _write_atomic(out_dir / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_kernel(text: str) -> tuple:
    try:
        k = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--kernel expects three comma-separated odd ints, got {text!r}")
    if len(k) != 3 or any(v < 1 or v % 2 == 0 for v in k):
        raise UsageError(f"--kernel expects three comma-separated odd ints, got {text!r}")
    return k


# -------------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    from .synthdata import DatasetSpec, generate, save_dataset
    started = time.time()
    raw = _read_json(args.spec, "spec") if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = DatasetSpec.from_dict(raw)
    out = Path(args.out)
    manifest = save_dataset(generate(spec), out)
    outputs = [out / "dataset.json"] + [out / e[k] for e in manifest["scans"]
                                        for k in ("image", "label", "geometry")]
    write_manifest(out, "gen", spec.to_dict(), spec.seed, {"spec": args.spec}, outputs, started)
    print(f"wrote {spec.num_scans} scans to {out}")
    return 0


# ------------------------------------------------------------------ train

def _load_train_config(args):
    from .trainer import TrainConfig
    raw = _read_json(args.config, "config") if args.config else {}
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    if args.seed is not None:
        raw["seed"] = args.seed
    if "channels" in raw:
        raw["channels"] = tuple(raw["channels"])
    if "dilations" in raw:
        raw["dilations"] = tuple(raw["dilations"])
    return TrainConfig.from_dict(raw)


def _load_data(path):
    from .synthdata import load_dataset
    if not (Path(path) / "dataset.json").is_file():
        raise UsageError(f"no dataset manifest in {path}")
    return load_dataset(path)


def cmd_train(args) -> int:
    from .trainer import train
    started = time.time()
    cfg = _load_train_config(args)
    ds = _load_data(args.data)
    out = Path(args.out)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:4d}  ce {row['ce']:.4f}  avu {row['avu']:.4f}  "
                  f"total {row['total']:.4f}  val_dice {row['val_dice']:.4f}", flush=True)

    res = train(ds, cfg, out, progress=progress)
    outputs = [out / n for n in ("final.json", "final.bin", "best.json", "best.bin", "train_log.csv")]
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, {"config": args.config, "data": args.data},
                   outputs, started)
    print(f"best epoch {res.best_epoch} (val dice {res.best_val_dice:.4f}); checkpoints in {out}")
    return 0


# ------------------------------------------------------------------- eval

def _load_models(paths):
    from .bayes import CheckpointError
    from .model import load_model
    models = []
    for p in paths:
        try:
            models.append(load_model(p)[0])
        except FileNotFoundError:
            raise UsageError(f"checkpoint not found: {p}")
        except CheckpointError as exc:
            raise UsageError(str(exc))
    return models


def _predictor(models, mode: str, samples: int, seed: int):
    from .model import ensemble_predict, predict, tta_predict
    if mode == "ensemble":
        if len(models) < 2:
            raise UsageError("--mode ensemble needs at least two --checkpoint values")
        return lambda scan: ensemble_predict(models, scan.image)
    if len(models) != 1:
        raise UsageError(f"--mode {mode} takes exactly one --checkpoint")
    if mode == "tta":
        return lambda scan: tta_predict(models[0], scan.image, reps=samples, seed=seed)
    return lambda scan: predict(models[0], scan.image, samples=samples, seed=seed)


def _score_scans(predict_fn, scans, settings):
    from .metrics import scan_metrics
    rows = []
    for s in scans:
        m = scan_metrics(predict_fn(s), s.label, settings["u_max"], settings["steps"],
                         tuple(settings["kernel"]), settings["bins"], settings["crop"])
        rows.append((s.id, m))
    return rows


def _compare(rows_a, rows_b) -> dict:
    from .metrics import METRIC_KEYS, wilcoxon_signed_rank
    out = {}
    for key in METRIC_KEYS:
        pairs = [(getattr(a, key), getattr(b, key)) for (_, a), (_, b) in zip(rows_a, rows_b)
                 if getattr(a, key) is not None and getattr(b, key) is not None]
        entry = {"n_pairs": len(pairs)}
        try:
            res = wilcoxon_signed_rank([p[0] for p in pairs], [p[1] for p in pairs])
            entry.update({"statistic": res.statistic, "pvalue": res.pvalue, "method": res.method,
                          "significant": res.pvalue <= 0.05})
        except ValueError as exc:
            entry["notice"] = str(exc)
        out[key] = entry
    return out


def cmd_eval(args) -> int:
    from .metrics import METRIC_KEYS, U_MAX_PRESETS, dumps_fixed, summarize
    started = time.time()
    models = _load_models(args.checkpoint)
    ds = _load_data(args.data)
    for m in models:
        if m.cfg.num_classes != ds.num_classes:
            raise UsageError(f"checkpoint has {m.cfg.num_classes} classes, dataset has {ds.num_classes}")
    scans = ds.split(args.split)
    if not scans:
        raise UsageError(f"split {args.split!r} is empty")
    u_max = args.u_max if args.u_max is not None else U_MAX_PRESETS.get(ds.num_classes, 1.0)
    if not 0 < u_max <= 1:
        raise UsageError(f"--u-max must lie in (0, 1], got {u_max}")
    if args.steps < 2 or args.bins < 1 or args.samples < 1:
        raise UsageError("--steps >= 2, --bins >= 1 and --samples >= 1 are required")
    settings = {"u_max": u_max, "steps": args.steps, "kernel": list(_parse_kernel(args.kernel)),
                "bins": args.bins, "samples": args.samples, "seed": args.seed, "mode": args.mode,
                "crop": args.crop}
    rows = _score_scans(_predictor(models, args.mode, args.samples, args.seed), scans, settings)
    notices = []
    excluded = [sid for sid, m in rows if m.roc_auc is None]
    if excluded:
        notices.append(f"{len(excluded)} scan(s) without failure voxels excluded from roc_auc/prc_auc")
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "checkpoints": list(args.checkpoint),
        "split": args.split,
        "settings": settings,
        "per_scan": [{"id": sid, **m.as_dict()} for sid, m in rows],
        "summary": {k: summarize([getattr(m, k) for _, m in rows]) for k in METRIC_KEYS},
        "excluded_from_roc_prc": excluded,
        "notices": notices,
    }
    if args.compare:
        other = _load_models([args.compare])
        if other[0].cfg.num_classes != ds.num_classes:
            raise UsageError("comparison checkpoint class count differs from dataset")
        rows_b = _score_scans(_predictor(other, "mc", args.samples, args.seed), scans, settings)
        report["comparison"] = {"checkpoint": args.compare, "wilcoxon": _compare(rows, rows_b)}
        for key, entry in report["comparison"]["wilcoxon"].items():
            if "notice" in entry:
                notices.append(f"{key}: {entry['notice']}")

    out = Path(args.out)
    _write_atomic(out / "report.json", dumps_fixed(report))
    lines = ["scan,curve,threshold,x,y"]
    curve_files = []
    for sid, m in rows:
        for kind, c in m.curves.items():
            xs = c.x if c.x is not None else c.thresholds
            lines += [f"{sid},{kind},{t:.6f},{x:.6f},{y:.6f}" for t, x, y in zip(c.thresholds, xs, c.values)]
            path = out / "curves" / f"{sid}_{kind}.csv"
            _write_atomic(path, c.to_csv())
            curve_files.append(path)
    _write_atomic(out / "curves.csv", "\n".join(lines) + "\n")
    write_manifest(out, "eval", settings, args.seed,
                   {"checkpoints": list(args.checkpoint), "compare": args.compare, "data": args.data},
                   [out / "report.json", out / "curves.csv"] + curve_files, started)
    for n in notices:
        print(f"notice: {n}", file=sys.stderr)
    for k in METRIC_KEYS:
        s = report["summary"][k]
        if s["mean"] is not None:
            print(f"{k:8s} {s['mean']:.4f} ± {s['std']:.4f}  (n={s['n']})")
    return 0


# ---------------------------------------------------------------- heatmap

# Fixed dark-to-bright colormap; index 0 is the colour of zero uncertainty.
HEAT_STOPS = ((0.0, (0, 0, 4)), (0.25, (87, 16, 110)), (0.5, (188, 55, 84)),
              (0.75, (249, 142, 9)), (1.0, (252, 255, 164)))
GT_COLOUR = (0, 255, 0)
PRED_COLOUR = (255, 0, 0)
PANELS = ("image", "uncertainty", "overlay", "errors", "failures")


def heat_colours(u, u_max: float):
    import numpy as np
    v = np.clip(np.asarray(u, dtype=np.float64) / u_max, 0.0, 1.0)
    pos = np.array([s[0] for s in HEAT_STOPS])
    cols = np.array([s[1] for s in HEAT_STOPS], dtype=np.float64)
    rgb = np.stack([np.interp(v, pos, cols[:, k]) for k in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def mask_outline(mask):
    """Pixels of ``mask`` with at least one 4-neighbour outside it (image border counts as outside)."""
    import numpy as np
    p = np.pad(mask, 1, constant_values=False)
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~inner


def render_heatmap(image2d, probs2d, gt2d, u_max: float, kernel=(3, 3, 1)):
    """RGB array (H, 5W, 3) with the panels listed in ``PANELS``."""
    import numpy as np
    from .inaccuracy import decompose
    from .metrics import normalized_entropy
    from .volumes import LabelVolume

    img = np.asarray(image2d, dtype=np.float64)
    lo, hi = img.min(), img.max()
    grey = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    grey_rgb = np.repeat(np.rint(grey * 255).astype(np.uint8)[..., None], 3, axis=-1)
    pred = np.argmax(probs2d, axis=-1)
    unc = normalized_entropy(probs2d, axis=-1)
    heat = heat_colours(unc, u_max)
    kx, ky, _ = kernel
    dec = decompose(LabelVolume(pred[None]), LabelVolume(np.asarray(gt2d)[None]), (kx, ky, 1))

    def with_contours(rgb):
        rgb = rgb.copy()
        for lab, colour in ((np.asarray(gt2d), GT_COLOUR), (pred, PRED_COLOUR)):
            edge = np.zeros(lab.shape, dtype=bool)
            for c in np.unique(lab[lab > 0]):
                edge |= mask_outline(lab == c)
            rgb[edge] = colour
        return rgb

    def mask_panel(m):
        return np.repeat((m.astype(np.uint8) * 255)[..., None], 3, axis=-1)

    blend = np.rint(0.5 * grey_rgb + 0.5 * heat).astype(np.uint8)
    panels = [with_contours(grey_rgb), heat, with_contours(blend),
              mask_panel(dec.errors[0]), mask_panel(dec.failures[0])]
    return np.concatenate(panels, axis=1)


def cmd_heatmap(args) -> int:
    import io
    from PIL import Image
    from .metrics import U_MAX_PRESETS
    from .model import predict
    started = time.time()
    model = _load_models([args.checkpoint])[0]
    ds = _load_data(args.data)
    scans = {s.id: s for s in ds.scans}
    if args.scan not in scans:
        raise UsageError(f"unknown scan {args.scan!r}")
    scan = scans[args.scan]
    depth = scan.image.data.shape[0]
    if not 0 <= args.slice < depth:
        raise UsageError(f"slice {args.slice} out of range [0, {depth - 1}]")
    u_max = args.u_max if args.u_max is not None else U_MAX_PRESETS.get(ds.num_classes, 1.0)
    probs = predict(model, scan.image, samples=args.samples, seed=args.seed).data
    rgb = render_heatmap(scan.image.data[args.slice], probs[args.slice], scan.label.data[args.slice],
                         u_max, _parse_kernel(args.kernel))
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    out = Path(args.out)
    _write_atomic(out, buf.getvalue())
    write_manifest(out.parent, "heatmap",
                   {"scan": args.scan, "slice": args.slice, "u_max": u_max, "samples": args.samples,
                    "panels": list(PANELS), "colour_range": [0.0, u_max]},
                   args.seed, {"checkpoint": args.checkpoint, "data": args.data}, [out], started)
    print(f"wrote {out} ({rgb.shape[1]}x{rgb.shape[0]})")
    return 0


# ------------------------------------------------------------------ sweep

def cmd_sweep(args) -> int:
    from .trainer import sweep_alpha
    started = time.time()
    cfg = _load_train_config(args)
    ds = _load_data(args.data)
    try:
        alphas = [float(a) for a in args.alphas.split(",")]
    except ValueError:
        raise UsageError(f"--alphas expects comma-separated numbers, got {args.alphas!r}")
    out = Path(args.out)
    report = sweep_alpha(ds, alphas, cfg, out)
    print(report.table(), end="")
    print(f"selected {report.selected}")
    outputs = [out / "sweep_table.txt", out / "sweep.json"]
    write_manifest(out, "sweep", {**cfg.to_dict(), "alphas": alphas}, cfg.seed,
                   {"config": args.config, "data": args.data}, outputs, started)
    return 0


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avuseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"avuseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", help="JSON dataset spec (defaults used when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    for name, func, text in (("train", cmd_train, "train one model"),
                             ("sweep", cmd_sweep, "train one AvU model per weight and select one")):
        t = sub.add_parser(name, help=text)
        t.add_argument("--config", help="JSON training config")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--epochs", type=int)
        t.add_argument("--seed", type=int)
        if name == "train":
            t.add_argument("--quiet", action="store_true")
        else:
            t.add_argument("--alphas", default="10,100,1000")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="score checkpoints on a dataset split")
    e.add_argument("--checkpoint", action="append", required=True)
    e.add_argument("--compare", help="second checkpoint for a paired Wilcoxon test")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--mode", default="mc", choices=("mc", "ensemble", "tta"))
    e.add_argument("--u-max", type=float)
    e.add_argument("--steps", type=int, default=101)
    e.add_argument("--kernel", default="3,3,1")
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--samples", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--crop", action="store_true", help="ECE over the foreground bounding box only")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="render uncertainty and inaccuracy panels for one slice")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--scan", required=True)
    h.add_argument("--slice", type=int, default=0)
    h.add_argument("--out", required=True)
    h.add_argument("--u-max", type=float)
    h.add_argument("--kernel", default="3,3,1")
    h.add_argument("--samples", type=int, default=5)
    h.add_argument("--seed", type=int, default=0)
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    from .synthdata import SpecError
    from .trainer import ConfigError
    try:
        return args.func(args)
    except (UsageError, SpecError, ConfigError) as exc:
        print(f"avuseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"avuseg {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

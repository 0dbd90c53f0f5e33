"""Training loop, evaluation helpers and the validation-driven AvU weight sweep.

Randomness comes from three streams derived from ``TrainConfig.seed``: model
initialisation, batch shuffling and the weight noise of variational layers.
The streams are independent of the loss, so two runs that differ only in a
zero AvU weight take identical steps.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .bayes import kl_regularizer, mc_predict
from .losses import LOSS_NAMES, make_loss
from .metrics import METRIC_KEYS, scan_metrics, select_hyperparameter, summarize
from .model import SegModel, SegModelConfig, build_model
from .numerics import Tensor
from .synthdata import Dataset, balanced_class_weights

LOG_COLUMNS = ("epoch", "ce", "avu", "total", "val_dice")


class ConfigError(ValueError):
    """Invalid training configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, msg: str):
        self.field = field
        super().__init__(f"{field}: {msg}")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; ``terms`` holds the last logged components."""

    def __init__(self, epoch: int, step: int, terms: dict):
        self.epoch, self.step, self.terms = epoch, step, terms
        desc = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {desc}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    batch_size: int = 4
    clip_norm: float = 10.0
    loss: str = "ce"
    loss_params: dict = field(default_factory=dict)
    class_weights: list | None = None
    kl_weight: float = 0.0
    mc_samples: int = 5
    val_samples: int = 1
    checkpoint_every: int = 0
    variant: str = "det"
    channels: tuple = (8, 16, 16)
    dilations: tuple = (1, 2, 5, 1)
    prior_std: float = 1.0

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs", f"must be an integer >= 1, got {self.epochs!r}")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError("lr", f"must be finite and >= 0, got {self.lr!r}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("beta1", "Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps", "must be > 0")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size", "must be an integer >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm", "must be > 0 or null")
        if self.loss not in LOSS_NAMES:
            raise ConfigError("loss", f"unknown loss {self.loss!r}; choose from {', '.join(LOSS_NAMES)}")
        try:
            make_loss(self.loss, **self.loss_params)
        except ValueError as exc:
            raise ConfigError("loss_params", str(exc)) from exc
        if self.kl_weight < 0:
            raise ConfigError("kl_weight", "must be >= 0")
        for name in ("mc_samples", "val_samples"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(name, "must be an integer >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")
        try:
            self.model_config(2)
        except ValueError as exc:
            raise ConfigError("variant", str(exc)) from exc
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "dilations", tuple(self.dilations))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["dilations"] = list(self.dilations)
        return d

    def model_config(self, num_classes: int) -> SegModelConfig:
        return SegModelConfig(variant=self.variant, channels=tuple(self.channels), num_classes=num_classes,
                              dilations=tuple(self.dilations), prior_std=self.prior_std)


# ------------------------------------------------------------------ Adam

class Adam:
    """Adam with bias correction, applied in place to tensor ``data``."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr:
                p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; return the pre-clip norm."""
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# --------------------------------------------------------------- batches

def stack_slices(scans) -> tuple[np.ndarray, np.ndarray]:
    """Flatten scans into a (S, 1, H, W) image batch and (S, H, W) labels."""
    if not scans:
        raise ValueError("no scans in split")
    images = np.concatenate([s.image.data[:, None] for s in scans]).astype(np.float64)
    labels = np.concatenate([s.label.data for s in scans]).astype(np.int64)
    return images, labels


def _streams(seed: int):
    shuffle, noise = np.random.SeedSequence([seed, 1]).spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(noise)


# -------------------------------------------------------------- evaluation

def predict_scan(model: SegModel, scan, samples: int, seed: int = 0):
    return mc_predict(model, scan.image, samples=samples, seed=seed)


def evaluate(model: SegModel, scans, samples: int = 5, seed: int = 0, u_max=None,
             steps: int = 101, kernel=(3, 3, 1), bins: int = 10, crop: bool = False) -> dict:
    """Per-scan metrics plus mean/std, skipping undefined ROC/PRC values."""
    per_scan = []
    for s in scans:
        m = scan_metrics(predict_scan(model, s, samples, seed), s.label, u_max, steps, kernel, bins, crop)
        per_scan.append((s.id, m))
    summary = {k: summarize([getattr(m, k) for _, m in per_scan]) for k in METRIC_KEYS}
    excluded = [sid for sid, m in per_scan if m.roc_auc is None]
    return {"per_scan": per_scan, "summary": summary, "excluded": excluded}


def validation_dice(model: SegModel, scans, samples: int, seed: int) -> float:
    from .metrics import mean_foreground_dice
    from .volumes import argmax_labels
    vals = [mean_foreground_dice(argmax_labels(predict_scan(model, s, samples, seed)), s.label,
                                 s.label.num_classes) for s in scans]
    return float(np.mean(vals))


# ----------------------------------------------------------------- train

@dataclass
class TrainResult:
    model: SegModel
    best_model: SegModel
    log: list
    best_epoch: int
    best_val_dice: float
    paths: dict

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [f"{r[k]:.10g}" for k in LOG_COLUMNS[1:]])
    return buf.getvalue()


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def resolve_class_weights(cfg: TrainConfig, dataset: Dataset) -> np.ndarray:
    c = dataset.num_classes
    if cfg.class_weights is None:
        return balanced_class_weights(dataset.split("train"), c)
    w = np.asarray(cfg.class_weights, dtype=np.float64)
    if w.shape != (c,) or np.any(w <= 0):
        raise ConfigError("class_weights", f"need {c} positive weights, got {cfg.class_weights!r}")
    return w


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None, model: SegModel | None = None,
          progress=None) -> TrainResult:
    """Train on the ``train`` split, selecting the best epoch by validation DICE.

    With ``out_dir`` set, writes ``final.json``/``best.json`` checkpoints (plus
    their ``.bin`` payloads) and ``train_log.csv``.
    """
    train_scans, val_scans = dataset.split("train"), dataset.split("val")
    images, labels = stack_slices(train_scans)
    weights = resolve_class_weights(cfg, dataset)
    model = model or build_model(cfg.model_config(dataset.num_classes), seed=cfg.seed)
    params = list(model.parameters().values())
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    loss_fn = make_loss(cfg.loss, **cfg.loss_params)
    shuffle_rng, noise_rng = _streams(cfg.seed)
    stochastic_layers = [l for l in model.layers.values() if l.stochastic]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"train_config": cfg.to_dict(), "class_weights": weights.tolist()}

    log, best = [], (-1.0, 0, None)
    n = images.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = {"ce": 0.0, "avu": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = images[idx], labels[idx]
            opt.zero_grad()
            logits = model.forward(Tensor(x), noise_rng if model.is_stochastic else None)
            probs = nx.softmax(logits, axis=1)
            loss, terms = loss_fn(logits, probs, y, weights)
            kl = kl_regularizer(stochastic_layers, y.size, cfg.kl_weight)
            if kl is not None:
                loss = loss + kl
            terms = {**terms, "total": float(loss.data)}
            if not all(math.isfinite(v) for v in terms.values()):
                raise TrainingDivergedError(epoch, steps, terms)
            loss.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            for k in sums:
                sums[k] += terms[k]
            steps += 1
        vd = validation_dice(model, val_scans, cfg.val_samples, cfg.seed) if val_scans else float("nan")
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}, "val_dice": vd}
        log.append(row)
        if progress is not None:
            progress(row)
        if best[2] is None or vd > best[0]:
            best = (vd, epoch, model.state_arrays())
            if out is not None:
                model.save(out / "best.json", {**meta, "epoch": epoch, "val_dice": vd})
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            model.save(out / f"epoch_{epoch:05d}.json", {**meta, "epoch": epoch})

    best_model = build_model(model.cfg, seed=cfg.seed)
    best_model.load_arrays(best[2])
    paths = {}
    if out is not None:
        model.save(out / "final.json", {**meta, "epoch": cfg.epochs})
        _write_text_atomic(out / "train_log.csv", format_log(log))
        paths = {"final": str(out / "final.json"), "best": str(out / "best.json"),
                 "log": str(out / "train_log.csv")}
    return TrainResult(model, best_model, log, best[1], best[0], paths)


# ----------------------------------------------------------------- sweep

@dataclass
class SweepReport:
    rows: list
    selected: str
    selected_alpha: float
    results: dict

    def table(self) -> str:
        """Plain-text table, metrics in x10^-2 points, selected row starred."""
        head = f"{'model':<16}" + "".join(f"{k:>10}" for k in METRIC_KEYS)
        lines = [head]
        for r in self.rows:
            mark = "*" if r["id"] == self.selected else " "
            lines.append(f"{mark}{r['id']:<15}" + "".join(f"{r[k]:>10.1f}" for k in METRIC_KEYS))
        return "\n".join(lines) + "\n"


def candidate_row(ident: str, summary: dict) -> dict:
    """Summary of fractions -> selection row in x10^-2 points (undefined curves count as 0)."""
    row = {"id": ident}
    for k in METRIC_KEYS:
        mean = summary[k]["mean"]
        row[k] = 100.0 * (mean if mean is not None else 0.0)
    return row


def sweep_alpha(dataset: Dataset, alphas, cfg: TrainConfig, out_dir=None, **eval_kw) -> SweepReport:
    """Train one AvU model per weight, score on validation, apply the selection rule."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("sweep needs at least one alpha")
    if len(set(alphas)) != len(alphas):
        raise ValueError(f"duplicate alpha values in {alphas}")
    val = dataset.split("val")
    rows, results = [], {}
    for a in alphas:
        run_cfg = replace(cfg, loss="avu", loss_params={**cfg.loss_params, "alpha": a})
        sub = Path(out_dir) / f"alpha_{a:g}" if out_dir is not None else None
        res = train(dataset, run_cfg, sub)
        ev = evaluate(res.best_model, val, samples=cfg.mc_samples, seed=cfg.seed, **eval_kw)
        ident = f"alpha={a:g}"
        rows.append(candidate_row(ident, ev["summary"]))
        results[ident] = {"alpha": a, "train": res, "eval": ev}
    selected = select_hyperparameter(rows)
    report = SweepReport(rows, selected, results[selected]["alpha"], results)
    if out_dir is not None:
        _write_text_atomic(Path(out_dir) / "sweep_table.txt", report.table())
        _write_text_atomic(Path(out_dir) / "sweep.json", json.dumps(
            {"rows": rows, "selected": selected, "selected_alpha": report.selected_alpha}, indent=2) + "\n")
    return report

"""Training objectives on (N, C, H, W) probability / logit tensors.

Labels are integer arrays of shape (N, H, W). Every loss returns a scalar
``Tensor`` so it can be backpropagated directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import EPS, Tensor

ALPHA_SWEEP = (10.0, 100.0, 1000.0, 10000.0)
RATIO_EPS = 1e-8


def default_loss_thresholds(count: int = 10) -> np.ndarray:
    """``count`` evenly spaced thresholds strictly inside (0, 1)."""
    return np.linspace(0.0, 1.0, count + 2)[1:-1]


@dataclass(frozen=True)
class AvuLossConfig:
    alpha: float = 100.0
    thresholds: tuple = tuple(default_loss_thresholds())
    use_tanh: bool = True

    def __post_init__(self):
        ts = np.asarray(self.thresholds, dtype=np.float64)
        if ts.size == 0:
            raise ValueError("AvU loss needs at least one threshold")
        if np.any(np.diff(ts) <= 0) or ts[0] < 0 or ts[-1] > 1:
            raise ValueError("thresholds must be strictly ascending within [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in ts))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, H, W) int labels -> (N, C, H, W) float64 one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    return (np.arange(num_classes)[None, :, None, None] == labels[:, None]).astype(np.float64)


def _check_probs(probs: Tensor, labels: np.ndarray) -> int:
    if probs.ndim != 4:
        raise nx.ShapeError("loss", probs.shape, np.shape(labels))
    n, c, h, w = probs.shape
    if np.shape(labels) != (n, h, w):
        raise nx.ShapeError("loss", probs.shape, np.shape(labels))
    if c < 2:
        raise ValueError("losses need C >= 2")
    return c


def weighted_bce(probs: Tensor, labels: np.ndarray, weights) -> Tensor:
    """Per-class weighted binary cross-entropy summed over voxels.

    -(1/C) * sum_c w_c * sum_i [y ln p + (1 - y) ln(1 - p)], with p clamped
    to [eps, 1 - eps] before each log.
    """
    c = _check_probs(probs, labels)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != c:
        raise ValueError(f"expected {c} class weights, got {w.size}")
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    y = one_hot(labels, c)
    p = nx.clip(probs, EPS, 1.0 - EPS)
    terms = y * nx.log(p) + (1.0 - y) * nx.log(1.0 - p)
    weighted = terms * w.reshape(1, c, 1, 1)
    return nx.neg(weighted.sum()) / float(c)


def _max_prob_and_entropy(probs: Tensor):
    c = probs.shape[1]
    pred = probs.data.argmax(axis=1)
    sel = (np.arange(c)[None, :, None, None] == pred[:, None]).astype(np.float64)
    p_hat = (probs * sel).sum(axis=1)
    logp = nx.log(nx.clip(probs, EPS, 1.0))
    u = nx.neg((probs * logp).sum(axis=1)) / math.log(c)
    return pred, p_hat, u


def avu_proxy_counts(probs: Tensor, labels: np.ndarray, t: float, use_tanh: bool = True):
    """Differentiable stand-ins for n_ac, n_au, n_ic, n_iu at one threshold.

    Accuracy and certainty masks are detached constants; the maximum class
    probability and the normalized entropy carry the gradient.
    """
    _check_probs(probs, labels)
    pred, p_hat, u = _max_prob_and_entropy(probs)
    return _proxy_counts(pred, p_hat, u, labels, t, use_tanh)


def _proxy_counts(pred, p_hat, u, labels, t, use_tanh):
    accurate = pred == np.asarray(labels)
    certain = u.data <= t
    tu = nx.tanh(u) if use_tanh else u
    one_minus_tu = 1.0 - tu
    q_hat = 1.0 - p_hat
    n_ac = (p_hat * one_minus_tu * (accurate & certain).astype(np.float64)).sum()
    n_au = (p_hat * tu * (accurate & ~certain).astype(np.float64)).sum()
    n_ic = (q_hat * one_minus_tu * (~accurate & certain).astype(np.float64)).sum()
    n_iu = (q_hat * tu * (~accurate & ~certain).astype(np.float64)).sum()
    return n_ac, n_au, n_ic, n_iu


def avu_loss(probs: Tensor, labels: np.ndarray, cfg: AvuLossConfig = AvuLossConfig()) -> Tensor:
    """Threshold-averaged ln(1 + (n_au + n_ic) / (n_ac + n_iu)); zero is ideal."""
    _check_probs(probs, labels)
    if not cfg.thresholds:
        raise ValueError("empty threshold grid")
    pred, p_hat, u = _max_prob_and_entropy(probs)
    total = None
    for t in cfg.thresholds:
        n_ac, n_au, n_ic, n_iu = _proxy_counts(pred, p_hat, u, labels, t, cfg.use_tanh)
        ratio = (n_au + n_ic) / (n_ac + n_iu + RATIO_EPS)
        term = nx.log(1.0 + ratio)
        total = term if total is None else total + term
    return total / float(len(cfg.thresholds))


def total_loss(probs: Tensor, labels: np.ndarray, weights, cfg: AvuLossConfig) -> Tensor:
    ce = weighted_bce(probs, labels, weights)
    if cfg.alpha == 0:
        return ce
    return ce + cfg.alpha * avu_loss(probs, labels, cfg)


# ------------------------------------------------------------- baselines

def soft_cross_entropy(probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean over voxels of -sum_c target_c ln p_c."""
    logp = nx.log(nx.clip(probs, EPS, 1.0))
    n, _, h, w = probs.shape
    return nx.neg((logp * target).sum()) / float(n * h * w)


def focal_loss(probs: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    if gamma < 0:
        raise ValueError("focal gamma must be >= 0")
    c = _check_probs(probs, labels)
    y = one_hot(labels, c)
    p_true = nx.clip((probs * y).sum(axis=1), EPS, 1.0)
    modulator = nx.power(1.0 - p_true, gamma)
    n, h, w = p_true.shape
    return nx.neg((modulator * nx.log(p_true)).sum()) / float(n * h * w)


def ecp_loss(probs: Tensor, labels: np.ndarray, lam: float = 1.0) -> Tensor:
    """Cross-entropy minus lam times the mean predictive entropy (nats)."""
    if lam < 0:
        raise ValueError("ECP lambda must be >= 0")
    c = _check_probs(probs, labels)
    ce = soft_cross_entropy(probs, one_hot(labels, c))
    logp = nx.log(nx.clip(probs, EPS, 1.0))
    n, _, h, w = probs.shape
    entropy = nx.neg((probs * logp).sum()) / float(n * h * w)
    return ce - lam * entropy


def label_smoothing_loss(probs: Tensor, labels: np.ndarray, alpha: float = 0.05) -> Tensor:
    if not 0 <= alpha < 1:
        raise ValueError("label smoothing alpha must lie in [0, 1)")
    c = _check_probs(probs, labels)
    target = (1.0 - alpha) * one_hot(labels, c) + alpha / c
    return soft_cross_entropy(probs, target)


def gaussian_kernel2d(sigma: float, size: int = 3) -> np.ndarray:
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def svls_targets(labels: np.ndarray, num_classes: int, sigma: float, size: int = 3) -> np.ndarray:
    """One-hot maps blurred in-plane by a normalized Gaussian (replicate padding)."""
    y = one_hot(labels, num_classes)
    k = gaussian_kernel2d(sigma, size)
    r = size // 2
    padded = np.pad(y, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    h, w = y.shape[2:]
    out = np.zeros_like(y)
    for i in range(size):
        for j in range(size):
            out += k[i, j] * padded[:, :, i:i + h, j:j + w]
    return out


def svls_loss(probs: Tensor, labels: np.ndarray, sigma: float = 1.0, size: int = 3) -> Tensor:
    if sigma <= 0:
        raise ValueError("SVLS sigma must be > 0")
    c = _check_probs(probs, labels)
    return soft_cross_entropy(probs, svls_targets(labels, c, sigma, size))


def mbls_penalty(logits: Tensor, margin: float) -> Tensor:
    """Mean over voxels of sum_c max(0, (max logit - logit_c) - margin)."""
    n, c, h, w = logits.shape
    top = logits.data.argmax(axis=1)
    sel = (np.arange(c)[None, :, None, None] == top[:, None]).astype(np.float64)
    max_logit = nx.reshape((logits * sel).sum(axis=1), (n, 1, h, w))
    gaps = nx.broadcast_to(max_logit, logits.shape) - logits
    return nx.relu(gaps - margin).sum() / float(n * h * w)


def mbls_loss(logits: Tensor, labels: np.ndarray, lam: float = 0.1, margin: float = 10.0) -> Tensor:
    if lam < 0 or margin < 0:
        raise ValueError("MbLS lambda and margin must be >= 0")
    c = _check_probs(logits, labels)
    probs = nx.softmax(logits, axis=1)
    ce = soft_cross_entropy(probs, one_hot(labels, c))
    return ce + lam * mbls_penalty(logits, margin)


# ---------------------------------------------------------------- registry

@dataclass
class LossSpec:
    """A named training objective and its parameters."""

    name: str
    params: dict = field(default_factory=dict)

    def __call__(self, logits: Tensor, probs: Tensor, labels: np.ndarray, weights) -> tuple[Tensor, dict]:
        """Return (loss, components) where components are floats for logging."""
        p = self.params
        if self.name in ("ce", "avu"):
            alpha = float(p.get("alpha", 0.0)) if self.name == "avu" else 0.0
            cfg = AvuLossConfig(alpha=alpha, thresholds=tuple(p.get("thresholds", default_loss_thresholds())))
            ce = weighted_bce(probs, labels, weights)
            if alpha == 0:
                return ce, {"ce": float(ce.data), "avu": 0.0}
            avu = avu_loss(probs, labels, cfg)
            return ce + alpha * avu, {"ce": float(ce.data), "avu": float(avu.data)}
        fn = BASELINES[self.name]
        if self.name == "mbls":
            loss = fn(logits, labels, **p)
        else:
            loss = fn(probs, labels, **p)
        return loss, {"ce": float(loss.data), "avu": 0.0}


BASELINES: dict[str, Callable[..., Tensor]] = {
    "focal": focal_loss,
    "ecp": ecp_loss,
    "ls": label_smoothing_loss,
    "svls": svls_loss,
    "mbls": mbls_loss,
}
LOSS_NAMES = ("ce", "avu", *BASELINES)


def make_loss(name: str, **params) -> LossSpec:
    if name not in LOSS_NAMES:
        raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}")
    allowed = {
        "ce": set(), "avu": {"alpha", "thresholds"}, "focal": {"gamma"}, "ecp": {"lam"},
        "ls": {"alpha"}, "svls": {"sigma", "size"}, "mbls": {"lam", "margin"},
    }[name]
    extra = set(params) - allowed
    if extra:
        raise ValueError(f"loss {name!r} does not take {sorted(extra)}")
    checks = {
        "alpha": (lambda v: v >= 0) if name == "avu" else (lambda v: 0 <= v < 1),
        "gamma": lambda v: v >= 0, "lam": lambda v: v >= 0, "sigma": lambda v: v > 0,
        "margin": lambda v: v >= 0, "size": lambda v: int(v) == v and v >= 1 and v % 2 == 1,
    }
    for key, value in params.items():
        if key in checks and not checks[key](value):
            raise ValueError(f"loss {name!r}: {key}={value!r} out of range")
    if "thresholds" in params:
        AvuLossConfig(thresholds=tuple(params["thresholds"]))
    return LossSpec(name, dict(params))

"""Miniature encoder / dilated-middle / decoder segmentation network.

Topology (input H x W, both divisible by 4)::

    enc1 (2 convs, c1) -> pool -> enc2 (2 convs, c2) -> pool
    -> 4 dilated middle convs (c3; dilations 1, 2, 5, 1)
    -> up + skip(enc2) -> dec2 (2 convs, c2) -> up + skip(enc1) -> dec1 (2 convs, c1)
    -> 1x1 head -> C logits

``bayes-mid`` swaps the middle convs for FlipOut layers, ``bayes-head`` the
decoder convs. Kernel means are drawn from one generator in a fixed order
for every variant, so the three variants built from the same seed share them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .bayes import (FlipoutConv2d, batch_probs_to_volume, he_uniform, load_checkpoint,
                    save_checkpoint, slices_to_batch, mc_predict)
from .numerics import Tensor
from .volumes import ProbVolume

VARIANTS = ("det", "bayes-mid", "bayes-head")
MIDDLE = ("mid1", "mid2", "mid3", "mid4")
DECODER = ("dec2a", "dec2b", "dec1a", "dec1b")


@dataclass(frozen=True)
class SegModelConfig:
    variant: str = "det"
    channels: tuple = (8, 16, 16)
    num_classes: int = 2
    dilations: tuple = (1, 2, 5, 1)
    in_channels: int = 1
    prior_std: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.channels) != 3 or any(int(c) < 1 for c in self.channels):
            raise ValueError(f"channels must be three positive ints, got {self.channels}")
        if len(self.dilations) != 4 or any(int(d) < 1 for d in self.dilations):
            raise ValueError(f"need four positive dilation rates, got {self.dilations}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["dilations"] = list(self.dilations)
        return d


class Conv2d:
    stochastic = False

    def __init__(self, cin: int, cout: int, k: int = 3, dilation: int = 1,
                 mu: np.ndarray | None = None):
        self.weight = Tensor(mu if mu is not None else np.zeros((cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.dilation = dilation

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        out = nx.conv2d(x, self.weight, "same", self.dilation)
        return out + nx.reshape(self.bias, (1, self.weight.shape[0], 1, 1))


def _layer_plan(cfg: SegModelConfig) -> list[tuple[str, int, int, int, int]]:
    c1, c2, c3 = cfg.channels
    plan = [("enc1a", cfg.in_channels, c1, 3, 1), ("enc1b", c1, c1, 3, 1),
            ("enc2a", c1, c2, 3, 1), ("enc2b", c2, c2, 3, 1)]
    cin = c2
    for name, d in zip(MIDDLE, cfg.dilations):
        plan.append((name, cin, c3, 3, d))
        cin = c3
    plan += [("dec2a", c3 + c2, c2, 3, 1), ("dec2b", c2, c2, 3, 1),
             ("dec1a", c2 + c1, c1, 3, 1), ("dec1b", c1, c1, 3, 1),
             ("head", c1, cfg.num_classes, 1, 1)]
    return plan


class SegModel:
    def __init__(self, cfg: SegModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        stochastic = set(MIDDLE) if cfg.variant == "bayes-mid" else set(DECODER) if cfg.variant == "bayes-head" else set()
        self.layers: dict[str, object] = {}
        for name, cin, cout, k, d in _layer_plan(cfg):
            mu = he_uniform(rng, (cout, cin, k, k), cin * k * k)
            if name in stochastic:
                self.layers[name] = FlipoutConv2d(cin, cout, k, d, prior_std=cfg.prior_std, mu=mu)
            else:
                self.layers[name] = Conv2d(cin, cout, k, d, mu=mu)

    @property
    def is_stochastic(self) -> bool:
        return any(layer.stochastic for layer in self.layers.values())

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self.layers.items():
            for pname, t in layer.parameters().items():
                out[f"{lname}.{pname}"] = t
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """Logits (N, C, H, W). ``rng=None`` evaluates Bayesian layers at their means."""
        if x.ndim != 4 or x.shape[2] % 4 or x.shape[3] % 4:
            raise nx.ShapeError("SegModel.forward", x.shape, ("N", "C", "4k", "4k"))
        L = self.layers
        relu = nx.relu
        e1 = relu(L["enc1b"](relu(L["enc1a"](x, rng)), rng))
        e2 = relu(L["enc2b"](relu(L["enc2a"](nx.max_pool2d(e1), rng)), rng))
        m = nx.max_pool2d(e2)
        for name in MIDDLE:
            m = relu(L[name](m, rng))
        d2 = nx.concat([nx.upsample_nearest(m), e2], axis=1)
        d2 = relu(L["dec2b"](relu(L["dec2a"](d2, rng)), rng))
        d1 = nx.concat([nx.upsample_nearest(d2), e1], axis=1)
        d1 = relu(L["dec1b"](relu(L["dec1a"](d1, rng)), rng))
        return L["head"](d1, rng)

    __call__ = forward

    def predict_probs(self, batch: np.ndarray, rng=None) -> np.ndarray:
        return nx.softmax(self.forward(Tensor(batch), rng), axis=1).data

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, t in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {t.shape}")
            t.data = arr.copy()

    def save(self, path, extra_meta: dict | None = None) -> int:
        meta = {"model": self.cfg.to_dict(), "seed": self.seed}
        meta.update(extra_meta or {})
        return save_checkpoint(path, self.state_arrays(), meta)


def build_model(cfg: SegModelConfig, seed: int = 0) -> SegModel:
    return SegModel(cfg, seed)


def load_model(path) -> tuple[SegModel, dict]:
    arrays, meta = load_checkpoint(path)
    m = meta["model"]
    cfg = SegModelConfig(variant=m["variant"], channels=tuple(m["channels"]),
                         num_classes=m["num_classes"], dilations=tuple(m["dilations"]),
                         in_channels=m.get("in_channels", 1), prior_std=m.get("prior_std", 1.0))
    model = SegModel(cfg, meta.get("seed", 0))
    model.load_arrays(arrays)
    return model, meta


# ------------------------------------------------------------ predictors

def predict(model: SegModel, image, samples: int = 5, seed: int = 0) -> ProbVolume:
    """Single pass for deterministic models, ``samples`` MC passes otherwise."""
    return mc_predict(model, image, samples, seed)


def ensemble_predict(models: list, image) -> ProbVolume:
    """Mean of member softmax outputs (members evaluated at their means)."""
    if len(models) < 2:
        raise ValueError("an ensemble needs at least 2 members")
    classes = {m.cfg.num_classes for m in models}
    if len(classes) != 1:
        raise ValueError(f"ensemble members disagree on class count: {sorted(classes)}")
    batch = slices_to_batch(getattr(image, "data", image))
    acc = None
    for m in models:
        p = m.predict_probs(batch)
        acc = p if acc is None else acc + p
    return batch_probs_to_volume(acc / len(models))


def tta_predict(model: SegModel, image, reps: int = 5, noise_std: float = 0.05,
                drop_rate: float = 0.02, seed: int = 0) -> ProbVolume:
    """Average of ``reps`` Gaussian-noise passes and ``reps`` pixel-removal passes."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if not 0 <= drop_rate < 1:
        raise ValueError("drop_rate must lie in [0, 1)")
    batch = slices_to_batch(getattr(image, "data", image))
    rng = np.random.default_rng(seed)
    acc = np.zeros((batch.shape[0], model.cfg.num_classes) + batch.shape[2:])
    for _ in range(reps):
        acc += model.predict_probs(batch + noise_std * rng.standard_normal(batch.shape))
    for _ in range(reps):
        keep = rng.random(batch.shape) >= drop_rate
        acc += model.predict_probs(batch * keep)
    return batch_probs_to_volume(acc / (2 * reps))

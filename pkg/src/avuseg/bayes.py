"""FlipOut Gaussian variational layers and Monte-Carlo prediction."""
from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .volumes import ProbVolume, crc64

DEFAULT_PRIOR_STD = 1.0
INIT_STD_RATIO = 1e-3


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def rademacher(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


class FlipoutConv2d:
    """Conv layer with a factorized Gaussian posterior over kernel and bias.

    One weight perturbation is drawn per forward pass and decorrelated across
    the batch with per-example Rademacher signs on input and output channels.
    Passing ``rng=None`` evaluates the layer at the posterior mean.
    """

    stochastic = True

    def __init__(self, cin: int, cout: int, k: int = 3, dilation: int = 1,
                 rng: np.random.Generator | None = None, prior_std: float = DEFAULT_PRIOR_STD,
                 mu: np.ndarray | None = None, mu_bias: np.ndarray | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        if mu is None:
            mu = he_uniform(rng, (cout, cin, k, k), fan_in)
        if mu_bias is None:
            mu_bias = np.zeros(cout)
        rho0 = inverse_softplus(INIT_STD_RATIO * math.sqrt(6.0 / fan_in))
        self.mu = Tensor(mu, requires_grad=True)
        self.rho = Tensor(np.full(mu.shape, rho0), requires_grad=True)
        self.mu_bias = Tensor(mu_bias, requires_grad=True)
        self.rho_bias = Tensor(np.full(mu_bias.shape, rho0), requires_grad=True)
        self.dilation = dilation
        self.prior_std = prior_std

    def parameters(self) -> dict[str, Tensor]:
        return {"mu": self.mu, "rho": self.rho, "mu_bias": self.mu_bias, "rho_bias": self.rho_bias}

    def std(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        cout = self.mu.shape[0]
        mean_out = nx.conv2d(x, self.mu, "same", self.dilation)
        if rng is None:
            return mean_out + nx.reshape(self.mu_bias, (1, cout, 1, 1))
        n, cin = x.shape[0], x.shape[1]
        eps_w = rng.standard_normal(self.mu.shape)
        eps_b = rng.standard_normal(self.mu_bias.shape)
        sign_in = rademacher(rng, (n, cin, 1, 1))
        sign_out = rademacher(rng, (n, cout, 1, 1))
        delta_w = nx.softplus(self.rho) * eps_w
        bias = self.mu_bias + nx.softplus(self.rho_bias) * eps_b
        x_signed = x * np.broadcast_to(sign_in, x.shape)
        pert = nx.conv2d(x_signed, delta_w, "same", self.dilation)
        pert = pert * np.broadcast_to(sign_out, pert.shape)
        return mean_out + pert + nx.reshape(bias, (1, cout, 1, 1))

    def kl(self) -> Tensor:
        return gaussian_kl(self.mu, self.rho, self.prior_std) + gaussian_kl(self.mu_bias, self.rho_bias, self.prior_std)


class FlipoutDense:
    """Dense analogue of :class:`FlipoutConv2d`; ``x @ W`` with W of shape (in, out)."""

    stochastic = True

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 prior_std: float = DEFAULT_PRIOR_STD, mu: np.ndarray | None = None,
                 std: float | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if mu is None:
            mu = he_uniform(rng, (n_in, n_out), n_in)
        std0 = INIT_STD_RATIO * math.sqrt(6.0 / n_in) if std is None else std
        rho0 = inverse_softplus(std0) if std0 > 0 else -1e4
        self.mu = Tensor(mu, requires_grad=True)
        self.rho = Tensor(np.full(mu.shape, rho0), requires_grad=True)
        self.mu_bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.rho_bias = Tensor(np.full(n_out, rho0), requires_grad=True)
        self.prior_std = prior_std

    def parameters(self) -> dict[str, Tensor]:
        return {"mu": self.mu, "rho": self.rho, "mu_bias": self.mu_bias, "rho_bias": self.rho_bias}

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = nx._wrap(x)
        n_out = self.mu.shape[1]
        mean_out = x @ self.mu
        if rng is None:
            return mean_out + nx.reshape(self.mu_bias, (1, n_out))
        n = x.shape[0]
        eps_w = rng.standard_normal(self.mu.shape)
        eps_b = rng.standard_normal(n_out)
        sign_in = rademacher(rng, (n, self.mu.shape[0]))
        sign_out = rademacher(rng, (n, n_out))
        delta_w = nx.softplus(self.rho) * eps_w
        bias = self.mu_bias + nx.softplus(self.rho_bias) * eps_b
        pert = ((x * sign_in) @ delta_w) * sign_out
        return mean_out + pert + nx.reshape(bias, (1, n_out))

    def kl(self) -> Tensor:
        return gaussian_kl(self.mu, self.rho, self.prior_std) + gaussian_kl(self.mu_bias, self.rho_bias, self.prior_std)


def gaussian_kl(mu: Tensor, rho: Tensor, prior_std: float) -> Tensor:
    """Sum of KL(N(mu, softplus(rho)^2) || N(0, prior_std^2)) over all entries."""
    sigma = nx.softplus(rho)
    s2 = prior_std ** 2
    terms = math.log(prior_std) - nx.log(sigma) + (sigma * sigma + mu * mu) / (2.0 * s2) - 0.5
    return terms.sum()


def kl_regularizer(layers: Iterable, num_voxels: int, weight: float = 0.0) -> Tensor | None:
    """Weighted KL of all variational layers, scaled by 1/num_voxels.

    Returns ``None`` when ``weight`` is 0 so callers leave the loss untouched.
    """
    if weight == 0:
        return None
    total = None
    for layer in layers:
        if getattr(layer, "stochastic", False):
            term = layer.kl()
            total = term if total is None else total + term
    if total is None:
        return None
    return total * (weight / float(num_voxels))


# --------------------------------------------------------------- prediction

def sample_streams(seed, count: int) -> list[np.random.Generator]:
    """Independent generators, one per Monte-Carlo sample, fixed by ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(child)) for child in ss.spawn(count)]


def slices_to_batch(image: np.ndarray) -> np.ndarray:
    """(Z, Y, X) scan -> (Z, 1, Y, X) network batch."""
    image = np.asarray(image, dtype=np.float64)
    return image[:, None, :, :]


def batch_probs_to_volume(probs: np.ndarray) -> ProbVolume:
    """(Z, C, Y, X) probabilities -> ProbVolume with (Z, Y, X, C) layout."""
    return ProbVolume(np.ascontiguousarray(probs.transpose(0, 2, 3, 1)))


def forward_probs(model, batch: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    return nx.softmax(model.forward(Tensor(batch), rng), axis=1).data


def mc_predict(model, image, samples: int = 5, seed=0) -> ProbVolume:
    """Average of ``samples`` stochastic softmax outputs over a (Z, Y, X) scan.

    Sample m always uses substream m of ``seed``; deterministic models make a
    single pass regardless of ``samples``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    batch = slices_to_batch(getattr(image, "data", image))
    if not model.is_stochastic:
        return batch_probs_to_volume(forward_probs(model, batch, None))
    acc = None
    for rng in sample_streams(seed, samples):
        p = forward_probs(model, batch, rng)
        acc = p if acc is None else acc + p
    return batch_probs_to_volume(acc / samples)


# --------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "avuseg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> int:
    """Write ``path`` (JSON manifest) plus ``path`` with ``.bin`` suffix (payload).

    Returns the payload CRC64. Both files are written via temp + rename.
    """
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    crc = crc64(payload)
    manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta,
                "payload": bin_path.name, "payload_crc64": f"{crc:016x}", "tensors": entries}
    tmp_bin = bin_path.with_name(bin_path.name + ".tmp")
    tmp_bin.write_bytes(payload)
    os.replace(tmp_bin, bin_path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return crc


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an {CHECKPOINT_FORMAT} manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    payload = (path.parent / manifest["payload"]).read_bytes()
    if f"{crc64(payload):016x}" != manifest["payload_crc64"]:
        raise CheckpointError("checkpoint payload CRC64 mismatch")
    arrays = {}
    for entry in manifest["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[start:stop], dtype=entry["dtype"]).astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, manifest["meta"]

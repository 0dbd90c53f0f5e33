import math

import numpy as np
import pytest

from avuseg import losses as L
from avuseg import numerics as nx
from avuseg.numerics import Tensor

SEEDS = range(10)
THRESHOLDS = L.default_loss_thresholds()


def probs_of(logits):
    return nx.softmax(logits, axis=1)


def safe_logits(rng, shape, thresholds=THRESHOLDS, scale=2.0):
    """Random logits whose voxel entropies stay clear of every threshold."""
    c = shape[1]
    while True:
        x = rng.normal(0, scale, size=shape)
        p = np.exp(x - x.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        u = -(p * np.log(p)).sum(1) / math.log(c)
        top2 = np.sort(p, axis=1)[:, -2:]
        if np.min(np.abs(u[..., None] - np.asarray(thresholds))) > 1e-3 and np.min(top2[:, 1] - top2[:, 0]) > 1e-3:
            return x


def avu_loss_reference(p, labels, thresholds, use_tanh=True):
    """Voxel-by-voxel evaluation of the proxy counts and the log-ratio loss."""
    n, c, h, w = p.shape
    total = 0.0
    for t in thresholds:
        n_ac = n_au = n_ic = n_iu = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    vec = p[b, :, i, j]
                    pred = int(np.argmax(vec))
                    p_hat = vec[pred]
                    u = -sum(q * math.log(max(q, 1e-7)) for q in vec) / math.log(c)
                    tu = math.tanh(u) if use_tanh else u
                    if pred == labels[b, i, j]:
                        if u <= t:
                            n_ac += p_hat * (1 - tu)
                        else:
                            n_au += p_hat * tu
                    else:
                        if u <= t:
                            n_ic += (1 - p_hat) * (1 - tu)
                        else:
                            n_iu += (1 - p_hat) * tu
        total += math.log(1 + (n_au + n_ic) / (n_ac + n_iu + 1e-8))
    return total / len(thresholds)


def test_bce_single_voxel_value():
    p = Tensor(np.full((1, 2, 1, 1), 0.5))
    loss = L.weighted_bce(p, np.zeros((1, 1, 1), int), [1.0, 1.0])
    assert abs(loss.item() - math.log(2)) < 1e-12


def test_bce_perfect_prediction_near_zero_and_weight_errors():
    labels = np.array([[[0, 1], [1, 0]]])
    p = Tensor(L.one_hot(labels, 2))
    assert 0 <= L.weighted_bce(p, labels, [1, 1]).item() < 1e-5
    with pytest.raises(ValueError):
        L.weighted_bce(p, labels, [1, 1, 1])
    with pytest.raises(ValueError):
        L.weighted_bce(p, labels, [1, 0])


def test_avu_loss_matches_voxel_reference():
    rng = np.random.default_rng(0)
    for c in (2, 3):
        x = safe_logits(rng, (1, c, 8, 8), thresholds=np.linspace(0, 1, 10)[1:-1])
        labels = rng.integers(0, c, (1, 8, 8))
        cfg = L.AvuLossConfig(thresholds=tuple(np.linspace(0, 1, 10)[1:-1]))
        got = L.avu_loss(probs_of(Tensor(x)), labels, cfg).item()
        p = probs_of(Tensor(x)).data
        assert abs(got - avu_loss_reference(p, labels, cfg.thresholds)) < 1e-12
        cfg_lin = L.AvuLossConfig(thresholds=cfg.thresholds, use_tanh=False)
        got_lin = L.avu_loss(probs_of(Tensor(x)), labels, cfg_lin).item()
        assert abs(got_lin - avu_loss_reference(p, labels, cfg.thresholds, use_tanh=False)) < 1e-12


def test_avu_loss_limits():
    labels = np.array([[[0, 1], [1, 1]]])
    confident = Tensor(np.clip(L.one_hot(labels, 2), 1e-9, 1 - 1e-9))
    assert L.avu_loss(confident, labels).item() < 1e-6
    # every prediction wrong (ties resolve to class 0) and maximally uncertain
    uniform = Tensor(np.full((1, 2, 2, 2), 0.5))
    assert L.avu_loss(uniform, np.ones((1, 2, 2), int)).item() < 1e-6


def test_avu_loss_nonnegative_and_order_invariant():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(0, 2, (2, 3, 4, 4))
        labels = rng.integers(0, 3, (2, 4, 4))
        base = L.avu_loss(probs_of(Tensor(x)), labels).item()
        assert base >= 0
        perm = rng.permutation(32)
        xs = x.transpose(0, 2, 3, 1).reshape(32, 3)[perm].reshape(2, 4, 4, 3).transpose(0, 3, 1, 2)
        ls = labels.reshape(32)[perm].reshape(2, 4, 4)
        assert abs(L.avu_loss(probs_of(Tensor(xs)), ls).item() - base) < 1e-12


def test_more_entropy_on_inaccurate_voxel_never_hurts():
    rng = np.random.default_rng(9)
    for _ in range(20):
        x = rng.normal(0, 1.5, (1, 2, 3, 3))
        labels = (probs_of(Tensor(x)).data.argmax(1)).copy()
        labels[0, 1, 1] = 1 - labels[0, 1, 1]  # the centre voxel is wrong
        p = probs_of(Tensor(x)).data
        u0 = -(p[0, :, 1, 1] * np.log(p[0, :, 1, 1])).sum() / math.log(2)
        below = tuple(t for t in THRESHOLDS if t < u0) or (u0 / 2,)
        cfg = L.AvuLossConfig(thresholds=below)
        before = L.avu_loss(Tensor(p), labels, cfg).item()
        q = p.copy()
        top = q[0, :, 1, 1].argmax()
        q[0, top, 1, 1] = max(0.5 + 1e-9, q[0, top, 1, 1] - 0.5 * (q[0, top, 1, 1] - 0.5))
        q[0, 1 - top, 1, 1] = 1 - q[0, top, 1, 1]
        assert L.avu_loss(Tensor(q), labels, cfg).item() <= before + 1e-12


def test_total_loss_linearity_and_alpha_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 4, 4))
    labels = rng.integers(0, 2, (2, 4, 4))
    w = [1.0, 3.0]
    ce = L.weighted_bce(probs_of(Tensor(x)), labels, w).item()
    avu = L.avu_loss(probs_of(Tensor(x)), labels).item()
    assert L.total_loss(probs_of(Tensor(x)), labels, w, L.AvuLossConfig(alpha=0)).item() == ce
    tot = L.total_loss(probs_of(Tensor(x)), labels, w, L.AvuLossConfig(alpha=100)).item()
    assert abs(tot - (ce + 100 * avu)) < 1e-12 * max(1.0, abs(tot))


def test_gradient_additivity():
    rng = np.random.default_rng(2)
    x = safe_logits(rng, (1, 2, 4, 4))
    labels = rng.integers(0, 2, (1, 4, 4))
    w, alpha = [1.0, 2.0], 100.0

    def grad(fn):
        t = Tensor(x.copy(), requires_grad=True)
        fn(probs_of(t)).backward()
        return t.grad
    g_tot = grad(lambda p: L.total_loss(p, labels, w, L.AvuLossConfig(alpha=alpha)))
    g_ce = grad(lambda p: L.weighted_bce(p, labels, w))
    g_avu = grad(lambda p: L.avu_loss(p, labels))
    np.testing.assert_allclose(g_tot, g_ce + alpha * g_avu, rtol=1e-10, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        L.AvuLossConfig(thresholds=())
    with pytest.raises(ValueError):
        L.AvuLossConfig(thresholds=(0.5, 0.2))
    with pytest.raises(ValueError):
        L.AvuLossConfig(alpha=-1)
    with pytest.raises(ValueError):
        L.avu_loss(Tensor(np.full((1, 2, 2, 2), 0.5)), np.zeros((1, 2, 3), int))


# ------------------------------------------------------------- baselines

def test_baseline_limiting_cases():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 4))
    labels = rng.integers(0, 3, (2, 4, 4))
    p = probs_of(Tensor(x))
    ce = L.soft_cross_entropy(p, L.one_hot(labels, 3)).item()
    assert abs(L.focal_loss(p, labels, gamma=0).item() - ce) < 1e-12
    assert abs(L.label_smoothing_loss(p, labels, alpha=0).item() - ce) < 1e-12
    assert abs(L.ecp_loss(p, labels, lam=0).item() - ce) < 1e-12
    small = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
    assert L.mbls_penalty(small, margin=10).item() == 0.0
    assert abs(L.mbls_loss(small, labels, lam=5.0, margin=10).item()
               - L.soft_cross_entropy(probs_of(small), L.one_hot(labels, 3)).item()) < 1e-12


def test_svls_targets_are_blurred_distributions():
    labels = np.zeros((1, 5, 5), int)
    labels[0, 2, 2] = 1
    t = L.svls_targets(labels, 2, sigma=1.0)
    np.testing.assert_allclose(t.sum(1), 1.0, atol=1e-12)
    k = L.gaussian_kernel2d(1.0)
    assert abs(t[0, 1, 2, 2] - k[1, 1]) < 1e-12
    assert abs(t[0, 1, 1, 1] - k[0, 0]) < 1e-12
    assert t[0, 1, 0, 0] == 0.0


def test_focal_matches_formula():
    p = np.array([0.7, 0.2, 0.1]).reshape(1, 3, 1, 1)
    got = L.focal_loss(Tensor(p), np.zeros((1, 1, 1), int), gamma=2).item()
    assert abs(got - (-(0.3 ** 2) * math.log(0.7))) < 1e-12


def test_ecp_matches_formula():
    p = np.array([0.7, 0.2, 0.1]).reshape(1, 3, 1, 1)
    h = -sum(q * math.log(q) for q in (0.7, 0.2, 0.1))
    got = L.ecp_loss(Tensor(p), np.zeros((1, 1, 1), int), lam=0.5).item()
    assert abs(got - (-math.log(0.7) - 0.5 * h)) < 1e-12


def test_make_loss_validation():
    assert L.make_loss("avu", alpha=100).name == "avu"
    for name, params in [("nope", {}), ("focal", {"gamma": -1}), ("ls", {"alpha": 1.0}),
                         ("svls", {"sigma": 0}), ("mbls", {"margin": -1}), ("ce", {"alpha": 1}),
                         ("svls", {"size": 2})]:
        with pytest.raises(ValueError):
            L.make_loss(name, **params)


def test_loss_spec_alpha_zero_returns_bce_exactly():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    labels = rng.integers(0, 2, (2, 4, 4))
    p = probs_of(x)
    a, terms = L.make_loss("avu", alpha=0.0)(x, p, labels, [1.0, 2.0])
    b, _ = L.make_loss("ce")(x, p, labels, [1.0, 2.0])
    assert a.item() == b.item() and terms["avu"] == 0.0


# ------------------------------------------------------- gradient checks

GRAD_CASES = {
    "weighted_bce": lambda lg, y: L.weighted_bce(probs_of(lg), y, [1.0, 2.5, 0.7]),
    "avu": lambda lg, y: L.avu_loss(probs_of(lg), y),
    "avu_linear": lambda lg, y: L.avu_loss(probs_of(lg), y, L.AvuLossConfig(use_tanh=False)),
    "total": lambda lg, y: L.total_loss(probs_of(lg), y, [1.0, 2.5, 0.7], L.AvuLossConfig(alpha=100)),
    "focal": lambda lg, y: L.focal_loss(probs_of(lg), y, gamma=2.0),
    "ecp": lambda lg, y: L.ecp_loss(probs_of(lg), y, lam=1.0),
    "ls": lambda lg, y: L.label_smoothing_loss(probs_of(lg), y, alpha=0.05),
    "svls": lambda lg, y: L.svls_loss(probs_of(lg), y, sigma=1.0),
    "mbls": lambda lg, y: L.mbls_loss(lg, y, lam=0.1, margin=1.0),
}


def mbls_safe(x, margin=1.0):
    gaps = x.max(1, keepdims=True) - x
    return np.min(np.abs(gaps - margin)) > 1e-3


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", SEEDS)
def test_loss_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = safe_logits(rng, (2, 3, 4, 4))
    while name == "mbls" and not mbls_safe(x):
        x = safe_logits(rng, (2, 3, 4, 4))
    labels = rng.integers(0, 3, (2, 4, 4))
    assert nx.gradcheck(lambda lg: GRAD_CASES[name](lg, labels), [x]) <= 1e-5

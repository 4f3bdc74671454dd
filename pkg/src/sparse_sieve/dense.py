"""Gradient-sign attacks (FGSM, I-FGSM, PGD) and PGD adversarial training.

All attacks accept a single (C, H, W) image with a scalar label or an
(n, C, H, W) batch with n labels; images in a batch are attacked
independently (the summed loss separates per image).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset
from .models import Model, ModelSpec, build_model, forward_logits, predict, train

NON_TARGETED = "non-targeted"
TARGETED = "targeted"
MODES = (NON_TARGETED, TARGETED)


@dataclass(frozen=True)
class DenseAttackConfig:
    epsilon: float = 4 / 255
    step: float = 1 / 255
    iterations: int = 10
    mode: str = NON_TARGETED
    random_init: bool = False
    clip: bool = True
    restarts: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.step <= self.epsilon:
            raise ValueError(f"step must satisfy 0 < step <= epsilon, got {self.step}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class DensePerturbation:
    delta: np.ndarray
    linf: np.ndarray | float
    losses: list = field(default_factory=list)


def _batch(images, labels):
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(yb) != len(xb):
        raise T.ShapeError(f"{len(yb)} labels for {len(xb)} images")
    return xb, yb, single


def input_gradient(model: Model, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-image cross-entropy losses and d(loss)/d(x) for a batch."""
    with T.Tape() as tape:
        xt = T.Tensor._wrap(x)
        losses = T.softmax_cross_entropy(forward_logits(model, xt), labels, reduction="none")
        total = losses.sum()
    grads = tape.backward(total)
    return losses.data, grads[xt]


def _finish(delta, single, eps, losses):
    linf = np.abs(delta.reshape(len(delta), -1)).max(axis=1)
    if single:
        return DensePerturbation(delta[0], float(linf[0]), [float(v[0]) for v in losses])
    return DensePerturbation(delta, linf, losses)


def _clip_valid(x, delta):
    return np.clip(x + delta, 0.0, 1.0) - x


def fgsm(model: Model, images, labels, epsilon: float, clip: bool = True) -> DensePerturbation:
    """delta = epsilon * sign(grad_x J(x, y)); optionally pulled back into [0, 1]."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    x, y, single = _batch(images, labels)
    _, g = input_gradient(model, x, y)
    delta = epsilon * np.sign(g)
    if clip:
        delta = _clip_valid(x, delta)
    return _finish(delta, single, epsilon, [])


def _iterate(model, x, labels, cfg: DenseAttackConfig, direction: float, delta0):
    delta = delta0.copy()
    eps = cfg.epsilon
    history = []
    for _ in range(cfg.iterations):
        losses, g = input_gradient(model, x + delta, labels)
        history.append(losses)
        delta = delta + direction * cfg.step * np.sign(g)
        delta = np.clip(delta, -eps, eps)
        if cfg.clip:
            delta = _clip_valid(x, delta)
    return delta, history


def ifgsm_nontargeted(model: Model, images, labels, config: DenseAttackConfig) -> DensePerturbation:
    """Ascend J(x + delta, y_true) by sign steps, projecting onto the eps ball each step."""
    x, y, single = _batch(images, labels)
    delta, hist = _iterate(model, x, y, config, +1.0, np.zeros_like(x))
    return _finish(delta, single, config.epsilon, hist)


def ifgsm_targeted(model: Model, images, targets, config: DenseAttackConfig) -> DensePerturbation:
    """Descend J(x + delta, y_adv) by sign steps."""
    x, t, single = _batch(images, targets)
    pred = np.atleast_1d(predict(model, x))
    if (pred == t).any():
        raise ValueError("target label equals the current prediction for some image")
    delta, hist = _iterate(model, x, t, config, -1.0, np.zeros_like(x))
    return _finish(delta, single, config.epsilon, hist)


def ifgsm(model: Model, images, labels, config: DenseAttackConfig) -> DensePerturbation:
    if config.mode == TARGETED:
        return ifgsm_targeted(model, images, labels, config)
    return ifgsm_nontargeted(model, images, labels, config)


def pgd(model: Model, images, labels, config: DenseAttackConfig) -> DensePerturbation:
    """I-FGSM from a uniform random start in [-eps, eps], best of ``restarts``.

    ``labels`` are true labels (non-targeted) or targets (targeted). Per image,
    a successful restart replaces an unsuccessful one; among equals the larger
    final loss (non-targeted) or smaller (targeted) is kept.
    """
    x, y, single = _batch(images, labels)
    rng = np.random.default_rng(config.seed)
    direction = +1.0 if config.mode == NON_TARGETED else -1.0
    best = np.zeros_like(x)
    best_key = np.full(len(x), -np.inf)
    history = []
    for _ in range(config.restarts):
        if config.random_init:
            d0 = rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
            if config.clip:
                d0 = _clip_valid(x, d0)
        else:
            d0 = np.zeros_like(x)
        delta, hist = _iterate(model, x, y, config, direction, d0)
        history.extend(hist)
        logits = forward_logits(model, x + delta).data
        losses = T.softmax_cross_entropy(T.Tensor._wrap(logits), y, reduction="none").data
        hit = (logits.argmax(1) != y) if config.mode == NON_TARGETED else (logits.argmax(1) == y)
        key = hit * 1e6 + direction * losses
        better = key > best_key
        best[better] = delta[better]
        best_key = np.where(better, key, best_key)
    return _finish(best, single, config.epsilon, history)


def fast_at_perturbation(model: Model, x, y, epsilon: float, step: float, rng) -> np.ndarray:
    """Single sign step from a uniform random start (the Fast-AT recipe)."""
    d0 = _clip_valid(x, rng.uniform(-epsilon, epsilon, size=x.shape))
    _, g = input_gradient(model, x + d0, y)
    delta = np.clip(d0 + step * np.sign(g), -epsilon, epsilon)
    return _clip_valid(x, delta)


def adversarial_train(
    spec: ModelSpec,
    dataset: Dataset,
    attack: DenseAttackConfig | None,
    epochs: int,
    seed: int = 0,
    method: str = "pgd",
    batch_size: int = 128,
    lr: float = 0.05,
    test: Dataset | None = None,
    log=None,
    epsilon_ramp: float = 0.0,
):
    """Train with each minibatch replaced by adversarial examples.

    ``method`` is "pgd" (PGD-AT: random-start PGD with ``attack`` settings) or
    "fast" (Fast-AT: one random-start sign step of size ``attack.step``).
    ``attack=None`` means an epsilon of zero and gives plain training.
    ``epsilon_ramp`` is the fraction of all batches over which epsilon and step
    grow linearly from zero to their targets; 0 uses the full budget from the
    first batch. Small CNNs at large epsilon collapse to chance without it.
    """
    if not 0.0 <= epsilon_ramp <= 1.0:
        raise ValueError("epsilon_ramp must be in [0, 1]")
    if method not in ("pgd", "fast"):
        raise ValueError(f"unknown adversarial training method {method!r}")
    model = build_model(spec, seed)
    if attack is None:
        return train(model, dataset, epochs, batch_size, seed, lr=lr, test=test, log=log)
    cfg = replace(attack, mode=NON_TARGETED, random_init=True, clip=True, restarts=1)
    ramp_batches = epsilon_ramp * epochs * -(-len(dataset) // batch_size)
    seen = [0]

    def transform(m, xb, yb, rng):
        seen[0] += 1
        c = cfg
        if seen[0] < ramp_batches:
            frac = seen[0] / ramp_batches
            c = replace(cfg, epsilon=cfg.epsilon * frac, step=cfg.step * frac)
        if method == "fast":
            return xb + fast_at_perturbation(m, xb, yb, c.epsilon, c.step, rng)
        d0 = _clip_valid(xb, rng.uniform(-c.epsilon, c.epsilon, size=xb.shape))
        delta, _ = _iterate(m, xb, yb, c, +1.0, d0)
        return xb + delta

    model, history = train(
        model, dataset, epochs, batch_size, seed, lr=lr, test=test, batch_transform=transform, log=log
    )
    model.metadata["adversarial_training"] = {
        "method": method,
        "epsilon": cfg.epsilon,
        "step": cfg.step,
        "iterations": cfg.iterations,
        "epsilon_ramp": epsilon_ramp,
    }
    return model, history

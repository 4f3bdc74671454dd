"""Sparse l0 attack: prune a dense sign-gradient seed with a learned gate field.

Each element j of the seed perturbation ``delta`` is gated by a trainable
weight ``w_j`` through a shifted ReLU, ``relu(w_j - tau/eps)``. A Heaviside
count of the open gates is the sparsity penalty; its derivative (zero almost
everywhere) is replaced by a narrow Gaussian ``q_a``. The returned
perturbation multiplies the binary gate pattern by the per-pixel bound
``omega = min(x, 1 - x) / eps``, which keeps every adversarial pixel inside
[0, 1] without clipping.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import tensor as T
from .dense import NON_TARGETED, TARGETED, MODES
from .models import Model, forward_logits

FUNCTIONAL = "functional"
DESTRUCTIVE = "destructive"


class SeedBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class SparseAttackConfig:
    epsilon: float = 4 / 255
    tau: float = 0.30
    a: float = 0.1
    lam: float = 1e-2
    iterations: int = 100
    lr: float = 1e-2
    momentum: float = 0.9
    mode: str = NON_TARGETED
    check_every: int = 1
    projection: str = FUNCTIONAL

    def __post_init__(self) -> None:
        checks = [
            (self.epsilon > 0, "epsilon > 0"),
            (self.tau >= 0, "tau >= 0"),
            (self.a != 0 and math.isfinite(self.a), "a != 0"),
            (self.lam >= 0, "lambda >= 0"),
            (self.iterations >= 1, "iterations >= 1"),
            (self.lr > 0, "lr > 0"),
            (0 <= self.momentum < 1, "0 <= momentum < 1"),
            (self.check_every >= 1, "check_every >= 1"),
            (self.mode in MODES, f"mode in {MODES}"),
            (self.projection in (FUNCTIONAL, DESTRUCTIVE), "projection in (functional, destructive)"),
        ]
        for ok, rule in checks:
            if not ok:
                raise ValueError(f"invalid sparse attack config: requires {rule}")

    @property
    def threshold(self) -> float:
        return self.tau / self.epsilon


# --- elementwise pieces -----------------------------------------------------


def shifted_relu(w, tau: float, epsilon: float):
    """relu(w - tau/eps). Tensor in, Tensor out (recorded); arrays stay arrays."""
    if np.any(np.asarray(epsilon) == 0):
        raise ZeroDivisionError("epsilon must be nonzero")
    if isinstance(w, T.Tensor):
        return T.relu(w - tau / epsilon)
    return np.maximum(np.asarray(w, dtype=np.float64) - tau / epsilon, 0.0)


def surrogate_density(x, a: float) -> np.ndarray:
    """q_a(x) = exp(-(x/a)^2) / (|a| sqrt(pi)), a unit-mass Gaussian."""
    if a == 0:
        raise ZeroDivisionError("surrogate width a must be nonzero")
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-((x / a) ** 2)) / (abs(a) * math.sqrt(math.pi))


def heaviside(t, a: float | None = None):
    """H(x) = 1 for x > 0 else 0.

    On a Tensor the backward rule uses ``surrogate_density(x, a)`` in place of
    the true derivative, so ``a`` is then required.
    """
    if not isinstance(t, T.Tensor):
        return (np.asarray(t) > 0).astype(np.float64)
    if a is None:
        raise ValueError("a surrogate width is required to differentiate heaviside")
    x = t.data
    return T.record((x > 0).astype(np.float64), (t,), lambda g: (g * surrogate_density(x, a),))


def omega_bound(image, epsilon: float) -> np.ndarray:
    """Per-element gate scale min(x/eps, (1-x)/eps); always >= 0 for x in [0, 1]."""
    if np.any(np.asarray(epsilon) == 0):
        raise ZeroDivisionError("epsilon must be nonzero")
    x = np.asarray(image, dtype=np.float64)
    return np.minimum(x / epsilon, (1.0 - x) / epsilon)


def bounded_perturbation(image, delta, mask, epsilon: float) -> np.ndarray:
    """omega * mask * delta, evaluated so that x + result stays in [0, 1] exactly.

    Algebraically this is ``omega_bound(image, eps) * mask * delta``. It is
    computed as ``min(x, 1-x) * (mask * delta / eps)``: with |delta| <= eps the
    ratio lies in [-1, 1] after rounding, so the product never exceeds the
    distance to the nearer bound and the image is never clipped.

    A clipped dense seed can exceed eps by one ulp (``clip(x + d, 0, 1) - x``
    rounds), so the ratio is saturated at +-1. This only absorbs rounding;
    the seed budget check rejects anything larger.
    """
    x = np.asarray(image, dtype=np.float64)
    room = np.minimum(x, 1.0 - x)
    ratio = np.asarray(mask, dtype=np.float64) * np.asarray(delta) / epsilon
    return room * np.clip(ratio, -1.0, 1.0)


def gate_ratio_saturates(mask, delta, epsilon) -> bool:
    """True if any |mask * delta / eps| exceeds 1, i.e. the rounding guard above engages."""
    return bool((np.abs(np.asarray(mask) * np.asarray(delta) / epsilon) > 1.0).any())


def dirac_convergence_probe(a_values, phi, limit: float = np.inf) -> list[float]:
    """|integral(q_a * phi) - phi(0)| for each width, by adaptive quadrature."""
    errors = []
    for a in a_values:
        # split at 0 and +-a so quad sees the narrow peak
        pts = sorted({-abs(a), 0.0, abs(a)})
        total = 0.0
        edges = [-limit, *pts, limit]
        for lo, hi in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad(lambda s: surrogate_density(s, a) * phi(s), lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
            total += val
        errors.append(abs(total - phi(0.0)))
    return errors


def surrogate_mass(a: float) -> float:
    """Integral of q_a over the real line, by adaptive quadrature."""
    total = 0.0
    for lo, hi in ((-np.inf, 0.0), (0.0, np.inf)):
        val, _ = integrate.quad(lambda s: surrogate_density(s, a), lo, hi, epsabs=1e-13, epsrel=1e-12)
        total += val
    return total


# --- loss and attack loop ---------------------------------------------------


def _counts(x: np.ndarray, delta_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nz = delta_star != 0
    n = len(delta_star)
    element = nz.reshape(n, -1).sum(axis=1)
    pixel = nz.any(axis=1).reshape(n, -1).sum(axis=1)
    return element, pixel


def _batch(image, delta, labels):
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    db = np.asarray(delta, dtype=np.float64)
    db = db[None] if single else db
    yb = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if db.shape != xb.shape:
        raise T.ShapeError(f"seed perturbation {db.shape} does not match images {xb.shape}")
    if len(yb) != len(xb):
        raise T.ShapeError(f"{len(yb)} labels for {len(xb)} images")
    return xb, db, yb, single


def sparse_loss(model: Model, image, delta, w, labels, config: SparseAttackConfig, gated: bool = True):
    """Total loss and its gradient with respect to ``w``.

    loss = s * CE(f(x + g(w) * delta), y) + lam * sum_j H(g(w)_j)

    with g(w) = relu(w - tau/eps) when ``gated`` (else g(w) = w) and s = +1
    for targeted attacks (y = target) or -1 for non-targeted ones (y = true
    label), so that descent always moves toward a successful attack. The data
    term is differentiated exactly; only H uses the surrogate derivative.
    Returns (total loss, data term per image, gradient array).
    """
    x, d, y, single = _batch(image, delta, labels)
    w_arr = np.asarray(w, dtype=np.float64)
    w_arr = w_arr[None] if single else w_arr
    if w_arr.shape != x.shape:
        raise T.ShapeError(f"weights {w_arr.shape} do not match images {x.shape}")
    sign = 1.0 if config.mode == TARGETED else -1.0
    with T.Tape() as tape:
        wt = T.Tensor._wrap(w_arr)
        gate = shifted_relu(wt, config.tau, config.epsilon) if gated else wt
        logits = forward_logits(model, T.Tensor._wrap(x) + gate * T.Tensor._wrap(d))
        data = T.softmax_cross_entropy(logits, y, reduction="none")
        penalty = heaviside(gate, config.a).sum()
        total = data.sum() * sign + penalty * config.lam
    grads = tape.backward(total)
    g = grads[wt]
    value = total.item()
    if not math.isfinite(value):
        raise FloatingPointError("non-finite sparse loss")
    return value, data.data * sign, (g[0] if single else g)


@dataclass
class SparseResult:
    delta_star: np.ndarray
    mask: np.ndarray
    l0: int
    pixel_l0: int
    success: bool
    label: int
    confidence: float
    iterations: int
    best_iteration: int
    wall_time: float
    losses: list = field(default_factory=list, repr=False)


def mask_from_weights(w, config: SparseAttackConfig) -> np.ndarray:
    return heaviside(shifted_relu(w, config.tau, config.epsilon))


def _evaluate(model, x, d, w, y, config):
    mask = mask_from_weights(w, config)
    delta_star = bounded_perturbation(x, d, mask, config.epsilon)
    logits = forward_logits(model, x + delta_star).data
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    pred = logits.argmax(axis=1)
    hit = (pred == y) if config.mode == TARGETED else (pred != y)
    element, pixel = _counts(x, delta_star)
    conf = probs[np.arange(len(pred)), pred]
    return mask, delta_star, pred, hit, element, pixel, conf


def extract_final(image, delta, w, config: SparseAttackConfig, model: Model | None = None, labels=None) -> SparseResult:
    """Binary mask H(relu(w - tau/eps)) and delta* = omega * mask * delta for one image.

    With a model and label the success fields are filled in too.
    """
    x = np.asarray(image, dtype=np.float64)
    mask = mask_from_weights(w, config)
    delta_star = bounded_perturbation(x, delta, mask, config.epsilon)
    element, pixel = _counts(x[None], delta_star[None])
    success, label, conf = False, -1, float("nan")
    if model is not None:
        _, _, pred, hit, _, _, c = _evaluate(model, x[None], np.asarray(delta)[None], np.asarray(w)[None], np.atleast_1d(labels), config)
        success, label, conf = bool(hit[0]), int(pred[0]), float(c[0])
    return SparseResult(delta_star, mask, int(element[0]), int(pixel[0]), success, label, conf, 0, 0, 0.0)


def initial_weights(shape, config: SparseAttackConfig) -> np.ndarray:
    # every gate starts open at exactly 1, so the first loss sees the full seed
    return np.full(shape, 1.0 + config.threshold)


def run_sparse_attack_batch(model: Model, images, seeds, labels, config: SparseAttackConfig) -> list[SparseResult]:
    """Run the attack on a batch; images are independent of one another.

    ``labels`` are true labels for non-targeted mode and target labels for
    targeted mode. Each iteration: (destructive mode only) reassign
    w <- relu(w - tau/eps); take the loss gradient; momentum-SGD step on w;
    every ``check_every`` iterations, test the current candidate and keep the
    successful one with the smallest element count. Images with no
    successful candidate get the final one, flagged unsuccessful.
    """
    x, d, y, _ = _batch(images, seeds, labels)
    budget = np.abs(d).reshape(len(d), -1).max(axis=1, initial=0.0)
    if (budget > config.epsilon * (1 + 1e-12)).any():
        raise SeedBudgetError(f"seed l_inf {budget.max():.6g} exceeds epsilon {config.epsilon:.6g}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("images must lie in [0, 1]")

    start = time.perf_counter()
    n = len(x)
    w = initial_weights(x.shape, config)
    state = T.MomentumState(config.lr, config.momentum)
    destructive = config.projection == "destructive"

    best_l0 = np.full(n, np.iinfo(np.int64).max)
    best = {
        "delta_star": np.zeros_like(x),
        "mask": np.zeros_like(x),
        "pixel": np.zeros(n, dtype=np.int64),
        "label": np.full(n, -1),
        "conf": np.full(n, np.nan),
        "iteration": np.zeros(n, dtype=np.int64),
    }
    history = []
    for it in range(1, config.iterations + 1):
        if destructive:
            w = shifted_relu(w, config.tau, config.epsilon)
        _, data_term, g = sparse_loss(model, x, d, w, y, config, gated=not destructive)
        history.append(data_term)
        w = T.sgd_momentum_step(w, g, state)
        if it % config.check_every and it != config.iterations:
            continue
        mask, ds, pred, hit, element, pixel, conf = _evaluate(model, x, d, w, y, config)
        take = hit & (element < best_l0)
        best_l0 = np.where(take, element, best_l0)
        best["delta_star"][take] = ds[take]
        best["mask"][take] = mask[take]
        best["pixel"][take] = pixel[take]
        best["label"][take] = pred[take]
        best["conf"][take] = conf[take]
        best["iteration"][take] = it
    elapsed = time.perf_counter() - start

    mask, ds, pred, hit, element, pixel, conf = _evaluate(model, x, d, w, y, config)
    results = []
    for i in range(n):
        losses = [float(h[i]) for h in history]
        if best_l0[i] != np.iinfo(np.int64).max:
            results.append(
                SparseResult(
                    best["delta_star"][i], best["mask"][i], int(best_l0[i]), int(best["pixel"][i]), True,
                    int(best["label"][i]), float(best["conf"][i]), config.iterations,
                    int(best["iteration"][i]), elapsed / n, losses,
                )
            )
        else:
            results.append(
                SparseResult(
                    ds[i], mask[i], int(element[i]), int(pixel[i]), False, int(pred[i]), float(conf[i]),
                    config.iterations, config.iterations, elapsed / n, losses,
                )
            )
    return results


def run_sparse_attack(model: Model, image, seed_delta, label: int, config: SparseAttackConfig) -> SparseResult:
    """Single-image form of :func:`run_sparse_attack_batch`."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise T.ShapeError(f"expected one (C, H, W) image, got {x.shape}")
    return run_sparse_attack_batch(model, x[None], np.asarray(seed_delta)[None], [label], config)[0]

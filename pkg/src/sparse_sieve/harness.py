"""Run attacks over image sets and turn outcomes into report rows.

Work is split into fixed-size chunks so results do not depend on how many
worker threads run them; rows always come back in image order.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .dense import NON_TARGETED, TARGETED, DenseAttackConfig, fgsm, ifgsm, pgd
from .evaluation import AttackReport
from .models import Model, forward_logits, least_likely_class, predict
from .sparse import SparseAttackConfig, run_sparse_attack_batch

ATTACKS = ("fgsm", "ifgsm", "pgd", "sparse")


@dataclass
class Outcome:
    delta: np.ndarray
    success: np.ndarray
    achieved: np.ndarray
    element_l0: np.ndarray
    pixel_l0: np.ndarray
    confidence: np.ndarray
    iterations: np.ndarray
    wall_time: np.ndarray  # seconds per image
    seed_delta: np.ndarray | None = None


def clean_correct(model: Model, dataset: Dataset, n: int | None = None) -> np.ndarray:
    """Indices (in dataset order) of the first ``n`` images the model classifies correctly."""
    picked = []
    for start in range(0, len(dataset), 1000):
        idx = np.arange(start, min(start + 1000, len(dataset)))
        ok = predict(model, dataset.images[idx]) == dataset.labels[idx]
        picked.extend(idx[ok].tolist())
        if n is not None and len(picked) >= n:
            break
    return np.asarray(picked[:n] if n is not None else picked, dtype=np.int64)


def targets_for(model: Model, images: np.ndarray, rule: str = "least-likely") -> np.ndarray:
    if rule != "least-likely":
        raise ValueError(f"unknown target rule {rule!r}")
    return np.atleast_1d(least_likely_class(model, images))


def _probs(model, x):
    z = forward_logits(model, x).data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dense_chunk(name, model, x, labels, mode, dense: DenseAttackConfig):
    cfg = replace(dense, mode=mode)
    if name == "fgsm":
        if mode == TARGETED:
            # targeted single step: descend the target loss
            d = -fgsm(model, x, labels, cfg.epsilon, clip=False).delta
            d = np.clip(x + d, 0.0, 1.0) - x if cfg.clip else d
        else:
            d = fgsm(model, x, labels, cfg.epsilon, clip=cfg.clip).delta
        iters = 1
    elif name == "ifgsm":
        d = ifgsm(model, x, labels, cfg).delta
        iters = cfg.iterations
    else:
        d = pgd(model, x, labels, cfg).delta
        iters = cfg.iterations * cfg.restarts
    return d, iters


def _run_chunk(name, model, x, labels, mode, dense, sparse):
    t0 = time.perf_counter()
    if name == "sparse":
        seed = ifgsm(model, x, labels, replace(dense, mode=mode)).delta
        results = run_sparse_attack_batch(model, x, seed, labels, replace(sparse, mode=mode))
        delta = np.stack([r.delta_star for r in results])
        iters = np.full(len(x), sparse.iterations)
    else:
        seed = None
        delta, it = _dense_chunk(name, model, x, labels, mode, dense)
        iters = np.full(len(x), it)
    elapsed = time.perf_counter() - t0
    probs = _probs(model, x + delta)
    achieved = probs.argmax(axis=1)
    success = (achieved == labels) if mode == TARGETED else (achieved != labels)
    nz = delta != 0
    return Outcome(
        delta=delta,
        success=success,
        achieved=achieved,
        element_l0=nz.reshape(len(x), -1).sum(axis=1),
        pixel_l0=nz.any(axis=1).reshape(len(x), -1).sum(axis=1),
        confidence=probs[np.arange(len(x)), achieved],
        iterations=iters,
        wall_time=np.full(len(x), elapsed / len(x)),
        seed_delta=seed,
    )


def run_attack(
    name: str,
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    mode: str = NON_TARGETED,
    dense: DenseAttackConfig | None = None,
    sparse: SparseAttackConfig | None = None,
    chunk: int = 64,
    jobs: int = 1,
) -> Outcome:
    """Attack every image; ``labels`` are true labels or, if targeted, targets."""
    if name not in ATTACKS:
        raise ValueError(f"unknown attack {name!r}; choose from {ATTACKS}")
    dense = dense or DenseAttackConfig()
    sparse = sparse or SparseAttackConfig(epsilon=dense.epsilon)
    labels = np.asarray(labels, dtype=np.int64)
    bounds = [(s, min(s + chunk, len(images))) for s in range(0, len(images), chunk)]
    work = lambda b: _run_chunk(name, model, images[b[0] : b[1]], labels[b[0] : b[1]], mode, dense, sparse)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    fields = Outcome.__dataclass_fields__
    merged = {}
    for f in fields:
        vals = [getattr(p, f) for p in parts]
        merged[f] = None if any(v is None for v in vals) else np.concatenate(vals) if vals else np.zeros(0)
    return Outcome(**merged)


def to_report(name: str, mode: str, image_ids, true_labels, targets, outcome: Outcome, meta=None) -> AttackReport:
    report = AttackReport(meta=dict(meta or {}))
    for i, img_id in enumerate(image_ids):
        report.add(
            image_id=int(img_id),
            attack=name,
            mode=mode,
            true_label=int(true_labels[i]),
            target_label=None if targets is None else int(targets[i]),
            success=bool(outcome.success[i]),
            achieved_label=int(outcome.achieved[i]),
            element_l0=int(outcome.element_l0[i]),
            pixel_l0=int(outcome.pixel_l0[i]),
            confidence=float(outcome.confidence[i]),
            iterations=int(outcome.iterations[i]),
            wall_time_ms=float(outcome.wall_time[i] * 1000.0),
        )
    return report

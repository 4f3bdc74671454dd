"""Property suites behind ``sparse-sieve selftest``.

Each suite returns a SuiteResult. They use synthetic data only, and each one
runs in seconds to tens of seconds on one core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dense import NON_TARGETED, TARGETED, DenseAttackConfig, fgsm, ifgsm, pgd
from .models import ModelSpec, build_model, forward_logits, least_likely_class
from .sparse import (
    bounded_perturbation,
    dirac_convergence_probe,
    gate_ratio_saturates,
    heaviside,
    omega_bound,
    shifted_relu,
    surrogate_mass,
)

WIDTHS = (1.0, 0.5, 0.1, 0.05)


@dataclass
class SuiteResult:
    name: str
    cases: int
    failures: int
    seconds: float
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.cases - self.failures}/{self.cases} ok ({self.seconds:.2f}s)"


def fuzz_tuples(n: int, dim: int, rng: np.random.Generator, eps_scale: float = 1.0):
    """Random (x, delta, w, tau, eps) tuples, one per row, with boundary values mixed in.

    Pixels hit exactly 0 or 1 and delta hits exactly +-eps or 0 with some
    probability; w straddles the threshold tau/eps.
    """
    eps = rng.uniform(1e-3, 0.5, size=(n, 1)) * eps_scale
    tau = rng.uniform(0.0, 1.0, size=(n, 1))
    x = rng.uniform(0.0, 1.0, size=(n, dim))
    edge = rng.random((n, dim))
    x[edge < 0.1] = 0.0
    x[edge > 0.9] = 1.0
    sign = rng.choice([-1.0, 1.0], size=(n, dim))
    delta = rng.uniform(-1.0, 1.0, size=(n, dim)) * eps
    pick = rng.random((n, dim))
    delta = np.where(pick < 0.15, sign * eps, delta)
    delta = np.where(pick > 0.9, 0.0, delta)
    thr = tau / eps
    w = thr + rng.normal(0.0, 1.0, size=(n, dim)) * np.maximum(thr, 1.0)
    w = np.where(rng.random((n, dim)) < 0.05, 0.0, w)
    return x, delta, w, tau, eps


def box_validity_suite(tuples: int = 100_000, dim: int = 16, seed: int = 0, inject_eps_zero: bool = False) -> SuiteResult:
    """x + omega * H(relu(w - tau/eps)) * delta stays in [0, 1].

    The product used by the attack is checked for zero violations; the literal
    omega * mask * delta form is checked to 1e-12.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    x, delta, w, tau, eps = fuzz_tuples(tuples, dim, rng)
    notes = []
    if inject_eps_zero:
        eps = np.zeros_like(eps)
        notes.append("negative control: epsilon forced to 0")
    bad = np.zeros(tuples, dtype=bool)
    try:
        mask = heaviside(shifted_relu(w, tau, eps))
        exact = x + bounded_perturbation(x, delta, mask, eps)
        literal = x + omega_bound(x, eps) * mask * delta
    except ZeroDivisionError as exc:
        notes.append(f"error: {exc}")
        return SuiteResult("box validity", tuples, tuples, time.perf_counter() - t0, notes)
    if gate_ratio_saturates(mask, delta, eps):
        notes.append("rounding guard engaged on a fuzzed tuple")
        bad[:] = True
    for arr, tol in ((exact, 0.0), (literal, 1e-12)):
        viol = ~np.isfinite(arr) | (arr < -tol) | (arr > 1 + tol)
        bad |= viol.any(axis=1)
    if bad.any():
        notes.append(f"first violating tuple index {int(np.argmax(bad))}")
    return SuiteResult("box validity", tuples, int(bad.sum()), time.perf_counter() - t0, notes)


def l0_chain_suite(tuples: int = 100_000, dim: int = 16, seed: int = 1) -> SuiteResult:
    """Integer check of |relu(w - tau/eps) * d|_0 <= |relu(w) * d|_0 <= |w * d|_0."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    x, delta, w, tau, eps = fuzz_tuples(tuples, dim, rng)
    shifted = np.count_nonzero(np.maximum(w - tau / eps, 0.0) * delta, axis=1)
    plain = np.count_nonzero(np.maximum(w, 0.0) * delta, axis=1)
    raw = np.count_nonzero(w * delta, axis=1)
    bad = (shifted > plain) | (plain > raw)
    return SuiteResult("l0 chain", tuples, int(bad.sum()), time.perf_counter() - t0)


def quadrature_suite(widths=WIDTHS) -> SuiteResult:
    """Unit mass of q_a and the shrinking error of integral(q_a * exp(-x^2)) against 1."""
    t0 = time.perf_counter()
    masses = [surrogate_mass(a) for a in widths]
    errors = dirac_convergence_probe(widths, lambda s: np.exp(-(s**2)))
    notes = [f"a={a:g}: mass-1={m - 1:+.3e} probe error={e:.6e}" for a, m, e in zip(widths, masses, errors)]
    failures = sum(abs(m - 1) > 1e-6 for m in masses)
    failures += sum(not (b < a) for a, b in zip(errors[:-1], errors[1:]))
    return SuiteResult("quadrature", len(widths) * 2 - 1, failures, time.perf_counter() - t0, notes)


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-7)
    return float(np.max(np.abs(analytic - numeric) / scale))


def finite_difference_check(fn, value: np.ndarray, analytic: np.ndarray, rng, samples: int = 12, h: float = 1e-6) -> float:
    """Worst relative error over ``samples`` random coordinates of ``value``."""
    flat = value.reshape(-1)
    idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
    numeric = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        numeric[k] = (up - down) / (2 * h)
    return _rel_error(analytic.reshape(-1)[idx], numeric)


def _loss_and_grads(model, params, x, y):
    with T.Tape() as tape:
        p = {k: T.Tensor._wrap(v) for k, v in params.items()}
        xt = T.Tensor._wrap(x)
        loss = T.softmax_cross_entropy(forward_logits(model, xt, params=p), y, reduction="mean")
    grads = tape.backward(loss)
    return loss.item(), {k: grads[t] for k, t in p.items()}, grads[xt]


def gradient_suite(trials: int = 6, seed: int = 2, tol: float = 1e-4) -> SuiteResult:
    """Autodiff against central differences for parameter and input gradients."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    specs = [ModelSpec.mlp((12,), 4, (1, 6, 6)), ModelSpec.tiny_cnn((3, 4), 4, (1, 8, 8))]
    cases = failures = 0
    worst = 0.0
    for trial in range(trials):
        for spec in specs:
            model = build_model(spec, seed=trial)
            params = {k: v.copy() for k, v in model.params.items()}
            x = rng.uniform(0, 1, size=(3, *spec.input_shape))
            y = rng.integers(0, spec.num_classes, size=3)
            _, pg, xg = _loss_and_grads(model, params, x, y)
            loss = lambda: _loss_and_grads(model, params, x, y)[0]
            for name, val in [*params.items(), ("input", x)]:
                analytic = xg if name == "input" else pg[name]
                err = finite_difference_check(loss, val, analytic, rng)
                worst = max(worst, err)
                cases += 1
                failures += err >= tol
    return SuiteResult("gradients", cases, failures, time.perf_counter() - t0, [f"max relative error {worst:.3e}"])


def seed_attack_suite(cases: int = 1000, seed: int = 3) -> SuiteResult:
    """One-step I-FGSM equals FGSM bit for bit; all dense attacks respect the eps ball."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    spec = ModelSpec.mlp((16,), 5, (1, 5, 5))
    models = [build_model(spec, s) for s in range(4)]
    failures = 0
    batch = 50
    done = 0
    while done < cases:
        n = min(batch, cases - done)
        model = models[(done // batch) % len(models)]
        x = rng.uniform(0, 1, size=(n, *spec.input_shape))
        x[rng.random(x.shape) < 0.2] = 0.0
        y = rng.integers(0, spec.num_classes, size=n)
        eps = float(rng.uniform(1e-3, 0.3))
        one = DenseAttackConfig(epsilon=eps, step=eps, iterations=1)
        same = np.array_equal(ifgsm(model, x, y, one).delta, fgsm(model, x, y, eps).delta)
        step = float(rng.uniform(0.1, 1.0)) * eps
        deltas = [fgsm(model, x, y, eps).delta]
        for mode in (NON_TARGETED, TARGETED):
            cfg = DenseAttackConfig(epsilon=eps, step=step, iterations=5, mode=mode)
            labels = least_likely_class(model, x) if mode == TARGETED else y
            deltas.append(ifgsm(model, x, labels, cfg).delta)
        deltas.append(pgd(model, x, y, DenseAttackConfig(eps, step, 5, random_init=True, restarts=2, seed=done)).delta)
        over = np.zeros(n, dtype=bool)
        for d in deltas:
            over |= np.abs(d).reshape(n, -1).max(axis=1) > eps + 1e-12
        failures += int(over.sum()) + (0 if same else n)
        done += n
    return SuiteResult("seed attacks", cases, failures, time.perf_counter() - t0)


def run_all(tuples: int = 100_000, seed: int = 0, inject_eps_zero: bool = False, out=print) -> bool:
    suites = [
        box_validity_suite(tuples, seed=seed, inject_eps_zero=inject_eps_zero),
        l0_chain_suite(tuples, seed=seed + 1),
        quadrature_suite(),
        gradient_suite(seed=seed + 2),
        seed_attack_suite(seed=seed + 3),
    ]
    for s in suites:
        out(s.line())
        for note in s.notes:
            out(f"    {note}")
    ok = all(s.passed for s in suites)
    out("selftest: all suites passed" if ok else "selftest: FAILED")
    return ok

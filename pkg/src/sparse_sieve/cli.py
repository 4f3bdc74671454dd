"""Command-line driver: train, robust-train, attack, transfer, sweep, selftest.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
Settings resolve as command-line flags > ``--config`` JSON file > defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import DATA_ENV, find_split, load_idx, resolve_data_root
from .dense import MODES, NON_TARGETED, TARGETED, DenseAttackConfig, adversarial_train
from .evaluation import (
    AdversarialSet,
    compute_aggregates,
    export_overlay,
    transfer_matrix,
    write_report,
)
from .harness import ATTACKS, clean_correct, run_attack, targets_for, to_report
from .models import ModelSpec, build_model, load_checkpoint, save_checkpoint, train
from .sparse import SparseAttackConfig

log = logging.getLogger("sparse_sieve")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

FETCH_HINT = (
    "Download the four MNIST IDX files (train/t10k images and labels, .gz is fine) "
    f"into one directory and pass it with --data or ${DATA_ENV}."
)


class ConfigError(Exception):
    pass


# Attack defaults: I-FGSM seed eps=4/255, alpha=1/255, 10 steps; SGD momentum
# 0.9, lr 1e-2; a=0.1, tau=0.30, lambda=1e-2, 100 iterations (MNIST).
DEFAULTS = {
    "epsilon": 4 / 255,
    "step": 1 / 255,
    "iterations_dense": 10,
    "restarts": 1,
    "random_init": False,
    "clip": True,
    "tau": 0.30,
    "a": 0.1,
    "lam": 1e-2,
    "iterations": 100,
    "lr": 1e-2,
    "momentum": 0.9,
    "check_every": 1,
    "projection": "functional",
    "mode": NON_TARGETED,
    "target": "least-likely",
    "n": 256,
    "seed": 0,
    "jobs": 1,
    "chunk": 64,
    "format": None,
    # training
    "arch": "tiny-cnn",
    "epochs": 5,
    "batch_size": 128,
    "train_lr": 0.05,
    "train_limit": None,
    # robust training
    "method": "pgd",
    "at_epsilon": 0.3,
    "at_step": 0.01,
    "at_iterations": 10,
    "at_ramp": 0.0,
}


@dataclass
class RunConfig:
    command: str
    data: Path | None = None
    models: list[Path] = field(default_factory=list)
    out: Path | None = None
    seed: int = 0
    report_format: str | None = None
    dense: DenseAttackConfig | None = None
    sparse: SparseAttackConfig | None = None
    options: dict = field(default_factory=dict)


def _merge(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(loaded) - set(DEFAULTS) - {"data", "model", "models", "out"}
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        settings.update(loaded)
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "command", "config"):
            settings[k] = v
    return settings


def _dense_config(s: dict) -> DenseAttackConfig:
    try:
        return DenseAttackConfig(
            epsilon=float(s["epsilon"]),
            step=float(s["step"]),
            iterations=int(s["iterations_dense"]),
            mode=s["mode"],
            random_init=bool(s["random_init"]),
            clip=bool(s["clip"]),
            restarts=int(s["restarts"]),
            seed=int(s["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _sparse_config(s: dict) -> SparseAttackConfig:
    try:
        return SparseAttackConfig(
            epsilon=float(s["epsilon"]),
            tau=float(s["tau"]),
            a=float(s["a"]),
            lam=float(s["lam"]),
            iterations=int(s["iterations"]),
            lr=float(s["lr"]),
            momentum=float(s["momentum"]),
            mode=s["mode"],
            check_every=int(s["check_every"]),
            projection=s["projection"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _data_dir(s: dict) -> Path:
    try:
        root = resolve_data_root(s.get("data"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}. {FETCH_HINT}") from None
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}. {FETCH_HINT}")
    try:
        find_split(root, "test")
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}. {FETCH_HINT}") from None
    return root


def _out_path(s: dict, key: str = "out") -> Path:
    if not s.get(key):
        raise ConfigError(f"--{key} is required")
    out = Path(s[key])
    parent = out.parent if out.parent != Path("") else Path(".")
    if not parent.is_dir():
        raise ConfigError(f"output directory does not exist: {parent}")
    return out


def _checkpoint(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return p


def _positive_int(name, v):
    if int(v) < 1:
        raise ConfigError(f"{name} must be >= 1")
    return int(v)


def _load(root: Path, split: str, limit=None):
    ds = load_idx(*find_split(root, split))
    return ds.head(int(limit)) if limit else ds


# --- commands ---------------------------------------------------------------


def _write_curve(path: Path, history) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["epoch", "train_loss", "train_accuracy", "test_accuracy"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.train_accuracy), repr(r.test_accuracy)])
    path.write_text(buf.getvalue(), newline="")


def _spec_for(s: dict, num_classes: int, shape) -> ModelSpec:
    if s["arch"] == "mlp":
        return ModelSpec.mlp((128,), num_classes, shape)
    if s["arch"] == "tiny-cnn":
        return ModelSpec.tiny_cnn((8, 16), num_classes, shape)
    raise ConfigError(f"unknown --arch {s['arch']!r}")


def cmd_train(args) -> int:
    s = _merge(args)
    root = _data_dir(s)
    out = _out_path(s)
    _positive_int("--batch-size", s["batch_size"])
    epochs = int(s["epochs"])
    if epochs < 0:
        raise ConfigError("--epochs must be >= 0")
    try:
        find_split(root, "train")
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}. {FETCH_HINT}") from None
    trn = _load(root, "train", s["train_limit"])
    tst = _load(root, "test", s.get("test_limit"))
    spec = _spec_for(s, trn.num_classes, trn.image_shape)
    robust = args.command == "robust-train"
    if robust:
        eps = float(s["at_epsilon"])
        if not 0.0 <= float(s["at_ramp"]) <= 1.0:
            raise ConfigError("--ramp must be in [0, 1]")
        attack = None
        if eps > 0:
            try:
                attack = DenseAttackConfig(eps, float(s["at_step"]), int(s["at_iterations"]))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        model, history = adversarial_train(
            spec, trn, attack, epochs, int(s["seed"]), s["method"], int(s["batch_size"]),
            float(s["train_lr"]), test=tst, log=lambda r: log.info("%s", r), epsilon_ramp=float(s["at_ramp"]),
        )
    else:
        model = build_model(spec, int(s["seed"]))
        model, history = train(
            model, trn, epochs, int(s["batch_size"]), int(s["seed"]), float(s["train_lr"]),
            test=tst, log=lambda r: log.info("%s", r),
        )
    save_checkpoint(model, out)
    _write_curve(out.with_suffix(".accuracy.csv"), history)
    acc = model.metadata.get("test_accuracy")
    print(f"wrote {out} (test accuracy {acc if acc is None else f'{acc:.4f}'})")
    return EXIT_OK


def _attack_set(s: dict, model, root: Path, name: str, mode: str, n: int):
    dense = _dense_config({**s, "mode": mode})
    sparse = _sparse_config({**s, "mode": mode})
    tst = _load(root, "test", s.get("test_limit"))
    if tst.num_classes != model.spec.num_classes:
        raise ConfigError("dataset and checkpoint class counts disagree")
    idx = clean_correct(model, tst, n)
    x, y = tst.images[idx], tst.labels[idx]
    targets = targets_for(model, x, s["target"]) if mode == TARGETED else None
    outcome = run_attack(
        name, model, x, targets if mode == TARGETED else y, mode, dense, sparse,
        chunk=_positive_int("--chunk", s["chunk"]), jobs=_positive_int("--jobs", s["jobs"]),
    )
    return idx, x, y, targets, outcome, dense, sparse


def _config_meta(name, mode, dense, sparse, s):
    meta = {"attack": name, "mode": mode, "dense": asdict(dense), "seed": int(s["seed"])}
    if name == "sparse":
        meta["sparse"] = asdict(sparse)
    if mode == TARGETED:
        meta["target_rule"] = s["target"]
    return meta


def cmd_attack(args) -> int:
    s = _merge(args)
    name = s["attack"]
    mode = s["mode"]
    if mode not in MODES:
        raise ConfigError(f"--mode must be one of {MODES}")
    ckpt = _checkpoint(s.get("model"))
    root = _data_dir(s)
    out = _out_path(s)
    fmt = s["format"] or (out.suffix.lstrip(".") if out.suffix in (".csv", ".json") else "json")
    if fmt not in ("csv", "json"):
        raise ConfigError("--format must be csv or json")
    n = _positive_int("-n", s["n"])
    _dense_config({**s, "mode": mode})
    _sparse_config({**s, "mode": mode})
    overlay = Path(s["overlay"]) if s.get("overlay") else None
    if overlay is not None and not overlay.is_dir():
        raise ConfigError(f"overlay directory does not exist: {overlay}")

    model = load_checkpoint(ckpt)
    idx, x, y, targets, outcome, dense, sparse = _attack_set(s, model, root, name, mode, n)
    report = to_report(name, mode, idx, y, targets, outcome, _config_meta(name, mode, dense, sparse, s))
    write_report(report, out, fmt)
    if overlay is not None:
        for i, img_id in enumerate(idx):
            export_overlay(x[i], outcome.delta[i], overlay / f"img{int(img_id):05d}")
    agg = compute_aggregates(report.rows)
    print(_summary_line(name, mode, agg))
    return EXIT_OK


def _summary_line(name, mode, agg) -> str:
    med = agg["median_element_l0"]
    return (
        f"{name} {mode}: fooling rate {agg['fooling_rate']:.4f} "
        f"({agg['successes']}/{agg['attempts']}), median element l0 "
        f"{'n/a' if med is None else med}"
    )


def cmd_transfer(args) -> int:
    s = _merge(args)
    paths = s.get("models") or []
    if len(paths) < 2:
        raise ConfigError("transfer needs at least two --models checkpoints")
    paths = [_checkpoint(p) for p in paths]
    root = _data_dir(s)
    out = _out_path(s)
    n = _positive_int("-n", s["n"])
    models = [load_checkpoint(p) for p in paths]
    classes = {m.spec.num_classes for m in models}
    if len(classes) != 1:
        raise ConfigError(f"label-space mismatch between checkpoints: {sorted(classes)}")
    mode = s["mode"]
    name = s["attack"]
    sets = []
    for m in models:
        idx, x, y, targets, outcome, _, _ = _attack_set(s, m, root, name, mode, n)
        sets.append(AdversarialSet(x, x + outcome.delta, y, mode, targets, m.spec.num_classes))
    matrix = transfer_matrix(models, sets, [p.stem for p in paths])
    out.write_text(matrix.to_csv(), newline="")
    for i, row in enumerate(matrix.rates):
        cells = " ".join(f"{v:.3f}{'*' if i == j else ''}" for j, v in enumerate(row))
        print(f"{matrix.names[i]}: {cells}")
    print("* white-box (source = target)")
    return EXIT_OK


def parse_grid(text: str) -> list[float]:
    text = text.strip()
    if not text:
        raise ConfigError("empty grid")
    if ":" in text:
        try:
            lo, hi, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise ConfigError(f"grid range must be lo:hi:step, got {text!r}") from None
        if step <= 0 or hi < lo:
            raise ConfigError("grid range needs step > 0 and hi >= lo")
        count = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(count)]
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"grid values must be numbers, got {text!r}") from None
    if not values:
        raise ConfigError("empty grid")
    return values


def running_median(values, window: int = 3) -> list[float]:
    half = window // 2
    return [statistics.median(values[max(0, i - half) : i + half + 1]) for i in range(len(values))]


def monotone(values, direction: str) -> bool:
    pairs = list(zip(values[:-1], values[1:]))
    if direction == "non-increasing":
        return all(b <= a for a, b in pairs)
    return all(b >= a for a, b in pairs)


SWEEP_PARAMS = {"a": "a", "lambda": "lam", "tau": "tau"}
SWEEP_FIELDS = ("param", "value", "attempts", "fooling_rate", "median_element_l0", "mean_element_l0", "mean_time_ms")


def sweep_trends(param: str, rows: list[dict]) -> dict:
    """Direction checks along the grid order, after a 3-point running median."""
    if len(rows) < 2:
        return {}
    l0 = running_median([r["median_element_l0"] if r["median_element_l0"] is not None else float("inf") for r in rows])
    fr = running_median([r["fooling_rate"] for r in rows])
    tm = running_median([r["mean_time_ms"] for r in rows])
    trends = {
        "median_element_l0 non-increasing": monotone(l0, "non-increasing"),
        "fooling_rate non-increasing": monotone(fr, "non-increasing"),
        "mean_time_ms non-decreasing": monotone(tm, "non-decreasing"),
    }
    return trends


def run_sweep(model, x, y, mode, param, grid, dense, sparse, jobs=1, chunk=64, targets=None):
    if not grid:
        raise ConfigError("empty grid")
    from dataclasses import replace

    from .dense import ifgsm
    from .sparse import run_sparse_attack_batch

    attr = SWEEP_PARAMS[param]
    labels = targets if mode == TARGETED else y
    seed = ifgsm(model, x, labels, dense).delta
    rows = []
    for value in grid:
        try:
            cfg = replace(sparse, **{attr: float(value)})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        results = []
        times = []
        for s in range(0, len(x), chunk):
            part = run_sparse_attack_batch(model, x[s : s + chunk], seed[s : s + chunk], labels[s : s + chunk], cfg)
            results.extend(part)
        ok = [r for r in results if r.success]
        l0s = [r.l0 for r in ok]
        times = [r.wall_time * 1000 for r in results]
        rows.append(
            {
                "param": param,
                "value": float(value),
                "attempts": len(results),
                "fooling_rate": len(ok) / len(results) if results else 0.0,
                "median_element_l0": float(statistics.median(l0s)) if l0s else None,
                "mean_element_l0": float(statistics.fmean(l0s)) if l0s else None,
                "mean_time_ms": statistics.fmean(times) if times else 0.0,
            }
        )
    return rows


def cmd_sweep(args) -> int:
    s = _merge(args)
    param = s["param"]
    grid = parse_grid(s["grid"])
    ckpt = _checkpoint(s.get("model"))
    root = _data_dir(s)
    out = _out_path(s)
    n = _positive_int("-n", s["n"])
    mode = s["mode"]
    dense = _dense_config({**s, "mode": mode})
    sparse = _sparse_config({**s, "mode": mode})
    model = load_checkpoint(ckpt)
    tst = _load(root, "test", s.get("test_limit"))
    idx = clean_correct(model, tst, n)
    x, y = tst.images[idx], tst.labels[idx]
    targets = targets_for(model, x, s["target"]) if mode == TARGETED else None
    rows = run_sweep(model, x, y, mode, param, grid, dense, sparse, chunk=_positive_int("--chunk", s["chunk"]), targets=targets)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(SWEEP_FIELDS)
    for r in rows:
        w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_FIELDS])
    out.write_text(buf.getvalue(), newline="")
    print(f"wrote {len(rows)} rows to {out}")
    trends = sweep_trends(param, rows)
    if not trends:
        print("single grid point: no trend computed")
    for k, v in trends.items():
        print(f"trend {k}: {v}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    ok = run_all(tuples=int(args.tuples), seed=int(args.seed or 0), inject_eps_zero=args.inject_eps_zero)
    return EXIT_OK if ok else EXIT_RUNTIME


# --- parser -----------------------------------------------------------------


def _add_common(p, data=True):
    p.add_argument("--config", help="JSON file with settings (flags override it)")
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--data", help=f"MNIST IDX directory (default ${DATA_ENV})")
        p.add_argument("--test-limit", type=int, help="use only the first N test images")


def _add_attack_flags(p):
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--target", choices=["least-likely"])
    p.add_argument("-n", type=int, help="number of clean-correct test images to attack")
    p.add_argument("--epsilon", type=float, help="l_inf budget of the dense (seed) attack")
    p.add_argument("--step", type=float, help="dense attack step size alpha")
    p.add_argument("--dense-iterations", dest="iterations_dense", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--random-init", action="store_true", default=None)
    p.add_argument("--no-clip", dest="clip", action="store_false", default=None)
    p.add_argument("--tau", type=float)
    p.add_argument("--a", type=float, help="surrogate width")
    p.add_argument("--lambda", dest="lam", type=float, help="l0 penalty weight")
    p.add_argument("--iterations", type=int, help="sparse attack iterations T")
    p.add_argument("--lr", type=float, help="sparse attack learning rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--check-every", type=int)
    p.add_argument("--projection", choices=["functional", "destructive"])
    p.add_argument("--jobs", type=int)
    p.add_argument("--chunk", type=int, help="images per attack batch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-sieve", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "robust-train"):
        p = sub.add_parser(name, help="train a classifier" + (" adversarially" if name == "robust-train" else ""))
        _add_common(p)
        p.add_argument("--arch", choices=["mlp", "tiny-cnn"])
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", dest="train_lr", type=float)
        p.add_argument("--train-limit", type=int, help="use only the first N training images")
        p.add_argument("--out", help="checkpoint path (.ckpt)")
        if name == "robust-train":
            p.add_argument("--method", choices=["pgd", "fast"])
            p.add_argument("--epsilon", dest="at_epsilon", type=float)
            p.add_argument("--step", dest="at_step", type=float)
            p.add_argument("--iterations", dest="at_iterations", type=int)
            p.add_argument("--ramp", dest="at_ramp", type=float, help="fraction of training over which epsilon warms up from 0")
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a checkpoint and write a report")
    p.add_argument("attack", choices=ATTACKS)
    _add_common(p)
    p.add_argument("--model", help="checkpoint to attack")
    p.add_argument("--out", help="report path (.json or .csv)")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--overlay", help="directory for netpbm clean/adv/mask images")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("transfer", help="fooling-rate matrix across checkpoints")
    _add_common(p)
    p.add_argument("--models", nargs="+", help="two or more checkpoints")
    p.add_argument("--attack", choices=ATTACKS, default=None)
    p.add_argument("--out", help="matrix CSV path")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_transfer, attack="sparse")

    p = sub.add_parser("sweep", help="sweep one sparse-attack hyperparameter")
    _add_common(p)
    p.add_argument("--param", choices=sorted(SWEEP_PARAMS), required=True)
    p.add_argument("--grid", required=True, help="comma list (1,0.5,0.1) or range lo:hi:step")
    p.add_argument("--model", help="checkpoint to attack")
    p.add_argument("--out", help="CSV path")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="run the built-in property suites")
    p.add_argument("--tuples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-eps-zero", action="store_true", help="negative control: corrupt the box-bound suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Attack metrics, CSV/JSON reports, and netpbm perturbation overlays."""

from __future__ import annotations

import csv
import io
import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dense import NON_TARGETED, TARGETED
from .models import Model, predict

REPORT_SCHEMA_VERSION = 1

ROW_FIELDS = (
    "image_id",
    "attack",
    "mode",
    "true_label",
    "target_label",
    "success",
    "achieved_label",
    "element_l0",
    "pixel_l0",
    "confidence",
    "iterations",
    "wall_time_ms",
)
TIMING_FIELDS = ("wall_time_ms", "mean_time_ms")
AGGREGATE_FIELDS = (
    "attempts",
    "successes",
    "fooling_rate",
    "median_element_l0",
    "mean_element_l0",
    "median_pixel_l0",
    "mean_pixel_l0",
    "mean_time_ms",
)


class NoSuccessError(ValueError):
    pass


def fooling_rate(model: Model, clean, adversarial, labels, mode: str = NON_TARGETED, targets=None) -> float:
    """Share of clean-correct images whose adversarial version fools ``model``.

    Non-targeted: prediction differs from the true label. Targeted: prediction
    equals the target. Images the model already gets wrong are not attempts.
    """
    clean = np.asarray(clean)
    if len(clean) == 0:
        raise ValueError("empty adversarial set")
    labels = np.asarray(labels)
    correct = predict(model, clean) == labels
    attempts = int(correct.sum())
    if attempts == 0:
        return 0.0
    pred = predict(model, adversarial)
    if mode == TARGETED:
        if targets is None:
            raise ValueError("targeted fooling rate needs target labels")
        fooled = pred == np.asarray(targets)
    else:
        fooled = pred != labels
    return float((fooled & correct).sum() / attempts)


def sparsity_stats(results) -> dict:
    """Median/mean/max element and pixel l0 over the successful results."""
    rows = list(results)
    if not rows:
        raise ValueError("no results")
    ok = [r for r in rows if _get(r, "success")]
    if not ok:
        raise NoSuccessError("no successful attacks to summarize")
    out = {}
    for key, attr in (("element", "l0"), ("pixel", "pixel_l0")):
        vals = [int(_get(r, attr)) for r in ok]
        out[f"median_{key}_l0"] = float(statistics.median(vals))
        out[f"mean_{key}_l0"] = float(statistics.fmean(vals))
        out[f"max_{key}_l0"] = int(max(vals))
    out["successes"] = len(ok)
    return out


def _get(r, attr):
    if isinstance(r, dict):
        return r[{"l0": "element_l0"}.get(attr, attr)]
    return getattr(r, attr)


@dataclass
class AdversarialSet:
    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    mode: str = NON_TARGETED
    targets: np.ndarray | None = None
    num_classes: int = 10


@dataclass
class TransferMatrix:
    names: list[str]
    rates: np.ndarray  # rates[i, j]: examples crafted on model i, evaluated on model j

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        # last column names the target that shares the source model (white-box cell)
        w.writerow(["source", *self.names, "white_box"])
        for i, name in enumerate(self.names):
            w.writerow([name, *(_fmt(v) for v in self.rates[i]), name])
        return buf.getvalue()


def transfer_matrix(models: Sequence[Model], adversarial_sets: Sequence[AdversarialSet], names=None) -> TransferMatrix:
    if len(models) != len(adversarial_sets):
        raise ValueError("one adversarial set per source model is required")
    classes = {m.spec.num_classes for m in models} | {s.num_classes for s in adversarial_sets}
    if len(classes) != 1:
        raise ValueError(f"label-space mismatch across models: {sorted(classes)}")
    k = len(models)
    rates = np.zeros((k, k))
    for i, s in enumerate(adversarial_sets):
        for j, m in enumerate(models):
            rates[i, j] = fooling_rate(m, s.clean, s.adversarial, s.labels, s.mode, s.targets)
    return TransferMatrix(list(names or [f"model{i}" for i in range(k)]), rates)


def machine_descriptor() -> str:
    return f"{platform.system()} {platform.machine()} {platform.processor() or 'cpu'} python{platform.python_version()} numpy{np.__version__}"


def timing_bench(attack: Callable, model: Model, images: Sequence, warmup: int = 1) -> dict:
    """Per-image wall time of ``attack(model, image)`` on a monotonic clock."""
    images = list(images)
    for img in images[:warmup]:
        attack(model, img)
    times = []
    for img in images:
        t0 = time.perf_counter()
        attack(model, img)
        times.append(time.perf_counter() - t0)
    return {
        "mean_s": statistics.fmean(times) if times else 0.0,
        "median_s": statistics.median(times) if times else 0.0,
        "times_s": times,
        "machine": machine_descriptor(),
    }


@dataclass
class AttackReport:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        missing = set(ROW_FIELDS) - set(row)
        if missing:
            raise ValueError(f"row missing fields {sorted(missing)}")
        self.rows.append({k: row[k] for k in ROW_FIELDS})

    def aggregates(self) -> dict:
        return compute_aggregates(self.rows)


def compute_aggregates(rows: Sequence[dict]) -> dict:
    attempts = len(rows)
    succ = [r for r in rows if _truthy(r["success"])]
    agg = {"attempts": attempts, "successes": len(succ)}
    agg["fooling_rate"] = len(succ) / attempts if attempts else 0.0
    for key in ("element_l0", "pixel_l0"):
        vals = [int(r[key]) for r in succ]
        agg[f"median_{key}"] = float(statistics.median(vals)) if vals else None
        agg[f"mean_{key}"] = float(statistics.fmean(vals)) if vals else None
    times = [float(r["wall_time_ms"]) for r in rows]
    agg["mean_time_ms"] = statistics.fmean(times) if times else None
    return {k: agg[k] for k in AGGREGATE_FIELDS}


def _truthy(v) -> bool:
    return v in (True, 1, "1", "true", "True")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_report(report: AttackReport, path, fmt: str | None = None) -> Path:
    """Write rows (and, for JSON, aggregates) in fixed field order.

    CSV holds only the per-image rows (RFC 4180, CRLF line ends); aggregates
    go to the JSON form and are re-derived from the rows on write.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt not in ("csv", "json"):
        raise ValueError(f"report format must be csv or json, got {fmt!r}")
    agg = compute_aggregates(report.rows)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(ROW_FIELDS)
        for r in report.rows:
            w.writerow([_fmt(r[k]) for k in ROW_FIELDS])
        path.write_text(buf.getvalue(), newline="")
    else:
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "meta": report.meta,
            "rows": [{k: _json_value(r[k]) for k in ROW_FIELDS} for r in report.rows],
            "aggregate": agg,
        }
        path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _json_value(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


_INT_FIELDS = {"image_id", "true_label", "achieved_label", "element_l0", "pixel_l0", "iterations"}
_FLOAT_FIELDS = {"confidence", "wall_time_ms"}


def read_report(path) -> AttackReport:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        return AttackReport(doc["rows"], doc.get("meta", {}))
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k in ROW_FIELDS:
                v = raw[k]
                if k == "success":
                    row[k] = v == "true"
                elif k == "target_label":
                    row[k] = int(v) if v != "" else None
                elif k in _INT_FIELDS:
                    row[k] = int(v)
                elif k in _FLOAT_FIELDS:
                    row[k] = float(v)
                else:
                    row[k] = v
            rows.append(row)
    return AttackReport(rows)


def report_schema() -> dict:
    return json.loads(resources.files("sparse_sieve").joinpath("report.schema.json").read_text())


def strip_timing(rows: Sequence[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in rows]


# --- netpbm overlays --------------------------------------------------------


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def write_netpbm(path, img: np.ndarray) -> Path:
    """(1, H, W) -> binary PGM (P5); (3, H, W) -> binary PPM (P6)."""
    img = np.asarray(img)
    c, h, w = img.shape
    if c == 1:
        magic, body = b"P5", _to_bytes(img[0]).tobytes()
    elif c == 3:
        magic, body = b"P6", _to_bytes(img).transpose(1, 2, 0).tobytes()
    else:
        raise ValueError(f"netpbm needs 1 or 3 channels, got {c}")
    path = Path(path)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + body)
    return path


def export_overlay(image, delta_star, prefix) -> tuple[Path, Path, Path]:
    """Write ``<prefix>_clean``, ``_adv`` and ``_mask`` as .pgm/.ppm files.

    The mask renders every perturbed element at full intensity on black.
    """
    x = np.asarray(image, dtype=np.float64)
    d = np.asarray(delta_star, dtype=np.float64)
    if x.shape != d.shape:
        raise ValueError(f"image {x.shape} and perturbation {d.shape} differ")
    ext = ".pgm" if x.shape[0] == 1 else ".ppm"
    prefix = str(prefix)
    return (
        write_netpbm(prefix + "_clean" + ext, x),
        write_netpbm(prefix + "_adv" + ext, x + d),
        write_netpbm(prefix + "_mask" + ext, (d != 0).astype(np.float64)),
    )

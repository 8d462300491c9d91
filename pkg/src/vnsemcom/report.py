"""Tidy metric rows and their CSV / JSON emission."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

METRICS = frozenset({
    # codec / channel
    "ssim", "clean_ssim", "quantized_ssim", "train_ssim", "snr_db",
    # camouflage
    "judge_accuracy", "legit_accuracy", "legit_ssim", "legit_camo_rate", "misleading_rate",
    "eaves_original_rate", "eaves_mse_camo", "eaves_mse_original", "epsilon", "loss_legit", "loss_eaves",
    # federation
    "final_ssim", "target_class_ssim", "other_class_ssim", "kept_count", "adversary_count",
    # trust campaign
    "accuracy", "final_accuracy", "p_star", "q_star", "declared_p", "trust_honest_mean", "trust_lazy_mean",
    "lazy_below_theta_round", "lazy_excluded_round", "assessor_count", "audit_count",
    # overhead
    "raw_bytes", "semantic_bytes", "overhead_ratio", "frames",
})
_PATTERNS = (re.compile(r"class_ssim_\d+$"),)

FIELDS = ("experiment", "condition", "round", "metric", "value", "seed")


def is_registered(metric: str) -> bool:
    return metric in METRICS or any(p.match(metric) for p in _PATTERNS)


def fmt_value(value: float) -> str:
    """Six significant digits, trailing zeros kept (0.8185 -> '0.818500')."""
    text = f"{value:#.6g}"
    if "e" not in text and text.endswith("."):
        text = text[:-1]
    return text


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    condition: str
    round: int
    metric: str
    value: float
    seed: int

    def __post_init__(self):
        if not is_registered(self.metric):
            raise ConfigurationError(f"unregistered metric label {self.metric!r}")
        if not math.isfinite(self.value):
            raise ConfigurationError(f"metric {self.metric!r} has non-finite value {self.value}")


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIELDS)
    for r in rows:
        writer.writerow([r.experiment, r.condition, r.round, r.metric, fmt_value(r.value), r.seed])
    return buf.getvalue()


def emit_csv(rows, path) -> None:
    _atomic_write(path, csv_text(rows))


def parse_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != FIELDS:
            raise ConfigurationError(f"{path}: unexpected header {header}")
        return [MetricRow(e, c, int(r), m, float(v), int(s)) for e, c, r, m, v, s in reader]


def emit_json(rows, path) -> None:
    # values carry the same 6-significant-digit rounding as the CSV
    payload = [{"experiment": r.experiment, "condition": r.condition, "round": r.round,
                "metric": r.metric, "value": float(fmt_value(r.value)), "seed": r.seed} for r in rows]
    _atomic_write(path, json.dumps(payload, indent=1) + "\n" if payload else "[]\n")


def parse_json(path) -> list:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [MetricRow(d["experiment"], d["condition"], d["round"], d["metric"], d["value"], d["seed"]) for d in data]


class Collector:
    """Single-writer row buffer flushed at experiment end."""

    def __init__(self, experiment: str, seed: int):
        self.experiment = experiment
        self.seed = seed
        self.rows = []

    def add(self, condition: str, round_no: int, metric: str, value) -> None:
        self.rows.append(MetricRow(self.experiment, condition, int(round_no), metric, float(value), self.seed))

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def value(self, condition: str, metric: str, round_no: int = -1) -> float:
        for r in self.rows:
            if r.condition == condition and r.metric == metric and r.round == round_no:
                return r.value
        raise KeyError((condition, metric, round_no))

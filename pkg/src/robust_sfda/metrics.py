"""Dice, average surface distance, and per-domain report aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .synthdata import CLASS_NAMES, CROSS

EVAL_THRESHOLD = 0.5
CONDITIONS = ("clean", "adversarial")
CSV_COLUMNS = ("domain", "class", "condition", "dice", "asd", "n")


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p.astype(bool), g.astype(bool)


def dice(pred_mask, gt_mask) -> float:
    p, g = _binary_pair(pred_mask, gt_mask)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, CROSS, border_value=0)


def asd(pred_mask, gt_mask, with_flag: bool = False):
    """Symmetric average surface distance in pixels.

    If exactly one mask is empty the result is the image diagonal and the
    flag (returned when ``with_flag=True``) is set. Two empty masks agree
    perfectly and score 0.
    """
    p, g = _binary_pair(pred_mask, gt_mask)
    if not p.any() or not g.any():
        value = 0.0 if not p.any() and not g.any() else math.hypot(*p.shape)
        flagged = p.any() != g.any()
        return (value, flagged) if with_flag else value
    sp, sg = surface(p), surface(g)
    # exact euclidean distance to the nearest surface pixel of the other mask
    to_g = ndimage.distance_transform_edt(~sg)
    to_p = ndimage.distance_transform_edt(~sp)
    value = 0.5 * (to_g[sp].mean() + to_p[sg].mean())
    return (float(value), False) if with_flag else float(value)


def binarize(prob, threshold: float = EVAL_THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class MetricRow:
    domain: str
    klass: str
    condition: str
    dice: float
    asd: float
    n: int
    n_empty: int = 0  # samples scored with the empty-mask ASD sentinel

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice out of range: {self.dice}")
        if self.asd < 0:
            raise ValueError(f"negative asd: {self.asd}")

    def csv_record(self) -> dict:
        return {"domain": self.domain, "class": self.klass, "condition": self.condition,
                "dice": repr(self.dice), "asd": repr(self.asd), "n": self.n}


def score_predictions(
    probs: Sequence[np.ndarray], gts: Sequence[np.ndarray], domain: str, condition: str
) -> list[MetricRow]:
    """Per-class mean Dice/ASD over a list of ``[K, H, W]`` probability maps."""
    if len(probs) != len(gts) or not probs:
        raise ValueError("need equally many (nonzero) predictions and ground truths")
    rows = []
    for k, name in enumerate(CLASS_NAMES):
        d, a, empty = [], [], 0
        for prob, gt in zip(probs, gts):
            pred = binarize(prob[k])
            d.append(dice(pred, gt[k]))
            v, flagged = asd(pred, gt[k], with_flag=True)
            a.append(v)
            empty += int(flagged)
        rows.append(MetricRow(domain, name, condition, float(np.mean(d)), float(np.mean(a)), len(probs), empty))
    return rows


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    compound: list[str]
    open: list[str] = field(default_factory=list)
    # aggregates[condition]["per_domain"][domain] = {"dice", "asd"}; also "C" and "C+O"
    aggregates: dict = field(default_factory=dict)

    def value(self, metric: str, condition: str = "clean", scope: str = "C") -> float:
        return self.aggregates[condition][scope][metric]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r.csv_record())
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "compound": self.compound,
            "open": self.open,
            "aggregates": self.aggregates,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def _mean(xs: Iterable[float]) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)


def aggregate(rows: Sequence[MetricRow], open_domains: Iterable[str] = ()) -> MetricsReport:
    """Class means per domain, then means over compound (C) and all (C+O) domains."""
    if not rows:
        raise ValueError("no metric rows to aggregate")
    open_set = set(open_domains)
    order = {c: i for i, c in enumerate(CONDITIONS)}
    rows = sorted(rows, key=lambda r: (r.domain in open_set, r.domain, order.get(r.condition, 99), r.condition,
                                       CLASS_NAMES.index(r.klass) if r.klass in CLASS_NAMES else 99))
    domains = list(dict.fromkeys(r.domain for r in rows))
    compound = [d for d in domains if d not in open_set]
    opened = [d for d in domains if d in open_set]

    grouped = defaultdict(list)
    for r in rows:
        grouped[(r.condition, r.domain)].append(r)
    aggregates = {}
    for cond in dict.fromkeys(r.condition for r in rows):
        per_domain = {}
        for dom in domains:
            rs = grouped.get((cond, dom))
            if rs:
                per_domain[dom] = {"dice": _mean(r.dice for r in rs), "asd": _mean(r.asd for r in rs)}
        agg = {"per_domain": per_domain}
        for scope, members in (("C", compound), ("C+O", compound + opened)):
            present = [per_domain[d] for d in members if d in per_domain]
            if present:
                agg[scope] = {m: _mean(p[m] for p in present) for m in ("dice", "asd")}
        aggregates[cond] = agg
    return MetricsReport(list(rows), compound, opened, aggregates)

"""Evaluation protocol: confusion analysis, difficulty levels, ambiguous groups,
multi-stream fusion, embedding export and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import softmax

LEVELS = ("Hard", "Medium", "Easy")
HARD_BELOW = 0.70
EASY_ABOVE = 0.90


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K]; row = label, column = prediction

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    @property
    def undefined(self) -> np.ndarray:
        """Classes with no samples, whose accuracy is undefined."""
        return self.counts.sum(axis=1) == 0

    def per_class_accuracy(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        diag = np.diag(self.counts).astype(np.float64)
        return np.divide(diag, rows, out=np.full(len(rows), np.nan), where=rows > 0)


def confusion(preds, labels, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


# ---------------------------------------------------------------------------
# difficulty levels


def difficulty_level(acc: float) -> str:
    if acc < HARD_BELOW:
        return "Hard"
    if acc <= EASY_ABOVE:
        return "Medium"
    return "Easy"


@dataclass
class DifficultySplit:
    levels: List[str]
    level_accuracy: Dict[str, Optional[float]]
    level_counts: Dict[str, int]

    def table(self) -> List[dict]:
        return [{"level": lv, "classes": self.level_counts[lv], "accuracy": self.level_accuracy[lv]}
                for lv in LEVELS]


def difficulty_split(reference, evaluated=None) -> DifficultySplit:
    """Level classes by ``reference`` accuracy; average ``evaluated`` accuracy within each level."""
    ref = np.asarray(reference, dtype=np.float64)
    ev = ref if evaluated is None else np.asarray(evaluated, dtype=np.float64)
    if ev.shape != ref.shape:
        raise ValueError("reference and evaluated accuracies differ in length")
    levels = [difficulty_level(a) for a in ref]
    acc, counts = {}, {}
    for lv in LEVELS:
        members = [i for i, l in enumerate(levels) if l == lv]
        counts[lv] = len(members)
        acc[lv] = float(np.mean(ev[members])) if members else None
    return DifficultySplit(levels, acc, counts)


# ---------------------------------------------------------------------------
# ambiguous groups


@dataclass
class AmbiguousGroup:
    anchor: int
    confused: List[int]
    accuracy: float
    degenerate: bool = False

    @property
    def members(self) -> List[int]:
        return [self.anchor] + self.confused

    def as_dict(self) -> dict:
        return {"anchor": self.anchor, "confused": self.confused, "accuracy": self.accuracy,
                "degenerate": self.degenerate}


def ambiguous_groups(cm: ConfusionMatrix, anchors: Sequence[int], size: int = 3) -> List[AmbiguousGroup]:
    """Anchor plus its ``size`` most frequent confusions (ties to the lower class index).

    Group accuracy is the unweighted mean of the member classes' accuracies.
    Rows with fewer than ``size`` nonzero confusions give a smaller, flagged group.
    """
    per_class = cm.per_class_accuracy()
    groups = []
    for a in anchors:
        row = cm.counts[a]
        others = [b for b in range(cm.num_classes) if b != a and row[b] > 0]
        others.sort(key=lambda b: (-row[b], b))
        confused = others[:size]
        accs = per_class[[a] + confused]
        accs = accs[~np.isnan(accs)]
        acc = float(np.mean(accs)) if accs.size else float("nan")
        groups.append(AmbiguousGroup(int(a), [int(b) for b in confused], acc, len(confused) < size))
    return groups


# ---------------------------------------------------------------------------
# fusion


def fuse_streams(scores: Sequence[np.ndarray], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Weighted sum of row-softmaxed score matrices (equal weights by default)."""
    if not scores:
        raise ValueError("need at least one score matrix")
    shape = np.shape(scores[0])
    if any(np.shape(s) != shape for s in scores):
        raise ValueError("score matrices differ in shape")
    w = np.ones(len(scores)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(scores),):
        raise ValueError("one weight per stream required")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative and not all zero")
    fused = np.zeros(shape, dtype=np.float64)
    for s, wi in zip(scores, w):
        fused += wi * softmax(np.asarray(s, dtype=np.float64), axis=1)
    return fused


# ---------------------------------------------------------------------------
# embeddings


def export_embeddings(embeddings, labels, path) -> None:
    """CSV with a header row, then ``label, e0, e1, ...`` per sample at 9 significant digits."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if emb.ndim != 2 or len(emb) != len(labels):
        raise ValueError("embeddings must be [N, d] with one label per row")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"e{j}" for j in range(emb.shape[1])])
        for lab, row in zip(labels, emb):
            w.writerow([int(lab)] + ["%.9g" % v for v in row])


def read_embeddings(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    dim = len(rows[0]) - 1
    labels = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
    emb = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(-1, dim)
    return emb, labels


# ---------------------------------------------------------------------------
# reports


def build_metrics(probs, labels, num_classes: int, reference_acc=None, anchors=None,
                  fusion: Optional[dict] = None) -> dict:
    """Metrics dictionary for :func:`write_report` from a score matrix."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    cm = confusion(probs.argmax(axis=1) if len(probs) else np.zeros(0, dtype=np.int64), labels, num_classes)
    per_class = cm.per_class_accuracy()
    ref = per_class if reference_acc is None else np.asarray(reference_acc, dtype=np.float64)
    filled = np.nan_to_num(per_class, nan=0.0)
    split = difficulty_split(np.nan_to_num(ref, nan=0.0), filled)
    anchors = range(num_classes) if anchors is None else anchors
    out = {
        "accuracy": cm.accuracy,
        "per_class_accuracy": [None if np.isnan(a) else float(a) for a in per_class],
        "confusion": cm.counts.tolist(),
        "difficulty": split.table(),
        "ambiguous_groups": [g.as_dict() for g in ambiguous_groups(cm, anchors)],
    }
    if fusion is not None:
        out["fusion"] = fusion
    return out


def _json_safe(x):
    if isinstance(x, dict):
        return {str(k): _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, np.ndarray):
        return _json_safe(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if np.isnan(x) else x
    return x


def _polyline(xs, ys, x0, y0, w, h, lo, hi, n):
    span = hi - lo if hi > lo else 1.0
    pts = []
    for x, y in zip(xs, ys):
        px = x0 + (w * x / max(n - 1, 1))
        py = y0 + h - h * (y - lo) / span
        pts.append(f"{px:.2f},{py:.2f}")
    return " ".join(pts)


def curves_svg(records: Sequence[dict]) -> str:
    """Two-panel line plot (losses, accuracies) over epochs."""
    width, height, pad = 640, 260, 40
    panel_w = (width - 3 * pad) / 2
    panel_h = height - 2 * pad
    epochs = [r["epoch"] for r in records]
    n = len(records)
    panels = [
        ("loss", [("loss_total", "#1f77b4"), ("loss_ce", "#ff7f0e")]),
        ("accuracy", [("train_acc", "#2ca02c"), ("eval_acc", "#d62728")]),
    ]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for i, (title, series) in enumerate(panels):
        x0 = pad + i * (panel_w + pad)
        vals = [r[k] for k, _ in series for r in records]
        lo, hi = (0.0, 1.0) if title == "accuracy" else (min(vals, default=0.0), max(vals, default=1.0))
        parts.append(f'<rect x="{x0:.2f}" y="{pad}" width="{panel_w:.2f}" height="{panel_h}" '
                     f'fill="none" stroke="black"/>')
        parts.append(f'<text x="{x0:.2f}" y="{pad - 8}" font-size="12">{title}</text>')
        for j, (key, colour) in enumerate(series):
            ys = [r[key] for r in records]
            pts = _polyline(epochs, ys, x0, pad, panel_w, panel_h, lo, hi, n)
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}"/>')
            parts.append(f'<text x="{x0 + 4:.2f}" y="{height - pad + 14 + 12 * j}" font-size="10" '
                         f'fill="{colour}">{key}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(log, metrics: dict, out_dir, svg: bool = True) -> Dict[str, Path]:
    """Write summary.json, curves.csv and (optionally) curves.svg into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"run": log.summary(), "metrics": metrics}
    paths = {"summary": out / "summary.json", "curves": out / "curves.csv"}
    paths["summary"].write_text(json.dumps(_json_safe(summary), sort_keys=True, indent=2) + "\n")
    paths["curves"].write_text(log.to_csv())
    if svg:
        paths["svg"] = out / "curves.svg"
        paths["svg"].write_text(curves_svg(log.records))
    return paths

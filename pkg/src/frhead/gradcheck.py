"""Finite-difference verification of the full training objective on a tiny model.

The objective is cross-entropy plus the weighted multi-level contrastive loss.
Everything the loss treats as a constant is frozen at the initial parameters:
the TP/FN/FP partition, the ambiguous-sample centers, the confidence weights
and the prototypes. The labels are chosen so that at least one class has a
true positive, a false negative and a false positive in the batch, and the
input batch is redrawn until no ReLU input lies within ``KINK_MARGIN`` of
zero, so central differences never straddle a kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, BackboneConfig
from .head import AmbiguousCenters, BatchPartition, FRHead, FRHeadConfig, ambiguous_centers
from .skeleton import SkeletonTopology

KINK_MARGIN = 1e-4
TINY = dict(num_joints=5, frames=8, base_channels=4, num_classes=3, hidden=8, batch=4)


@dataclass
class GradcheckResult:
    max_error: float
    seconds: float
    coordinates: int
    input_seed: int
    labels: List[int]
    preds: List[int]

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def _labels_with_all_sets(preds: np.ndarray) -> Optional[np.ndarray]:
    """Labels giving some class a TP, an FN and an FP, or None if impossible."""
    values, counts = np.unique(preds, return_counts=True)
    if len(values) < 2 or counts.max() < 2:
        return None
    a = int(values[np.argmax(counts)])
    first, second = np.flatnonzero(preds == a)[:2]
    other = int(np.flatnonzero(preds != a)[0])
    labels = preds.copy()
    labels[first] = a  # TP of a
    labels[second] = (a + 1) % 3 if preds[other] != (a + 1) % 3 else (a + 2) % 3  # FP of a
    labels[other] = a  # FN of a
    return labels


@dataclass
class TinyProblem:
    backbone: Backbone
    head: FRHead
    x: np.ndarray
    labels: np.ndarray
    partition: BatchPartition
    p_own: np.ndarray
    centers: Dict[Tuple[int, str], AmbiguousCenters]
    input_seed: int

    def params(self) -> List[ad.Tensor]:
        return self.backbone.parameters() + self.head.parameters()

    def objective(self, _params=None) -> ad.Tensor:
        logits, stages = self.backbone.forward(ad.Tensor(self.x), training=True)
        ce = ad.softmax_cross_entropy(logits, self.labels)
        out = self.head.loss(stages, self.partition, self.p_own, centers=self.centers)
        return ad.add(ce, ad.scale(out.weighted, self.head.config.w_cl))


def relu_margin(fn) -> float:
    """Smallest |ReLU input| seen while evaluating ``fn()``."""
    seen = []
    relu = ad.relu

    def probe(a):
        seen.append(float(np.abs(ad.as_tensor(a).data).min()))
        return relu(a)

    ad.relu = probe
    try:
        fn()
    finally:
        ad.relu = relu
    return min(seen, default=float("inf"))


def build_tiny_problem(seed: int = 0, max_tries: int = 200) -> TinyProblem:
    v, t, c, k, hidden, n = (TINY[key] for key in ("num_joints", "frames", "base_channels", "num_classes",
                                                    "hidden", "batch"))
    topo = SkeletonTopology.generic(v)
    cfg = BackboneConfig(num_joints=v, num_classes=k, base_channels=c, precision="float64")
    backbone = Backbone(cfg, topo, seed=seed)
    head = FRHead(FRHeadConfig(hidden=hidden), k, cfg.stage_channels, seed=seed + 1)
    rng = np.random.default_rng(seed)
    for (s, b), bank in head.banks.items():
        for cls in range(k):
            bank.set(cls, rng.normal(size=bank.protos.shape[1]))
    for attempt in range(max_tries):
        x = np.random.default_rng([seed, attempt]).normal(size=(n, 3, t, v))
        with ad.no_grad():
            logits, _ = backbone.forward(ad.Tensor(x), training=True)
        probs = ad.softmax(logits.data)
        preds = probs.argmax(axis=1)
        labels = _labels_with_all_sets(preds)
        if labels is None:
            continue
        part = BatchPartition(labels, preds, k)
        with ad.no_grad():
            _, stages = backbone.forward(ad.Tensor(x), training=True)
            centers = {}
            for s in head.config.stages:
                for b, f in head.branch_features(s, stages[s - 1]).items():
                    centers[(s, b)] = ambiguous_centers(f.data, part)
        p_own = probs[np.arange(n), labels]
        problem = TinyProblem(backbone, head, x, labels, part, p_own, centers, attempt)
        with ad.no_grad():
            if relu_margin(problem.objective) < KINK_MARGIN:
                continue
        return problem
    raise RuntimeError("could not find an input batch with a usable prediction pattern")


def run_gradcheck(seed: int = 0, max_coords: Optional[int] = 16, eps: float = 1e-5) -> GradcheckResult:
    started = time.perf_counter()
    problem = build_tiny_problem(seed)
    params = problem.params()
    err = ad.finite_difference_check(problem.objective, params, eps=eps, max_coords=max_coords, seed=seed)
    n_coords = sum(p.size if max_coords is None else min(p.size, max_coords) for p in params)
    return GradcheckResult(float(err), time.perf_counter() - started, n_coords, problem.input_seed,
                           problem.labels.tolist(), problem.partition.preds.tolist())

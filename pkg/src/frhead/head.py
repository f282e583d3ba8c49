"""Feature refinement head: spatial-temporal decoupling, class prototypes,
ambiguous-sample calibration and the multi-level contrastive loss.

Only the anchor features carry gradient through the contrastive loss.
Prototypes, FN/FP centers and the confidence weights p_ik are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BRANCHES = ("spatial", "temporal")
POOLED = "pooled"


@dataclass
class FRHeadConfig:
    hidden: int = 256
    tau: float = 0.1
    alpha: float = 0.9
    lambdas: Tuple[float, ...] = (0.1, 0.2, 0.5, 1.0)
    w_cl: float = 0.1
    stages: Tuple[int, ...] = (1, 2, 3, 4)
    decouple: bool = True
    # "all": every sample is an anchor (non-TP anchors get phi = psi = 0); "tp": TP anchors only
    anchors: str = "all"

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.stages = tuple(sorted(int(s) for s in self.stages))

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if len(self.lambdas) != 4 or min(self.lambdas) < 0:
            raise ValueError("need four non-negative stage weights")
        if self.hidden <= 0:
            raise ValueError("hidden size must be positive")
        if not set(self.stages) <= {1, 2, 3, 4}:
            raise ValueError("stages must be a subset of {1, 2, 3, 4}")
        if self.w_cl < 0:
            raise ValueError("w_cl must be non-negative")
        if self.anchors not in ("all", "tp"):
            raise ValueError("anchors must be 'all' or 'tp'")

    @property
    def branches(self) -> Tuple[str, ...]:
        return BRANCHES if self.decouple else (POOLED,)


# ---------------------------------------------------------------------------
# batch partition


@dataclass
class BatchPartition:
    labels: np.ndarray
    preds: np.ndarray
    num_classes: int

    @property
    def correct(self) -> np.ndarray:
        return self.labels == self.preds

    def tp(self, k: int) -> np.ndarray:
        return np.flatnonzero((self.labels == k) & (self.preds == k))

    def fn(self, k: int) -> np.ndarray:
        return np.flatnonzero((self.labels == k) & (self.preds != k))

    def fp(self, k: int) -> np.ndarray:
        return np.flatnonzero((self.labels != k) & (self.preds == k))

    def counts(self) -> Dict[str, np.ndarray]:
        k = self.num_classes
        wrong = ~self.correct
        return {
            "tp": np.bincount(self.labels[~wrong], minlength=k),
            "fn": np.bincount(self.labels[wrong], minlength=k),
            "fp": np.bincount(self.preds[wrong], minlength=k),
        }


def partition_batch(probs, labels) -> BatchPartition:
    """Split a batch into per-class TP / FN / FP sets from arg-max predictions.

    ``probs`` may be probabilities or logits; ties go to the lowest class index.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.argmax(p, axis=1).astype(np.int64)
    return BatchPartition(labels, preds, p.shape[1])


# ---------------------------------------------------------------------------
# prototypes and ambiguous centers


class PrototypeBank:
    """K x d class prototypes maintained by exponential moving average."""

    def __init__(self, num_classes: int, dim: int, dtype=np.float64):
        self.protos = np.zeros((num_classes, dim), dtype=dtype)
        self.initialized = np.zeros(num_classes, dtype=bool)

    @property
    def num_classes(self) -> int:
        return self.protos.shape[0]

    def set(self, k: int, vector) -> None:
        self.protos[k] = vector
        self.initialized[k] = True


def update_prototypes(bank: PrototypeBank, features, part: BatchPartition, alpha: float) -> None:
    """P_k <- (1 - alpha) * mean(TP features of k) + alpha * P_k for classes with TPs.

    A class's first update assigns the batch mean outright.
    """
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    dt = bank.protos.dtype.type
    for k in range(bank.num_classes):
        idx = part.tp(k)
        if idx.size == 0:
            continue
        m = f[idx].mean(axis=0).astype(bank.protos.dtype)
        if bank.initialized[k]:
            bank.protos[k] = dt(1 - alpha) * m + dt(alpha) * bank.protos[k]
        else:
            bank.protos[k] = m
            bank.initialized[k] = True


@dataclass
class AmbiguousCenters:
    fn: np.ndarray  # [K, d], zero rows where absent
    fp: np.ndarray
    has_fn: np.ndarray  # [K] bool
    has_fp: np.ndarray

    def fn_center(self, k: int) -> Optional[np.ndarray]:
        return self.fn[k] if self.has_fn[k] else None

    def fp_center(self, k: int) -> Optional[np.ndarray]:
        return self.fp[k] if self.has_fp[k] else None


def ambiguous_centers(features, part: BatchPartition) -> AmbiguousCenters:
    """Per-class means of this batch's false-negative and false-positive features."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    k, d = part.num_classes, f.shape[1]
    fn, fp = np.zeros((k, d), dtype=f.dtype), np.zeros((k, d), dtype=f.dtype)
    has_fn, has_fp = np.zeros(k, dtype=bool), np.zeros(k, dtype=bool)
    for c in range(k):
        idx = part.fn(c)
        if idx.size:
            fn[c], has_fn[c] = f[idx].mean(axis=0), True
        idx = part.fp(c)
        if idx.size:
            fp[c], has_fp[c] = f[idx].mean(axis=0), True
    return AmbiguousCenters(fn, fp, has_fn, has_fp)


def calibration_terms(features: Tensor, centers: AmbiguousCenters, part: BatchPartition) -> Tuple[Tensor, Tensor]:
    """Compensation phi and penalty psi for every anchor row of ``features``.

    phi_i = 1 - cos(F_i, mu_FN^k) and psi_i = 1 + cos(F_i, mu_FP^k) when i is a
    TP of its class k and the corresponding center exists; 0 otherwise.
    """
    labels = part.labels
    tp = part.correct
    dt = features.dtype
    gate_fn = (tp & centers.has_fn[labels]).astype(dt)
    gate_fp = (tp & centers.has_fp[labels]).astype(dt)
    cos_fn = ad.cosine_rows(features, Tensor(centers.fn[labels].astype(dt)))
    cos_fp = ad.cosine_rows(features, Tensor(centers.fp[labels].astype(dt)))
    phi = ad.mul(ad.sub(ad.neg(cos_fn), -1.0), Tensor(gate_fn))
    psi = ad.mul(ad.add(cos_fp, 1.0), Tensor(gate_fp))
    return phi, psi


def _anchor_term(feature, centers: AmbiguousCenters, part: BatchPartition, i: int, which: str) -> Tensor:
    f = ad.as_tensor(feature)
    k = int(part.labels[i])
    sub = BatchPartition(part.labels[i : i + 1], part.preds[i : i + 1], part.num_classes)
    phi, psi = calibration_terms(ad.reshape(f, (1, -1)), centers, sub)
    return ad.reshape(phi if which == "phi" else psi, ())


def compensation(feature, centers: AmbiguousCenters, part: BatchPartition, i: int) -> Tensor:
    """phi for anchor ``i`` (class = its label)."""
    return _anchor_term(feature, centers, part, i, "phi")


def penalty(feature, centers: AmbiguousCenters, part: BatchPartition, i: int) -> Tensor:
    """psi for anchor ``i`` (class = its label)."""
    return _anchor_term(feature, centers, part, i, "psi")


# ---------------------------------------------------------------------------
# contrastive loss


def _as_row_tensor(x, n: int, dt) -> Tensor:
    if isinstance(x, Tensor):
        return ad.reshape(x, (n,))
    return Tensor(np.broadcast_to(np.asarray(x, dtype=dt), (n,)).copy())


def cl_loss_batch(
    features: Tensor,
    labels,
    bank: PrototypeBank,
    phi,
    psi,
    p_own,
    tau: float,
    anchor_mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, int]:
    """Mean contrastive loss over anchors and the number of skipped anchors.

    Per anchor i of class k with a_l = cos(F_i, P_l) / tau and w = 1 - p_ik::

        D  = exp(a_k - w psi) + sum_{l != k, P_l initialized} exp(a_l)
        CL = -log(exp(a_k - w psi) / D) - log(exp(a_k - w phi) / D)

    Anchors whose own prototype is uninitialized (or excluded by
    ``anchor_mask``) contribute 0; the mean is over all rows.
    """
    f = ad.as_tensor(features)
    n = f.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    dt = f.dtype
    if n == 0:
        return Tensor(np.zeros((), dtype=dt)), 0
    k = bank.num_classes
    rows = np.arange(n)
    onehot = np.zeros((n, k), dtype=dt)
    onehot[rows, labels] = 1
    own_ok = bank.initialized[labels]
    active = own_ok if anchor_mask is None else own_ok & np.asarray(anchor_mask, dtype=bool)
    skipped = int(n - active.sum())
    if not active.any():
        return Tensor(np.zeros((), dtype=dt)), skipped
    valid = np.broadcast_to(bank.initialized[None, :], (n, k)).copy()
    valid[rows, labels] = True

    w = Tensor((1.0 - np.asarray(p_own, dtype=dt)).reshape(n))
    phi_t = _as_row_tensor(phi, n, dt)
    psi_t = _as_row_tensor(psi, n, dt)
    w_psi = ad.mul(psi_t, w)
    w_phi = ad.mul(phi_t, w)

    logits = ad.scale(ad.cosine_matrix(f, Tensor(bank.protos.astype(dt))), 1.0 / tau)
    onehot_t = Tensor(onehot)
    own = ad.reduce_sum(ad.mul(logits, onehot_t), 1)
    shifted = ad.sub(logits, ad.mul(ad.broadcast_to(ad.reshape(w_psi, (n, 1)), (n, k)), onehot_t))
    log_den = ad.logsumexp(shifted, axis=1, mask=valid)
    # -log(e^{a_k - w psi}/D) - log(e^{a_k - w phi}/D) = 2 log D - 2 a_k + w psi + w phi
    per_anchor = ad.add(ad.sub(ad.scale(log_den, 2.0), ad.scale(own, 2.0)), ad.add(w_psi, w_phi))
    weights = Tensor(active.astype(dt) / dt.type(n))
    return ad.reduce_sum(ad.mul(per_anchor, weights)), skipped


def cl_loss(feature, label: int, bank: PrototypeBank, phi, psi, p_own, tau: float) -> Tensor:
    """Single-anchor contrastive loss; 0 when the anchor's prototype is uninitialized."""
    f = ad.reshape(ad.as_tensor(feature), (1, -1))
    loss, _ = cl_loss_batch(f, [label], bank, phi, psi, [p_own], tau)
    return loss


# ---------------------------------------------------------------------------
# decoupling


class STDecoupler:
    """Two 1x1-conv branches projecting a stage feature map to hidden size."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator, dtype, name: str):
        bound = np.sqrt(6.0 / channels)
        self.channels, self.hidden = channels, hidden
        self.weights = {}
        self.biases = {}
        for b in BRANCHES:
            self.weights[b] = Tensor(rng.uniform(-bound, bound, size=(hidden, channels)).astype(dtype),
                                     requires_grad=True, name=f"{name}.{b}.weight")
            self.biases[b] = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True, name=f"{name}.{b}.bias")

    def params(self) -> List[Tensor]:
        return [t for b in BRANCHES for t in (self.weights[b], self.biases[b])]

    def __call__(self, stage_feature) -> Tuple[Tensor, Tensor]:
        return decouple(stage_feature, self)


def decouple(stage_feature, decoupler: STDecoupler) -> Tuple[Tensor, Tensor]:
    """Spatial and temporal summaries of a [N, C, T, V] (or [C, T, V]) feature map.

    spatial: mean over T -> 1x1 conv to C_h -> mean over V
    temporal: mean over V -> 1x1 conv to C_h -> mean over T
    """
    x = ad.as_tensor(stage_feature)
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != decoupler.channels:
        raise ValueError(f"stage feature {stage_feature.shape} does not match decoupler channels {decoupler.channels}")
    s = ad.channel_mix(ad.reduce_mean(x, 2), decoupler.weights["spatial"], decoupler.biases["spatial"])
    t = ad.channel_mix(ad.reduce_mean(x, 3), decoupler.weights["temporal"], decoupler.biases["temporal"])
    f_s, f_t = ad.reduce_mean(s, 2), ad.reduce_mean(t, 2)
    if single:
        f_s, f_t = ad.reshape(f_s, (decoupler.hidden,)), ad.reshape(f_t, (decoupler.hidden,))
    return f_s, f_t


# ---------------------------------------------------------------------------
# loss assembly


def stage_loss(branch_losses: Sequence[Tensor]) -> Tensor:
    """Sum of the per-branch losses of one stage."""
    total = branch_losses[0]
    for b in branch_losses[1:]:
        total = ad.add(total, b)
    return total


def multi_level_loss(stage_losses: Dict[int, Tensor], lambdas: Sequence[float]) -> Tensor:
    """sum_i lambda_i * L_i over the stages present, in stage order."""
    total = None
    for s in sorted(stage_losses):
        term = ad.scale(stage_losses[s], lambdas[s - 1])
        total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return total


@dataclass
class HeadOutput:
    """Result of one head evaluation on a batch."""

    weighted: Optional[Tensor]
    stage_losses: Dict[int, Tensor] = field(default_factory=dict)
    branch_losses: Dict[Tuple[int, str], Tensor] = field(default_factory=dict)
    features: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict)
    partition: Optional[BatchPartition] = None
    skipped: int = 0


class FRHead:
    """Training-only refinement heads over the backbone's tapped stages."""

    def __init__(self, config: FRHeadConfig, num_classes: int, stage_channels: Sequence[int],
                 seed: int = 0, dtype=np.float64):
        config.validate()
        self.config = config
        self.num_classes = num_classes
        self.stage_channels = list(stage_channels)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.decouplers: Dict[int, STDecoupler] = {}
        self.banks: Dict[Tuple[int, str], PrototypeBank] = {}
        for s in config.stages:
            c = self.stage_channels[s - 1]
            if config.decouple:
                self.decouplers[s] = STDecoupler(c, config.hidden, rng, dtype, f"head{s}")
                dim = config.hidden
            else:
                dim = c
            for b in config.branches:
                self.banks[(s, b)] = PrototypeBank(num_classes, dim, dtype)

    @property
    def active(self) -> bool:
        return bool(self.config.stages)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(p.name, p) for s in sorted(self.decouplers) for p in self.decouplers[s].params()]

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def branch_features(self, stage: int, feature: Tensor) -> Dict[str, Tensor]:
        if self.config.decouple:
            f_s, f_t = decouple(feature, self.decouplers[stage])
            return {"spatial": f_s, "temporal": f_t}
        return {POOLED: ad.reduce_mean(feature, (2, 3))}

    def __call__(self, stages: Sequence[Tensor], probs: np.ndarray, labels) -> HeadOutput:
        """Contrastive losses for one batch; does not touch the prototype banks."""
        labels = np.asarray(labels, dtype=np.int64)
        part = partition_batch(probs, labels)
        p_own = np.asarray(probs)[np.arange(len(labels)), labels]
        return self.loss(stages, part, p_own)

    def loss(self, stages: Sequence[Tensor], part: BatchPartition, p_own,
             centers: Optional[Dict[Tuple[int, str], AmbiguousCenters]] = None) -> HeadOutput:
        """Losses for a given partition; ``centers`` overrides the per-batch FN/FP means."""
        cfg = self.config
        out = HeadOutput(weighted=None, partition=part)
        if not self.active:
            return out
        anchor_mask = part.correct if cfg.anchors == "tp" else None
        for s in cfg.stages:
            per_branch = []
            for b, f in self.branch_features(s, stages[s - 1]).items():
                c = centers[(s, b)] if centers is not None else ambiguous_centers(f.data, part)
                phi, psi = calibration_terms(f, c, part)
                loss, skipped = cl_loss_batch(f, part.labels, self.banks[(s, b)], phi, psi, p_own, cfg.tau,
                                              anchor_mask)
                out.branch_losses[(s, b)] = loss
                out.features[(s, b)] = f.data.copy()
                out.skipped += skipped
                per_branch.append(loss)
            out.stage_losses[s] = stage_loss(per_branch)
        out.weighted = multi_level_loss(out.stage_losses, cfg.lambdas)
        return out

    def update_prototypes(self, output: HeadOutput) -> None:
        for key, feats in output.features.items():
            update_prototypes(self.banks[key], feats, output.partition, self.config.alpha)

    def state_dict(self) -> Dict[str, np.ndarray]:
        d = {name: p.data for name, p in self.named_parameters()}
        for (s, b), bank in self.banks.items():
            d[f"proto/{s}/{b}"] = bank.protos
            d[f"proto/{s}/{b}/initialized"] = bank.initialized.astype(np.float32)
        return d

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data[...] = state[name].astype(p.dtype)
        for (s, b), bank in self.banks.items():
            bank.protos[...] = state[f"proto/{s}/{b}"].astype(bank.protos.dtype)
            bank.initialized[...] = state[f"proto/{s}/{b}/initialized"] > 0.5

"""Optimization loop: cross-entropy plus the weighted multi-level contrastive loss,
SGD with momentum, linear warmup, step decay, best-checkpoint retention and
deterministic run logs."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .head import FRHead, FRHeadConfig
from .skeleton import Modality, SkeletonDataset, SkeletonTopology, modality_array, resample_frames

ABLATIONS = {
    "baseline": dict(cl_loss=False, st_decouple=False, multi_level=False),
    "cl_loss": dict(cl_loss=True, st_decouple=False, multi_level=False),
    "st_decouple": dict(cl_loss=True, st_decouple=True, multi_level=False),
    "ml_refine": dict(cl_loss=True, st_decouple=False, multi_level=True),
    "full": dict(cl_loss=True, st_decouple=True, multi_level=True),
}


class TrainingDivergedError(RuntimeError):
    pass


class RunLogError(ValueError):
    """A run log is missing a field or is otherwise malformed."""

    def __init__(self, message: str, field_name: Optional[str] = None):
        super().__init__(message)
        self.field_name = field_name


@dataclass
class TrainConfig:
    epochs: int = 70
    batch_size: int = 64
    lr: float = 0.1
    decay_epochs: Tuple[int, ...] = (35, 55)
    decay_factor: float = 0.1
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 4e-4
    seed: int = 0
    modality: str = "joint"
    precision: str = "float64"
    deterministic: bool = True
    cl_loss: bool = True
    st_decouple: bool = True
    multi_level: bool = True
    test_fraction: float = 0.2
    frames: int = 0  # 0 keeps the dataset's frame count
    eval_train: bool = True  # score the train split in eval mode after each epoch
    log_steps: bool = False
    head: FRHeadConfig = field(default_factory=FRHeadConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch size >= 2")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("lr, momentum, weight decay and warmup must be non-negative")
        if any(e <= 0 for e in self.decay_epochs) or not 0 < self.decay_factor <= 1:
            raise ValueError("decay epochs must be positive and decay factor in (0, 1]")
        if any(e >= self.epochs for e in self.decay_epochs):
            raise ValueError("decay epochs must be smaller than the epoch count")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test fraction must lie in (0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        Modality(self.modality)
        self.head.validate()
        self.backbone.validate()

    @property
    def dtype(self):
        return np.dtype(self.precision).type

    def apply_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        for k, v in ABLATIONS[name].items():
            setattr(self, k, v)
        return self

    def effective_head(self) -> FRHeadConfig:
        """Head config after applying the ablation switches."""
        if not self.cl_loss:
            stages: Tuple[int, ...] = ()
        elif self.multi_level:
            stages = self.head.stages
        else:
            stages = (4,)
        return dataclasses.replace(self.head, stages=stages, decouple=self.st_decouple)

    def effective_backbone(self, num_joints: int, num_classes: int) -> BackboneConfig:
        return dataclasses.replace(self.backbone, num_joints=num_joints, num_classes=num_classes,
                                   precision=self.precision)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["head"]["lambdas"] = list(self.head.lambdas)
        d["head"]["stages"] = list(self.head.stages)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        head = FRHeadConfig(**d.pop("head", {}))
        backbone = BackboneConfig(**d.pop("backbone", {}))
        return cls(head=head, backbone=backbone, **d)


# ---------------------------------------------------------------------------
# configuration file


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        items = [t for t in text.replace(" ", "").split(",") if t]
        kind = type(default[0]) if default else float
        return tuple(kind(float(t)) if kind is int else kind(t) for t in items)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _apply_section(obj, items: Dict[str, str], section: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, text in items.items():
        if key not in names or key in ("head", "backbone"):
            raise ValueError(f"unknown key {key!r} in [{section}]")
        setattr(obj, key, _parse_value(text, getattr(obj, key)))
    obj.__post_init__()


def parse_config(text: str) -> TrainConfig:
    """Read ``key = value`` lines under [trainer], [head] and [backbone] sections."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    cfg = TrainConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "trainer":
            _apply_section(cfg, items, section)
        elif section == "head":
            _apply_section(cfg.head, items, section)
        elif section == "backbone":
            _apply_section(cfg.backbone, items, section)
        else:
            raise ValueError(f"unknown section [{section}]")
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    out = []
    sections = [("trainer", cfg), ("head", cfg.head), ("backbone", cfg.backbone)]
    for name, obj in sections:
        out.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            if f.name in ("head", "backbone"):
                continue
            out.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# schedule


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then multiply by the decay factor at each decay epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    drops = sum(epoch >= e for e in cfg.decay_epochs)
    return cfg.lr * cfg.decay_factor**drops


# ---------------------------------------------------------------------------
# model, data


@dataclass
class ActionModel:
    backbone: Backbone
    head: Optional[FRHead] = None

    def strip(self) -> "ActionModel":
        """The same backbone without the training-only head."""
        return ActionModel(self.backbone, None)

    def parameters(self) -> List[ad.Tensor]:
        return self.backbone.parameters() + (self.head.parameters() if self.head else [])

    def state_dict(self) -> Dict[str, np.ndarray]:
        d = dict(self.backbone.state_dict())
        if self.head is not None:
            d.update(self.head.state_dict())
        return d

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.backbone.load_state_dict(state)
        if self.head is not None:
            self.head.load_state_dict(state)


def seed_streams(seed: int) -> Tuple[int, int, int]:
    """Independent integer seeds for backbone init, head init and batch shuffling."""
    states = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3)]
    return states[0], states[1], states[2]


def build_model(cfg: TrainConfig, topology: SkeletonTopology, num_classes: int) -> ActionModel:
    cfg.validate()
    bb_seed, head_seed, _ = seed_streams(cfg.seed)
    bb_cfg = cfg.effective_backbone(topology.num_joints, num_classes)
    backbone = Backbone(bb_cfg, topology, seed=bb_seed)
    head = FRHead(cfg.effective_head(), num_classes, bb_cfg.stage_channels, seed=head_seed, dtype=cfg.dtype)
    return ActionModel(backbone, head)


def prepare_inputs(dataset: SkeletonDataset, modality, frames: int = 0, dtype=np.float64) -> np.ndarray:
    """[N, 3, T, V] network input for every sample of ``dataset``."""
    samples = dataset.samples
    if frames:
        samples = [resample_frames(s, frames) for s in samples]
    if not samples:
        t = frames or 1
        return np.zeros((0, 3, t, dataset.topology.num_joints), dtype=dtype)
    coords = np.stack([s.coords for s in samples])
    return modality_array(coords, dataset.topology, modality).astype(dtype)


def stratified_split(labels, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded per-class split; each class keeps round(test_fraction * count) test samples."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    train, test = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        if idx.size > 1:
            n_test = min(max(n_test, 1), idx.size - 1)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def epoch_batches(n: int, batch_size: int, shuffle_seed: int, epoch: int) -> List[np.ndarray]:
    """Seeded permutation cut into batches; a trailing batch of fewer than 2 is dropped."""
    order = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch])).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if b.size >= 2]


# ---------------------------------------------------------------------------
# one optimization step


@dataclass
class LossBreakdown:
    ce: np.floating
    stage: Dict[int, np.floating]
    branch: Dict[str, np.floating]
    weighted: Optional[np.floating]
    total: np.floating
    lambdas: Tuple[float, ...]
    w_cl: float
    correct: int
    count: int
    skipped: int

    def recompose(self) -> np.floating:
        """L_CE + w_cl * sum_i lambda_i L_CL^i, evaluated in the loss dtype."""
        if not self.stage:
            return self.ce
        dt = type(self.ce)
        acc = None
        for s in sorted(self.stage):
            term = self.stage[s] * dt(self.lambdas[s - 1])
            acc = term if acc is None else acc + term
        return self.ce + acc * dt(self.w_cl)

    def as_dict(self) -> dict:
        d = {"loss_ce": float(self.ce), "loss_total": float(self.total),
             "loss_cl": float(self.weighted) if self.weighted is not None else 0.0}
        for s in range(1, 5):
            d[f"loss_cl_{s}"] = float(self.stage[s]) if s in self.stage else 0.0
        return d


def _scalar(t: ad.Tensor) -> np.floating:
    return t.data.reshape(())[()]


def train_step(model: ActionModel, x: np.ndarray, labels: np.ndarray, optimizer: ad.SGD,
               head_cfg: FRHeadConfig) -> LossBreakdown:
    """forward -> partition -> decouple -> CL -> total -> backward -> SGD -> prototype EMA."""
    labels = np.asarray(labels, dtype=np.int64)
    logits, stages = model.backbone.forward(ad.Tensor(x), training=True)
    probs = ad.softmax(logits.data)
    ce = ad.softmax_cross_entropy(logits, labels)
    head_out = model.head(stages, probs, labels) if model.head is not None and model.head.active else None
    if head_out is None:
        total = ce
    else:
        total = ad.add(ce, ad.scale(head_out.weighted, head_cfg.w_cl))
    optimizer.zero_grad()
    ad.backward(total)
    optimizer.step()
    if head_out is not None:
        model.head.update_prototypes(head_out)
    return LossBreakdown(
        ce=_scalar(ce),
        stage={s: _scalar(v) for s, v in head_out.stage_losses.items()} if head_out else {},
        branch={f"{s}/{b}": _scalar(v) for (s, b), v in head_out.branch_losses.items()} if head_out else {},
        weighted=_scalar(head_out.weighted) if head_out else None,
        total=_scalar(total),
        lambdas=head_cfg.lambdas,
        w_cl=head_cfg.w_cl,
        correct=int((probs.argmax(axis=1) == labels).sum()),
        count=int(labels.size),
        skipped=head_out.skipped if head_out else 0,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    probs: np.ndarray
    logits: np.ndarray
    embeddings: np.ndarray
    labels: np.ndarray

    @property
    def preds(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def evaluate(model, x: np.ndarray, labels, batch_size: int = 256) -> EvalResult:
    """Eval-mode forward of the backbone only; the head is never consulted."""
    backbone = model.backbone if isinstance(model, ActionModel) else model
    labels = np.asarray(labels, dtype=np.int64)
    k = backbone.config.num_classes
    logits, embs = [], []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            lg, _, emb = backbone.forward_with_embedding(ad.Tensor(x[i : i + batch_size]), training=False)
            logits.append(lg.data)
            embs.append(emb.data)
    if logits:
        logits_arr, emb_arr = np.concatenate(logits), np.concatenate(embs)
    else:
        c = backbone.config.channel_plan[-1]
        logits_arr, emb_arr = np.zeros((0, k)), np.zeros((0, c))
    probs = ad.softmax(logits_arr) if len(logits_arr) else logits_arr
    acc = float((probs.argmax(axis=1) == labels).mean()) if len(labels) else 0.0
    return EvalResult(acc, probs, logits_arr, emb_arr, labels)


# ---------------------------------------------------------------------------
# run log


EPOCH_FIELDS = ("epoch", "lr", "loss_ce", "loss_cl_1", "loss_cl_2", "loss_cl_3", "loss_cl_4", "loss_cl",
                "loss_total", "train_acc", "eval_acc", "skipped", "wall_time")
SUMMARY_FIELDS = ("config", "best_epoch", "best_eval_acc", "final_eval_acc", "final_train_acc", "epochs")


@dataclass
class RunLog:
    config: dict
    records: List[dict] = field(default_factory=list)
    steps: List[LossBreakdown] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        if not self.records:
            return -1
        accs = [r["eval_acc"] for r in self.records]
        return int(self.records[int(np.argmax(accs))]["epoch"])

    def summary(self) -> dict:
        best = self.best_epoch
        last = self.records[-1] if self.records else {}
        return {
            "config": self.config,
            "best_epoch": best,
            "best_eval_acc": max((r["eval_acc"] for r in self.records), default=0.0),
            "final_eval_acc": last.get("eval_acc", 0.0),
            "final_train_acc": last.get("train_acc", 0.0),
            "epochs": len(self.records),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_FIELDS)
        for r in self.records:
            w.writerow([repr(r[f]) if isinstance(r[f], float) else r[f] for f in EPOCH_FIELDS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "records": self.records}, sort_keys=True, indent=2)

    def save(self, prefix) -> Tuple[Path, Path]:
        prefix = Path(prefix)
        csv_path, json_path = prefix.with_suffix(".csv"), prefix.with_suffix(".json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path

    @classmethod
    def from_json(cls, text: str) -> "RunLog":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise RunLogError(f"run log is not valid JSON: {e}") from e
        for key in ("summary", "records"):
            if key not in d:
                raise RunLogError(f"run log missing field {key!r}", key)
        for key in SUMMARY_FIELDS:
            if key not in d["summary"]:
                raise RunLogError(f"run log summary missing field {key!r}", key)
        for i, r in enumerate(d["records"]):
            for key in EPOCH_FIELDS:
                if key not in r:
                    raise RunLogError(f"run log record {i} missing field {key!r}", key)
            if r["epoch"] != i:
                raise RunLogError(f"run log record {i} has epoch {r['epoch']}", "epoch")
        return cls(config=d["summary"]["config"], records=d["records"])

    @classmethod
    def load(cls, path) -> "RunLog":
        path = Path(path)
        if not path.exists():
            raise RunLogError(f"run log {path} not found")
        return cls.from_json(path.read_text())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: ActionModel
    log: RunLog
    train_idx: np.ndarray
    test_idx: np.ndarray
    best_state: Dict[str, np.ndarray]
    optimizer: ad.SGD

    def __iter__(self):
        return iter((self.model, self.model.head, self.log))


def train(dataset: SkeletonDataset, cfg: TrainConfig, inputs: Optional[np.ndarray] = None) -> TrainResult:
    """Train on a stratified split of ``dataset``; ``inputs`` may supply precomputed network input."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    labels = dataset.labels
    if labels.min() < 0 or labels.max() >= dataset.num_classes:
        raise ValueError("dataset labels fall outside its class count")
    if len(np.unique(labels)) < 2:
        raise ValueError("dataset needs at least two classes present")
    x = inputs if inputs is not None else prepare_inputs(dataset, cfg.modality, cfg.frames, cfg.dtype)
    x = x.astype(cfg.dtype, copy=False)
    train_idx, test_idx = stratified_split(labels, cfg.test_fraction, cfg.seed)
    model = build_model(cfg, dataset.topology, dataset.num_classes)
    optimizer = ad.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    _, _, shuffle_seed = seed_streams(cfg.seed)
    head_cfg = model.head.config
    log = RunLog(config=cfg.to_dict())
    best_state: Dict[str, np.ndarray] = {}
    best_acc = -1.0
    x_train, y_train = x[train_idx], labels[train_idx]
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        optimizer.lr = lr_at(epoch, cfg)
        steps: List[LossBreakdown] = []
        for step, batch in enumerate(epoch_batches(len(train_idx), cfg.batch_size, shuffle_seed, epoch)):
            try:
                out = train_step(model, x_train[batch], y_train[batch], optimizer, head_cfg)
            except ad.NonFiniteError as e:
                raise TrainingDivergedError(f"non-finite value at epoch {epoch}, step {step}: {e}") from e
            steps.append(out)
        if cfg.log_steps:
            log.steps.extend(steps)
        if cfg.eval_train:
            train_acc = evaluate(model, x_train, y_train).accuracy
        else:
            train_acc = sum(s.correct for s in steps) / max(1, sum(s.count for s in steps))
        eval_acc = evaluate(model, x[test_idx], labels[test_idx]).accuracy
        record = {"epoch": epoch, "lr": float(optimizer.lr)}
        for key in ("loss_ce", "loss_cl_1", "loss_cl_2", "loss_cl_3", "loss_cl_4", "loss_cl", "loss_total"):
            record[key] = float(np.mean([s.as_dict()[key] for s in steps])) if steps else 0.0
        record.update(train_acc=float(train_acc), eval_acc=float(eval_acc),
                      skipped=int(sum(s.skipped for s in steps)),
                      wall_time=0.0 if cfg.deterministic else round(time.perf_counter() - started, 6))
        log.records.append(record)
        if eval_acc > best_acc:
            best_acc = eval_acc
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
    return TrainResult(model, log, train_idx, test_idx, best_state, optimizer)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: ActionModel, cfg: TrainConfig, optimizer: Optional[ad.SGD] = None,
               state: Optional[Dict[str, np.ndarray]] = None, extra: Optional[dict] = None) -> None:
    """Write config, parameters, BN buffers, prototype banks and momentum buffers."""
    params = state if state is not None else model.state_dict()
    opt_blocks = {}
    if optimizer is not None:
        opt_blocks = {f"momentum/{p.name}": v for p, v in zip(optimizer.params, optimizer.buffers)}
    bb = model.backbone
    meta = {
        "train": cfg.to_dict(),
        "num_classes": bb.config.num_classes,
        "topology": [int(p) for p in bb.topology.parent],
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, meta, params, opt_blocks)


def load_model(path) -> Tuple[ActionModel, TrainConfig, dict]:
    meta, params, _ = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["train"])
    topo = SkeletonTopology(np.asarray(meta["topology"], dtype=np.int64))
    model = build_model(cfg, topo, meta["num_classes"])
    model.load_state_dict(params)
    return model, cfg, meta

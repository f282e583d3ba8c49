"""Skeleton sequences: synthetic generation, resampling, modality streams, file I/O."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .autodiff import Tensor

MAGIC = b"SKL1"
FORMAT_VERSION = 1

# Templates live on this grid so offsets and differences are exact in float32.
_GRID = 2.0**-16

# NTU RGB+D 25-joint tree, 0-based, rooted at the spine joint (20).
NTU25_PARENTS = (1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 20, 22, 7, 24, 11)


class Modality(str, enum.Enum):
    JOINT = "joint"
    BONE = "bone"
    JOINT_MOTION = "joint_motion"
    BONE_MOTION = "bone_motion"


@dataclass
class SkeletonTopology:
    parent: np.ndarray

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.validate()

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent == np.arange(self.num_joints))[0])

    def edges(self) -> List[Tuple[int, int]]:
        return [(v, int(p)) for v, p in enumerate(self.parent) if p != v]

    def validate(self) -> None:
        v = self.num_joints
        if v < 1 or np.any(self.parent < 0) or np.any(self.parent >= v):
            raise ValueError("parent indices out of range")
        roots = np.flatnonzero(self.parent == np.arange(v))
        if len(roots) != 1:
            raise ValueError(f"topology needs exactly one root, found {len(roots)}")
        # every joint must reach the root without cycling
        for j in range(v):
            seen = 0
            while self.parent[j] != j:
                j = self.parent[j]
                seen += 1
                if seen > v:
                    raise ValueError("parent array contains a cycle")

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_joints,) * 2)
        for c, p in self.edges():
            a[c, p] = a[p, c] = 1.0
        return a

    @classmethod
    def ntu25(cls) -> "SkeletonTopology":
        return cls(np.array(NTU25_PARENTS))

    @classmethod
    def generic(cls, num_joints: int) -> "SkeletonTopology":
        """Binary tree rooted at joint 0; NTU layout when num_joints == 25."""
        if num_joints == 25:
            return cls.ntu25()
        parent = np.array([0] + [(v - 1) // 2 for v in range(1, num_joints)])
        return cls(parent)


@dataclass
class SkeletonSequence:
    coords: np.ndarray  # [T, V, 3]
    label: int

    def __post_init__(self):
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise ValueError(f"coords must be [T, V, 3], got {self.coords.shape}")
        if self.coords.shape[0] < 2:
            raise ValueError("a sequence needs at least two frames")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def num_joints(self) -> int:
        return self.coords.shape[1]


@dataclass
class DatasetManifest:
    num_classes: int
    num_joints: int
    frames: int = 64
    class_names: List[str] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)
    seed: int = 0
    ambiguity: List[Tuple[int, int, str]] = field(default_factory=list)
    generator: dict = field(default_factory=dict)

    def validate(self, samples: Sequence[SkeletonSequence] = ()) -> None:
        k = self.num_classes
        for a, b, axis in self.ambiguity:
            if not (0 <= a < k and 0 <= b < k) or axis not in ("spatial", "temporal"):
                raise ValueError(f"invalid ambiguity entry {(a, b, axis)}")
        if samples:
            observed = np.bincount([s.label for s in samples], minlength=k).tolist()
            if self.counts and observed != list(self.counts):
                raise ValueError("manifest counts disagree with stored samples")

    def ambiguous_classes(self) -> List[int]:
        return sorted({c for a, b, _ in self.ambiguity for c in (a, b)})

    def to_json(self) -> str:
        d = {
            "num_classes": self.num_classes,
            "num_joints": self.num_joints,
            "frames": self.frames,
            "class_names": list(self.class_names),
            "counts": [int(c) for c in self.counts],
            "seed": int(self.seed),
            "ambiguity": [[int(a), int(b), axis] for a, b, axis in self.ambiguity],
            "generator": self.generator,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["ambiguity"] = [tuple(x) for x in d.get("ambiguity", [])]
        return cls(**d)


@dataclass
class SkeletonDataset:
    topology: SkeletonTopology
    num_classes: int
    samples: List[SkeletonSequence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def stacked(self) -> np.ndarray:
        """All coordinates as one [N, T, V, 3] array; requires equal lengths."""
        lengths = {s.num_frames for s in self.samples}
        if len(lengths) > 1:
            raise ValueError("samples have different lengths; resample first")
        return np.stack([s.coords for s in self.samples])

    def subset(self, idx) -> "SkeletonDataset":
        return SkeletonDataset(self.topology, self.num_classes, [self.samples[i] for i in idx])


@dataclass
class SyntheticConfig:
    num_classes: int = 10
    num_joints: int = 15
    frames: int = 64
    samples_per_class: int = 200
    n_spatial_pairs: int = 2
    n_temporal_pairs: int = 2
    noise_std: float = 0.1
    spatial_offset: float = 0.08

    def validate(self) -> None:
        pairs = self.n_spatial_pairs + self.n_temporal_pairs
        if min(self.n_spatial_pairs, self.n_temporal_pairs) < 0:
            raise ValueError("pair counts must be non-negative")
        if self.num_classes < max(2, 2 * pairs):
            raise ValueError(f"need at least {max(2, 2 * pairs)} classes for {pairs} ambiguous pairs")
        if self.num_joints < 4:
            raise ValueError("need at least 4 joints")
        if self.frames < 8:
            raise ValueError("need at least 8 frames")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.noise_std < 0 or self.spatial_offset < 0:
            raise ValueError("noise_std and spatial_offset must be non-negative")


def _rest_pose(topo: SkeletonTopology, rng: np.random.Generator) -> np.ndarray:
    pose = np.zeros((topo.num_joints, 3))
    bones = rng.normal(size=(topo.num_joints, 3))
    bones *= 0.15 / np.linalg.norm(bones, axis=1, keepdims=True)
    order = sorted(range(topo.num_joints), key=lambda v: _depth(topo, v))
    for v in order:
        p = topo.parent[v]
        if p != v:
            pose[v] = pose[p] + bones[v]
    return pose


def _depth(topo: SkeletonTopology, v: int) -> int:
    d = 0
    while topo.parent[v] != v:
        v = topo.parent[v]
        d += 1
    return d


def _snap(x: np.ndarray) -> np.ndarray:
    return np.round(x / _GRID) * _GRID


def _motion_template(frames: int, joints: int, rng: np.random.Generator) -> np.ndarray:
    """Sum of 1-3 low-frequency sinusoids per joint coordinate."""
    t = np.linspace(0.0, 1.0, frames)[:, None, None]
    out = np.zeros((frames, joints, 3))
    n_comp = rng.integers(1, 4, size=(joints, 3))
    for m in range(3):
        freq = rng.uniform(0.5, 2.0, size=(joints, 3))
        amp = rng.uniform(0.05, 0.25, size=(joints, 3)) * (n_comp > m)
        phase = rng.uniform(0.0, 2 * np.pi, size=(joints, 3))
        out += amp * np.sin(2 * np.pi * freq * t + phase)
    return out


def generate_synthetic(
    config: SyntheticConfig, seed: int, topology: SkeletonTopology | None = None
) -> Tuple[SkeletonDataset, DatasetManifest]:
    """Build a labelled dataset with declared spatially and temporally confusable pairs.

    Classes [0, 2*S) form S spatial pairs (2i, 2i+1), the next 2*T classes form
    temporal pairs, the rest have independent templates. The second member of a
    spatial pair is its partner's template with a constant offset on ~20% of the
    joints; the second member of a temporal pair is the time-reversed template.
    """
    config.validate()
    k, v, t = config.num_classes, config.num_joints, config.frames
    topo = topology or SkeletonTopology.generic(v)
    if topo.num_joints != v:
        raise ValueError("topology joint count differs from config")
    rng = np.random.default_rng(seed)
    rest = _rest_pose(topo, rng)

    templates = np.zeros((k, t, v, 3))
    ambiguity: List[Tuple[int, int, str]] = []
    c = 0
    for _ in range(config.n_spatial_pairs):
        base = rest + _motion_template(t, v, rng)
        n_moved = max(1, int(round(0.2 * v)))
        moved = rng.choice(v, size=n_moved, replace=False)
        direction = rng.normal(size=3)
        direction *= config.spatial_offset / np.linalg.norm(direction)
        base, direction = _snap(base), _snap(direction)
        partner = base.copy()
        partner[:, moved, :] += direction
        templates[c], templates[c + 1] = base, partner
        ambiguity.append((c, c + 1, "spatial"))
        c += 2
    for _ in range(config.n_temporal_pairs):
        base = rest + _motion_template(t, v, rng)
        templates[c], templates[c + 1] = base, base[::-1]
        ambiguity.append((c, c + 1, "temporal"))
        c += 2
    while c < k:
        templates[c] = rest + _motion_template(t, v, rng)
        c += 1

    templates = _snap(templates).astype(np.float32)
    samples = []
    for label in range(k):
        noise = rng.normal(size=(config.samples_per_class, t, v, 3)) * config.noise_std
        batch = (templates[label][None] + noise.astype(np.float32)).astype(np.float32)
        samples.extend(SkeletonSequence(batch[i], label) for i in range(config.samples_per_class))

    manifest = DatasetManifest(
        num_classes=k,
        num_joints=v,
        frames=t,
        class_names=[f"action_{i:02d}" for i in range(k)],
        counts=[config.samples_per_class] * k,
        seed=int(seed),
        ambiguity=ambiguity,
        generator={
            "noise_std": config.noise_std,
            "spatial_offset": config.spatial_offset,
            "samples_per_class": config.samples_per_class,
        },
    )
    return SkeletonDataset(topo, k, samples), manifest


def resample_frames(seq: SkeletonSequence, frames_out: int) -> SkeletonSequence:
    """Linear interpolation on a normalized [0, 1] time axis; endpoints kept exactly."""
    if frames_out < 2:
        raise ValueError("frames_out must be at least 2")
    x = seq.coords
    t_in = x.shape[0]
    if frames_out == t_in:
        return SkeletonSequence(x.copy(), seq.label)
    pos = np.arange(frames_out) * (t_in - 1) / (frames_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), t_in - 2)
    frac = (pos - lo)[:, None, None]
    xd = x.astype(np.float64)
    out = (1.0 - frac) * xd[lo] + frac * xd[lo + 1]
    return SkeletonSequence(out.astype(x.dtype), seq.label)


def modality_array(coords: np.ndarray, topo: SkeletonTopology, modality) -> np.ndarray:
    """[..., T, V, 3] coordinates -> [..., 3, T, V] stream for the given modality."""
    m = Modality(modality)
    if coords.shape[-2] != topo.num_joints:
        raise ValueError(f"topology has {topo.num_joints} joints, sequence has {coords.shape[-2]}")
    x = coords
    if m in (Modality.BONE, Modality.BONE_MOTION):
        x = x - x[..., topo.parent, :]
    if m in (Modality.JOINT_MOTION, Modality.BONE_MOTION):
        d = np.zeros_like(x)
        d[..., :-1, :, :] = x[..., 1:, :, :] - x[..., :-1, :, :]
        x = d
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


def to_modality(seq: SkeletonSequence, topo: SkeletonTopology, modality) -> Tensor:
    return Tensor(modality_array(seq.coords, topo, modality), dtype=seq.coords.dtype)


# ---------------------------------------------------------------------------
# dataset files


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_dataset(dataset: SkeletonDataset) -> bytes:
    topo = dataset.topology
    v = topo.num_joints
    parts = [
        MAGIC,
        struct.pack("<4I", FORMAT_VERSION, dataset.num_classes, v, len(dataset.samples)),
        np.asarray(topo.parent, dtype="<u4").tobytes(),
    ]
    for s in dataset.samples:
        if s.num_joints != v:
            raise ValueError("sample joint count differs from topology")
        parts.append(struct.pack("<2I", s.label, s.num_frames))
        parts.append(np.asarray(s.coords, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> SkeletonDataset:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < 20:
        raise TruncatedFileError("truncated header")
    version, k, v, count = struct.unpack_from("<4I", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    off = 20

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise TruncatedFileError(f"truncated at byte {off}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    parent = np.frombuffer(take(4 * v), dtype="<u4").astype(np.int64)
    topo = SkeletonTopology(parent)
    samples = []
    for _ in range(count):
        label, t = struct.unpack("<2I", take(8))
        coords = np.frombuffer(take(4 * t * v * 3), dtype="<f4").reshape(t, v, 3).astype(np.float32)
        samples.append(SkeletonSequence(coords, int(label)))
    if off != len(buf):
        raise DatasetFormatError(f"{len(buf) - off} trailing bytes")
    return SkeletonDataset(topo, k, samples)


def write_dataset(path, dataset: SkeletonDataset, manifest: DatasetManifest) -> None:
    manifest.validate(dataset.samples)
    path = Path(path)
    path.write_bytes(encode_dataset(dataset))
    manifest_path(path).write_text(manifest.to_json())


def read_dataset(path) -> Tuple[SkeletonDataset, DatasetManifest]:
    path = Path(path)
    dataset = decode_dataset(path.read_bytes())
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = DatasetManifest.from_json(mpath.read_text())
    else:
        manifest = DatasetManifest(
            num_classes=dataset.num_classes,
            num_joints=dataset.topology.num_joints,
            counts=np.bincount(dataset.labels, minlength=dataset.num_classes).tolist(),
        )
    manifest.validate(dataset.samples)
    return dataset, manifest

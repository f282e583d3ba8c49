"""Ten-unit temporal graph network (TGN) backbone with stage taps."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .skeleton import SkeletonTopology

TAPS = (1, 5, 8, 10)


@dataclass
class BackboneConfig:
    num_joints: int = 25
    num_classes: int = 120
    in_channels: int = 3
    base_channels: int = 64
    temporal_kernel: int = 9
    channel_multipliers: Tuple[int, ...] = (1, 1, 1, 1, 2, 2, 2, 4, 4, 4)
    strides: Tuple[int, ...] = (1, 1, 1, 1, 2, 1, 1, 2, 1, 1)
    taps: Tuple[int, ...] = TAPS
    precision: str = "float64"

    def __post_init__(self):
        self.channel_multipliers = tuple(int(c) for c in self.channel_multipliers)
        self.strides = tuple(int(s) for s in self.strides)
        self.taps = tuple(int(t) for t in self.taps)

    @property
    def channel_plan(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def stage_channels(self) -> List[int]:
        plan = self.channel_plan
        return [plan[t - 1] for t in self.taps]

    @property
    def dtype(self):
        return np.dtype(self.precision).type

    def validate(self) -> None:
        if len(self.channel_multipliers) != 10 or len(self.strides) != 10:
            raise ValueError("backbone needs exactly 10 units")
        if sorted(self.strides) != [1] * 8 + [2, 2]:
            raise ValueError("exactly two units must be strided (stride 2), the rest stride 1")
        if tuple(self.taps) != TAPS:
            raise ValueError(f"taps must be {TAPS}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError("temporal kernel must be odd")
        if min(self.base_channels, self.num_joints, self.num_classes, self.in_channels) < 1:
            raise ValueError("sizes must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("channel_multipliers", "strides", "taps"):
            d[key] = list(d[key])
        return d


def normalized_adjacency(topo: SkeletonTopology) -> np.ndarray:
    """D^{-1/2} (Adj + I) D^{-1/2} of the skeleton tree."""
    a = topo.adjacency() + np.eye(topo.num_joints)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _BN:
    def __init__(self, channels: int, dtype, name: str):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.state = BatchNormState(channels, dtype=dtype)
        self.name = name

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.state, training)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self) -> Dict[str, np.ndarray]:
        return {
            f"{self.name}.running_mean": self.state.running_mean,
            f"{self.name}.running_var": self.state.running_var,
        }


class TGNUnit:
    """graph aggregate -> 1x1 -> BN -> ReLU -> temporal conv -> BN -> (+ residual) -> ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int, base_adj: np.ndarray, kernel: int,
                 rng: np.random.Generator, dtype, name: str):
        v = base_adj.shape[0]
        self.name = name
        self.stride = stride
        self.kernel = kernel
        self.base_adj = Tensor(base_adj.astype(dtype))
        self.delta_adj = Tensor(np.zeros((v, v), dtype=dtype), requires_grad=True, name=f"{name}.delta_adj")
        self.w_gcn = Tensor(_uniform(rng, (c_out, c_in), c_in, dtype), requires_grad=True, name=f"{name}.w_gcn")
        self.bn1 = _BN(c_out, dtype, f"{name}.bn1")
        self.w_tcn = Tensor(_uniform(rng, (c_out, c_out, kernel), c_out * kernel, dtype),
                            requires_grad=True, name=f"{name}.w_tcn")
        self.bn2 = _BN(c_out, dtype, f"{name}.bn2")
        self.project = c_in != c_out or stride != 1
        if self.project:
            self.w_res = Tensor(_uniform(rng, (c_out, c_in, 1), c_in, dtype), requires_grad=True, name=f"{name}.w_res")
            self.bn_res = _BN(c_out, dtype, f"{name}.bn_res")

    def adjacency(self) -> Tensor:
        return ad.add(self.base_adj, self.delta_adj)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ad.graph_aggregate(x, self.adjacency())
        h = ad.channel_mix(h, self.w_gcn)
        h = ad.relu(self.bn1(h, training))
        h = ad.conv1d_temporal(h, self.w_tcn, stride=self.stride, padding=(self.kernel - 1) // 2)
        h = self.bn2(h, training)
        if self.project:
            r = self.bn_res(ad.conv1d_temporal(x, self.w_res, stride=self.stride, padding=0), training)
        else:
            r = x
        return ad.relu(ad.add(h, r))

    def params(self) -> List[Tensor]:
        ps = [self.delta_adj, self.w_gcn, *self.bn1.params(), self.w_tcn, *self.bn2.params()]
        if self.project:
            ps += [self.w_res, *self.bn_res.params()]
        return ps

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {**self.bn1.buffers(), **self.bn2.buffers()}
        if self.project:
            out.update(self.bn_res.buffers())
        return out

    def bn_layers(self) -> List[_BN]:
        return [self.bn1, self.bn2] + ([self.bn_res] if self.project else [])


class Backbone:
    def __init__(self, config: BackboneConfig, topology: SkeletonTopology, seed: int = 0):
        config.validate()
        if topology.num_joints != config.num_joints:
            raise ValueError(f"topology has {topology.num_joints} joints, config expects {config.num_joints}")
        self.config = config
        self.topology = topology
        dtype = config.dtype
        rng = np.random.default_rng(seed)
        base = normalized_adjacency(topology)
        self.units: List[TGNUnit] = []
        c_prev = config.in_channels
        for i, (c, s) in enumerate(zip(config.channel_plan, config.strides)):
            self.units.append(TGNUnit(c_prev, c, s, base, config.temporal_kernel, rng, dtype, f"unit{i + 1}"))
            c_prev = c
        fc_w = _uniform(rng, (config.num_classes, c_prev), c_prev, np.float64) / np.sqrt(6.0)
        self.fc_w = Tensor(fc_w.astype(dtype), requires_grad=True, name="fc.weight")
        self.fc_b = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True, name="fc.bias")

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for u in self.units:
            out.extend((p.name, p) for p in u.params())
        out += [("fc.weight", self.fc_w), ("fc.bias", self.fc_b)]
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for u in self.units:
            out.update(u.buffers())
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        d = {name: p.data for name, p in self.named_parameters()}
        d.update({f"buffer/{k}": v for k, v in self.buffers().items()})
        return d

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        dtype = self.config.dtype
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data[...] = state[name].astype(dtype)
        for u in self.units:
            for bn in u.bn_layers():
                bn.state.running_mean = state[f"buffer/{bn.name}.running_mean"].astype(dtype).copy()
                bn.state.running_var = state[f"buffer/{bn.name}.running_var"].astype(dtype).copy()

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        n_units_strided = sum(s == 2 for s in self.config.strides)
        if x.ndim != 4:
            raise ValueError(f"input must be [N, C, T, V], got {x.shape}")
        _, c, t, v = x.shape
        if c != self.config.in_channels or v != self.config.num_joints:
            raise ValueError(f"input {x.shape} does not match config")
        if t % (2**n_units_strided):
            raise ValueError(f"T={t} must be divisible by {2 ** n_units_strided}")

    def features(self, x, training: bool) -> Tuple[Tensor, List[Tensor]]:
        """Run all units; returns (final feature map, tapped stage features)."""
        x = ad.as_tensor(x)
        if x.dtype != self.config.dtype:
            x = Tensor(x.data.astype(self.config.dtype))
        self._check_input(x)
        taps = set(self.config.taps)
        stages = []
        h = x
        for i, unit in enumerate(self.units, start=1):
            h = unit(h, training)
            if i in taps:
                stages.append(h)
        return h, stages

    def forward(self, x, training: bool = False) -> Tuple[Tensor, List[Tensor]]:
        """Logits [N, K] (pre-softmax) and the four stage features."""
        h, stages = self.features(x, training)
        emb = ad.reduce_mean(h, (2, 3))
        return ad.linear(emb, self.fc_w, self.fc_b), stages

    __call__ = forward

    def pooled_embedding(self, x, training: bool = False) -> Tensor:
        h, _ = self.features(x, training)
        return ad.reduce_mean(h, (2, 3))

    def forward_with_embedding(self, x, training: bool = False):
        h, stages = self.features(x, training)
        emb = ad.reduce_mean(h, (2, 3))
        return ad.linear(emb, self.fc_w, self.fc_b), stages, emb


def build_backbone(config: BackboneConfig, topology: SkeletonTopology, seed: int = 0) -> Backbone:
    return Backbone(config, topology, seed)


def expected_parameter_count(config: BackboneConfig) -> int:
    """Closed-form parameter count for the unit layout used by :class:`Backbone`."""
    v, k = config.num_joints, config.temporal_kernel
    total = 0
    c_prev = config.in_channels
    for c, s in zip(config.channel_plan, config.strides):
        total += v * v + c_prev * c + 2 * c + c * c * k + 2 * c
        if c_prev != c or s != 1:
            total += c_prev * c + 2 * c
        c_prev = c
    return total + c_prev * config.num_classes + config.num_classes

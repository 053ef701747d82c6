"""Staged CNNs with training-only auxiliary classifier heads.

A network is L stages of conv->ReLU blocks followed by a classifier head.
With auxiliary heads enabled, the head attached after stage l carries its
own copy of stages l+1..L (fresh parameters) before pooling and a linear
layer, so every head sees a feature of the same depth and width as the
final head. Inference touches only the main branch and head L.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"DSKDCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StageSpec:
    channels_out: int
    conv_count: int = 1
    downsample: bool = False

    def __post_init__(self):
        if self.channels_out < 1:
            raise ValueError(f"channels_out must be positive, got {self.channels_out}")
        if self.conv_count < 1:
            raise ValueError(f"conv_count must be >= 1, got {self.conv_count}")

    def __str__(self) -> str:
        return f"{self.channels_out}:{self.conv_count}" + (":d" if self.downsample else "")

    @classmethod
    def parse(cls, text: str) -> "StageSpec":
        """Parse ``channels:convs[:d]``, e.g. ``32:2:d``."""
        parts = text.strip().split(":")
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "d"):
            raise ValueError(f"bad stage spec {text!r}; expected channels:convs[:d]")
        return cls(int(parts[0]), int(parts[1]), len(parts) == 3)


def parse_stages(text: str) -> List[StageSpec]:
    """Parse a comma-separated stage list such as ``8:1,16:1:d,16:1:d``."""
    specs = [StageSpec.parse(p) for p in text.split(",") if p.strip()]
    if not specs:
        raise ValueError("stage list is empty")
    return specs


def format_stages(specs: Sequence[StageSpec]) -> str:
    return ",".join(str(s) for s in specs)


@dataclass
class ClassifierHead:
    index: int  # 1-based stage the head is attached after
    bridge: List[StageSpec]
    prefix: str
    feature_dim: int
    projection_dim: Optional[int] = None


@dataclass
class HeadOutput:
    feature: Tensor  # pooled, pre-linear
    logits: Tensor


@dataclass
class StagedNetwork:
    stage_specs: List[StageSpec]
    num_classes: int
    in_channels: int = 3
    seed: int = 0
    with_aux_heads: bool = False
    projection_dim: Optional[int] = None
    aux_positions: List[int] = field(default_factory=list)
    input_shift: float = 0.5  # [0, 1] pixels are centred before the first conv
    params: Dict[str, Tensor] = field(default_factory=dict)
    heads: List[ClassifierHead] = field(default_factory=list)

    @property
    def num_stages(self) -> int:
        return len(self.stage_specs)

    @property
    def feature_dim(self) -> int:
        return self.stage_specs[-1].channels_out

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def main_branch_names(self) -> List[str]:
        final = self.heads[-1].prefix
        return [n for n in self.params if n.startswith("stage") or n.startswith(final + ".linear")]

    def forward_all_heads(self, x) -> List[HeadOutput]:
        return forward_all_heads(self, x)

    def forward_inference(self, x) -> Tensor:
        return forward_inference(self, x)


# ------------------------------------------------------------------ construction


def _init_param(name: str, shape, fan_in: int, seed: int, zero: bool = False) -> Tensor:
    if zero:
        return Tensor(np.zeros(shape), requires_grad=True)
    # per-name stream: adding heads never perturbs main-branch parameters
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _tiled_identity(d: int, width: int) -> Tensor:
    """d×width map where output j copies input j mod d.

    A random signed projection makes the feature loss push about half of
    the student's pooled units negative at once; without normalisation
    layers those ReLUs then die. Nonnegative tiling pulls every unit toward
    the (nonnegative) teacher feature instead.
    """
    w = np.zeros((d, width))
    w[np.arange(width) % d, np.arange(width)] = 1.0
    return Tensor(w, requires_grad=True)


def _add_stage(params: Dict[str, Tensor], prefix: str, spec: StageSpec, in_ch: int, seed: int) -> int:
    c = in_ch
    for j in range(spec.conv_count):
        name = f"{prefix}.conv{j}"
        params[name + ".weight"] = _init_param(name + ".weight", (spec.channels_out, c, 3, 3), c * 9, seed)
        params[name + ".bias"] = _init_param(name + ".bias", (spec.channels_out,), 1, seed, zero=True)
        c = spec.channels_out
    return c


def _add_head(params, head: ClassifierHead, in_ch: int, num_classes: int, seed: int) -> None:
    c = in_ch
    for k, spec in enumerate(head.bridge):
        c = _add_stage(params, f"{head.prefix}.bridge{k}", spec, c, seed)
    d = head.feature_dim
    params[f"{head.prefix}.linear.weight"] = _init_param(f"{head.prefix}.linear.weight", (d, num_classes), d, seed)
    params[f"{head.prefix}.linear.bias"] = _init_param(f"{head.prefix}.linear.bias", (num_classes,), 1, seed, zero=True)
    if head.projection_dim is not None and head.projection_dim != d:
        params[f"{head.prefix}.proj.weight"] = _tiled_identity(d, head.projection_dim)
        params[f"{head.prefix}.proj.bias"] = _init_param(
            f"{head.prefix}.proj.bias", (head.projection_dim,), 1, seed, zero=True)


def build_network(stage_specs: Sequence[StageSpec], num_classes: int, with_aux_heads: bool = False,
                  seed: int = 0, in_channels: int = 3,
                  projection_dim: Optional[int] = None,
                  aux_positions: Optional[Sequence[int]] = None) -> StagedNetwork:
    """Build a seeded staged network.

    ``aux_positions`` restricts auxiliary heads to a subset of stages
    1..L-1 (all of them by default). ``projection_dim`` adds a learned linear
    projection to every head whose feature width differs from it, i.e. the
    teacher's feature width.
    """
    specs = list(stage_specs)
    if not specs:
        raise ValueError("stage list must not be empty")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    L = len(specs)
    if aux_positions is None:
        aux = list(range(1, L)) if with_aux_heads else []
    else:
        aux = sorted(set(int(p) for p in aux_positions))
        if any(p < 1 or p >= L for p in aux):
            raise ValueError(f"aux positions must lie in 1..{L - 1}, got {list(aux_positions)}")
        if aux and not with_aux_heads:
            raise ValueError("aux_positions given but with_aux_heads is false")
    net = StagedNetwork(specs, num_classes, in_channels, seed, with_aux_heads, projection_dim,
                        aux_positions=aux)

    c = in_channels
    for i, spec in enumerate(specs):
        c = _add_stage(net.params, f"stage{i + 1}", spec, c, seed)

    for l in aux + [L]:
        prefix = "head_final" if l == L else f"head{l}"
        head = ClassifierHead(l, specs[l:], prefix, specs[-1].channels_out, projection_dim)
        in_ch = specs[l - 1].channels_out
        _add_head(net.params, head, in_ch, num_classes, seed)
        net.heads.append(head)
    return net


def copy_main_branch(src: StagedNetwork, dst: StagedNetwork) -> None:
    """Copy stage and final-classifier parameters from ``src`` into ``dst``."""
    for name in src.main_branch_names():
        if name not in dst.params or dst.params[name].shape != src.params[name].shape:
            raise ShapeError(f"cannot copy parameter {name!r}: architectures differ")
        dst.params[name].data = src.params[name].data.copy()


# ------------------------------------------------------------------ forward


def _run_stage(net: StagedNetwork, x: Tensor, prefix: str, spec: StageSpec) -> Tensor:
    for j in range(spec.conv_count):
        stride = 2 if (spec.downsample and j == 0) else 1
        w = net.params[f"{prefix}.conv{j}.weight"]
        b = net.params[f"{prefix}.conv{j}.bias"]
        x = T.relu(T.conv2d(x, w, b, stride=stride, padding=1))
    return x


def _run_head(net: StagedNetwork, head: ClassifierHead, x: Tensor) -> HeadOutput:
    for k, spec in enumerate(head.bridge):
        x = _run_stage(net, x, f"{head.prefix}.bridge{k}", spec)
    feature = T.global_avg_pool(x)
    logits = T.linear(feature, net.params[f"{head.prefix}.linear.weight"],
                      net.params[f"{head.prefix}.linear.bias"])
    return HeadOutput(feature, logits)


def _prepare_input(net: StagedNetwork, x) -> Tensor:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise ShapeError(f"expected N×{net.in_channels}×H×W input, got {x.shape}")
    return Tensor(x - net.input_shift) if net.input_shift else Tensor(x)


def forward_all_heads(net: StagedNetwork, x) -> List[HeadOutput]:
    """One HeadOutput per head, in stage order; main-branch activations are shared."""
    x = _prepare_input(net, x)
    by_stage = {h.index: h for h in net.heads}
    outs = []
    for i, spec in enumerate(net.stage_specs, start=1):
        x = _run_stage(net, x, f"stage{i}", spec)
        if i in by_stage:
            outs.append(_run_head(net, by_stage[i], x))
    return outs


def forward_inference(net: StagedNetwork, x) -> Tensor:
    """Logits of the final head; auxiliary heads are never evaluated."""
    return forward_features(net, x).logits


def forward_features(net: StagedNetwork, x) -> HeadOutput:
    x = _prepare_input(net, x)
    for i, spec in enumerate(net.stage_specs, start=1):
        x = _run_stage(net, x, f"stage{i}", spec)
    return _run_head(net, net.heads[-1], x)


def project_feature(net: StagedNetwork, head: ClassifierHead, feature: Tensor, teacher_dim: int) -> Tensor:
    """Map a head's pooled feature to the teacher's width.

    Identity when widths already agree, otherwise the head's learned
    projection.
    """
    if teacher_dim < 1:
        raise ValueError(f"teacher_dim must be >= 1, got {teacher_dim}")
    if feature.shape[-1] == teacher_dim:
        return feature
    w = net.params.get(f"{head.prefix}.proj.weight")
    if w is None or w.shape[1] != teacher_dim:
        raise ShapeError(
            f"head {head.prefix} has no projection from {feature.shape[-1]} to {teacher_dim}; "
            "build the network with projection_dim set"
        )
    return T.linear(feature, w, net.params[f"{head.prefix}.proj.bias"])


# ------------------------------------------------------------------ checkpoints


def _header(net: StagedNetwork) -> dict:
    return {
        "stage_specs": [asdict(s) for s in net.stage_specs],
        "num_classes": net.num_classes,
        "in_channels": net.in_channels,
        "seed": net.seed,
        "with_aux_heads": net.with_aux_heads,
        "projection_dim": net.projection_dim,
        "aux_positions": net.aux_positions,
        "input_shift": net.input_shift,
        "params": [[name, list(p.shape)] for name, p in net.params.items()],
    }


def save_checkpoint(net: StagedNetwork, path) -> Path:
    """Write ``magic | version | header length | JSON header | float64 LE payload``."""
    path = Path(path)
    header = json.dumps(_header(net), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for p in net.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> StagedNetwork:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    net = build_network(
        [StageSpec(**s) for s in header["stage_specs"]],
        header["num_classes"],
        with_aux_heads=header["with_aux_heads"],
        seed=header["seed"],
        in_channels=header["in_channels"],
        projection_dim=header["projection_dim"],
        aux_positions=header["aux_positions"],
    )
    net.input_shift = header["input_shift"]
    offset = 16 + hlen
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise ValueError(f"{path}: truncated payload at byte {offset} ({name})")
        net.params[name].data = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).copy()
        offset += n
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return net

"""CNN encoders, pooling branches and the PS (student) / PT (teacher) models.

Both models map a batch of log-mel features ``(B, T, F)`` to frame embeddings
``(B, T', D)`` with a stack of conv -> batch-norm -> ReLU -> max-pool blocks, then
attach pooling branches on the shared embeddings:

* ``e_atp``  embedding-level attention pooling (the main branch),
* ``i_gmp`` / ``i_gap``  per-frame classifier pooled by max / mean (auxiliary),
* ``sedb``  per-frame classifier trained on strong labels only.
"""
from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class BranchKind(str, Enum):
    E_ATP = "e_atp"
    I_GMP = "i_gmp"
    I_GAP = "i_gap"
    SEDB = "sedb"


class BranchRole(str, Enum):
    MAIN = "main"
    AUXILIARY = "auxiliary"
    SEDB = "sedb"


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    kernel: int = 3
    time_pool: int = 1
    freq_pool: int = 1


@dataclass(frozen=True)
class EncoderConfig:
    blocks: tuple[BlockConfig, ...]
    # floor-divide the time axis when a pool factor does not divide it
    truncate: bool = False

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockConfig) else BlockConfig(*b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ValueError("encoder needs at least one block")

    def output_shape(self, n_frames: int, n_bins: int) -> tuple[int, int]:
        """Return ``(T', D)`` for an input of ``n_frames x n_bins``."""
        t, f = n_frames, n_bins
        for i, b in enumerate(self.blocks):
            for size, pool, axis in ((t, b.time_pool, "time"), (f, b.freq_pool, "frequency")):
                if size % pool and not self.truncate:
                    raise ValueError(f"block {i}: {axis} size {size} not divisible by pool {pool}")
            t, f = t // b.time_pool, f // b.freq_pool
            if t < 1 or f < 1:
                raise ValueError(f"block {i}: pooling collapses the {n_frames}x{n_bins} input")
        return t, self.blocks[-1].channels * f

    @property
    def time_reduction(self) -> int:
        return math.prod(b.time_pool for b in self.blocks)


PS_ENCODER = EncoderConfig(
    (BlockConfig(16, 3, 2, 2), BlockConfig(32, 3, 2, 2), BlockConfig(64, 3, 1, 2))
)
PT_ENCODER = EncoderConfig(
    (
        BlockConfig(16, 3, 2, 2),
        BlockConfig(16),
        BlockConfig(32, 3, 2, 2),
        BlockConfig(32),
        BlockConfig(64, 3, 2, 2),
        BlockConfig(64),
        BlockConfig(128, 3, 2, 2),
        BlockConfig(128),
        BlockConfig(128),
    ),
    truncate=True,
)


@dataclass(frozen=True)
class BranchConfig:
    kind: BranchKind
    role: BranchRole

    def __post_init__(self):
        object.__setattr__(self, "kind", BranchKind(self.kind))
        object.__setattr__(self, "role", BranchRole(self.role))
        expected = {
            BranchKind.E_ATP: {BranchRole.MAIN},
            BranchKind.I_GMP: {BranchRole.AUXILIARY},
            BranchKind.I_GAP: {BranchRole.AUXILIARY},
            BranchKind.SEDB: {BranchRole.SEDB},
        }[self.kind]
        if self.role not in expected:
            raise ValueError(f"branch {self.kind.value} cannot take role {self.role.value}")


@dataclass(frozen=True)
class ModelConfig:
    """Declarative model description; ``teacher`` selects the PT constraints."""

    encoder: EncoderConfig
    branches: tuple[BranchConfig, ...]
    n_classes: int
    n_frames: int = 500
    n_bins: int = 64
    teacher: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        roles = [b.role for b in self.branches]
        if roles.count(BranchRole.MAIN) != 1:
            raise ValueError("a model needs exactly one main branch")
        if roles.count(BranchRole.AUXILIARY) > 1:
            raise ValueError("at most one auxiliary branch is supported")
        if roles.count(BranchRole.SEDB) > 1:
            raise ValueError("at most one SEDB head is supported")
        if self.teacher and len(self.branches) != 1:
            raise ValueError("the PT model has exactly one (E-ATP) branch")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        self.encoder.output_shape(self.n_frames, self.n_bins)

    @classmethod
    def ps(cls, n_classes, aux="i_gap", sedb=False, encoder=PS_ENCODER, n_frames=500, n_bins=64):
        branches = [BranchConfig(BranchKind.E_ATP, BranchRole.MAIN)]
        if aux:
            branches.append(BranchConfig(BranchKind(aux), BranchRole.AUXILIARY))
        if sedb:
            branches.append(BranchConfig(BranchKind.SEDB, BranchRole.SEDB))
        return cls(encoder, tuple(branches), n_classes, n_frames, n_bins)

    @classmethod
    def pt(cls, n_classes, encoder=PT_ENCODER, n_frames=500, n_bins=64):
        return cls(encoder, (BranchConfig(BranchKind.E_ATP, BranchRole.MAIN),), n_classes, n_frames, n_bins, teacher=True)

    @property
    def aux_kind(self) -> BranchKind | None:
        for b in self.branches:
            if b.role is BranchRole.AUXILIARY:
                return b.kind
        return None

    @property
    def has_sedb(self) -> bool:
        return any(b.kind is BranchKind.SEDB for b in self.branches)

    @property
    def output_frames(self) -> int:
        return self.encoder.output_shape(self.n_frames, self.n_bins)[0]

    @property
    def embedding_dim(self) -> int:
        return self.encoder.output_shape(self.n_frames, self.n_bins)[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = [{"kind": b.kind.value, "role": b.role.value} for b in self.branches]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = d["encoder"]
        encoder = EncoderConfig(tuple(BlockConfig(**b) for b in enc["blocks"]), bool(enc.get("truncate", False)))
        branches = tuple(BranchConfig(b["kind"], b["role"]) for b in d["branches"])
        return cls(encoder, branches, int(d["n_classes"]), int(d["n_frames"]), int(d["n_bins"]), bool(d.get("teacher", False)))


class CNNBlock(nn.Module):
    """Conv -> batch-norm -> ReLU -> max-pool."""

    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, cfg.channels, cfg.kernel, padding=cfg.kernel // 2)
        self.bn = nn.BatchNorm2d(cfg.channels)
        self.pool = (cfg.time_pool, cfg.freq_pool)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.bn(self.conv(x)))
        if self.pool != (1, 1):
            x = F.max_pool2d(x, self.pool)
        return x


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_frames: int, n_bins: int):
        super().__init__()
        self.cfg = cfg
        self.input_shape = (n_frames, n_bins)
        self.output_frames, self.embedding_dim = cfg.output_shape(n_frames, n_bins)
        blocks, in_ch = [], 1
        for b in cfg.blocks:
            blocks.append(CNNBlock(in_ch, b))
            in_ch = b.channels
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, T, F)`` features -> ``(B, T', D)`` frame embeddings."""
        if x.dim() != 3 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input (B, {self.input_shape[0]}, {self.input_shape[1]}), got {tuple(x.shape)}")
        h = self.blocks(x.unsqueeze(1))  # B, C, T', F'
        b, c, t, f = h.shape
        return h.permute(0, 2, 1, 3).reshape(b, t, c * f)


def gmp_pool(frame_probs: torch.Tensor) -> torch.Tensor:
    """Per-class max over the frame axis (second to last)."""
    frame_probs = torch.as_tensor(frame_probs)
    if frame_probs.shape[-2] == 0:
        raise ValueError("cannot pool an empty frame axis")
    return frame_probs.max(dim=-2).values


def gap_pool(frame_probs: torch.Tensor) -> torch.Tensor:
    """Per-class mean over the frame axis (second to last)."""
    frame_probs = torch.as_tensor(frame_probs)
    if frame_probs.shape[-2] == 0:
        raise ValueError("cannot pool an empty frame axis")
    return frame_probs.mean(dim=-2)


class AttentionPooling(nn.Module):
    """Embedding-level attention pooling with one attention vector per class.

    ``a[t, c] = softmax_t(w_c . h_t)``, ``z_c = sum_t a[t, c] h_t``, clip probability
    ``sigmoid(u_c . z_c + b_c)`` and frame probability ``sigmoid(u_c . h_t + b_c)``.
    """

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.attention = nn.Linear(dim, n_classes, bias=False)
        self.classifier = nn.Linear(dim, n_classes)

    def forward(self, h: torch.Tensor):
        att = torch.softmax(self.attention(h), dim=1)  # B, T', C
        z = torch.einsum("btc,btd->bcd", att, h)
        clip_logits = (z * self.classifier.weight.unsqueeze(0)).sum(-1) + self.classifier.bias
        frame_probs = torch.sigmoid(self.classifier(h))
        return torch.sigmoid(clip_logits), frame_probs, att


class InstanceHead(nn.Module):
    """Per-frame sigmoid classifier, optionally pooled to a clip probability."""

    def __init__(self, dim: int, n_classes: int, pooling: str | None):
        super().__init__()
        self.classifier = nn.Linear(dim, n_classes)
        self.pooling = pooling

    def forward(self, h: torch.Tensor):
        frame_probs = torch.sigmoid(self.classifier(h))
        if self.pooling == "max":
            return gmp_pool(frame_probs), frame_probs
        if self.pooling == "mean":
            return gap_pool(frame_probs), frame_probs
        return None, frame_probs


@dataclass
class PredictionBundle:
    """Per-branch outputs of one forward pass, keyed by branch kind value."""

    clip_probs: dict[str, torch.Tensor] = field(default_factory=dict)
    frame_probs: dict[str, torch.Tensor] = field(default_factory=dict)
    attention: torch.Tensor | None = None

    @property
    def main_clip(self) -> torch.Tensor:
        return self.clip_probs[BranchKind.E_ATP.value]


class SEDNet(nn.Module):
    """Shared encoder plus the configured branches (a PS or PT model)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, cfg.n_frames, cfg.n_bins)
        dim = self.encoder.embedding_dim
        self.heads = nn.ModuleDict()
        for b in cfg.branches:
            if b.kind is BranchKind.E_ATP:
                self.heads[b.kind.value] = AttentionPooling(dim, cfg.n_classes)
            elif b.kind is BranchKind.I_GMP:
                self.heads[b.kind.value] = InstanceHead(dim, cfg.n_classes, "max")
            elif b.kind is BranchKind.I_GAP:
                self.heads[b.kind.value] = InstanceHead(dim, cfg.n_classes, "mean")
            else:
                self.heads[b.kind.value] = InstanceHead(dim, cfg.n_classes, None)

    @property
    def output_frames(self) -> int:
        return self.encoder.output_frames

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> PredictionBundle:
        h = self.encoder(x)
        out = PredictionBundle()
        for name, head in self.heads.items():
            if isinstance(head, AttentionPooling):
                clip, frame, att = head(h)
                out.attention = att
            else:
                clip, frame = head(h)
            if clip is not None:
                out.clip_probs[name] = clip
            out.frame_probs[name] = frame
        return out

    def tag(self, x: torch.Tensor) -> torch.Tensor:
        """Clip-level probabilities of the main branch."""
        return self(x).main_clip


def build_model(cfg: ModelConfig, seed: int | None = None, dtype=torch.float32) -> SEDNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SEDNet(cfg).to(dtype)


def save_checkpoint(model: SEDNet, directory: os.PathLike | str) -> Path:
    """Write ``config.json``, ``index.json`` and one raw float32 LE file per tensor.

    The directory is assembled next to the target and renamed into place.
    """
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        (tmp / "config.json").write_text(json.dumps(model.cfg.to_dict(), indent=2) + "\n")
        index = {}
        for name, tensor in model.state_dict().items():
            fname = f"{name}.f32"
            arr = tensor.detach().cpu().numpy()
            np.ascontiguousarray(arr, dtype="<f4").tofile(tmp / fname)
            index[name] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        (tmp / "index.json").write_text(json.dumps(index, indent=2) + "\n")
        if directory.exists():
            old = directory.with_name(directory.name + ".old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(directory, old)
            os.replace(tmp, directory)
            shutil.rmtree(old)
        else:
            os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_checkpoint(directory: os.PathLike | str) -> SEDNet:
    directory = Path(directory)
    cfg = ModelConfig.from_dict(json.loads((directory / "config.json").read_text()))
    index = json.loads((directory / "index.json").read_text())
    model = SEDNet(cfg)
    state = {}
    for name, ref in model.state_dict().items():
        if name not in index:
            raise ValueError(f"checkpoint {directory} lacks tensor {name}")
        meta = index[name]
        arr = np.fromfile(directory / meta["file"], dtype="<f4").reshape(meta["shape"])
        state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(state)
    model.eval()
    return model

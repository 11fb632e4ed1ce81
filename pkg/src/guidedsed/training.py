"""Guided learning: teacher (PT) / student (PS) co-training with pseudo-labels.

Per batch both models see the same clips.  Labeled clips (weak, and synthetic via
their strong labels collapsed to tags) train every tagging branch.  Unlabeled clips
train the PS model on binarized PT tags from the start, and the PT model on
binarized PS tags once ``epoch >= warmup_s``, weighted by
``1 - alpha_base ** (epoch - warmup_s)``.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from sklearn.metrics import f1_score

from .datamodel import DatasetManifest, events_to_frame_grid
from .datapipe import AugmentSpec, Batch, BatchSpec, make_batches, steps_per_epoch
from .nets import BranchKind, ModelConfig, SEDNet, build_model, save_checkpoint

log = logging.getLogger(__name__)

EPS = 1e-7

LOG_COLUMNS = (
    "epoch", "lr", "alpha", "ps_total", "ps_main", "ps_aux", "ps_sedb",
    "pt_total", "pt_labeled", "pt_unlabeled", "pt_unlabeled_grad",
    "valid_tag_f1_ps", "valid_tag_f1_pt",
)
STEP_COLUMNS = ("epoch", "step", "ps_clips", "pt_clips", "ps_total", "pt_total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    warmup_s: int = 15
    lr0: float = 0.0018
    lr_decay: float = 0.20
    lr_step: int = 10
    a: float = 1.0
    # None: 1.0 for an I-GAP auxiliary branch, 0.5 for I-GMP
    b: float | None = None
    sedb_weight: float = 1.0
    alpha_base: float = 0.997
    pseudo_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.lr_decay < 1:
            raise ValueError("lr_decay must lie in [0, 1)")
        if self.a < 0 or (self.b is not None and self.b < 0) or self.sedb_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.warmup_s > self.epochs:
            raise ValueError("warmup_s must not exceed epochs")
        if self.lr_step < 1:
            raise ValueError("lr_step must be >= 1")

    def aux_weight(self, aux_kind: BranchKind | str | None) -> float:
        if aux_kind is None:
            return 0.0
        if self.b is not None:
            return self.b
        return 1.0 if BranchKind(aux_kind) is BranchKind.I_GAP else 0.5


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if like is None else x.to(like.dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=torch.float64 if like is None else like.dtype)


def bce(y, p, eps: float = EPS) -> torch.Tensor:
    """Binary cross-entropy summed over the class (last) axis."""
    p = _as_tensor(p)
    y = _as_tensor(y, like=p)
    if y.shape != p.shape:
        raise ValueError(f"target shape {tuple(y.shape)} != prediction shape {tuple(p.shape)}")
    p = p.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).sum(-1)


def frame_bce(grid, p, eps: float = EPS) -> torch.Tensor:
    """Cross-entropy summed over frames and classes (last two axes)."""
    return bce(grid, p, eps).sum(-1)


def pseudo_label(clip_probs, threshold: float = 0.5) -> torch.Tensor:
    """Binary tags ``prob >= threshold``, detached from any graph."""
    p = _as_tensor(clip_probs).detach()
    return (p >= threshold).to(p.dtype)


def alpha_unlabeled(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Weight of the PT unlabeled loss; 0 before (and at) the warm-up epoch."""
    if epoch < cfg.warmup_s:
        return 0.0
    return 1.0 - cfg.alpha_base ** (epoch - cfg.warmup_s)


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    return cfg.lr0 * (1.0 - cfg.lr_decay) ** (epoch // cfg.lr_step)


@dataclass
class PSTargets:
    clip: torch.Tensor  # (B, C) weak or pseudo tags
    strong: torch.Tensor | None = None  # (B, T', C)
    synthetic_mask: torch.Tensor | None = None  # (B,) bool


def _aux_key(bundle) -> str | None:
    for kind in (BranchKind.I_GAP, BranchKind.I_GMP):
        if kind.value in bundle.clip_probs:
            return kind.value
    return None


def ps_loss_terms(bundle, targets: PSTargets, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """Batch-mean loss components of the PS model.

    ``total = a * main + b * aux + sedb_weight * sedb``; the SEDB term only
    counts synthetic clips but, like the others, is averaged over all clips.
    """
    main = bundle.main_clip
    clip_t = _as_tensor(targets.clip, like=main)
    if torch.isnan(clip_t).any():
        raise ValueError("missing clip-level target for some clip")
    n = main.shape[0]
    zero = main.new_zeros(())
    terms = {"main": bce(clip_t, main).sum() / n, "aux": zero, "sedb": zero}
    total = cfg.a * terms["main"]
    aux = _aux_key(bundle)
    b = cfg.aux_weight(aux)
    if aux is not None:
        terms["aux"] = bce(clip_t, bundle.clip_probs[aux]).sum() / n
        if b > 0:
            total = total + b * terms["aux"]
    sedb = bundle.frame_probs.get(BranchKind.SEDB.value)
    if sedb is not None and targets.strong is not None and targets.synthetic_mask is not None:
        mask = torch.as_tensor(targets.synthetic_mask, dtype=torch.bool)
        if mask.any():
            strong = _as_tensor(targets.strong, like=sedb)[mask]
            terms["sedb"] = frame_bce(strong, sedb[mask]).sum() / n
            total = total + cfg.sedb_weight * terms["sedb"]
    terms["total"] = total
    return terms


def loss_ps_total(bundle, targets: PSTargets, cfg: TrainConfig) -> torch.Tensor:
    return ps_loss_terms(bundle, targets, cfg)["total"]


def loss_ps_unlabeled(pt_pseudo, ps_clip_probs) -> torch.Tensor:
    return bce(pt_pseudo, ps_clip_probs)


def pt_loss_terms(pt_clip, labels, labeled_mask, ps_pseudo, epoch, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """PT loss components, averaged over every clip of the batch.

    Before ``warmup_s`` the unlabeled term is a constant zero, so it adds no
    gradient path at all.
    """
    mask = torch.as_tensor(labeled_mask, dtype=torch.bool)
    n = pt_clip.shape[0]
    labeled = bce(_as_tensor(labels, like=pt_clip)[mask], pt_clip[mask]).sum() / n
    unlabeled = pt_clip.new_zeros(())
    if epoch >= cfg.warmup_s and (~mask).any() and ps_pseudo is not None:
        psi = _as_tensor(ps_pseudo, like=pt_clip).detach()
        unlabeled = alpha_unlabeled(epoch, cfg) * bce(psi[~mask], pt_clip[~mask]).sum() / n
    return {"labeled": labeled, "unlabeled": unlabeled, "total": labeled + unlabeled}


def loss_pt(pt_clip, labels, labeled_mask, ps_pseudo, epoch, cfg: TrainConfig) -> torch.Tensor:
    return pt_loss_terms(pt_clip, labels, labeled_mask, ps_pseudo, epoch, cfg)["total"]


def strong_grid(batch: Batch, n_frames: int, clip_duration: float, n_classes: int) -> np.ndarray:
    frame_rate = n_frames / clip_duration
    grid = np.zeros((len(batch), n_frames, n_classes), dtype=np.float32)
    for i, evs in enumerate(batch.events):
        if evs is not None and batch.pools[i] == "synthetic":
            grid[i] = events_to_frame_grid(evs, n_frames, frame_rate, n_classes)
    return grid


@torch.no_grad()
def predict_tags(model: SEDNet, manifest: DatasetManifest, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(manifest), batch_size):
        idx = range(start, min(start + batch_size, len(manifest)))
        x = torch.from_numpy(np.stack([manifest.load_feature(i) for i in idx]))
        out.append(model.tag(x.to(next(model.parameters()).dtype)).cpu().numpy())
    if not out:
        return np.zeros((0, len(manifest.vocabulary)), dtype=np.float32)
    return np.concatenate(out)


def tagging_f1(model: SEDNet, manifest: DatasetManifest) -> float:
    """Macro clip-level F1 over the labeled clips of ``manifest`` (threshold 0.5)."""
    labeled = [i for i, e in enumerate(manifest.entries) if e.weak_label is not None]
    if not labeled:
        return float("nan")
    sub = manifest.subset(labeled)
    y = np.stack([e.weak_label for e in sub.entries])
    pred = (predict_tags(model, sub) >= 0.5).astype(int)
    return float(f1_score(y, pred, average="macro", zero_division=0))


@dataclass
class TrainResult:
    ps: SEDNet
    pt: SEDNet
    history: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    ps_checkpoint: Path | None = None
    pt_checkpoint: Path | None = None
    log_path: Path | None = None


def _digest(ids) -> str:
    return hashlib.sha1("\n".join(ids).encode()).hexdigest()[:16]


def _write_rows(path: Path, columns, rows, mode: str):
    with path.open(mode, newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if mode == "w":
            writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def train(
    manifest: DatasetManifest,
    ps_cfg: ModelConfig,
    pt_cfg: ModelConfig,
    cfg: TrainConfig = TrainConfig(),
    batch_spec: BatchSpec = BatchSpec(),
    aug_spec: AugmentSpec | None = AugmentSpec(),
    out_dir: os.PathLike | str | None = None,
    valid_manifest: DatasetManifest | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run guided learning and return both trained models plus the metrics log.

    With ``out_dir`` set, checkpoints go to ``out_dir/ps`` and ``out_dir/pt``, the
    per-epoch metrics to ``out_dir/train_log.tsv`` and per-step batch digests to
    ``out_dir/steps.tsv``.
    """
    geometry = manifest.geometry
    for mcfg in (ps_cfg, pt_cfg):
        if (mcfg.n_frames, mcfg.n_bins) != (geometry.n_frames, geometry.n_bins):
            raise ValueError(
                f"model expects {mcfg.n_frames}x{mcfg.n_bins} features, manifest has {geometry.n_frames}x{geometry.n_bins}"
            )
        if mcfg.n_classes != len(manifest.vocabulary):
            raise ValueError("model class count differs from the manifest vocabulary")

    torch.manual_seed(cfg.seed)
    ps = build_model(ps_cfg)
    pt = build_model(pt_cfg)
    opt_ps = torch.optim.Adam(ps.parameters(), lr=cfg.lr0)
    opt_pt = torch.optim.Adam(pt.parameters(), lr=cfg.lr0)
    n_classes = ps_cfg.n_classes
    n_steps = steps_per_epoch(manifest, batch_spec)
    batches = make_batches(manifest, batch_spec, aug_spec, seed=cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "train_log.tsv", LOG_COLUMNS, [], "w")
        _write_rows(out / "steps.tsv", STEP_COLUMNS, [], "w")
    result = TrainResult(ps, pt)

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        alpha = alpha_unlabeled(epoch, cfg)
        for opt in (opt_ps, opt_pt):
            for group in opt.param_groups:
                group["lr"] = lr
        sums = {k: 0.0 for k in LOG_COLUMNS[3:11]}
        step_rows = []
        for step in range(n_steps):
            batch = next(batches)
            x = torch.from_numpy(batch.features)
            labeled = torch.from_numpy(batch.labeled_mask)
            labels = torch.from_numpy(np.nan_to_num(batch.weak_labels, nan=0.0))

            # pseudo-labels come from inference-mode forwards and carry no graph
            with torch.no_grad():
                pt.eval()
                psi_pt = pseudo_label(pt.tag(x), cfg.pseudo_threshold)
                psi_ps = None
                if epoch >= cfg.warmup_s:
                    ps.eval()
                    psi_ps = pseudo_label(ps.tag(x), cfg.pseudo_threshold)
            ps.train()
            pt.train()

            ps_out = ps(x)
            clip_targets = torch.where(labeled.unsqueeze(1), labels, psi_pt)
            targets = PSTargets(clip_targets)
            if ps_cfg.has_sedb:
                targets.strong = torch.from_numpy(strong_grid(batch, ps.output_frames, geometry.duration, n_classes))
                targets.synthetic_mask = torch.from_numpy(batch.synthetic_mask)
            ps_terms = ps_loss_terms(ps_out, targets, cfg)

            pt_clip = pt.tag(x)
            pt_terms = pt_loss_terms(pt_clip, labels, labeled, psi_ps, epoch, cfg)
            unl_grad = 0.0
            if pt_terms["unlabeled"].requires_grad:
                (g,) = torch.autograd.grad(pt_terms["unlabeled"], pt_clip, retain_graph=True)
                unl_grad = float(g.norm())

            for name, value in (("ps", ps_terms["total"]), ("pt", pt_terms["total"])):
                if not torch.isfinite(value):
                    raise TrainingDiverged(f"non-finite {name} loss at epoch {epoch} step {step}")
            opt_ps.zero_grad()
            ps_terms["total"].backward()
            opt_ps.step()
            opt_pt.zero_grad()
            pt_terms["total"].backward()
            opt_pt.step()

            for key in ("total", "main", "aux", "sedb"):
                sums[f"ps_{key}"] += ps_terms[key].item()
            for key in ("total", "labeled", "unlabeled"):
                sums[f"pt_{key}"] += pt_terms[key].item()
            sums["pt_unlabeled_grad"] = max(sums["pt_unlabeled_grad"], unl_grad)
            digest = _digest(batch.clip_ids)
            step_rows.append({
                "epoch": epoch, "step": step, "ps_clips": digest, "pt_clips": digest,
                "ps_total": ps_terms["total"].item(), "pt_total": pt_terms["total"].item(),
            })

        row = {"epoch": epoch, "lr": lr, "alpha": alpha}
        for key, value in sums.items():
            row[key] = value if key == "pt_unlabeled_grad" else value / n_steps
        if valid_manifest is not None and len(valid_manifest):
            row["valid_tag_f1_ps"] = tagging_f1(ps, valid_manifest)
            row["valid_tag_f1_pt"] = tagging_f1(pt, valid_manifest)
        else:
            row["valid_tag_f1_ps"] = row["valid_tag_f1_pt"] = float("nan")
        result.history.append(row)
        result.steps.extend(step_rows)
        if out is not None:
            _write_rows(out / "train_log.tsv", LOG_COLUMNS, [row], "a")
            _write_rows(out / "steps.tsv", STEP_COLUMNS, step_rows, "a")
        log.info("epoch %d lr=%.6f alpha=%.4f ps=%.4f pt=%.4f", epoch, lr, alpha, row["ps_total"], row["pt_total"])
        if on_epoch is not None:
            on_epoch(row)

    ps.eval()
    pt.eval()
    if out is not None:
        result.ps_checkpoint = save_checkpoint(ps, out / "ps")
        result.pt_checkpoint = save_checkpoint(pt, out / "pt")
        result.log_path = out / "train_log.tsv"
    return result


def read_train_log(path: os.PathLike | str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for row in rows:
        for key, value in row.items():
            row[key] = int(value) if key == "epoch" else float(value)
    return rows


"""Clip prediction, main/auxiliary fusion and frame-probability decoding.

A prediction directory holds

* ``frame_probs.f32`` / ``clip_probs.f32``: concatenated raw float32 LE arrays,
* ``probs.json``: classes, frame rate and ``clip_id -> offsets/shape`` index,
* ``events.tsv``: ``clip_id onset offset class_name`` rows (3 decimals).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.ndimage import median_filter

from .datamodel import ClassVocabulary, DatasetManifest, Event, EventList
from .nets import BranchKind, SEDNet, load_checkpoint

EVENT_HEADER = ("clip_id", "onset", "offset", "class_name")


@dataclass(frozen=True)
class FusionSpec:
    alpha: float = 0.5
    # None: fuse iff the auxiliary branch is I-GAP
    enabled: bool | None = None

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("fusion alpha must lie in [0, 1]")

    def active(self, aux_kind) -> bool:
        if self.enabled is None:
            return aux_kind is not None and BranchKind(aux_kind) is BranchKind.I_GAP
        return bool(self.enabled) and aux_kind is not None and BranchKind(aux_kind) is BranchKind.I_GAP


@dataclass(frozen=True)
class DecodeSpec:
    clip_threshold: float = 0.5
    frame_threshold: float = 0.5
    median_window: int = 1
    # None: taken from the model / prediction set
    frame_rate: float | None = None

    def __post_init__(self):
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError("median_window must be an odd count >= 1")
        if self.frame_rate is not None and not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")


def fuse_branches(frame_probs_atp, frame_probs_gap, spec: FusionSpec = FusionSpec()) -> np.ndarray:
    """``alpha * P_gap + (1 - alpha) * P_atp`` elementwise."""
    atp = np.asarray(frame_probs_atp, dtype=np.float64)
    gap = np.asarray(frame_probs_gap, dtype=np.float64)
    if atp.shape != gap.shape:
        raise ValueError(f"shape mismatch {atp.shape} vs {gap.shape}")
    return spec.alpha * gap + (1.0 - spec.alpha) * atp


def smooth(binary: np.ndarray, window: int) -> np.ndarray:
    """Per-class median filter along time with replicated edges."""
    if window == 1:
        return binary
    return median_filter(binary, size=(window, 1), mode="nearest")


def decode_events(frame_probs, clip_probs, spec: DecodeSpec, frame_rate: float | None = None) -> EventList:
    """Turn ``T' x C`` frame probabilities into events, gated by clip probabilities."""
    rate = spec.frame_rate if spec.frame_rate is not None else frame_rate
    if rate is None:
        raise ValueError("decode_events needs a frame rate")
    frame_probs = np.asarray(frame_probs)
    clip_probs = np.asarray(clip_probs)
    if frame_probs.ndim != 2 or clip_probs.shape != (frame_probs.shape[1],):
        raise ValueError(f"incompatible shapes {frame_probs.shape} and {clip_probs.shape}")
    binary = (frame_probs >= spec.frame_threshold).astype(np.uint8)
    binary = smooth(binary, spec.median_window)
    events = []
    for c in np.flatnonzero(clip_probs >= spec.clip_threshold):
        col = np.concatenate(([0], binary[:, c], [0])).astype(np.int8)
        edges = np.diff(col)
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)  # exclusive run ends
        for s, e in zip(starts, stops):
            events.append(Event(int(c), s / rate, e / rate))
    return tuple(sorted(events, key=Event.sort_key))


@dataclass
class PredictionSet:
    """Per-clip probabilities of one system, ordered by clip id."""

    classes: tuple[str, ...]
    frame_rate: float
    frame: dict[str, np.ndarray]  # clip_id -> (T', C) float32
    clip: dict[str, np.ndarray]  # clip_id -> (C,) float32

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if set(self.frame) != set(self.clip):
            raise ValueError("frame and clip probabilities cover different clips")

    @property
    def clip_ids(self) -> list[str]:
        return sorted(self.frame)

    @property
    def vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary(self.classes)

    def decode(self, spec: DecodeSpec = DecodeSpec()) -> dict[str, EventList]:
        return {cid: decode_events(self.frame[cid], self.clip[cid], spec, self.frame_rate) for cid in self.clip_ids}


def detection_outputs(bundle, fusion: FusionSpec, aux_kind) -> tuple[np.ndarray, np.ndarray]:
    """Frame and clip probabilities used for detection: E-ATP, fused with I-GAP when on."""
    atp_frame = bundle.frame_probs[BranchKind.E_ATP.value].detach().cpu().numpy()
    atp_clip = bundle.main_clip.detach().cpu().numpy()
    if fusion.active(aux_kind):
        gap = BranchKind.I_GAP.value
        frame = fuse_branches(atp_frame, bundle.frame_probs[gap].detach().cpu().numpy(), fusion)
        clip = fuse_branches(atp_clip, bundle.clip_probs[gap].detach().cpu().numpy(), fusion)
        return frame.astype(np.float32), clip.astype(np.float32)
    return atp_frame.astype(np.float32), atp_clip.astype(np.float32)


@torch.no_grad()
def predict_arrays(model: SEDNet, features: np.ndarray, fusion: FusionSpec = FusionSpec(), batch_size: int = 64):
    """Detection frame/clip probabilities for a ``(N, T, F)`` feature array."""
    model.eval()
    dtype = next(model.parameters()).dtype
    frames, clips = [], []
    for start in range(0, len(features), batch_size):
        x = torch.as_tensor(np.asarray(features[start:start + batch_size]), dtype=dtype)
        f, c = detection_outputs(model(x), fusion, model.cfg.aux_kind)
        frames.append(f)
        clips.append(c)
    n_classes, t_out = model.cfg.n_classes, model.output_frames
    if not frames:
        return np.zeros((0, t_out, n_classes), np.float32), np.zeros((0, n_classes), np.float32)
    return np.concatenate(frames), np.concatenate(clips)


def predict_set(model: SEDNet, manifest: DatasetManifest, fusion: FusionSpec = FusionSpec(), batch_size: int = 64) -> PredictionSet:
    order = sorted(range(len(manifest)), key=lambda i: manifest.entries[i].clip_id)
    frame_rate = model.output_frames / manifest.geometry.duration
    frame, clip = {}, {}
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        feats = np.stack([manifest.load_feature(i) for i in idx])
        f, c = predict_arrays(model, feats, fusion, batch_size)
        for k, i in enumerate(idx):
            cid = manifest.entries[i].clip_id
            frame[cid], clip[cid] = f[k], c[k]
    return PredictionSet(manifest.vocabulary.names, frame_rate, frame, clip)


def write_events(path: os.PathLike | str, events: Mapping[str, Sequence[Event]], classes: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(EVENT_HEADER)
        for cid in sorted(events):
            for ev in events[cid]:
                writer.writerow((cid, f"{ev.onset:.3f}", f"{ev.offset:.3f}", classes[ev.class_index]))


def read_events(path: os.PathLike | str, vocabulary: ClassVocabulary | None = None):
    """Read an event TSV; returns ``(events_by_clip, vocabulary)``.

    Without a vocabulary, one is built from the sorted class names in the file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EVENT_HEADER:
            raise ValueError(f"{path}: header must be {' '.join(EVENT_HEADER)}")
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    if vocabulary is None:
        names = sorted({r[3].strip() for r in rows})
        if not names:
            return {}, None
        vocabulary = ClassVocabulary(tuple(names))
    out: dict[str, list[Event]] = {}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 columns")
        cid, onset, offset, name = (c.strip() for c in r)
        out.setdefault(cid, []).append(Event(vocabulary.index(name), float(onset), float(offset)))
    return {cid: tuple(sorted(evs, key=Event.sort_key)) for cid, evs in out.items()}, vocabulary


def write_predictions(directory: os.PathLike | str, preds: PredictionSet, decode: DecodeSpec = DecodeSpec()) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"classes": list(preds.classes), "frame_rate": preds.frame_rate, "clips": {}}
    frame_off = clip_off = 0
    with open(directory / "frame_probs.f32", "wb") as ff, open(directory / "clip_probs.f32", "wb") as cf:
        for cid in preds.clip_ids:
            f = np.ascontiguousarray(preds.frame[cid], dtype="<f4")
            c = np.ascontiguousarray(preds.clip[cid], dtype="<f4")
            ff.write(f.tobytes())
            cf.write(c.tobytes())
            index["clips"][cid] = {"offset": frame_off, "shape": list(f.shape), "clip_offset": clip_off}
            frame_off += f.size
            clip_off += c.size
    (directory / "probs.json").write_text(json.dumps(index, indent=1) + "\n")
    write_events(directory / "events.tsv", preds.decode(decode), preds.classes)
    return directory


def load_predictions(directory: os.PathLike | str) -> PredictionSet:
    directory = Path(directory)
    index = json.loads((directory / "probs.json").read_text())
    frames = np.fromfile(directory / "frame_probs.f32", dtype="<f4")
    clips = np.fromfile(directory / "clip_probs.f32", dtype="<f4")
    n_classes = len(index["classes"])
    frame, clip = {}, {}
    for cid, meta in index["clips"].items():
        size = int(np.prod(meta["shape"]))
        frame[cid] = frames[meta["offset"]:meta["offset"] + size].reshape(meta["shape"]).astype(np.float32)
        clip[cid] = clips[meta["clip_offset"]:meta["clip_offset"] + n_classes].astype(np.float32)
    return PredictionSet(tuple(index["classes"]), float(index["frame_rate"]), frame, clip)


def predict(
    checkpoint: os.PathLike | str | SEDNet,
    manifest: DatasetManifest,
    out_dir: os.PathLike | str,
    decode: DecodeSpec = DecodeSpec(),
    fusion: FusionSpec = FusionSpec(),
) -> PredictionSet:
    """Run a PS checkpoint over ``manifest``; write probabilities and decoded events."""
    model = checkpoint if isinstance(checkpoint, SEDNet) else load_checkpoint(checkpoint)
    if (model.cfg.n_frames, model.cfg.n_bins) != (manifest.geometry.n_frames, manifest.geometry.n_bins):
        raise ValueError("checkpoint geometry does not match the manifest features")
    preds = predict_set(model, manifest, fusion)
    write_predictions(out_dir, preds, decode)
    return preds


def reference_events(manifest: DatasetManifest) -> dict[str, EventList]:
    """Ground-truth events of every strongly labeled clip in ``manifest``."""
    return {e.clip_id: e.events for e in manifest.entries if e.events is not None}

"""Shift augmentation and ratio-stratified mini-batches over weak/synthetic/unlabeled pools."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .datamodel import DatasetManifest, Event, EventList

POOLS = ("weak", "synthetic", "unlabeled")


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 64
    n_weak: int = 12
    n_synthetic: int = 4
    n_unlabeled: int = 48

    def __post_init__(self):
        counts = (self.n_weak, self.n_synthetic, self.n_unlabeled)
        if min(counts) < 0 or sum(counts) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch composition {counts} does not add up to batch_size={self.batch_size}")

    def count(self, pool: str) -> int:
        return {"weak": self.n_weak, "synthetic": self.n_synthetic, "unlabeled": self.n_unlabeled}[pool]


@dataclass(frozen=True)
class AugmentSpec:
    time_steps: int = 90
    freq_steps: int = 8
    # original : augmented
    mix_ratio: tuple[int, int] = (8, 1)

    def __post_init__(self):
        object.__setattr__(self, "mix_ratio", tuple(self.mix_ratio))
        orig, aug = self.mix_ratio
        if orig < 0 or aug < 0 or orig + aug == 0:
            raise ValueError(f"invalid mix ratio {self.mix_ratio}")
        if self.time_steps < 0 or self.freq_steps < 0:
            raise ValueError("shift steps must be non-negative")

    @property
    def augment_probability(self) -> float:
        orig, aug = self.mix_ratio
        return aug / (orig + aug)

    def check_geometry(self, n_frames: int, n_bins: int) -> None:
        if not self.time_steps < n_frames:
            raise ValueError(f"time_steps={self.time_steps} must be < T={n_frames}")
        if not self.freq_steps < n_bins:
            raise ValueError(f"freq_steps={self.freq_steps} must be < F={n_bins}")


def time_shift(feature: np.ndarray, steps: int, grid: np.ndarray | None = None):
    """Circularly delay ``feature`` by ``steps`` frames.

    Output frame ``t`` is input frame ``(t - steps) mod T``.  When a strong-label
    grid at a coarser resolution ``T'`` is given it is shifted by
    ``round(steps * T' / T)`` frames.  Returns ``(shifted_feature, shifted_grid)``.
    """
    n_frames = feature.shape[0]
    if not 0 <= steps < n_frames:
        raise ValueError(f"time shift {steps} outside [0, {n_frames})")
    shifted = np.roll(feature, steps, axis=0)
    if grid is None:
        return shifted, None
    grid_steps = int(round(steps * grid.shape[0] / n_frames))
    return shifted, np.roll(grid, grid_steps, axis=0)


def freq_shift(feature: np.ndarray, steps: int) -> np.ndarray:
    """Circularly shift frequency bins: output bin ``f`` is input bin ``(f - steps) mod F``."""
    n_bins = feature.shape[1]
    if not 0 <= steps < n_bins:
        raise ValueError(f"frequency shift {steps} outside [0, {n_bins})")
    return np.roll(feature, steps, axis=1)


def shift_events(events: Sequence[Event], seconds: float, duration: float) -> EventList:
    """Move events forward by ``seconds`` with wrap-around at ``duration``.

    An event that crosses the clip end is split into a tail piece and a head piece,
    matching what a circular time shift does to the underlying frames.
    """
    out = []
    for ev in events:
        onset, offset = ev.onset + seconds, min(ev.offset, duration) + seconds
        if onset >= duration:
            out.append(Event(ev.class_index, onset - duration, offset - duration))
        elif offset > duration:
            out.append(Event(ev.class_index, onset, duration))
            out.append(Event(ev.class_index, 0.0, offset - duration))
        else:
            out.append(Event(ev.class_index, onset, offset))
    return tuple(sorted(out, key=Event.sort_key))


@dataclass(frozen=True)
class Batch:
    """One mini-batch; rows are ordered weak, then synthetic, then unlabeled."""

    clip_ids: tuple[str, ...]
    features: np.ndarray  # (B, T, F) float32
    pools: tuple[str, ...]
    weak_labels: np.ndarray  # (B, C) float32, NaN rows for unlabeled clips
    events: tuple[EventList | None, ...]
    augmented: np.ndarray  # (B,) bool

    def __len__(self) -> int:
        return len(self.clip_ids)

    @property
    def labeled_mask(self) -> np.ndarray:
        return np.array([p != "unlabeled" for p in self.pools])

    @property
    def synthetic_mask(self) -> np.ndarray:
        return np.array([p == "synthetic" for p in self.pools])


class _PoolCycler:
    """Without-replacement sampling that reshuffles each time the pool runs out."""

    def __init__(self, indices: Sequence[int], rng: np.random.Generator):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.rng = rng
        self.order = self.rng.permutation(self.indices)
        self.pos = 0

    def take(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.indices)
                self.pos = 0
            k = min(n - len(out), len(self.order) - self.pos)
            out.extend(int(i) for i in self.order[self.pos:self.pos + k])
            self.pos += k
        return out


def steps_per_epoch(manifest: DatasetManifest, spec: BatchSpec) -> int:
    """Epoch length: batches needed to pass once over the slowest-cycling pool."""
    pools = manifest.by_pool()
    steps = [-(-len(pools[p]) // spec.count(p)) for p in POOLS if spec.count(p) > 0]
    return max(steps)


def make_batches(
    manifest: DatasetManifest,
    spec: BatchSpec,
    aug: AugmentSpec | None = None,
    seed: int = 0,
    n_batches: int | None = None,
    cache: bool = True,
) -> Iterator[Batch]:
    """Yield seed-deterministic batches with the exact per-pool composition of ``spec``.

    Each clip is replaced by a shifted copy with probability ``aug.augment_probability``;
    the copy gets either the time or the frequency shift (chosen uniformly).  Strong
    labels follow time shifts, weak labels are unchanged.  The stream is infinite
    unless ``n_batches`` is given.
    """
    pools = manifest.by_pool()
    for name in POOLS:
        if spec.count(name) > 0 and not pools[name]:
            raise ValueError(f"empty/insufficient pool: batch spec needs {spec.count(name)} {name} clips but the manifest has none")
    if aug is not None:
        aug.check_geometry(manifest.geometry.n_frames, manifest.geometry.n_bins)

    root = np.random.SeedSequence(seed)
    pool_seeds = root.spawn(len(POOLS) + 1)
    cyclers = {name: _PoolCycler(pools[name], np.random.default_rng(s)) for name, s in zip(POOLS, pool_seeds)}
    aug_rng = np.random.default_rng(pool_seeds[-1])
    geometry = manifest.geometry
    n_classes = len(manifest.vocabulary)
    store: dict[int, np.ndarray] = {}

    def feature(i: int) -> np.ndarray:
        if not cache:
            return manifest.load_feature(i)
        if i not in store:
            store[i] = manifest.load_feature(i)
        return store[i]

    counter = itertools.count() if n_batches is None else range(n_batches)
    for _ in counter:
        ids, feats, pool_names, weak, events, flags = [], [], [], [], [], []
        for name in POOLS:
            for i in cyclers[name].take(spec.count(name)):
                entry = manifest.entries[i]
                x = feature(i)
                evs = entry.events
                augmented = False
                if aug is not None and aug_rng.random() < aug.augment_probability:
                    augmented = True
                    if aug_rng.random() < 0.5:
                        x, _ = time_shift(x, aug.time_steps)
                        if evs is not None:
                            evs = shift_events(evs, aug.time_steps * geometry.hop_seconds, geometry.duration)
                    else:
                        x = freq_shift(x, aug.freq_steps)
                ids.append(entry.clip_id)
                feats.append(x)
                pool_names.append(name)
                if entry.weak_label is None:
                    weak.append(np.full(n_classes, np.nan, dtype=np.float32))
                else:
                    weak.append(entry.weak_label.astype(np.float32))
                events.append(evs)
                flags.append(augmented)
        yield Batch(
            clip_ids=tuple(ids),
            features=np.stack(feats).astype(np.float32, copy=False),
            pools=tuple(pool_names),
            weak_labels=np.stack(weak),
            events=tuple(events),
            augmented=np.array(flags, dtype=bool),
        )

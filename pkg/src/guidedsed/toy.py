"""Synthetic "log-mel" clips with planted class patterns, for desk-scale runs.

Class ``c`` lights up its own frequency band with a class-specific temporal
texture (steady, pulsed, or rippled) over Gaussian background noise.  Event
boundaries sit on the feature hop grid so the planted activity matches the labels
exactly.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .datamodel import (
    ClassVocabulary,
    DatasetManifest,
    Event,
    FeatureGeometry,
    ManifestEntry,
    Source,
    save_manifest,
    weak_from_strong,
    write_feature,
)
from .inference import write_events

TOY_GEOMETRY = FeatureGeometry(n_frames=125, n_bins=16, hop_seconds=0.08)


def _band_profile(n_bins: int, n_classes: int, c: int) -> np.ndarray:
    centre = (c + 0.5) * n_bins / n_classes
    width = max(1.0, n_bins / (4.0 * n_classes))
    f = np.arange(n_bins)
    return np.exp(-0.5 * ((f - centre) / width) ** 2)


def _texture(c: int, n: int) -> np.ndarray:
    t = np.arange(n)
    kind = c % 3
    if kind == 0:
        return np.ones(n)
    if kind == 1:
        return np.where((t // 3) % 2 == 0, 1.0, 0.45)
    return 0.75 + 0.25 * np.cos(2 * np.pi * t / 7.0)


def sample_events(rng: np.random.Generator, n_classes: int, geometry: FeatureGeometry, max_events: int = 3, p_empty: float = 0.1):
    """Random non-overlapping-per-class events aligned to the hop grid."""
    if rng.random() < p_empty:
        return ()
    hop = geometry.hop_seconds
    n = geometry.n_frames
    events: list[Event] = []
    for _ in range(int(rng.integers(1, max_events + 1))):
        c = int(rng.integers(n_classes))
        length = int(rng.integers(round(0.8 / hop), round(4.0 / hop) + 1))
        length = min(length, n - 1)
        start = int(rng.integers(0, n - length + 1))
        stop = start + length
        clash = any(
            e.class_index == c and start <= round(e.offset / hop) and round(e.onset / hop) <= stop for e in events
        )
        if not clash:
            events.append(Event(c, start * hop, stop * hop))
    return tuple(sorted(events, key=Event.sort_key))


def render(events, n_classes: int, geometry: FeatureGeometry, rng: np.random.Generator, snr: float = 2.5) -> np.ndarray:
    x = rng.normal(0.0, 1.0, size=(geometry.n_frames, geometry.n_bins))
    for ev in events:
        start = int(round(ev.onset / geometry.hop_seconds))
        stop = int(round(ev.offset / geometry.hop_seconds))
        amp = snr * rng.uniform(0.8, 1.2)
        shape = _texture(ev.class_index, stop - start)[:, None] * _band_profile(geometry.n_bins, n_classes, ev.class_index)[None, :]
        x[start:stop] += amp * shape
    return x.astype(np.float32)


def class_names(n_classes: int) -> tuple[str, ...]:
    return tuple(f"class_{c}" for c in range(n_classes))


def generate_toy(
    out_dir: os.PathLike | str,
    n_weak: int = 30,
    n_synthetic: int = 20,
    n_unlabeled: int = 150,
    n_valid: int = 50,
    n_test: int = 50,
    n_classes: int = 3,
    seed: int = 0,
    geometry: FeatureGeometry = TOY_GEOMETRY,
) -> dict[str, Path]:
    """Write features and manifests; returns the paths of everything produced.

    ``train.tsv`` mixes weak, synthetic and unlabeled clips; ``valid.tsv`` and
    ``test.tsv`` hold strongly labeled held-out clips (also exported as
    ``*_ref.tsv`` event files).  The true events of the unlabeled clips go to
    ``unlabeled_truth.tsv`` and are never read by training.
    """
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    vocab = ClassVocabulary(class_names(n_classes))

    def make(prefix: str, count: int, source: Source, keep: str):
        entries, truth = [], {}
        for i in range(count):
            cid = f"{prefix}_{i:05d}"
            events = sample_events(rng, n_classes, geometry)
            path = feat_dir / f"{cid}.f32"
            write_feature(path, render(events, n_classes, geometry, rng))
            truth[cid] = events
            if keep == "weak":
                entries.append(ManifestEntry(cid, path, source, weak_from_strong(events, n_classes), None))
            elif keep == "strong":
                entries.append(ManifestEntry(cid, path, source, weak_from_strong(events, n_classes), events))
            else:
                entries.append(ManifestEntry(cid, path, source))
        return entries, truth

    weak, _ = make("weak", n_weak, Source.WEAK, "weak")
    synth, _ = make("synth", n_synthetic, Source.SYNTHETIC, "strong")
    unl, unl_truth = make("unl", n_unlabeled, Source.UNLABELED, "none")
    valid, valid_truth = make("valid", n_valid, Source.SYNTHETIC, "strong")
    test, test_truth = make("test", n_test, Source.SYNTHETIC, "strong")

    paths = {
        "train": out / "train.tsv",
        "valid": out / "valid.tsv",
        "test": out / "test.tsv",
        "valid_ref": out / "valid_ref.tsv",
        "test_ref": out / "test_ref.tsv",
        "unlabeled_truth": out / "unlabeled_truth.tsv",
    }
    save_manifest(DatasetManifest(tuple(weak + synth + unl), vocab, geometry), paths["train"])
    save_manifest(DatasetManifest(tuple(valid), vocab, geometry), paths["valid"])
    save_manifest(DatasetManifest(tuple(test), vocab, geometry), paths["test"])
    write_events(paths["valid_ref"], valid_truth, vocab.names)
    write_events(paths["test_ref"], test_truth, vocab.names)
    write_events(paths["unlabeled_truth"], unl_truth, vocab.names)
    return paths

"""Domain types, label conversions and manifest (de)serialization.

A manifest is a UTF-8 TSV with the header ``clip_id feature_path source labels``
and a JSON sidecar (same stem, ``.json``) that carries the class vocabulary and
the feature geometry.  Feature files are raw little-endian float32, row-major
``T x F``.
"""
from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_HEADER = ("clip_id", "feature_path", "source", "labels")


class ManifestError(ValueError):
    """Raised for malformed manifests, sidecars or feature files."""


class Source(str, Enum):
    WEAK = "weak"
    SYNTHETIC = "synthetic"
    UNLABELED = "unlabeled"
    SEPARATED = "separated"


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("vocabulary needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        for name in self.names:
            if not name or any(ch in name for ch in ",;:\t\n"):
                raise ValueError(f"invalid class name {name!r}")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class name {name!r}") from None


@dataclass(frozen=True)
class Event:
    """One annotated or detected event, times in seconds."""

    class_index: int
    onset: float
    offset: float

    def __post_init__(self):
        if self.class_index < 0:
            raise ValueError(f"negative class index {self.class_index}")
        if not (self.onset >= 0 and math.isfinite(self.offset) and self.offset > self.onset):
            raise ValueError(f"invalid event times ({self.onset}, {self.offset})")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def sort_key(self):
        return (self.onset, self.offset, self.class_index)


EventList = tuple[Event, ...]


def make_events(items: Iterable[tuple[int, float, float]]) -> EventList:
    """Build an EventList from ``(class_index, onset, offset)`` triples."""
    return tuple(Event(int(c), float(on), float(off)) for c, on, off in items)


@dataclass(frozen=True)
class FeatureGeometry:
    n_frames: int = 500
    n_bins: int = 64
    hop_seconds: float = 0.02

    def __post_init__(self):
        if self.n_frames < 1 or self.n_bins < 1 or not self.hop_seconds > 0:
            raise ValueError(f"invalid feature geometry {self}")

    @property
    def duration(self) -> float:
        return self.n_frames * self.hop_seconds


@dataclass(frozen=True, eq=False)
class ClipRecord:
    clip_id: str
    feature: np.ndarray
    source: Source
    weak_label: np.ndarray | None = None
    events: EventList | None = None

    def __post_init__(self):
        source = Source(self.source)
        object.__setattr__(self, "source", source)
        feature = np.asarray(self.feature)
        if feature.ndim != 2:
            raise ValueError(f"{self.clip_id}: feature must be T x F, got shape {feature.shape}")
        if not np.all(np.isfinite(feature)):
            raise ValueError(f"{self.clip_id}: feature has non-finite values")
        object.__setattr__(self, "feature", feature)
        if source is Source.WEAK and self.weak_label is None:
            raise ValueError(f"{self.clip_id}: weak clip without weak label")
        if source is Source.SYNTHETIC and self.events is None:
            raise ValueError(f"{self.clip_id}: synthetic clip without events")
        if source is Source.UNLABELED and (self.weak_label is not None or self.events is not None):
            raise ValueError(f"{self.clip_id}: unlabeled clip carries labels")


def weak_from_strong(events: Sequence[Event], n_classes: int) -> np.ndarray:
    """Clip-level presence vector of the classes occurring in ``events``."""
    out = np.zeros(n_classes, dtype=np.uint8)
    for ev in events:
        if ev.class_index >= n_classes:
            raise ValueError(f"class index {ev.class_index} out of range for {n_classes} classes")
        out[ev.class_index] = 1
    return out


def events_to_frame_grid(
    events: Sequence[Event], n_frames: int, frame_rate: float, n_classes: int
) -> np.ndarray:
    """Rasterize events onto a ``n_frames x n_classes`` binary grid.

    Frame ``t`` covers ``[t / frame_rate, (t + 1) / frame_rate)`` and is set for
    class ``c`` when any class-``c`` event overlaps it.
    """
    if not frame_rate > 0:
        raise ValueError("frame_rate must be positive")
    grid = np.zeros((n_frames, n_classes), dtype=np.uint8)
    for ev in events:
        if ev.class_index >= n_classes:
            raise ValueError(f"class index {ev.class_index} out of range for {n_classes} classes")
        # 1e-9 absorbs float noise such as 0.3 * 10 == 3.0000000000000004
        start = math.floor(ev.onset * frame_rate + 1e-9)
        stop = math.ceil(ev.offset * frame_rate - 1e-9)
        stop = max(stop, start + 1)
        if stop > n_frames:
            warnings.warn(
                f"event {ev} extends past clip end ({n_frames / frame_rate:.3f}s); clipped",
                stacklevel=2,
            )
            stop = n_frames
        if start < n_frames:
            grid[start:stop, ev.class_index] = 1
    return grid


def format_labels(source: Source, weak_label, events, vocab: ClassVocabulary) -> str:
    if events is not None:
        return ";".join(f"{vocab.names[e.class_index]}:{e.onset!r}:{e.offset!r}" for e in events)
    if weak_label is not None:
        return ",".join(vocab.names[i] for i in np.flatnonzero(weak_label))
    return ""


def parse_labels(text: str, source: Source, vocab: ClassVocabulary):
    """Return ``(weak_label, events)`` for a manifest label cell."""
    text = text.strip()
    strong = source is Source.SYNTHETIC or (source is Source.SEPARATED and ":" in text)
    if source is Source.UNLABELED or (source is Source.SEPARATED and not text):
        if text:
            raise ManifestError("unlabeled clip must have an empty labels column")
        return None, None
    if strong:
        items = []
        for triple in filter(None, (t.strip() for t in text.split(";"))):
            parts = triple.split(":")
            if len(parts) != 3:
                raise ManifestError(f"bad strong label {triple!r}, expected class:onset:offset")
            name, onset, offset = parts
            try:
                items.append(Event(vocab.index(name), float(onset), float(offset)))
            except KeyError as exc:
                raise ManifestError(str(exc.args[0])) from None
            except ValueError as exc:
                raise ManifestError(f"bad strong label {triple!r}: {exc}") from None
        events = tuple(sorted(items, key=Event.sort_key))
        return weak_from_strong(events, len(vocab)), events
    weak = np.zeros(len(vocab), dtype=np.uint8)
    for name in filter(None, (t.strip() for t in text.split(","))):
        try:
            weak[vocab.index(name)] = 1
        except KeyError as exc:
            raise ManifestError(str(exc.args[0])) from None
    return weak, None


@dataclass(frozen=True, eq=False)
class ManifestEntry:
    clip_id: str
    feature_path: Path | None
    source: Source
    weak_label: np.ndarray | None = None
    events: EventList | None = None

    @property
    def is_labeled(self) -> bool:
        return self.weak_label is not None

    @property
    def pool(self) -> str:
        """Sampling pool: ``weak``, ``synthetic`` (strong labels) or ``unlabeled``."""
        if self.events is not None:
            return "synthetic"
        if self.weak_label is not None:
            return "weak"
        return "unlabeled"

    def __eq__(self, other):
        if not isinstance(other, ManifestEntry):
            return NotImplemented
        return (
            self.clip_id == other.clip_id
            and self.feature_path == other.feature_path
            and self.source == other.source
            and _arrays_equal(self.weak_label, other.weak_label)
            and self.events == other.events
        )


def _arrays_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return bool(np.array_equal(a, b))


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    vocabulary: ClassVocabulary
    geometry: FeatureGeometry = field(default_factory=FeatureGeometry)
    # clip_id -> feature, for manifests built from in-memory records
    arrays: dict[str, np.ndarray] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for entry in self.entries:
            if entry.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {entry.clip_id!r}")
            seen.add(entry.clip_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_pool(self) -> dict[str, list[int]]:
        pools: dict[str, list[int]] = {"weak": [], "synthetic": [], "unlabeled": []}
        for i, entry in enumerate(self.entries):
            pools[entry.pool].append(i)
        return pools

    def load_feature(self, index: int) -> np.ndarray:
        entry = self.entries[index]
        if self.arrays is not None and entry.clip_id in self.arrays:
            return self.arrays[entry.clip_id]
        return read_feature(entry.feature_path, self.geometry)

    @classmethod
    def from_records(cls, records: Sequence[ClipRecord], vocabulary: ClassVocabulary, hop_seconds: float = 0.02):
        """Wrap in-memory clips; all features must share one ``T x F`` shape."""
        if not records:
            raise ValueError("no records given")
        shapes = {r.feature.shape for r in records}
        if len(shapes) != 1:
            raise ValueError(f"records have differing feature shapes {sorted(shapes)}")
        (n_frames, n_bins), = shapes
        entries, arrays = [], {}
        for r in records:
            weak = r.weak_label
            if weak is None and r.events is not None:
                weak = weak_from_strong(r.events, len(vocabulary))
            entries.append(ManifestEntry(r.clip_id, None, r.source, weak, r.events))
            arrays[r.clip_id] = np.asarray(r.feature, dtype=np.float32)
        return cls(tuple(entries), vocabulary, FeatureGeometry(n_frames, n_bins, hop_seconds), arrays)

    def clip_record(self, index: int) -> ClipRecord:
        e = self.entries[index]
        return ClipRecord(e.clip_id, self.load_feature(index), e.source, e.weak_label, e.events)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest(tuple(self.entries[i] for i in indices), self.vocabulary, self.geometry, self.arrays)


def read_feature(path: os.PathLike | str, geometry: FeatureGeometry) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    expected = geometry.n_frames * geometry.n_bins
    if data.size != expected:
        raise ManifestError(f"{path}: expected {expected} float32 values, found {data.size}")
    feature = data.reshape(geometry.n_frames, geometry.n_bins).astype(np.float32)
    if not np.all(np.isfinite(feature)):
        raise ManifestError(f"{path}: feature has non-finite values")
    return feature


def write_feature(path: os.PathLike | str, feature: np.ndarray) -> None:
    np.ascontiguousarray(feature, dtype="<f4").tofile(path)


def sidecar_path(manifest_path: os.PathLike | str) -> Path:
    return Path(manifest_path).with_suffix(".json")


def load_manifest(path: os.PathLike | str) -> DatasetManifest:
    """Parse a manifest TSV and its JSON sidecar, checking every invariant."""
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise ManifestError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
        vocab = ClassVocabulary(tuple(meta["classes"]))
        geometry = FeatureGeometry(int(meta["n_frames"]), int(meta["n_bins"]), float(meta["hop_seconds"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{side}: invalid sidecar ({exc})") from None

    root = path.parent
    entries = []
    seen = set()
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: header must be {' '.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) == 3:
                row = row + [""]
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 columns, found {len(row)}")
            clip_id, feature_path, source_text, labels = (c.strip() for c in row)
            if not clip_id:
                raise ManifestError(f"{path}:{lineno}: empty clip_id")
            if clip_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            try:
                source = Source(source_text)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: unknown source {source_text!r}") from None
            try:
                weak, events = parse_labels(labels, source, vocab)
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            fpath = Path(feature_path)
            if not fpath.is_absolute():
                fpath = root / fpath
            fpath = fpath.resolve()
            if not fpath.is_file():
                raise ManifestError(f"{path}:{lineno}: dangling feature path {feature_path!r}")
            entries.append(ManifestEntry(clip_id, fpath, source, weak, events))
    return DatasetManifest(tuple(entries), vocab, geometry)


def save_manifest(manifest: DatasetManifest, path: os.PathLike | str) -> None:
    """Write ``manifest`` as TSV + sidecar; feature paths become relative when possible."""
    path = Path(path)
    root = path.parent.resolve()
    rows = []
    for e in manifest.entries:
        fpath = Path(e.feature_path).resolve()
        try:
            shown = os.path.relpath(fpath, root)
        except ValueError:
            shown = str(fpath)
        rows.append((e.clip_id, shown, e.source.value, format_labels(e.source, e.weak_label, e.events, manifest.vocabulary)))
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    g = manifest.geometry
    meta = {
        "classes": list(manifest.vocabulary.names),
        "n_frames": g.n_frames,
        "n_bins": g.n_bins,
        "hop_seconds": g.hop_seconds,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

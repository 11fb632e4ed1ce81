"""Collar-based event F1 (per class and macro-averaged)."""
from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

from .datamodel import Event


@dataclass(frozen=True)
class CollarSpec:
    onset: float = 0.200
    offset_min: float = 0.200
    offset_fraction: float = 0.20

    def __post_init__(self):
        if not (self.onset > 0 and self.offset_min > 0 and self.offset_fraction >= 0):
            raise ValueError("collars must be positive")

    def offset_collar(self, ref: Event) -> float:
        return max(self.offset_min, self.offset_fraction * ref.duration)

    def eligible(self, ref: Event, est: Event) -> bool:
        return (
            ref.class_index == est.class_index
            and abs(est.onset - ref.onset) <= self.onset
            and abs(est.offset - ref.offset) <= self.offset_collar(ref)
        )


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "Counts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def match_events(ref: Sequence[Event], est: Sequence[Event], collars: CollarSpec = CollarSpec()) -> dict[int, Counts]:
    """Greedy one-to-one matching within a clip, per class.

    References are visited in onset order and each takes the first still-unused
    eligible estimate (estimates also in onset order).
    """
    out: dict[int, Counts] = {}
    for c in sorted({e.class_index for e in ref} | {e.class_index for e in est}):
        refs = sorted((e for e in ref if e.class_index == c), key=Event.sort_key)
        ests = sorted((e for e in est if e.class_index == c), key=Event.sort_key)
        used = [False] * len(ests)
        tp = 0
        for r in refs:
            for j, e in enumerate(ests):
                if not used[j] and collars.eligible(r, e):
                    used[j] = True
                    tp += 1
                    break
        out[c] = Counts(tp, len(ests) - tp, len(refs) - tp)
    return out


@dataclass(frozen=True)
class ClassScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class EvalReport:
    per_class: dict[str, ClassScore]
    macro_f1: float

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {"tp": s.tp, "fp": s.fp, "fn": s.fn, "precision": s.precision, "recall": s.recall, "f1": s.f1}
                for name, s in self.per_class.items()
            },
        }

    def write_json(self, path: os.PathLike | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def event_based_macro_f1(
    refs: Mapping[str, Sequence[Event]],
    ests: Mapping[str, Sequence[Event]],
    collars: CollarSpec = CollarSpec(),
    class_names: Sequence[str] | None = None,
) -> EvalReport:
    """Aggregate per-class counts over clips, then average per-class F1.

    Classes that occur in neither references nor estimates are left out of the mean.
    """
    totals: dict[int, Counts] = defaultdict(Counts)
    for cid in sorted(set(refs) | set(ests)):
        for c, counts in match_events(refs.get(cid, ()), ests.get(cid, ()), collars).items():
            totals[c] += counts
    per_class = {}
    for c in sorted(totals):
        name = class_names[c] if class_names is not None else str(c)
        t = totals[c]
        per_class[name] = ClassScore(t.tp, t.fp, t.fn)
    macro = sum(s.f1 for s in per_class.values()) / len(per_class) if per_class else 0.0
    return EvalReport(per_class, macro)

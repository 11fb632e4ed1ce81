"""Weighted fusion of several systems' probabilities and validation weight tuning.

SED systems and SS-SED systems (trained and run on separated features) are fused
the same way; ``kind`` only records provenance.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import EventList
from .evaluation import CollarSpec, event_based_macro_f1
from .inference import DecodeSpec, PredictionSet, load_predictions

KINDS = ("sed", "ss_sed")


@dataclass(frozen=True)
class EnsembleMember:
    path: str
    weight: float
    kind: str = "sed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"member kind must be one of {KINDS}, got {self.kind!r}")
        if not self.weight >= 0:
            raise ValueError("member weights must be non-negative")


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[EnsembleMember, ...]

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        total = sum(m.weight for m in self.members)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights sum to {total!r}, expected 1")

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(m.weight for m in self.members)

    @classmethod
    def uniform(cls, paths: Sequence[str], kinds: Sequence[str] | None = None) -> "EnsembleSpec":
        kinds = kinds or ["sed"] * len(paths)
        n = len(paths)
        return cls(tuple(EnsembleMember(str(p), 1.0 / n, k) for p, k in zip(paths, kinds)))

    def to_json(self, path: os.PathLike | str) -> None:
        data = {"members": [{"path": m.path, "weight": m.weight, "kind": m.kind} for m in self.members]}
        Path(path).write_text(json.dumps(data, indent=2) + "\n")

    @classmethod
    def from_json(cls, path: os.PathLike | str) -> "EnsembleSpec":
        path = Path(path)
        data = json.loads(path.read_text())
        members = []
        for m in data["members"]:
            p = Path(m["path"])
            if not p.is_absolute():
                p = path.parent / p
            members.append(EnsembleMember(str(p), float(m["weight"]), m.get("kind", "sed")))
        return cls(tuple(members))


def fuse_sets(sets: Sequence[PredictionSet], weights: Sequence[float]) -> PredictionSet:
    """Elementwise ``sum_i w_i P_i`` over frame and clip probabilities."""
    if not sets:
        raise ValueError("nothing to fuse")
    if len(sets) != len(weights):
        raise ValueError("one weight per member is required")
    ref = sets[0]
    for s in sets[1:]:
        if set(s.frame) != set(ref.frame):
            raise ValueError("members cover different clip sets")
        if s.classes != ref.classes:
            raise ValueError("members use different class vocabularies")
        if abs(s.frame_rate - ref.frame_rate) > 1e-9:
            raise ValueError("members use different frame grids")
    frame, clip = {}, {}
    for cid in ref.clip_ids:
        shapes = {s.frame[cid].shape for s in sets}
        if len(shapes) != 1:
            raise ValueError(f"{cid}: member frame shapes differ {sorted(shapes)}")
        frame[cid] = sum(w * s.frame[cid].astype(np.float64) for w, s in zip(weights, sets)).astype(np.float32)
        clip[cid] = sum(w * s.clip[cid].astype(np.float64) for w, s in zip(weights, sets)).astype(np.float32)
    return PredictionSet(ref.classes, ref.frame_rate, frame, clip)


def ensemble_fuse(spec: EnsembleSpec, sets: Sequence[PredictionSet] | None = None) -> PredictionSet:
    """Fuse the members of ``spec`` (loaded from their directories unless given)."""
    if sets is None:
        sets = [load_predictions(m.path) for m in spec.members]
    return fuse_sets(sets, spec.weights)


def simplex_grid(n: int, step: float) -> list[tuple[float, ...]]:
    """All weight vectors on the ``n``-simplex whose entries are multiples of ``step``."""
    k = round(1.0 / step)
    if k < 1 or abs(k * step - 1.0) > 1e-9:
        raise ValueError(f"grid_step {step} must divide 1")
    points = []
    for combo in itertools.product(range(k + 1), repeat=n - 1):
        rest = k - sum(combo)
        if rest >= 0:
            points.append(tuple(c / k for c in combo) + (rest / k,))
    return points


def _tie_key(weights: Sequence[float]) -> tuple:
    u = 1.0 / len(weights)
    return (sum((w - u) ** 2 for w in weights), tuple(-w for w in weights))


def tune_weights(
    members: Sequence[PredictionSet],
    refs: Mapping[str, EventList],
    paths: Sequence[str] | None = None,
    kinds: Sequence[str] | None = None,
    grid_step: float = 0.05,
    decode: DecodeSpec = DecodeSpec(),
    collars: CollarSpec = CollarSpec(),
    max_exhaustive: int = 4,
    return_score: bool = False,
):
    """Pick simplex weights maximizing validation event-based macro F1.

    Up to ``max_exhaustive`` members the full grid is searched; beyond that a
    coordinate ascent over pairwise weight transfers starts from the best of the
    uniform and single-member vertices.  Ties prefer weights closest to uniform.
    """
    if not refs:
        raise ValueError("empty validation set")
    n = len(members)
    if n == 0:
        raise ValueError("no members to tune")
    clip_ids = set(refs)
    missing = clip_ids - set(members[0].frame)
    if missing:
        raise ValueError(f"validation clips without predictions: {sorted(missing)[:3]}")
    classes = members[0].classes
    cache: dict[tuple, float] = {}

    def score(w: tuple[float, ...]) -> float:
        key = tuple(round(x, 12) for x in w)
        if key not in cache:
            fused = _restrict(fuse_sets(members, w), clip_ids)
            cache[key] = event_based_macro_f1(refs, fused.decode(decode), collars, classes).macro_f1
        return cache[key]

    def better(w, best_w, best_s):
        s = score(w)
        if s > best_s + 1e-12:
            return True
        return abs(s - best_s) <= 1e-12 and _tie_key(w) < _tie_key(best_w)

    k = round(1.0 / grid_step)
    if n <= max_exhaustive:
        candidates = simplex_grid(n, grid_step)
    else:
        if abs(k * grid_step - 1.0) > 1e-9:
            raise ValueError(f"grid_step {grid_step} must divide 1")
        candidates = [tuple(1.0 if i == j else 0.0 for i in range(n)) for j in range(n)]
        candidates.append(tuple([1.0 / n] * n))
    best_w, best_s = candidates[0], score(candidates[0])
    for w in candidates[1:]:
        if better(w, best_w, best_s):
            best_w, best_s = w, score(w)

    if n > max_exhaustive:
        improved = True
        while improved:
            improved = False
            for i, j in itertools.permutations(range(n), 2):
                if best_w[i] < grid_step - 1e-12:
                    continue
                w = list(best_w)
                w[i] = round(w[i] - grid_step, 12)
                w[j] = round(w[j] + grid_step, 12)
                w = tuple(w)
                if score(w) > best_s + 1e-12:
                    best_w, best_s = w, score(w)
                    improved = True

    # renormalize exactly so the weights sum to one
    total = sum(best_w)
    best_w = tuple(x / total for x in best_w)
    paths = list(paths) if paths is not None else [f"member_{i}" for i in range(n)]
    kinds = list(kinds) if kinds is not None else ["sed"] * n
    spec = EnsembleSpec(tuple(EnsembleMember(p, w, kd) for p, w, kd in zip(paths, best_w, kinds)))
    return (spec, best_s) if return_score else spec


def _restrict(preds: PredictionSet, clip_ids) -> PredictionSet:
    keep = [c for c in preds.clip_ids if c in clip_ids]
    return PredictionSet(preds.classes, preds.frame_rate, {c: preds.frame[c] for c in keep}, {c: preds.clip[c] for c in keep})

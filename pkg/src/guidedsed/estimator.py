"""scikit-learn style front end to guided-learning sound event detection."""
from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .datamodel import ClassVocabulary, ClipRecord, DatasetManifest, EventList, load_manifest
from .datapipe import AugmentSpec, BatchSpec
from .evaluation import CollarSpec, event_based_macro_f1
from .inference import DecodeSpec, FusionSpec, decode_events, predict_arrays
from .nets import PS_ENCODER, PT_ENCODER, BlockConfig, EncoderConfig, ModelConfig
from .training import TrainConfig, train


def check_features(X, n_frames: int | None = None, n_bins: int | None = None) -> np.ndarray:
    """Validate a ``(n_clips, T, F)`` feature stack and return it as float32."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected features of shape (n_clips, T, F), got {X.shape}")
    if n_frames is not None and X.shape[1:] != (n_frames, n_bins):
        raise ValueError(f"expected clips of shape ({n_frames}, {n_bins}), got {X.shape[1:]}")
    return X


def _encoder(blocks, default: EncoderConfig) -> EncoderConfig:
    if blocks is None:
        return default
    return EncoderConfig(tuple(BlockConfig(*b) for b in blocks), default.truncate)


class GuidedSED(BaseEstimator):
    """Teacher/student sound event detector with multi-branch pooling.

    ``fit`` takes a :class:`DatasetManifest`, a manifest path or a list of
    :class:`ClipRecord`; prediction methods take ``(n_clips, T, F)`` arrays.

    Parameters mirror the training, batching, augmentation and decoding
    settings; ``ps_blocks`` / ``pt_blocks`` are sequences of
    ``(channels, kernel, time_pool, freq_pool)`` and default to the standard
    3-block student and 9-block teacher.
    """

    def __init__(
        self,
        aux="i_gap",
        sedb=False,
        ps_blocks=None,
        pt_blocks=None,
        epochs=120,
        warmup_s=15,
        lr0=0.0018,
        lr_decay=0.2,
        a=1.0,
        b=None,
        sedb_weight=1.0,
        batch_size=64,
        n_weak=12,
        n_synthetic=4,
        n_unlabeled=48,
        augment=True,
        time_steps=90,
        freq_steps=8,
        fusion_alpha=0.5,
        clip_threshold=0.5,
        frame_threshold=0.5,
        median_window=1,
        hop_seconds=0.02,
        classes=None,
        random_state=0,
    ):
        self.aux = aux
        self.sedb = sedb
        self.ps_blocks = ps_blocks
        self.pt_blocks = pt_blocks
        self.epochs = epochs
        self.warmup_s = warmup_s
        self.lr0 = lr0
        self.lr_decay = lr_decay
        self.a = a
        self.b = b
        self.sedb_weight = sedb_weight
        self.batch_size = batch_size
        self.n_weak = n_weak
        self.n_synthetic = n_synthetic
        self.n_unlabeled = n_unlabeled
        self.augment = augment
        self.time_steps = time_steps
        self.freq_steps = freq_steps
        self.fusion_alpha = fusion_alpha
        self.clip_threshold = clip_threshold
        self.frame_threshold = frame_threshold
        self.median_window = median_window
        self.hop_seconds = hop_seconds
        self.classes = classes
        self.random_state = random_state

    def _as_manifest(self, X) -> DatasetManifest:
        if isinstance(X, DatasetManifest):
            return X
        if isinstance(X, (str, os.PathLike)):
            return load_manifest(X)
        records = list(X)
        if records and all(isinstance(r, ClipRecord) for r in records):
            if self.classes is None:
                raise ValueError("fitting on ClipRecords requires the `classes` parameter")
            return DatasetManifest.from_records(records, ClassVocabulary(tuple(self.classes)), self.hop_seconds)
        raise TypeError("X must be a DatasetManifest, a manifest path or a list of ClipRecord")

    def fit(self, X, y=None, valid=None):
        manifest = self._as_manifest(X)
        g = manifest.geometry
        n_classes = len(manifest.vocabulary)
        aux = None if self.aux in (None, "none") else self.aux
        ps_cfg = ModelConfig.ps(n_classes, aux, self.sedb, _encoder(self.ps_blocks, PS_ENCODER), g.n_frames, g.n_bins)
        pt_cfg = ModelConfig.pt(n_classes, _encoder(self.pt_blocks, PT_ENCODER), g.n_frames, g.n_bins)
        cfg = TrainConfig(
            epochs=self.epochs, warmup_s=self.warmup_s, lr0=self.lr0, lr_decay=self.lr_decay,
            a=self.a, b=self.b, sedb_weight=self.sedb_weight, seed=self.random_state,
        )
        spec = BatchSpec(self.batch_size, self.n_weak, self.n_synthetic, self.n_unlabeled)
        aug = AugmentSpec(self.time_steps, self.freq_steps) if self.augment else None
        valid_manifest = self._as_manifest(valid) if valid is not None else None
        result = train(manifest, ps_cfg, pt_cfg, cfg, spec, aug, valid_manifest=valid_manifest)
        self.ps_ = result.ps
        self.pt_ = result.pt
        self.history_ = result.history
        self.classes_ = manifest.vocabulary.names
        self.n_frames_in_, self.n_bins_in_ = g.n_frames, g.n_bins
        self.frame_rate_ = result.ps.output_frames / g.duration
        return self

    def _outputs(self, X):
        check_is_fitted(self, "ps_")
        X = check_features(X, self.n_frames_in_, self.n_bins_in_)
        return predict_arrays(self.ps_, X, FusionSpec(self.fusion_alpha))

    def predict_proba(self, X) -> np.ndarray:
        """Detection frame probabilities, ``(n_clips, T', C)``."""
        return self._outputs(X)[0]

    def predict_tags(self, X) -> np.ndarray:
        """Clip-level tag probabilities, ``(n_clips, C)``."""
        return self._outputs(X)[1]

    def predict(self, X) -> list[EventList]:
        frame, clip = self._outputs(X)
        spec = DecodeSpec(self.clip_threshold, self.frame_threshold, self.median_window, self.frame_rate_)
        return [decode_events(f, c, spec) for f, c in zip(frame, clip)]

    def score(self, X, y, collars: CollarSpec = CollarSpec()) -> float:
        """Event-based macro F1 of ``predict(X)`` against reference event lists ``y``."""
        est = self.predict(X)
        if len(est) != len(y):
            raise ValueError("X and y have different lengths")
        refs = {str(i): tuple(r) for i, r in enumerate(y)}
        ests = {str(i): e for i, e in enumerate(est)}
        return event_based_macro_f1(refs, ests, collars, self.classes_).macro_f1

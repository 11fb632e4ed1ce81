"""Guided-learning sound event detection with multi-branch pooling and ensembling."""
from .datamodel import (
    ClassVocabulary,
    ClipRecord,
    DatasetManifest,
    Event,
    FeatureGeometry,
    Source,
    events_to_frame_grid,
    load_manifest,
    save_manifest,
    weak_from_strong,
)
from .datapipe import AugmentSpec, BatchSpec, freq_shift, make_batches, time_shift
from .ensemble import EnsembleMember, EnsembleSpec, ensemble_fuse, tune_weights
from .estimator import GuidedSED
from .evaluation import CollarSpec, event_based_macro_f1, match_events
from .inference import DecodeSpec, FusionSpec, decode_events, fuse_branches, predict
from .nets import BranchKind, ModelConfig, SEDNet, build_model, gap_pool, gmp_pool
from .training import TrainConfig, alpha_unlabeled, bce, lr_at, pseudo_label, train

__version__ = "0.1.0"

"""Command line: ``gen-toy``, ``train``, ``predict``, ``evaluate``, ``fuse``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, require, toy_config
from .datamodel import ClassVocabulary, ManifestError, load_manifest
from .ensemble import EnsembleSpec, ensemble_fuse, tune_weights
from .evaluation import CollarSpec, event_based_macro_f1
from .inference import load_predictions, predict, read_events, write_predictions
from .toy import generate_toy
from .training import train

log = logging.getLogger("guidedsed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_toy(args) -> int:
    if not args.out:
        raise UsageError("gen-toy needs --out")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    paths = generate_toy(
        out, args.n_weak, args.n_synthetic, args.n_unlabeled, args.n_valid, args.n_test, args.classes, seed
    )
    cfg = toy_config(epochs=args.epochs).with_seed(seed)
    cfg = dataclasses.replace(
        cfg, paths=dataclasses.replace(cfg.paths, train_manifest="train.tsv", valid_manifest="valid.tsv", test_manifest="test.tsv", out_dir="run")
    )
    cfg.write(out / "config.toml")
    print(f"wrote {len(paths)} files and config.toml to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    require(cfg, "train_manifest")
    out = Path(args.out or cfg.paths.out_dir or "")
    if not (args.out or cfg.paths.out_dir):
        raise ConfigError("missing config field paths.out_dir (or pass --out)")
    manifest = load_manifest(cfg.paths.train_manifest)
    valid = load_manifest(cfg.paths.valid_manifest) if cfg.paths.valid_manifest else None
    g = manifest.geometry
    n_classes = len(manifest.vocabulary)
    result = train(
        manifest,
        cfg.ps.student(n_classes, g.n_frames, g.n_bins),
        cfg.pt.teacher(n_classes, g.n_frames, g.n_bins),
        cfg.train,
        cfg.batch,
        cfg.augment if cfg.augment_enabled else None,
        out,
        valid,
    )
    cfg.write(out / "config.toml")
    last = result.history[-1]
    print(f"trained {cfg.train.epochs} epochs; final ps loss {last['ps_total']:.4f}, pt loss {last['pt_total']:.4f}; checkpoints in {out}")
    return 0


def cmd_predict(args) -> int:
    cfg = _load(args)
    if not args.out:
        raise UsageError("predict needs --out")
    checkpoint = args.checkpoint
    if checkpoint is None:
        require(cfg, "out_dir")
        checkpoint = Path(cfg.paths.out_dir) / "ps"
    manifest_path = args.manifest
    if manifest_path is None:
        require(cfg, "test_manifest")
        manifest_path = cfg.paths.test_manifest
    manifest = load_manifest(manifest_path)
    preds = predict(checkpoint, manifest, args.out, cfg.decode, cfg.fusion)
    print(f"predicted {len(preds.clip_ids)} clips into {args.out}")
    return 0


def _event_names(path) -> set[str]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()[1:]
    return {ln.split("\t")[3].strip() for ln in lines if ln.strip()}


def _events_path(path: str) -> Path:
    p = Path(path)
    return p / "events.tsv" if p.is_dir() else p


def cmd_evaluate(args) -> int:
    if not (args.ref and args.est):
        raise UsageError("evaluate needs --ref and --est")
    ref_path, est_path = _events_path(args.ref), _events_path(args.est)
    names = sorted(_event_names(ref_path) | _event_names(est_path))
    if not names:
        raise UsageError("no events in either file")
    vocab = ClassVocabulary(tuple(names))
    refs, _ = read_events(ref_path, vocab)
    ests, _ = read_events(est_path, vocab)
    collars = CollarSpec(args.onset_collar, args.offset_collar, args.offset_fraction)
    report = event_based_macro_f1(refs, ests, collars, vocab.names)
    if args.out:
        report.write_json(args.out)
    for name, s in report.per_class.items():
        print(f"{name}\tP={s.precision:.3f}\tR={s.recall:.3f}\tF1={s.f1:.3f}")
    print(f"macro_f1\t{report.macro_f1:.4f}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _load(args)
    if not args.out:
        raise UsageError("fuse needs --out")
    out = Path(args.out)
    if args.tune:
        if not (args.members and args.ref):
            raise UsageError("fuse --tune needs --members and --ref")
        sets = [load_predictions(m) for m in args.members]
        refs, _ = read_events(_events_path(args.ref), sets[0].vocabulary)
        kinds = args.kinds or ["sed"] * len(sets)
        if len(kinds) != len(sets):
            raise UsageError("--kinds needs one entry per member")
        paths = [str(Path(m).resolve()) for m in args.members]
        spec, score = tune_weights(sets, refs, paths, kinds, args.grid_step, cfg.decode, return_score=True)
        fused = ensemble_fuse(spec, sets)
        print(f"tuned weights {list(spec.weights)} (validation macro F1 {score:.4f})")
    else:
        if not args.spec:
            raise UsageError("fuse needs --spec or --tune")
        spec = EnsembleSpec.from_json(args.spec)
        if args.members:
            if len(args.members) != len(spec.members):
                raise UsageError("--members must list one directory per spec member")
            spec = EnsembleSpec(tuple(dataclasses.replace(m, path=str(Path(p).resolve())) for m, p in zip(spec.members, args.members)))
        fused = ensemble_fuse(spec)
    write_predictions(out, fused, cfg.decode)
    spec.to_json(out / "ensemble.json")
    print(f"fused {len(spec.members)} systems into {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (or report file for evaluate)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="guidedsed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-toy", parents=[common], help="generate a toy dataset and config")
    p.add_argument("--n-weak", type=int, default=30)
    p.add_argument("--n-synthetic", type=int, default=20)
    p.add_argument("--n-unlabeled", type=int, default=150)
    p.add_argument("--n-valid", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--epochs", type=int, default=60, help="epochs written into the toy config")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", parents=[common], help="guided-learning training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="run a PS checkpoint over a manifest")
    p.add_argument("--checkpoint", help="PS checkpoint directory (default: <out_dir>/ps)")
    p.add_argument("--manifest", help="manifest to predict (default: paths.test_manifest)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="event-based macro F1")
    p.add_argument("--ref", help="reference event TSV")
    p.add_argument("--est", help="estimated event TSV or prediction directory")
    p.add_argument("--onset-collar", type=float, default=0.2)
    p.add_argument("--offset-collar", type=float, default=0.2)
    p.add_argument("--offset-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fuse", parents=[common], help="weighted ensemble of prediction directories")
    p.add_argument("--spec", help="EnsembleSpec JSON")
    p.add_argument("--tune", action="store_true", help="tune weights on validation references")
    p.add_argument("--members", nargs="+", help="prediction directories")
    p.add_argument("--kinds", nargs="+", choices=("sed", "ss_sed"))
    p.add_argument("--ref", help="validation reference events for --tune")
    p.add_argument("--grid-step", type=float, default=0.05)
    p.set_defaults(func=cmd_fuse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError) as exc:
        print(f"guidedsed {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("command failed", exc_info=True)
        print(f"guidedsed {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

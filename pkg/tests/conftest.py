import numpy as np
import pytest

from guidedsed.datamodel import ClassVocabulary, ClipRecord, DatasetManifest, Source, make_events


def tiny_records(n_weak=2, n_synth=2, n_unl=2, shape=(16, 8), n_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n_weak):
        label = np.zeros(n_classes, np.uint8)
        label[i % n_classes] = 1
        recs.append(ClipRecord(f"w{i}", rng.normal(size=shape).astype(np.float32), Source.WEAK, label))
    for i in range(n_synth):
        recs.append(ClipRecord(f"s{i}", rng.normal(size=shape).astype(np.float32), Source.SYNTHETIC,
                               events=make_events([(i % n_classes, 0.04, 0.16)])))
    for i in range(n_unl):
        recs.append(ClipRecord(f"u{i}", rng.normal(size=shape).astype(np.float32), Source.UNLABELED))
    return recs


def tiny_manifest(n_weak=2, n_synth=2, n_unl=2, shape=(16, 8), n_classes=2, hop=0.02, seed=0):
    vocab = ClassVocabulary(tuple(f"c{i}" for i in range(n_classes)))
    return DatasetManifest.from_records(tiny_records(n_weak, n_synth, n_unl, shape, n_classes, seed), vocab, hop)


@pytest.fixture
def manifest_factory():
    return tiny_manifest


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """gen-toy + 60-epoch train through the CLI, shared by the tests that need a trained system."""
    from guidedsed.cli import main

    import time

    root = tmp_path_factory.mktemp("toy")
    data = root / "data"
    assert main(["gen-toy", "--out", str(data), "--seed", "0"]) == 0
    start = time.perf_counter()
    assert main(["train", "--config", str(data / "config.toml")]) == 0
    return {"data": data, "run": data / "run", "config": data / "config.toml", "seconds": time.perf_counter() - start}


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

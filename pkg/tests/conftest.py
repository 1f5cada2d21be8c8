"""Shared session fixtures: one generated toy corpus and one overfit run per variant.

The overfit runs take a few minutes each on one core, so they are built at
most once per session and reused by the acceptance and CLI tests.
"""
import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from vst.checkpoint import save_checkpoint
from vst.cli import main
from vst.data import GlyphDatasetSpec, generate_glyph_dataset, load_samples
from vst.model import ModelConfig, VSTModel
from vst.train import TrainConfig, train

TOY_SPEC = dict(seed=1, num_samples=200, charset="0123456789ab", length_range=[1, 6])
MAX_STEPS = 2000
EVAL_EVERY = 100


@dataclass
class OverfitRun:
    variant: str
    checkpoint: Path
    seconds: float
    steps: int
    sequence_accuracy: float
    mode: str


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_corpus")
    (root / "spec.json").write_text(json.dumps(TOY_SPEC))
    assert main(["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    return root / "data" / "manifest.tsv"


@pytest.fixture(scope="session")
def overfit_full(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit_full")
    cfg = ModelConfig.toy(variant="full")
    samples = load_samples(toy_corpus, cfg.image_height, cfg.image_width)
    start = time.perf_counter()
    model = VSTModel(cfg)
    result = train(model, [samples], TrainConfig(
        batch_size=32, max_steps=MAX_STEPS, eval_every=EVAL_EVERY, target_accuracy=0.99, eval_mode="full"))
    seconds = time.perf_counter() - start
    save_checkpoint(out / "final.ckpt", model, result.optimizer)
    step, report = result.reports[-1]
    return OverfitRun("full", out / "final.ckpt", seconds, result.steps, report.sequence_accuracy, "full")


@pytest.fixture(scope="session")
def overfit_basic(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit_basic")
    config = out / "run.json"
    config.write_text(json.dumps({
        "preset": "toy", "variant": "full", "batch_size": 32, "max_steps": MAX_STEPS,
        "eval_every": EVAL_EVERY, "target_accuracy": 0.95, "train_manifests": [str(toy_corpus)],
    }))
    start = time.perf_counter()
    # the flag overrides the variant in the file
    code = main(["train", "--config", str(config), "--variant", "basic", "--out-dir", str(out / "run")])
    seconds = time.perf_counter() - start
    assert code == 0
    report = json.loads((out / "run" / "eval_report.json").read_text())
    steps = sum(1 for line in (out / "run" / "train_log.jsonl").read_text().splitlines() if '"total"' in line)
    return OverfitRun("basic", out / "run" / "final.ckpt", seconds, steps, report["sequence_accuracy"], report["mode"])


# -- acceptance reporting ----------------------------------------------------------

_ACCEPTANCE = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.number}: {self.title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line for the summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])

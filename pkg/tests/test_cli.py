import json
import re
import subprocess
import sys

import numpy as np
import pytest

from vst.checkpoint import read_checkpoint, save_checkpoint
from vst.cli import main
from vst.data import GlyphDatasetSpec, generate_glyph_dataset, read_manifest, write_pnm
from vst.model import ModelConfig, VSTModel


@pytest.fixture
def tiny_manifest(tmp_path):
    spec = GlyphDatasetSpec(seed=5, num_samples=6, canvas_height=16, glyph_scales=(1,), length_range=(1, 3))
    return generate_glyph_dataset(spec, tmp_path / "tinyset")


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


# -- gen-data ----------------------------------------------------------------------------

def test_gen_data_ok(tmp_path, capsys):
    spec = _write(tmp_path / "spec.json", {"seed": 3, "num_samples": 5})
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
    assert len(read_manifest(tmp_path / "d" / "manifest.tsv")) == 5
    assert "samples: 5" in capsys.readouterr().out


def test_gen_data_errors(tmp_path):
    assert main(["gen-data", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "d")]) == 2
    bad = _write(tmp_path / "bad.json", {"seed": 3, "colour": "red"})
    assert main(["gen-data", "--spec", str(bad), "--out", str(tmp_path / "d")]) == 2
    good = _write(tmp_path / "good.json", {"num_samples": 1})
    (tmp_path / "blocker").write_text("x")
    assert main(["gen-data", "--spec", str(good), "--out", str(tmp_path / "blocker" / "d")]) == 3


def test_usage_errors():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["eval", "--checkpoint", "x"]) == 2


def test_console_script_module_entry(tmp_path):
    spec = _write(tmp_path / "spec.json", {"num_samples": 2})
    proc = subprocess.run([sys.executable, "-m", "vst.cli", "gen-data", "--spec", str(spec), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


# -- train ----------------------------------------------------------------------------------

def _tiny_train_args(manifest, out, *extra):
    return ["train", "--preset", "tiny", "--max-steps", "2", "--batch-size", "2",
            "--train-manifests", str(manifest), "--out-dir", str(out), *extra]


def test_train_writes_artifacts(tmp_path, tiny_manifest):
    assert main(_tiny_train_args(tiny_manifest, tmp_path / "run")) == 0
    run = tmp_path / "run"
    assert (run / "final.ckpt").is_file() and (run / "eval_report.json").is_file()
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["preset"] == "tiny" and cfg["max_steps"] == 2
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2


def test_train_flag_overrides_file(tmp_path, tiny_manifest):
    config = _write(tmp_path / "c.json", {"preset": "tiny", "variant": "full", "max_steps": 50, "lr_initial": 5e-4})
    assert main(["train", "--config", str(config), "--variant", "basic", "--max-steps", "1", "--batch-size", "2",
                 "--train-manifests", str(tiny_manifest), "--out-dir", str(tmp_path / "run")]) == 0
    echoed = json.loads((tmp_path / "run" / "config.json").read_text())
    assert echoed["variant"] == "basic" and echoed["max_steps"] == 1 and echoed["lr_initial"] == 5e-4
    params = read_checkpoint(tmp_path / "run" / "final.ckpt")["params"]
    assert not any(name.startswith(("semantic.", "head_final.")) for name in params)


def test_train_config_errors(tmp_path, tiny_manifest):
    bad = _write(tmp_path / "bad.json", {"preset": "tiny", "learning_rate": 1})
    assert main(["train", "--config", str(bad), "--train-manifests", str(tiny_manifest),
                 "--out-dir", str(tmp_path / "r")]) == 2
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 2
    assert main(_tiny_train_args(tiny_manifest, tmp_path / "r", "--variant", "medium")) == 2
    assert main(_tiny_train_args(tiny_manifest, tmp_path / "r", "--lr-initial", "1e-6")) == 2
    assert main(["train", "--preset", "tiny", "--out-dir", str(tmp_path / "r")]) == 2
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "broken.json")]) == 2


def test_train_missing_manifest_is_io_error(tmp_path):
    assert main(_tiny_train_args(tmp_path / "nope.tsv", tmp_path / "r")) == 3


def test_train_numeric_failure(tmp_path, tiny_manifest):
    code = main(_tiny_train_args(tiny_manifest, tmp_path / "r", "--lr-initial", "1e300", "--lr-final", "1e300",
                                 "--max-steps", "20", "--grad-clip", "0"))
    assert code == 4
    assert list((tmp_path / "r").glob("nan_batch_step*.npz"))


# -- eval / infer / census -------------------------------------------------------------------

def test_eval_ok_and_errors(overfit_basic, toy_corpus, tmp_path, capsys):
    ckpt = str(overfit_basic.checkpoint)
    assert main(["eval", "--checkpoint", ckpt, "--manifest", str(toy_corpus), "--mode", "s3"]) == 0
    out = capsys.readouterr().out
    assert "samples          200" in out and "seq acc [vote ]" in out
    assert main(["eval", "--checkpoint", ckpt, "--manifest", str(toy_corpus), "--mode", "full"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "no.ckpt"), "--manifest", str(toy_corpus)]) == 2
    assert main(["eval", "--checkpoint", ckpt, "--manifest", str(tmp_path / "no.tsv")]) == 3
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--manifest", str(toy_corpus)]) == 2


@pytest.fixture(scope="module")
def overfit_24(tmp_path_factory):
    """A basic toy model overfit on a small two-digit corpus that contains "42"."""
    root = tmp_path_factory.mktemp("overfit_24")
    spec = GlyphDatasetSpec(seed=42, num_samples=24, charset="24", length_range=(1, 3))
    manifest = generate_glyph_dataset(spec, root / "set")
    code = main(["train", "--preset", "toy", "--variant", "basic", "--batch-size", "16", "--max-steps", "1500",
                 "--eval-every", "50", "--target-accuracy", "1.0", "--lr-initial", "1e-3", "--lr-final", "1e-4",
                 "--train-manifests", str(manifest), "--out-dir", str(root / "run")])
    assert code == 0
    assert json.loads((root / "run" / "eval_report.json").read_text())["sequence_accuracy"] == 1.0
    return manifest, root / "run" / "final.ckpt"


def test_infer_reads_42(overfit_24, capsys):
    manifest, ckpt = overfit_24
    image = next(path for path, label in read_manifest(manifest) if label == "42")
    capsys.readouterr()
    assert main(["infer", "--checkpoint", str(ckpt), "--image", str(image)]) == 0
    assert capsys.readouterr().out.strip() == "42"


def test_infer_dump_count_and_names(overfit_basic, toy_corpus, tmp_path, capsys):
    path, _ = read_manifest(toy_corpus)[3]
    out = tmp_path / "maps"
    assert main(["infer", "--checkpoint", str(overfit_basic.checkpoint), "--image", str(path),
                 "--dump-attention", str(out)]) == 0
    text = capsys.readouterr().out.strip()
    names = sorted(p.name for p in out.iterdir())
    assert len(names) == 3 * len(text)
    assert all(re.fullmatch(r"(primary|secondary|interaction)_\d+_[0-9a-z]+\.pnm", n) for n in names)


def test_infer_errors(overfit_basic, tmp_path):
    ckpt = str(overfit_basic.checkpoint)
    (tmp_path / "x.png").write_bytes(b"\x89PNG")
    assert main(["infer", "--checkpoint", ckpt, "--image", str(tmp_path / "x.png")]) == 3
    assert main(["infer", "--checkpoint", ckpt, "--image", str(tmp_path / "missing.ppm")]) == 3
    write_pnm(tmp_path / "ok.ppm", np.full((10, 30, 3), 200, np.uint8))
    assert main(["infer", "--checkpoint", ckpt, "--image", str(tmp_path / "ok.ppm"), "--mode", "full"]) == 2


def _census_lines(out):
    return {k.strip(): int(v) for k, v in (line.split(":") for line in out.splitlines()
                                           if line.split(":")[0].strip() in ("full total", "basic total", "delta", "module S"))}


def test_census_config_delta_is_stable(tmp_path, capsys):
    config = _write(tmp_path / "toy.json", {"preset": "toy", "variant": "basic"})
    assert main(["census", "--config", str(config)]) == 0
    first = capsys.readouterr().out
    assert main(["census", "--config", str(config)]) == 0
    assert capsys.readouterr().out == first
    nums = _census_lines(first)
    assert nums["delta"] == nums["module S"] == nums["full total"] - nums["basic total"] > 0


def test_census_checkpoint_and_errors(tmp_path, capsys):
    model = VSTModel(ModelConfig.tiny(variant="basic"))
    save_checkpoint(tmp_path / "m.ckpt", model)
    assert main(["census", "--checkpoint", str(tmp_path / "m.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "align.Q" in out and "semantic." not in out and "align_secondary" not in out
    assert main(["census"]) == 2
    assert main(["census", "--config", "a", "--checkpoint", "b"]) == 2
    assert main(["census", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2

import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vst.data import (
    ALPHANUMERIC,
    EOS,
    UNK,
    GlyphDatasetSpec,
    LabelCodec,
    WeightedSampler,
    augment,
    encode_label,
    generate_glyph_dataset,
    load_samples,
    preprocess_image,
    read_manifest,
    read_pnm,
    weighted_sampler,
    write_manifest,
    write_pnm,
)
from vst.errors import ConfigError
from vst.font import glyph


# -- codec -------------------------------------------------------------------------

def test_encode_ab1():
    assert encode_label("Ab1").tolist() == [10, 11, 1] + [37] * 22


def test_encode_empty():
    assert encode_label("").tolist() == [37] * 25


def test_encode_unknown_character():
    assert encode_label("a#b").tolist()[:4] == [10, 36, 11, 37]


def test_encode_truncates_to_t_minus_one():
    enc = encode_label("x" * 40)
    assert len(enc) == 25 and enc[-1] == EOS and (enc[:24] == ALPHANUMERIC.index("x")).all()


def test_charset_layout():
    codec = LabelCodec()
    assert codec.num_classes == 38 and UNK == 36 and EOS == 37
    assert [codec.encode(c)[0] for c in "09az"] == [0, 9, 10, 35]


def test_decode_rules():
    codec = LabelCodec(6)
    assert codec.decode([10, 11, EOS, 3, 4, EOS]) == "ab"
    assert codec.decode([EOS] * 6) == ""
    assert codec.decode([10, UNK, 11, EOS, EOS, EOS]) == "a?b"


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=ALPHANUMERIC + ALPHANUMERIC.upper(), max_size=24))
def test_codec_round_trip_property(text):
    codec = LabelCodec(25)
    assert codec.decode(codec.encode(text)) == text.lower()


# -- images --------------------------------------------------------------------------

def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_pnm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), img)


def test_pgm_is_replicated_to_three_channels(tmp_path):
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
    (tmp_path / "g.pgm").write_bytes(b"P5\n# comment\n4 3\n255\n" + gray.tobytes())
    img = read_pnm(tmp_path / "g.pgm")
    assert img.shape == (3, 4, 3) and (img[..., 2] == gray).all()


def test_unsupported_format(tmp_path):
    (tmp_path / "x.png").write_bytes(b"\x89PNG....")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "x.png")


def test_preprocess_upscale_and_replication_pad():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (24, 60, 3), dtype=np.uint8)
    out = preprocess_image(img)
    assert out.shape == (3, 48, 160)
    for col in range(120, 160):
        assert np.array_equal(out[:, :, col], out[:, :, 119])
    assert not np.array_equal(out[:, :, 118], out[:, :, 119])


def test_preprocess_identity_geometry():
    img = np.random.default_rng(2).integers(0, 256, (48, 160, 3), dtype=np.uint8)
    out = preprocess_image(img)
    np.testing.assert_allclose(out, img.transpose(2, 0, 1) / 127.5 - 1.0, atol=1e-6)


def test_preprocess_trims_right():
    img = np.random.default_rng(3).integers(0, 256, (48, 400, 3), dtype=np.uint8)
    out = preprocess_image(img)
    np.testing.assert_allclose(out, img[:, :160].transpose(2, 0, 1) / 127.5 - 1.0, atol=1e-6)


def test_preprocess_value_range():
    out = preprocess_image(np.array([[[0, 255, 128]]], dtype=np.uint8), 4, 8)
    assert out.min() == -1.0 and out.max() == 1.0


def test_preprocess_rejects_empty():
    with pytest.raises(ValueError):
        preprocess_image(np.zeros((0, 5, 3), np.uint8))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 300))
def test_preprocess_always_target_shape(h, w):
    img = np.random.default_rng(h * 1000 + w).integers(0, 256, (h, w, 3), dtype=np.uint8)
    out = preprocess_image(img, 24, 80)
    assert out.shape == (3, 24, 80)
    new_w = max(1, round(w * 24 / h))
    if new_w < 80:
        assert (out[:, :, new_w:] == out[:, :, new_w - 1:new_w]).all()


def test_augment_keeps_shape_and_range():
    img = preprocess_image(np.random.default_rng(0).integers(0, 256, (24, 50, 3), dtype=np.uint8), 24, 80)
    out = augment(img, np.random.default_rng(1))
    assert out.shape == img.shape and out.min() >= -1 and out.max() <= 1


# -- generator ---------------------------------------------------------------------

def test_generator_is_byte_identical(tmp_path):
    spec = GlyphDatasetSpec(seed=1, num_samples=10)
    generate_glyph_dataset(spec, tmp_path / "a")
    generate_glyph_dataset(spec, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert sorted(cmp.common) == sorted(p.name for p in (tmp_path / "a").iterdir())
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", cmp.common, shallow=False)
    assert not mismatch and not errors


def test_generator_manifest_and_spec(tmp_path):
    spec = GlyphDatasetSpec(seed=4, num_samples=13, charset="abc", length_range=(2, 4))
    manifest = generate_glyph_dataset(spec, tmp_path)
    records = read_manifest(manifest)
    assert len(records) == 13
    assert all(set(label) <= set("abc") and 2 <= len(label) <= 4 for _, label in records)
    assert GlyphDatasetSpec.load(tmp_path / "spec.json") == spec


def _count_occurrences(gray, mask, ink):
    gh, gw = mask.shape
    count = 0
    for y in range(gray.shape[0] - gh + 1):
        for x in range(gray.shape[1] - gw + 1):
            window = gray[y:y + gh, x:x + gw]
            if np.array_equal(window == ink, mask):
                count += 1
    return count


def test_noise_free_render_contains_exact_glyphs(tmp_path):
    spec = GlyphDatasetSpec(seed=3, num_samples=4, charset="0", length_range=(2, 2), noise_std=0.0)
    manifest = generate_glyph_dataset(spec, tmp_path)
    template = glyph("0", 2)
    for path, label in read_manifest(manifest):
        assert label == "00"
        gray = read_pnm(path)[:, :, 0]
        assert set(np.unique(gray)) == {spec.ink, spec.background}
        assert _count_occurrences(gray, template, spec.ink) == 2


def test_spec_validation():
    with pytest.raises(ConfigError):
        GlyphDatasetSpec(charset="ab#")
    with pytest.raises(ConfigError):
        GlyphDatasetSpec.from_dict({"seed": 1, "bogus": 2})


def test_unwritable_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_glyph_dataset(GlyphDatasetSpec(num_samples=1), blocker / "sub")


# -- manifests and sampler ---------------------------------------------------------------

def test_manifest_rejects_empty_label(tmp_path):
    (tmp_path / "m.tsv").write_text("a.ppm\t\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_manifest(tmp_path / "m.tsv")


def test_manifest_rejects_escaping_path(tmp_path):
    write_manifest(tmp_path / "m.tsv", [("../x.ppm", "ab")])
    with pytest.raises(ConfigError):
        read_manifest(tmp_path / "m.tsv")


def test_load_samples_records_missing_files(tmp_path):
    spec = GlyphDatasetSpec(num_samples=3)
    manifest = generate_glyph_dataset(spec, tmp_path)
    (tmp_path / "img_00001.ppm").unlink()
    samples = load_samples(manifest, 24, 80)
    assert len(samples) == 2 and len(samples.errors) == 1
    assert samples.images.shape == (2, 3, 24, 80)


def test_sampler_single_source_uniform():
    counts = np.zeros(5)
    for _, (src, item) in zip(range(20000), WeightedSampler([5], [1.0], seed=3)):
        assert src == 0
        counts[item] += 1
    np.testing.assert_allclose(counts / 20000, 0.2, atol=0.015)


def test_sampler_weights_frequencies():
    sampler = WeightedSampler([10, 20, 30], [0.4, 0.4, 0.2], seed=0)
    draws = np.array([s for _, (s, _) in zip(range(100_000), sampler)])
    freq = np.bincount(draws, minlength=3) / len(draws)
    np.testing.assert_allclose(freq, [0.4, 0.4, 0.2], atol=0.01)


def test_sampler_same_seed_same_sequence():
    a = [x for _, x in zip(range(3000), WeightedSampler([3, 4], [1, 2], seed=9))]
    b = [x for _, x in zip(range(3000), WeightedSampler([3, 4], [1, 2], seed=9))]
    assert a == b
    src, items = WeightedSampler([3, 4], [1, 2], seed=9).block(1, 1024)
    assert list(zip(src.tolist(), items.tolist())) == a[1024:2048]


def test_sampler_config_errors():
    with pytest.raises(ConfigError):
        WeightedSampler([3, 0], [1, 1])
    with pytest.raises(ConfigError):
        WeightedSampler([3], [0.0])


def test_weighted_sampler_over_items():
    stream = weighted_sampler([(["a", "b"], 1.0), (["c"], 3.0)], seed=1)
    seen = {item for _, (_, item) in zip(range(500), stream)}
    assert seen == {"a", "b", "c"}

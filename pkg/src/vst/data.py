"""Label codec, image I/O and preprocessing, synthetic glyph data, sampling."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .align import bilinear_resize
from .errors import ConfigError, DimensionError
from .font import GLYPH_HEIGHT, GLYPH_WIDTH, glyph

ALPHANUMERIC = "0123456789abcdefghijklmnopqrstuvwxyz"
UNK = 36
EOS = 37
NUM_CLASSES = 38


class LabelCodec:
    """Fixed 38-symbol charset: '0'-'9', 'a'-'z', [unk], [eos].

    Every position of an encoded label is supervised; slots after the text
    are filled with [eos].
    """

    def __init__(self, max_len=25):
        if max_len < 1:
            raise ConfigError("max_len must be positive")
        self.max_len = max_len
        self._index = {ch: i for i, ch in enumerate(ALPHANUMERIC)}

    num_classes = NUM_CLASSES

    def encode(self, text: str) -> np.ndarray:
        out = np.full(self.max_len, EOS, dtype=np.int64)
        for i, ch in enumerate(text.lower()[: self.max_len - 1]):
            out[i] = self._index.get(ch, UNK)
        return out

    def encode_batch(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts]) if texts else np.zeros((0, self.max_len), np.int64)

    def decode(self, indices) -> str:
        chars = []
        for i in np.asarray(indices).reshape(-1):
            if i == EOS:
                break
            chars.append("?" if i == UNK else ALPHANUMERIC[i])
        return "".join(chars)


def encode_label(text: str, max_len: int = 25) -> np.ndarray:
    return LabelCodec(max_len).encode(text)


def normalize_text(text: str) -> str:
    """Lower-case and keep only alphanumerics (evaluation comparison form)."""
    return "".join(ch for ch in text.lower() if ch in ALPHANUMERIC)


# -- PNM --------------------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary PPM (P6) or PGM (P5) file as H x W x 3 uint8."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported image format {magic!r} (expected P5 or P6)")
    (w, h, maxval), offset = _pnm_tokens(buf, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    channels = 3 if magic == b"P6" else 1
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * channels, offset=offset)
    img = raw.reshape(h, w, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img.copy()


def write_pnm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        raise DimensionError(f"write_pnm: expected H x W or H x W x 3, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


# -- preprocessing ---------------------------------------------------------------

def preprocess_image(img: np.ndarray, target_h: int = 48, target_w: int = 160) -> np.ndarray:
    """Resize to ``target_h`` keeping aspect, pad right by replication or trim.

    Returns a float32 3 x target_h x target_w array scaled to [-1, 1].
    """
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"preprocess_image: invalid image shape {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h0, w0 = img.shape[:2]
    new_w = max(1, int(round(w0 * target_h / h0)))
    if (h0, w0) == (target_h, new_w):
        resized = img.astype(np.float64)
    else:
        resized = bilinear_resize(img, target_h, new_w)
    if new_w < target_w:
        pad = np.repeat(resized[:, -1:, :], target_w - new_w, axis=1)
        resized = np.concatenate([resized, pad], axis=1)
    else:
        resized = resized[:, :target_w]
    out = resized / 127.5 - 1.0
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def augment(image: np.ndarray, rng: np.random.Generator, scale_jitter=0.1, noise_std=0.05) -> np.ndarray:
    """Horizontal scale jitter and Gaussian noise on a preprocessed 3 x H x W image.

    The width is stretched by a factor in ``1 +- scale_jitter`` and brought back
    to W by right replication padding or trimming.
    """
    _, h, w = image.shape
    factor = rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter)
    new_w = max(1, int(round(w * factor)))
    out = bilinear_resize(image.transpose(1, 2, 0), h, new_w)
    if new_w < w:
        out = np.concatenate([out, np.repeat(out[:, -1:], w - new_w, axis=1)], axis=1)
    out = out[:, :w]
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, out.shape)
    return np.clip(out, -1.0, 1.0).transpose(2, 0, 1).astype(image.dtype)


# -- synthetic glyph dataset -------------------------------------------------------

@dataclass
class GlyphDatasetSpec:
    seed: int = 1
    num_samples: int = 200
    charset: str = "0123456789ab"
    length_range: tuple = (1, 6)
    canvas_height: int = 24
    glyph_scales: tuple = (2,)
    spacing_range: tuple = (1, 3)
    margin: int = 2
    vertical_jitter: int = 2
    noise_std: float = 8.0
    ink: int = 20
    background: int = 235

    def __post_init__(self):
        self.length_range = tuple(int(v) for v in self.length_range)
        self.glyph_scales = tuple(int(v) for v in self.glyph_scales)
        self.spacing_range = tuple(int(v) for v in self.spacing_range)
        bad = [ch for ch in self.charset if ch not in ALPHANUMERIC]
        if bad or not self.charset:
            raise ConfigError(f"charset must be a non-empty subset of {ALPHANUMERIC!r}, got {self.charset!r}")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid length_range {self.length_range}")
        if self.num_samples < 1:
            raise ConfigError("num_samples must be positive")
        if max(self.glyph_scales) * GLYPH_HEIGHT > self.canvas_height:
            raise ConfigError("glyphs do not fit the canvas height")

    @classmethod
    def from_dict(cls, data: dict) -> "GlyphDatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "GlyphDatasetSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def render_text(text: str, spec: GlyphDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Render ``text`` on a grayscale canvas; noise is applied by the caller."""
    scale = int(rng.choice(spec.glyph_scales))
    gh, gw = GLYPH_HEIGHT * scale, GLYPH_WIDTH * scale
    gaps = rng.integers(spec.spacing_range[0], spec.spacing_range[1] + 1, size=max(len(text) - 1, 0))
    width = 2 * spec.margin + gw * len(text) + int(gaps.sum())
    canvas = np.full((spec.canvas_height, width), float(spec.background))
    base = (spec.canvas_height - gh) // 2
    x = spec.margin
    for i, ch in enumerate(text):
        dy = int(rng.integers(-spec.vertical_jitter, spec.vertical_jitter + 1)) if spec.vertical_jitter else 0
        y = min(max(base + dy, 0), spec.canvas_height - gh)
        canvas[y:y + gh, x:x + gw][glyph(ch, scale)] = spec.ink
        x += gw + (int(gaps[i]) if i < len(gaps) else 0)
    return canvas


def generate_glyph_dataset(spec: GlyphDatasetSpec, out_dir) -> Path:
    """Write images, ``manifest.tsv`` and ``spec.json``; return the manifest path.

    Sample ``k`` is drawn from a generator seeded by ``(seed, k)``, so the
    output depends only on the spec.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chars = np.array(list(spec.charset))
    records = []
    for k in range(spec.num_samples):
        rng = np.random.default_rng([spec.seed, k])
        length = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        text = "".join(rng.choice(chars, size=length))
        canvas = render_text(text, spec, rng)
        if spec.noise_std > 0:
            canvas = canvas + rng.normal(0.0, spec.noise_std, canvas.shape)
        gray = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        name = f"img_{k:05d}.ppm"
        write_pnm(out_dir / name, np.repeat(gray[:, :, None], 3, axis=2))
        records.append((name, text))
    (out_dir / "spec.json").write_text(spec.to_json(), encoding="utf-8")
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, records)
    return manifest


# -- manifests and sampling -----------------------------------------------------------

def write_manifest(path, records) -> None:
    lines = [f"{rel}\t{label}\n" for rel, label in records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list:
    """Return ``[(absolute_path, label), ...]`` from a ``path<TAB>label`` file."""
    path = Path(path)
    root = path.parent.resolve()
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rel, sep, label = line.partition("\t")
        if not sep or not label:
            raise ConfigError(f"{path}:{lineno}: expected 'path<TAB>label' with a non-empty label")
        full = (root / rel).resolve()
        if root != full and root not in full.parents:
            raise ConfigError(f"{path}:{lineno}: {rel!r} escapes the manifest directory")
        records.append((full, label))
    return records


@dataclass
class SampleSet:
    """Preprocessed images for one manifest; unreadable files are listed in ``errors``."""

    images: np.ndarray
    labels: list
    errors: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def load_samples(manifest, height=48, width=160) -> SampleSet:
    images, labels, errors = [], [], []
    for full, label in read_manifest(manifest):
        try:
            img = read_pnm(full)
        except (OSError, ValueError) as exc:
            errors.append((str(full), str(exc)))
            continue
        images.append(preprocess_image(img, height, width))
        labels.append(label)
    arr = np.stack(images) if images else np.zeros((0, 3, height, width), np.float32)
    return SampleSet(arr, labels, errors)


class WeightedSampler:
    """Pick source ``i`` with probability ``w_i / sum(w)``, then a uniform item.

    Draws are pre-assigned by block index: block ``b`` always comes from a
    generator seeded with ``(seed, b)``, whoever consumes it.
    """

    def __init__(self, sizes, weights, seed=0):
        sizes = [int(s) for s in sizes]
        if len(sizes) != len(weights) or not sizes:
            raise ConfigError("sampler needs one weight per source")
        if any(s <= 0 for s in sizes):
            raise ConfigError("sampler source is empty")
        w = np.asarray(weights, dtype=np.float64)
        if (w <= 0).any():
            raise ConfigError("sampler weights must be positive")
        self.sizes = sizes
        self.probs = w / w.sum()
        self.seed = seed

    def block(self, index: int, size: int):
        """Return ``(source_ids, item_ids)`` arrays for draw block ``index``."""
        rng = np.random.default_rng([self.seed, index])
        src = rng.choice(len(self.sizes), size=size, p=self.probs)
        u = rng.random(size)
        sizes = np.asarray(self.sizes)[src]
        items = np.minimum((u * sizes).astype(np.int64), sizes - 1)
        return src, items

    def __iter__(self):
        index = 0
        while True:
            src, items = self.block(index, 1024)
            yield from zip(src.tolist(), items.tolist())
            index += 1


def weighted_sampler(sources, seed=0):
    """Infinite stream of ``(source_index, item)`` from ``[(items, weight), ...]``."""
    items = [list(s) for s, _ in sources]
    sampler = WeightedSampler([len(s) for s in items], [w for _, w in sources], seed)
    for src, idx in sampler:
        yield src, items[src][idx]

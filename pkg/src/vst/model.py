"""The visual-semantic transformer: assembly, losses, decoding and census.

Data flow for one batch of images ``x``::

    fmap        = backbone(x)                     B x d x h x w
    v1          = visual(flatten(fmap))           B x n x d,  n = h*w
    s1          = align(v1)                       B x t x d
    s2, v2      = interact(s1, v1)                joined sequence, semantic first
    s3          = align(v2)                       same Q storage as s1
    logits_s2   = head(s2),  logits_s3 = head(s3)
    logits_final = fuse(s2, s3)                   full variant only
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .align import VSAlign
from .autodiff import Parameter, Tensor
from .data import EOS, NUM_CLASSES, LabelCodec
from .errors import ConfigError, ContractError, DimensionError
from .nn import (
    Backbone,
    BackboneConfig,
    ClassifierHead,
    Module,
    TransformerBlock,
    TransformerBlockConfig,
    fixed_positional_encoding,
    run_blocks,
)

VARIANTS = ("basic", "full")
DECODE_MODES = ("s2", "s3", "vote", "full")

# parameter name prefixes that exist only in the full variant
SEMANTIC_PREFIXES = ("semantic.", "head_final.")


@dataclass
class ModelConfig:
    d_model: int = 512
    num_heads: int = 8
    layers_v: int = 3
    layers_i: int = 3
    layers_s: int = 3
    max_len: int = 25
    num_classes: int = NUM_CLASSES
    variant: str = "full"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    share_classifier_heads: bool = True
    dropout: float = 0.1
    image_height: int = 48
    image_width: int = 160
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even (sinusoidal encodings)")
        if self.backbone.output_dim != self.d_model:
            raise ConfigError(f"backbone output_dim {self.backbone.output_dim} != d_model {self.d_model}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def feature_grid(self):
        return self.backbone.output_size(self.image_height, self.image_width)

    @property
    def seq_len(self):
        h, w = self.feature_grid
        return h * w

    def block_config(self):
        return TransformerBlockConfig(self.d_model, self.num_heads, 4 * self.d_model, self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    # presets ------------------------------------------------------------------

    @classmethod
    def full_scale(cls, variant="full", **overrides):
        return cls(variant=variant, **overrides)

    @classmethod
    def toy(cls, variant="full", **overrides):
        base = dict(
            d_model=64, num_heads=4, layers_v=1, layers_i=1, layers_s=1, max_len=8,
            backbone=BackboneConfig(16, (1, 1, 1, 1), (16, 32, 48, 64), ((2, 2), (2, 2), (2, 1), (1, 1)), 64),
            dropout=0.0, image_height=24, image_width=80,
        )
        base.update(overrides)
        return cls(variant=variant, **base)

    @classmethod
    def tiny(cls, variant="full", **overrides):
        """Gradient-check scale: d=8, 2 heads, t=4, n=12, 64-bit, no dropout."""
        base = dict(
            d_model=8, num_heads=2, layers_v=1, layers_i=1, layers_s=1, max_len=4,
            backbone=BackboneConfig(4, (1, 1, 1, 1), (4, 4, 8, 8), ((2, 2), (2, 2), (2, 1), (1, 1)), 8),
            dropout=0.0, image_height=16, image_width=24, dtype="float64",
        )
        base.update(overrides)
        return cls(variant=variant, **base)

    @classmethod
    def preset(cls, name, variant="full", **overrides):
        makers = {"full": cls.full_scale, "toy": cls.toy, "tiny": cls.tiny}
        if name not in makers:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(makers)}")
        return makers[name](variant=variant, **overrides)


@dataclass
class ForwardTrace:
    v1: Tensor
    s1: Tensor
    s2: Tensor
    v2: Tensor
    s3: Tensor
    logits_s2: Tensor
    logits_s3: Tensor
    attn_primary: Tensor
    attn_secondary: Tensor
    interaction_attn: list
    visual_attn: list
    logits_final: Tensor | None = None
    grid: tuple = (0, 0)
    align_storage_ids: tuple = ()


@dataclass
class TextPrediction:
    text: str
    indices: np.ndarray
    probs: np.ndarray
    attention: dict = field(default_factory=dict)


class VSTModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        rng, dt = self.rng, self.dtype
        d, t = cfg.d_model, cfg.max_len
        block_cfg = cfg.block_config()

        self.backbone = Backbone(cfg.backbone, rng, dt)
        self.visual = [TransformerBlock(block_cfg, rng, dt) for _ in range(cfg.layers_v)]
        self.align = VSAlign(t, d, rng, dt)
        # second call site of the same alignment weights
        self.align_secondary = self.align
        self.pos_embed = Parameter((rng.standard_normal((t, d)) * 0.02).astype(dt))
        self.domain_semantic = Parameter((rng.standard_normal(d) * 0.02).astype(dt))
        self.domain_visual = Parameter((rng.standard_normal(d) * 0.02).astype(dt))
        self.interact = [TransformerBlock(block_cfg, rng, dt) for _ in range(cfg.layers_i)]
        self.head = ClassifierHead(d, cfg.num_classes, rng, dt)
        self.head_s3 = self.head if cfg.share_classifier_heads else ClassifierHead(d, cfg.num_classes, rng, dt)
        if cfg.variant == "full":
            self.semantic = [TransformerBlock(block_cfg, rng, dt) for _ in range(cfg.layers_s)]
            self.head_final = ClassifierHead(2 * d, cfg.num_classes, rng, dt)
        self._pe_cache = {}
        self._name_parameters()
        for i, p in enumerate(self.parameters(), start=1):
            p.storage_id = i

    @property
    def variant(self):
        return self.cfg.variant

    def _pe(self, length):
        key = (length, self.cfg.d_model)
        if key not in self._pe_cache:
            self._pe_cache[key] = Tensor(fixed_positional_encoding(length, self.cfg.d_model, self.dtype))
        return self._pe_cache[key]

    # stages ----------------------------------------------------------------------

    def visual_encode(self, fmap):
        """B x d x h x w feature map -> B x n x d primary visual sequence."""
        fmap = ad.as_tensor(fmap)
        b, d, h, w = fmap.shape
        seq = ad.transpose(ad.reshape(fmap, (b, d, h * w)), (0, 2, 1))
        out, attns = run_blocks(self.visual, seq)
        return out, attns

    def interact_streams(self, s1, v1):
        """Joint self-attention over [semantic; visual]; returns (s2, v2, attentions)."""
        s1, v1 = ad.as_tensor(s1), ad.as_tensor(v1)
        if s1.shape[-1] != v1.shape[-1] or s1.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"interact: semantic {s1.shape} and visual {v1.shape} dims disagree")
        t, n = s1.shape[1], v1.shape[1]
        sem = s1 + self.pos_embed + self.domain_semantic
        vis = v1 + self._pe(n) + self.domain_visual
        joined = ad.concatenate([sem, vis], axis=1)
        out, attns = run_blocks(self.interact, joined)
        return out[:, :t], out[:, t:], attns

    def semantic_fuse(self, s2, s3):
        if self.cfg.variant != "full":
            raise ContractError("semantic fusion is only available in the full variant")
        s2, s3 = ad.as_tensor(s2), ad.as_tensor(s3)
        t = s2.shape[1]
        x = ad.concatenate([s2, s3], axis=1) + self._pe(2 * t)
        x, _ = run_blocks(self.semantic, x)
        fused = ad.concatenate([x[:, :t], x[:, t:]], axis=2)
        return self.head_final(fused)

    def forward(self, images) -> ForwardTrace:
        x = ad.as_tensor(np.asarray(getattr(images, "data", images), dtype=self.dtype))
        fmap = self.backbone(x)
        grid = fmap.shape[2:]
        v1, vattn = self.visual_encode(fmap)
        s1, a1 = self.align(v1)
        s2, v2, iattn = self.interact_streams(s1, v1)
        s3, a2 = self.align_secondary(v2)
        trace = ForwardTrace(
            v1=v1, s1=s1, s2=s2, v2=v2, s3=s3,
            logits_s2=self.head(s2), logits_s3=self.head_s3(s3),
            attn_primary=a1, attn_secondary=a2,
            interaction_attn=iattn, visual_attn=vattn, grid=tuple(grid),
            align_storage_ids=(self.align.storage_id, self.align_secondary.storage_id),
        )
        if self.cfg.variant == "full":
            trace.logits_final = self.semantic_fuse(s2, s3)
        return trace

    __call__ = forward


# -- loss ------------------------------------------------------------------------------

def _branch_ce(logits, targets):
    b, t, c = logits.shape
    return ad.cross_entropy(ad.reshape(logits, (b * t, c)), targets.reshape(-1))


def compute_loss(trace: ForwardTrace, targets):
    """Unweighted sum of per-branch cross-entropies.

    Returns ``(total, branches)`` where branches maps ``s2``, ``s3`` and,
    for the full variant, ``final`` to scalar tensors.
    """
    targets = np.asarray(targets, dtype=np.int64)
    expected = trace.logits_s2.shape[:2]
    if targets.shape != expected:
        raise ContractError(f"targets must have shape {expected} (batch x max_len), got {targets.shape}")
    branches = {"s2": _branch_ce(trace.logits_s2, targets), "s3": _branch_ce(trace.logits_s3, targets)}
    if trace.logits_final is not None:
        branches["final"] = _branch_ce(trace.logits_final, targets)
    total = None
    for loss in branches.values():
        total = loss if total is None else total + loss
    return total, branches


# -- decoding ------------------------------------------------------------------------------

def _softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def probabilities(trace: ForwardTrace, mode: str) -> np.ndarray:
    """Per-position character distributions (B x t x C, float64) for a decode mode."""
    if mode not in DECODE_MODES:
        raise ContractError(f"unknown decode mode {mode!r}; choose from {DECODE_MODES}")
    if mode == "s2":
        return _softmax(trace.logits_s2.data)
    if mode == "s3":
        return _softmax(trace.logits_s3.data)
    if mode == "vote":
        return (_softmax(trace.logits_s2.data) + _softmax(trace.logits_s3.data)) / 2
    if trace.logits_final is None:
        raise ContractError("decode mode 'full' needs a full-variant model")
    return _softmax(trace.logits_final.data)


def available_modes(variant: str):
    return DECODE_MODES if variant == "full" else DECODE_MODES[:3]


def decode(trace: ForwardTrace, mode: str = "vote", codec: LabelCodec | None = None) -> list:
    """Parallel decode of every batch element; argmax ties go to the lowest index."""
    probs = probabilities(trace, mode)
    codec = codec or LabelCodec(probs.shape[1])
    heads = [a.data.mean(axis=1) for a in trace.interaction_attn]
    t = probs.shape[1]
    out = []
    for i, p in enumerate(probs):
        idx = p.argmax(axis=-1)
        attention = {
            "primary": trace.attn_primary.data[i],
            "secondary": trace.attn_secondary.data[i],
        }
        if heads:
            attention["interaction"] = heads[-1][i, :t, t:]
        out.append(TextPrediction(codec.decode(idx), idx, p, attention))
    return out


# -- census --------------------------------------------------------------------------

@dataclass
class CensusRow:
    name: str
    shape: tuple
    count: int
    storage_id: int


@dataclass
class Census:
    rows: list

    @property
    def total(self) -> int:
        return sum(r.count for r in self.rows)

    def subtotal(self, prefixes) -> int:
        return sum(r.count for r in self.rows if r.name.startswith(tuple(prefixes)))

    def format(self) -> str:
        width = max([len(r.name) for r in self.rows] + [4])
        lines = [f"{'name':<{width}}  {'shape':<20} {'count':>12}  storage"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {str(r.shape):<20} {r.count:>12}  {r.storage_id}")
        lines.append(f"{'total':<{width}}  {'':<20} {self.total:>12}")
        return "\n".join(lines)


def parameter_census(model: Module) -> Census:
    """One row per distinct storage, in registration order."""
    return Census([CensusRow(name, tuple(p.shape), int(p.data.size), p.storage_id)
                   for name, p in model.named_parameters()])

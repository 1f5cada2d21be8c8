"""Run configuration: JSON file plus command-line overrides."""
from __future__ import annotations

import argparse
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

_MODEL_OVERRIDES = ("d_model", "num_heads", "layers_v", "layers_i", "layers_s", "max_len",
                    "dropout", "image_height", "image_width")


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _opt(kind, help_=""):
    return field(default=None, metadata={"type": kind, "help": help_})


@dataclass
class RunConfig:
    preset: str = field(default="toy", metadata={"type": str, "help": "model scale: toy, tiny or full"})
    variant: str = field(default="full", metadata={"type": str, "help": "basic or full"})
    d_model: int | None = _opt(int)
    num_heads: int | None = _opt(int)
    layers_v: int | None = _opt(int)
    layers_i: int | None = _opt(int)
    layers_s: int | None = _opt(int)
    max_len: int | None = _opt(int)
    dropout: float | None = _opt(float)
    image_height: int | None = _opt(int)
    image_width: int | None = _opt(int)
    model_seed: int = field(default=0, metadata={"type": int})

    batch_size: int = field(default=32, metadata={"type": int})
    max_steps: int = field(default=2000, metadata={"type": int})
    lr_initial: float = field(default=1e-4, metadata={"type": float})
    lr_final: float = field(default=1e-5, metadata={"type": float})
    plateau_patience: int = field(default=200, metadata={"type": int})
    eval_every: int = field(default=0, metadata={"type": int})
    checkpoint_every: int = field(default=0, metadata={"type": int})
    seed: int = field(default=0, metadata={"type": int})
    grad_clip: float = field(default=5.0, metadata={"type": float})
    augment: bool = field(default=False, metadata={"type": _bool})
    deterministic: bool = field(default=True, metadata={"type": _bool})
    target_accuracy: float | None = _opt(float, "stop once periodic eval reaches this accuracy")
    eval_mode: str | None = _opt(str)

    train_manifests: list = field(default_factory=list, metadata={"type": str, "nargs": "+"})
    source_weights: list | None = field(default=None, metadata={"type": float, "nargs": "+"})
    eval_manifest: str | None = _opt(str)
    out_dir: str = field(default="runs/default", metadata={"type": str})

    def model_config(self) -> ModelConfig:
        overrides = {k: getattr(self, k) for k in _MODEL_OVERRIDES if getattr(self, k) is not None}
        cfg = ModelConfig.preset(self.preset, variant=self.variant, seed=self.model_seed, **overrides)
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, max_steps=self.max_steps, lr_initial=self.lr_initial,
            lr_final=self.lr_final, plateau_patience=self.plateau_patience, eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every, seed=self.seed, grad_clip=self.grad_clip,
            augment=self.augment, deterministic=self.deterministic, eval_mode=self.eval_mode,
            target_accuracy=self.target_accuracy, checkpoint_dir=self.out_dir,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)


def add_run_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--flag-name`` per RunConfig field; all default to "not given"."""
    for f in fields(RunConfig):
        meta = f.metadata
        kwargs = {"type": meta["type"], "default": None, "dest": f.name, "help": meta.get("help")}
        if "nargs" in meta:
            kwargs["nargs"] = meta["nargs"]
        parser.add_argument("--" + f.name.replace("_", "-"), **kwargs)


def resolve_run_config(path, args: argparse.Namespace) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then explicit flags (flags win)."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    cfg = RunConfig.from_dict(data)
    cfg.model_config()
    cfg.train_config()
    return cfg

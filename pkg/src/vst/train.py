"""Optimisation, the training loop, evaluation metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import LabelCodec, SampleSet, WeightedSampler, augment, load_samples, normalize_text
from .errors import ConfigError, ContractError, NumericFailure, NumericInputError
from .model import available_modes, compute_loss, decode

logger = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; one state entry per parameter storage."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        unique = {}
        for p in params:
            unique.setdefault(id(p), p)
        self.params = list(unique.values())
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise ContractError(f"adam step without gradients for: {missing[:5]}")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def zero_grad(self):
        ad.zero_grad(self.params)

    def state_dict(self):
        return {
            "step_count": self.step_count, "lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps,
            "m": {p.name: m for p, m in zip(self.params, self.m)},
            "v": {p.name: v for p, v in zip(self.params, self.v)},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        self.lr = float(state["lr"])
        self.beta1, self.beta2 = state["betas"]
        self.eps = float(state["eps"])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state["m"][p.name], dtype=p.dtype)
            self.v[i] = np.array(state["v"][p.name], dtype=p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


class PlateauSchedule:
    """Drop the learning rate once from ``lr_initial`` to ``lr_final``.

    The loss is smoothed with an exponential moving average; the plateau is
    reached when the average has not improved on its best value by at least
    ``min_rel_improvement`` for ``patience`` consecutive updates.
    """

    def __init__(self, lr_initial=1e-4, lr_final=1e-5, patience=200, decay=0.99, min_rel_improvement=1e-3):
        self.lr_initial, self.lr_final = lr_initial, lr_final
        self.patience, self.decay, self.min_rel = patience, decay, min_rel_improvement
        self.ema = None
        self.best = None
        self.stale = 0
        self.dropped = False

    @property
    def lr(self):
        return self.lr_final if self.dropped else self.lr_initial

    def update(self, loss: float) -> float:
        self.ema = loss if self.ema is None else self.decay * self.ema + (1.0 - self.decay) * loss
        if self.best is None or self.ema < self.best * (1.0 - self.min_rel):
            self.best = self.ema
            self.stale = 0
        else:
            self.stale += 1
        if not self.dropped and self.stale >= self.patience:
            self.dropped = True
        return self.lr


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 2000
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    plateau_patience: int = 200
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    grad_clip: float = 5.0
    augment: bool = False
    deterministic: bool = True
    eval_mode: str | None = None
    target_accuracy: float | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.lr_final > self.lr_initial:
            raise ConfigError("lr_final must not exceed lr_initial")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be positive and max_steps non-negative")


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    optimizer: Adam | None = None
    steps: int = 0

    @property
    def losses(self):
        return [rec["total"] for rec in self.log]


def _dump_batch(cfg: TrainConfig, step, images, targets):
    if not cfg.checkpoint_dir:
        return None
    path = Path(cfg.checkpoint_dir) / f"nan_batch_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, images=images, targets=targets)
    return str(path)


def train(model, sources, cfg: TrainConfig, weights=None, eval_set: SampleSet | None = None,
          log_path=None) -> TrainResult:
    """Optimise ``model`` on ``sources`` (a list of :class:`SampleSet`).

    Batches come from a :class:`WeightedSampler`; step ``k`` always uses draw
    block ``k``, so a run is reproducible from ``cfg.seed`` alone.
    """
    from .checkpoint import save_checkpoint

    if isinstance(sources, SampleSet):
        sources = [sources]
    weights = [1.0] * len(sources) if weights is None else list(weights)
    codec = LabelCodec(model.cfg.max_len)
    targets = [codec.encode_batch(s.labels) for s in sources]
    sampler = WeightedSampler([len(s) for s in sources], weights, cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr_initial)
    sched = PlateauSchedule(cfg.lr_initial, cfg.lr_final, cfg.plateau_patience)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    use_aug = cfg.augment and not cfg.deterministic
    eval_set = eval_set if eval_set is not None else sources[0]
    eval_mode = cfg.eval_mode or ("full" if model.variant == "full" else "vote")
    result = TrainResult(optimizer=opt)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    model.train()
    try:
        for step in range(cfg.max_steps):
            src, items = sampler.block(step, cfg.batch_size)
            images = np.stack([sources[s].images[i] for s, i in zip(src, items)])
            if use_aug:
                images = np.stack([augment(img, aug_rng) for img in images])
            batch_targets = np.stack([targets[s][i] for s, i in zip(src, items)])
            lr = sched.lr
            opt.zero_grad()
            try:
                trace = model.forward(images)
                total, branches = compute_loss(trace, batch_targets)
                loss_value = float(total.data)
            except NumericInputError:
                # activations overflowed before the loss could be formed
                loss_value = math.nan
            if not math.isfinite(loss_value):
                dump = _dump_batch(cfg, step, images, batch_targets)
                raise NumericFailure(f"non-finite loss at step {step}", dump)
            ad.backward(total)
            grad_norm = clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step(lr)
            sched.update(loss_value)
            record = {"step": step, "lr": lr, "total": loss_value, "grad_norm": grad_norm}
            record.update({k: float(v.data) for k, v in branches.items()})
            result.log.append(record)
            result.steps = step + 1
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            done = False
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                report = evaluate(model, eval_set, eval_mode)
                result.reports.append((step + 1, report))
                logger.info("step %d loss %.4f %s", step + 1, loss_value, report.summary())
                if log_fh:
                    log_fh.write(json.dumps({"step": step, "eval": report.to_dict()}) + "\n")
                model.train()
                done = cfg.target_accuracy is not None and report.sequence_accuracy >= cfg.target_accuracy
            if cfg.checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(Path(cfg.checkpoint_dir) / f"step{step + 1}.ckpt", model, opt)
            if done:
                break
    finally:
        if log_fh:
            log_fh.close()
        model.eval()
    return result


# -- evaluation ----------------------------------------------------------------------

def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def char_accuracy(pred: str, label: str) -> float:
    """``1 - edit_distance / max(len)``, on normalised strings."""
    pred, label = normalize_text(pred), normalize_text(label)
    longest = max(len(pred), len(label))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(pred, label) / longest


@dataclass
class EvalReport:
    mode: str
    sequence_accuracy: float
    char_accuracy: float
    per_branch: dict
    num_samples: int
    num_errors: int = 0
    errors: list = field(default_factory=list)
    predictions: list = field(default_factory=list)

    def summary(self):
        return f"seq_acc={self.sequence_accuracy:.4f} char_acc={self.char_accuracy:.4f} ({self.mode})"

    def to_dict(self):
        d = asdict(self)
        d.pop("predictions")
        return d

    def format_table(self) -> str:
        lines = [f"samples          {self.num_samples}", f"errors           {self.num_errors}",
                 f"mode             {self.mode}",
                 f"sequence acc     {self.sequence_accuracy:.4f}", f"char acc         {self.char_accuracy:.4f}"]
        for mode, acc in self.per_branch.items():
            lines.append(f"  seq acc [{mode:<5}] {acc:.4f}")
        return "\n".join(lines)


def predict_all_modes(model, images: np.ndarray, batch_size=64) -> dict:
    """Decode every image under every available mode, one forward pass per batch."""
    modes = available_modes(model.variant)
    out = {m: [] for m in modes}
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                trace = model.forward(images[start:start + batch_size])
                for m in modes:
                    out[m].extend(p.text for p in decode(trace, m))
    finally:
        model.train(was_training)
    return out


def evaluate(model, samples, mode: str = "vote", batch_size=64) -> EvalReport:
    """Score ``samples`` (a :class:`SampleSet` or manifest path) under ``mode``.

    Accuracy is exact match after lower-casing and dropping non-alphanumerics.
    Per-branch accuracies for all other modes come from the same forward pass.
    """
    if not isinstance(samples, SampleSet):
        samples = load_samples(samples, model.cfg.image_height, model.cfg.image_width)
    if mode not in available_modes(model.variant):
        raise ContractError(f"decode mode {mode!r} is not available for a {model.variant} model")
    if len(samples) == 0:
        raise ContractError(f"nothing to evaluate ({len(samples.errors)} unreadable samples)")
    preds = predict_all_modes(model, samples.images, batch_size)
    labels = [normalize_text(s) for s in samples.labels]
    per_branch = {m: float(np.mean([normalize_text(p) == y for p, y in zip(ps, labels)])) for m, ps in preds.items()}
    chosen = preds[mode]
    return EvalReport(
        mode=mode,
        sequence_accuracy=per_branch[mode],
        char_accuracy=float(np.mean([char_accuracy(p, y) for p, y in zip(chosen, samples.labels)])),
        per_branch=per_branch,
        num_samples=len(samples),
        num_errors=len(samples.errors),
        errors=list(samples.errors),
        predictions=list(zip(chosen, samples.labels)),
    )

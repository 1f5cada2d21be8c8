"""scikit-learn compatible wrapper: ``fit(images, labels)`` / ``predict(images)``."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data import SampleSet, preprocess_image
from .errors import ConfigError
from .model import ModelConfig, VSTModel, available_modes, decode, probabilities
from .train import TrainConfig, evaluate, train


def check_images(X, height, width) -> np.ndarray:
    """Return a float32 ``N x 3 x height x width`` batch.

    Accepts either an already preprocessed 4-D float array of that shape or a
    sequence of raw ``H x W x 3`` (or ``H x W``) uint8 images, which are
    resized and padded here.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4 and X.dtype.kind == "f":
        if X.shape[1:] != (3, height, width):
            raise ValueError(f"expected preprocessed images of shape (N, 3, {height}, {width}), got {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("images contain non-finite values")
        return np.ascontiguousarray(X, dtype=np.float32)
    images = list(X)
    if not images:
        raise ValueError("no images given")
    return np.stack([preprocess_image(np.asarray(img), height, width) for img in images])


def check_labels(y, n) -> list:
    labels = [str(s) for s in y]
    if len(labels) != n:
        raise ValueError(f"got {n} images but {len(labels)} labels")
    if any(not s for s in labels):
        raise ValueError("labels must be non-empty")
    return labels


class VSTRecognizer(BaseEstimator):
    """Text recogniser estimator over :class:`~vst.model.VSTModel`.

    ``preset`` picks the architecture scale (``toy``, ``tiny`` or ``full``);
    the remaining model arguments override single preset fields when not None.
    """

    def __init__(self, preset="toy", variant="full", max_len=None, d_model=None, num_heads=None,
                 num_layers=None, dropout=None, max_steps=2000, batch_size=32, lr_initial=1e-4,
                 lr_final=1e-5, plateau_patience=200, grad_clip=5.0, decode_mode=None,
                 augment=False, random_state=0):
        self.preset = preset
        self.variant = variant
        self.max_len = max_len
        self.d_model = d_model
        self.num_heads = num_heads
        self.num_layers = num_layers
        self.dropout = dropout
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr_initial = lr_initial
        self.lr_final = lr_final
        self.plateau_patience = plateau_patience
        self.grad_clip = grad_clip
        self.decode_mode = decode_mode
        self.augment = augment
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        cfg = ModelConfig.preset(self.preset, variant=self.variant).to_dict()
        cfg["seed"] = self.random_state
        for key in ("max_len", "num_heads", "dropout"):
            if getattr(self, key) is not None:
                cfg[key] = getattr(self, key)
        if self.num_layers is not None:
            cfg.update(layers_v=self.num_layers, layers_i=self.num_layers, layers_s=self.num_layers)
        if self.d_model is not None:
            bb = cfg["backbone"]
            bb["channels"] = tuple(bb["channels"][:-1]) + (self.d_model,)
            bb["output_dim"] = cfg["d_model"] = self.d_model
        try:
            return ModelConfig.from_dict(cfg)
        except ConfigError as exc:
            raise ValueError(str(exc)) from exc

    def _mode(self):
        mode = self.decode_mode or ("full" if self.variant == "full" else "vote")
        if mode not in available_modes(self.variant):
            raise ValueError(f"decode_mode {mode!r} not available for variant {self.variant!r}")
        return mode

    def fit(self, X, y):
        cfg = self._model_config()
        images = check_images(X, cfg.image_height, cfg.image_width)
        labels = check_labels(y, len(images))
        self._mode()
        self.model_ = VSTModel(cfg)
        tcfg = TrainConfig(
            batch_size=self.batch_size, max_steps=self.max_steps, lr_initial=self.lr_initial,
            lr_final=self.lr_final, plateau_patience=self.plateau_patience, grad_clip=self.grad_clip,
            seed=self.random_state, augment=self.augment, deterministic=not self.augment,
        )
        self.history_ = train(self.model_, [SampleSet(images, labels)], tcfg)
        self.n_steps_ = self.history_.steps
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-position character distributions, N x max_len x 38."""
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        images = check_images(X, cfg.image_height, cfg.image_width)
        with ad.no_grad():
            return np.concatenate([probabilities(self.model_.forward(images[i:i + 64]), self._mode())
                                   for i in range(0, len(images), 64)])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        images = check_images(X, cfg.image_height, cfg.image_width)
        texts = []
        with ad.no_grad():
            for i in range(0, len(images), 64):
                texts.extend(p.text for p in decode(self.model_.forward(images[i:i + 64]), self._mode()))
        return np.array(texts, dtype=object)

    def score(self, X, y) -> float:
        """Sequence accuracy after case and punctuation normalisation."""
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        images = check_images(X, cfg.image_height, cfg.image_width)
        labels = check_labels(y, len(images))
        return evaluate(self.model_, SampleSet(images, labels), self._mode()).sequence_accuracy

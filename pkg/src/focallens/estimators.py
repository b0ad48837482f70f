"""scikit-learn style wrappers: the conditional encoder and a k-shot linear probe."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .autodiff import Tensor
from .data import (
    NEUTRAL_INSTRUCTION,
    Dataset,
    Triplet,
    Vocabulary,
    build_vocab,
    template_corpus,
    tokenize,
)
from .encoders import EncoderConfig, TargetEncoder, encode_batch, param_shapes
from .metrics import thread_count
from .training import AdamState, TrainConfig, train

ENCODE_CHUNK = 64


def check_images(X, image_size: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Validate an (N, H, W, 3) batch of finite images with values in [0, 1]."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    w, h = image_size
    if X.ndim != 4 or X.shape[1:] != (h, w, 3):
        raise ValueError(f"expected images of shape (N, {h}, {w}, 3), got {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return X


class FocalLensEncoder(TransformerMixin, BaseEstimator):
    """Instruction-conditioned image encoder trained with a contrastive objective.

    ``fit`` takes instruction triplets (or a :class:`~focallens.data.Dataset`);
    ``transform`` embeds images under one instruction.

    Parameters
    ----------
    variant : {"clip_style", "mllm_style"}, default="clip_style"
        Condition-token ViT or indicator-token causal decoder.
    embed_dim, num_layers, num_heads, mlp_ratio, patch_size, max_seq_len, condition_layers : int
        Encoder sizes.
    batch_size, epochs, learning_rate, weight_decay, warmup_ratio : training schedule.
    temperature : float, default=0.07
        Initial softmax temperature (learned, floored at ``min_temperature``).
    target_seed : int, default=1234
        Seed of the frozen target encoders.
    random_state : int, default=0
        Seed for initialisation and batch order.
    """

    def __init__(
        self,
        variant: str = "clip_style",
        embed_dim: int = 64,
        num_layers: int = 2,
        num_heads: int = 4,
        mlp_ratio: int = 4,
        patch_size: int = 8,
        max_seq_len: int = 32,
        condition_layers: int = 1,
        batch_size: int = 64,
        epochs: int = 20,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.0,
        warmup_ratio: float = 0.03,
        temperature: float = 0.07,
        min_temperature: float = 0.01,
        symmetric_loss: bool = False,
        target_seed: int = 1234,
        dtype: str = "float64",
        random_state: int = 0,
    ):
        self.variant = variant
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.patch_size = patch_size
        self.max_seq_len = max_seq_len
        self.condition_layers = condition_layers
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.warmup_ratio = warmup_ratio
        self.temperature = temperature
        self.min_temperature = min_temperature
        self.symmetric_loss = symmetric_loss
        self.target_seed = target_seed
        self.dtype = dtype
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            warmup_ratio=self.warmup_ratio,
            seed=self.random_state,
            variant=self.variant,
            temperature=self.temperature,
            min_temperature=self.min_temperature,
            symmetric_loss=self.symmetric_loss,
        )

    def _make_targets(self, vocab_size: int) -> None:
        self.text_target_ = TargetEncoder(
            "frozen_text", vocab_size, self.embed_dim, self.target_seed, self.num_heads
        )
        self.color_target_ = TargetEncoder(
            "numeric_color", 0, self.embed_dim, self.target_seed, self.num_heads
        )

    def fit(self, X: Union[Dataset, Sequence[Triplet]], y=None, vocab: Optional[Vocabulary] = None):
        """Train on instruction triplets; ``y`` is ignored."""
        if isinstance(X, Dataset):
            vocab = vocab or X.vocab
            triplets = X.triplets()
            image_size = (X.images.shape[2], X.images.shape[1])
        else:
            triplets = list(X)
            if not triplets:
                raise ValueError("fit needs at least one triplet")
            h, w = triplets[0].image.shape[:2]
            image_size = (w, h)
        if vocab is None:
            vocab = build_vocab(template_corpus([t.spec for t in triplets]))
        self.vocab_ = vocab
        self.encoder_config_ = EncoderConfig(
            vocab_size=len(vocab),
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            patch_size=self.patch_size,
            max_seq_len=self.max_seq_len,
            image_size=image_size,
            variant=self.variant,
            condition_layers=self.condition_layers,
            dtype=self.dtype,
        )
        self._make_targets(len(vocab))
        params, state, report = train(
            self._train_config(), triplets, self.encoder_config_, self.text_target_, self.color_target_
        )
        self.params_ = params
        self.optimizer_state_ = state
        self.report_ = report
        self.n_steps_ = state.step
        return self

    # -- inference ---------------------------------------------------------

    def _instruction_ids(self, instruction) -> tuple[int, ...]:
        if isinstance(instruction, str):
            ids = tokenize(instruction, self.vocab_)
        else:
            ids = [int(t) for t in instruction]
        if not ids:
            raise ValueError("instruction must contain at least one token")
        return tuple(ids)

    def transform(self, X, instruction: Union[str, Sequence[int]] = NEUTRAL_INSTRUCTION) -> np.ndarray:
        """Unit-norm embeddings (N, embed_dim) of images ``X`` under ``instruction``."""
        check_is_fitted(self, "params_")
        images = check_images(X, self.encoder_config_.image_size)
        ids = self._instruction_ids(instruction)
        starts = range(0, len(images), ENCODE_CHUNK)

        def run(start: int) -> np.ndarray:
            chunk = images[start : start + ENCODE_CHUNK]
            with ad.no_grad():
                out = encode_batch(chunk, [ids] * len(chunk), self.params_, self.encoder_config_)
            return out.data.astype(np.float64)

        threads = thread_count()
        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(s) for s in starts]
        return np.concatenate(parts, axis=0)

    def embed(self, images, instruction: str) -> np.ndarray:
        return self.transform(images, instruction)

    # -- persistence -------------------------------------------------------

    def to_checkpoint(self, extra: Optional[dict] = None) -> ckpt_io.Checkpoint:
        check_is_fitted(self, "params_")
        tensors = {f"param/{k}": v.data for k, v in self.params_.items()}
        for name, target in (("text", self.text_target_), ("color", self.color_target_)):
            tensors.update({f"target/{name}/{k}": v for k, v in target.params.items()})
        state = getattr(self, "optimizer_state_", None)
        if state is not None:
            tensors.update({f"opt/m/{k}": np.asarray(v) for k, v in state.m.items()})
            tensors.update({f"opt/v/{k}": np.asarray(v) for k, v in state.v.items()})
        meta = {
            "estimator_params": self.get_params(),
            "encoder_config": self.encoder_config_.to_dict(),
            "targets": {"text": self.text_target_.config(), "color": self.color_target_.config()},
            "target_fingerprints": {
                "text": self.text_target_.fingerprint(),
                "color": self.color_target_.fingerprint(),
            },
            "vocab": list(self.vocab_.tokens),
            "step": int(getattr(self, "n_steps_", 0)),
            "optimizer_step": int(state.step) if state is not None else 0,
            "rng": {"seed": int(self.random_state), "batch_seed_scheme": "[seed, epoch]"},
        }
        if extra:
            meta.update(extra)
        return ckpt_io.Checkpoint(metadata=meta, tensors=tensors)

    def save(self, path: Union[str, Path], extra: Optional[dict] = None) -> None:
        ckpt_io.save(self.to_checkpoint(extra), path)

    @classmethod
    def from_checkpoint(cls, ckpt: ckpt_io.Checkpoint) -> "FocalLensEncoder":
        meta = ckpt.metadata
        try:
            est = cls(**meta["estimator_params"])
            config = EncoderConfig.from_dict(meta["encoder_config"])
            vocab = Vocabulary(meta["vocab"])
        except (KeyError, TypeError) as exc:
            raise ckpt_io.CheckpointError(f"checkpoint metadata incomplete: {exc}") from None
        est.vocab_ = vocab
        est.encoder_config_ = config
        est._make_targets(len(vocab))
        for name, target in (("text", est.text_target_), ("color", est.color_target_)):
            if target.fingerprint() != meta["target_fingerprints"][name]:
                raise ckpt_io.CheckpointError(f"frozen {name} target does not match checkpoint")
        stored = ckpt.group("param")
        expected = param_shapes(config)
        if set(stored) != set(expected):
            raise ckpt_io.CheckpointError(
                f"parameter set mismatch: {sorted(set(stored) ^ set(expected))}"
            )
        dtype = np.dtype(config.dtype)
        est.params_ = {
            k: Tensor(stored[k].astype(dtype), requires_grad=True, dtype=dtype) for k in expected
        }
        state = AdamState(step=int(meta.get("optimizer_step", 0)))
        state.m = {k: v for k, v in ckpt.group("opt/m").items()}
        state.v = {k: v for k, v in ckpt.group("opt/v").items()}
        est.optimizer_state_ = state
        est.n_steps_ = int(meta.get("step", 0))
        return est

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FocalLensEncoder":
        return cls.from_checkpoint(ckpt_io.load(path))


class ConditionedEmbedding(TransformerMixin, BaseEstimator):
    """Pipeline step that embeds images with a prefit encoder under a fixed instruction."""

    def __init__(self, encoder: Optional[FocalLensEncoder] = None, instruction: str = NEUTRAL_INSTRUCTION):
        self.encoder = encoder
        self.instruction = instruction

    def fit(self, X, y=None):
        if self.encoder is None:
            raise ValueError("ConditionedEmbedding needs a fitted encoder")
        check_is_fitted(self.encoder, "params_")
        self.n_features_out_ = self.encoder.embed_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        return self.encoder.transform(X, self.instruction)


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Softmax regression trained with mini-batch Adam on frozen features."""

    def __init__(
        self,
        learning_rate: float = 1e-2,
        epochs: int = 100,
        batch_size: int = 32,
        random_state: int = 0,
    ):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        n, d = X.shape
        c = len(self.classes_)
        rng = np.random.default_rng(self.random_state)
        W = np.zeros((d, c))
        b = np.zeros(c)
        mW, vW, mb, vb = np.zeros_like(W), np.zeros_like(W), np.zeros_like(b), np.zeros_like(b)
        b1, b2, eps = 0.9, 0.999, 1e-8
        onehot = np.eye(c)[codes]
        t = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                logits = X[idx] @ W + b
                logits -= logits.max(axis=1, keepdims=True)
                p = np.exp(logits)
                p /= p.sum(axis=1, keepdims=True)
                g = (p - onehot[idx]) / idx.size
                gW, gb = X[idx].T @ g, g.sum(axis=0)
                t += 1
                mW = b1 * mW + (1 - b1) * gW
                vW = b2 * vW + (1 - b2) * gW * gW
                mb = b1 * mb + (1 - b1) * gb
                vb = b2 * vb + (1 - b2) * gb * gb
                W -= self.learning_rate * (mW / (1 - b1**t)) / (np.sqrt(vW / (1 - b2**t)) + eps)
                b -= self.learning_rate * (mb / (1 - b1**t)) / (np.sqrt(vb / (1 - b2**t)) + eps)
        self.coef_ = W.T
        self.intercept_ = b
        self.n_features_in_ = d
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        # argmax takes the first maximum, so ties resolve to the lowest class
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

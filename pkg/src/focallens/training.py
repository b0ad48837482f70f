"""Contrastive instruction tuning: similarity matrix, loss, batching, AdamW."""

from __future__ import annotations

import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Triplet
from .encoders import (
    EncoderConfig,
    MASK_VALUE,
    Params,
    TargetEncoder,
    encode_batch,
    encode_targets,
    init_params,
)

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    seed: int = 0
    variant: str = "clip_style"
    temperature: float = 0.07
    min_temperature: float = 0.01
    symmetric_loss: bool = False
    mask_duplicate_targets: bool = True
    require_distinct_outputs: bool = False

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.min_temperature <= self.temperature:
            raise ValueError("need 0 < min_temperature <= temperature")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    triplets: list[Triplet]

    def __len__(self) -> int:
        return len(self.triplets)

    @property
    def images(self) -> np.ndarray:
        return np.stack([t.image for t in self.triplets])

    @property
    def instructions(self) -> list[tuple[int, ...]]:
        return [t.instruction for t in self.triplets]

    @property
    def target_keys(self) -> list:
        return [t.target_key for t in self.triplets]

    def duplicate_count(self) -> int:
        return len(self.triplets) - len(set(self.target_keys))


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    temperatures: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0
    elapsed: float = 0.0
    seed: int = 0
    duplicate_targets: int = 0
    target_fingerprint_before: str = ""
    target_fingerprint_after: str = ""

    def epoch_means(self) -> list[float]:
        n = self.steps_per_epoch
        return [float(np.mean(self.losses[i : i + n])) for i in range(0, len(self.losses), n)]

    def loss_log(self) -> str:
        lines = ["step\tlr\tloss"]
        for i, (lr, loss) in enumerate(zip(self.learning_rates, self.losses)):
            lines.append(f"{i}\t{lr:.9g}\t{loss:.17g}")
        return "\n".join(lines) + "\n"


class NonFiniteError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; carries the last good parameters."""

    def __init__(self, step: int, params: dict, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step
        self.params = params


# ---------------------------------------------------------------------------
# objective


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} must be unit-norm (max deviation {np.abs(norms - 1).max():.3g})")


def similarity_matrix(cond_embeds, target_embeds) -> Tensor:
    """S[i, j] = <cond_i, target_j> for unit vectors."""
    cond, target = _as_tensor(cond_embeds), _as_tensor(target_embeds)
    if cond.ndim != 2 or cond.shape != target.shape:
        raise ad.ShapeError("similarity_matrix", cond.shape, target.shape)
    _check_unit(cond.data, "conditional embeddings")
    _check_unit(target.data, "target embeddings")
    return ad.matmul(cond, ad.transpose(target))


def duplicate_mask(target_keys: Sequence) -> np.ndarray:
    """Additive mask hiding, for each row, the other columns that share its target."""
    keys = list(target_keys)
    n = len(keys)
    ids = {k: i for i, k in enumerate(dict.fromkeys(keys))}
    codes = np.array([ids[k] for k in keys])
    same = codes[:, None] == codes[None, :]
    same[np.arange(n), np.arange(n)] = False
    return np.where(same, MASK_VALUE, 0.0)


def contrastive_loss(
    S,
    log_temperature,
    target_keys: Optional[Sequence] = None,
    symmetric: bool = False,
) -> Tensor:
    """Mean row-wise cross-entropy of softmax(S / tau) against the diagonal.

    With ``target_keys``, columns whose target equals the row's own target
    are excluded from that row's softmax, so duplicate captions are not
    treated as negatives.
    """
    S = _as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 2:
        raise ad.ShapeError("contrastive_loss", S.shape, detail="need a square matrix with B >= 2")
    if not np.all(np.isfinite(S.data)):
        raise NonFiniteError("contrastive_loss: similarity matrix has non-finite entries")
    log_t = _as_tensor(log_temperature)
    logits = ad.mul(S, ad.exp(ad.mul(log_t, -1.0)))
    n = S.shape[0]
    labels = np.arange(n)
    if target_keys is not None:
        if len(target_keys) != n:
            raise ValueError(f"{len(target_keys)} target keys for a {n}x{n} matrix")
        mask = duplicate_mask(target_keys)
        if mask.any():
            logits = ad.add(logits, Tensor(mask.astype(logits.dtype)))
    loss = ad.cross_entropy(logits, labels)
    if symmetric:
        loss = ad.mul(ad.add(loss, ad.cross_entropy(ad.transpose(logits), labels)), 0.5)
    return loss


# ---------------------------------------------------------------------------
# batching


def build_batches(
    triplets: Sequence[Triplet],
    batch_size: int,
    seed,
    require_distinct: bool = False,
) -> list[Batch]:
    """Shuffle, co-schedule triplets of one image, repair duplicate targets.

    Image groups are laid out contiguously in a shuffled order and split
    only when a batch boundary forces it. A triplet whose target already
    occurs in its batch is swapped with the first later triplet carrying a
    fresh target; when no such triplet exists the duplicate stays, unless
    ``require_distinct`` is set.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if len(triplets) < batch_size:
        raise ValueError(f"only {len(triplets)} triplets for batch_size {batch_size}")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[Triplet]] = {}
    for t in triplets:
        groups.setdefault(t.image_id, []).append(t)
    group_list = list(groups.values())
    queue: list[Triplet] = []
    for g in rng.permutation(len(group_list)):
        members = group_list[g]
        queue.extend(members[i] for i in rng.permutation(len(members)))

    # keys at queue positions not yet placed into a batch
    remaining = Counter(t.target_key for t in queue)
    batches = []
    for b in range(len(queue) // batch_size):
        start, end = b * batch_size, (b + 1) * batch_size
        seen: set = set()
        for pos in range(start, end):
            key = queue[pos].target_key
            if key in seen:
                swap = None
                if any(c > 0 and k not in seen for k, c in remaining.items()):
                    swap = next(
                        (j for j in range(end, len(queue)) if queue[j].target_key not in seen),
                        None,
                    )
                if swap is not None:
                    queue[pos], queue[swap] = queue[swap], queue[pos]
                    key = queue[pos].target_key
                elif require_distinct:
                    raise ValueError(f"batch {b}: no distinct target left to replace a duplicate")
            seen.add(key)
            remaining[key] -= 1
        batches.append(Batch(queue[start:end]))
    return batches


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: Params,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One decoupled-weight-decay Adam update; parameter arrays are replaced, not mutated."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name in state.m and state.m[name].shape != p.shape:
            raise ad.ShapeError("adamw_step", state.m[name].shape, p.shape, detail=name)
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data * (1.0 - lr * weight_decay) - lr * update
    return state


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay towards zero."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step < warm:
        return base_lr * step / warm
    progress = (step - warm) / max(1, total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# loop


def batch_loss(
    batch: Batch,
    params: Params,
    encoder_config: EncoderConfig,
    text_target: TargetEncoder,
    color_target: Optional[TargetEncoder] = None,
    mask_duplicates: bool = True,
    symmetric: bool = False,
) -> Tensor:
    emb = encode_batch(batch.images, batch.instructions, params, encoder_config)
    targets = encode_targets(batch.triplets, text_target, color_target)
    S = similarity_matrix(emb, Tensor(targets.astype(emb.dtype), dtype=emb.dtype))
    keys = batch.target_keys if mask_duplicates else None
    return contrastive_loss(S, params["log_temp"], keys, symmetric=symmetric)


def train(
    config: TrainConfig,
    triplets: Sequence[Triplet],
    encoder_config: EncoderConfig,
    text_target: TargetEncoder,
    color_target: Optional[TargetEncoder] = None,
    params: Optional[Params] = None,
    log_every: int = 0,
) -> tuple[Params, AdamState, TrainReport]:
    """Run ``epochs`` passes of contrastive tuning; deterministic for a fixed seed."""
    if encoder_config.variant != config.variant:
        raise ValueError(
            f"encoder variant {encoder_config.variant!r} != train variant {config.variant!r}"
        )
    if params is None:
        params = init_params(encoder_config, seed=config.seed, temperature=config.temperature)
    fingerprints = [t.fingerprint() for t in (text_target, color_target) if t is not None]
    report = TrainReport(seed=config.seed, target_fingerprint_before="".join(fingerprints))
    schedule = [
        build_batches(triplets, config.batch_size, [config.seed, epoch], config.require_distinct_outputs)
        for epoch in range(config.epochs)
    ]
    steps_per_epoch = len(schedule[0])
    if steps_per_epoch * config.epochs < 2:
        raise ValueError("training needs at least two batches")
    report.steps_per_epoch = steps_per_epoch
    total = steps_per_epoch * config.epochs
    state = AdamState()
    min_log_t = math.log(config.min_temperature)
    started = time.perf_counter()
    step = 0
    for epoch, batches in enumerate(schedule):
        for batch in batches:
            lr = lr_schedule(step, total, config.learning_rate, config.warmup_ratio)
            for p in params.values():
                p.zero_grad()
            last_good = {k: v.data for k, v in params.items()}
            try:
                loss = batch_loss(
                    batch, params, encoder_config, text_target, color_target,
                    config.mask_duplicate_targets, config.symmetric_loss,
                )
            except NonFiniteError as exc:
                raise TrainingDiverged(step, last_good, str(exc)) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, last_good, f"loss is {value}")
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            try:
                adamw_step(params, grads, state, lr, config.weight_decay)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, last_good, str(exc)) from exc
            lt = params["log_temp"]
            lt.data = np.maximum(lt.data, min_log_t)
            report.losses.append(value)
            report.learning_rates.append(lr)
            report.temperatures.append(float(np.exp(lt.data)))
            report.duplicate_targets += batch.duplicate_count()
            if log_every and step % log_every == 0:
                logger.info("epoch %d step %d lr %.3g loss %.4f", epoch, step, lr, value)
            step += 1
    report.elapsed = time.perf_counter() - started
    fingerprints = [t.fingerprint() for t in (text_target, color_target) if t is not None]
    report.target_fingerprint_after = "".join(fingerprints)
    return params, state, report

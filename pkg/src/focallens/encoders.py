"""Condition-aware image encoders and the frozen target embedder.

Two conditional image encoders share one transformer block implementation:

* ``clip_style``: a ViT whose token sequence is ``[CLS] + patches + condition``,
  where the condition token is the projected output of a separate instruction
  encoder. The CLS output is the embedding.
* ``mllm_style``: a causal decoder over ``patches + instruction + <eos>``; the
  output at the trailing ``<eos>`` indicator is the embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EOS

VARIANTS = ("clip_style", "mllm_style")
INIT_STD = 0.02
MASK_VALUE = -1e9

Params = dict[str, Tensor]


@dataclass
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 8
    max_seq_len: int = 32
    image_size: tuple[int, int] = (32, 32)
    variant: str = "clip_style"
    condition_layers: int = 1
    dtype: str = "float64"

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        w, h = self.image_size
        if w % self.patch_size or h % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} does not divide canvas {w}x{h}")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must cover the reserved tokens")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def num_patches(self) -> int:
        w, h = self.image_size
        return (w // self.patch_size) * (h // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# initialisation


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _block_shapes(prefix: str, d: int, hidden: int) -> dict[str, tuple]:
    return {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.qkv.w": (d, 3 * d),
        f"{prefix}.attn.qkv.b": (3 * d,),
        f"{prefix}.attn.out.w": (d, d),
        f"{prefix}.attn.out.b": (d,),
        f"{prefix}.ln2.g": (d,),
        f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.fc1.w": (d, hidden),
        f"{prefix}.mlp.fc1.b": (hidden,),
        f"{prefix}.mlp.fc2.w": (hidden, d),
        f"{prefix}.mlp.fc2.b": (d,),
    }


def param_shapes(config: EncoderConfig) -> dict[str, tuple]:
    d, hidden = config.embed_dim, config.embed_dim * config.mlp_ratio
    shapes: dict[str, tuple] = {
        "patch.w": (config.patch_dim, d),
        "patch.b": (d,),
    }
    if config.variant == "clip_style":
        shapes["img.cls"] = (d,)
        shapes["img.pos"] = (config.num_patches + 2, d)
        shapes["img.cond.w"] = (d, d)
        for i in range(config.num_layers):
            shapes.update(_block_shapes(f"img.blocks.{i}", d, hidden))
        shapes.update({"img.ln_f.g": (d,), "img.ln_f.b": (d,), "img.head.w": (d, d)})
        shapes["text.tok"] = (config.vocab_size, d)
        shapes["text.pos"] = (config.max_seq_len, d)
        for i in range(config.condition_layers):
            shapes.update(_block_shapes(f"text.blocks.{i}", d, hidden))
        shapes.update({"text.ln_f.g": (d,), "text.ln_f.b": (d,), "text.head.w": (d, d)})
    else:
        shapes["dec.tok"] = (config.vocab_size, d)
        shapes["dec.pos"] = (config.max_seq_len, d)
        for i in range(config.num_layers):
            shapes.update(_block_shapes(f"dec.blocks.{i}", d, hidden))
        shapes.update({"dec.ln_f.g": (d,), "dec.ln_f.b": (d,), "dec.head.w": (d, d)})
    shapes["log_temp"] = ()
    return shapes


def init_params(
    config: EncoderConfig, seed: int = 0, temperature: float = 0.07
) -> Params:
    """Truncated-normal weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name == "log_temp":
            value = np.asarray(np.log(temperature))
        elif name.endswith(".g"):
            value = np.ones(shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            value = _trunc_normal(rng, shape, INIT_STD)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, dtype=dtype)
    return params


def check_params(params: Params, config: EncoderConfig) -> None:
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise KeyError(f"missing parameters: {missing}")
    for name, shape in expected.items():
        t = params[name]
        if t.shape != shape:
            raise ad.ShapeError(f"param {name}", t.shape, shape)
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"parameter {name} has non-finite values")


# ---------------------------------------------------------------------------
# building blocks


def _linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def _attention(x: Tensor, p: Params, prefix: str, num_heads: int, mask) -> Tensor:
    bsz, seq, d = x.shape
    dh = d // num_heads
    qkv = _linear(x, p[f"{prefix}.qkv.w"], p[f"{prefix}.qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (bsz, seq, 3, num_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, mask)
    attn = ad.softmax_rows(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (bsz, seq, d))
    return _linear(ctx, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])


def transformer_block(x: Tensor, p: Params, prefix: str, num_heads: int, mask=None) -> Tensor:
    """Pre-norm residual block: attention then a GELU MLP."""
    h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = ad.add(x, _attention(h, p, f"{prefix}.attn", num_heads, mask))
    h = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = ad.gelu(_linear(h, p[f"{prefix}.mlp.fc1.w"], p[f"{prefix}.mlp.fc1.b"]))
    return ad.add(x, _linear(h, p[f"{prefix}.mlp.fc2.w"], p[f"{prefix}.mlp.fc2.b"]))


def causal_mask(seq: int, dtype=np.float64) -> Tensor:
    m = np.triu(np.full((seq, seq), MASK_VALUE, dtype=dtype), k=1)
    return Tensor(m, dtype=dtype)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, 3) images in [0, 1] -> (B, N, P*P*3) centred patch vectors."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ad.ShapeError("patchify", images.shape, detail=f"patch_size {patch_size}")
    g_h, g_w = h // patch_size, w // patch_size
    x = images.reshape(b, g_h, patch_size, g_w, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g_h * g_w, patch_size * patch_size * c) - 0.5


def _check_images(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.dtype(config.dtype))
    if images.ndim == 3:
        images = images[None]
    w, h = config.image_size
    if images.ndim != 4 or images.shape[1:] != (h, w, 3):
        raise ad.ShapeError("image encoder", images.shape, (h, w, 3))
    return images


def _check_ids(ids: Sequence[int], config: EncoderConfig, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError(f"{what}: token sequence must be a nonempty 1-d sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"{what}: token ids must lie in [0, {config.vocab_size})")
    return ids


def _group_by_sequence(seqs: Sequence[Sequence[int]]) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Unique sequences in first-seen order, and each item's index into them."""
    uniques: dict[tuple[int, ...], int] = {}
    which = np.empty(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        which[i] = uniques.setdefault(tuple(int(t) for t in s), len(uniques))
    return list(uniques), which


# ---------------------------------------------------------------------------
# clip_style


def encode_condition(instruction: Sequence[int], params: Params, config: EncoderConfig) -> Tensor:
    """Unit-norm condition embedding of one instruction, shape (D,)."""
    ids = _check_ids(instruction, config, "encode_condition")
    if ids.size > config.max_seq_len:
        raise ValueError(f"instruction length {ids.size} exceeds max_seq_len {config.max_seq_len}")
    x = ad.add(ad.take_rows(params["text.tok"], ids), params["text.pos"][: ids.size])
    x = ad.reshape(x, (1, ids.size, config.embed_dim))
    for i in range(config.condition_layers):
        x = transformer_block(x, params, f"text.blocks.{i}", config.num_heads)
    x = ad.layer_norm(x, params["text.ln_f.g"], params["text.ln_f.b"])
    pooled = ad.mean(ad.reshape(x, (ids.size, config.embed_dim)), axis=0)
    return ad.l2_normalize(ad.matmul(ad.reshape(pooled, (1, -1)), params["text.head.w"])[0])


def encode_conditions(
    instructions: Sequence[Sequence[int]], params: Params, config: EncoderConfig
) -> Tensor:
    """Condition embeddings for a batch, shape (B, D); repeated instructions are encoded once."""
    uniques, which = _group_by_sequence(instructions)
    table = ad.concat(
        [ad.reshape(encode_condition(s, params, config), (1, -1)) for s in uniques], axis=0
    )
    return ad.take_rows(table, which)


def encode_image_conditional_clip(
    images: np.ndarray,
    conditions: Tensor,
    params: Params,
    config: EncoderConfig,
    patch_order: Optional[Sequence[int]] = None,
) -> Tensor:
    """Embed (B, H, W, 3) images under (B, D) condition embeddings.

    ``patch_order`` permutes patch tokens together with their positional
    embeddings; the output must not depend on it.
    """
    images = _check_images(images, config)
    bsz, d = images.shape[0], config.embed_dim
    if conditions.ndim == 1:
        conditions = ad.reshape(conditions, (1, -1))
    if conditions.shape != (bsz, d):
        raise ad.ShapeError("encode_image_conditional_clip", conditions.shape, (bsz, d))
    dtype = np.dtype(config.dtype)
    patches = Tensor(patchify(images, config.patch_size), dtype=dtype)
    pos = params["img.pos"]
    n = config.num_patches
    patch_pos = pos[1 : n + 1]
    if patch_order is not None:
        order = np.asarray(patch_order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(n)):
            raise ValueError("patch_order must be a permutation of the patch indices")
        patches = Tensor(patches.data[:, order], dtype=dtype)
        patch_pos = ad.take_rows(patch_pos, order)
    tokens = ad.add(_linear(patches, params["patch.w"], params["patch.b"]), patch_pos)
    cls = ad.add(Tensor(np.zeros((bsz, 1, d), dtype=dtype)), ad.add(params["img.cls"], pos[0]))
    cond = ad.add(ad.reshape(ad.matmul(conditions, params["img.cond.w"]), (bsz, 1, d)), pos[n + 1])
    x = ad.concat([cls, tokens, cond], axis=1)
    for i in range(config.num_layers):
        x = transformer_block(x, params, f"img.blocks.{i}", config.num_heads)
    x = ad.layer_norm(x[:, 0, :], params["img.ln_f.g"], params["img.ln_f.b"])
    return ad.l2_normalize(ad.matmul(x, params["img.head.w"]))


# ---------------------------------------------------------------------------
# mllm_style


def _mllm_group(images: np.ndarray, ids: np.ndarray, params: Params, config: EncoderConfig) -> Tensor:
    bsz, d = images.shape[0], config.embed_dim
    dtype = np.dtype(config.dtype)
    n = config.num_patches
    seq = n + ids.size + 1
    if seq > config.max_seq_len:
        raise ValueError(
            f"sequence of {n} patches + {ids.size} instruction tokens + indicator "
            f"exceeds max_seq_len {config.max_seq_len}"
        )
    pos = params["dec.pos"]
    patches = Tensor(patchify(images, config.patch_size), dtype=dtype)
    img_tokens = ad.add(_linear(patches, params["patch.w"], params["patch.b"]), pos[:n])
    text = ad.add(
        ad.take_rows(params["dec.tok"], np.concatenate([ids, [EOS]])), pos[n:seq]
    )
    text = ad.add(Tensor(np.zeros((bsz, 1, d), dtype=dtype)), ad.reshape(text, (1, seq - n, d)))
    x = ad.concat([img_tokens, text], axis=1)
    mask = causal_mask(seq, dtype)
    for i in range(config.num_layers):
        x = transformer_block(x, params, f"dec.blocks.{i}", config.num_heads, mask)
    x = ad.layer_norm(x[:, seq - 1, :], params["dec.ln_f.g"], params["dec.ln_f.b"])
    return ad.l2_normalize(ad.matmul(x, params["dec.head.w"]))


def encode_image_conditional_mllm(
    images: np.ndarray,
    instructions: Sequence[Sequence[int]],
    params: Params,
    config: EncoderConfig,
) -> Tensor:
    """Indicator-token embeddings for a batch of (image, instruction) pairs.

    Items are grouped by instruction so each group shares one sequence length.
    """
    images = _check_images(images, config)
    if len(instructions) != images.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {len(instructions)} instructions")
    uniques, which = _group_by_sequence(instructions)
    parts, order = [], []
    for g, seq in enumerate(uniques):
        ids = _check_ids(seq, config, "encode_image_conditional_mllm")
        members = np.flatnonzero(which == g)
        parts.append(_mllm_group(images[members], ids, params, config))
        order.append(members)
    out = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    if len(parts) == 1:
        return out
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return ad.take_rows(out, inverse)


def encode_batch(
    images: np.ndarray,
    instructions: Sequence[Sequence[int]],
    params: Params,
    config: EncoderConfig,
) -> Tensor:
    """Conditional embeddings for either variant, shape (B, D)."""
    if config.variant == "clip_style":
        conds = encode_conditions(instructions, params, config)
        return encode_image_conditional_clip(images, conds, params, config)
    return encode_image_conditional_mllm(images, instructions, params, config)


# ---------------------------------------------------------------------------
# frozen target


class TargetEncoder:
    """Fixed embedder for contrastive targets; never receives gradients.

    ``frozen_text`` runs a randomly initialised transformer block over output
    tokens and mean-pools; ``numeric_color`` maps an RGB triple through fixed
    random Fourier features, so cosine similarity decays smoothly with RGB
    distance.
    """

    MODES = ("frozen_text", "numeric_color")

    def __init__(
        self,
        mode: str,
        vocab_size: int = 0,
        embed_dim: int = 64,
        seed: int = 1234,
        num_heads: int = 4,
        color_bandwidth: float = 0.35,
    ):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}, got {mode!r}")
        if mode == "frozen_text" and vocab_size < 3:
            raise ValueError("frozen_text target needs a vocabulary size")
        if embed_dim % 2 or embed_dim % num_heads:
            raise ValueError(f"embed_dim {embed_dim} must be even and divisible by num_heads")
        self.mode = mode
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.seed = seed
        self.num_heads = num_heads
        self.color_bandwidth = color_bandwidth
        rng = np.random.default_rng([seed, self.MODES.index(mode)])
        d = embed_dim
        arrays: dict[str, np.ndarray] = {}
        if mode == "frozen_text":
            arrays["tok"] = rng.normal(0.0, 1.0, size=(vocab_size, d))
            arrays["pos"] = rng.normal(0.0, 1.0, size=(64, d))
            for name, shape in _block_shapes("block", d, 4 * d).items():
                if name.endswith(".g"):
                    arrays[name] = np.ones(shape)
                elif name.endswith(".b"):
                    arrays[name] = np.zeros(shape)
                else:
                    arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            arrays["freqs"] = rng.normal(0.0, color_bandwidth, size=(d // 2, 3))
        for a in arrays.values():
            a.setflags(write=False)
        self._arrays = arrays

    @property
    def params(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.mode.encode())
        for name in sorted(self._arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._arrays[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def config(self) -> dict:
        return {
            "mode": self.mode,
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "seed": self.seed,
            "num_heads": self.num_heads,
            "color_bandwidth": self.color_bandwidth,
        }

    def encode(self, payload) -> np.ndarray:
        return self.encode_batch([payload])[0]

    def encode_batch(self, payloads: Sequence) -> np.ndarray:
        if self.mode == "numeric_color":
            raw = np.asarray(payloads)
            if raw.ndim != 2 or raw.shape[1] != 3 or not np.issubdtype(raw.dtype, np.floating):
                raise TypeError("numeric_color target expects RGB triples of floats")
            phase = 2 * np.pi * raw.astype(np.float64) @ self._arrays["freqs"].T
            feats = np.concatenate([np.cos(phase), np.sin(phase)], axis=1)
            return feats / np.linalg.norm(feats, axis=1, keepdims=True)
        out = np.empty((len(payloads), self.embed_dim))
        cache: dict[tuple, np.ndarray] = {}
        for i, ids in enumerate(payloads):
            if isinstance(ids, str) or not all(isinstance(t, (int, np.integer)) for t in ids):
                raise TypeError("frozen_text target expects token id sequences")
            key = tuple(int(t) for t in ids)
            if key not in cache:
                cache[key] = self._encode_text(np.asarray(key, dtype=np.int64))
            out[i] = cache[key]
        return out

    def _encode_text(self, ids: np.ndarray) -> np.ndarray:
        if ids.size == 0:
            raise ValueError("frozen_text target: empty output sequence")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.vocab_size})")
        a = self._arrays
        frozen = {k: Tensor(v) for k, v in a.items() if k.startswith("block")}
        with ad.no_grad():
            x = Tensor((a["tok"][ids] + a["pos"][: ids.size])[None])
            x = transformer_block(x, frozen, "block", self.num_heads)
        pooled = x.data[0].mean(axis=0)
        return pooled / np.linalg.norm(pooled)


def encode_targets(triplets, text_target: TargetEncoder, color_target: Optional[TargetEncoder] = None) -> np.ndarray:
    """Target embeddings (B, D): continuous triplets use the RGB encoder, the rest text."""
    out = np.empty((len(triplets), text_target.embed_dim))
    cont = [i for i, t in enumerate(triplets) if t.condition == "continuous"]
    text = [i for i, t in enumerate(triplets) if t.condition != "continuous"]
    if cont:
        if color_target is None:
            raise ValueError("continuous triplets need a numeric_color target encoder")
        out[cont] = color_target.encode_batch([triplets[i].spec.rgb for i in cont])
    if text:
        out[text] = text_target.encode_batch([triplets[i].output for i in text])
    return out


def params_fingerprint(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()

"""Procedural ColorShape / Continuous Color datasets and instruction triplets."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
CANONICAL_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
BACKGROUND = (0.5, 0.5, 0.5)
MIN_SIZE, MAX_SIZE = 3, 10
# keeps the border ring (and so every corner) background
MARGIN = 1

CONDITIONS = ("color", "shape", "both", "continuous")
INSTRUCTIONS = {
    "color": "What is the color of the object in the image?",
    "shape": "What is the shape of the object in the image?",
    "both": "What is the color and shape of the object in the image?",
    "continuous": "What is the color of the object in the image?",
}
NEUTRAL_INSTRUCTION = "describe the image"

PAD, EOS, UNK = 0, 1, 2
RESERVED = ("<pad>", "<eos>", "<unk>")

BLOB_MAGIC = b"CSDS"
BLOB_VERSION = 1

Color = Union[str, tuple[float, float, float]]


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    color: Color
    center: tuple[int, int]
    size: int
    background: tuple[float, float, float] = BACKGROUND

    @property
    def is_continuous(self) -> bool:
        return not isinstance(self.color, str)

    @property
    def rgb(self) -> tuple[float, float, float]:
        if isinstance(self.color, str):
            return CANONICAL_RGB[self.color]
        return tuple(float(c) for c in self.color)

    def validate(self, width: int, height: int) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if isinstance(self.color, str):
            if self.color not in CANONICAL_RGB:
                raise ValueError(f"unknown color {self.color!r}; expected one of {COLORS}")
        elif len(self.color) != 3 or not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError(f"continuous color must be an RGB triple in [0,1], got {self.color}")
        if self.size < MIN_SIZE:
            raise ValueError(f"size {self.size} below renderable minimum {MIN_SIZE}")
        cx, cy = self.center
        lo = MARGIN + self.size
        if not (lo <= cx <= width - 1 - lo and lo <= cy <= height - 1 - lo):
            raise ValueError(
                f"object at {self.center} with size {self.size} leaves the "
                f"{width}x{height} canvas interior"
            )

    def label(self, condition: str):
        """Categorical label of this object under a retrieval condition."""
        if condition == "color":
            return self.color
        if condition == "shape":
            return self.shape
        if condition == "both":
            return (self.color, self.shape)
        raise ValueError(f"no categorical label for condition {condition!r}")

    def to_record(self) -> dict:
        return {
            "shape": self.shape,
            "color": self.color if isinstance(self.color, str) else list(self.color),
            "center": list(self.center),
            "size": self.size,
            "background": list(self.background),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ShapeSpec":
        color = rec["color"]
        return cls(
            shape=rec["shape"],
            color=color if isinstance(color, str) else tuple(color),
            center=tuple(rec["center"]),
            size=int(rec["size"]),
            background=tuple(rec.get("background", BACKGROUND)),
        )


def _shape_mask(spec: ShapeSpec, width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    dx, dy = xs - spec.center[0], ys - spec.center[1]
    h = spec.size
    if spec.shape == "circle":
        return dx * dx + dy * dy <= h * h
    if spec.shape == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if spec.shape == "triangle":
        # apex up, base on the bottom edge of the bounding box
        return (dy >= -h) & (dy <= h) & (2 * np.abs(dx) <= dy + h)
    arm = max(1, h // 3)
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= h)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= h))


def render_shape(spec: ShapeSpec, width: int = 32, height: int = 32) -> np.ndarray:
    """Rasterise one object with hard edges; returns a (height, width, 3) array."""
    spec.validate(width, height)
    img = np.empty((height, width, 3), dtype=np.float64)
    img[:] = spec.background
    img[_shape_mask(spec, width, height)] = spec.rgb
    return np.clip(img, 0.0, 1.0)


def _check_canvas(canvas: tuple[int, int]) -> tuple[int, int]:
    width, height = canvas
    need = 2 * (MARGIN + MIN_SIZE) + 1
    if width < need or height < need:
        raise ValueError(f"canvas {width}x{height} too small; need at least {need}x{need}")
    return width, height


def _place(rng: np.random.Generator, width: int, height: int) -> tuple[tuple[int, int], int]:
    size_cap = min(MAX_SIZE, (min(width, height) - 1) // 2 - MARGIN)
    size = int(rng.integers(MIN_SIZE, size_cap + 1))
    lo = MARGIN + size
    cx = int(rng.integers(lo, width - lo))
    cy = int(rng.integers(lo, height - lo))
    return (cx, cy), size


def generate_colorshape(
    seed: int, n_per_combo: int = 50, canvas: tuple[int, int] = (32, 32)
) -> list[ShapeSpec]:
    """Specs for every (color, shape) pair, ``n_per_combo`` each.

    Spec ``i`` draws from a generator keyed on ``(seed, i)``, so any subset
    can be regenerated independently.
    """
    if n_per_combo < 1:
        raise ValueError("n_per_combo must be >= 1")
    width, height = _check_canvas(canvas)
    specs = []
    index = 0
    for color in COLORS:
        for shape in SHAPES:
            for _ in range(n_per_combo):
                center, size = _place(np.random.default_rng([seed, index]), width, height)
                specs.append(ShapeSpec(shape, color, center, size))
                index += 1
    return specs


def generate_continuous_color(
    seed: int, n: int = 800, canvas: tuple[int, int] = (32, 32)
) -> list[ShapeSpec]:
    if n < 2:
        raise ValueError("continuous color set needs n >= 2")
    width, height = _check_canvas(canvas)
    specs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        rgb = tuple(float(v) for v in rng.random(3))
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        center, size = _place(rng, width, height)
        specs.append(ShapeSpec(shape, rgb, center, size))
    return specs


# ---------------------------------------------------------------------------
# text


def output_text(spec: ShapeSpec, condition: str) -> str:
    if condition == "continuous":
        r, g, b = spec.rgb
        return f"the color is {r:.2f} {g:.2f} {b:.2f}"
    if condition == "color":
        return f"the object is {spec.color}"
    if condition == "shape":
        return f"the object is a {spec.shape}"
    if condition == "both":
        return f"the object is a {spec.color} {spec.shape}"
    raise ValueError(f"unknown condition {condition!r}")


def _check_condition(spec: ShapeSpec, condition: str) -> None:
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    if condition == "continuous" and not spec.is_continuous:
        raise ValueError("continuous condition requires a continuous-color spec")
    if condition in ("color", "both") and spec.is_continuous:
        raise ValueError(f"{condition!r} condition requires a discrete-color spec")


def normalize_text(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token table with reserved PAD/EOS/UNK ids; order is first appearance."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    seen: dict[str, None] = {}
    for text in corpus:
        for tok in normalize_text(text):
            seen.setdefault(tok, None)
    return Vocabulary(list(RESERVED) + [t for t in seen if t not in RESERVED])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.index.get(tok, UNK) for tok in normalize_text(text)]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in ids if i != PAD)


def template_corpus(specs: Optional[Iterable[ShapeSpec]] = None) -> list[str]:
    """Every instruction plus every output text the given specs can produce.

    Without specs, outputs for all discrete (color, shape) pairs are used.
    """
    corpus = list(dict.fromkeys(INSTRUCTIONS.values())) + [NEUTRAL_INSTRUCTION]
    if specs is None:
        specs = [ShapeSpec(s, c, (16, 16), 3) for c in COLORS for s in SHAPES]
    for spec in specs:
        conds = ("continuous", "shape") if spec.is_continuous else ("color", "shape", "both")
        corpus.extend(output_text(spec, c) for c in conds)
    return corpus


# ---------------------------------------------------------------------------
# triplets


@dataclass(frozen=True, eq=False)
class Triplet:
    image: np.ndarray
    instruction: tuple[int, ...]
    output: tuple[int, ...]
    spec: ShapeSpec
    condition: str
    image_id: int = 0

    @property
    def target_key(self):
        """Identity of the contrastive target; equal keys mean equal targets."""
        if self.condition == "continuous":
            return ("rgb", self.spec.rgb)
        return ("text", self.output)


def default_conditions(specs: Sequence[ShapeSpec]) -> tuple[str, ...]:
    if specs and specs[0].is_continuous:
        return ("continuous", "shape")
    return ("color", "shape", "both")


def make_triplets(
    specs: Sequence[ShapeSpec],
    conditions: Iterable[str],
    vocab: Optional[Vocabulary] = None,
    images: Optional[np.ndarray] = None,
    canvas: tuple[int, int] = (32, 32),
) -> list[Triplet]:
    """One triplet per (spec, condition); triplets of a spec share one image array."""
    conditions = tuple(dict.fromkeys(conditions))
    if not conditions:
        raise ValueError("make_triplets needs at least one condition")
    for spec in specs:
        for cond in conditions:
            _check_condition(spec, cond)
    if vocab is None:
        vocab = build_vocab(template_corpus(specs))
    instr_ids = {c: tuple(tokenize(INSTRUCTIONS[c], vocab)) for c in conditions}
    out = []
    for i, spec in enumerate(specs):
        image = images[i] if images is not None else render_shape(spec, *canvas)
        for cond in conditions:
            out.append(
                Triplet(
                    image=image,
                    instruction=instr_ids[cond],
                    output=tuple(tokenize(output_text(spec, cond), vocab)),
                    spec=spec,
                    condition=cond,
                    image_id=i,
                )
            )
    return out


# ---------------------------------------------------------------------------
# persistence


@dataclass
class Dataset:
    specs: list[ShapeSpec]
    images: np.ndarray
    vocab: Vocabulary
    conditions: tuple[str, ...]
    seed: int
    kind: str = "colorshape"
    meta: dict = field(default_factory=dict)

    @property
    def continuous(self) -> bool:
        return self.kind == "continuous"

    def triplets(self, conditions: Optional[Iterable[str]] = None) -> list[Triplet]:
        return make_triplets(
            self.specs,
            self.conditions if conditions is None else conditions,
            vocab=self.vocab,
            images=self.images,
        )


def make_dataset(
    seed: int = 0,
    n_per_combo: int = 50,
    canvas: tuple[int, int] = (32, 32),
    continuous: bool = False,
    n_continuous: int = 800,
) -> Dataset:
    if continuous:
        specs = generate_continuous_color(seed, n_continuous, canvas)
    else:
        specs = generate_colorshape(seed, n_per_combo, canvas)
    images = np.stack([render_shape(s, *canvas) for s in specs])
    meta = {"width": canvas[0], "height": canvas[1]}
    if continuous:
        meta["n"] = n_continuous
    else:
        meta["n_per_combo"] = n_per_combo
    return Dataset(
        specs=specs,
        images=images,
        vocab=build_vocab(template_corpus(specs)),
        conditions=default_conditions(specs),
        seed=seed,
        kind="continuous" if continuous else "colorshape",
        meta=meta,
    )


def write_image_blob(path: Union[str, Path], images: np.ndarray) -> None:
    count, height, width, channels = images.shape
    if channels != 3:
        raise ValueError(f"expected RGB images, got {channels} channels")
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<IIII", BLOB_VERSION, count, width, height))
        fh.write(np.ascontiguousarray(images, dtype="<f8").tobytes())


def read_image_blob(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: not an image blob (bad magic {raw[:4]!r})")
    version, count, width, height = struct.unpack_from("<IIII", raw, 4)
    if version != BLOB_VERSION:
        raise ValueError(f"{path}: unsupported blob version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=20)
    expected = count * height * width * 3
    if body.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {body.size}")
    return body.reshape(count, height, width, 3).astype(np.float64)


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "colorshape-dataset",
        "version": 1,
        "kind": dataset.kind,
        "seed": dataset.seed,
        "count": len(dataset.specs),
        "conditions": list(dataset.conditions),
        **dataset.meta,
    }
    (directory / "dataset.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    with open(directory / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for i, spec in enumerate(dataset.specs):
            rec = {
                "index": i,
                "seed": [dataset.seed, i],
                **spec.to_record(),
                "conditions": list(dataset.conditions),
                "instructions": [INSTRUCTIONS[c] for c in dataset.conditions],
                "outputs": [output_text(spec, c) for c in dataset.conditions],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_image_blob(directory / "images.bin", dataset.images)
    dataset.vocab.save(directory / "vocab.txt")


def load_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    for name in ("dataset.json", "manifest.jsonl", "images.bin", "vocab.txt"):
        if not (directory / name).exists():
            raise FileNotFoundError(f"dataset file missing: {directory / name}")
    header = json.loads((directory / "dataset.json").read_text())
    specs = []
    with open(directory / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                specs.append(ShapeSpec.from_record(json.loads(line)))
    images = read_image_blob(directory / "images.bin")
    if images.shape[0] != len(specs):
        raise ValueError(f"manifest lists {len(specs)} images but blob holds {images.shape[0]}")
    meta = {k: header[k] for k in ("width", "height", "n_per_combo", "n") if k in header}
    return Dataset(
        specs=specs,
        images=images,
        vocab=Vocabulary.load(directory / "vocab.txt"),
        conditions=tuple(header["conditions"]),
        seed=int(header["seed"]),
        kind=header.get("kind", "colorshape"),
        meta=meta,
    )

"""Run configuration: flat ``key = value`` files with command-line overrides."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Union

from .data import CONDITIONS
from .encoders import VARIANTS

VARIANT_ALIASES = {"clip": "clip_style", "mllm": "mllm_style"}


def parse_variant(value: str) -> str:
    v = VARIANT_ALIASES.get(value, value)
    if v not in VARIANTS:
        raise ValueError(f"variant must be clip or mllm, got {value!r}")
    return v


def parse_conditions(value) -> Optional[tuple[str, ...]]:
    if value is None:
        return None
    items = value.split(",") if isinstance(value, str) else list(value)
    out = tuple(c.strip() for c in items if c.strip())
    if not out:
        raise ValueError("conditions list is empty")
    bad = [c for c in out if c not in CONDITIONS]
    if bad:
        raise ValueError(f"unknown condition {bad[0]!r}; choose from {', '.join(CONDITIONS)}")
    return out


def parse_ks(value) -> tuple[int, ...]:
    items = value.replace(",", " ").split() if isinstance(value, str) else list(value)
    ks = tuple(int(k) for k in items)
    if not ks or min(ks) < 1:
        raise ValueError("k values must be positive integers")
    return ks


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "."
    data: Optional[str] = None
    variant: str = "clip_style"
    # data
    n_per_combo: int = 50
    n_continuous: int = 800
    continuous: bool = False
    conditions: Optional[tuple[str, ...]] = None
    # encoder
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 8
    max_seq_len: int = 32
    condition_layers: int = 1
    target_seed: int = 1234
    # training
    batch_size: int = 64
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    temperature: float = 0.07
    symmetric_loss: bool = False
    # evaluation
    probe: bool = False
    k: tuple[int, ...] = (5, 10, 15)

    def __post_init__(self):
        self.variant = parse_variant(self.variant)
        self.conditions = parse_conditions(self.conditions)
        self.k = parse_ks(self.k)
        for name in ("n_per_combo", "n_continuous", "batch_size", "epochs", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")

    @property
    def data_dir(self) -> Path:
        return Path(self.data if self.data is not None else self.out)

    def estimator_params(self) -> dict:
        return dict(
            variant=self.variant,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            patch_size=self.patch_size,
            max_seq_len=self.max_seq_len,
            condition_layers=self.condition_layers,
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.lr,
            weight_decay=self.weight_decay,
            warmup_ratio=self.warmup_ratio,
            temperature=self.temperature,
            symmetric_loss=self.symmetric_loss,
            target_seed=self.target_seed,
            random_state=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditions"] = list(self.conditions) if self.conditions else None
        d["k"] = list(self.k)
        return d

    def replace(self, **overrides) -> "RunConfig":
        """Copy with the non-None ``overrides`` applied."""
        d = asdict(self)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**d)


def _convert(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ValueError(f"unknown config key {name!r}")
    kind = kinds[name]
    try:
        if name == "conditions":
            return parse_conditions(raw)
        if name == "k":
            return parse_ks(raw)
        if kind == "bool":
            return _parse_bool(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ValueError(f"config key {name!r}: {exc}") from None


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment, dashes and underscores are interchangeable."""
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",)
    )
    parser.optionxform = lambda s: s.strip().replace("-", "_")
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from None
    return {k: _convert(k, v) for k, v in parser["run"].items()}


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> RunConfig:
    """Defaults, then the file at ``path``, then non-None ``overrides`` (the command line wins)."""
    values: dict = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)

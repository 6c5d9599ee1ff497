"""Checkpoint types, validation and the ``XPCK0001`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from . import container
from .errors import PairMismatch, ShapeMismatch, ValidationError, VocabMaskInvalid


def default_boundary(n_layers: int) -> int:
    # round-half-up of 0.6 * n_layers in integer arithmetic
    return (6 * n_layers + 5) // 10


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    late_boundary: int | None = None

    def __post_init__(self):
        if self.late_boundary is None:
            object.__setattr__(self, "late_boundary", default_boundary(self.n_layers))
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size"):
            if int(getattr(self, name)) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValidationError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ValidationError("n_heads must be divisible by n_kv_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValidationError("head dimension must be even for rotary embeddings")
        if not 0 < self.late_boundary < self.n_layers:
            raise ValidationError(f"late_boundary {self.late_boundary} outside (0, {self.n_layers})")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ValidationError("rope_theta and norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hd, f, v = self.d_model, self.head_dim, self.d_ff, self.vocab_size
        shapes = {"embed": (v, d)}
        for i in range(self.n_layers):
            p = f"layers.{i}."
            shapes[p + "attn.wq"] = (d, self.n_heads * hd)
            shapes[p + "attn.wk"] = (d, self.n_kv_heads * hd)
            shapes[p + "attn.wv"] = (d, self.n_kv_heads * hd)
            shapes[p + "attn.wo"] = (self.n_heads * hd, d)
            shapes[p + "norm_attn"] = (d,)
            shapes[p + "norm_mlp"] = (d,)
            shapes[p + "mlp.w_gate"] = (d, f)
            shapes[p + "mlp.w_up"] = (d, f)
            shapes[p + "mlp.w_down"] = (f, d)
        shapes["final_norm"] = (d,)
        shapes["lm_head"] = (d, v)
        return shapes


class LayerWeights(NamedTuple):
    norm_attn: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    norm_mlp: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Weights, config, vocabulary and real-token mask for one model.

    Arrays are float32 and marked read-only so a checkpoint can be shared
    freely once built.
    """

    config: ModelConfig
    weights: dict[str, np.ndarray]
    vocab: list[str]
    real_token_mask: np.ndarray
    name: str = field(default="", compare=False)

    def __post_init__(self):
        shapes = self.config.tensor_shapes()
        frozen = {}
        for key, shape in shapes.items():
            if key not in self.weights:
                raise ShapeMismatch(key, shape, ())
            arr = np.array(self.weights[key], dtype=np.float32, copy=True)
            if arr.shape != shape:
                raise ShapeMismatch(key, shape, arr.shape)
            arr.setflags(write=False)
            frozen[key] = arr
        extra = set(self.weights) - set(shapes)
        if extra:
            raise ValidationError(f"unexpected tensors: {sorted(extra)}")
        object.__setattr__(self, "weights", frozen)
        mask = np.asarray(self.real_token_mask, dtype=bool).copy()
        if len(self.vocab) != self.config.vocab_size or mask.shape != (self.config.vocab_size,):
            raise VocabMaskInvalid("vocab and real_token_mask must have vocab_size entries")
        if mask.sum() < 2:
            raise VocabMaskInvalid("real_token_mask needs at least 2 real tokens")
        mask.setflags(write=False)
        object.__setattr__(self, "real_token_mask", mask)
        object.__setattr__(self, "vocab", list(self.vocab))

    @cached_property
    def layers(self) -> tuple[LayerWeights, ...]:
        w = self.weights
        out = []
        for i in range(self.config.n_layers):
            p = f"layers.{i}."
            out.append(
                LayerWeights(
                    w[p + "norm_attn"], w[p + "attn.wq"], w[p + "attn.wk"], w[p + "attn.wv"],
                    w[p + "attn.wo"], w[p + "norm_mlp"], w[p + "mlp.w_gate"], w[p + "mlp.w_up"],
                    w[p + "mlp.w_down"],
                )
            )
        return tuple(out)

    @cached_property
    def real_ids(self) -> np.ndarray:
        return np.flatnonzero(self.real_token_mask)

    def to_bytes(self) -> bytes:
        meta = {
            "config": self.config.to_dict(),
            "vocab": self.vocab,
            "real_token_mask": [bool(b) for b in self.real_token_mask],
        }
        names = list(self.config.tensor_shapes())
        return container.encode(container.CHECKPOINT_MAGIC, meta, {n: self.weights[n] for n in names})

    @cached_property
    def content_hash(self) -> str:
        return container.sha256_bytes(self.to_bytes())

    def replace_weights(self, updates: dict[str, np.ndarray], name: str | None = None) -> Checkpoint:
        w = dict(self.weights)
        w.update(updates)
        return Checkpoint(self.config, w, self.vocab, self.real_token_mask, name=self.name if name is None else name)

    def equals(self, other: Checkpoint) -> bool:
        return (
            self.config == other.config
            and self.vocab == other.vocab
            and np.array_equal(self.real_token_mask, other.real_token_mask)
            and all(np.array_equal(self.weights[k], other.weights[k]) for k in self.weights)
        )


@dataclass(frozen=True, eq=False)
class PairedCheckpoints:
    pt: Checkpoint
    it: Checkpoint
    info: dict = field(default_factory=dict)
    # stage sweeps allow descendants whose real-token masks differ from the base
    strict_mask: bool = True

    def __post_init__(self):
        validate_pair(self.pt, self.it, check_mask=self.strict_mask)

    def model(self, which: str) -> Checkpoint:
        which = which.upper()
        if which == "PT":
            return self.pt
        if which == "IT":
            return self.it
        raise ValueError(f"unknown side {which!r}")

    @property
    def config(self) -> ModelConfig:
        return self.pt.config


def validate_pair(pt: Checkpoint, it: Checkpoint, check_mask: bool = True) -> None:
    """Check shared tokenization and identical architecture."""
    if pt.vocab != it.vocab:
        raise PairMismatch("vocabularies differ")
    if check_mask and not np.array_equal(pt.real_token_mask, it.real_token_mask):
        raise PairMismatch("real-token masks differ")
    if pt.config != it.config:
        raise PairMismatch("model configs differ")


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    data = ckpt.to_bytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return container.sha256_bytes(data)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = container.read(path, container.CHECKPOINT_MAGIC)
    try:
        config = ModelConfig.from_dict(header["config"])
        vocab = header["vocab"]
        mask = header["real_token_mask"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"checkpoint header incomplete: {exc}") from exc
    if not isinstance(vocab, list) or not isinstance(mask, list):
        raise VocabMaskInvalid("vocab and real_token_mask must be lists")
    return Checkpoint(config, tensors, vocab, np.array(mask, dtype=bool), name=str(path))

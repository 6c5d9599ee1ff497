"""Float32 decoder-only runtime with split-point forward passes.

Architecture: pre-norm blocks, RMSNorm, rotary position embeddings
(rotate-half layout), grouped-query attention, gated SiLU MLP, no biases,
untied unembedding.  Every pass is a full uncached recomputation, and a split
forward (upstream then late) runs exactly the same per-layer code as an
unsplit one, so the two are bit-identical.

Per-layer sources are expressed as a *plan*: a tuple with one
``(attention_source, mlp_source)`` checkpoint pair per layer.  Hybrid cells,
window substitutions and handoff edits are all plans.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BoundaryMismatch, BoundaryOutOfRange, DimMismatch, TokenOutOfRange
from .model import Checkpoint, LayerWeights, ModelConfig

F32 = np.float32
NEG_INF = np.float32(-np.inf)

# (layer index, mlp output (T, d), residual entering the MLP sublayer) -> mlp output
MlpHook = Callable[[int, np.ndarray, np.ndarray], np.ndarray]
Plan = tuple[tuple[Checkpoint, Checkpoint], ...]


@dataclass(frozen=True, eq=False)
class ResidualStates:
    """Hidden states entering layer ``produced_at_layer`` (all positions)."""

    values: np.ndarray
    produced_at_layer: int
    source_model: str = "PT"

    @property
    def n_positions(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------- primitives


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + F32(eps))) * weight


@lru_cache(maxsize=32)
def _rope_table(head_dim: int, theta: float, length: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(length, dtype=np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    cos, sin = np.cos(ang).astype(F32), np.sin(ang).astype(F32)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def rope_tables(cfg: ModelConfig, n_positions: int) -> tuple[np.ndarray, np.ndarray]:
    # one table per (head_dim, theta), grown in powers of two; rows never depend on length
    length = 256
    while length < n_positions:
        length *= 2
    cos, sin = _rope_table(cfg.head_dim, float(cfg.rope_theta), length)
    return cos[:n_positions], sin[:n_positions]


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    rotated = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos + rotated * sin


@lru_cache(maxsize=8)
def _causal_mask(length: int) -> np.ndarray:
    m = np.tril(np.ones((length, length), dtype=bool))
    m.setflags(write=False)
    return m


def attention(x: np.ndarray, lw: LayerWeights, cfg: ModelConfig, cos, sin) -> np.ndarray:
    T = x.shape[0]
    H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    q = (x @ lw.wq).reshape(T, H, hd).transpose(1, 0, 2)
    k = (x @ lw.wk).reshape(T, KV, hd).transpose(1, 0, 2)
    v = (x @ lw.wv).reshape(T, KV, hd).transpose(1, 0, 2)
    q = apply_rope(q, cos, sin)
    k = apply_rope(k, cos, sin)
    if KV != H:
        k = np.repeat(k, H // KV, axis=0)
        v = np.repeat(v, H // KV, axis=0)
    scores = (q @ k.transpose(0, 2, 1)) * F32(1.0 / np.sqrt(hd))
    scores = np.where(_causal_mask(T) if T <= 1024 else np.tril(np.ones((T, T), bool)), scores, NEG_INF)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    out = (probs @ v).transpose(1, 0, 2).reshape(T, H * hd)
    return out @ lw.wo


def mlp(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    g = x @ lw.w_gate
    act = g / (F32(1.0) + np.exp(-g))
    return (act * (x @ lw.w_up)) @ lw.w_down


def mlp_sublayer(h: np.ndarray, lw: LayerWeights, cfg: ModelConfig) -> np.ndarray:
    return mlp(rms_norm(h, lw.norm_mlp, cfg.norm_eps), lw)


def block(h, attn_w: LayerWeights, mlp_w: LayerWeights, cfg, cos, sin, layer: int, mlp_hook=None):
    h = h + attention(rms_norm(h, attn_w.norm_attn, cfg.norm_eps), attn_w, cfg, cos, sin)
    m = mlp_sublayer(h, mlp_w, cfg)
    if mlp_hook is not None:
        m = mlp_hook(layer, m, h)
    return h + m


# ---------------------------------------------------------------- plans


def uniform_plan(model: Checkpoint) -> Plan:
    return tuple((model, model) for _ in range(model.config.n_layers))


def hybrid_plan(upstream: Checkpoint, late: Checkpoint, boundary: int) -> Plan:
    n = upstream.config.n_layers
    return tuple((upstream, upstream) if i < boundary else (late, late) for i in range(n))


def substitute(plan: Plan, donor: Checkpoint, layers: Sequence[int], unit: str = "full_block") -> Plan:
    """Return ``plan`` with ``layers`` computed by ``donor`` (whole block or MLP sublayer only)."""
    out = list(plan)
    for i in layers:
        if unit == "full_block":
            out[i] = (donor, donor)
        elif unit == "mlp_only":
            out[i] = (out[i][0], donor)
        else:
            raise ValueError(f"unknown substitution unit {unit!r}")
    return tuple(out)


def run_layers(h: np.ndarray, plan: Plan, start: int, stop: int, mlp_hook: MlpHook | None = None) -> np.ndarray:
    if start >= stop:
        return h
    cfg = plan[0][0].config
    cos, sin = rope_tables(cfg, h.shape[0])
    for i in range(start, stop):
        a_src, m_src = plan[i]
        h = block(h, a_src.layers[i], m_src.layers[i], cfg, cos, sin, i, mlp_hook)
    return h


# ---------------------------------------------------------------- forward API


def check_tokens(model: Checkpoint, tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1 or t.size == 0:
        raise TokenOutOfRange("token sequence must be a non-empty 1-D sequence")
    if t.min() < 0 or t.max() >= model.config.vocab_size:
        raise TokenOutOfRange(f"token ids must lie in [0, {model.config.vocab_size})")
    return t


def embed(model: Checkpoint, tokens) -> np.ndarray:
    t = check_tokens(model, tokens)
    return model.weights["embed"][t].copy()


def forward_upstream(model: Checkpoint, tokens, boundary: int, plan: Plan | None = None,
                     mlp_hook: MlpHook | None = None) -> ResidualStates:
    """Hidden states entering layer ``boundary`` (embedding plus layers ``0..boundary-1``)."""
    n = model.config.n_layers
    if not 0 <= boundary <= n:
        raise BoundaryOutOfRange(f"boundary {boundary} outside [0, {n}]")
    h = embed(model, tokens)
    h = run_layers(h, plan or uniform_plan(model), 0, boundary, mlp_hook)
    return ResidualStates(h, boundary, model.name or "PT")


def forward_late(model: Checkpoint, states: ResidualStates, boundary: int | None = None,
                 plan: Plan | None = None, mlp_hook: MlpHook | None = None) -> ResidualStates:
    """Run layers ``boundary..n_layers-1`` over supplied states (full causal recomputation)."""
    n = model.config.n_layers
    b = states.produced_at_layer if boundary is None else boundary
    if states.produced_at_layer != b:
        raise BoundaryMismatch(f"states were produced at layer {states.produced_at_layer}, not {b}")
    if not 0 <= b <= n:
        raise BoundaryOutOfRange(f"boundary {b} outside [0, {n}]")
    if states.values.ndim != 2 or states.values.shape[1] != model.config.d_model:
        raise DimMismatch("state width does not match d_model")
    h = run_layers(states.values, plan or uniform_plan(model), b, n, mlp_hook)
    return ResidualStates(h, n, states.source_model)


def forward_plan(tokens, plan: Plan, mlp_hook: MlpHook | None = None) -> ResidualStates:
    """Unsplit forward where every layer follows ``plan``; embedding from the first source."""
    first = plan[0][0]
    h = embed(first, tokens)
    h = run_layers(h, plan, 0, len(plan), mlp_hook)
    return ResidualStates(h, len(plan), "hybrid")


def readout(states: ResidualStates | np.ndarray, reader: Checkpoint, mask_real_tokens: bool = True,
            positions=None) -> np.ndarray:
    """Final norm then unembedding of ``reader``; non-real tokens become -inf when masked."""
    h = states.values if isinstance(states, ResidualStates) else np.asarray(states)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[-1] != reader.config.d_model:
        raise DimMismatch("state width does not match the reader's d_model")
    if positions is not None:
        h = h[positions]
        if h.ndim == 1:
            h = h[None, :]
    logits = rms_norm(h, reader.weights["final_norm"], reader.config.norm_eps) @ reader.weights["lm_head"]
    if mask_real_tokens:
        logits = np.where(reader.real_token_mask, logits, NEG_INF)
    return logits


def native_last_logits(model: Checkpoint, tokens, mask_real_tokens: bool = True) -> np.ndarray:
    h = forward_upstream(model, tokens, model.config.n_layers)
    return readout(h, model, mask_real_tokens, positions=[-1])[0]


def argmax_real(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest token id wins ties
    return int(np.argmax(logits))


def greedy_rollout(model: Checkpoint, prompt, max_new: int, stop_token: int | None = None) -> list[int]:
    """Greedy decoding over real tokens; returns the generated ids only."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    seq = list(check_tokens(model, prompt))
    out = []
    for _ in range(max_new):
        tok = argmax_real(native_last_logits(model, seq))
        out.append(tok)
        seq.append(tok)
        if stop_token is not None and tok == stop_token:
            break
    return out

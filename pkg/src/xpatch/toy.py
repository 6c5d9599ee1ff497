"""Synthetic paired checkpoints and prompt manifests.

``gen_toy_pair`` builds a random base ("PT") model and a descendant ("IT")
in one of four modes:

identical
    byte-equal weights.
late_only / upstream_only
    the descendant differs by seeded noise only in layers at or after
    (resp. before) the late boundary.
gated_coupling
    the descendant carries small noise everywhere plus a planted circuit.
    An attention head in layer 0 detects a *marker* token anywhere in the
    context and writes a coupling direction ``v`` into the residual stream.
    A unit in the final MLP boosts a *target* token by an amount gated by the
    residual's projection on ``v`` and by the current token being one of the
    *trigger* tokens.  A second, ungated final-MLP unit makes the target token
    be followed by an *answer* token.  These unit slots are zeroed in the base.
    Under base upstream state ``v`` is absent, so the target boost only appears with descendant upstream state
    and the four-cell interaction is positive by construction.

Planted token ids and directions are returned in ``PairedCheckpoints.info``.
"""

from __future__ import annotations

import numpy as np

from .divergence import PromptRecord
from .errors import InvalidSpec
from .model import Checkpoint, ModelConfig, PairedCheckpoints
from .tokenizer import ByteTokenizer, byte_vocab

MODES = ("identical", "late_only", "upstream_only", "gated_coupling")

TOY_CONFIG = ModelConfig(n_layers=6, d_model=64, n_heads=4, n_kv_heads=2, d_ff=128, vocab_size=264)

# descendant noise, relative to the base init scale
NOISE = 0.06
# planted-circuit strengths
CONST_SCALE = 4.0
FLAG_SCALE = 4.0
TRIGGER_SCALE = 3.0
TARGET_SCALE = 3.0
HEAD_QK = 2.0
HEAD_V = 2.0
HEAD_O = 1.0
GATE_SCALE = 1.5
UP_SCALE = 1.0
BOOST = 3.0
ANSWER_BOOST = 4.0
N_COUPLING_UNITS = 2

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _init_scales(cfg: ModelConfig) -> dict[str, float]:
    d, f = cfg.d_model, cfg.d_ff
    return {
        "embed": 1.0,
        "attn.wq": d ** -0.5,
        "attn.wk": d ** -0.5,
        "attn.wv": d ** -0.5,
        "attn.wo": d ** -0.5,
        "mlp.w_gate": d ** -0.5,
        "mlp.w_up": d ** -0.5,
        "mlp.w_down": f ** -0.5,
        "norm": 0.1,
        "lm_head": 2.5 * d ** -0.5,
    }


def _scale_for(name: str, scales: dict[str, float]) -> float:
    if name in ("embed", "lm_head"):
        return scales[name]
    if name.endswith("norm_attn") or name.endswith("norm_mlp") or name == "final_norm":
        return scales["norm"]
    return scales[name.split(".", 2)[2]]


def _layer_of(name: str) -> int | None:
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return None


def random_weights(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    scales = _init_scales(cfg)
    w = {}
    for name, shape in cfg.tensor_shapes().items():
        s = _scale_for(name, scales)
        if "norm" in name:
            w[name] = (1.0 + s * rng.standard_normal(shape)).astype(np.float32)
        else:
            w[name] = (s * rng.standard_normal(shape)).astype(np.float32)
    return w


def perturb(weights: dict[str, np.ndarray], cfg: ModelConfig, rng: np.random.Generator, scale: float,
            layers=None, include_readout: bool = False) -> dict[str, np.ndarray]:
    """Add seeded noise (``scale`` x init scale) to layer tensors in ``layers`` (all if None)."""
    scales = _init_scales(cfg)
    out = dict(weights)
    for name, shape in cfg.tensor_shapes().items():
        layer = _layer_of(name)
        if layer is None:
            if not (include_readout and name in ("final_norm", "lm_head")):
                continue
        elif layers is not None and layer not in layers:
            continue
        noise = scale * _scale_for(name, scales) * rng.standard_normal(shape)
        out[name] = (weights[name] + noise).astype(np.float32)
    return out


def _make_ckpt(cfg, weights, name) -> Checkpoint:
    vocab, mask = byte_vocab(cfg.vocab_size)
    return Checkpoint(cfg, weights, vocab, mask, name=name)


def _plant_tokens(rng: np.random.Generator, n_triggers: int):
    pool = [ord(c) for c in "!#$%&*+-/<=>?@^_~|"]
    marker, target, answer = (int(x) for x in rng.choice(pool, size=3, replace=False))
    letters = [ord(c) for c in _LETTERS]
    triggers = sorted(int(x) for x in rng.choice(letters, size=n_triggers, replace=False))
    return marker, target, answer, triggers


def _readout_direction(weights, token: int) -> np.ndarray:
    lm = weights["lm_head"].astype(np.float64)
    u = (lm[:, token] - lm.mean(axis=1)) * weights["final_norm"].astype(np.float64)
    return u / np.linalg.norm(u)


def _plant(pt_w: dict, it_w: dict, cfg: ModelConfig, rng: np.random.Generator,
           n_triggers: int) -> tuple[dict, dict, dict]:
    d, hd = cfg.d_model, cfg.head_dim
    if cfg.vocab_size < 258 or d < 8:
        raise InvalidSpec("gated_coupling needs a byte vocabulary and d_model >= 8")
    marker, target, answer, triggers = _plant_tokens(rng, n_triggers)
    q, _ = np.linalg.qr(rng.standard_normal((d, 5)))
    const_dir, flag_dir, trig_dir, coup_dir, tgt_dir = (q[:, i] for i in range(5))
    basis = q

    # shared embedding: clear the planted subspace, then write the planted features
    emb = pt_w["embed"].astype(np.float64)
    emb -= (emb @ basis) @ basis.T
    emb += CONST_SCALE * const_dir
    emb[marker] += FLAG_SCALE * flag_dir
    for t in triggers:
        emb[t] += TRIGGER_SCALE * trig_dir
    emb[target] += TARGET_SCALE * tgt_dir
    emb = emb.astype(np.float32)
    pt_w = dict(pt_w, embed=emb)
    it_w = dict(it_w, embed=emb)

    # layer-0 marker-detector head: query head 0, kv head 0, lowest-frequency rotary slot
    slot = hd // 2 - 1
    p = "layers.0.attn."
    wq, wk, wv, wo = (it_w[p + n].copy() for n in ("wq", "wk", "wv", "wo"))
    wq[:, :hd] = 0.0
    wq[:, slot] = HEAD_QK * const_dir
    wk[:, :hd] = 0.0
    wk[:, slot] = HEAD_QK * flag_dir
    wv[:, :hd] = 0.0
    wv[:, 0] = HEAD_V * flag_dir
    group = cfg.n_heads // cfg.n_kv_heads
    wo[: group * hd] = 0.0
    wo[0] = HEAD_O * coup_dir
    it_w.update({p + "wq": wq, p + "wk": wk, p + "wv": wv, p + "wo": wo})

    # final-layer MLP: gated target boost plus an ungated target -> answer bigram unit
    last = cfg.n_layers - 1
    p = f"layers.{last}.mlp."
    # the planted unit slots are silent in the base model
    n_slots = N_COUPLING_UNITS + 1
    pt_w = dict(pt_w)
    for n_, axis in (("w_gate", 1), ("w_up", 1), ("w_down", 0)):
        arr = pt_w[p + n_].copy()
        if axis:
            arr[:, :n_slots] = 0.0
        else:
            arr[:n_slots] = 0.0
        pt_w[p + n_] = arr
    wg, wu, wd = (it_w[p + n].copy() for n in ("w_gate", "w_up", "w_down"))
    u_target = _readout_direction(it_w, target)
    u_answer = _readout_direction(it_w, answer)
    units = list(range(N_COUPLING_UNITS))
    for j in units:
        wg[:, j] = GATE_SCALE * coup_dir
        wu[:, j] = UP_SCALE * trig_dir
        wd[j] = BOOST * u_target
    j = N_COUPLING_UNITS
    wg[:, j] = GATE_SCALE * tgt_dir
    wu[:, j] = UP_SCALE * tgt_dir
    wd[j] = ANSWER_BOOST * u_answer
    it_w.update({p + "w_gate": wg, p + "w_up": wu, p + "w_down": wd})

    info = {
        "marker": marker,
        "target": target,
        "answer": answer,
        "triggers": triggers,
        "coupling_direction": coup_dir.astype(np.float32).tolist(),
        "target_readout_direction": u_target.astype(np.float32).tolist(),
        "coupling_layer": last,
        "coupling_units": units,
        "answer_unit": j,
    }
    return pt_w, it_w, info


def gen_toy_pair(mode: str = "gated_coupling", config: ModelConfig | None = None, seed: int = 0,
                 noise: float = NOISE, n_triggers: int = 6) -> PairedCheckpoints:
    if mode not in MODES:
        raise InvalidSpec(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = config or TOY_CONFIG
    if not 0 <= seed < 2**64:
        raise InvalidSpec("seed must be a 64-bit unsigned integer")
    rng = np.random.default_rng([int(seed), MODES.index(mode)])
    pt_w = random_weights(cfg, rng)
    b = cfg.late_boundary
    n = cfg.n_layers
    info = {"mode": mode, "seed": int(seed), "noise": noise}
    if mode == "identical":
        it_w = dict(pt_w)
    elif mode == "late_only":
        it_w = perturb(pt_w, cfg, rng, noise, layers=range(b, n))
    elif mode == "upstream_only":
        it_w = perturb(pt_w, cfg, rng, noise, layers=range(b))
    else:
        it_w = perturb(pt_w, cfg, rng, noise, include_readout=True)
        pt_w, it_w, planted = _plant(pt_w, it_w, cfg, rng, n_triggers)
        info.update(planted)
    pt = _make_ckpt(cfg, pt_w, f"toy-{mode}-{seed}-pt")
    it = _make_ckpt(cfg, it_w, f"toy-{mode}-{seed}-it")
    return PairedCheckpoints(pt, it, info)


def interpolate(a: Checkpoint, b: Checkpoint, t: float, name: str = "") -> Checkpoint:
    """Elementwise ``(1 - t) * a + t * b`` over every tensor (t=0 and t=1 are exact copies)."""
    if t == 0.0:
        return Checkpoint(a.config, a.weights, a.vocab, a.real_token_mask, name=name or a.name)
    if t == 1.0:
        return Checkpoint(b.config, b.weights, b.vocab, b.real_token_mask, name=name or b.name)
    w = {
        k: ((1.0 - t) * a.weights[k].astype(np.float64) + t * b.weights[k].astype(np.float64)).astype(np.float32)
        for k in a.weights
    }
    return Checkpoint(a.config, w, a.vocab, a.real_token_mask, name=name)


def gen_planted_shift_pair(config: ModelConfig | None = None, seed: int = 0, rank: int = 2,
                           noise: float = 1e-3, late_noise: float = NOISE,
                           strength: float = 1.0) -> PairedCheckpoints:
    """Pair whose boundary-state difference is a planted rank-``rank`` shift plus small noise.

    Only the MLP of the last upstream layer differs below the boundary: its down
    projection gains a rank-``rank`` update writing into a planted subspace, so
    U_IT - U_PT lies in that subspace up to the ``noise`` term.  The late stack
    carries ordinary descendant noise and, in the final MLP, units reading the
    planted subspace and writing a token-dependent readout direction.
    """
    cfg = config or TOY_CONFIG
    rng = np.random.default_rng([int(seed), 101, rank])
    pt_w = random_weights(cfg, rng)
    b, n, d = cfg.late_boundary, cfg.n_layers, cfg.d_model
    it_w = perturb(pt_w, cfg, rng, late_noise, layers=range(b, n))
    it_w = perturb(it_w, cfg, rng, noise, layers=range(b))
    basis, _ = np.linalg.qr(rng.standard_normal((d, rank)))
    key = f"layers.{b - 1}.mlp.w_down"
    mix = rng.standard_normal((cfg.d_ff, rank)) * strength * 4.0 * cfg.d_ff ** -0.5
    it_w[key] = (it_w[key].astype(np.float64) + mix @ basis.T).astype(np.float32)
    # late readers of the planted subspace: each unit maps one basis direction to a random readout
    last = f"layers.{n - 1}.mlp."
    wg, wu, wd = (it_w[last + s].copy() for s in ("w_gate", "w_up", "w_down"))
    for j in range(rank):
        wg[:, j] = 1.5 * basis[:, j]
        wu[:, j] = 1.5 * basis[:, j]
        wd[j] = 2.0 * rng.standard_normal(d) * d ** -0.5
    it_w.update({last + "w_gate": wg, last + "w_up": wu, last + "w_down": wd})
    info = {"mode": "planted_shift", "seed": int(seed), "rank": rank, "subspace": basis.astype(np.float32).tolist()}
    return PairedCheckpoints(_make_ckpt(cfg, pt_w, "shift-pt"), _make_ckpt(cfg, it_w, "shift-it"), info)


def toy_manifest(info: dict, n_prompts: int = 200, seed: int = 0, flagged_fraction: float = 0.5,
                 family: str = "toy") -> list[PromptRecord]:
    """Prompt records for a toy pair.

    Flagged prompts contain the planted marker and are labelled
    ``CONTENT-REASON`` with the planted answer character as their
    exact-answer metadata; the rest are ``GOV-CONV`` and carry no validator.
    """
    rng = np.random.default_rng([int(seed), 7331])
    marker = info.get("marker")
    answer = info.get("answer")
    records = []
    for i in range(n_prompts):
        length = int(rng.integers(6, 16))
        body = "".join(rng.choice(list(_LETTERS + " "), size=length))
        flagged = marker is not None and rng.random() < flagged_fraction
        if flagged:
            cut = int(rng.integers(0, max(1, length // 2)))
            text = body[:cut] + chr(marker) + body[cut:]
            meta = {"answer": chr(answer), "flagged": True}
            category = "CONTENT-REASON"
        else:
            text = body
            meta = {"flagged": False}
            category = "GOV-CONV"
        pid = f"toy-{i:04d}"
        records.append(PromptRecord(id=pid, category=category, source="synthetic", text=text,
                                    cluster_id=pid, family=family, metadata=meta))
    return records


def tokenizer_for(ckpt: Checkpoint) -> ByteTokenizer:
    return ByteTokenizer(ckpt.vocab)

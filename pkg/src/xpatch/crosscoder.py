"""Paired PT/IT BatchTopK crosscoder on late MLP outputs, and the feature-edit
analyses built on it.

The encoder reads the concatenation of both branches (PT activations first,
then IT) across the layer set; each branch has its own decoder.  Training is
plain momentum SGD on the summed squared reconstruction error of both
branches, with analytic gradients and a joint unit-norm constraint on each
feature's two decoder rows.

Edits are applied at the event (last) position of the cells whose late stack
is IT.  Feature activations are computed once from the clean pass of the cell
being edited and then held fixed, so downstream layers see the edit but do
not re-encode.  The PT-branch input for an edited cell is the PT-late
activation computed from the same upstream state (for the native IT cell,
the (U_IT, L_PT) hybrid), so the two branches see identical inputs to the
late stack.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import container, runtime
from . import factorial as fx
from .divergence import DivergenceEvent
from .errors import (
    DumpMisaligned,
    NonFiniteLoss,
    ValidationError,
    WindowOutOfRange,
    WindowOverlapsLayerSet,
)
from .model import PairedCheckpoints

log = logging.getLogger(__name__)

SELECTIONS = ("causal_topk", "matched_random", "top_active_noncausal", "same_delta_random", "bucket")
FRACTION_FILTER = 0.25
DEGENERATE_INTERACTION = 1e-6


# ---------------------------------------------------------------- model


@dataclass
class CrosscoderModel:
    layer_set: tuple[int, ...]
    d_model: int
    k: int
    w_enc: np.ndarray  # (2 d_in, F)
    b_enc: np.ndarray  # (F,)
    w_dec_pt: np.ndarray  # (F, d_in)
    w_dec_it: np.ndarray  # (F, d_in)
    b_dec_pt: np.ndarray  # (d_in,)
    b_dec_it: np.ndarray  # (d_in,)
    thresholds: np.ndarray = None  # (F,) eval-time activation thresholds; inf marks a dead feature
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_set = tuple(int(l) for l in self.layer_set)
        if self.thresholds is None:
            self.thresholds = np.zeros(self.n_features)
        d_in, F = self.d_in, self.n_features
        shapes = {"w_enc": (2 * d_in, F), "b_enc": (F,), "w_dec_pt": (F, d_in), "w_dec_it": (F, d_in),
                  "b_dec_pt": (d_in,), "b_dec_it": (d_in,), "thresholds": (F,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"crosscoder {name}: expected {shape}, got {arr.shape}")
            setattr(self, name, arr)

    @property
    def d_in(self) -> int:
        return self.d_model * len(self.layer_set)

    @property
    def n_features(self) -> int:
        return np.shape(self.b_enc)[0]

    def pre_acts(self, x_pt: np.ndarray, x_it: np.ndarray) -> np.ndarray:
        return np.concatenate([x_pt, x_it], axis=-1) @ self.w_enc + self.b_enc

    def encode(self, x_pt: np.ndarray, x_it: np.ndarray) -> np.ndarray:
        """Eval-time codes: ReLU then per-feature frozen thresholds."""
        z = np.maximum(self.pre_acts(np.asarray(x_pt, np.float64), np.asarray(x_it, np.float64)), 0.0)
        return np.where((z > 0) & (z >= self.thresholds), z, 0.0)

    def decode(self, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return f @ self.w_dec_pt + self.b_dec_pt, f @ self.w_dec_it + self.b_dec_it

    def alive(self) -> np.ndarray:
        return np.isfinite(self.thresholds)

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in ("w_enc", "b_enc", "w_dec_pt", "w_dec_it", "b_dec_pt", "b_dec_it")}


def init_crosscoder(layer_set, d_model: int, n_features: int, k: int, seed: int = 0, init: str = "random",
                    data_mean: tuple[np.ndarray, np.ndarray] | None = None) -> CrosscoderModel:
    d_in = d_model * len(layer_set)
    rng = np.random.default_rng([int(seed), 4242])
    if init == "identity":
        if n_features != 2 * d_in:
            raise ValidationError("identity init needs n_features == 2 * d_in")
        w_enc = np.eye(2 * d_in)
        w_dec = np.eye(2 * d_in)
    elif init == "random":
        w_dec = rng.standard_normal((n_features, 2 * d_in))
        w_dec /= np.linalg.norm(w_dec, axis=1, keepdims=True)
        w_enc = w_dec.T.copy()
    else:
        raise ValidationError(f"unknown init {init!r}")
    b_pt, b_it = data_mean if data_mean is not None else (np.zeros(d_in), np.zeros(d_in))
    return CrosscoderModel(tuple(layer_set), d_model, int(k), w_enc, np.zeros(n_features),
                           w_dec[:, :d_in], w_dec[:, d_in:], np.asarray(b_pt, float), np.asarray(b_it, float))


# ---------------------------------------------------------------- training


def batch_topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the global top ``B * k`` entries of ``z`` (ties resolved by flat index)."""
    B = z.shape[0]
    n = min(B * k, z.size)
    flat = z.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))[:n]
    mask = np.zeros(flat.size, dtype=bool)
    mask[order] = True
    return mask.reshape(z.shape)


def loss_and_grads(model: CrosscoderModel, x_pt: np.ndarray, x_it: np.ndarray, mask: np.ndarray | None = None):
    """Summed-branch mean squared error and its analytic gradients.

    ``mask`` fixes the BatchTopK selection; when omitted it is recomputed.
    Returns ``(loss, grads, mask, codes)``.
    """
    B = x_pt.shape[0]
    x = np.concatenate([x_pt, x_it], axis=1)
    pre = x @ model.w_enc + model.b_enc
    z = np.maximum(pre, 0.0)
    if mask is None:
        mask = batch_topk_mask(z, model.k)
    f = z * mask
    r_pt = f @ model.w_dec_pt + model.b_dec_pt - x_pt
    r_it = f @ model.w_dec_it + model.b_dec_it - x_it
    loss = (np.sum(r_pt * r_pt) + np.sum(r_it * r_it)) / B
    g_pt = 2.0 * r_pt / B
    g_it = 2.0 * r_it / B
    df = g_pt @ model.w_dec_pt.T + g_it @ model.w_dec_it.T
    dpre = df * mask * (pre > 0)
    grads = {
        "w_enc": x.T @ dpre,
        "b_enc": dpre.sum(axis=0),
        "w_dec_pt": f.T @ g_pt,
        "w_dec_it": f.T @ g_it,
        "b_dec_pt": g_pt.sum(axis=0),
        "b_dec_it": g_it.sum(axis=0),
    }
    return float(loss), grads, mask, f


def normalize_decoders(model: CrosscoderModel) -> None:
    norms = np.sqrt(np.sum(model.w_dec_pt ** 2, axis=1) + np.sum(model.w_dec_it ** 2, axis=1))
    norms = np.where(norms > 0, norms, 1.0)[:, None]
    model.w_dec_pt /= norms
    model.w_dec_it /= norms


def variance_explained(x: np.ndarray, x_hat: np.ndarray) -> float:
    resid = np.sum((x - x_hat) ** 2)
    total = np.sum((x - x.mean(axis=0)) ** 2)
    return float(1.0 - resid / total) if total > 0 else 0.0


def evaluate(model: CrosscoderModel, x_pt: np.ndarray, x_it: np.ndarray) -> dict:
    f = model.encode(x_pt, x_it)
    h_pt, h_it = model.decode(f)
    active = f > 0
    rates = active.mean(axis=0)
    return {
        "ve_pt": variance_explained(x_pt, h_pt),
        "ve_it": variance_explained(x_it, h_it),
        "mean_l0": float(active.sum(axis=1).mean()),
        "alive_fraction_max": float(rates.max()) if rates.size else 0.0,
        "dead_fraction": float(np.mean(rates == 0)),
        "n_tokens": int(x_pt.shape[0]),
    }


@dataclass(frozen=True)
class TrainConfig:
    n_features: int = 256
    k: int = 8
    lr: float = 0.01
    steps: int = 2000
    batch_size: int = 256
    momentum: float = 0.9
    seed: int = 0
    init: str = "random"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def train_crosscoder(train_pt: np.ndarray, train_it: np.ndarray, heldout_pt: np.ndarray, heldout_it: np.ndarray,
                     hyper: TrainConfig, layer_set=(0,), d_model: int | None = None) -> tuple[CrosscoderModel, dict]:
    """Fit a crosscoder; returns the model and held-out metrics.

    Thresholds for eval are the smallest selected activation of each feature
    over the final pass through the training data (one epoch of batches).

    Training runs on inputs divided by their root-mean-square coordinate so
    one learning rate works across activation scales.  The scale is folded
    back afterwards (encoder bias, decoder biases and thresholds multiply by
    it, codes come out multiplied by it), which leaves the decoder rows
    unit-norm and the reconstruction identical.
    """
    train_pt = np.asarray(train_pt, np.float64)
    train_it = np.asarray(train_it, np.float64)
    heldout_pt = np.asarray(heldout_pt, np.float64)
    heldout_it = np.asarray(heldout_it, np.float64)
    if train_pt.shape != train_it.shape or heldout_pt.shape != heldout_it.shape:
        raise DumpMisaligned("PT and IT dumps must be position-aligned with equal shapes")
    if train_pt.shape[1] != heldout_pt.shape[1]:
        raise DumpMisaligned("train and held-out widths differ")
    d_in = train_pt.shape[1]
    d_model = d_model or d_in // len(layer_set)
    if d_model * len(layer_set) != d_in:
        raise DumpMisaligned("dump width does not match layer_set x d_model")
    scale = math.sqrt(float(np.mean(train_pt ** 2) + np.mean(train_it ** 2)) / 2.0) if train_pt.size else 1.0
    scale = scale if scale > 0 and math.isfinite(scale) else 1.0
    train_pt, train_it = train_pt / scale, train_it / scale
    model = init_crosscoder(layer_set, d_model, hyper.n_features, hyper.k, hyper.seed, hyper.init,
                            (train_pt.mean(axis=0), train_it.mean(axis=0)))
    rng = np.random.default_rng([int(hyper.seed), 777])
    N = train_pt.shape[0]
    B = min(hyper.batch_size, N)
    per_epoch = max(1, N // B)
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    losses = []
    order = rng.permutation(N)
    thresholds = np.full(model.n_features, np.inf)
    final_epoch_start = max(0, hyper.steps - per_epoch)
    for step in range(hyper.steps):
        j = step % per_epoch
        if j == 0 and step:
            order = rng.permutation(N)
        idx = order[j * B:(j + 1) * B]
        loss, grads, mask, f = loss_and_grads(model, train_pt[idx], train_it[idx])
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at step {step}")
        losses.append(loss)
        for name, g in grads.items():
            v = velocity[name]
            v *= hyper.momentum
            v -= hyper.lr * g
            getattr(model, name)[...] += v
        normalize_decoders(model)
        if not all(np.isfinite(a).all() for a in model.params().values()):
            raise NonFiniteLoss(f"parameters diverged at step {step} (loss {loss:.3g}); lower the learning rate")
        if step >= final_epoch_start:
            sel = np.where(mask & (f > 0), f, np.inf)
            thresholds = np.minimum(thresholds, sel.min(axis=0))
    if hyper.steps == 0:
        # no training pass: freeze thresholds from one BatchTopK pass over the training data
        _, _, mask, f = loss_and_grads(model, train_pt[:B], train_it[:B])
        thresholds = np.where(mask & (f > 0), f, np.inf).min(axis=0)
    model.thresholds = thresholds * scale
    model.b_enc *= scale
    model.b_dec_pt *= scale
    model.b_dec_it *= scale
    # store float32-representable parameters so the container round trip is exact
    for name, arr in {**model.params(), "thresholds": model.thresholds}.items():
        setattr(model, name, arr.astype(np.float32).astype(np.float64))
    model.meta = {"hyper": hyper.to_dict(), "final_train_loss": losses[-1] if losses else None, "input_scale": scale}
    metrics = evaluate(model, heldout_pt, heldout_it)
    metrics["train_loss_first"] = losses[0] if losses else None
    metrics["train_loss_last"] = losses[-1] if losses else None
    return model, metrics


def save_crosscoder(model: CrosscoderModel, path) -> str:
    meta = {"layer_set": list(model.layer_set), "d_model": model.d_model, "k": model.k, "meta": model.meta}
    tensors = {**model.params(), "thresholds": np.where(np.isfinite(model.thresholds), model.thresholds, -1.0)}
    return container.write(path, container.CROSSCODER_MAGIC, meta, tensors)


def load_crosscoder(path) -> CrosscoderModel:
    header, t = container.read(path, container.CROSSCODER_MAGIC)
    th = t["thresholds"].astype(np.float64)
    th = np.where(th < 0, np.inf, th)
    return CrosscoderModel(tuple(header["layer_set"]), int(header["d_model"]), int(header["k"]),
                           t["w_enc"], t["b_enc"], t["w_dec_pt"], t["w_dec_it"], t["b_dec_pt"], t["b_dec_it"],
                           th, header.get("meta", {}))


# ---------------------------------------------------------------- quality gate


@dataclass(frozen=True)
class QualityGate:
    ve_pt: float
    ve_it: float
    mean_l0: float
    alive_fraction_max: float
    causal_drop_top200: float
    random_drop: float
    k: int

    @property
    def passed(self) -> bool:
        return (self.ve_pt >= 0.75 and self.ve_it >= 0.75 and abs(self.mean_l0 - self.k) / self.k <= 0.10
                and 0.01 <= self.alive_fraction_max <= 0.20 and self.causal_drop_top200 > 0
                and self.random_drop <= 0.05)

    def to_dict(self) -> dict:
        return {**self.__dict__, "passed": self.passed}


# ---------------------------------------------------------------- activation dumps


def _recorder(layer_set, store: dict, positions=None):
    def hook(layer, m, resid):
        if layer in layer_set:
            store[layer] = m if positions is None else m[positions]
        return m
    return hook


def mlp_outputs(model, tokens, layer_set, plan=None) -> np.ndarray:
    """Native MLP outputs at ``layer_set`` for every position, concatenated per position."""
    store: dict = {}
    plan = plan or runtime.uniform_plan(model)
    runtime.forward_plan(tokens, plan, mlp_hook=_recorder(set(layer_set), store))
    return np.concatenate([store[l] for l in layer_set], axis=1).astype(np.float64)


def dump_activations(pair: PairedCheckpoints, events, layer_set) -> tuple[np.ndarray, np.ndarray, list]:
    """Position-aligned native PT and IT MLP outputs over all prefix positions of each event."""
    xs_pt, xs_it, index = [], [], []
    for e in sorted(events, key=DivergenceEvent.sort_key):
        a = mlp_outputs(pair.pt, e.prefix_token_ids, layer_set)
        b = mlp_outputs(pair.it, e.prefix_token_ids, layer_set)
        xs_pt.append(a)
        xs_it.append(b)
        index.extend((e.event_id, p) for p in range(a.shape[0]))
    return np.vstack(xs_pt), np.vstack(xs_it), index


def split_by_cluster(events, heldout_fraction: float = 0.25, seed: int = 0):
    """Deterministic cluster-disjoint split keyed by a hash of (seed, cluster id)."""
    train, held = [], []
    for e in sorted(events, key=DivergenceEvent.sort_key):
        u = zlib.crc32(f"{seed}:{e.family}/{e.cluster_id}".encode()) / 2**32
        (held if u < heldout_fraction else train).append(e)
    return train, held


# ---------------------------------------------------------------- edited cells


class CellRun:
    """Clean pass of one cell, cached at the entry of the layer set for cheap edits."""

    def __init__(self, cc: CrosscoderModel, pair: PairedCheckpoints, event: DivergenceEvent, plan, reader,
                 x_pt: np.ndarray):
        self.cc = cc
        self.plan = plan
        self.reader = reader
        self.event = event
        self.start = min(cc.layer_set)
        n = len(plan)
        h = runtime.embed(plan[0][0], event.prefix_token_ids)
        self.entry = runtime.run_layers(h, plan, 0, self.start)
        store: dict = {}
        final = runtime.run_layers(self.entry, plan, self.start, n, _recorder(set(cc.layer_set), store, -1))
        self.margin = self._margin(final)
        self.x_it = np.concatenate([store[l] for l in cc.layer_set]).astype(np.float64)
        self.x_pt = x_pt
        self.codes = cc.encode(x_pt[None], self.x_it[None])[0]

    def _margin(self, final: np.ndarray) -> float:
        logits = runtime.readout(final, self.reader, positions=[-1])[0]
        return fx.margin_of(logits, self.event.t_pt, self.event.t_it)

    def edited(self, delta: np.ndarray | None) -> float:
        """Margin with ``delta`` (flattened over the layer set) added to the last-position MLP outputs."""
        if delta is None or not np.any(delta):
            return self.margin
        d = self.cc.d_model
        pieces = {l: delta[i * d:(i + 1) * d].astype(np.float32) for i, l in enumerate(self.cc.layer_set)}

        def hook(layer, m, resid):
            if layer in pieces:
                m = m.copy()
                m[-1] += pieces[layer]
            return m

        final = runtime.run_layers(self.entry, self.plan, self.start, len(self.plan), hook)
        return self._margin(final)


def contribution(cc: CrosscoderModel, codes: np.ndarray, features, scale: float = 1.0) -> np.ndarray:
    """IT-branch decoder output of ``features`` at their given codes, times ``scale``."""
    features = np.asarray(sorted(set(int(i) for i in features)), dtype=np.int64)
    if features.size == 0:
        return np.zeros(cc.d_in)
    return scale * (codes[features] @ cc.w_dec_it[features])


def _check_layer_set(cc: CrosscoderModel, pair: PairedCheckpoints, boundary: int):
    if min(cc.layer_set) < boundary or max(cc.layer_set) >= pair.config.n_layers:
        raise WindowOutOfRange("crosscoder layer set must lie inside the late stack")
    if cc.d_model != pair.config.d_model:
        raise DumpMisaligned("crosscoder width does not match the model")


def pt_partner(cc: CrosscoderModel, pair: PairedCheckpoints, event: DivergenceEvent, plan, boundary: int) -> np.ndarray:
    """PT-branch input for a cell: ``plan`` with every late layer taken from PT, last position."""
    partner = runtime.substitute(plan, pair.pt, range(boundary, pair.config.n_layers))
    return mlp_outputs(pair.pt, event.prefix_token_ids, cc.layer_set, partner)[-1]


def cell_run(cc, pair, event, plan, reader, boundary) -> CellRun:
    return CellRun(cc, pair, event, plan, reader, pt_partner(cc, pair, event, plan, boundary))


class EventCells:
    """The two IT-late cells of one event, ready for edits."""

    def __init__(self, cc, pair, event, readout="common_it", boundary=None):
        b = pair.config.late_boundary if boundary is None else boundary
        _check_layer_set(cc, pair, b)
        reader = fx.reader_for(pair, "IT", readout)
        self.event = event
        self.pi = cell_run(cc, pair, event, runtime.hybrid_plan(pair.pt, pair.it, b), reader, b)
        self.ii = cell_run(cc, pair, event, runtime.hybrid_plan(pair.it, pair.it, b), reader, b)
        y = fx.four_cells(pair, event, readout, b)
        self.y_pp, self.y_ip = y.y_pp, y.y_ip
        self.interaction = y.interaction


def prepare_cells(cc, pair, events, readout="common_it", boundary=None) -> list[EventCells]:
    return [EventCells(cc, pair, e, readout, boundary) for e in sorted(events, key=DivergenceEvent.sort_key)]


# ---------------------------------------------------------------- ranking and mediation


def rank_features_causal(cc: CrosscoderModel, pair: PairedCheckpoints, events, readout: str = "common_it",
                         boundary: int | None = None, cells=None, gate: QualityGate | None = None) -> dict:
    """Per-feature mean margin drop in (U_IT, L_IT) when its IT contribution is removed."""
    cells = cells if cells is not None else prepare_cells(cc, pair, events, readout, boundary)
    scores = np.zeros(cc.n_features)
    for c in cells:
        for i in np.flatnonzero(c.ii.codes):
            scores[i] += c.ii.margin - c.ii.edited(-contribution(cc, c.ii.codes, [i]))
    if cells:
        scores /= len(cells)
    idx = np.arange(cc.n_features)
    order = np.lexsort((idx, -scores))
    return {"ranking": order.tolist(), "scores": scores, "gate_failed": gate is not None and not gate.passed}


def _ablated(run: CellRun, features, scale: float = 1.0) -> float:
    return run.edited(-contribution(run.cc, run.codes, features, scale))


def mediation_drop(cc, pair, events, features, readout="common_it", boundary=None, cells=None,
                   scale: float = 1.0) -> dict:
    """``I_full - I_ablate`` with S's IT contributions scaled down by ``scale`` in both IT-late cells."""
    cells = cells if cells is not None else prepare_cells(cc, pair, events, readout, boundary)
    full, abl, drop_ii, drop_pi = [], [], [], []
    for c in cells:
        y_ii = _ablated(c.ii, features, scale)
        y_pi = _ablated(c.pi, features, scale)
        full.append(c.interaction)
        abl.append((y_ii - c.y_ip) - (y_pi - c.y_pp))
        drop_ii.append(c.ii.margin - y_ii)
        drop_pi.append(c.pi.margin - y_pi)
    i_full = float(np.mean(full)) if full else 0.0
    i_abl = float(np.mean(abl)) if abl else 0.0
    drop = float(np.mean(np.subtract(full, abl))) if full else 0.0
    degenerate = abs(i_full) < DEGENERATE_INTERACTION
    return {
        "I_full": i_full,
        "I_ablate": i_abl,
        "drop": drop,
        "share": math.nan if degenerate else drop / i_full,
        "drop_ii": float(np.mean(drop_ii)) if drop_ii else 0.0,
        "drop_pi": float(np.mean(drop_pi)) if drop_pi else 0.0,
        "degenerate": degenerate,
        "n_events": len(cells),
        "n_features": len(set(int(i) for i in features)),
    }


def causal_gate(cc, pair, events, features, readout="common_it", boundary=None, cells=None) -> dict:
    """drop(U_IT, L_IT) - drop(U_PT, L_IT); with fixed upstream cells this equals the mediation drop."""
    m = mediation_drop(cc, pair, events, features, readout, boundary, cells)
    return {"gate": m["drop_ii"] - m["drop_pi"], "drop_ii": m["drop_ii"], "drop_pi": m["drop_pi"],
            "degenerate": m["degenerate"]}


def feature_rescue(cc, pair, events, features, readout="common_it", boundary=None, cells=None) -> dict:
    """Swap S's codes in (U_PT, L_IT) for those of the native (U_IT, L_IT) pass."""
    cells = cells if cells is not None else prepare_cells(cc, pair, events, readout, boundary)
    gains, fractions, n_filtered = [], [], 0
    for c in cells:
        delta = contribution(cc, c.ii.codes, features) - contribution(cc, c.pi.codes, features)
        gain = c.pi.edited(delta) - c.pi.margin
        gains.append(gain)
        missing = c.ii.margin - c.pi.margin
        if abs(missing) >= FRACTION_FILTER:
            fractions.append(gain / missing)
        else:
            n_filtered += 1
    return {
        "rescue_gain": float(np.mean(gains)) if gains else 0.0,
        "rescue_fraction": float(np.mean(fractions)) if fractions else math.nan,
        "missing_margin_degenerate": not fractions,
        "n_filtered": n_filtered,
        "n_events": len(cells),
        "max_abs_gain": float(np.max(np.abs(gains))) if gains else 0.0,
    }


def bucket_edit_dose_response(cc, pair, events, bucket, alphas=(0.0, 0.5, 1.0, 1.5, 2.0), readout="common_it",
                              boundary=None, cells=None) -> dict:
    cells = cells if cells is not None else prepare_cells(cc, pair, events, readout, boundary)
    rows = []
    for a in alphas:
        if a == 0.0:
            rows.append({"alpha": 0.0, "drop": 0.0})
            continue
        m = mediation_drop(cc, pair, events, bucket, readout, boundary, cells, scale=a)
        rows.append({"alpha": float(a), "drop": m["drop"]})
    return {"bucket_size": len(set(bucket)), "rows": rows}


# ---------------------------------------------------------------- control selections


def matched_random(cc: CrosscoderModel, features, seed: int = 0) -> list[int]:
    """Size-matched draw from alive features outside ``features``."""
    features = set(int(i) for i in features)
    pool = np.array([i for i in np.flatnonzero(cc.alive()) if i not in features], dtype=np.int64)
    n = min(len(features), pool.size)
    rng = np.random.default_rng([int(seed), 31337, len(features)])
    return sorted(int(i) for i in rng.choice(pool, size=n, replace=False)) if n else []


def top_active_noncausal(cc: CrosscoderModel, cells, features, n: int | None = None) -> list[int]:
    """Features with the largest mean code on the events' (U_IT, L_IT) pass, excluding ``features``."""
    features = set(int(i) for i in features)
    n = len(features) if n is None else n
    mean_code = np.mean([c.ii.codes for c in cells], axis=0) if cells else np.zeros(cc.n_features)
    idx = np.arange(cc.n_features)
    order = [int(i) for i in np.lexsort((idx, -mean_code)) if int(i) not in features and mean_code[i] > 0]
    return sorted(order[:n])


def same_delta_random_drop(cc, cells, features, seed: int = 0) -> dict:
    """Random feature-space direction, decoded and rescaled to the causal edit's norm, per event and cell."""
    drops = []
    for c in cells:
        out = {}
        for name, run in (("ii", c.ii), ("pi", c.pi)):
            causal = contribution(cc, run.codes, features)
            norm = np.linalg.norm(causal)
            if norm == 0:
                out[name] = run.margin
                continue
            rng = np.random.default_rng([int(seed), zlib.crc32(c.event.event_id.encode("utf-8")), len(name)])
            direction = rng.standard_normal(cc.n_features) @ cc.w_dec_it
            direction *= norm / np.linalg.norm(direction)
            out[name] = run.edited(-direction)
        drops.append((c.interaction) - ((out["ii"] - c.y_ip) - (out["pi"] - c.y_pp)))
    return {"drop": float(np.mean(drops)) if drops else 0.0, "n_events": len(cells)}


# ---------------------------------------------------------------- handoff mediation


def handoff_mediation(cc: CrosscoderModel, pair: PairedCheckpoints, events, window, direction: str = "rescue",
                      features=(), readout: str = "common_it", unit: str = "mlp_only",
                      boundary: int | None = None) -> dict:
    """Margin change from swapping a pre-layer-set window, and the part carried by ``features``.

    rescue starts from (U_PT, L_IT) and computes the window with IT; degrade
    starts from (U_IT, L_IT) and computes it with PT.  Totals are signed so
    that a move toward the native IT margin is positive for rescue and a
    move away from it is positive for degrade.
    """
    b = pair.config.late_boundary if boundary is None else boundary
    start, stop = int(window[0]), int(window[1])
    n = pair.config.n_layers
    if not 0 <= start <= stop <= n:
        raise WindowOutOfRange(f"window [{start}, {stop}) outside [0, {n}]")
    if stop > min(cc.layer_set):
        raise WindowOverlapsLayerSet("handoff window must end before the crosscoder layer set")
    _check_layer_set(cc, pair, b)
    if direction == "rescue":
        base = runtime.hybrid_plan(pair.pt, pair.it, b)
        donor, sign = pair.it, 1.0
    elif direction == "degrade":
        base = runtime.uniform_plan(pair.it)
        donor, sign = pair.pt, -1.0
    else:
        raise ValueError("direction must be 'rescue' or 'degrade'")
    pert = runtime.substitute(base, donor, range(start, stop), unit)
    reader = fx.reader_for(pair, "IT", readout)
    totals, mediated, fractions = [], [], []
    for e in sorted(events, key=DivergenceEvent.sort_key):
        rb = cell_run(cc, pair, e, base, reader, b)
        rp = cell_run(cc, pair, e, pert, reader, b)
        total = sign * (rp.margin - rb.margin)
        abl = sign * (_ablated(rp, features) - _ablated(rb, features))
        med = total - abl
        totals.append(total)
        mediated.append(med)
        if abs(total) >= FRACTION_FILTER:
            fractions.append(med / total)
    return {
        "window": [start, stop],
        "direction": direction,
        "unit": unit,
        "total_effect": float(np.mean(totals)) if totals else 0.0,
        "mediated_part": float(np.mean(mediated)) if mediated else 0.0,
        "mediated_fraction": float(np.mean(fractions)) if fractions else math.nan,
        "n_fraction_events": len(fractions),
        "n_events": len(totals),
    }


# ---------------------------------------------------------------- planted fixtures


def planted_dictionary_data(n_samples: int, d_in: int = 16, n_atoms: int = 8, active: int = 2, seed: int = 0):
    """Paired activations generated from a planted sparse dictionary.

    Returns ``(x_pt, x_it, atoms_pt, atoms_it)`` where each atom's two branch
    rows are jointly unit-norm.
    """
    rng = np.random.default_rng([int(seed), 8])
    atoms = rng.standard_normal((n_atoms, 2 * d_in))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    codes = np.zeros((n_samples, n_atoms))
    for i in range(n_samples):
        on = rng.choice(n_atoms, size=active, replace=False)
        codes[i, on] = rng.uniform(1.0, 3.0, size=active)
    x = codes @ atoms
    return x[:, :d_in], x[:, d_in:], atoms[:, :d_in], atoms[:, d_in:]


def match_atoms(model: CrosscoderModel, atoms_pt: np.ndarray, atoms_it: np.ndarray) -> np.ndarray:
    """Best cosine between each planted atom and any learned (joint) decoder row."""
    learned = np.concatenate([model.w_dec_pt, model.w_dec_it], axis=1)
    learned = learned / np.maximum(np.linalg.norm(learned, axis=1, keepdims=True), 1e-12)
    atoms = np.concatenate([atoms_pt, atoms_it], axis=1)
    atoms = atoms / np.linalg.norm(atoms, axis=1, keepdims=True)
    return (atoms @ learned.T).max(axis=1)


def planted_coupling_crosscoder(pair: PairedCheckpoints) -> CrosscoderModel:
    """Two-feature crosscoder aligned with the planted coupling units of a gated pair.

    Feature 0 reads the positive and feature 1 the negative IT-minus-PT
    component of the final MLP output along the target readout direction;
    both decode back along that direction in the IT branch only.
    """
    n, d = pair.config.n_layers, pair.config.d_model
    u = np.asarray(pair.info["target_readout_direction"], dtype=np.float64)
    u /= np.linalg.norm(u)
    w_enc = np.stack([np.concatenate([-u, u]), np.concatenate([u, -u])], axis=1)
    w_dec_it = np.stack([u, -u])
    return CrosscoderModel((n - 1,), d, 1, w_enc, np.zeros(2), np.zeros((2, d)), w_dec_it,
                           np.zeros(d), np.zeros(d), np.zeros(2), {"planted": True})

"""Validation controls for the factorial: interpolation, signed permutations,
pre-late commitment, and the selection-baseline ladder."""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import divergence as dv
from . import factorial as fx
from . import runtime, stats
from .divergence import DivergenceEvent
from .errors import AlphaOutOfRange, EmptyInput
from .model import PairedCheckpoints

DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def _b(pair, boundary):
    return pair.config.late_boundary if boundary is None else boundary


def mix_states(u_pt: np.ndarray, u_it: np.ndarray, alpha: float) -> np.ndarray:
    """``U_PT + alpha (U_IT - U_PT)``; the endpoints return the inputs themselves."""
    if alpha == 0.0:
        return u_pt
    if alpha == 1.0:
        return u_it
    a, b = u_pt.astype(np.float64), u_it.astype(np.float64)
    return (a + alpha * (b - a)).astype(np.float32)


def interpolation_sweep(pair: PairedCheckpoints, events, alphas=DEFAULT_ALPHAS, readout: str = "common_it",
                        boundary: int | None = None) -> dict:
    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise AlphaOutOfRange("alphas must lie in [0, 1]")
    if 0.0 not in alphas or 1.0 not in alphas:
        raise AlphaOutOfRange("alphas must include both endpoints 0 and 1")
    b = _b(pair, boundary)
    events = sorted(events, key=DivergenceEvent.sort_key)
    if not events:
        raise EmptyInput("no events")
    d = np.zeros((len(events), len(alphas)))
    for i, e in enumerate(events):
        up = fx.boundary_states(pair, e.prefix_token_ids, b)
        for j, a in enumerate(alphas):
            u = mix_states(up["PT"].values, up["IT"].values, a)
            yi = fx.late_margin(pair, u, "IT", readout, e.t_pt, e.t_it, b)
            yp = fx.late_margin(pair, u, "PT", readout, e.t_pt, e.t_it, b)
            d[i, j] = yi - yp
    mean_d = d.mean(axis=0)
    slope, intercept = np.polyfit(alphas, mean_d, 1)
    return {
        "alphas": alphas,
        "mean_late_effect": mean_d.tolist(),
        "slope": float(slope),
        "intercept": float(intercept),
        "endpoint_difference": float(mean_d[alphas.index(1.0)] - mean_d[alphas.index(0.0)]),
        "n_events": len(events),
        "per_event": d,
    }


# ---------------------------------------------------------------- signed permutation


def signed_permutation(delta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute coordinates and flip signs independently at every position (norms preserved exactly)."""
    T, d = delta.shape
    perm = rng.permuted(np.tile(np.arange(d), (T, 1)), axis=1)
    signs = np.where(rng.random((T, d)) < 0.5, -1.0, 1.0)
    return np.take_along_axis(delta, perm, axis=1) * signs


def _draw_rng(seed: int, draw: int, event: DivergenceEvent) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(draw), zlib.crc32(event.event_id.encode("utf-8"))])


def replaced_upstream_interaction(pair: PairedCheckpoints, event: DivergenceEvent, u_pt: np.ndarray,
                                  u_new: np.ndarray, y_pp: float, y_pi: float, readout: str, b: int) -> float:
    """Interaction with ``u_new`` standing in for the IT upstream state."""
    y_ip = fx.late_margin(pair, u_new, "PT", readout, event.t_pt, event.t_it, b)
    y_ii = fx.late_margin(pair, u_new, "IT", readout, event.t_pt, event.t_it, b)
    return (y_ii - y_ip) - (y_pi - y_pp)


def signed_permutation_null(pair: PairedCheckpoints, events, seed: int = 0, n_draws: int = 20,
                            readout: str = "common_it", boundary: int | None = None,
                            transform=None) -> dict:
    """Replace each event's boundary delta by a signed coordinate permutation of itself.

    ``transform(delta, rng)`` overrides the draw (used for sanity checks).
    Deltas are formed and re-added in float64, so the identity transform
    reproduces U_IT exactly.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    transform = transform or signed_permutation
    b = _b(pair, boundary)
    events = sorted(events, key=DivergenceEvent.sort_key)
    if not events:
        raise EmptyInput("no events")
    observed = np.zeros(len(events))
    null = np.zeros((n_draws, len(events)))
    for i, e in enumerate(events):
        up = fx.boundary_states(pair, e.prefix_token_ids, b)
        cells = fx.four_cells(pair, e, readout, b, states=up)
        observed[i] = cells.interaction
        u_pt = up["PT"].values.astype(np.float64)
        delta = up["IT"].values.astype(np.float64) - u_pt
        for k in range(n_draws):
            u_new = (u_pt + transform(delta, _draw_rng(seed, k, e))).astype(np.float32)
            null[k, i] = replaced_upstream_interaction(pair, e, up["PT"].values, u_new, cells.y_pp, cells.y_pi,
                                                       readout, b)
    obs = float(observed.mean())
    null_means = null.mean(axis=1)
    null_mean = float(null_means.mean())
    degenerate = abs(obs) < fx.EPS
    return {
        "observed_interaction": obs,
        "null_mean": null_mean,
        "null_draw_means": null_means.tolist(),
        "ratio": math.nan if degenerate else null_mean / obs,
        "degenerate_observed": degenerate,
        "n_draws": n_draws,
        "n_events": len(events),
        "seed": int(seed),
    }


# ---------------------------------------------------------------- pre-late commitment


def boundary_margin(pair: PairedCheckpoints, event: DivergenceEvent, boundary: int | None = None) -> float:
    """IT final norm and unembedding applied to the IT state entering the boundary layer."""
    b = _b(pair, boundary)
    u = runtime.forward_upstream(pair.it, event.prefix_token_ids, b)
    logits = runtime.readout(u, pair.it, positions=[-1])[0]
    return fx.margin_of(logits, event.t_pt, event.t_it)


def pre_late_commitment(pair: PairedCheckpoints, events, readout: str = "common_it", boundary: int | None = None,
                        results=None, n_bins: int = 5) -> dict:
    b = _b(pair, boundary)
    events = sorted(events, key=DivergenceEvent.sort_key)
    if not events:
        raise EmptyInput("no events")
    if results is None:
        results, _ = fx.score_factorial(pair, events, readout, b)
    by_id = {r.event_id: r for r in results}
    rows = []
    for e in events:
        if e.event_id in by_id:
            rows.append((boundary_margin(pair, e, b), by_id[e.event_id].interaction))
    margins = np.array([m for m, _ in rows])
    inter = np.array([i for _, i in rows])
    keep = margins <= 0
    out = {
        "n_events": len(rows),
        "n_uncommitted": int(keep.sum()),
        "empty_subset": bool(not keep.any()),
        "interaction_all": float(inter.mean()),
        "interaction_uncommitted": float(inter[keep].mean()) if keep.any() else None,
    }
    order = np.argsort(margins, kind="stable")
    bins = []
    for chunk in np.array_split(order, min(n_bins, len(order))):
        bins.append({
            "margin_lo": float(margins[chunk].min()),
            "margin_hi": float(margins[chunk].max()),
            "n": int(chunk.size),
            "interaction": float(inter[chunk].mean()),
        })
    out["bins"] = bins
    # single linear control in boundary margin; the intercept is the estimate at margin 0
    if len(rows) >= 2 and np.ptp(margins) > 0:
        X = np.column_stack([np.ones_like(margins), margins])
        coef, *_ = np.linalg.lstsq(X, inter, rcond=None)
        out["linear_control"] = {"intercept": float(coef[0]), "slope": float(coef[1])}
    else:
        out["linear_control"] = None
    return out


# ---------------------------------------------------------------- selection baselines


def selection_baselines(pair: PairedCheckpoints, manifest, first_events, seed: int = 0, max_new: int = 128,
                        readout: str = "common_it", horizons=(4, 8, 16), n_boot: int = 2000) -> dict:
    """Score the factorial on each alternative site selection and relate it to first divergences."""
    first, _ = fx.score_factorial(pair, first_events, readout)
    ref = fx.cell_means(first).get("interaction", math.nan)
    supports = {
        "pre_divergence": dv.collect_pre_divergence(pair, first_events),
        "random_pt_rollout": dv.collect_random_disagreements(pair, manifest, "PT", seed, max_new, first_events),
        "random_it_rollout": dv.collect_random_disagreements(pair, manifest, "IT", seed, max_new, first_events),
        "native_history_it": dv.collect_native_history(pair, manifest, "IT", horizons),
        "native_history_pt": dv.collect_native_history(pair, manifest, "PT", horizons),
    }
    out = {"first_divergence": {"n_events": len(first), "interaction": ref}}
    for name, col in supports.items():
        res, _ = fx.score_factorial(pair, col.events, readout)
        row = {"n_events": len(res), "n_excluded": len(col.exclusions)}
        if res:
            row["interaction"] = fx.cell_means(res)["interaction"]
            row["fraction_of_first"] = row["interaction"] / ref if abs(ref) > fx.EPS else None
            row["ci"] = stats.cluster_bootstrap([r.interaction for r in res], [r.cluster_id for r in res],
                                                n_boot, seed).to_dict()
        out[name] = row
    return out

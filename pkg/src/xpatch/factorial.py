"""Four-cell upstream x late-stack factorial and its derived scales.

A cell Y(U, L) runs the upstream model to the late boundary, hands the full
hidden-state tensor to the late model, and scores
``logit(t_it) - logit(t_pt)`` at the event position through one fixed reader
(``common_it``, ``common_pt``) or the late model's own head (``native``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import runtime, stats
from .divergence import DivergenceEvent
from .errors import WindowOutOfRange, XPatchError
from .model import Checkpoint, PairedCheckpoints
from .runtime import ResidualStates

log = logging.getLogger(__name__)

READOUTS = ("common_it", "common_pt", "native")
EPS = 1e-9


def reader_for(pair: PairedCheckpoints, late_side: str, readout: str) -> Checkpoint:
    if readout == "common_it":
        return pair.it
    if readout == "common_pt":
        return pair.pt
    if readout == "native":
        return pair.model(late_side)
    raise ValueError(f"unknown readout {readout!r}; expected one of {READOUTS}")


def margin_of(logits_row: np.ndarray, t_pt: int, t_it: int) -> float:
    return float(logits_row[t_it]) - float(logits_row[t_pt])


def boundary_states(pair: PairedCheckpoints, tokens, boundary: int | None = None) -> dict[str, ResidualStates]:
    b = pair.config.late_boundary if boundary is None else boundary
    return {side: runtime.forward_upstream(pair.model(side), tokens, b) for side in ("PT", "IT")}


def late_margin(pair: PairedCheckpoints, states: ResidualStates | np.ndarray, late: str, readout: str,
                t_pt: int, t_it: int, boundary: int | None = None, mlp_hook=None) -> float:
    b = pair.config.late_boundary if boundary is None else boundary
    if not isinstance(states, ResidualStates):
        states = ResidualStates(np.asarray(states, dtype=np.float32), b, "perturbed")
    final = runtime.forward_late(pair.model(late), states, b, mlp_hook=mlp_hook)
    logits = runtime.readout(final, reader_for(pair, late, readout), positions=[-1])[0]
    return margin_of(logits, t_pt, t_it)


def score_cell(pair: PairedCheckpoints, event: DivergenceEvent, upstream: str, late: str,
               readout: str = "common_it", boundary: int | None = None) -> float:
    """Margin Y(U_upstream, L_late) at the event position."""
    b = pair.config.late_boundary if boundary is None else boundary
    up = runtime.forward_upstream(pair.model(upstream), event.prefix_token_ids, b)
    return late_margin(pair, up, late, readout, event.t_pt, event.t_it, b)


@dataclass(frozen=True)
class FourCellResult:
    event_id: str
    prompt_id: str
    cluster_id: str
    family: str
    kind: str
    position: int
    t_pt: int
    t_it: int
    y_pp: float
    y_pi: float
    y_ip: float
    y_ii: float
    readout: str

    @property
    def late_effect_pt_up(self) -> float:
        return self.y_pi - self.y_pp

    @property
    def late_effect_it_up(self) -> float:
        return self.y_ii - self.y_ip

    @property
    def interaction(self) -> float:
        return self.late_effect_it_up - self.late_effect_pt_up

    @property
    def native_diagonal_shift(self) -> float:
        return self.y_ii - self.y_pp

    @property
    def missing_margin(self) -> float:
        return self.y_ii - self.y_pi

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(late_effect_pt_up=self.late_effect_pt_up, late_effect_it_up=self.late_effect_it_up,
                 interaction=self.interaction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FourCellResult:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def four_cells(pair: PairedCheckpoints, event: DivergenceEvent, readout: str = "common_it",
               boundary: int | None = None, states: dict | None = None) -> FourCellResult:
    b = pair.config.late_boundary if boundary is None else boundary
    up = states or boundary_states(pair, event.prefix_token_ids, b)
    y = {}
    for u in ("PT", "IT"):
        for l in ("PT", "IT"):
            y[u[0] + l[0]] = late_margin(pair, up[u], l, readout, event.t_pt, event.t_it, b)
    return FourCellResult(
        event_id=event.event_id, prompt_id=event.prompt_id, cluster_id=event.cluster_id,
        family=event.family, kind=event.kind, position=event.position, t_pt=event.t_pt, t_it=event.t_it,
        y_pp=y["PP"], y_pi=y["PI"], y_ip=y["IP"], y_ii=y["II"], readout=readout,
    )


def score_factorial(pair: PairedCheckpoints, events, readout: str = "common_it",
                    boundary: int | None = None) -> tuple[list[FourCellResult], list[dict]]:
    """Four cells for every event; events that fail are dropped and logged."""
    results, errors = [], []
    for e in sorted(events, key=DivergenceEvent.sort_key):
        try:
            results.append(four_cells(pair, e, readout, boundary))
        except XPatchError as exc:
            log.warning("event %s dropped: %s", e.event_id, exc)
            errors.append({"event_id": e.event_id, "error": type(exc).__name__, "detail": str(exc)})
    return results, errors


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class ScaleConversions:
    matched_portable_ratio: float
    portable_share: float
    native_diagonal_shift: float
    interaction_share: float
    odds_multiplier: float
    ratio_degenerate: bool = False
    shift_degenerate: bool = False

    @classmethod
    def from_effects(cls, late_effect_pt_up: float, late_effect_it_up: float,
                     native_diagonal_shift: float) -> ScaleConversions:
        interaction = late_effect_it_up - late_effect_pt_up
        ratio_bad = abs(late_effect_pt_up) < EPS
        shift_bad = abs(native_diagonal_shift) < EPS
        return cls(
            matched_portable_ratio=math.nan if ratio_bad else late_effect_it_up / late_effect_pt_up,
            portable_share=math.nan if abs(late_effect_it_up) < EPS else late_effect_pt_up / late_effect_it_up,
            native_diagonal_shift=native_diagonal_shift,
            interaction_share=math.nan if shift_bad else interaction / native_diagonal_shift,
            odds_multiplier=math.exp(interaction),
            ratio_degenerate=ratio_bad,
            shift_degenerate=shift_bad,
        )

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def cell_means(results) -> dict[str, float]:
    if not results:
        return {}
    arr = np.array([[r.y_pp, r.y_pi, r.y_ip, r.y_ii] for r in results], dtype=np.float64)
    m = arr.mean(axis=0)
    out = {"y_pp": m[0], "y_pi": m[1], "y_ip": m[2], "y_ii": m[3]}
    out["late_effect_pt_up"] = out["y_pi"] - out["y_pp"]
    out["late_effect_it_up"] = out["y_ii"] - out["y_ip"]
    out["interaction"] = out["late_effect_it_up"] - out["late_effect_pt_up"]
    out["native_diagonal_shift"] = out["y_ii"] - out["y_pp"]
    return {k: float(v) for k, v in out.items()}


def scale_conversions(means: dict) -> ScaleConversions:
    return ScaleConversions.from_effects(means["late_effect_pt_up"], means["late_effect_it_up"],
                                         means["native_diagonal_shift"])


def summarize(results, n_boot: int = stats.DEFAULT_RESAMPLES, seed: int = 0) -> dict:
    """Means, cluster-bootstrap CIs (clusters resampled within family) and scale conversions."""
    if not results:
        return {"n_events": 0}
    clusters = [f"{r.family}/{r.cluster_id}" for r in results]
    families = [r.family for r in results]
    strata = families if len(set(families)) > 1 else None
    out = {"n_events": len(results), "n_clusters": len(set(clusters)), "readout": results[0].readout}
    out["means"] = cell_means(results)
    cis = {}
    for key in ("late_effect_pt_up", "late_effect_it_up", "interaction"):
        vals = [getattr(r, key) for r in results]
        cis[key] = stats.cluster_bootstrap(vals, clusters, n_boot, seed, strata=strata).to_dict()
    out["ci"] = cis
    out["conversions"] = scale_conversions(out["means"]).to_dict()
    if strata is not None:
        per_family = {}
        for fam in sorted(set(families)):
            per_family[fam] = cell_means([r for r in results if r.family == fam])
        out["per_family"] = per_family
        out["family_balanced_interaction"] = stats.family_balanced_mean(
            {f: m["interaction"] for f, m in per_family.items()})
    return out


# ---------------------------------------------------------------- stage sweep


def stage_sweep(base: Checkpoint, final: Checkpoint, stages: dict[str, Checkpoint], events,
                readout: str = "common_it", boundary: int | None = None, n_boot: int = 0, seed: int = 0) -> dict:
    """Score each stage S as the descendant of ``base`` on the fixed base->final support.

    Labels stay the (t_base, t_final) pair of each event.  Events whose labels
    are not real tokens for a stage are dropped for that stage.
    """
    events = sorted(events, key=DivergenceEvent.sort_key)
    rows = {}
    ordered = dict(stages)
    ordered.setdefault("final", final)
    for name, ckpt in ordered.items():
        pair = PairedCheckpoints(base, ckpt, strict_mask=False)
        kept, dropped = [], []
        for e in events:
            if not (ckpt.real_token_mask[e.t_pt] and ckpt.real_token_mask[e.t_it]
                    and base.real_token_mask[e.t_pt] and base.real_token_mask[e.t_it]):
                dropped.append({"event_id": e.event_id, "reason": "target_token_missing"})
                continue
            kept.append(e)
        results, errors = score_factorial(pair, kept, readout, boundary)
        top1 = [runtime.argmax_real(runtime.native_last_logits(ckpt, e.prefix_token_ids)) == e.t_it for e in kept]
        row = {
            "n_events": len(results),
            "dropped": dropped + errors,
            "interaction": cell_means(results).get("interaction", math.nan),
            "native_top1_rate": float(np.mean(top1)) if top1 else math.nan,
        }
        if n_boot and results:
            row["ci"] = stats.cluster_bootstrap([r.interaction for r in results],
                                                [r.cluster_id for r in results], n_boot, seed).to_dict()
        rows[name] = row
    ref = rows["final"]["interaction"]
    for row in rows.values():
        row["percent_of_final"] = 100.0 * row["interaction"] / ref if abs(ref) > EPS else math.nan
    return rows


# ---------------------------------------------------------------- window substitution


def window_substitution_metrics(pair: PairedCheckpoints, events, window: tuple[int, int],
                                unit: str = "full_block", host: str = "PT", readout: str = "common_it") -> dict:
    """Replace a window of host layers with donor computation.

    ``identity_transfer_rate`` is the fraction of events, among those where the
    host does not already pick the donor's divergent token, whose argmax becomes
    that token.  ``margin_gain`` is the mean change in Y relative to the
    unmodified host.
    """
    n = pair.config.n_layers
    start, stop = int(window[0]), int(window[1])
    if not 0 <= start <= stop <= n:
        raise WindowOutOfRange(f"window [{start}, {stop}) outside [0, {n}]")
    host = host.upper()
    host_m = pair.model(host)
    donor_side = "IT" if host == "PT" else "PT"
    donor_m = pair.model(donor_side)
    reader = reader_for(pair, host, readout)
    base_plan = runtime.uniform_plan(host_m)
    sub_plan = runtime.substitute(base_plan, donor_m, range(start, stop), unit)
    gains, eligible, moved = [], 0, 0
    for e in sorted(events, key=DivergenceEvent.sort_key):
        target = e.t_it if host == "PT" else e.t_pt
        base_logits = runtime.readout(runtime.forward_plan(e.prefix_token_ids, base_plan), reader, positions=[-1])[0]
        if start == stop:
            sub_logits = base_logits
        else:
            sub_logits = runtime.readout(runtime.forward_plan(e.prefix_token_ids, sub_plan), reader, positions=[-1])[0]
        gains.append(margin_of(sub_logits, e.t_pt, e.t_it) - margin_of(base_logits, e.t_pt, e.t_it))
        if runtime.argmax_real(base_logits) != target:
            eligible += 1
            moved += runtime.argmax_real(sub_logits) == target
    return {
        "window": [start, stop],
        "unit": unit,
        "host": host,
        "n_events": len(gains),
        "identity_transfer_rate": moved / eligible if eligible else 0.0,
        "n_eligible": eligible,
        "margin_gain": float(np.mean(gains)) if gains else 0.0,
    }

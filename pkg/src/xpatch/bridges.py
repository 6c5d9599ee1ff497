"""Consequence bridges: constrained-continuation sequence margins and
forced-token suffix-only objective scoring.

Candidates are always built with native models and then teacher-forced
through the four hybrid cells.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass

import numpy as np

from . import factorial as fx
from . import runtime, stats
from .divergence import DivergenceEvent
from .model import PairedCheckpoints
from .tokenizer import ByteTokenizer

log = logging.getLogger(__name__)

VARIANTS = ("standard", "same_forced", "shuffled_tail", "tail_only_view")
DEFAULT_HORIZONS = (0, 1, 2, 4, 8)
CELLS = (("PT", "PT"), ("PT", "IT"), ("IT", "PT"), ("IT", "IT"))
BRANCHES = ("descendant", "base", "rank_matched", "class_matched")


@dataclass(frozen=True)
class CandidatePair:
    descendant_candidate: tuple[int, ...]
    base_candidate: tuple[int, ...]
    horizon: int
    variant: str

    def __post_init__(self):
        if len(self.descendant_candidate) != self.horizon + 1 or len(self.base_candidate) != self.horizon + 1:
            raise ValueError("candidates must have length horizon + 1")


def greedy_tail(model, prefix, first: int, n: int, eos: int) -> list[int]:
    """``[first]`` followed by up to ``n`` greedy tokens; stops after ``<eos>``."""
    out = [int(first)]
    if n == 0 or first == eos:
        return out
    return out + runtime.greedy_rollout(model, list(prefix) + out, n, stop_token=eos)


def shuffle_tail(cand, rng: np.random.Generator) -> tuple[int, ...]:
    cand = list(cand)
    tail = cand[1:]
    rng.shuffle(tail)
    return tuple(cand[:1] + tail)


def real_logprobs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-softmax over real tokens in float64 (non-real entries stay -inf)."""
    x = logits.astype(np.float64)
    real = x[..., mask]
    m = real.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(real - m).sum(axis=-1, keepdims=True))
    return x - lse


def _cell_logits(pair, tokens, upstream, late, readout, b, positions) -> np.ndarray:
    up = runtime.forward_upstream(pair.model(upstream), tokens, b)
    final = runtime.forward_late(pair.model(late), up, b)
    return runtime.readout(final, fx.reader_for(pair, late, readout), positions=positions)


def candidate_logprobs(pair: PairedCheckpoints, prefix, cand, upstream: str, late: str, readout: str,
                       b: int, first_logits: np.ndarray | None = None) -> np.ndarray:
    """Per-token log-probabilities of ``cand`` after ``prefix`` in one hybrid cell.

    The first token is scored from a forward over ``prefix`` alone (the same
    pass the one-token factorial uses); the tail from one forward over
    ``prefix + cand[:-1]``.
    """
    mask = fx.reader_for(pair, late, readout).real_token_mask
    n = len(prefix)
    if first_logits is None:
        first_logits = _cell_logits(pair, prefix, upstream, late, readout, b, [-1])[0]
    lp = [real_logprobs(first_logits, mask)[cand[0]]]
    if len(cand) > 1:
        tokens = list(prefix) + list(cand[:-1])
        logits = _cell_logits(pair, tokens, upstream, late, readout, b, list(range(n, n + len(cand) - 1)))
        tail = real_logprobs(logits, mask)
        lp.extend(tail[j, cand[j + 1]] for j in range(len(cand) - 1))
    return np.asarray(lp)


def _prefix_logits(pair, prefix, readout, b) -> dict:
    out = {}
    for u in ("PT", "IT"):
        up = runtime.forward_upstream(pair.model(u), prefix, b)
        for l in ("PT", "IT"):
            final = runtime.forward_late(pair.model(l), up, b)
            out[(u, l)] = runtime.readout(final, fx.reader_for(pair, l, readout), positions=[-1])[0]
    return out


def _did(cells: dict) -> float:
    return (cells[("IT", "IT")] - cells[("IT", "PT")]) - (cells[("PT", "IT")] - cells[("PT", "PT")])


def build_candidates(pair: PairedCheckpoints, event: DivergenceEvent, n_max: int, variant: str):
    eos = ByteTokenizer(pair.pt.vocab).eos_id
    prefix = event.prefix_token_ids
    desc = greedy_tail(pair.it, prefix, event.t_it, n_max, eos)
    first_base = event.t_it if variant == "same_forced" else event.t_pt
    base = greedy_tail(pair.pt, prefix, first_base, n_max, eos)
    return desc, base


def constrained_continuation(pair: PairedCheckpoints, events, horizons=DEFAULT_HORIZONS, variant: str = "standard",
                             readout: str = "common_it", boundary: int | None = None, seed: int = 0,
                             n_boot: int = 0) -> dict:
    """C_N interactions of teacher-forced sequence margins, with survivor accounting."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    horizons = sorted(int(h) for h in horizons)
    if not horizons or horizons[0] < 0:
        raise ValueError("horizons must be non-negative")
    b = pair.config.late_boundary if boundary is None else boundary
    events = sorted(events, key=DivergenceEvent.sort_key)
    n_max = horizons[-1]
    rows = []
    failures = []
    for e in events:
        try:
            desc, base = build_candidates(pair, e, n_max, variant)
            first = _prefix_logits(pair, e.prefix_token_ids, readout, b)
            lp_base = {c: candidate_logprobs(pair, e.prefix_token_ids, base, *c, readout, b, first[c]) for c in CELLS}
            if variant != "shuffled_tail":
                lp_desc = {c: candidate_logprobs(pair, e.prefix_token_ids, desc, *c, readout, b, first[c])
                           for c in CELLS}
            per_n = {}
            for n in horizons:
                if len(desc) < n + 1 or len(base) < n + 1:
                    continue
                if variant == "shuffled_tail":
                    rng = np.random.default_rng([int(seed), zlib.crc32(e.event_id.encode("utf-8")), n])
                    d = shuffle_tail(desc[: n + 1], rng)
                    lp_d = {c: candidate_logprobs(pair, e.prefix_token_ids, d, *c, readout, b, first[c])
                            for c in CELLS}
                else:
                    lp_d = lp_desc
                start = 1 if variant == "tail_only_view" else 0
                margins = {c: float(lp_d[c][start: n + 1].sum() - lp_base[c][start: n + 1].sum()) for c in CELLS}
                per_n[n] = margins
            c0 = {c: token_logprob_margin(pair, first[c], e, c[1], readout) for c in CELLS}
        except Exception as exc:  # noqa: BLE001 - per-event failures are logged, never fatal
            log.warning("continuation failed for %s: %s", e.event_id, exc)
            failures.append({"event_id": e.event_id, "reason": "continuation_failed", "detail": str(exc)})
            continue
        rows.append({"event": e, "per_n": per_n, "c0": c0})
    out = {"variant": variant, "readout": readout, "horizons": {}, "failures": failures,
           "n_events": len(events)}
    for n in horizons:
        surv = [r for r in rows if n in r["per_n"]]
        entry = {"n_survivors": len(surv), "n_dropped": len(events) - len(surv)}
        if surv:
            inter = [_did(r["per_n"][n]) for r in surv]
            # one-token factorial on the same survivor subset
            c0 = [_token_did(r) for r in surv]
            entry["interaction"] = float(np.mean(inter))
            entry["c0_on_survivors"] = float(np.mean(c0))
            for c in CELLS:
                entry[f"y_{c[0][0].lower()}{c[1][0].lower()}"] = float(np.mean([r["per_n"][n][c] for r in surv]))
            if n_boot:
                entry["ci"] = stats.cluster_bootstrap(inter, [r["event"].cluster_id for r in surv],
                                                      n_boot, seed).to_dict()
        out["horizons"][str(n)] = entry
    out["per_event"] = [
        {"event_id": r["event"].event_id, "cluster_id": r["event"].cluster_id,
         **{f"c{n}": _did(r["per_n"][n]) for n in horizons if n in r["per_n"]}}
        for r in rows
    ]
    return out


def token_logprob_margin(pair, logits, event, late, readout) -> float:
    lp = real_logprobs(logits, fx.reader_for(pair, late, readout).real_token_mask)
    return float(lp[event.t_it] - lp[event.t_pt])


def _token_did(row) -> float:
    return _did(row["c0"])


# ---------------------------------------------------------------- forced-token bridge


def exact_answer_validator(suffix_text: str, metadata: dict) -> bool:
    answer = metadata["answer"]
    if not isinstance(answer, str) or not answer:
        raise ValueError("validator metadata needs a non-empty 'answer' string")
    return answer in suffix_text


DEFAULT_VALIDATORS = {"CONTENT-REASON": exact_answer_validator}


def ranked_real_tokens(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Real token ids by descending logit; equal logits keep the lower id first."""
    ids = np.flatnonzero(mask)
    vals = logits[ids].astype(np.float64)
    order = np.lexsort((ids, -vals))
    return ids[order]


def alternative_tokens(pair: PairedCheckpoints, event: DivergenceEvent) -> dict:
    """Rank-matched and class-matched alternatives under the descendant's native ranking."""
    tok = ByteTokenizer(pair.pt.vocab)
    logits = runtime.native_last_logits(pair.it, event.prefix_token_ids)
    ranked = ranked_real_tokens(logits, pair.it.real_token_mask)
    exclude = {event.t_it, event.t_pt}
    rank_matched = next((int(t) for t in ranked if int(t) not in exclude), None)
    pos = {int(t): i for i, t in enumerate(ranked)}
    r_it = pos.get(event.t_it, 0)
    cls = tok.token_class(event.t_it)
    same = [int(t) for t in ranked if int(t) not in exclude and tok.token_class(int(t)) == cls]
    class_matched = min(same, key=lambda t: (abs(pos[t] - r_it), pos[t])) if same else None
    return {"rank_matched": rank_matched, "class_matched": class_matched}


def forced_token_bridge(pair: PairedCheckpoints, events, validators=None, branches=BRANCHES, budget: int = 16,
                        n_boot: int = 2000, seed: int = 0) -> dict:
    """Force each branch's first token, continue with the descendant, validate the suffix only."""
    validators = DEFAULT_VALIDATORS if validators is None else validators
    tok = ByteTokenizer(pair.pt.vocab)
    eos = tok.eos_id
    score_rows, diff_rows, excluded = [], [], []
    for e in sorted(events, key=DivergenceEvent.sort_key):
        check = validators.get(e.category)
        if check is None:
            excluded.append({"event_id": e.event_id, "reason": "unscoreable_category"})
            continue
        forced = {"descendant": e.t_it, "base": e.t_pt}
        if any(br in branches for br in ("rank_matched", "class_matched")):
            forced.update(alternative_tokens(pair, e))
        success = {}
        try:
            for br in branches:
                t = forced.get(br)
                if t is None:
                    continue
                suffix = runtime.greedy_rollout(pair.it, list(e.prefix_token_ids) + [t], budget, stop_token=eos)
                ok = bool(check(tok.decode(suffix), e.metadata))
                success[br] = ok
                score_rows.append({"event_id": e.event_id, "cluster_id": e.cluster_id, "category": e.category,
                                   "branch": br, "forced_token": int(t), "suffix": suffix, "success": ok})
        except Exception as exc:  # noqa: BLE001 - validator failures drop the event
            excluded.append({"event_id": e.event_id, "reason": "validator_exception", "detail": str(exc)})
            score_rows = [r for r in score_rows if r["event_id"] != e.event_id]
            continue
        row = {"event_id": e.event_id, "cluster_id": e.cluster_id, "category": e.category}
        for br in branches:
            if br != "descendant" and br in success:
                row[f"descendant_minus_{br}"] = int(success["descendant"]) - int(success[br])
        diff_rows.append(row)
    summary = {}
    for cat in sorted({r["category"] for r in diff_rows}):
        rows = [r for r in diff_rows if r["category"] == cat]
        entry = {"n_events": len(rows)}
        for key in sorted({k for r in rows for k in r if k.startswith("descendant_minus_")}):
            vals = [r[key] for r in rows if key in r]
            clusters = [r["cluster_id"] for r in rows if key in r]
            entry[key] = stats.cluster_bootstrap(vals, clusters, n_boot, seed).to_dict() if n_boot else {
                "mean": float(np.mean(vals))}
        summary[cat] = entry
    return {"summary": summary, "score_rows": score_rows, "diff_rows": diff_rows, "excluded": excluded}

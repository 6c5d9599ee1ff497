"""Prompt manifests, paired greedy rollouts and divergence-event collection.

Every collector returns a :class:`Collection` of events plus an exclusion log;
per-prompt problems never abort a run.  Events are emitted sorted by
``(prompt_id, kind, position, horizon)`` so results do not depend on manifest
order.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import runtime
from .model import PairedCheckpoints
from .tokenizer import ByteTokenizer

KINDS = ("first_divergence", "random_pt_rollout", "random_it_rollout", "pre_divergence", "native_history")


@dataclass(frozen=True)
class PromptRecord:
    id: str
    category: str
    source: str
    text: str
    cluster_id: str = ""
    family: str = "default"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.cluster_id:
            object.__setattr__(self, "cluster_id", self.id)

    @classmethod
    def from_dict(cls, d: dict) -> PromptRecord:
        for key in ("id", "category", "source", "text"):
            if not isinstance(d.get(key), str):
                raise ValueError(f"field {key!r} missing or not a string")
        if not d["text"]:
            raise ValueError("empty prompt text")
        return cls(
            id=d["id"], category=d["category"], source=d["source"], text=d["text"],
            cluster_id=str(d.get("cluster_id") or d["id"]), family=str(d.get("family", "default")),
            metadata=dict(d.get("metadata") or {}),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MalformedRecord:
    id: str
    reason: str


@dataclass(frozen=True)
class DivergenceEvent:
    prompt_id: str
    cluster_id: str
    family: str
    category: str
    prefix_token_ids: tuple[int, ...]
    prompt_length: int
    position: int
    t_pt: int
    t_it: int
    kind: str = "first_divergence"
    horizon: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "prefix_token_ids", tuple(int(t) for t in self.prefix_token_ids))
        if self.t_pt == self.t_it:
            raise ValueError("divergent tokens must differ")
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    @property
    def event_id(self) -> str:
        h = "" if self.horizon is None else f":h{self.horizon}"
        return f"{self.prompt_id}:{self.kind}:{self.position}{h}"

    def sort_key(self):
        return (self.prompt_id, KINDS.index(self.kind), self.position, self.horizon or 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prefix_token_ids"] = list(self.prefix_token_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DivergenceEvent:
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})

    def swapped(self) -> DivergenceEvent:
        return DivergenceEvent(**{**self.__dict__, "t_pt": self.t_it, "t_it": self.t_pt})


class Collection(NamedTuple):
    events: list[DivergenceEvent]
    exclusions: list[dict]


# ---------------------------------------------------------------- manifest io


def load_manifest(path) -> list[PromptRecord | MalformedRecord]:
    out: list[PromptRecord | MalformedRecord] = []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            out.append(MalformedRecord(f"line:{lineno}", f"invalid json: {exc}"))
            continue
        if not isinstance(raw, dict):
            out.append(MalformedRecord(f"line:{lineno}", "record is not an object"))
            continue
        try:
            rec = PromptRecord.from_dict(raw)
        except ValueError as exc:
            rid = raw["id"] if isinstance(raw.get("id"), str) and raw["id"] not in seen else f"line:{lineno}"
            out.append(MalformedRecord(rid, str(exc)))
            continue
        if rec.id in seen:
            out.append(MalformedRecord(f"{rec.id}#line{lineno}", "duplicate id"))
            continue
        seen.add(rec.id)
        out.append(rec)
    return out


def save_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def events_header(pair: PairedCheckpoints, **extra) -> dict:
    return {"checkpoints": {"pt": pair.pt.content_hash, "it": pair.it.content_hash}, **extra}


def write_events(path, events, header: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for e in events:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_events(path) -> tuple[dict, list[DivergenceEvent]]:
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
    header = {}
    events = []
    for line in lines:
        d = json.loads(line)
        if "header" in d and len(d) == 1:
            header = d["header"]
        else:
            events.append(DivergenceEvent.from_dict(d))
    return header, events


# ---------------------------------------------------------------- helpers


def _argmax_pair(pair: PairedCheckpoints, seq) -> tuple[int, int]:
    a = runtime.argmax_real(runtime.native_last_logits(pair.pt, seq))
    b = runtime.argmax_real(runtime.native_last_logits(pair.it, seq))
    return a, b


def _prepare(pair: PairedCheckpoints, rec, exclusions: list) -> list[int] | None:
    if isinstance(rec, MalformedRecord):
        exclusions.append({"prompt_id": rec.id, "reason": "malformed_record", "detail": rec.reason})
        return None
    tok = ByteTokenizer(pair.pt.vocab)
    ids = tok.encode(rec.text)
    body = np.asarray(ids[1:])
    if np.any(body >= pair.config.vocab_size) or not np.all(pair.pt.real_token_mask[body]):
        exclusions.append({"prompt_id": rec.id, "reason": "token_invalid"})
        return None
    return ids


def _event(rec: PromptRecord, prefix, prompt_len, position, t_pt, t_it, kind, horizon=None):
    return DivergenceEvent(
        prompt_id=rec.id, cluster_id=rec.cluster_id, family=rec.family, category=rec.category,
        prefix_token_ids=tuple(prefix), prompt_length=prompt_len, position=position,
        t_pt=int(t_pt), t_it=int(t_it), kind=kind, horizon=horizon, metadata=dict(rec.metadata),
    )


def _finish(events, exclusions) -> Collection:
    events = sorted(events, key=DivergenceEvent.sort_key)
    exclusions = sorted(exclusions, key=lambda x: (x["prompt_id"], x.get("horizon") or 0))
    return Collection(events, exclusions)


def _prompt_seed(seed: int, prompt_id: str, salt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(prompt_id.encode("utf-8")), salt])


# ---------------------------------------------------------------- collectors


def first_divergence(pair: PairedCheckpoints, ids: list[int], max_new: int) -> tuple[list[int], int, int, int] | None:
    """Shared greedy decoding until the first top-1 disagreement.

    Returns ``(prefix, position, t_pt, t_it)`` or None when no disagreement occurs
    within ``max_new`` generated tokens (or both models emit ``<eos>`` together).
    """
    eos = ByteTokenizer(pair.pt.vocab).eos_id
    seq = list(ids)
    for pos in range(max_new):
        a, b = _argmax_pair(pair, seq)
        if a != b:
            return seq, pos, a, b
        if a == eos:
            return None
        seq.append(a)
    return None


def collect_first_divergences(pair: PairedCheckpoints, manifest, max_new: int = 128) -> Collection:
    events, exclusions = [], []
    for rec in manifest:
        ids = _prepare(pair, rec, exclusions)
        if ids is None:
            continue
        found = first_divergence(pair, ids, max_new)
        if found is None:
            exclusions.append({"prompt_id": rec.id, "reason": "no_divergence"})
            continue
        prefix, pos, a, b = found
        events.append(_event(rec, prefix, len(ids), pos, a, b, "first_divergence"))
    return _finish(events, exclusions)


def collect_random_disagreements(pair: PairedCheckpoints, manifest, rollout_source: str = "PT", seed: int = 0,
                                 max_new: int = 128, first_events=None) -> Collection:
    """One uniformly sampled later disagreement per prompt along a native greedy rollout.

    Candidate positions are found from a single full-sequence pass of the
    non-source model; the sampled position is then re-verified with an exact
    prefix forward and resampled if the disagreement does not reproduce.
    """
    src_name = rollout_source.upper()
    source = pair.model(src_name)
    other = pair.it if src_name == "PT" else pair.pt
    kind = "random_pt_rollout" if src_name == "PT" else "random_it_rollout"
    eos = ByteTokenizer(pair.pt.vocab).eos_id
    first_pos = {e.prompt_id: e.position for e in (first_events or []) if e.kind == "first_divergence"}
    events, exclusions = [], []
    for rec in manifest:
        ids = _prepare(pair, rec, exclusions)
        if ids is None:
            continue
        if first_events is None:
            found = first_divergence(pair, ids, max_new)
            p = None if found is None else found[1]
        else:
            p = first_pos.get(rec.id)
        if p is None:
            exclusions.append({"prompt_id": rec.id, "reason": "no_later_disagreement"})
            continue
        gen = runtime.greedy_rollout(source, ids, max_new, stop_token=eos)
        seq = ids + gen
        full = runtime.forward_upstream(other, seq[:-1], other.config.n_layers)
        logits = runtime.readout(full, other)
        n = len(ids)
        cand = [j for j in range(p + 1, len(gen)) if int(np.argmax(logits[n - 1 + j])) != gen[j]]
        rng = _prompt_seed(seed, rec.id, KINDS.index(kind))
        chosen = None
        while cand:
            j = cand.pop(int(rng.integers(len(cand))))
            prefix = seq[: n + j]
            o = runtime.argmax_real(runtime.native_last_logits(other, prefix))
            if o != gen[j]:
                chosen = (j, prefix, o)
                break
        if chosen is None:
            exclusions.append({"prompt_id": rec.id, "reason": "no_later_disagreement"})
            continue
        j, prefix, o = chosen
        t_pt, t_it = (gen[j], o) if src_name == "PT" else (o, gen[j])
        events.append(_event(rec, prefix, n, j, t_pt, t_it, kind))
    return _finish(events, exclusions)


def collect_pre_divergence(pair: PairedCheckpoints, first_events) -> Collection:
    """Move each first-divergence site one token earlier, keeping the future token pair as labels."""
    events, exclusions = [], []
    for e in first_events:
        if e.position < 1:
            exclusions.append({"prompt_id": e.prompt_id, "reason": "skipped_position_zero"})
            continue
        events.append(DivergenceEvent(**{
            **e.__dict__, "prefix_token_ids": e.prefix_token_ids[:-1], "position": e.position - 1,
            "kind": "pre_divergence", "horizon": None,
        }))
    return _finish(events, exclusions)


def collect_native_history(pair: PairedCheckpoints, manifest, history_source: str = "IT",
                           horizons=(4, 8, 16)) -> Collection:
    src_name = history_source.upper()
    source = pair.model(src_name)
    eos = ByteTokenizer(pair.pt.vocab).eos_id
    horizons = sorted(int(h) for h in horizons)
    events, exclusions = [], []
    for rec in manifest:
        ids = _prepare(pair, rec, exclusions)
        if ids is None:
            continue
        gen = runtime.greedy_rollout(source, ids, max(horizons), stop_token=eos)
        for h in horizons:
            if len(gen) < h or (h > 0 and gen[h - 1] == eos):
                exclusions.append({"prompt_id": rec.id, "reason": "history_too_short", "horizon": h})
                continue
            prefix = ids + gen[:h]
            a, b = _argmax_pair(pair, prefix)
            if a == b:
                exclusions.append({"prompt_id": rec.id, "reason": "agree", "horizon": h})
                continue
            events.append(_event(rec, prefix, len(ids), h, a, b, "native_history", horizon=h))
    return _finish(events, exclusions)


def verify_first_divergence(pair: PairedCheckpoints, event: DivergenceEvent) -> bool:
    """Re-run both models over the stored prefix: agreement before ``position``, stored labels at it."""
    prefix = list(event.prefix_token_ids)
    n = event.prompt_length
    if len(prefix) != n + event.position:
        return False
    for j in range(event.position):
        a, b = _argmax_pair(pair, prefix[: n + j])
        if a != b or a != prefix[n + j]:
            return False
    return _argmax_pair(pair, prefix) == (event.t_pt, event.t_it)

import numpy as np
import pytest

from xpatch import divergence as dv
from xpatch import factorial as fx
from xpatch import runtime as rt
from xpatch import toy
from xpatch.divergence import DivergenceEvent, MalformedRecord, PromptRecord
from xpatch.model import PairedCheckpoints


@pytest.fixture(scope="module")
def identical():
    return toy.gen_toy_pair("identical", seed=2)


@pytest.fixture(scope="module")
def plain_manifest():
    return toy.toy_manifest({}, 20, seed=4)


def test_identical_pair_collects_nothing(identical, plain_manifest):
    col = dv.collect_first_divergences(identical, plain_manifest, 16)
    assert col.events == []
    assert [x["reason"] for x in col.exclusions] == ["no_divergence"] * len(plain_manifest)
    assert dv.collect_random_disagreements(identical, plain_manifest, "PT", 0, 16).events == []
    assert dv.collect_native_history(identical, plain_manifest, "IT").events == []


def test_boosted_unembedding_row_diverges_at_position_zero(identical, plain_manifest):
    # the descendant boosts token 42 ("*") in its unembedding only
    lm = identical.it.weights["lm_head"].copy()
    lm[:, 42] += 0.4 * np.abs(lm).max()
    pair = PairedCheckpoints(identical.pt, identical.it.replace_weights({"lm_head": lm}))
    col = dv.collect_first_divergences(pair, plain_manifest, 8)
    tok = toy.tokenizer_for(pair.pt)
    n_expected = 0
    for rec in plain_manifest:
        ids = tok.encode(rec.text)
        a = rt.argmax_real(rt.native_last_logits(pair.pt, ids))
        b = rt.argmax_real(rt.native_last_logits(pair.it, ids))
        if b == 42 and a != 42:
            n_expected += 1
            ev = next(e for e in col.events if e.prompt_id == rec.id)
            assert (ev.position, ev.t_pt, ev.t_it) == (0, a, 42)
            assert list(ev.prefix_token_ids) == ids
    assert n_expected > 0


def test_exclusion_accounting(gated, tmp_path):
    lines = [
        '{"id": "a", "category": "c", "source": "s", "text": "hello world"}',
        'not json',
        '{"id": "b", "category": "c", "source": "s", "text": ""}',
        '{"id": "a", "category": "c", "source": "s", "text": "dup"}',
        '{"id": "c", "category": "c", "source": "s", "text": "caf\\u00e9"}',
        '{"id": "d", "category": "c", "source": "s", "text": "zq!b", "cluster_id": "grp"}',
    ]
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n")
    manifest = dv.load_manifest(path)
    assert sum(isinstance(r, MalformedRecord) for r in manifest) == 3
    col = dv.collect_first_divergences(gated, manifest, 8)
    assert len(col.events) + len(col.exclusions) == len(manifest)
    reasons = {x["prompt_id"]: x["reason"] for x in col.exclusions}
    assert reasons["c"] == "token_invalid"
    assert sum(r == "malformed_record" for r in reasons.values()) == 3
    d = next(r for r in manifest if getattr(r, "id", "") == "d")
    assert d.cluster_id == "grp"


def test_manifest_round_trip(gated_manifest, tmp_path):
    dv.save_manifest(gated_manifest[:10], tmp_path / "m.jsonl")
    assert dv.load_manifest(tmp_path / "m.jsonl") == gated_manifest[:10]


def test_events_round_trip(gated, gated_events, tmp_path):
    header = dv.events_header(gated, seed=0, max_new=32)
    dv.write_events(tmp_path / "e.jsonl", gated_events, header)
    h, back = dv.read_events(tmp_path / "e.jsonl")
    assert h == header and back == list(gated_events)


def test_gated_events_accounting_and_minimality(gated, gated_manifest, gated_collection):
    col = gated_collection
    assert len(col.events) + len(col.exclusions) == len(gated_manifest)
    for e in col.events[::5]:
        assert dv.verify_first_divergence(gated, e)
        assert e.t_pt != e.t_it
        assert gated.pt.real_token_mask[e.t_pt] and gated.pt.real_token_mask[e.t_it]


def test_event_invariants():
    with pytest.raises(ValueError):
        DivergenceEvent("p", "p", "f", "c", (1, 2), 2, 0, 5, 5)
    with pytest.raises(ValueError):
        DivergenceEvent("p", "p", "f", "c", (1, 2), 2, 0, 5, 6, kind="nope")
    e = DivergenceEvent("p", "p", "f", "c", (1, 2), 2, 0, 5, 6)
    assert e.swapped().t_pt == 6 and e.swapped().t_it == 5


def test_pre_divergence_construction(gated, gated_events):
    late = max(gated_events, key=lambda e: e.position)
    assert late.position >= 1
    e0 = DivergenceEvent("z", "z", "toy", "c", (256, 100), 2, 0, 33, 34)
    col = dv.collect_pre_divergence(gated, [late, e0])
    assert [x["reason"] for x in col.exclusions] == ["skipped_position_zero"]
    (p,) = col.events
    assert p.position == late.position - 1
    assert (p.t_pt, p.t_it) == (late.t_pt, late.t_it)
    assert p.prefix_token_ids == late.prefix_token_ids[:-1]
    assert p.kind == "pre_divergence"
    # the models agree on the actual next token at the pre-divergence site
    a = rt.argmax_real(rt.native_last_logits(gated.pt, p.prefix_token_ids))
    b = rt.argmax_real(rt.native_last_logits(gated.it, p.prefix_token_ids))
    assert a == b == late.prefix_token_ids[-1]


def test_random_disagreements_seeded_and_later(gated, gated_manifest, gated_events):
    man = gated_manifest[:40]
    first = [e for e in gated_events if e.prompt_id in {r.id for r in man}]
    a = dv.collect_random_disagreements(gated, man, "PT", 3, 32, first)
    b = dv.collect_random_disagreements(gated, man, "PT", 3, 32, first)
    assert a == b and a.events
    pos = {e.prompt_id: e.position for e in first}
    for e in a.events:
        assert e.kind == "random_pt_rollout" and e.position > pos[e.prompt_id]
        got = (rt.argmax_real(rt.native_last_logits(gated.pt, e.prefix_token_ids)),
               rt.argmax_real(rt.native_last_logits(gated.it, e.prefix_token_ids)))
        assert got == (e.t_pt, e.t_it)
    assert len(a.events) + len(a.exclusions) == len(man)
    it_roll = dv.collect_random_disagreements(gated, man, "IT", 3, 32, first)
    assert all(e.kind == "random_it_rollout" for e in it_roll.events)


def test_native_history_events(gated, gated_manifest):
    col = dv.collect_native_history(gated, gated_manifest[:60], "IT", (4, 8, 16))
    assert col.events
    for e in col.events:
        assert e.horizon in (4, 8, 16) and e.position == e.horizon
        assert len(e.prefix_token_ids) == e.prompt_length + e.horizon
    res, _ = fx.score_factorial(gated, col.events)
    assert fx.cell_means(res)["interaction"] > 0


def test_prompt_record_defaults():
    r = PromptRecord("x", "c", "s", "t")
    assert r.cluster_id == "x" and r.family == "default"
    with pytest.raises(ValueError):
        PromptRecord.from_dict({"id": "x", "category": "c", "source": "s", "text": ""})

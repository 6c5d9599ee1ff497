import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xpatch import divergence as dv
from xpatch import factorial as fx
from xpatch import runtime as rt
from xpatch import toy
from xpatch.errors import WindowOutOfRange
from xpatch.factorial import FourCellResult, ScaleConversions


@pytest.fixture(scope="module")
def null_pairs():
    out = {}
    for mode in ("late_only", "upstream_only", "identical"):
        pair = toy.gen_toy_pair(mode, seed=11)
        events = dv.collect_first_divergences(pair, toy.toy_manifest({}, 40, seed=11), 16).events
        out[mode] = (pair, events)
    return out


def test_diagonal_cells_equal_native_forwards(gated, small_events):
    for e in small_events[:10]:
        for side in ("PT", "IT"):
            m = gated.model(side)
            logits = rt.native_last_logits(m, e.prefix_token_ids)
            native = float(logits[e.t_it]) - float(logits[e.t_pt])
            assert fx.score_cell(gated, e, side, side, "native") == native


def test_late_only_and_upstream_only_are_exactly_additive(null_pairs):
    pair, events = null_pairs["late_only"]
    assert events
    res, _ = fx.score_factorial(pair, events)
    for r in res:
        assert r.y_pp == r.y_ip and r.y_pi == r.y_ii and r.interaction == 0.0
    pair, events = null_pairs["upstream_only"]
    assert events
    res, _ = fx.score_factorial(pair, events)
    for r in res:
        assert r.y_pp == r.y_pi and r.y_ip == r.y_ii and r.interaction == 0.0


def test_identical_pair_cells_all_equal(null_pairs, gated_events):
    pair, events = null_pairs["identical"]
    assert events == []
    # score the gated events' prefixes under the identical pair
    for e in gated_events[:5]:
        r = fx.four_cells(pair, e)
        assert r.y_pp == r.y_pi == r.y_ip == r.y_ii


def test_planted_missing_margin_sign(gated, target_events):
    assert target_events
    res, _ = fx.score_factorial(gated, target_events)
    assert all(r.y_ii > r.y_pi for r in res)


def test_derived_fields_identities(gated, small_events):
    res, _ = fx.score_factorial(gated, small_events)
    for r in res:
        d = r.to_dict()
        assert d["late_effect_pt_up"] == r.y_pi - r.y_pp
        assert d["late_effect_it_up"] == r.y_ii - r.y_ip
        assert d["interaction"] == d["late_effect_it_up"] - d["late_effect_pt_up"]
        assert FourCellResult.from_dict(d) == r


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 29), st.sampled_from(fx.READOUTS))
def test_label_swap_negates_exactly(gated, small_events, i, readout):
    e = small_events[i]
    a = fx.four_cells(gated, e, readout)
    b = fx.four_cells(gated, e.swapped(), readout)
    assert (b.y_pp, b.y_pi, b.y_ip, b.y_ii) == (-a.y_pp, -a.y_pi, -a.y_ip, -a.y_ii)
    assert b.interaction == -a.interaction


def test_readout_swap_coherence(null_pairs, gated, small_events):
    # the late_only pair perturbs layers only, so both checkpoints share a readout
    pair, events = null_pairs["late_only"]
    a, _ = fx.score_factorial(pair, events, "common_it")
    b, _ = fx.score_factorial(pair, events, "common_pt")
    assert [r.interaction for r in a] == [r.interaction for r in b]
    # with different readouts the diagonal native checks still hold
    for e in small_events[:3]:
        r = fx.four_cells(gated, e, "native")
        assert r.y_pp == fx.score_cell(gated, e, "PT", "PT", "native")
        assert r.y_ii == fx.score_cell(gated, e, "IT", "IT", "native")


def test_unknown_readout():
    with pytest.raises(ValueError):
        fx.reader_for(None, "PT", "lens")


def test_table_conversions():
    # reference late effects and diagonal shift used as arithmetic fixtures
    c = ScaleConversions.from_effects(0.759, 2.439, 4.991)
    assert abs(c.portable_share - 0.311) < 0.001
    assert abs((2.439 - 0.759) - 1.680) < 1e-12
    assert abs(c.interaction_share - 0.337) < 0.001
    assert 5.3 <= c.odds_multiplier <= 5.45
    assert abs(c.matched_portable_ratio - 2.439 / 0.759) < 1e-12


def test_conversion_degenerate_flags():
    c = ScaleConversions.from_effects(0.0, 1.0, 0.0)
    assert c.ratio_degenerate and c.shift_degenerate
    assert math.isnan(c.matched_portable_ratio) and math.isnan(c.interaction_share)
    d = c.to_dict()
    assert d["matched_portable_ratio"] is None and d["odds_multiplier"] == math.e


def test_cell_means_identities(gated, small_events):
    res, _ = fx.score_factorial(gated, small_events)
    m = fx.cell_means(res)
    assert m["interaction"] == m["late_effect_it_up"] - m["late_effect_pt_up"]
    assert m["native_diagonal_shift"] == m["y_ii"] - m["y_pp"]
    np.testing.assert_allclose(m["interaction"], np.mean([r.interaction for r in res]), atol=1e-12)


def test_summarize_shape(gated, small_events):
    res, _ = fx.score_factorial(gated, small_events)
    s = fx.summarize(res, 500, 0)
    assert s["n_events"] == 30
    ci = s["ci"]["interaction"]
    assert ci["ci_lo"] <= ci["mean"] <= ci["ci_hi"]
    assert fx.summarize([], 10) == {"n_events": 0}


def test_score_factorial_logs_bad_events(gated, small_events):
    bad = dv.DivergenceEvent("bad", "bad", "toy", "c", (256, 9999), 2, 0, 33, 34)
    res, err = fx.score_factorial(gated, [bad, *small_events[:2]])
    assert len(res) == 2 and err[0]["event_id"] == bad.event_id and err[0]["error"] == "TokenOutOfRange"


# ---------------------------------------------------------------- stage sweep


def test_stage_sweep_endpoints_and_monotone_lineage(gated, gated_events):
    stages = {"base": gated.pt}
    for t in (0.25, 0.75):
        stages[f"s{t}"] = toy.interpolate(gated.pt, gated.it, t)
    stages["final"] = gated.it
    rows = fx.stage_sweep(gated.pt, gated.it, stages, gated_events)
    assert rows["base"]["interaction"] == 0.0
    assert rows["final"]["percent_of_final"] == 100.0
    seq = [rows[k]["interaction"] for k in ("base", "s0.25", "s0.75", "final")]
    assert all(a <= b for a, b in zip(seq[:-1], seq[1:], strict=True))
    assert rows["final"]["native_top1_rate"] == 1.0


def test_stage_sweep_drops_missing_targets(gated, small_events):
    mask = gated.it.real_token_mask.copy()
    mask[small_events[0].t_it] = False
    from xpatch.model import Checkpoint
    stage = Checkpoint(gated.it.config, gated.it.weights, gated.it.vocab, mask)
    rows = fx.stage_sweep(gated.pt, gated.it, {"odd": stage}, small_events[:5])
    reasons = [d["reason"] for d in rows["odd"]["dropped"]]
    assert "target_token_missing" in reasons
    assert rows["odd"]["n_events"] < 5


# ---------------------------------------------------------------- window substitution


def test_full_window_becomes_donor(gated, small_events):
    m = fx.window_substitution_metrics(gated, small_events, (0, 6), "full_block", "PT")
    assert m["identity_transfer_rate"] == 1.0
    plan = rt.substitute(rt.uniform_plan(gated.pt), gated.it, range(6))
    e = small_events[0]
    assert np.array_equal(rt.forward_plan(e.prefix_token_ids, plan).values,
                          rt.forward_upstream(gated.it, e.prefix_token_ids, 6).values)


def test_empty_window_zero(gated, small_events):
    m = fx.window_substitution_metrics(gated, small_events, (3, 3), "mlp_only", "PT")
    assert m["margin_gain"] == 0.0 and m["identity_transfer_rate"] == 0.0
    with pytest.raises(WindowOutOfRange):
        fx.window_substitution_metrics(gated, small_events, (2, 7))


def test_late_window_gain_is_pt_upstream_late_effect(gated, target_events):
    # the late window in a PT host is the (U_PT, L_IT) cell; without the planted
    # upstream direction it recovers only a fraction of the IT-upstream late effect
    m = fx.window_substitution_metrics(gated, target_events, (4, 6), "full_block", "PT")
    means = fx.cell_means(fx.score_factorial(gated, target_events)[0])
    assert abs(m["margin_gain"] - means["late_effect_pt_up"]) < 1e-9
    assert m["margin_gain"] < 0.5 * means["late_effect_it_up"]


def test_mlp_only_substitution_splices_mlp(gated):
    plan = rt.substitute(rt.uniform_plan(gated.pt), gated.it, [2], "mlp_only")
    assert plan[2] == (gated.pt, gated.it) and plan[1] == (gated.pt, gated.pt)
    with pytest.raises(ValueError):
        rt.substitute(plan, gated.it, [1], "heads")

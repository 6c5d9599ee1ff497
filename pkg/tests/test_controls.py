import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xpatch import controls, toy
from xpatch import divergence as dv
from xpatch import factorial as fx
from xpatch.errors import AlphaOutOfRange


def test_interpolation_endpoints_are_factorial_cells(gated, small_events):
    ev = small_events[:8]
    sweep = controls.interpolation_sweep(gated, ev)
    res, _ = fx.score_factorial(gated, ev)
    per = sweep["per_event"]
    assert per[:, 0].tolist() == [r.late_effect_pt_up for r in res]
    assert per[:, -1].tolist() == [r.late_effect_it_up for r in res]
    assert len(sweep["mean_late_effect"]) == 5


def test_interpolation_slope_on_linear_late_stack(gated, small_events, monkeypatch):
    # a late stack whose margin is linear in the boundary state makes D(alpha) exactly linear
    w = np.linspace(-1.0, 1.0, 64)

    def linear_margin(pair, states, late, readout, t_pt, t_it, boundary=None, mlp_hook=None):
        u = states.values if hasattr(states, "values") else states
        gain = 2.5 if late == "IT" else 0.5
        return gain * float(u[-1].astype(np.float64) @ w)

    monkeypatch.setattr(fx, "late_margin", linear_margin)
    sweep = controls.interpolation_sweep(gated, small_events[:6], alphas=[0, 0.1, 0.3, 0.6, 1])
    assert abs(sweep["slope"] - sweep["endpoint_difference"]) < 1e-6


def test_interpolation_alpha_validation(gated, small_events):
    with pytest.raises(AlphaOutOfRange):
        controls.interpolation_sweep(gated, small_events[:2], alphas=[0, 1.5, 1])
    with pytest.raises(AlphaOutOfRange):
        controls.interpolation_sweep(gated, small_events[:2], alphas=[0, 0.5])


def test_mix_states_endpoints():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = a + 1
    assert controls.mix_states(a, b, 0.0) is a and controls.mix_states(a, b, 1.0) is b
    np.testing.assert_array_equal(controls.mix_states(a, b, 0.5), a + 0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 16)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)), st.integers(0, 2**32 - 1))
def test_signed_permutation_preserves_norms(delta, seed):
    out = controls.signed_permutation(delta, np.random.default_rng(seed))
    # a permutation with sign flips preserves the multiset of absolute values, hence the norm, exactly
    assert np.array_equal(np.sort(np.abs(out), axis=1), np.sort(np.abs(delta), axis=1))


def test_signed_permutation_identity_draw_reproduces_observed(gated, small_events):
    ev = small_events[:6]
    r = controls.signed_permutation_null(gated, ev, 0, 2, transform=lambda d, rng: d)
    assert r["null_draw_means"] == [r["observed_interaction"]] * 2
    assert r["ratio"] == 1.0


def test_signed_permutation_zero_delta_degenerate():
    pair = toy.gen_toy_pair("late_only", seed=11)
    ev = dv.collect_first_divergences(pair, toy.toy_manifest({}, 20, seed=11), 16).events[:5]
    assert ev
    r = controls.signed_permutation_null(pair, ev, 0, 3)
    assert r["observed_interaction"] == 0.0 and r["null_mean"] == 0.0
    assert r["degenerate_observed"] and math.isnan(r["ratio"])


def test_signed_permutation_draws_are_reproducible(gated, small_events):
    ev = small_events[:4]
    a = controls.signed_permutation_null(gated, ev, 5, 3)
    b = controls.signed_permutation_null(gated, ev[::-1], 5, 3)
    assert a == b


def test_pre_late_commitment_contracts(gated, gated_events):
    res, _ = fx.score_factorial(gated, gated_events)
    out = controls.pre_late_commitment(gated, gated_events, results=res)
    by_id = {r.event_id: r for r in res}
    margins = {e.event_id: controls.boundary_margin(gated, e) for e in gated_events}
    kept = [by_id[k].interaction for k, m in margins.items() if m <= 0]
    assert out["n_uncommitted"] == len(kept)
    assert out["interaction_uncommitted"] == pytest.approx(float(np.mean(kept)), abs=1e-12)
    assert out["interaction_uncommitted"] > 0
    assert sum(b["n"] for b in out["bins"]) == len(gated_events) and len(out["bins"]) == 5
    assert out["linear_control"] is not None
    committed = [e for e in gated_events if margins[e.event_id] > 0]
    flagged = controls.pre_late_commitment(gated, committed)
    assert flagged["empty_subset"] and flagged["interaction_uncommitted"] is None


def test_boundary_margin_at_full_depth_is_native(gated, small_events):
    import xpatch.runtime as rt
    e = small_events[0]
    logits = rt.native_last_logits(gated.it, e.prefix_token_ids)
    assert controls.boundary_margin(gated, e, boundary=6) == float(logits[e.t_it]) - float(logits[e.t_pt])


def test_selection_baselines_shape(gated, gated_manifest, gated_events):
    man = gated_manifest[:30]
    ids = {r.id for r in man}
    first = [e for e in gated_events if e.prompt_id in ids]
    out = controls.selection_baselines(gated, man, first, seed=1, max_new=32, horizons=(4, 8), n_boot=200)
    assert set(out) == {"first_divergence", "pre_divergence", "random_pt_rollout", "random_it_rollout",
                        "native_history_it", "native_history_pt"}
    assert out["first_divergence"]["n_events"] == len(first)
    row = out["random_pt_rollout"]
    assert row["n_events"] + row["n_excluded"] == len(man)

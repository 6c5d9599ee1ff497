import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xpatch import crosscoder as cx
from xpatch import divergence as dv
from xpatch import factorial as fx
from xpatch import geometry as gm
from xpatch import toy
from xpatch.errors import EmptyInput, RankExceedsFit
from xpatch.model import PairedCheckpoints


@pytest.fixture(scope="module")
def shift_split(shift_pair):
    man = toy.toy_manifest(shift_pair.info, 120, 3)
    events = dv.collect_first_divergences(shift_pair, man, 32).events
    train, held = cx.split_by_cluster(events, 0.3, 0)
    return train, held


@pytest.fixture(scope="module")
def shift_fit(shift_pair, shift_split):
    return gm.fit_boundary_pca(shift_pair, shift_split[0])


def test_constant_shift_gives_one_component():
    v = np.array([3.0, -4.0, 0.0])
    fit = gm.pca_from_samples(np.tile(v, (10, 1)))
    assert fit.components.shape == (1, 3)
    np.testing.assert_allclose(fit.components[0], v / 5.0, atol=1e-12)  # first coordinate already positive
    np.testing.assert_allclose(gm.pca_from_samples(np.tile(-v, (10, 1))).components[0], v / 5.0, atol=1e-12)
    np.testing.assert_allclose(fit.mean, v)
    assert fit.variances[0] == pytest.approx(25.0)


def test_sign_convention():
    out = gm.sign_convention(np.array([[0.0, -1.0, 2.0], [1e-13, 2.0, 0.0]]))
    assert out.tolist() == [[0.0, 1.0, -2.0], [1e-13, 2.0, 0.0]]


def test_identical_pair_has_no_components(gated, small_events):
    pair = PairedCheckpoints(gated.pt, gated.pt)
    fit = gm.fit_boundary_pca(pair, small_events[:5])
    assert fit.components.shape[0] == 0 and not np.any(fit.mean)
    with pytest.raises(RankExceedsFit):
        fit.basis(1)


def test_planted_subspace_recovered(shift_pair, shift_fit):
    angles = gm.principal_angles(shift_fit.components[:2], np.asarray(shift_pair.info["subspace"]).T)
    assert angles.max() < 5.0


def test_rank_two_closes_and_controls_do_not(shift_pair, shift_split, shift_fit):
    held = shift_split[1]
    r2 = gm.closure_test(shift_pair, held, shift_fit, 2)
    assert r2.closure_fraction >= 0.95 and not r2.degenerate
    gauss = gm.closure_test(shift_pair, held, shift_fit, 8, "gaussian_full")
    rand = gm.closure_test(shift_pair, held, shift_fit, 8, "random_full")
    assert abs(gauss.closure_fraction) < 0.2 and abs(rand.closure_fraction) < 0.2
    flip = gm.closure_test(shift_pair, held, shift_fit, 8, "sign_flip_full")
    assert flip.rescued_margin <= flip.floor_margin


def test_full_delta_is_exact(shift_pair, shift_split, shift_fit):
    r = gm.closure_test(shift_pair, shift_split[1], shift_fit, 0, "full_delta")
    assert r.rescued_margin == r.native_margin and r.closure_fraction == 1.0
    full = gm.closure_test(shift_pair, shift_split[1], shift_fit, shift_fit.d_model)
    assert full.rescued_margin == r.native_margin


def test_rank_zero_without_mean_is_floor(shift_pair, shift_split, shift_fit):
    held = shift_split[1]
    r = gm.closure_test(shift_pair, held, shift_fit, 0, include_mean=False)
    assert r.rescued_margin == r.floor_margin and r.closure_fraction == 0.0
    floor = np.mean([fx.score_cell(shift_pair, e, "PT", "IT", "common_it")
                     for e in sorted(held, key=dv.DivergenceEvent.sort_key)])
    assert r.floor_margin == pytest.approx(floor, abs=1e-12)


def test_rank_exceeds_fit(shift_pair, shift_split):
    small = gm.fit_boundary_pca(shift_pair, shift_split[0][:3])
    assert small.components.shape[0] <= 3
    with pytest.raises(RankExceedsFit):
        gm.closure_test(shift_pair, shift_split[1], small, 4)
    with pytest.raises(EmptyInput):
        gm.closure_test(shift_pair, [], small, 1)
    with pytest.raises(ValueError):
        gm.closure_test(shift_pair, shift_split[1], small, 1, "bogus")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_is_basis_invariant(seed):
    # rotating the fitted basis within its span leaves the rank-k injection unchanged
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((12, 2)) @ rng.standard_normal((2, 6)) + 0.01 * rng.standard_normal((12, 6))
    fit = gm.pca_from_samples(X)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    rot = gm.BoundaryPCA(0, fit.mean, q @ fit.components[:3], fit.variances[:3], fit.coord_variance, fit.n_samples)
    delta = rng.standard_normal((4, 6))
    a = gm.injection(fit, delta, 3, "none", True, rng)
    b = gm.injection(rot, delta, 3, "none", True, rng)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_injection_full_rank_identity():
    rng = np.random.default_rng(0)
    fit = gm.pca_from_samples(rng.standard_normal((20, 4)))
    delta = rng.standard_normal((3, 4))
    assert np.array_equal(gm.injection(fit, delta, 4, "none", True, rng), delta)
    np.testing.assert_allclose(gm.injection(fit, delta, fit.components.shape[0], "none", True, rng), delta, atol=1e-12)


def test_principal_angles():
    a = np.eye(3)[:2]
    assert gm.principal_angles(a, a).max() < 1e-6
    assert gm.principal_angles(np.eye(3)[:1], np.eye(3)[1:2])[0] == pytest.approx(90.0)


def test_save_load_round_trip(shift_fit, tmp_path):
    gm.save_pca(shift_fit, tmp_path / "p.xpca")
    back = gm.load_pca(tmp_path / "p.xpca")
    assert back.boundary == shift_fit.boundary and back.n_samples == shift_fit.n_samples
    for name in ("mean", "components", "variances", "coord_variance"):
        np.testing.assert_allclose(getattr(back, name), getattr(shift_fit, name), rtol=1e-6, atol=1e-6)


def test_closure_table_rows(shift_pair, shift_split, shift_fit):
    rows = gm.closure_table(shift_pair, shift_split[1][:5], shift_fit, ranks=(0, 2))
    assert [(r.rank, r.control) for r in rows] == [(0, "none"), (2, "none")] + [(2, c) for c in gm.CONTROLS[1:]]
    assert rows[0].to_dict()["boundary"] == shift_fit.boundary

import math

import numpy as np
import pytest
from conftest import tiny_checkpoint, tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st

from xpatch import runtime as rt
from xpatch import toy
from xpatch.errors import (
    BadMagic,
    BoundaryMismatch,
    BoundaryOutOfRange,
    DimMismatch,
    InvalidSpec,
    PairMismatch,
    ShapeMismatch,
    TokenOutOfRange,
    TruncatedPayload,
    ValidationError,
    VocabMaskInvalid,
)
from xpatch.model import (
    Checkpoint,
    ModelConfig,
    PairedCheckpoints,
    default_boundary,
    load_checkpoint,
    save_checkpoint,
    validate_pair,
)

# ---------------------------------------------------------------- config and container


def test_default_boundary_rounds_half_up():
    assert [default_boundary(n) for n in (2, 4, 5, 6, 10, 34, 36, 48)] == [1, 2, 3, 4, 6, 20, 22, 29]
    assert ModelConfig(n_layers=6, d_model=8, n_heads=2, n_kv_heads=1, d_ff=4, vocab_size=4).late_boundary == 4


@pytest.mark.parametrize("kw", [dict(late_boundary=2), dict(d_model=5), dict(n_kv_heads=3, n_heads=2),
                                dict(n_layers=0), dict(norm_eps=0.0)])
def test_config_invariants(kw):
    with pytest.raises(ValidationError):
        tiny_config(**kw)


def test_checkpoint_round_trip(tmp_path):
    ck = tiny_checkpoint(seed=3)
    path = tmp_path / "m.xpck"
    h = save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.equals(ck)
    assert back.content_hash == ck.content_hash == h
    assert all(v.dtype == np.float32 for v in back.weights.values())
    assert path.read_bytes()[:8] == b"XPCK0001"


def test_shape_off_by_one_names_tensor(tmp_path):
    ck = tiny_checkpoint()
    w = dict(ck.weights)
    w["layers.1.mlp.w_up"] = np.zeros((4, 4), np.float32)
    with pytest.raises(ShapeMismatch, match="layers.1.mlp.w_up"):
        Checkpoint(ck.config, w, ck.vocab, ck.real_token_mask)
    # the same defect in a file is caught at load time
    from xpatch import container
    meta = {"config": ck.config.to_dict(), "vocab": ck.vocab, "real_token_mask": ck.real_token_mask.tolist()}
    container.write(tmp_path / "bad.xpck", container.CHECKPOINT_MAGIC, meta, w)
    with pytest.raises(ShapeMismatch, match="layers.1.mlp.w_up"):
        load_checkpoint(tmp_path / "bad.xpck")


def test_bad_magic_and_truncation(tmp_path):
    ck = tiny_checkpoint()
    data = ck.to_bytes()
    (tmp_path / "a").write_bytes(b"NOTMAGIC" + data[8:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "a")
    (tmp_path / "b").write_bytes(data[:-4])
    with pytest.raises(TruncatedPayload):
        load_checkpoint(tmp_path / "b")
    (tmp_path / "c").write_bytes(data[:20])
    with pytest.raises(TruncatedPayload):
        load_checkpoint(tmp_path / "c")


def test_vocab_mask_invalid():
    with pytest.raises(VocabMaskInvalid):
        tiny_checkpoint(mask=np.array([True, False, False, False, False, False]))
    ck = tiny_checkpoint()
    with pytest.raises(VocabMaskInvalid):
        Checkpoint(ck.config, ck.weights, ck.vocab[:-1], ck.real_token_mask)


def test_pair_validation():
    a = tiny_checkpoint(seed=1)
    b = tiny_checkpoint(seed=2)
    validate_pair(a, b)
    c = Checkpoint(b.config, b.weights, [f"x{i}" for i in range(6)], b.real_token_mask)
    with pytest.raises(PairMismatch):
        validate_pair(a, c)
    m = b.real_token_mask.copy()
    m[0] = False
    with pytest.raises(PairMismatch):
        PairedCheckpoints(a, Checkpoint(b.config, b.weights, b.vocab, m))


def test_toy_pair_loads_and_validates(tmp_path):
    cfg = ModelConfig(n_layers=4, d_model=64, n_heads=4, n_kv_heads=2, d_ff=128, vocab_size=264)
    pair = toy.gen_toy_pair("late_only", cfg, seed=5)
    hashes = [save_checkpoint(pair.pt, tmp_path / "pt"), save_checkpoint(pair.it, tmp_path / "it")]
    pt, it = load_checkpoint(tmp_path / "pt"), load_checkpoint(tmp_path / "it")
    validate_pair(pt, it)
    assert [pt.content_hash, it.content_hash] == hashes
    assert hashes[0] != hashes[1]


# ---------------------------------------------------------------- scalar oracle


def _oracle_one_layer(ck, token):
    """Plain-float recomputation of embedding plus one block for a single token.

    With one position, RoPE is the identity and softmax attention puts weight 1
    on the token itself, so attention reduces to ``v @ wo``.
    """
    cfg = ck.config
    W = {k: v.astype(np.float64).tolist() for k, v in ck.weights.items()}
    x = list(W["embed"][token])
    d = cfg.d_model

    def rms(v, g):
        ms = sum(t * t for t in v) / len(v)
        return [v[i] / math.sqrt(ms + cfg.norm_eps) * g[i] for i in range(len(v))]

    def matvec(v, M):
        return [sum(v[i] * M[i][j] for i in range(len(v))) for j in range(len(M[0]))]

    p = "layers.0."
    n1 = rms(x, W[p + "norm_attn"])
    v = matvec(n1, W[p + "attn.wv"])  # (n_kv * hd)
    hd, rep = cfg.head_dim, cfg.n_heads // cfg.n_kv_heads
    heads = []
    for h in range(cfg.n_heads):
        kv = h // rep
        heads.extend(v[kv * hd:(kv + 1) * hd])
    attn = matvec(heads, W[p + "attn.wo"])
    h1 = [x[i] + attn[i] for i in range(d)]
    n2 = rms(h1, W[p + "norm_mlp"])
    g = matvec(n2, W[p + "mlp.w_gate"])
    u = matvec(n2, W[p + "mlp.w_up"])
    act = [g[j] / (1.0 + math.exp(-g[j])) * u[j] for j in range(len(g))]
    m = matvec(act, W[p + "mlp.w_down"])
    return [h1[i] + m[i] for i in range(d)]


def test_one_block_matches_scalar_oracle():
    ck = tiny_checkpoint(seed=11)
    for tok in range(ck.config.vocab_size):
        got = rt.forward_upstream(ck, [tok], 1).values[0]
        np.testing.assert_allclose(got, _oracle_one_layer(ck, tok), atol=1e-6, rtol=0)


def test_greedy_first_token_matches_oracle():
    # second block zeroed so the network is a single block followed by the readout
    ck0 = tiny_checkpoint(seed=12)
    zero = {"layers.1.attn.wo": np.zeros((4, 4)), "layers.1.mlp.w_down": np.zeros((3, 4))}
    ck = ck0.replace_weights(zero)
    h = np.array(_oracle_one_layer(ck, 2))
    fn = ck.weights["final_norm"].astype(np.float64)
    z = h / np.sqrt(np.mean(h * h) + ck.config.norm_eps) * fn
    logits = z @ ck.weights["lm_head"].astype(np.float64)
    logits[~ck.real_token_mask] = -np.inf
    assert rt.greedy_rollout(ck, [2], 1) == [int(np.argmax(logits))]


def test_constant_logits_tie_breaks_to_lowest_real_id():
    ck = tiny_checkpoint(seed=4, mask=np.array([False, True, True, True, True, False]))
    ck = ck.replace_weights({"lm_head": np.zeros((4, 6))})
    assert rt.greedy_rollout(ck, [0, 3], 5) == [1] * 5


# ---------------------------------------------------------------- forward contracts


def test_boundary_zero_is_embedding(gated):
    toks = [256, 104, 105]
    s = rt.forward_upstream(gated.pt, toks, 0)
    assert np.array_equal(s.values, gated.pt.weights["embed"][toks])
    assert s.produced_at_layer == 0


def test_forward_determinism(gated):
    toks = [256, 104, 105, 33]
    a = rt.forward_upstream(gated.it, toks, 6).values
    b = rt.forward_upstream(gated.it, toks, 6).values
    assert np.array_equal(a, b)


def test_forward_errors(gated):
    with pytest.raises(TokenOutOfRange):
        rt.forward_upstream(gated.pt, [0, 264], 2)
    with pytest.raises(TokenOutOfRange):
        rt.forward_upstream(gated.pt, [], 2)
    with pytest.raises(BoundaryOutOfRange):
        rt.forward_upstream(gated.pt, [1], 7)
    s = rt.forward_upstream(gated.pt, [1, 2], 3)
    with pytest.raises(BoundaryMismatch):
        rt.forward_late(gated.pt, s, 4)
    with pytest.raises(DimMismatch):
        rt.readout(np.zeros((2, 5), np.float32), gated.pt)


def test_last_layer_boundary_applies_one_block(gated):
    m, toks = gated.pt, [256, 120, 121, 122]
    s = rt.forward_upstream(m, toks, 5)
    late = rt.forward_late(m, s, 5)
    lw = m.layers[5]
    cos, sin = rt.rope_tables(m.config, len(toks))
    expect = rt.block(s.values, lw, lw, m.config, cos, sin, 5)
    assert np.array_equal(late.values, expect)


def test_zero_states_give_finite_outputs(gated):
    s = rt.ResidualStates(np.zeros((5, 64), np.float32), 4)
    out = rt.forward_late(gated.it, s, 4)
    assert np.isfinite(out.values).all()
    assert np.isfinite(rt.readout(out, gated.it, mask_real_tokens=False)).all()


def test_readout_contracts(gated):
    toks = [256, 100, 101, 102]
    full = rt.forward_upstream(gated.pt, toks, 6)
    raw = rt.readout(full, gated.pt, mask_real_tokens=False)
    masked = rt.readout(full, gated.pt, mask_real_tokens=True)
    real = gated.pt.real_token_mask
    assert np.array_equal(raw[:, real], masked[:, real])
    assert np.all(np.isneginf(masked[:, ~real]))
    real_ids = np.flatnonzero(real)
    assert np.array_equal(np.argmax(masked, axis=1), real_ids[np.argmax(raw[:, real], axis=1)])
    twin = gated.it.replace_weights({"final_norm": gated.pt.weights["final_norm"],
                                     "lm_head": gated.pt.weights["lm_head"]})
    assert np.array_equal(rt.readout(full, twin), masked)


def test_greedy_rollout_deterministic(gated):
    a = rt.greedy_rollout(gated.it, [256, 104, 105], 8)
    assert a == rt.greedy_rollout(gated.it, [256, 104, 105], 8)
    assert len(a) == 8 and all(gated.it.real_token_mask[t] for t in a)
    with pytest.raises(ValueError):
        rt.greedy_rollout(gated.it, [256], 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 263), min_size=1, max_size=12), st.integers(0, 6), st.sampled_from(["PT", "IT"]))
def test_split_forward_is_bit_identical(gated, toks, b, side):
    m = gated.model(side)
    whole = rt.forward_upstream(m, toks, m.config.n_layers).values
    split = rt.forward_late(m, rt.forward_upstream(m, toks, b), b).values
    assert np.array_equal(whole, split)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 263), min_size=1, max_size=10))
def test_masked_readout_keeps_real_logits(gated, toks):
    full = rt.forward_upstream(gated.it, toks, 6)
    a = rt.readout(full, gated.pt, False)
    b = rt.readout(full, gated.pt, True)
    real = gated.pt.real_token_mask
    assert np.array_equal(a[:, real], b[:, real])


# ---------------------------------------------------------------- toy generator


def test_toy_modes_structure():
    cfg = toy.TOY_CONFIG
    b = cfg.late_boundary
    ident = toy.gen_toy_pair("identical", seed=1)
    assert all(np.array_equal(ident.pt.weights[k], ident.it.weights[k]) for k in ident.pt.weights)
    for mode, changed in (("late_only", range(b, cfg.n_layers)), ("upstream_only", range(b))):
        pair = toy.gen_toy_pair(mode, seed=1)
        for k in pair.pt.weights:
            diff = float(np.linalg.norm(pair.pt.weights[k] - pair.it.weights[k]))
            layer = int(k.split(".")[1]) if k.startswith("layers.") else None
            if layer is not None and layer in changed:
                assert diff > 0, k
            else:
                assert diff == 0, k
    with pytest.raises(InvalidSpec):
        toy.gen_toy_pair("bogus")


def test_interpolate_endpoints_exact(gated):
    assert toy.interpolate(gated.pt, gated.it, 0.0).equals(gated.pt)
    assert toy.interpolate(gated.pt, gated.it, 1.0).equals(gated.it)
    mid = toy.interpolate(gated.pt, gated.it, 0.5)
    k = "lm_head"
    expect = (0.5 * gated.pt.weights[k].astype(np.float64) + 0.5 * gated.it.weights[k]).astype(np.float32)
    assert np.array_equal(mid.weights[k], expect)

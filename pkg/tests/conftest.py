import numpy as np
import pytest

from xpatch import divergence as dv
from xpatch import toy
from xpatch.model import Checkpoint, ModelConfig

GATED_SEED = 7
N_PROMPTS = 200
MAX_NEW = 32


@pytest.fixture(scope="session")
def gated():
    return toy.gen_toy_pair("gated_coupling", seed=GATED_SEED)


@pytest.fixture(scope="session")
def gated_manifest(gated):
    return toy.toy_manifest(gated.info, N_PROMPTS, GATED_SEED)


@pytest.fixture(scope="session")
def gated_collection(gated, gated_manifest):
    return dv.collect_first_divergences(gated, gated_manifest, MAX_NEW)


@pytest.fixture(scope="session")
def gated_events(gated_collection):
    return gated_collection.events


@pytest.fixture(scope="session")
def small_events(gated_events):
    """A fixed 30-event subset for the slower per-event analyses."""
    return gated_events[:30]


@pytest.fixture(scope="session")
def target_events(gated, gated_events):
    return [e for e in gated_events if e.t_it == gated.info["target"]]


@pytest.fixture(scope="session")
def shift_pair():
    return toy.gen_planted_shift_pair(seed=3)


def tiny_config(**kw):
    base = dict(n_layers=2, d_model=4, n_heads=2, n_kv_heads=1, d_ff=3, vocab_size=6, late_boundary=1)
    base.update(kw)
    return ModelConfig(**base)


def tiny_checkpoint(weights=None, seed=0, mask=None, **kw):
    cfg = tiny_config(**kw)
    rng = np.random.default_rng(seed)
    w = {k: (0.5 * rng.standard_normal(s)).astype(np.float32) for k, s in cfg.tensor_shapes().items()}
    for k in w:
        if "norm" in k:
            w[k] = (1.0 + 0.1 * rng.standard_normal(w[k].shape)).astype(np.float32)
    w.update(weights or {})
    vocab = [f"t{i}" for i in range(cfg.vocab_size)]
    if mask is None:
        mask = np.ones(cfg.vocab_size, dtype=bool)
        mask[-1] = False
    return Checkpoint(cfg, w, vocab, mask, name="tiny")


# ---------------------------------------------------------------- acceptance summary lines

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(n: int, name: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE[n] = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(_ACCEPTANCE[n])

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])

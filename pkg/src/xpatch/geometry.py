"""Boundary-state closure: PCA of descendant-minus-base boundary shifts and
rank-k injection into the weak (U_PT, L_IT) hybrid.

The PCA is uncentered (an SVD of the raw shifts), so a constant shift yields
one component along it.  The mean shift is kept separately and, by default,
added back during injection.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import factorial as fx
from .divergence import DivergenceEvent
from .errors import EmptyInput, RankExceedsFit
from .model import PairedCheckpoints

CONTROLS = ("none", "gaussian_full", "random_full", "sign_flip_full", "full_delta")
DEGENERATE_GAP = 0.25
ZERO_VARIANCE = 1e-12


@dataclass
class BoundaryPCA:
    boundary: int
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (n_components, d), rows orthonormal
    variances: np.ndarray  # (n_components,)
    coord_variance: np.ndarray  # (d,) per-coordinate variance of the train shifts
    n_samples: int
    meta: dict = field(default_factory=dict)

    @property
    def d_model(self) -> int:
        return self.mean.shape[0]

    @property
    def rank_deficient(self) -> bool:
        return self.n_samples < self.components.shape[0] or self.meta.get("requested_rank", 0) > self.n_samples

    def basis(self, rank: int) -> np.ndarray:
        if rank > self.components.shape[0] and rank != self.d_model:
            raise RankExceedsFit(f"rank {rank} exceeds the {self.components.shape[0]} fitted components")
        return self.components[:rank]


def sign_convention(vectors: np.ndarray) -> np.ndarray:
    """Flip rows so that the first coordinate with |x| > 1e-12 is positive."""
    out = vectors.copy()
    for i, row in enumerate(out):
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            out[i] = -row
    return out


def boundary_deltas(pair: PairedCheckpoints, event: DivergenceEvent, boundary: int):
    up = fx.boundary_states(pair, event.prefix_token_ids, boundary)
    u_pt = up["PT"].values
    return u_pt, up["IT"].values, up["IT"].values.astype(np.float64) - u_pt.astype(np.float64)


def fit_boundary_pca(pair: PairedCheckpoints, train_events, boundary: int | None = None, positions: str = "event",
                     requested_rank: int = 0) -> BoundaryPCA:
    """Fit on U_IT - U_PT at each train event's own position (``positions="all"`` uses every prefix position)."""
    b = pair.config.late_boundary if boundary is None else boundary
    rows = []
    for e in sorted(train_events, key=DivergenceEvent.sort_key):
        _, _, delta = boundary_deltas(pair, e, b)
        rows.append(delta if positions == "all" else delta[-1:])
    if not rows:
        raise EmptyInput("no train events")
    X = np.vstack(rows)
    return pca_from_samples(X, b, requested_rank)


def pca_from_samples(X: np.ndarray, boundary: int = 0, requested_rank: int = 0) -> BoundaryPCA:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    var = s ** 2 / n
    keep = var > ZERO_VARIANCE
    comps = sign_convention(vt[keep])
    return BoundaryPCA(boundary, X.mean(axis=0), comps, var[keep], X.var(axis=0), n,
                       {"requested_rank": int(requested_rank)})


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles in degrees between the row spaces of ``a`` and ``b``."""
    qa, _ = np.linalg.qr(np.asarray(a, float).T)
    qb, _ = np.linalg.qr(np.asarray(b, float).T)
    s = np.clip(np.linalg.svd(qa.T @ qb, compute_uv=False), -1.0, 1.0)
    return np.degrees(np.arccos(s))


def save_pca(fit: BoundaryPCA, path) -> str:
    meta = {"boundary": fit.boundary, "n_samples": fit.n_samples, "meta": fit.meta}
    tensors = {"mean": fit.mean, "components": fit.components, "variances": fit.variances,
               "coord_variance": fit.coord_variance}
    return container.write(path, container.PCA_MAGIC, meta, tensors)


def load_pca(path) -> BoundaryPCA:
    header, t = container.read(path, container.PCA_MAGIC)
    return BoundaryPCA(int(header["boundary"]), t["mean"].astype(np.float64), t["components"].astype(np.float64),
                       t["variances"].astype(np.float64), t["coord_variance"].astype(np.float64),
                       int(header["n_samples"]), header.get("meta", {}))


# ---------------------------------------------------------------- closure


@dataclass(frozen=True)
class ClosureResult:
    boundary: int
    rank: int
    control: str
    floor_margin: float
    native_margin: float
    rescued_margin: float
    closure_fraction: float
    degenerate: bool
    include_mean: bool
    n_events: int

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isnan(d["closure_fraction"]):
            d["closure_fraction"] = None
        return d


def injection(fit: BoundaryPCA, delta: np.ndarray, rank: int, control: str, include_mean: bool,
              rng: np.random.Generator) -> np.ndarray:
    """The vector added to U_PT at every position, in float64."""
    if control == "full_delta":
        return delta
    if control == "sign_flip_full":
        return -delta
    if control == "gaussian_full":
        return rng.standard_normal(delta.shape) * np.sqrt(fit.coord_variance)
    if control == "random_full":
        r = rng.standard_normal(delta.shape)
        return r * (np.linalg.norm(delta, axis=1, keepdims=True) / np.linalg.norm(r, axis=1, keepdims=True))
    if control != "none":
        raise ValueError(f"unknown control {control!r}")
    if rank == fit.d_model:
        # full-rank projection is the identity: mean + (delta - mean) = delta
        return delta if include_mean else delta - fit.mean
    V = fit.basis(rank)
    centred = delta - fit.mean if include_mean else delta
    proj = (centred @ V.T) @ V
    return proj + fit.mean if include_mean else proj


def closure_test(pair: PairedCheckpoints, events, fit: BoundaryPCA, rank: int, control: str = "none",
                 readout: str = "common_it", include_mean: bool = True, seed: int = 0) -> ClosureResult:
    if control not in CONTROLS:
        raise ValueError(f"unknown control {control!r}")
    b = fit.boundary
    if control == "none" and rank != fit.d_model:
        fit.basis(rank)
    floor, native, rescued = [], [], []
    events = sorted(events, key=DivergenceEvent.sort_key)
    if not events:
        raise EmptyInput("no held-out events")
    for e in events:
        u_pt, u_it, delta = boundary_deltas(pair, e, b)
        y_pi = fx.late_margin(pair, u_pt, "IT", readout, e.t_pt, e.t_it, b)
        y_ii = fx.late_margin(pair, u_it, "IT", readout, e.t_pt, e.t_it, b)
        rng = np.random.default_rng([int(seed), zlib.crc32(e.event_id.encode("utf-8")), CONTROLS.index(control)])
        if control == "none" and rank == 0 and not include_mean:
            u_new = u_pt
        else:
            shift = injection(fit, delta, rank, control, include_mean, rng)
            u_new = (u_pt.astype(np.float64) + shift).astype(np.float32)
        floor.append(y_pi)
        native.append(y_ii)
        rescued.append(fx.late_margin(pair, u_new, "IT", readout, e.t_pt, e.t_it, b))
    f, n, r = float(np.mean(floor)), float(np.mean(native)), float(np.mean(rescued))
    degenerate = abs(n - f) < DEGENERATE_GAP
    frac = (r - f) / (n - f) if n != f else math.nan
    return ClosureResult(b, int(rank), control, f, n, r, frac, degenerate, include_mean, len(events))


def closure_table(pair, events, fit, ranks=(0, 1, 2, 4, 8), controls=CONTROLS, readout="common_it", seed=0):
    rows = []
    top = max(ranks)
    for k in ranks:
        rows.append(closure_test(pair, events, fit, k, "none", readout, True, seed))
    for c in controls:
        if c != "none":
            rows.append(closure_test(pair, events, fit, top, c, readout, True, seed))
    return rows

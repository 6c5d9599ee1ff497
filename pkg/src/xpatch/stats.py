"""Cluster bootstrap intervals, family-balanced centers and sign-flip nulls.

All resampling uses numpy's PCG64 generator.  A draw is a row of one
seeded stream, so rerunning with the same seed and input shape reproduces
every draw.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput

DEFAULT_RESAMPLES = 10_000
DEFAULT_PERMS = 19_999
_CHUNK = 2_000


@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    ci_lo: float
    ci_hi: float
    n_clusters: int
    n_values: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi,
                "n_clusters": self.n_clusters, "n_values": self.n_values}

    def excludes_zero(self) -> bool:
        return self.ci_lo > 0 or self.ci_hi < 0


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def bootstrap_means(values, clusters, n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0,
                    strata=None) -> tuple[float, np.ndarray]:
    """Point estimate and the resampled means.

    Clusters are resampled with replacement (within each stratum when
    ``strata`` is given).  Without strata each draw is the pooled mean of all
    member values; with strata it is the unweighted mean of stratum means.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyInput("no values to bootstrap")
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    clusters = np.asarray([str(c) for c in clusters])
    if clusters.shape != values.shape:
        raise ValueError("values and clusters must align")
    rng = _rng(seed)
    if strata is None:
        groups = {"": np.ones(values.size, dtype=bool)}
    else:
        strata = np.asarray([str(s) for s in strata])
        groups = {s: strata == s for s in sorted(set(strata.tolist()))}
    point_parts = []
    draw_parts = []
    for _, sel in groups.items():
        uniq, inv = np.unique(clusters[sel], return_inverse=True)
        sums = np.bincount(inv, weights=values[sel])
        counts = np.bincount(inv).astype(np.float64)
        c = uniq.size
        point_parts.append(sums.sum() / counts.sum())
        draws = np.empty(n_resamples)
        for start in range(0, n_resamples, _CHUNK):
            stop = min(start + _CHUNK, n_resamples)
            idx = rng.integers(0, c, size=(stop - start, c))
            draws[start:stop] = sums[idx].sum(axis=1) / counts[idx].sum(axis=1)
        draw_parts.append(draws)
    if len(point_parts) == 1:
        return float(point_parts[0]), draw_parts[0]
    return float(np.mean(point_parts)), np.mean(np.vstack(draw_parts), axis=0)


def cluster_bootstrap(values, clusters, n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0,
                      level: float = 0.95, strata=None) -> BootstrapResult:
    """Percentile cluster-bootstrap interval for a mean."""
    point, draws = bootstrap_means(values, clusters, n_resamples, seed, strata)
    lo, hi = np.quantile(draws, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    return BootstrapResult(point, float(lo), float(hi), len(set(map(str, clusters))), len(values))


def family_balanced_mean(per_family: Mapping[str, float] | Sequence[float]) -> dict:
    """Unweighted mean of family means, with min / max / median."""
    vals = list(per_family.values()) if isinstance(per_family, Mapping) else list(per_family)
    if not vals:
        raise EmptyInput("no families")
    vals = sorted(float(v) for v in vals)
    return {
        "mean": math.fsum(vals) / len(vals),
        "min": vals[0],
        "max": vals[-1],
        "median": float(np.median(vals)),
        "n_families": len(vals),
    }


def sign_flip_p(observed: float, null: np.ndarray) -> float:
    """One-sided p with a +1 correction; exact ties with the observed value count one half."""
    null = np.asarray(null)
    greater = np.count_nonzero(null > observed)
    ties = np.count_nonzero(null == observed)
    return (1.0 + greater + 0.5 * ties) / (1.0 + null.size)


def label_swap_null(interactions, n_perms: int = DEFAULT_PERMS, seed: int = 0) -> dict:
    """Sign-flip null for the mean interaction.

    Swapping an event's ``t_pt``/``t_it`` labels negates all four of its cell
    margins and hence its interaction, so each permutation flips the sign of
    each event's interaction independently.
    """
    vals = np.asarray([getattr(x, "interaction", x) for x in interactions], dtype=np.float64)
    if vals.size == 0:
        raise EmptyInput("no events")
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    rng = _rng(seed)
    observed = vals.sum() / vals.size
    null = np.empty(n_perms)
    for start in range(0, n_perms, _CHUNK):
        stop = min(start + _CHUNK, n_perms)
        signs = np.where(rng.random((stop - start, vals.size)) < 0.5, -1.0, 1.0)
        null[start:stop] = (signs @ vals) / vals.size
    return {
        "observed": float(observed),
        "null_mean": float(null.mean()),
        "null_sd": float(null.std()),
        "null_q999": float(np.quantile(null, 0.999)),
        "p_value": sign_flip_p(observed, null),
        "n_perms": int(n_perms),
        "null": null,
    }

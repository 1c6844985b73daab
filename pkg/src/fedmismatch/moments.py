"""Moment estimators computable from masked data, and their wire format.

Three estimators of (E[X X^T], E[X Y]) from blockwise-masked samples:

* zero-imputed: plain averages of (m . x)(m . x)^T and (m . x) y. Biased;
  its expectation is (Pi . sigma, diag(Pi) . gamma) with Pi the
  co-observation matrix.
* debiased: entrywise division of the zero-imputed moments by the known Pi
  (inverse-propensity weighting). Unbiased where Pi > 0.
* component-wise: entrywise division by the empirical co-observation
  frequencies; equivalently, each entry is the average over the samples that
  observe both coordinates. Unbiased given the counts, but NOT guaranteed
  PSD.

Entries whose (empirical or population) co-observation weight is zero are
left at 0.0 and marked uncovered in the coverage mask.

Wire format (version 1): each client uploads sums, not averages, so
aggregation is exact and associative. Payload slots, in order:
``[n_k] [upper-tri sigma sums, row-major] [gamma sums] [pattern hash]``,
which is d(d+1)/2 + d + 2 floats. The pattern bitmask itself is sent once at
registration and accounted as d bits, separately from float counts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, FeaturePattern, MomentPair, Provenance

__all__ = [
    "LocalMoments",
    "CoObservationCounts",
    "local_zero_imputed_moments",
    "local_moments_by_client",
    "aggregate_zero_imputed",
    "empirical_coobservation",
    "debias_moments",
    "cw_moments",
    "imputed_data_moments",
    "pack_upper",
    "unpack_upper",
    "pattern_hash",
]


@dataclass(frozen=True)
class LocalMoments:
    """One client's contribution: moment *sums* plus the sample count.

    Sums (not averages) are what travels in the simulated wire format;
    ``sigma`` / ``gamma`` expose the local averages, with the n_k = 0
    convention of all-zero moments.
    """

    sigma_sum: np.ndarray
    gamma_sum: np.ndarray
    count: int

    @property
    def d(self) -> int:
        return self.sigma_sum.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return self.sigma_sum / self.count if self.count else np.zeros_like(self.sigma_sum)

    @property
    def gamma(self) -> np.ndarray:
        return self.gamma_sum / self.count if self.count else np.zeros_like(self.gamma_sum)


def local_zero_imputed_moments(x_obs: np.ndarray, y: np.ndarray, pattern: FeaturePattern) -> LocalMoments:
    """Moment sums of one client's samples, embedded into d x d coordinates.

    ``x_obs`` is (n_k, |obs|) over the pattern's observed columns. Unobserved
    coordinates contribute structural zeros, which is exactly the
    zero-imputation convention.
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x_obs.ndim != 2 or x_obs.shape[1] != pattern.size:
        raise ValueError(f"x_obs must be (n_k, {pattern.size}), got {x_obs.shape}")
    if y.shape != (x_obs.shape[0],):
        raise ValueError(f"y must be ({x_obs.shape[0]},), got {y.shape}")
    d = pattern.d
    sigma_sum = np.zeros((d, d))
    gamma_sum = np.zeros(d)
    if x_obs.shape[0] and pattern.observed:
        idx = list(pattern.observed)
        block = x_obs.T @ x_obs
        # Symmetrize at the source so the packed upper-triangle wire format
        # loses nothing; matrix products are not exactly symmetric in floats.
        sigma_sum[np.ix_(idx, idx)] = (block + block.T) / 2.0
        gamma_sum[idx] = x_obs.T @ y
    return LocalMoments(sigma_sum=sigma_sum, gamma_sum=gamma_sum, count=x_obs.shape[0])


def local_moments_by_client(data: Dataset) -> dict[int, LocalMoments]:
    """Per-client local moments, keyed and ordered by ascending client id."""
    out: dict[int, LocalMoments] = {}
    for c in sorted(data.clients, key=lambda c: c.id):
        out[c.id] = local_zero_imputed_moments(data.x_obs_of(c.id), data.y_of(c.id), c.pattern)
    return out


def aggregate_zero_imputed(locals_: list[LocalMoments] | dict[int, LocalMoments]) -> MomentPair:
    """Pool local moment sums into the zero-imputed estimator.

    Sums are folded in the given order (dicts: ascending key order), then
    divided once by the total count, so the result is independent of how the
    samples were sharded.
    """
    if isinstance(locals_, dict):
        items = [locals_[k] for k in sorted(locals_)]
    else:
        items = list(locals_)
    if not items:
        raise ValueError("nothing to aggregate")
    d = items[0].d
    sigma_sum = np.zeros((d, d))
    gamma_sum = np.zeros(d)
    n = 0
    for lm in items:
        if lm.d != d:
            raise ValueError("local moments disagree on dimension")
        sigma_sum += lm.sigma_sum
        gamma_sum += lm.gamma_sum
        n += lm.count
    if n == 0:
        raise ValueError("total sample count is zero")
    return MomentPair(sigma_sum / n, gamma_sum / n, Provenance.ZERO_IMPUTED)


@dataclass(frozen=True)
class CoObservationCounts:
    """N[l, j] = number of samples observing both l and j; n = total rows."""

    counts: np.ndarray
    n: int

    @property
    def d(self) -> int:
        return self.counts.shape[0]


def empirical_coobservation(data: Dataset) -> tuple[np.ndarray, CoObservationCounts]:
    """Empirical co-observation frequencies Pi_hat = N / n and the counts.

    Computable from patterns and per-client sample counts alone; no
    covariate values are touched.
    """
    d = data.d
    counts = np.zeros((d, d), dtype=np.int64)
    for c in data.clients:
        n_k = int(np.count_nonzero(data.client_ids == c.id))
        if n_k:
            m = c.pattern.mask().astype(np.int64)
            counts += n_k * np.outer(m, m)
    if data.n == 0:
        raise ValueError("empty dataset has no co-observation frequencies")
    return counts / data.n, CoObservationCounts(counts=counts, n=data.n)


def debias_moments(zero: MomentPair, pi: np.ndarray) -> MomentPair:
    """Divide zero-imputed moments entrywise by the co-observation matrix.

    Entries with Pi[l, j] = 0 are unidentifiable; they stay 0.0 and the
    coverage mask marks them. Requires population (or otherwise known) Pi.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != zero.sigma.shape:
        raise ValueError(f"pi shape {pi.shape} != sigma shape {zero.sigma.shape}")
    covered = pi > 0
    sigma = np.where(covered, zero.sigma, 0.0) / np.where(covered, pi, 1.0)
    diag = np.diag(pi)
    diag_ok = diag > 0
    gamma = np.where(diag_ok, zero.gamma, 0.0) / np.where(diag_ok, diag, 1.0)
    return MomentPair(sigma, gamma, Provenance.DEBIASED, coverage=covered)


def cw_moments(zero: MomentPair, counts: CoObservationCounts) -> MomentPair:
    """Component-wise estimator: each entry averaged over co-observing rows.

    Computed as (n * zero-imputed entry) / N[l, j], which is the per-pair
    sum divided by the per-pair count. Uncovered pairs (N = 0) stay 0.0.
    The result need not be PSD.
    """
    n_mat = np.asarray(counts.counts, dtype=np.float64)
    if n_mat.shape != zero.sigma.shape:
        raise ValueError(f"counts shape {n_mat.shape} != sigma shape {zero.sigma.shape}")
    covered = n_mat > 0
    sigma = np.where(covered, counts.n * zero.sigma, 0.0) / np.where(covered, n_mat, 1.0)
    diag = np.diag(n_mat)
    diag_ok = diag > 0
    gamma = np.where(diag_ok, counts.n * zero.gamma, 0.0) / np.where(diag_ok, diag, 1.0)
    return MomentPair(sigma, gamma, Provenance.COMPONENT_WISE, coverage=covered)


def imputed_data_moments(
    x: np.ndarray,
    client_ids: np.ndarray,
    y: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Averages (X^T X / n, X^T y / n) folded client-by-client.

    Partial sums are computed per client and folded in ascending client-id
    order, matching the simulated server exactly, so in-memory and federated
    paths agree bitwise.
    """
    x = np.asarray(x, dtype=np.float64)
    ids = np.asarray(client_ids)
    n = x.shape[0]
    if n == 0:
        raise ValueError("no rows")
    d = x.shape[1]
    sigma_sum = np.zeros((d, d))
    gamma_sum = np.zeros(d) if y is not None else None
    for cid in np.unique(ids):
        rows = np.flatnonzero(ids == cid)
        xk = x[rows]
        block = xk.T @ xk
        sigma_sum += (block + block.T) / 2.0
        if y is not None:
            gamma_sum += xk.T @ np.asarray(y, dtype=np.float64)[rows]
    return sigma_sum / n, (gamma_sum / n if y is not None else None)


def pack_upper(a: np.ndarray) -> np.ndarray:
    """Row-major upper triangle (including diagonal) of a symmetric matrix."""
    a = np.asarray(a, dtype=np.float64)
    d = a.shape[0]
    iu = np.triu_indices(d)
    return a[iu]


def unpack_upper(v: np.ndarray, d: int) -> np.ndarray:
    """Inverse of pack_upper: rebuild the full symmetric matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (d * (d + 1) // 2,):
        raise ValueError(f"expected {d * (d + 1) // 2} packed entries, got {v.shape}")
    out = np.zeros((d, d))
    iu = np.triu_indices(d)
    out[iu] = v
    out.T[iu] = v
    return out


def pattern_hash(pattern: FeaturePattern) -> float:
    """Bitmask folded into one float slot for the upload payload."""
    h = 0
    for i in pattern.observed:
        h |= 1 << (i % 52)
    return float(h)

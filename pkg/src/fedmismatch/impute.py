"""Linear per-client imputation maps and the iterated federated variant.

An imputation map assigns each client a matrix S_k of shape (|mis|, |obs|);
the completed vector keeps observed coordinates verbatim and fills missing
ones with S_k x_obs. The optimal linear choice is the population regression
of missing on observed coordinates, S_k = sigma[mis, obs] sigma[obs, obs]^+,
computable from any full covariance estimate (exact or component-wise).

``federated_ice`` alternates between re-estimating the full second-moment
matrix of the currently completed data and refreshing every client's map
from it. Raw (uncentered) second moments are used throughout, matching the
zero-imputation initial round. Per round the protocol costs d(d+1)/2 floats
of aggregated second moments up and the same broadcast down; that aggregate
accounting is what the returned CommLog records.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ._linalg import DEFAULT_PINV_RTOL, pinv
from .model import ClientSpec, CommLog, Dataset, FeaturePattern, validate_federation
from .moments import imputed_data_moments

__all__ = [
    "ImputerKind",
    "ImputationMap",
    "ImputedDataset",
    "fit_zero_imputer",
    "fit_optimal_imputer",
    "optimal_block_map",
    "apply_imputer",
    "federated_ice",
    "IceResult",
]


class ImputerKind(enum.Enum):
    ZERO = "zero"
    OPTIMAL_LINEAR = "optimal_linear"
    ICE = "ice"


@dataclass(frozen=True)
class ImputationMap:
    """Per-client linear completion maps.

    ``maps[k]`` is (|mis(k)|, |obs(k)|). ``source`` names where the
    covariance came from ("population", "cw", ...), ``round`` tags iterated
    fits, and ``zero_filled`` lists clients that observe nothing and
    therefore fall back to zero imputation.
    """

    kind: ImputerKind
    maps: Mapping[int, np.ndarray]
    patterns: Mapping[int, FeaturePattern]
    source: str | None = None
    round: int | None = None
    zero_filled: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        maps = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.maps.items()}
        pats = dict(self.patterns)
        if set(maps) != set(pats):
            raise ValueError("maps and patterns must cover the same client ids")
        for k, s in maps.items():
            p = pats[k]
            want = (len(p.missing), p.size)
            if s.shape != want:
                raise ValueError(f"client {k}: map shape {s.shape}, expected {want}")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "patterns", pats)
        object.__setattr__(self, "zero_filled", frozenset(self.zero_filled))

    def complete(self, client_id: int, x_obs: np.ndarray) -> np.ndarray:
        """Fill one observed vector out to all d coordinates."""
        if client_id not in self.maps:
            raise KeyError(f"no imputation map for client {client_id}")
        p = self.patterns[client_id]
        x_obs = np.asarray(x_obs, dtype=np.float64)
        out = np.zeros(p.d)
        if p.observed:
            out[list(p.observed)] = x_obs
        if p.missing:
            out[list(p.missing)] = self.maps[client_id] @ x_obs
        return out


def fit_zero_imputer(clients) -> ImputationMap:
    """Imputation by zeros: S_k = 0 for every client."""
    clients = validate_federation(clients)
    maps = {c.id: np.zeros((len(c.pattern.missing), c.pattern.size)) for c in clients}
    return ImputationMap(
        kind=ImputerKind.ZERO,
        maps=maps,
        patterns={c.id: c.pattern for c in clients},
    )


def optimal_block_map(sigma: np.ndarray, pattern: FeaturePattern, rtol: float = DEFAULT_PINV_RTOL) -> np.ndarray:
    """S = sigma[mis, obs] sigma[obs, obs]^+ for one pattern."""
    sigma = np.asarray(sigma, dtype=np.float64)
    obs = list(pattern.observed)
    mis = list(pattern.missing)
    if not mis:
        return np.zeros((0, len(obs)))
    if not obs:
        return np.zeros((len(mis), 0))
    s_oo = sigma[np.ix_(obs, obs)]
    s_mo = sigma[np.ix_(mis, obs)]
    return s_mo @ pinv(s_oo, rtol=rtol)


def fit_optimal_imputer(
    sigma: np.ndarray,
    clients,
    source: str = "population",
    rtol: float = DEFAULT_PINV_RTOL,
) -> ImputationMap:
    """Best linear completion maps from a full covariance estimate.

    ``sigma`` may be the population covariance or any estimate of it (a
    component-wise estimate is used as produced, never PSD-projected).
    Clients observing nothing get a zero map and are flagged.
    """
    clients = validate_federation(clients)
    maps: dict[int, np.ndarray] = {}
    flagged: set[int] = set()
    for c in clients:
        maps[c.id] = optimal_block_map(sigma, c.pattern, rtol=rtol)
        if c.pattern.is_empty and c.pattern.missing:
            flagged.add(c.id)
    return ImputationMap(
        kind=ImputerKind.OPTIMAL_LINEAR,
        maps=maps,
        patterns={c.id: c.pattern for c in clients},
        source=source,
        zero_filled=frozenset(flagged),
    )


@dataclass(frozen=True)
class ImputedDataset:
    """Completed design matrix plus the untouched responses and ownership."""

    clients: tuple[ClientSpec, ...]
    client_ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    imputer: ImputationMap | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "clients", validate_federation(self.clients))
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        ids = np.asarray(self.client_ids, dtype=np.int64)
        if x.shape[0] != len(y) or len(ids) != len(y):
            raise ValueError("row counts disagree")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "client_ids", ids)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def shard(self, client_id: int) -> tuple[np.ndarray, np.ndarray]:
        rows = np.flatnonzero(self.client_ids == client_id)
        return self.x[rows], self.y[rows]


def apply_imputer(imputer: ImputationMap, data: Dataset) -> ImputedDataset:
    """Complete every row of a masked dataset.

    Observed coordinates are copied bitwise; each client's missing block is
    x_obs @ S_k^T. Row order is preserved, and the operation commutes with
    row permutation for that reason.
    """
    x = data.x_filled.copy()
    for c in data.clients:
        if c.id not in imputer.maps:
            raise KeyError(f"imputer lacks a map for client {c.id}")
        if imputer.patterns[c.id] != c.pattern:
            raise ValueError(f"client {c.id}: imputer fitted for a different pattern")
        mis = list(c.pattern.missing)
        if not mis:
            continue
        rows = data.rows_of(c.id)
        if len(rows) == 0:
            continue
        x_obs = data.x_obs_of(c.id)
        x[np.ix_(rows, mis)] = x_obs @ imputer.maps[c.id].T
    return ImputedDataset(clients=data.clients, client_ids=data.client_ids, x=x, y=data.y, imputer=imputer)


@dataclass(frozen=True)
class IceResult:
    """Final completed data, per-round moment estimates, and comm totals."""

    imputed: ImputedDataset
    sigma_trace: tuple[np.ndarray, ...]
    comm: CommLog
    rounds_run: int
    stopped_early: bool


def federated_ice(
    data: Dataset,
    rounds: int,
    init: ImputationMap | None = None,
    rtol: float = DEFAULT_PINV_RTOL,
    early_stop_rms: float | None = None,
) -> IceResult:
    """Iterated conditional-expectation completion over a federation.

    Each round re-estimates the raw second-moment matrix of the currently
    completed data (client partial sums folded in id order, as a simulated
    server would) and refreshes every client's optimal block map from it.
    ``rounds`` = 0 returns the initial completion unchanged. When
    ``early_stop_rms`` is set, iteration stops once the RMS change over
    imputed entries falls below it, and the result records the stop.
    """
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    current = apply_imputer(init if init is not None else fit_zero_imputer(data.clients), data)
    trace: list[np.ndarray] = []
    comm = CommLog()
    n_missing = sum(
        len(c.pattern.missing) * int(np.count_nonzero(data.client_ids == c.id)) for c in data.clients
    )
    per_round = data.d * (data.d + 1) // 2
    stopped = False
    run = 0
    last_map: ImputationMap | None = current.imputer
    x = current.x
    for t in range(1, rounds + 1):
        sigma_t, _ = imputed_data_moments(x, data.client_ids)
        trace.append(sigma_t)
        comm.record(t, "up", per_round, "aggregated second moments of completed data")
        comm.record(t, "down", per_round, "broadcast second-moment estimate")
        maps = {c.id: optimal_block_map(sigma_t, c.pattern, rtol=rtol) for c in data.clients}
        last_map = ImputationMap(
            kind=ImputerKind.ICE,
            maps=maps,
            patterns={c.id: c.pattern for c in data.clients},
            source="ice",
            round=t,
            zero_filled=frozenset(
                c.id for c in data.clients if c.pattern.is_empty and c.pattern.missing
            ),
        )
        new_x = apply_imputer(last_map, data).x
        run = t
        if early_stop_rms is not None:
            rms = 0.0
            if n_missing:
                delta = new_x - x
                rms = float(np.sqrt(np.sum(delta * delta) / n_missing))
            x = new_x
            if rms < early_stop_rms:
                stopped = True
                break
        else:
            x = new_x
    final = ImputedDataset(clients=data.clients, client_ids=data.client_ids, x=x, y=data.y, imputer=last_map)
    return IceResult(imputed=final, sigma_trace=tuple(trace), comm=comm, rounds_run=run, stopped_early=stopped)

"""Synthetic population and federation generators.

The data model: a full covariate vector X in R^d with E[X X^T] = sigma, a
response Y = theta_star . X + eps with E[eps] = 0, Var(eps) = sigma2, and a
client label H drawn independently of (X, Y) with P(H = k) = rho_k. Each
stored sample keeps only the coordinates observed by its client.

Determinism: every sampler takes a numpy Generator and touches it in a fixed
documented order, so equal seeds give bitwise-equal datasets. Replicate-level
parallelism should derive child seeds with ``spawn_rngs`` (SeedSequence.spawn)
or ``numpy.random.SeedSequence(root, spawn_key=...)``; both rules are stable
across processes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import check_psd, sym_sqrt
from .model import ClientSpec, FeaturePattern, Dataset, MomentPair, Provenance, validate_federation

__all__ = [
    "PopulationSpec",
    "draw_bernoulli_patterns",
    "sample_dataset",
    "co_observation_matrix",
    "population_gamma",
    "population_moment_pair",
    "spawn_rngs",
]


@dataclass(frozen=True)
class PopulationSpec:
    """Joint law of (X, Y): covariance, coefficients, noise, design family.

    design "gaussian": X = sigma^{1/2} Z with Z standard normal.
    design "sphere":   X = sigma^{1/2} U with U uniform on the sphere of
    radius sqrt(d), so E[X X^T] = sigma exactly and |theta_star . X| is
    bounded by sqrt(d) * ||sigma^{1/2} theta_star||. Pairing "sphere" with
    uniform noise on [-a, a] gives the almost-sure response bound ``m_bound``
    = sqrt(d) * ||sigma^{1/2} theta_star|| + a.

    noise "gaussian" has variance sigma2; "uniform" is uniform on
    [-noise_halfwidth, noise_halfwidth] with sigma2 = halfwidth^2 / 3.
    """

    d: int
    sigma: np.ndarray
    theta_star: np.ndarray
    sigma2: float
    noise: str = "gaussian"
    design: str = "gaussian"
    noise_halfwidth: float | None = None
    m_bound: float | None = None
    sqrt_sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        s = np.asarray(self.sigma, dtype=np.float64)
        t = np.asarray(self.theta_star, dtype=np.float64)
        if s.shape != (self.d, self.d):
            raise ValueError(f"sigma must be ({self.d}, {self.d}), got {s.shape}")
        if t.shape != (self.d,):
            raise ValueError(f"theta_star must be ({self.d},), got {t.shape}")
        s = (s + s.T) / 2.0
        check_psd(s, "sigma")
        if self.noise not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise kind {self.noise!r}")
        if self.design not in ("gaussian", "sphere"):
            raise ValueError(f"unknown design kind {self.design!r}")
        if self.noise == "uniform":
            a = self.noise_halfwidth
            if a is None or a < 0:
                raise ValueError("uniform noise needs noise_halfwidth >= 0")
            if abs(self.sigma2 - a * a / 3.0) > 1e-12 * max(1.0, a * a):
                raise ValueError("sigma2 must equal noise_halfwidth^2 / 3 for uniform noise")
        if self.sigma2 < 0:
            raise ValueError(f"noise variance must be >= 0, got {self.sigma2}")
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "theta_star", t)
        object.__setattr__(self, "sqrt_sigma", sym_sqrt(s))

    @classmethod
    def gaussian(cls, sigma: np.ndarray, theta_star: np.ndarray, sigma2: float = 1.0) -> "PopulationSpec":
        sigma = np.asarray(sigma, dtype=np.float64)
        return cls(d=sigma.shape[0], sigma=sigma, theta_star=theta_star, sigma2=float(sigma2))

    @classmethod
    def bounded(cls, sigma: np.ndarray, theta_star: np.ndarray, noise_halfwidth: float = 1.0) -> "PopulationSpec":
        """Sphere design with uniform noise; fills in the response bound."""
        sigma = np.asarray(sigma, dtype=np.float64)
        theta = np.asarray(theta_star, dtype=np.float64)
        d = sigma.shape[0]
        a = float(noise_halfwidth)
        root = sym_sqrt((sigma + sigma.T) / 2.0)
        m = float(np.sqrt(d) * np.linalg.norm(root @ theta) + a)
        return cls(
            d=d,
            sigma=sigma,
            theta_star=theta,
            sigma2=a * a / 3.0,
            noise="uniform",
            design="sphere",
            noise_halfwidth=a,
            m_bound=m,
        )

    @property
    def e_y2(self) -> float:
        """Second moment of the response: sigma2 + theta_star . sigma theta_star."""
        return float(self.sigma2 + self.theta_star @ self.sigma @ self.theta_star)


def draw_bernoulli_patterns(k: int, d: int, tau: float, rng: np.random.Generator) -> list[FeaturePattern]:
    """Draw k patterns, each coordinate observed independently w.p. tau."""
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if k < 1:
        raise ValueError(f"need k >= 1 patterns, got {k}")
    hits = rng.random((k, d)) < tau
    return [FeaturePattern(tuple(np.flatnonzero(row).tolist()), d) for row in hits]


def _draw_x(pop: PopulationSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((n, pop.d))
    if pop.design == "sphere":
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        z = z / norms * np.sqrt(pop.d)
    return z @ pop.sqrt_sigma


def _draw_noise(pop: PopulationSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if pop.noise == "uniform":
        return rng.uniform(-pop.noise_halfwidth, pop.noise_halfwidth, size=n)
    return np.sqrt(pop.sigma2) * rng.standard_normal(n)


def sample_dataset(
    pop: PopulationSpec,
    clients,
    n: int,
    rng: np.random.Generator,
) -> Dataset:
    """Draw n i.i.d. samples; only observed coordinates are stored.

    Draw order is fixed (labels, then covariates, then noise) so a given
    seed reproduces the dataset bitwise. Labels are categorical over the
    clients in the order given, with probabilities rho.
    """
    clients = validate_federation(clients)
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if clients[0].pattern.d != pop.d:
        raise ValueError("clients and population disagree on dimension")
    rho = np.array([c.rho for c in clients], dtype=np.float64)
    positions = rng.choice(len(clients), size=n, p=rho / rho.sum())
    x = _draw_x(pop, n, rng)
    eps = _draw_noise(pop, n, rng)
    y = x @ pop.theta_star + eps
    masks = np.stack([c.pattern.mask() for c in clients])
    ids = np.array([c.id for c in clients], dtype=np.int64)
    x_filled = x * masks[positions]
    return Dataset(clients=clients, client_ids=ids[positions], x_filled=x_filled, y=y)


def co_observation_matrix(clients) -> np.ndarray:
    """Pi with Pi[l, j] = sum of rho_k over clients observing both l and j."""
    clients = validate_federation(clients)
    d = clients[0].pattern.d
    pi = np.zeros((d, d))
    for c in clients:
        m = c.pattern.mask().astype(np.float64)
        pi += c.rho * np.outer(m, m)
    return pi


def population_gamma(pop: PopulationSpec) -> np.ndarray:
    """Cross-moment E[X Y] = sigma theta_star."""
    return pop.sigma @ pop.theta_star


def population_moment_pair(pop: PopulationSpec) -> MomentPair:
    """Exact moments as a MomentPair, for oracle-driven estimators."""
    return MomentPair(pop.sigma, population_gamma(pop), Provenance.POPULATION)


def spawn_rngs(root_seed: int, count: int) -> list[np.random.Generator]:
    """Independent child generators for replicate-level parallelism."""
    seq = np.random.SeedSequence(root_seed)
    return [np.random.default_rng(child) for child in seq.spawn(count)]

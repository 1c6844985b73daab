"""Closed-form risks, bound assembly, and Monte Carlo evaluation.

Everything here works at the population level: given the exact law of
(X, Y, H), compute best attainable risks, the ridge bias and effective
dimension that drive excess-risk bounds, and the population moments of
imputed features. ``monte_carlo_risk`` is the bridge to finite-sample
evaluation of fitted predictors.

Key facts used throughout (all checkable against brute force, and checked in
the test suite):

* best coefficients over an observed block O: sigma[O,O]^+ gamma[O];
* attainable risk for that block: sigma2 + theta_mis . V theta_mis with V
  the Schur complement of sigma[O,O];
* ridge bias inf_t ||t - ref||_sigma^2 + lam ||t||^2 has value
  lam * ref . sigma (sigma + lam I)^{-1} ref;
* zero-imputed population moments are (Pi . sigma, diag(Pi) . gamma);
* optimal-linear imputation reproduces sigma on observed blocks and leaves
  theta_star optimal, with covariance dominated by sigma.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from ._linalg import pinv, pinv_solve
from .impute import ImputerKind
from .model import ClientSpec, FeaturePattern, crop_matrix, crop_vector, validate_federation, ClientwisePredictor
from .popgen import PopulationSpec, co_observation_matrix, population_gamma, sample_dataset

__all__ = [
    "best_local_coefficients",
    "schur_complement",
    "oracle_local_risk",
    "oracle_global_risk",
    "effective_dimension",
    "ridge_bias",
    "ImputedPopulation",
    "imputed_population_covariance",
    "imputed_oracle_risk",
    "BoundReport",
    "itr_bound",
    "LocalLearningBounds",
    "local_bound_terms",
    "typical_case_lambda_prime",
    "PerClientRisk",
    "MCRisk",
    "monte_carlo_risk",
]


def best_local_coefficients(pop: PopulationSpec, pattern: FeaturePattern) -> np.ndarray:
    """Population-optimal linear coefficients over one observed block.

    Returns sigma[O,O]^+ gamma[O]. On well-conditioned blocks the
    equivalent representation theta_obs + sigma[O,O]^{-1} sigma[O,mis]
    theta_mis is also evaluated and must agree to 1e-10; disagreement means
    the inputs are inconsistent and raises.
    """
    if pattern.is_empty:
        return np.zeros(0)
    s_oo = crop_matrix(pop.sigma, pattern, pattern)
    gamma = population_gamma(pop)
    theta1 = pinv_solve(s_oo, crop_vector(gamma, pattern))
    sv = np.linalg.svd(s_oo, compute_uv=False)
    if sv[0] > 0 and sv[-1] / sv[0] > 1e-4:
        obs = list(pattern.observed)
        mis = list(pattern.missing)
        theta2 = pop.theta_star[obs].copy()
        if mis:
            s_om = pop.sigma[np.ix_(obs, mis)]
            theta2 = theta2 + pinv(s_oo) @ s_om @ pop.theta_star[mis]
        if np.max(np.abs(theta1 - theta2)) > 1e-10 * max(1.0, float(np.max(np.abs(theta2)))):
            raise RuntimeError("the two closed forms for local coefficients disagree")
    return theta1


def schur_complement(sigma: np.ndarray, pattern: FeaturePattern) -> np.ndarray:
    """sigma[M,M] - sigma[M,O] sigma[O,O]^+ sigma[O,M] over the missing set.

    Full patterns give a 0 x 0 matrix; an empty observed set gives
    sigma[M,M] itself.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    obs = list(pattern.observed)
    mis = list(pattern.missing)
    if not mis:
        return np.zeros((0, 0))
    s_mm = sigma[np.ix_(mis, mis)]
    if not obs:
        return s_mm
    s_mo = sigma[np.ix_(mis, obs)]
    s_oo = sigma[np.ix_(obs, obs)]
    v = s_mm - s_mo @ pinv(s_oo) @ s_mo.T
    return (v + v.T) / 2.0


def oracle_local_risk(pop: PopulationSpec, pattern: FeaturePattern) -> float:
    """Best attainable squared-error risk when only this block is seen."""
    v = schur_complement(pop.sigma, pattern)
    t_mis = pop.theta_star[list(pattern.missing)]
    return float(pop.sigma2 + t_mis @ v @ t_mis)


def oracle_global_risk(pop: PopulationSpec, clients) -> float:
    """Share-weighted best attainable risk across the federation."""
    clients = validate_federation(clients)
    return float(sum(c.rho * oracle_local_risk(pop, c.pattern) for c in clients))


def effective_dimension(sigma: np.ndarray, lam: float) -> float:
    """trace(sigma (sigma + lam I)^{-1}); equals rank(sigma) at lam = 0."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    w = np.clip(np.linalg.eigvalsh(np.asarray(sigma, dtype=np.float64)), 0.0, None)
    if lam == 0:
        tol = (w.max() if w.size else 0.0) * 1e-12
        return float(np.count_nonzero(w > tol))
    return float(np.sum(w / (w + lam)))


def ridge_bias(sigma: np.ndarray, theta_ref: np.ndarray, lam: float) -> float:
    """Value of inf_t { ||t - theta_ref||_sigma^2 + lam ||t||^2 }.

    Closed form lam * ref . sigma (sigma + lam I)^{-1} ref, evaluated by
    eigendecomposition; exactly 0.0 at lam = 0.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return 0.0
    sigma = np.asarray(sigma, dtype=np.float64)
    w, q = np.linalg.eigh((sigma + sigma.T) / 2.0)
    w = np.clip(w, 0.0, None)
    c = q.T @ np.asarray(theta_ref, dtype=np.float64)
    return float(np.sum(lam * w / (w + lam) * c * c))


@dataclass(frozen=True)
class ImputedPopulation:
    """Population moments of imputed features and the optimal coefficients.

    ``theta_prime`` minimizes the population risk over predictors linear in
    the imputed features.
    """

    kind: ImputerKind
    sigma: np.ndarray
    gamma: np.ndarray
    theta_prime: np.ndarray


def imputed_population_covariance(pop: PopulationSpec, clients, kind: ImputerKind) -> ImputedPopulation:
    """Exact moments of the imputed feature vector under a fitted-free map.

    ZERO: sigma_I = Pi . sigma entrywise, gamma_I = diag(Pi) . gamma, and
    theta_prime is the minimum-norm solution of sigma_I t = gamma_I.

    OPTIMAL_LINEAR (population source): blockwise mixture over clients of
    [sigma_oo, sigma_om; sigma_mo, sigma_mo sigma_oo^+ sigma_om], with
    gamma_I the matching mixture of completed cross-moments; theta_star
    itself stays optimal, so theta_prime = theta_star.
    """
    clients = validate_federation(clients)
    gamma = population_gamma(pop)
    if kind == ImputerKind.ZERO:
        pi = co_observation_matrix(clients)
        sigma_i = pi * pop.sigma
        gamma_i = np.diag(pi) * gamma
        theta_prime = pinv_solve(sigma_i, gamma_i)
        return ImputedPopulation(kind, sigma_i, gamma_i, theta_prime)
    if kind == ImputerKind.OPTIMAL_LINEAR:
        d = pop.d
        sigma_i = np.zeros((d, d))
        gamma_i = np.zeros(d)
        for c in clients:
            obs = list(c.pattern.observed)
            mis = list(c.pattern.missing)
            block = np.zeros((d, d))
            g = np.zeros(d)
            if obs:
                block[np.ix_(obs, obs)] = pop.sigma[np.ix_(obs, obs)]
                g[obs] = gamma[obs]
            if obs and mis:
                s_om = pop.sigma[np.ix_(obs, mis)]
                s_oo_inv = pinv(pop.sigma[np.ix_(obs, obs)])
                block[np.ix_(obs, mis)] = s_om
                block[np.ix_(mis, obs)] = s_om.T
                block[np.ix_(mis, mis)] = s_om.T @ s_oo_inv @ s_om
                g[mis] = s_om.T @ s_oo_inv @ gamma[obs]
            sigma_i += c.rho * block
            gamma_i += c.rho * g
        sigma_i = (sigma_i + sigma_i.T) / 2.0
        return ImputedPopulation(kind, sigma_i, gamma_i, pop.theta_star.copy())
    raise ValueError(f"no population moments for imputer kind {kind}")


def imputed_oracle_risk(pop: PopulationSpec, ip: ImputedPopulation) -> float:
    """Best risk attainable by predictors linear in the imputed features:
    E[Y^2] - theta_prime . sigma_I theta_prime."""
    return float(pop.e_y2 - ip.theta_prime @ ip.sigma @ ip.theta_prime)


@dataclass(frozen=True)
class BoundReport:
    """Assembled excess-risk certificate for an impute-then-regress fit.

    ``bound_value`` = r_star_reference + b_lambda + (8 m^2 / n) d_lambda.
    ``satisfied`` stays None until Monte Carlo numbers are attached.
    """

    kind: ImputerKind
    lam: float
    n: int
    m: float
    r_star_reference: float
    r_star_global: float
    per_client_r_star: Mapping[int, float]
    b_lambda: float
    d_lambda: float
    bound_value: float
    mc_risk: float | None = None
    mc_stderr: float | None = None
    satisfied: bool | None = None

    def with_mc(self, mc_risk: float, mc_stderr: float) -> "BoundReport":
        ok = mc_risk <= self.bound_value + 3.0 * mc_stderr
        return replace(self, mc_risk=float(mc_risk), mc_stderr=float(mc_stderr), satisfied=bool(ok))


def itr_bound(
    pop: PopulationSpec,
    clients,
    kind: ImputerKind,
    lam: float,
    n: int,
    m: float,
) -> BoundReport:
    """Risk certificate for truncated ridge on imputed data.

    The certified claim: expected risk of the fitted predictor is at most
    r_star_reference + b_lambda + (8 m^2 / n) d_lambda, where the reference
    is the best risk attainable with these imputed features.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")
    clients = validate_federation(clients)
    ip = imputed_population_covariance(pop, clients, kind)
    r_ref = imputed_oracle_risk(pop, ip)
    b = ridge_bias(ip.sigma, ip.theta_prime, lam)
    d_eff = effective_dimension(ip.sigma, lam)
    per_client = {c.id: oracle_local_risk(pop, c.pattern) for c in clients}
    r_global = float(sum(c.rho * per_client[c.id] for c in clients))
    return BoundReport(
        kind=kind,
        lam=float(lam),
        n=int(n),
        m=float(m),
        r_star_reference=r_ref,
        r_star_global=r_global,
        per_client_r_star=per_client,
        b_lambda=b,
        d_lambda=d_eff,
        bound_value=float(r_ref + b + 8.0 * m * m / n * d_eff),
    )


@dataclass(frozen=True)
class LocalLearningBounds:
    """Floor and ceiling for the risk of the no-sharing baseline.

    lower_bound = e0, the empty-client floor: clients that draw no samples
    predict zero and pay the full second moment of the response.
    upper_bound adds the estimation and approximation terms of the
    share-weighted local ridge fits.
    """

    lam: float
    n: int
    m: float
    e0: float
    sum_local_dims: float
    weighted_local_floor: float
    lower_bound: float
    upper_bound: float
    per_client: Mapping[int, tuple[float, float, float, float]]


def local_bound_terms(pop: PopulationSpec, clients, lam: float, n: int, m: float) -> LocalLearningBounds:
    """Assemble the local-learning risk floor and ceiling.

    Per client: attainable risk, ridge bias at penalty lam / rho_k, and
    effective dimension of the observed block at that penalty. The map in
    ``per_client`` stores (r_star_k, b_k, d_k, lam_k).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    clients = validate_federation(clients)
    e0 = float(sum(c.rho * (1.0 - c.rho) ** n for c in clients) * pop.e_y2)
    per_client: dict[int, tuple[float, float, float, float]] = {}
    sum_d = 0.0
    floor = 0.0
    for c in clients:
        lam_k = lam / c.rho
        s_oo = crop_matrix(pop.sigma, c.pattern, c.pattern)
        theta_k = best_local_coefficients(pop, c.pattern)
        r_k = oracle_local_risk(pop, c.pattern)
        b_k = ridge_bias(s_oo, theta_k, lam_k) if c.pattern.size else 0.0
        d_k = effective_dimension(s_oo, lam_k) if c.pattern.size else 0.0
        per_client[c.id] = (r_k, b_k, d_k, lam_k)
        sum_d += d_k
        floor += c.rho * (r_k + b_k)
    upper = e0 + 16.0 * m * m / n * sum_d + floor
    return LocalLearningBounds(
        lam=float(lam),
        n=int(n),
        m=float(m),
        e0=e0,
        sum_local_dims=sum_d,
        weighted_local_floor=floor,
        lower_bound=e0,
        upper_bound=upper,
        per_client=per_client,
    )


def typical_case_lambda_prime(lam: float, tau: float) -> float:
    """Penalty inflation under Bernoulli(tau) patterns: lam / tau^2 + (1 - tau) / tau."""
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return float(lam / (tau * tau) + (1.0 - tau) / tau)


@dataclass(frozen=True)
class PerClientRisk:
    risk: float
    stderr: float
    draws: int


@dataclass(frozen=True)
class MCRisk:
    """Monte Carlo risk estimate, stratified by client.

    ``risk`` is exactly the share-weighted average of the per-client
    conditional risks computed from the same draws. ``stderr`` is the pooled
    sample standard deviation of squared residuals divided by sqrt(n).
    """

    risk: float
    stderr: float
    per_client: Mapping[int, PerClientRisk]
    draws: int


def _apportion(n: int, weights: list[float]) -> list[int]:
    """Largest-remainder allocation of n draws, at least one per stratum."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    ideal = n * w
    counts = np.floor(ideal).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(ideal - counts), kind="stable")
    for i in order[:short]:
        counts[i] += 1
    while (counts == 0).any():
        i = int(np.argmin(counts))
        j = int(np.argmax(counts))
        if counts[j] <= 1:
            raise ValueError(f"cannot allocate {n} draws over {len(w)} strata")
        counts[i] += 1
        counts[j] -= 1
    return counts.tolist()


def monte_carlo_risk(
    predictor: ClientwisePredictor,
    pop: PopulationSpec,
    clients,
    n_mc: int,
    rng: np.random.Generator,
) -> MCRisk:
    """Estimate the deployment risk of a clientwise predictor by simulation.

    Fresh draws are stratified over clients in ascending id order with
    largest-remainder counts proportional to rho, so the global estimate
    decomposes exactly as sum_k rho_k * conditional risk_k over the same
    draws. Evaluating a single pattern (a would-be new client) is the
    special case of one client with rho = 1.
    """
    clients = sorted(validate_federation(clients), key=lambda c: c.id)
    if n_mc < 2:
        raise ValueError(f"need n_mc >= 2, got {n_mc}")
    counts = _apportion(n_mc, [c.rho for c in clients])
    per_client: dict[int, PerClientRisk] = {}
    risk = 0.0
    pooled = []
    for c, m_k in zip(clients, counts):
        solo = ClientSpec(id=c.id, pattern=c.pattern, rho=1.0)
        ds = sample_dataset(pop, (solo,), m_k, rng)
        pred = predictor.predict_many(c.id, ds.x_obs_of(c.id))
        sq = (ds.y - pred) ** 2
        mean_k = float(sq.mean())
        stderr_k = float(np.std(sq, ddof=1) / np.sqrt(m_k)) if m_k > 1 else float("nan")
        per_client[c.id] = PerClientRisk(risk=mean_k, stderr=stderr_k, draws=m_k)
        risk += c.rho * mean_k
        pooled.append(sq)
    allsq = np.concatenate(pooled)
    stderr = float(np.std(allsq, ddof=1) / np.sqrt(n_mc))
    return MCRisk(risk=float(risk), stderr=stderr, per_client=per_client, draws=n_mc)

import numpy as np
import pytest

from fedmismatch import (
    ClientSpec,
    FeaturePattern,
    PopulationSpec,
    co_observation_matrix,
    draw_bernoulli_patterns,
    population_gamma,
    population_moment_pair,
    sample_dataset,
    spawn_rngs,
)
from fedmismatch.model import Provenance

from support import seeded


def section3_clients(d=4):
    """obs(1)={1,3}, obs(2)={2,3,4}, rho=(0.5, 0.5): the running small case."""
    return (
        ClientSpec(id=1, pattern=FeaturePattern.from_one_based([1, 3], d), rho=0.5),
        ClientSpec(id=2, pattern=FeaturePattern.from_one_based([2, 3, 4], d), rho=0.5),
    )


class TestPopulationSpec:
    def test_rejects_non_psd(self):
        with pytest.raises(ValueError, match="PSD"):
            PopulationSpec.gaussian(np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros(2))

    def test_uniform_noise_consistency(self):
        with pytest.raises(ValueError, match="halfwidth"):
            PopulationSpec(d=1, sigma=np.eye(1), theta_star=np.ones(1), sigma2=1.0, noise="uniform",
                           noise_halfwidth=0.3)

    def test_bounded_fills_m(self):
        pop = PopulationSpec.bounded(np.eye(2), np.array([3.0, 4.0]), noise_halfwidth=1.0)
        # sqrt(2) * ||theta|| + 1 with identity covariance
        assert pop.m_bound == pytest.approx(np.sqrt(2) * 5.0 + 1.0)
        assert pop.sigma2 == pytest.approx(1.0 / 3.0)

    def test_e_y2(self):
        pop = PopulationSpec.gaussian(2.0 * np.eye(2), np.array([1.0, 1.0]), sigma2=0.5)
        assert pop.e_y2 == pytest.approx(0.5 + 4.0)


class TestBernoulliPatterns:
    def test_tau_one_gives_full_patterns(self):
        pats = draw_bernoulli_patterns(3, 4, 1.0, seeded(0))
        assert all(p.is_full for p in pats)

    def test_inclusion_frequency(self):
        # binomial concentration: per-coordinate frequency within 3 stderr
        k, d, tau = 2000, 10, 0.5
        pats = draw_bernoulli_patterns(k, d, tau, seeded(1))
        freq = np.mean([p.mask() for p in pats], axis=0)
        assert np.all(np.abs(freq - tau) <= 3 * np.sqrt(tau * (1 - tau) / k))

    def test_single_coordinate_probability(self):
        hits = 0
        reps = 10_000
        rng = seeded(2)
        for _ in range(reps):
            (p,) = draw_bernoulli_patterns(1, 1, 0.5, rng)
            hits += p.is_full
        assert abs(hits / reps - 0.5) <= 3 * np.sqrt(0.25 / reps)

    def test_tau_validated(self):
        with pytest.raises(ValueError):
            draw_bernoulli_patterns(1, 2, 0.0, seeded(0))


class TestSampleDataset:
    def test_empty(self):
        clients = (ClientSpec(id=1, pattern=FeaturePattern.full(2), rho=1.0),)
        ds = sample_dataset(PopulationSpec.gaussian(np.eye(2), np.zeros(2)), clients, 0, seeded(0))
        assert ds.n == 0

    def test_null_model_second_moment(self):
        pop = PopulationSpec.gaussian(np.eye(2), np.zeros(2), sigma2=1.0)
        clients = (ClientSpec(id=1, pattern=FeaturePattern.full(2), rho=1.0),)
        ds = sample_dataset(pop, clients, 100_000, seeded(3))
        assert np.mean(ds.y**2) == pytest.approx(1.0, abs=0.03)

    def test_client_share(self):
        pop = PopulationSpec.gaussian(np.eye(2), np.zeros(2))
        clients = (
            ClientSpec(id=1, pattern=FeaturePattern.full(2), rho=0.3),
            ClientSpec(id=2, pattern=FeaturePattern.full(2), rho=0.7),
        )
        ds = sample_dataset(pop, clients, 100_000, seeded(4))
        share = np.mean(ds.client_ids == 1)
        assert abs(share - 0.3) <= 0.005

    def test_masking_zeroes_unobserved(self):
        pop = PopulationSpec.gaussian(np.eye(4), np.ones(4))
        ds = sample_dataset(pop, section3_clients(), 200, seeded(5))
        rows1 = ds.rows_of(1)
        assert np.all(ds.x_filled[np.ix_(rows1, [1, 3])] == 0.0)
        assert np.all(ds.x_filled[np.ix_(rows1, [0, 2])] != 0.0)

    def test_deterministic_given_seed(self):
        pop = PopulationSpec.gaussian(np.eye(3), np.ones(3))
        clients = (ClientSpec(id=1, pattern=FeaturePattern.from_one_based([1, 2], 3), rho=1.0),)
        a = sample_dataset(pop, clients, 50, seeded(6))
        b = sample_dataset(pop, clients, 50, seeded(6))
        np.testing.assert_array_equal(a.x_filled, b.x_filled)
        np.testing.assert_array_equal(a.y, b.y)

    def test_sphere_design_bounds_response(self):
        pop = PopulationSpec.bounded(np.eye(3) + 0.2, np.array([1.0, -2.0, 0.5]), noise_halfwidth=0.7)
        clients = (ClientSpec(id=1, pattern=FeaturePattern.full(3), rho=1.0),)
        ds = sample_dataset(pop, clients, 20_000, seeded(7))
        assert np.max(np.abs(ds.y)) <= pop.m_bound
        # sphere normalization keeps E[X X^T] = sigma exactly; check by MC
        emp = ds.x_filled.T @ ds.x_filled / ds.n
        assert np.max(np.abs(emp - pop.sigma)) < 0.05


class TestCoObservation:
    def test_section3_values(self):
        pi = co_observation_matrix(section3_clients())
        np.testing.assert_allclose(np.diag(pi), [0.5, 0.5, 1.0, 0.5])
        assert pi[0, 2] == 0.5  # features 1 and 3, both seen by client 1
        assert pi[0, 1] == 0.0  # features 1 and 2 never co-observed
        assert pi[1, 3] == 0.5
        assert pi[2, 3] == 0.5

    def test_full_single_client(self):
        pi = co_observation_matrix((ClientSpec(id=1, pattern=FeaturePattern.full(3), rho=1.0),))
        np.testing.assert_array_equal(pi, np.ones((3, 3)))

    def test_disjoint_patterns(self):
        clients = (
            ClientSpec(id=1, pattern=FeaturePattern.from_one_based([1], 2), rho=0.5),
            ClientSpec(id=2, pattern=FeaturePattern.from_one_based([2], 2), rho=0.5),
        )
        assert co_observation_matrix(clients)[0, 1] == 0.0


class TestPopulationMoments:
    def test_gamma_examples(self):
        assert population_gamma(PopulationSpec.gaussian(np.eye(2), np.array([1.0, 2.0]))).tolist() == [1.0, 2.0]
        pop = PopulationSpec.gaussian(np.array([[1.0, 0.5], [0.5, 1.0]]), np.array([1.0, 1.0]))
        np.testing.assert_allclose(population_gamma(pop), [1.5, 1.5])
        assert np.all(population_gamma(PopulationSpec.gaussian(np.eye(2), np.zeros(2))) == 0.0)

    def test_moment_pair_provenance(self):
        mp = population_moment_pair(PopulationSpec.gaussian(np.eye(2), np.ones(2)))
        assert mp.provenance is Provenance.POPULATION


def test_spawn_rngs_are_independent_and_stable():
    a = spawn_rngs(42, 3)
    b = spawn_rngs(42, 3)
    for ga, gb in zip(a, b):
        assert ga.random() == gb.random()
    draws = [g.random() for g in spawn_rngs(42, 3)]
    assert len(set(draws)) == 3

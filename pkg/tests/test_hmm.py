import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmfields.exceptions import AllZeroRow, NonErgodicCycle
from hmmfields.hmm import (
    BandedLikelihoodConfig,
    CallableEmissions,
    GaussianEmissions,
    TransitionModel,
    banded_forward,
    banded_segments,
    forward_recursion,
    local_state_probabilities,
    periodic_stationary,
    softmax_rows,
    viterbi,
)

# ---------------------------------------------------------------------------
# brute-force oracles: enumerate all N^T state paths
# ---------------------------------------------------------------------------


def path_sum_likelihood(F, gammas, delta):
    """Total likelihood as an explicit sum over all state paths.

    F[t, j] are emission densities, gammas[t] the matrix into time t.
    """
    T, N = F.shape
    total = 0.0
    for path in itertools.product(range(N), repeat=T):
        p = delta[path[0]] * F[0, path[0]]
        for t in range(1, T):
            p *= gammas[t, path[t - 1], path[t]] * F[t, path[t]]
        total += p
    return total


def path_posteriors(F, gammas, delta):
    T, N = F.shape
    post = np.zeros((T, N))
    for path in itertools.product(range(N), repeat=T):
        p = delta[path[0]] * F[0, path[0]]
        for t in range(1, T):
            p *= gammas[t, path[t - 1], path[t]] * F[t, path[t]]
        for t, j in enumerate(path):
            post[t, j] += p
    return post / post.sum(axis=1, keepdims=True)


def path_argmax(F, gammas, delta):
    T, N = F.shape
    best, best_path = -np.inf, None
    for path in itertools.product(range(N), repeat=T):
        p = delta[path[0]] * F[0, path[0]]
        for t in range(1, T):
            p *= gammas[t, path[t - 1], path[t]] * F[t, path[t]]
        if p > best:
            best, best_path = p, path
    return np.array(best_path)


def random_model(rng, T, N):
    gammas = rng.dirichlet(np.ones(N) * 2.0, size=(T, N))
    delta = rng.dirichlet(np.ones(N))
    means = rng.normal(0, 2, N)
    obs = rng.normal(0, 2, T)
    emit = GaussianEmissions(means, np.full(N, 1.0))
    F = np.exp(emit.log_density_matrix(obs))
    return obs, TransitionModel.from_matrices(gammas), emit, delta, F, gammas


# ---------------------------------------------------------------------------
# softmax link
# ---------------------------------------------------------------------------


class TestSoftmaxRows:
    def test_uniform(self):
        g = softmax_rows(np.zeros((3, 3)))
        assert np.allclose(g, 1.0 / 3.0)

    def test_two_state_zero_predictor(self):
        g = softmax_rows(np.zeros((2, 2)))
        assert np.allclose(g[0], [0.5, 0.5])

    def test_two_state_logistic_value(self):
        eta = np.array([[0.0, -2.0], [0.0, 0.0]])
        g = softmax_rows(eta)
        expected = np.exp(-2.0) / (1.0 + np.exp(-2.0))
        assert g[0, 1] == pytest.approx(expected, rel=1e-14)
        assert g[0, 0] == pytest.approx(1.0 - expected, rel=1e-14)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            g = softmax_rows(rng.normal(0, 3, (4, 4)), structural_zeros={(0, 3)})
            assert np.allclose(g.sum(axis=1), 1.0, atol=1e-12)
            assert g[0, 3] == 0.0
            assert np.all(g >= 0) and np.all(g <= 1)

    def test_diagonal_is_reference(self):
        # diagonal predictor values must be ignored
        eta = np.array([[57.0, 1.0], [-3.0, 99.0]])
        ref = eta.copy()
        np.fill_diagonal(ref, 0.0)
        assert np.allclose(softmax_rows(eta), softmax_rows(ref))

    def test_all_zero_row(self):
        with pytest.raises(AllZeroRow):
            softmax_rows(np.zeros((2, 2)), structural_zeros={(0, 0), (0, 1)})


# ---------------------------------------------------------------------------
# forward recursion
# ---------------------------------------------------------------------------


class TestForwardRecursion:
    def test_single_state(self):
        obs = np.array([0.3, -1.0, 2.2])
        emit = GaussianEmissions([0.0], [1.0])
        trans = TransitionModel.from_matrices(np.ones((1, 1)))
        out = forward_recursion(obs, trans, emit, np.array([1.0]))
        assert out.loglik == pytest.approx(emit.log_density_matrix(obs).sum())
        assert np.allclose(out.phi, [1.0])

    def test_symmetric_identical_emissions(self):
        obs = np.array([0.1, 0.5, -0.7, 1.1])
        emit = GaussianEmissions([0.7, 0.7], [1.3, 1.3])
        trans = TransitionModel.from_matrices(np.full((2, 2), 0.5))
        out = forward_recursion(obs, trans, emit, np.array([0.5, 0.5]))
        expected = emit.log_density_matrix(obs)[:, 0].sum()
        assert out.loglik == pytest.approx(expected, rel=1e-12)
        assert np.allclose(out.phi, [0.5, 0.5], atol=1e-12)

    def test_matches_path_enumeration(self):
        rng = np.random.default_rng(1)
        obs, trans, emit, delta, F, gammas = random_model(rng, T=5, N=2)
        out = forward_recursion(obs, trans, emit, delta)
        oracle = path_sum_likelihood(F, gammas, delta)
        assert np.exp(out.loglik) == pytest.approx(oracle, rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        T=st.integers(1, 8),
        N=st.integers(1, 3),
    )
    def test_forward_oracle_property(self, seed, T, N):
        rng = np.random.default_rng(seed)
        obs, trans, emit, delta, F, gammas = random_model(rng, T, N)
        out = forward_recursion(obs, trans, emit, delta)
        oracle = path_sum_likelihood(F, gammas, delta)
        assert np.exp(out.loglik) == pytest.approx(oracle, rel=1e-10)

    def test_no_underflow_long_series(self):
        T = 200_000
        rng = np.random.default_rng(2)
        obs = rng.normal(size=T)
        emit = GaussianEmissions([0.0, 1.0], [1.0, 1.0])
        trans = TransitionModel.from_matrices(np.array([[0.99, 0.01], [0.01, 0.99]]))
        out = forward_recursion(obs, trans, emit, np.array([0.5, 0.5]))
        assert np.isfinite(out.loglik)


# ---------------------------------------------------------------------------
# banded forward
# ---------------------------------------------------------------------------


class TestBandedForward:
    def test_equals_exact_when_k_geq_T(self):
        rng = np.random.default_rng(3)
        obs, trans, emit, delta, *_ = random_model(rng, T=37, N=2)
        exact = forward_recursion(obs, trans, emit, delta).loglik
        for k in (37, 40, 100):
            cfg = BandedLikelihoodConfig(bandwidth=k, initial_distribution=delta)
            assert banded_forward(obs, trans, emit, cfg) == exact

    def test_short_final_block(self):
        rng = np.random.default_rng(4)
        obs, trans, emit, delta, *_ = random_model(rng, T=63, N=2)
        cfg = BandedLikelihoodConfig(bandwidth=5, initial_distribution=delta)
        val = banded_forward(obs, trans, emit, cfg)
        assert np.isfinite(val)
        segs = banded_segments(63, 5)
        assert segs[-1] == (55, 62, 60, "rho")

    def test_geometric_error_decay(self):
        rng = np.random.default_rng(5)
        T, N = 60, 2
        gam = np.array([[0.9, 0.1], [0.1, 0.9]])
        states = [0]
        for _ in range(T - 1):
            states.append(rng.choice(2, p=gam[states[-1]]))
        means = np.array([0.0, 2.0])
        obs = rng.normal(means[np.array(states)], 1.0)
        emit = GaussianEmissions(means, [1.0, 1.0])
        trans = TransitionModel.from_matrices(gam)
        delta = np.array([0.5, 0.5])
        exact = forward_recursion(obs, trans, emit, delta).loglik
        errs = []
        for k in (2, 5, 10, 15, 20):
            cfg = BandedLikelihoodConfig(bandwidth=k, initial_distribution=delta)
            errs.append(abs(exact - banded_forward(obs, trans, emit, cfg)))
        errs = np.array(errs)
        assert np.all(np.diff(errs) <= 1e-12)
        floored = errs[errs > 1e-12]
        assert np.all(np.diff(np.log(floored)) < 0)

    def test_banded_consistency_large_T(self):
        rng = np.random.default_rng(6)
        for T in (499, 500):
            obs, trans, emit, delta, *_ = random_model(rng, T=T, N=3)
            exact = forward_recursion(obs, trans, emit, delta).loglik
            cfg = BandedLikelihoodConfig(bandwidth=T, initial_distribution=delta)
            assert banded_forward(obs, trans, emit, cfg) == pytest.approx(
                exact, abs=1e-12
            )

    def test_monotone_decay_with_positive_entries(self):
        rng = np.random.default_rng(7)
        T = 400
        gam = np.array([[0.85, 0.15], [0.2, 0.8]])
        states = [0]
        for _ in range(T - 1):
            states.append(rng.choice(2, p=gam[states[-1]]))
        means = np.array([0.0, 1.5])
        obs = rng.normal(means[np.array(states)], 1.0)
        emit = GaussianEmissions(means, [1.0, 1.0])
        trans = TransitionModel.from_matrices(gam)
        delta = np.array([0.5, 0.5])
        exact = forward_recursion(obs, trans, emit, delta).loglik
        err = {}
        for k in range(2, 31):
            cfg = BandedLikelihoodConfig(bandwidth=k, initial_distribution=delta)
            err[k] = abs(exact - banded_forward(obs, trans, emit, cfg))
        for k in range(2, 26):
            assert err[k + 5] <= err[k] + 1e-12

    def test_iid_chain_forgets_in_one_step(self):
        rng = np.random.default_rng(8)
        T = 120
        gam = np.array([[0.3, 0.7], [0.3, 0.7]])  # rows equal: iid states
        obs = rng.normal(size=T)
        emit = GaussianEmissions([0.0, 1.0], [1.0, 1.0])
        trans = TransitionModel.from_matrices(gam)
        delta = np.array([0.3, 0.7])
        exact = forward_recursion(obs, trans, emit, delta).loglik
        for k in (1, 2, 3, 7):
            cfg = BandedLikelihoodConfig(bandwidth=k, initial_distribution=delta)
            assert abs(exact - banded_forward(obs, trans, emit, cfg)) <= 1e-12


class TestPhiSimplex:
    def test_intermediate_filters_are_probability_vectors(self):
        from hmmfields._kernels import forward_filter

        rng = np.random.default_rng(9)
        obs, trans, emit, delta, F, gammas = random_model(rng, T=300, N=3)
        logf = emit.log_density_matrix(obs)
        status, _, _, phis, _ = forward_filter(logf, gammas, delta)
        assert status == 0
        assert np.all(phis >= 0)
        assert np.allclose(phis.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


class TestLocalStateProbabilities:
    def test_single_state(self):
        obs = np.array([1.0, 2.0])
        emit = GaussianEmissions([0.0], [1.0])
        trans = TransitionModel.from_matrices(np.ones((1, 1)))
        post = local_state_probabilities(obs, trans, emit, np.array([1.0]))
        assert np.allclose(post, 1.0)

    def test_symmetry_gives_uniform(self):
        obs = np.array([0.2, -0.4, 0.9])
        emit = GaussianEmissions([0.5, 0.5], [1.0, 1.0])
        trans = TransitionModel.from_matrices(np.full((2, 2), 0.5))
        post = local_state_probabilities(obs, trans, emit, np.array([0.5, 0.5]))
        assert np.allclose(post, 0.5, atol=1e-12)

    def test_matches_path_enumeration(self):
        rng = np.random.default_rng(10)
        obs, trans, emit, delta, F, gammas = random_model(rng, T=5, N=2)
        post = local_state_probabilities(obs, trans, emit, delta)
        oracle = path_posteriors(F, gammas, delta)
        assert np.abs(post - oracle).max() <= 1e-10


class TestViterbi:
    def test_single_state(self):
        obs = np.array([1.0, 2.0, 3.0])
        emit = GaussianEmissions([0.0], [1.0])
        trans = TransitionModel.from_matrices(np.ones((1, 1)))
        assert np.array_equal(viterbi(obs, trans, emit, np.array([1.0])), [0, 0, 0])

    def test_disjoint_supports(self):
        # state 0 only sees negative values, state 1 only positive
        def lf0(x):
            return np.where(x < 0, 0.0, -np.inf)

        def lf1(x):
            return np.where(x > 0, 0.0, -np.inf)

        emit = CallableEmissions([lf0, lf1])
        obs = np.array([-1.0, 2.0, 3.0, -0.5])
        trans = TransitionModel.from_matrices(np.full((2, 2), 0.5))
        path = viterbi(obs, trans, emit, np.array([0.5, 0.5]))
        assert np.array_equal(path, [0, 1, 1, 0])

    def test_matches_path_enumeration(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            obs, trans, emit, delta, F, gammas = random_model(rng, T=5, N=2)
            path = viterbi(obs, trans, emit, delta)
            oracle = path_argmax(F, gammas, delta)
            assert np.array_equal(path, oracle)

    def test_tie_breaks_to_lower_index(self):
        emit = GaussianEmissions([0.0, 0.0], [1.0, 1.0])
        obs = np.zeros(4)
        trans = TransitionModel.from_matrices(np.full((2, 2), 0.5))
        path = viterbi(obs, trans, emit, np.array([0.5, 0.5]))
        assert np.array_equal(path, np.zeros(4))

    def test_structural_zeros_never_crossed(self):
        rng = np.random.default_rng(12)
        zeros = {(0, 2), (1, 0)}
        for _ in range(10):
            eta = rng.normal(0, 1.5, (3, 3))
            trans = TransitionModel.homogeneous(eta, structural_zeros=zeros)
            obs = rng.normal(0, 2, 40)
            emit = GaussianEmissions([-1.0, 0.0, 1.0], [1.0, 1.0, 1.0])
            path = viterbi(obs, trans, emit, np.full(3, 1 / 3))
            trans_pairs = set(zip(path[:-1], path[1:]))
            assert not (trans_pairs & zeros)


# ---------------------------------------------------------------------------
# periodically stationary distribution
# ---------------------------------------------------------------------------


class TestPeriodicStationary:
    def test_homogeneous_reduces_to_ordinary_stationary(self):
        gam = np.array([[0.9, 0.1], [0.4, 0.6]])
        trans = TransitionModel.from_matrices(gam)
        out = periodic_stationary(trans, 7)
        evals, evecs = np.linalg.eig(gam.T)
        pi = np.real(evecs[:, np.argmax(np.real(evals))])
        pi /= pi.sum()
        assert np.abs(out - pi).max() <= 1e-12

    def test_doubly_stochastic(self):
        trans = TransitionModel.from_matrices(np.full((2, 2), 0.5))
        out = periodic_stationary(trans, 5)
        assert np.allclose(out, 0.5, atol=1e-14)

    def test_sinusoidal_24h_left_eigenvector(self):
        L = 24

        def eta_fn(t):
            h = 2 * np.pi * t / L
            return np.array(
                [[0.0, -1.0 + np.sin(h)], [-0.5 + 0.8 * np.cos(h), 0.0]]
            )

        trans = TransitionModel(2, eta_fn)
        out = periodic_stationary(trans, L)
        mats = [trans.matrix(t % L) for t in range(L)]
        for t in range(L):
            m = np.eye(2)
            for s in range(t + 1, t + L + 1):
                m = m @ mats[s % L]
            # power-iteration oracle
            v = np.full(2, 0.5)
            for _ in range(400):
                v = v @ m
                v /= v.sum()
            assert np.abs(out[t] @ m - out[t]).max() <= 1e-12
            assert np.abs(out[t] - v).max() <= 1e-10

    def test_non_ergodic_raises(self):
        gam = np.array([[0.0, 1.0], [1.0, 0.0]])  # period-2 chain
        trans = TransitionModel.from_matrices(gam)
        with pytest.raises(NonErgodicCycle):
            periodic_stationary(trans, 3)

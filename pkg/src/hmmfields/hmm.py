"""HMM building blocks: transition link, forward recursions, decoding.

The exact scaled forward recursion and its banded block-wise variant share
one segment kernel; the banded algorithm evaluates the first two blocks
exactly and re-initializes every later block from a fixed probability
vector propagated through the previous block only, which truncates the
filter memory and makes distant log-likelihood summands independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .exceptions import AllZeroRow, NonErgodicCycle, ZeroLikelihoodStep


def softmax_rows(eta, structural_zeros=()):
    """Row-wise softmax link from linear predictors to a stochastic matrix.

    The diagonal is the reference category (treated as predictor 0);
    entries listed in ``structural_zeros`` are forced to exact zero before
    normalization.
    """
    eta = np.asarray(eta, dtype=float)
    n = eta.shape[0]
    work = eta.copy()
    np.fill_diagonal(work, 0.0)
    mask = np.ones((n, n), dtype=bool)
    for i, j in structural_zeros:
        mask[i, j] = False
    if not mask.any(axis=1).all():
        raise AllZeroRow("a row has every entry structurally zeroed")
    work = np.where(mask, work, -np.inf)
    work -= work.max(axis=1, keepdims=True)
    g = np.exp(work)
    out = g / g.sum(axis=1, keepdims=True)
    out[~mask] = 0.0
    return out


class TransitionModel:
    """Time-varying transition matrices produced through the softmax link.

    Parameters
    ----------
    n_states : int
    predictor : array or callable
        Either a constant (N, N) linear-predictor matrix, a (T, N, N) stack,
        or a callable mapping a 0-based time index to an (N, N) matrix.
        Diagonal predictors are the reference and treated as zero.
    structural_zeros : iterable of (i, j)
        Entries pinned to probability zero in every realized matrix.
    """

    def __init__(self, n_states, predictor, structural_zeros=()):
        self.n_states = int(n_states)
        self.structural_zeros = frozenset((int(i), int(j)) for i, j in structural_zeros)
        self._predictor = predictor
        self._matrices = None

    @classmethod
    def homogeneous(cls, eta, structural_zeros=()):
        return cls(np.asarray(eta).shape[0], np.asarray(eta, dtype=float), structural_zeros)

    @classmethod
    def from_matrices(cls, gammas):
        """Wrap pre-realized stochastic matrices (bypasses the link)."""
        gammas = np.asarray(gammas, dtype=float)
        if gammas.ndim == 2:
            gammas = gammas[None, :, :]
        obj = cls(gammas.shape[1], None)
        obj._matrices = gammas
        return obj

    def eta(self, t):
        if callable(self._predictor):
            return np.asarray(self._predictor(t), dtype=float)
        pred = np.asarray(self._predictor, dtype=float)
        if pred.ndim == 3:
            return pred[t]
        return pred

    def matrix(self, t):
        """Realized transition matrix for the step into time t."""
        if self._matrices is not None:
            idx = t if self._matrices.shape[0] > 1 else 0
            return self._matrices[idx]
        return softmax_rows(self.eta(t), self.structural_zeros)

    def matrices(self, T):
        """Stack of realized matrices for t = 0..T-1 (index 0 is unused by
        the forward recursion but kept for alignment)."""
        if self._matrices is not None:
            if self._matrices.shape[0] == 1:
                return np.broadcast_to(self._matrices[0], (T, self.n_states, self.n_states)).copy()
            if self._matrices.shape[0] < T:
                raise ValueError("fewer realized matrices than time points")
            return self._matrices[:T]
        if not callable(self._predictor) and np.asarray(self._predictor).ndim == 2:
            g = softmax_rows(np.asarray(self._predictor), self.structural_zeros)
            return np.broadcast_to(g, (T, self.n_states, self.n_states)).copy()
        return np.stack([self.matrix(t) for t in range(T)])


class EmissionModel:
    """Per-state log-density evaluators.

    Subclasses implement ``log_density_matrix(obs) -> (T, N)``; autoregressive
    families look up the previous observation internally.
    """

    n_states: int

    def log_density_matrix(self, obs):
        raise NotImplementedError


class GaussianEmissions(EmissionModel):
    """Independent Gaussian emissions with state-specific mean and sd."""

    def __init__(self, means, sds):
        self.means = np.asarray(means, dtype=float)
        self.sds = np.asarray(sds, dtype=float)
        self.n_states = self.means.size

    def log_density_matrix(self, obs):
        x = np.asarray(obs, dtype=float)[:, None]
        return -0.5 * np.log(2 * np.pi * self.sds**2) - (x - self.means) ** 2 / (
            2 * self.sds**2
        )


class CallableEmissions(EmissionModel):
    """Emissions from a list of vectorized log-density callables."""

    def __init__(self, log_densities):
        self._fns = list(log_densities)
        self.n_states = len(self._fns)

    def log_density_matrix(self, obs):
        obs = np.asarray(obs)
        return np.column_stack([fn(obs) for fn in self._fns])


@dataclass(frozen=True)
class ScaledForwardState:
    """Final scaled forward variable and accumulated log-likelihood."""

    phi: np.ndarray
    loglik: float


@dataclass
class BandedLikelihoodConfig:
    """Bandwidth and initialization vectors of the banded forward algorithm."""

    bandwidth: int
    rho: np.ndarray | None = None
    initial_distribution: np.ndarray | None = None

    def __post_init__(self):
        if self.bandwidth < 1:
            raise ValueError("bandwidth must be >= 1")

    def vectors(self, n_states):
        """Resolved (rho, delta) pair, defaulting to uniform vectors."""
        rho = self.rho if self.rho is not None else np.full(n_states, 1.0 / n_states)
        delta = (
            self.initial_distribution
            if self.initial_distribution is not None
            else np.full(n_states, 1.0 / n_states)
        )
        return np.asarray(rho, dtype=float), np.asarray(delta, dtype=float)


def banded_segments(T, k):
    """Segment plan of the banded forward algorithm.

    Each entry is (t0, t1, c0, init_kind): run the forward recursion over
    times t0..t1 inclusive, counting log-likelihood contributions from c0
    on, initialized from the model's initial distribution (``"delta"``) or
    the fixed restart vector (``"rho"``). The first two blocks form one
    exact run; a short final block keeps a full-length previous block.
    """
    if T <= 2 * k:
        return [(0, T - 1, 0, "delta")]
    n_blocks = -(-T // k)
    segs = [(0, 2 * k - 1, 0, "delta")]
    for b in range(3, n_blocks + 1):
        segs.append(((b - 2) * k, min(b * k, T) - 1, (b - 1) * k, "rho"))
    return segs


def _check(status, t_bad, offset=0):
    if status == _kernels.STATUS_ZERO:
        raise ZeroLikelihoodStep(offset + int(t_bad))


def forward_arrays(logf, gammas, init):
    """Exact scaled forward pass on pre-assembled arrays."""
    status, t_bad, ll, phi = _kernels.seg_value(
        np.ascontiguousarray(logf), np.ascontiguousarray(gammas), init, 0
    )
    _check(status, t_bad)
    return ScaledForwardState(phi=phi, loglik=float(ll))


def banded_forward_arrays(logf, gammas, k, rho, delta):
    """Banded forward log-likelihood on pre-assembled arrays."""
    logf = np.ascontiguousarray(logf)
    gammas = np.ascontiguousarray(gammas)
    total = 0.0
    for t0, t1, c0, kind in banded_segments(logf.shape[0], k):
        init = delta if kind == "delta" else rho
        status, t_bad, ll, _ = _kernels.seg_value(
            logf[t0 : t1 + 1], gammas[t0 : t1 + 1], init, c0 - t0
        )
        _check(status, t_bad, offset=t0)
        total += float(ll)
    return total


def _assemble(obs, trans, emit):
    logf = emit.log_density_matrix(obs)
    T = logf.shape[0]
    if T == 0:
        raise ValueError("empty observation segment")
    return logf, trans.matrices(T)


def forward_recursion(obs, trans, emit, init):
    """Exact scaled forward recursion (log-likelihood and final filter)."""
    logf, gammas = _assemble(obs, trans, emit)
    return forward_arrays(logf, gammas, np.asarray(init, dtype=float))


def banded_forward(obs, trans, emit, cfg):
    """Approximate log-likelihood of the banded forward algorithm.

    Equals the exact forward log-likelihood whenever cfg.bandwidth >= T.
    """
    logf, gammas = _assemble(obs, trans, emit)
    rho, delta = cfg.vectors(trans.n_states)
    return banded_forward_arrays(logf, gammas, cfg.bandwidth, rho, delta)


def local_state_probabilities(obs, trans, emit, init):
    """Smoothing probabilities Pr(S_t = j | all observations), rows sum to 1."""
    logf, gammas = _assemble(obs, trans, emit)
    logf = np.ascontiguousarray(logf)
    gammas = np.ascontiguousarray(gammas)
    status, t_bad, _, phis, cs = _kernels.forward_filter(
        logf, gammas, np.asarray(init, dtype=float)
    )
    _check(status, t_bad)
    return _kernels.backward_smooth(logf, gammas, phis, cs)


def viterbi(obs, trans, emit, init):
    """Most likely state sequence; ties break toward the lower state index."""
    logf, gammas = _assemble(obs, trans, emit)
    with np.errstate(divide="ignore"):
        loggam = np.log(gammas)
        loginit = np.log(np.asarray(init, dtype=float))
    return _kernels.viterbi_path(
        np.ascontiguousarray(logf), np.ascontiguousarray(loggam), loginit
    )


def periodic_stationary(trans, period):
    """Per-phase stationary distributions of a periodic chain.

    Row t solves delta M = delta with M the product of one full period of
    transition matrices starting after phase t (indices mod period).
    """
    L = int(period)
    n = trans.n_states
    mats = [trans.matrix(t % L) for t in range(L)]
    out = np.empty((L, n))
    for t in range(L):
        m = np.eye(n)
        for s in range(t + 1, t + L + 1):
            m = m @ mats[s % L]
        ev = np.sort(np.abs(np.linalg.eigvals(m)))
        if ev.size > 1 and ev[-2] > 1.0 - 1e-8:
            raise NonErgodicCycle(
                f"stationary vector not unique at phase {t} (|lambda_2| = {ev[-2]:.3g})"
            )
        a = np.vstack([m.T - np.eye(n), np.ones((1, n))])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        delta, *_ = np.linalg.lstsq(a, b, rcond=None)
        out[t] = delta
    return out

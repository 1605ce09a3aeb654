"""Concrete model families: signal-plus-field and spatial state switching.

Both families compose a banded HMM log-likelihood with GMRF densities into
a JointNll whose latent gradient and Hessian are assembled analytically
from per-segment sensitivity kernels:

- signal-plus-field: the latent vector is the denoised signal entering the
  emission densities, so the Hessian is banded (half-bandwidth 2k with
  autoregressive emissions, 2k - 1 without).
- spatial switching: the latent vector stacks field weights entering
  transition-matrix linear predictors through a sparse projection, so the
  Hessian is the GMRF pattern plus block-local projection couplings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .emissions import (
    emg_logdensity_derivatives,
    gamma_logdensity,
    gaussian_logdensity,
    periodic_predictor,
    wrapped_cauchy_logdensity,
)
from .exceptions import ConfigError, DimensionMismatch, ZeroLikelihoodStep
from .hmm import banded_segments, softmax_rows
from .laplace import JointNll
from .sparse import BandedSymmetric, SparseSymmetric
from .spde import PrecisionSpec, assemble_1d, assemble_2d, Mesh1D, build_precision, cached_cholesky, gmrf_logdensity, project

FLARE_STRUCTURAL_ZEROS = frozenset({(0, 2), (1, 0)})


def flare_transition_matrix(params):
    """Transition matrix of the quiet/firing/decaying chain.

    ``params`` holds the four free linear predictors (qf, fd, dq, df);
    quiet->decaying and firing->quiet are structural zeros, so compound
    flares (decaying->firing) stay possible and the chain is ergodic with
    index of primitivity 2.
    """
    eta_qf, eta_fd, eta_dq, eta_df = np.asarray(params, dtype=float)
    eta = np.array(
        [
            [0.0, eta_qf, 0.0],
            [0.0, 0.0, eta_fd],
            [eta_dq, eta_df, 0.0],
        ]
    )
    return softmax_rows(eta, FLARE_STRUCTURAL_ZEROS)


def _softmax_stack(eta):
    """Row-softmax over a (T, N, N) predictor stack (diagonal = reference 0)."""
    m = eta.max(axis=2, keepdims=True)
    e = np.exp(eta - m)
    return e / e.sum(axis=2, keepdims=True)


def _delta_from_logits(n, logits):
    z = np.concatenate([[0.0], np.asarray(logits, dtype=float)])
    e = np.exp(z - z.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# Example 1: observed series = latent switching signal + GP noise
# ---------------------------------------------------------------------------


@dataclass
class FlareStates:
    """Quiet / firing / decaying state-dependent model (shared sigma)."""

    sigma_init: float = 0.1
    lambda_init: float = 5.0
    r_init: float = 0.8
    eta_init: np.ndarray = field(default_factory=lambda: np.zeros(4))

    n_states = 3
    autoregressive = True


@dataclass
class GaussianStates:
    """Generic N-state Gaussian emissions with fixed means."""

    means: np.ndarray
    sd_init: np.ndarray
    eta_init: np.ndarray | None = None  # row-major off-diagonals; None for N = 1

    autoregressive = False

    @property
    def n_states(self):
        return np.asarray(self.means).size


@dataclass
class SignalPlusFieldModel:
    """Configuration of the signal-plus-field family (Example 1)."""

    states: FlareStates | GaussianStates
    tau_init: float = 1.0
    kappa_init: float = 1.0
    omega_init: float | None = None
    mu_init: float = 0.0
    estimate_delta: bool = False


def _offdiag_pairs(n):
    return [(i, j) for i in range(n) for j in range(n) if i != j]


class SignalFieldNll(JointNll):
    """Joint NLL of Example 1; latent dimension equals the series length."""

    def __init__(self, model, y, cfg, segment_starts=None):
        self.model = model
        self.y = np.asarray(y, dtype=float)
        self.T = self.y.size
        self.cfg = cfg
        self.k = cfg.bandwidth
        self.latent_dim = self.T
        starts = sorted(set([0] + list(segment_starts or [])))
        bounds = starts + [self.T]
        self.segments = [(bounds[i], bounds[i + 1]) for i in range(len(starts))]
        self.mesh = Mesh1D(np.arange(self.T, dtype=float))
        self.fem = assemble_1d(self.mesh)
        st = model.states
        self.n_states = st.n_states
        self._ar = st.autoregressive
        names, transforms, init = [], [], []
        if isinstance(st, FlareStates):
            names += ["sigma", "lambda", "r"]
            transforms += ["log", "log", "logit"]
            init += [st.sigma_init, st.lambda_init, st.r_init]
            names += ["eta_qf", "eta_fd", "eta_dq", "eta_df"]
            transforms += ["identity"] * 4
            init += list(np.asarray(st.eta_init, dtype=float))
        else:
            n = st.n_states
            for j in range(n):
                names.append(f"sd_{j + 1}")
                transforms.append("log")
                init.append(float(np.asarray(st.sd_init)[j]))
            if n > 1:
                for idx, (i, j) in enumerate(_offdiag_pairs(n)):
                    names.append(f"eta_{i + 1}{j + 1}")
                    transforms.append("identity")
                    init.append(float(np.asarray(st.eta_init)[idx]))
        names.append("mu")
        transforms.append("identity")
        init.append(model.mu_init)
        names += ["tau", "kappa"]
        transforms += ["log", "log"]
        init += [model.tau_init, model.kappa_init]
        if model.omega_init is not None:
            names.append("omega")
            transforms.append("logit")
            init.append(model.omega_init)
        if model.estimate_delta:
            for j in range(1, self.n_states):
                names.append(f"delta_logit_{j + 1}")
                transforms.append("identity")
                init.append(0.0)
        self.param_names = names
        self.transforms = transforms
        self.theta0 = np.array(init)
        qband = 2  # two-hop pattern of the 1D precision
        self.declared_half_bandwidth = min(
            max(2 * self.k - (0 if self._ar else 1), qband), self.T - 1
        )
        self._theta_key = None
        self._theta_cache = None

    # -- parameter unpacking -------------------------------------------------

    def _unpack(self, theta):
        st = self.model.states
        pos = 0
        out = {}
        if isinstance(st, FlareStates):
            out["sigma"], out["lambda"], out["r"] = theta[0], theta[1], theta[2]
            out["eta"] = np.asarray(theta[3:7], dtype=float)
            pos = 7
        else:
            n = st.n_states
            out["sds"] = np.asarray(theta[pos : pos + n], dtype=float)
            pos += n
            if n > 1:
                out["eta"] = np.asarray(theta[pos : pos + n * (n - 1)], dtype=float)
                pos += n * (n - 1)
        out["mu"] = float(theta[pos])
        pos += 1
        out["tau"], out["kappa"] = float(theta[pos]), float(theta[pos + 1])
        pos += 2
        if self.model.omega_init is not None:
            out["omega"] = float(theta[pos])
            pos += 1
        else:
            out["omega"] = None
        if self.model.estimate_delta:
            out["delta"] = _delta_from_logits(
                self.n_states, theta[pos : pos + self.n_states - 1]
            )
        else:
            out["delta"] = np.full(self.n_states, 1.0 / self.n_states)
        return out

    def _prep(self, theta):
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key == self._theta_key:
            return self._theta_cache
        pars = self._unpack(theta)
        st = self.model.states
        n = self.n_states
        if isinstance(st, FlareStates):
            eta = np.array(
                [
                    [0.0, pars["eta"][0], 0.0],
                    [0.0, 0.0, pars["eta"][1]],
                    [pars["eta"][2], pars["eta"][3], 0.0],
                ]
            )
            gamma = softmax_rows(eta, FLARE_STRUCTURAL_ZEROS)
        elif n > 1:
            eta = np.zeros((n, n))
            for val, (i, j) in zip(pars["eta"], _offdiag_pairs(n)):
                eta[i, j] = val
            gamma = softmax_rows(eta)
        else:
            gamma = np.ones((1, 1))
        spec = PrecisionSpec(tau=pars["tau"], kappa=pars["kappa"], omega=pars["omega"])
        q = build_precision(self.fem, spec)
        cache = {"pars": pars, "gamma": gamma, "q": q}
        self._theta_key = key
        self._theta_cache = cache
        return cache

    # -- emission derivative arrays -------------------------------------------

    def _emissions(self, x, pars, order):
        """(logf, dlf, d2lf) over the full series; prev resets at segment
        starts (conditioning value 0 with zero derivative)."""
        T, n = self.T, self.n_states
        prev = np.empty(T)
        prev[0] = 0.0
        prev[1:] = x[:-1]
        first = np.zeros(T, dtype=bool)
        for s0, _ in self.segments:
            prev[s0] = 0.0
            first[s0] = True
        logf = np.empty((T, n))
        dlf = np.zeros((T, n, 2)) if order >= 1 else None
        d2lf = np.zeros((T, n, 3)) if order >= 2 else None
        st = self.model.states
        if isinstance(st, FlareStates):
            sig, lam, r = pars["sigma"], pars["lambda"], pars["r"]
            logf[:, 0] = gaussian_logdensity(x, 0.0, sig)
            lf, dloc, dy, dloc2, dlocdy, dy2 = emg_logdensity_derivatives(
                x, prev, sig, lam
            )
            logf[:, 1] = lf
            resid = x - r * prev
            logf[:, 2] = -0.5 * np.log(2 * np.pi * sig**2) - resid**2 / (2 * sig**2)
            if order >= 1:
                dlf[:, 0, 1] = -x / sig**2
                dlf[:, 1, 0] = dloc
                dlf[:, 1, 1] = dy
                dlf[:, 2, 0] = r * resid / sig**2
                dlf[:, 2, 1] = -resid / sig**2
            if order >= 2:
                d2lf[:, 0, 2] = -1.0 / sig**2
                d2lf[:, 1, 0] = dloc2
                d2lf[:, 1, 1] = dlocdy
                d2lf[:, 1, 2] = dy2
                d2lf[:, 2, 0] = -(r**2) / sig**2
                d2lf[:, 2, 1] = r / sig**2
                d2lf[:, 2, 2] = -1.0 / sig**2
        else:
            means = np.asarray(st.means, dtype=float)
            sds = pars["sds"]
            for j in range(n):
                logf[:, j] = gaussian_logdensity(x, means[j], sds[j])
                if order >= 1:
                    dlf[:, j, 1] = -(x - means[j]) / sds[j] ** 2
                if order >= 2:
                    d2lf[:, j, 2] = -1.0 / sds[j] ** 2
        if order >= 1:
            dlf[first, :, 0] = 0.0
        if order >= 2:
            d2lf[first, :, 0] = 0.0
            d2lf[first, :, 1] = 0.0
        return logf, dlf, d2lf

    # -- JointNll interface ----------------------------------------------------

    def hessian_pattern(self):
        return BandedSymmetric(self.T, self.declared_half_bandwidth)

    def value(self, x, theta):
        x = np.asarray(x, dtype=float)
        cache = self._prep(theta)
        pars = cache["pars"]
        logf, _, _ = self._emissions(x, pars, order=0)
        ll = self._hmm_pass(x, cache, logf, order=0)[0]
        return -ll - gmrf_logdensity(self.y, x + pars["mu"], cache["q"])

    def grad_x(self, x, theta):
        x = np.asarray(x, dtype=float)
        cache = self._prep(theta)
        pars = cache["pars"]
        logf, dlf, _ = self._emissions(x, pars, order=1)
        _, grad, _ = self._hmm_pass(x, cache, logf, order=1, dlf=dlf)
        q = cache["q"]
        dev = self.y - x - pars["mu"]
        return -grad - q.to_scipy() @ dev

    def hess_x(self, x, theta):
        x = np.asarray(x, dtype=float)
        cache = self._prep(theta)
        pars = cache["pars"]
        logf, dlf, d2lf = self._emissions(x, pars, order=2)
        hbw = self.declared_half_bandwidth
        bands = np.zeros((hbw + 1, self.T))
        self._hmm_pass(x, cache, logf, order=2, dlf=dlf, d2lf=d2lf, bands=bands)
        coo = sp.tril(cache["q"].to_scipy()).tocoo()
        bands[coo.row - coo.col, coo.col] += coo.data
        return BandedSymmetric(self.T, hbw, bands)

    def _hmm_pass(self, x, cache, logf, order, dlf=None, d2lf=None, bands=None):
        """Banded HMM log-likelihood and optional derivative accumulation.

        With order 2, per-segment Hessians are subtracted from ``bands``
        (they enter g with a minus sign).
        """
        n = self.n_states
        delta = cache["pars"]["delta"]
        rho, _ = self.cfg.vectors(n)
        total = 0.0
        grad = np.zeros(self.T) if order >= 1 else None
        m = logf.max(axis=1)
        p = np.exp(logf - m[:, None])
        for seg_start, seg_end in self.segments:
            L_seg = seg_end - seg_start
            for t0, t1, c0, kind in banded_segments(L_seg, self.k):
                g0, g1 = seg_start + t0, seg_start + t1
                init = delta if kind == "delta" else rho
                gam = np.ascontiguousarray(
                    np.broadcast_to(cache["gamma"], (g1 - g0 + 1, n, n))
                )
                if order == 0:
                    status, tbad, ll, _ = _kernels.seg_value(
                        logf[g0 : g1 + 1], gam, init, c0 - t0
                    )
                else:
                    status, tbad, ll, gseg, hseg = _kernels.emission_sensitivity(
                        gam,
                        p[g0 : g1 + 1],
                        m[g0 : g1 + 1],
                        dlf[g0 : g1 + 1],
                        d2lf[g0 : g1 + 1] if order >= 2 else np.zeros((g1 - g0 + 1, n, 3)),
                        init,
                        c0 - t0,
                        order,
                    )
                if status != _kernels.STATUS_OK:
                    raise ZeroLikelihoodStep(g0 + int(tbad))
                total += float(ll)
                if order >= 1:
                    if g0 == seg_start:
                        lo = g0
                        gs = gseg[1:]
                        hs = hseg[1:, 1:] if order >= 2 else None
                    else:
                        lo = g0 - 1
                        gs = gseg
                        hs = hseg if order >= 2 else None
                    grad[lo : lo + gs.size] += gs
                    if order >= 2:
                        _kernels.add_band_block(bands, -np.ascontiguousarray(hs), lo)
        return total, grad, bands


# ---------------------------------------------------------------------------
# Example 2: transition probabilities driven by latent spatial fields
# ---------------------------------------------------------------------------


@dataclass
class FieldAttachment:
    """Attach latent field ``field`` to the linear predictor of entry
    (from_state, to_state) of the transition matrix."""

    from_state: int
    to_state: int
    field: int = 0


@dataclass
class SpatialSwitchingModel:
    """Configuration of the spatial switching family (Example 2)."""

    n_states: int
    step_mean_init: np.ndarray
    step_sd_init: np.ndarray
    beta0_init: np.ndarray  # row-major off-diagonals
    attachments: list
    tau_init: np.ndarray  # one per field
    kappa_init: np.ndarray
    angle_loc_init: np.ndarray | None = None
    angle_conc_init: np.ndarray | None = None
    trig_order: int = 0
    initial_distribution: np.ndarray | None = None
    estimate_delta: bool = False

    @property
    def n_fields(self):
        return 1 + max(a.field for a in self.attachments) if self.attachments else 0

    @property
    def use_angles(self):
        return self.angle_loc_init is not None


class SpatialSwitchingNll(JointNll):
    """Joint NLL of Example 2; latent vector stacks the field weights."""

    def __init__(self, model, data, mesh, cfg):
        self.model = model
        self.cfg = cfg
        self.k = cfg.bandwidth
        self.mesh = mesh
        self.steps = np.asarray(data["step"], dtype=float)
        self.T = self.steps.size
        self.angles = (
            np.asarray(data["angle"], dtype=float) if model.use_angles else None
        )
        self.hours = (
            np.asarray(data["hour"], dtype=float) if model.trig_order else None
        )
        locations = np.asarray(data["locations"], dtype=float)
        if locations.shape[0] != self.T:
            raise DimensionMismatch("locations and steps must have equal length")
        self.fem = assemble_1d(mesh) if isinstance(mesh, Mesh1D) else assemble_2d(mesh)
        self.projection = project(mesh, locations)
        self.l_mesh = self.fem.dim
        self.n_fields = model.n_fields
        self.latent_dim = self.n_fields * self.l_mesh
        n = model.n_states
        self.n_states = n
        self.offdiag = _offdiag_pairs(n)
        self.att_rows = np.array([a.from_state for a in model.attachments], dtype=np.int64)
        self.att_cols = np.array([a.to_state for a in model.attachments], dtype=np.int64)
        self.att_fields = np.array([a.field for a in model.attachments], dtype=np.int64)
        names, transforms, init = [], [], []
        for j in range(n):
            names.append(f"step_mean_{j + 1}")
            transforms.append("log")
            init.append(float(np.asarray(model.step_mean_init)[j]))
        for j in range(n):
            names.append(f"step_sd_{j + 1}")
            transforms.append("log")
            init.append(float(np.asarray(model.step_sd_init)[j]))
        if model.use_angles:
            for j in range(n):
                names.append(f"angle_loc_{j + 1}")
                transforms.append("identity")
                init.append(float(np.asarray(model.angle_loc_init)[j]))
            for j in range(n):
                names.append(f"angle_conc_{j + 1}")
                transforms.append("logit")
                init.append(float(np.asarray(model.angle_conc_init)[j]))
        for idx, (i, j) in enumerate(self.offdiag):
            names.append(f"beta0_{i + 1}{j + 1}")
            transforms.append("identity")
            init.append(float(np.asarray(model.beta0_init)[idx]))
        if model.trig_order:
            if model.trig_order != 3:
                raise ConfigError("only trig_order 3 (or 0) is supported")
            for i, j in self.offdiag:
                for term in range(6):
                    kind = "sin" if term < 3 else "cos"
                    names.append(f"trig_{i + 1}{j + 1}_{kind}{term % 3 + 1}")
                    transforms.append("identity")
                    init.append(0.0)
        for f in range(self.n_fields):
            names += [f"tau_{f + 1}", f"kappa_{f + 1}"]
            transforms += ["log", "log"]
            init += [
                float(np.asarray(model.tau_init)[f]),
                float(np.asarray(model.kappa_init)[f]),
            ]
        if model.estimate_delta:
            for j in range(1, n):
                names.append(f"delta_logit_{j + 1}")
                transforms.append("identity")
                init.append(0.0)
        self.param_names = names
        self.transforms = transforms
        self.theta0 = np.array(init)
        self._theta_key = None
        self._theta_cache = None
        self._build_plan()

    # -- assembly plan ---------------------------------------------------------

    def _build_plan(self):
        a_csr = self.projection.matrix
        n_att = len(self.model.attachments)
        segs = banded_segments(self.T, self.k)
        plan = []
        pair_rows, pair_cols = [], []
        for t0, t1, c0, kind in segs:
            L = t1 - t0 + 1
            q = L * n_att
            cols_per_scalar = []
            wloc_entries = []
            local_index = {}
            local_cols = []
            for tau in range(L):
                t = t0 + tau
                row = slice(a_csr.indptr[t], a_csr.indptr[t + 1])
                idx = a_csr.indices[row]
                wgt = a_csr.data[row]
                for a in range(n_att):
                    gcols = idx * self.n_fields + self.att_fields[a]
                    locs = []
                    for gc, wv in zip(gcols, wgt):
                        if gc not in local_index:
                            local_index[gc] = len(local_cols)
                            local_cols.append(gc)
                        locs.append((local_index[gc], wv))
                    wloc_entries.append(locs)
                    cols_per_scalar.append(gcols)
            nl = len(local_cols)
            wloc = np.zeros((q, nl))
            for s, locs in enumerate(wloc_entries):
                for li, wv in locs:
                    wloc[s, li] = wv
            local_cols = np.array(local_cols, dtype=np.int64)
            gi = np.repeat(local_cols, nl)
            gj = np.tile(local_cols, nl)
            keep = gi >= gj
            pair_rows.append(gi[keep])
            pair_cols.append(gj[keep])
            plan.append(
                {
                    "t0": t0,
                    "t1": t1,
                    "c0": c0,
                    "kind": kind,
                    "wloc": wloc,
                    "local_cols": local_cols,
                }
            )
        # union pattern: per-field precision blocks + projection couplings
        qpat_rows = []
        qpat_cols = []
        fem_builder_pattern = build_precision(
            self.fem, PrecisionSpec(tau=1.0, kappa=1.0)
        )
        for f in range(self.n_fields):
            qpat_rows.append(fem_builder_pattern.rows * self.n_fields + f)
            qpat_cols.append(fem_builder_pattern.cols * self.n_fields + f)
        all_rows = np.concatenate(qpat_rows + pair_rows)
        all_cols = np.concatenate(qpat_cols + pair_cols)
        keys = np.unique(all_rows * self.latent_dim + all_cols)
        self._pattern = SparseSymmetric(
            self.latent_dim,
            keys // self.latent_dim,
            keys % self.latent_dim,
            np.zeros(keys.size),
        )
        self._keys = keys
        self._q_positions = []
        for f in range(self.n_fields):
            kq = (fem_builder_pattern.rows * self.n_fields + f) * self.latent_dim + (
                fem_builder_pattern.cols * self.n_fields + f
            )
            self._q_positions.append(np.searchsorted(keys, kq))
        for item in plan:
            lc = item["local_cols"]
            nl = lc.size
            pos = np.zeros((nl, nl), dtype=np.int64)
            for a in range(nl):
                for b in range(a + 1):
                    gi, gj = max(lc[a], lc[b]), min(lc[a], lc[b])
                    pos[a, b] = np.searchsorted(keys, gi * self.latent_dim + gj)
            item["pos"] = pos
        self._plan = plan

    # -- per-theta cache ---------------------------------------------------------

    def _unpack(self, theta):
        n = self.n_states
        pos = 0
        out = {}
        out["step_mean"] = np.asarray(theta[pos : pos + n], dtype=float)
        pos += n
        out["step_sd"] = np.asarray(theta[pos : pos + n], dtype=float)
        pos += n
        if self.model.use_angles:
            out["angle_loc"] = np.asarray(theta[pos : pos + n], dtype=float)
            pos += n
            out["angle_conc"] = np.asarray(theta[pos : pos + n], dtype=float)
            pos += n
        n_off = len(self.offdiag)
        out["beta0"] = np.asarray(theta[pos : pos + n_off], dtype=float)
        pos += n_off
        if self.model.trig_order:
            out["trig"] = np.asarray(
                theta[pos : pos + 6 * n_off], dtype=float
            ).reshape(n_off, 6)
            pos += 6 * n_off
        out["tau"] = np.empty(self.n_fields)
        out["kappa"] = np.empty(self.n_fields)
        for f in range(self.n_fields):
            out["tau"][f] = theta[pos]
            out["kappa"][f] = theta[pos + 1]
            pos += 2
        if self.model.estimate_delta:
            out["delta"] = _delta_from_logits(n, theta[pos : pos + n - 1])
        elif self.model.initial_distribution is not None:
            out["delta"] = np.asarray(self.model.initial_distribution, dtype=float)
        else:
            out["delta"] = np.full(n, 1.0 / n)
        return out

    def _prep(self, theta):
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key == self._theta_key:
            return self._theta_cache
        pars = self._unpack(theta)
        n = self.n_states
        logf = np.empty((self.T, n))
        for j in range(n):
            logf[:, j] = gamma_logdensity(
                self.steps, pars["step_mean"][j], pars["step_sd"][j]
            )
            if self.model.use_angles:
                logf[:, j] += wrapped_cauchy_logdensity(
                    self.angles, pars["angle_loc"][j], pars["angle_conc"][j]
                )
        m = logf.max(axis=1)
        p = np.exp(logf - m[:, None])
        base_eta = np.zeros((self.T, n, n))
        for idx, (i, j) in enumerate(self.offdiag):
            base_eta[:, i, j] = pars["beta0"][idx]
            if self.model.trig_order:
                base_eta[:, i, j] += periodic_predictor(self.hours, pars["trig"][idx])
        qs = []
        for f in range(self.n_fields):
            spec = PrecisionSpec(tau=pars["tau"][f], kappa=pars["kappa"][f])
            qs.append(build_precision(self.fem, spec))
        cache = {"pars": pars, "logf": logf, "m": m, "p": p, "base_eta": base_eta, "qs": qs}
        self._theta_key = key
        self._theta_cache = cache
        return cache

    def _field_blocks(self, x):
        # fields are interleaved node-major, which keeps the joint Hessian
        # bandwidth close to the single-field bandwidth
        return [x[f :: self.n_fields] for f in range(self.n_fields)]

    def _gamma_stack(self, x, cache):
        eta = cache["base_eta"].copy()
        a_csr = self.projection.matrix
        blocks = self._field_blocks(x)
        for a in range(len(self.model.attachments)):
            vals = a_csr @ blocks[self.att_fields[a]]
            eta[:, self.att_rows[a], self.att_cols[a]] += vals
        return _softmax_stack(eta)

    # -- JointNll interface --------------------------------------------------------

    def hessian_pattern(self):
        return self._pattern

    def value(self, x, theta):
        x = np.asarray(x, dtype=float)
        cache = self._prep(theta)
        gam = self._gamma_stack(x, cache)
        rho, _ = self.cfg.vectors(self.n_states)
        delta = cache["pars"]["delta"]
        logf = cache["logf"]
        total = 0.0
        for t0, t1, c0, kind in banded_segments(self.T, self.k):
            init = delta if kind == "delta" else rho
            status, tbad, ll, _ = _kernels.seg_value(
                logf[t0 : t1 + 1],
                np.ascontiguousarray(gam[t0 : t1 + 1]),
                init,
                c0 - t0,
            )
            if status != _kernels.STATUS_OK:
                raise ZeroLikelihoodStep(t0 + int(tbad))
            total += float(ll)
        g = -total
        for f, xf in enumerate(self._field_blocks(x)):
            g -= gmrf_logdensity(xf, 0.0, cache["qs"][f])
        return g

    def _eta_sensitivities(self, x, cache, order):
        """Per-segment kernel results plus the banded log-likelihood."""
        gam = self._gamma_stack(x, cache)
        rho, _ = self.cfg.vectors(self.n_states)
        delta = cache["pars"]["delta"]
        p, m = cache["p"], cache["m"]
        out = []
        total = 0.0
        for item in self._plan:
            t0, t1, c0 = item["t0"], item["t1"], item["c0"]
            init = delta if item["kind"] == "delta" else rho
            status, tbad, ll, gseg, hseg = _kernels.tpm_sensitivity(
                np.ascontiguousarray(gam[t0 : t1 + 1]),
                p[t0 : t1 + 1],
                m[t0 : t1 + 1],
                init,
                c0 - t0,
                self.att_rows,
                self.att_cols,
                order,
            )
            if status != _kernels.STATUS_OK:
                raise ZeroLikelihoodStep(t0 + int(tbad))
            total += float(ll)
            out.append((item, gseg, hseg))
        return total, out

    def grad_x(self, x, theta):
        x = np.asarray(x, dtype=float)
        cache = self._prep(theta)
        _, segments = self._eta_sensitivities(x, cache, order=1)
        grad = np.zeros(self.latent_dim)
        for item, gseg, _ in segments:
            grad[item["local_cols"]] -= item["wloc"].T @ gseg
        for f, xf in enumerate(self._field_blocks(x)):
            grad[f :: self.n_fields] += cache["qs"][f].to_scipy() @ xf
        return grad

    def hess_x(self, x, theta):
        x = np.asarray(x, dtype=float)
        cache = self._prep(theta)
        _, segments = self._eta_sensitivities(x, cache, order=2)
        data = np.zeros(self._keys.size)
        for f in range(self.n_fields):
            np.add.at(data, self._q_positions[f], cache["qs"][f].vals)
        for item, _, hseg in segments:
            hloc = item["wloc"].T @ hseg @ item["wloc"]
            _kernels.scatter_lower(data, -hloc, item["pos"])
        return self._pattern.with_values(data)


# ---------------------------------------------------------------------------
# builder API
# ---------------------------------------------------------------------------


def build_joint_nll(model, data, cfg, mesh=None, segment_starts=None):
    """Wire a model configuration and data into a JointNll object.

    Example-1 models take ``data`` with key "y"; Example-2 models take
    "step", "locations" and optionally "angle"/"hour", plus a mesh.
    """
    if isinstance(model, SignalPlusFieldModel):
        return SignalFieldNll(model, data["y"], cfg, segment_starts=segment_starts)
    if isinstance(model, SpatialSwitchingModel):
        if mesh is None:
            raise ConfigError("spatial switching models need a mesh")
        return SpatialSwitchingNll(model, data, mesh, cfg)
    raise ConfigError(f"unknown model type {type(model).__name__}")


def model_from_config(cfg):
    """Build a model object from a declarative JSON-style dict."""
    kind = cfg.get("model")
    if kind == "signal_plus_field":
        st = cfg["states"]
        if st["family"] == "flare":
            states = FlareStates(
                sigma_init=st.get("sigma_init", 0.1),
                lambda_init=st.get("lambda_init", 5.0),
                r_init=st.get("r_init", 0.8),
                eta_init=np.asarray(st.get("eta_init", [0.0] * 4), dtype=float),
            )
        elif st["family"] == "gaussian":
            states = GaussianStates(
                means=np.asarray(st["means"], dtype=float),
                sd_init=np.asarray(st["sd_init"], dtype=float),
                eta_init=np.asarray(st["eta_init"], dtype=float)
                if "eta_init" in st
                else None,
            )
        else:
            raise ConfigError(f"unknown state family {st['family']!r}")
        gp = cfg.get("gp", {})
        return SignalPlusFieldModel(
            states=states,
            tau_init=gp.get("tau_init", 1.0),
            kappa_init=gp.get("kappa_init", 1.0),
            omega_init=gp.get("omega_init"),
            mu_init=cfg.get("mu_init", 0.0),
            estimate_delta=cfg.get("estimate_delta", False),
        )
    if kind == "spatial_switching":
        trans = cfg["transitions"]
        attachments = [
            FieldAttachment(a["from"], a["to"], a.get("field", 0))
            for a in trans.get("field_attachments", [])
        ]
        fields = cfg.get("fields", [])
        angle_cfg = cfg.get("angle_emissions")
        return SpatialSwitchingModel(
            n_states=cfg["n_states"],
            step_mean_init=np.asarray(cfg["step_emissions"]["mean_init"], dtype=float),
            step_sd_init=np.asarray(cfg["step_emissions"]["sd_init"], dtype=float),
            beta0_init=np.asarray(trans["intercept_init"], dtype=float),
            attachments=attachments,
            tau_init=np.asarray([f.get("tau_init", 1.0) for f in fields], dtype=float),
            kappa_init=np.asarray(
                [f.get("kappa_init", 1.0) for f in fields], dtype=float
            ),
            angle_loc_init=np.asarray(angle_cfg["loc_init"], dtype=float)
            if angle_cfg and angle_cfg.get("enabled", True)
            else None,
            angle_conc_init=np.asarray(angle_cfg["conc_init"], dtype=float)
            if angle_cfg and angle_cfg.get("enabled", True)
            else None,
            trig_order=trans.get("trig_order", 0),
            initial_distribution=np.asarray(cfg["initial_distribution"], dtype=float)
            if "initial_distribution" in cfg
            else None,
            estimate_delta=cfg.get("estimate_delta", False),
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def load_model_config(path):
    with open(path) as fh:
        return json.load(fh)

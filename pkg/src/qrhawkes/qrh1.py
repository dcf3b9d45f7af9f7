"""Single-queue hybrid model: queue-dependent baseline plus Hawkes excitation.

For event types L (0), C (1) and M (2) at one fixed-price level,

    lambda_l(t) = mu_l(min(q(t-), Q_max)) + sum_m sum_u alpha[l, m, u] g[m, u](t)

with C and M switched off while the queue is empty.  Each segment (constant
reference price) is an independent realization with its own memory.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InconsistencyError
from .kernels import DecaySet, as_betas
from .lobdata import Segment
from .optim import LogLinearProblem, maximize_nonneg
from .timeline import build_timeline

N_TYPES = 3
GATED = (1, 2)  # C and M vanish on an empty queue


@dataclass(frozen=True)
class Qrh1Params:
    """``mu`` has shape (D, Q_max + 1); ``alphas`` has shape (D, D, U).

    ``mu_missing`` flags baselines of never-visited states; they hold 0 and
    are not counted as estimated.
    """

    mu: np.ndarray
    alphas: np.ndarray
    decays: DecaySet
    mu_missing: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float, ndmin=2)
        a = np.array(self.alphas, dtype=float)
        decays = self.decays if isinstance(self.decays, DecaySet) else DecaySet(self.decays)
        D = mu.shape[0]
        if a.shape != (D, D, len(decays)):
            raise DomainError(f"alphas must have shape {(D, D, len(decays))}, got {a.shape}")
        if np.any(mu < 0) or np.any(a < 0) or not np.all(np.isfinite(mu)) or not np.all(np.isfinite(a)):
            raise DomainError("baselines and kernel coefficients must be finite and non-negative")
        miss = np.zeros(mu.shape, dtype=bool) if self.mu_missing is None else np.array(self.mu_missing, dtype=bool)
        for arr in (mu, a, miss):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "decays", decays)
        object.__setattr__(self, "mu_missing", miss)

    @property
    def D(self):
        return self.mu.shape[0]

    @property
    def Q_max(self):
        return self.mu.shape[1] - 1

    @property
    def U(self):
        return len(self.decays)

    @property
    def betas(self):
        return self.decays.betas

    def baseline(self, l, q):
        return self.mu[l, np.minimum(q, self.Q_max)]

    def replace(self, **kw):
        d = dict(mu=self.mu, alphas=self.alphas, decays=self.decays, mu_missing=self.mu_missing, metadata=self.metadata)
        d.update(kw)
        return Qrh1Params(**d)

    def to_dict(self):
        return {
            "model": "qrh1",
            "decays": self.betas.tolist(),
            "Q_max": self.Q_max,
            "mu": self.mu.tolist(),
            "mu_missing": self.mu_missing.tolist(),
            "alphas": self.alphas.tolist(),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("model", "qrh1") != "qrh1":
            raise DomainError(f"not a QRH-I parameter document: model={d.get('model')!r}")
        mu = np.array(d["mu"], dtype=float)
        if mu.shape[1] != d["Q_max"] + 1:
            raise DomainError("mu table width does not match Q_max")
        return cls(
            mu=mu,
            alphas=np.array(d["alphas"], dtype=float),
            decays=DecaySet(d["decays"]),
            mu_missing=np.array(d.get("mu_missing", np.zeros(mu.shape, bool)), dtype=bool),
            metadata=d.get("metadata", {}),
        )

    def to_json(self):
        # json uses repr for floats, which round-trips binary64 exactly
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def n_params(self):
        return n_params_qrh1(self.D, self.Q_max, self.U)


def n_params_qr(D, Q_max):
    return D * (Q_max + 1)


def n_params_qrh1(D, Q_max, U):
    return D * (Q_max + 1) + D * D * U


def n_params_hawkes(D, U):
    return D + D * D * U


# ---------------------------------------------------------------------------
# traces


@dataclass
class GGCache:
    """Left-limit traces ``g`` and their running integrals ``G`` at each event.

    Shapes (N, D, U).  ``G[k]`` integrates ``g`` from the segment start to
    ``t_k``; ``G_end`` to the segment end.
    """

    g: np.ndarray
    G: np.ndarray
    G_end: np.ndarray


def _state_code(q, Q_max):
    # 0 = empty queue, Q_max + 1 = overflow; baseline index is min(code, Q_max)
    return np.minimum(np.asarray(q, dtype=np.int64), Q_max + 1)


def _segment_timeline(seg: Segment, betas, Q_max):
    if seg.q0 < 0 or np.any(seg.q_after < 0):
        raise DomainError("queue sizes must be non-negative")
    return build_timeline(
        seg.start,
        seg.end,
        seg.times,
        seg.kinds,
        N_TYPES,
        betas,
        _state_code(seg.q0, Q_max),
        brk_times=seg.times,
        brk_values=_state_code(seg.q_after, Q_max),
    )


def precompute_gg(seg: Segment, decays, D=N_TYPES) -> GGCache:
    betas = as_betas(decays)
    tl = build_timeline(seg.start, seg.end, seg.times, seg.kinds, D, betas, 0)
    dG = tl.iv_dG()
    cum = np.cumsum(dG, axis=0)
    return GGCache(g=tl.ev_g, G=cum[tl.ev_iv], G_end=cum[-1] if cum.size else np.zeros((D, betas.size)))


# ---------------------------------------------------------------------------
# sufficient statistics and likelihood


@dataclass
class Qrh1Data:
    """Per-type log-linear problems aggregated over segments."""

    problems: list
    Q_max: int
    betas: np.ndarray
    n_events: int
    occupation: np.ndarray  # time spent in each baseline index, (Q_max + 1,)
    counts: np.ndarray  # (D, Q_max + 1) events per type and pre-event state
    inconsistent: np.ndarray  # (D,) gated-type events seen on an empty queue


def prepare_qrh1(segments, decays, Q_max) -> Qrh1Data:
    betas = as_betas(decays)
    if isinstance(segments, Segment):
        segments = [segments]
    if not segments:
        raise DomainError("need at least one segment")
    nq = Q_max + 1
    U = betas.size
    state_idx = [[] for _ in range(N_TYPES)]
    feats = [[] for _ in range(N_TYPES)]
    c_state = np.zeros((N_TYPES, nq))
    c_feat = np.zeros((N_TYPES, N_TYPES * U))
    occ = np.zeros(nq)
    bad = np.zeros(N_TYPES, dtype=np.int64)
    for seg in segments:
        tl = _segment_timeline(seg, betas, Q_max)
        base = np.minimum(tl.iv_state, Q_max)
        occupied = tl.iv_state > 0
        dG = tl.iv_dG().reshape(tl.iv_dur.size, -1)
        occ += np.bincount(base, weights=tl.iv_dur, minlength=nq)
        occ_open = np.bincount(base[occupied], weights=tl.iv_dur[occupied], minlength=nq)
        G_all = dG.sum(axis=0)
        G_open = dG[occupied].sum(axis=0)
        ev_base = np.minimum(tl.ev_state, Q_max)
        for l in range(N_TYPES):
            gated = l in GATED
            c_state[l] += occ_open if gated else np.bincount(base, weights=tl.iv_dur, minlength=nq)
            c_feat[l] += G_open if gated else G_all
            sel = tl.ev_kind == l
            if gated:
                empty = sel & (tl.ev_state == 0)
                bad[l] += int(empty.sum())
                sel &= tl.ev_state > 0
            state_idx[l].append(ev_base[sel])
            feats[l].append(tl.ev_g[sel].reshape(-1, N_TYPES * U))
    problems = []
    counts = np.zeros((N_TYPES, nq), dtype=np.int64)
    n_ev = 0
    for l in range(N_TYPES):
        si = np.concatenate(state_idx[l])
        counts[l] = np.bincount(si, minlength=nq)
        n_ev += si.size
        problems.append(LogLinearProblem(si, nq, np.concatenate(feats[l]), c_state[l], c_feat[l]))
    n_ev += int(bad.sum())
    return Qrh1Data(problems, Q_max, betas, n_ev, occ, counts, bad)


def _as_data(params: Qrh1Params, data):
    if isinstance(data, Qrh1Data):
        if data.Q_max != params.Q_max or not np.array_equal(data.betas, params.betas):
            raise DomainError("prepared data does not match the parameter grid")
        return data
    return prepare_qrh1(data, params.decays, params.Q_max)


def _x(params, l):
    return np.concatenate([params.mu[l], params.alphas[l].ravel()])


def loglik_qrh1(params: Qrh1Params, segments) -> float:
    """Exact log-likelihood summed over independent segments.

    Returns ``-inf`` (with a warning) when an observed event has zero
    intensity under ``params``.
    """
    data = _as_data(params, segments)
    if data.inconsistent.any():
        warnings.warn("C/M events observed on an empty queue: zero intensity", RuntimeWarning, stacklevel=2)
        return -np.inf
    total = 0.0
    for l, prob in enumerate(data.problems):
        v = prob.value(_x(params, l))
        if not np.isfinite(v):
            warnings.warn(f"type {l} event with zero intensity: data/model inconsistency", RuntimeWarning, stacklevel=2)
            return -np.inf
        total += v
    return total


def loglik_grad_qrh1(params: Qrh1Params, segments):
    """Gradients (dL/dmu of shape (D, Q_max + 1), dL/dalpha of shape (D, D, U))."""
    data = _as_data(params, segments)
    D, nq, U = params.D, params.Q_max + 1, params.U
    gmu = np.zeros((D, nq))
    ga = np.zeros((D, D, U))
    for l, prob in enumerate(data.problems):
        x = _x(params, l)
        z = prob.rates(x)
        if np.any(z <= 0):
            raise InconsistencyError(f"type {l} event with zero intensity; gradient undefined")
        g = prob.grad(x, z)
        gmu[l] = g[:nq]
        ga[l] = g[nq:].reshape(D, U)
    return gmu, ga


def intensity_qrh1(params: Qrh1Params, seg: Segment, t, l, q=None):
    """Intensity of type ``l`` at time ``t`` by direct summation over the
    segment history strictly before ``t``.  ``q`` defaults to ``q(t-)``."""
    if not seg.start <= t <= seg.end:
        raise DomainError("t must lie inside the segment")
    past = seg.times < t
    if q is None:
        q = seg.states[int(past.sum())]
    if l in GATED and q == 0:
        return 0.0
    q = min(int(q), params.Q_max)
    lags = t - seg.times[past]
    kinds = seg.kinds[past]
    b = params.betas
    w = b * np.exp(-np.multiply.outer(lags, b))  # (n, U)
    a = params.alphas[l][kinds]  # (n, U)
    return float(params.mu[l, q] + np.sum(a * w))


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitReport:
    params: object
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    wall_time: float
    trace: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def summary(self):
        return {
            "loglik": self.value,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "wall_time": self.wall_time,
            **self.flags,
        }


def _check_consistent(data):
    if data.inconsistent.any():
        raise InconsistencyError(
            f"{int(data.inconsistent.sum())} C/M events observed on an empty queue; the model gives them zero intensity"
        )


def fit_qr(segments, Q_max, decays=(1.0,)) -> Qrh1Params:
    """Closed-form MLE of the pure queue-reactive model (all kernels zero)."""
    data = segments if isinstance(segments, Qrh1Data) else prepare_qrh1(segments, decays, Q_max)
    _check_consistent(data)
    return _qr_from_data(data)


def _qr_from_data(data):
    nq = data.Q_max + 1
    mu = np.zeros((N_TYPES, nq))
    miss = np.zeros((N_TYPES, nq), dtype=bool)
    for l, prob in enumerate(data.problems):
        occ = prob.c_state
        ok = occ > 0
        mu[l, ok] = data.counts[l, ok] / occ[ok]
        miss[l] = ~ok
    U = data.betas.size
    return Qrh1Params(mu, np.zeros((N_TYPES, N_TYPES, U)), DecaySet(data.betas), miss)


def _solve(data, x0s, tol, max_iter, scale):
    t0 = time.perf_counter()
    xs, traces = [], []
    value, gnorm, iters, conv = 0.0, 0.0, 0, True
    tol_abs = tol * max(abs(scale), 1.0)
    for prob, x0 in zip(data.problems, x0s):
        res = maximize_nonneg(prob, x0, tol_abs, max_iter=max_iter)
        xs.append(res.x)
        traces.append(res.trace)
        value += res.value
        gnorm = max(gnorm, res.pg_norm)
        iters = max(iters, res.iterations)
        conv &= res.converged
    return xs, value, gnorm, iters, conv, traces, time.perf_counter() - t0


def _qr_loglik(data, mu):
    v = 0.0
    for l, prob in enumerate(data.problems):
        x = np.concatenate([mu[l], np.zeros(prob.feats.shape[1])])
        v += prob.value(x)
    return v


def fit_qrh1(segments, decays, Q_max, tol=1e-7, max_iter=200, init=None, alpha_zero=False) -> FitReport:
    """Maximum-likelihood fit over the non-negative orthant.

    Converged when the projected-gradient sup-norm is below ``tol * |L_QR|``,
    ``L_QR`` being the log-likelihood of the closed-form QR fit.  With
    ``alpha_zero`` the kernels are fixed at 0 and the QR fit is returned.
    """
    betas = as_betas(decays)
    data = segments if isinstance(segments, Qrh1Data) else prepare_qrh1(segments, betas, Q_max)
    _check_consistent(data)
    qr = _qr_from_data(data)
    if alpha_zero:
        return FitReport(qr, _qr_loglik(data, qr.mu), 0.0, 0, True, 0.0, [], {"n_events": data.n_events})
    U = betas.size
    if init is None:
        mu0 = 0.5 * qr.mu
        a0 = np.full((N_TYPES, N_TYPES, U), 0.1 / (N_TYPES * U))
    else:
        mu0, a0 = init.mu, init.alphas
    x0s = [np.concatenate([mu0[l], a0[l].ravel()]) for l in range(N_TYPES)]
    scale = _qr_loglik(data, qr.mu)
    xs, value, gnorm, iters, conv, traces, wall = _solve(data, x0s, tol, max_iter, scale)
    nq = Q_max + 1
    mu = np.array([x[:nq] for x in xs])
    mu[qr.mu_missing] = 0.0
    alphas = np.array([x[nq:].reshape(N_TYPES, U) for x in xs])
    params = Qrh1Params(mu, alphas, DecaySet(betas), qr.mu_missing)
    return FitReport(params, value, gnorm, iters, conv, wall, traces, {"n_events": data.n_events})


def fit_hawkes3(segments, decays, Q_max=0, tol=1e-7, max_iter=200) -> FitReport:
    """Standard 3-type Hawkes fit: baselines constant across queue states.

    The returned ``mu`` table repeats the constant baseline over ``Q_max + 1``
    states so the result can be used wherever QRH-I parameters are expected.
    """
    betas = as_betas(decays)
    data = segments if isinstance(segments, Qrh1Data) else prepare_qrh1(segments, betas, Q_max)
    _check_consistent(data)
    U = betas.size
    pooled = []
    x0s = []
    for l, prob in enumerate(data.problems):
        p = LogLinearProblem(np.zeros(prob.state_idx.size, dtype=np.int64), 1, prob.feats, [prob.c_state.sum()], prob.c_feat)
        pooled.append(p)
        rate = prob.state_idx.size / max(p.c_state[0], 1e-300)
        x0s.append(np.concatenate([[0.5 * rate], np.full(N_TYPES * U, 0.1 / (N_TYPES * U))]))
    pdata = Qrh1Data(pooled, 0, betas, data.n_events, data.occupation, data.counts, data.inconsistent)
    scale = sum(p.value(np.concatenate([[p.state_idx.size / max(p.c_state[0], 1e-300)], np.zeros(N_TYPES * U)])) for p in pooled)
    xs, value, gnorm, iters, conv, traces, wall = _solve(pdata, x0s, tol, max_iter, scale)
    mu = np.repeat(np.array([[x[0]] for x in xs]), Q_max + 1, axis=1)
    alphas = np.array([x[1:].reshape(N_TYPES, U) for x in xs])
    params = Qrh1Params(mu, alphas, DecaySet(betas), metadata={"constant_baseline": True})
    return FitReport(params, value, gnorm, iters, conv, wall, traces, {"n_events": data.n_events})

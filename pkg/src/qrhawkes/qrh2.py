"""Two-sided hybrid model with multiplicative state factors.

Eight event types (P+, P-, La, Lb, Ca, Cb, Ma, Mb) share a Hawkes core,

    lambda_l(t) = f_l(s(t-)) * (mu_l + sum_m sum_u alpha[l, m, u] g[m, u](t))

where ``s`` indexes the (ask bucket, bid bucket) cell of a
:class:`~qrhawkes.lobdata.StateGrid`.  The state path is treated as an
observed exogenous process.  The pair (f, (mu, alpha)) is only defined up to
a positive factor; fitted parameters fix ``f_l(0) = 1``.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numba import njit

from .errors import DomainError, InconsistencyError
from .kernels import DecaySet, as_betas
from .lobdata import KINDS8, EventStream, StateGrid
from .optim import LogLinearProblem, maximize_nonneg
from .qrh1 import FitReport
from .timeline import build_timeline

N_TYPES = 8
F_FLOOR = 1e-8


@dataclass(frozen=True)
class Qrh2Params:
    """``mu`` (D,), ``alphas`` (D, D, U), ``f`` (D, n_states).

    ``signed`` marks least-squares parameters, whose kernels (and baselines)
    may be negative.  Fitted ``f`` is strictly positive; a zero factor is
    accepted so that a type can be switched off in given states.
    """

    mu: np.ndarray
    alphas: np.ndarray
    decays: DecaySet
    f: np.ndarray
    grid: StateGrid
    signed: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        a = np.array(self.alphas, dtype=float)
        f = np.array(self.f, dtype=float, ndmin=2)
        decays = self.decays if isinstance(self.decays, DecaySet) else DecaySet(self.decays)
        D = mu.size
        if a.shape != (D, D, len(decays)):
            raise DomainError(f"alphas must have shape {(D, D, len(decays))}, got {a.shape}")
        if f.shape != (D, self.grid.n_states):
            raise DomainError(f"f must have shape {(D, self.grid.n_states)}, got {f.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(a)) and np.all(np.isfinite(f))):
            raise DomainError("parameters must be finite")
        if np.any(f < 0):
            raise DomainError("state factors must be non-negative")
        if not self.signed and (np.any(mu < 0) or np.any(a < 0)):
            raise DomainError("likelihood parameters must be non-negative (use signed=True for LS fits)")
        for arr in (mu, a, f):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "decays", decays)

    @property
    def D(self):
        return self.mu.size

    @property
    def U(self):
        return len(self.decays)

    @property
    def betas(self):
        return self.decays.betas

    def replace(self, **kw):
        d = dict(mu=self.mu, alphas=self.alphas, decays=self.decays, f=self.f, grid=self.grid,
                 signed=self.signed, metadata=self.metadata)
        d.update(kw)
        return Qrh2Params(**d)

    def rescaled(self, c):
        """Gauge transform (f, mu, alpha) -> (c f, mu / c, alpha / c)."""
        return self.replace(f=self.f * c, mu=self.mu / c, alphas=self.alphas / c)

    def normalized(self):
        """Push the gauge so that ``f[l, 0] == 1`` for every type."""
        c = self.f[:, 0].copy()
        if np.any(c <= 0):
            raise DomainError("cannot normalize: a reference-state factor is zero")
        return self.replace(f=self.f / c[:, None], mu=self.mu * c, alphas=self.alphas * c[:, None, None])

    def n_params(self):
        return n_params_qrh2(self.D, self.U, self.grid.n_states)

    def to_dict(self):
        return {
            "model": "qrh2",
            "decays": self.betas.tolist(),
            "mu": self.mu.tolist(),
            "alphas": self.alphas.tolist(),
            "f": self.f.tolist(),
            "grid": self.grid.to_dict(),
            "signed": self.signed,
            "normalization": "f[type][0] = 1: state 0 is (ask bucket 1, bid bucket 1)",
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("model") != "qrh2":
            raise DomainError(f"not a QRH-II parameter document: model={d.get('model')!r}")
        return cls(
            mu=np.array(d["mu"], dtype=float),
            alphas=np.array(d["alphas"], dtype=float),
            decays=DecaySet(d["decays"]),
            f=np.array(d["f"], dtype=float),
            grid=StateGrid.from_dict(d["grid"]),
            signed=bool(d.get("signed", False)),
            metadata=d.get("metadata", {}),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def n_params_qrh2(D, U, n_states):
    return D + D * D * U + D * n_states


# ---------------------------------------------------------------------------
# cache


@njit(cache=True)
def _accumulate_h(iv_state, iv_dur, iv_g, beta_flat, n_states):
    n_iv, K = iv_g.shape
    H = np.zeros((n_states, K, K))
    bsum = np.empty((K, K))
    for i in range(K):
        for j in range(K):
            bsum[i, j] = beta_flat[i] + beta_flat[j]
    for k in range(n_iv):
        dt = iv_dur[k]
        if dt <= 0.0:
            continue
        s = iv_state[k]
        for i in range(K):
            gi = iv_g[k, i]
            if gi == 0.0:
                continue
            for j in range(i, K):
                gj = iv_g[k, j]
                if gj == 0.0:
                    continue
                b = bsum[i, j]
                w = -np.expm1(-b * dt) / b
                H[s, i, j] += gi * gj * w
    for s in range(n_states):
        for i in range(K):
            for j in range(i + 1, K):
                H[s, j, i] = H[s, i, j]
    return H


@dataclass
class LsCache:
    """Sufficient statistics for both the likelihood and the LS contrast.

    Flattened trace index is ``m * U + u``.  ``E[l, s]`` sums the left-limit
    traces over type-``l`` events occurring in state ``s``.
    """

    betas: np.ndarray
    n_states: int
    horizon: float
    dur: np.ndarray  # (S,)
    counts: np.ndarray  # (D, S)
    G: np.ndarray  # (S, D*U)
    H: np.ndarray  # (S, D*U, D*U)
    E: np.ndarray  # (D, S, D*U)
    ev_kind: np.ndarray
    ev_state: np.ndarray
    ev_g: np.ndarray  # (N, D*U)

    @property
    def n_events(self):
        return self.ev_kind.size


def precompute_ls(streams, decays, grid: StateGrid) -> LsCache:
    """Single pass per trading day; traces restart at each day's start."""
    betas = as_betas(decays)
    if isinstance(streams, EventStream):
        streams = [streams]
    if not streams:
        raise DomainError("need at least one event stream")
    S = grid.n_states
    U = betas.size
    K = N_TYPES * U
    dur = np.zeros(S)
    G = np.zeros((S, K))
    H = np.zeros((S, K, K))
    E = np.zeros((N_TYPES, S, K))
    counts = np.zeros((N_TYPES, S), dtype=np.int64)
    kinds, states, gs = [], [], []
    horizon = 0.0
    beta_flat = np.tile(betas, N_TYPES)
    for st in streams:
        s0, bt, bv = st.state_path(grid)
        if np.any(bv < 0) or np.any(bv >= S) or not 0 <= s0 < S:
            raise DomainError("state indices outside the grid")
        tl = build_timeline(st.start, st.end, st.times, st.kinds, N_TYPES, betas, s0, bt, bv)
        horizon += st.end - st.start
        dur += np.bincount(tl.iv_state, weights=tl.iv_dur, minlength=S)
        dG = tl.iv_dG().reshape(tl.iv_dur.size, K)
        np.add.at(G, tl.iv_state, dG)
        H += _accumulate_h(tl.iv_state, tl.iv_dur, np.ascontiguousarray(tl.iv_g.reshape(-1, K)), beta_flat, S)
        eg = tl.ev_g.reshape(-1, K)
        np.add.at(E, (tl.ev_kind, tl.ev_state), eg)
        np.add.at(counts, (tl.ev_kind, tl.ev_state), 1)
        kinds.append(tl.ev_kind)
        states.append(tl.ev_state)
        gs.append(eg)
    return LsCache(
        betas=betas,
        n_states=S,
        horizon=horizon,
        dur=dur,
        counts=counts,
        G=G,
        H=H,
        E=E,
        ev_kind=np.concatenate(kinds),
        ev_state=np.concatenate(states),
        ev_g=np.concatenate(gs),
    )


def _as_cache(params, data):
    if isinstance(data, LsCache):
        if data.n_states != params.grid.n_states or not np.array_equal(data.betas, params.betas):
            raise DomainError("cache does not match the parameter grid or decays")
        return data
    return precompute_ls(data, params.decays, params.grid)


# ---------------------------------------------------------------------------
# intensity


def intensity_qrh2(params: Qrh2Params, stream: EventStream, t, l, mode="linear", state=None):
    """Direct-summation intensity of type ``l`` at ``t`` (history strictly before t)."""
    if mode not in ("linear", "clamped"):
        raise ValueError("mode must be 'linear' or 'clamped'")
    if not stream.start <= t <= stream.end:
        raise DomainError("t must lie inside the stream window")
    if state is None:
        s0, bt, bv = stream.state_path(params.grid)
        k = np.searchsorted(bt, t, side="left")
        state = s0 if k == 0 else bv[k - 1]
    past = stream.times < t
    lags = t - stream.times[past]
    b = params.betas
    w = b * np.exp(-np.multiply.outer(lags, b))
    core = params.mu[l] + np.sum(params.alphas[l][stream.kinds[past]] * w)
    if mode == "clamped":
        core = max(core, 0.0)
    return float(params.f[l, state] * core)


# ---------------------------------------------------------------------------
# likelihood


def _type_block(params, cache, l):
    a = params.alphas[l].ravel()
    sel = cache.ev_kind == l
    z = params.mu[l] + cache.ev_g[sel] @ a
    comp_s = params.mu[l] * cache.dur + cache.G @ a  # (S,)
    return sel, a, z, comp_s


def loglik_qrh2(params: Qrh2Params, data) -> float:
    """Exact log-likelihood (linear mode, no intra-day reset)."""
    cache = _as_cache(params, data)
    total = 0.0
    for l in range(params.D):
        sel, a, z, comp_s = _type_block(params, cache, l)
        if np.any(z <= 0):
            warnings.warn(f"type {KINDS8[l]} event with non-positive intensity: data/model inconsistency",
                          RuntimeWarning, stacklevel=2)
            return -np.inf
        f = params.f[l]
        total += np.sum(np.log(f[cache.ev_state[sel]])) + np.sum(np.log(z)) - f @ comp_s
    return float(total)


def loglik_grad_qrh2(params: Qrh2Params, data):
    """Gradients (dL/dmu (D,), dL/dalpha (D, D, U), dL/df (D, S))."""
    cache = _as_cache(params, data)
    D, U = params.D, params.U
    gmu = np.zeros(D)
    ga = np.zeros((D, D, U))
    gf = np.zeros((D, cache.n_states))
    for l in range(D):
        sel, a, z, comp_s = _type_block(params, cache, l)
        if np.any(z <= 0):
            raise InconsistencyError(f"type {KINDS8[l]} event with non-positive intensity; gradient undefined")
        f = params.f[l]
        inv = 1.0 / z
        gmu[l] = inv.sum() - f @ cache.dur
        ga[l] = (cache.ev_g[sel].T @ inv - f @ cache.G).reshape(D, U)
        gf[l] = cache.counts[l] / f - comp_s
    return gmu, ga, gf


# ---------------------------------------------------------------------------
# least-squares contrast


def ls_objective(params: Qrh2Params, data):
    """R = sum_l [ int lambda_l^2 dt - 2 sum_k lambda_l(t_k) ] and its gradients.

    Returns ``(R, (dR/dmu, dR/dalpha, dR/df))``; uses cached quantities only.
    """
    cache = _as_cache(params, data)
    D, U = params.D, params.U
    R = 0.0
    gmu = np.zeros(D)
    ga = np.zeros((D, D, U))
    gf = np.zeros((D, cache.n_states))
    for l in range(D):
        mu = params.mu[l]
        a = params.alphas[l].ravel()
        f = params.f[l]
        Ga = cache.G @ a
        Ha = cache.H @ a  # (S, K)
        aHa = Ha @ a
        quad = mu * mu * cache.dur + 2 * mu * Ga + aHa  # (S,)
        lin = mu * cache.counts[l] + cache.E[l] @ a  # (S,)
        f2 = f * f
        R += f2 @ quad - 2 * f @ lin
        gmu[l] = f2 @ (2 * mu * cache.dur + 2 * Ga) - 2 * f @ cache.counts[l]
        ga[l] = (f2 @ (2 * mu * cache.G + 2 * Ha) - 2 * f @ cache.E[l]).reshape(D, U)
        gf[l] = 2 * f * quad - 2 * lin
    return float(R), (gmu, ga, gf)


# ---------------------------------------------------------------------------
# fitting


def _normalize(f, mu, a):
    c = f[:, 0].copy()
    return f / c[:, None], mu * c, a * c[:, None, None]


def _ls_block(cache, f_l, l, ridge=1e-10):
    """Normal equations in theta = (mu, alpha_flat) for fixed f."""
    K = cache.G.shape[1]
    f2 = f_l * f_l
    Q = np.empty((K + 1, K + 1))
    Q[0, 0] = f2 @ cache.dur
    Q[0, 1:] = Q[1:, 0] = f2 @ cache.G
    Q[1:, 1:] = np.tensordot(f2, cache.H, axes=1)
    b = np.concatenate([[f_l @ cache.counts[l]], f_l @ cache.E[l]])
    try:
        c = scipy.linalg.cho_factor(Q, check_finite=False)
        theta = scipy.linalg.cho_solve(c, b, check_finite=False)
        if np.all(np.isfinite(theta)):
            return theta, False
    except (np.linalg.LinAlgError, ValueError):
        pass
    scale = max(np.max(np.abs(np.diag(Q))), 1.0)
    theta = np.linalg.solve(Q + ridge * scale * np.eye(K + 1), b)
    return theta, True


def fit_qrh2_ls(streams, grid: StateGrid, decays, tol=1e-10, max_sweeps=500, fix_f=False) -> FitReport:
    """Alternating least-squares fit; kernels are unrestricted in sign."""
    t0 = time.perf_counter()
    betas = as_betas(decays)
    cache = streams if isinstance(streams, LsCache) else precompute_ls(streams, betas, grid)
    D, U, S = N_TYPES, betas.size, grid.n_states
    f = np.ones((D, S))
    mu = np.zeros(D)
    a = np.zeros((D, D, U))
    empty = cache.dur <= 0
    flags = {"ridge_types": [], "empty_states": np.flatnonzero(empty).tolist(), "floored_f": 0}
    trace = []
    R_prev = np.inf
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        for l in range(D):
            theta, ridged = _ls_block(cache, f[l], l)
            if ridged and l not in flags["ridge_types"]:
                warnings.warn(f"singular normal equations for type {KINDS8[l]}: ridge 1e-10 applied",
                              RuntimeWarning, stacklevel=2)
                flags["ridge_types"].append(l)
            mu[l] = theta[0]
            a[l] = theta[1:].reshape(D, U)
        if not fix_f:
            for l in range(D):
                al = a[l].ravel()
                A = mu[l] ** 2 * cache.dur + 2 * mu[l] * (cache.G @ al) + (cache.H @ al) @ al
                B = mu[l] * cache.counts[l] + cache.E[l] @ al
                ok = A > 0
                fl = np.ones(S)
                fl[ok] = B[ok] / A[ok]
                low = ok & (fl < F_FLOOR)
                flags["floored_f"] += int(low.sum())
                fl[low] = F_FLOOR
                f[l] = fl
            f, mu, a = _normalize(f, mu, a)
        params = Qrh2Params(mu, a, DecaySet(betas), f, grid, signed=True)
        R, _ = ls_objective(params, cache)
        trace.append(R)
        if fix_f or R_prev - R <= tol * max(abs(R), 1.0):
            converged = True
            break
        R_prev = R
    _, grads = ls_objective(params, cache)
    gnorm = max(float(np.max(np.abs(grads[0]))), float(np.max(np.abs(grads[1]))))
    return FitReport(params, R, gnorm, sweep, converged, time.perf_counter() - t0, trace, flags)


def fit_qrh2_mle(streams, grid: StateGrid, decays, tol=1e-9, max_sweeps=200, inner_tol=1e-7,
                 inner_max_iter=200, fix_f=False) -> FitReport:
    """Alternating maximum likelihood: (mu, alpha) by projected Newton for fixed
    f, then the closed-form f update, then the gauge normalization."""
    t0 = time.perf_counter()
    betas = as_betas(decays)
    cache = streams if isinstance(streams, LsCache) else precompute_ls(streams, betas, grid)
    D, U, S = N_TYPES, betas.size, grid.n_states
    K = D * U
    empty = cache.dur <= 0
    if not fix_f and np.any(cache.counts[:, 0] == 0):
        bad = [KINDS8[l] for l in np.flatnonzero(cache.counts[:, 0] == 0)]
        raise DomainError(f"reference state has no events of type(s) {bad}; f cannot be normalized there")
    f = np.ones((D, S))
    rate = cache.counts.sum(axis=1) / max(cache.horizon, 1e-300)
    mu = 0.5 * rate
    a = np.full((D, D, U), 0.1 / K)
    flags = {"empty_states": np.flatnonzero(empty).tolist(), "floored_f": 0, "inner_unconverged": 0}
    trace = []
    L_prev = -np.inf
    converged = False
    sweep = 0
    gnorm = np.inf
    for sweep in range(1, max_sweeps + 1):
        gnorm = 0.0
        for l in range(D):
            sel = cache.ev_kind == l
            prob = LogLinearProblem(
                np.zeros(int(sel.sum()), dtype=np.int64), 1, cache.ev_g[sel], [f[l] @ cache.dur], f[l] @ cache.G
            )
            x0 = np.concatenate([[mu[l]], a[l].ravel()])
            scale = max(abs(prob.value(x0)), 1.0) if np.isfinite(prob.value(x0)) else 1.0
            res = maximize_nonneg(prob, x0, inner_tol * scale, max_iter=inner_max_iter)
            flags["inner_unconverged"] += int(not res.converged)
            gnorm = max(gnorm, res.pg_norm)
            mu[l] = res.x[0]
            a[l] = res.x[1:].reshape(D, U)
        if not fix_f:
            for l in range(D):
                comp = mu[l] * cache.dur + cache.G @ a[l].ravel()
                ok = comp > 0
                fl = np.ones(S)
                fl[ok] = cache.counts[l, ok] / comp[ok]
                low = ok & (fl < F_FLOOR)
                flags["floored_f"] += int(low.sum())
                fl[low] = F_FLOOR
                f[l] = fl
            f, mu, a = _normalize(f, mu, a)
        params = Qrh2Params(mu, a, DecaySet(betas), f, grid)
        L = loglik_qrh2(params, cache)
        trace.append(L)
        if fix_f:
            # a single sweep is exact; convergence is that of the inner solves
            converged = flags["inner_unconverged"] == 0
            break
        if L - L_prev <= tol * max(abs(L), 1.0):
            converged = True
            break
        L_prev = L
    return FitReport(params, L, gnorm, sweep, converged, time.perf_counter() - t0, trace, flags)


def mean_reversion_rate(p_events) -> float:
    """Fraction of consecutive midprice moves with opposite directions.

    Accepts kind labels ('P+', 'P-', other labels are skipped), events
    carrying such a ``kind``, or numeric signs (+1 / -1).
    """
    signs = []
    for e in p_events:
        e = getattr(e, "kind", e)
        if isinstance(e, str):
            if e == "P+":
                signs.append(1)
            elif e == "P-":
                signs.append(-1)
        elif e in (1, -1):
            signs.append(int(e))
        else:
            raise DomainError(f"cannot read a midprice direction from {e!r}")
    signs = np.array(signs)
    if signs.size < 2:
        raise DomainError("need at least two midprice moves")
    return float(np.mean(signs[1:] != signs[:-1]))

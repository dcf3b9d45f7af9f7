"""Thinning simulation of the single-queue and two-sided models.

Random numbers come from numba's ``np.random`` (Mersenne Twister MT19937),
seeded explicitly at the start of every call, so a given seed, config and
parameter set always produce the same path.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numba import njit
from scipy.optimize import curve_fit

from .errors import DomainError, InconsistencyError, InputError, NonErgodicError
from .kernels import stability_check
from .lobdata import EventStream, QueuePath, Segment, StateGrid, StepPath
from .qrh1 import Qrh1Params
from .qrh2 import Qrh2Params

# status codes returned by the kernels
_OK, _BOUND, _MAXEV = 0, 1, 2


@dataclass
class SimConfig:
    horizon: float
    seed: int = 0
    burn_in: float = 0.0
    sample_interval: float = 30.0
    q0: object = 1
    max_events: int = 50_000_000

    def __post_init__(self):
        if not self.horizon > self.burn_in >= 0:
            raise DomainError("need horizon > burn_in >= 0")
        if not self.sample_interval > 0:
            raise DomainError("sample_interval must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")


@dataclass
class SimPath:
    """Simulated events with the realized intensity of each accepted event.

    ``queue`` holds the single-queue path (QRH-I), ``qa``/``qb`` the two best
    queues (mechanical QRH-II) and ``states`` the grid-state path.
    """

    horizon: float
    times: np.ndarray
    kinds: np.ndarray
    intensity: np.ndarray
    bound: np.ndarray
    queue: QueuePath | None = None
    qa: QueuePath | None = None
    qb: QueuePath | None = None
    states: StepPath | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_events(self):
        return self.times.size

    def segment(self) -> Segment:
        """View a QRH-I path as one segment over [0, horizon]."""
        if self.queue is None:
            raise ValueError("not a single-queue path")
        return Segment(0.0, self.horizon, self.times, self.kinds, int(self.queue.values[0]), self.queue.values[1:])

    def stream(self) -> EventStream:
        return EventStream(0.0, self.horizon, self.times, self.kinds, qa=self.qa, qb=self.qb, states=self.states)


def _seed32(seed):
    # numba's np.random.seed takes a 32-bit value; fold the 64-bit seed
    seed = int(seed)
    return (seed ^ (seed >> 32)) & 0xFFFFFFFF


@njit(cache=True)
def _grow_f(a):
    out = np.empty(2 * a.size)
    out[: a.size] = a
    return out


@njit(cache=True)
def _grow_i(a):
    out = np.empty(2 * a.size, dtype=np.int64)
    out[: a.size] = a
    return out


@njit(cache=True)
def _qrh1_rates(mu, alphas, g, q, Q_max, lam):
    D = mu.shape[0]
    U = g.shape[1]
    qi = q if q < Q_max else Q_max
    tot = 0.0
    for l in range(D):
        if q == 0 and l != 0:
            lam[l] = 0.0
            continue
        v = mu[l, qi]
        for m in range(D):
            for u in range(U):
                v += alphas[l, m, u] * g[m, u]
        lam[l] = v
        tot += v
    return tot


@njit(cache=True)
def _sim_qrh1_kernel(mu, alphas, betas, horizon, q0, seed, max_events):
    np.random.seed(seed)
    D = mu.shape[0]
    U = betas.size
    Q_max = mu.shape[1] - 1
    g = np.zeros((D, U))
    lam = np.zeros(D)
    cap = 1024
    times = np.empty(cap)
    kinds = np.empty(cap, dtype=np.int64)
    qs = np.empty(cap, dtype=np.int64)
    lams = np.empty(cap)
    bounds = np.empty(cap)
    n = 0
    t = 0.0
    q = q0
    status = 0
    while True:
        bound = _qrh1_rates(mu, alphas, g, q, Q_max, lam)
        if bound <= 0.0:
            break
        w = -np.log(1.0 - np.random.random()) / bound
        if t + w > horizon:
            break
        t += w
        for m in range(D):
            for u in range(U):
                g[m, u] *= np.exp(-betas[u] * w)
        tot = _qrh1_rates(mu, alphas, g, q, Q_max, lam)
        if tot > bound * (1.0 + 1e-12):
            status = 1
            break
        x = np.random.random() * bound
        if x >= tot:
            continue
        k = 0
        acc = lam[0]
        while x >= acc and k < D - 1:
            k += 1
            acc += lam[k]
        if lam[k] <= 0.0:
            continue
        if n == times.size:
            times = _grow_f(times)
            kinds = _grow_i(kinds)
            qs = _grow_i(qs)
            lams = _grow_f(lams)
            bounds = _grow_f(bounds)
        times[n] = t
        kinds[n] = k
        lams[n] = lam[k]
        bounds[n] = bound
        if k == 0:
            q += 1
        else:
            q -= 1
        qs[n] = q
        n += 1
        for u in range(U):
            g[k, u] += betas[u]
        if n >= max_events:
            status = 2
            break
    return times[:n], kinds[:n], qs[:n], lams[:n], bounds[:n], status


def _finish(status, n, max_events):
    if status == _BOUND:
        raise InconsistencyError("thinning bound exceeded by the realized intensity")
    if status == _MAXEV:
        warnings.warn(f"simulation stopped after max_events={max_events} events", RuntimeWarning, stacklevel=3)


def simulate_qrh1(params: Qrh1Params, config: SimConfig) -> SimPath:
    """Ogata thinning for the single-queue model (L adds one unit, C/M remove one)."""
    if params.D != 3:
        raise DomainError("the single-queue simulator expects the 3 types L, C, M")
    stab = stability_check(params.alphas)
    if not stab.stable:
        warnings.warn(f"kernel norm spectral radius {stab.rho:.4g} >= 1: simulating an unstable model",
                      RuntimeWarning, stacklevel=2)
    q0 = int(config.q0)
    if q0 < 0:
        raise DomainError("initial queue must be non-negative")
    times, kinds, qs, lams, bounds, status = _sim_qrh1_kernel(
        np.ascontiguousarray(params.mu), np.ascontiguousarray(params.alphas), np.ascontiguousarray(params.betas),
        float(config.horizon), q0, _seed32(config.seed), int(config.max_events),
    )
    _finish(status, times.size, config.max_events)
    horizon = float(config.horizon) if status == _OK else float(times[-1])
    queue = QueuePath(np.concatenate([[0.0], times]), np.concatenate([[q0], qs]), side="sim")
    return SimPath(horizon, times, kinds, lams, bounds, queue=queue, meta={"seed": int(config.seed), "model": "qrh1"})


# ---------------------------------------------------------------------------
# two-sided model


@njit(cache=True)
def _qrh2_rates(mu, alphas, alpha_pos, f, g, s, lam, gate_a, gate_b):
    D = mu.size
    U = g.shape[1]
    tot = 0.0
    bound = 0.0
    for l in range(D):
        core = mu[l]
        upper = mu[l]
        for m in range(D):
            for u in range(U):
                core += alphas[l, m, u] * g[m, u]
                upper += alpha_pos[l, m, u] * g[m, u]
        v = f[l, s] * max(core, 0.0)
        # mechanical mode: C/M on a one-unit queue would empty it
        if (gate_a and (l == 4 or l == 6)) or (gate_b and (l == 5 or l == 7)):
            v = 0.0
        lam[l] = v
        tot += v
        bound += f[l, s] * max(upper, 0.0)
    return tot, bound


@njit(cache=True)
def _bucket(edges, q):
    k = 0
    while k < edges.size and edges[k] < q:
        k += 1
    return k


@njit(cache=True)
def _sim_qrh2_kernel(mu, alphas, f, betas, horizon, seed, max_events, mechanical,
                     s0, br_t, br_v, qa0, qb0, ask_edges, bid_edges, post_up, post_dn):
    np.random.seed(seed)
    D = mu.size
    U = betas.size
    nb = ask_edges.size + 1
    alpha_pos = np.maximum(alphas, 0.0)
    g = np.zeros((D, U))
    lam = np.zeros(D)
    cap = 1024
    times = np.empty(cap)
    kinds = np.empty(cap, dtype=np.int64)
    lams = np.empty(cap)
    bounds = np.empty(cap)
    qa_out = np.empty(cap, dtype=np.int64)
    qb_out = np.empty(cap, dtype=np.int64)
    st_out = np.empty(cap, dtype=np.int64)
    n = 0
    t = 0.0
    qa = qa0
    qb = qb0
    if mechanical:
        s = _bucket(ask_edges, qa) * nb + _bucket(bid_edges, qb)
    else:
        s = s0
    j = 0
    status = 0
    while True:
        t_next_break = br_t[j] if (not mechanical and j < br_t.size) else np.inf
        gate_a = mechanical and qa <= 1
        gate_b = mechanical and qb <= 1
        _, bound = _qrh2_rates(mu, alphas, alpha_pos, f, g, s, lam, gate_a, gate_b)
        if bound <= 0.0:
            w = np.inf
        else:
            w = -np.log(1.0 - np.random.random()) / bound
        if t + w >= t_next_break and t_next_break <= horizon:
            dt = t_next_break - t
            for m in range(D):
                for u in range(U):
                    g[m, u] *= np.exp(-betas[u] * dt)
            t = t_next_break
            s = br_v[j]
            j += 1
            continue
        if t + w > horizon:
            break
        t += w
        for m in range(D):
            for u in range(U):
                g[m, u] *= np.exp(-betas[u] * w)
        tot, bnow = _qrh2_rates(mu, alphas, alpha_pos, f, g, s, lam, gate_a, gate_b)
        if tot > bound * (1.0 + 1e-12):
            status = 1
            break
        x = np.random.random() * bound
        if x >= tot:
            continue
        k = 0
        acc = lam[0]
        while x >= acc and k < D - 1:
            k += 1
            acc += lam[k]
        if lam[k] <= 0.0:
            continue
        if n == times.size:
            times = _grow_f(times)
            kinds = _grow_i(kinds)
            lams = _grow_f(lams)
            bounds = _grow_f(bounds)
            qa_out = _grow_i(qa_out)
            qb_out = _grow_i(qb_out)
            st_out = _grow_i(st_out)
        times[n] = t
        kinds[n] = k
        lams[n] = lam[k]
        bounds[n] = bound
        if mechanical:
            if k == 0 or k == 1:
                tab = post_up if k == 0 else post_dn
                r = np.random.randint(0, tab.shape[0])
                qa = tab[r, 0]
                qb = tab[r, 1]
            elif k == 2:
                qa += 1
            elif k == 3:
                qb += 1
            elif k == 4 or k == 6:
                qa -= 1
            else:
                qb -= 1
            s = _bucket(ask_edges, qa) * nb + _bucket(bid_edges, qb)
        qa_out[n] = qa
        qb_out[n] = qb
        st_out[n] = s
        n += 1
        for u in range(U):
            g[k, u] += betas[u]
        if n >= max_events:
            status = 2
            break
    return times[:n], kinds[:n], lams[:n], bounds[:n], qa_out[:n], qb_out[:n], st_out[:n], status


def simulate_qrh2(params: Qrh2Params, config: SimConfig, state_source="replay", state_path=None,
                  post_jump=None, state_end=None) -> SimPath:
    """Thinning with clamped intensities ``f * max(0, mu + sum alpha g)``.

    ``state_source='replay'`` takes ``state_path`` as exogenous: either a
    :class:`StepPath` of grid states starting at or before 0 (known up to
    ``state_end``, default unbounded) or an :class:`EventStream`, whose state
    path is shifted so the stream starts at time 0.
    ``'mechanical'`` moves the queues by one unit per L/C/M event on its side
    and redraws both queues after P+/P- from ``post_jump`` (as built by
    :func:`qrhawkes.lobdata.post_jump_table`); ``config.q0`` gives (q_a, q_b).
    """
    grid = params.grid
    mu = np.ascontiguousarray(params.mu)
    alphas = np.ascontiguousarray(params.alphas)
    f = np.ascontiguousarray(params.f)
    betas = np.ascontiguousarray(params.betas)
    empty_tab = np.zeros((0, 2), dtype=np.int64)
    if state_source == "replay":
        if state_path is None:
            raise InputError("replay mode needs a state path")
        if isinstance(state_path, EventStream):
            s_init, bt, bv = state_path.state_path(grid)
            state_end = state_path.end - state_path.start
            state_path = StepPath(np.concatenate([[0.0], bt - state_path.start]), np.concatenate([[s_init], bv]))
        bp = np.asarray(state_path.breakpoints, dtype=float)
        vals = np.asarray(state_path.values, dtype=np.int64)
        if bp.size == 0 or bp[0] > 0:
            raise InputError("state path must start at or before time 0")
        if state_end is not None and state_end < config.horizon:
            raise InputError(f"state path ends at {state_end}, before the horizon {config.horizon}")
        if np.any(vals < 0) or np.any(vals >= grid.n_states):
            raise DomainError("state path has indices outside the grid")
        s0 = int(state_path.value_at(0.0))
        later = bp > 0
        br_t, br_v = np.ascontiguousarray(bp[later]), np.ascontiguousarray(vals[later])
        mech, qa0, qb0 = False, 1, 1
        up = dn = empty_tab
    elif state_source == "mechanical":
        if post_jump is None:
            raise InputError("mechanical mode needs post-jump queue tables")
        up = np.ascontiguousarray(post_jump["P+"], dtype=np.int64).reshape(-1, 2)
        dn = np.ascontiguousarray(post_jump["P-"], dtype=np.int64).reshape(-1, 2)
        if (up.shape[0] == 0 and np.any(params.f[0] > 0)) or (dn.shape[0] == 0 and np.any(params.f[1] > 0)):
            raise InputError("post-jump tables must be non-empty for P+ and P-")
        if np.any(up <= 0) or np.any(dn <= 0):
            raise DomainError("post-jump queues must be positive")
        qa0, qb0 = (int(v) for v in config.q0)
        if qa0 <= 0 or qb0 <= 0:
            raise DomainError("initial queues must be positive")
        s0 = 0
        br_t, br_v = np.empty(0), np.empty(0, dtype=np.int64)
        mech = True
    else:
        raise ValueError("state_source must be 'replay' or 'mechanical'")
    out = _sim_qrh2_kernel(
        mu, alphas, f, betas, float(config.horizon), _seed32(config.seed), int(config.max_events), mech,
        s0, br_t, br_v, qa0, qb0, np.ascontiguousarray(grid.ask_edges), np.ascontiguousarray(grid.bid_edges), up, dn,
    )
    times, kinds, lams, bounds, qa, qb, st, status = out
    _finish(status, times.size, config.max_events)
    horizon = float(config.horizon) if status == _OK else float(times[-1])
    meta = {"seed": int(config.seed), "model": "qrh2", "state_source": state_source}
    if mech:
        t0 = np.concatenate([[0.0], times])
        return SimPath(horizon, times, kinds, lams, bounds,
                       qa=QueuePath(t0, np.concatenate([[qa0], qa]), side="ask"),
                       qb=QueuePath(t0, np.concatenate([[qb0], qb]), side="bid"),
                       states=StepPath(t0, np.concatenate([[grid.index(qa0, qb0)], st])).compact(), meta=meta)
    states = StepPath(np.concatenate([[0.0], br_t[br_t <= horizon]]), np.concatenate([[s0], br_v[br_t <= horizon]]))
    return SimPath(horizon, times, kinds, lams, bounds, states=states, meta=meta)


# ---------------------------------------------------------------------------
# invariant distribution


def qr_invariant(mu) -> np.ndarray:
    """Stationary law of the birth-death chain on {0..Q_max} with birth rate
    ``mu[L](q)`` and death rate ``mu[C](q) + mu[M](q)``."""
    mu = np.asarray(getattr(mu, "mu", mu), dtype=float)
    nq = mu.shape[1]
    w = np.zeros(nq)
    w[0] = 1.0
    for k in range(1, nq):
        birth = mu[0, k - 1]
        if birth == 0:
            break
        death = mu[1, k] + mu[2, k]
        if death <= 0:
            raise NonErgodicError(f"zero death rate at reachable queue size {k}")
        w[k] = w[k - 1] * birth / death
    return w / w.sum()


def truncated_generator(mu) -> np.ndarray:
    mu = np.asarray(getattr(mu, "mu", mu), dtype=float)
    nq = mu.shape[1]
    Q = np.zeros((nq, nq))
    for q in range(nq):
        if q + 1 < nq:
            Q[q, q + 1] = mu[0, q]
        if q > 0:
            Q[q, q - 1] = mu[1, q] + mu[2, q]
        Q[q, q] = -Q[q].sum()
    return Q


def generator_stationary(Q) -> np.ndarray:
    """Solve pi Q = 0, sum(pi) = 1 for an irreducible generator."""
    n = Q.shape[0]
    A = np.vstack([Q.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = scipy.linalg.lstsq(A, b)
    return pi


def sample_path(path: StepPath, times):
    return path.value_at(np.asarray(times, dtype=float))


@dataclass
class InvariantEstimate:
    pmf: np.ndarray
    stderr: np.ndarray
    n_samples: int
    samples: np.ndarray


def batch_means_stderr(samples, n_states, n_batches=20):
    samples = np.asarray(samples)
    nb = min(n_batches, samples.size)
    if nb < 2:
        return np.full(n_states, np.nan)
    batches = np.array_split(samples, nb)
    freq = np.array([np.bincount(b, minlength=n_states)[:n_states] / b.size for b in batches])
    return freq.std(axis=0, ddof=1) / np.sqrt(nb)


def invariant_distribution_qrh1(params: Qrh1Params, config: SimConfig, n_states=None) -> InvariantEstimate:
    """Empirical law of q sampled every ``sample_interval`` after ``burn_in``."""
    path = simulate_qrh1(params, config)
    grid = np.arange(config.burn_in, path.horizon + 1e-12, config.sample_interval)
    if grid.size == 0:
        raise DomainError("no sampling times between burn_in and horizon")
    q = sample_path(path.queue, grid).astype(np.int64)
    n_states = int(max(q.max() + 1, params.Q_max + 1)) if n_states is None else n_states
    pmf = np.bincount(q, minlength=n_states).astype(float)
    pmf = pmf / pmf.sum()
    return InvariantEstimate(pmf, batch_means_stderr(q, pmf.size), q.size, q)


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = max(p.size, q.size)
    p = np.pad(p, (0, n - p.size))
    q = np.pad(q, (0, n - q.size))
    return 0.5 * float(np.abs(p - q).sum())


# ---------------------------------------------------------------------------
# autocorrelation


@dataclass
class AutocorrFit:
    lags: np.ndarray
    rho: np.ndarray
    a: float
    tau_c: float


def queue_autocorrelation(samples, max_lag, dt=30.0) -> AutocorrFit:
    """Sample autocorrelation on the sampling grid and an ``a exp(-t / tau_c)`` fit."""
    x = np.asarray(samples, dtype=float)
    if max_lag < 1 or x.size <= max_lag + 1:
        raise DomainError("need more samples than max_lag + 1")
    x = x - x.mean()
    var = x @ x / x.size
    if var == 0:
        raise DomainError("constant series has no autocorrelation")
    rho = np.array([(x[: x.size - k] @ x[k:]) / x.size / var for k in range(max_lag + 1)])
    lags = np.arange(max_lag + 1) * dt
    model = lambda t, a, tau: a * np.exp(-t / tau)
    tt, rr = lags[1:], rho[1:]
    p0 = (1.0, dt / max(-np.log(max(rr[0], 1e-3)), 1e-3))
    (a, tau), _ = curve_fit(model, tt, rr, p0=p0, bounds=([-2.0, 1e-6 * dt], [2.0, np.inf]), maxfev=20000)
    return AutocorrFit(lags, rho, float(a), float(tau))

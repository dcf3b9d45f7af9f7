"""Shared fixtures and brute-force oracles.

The oracles here deliberately avoid the recursions used by the package:
intensities are direct sums over past events and compensators are
composite Gauss-Legendre quadratures of those sums.
"""
import numpy as np
import pytest

from qrhawkes.lobdata import EventStream, Segment, StateGrid, StepPath
from qrhawkes.qrh1 import Qrh1Params
from qrhawkes.qrh2 import Qrh2Params

GL_X, GL_W = np.polynomial.legendre.leggauss(12)


def random_qrh1_params(rng, Q_max=9, betas=(1.0, 10.0), scale=0.3):
    D, U = 3, len(betas)
    mu = rng.uniform(0.2, 2.0, size=(D, Q_max + 1))
    alphas = rng.uniform(0.0, scale / (D * U), size=(D, D, U))
    return Qrh1Params(mu, alphas, betas)


def random_segment(rng, n, Q_max=9, rate=5.0, start=0.0, q0=None):
    """Poisson event times with random kinds; C/M are never drawn on an empty queue."""
    gaps = rng.exponential(1.0 / rate, size=n)
    times = start + np.cumsum(gaps)
    q = int(rng.integers(0, Q_max + 3)) if q0 is None else q0
    q_init = q
    kinds = np.empty(n, dtype=np.int64)
    q_after = np.empty(n, dtype=np.int64)
    for k in range(n):
        kind = int(rng.integers(0, 3)) if q > 0 else 0
        q = q + 1 if kind == 0 else q - 1
        kinds[k] = kind
        q_after[k] = q
    end = times[-1] + rng.exponential(1.0 / rate) if n else start + 1.0
    return Segment(start, float(end), times, kinds, q_init, q_after)


def qrh1_intensity_direct(params, seg, t, q):
    """All three intensities at time t, given the queue q(t-)."""
    past = seg.times < t
    lags = t - seg.times[past]
    w = params.betas * np.exp(-np.multiply.outer(lags, params.betas))
    lam = params.mu[:, min(q, params.Q_max)] + np.einsum("lku,ku->l", params.alphas[:, seg.kinds[past]], w)
    if q == 0:
        lam[1:] = 0.0
    return lam


def _gl_nodes(a, b, bmax):
    m = int(np.ceil((b - a) * bmax / 2.0)) + 1
    edges = np.linspace(a, b, m + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    x = (mid[:, None] + half[:, None] * GL_X[None, :]).ravel()
    w = (half[:, None] * GL_W[None, :]).ravel()
    return x, w


def qrh1_loglik_oracle(params, seg):
    """O(N^2) direct-sum log terms plus quadrature compensator."""
    states = seg.states
    total = 0.0
    for k, t in enumerate(seg.times):
        lam = qrh1_intensity_direct(params, seg, t, int(states[k]))
        total += np.log(lam[seg.kinds[k]])
    bounds = np.concatenate([[seg.start], seg.times, [seg.end]])
    bmax = params.betas.max()
    for k in range(bounds.size - 1):
        a, b = bounds[k], bounds[k + 1]
        if b <= a:
            continue
        x, w = _gl_nodes(a, b, bmax)
        q = int(states[k])
        # history strictly before the interval end: events up to index k-1
        hist_t = seg.times[:k]
        hist_k = seg.kinds[:k]
        lags = x[:, None] - hist_t[None, :]
        ex = np.exp(-lags[:, :, None] * params.betas) * params.betas  # (n, k, U)
        a_h = params.alphas[:, hist_k]  # (D, k, U)
        lam = params.mu[:, min(q, params.Q_max)][None, :] + np.einsum("lku,nku->nl", a_h, ex)
        if q == 0:
            lam[:, 1:] = 0.0
        total -= float(w @ lam.sum(axis=1))
    return total


def random_grid(n_buckets=3):
    e = np.arange(1, n_buckets) * 2.0
    return StateGrid(e, e)


def random_qrh2_params(rng, grid, betas=(1.0, 10.0), signed=False, scale=0.4):
    D, U = 8, len(betas)
    mu = rng.uniform(0.2, 1.0, size=D)
    lo = -scale / (D * U) if signed else 0.0
    alphas = rng.uniform(lo, scale / (D * U), size=(D, D, U))
    f = np.exp(rng.normal(0, 0.4, size=(D, grid.n_states)))
    f[:, 0] = 1.0
    return Qrh2Params(mu, alphas, betas, f, grid, signed=signed)


def random_stream(rng, n, grid, rate=5.0, start=0.0, n_breaks=None):
    times = start + np.cumsum(rng.exponential(1.0 / rate, size=n))
    kinds = rng.integers(0, 8, size=n)
    end = float(times[-1] + rng.exponential(1.0 / rate))
    nb = n // 2 if n_breaks is None else n_breaks
    bt = np.sort(rng.uniform(start, end, size=nb))
    bv = rng.integers(0, grid.n_states, size=nb)
    states = StepPath(np.concatenate([[start], bt]), np.concatenate([[int(rng.integers(0, grid.n_states))], bv]))
    return EventStream(start, end, times, kinds, states=states)


def qrh2_core_direct(params, st, t):
    past = st.times < t
    lags = t - st.times[past]
    w = params.betas * np.exp(-np.multiply.outer(lags, params.betas))
    return params.mu + np.einsum("lku,ku->l", params.alphas[:, st.kinds[past]], w)


def state_before(st, grid, t):
    s0, bt, bv = st.state_path(grid)
    k = np.searchsorted(bt, t, side="left")
    return s0 if k == 0 else int(bv[k - 1])


def qrh2_pieces(st, grid):
    """Intervals on which both the history and the state are fixed: (a, b, n_hist, state)."""
    s0, bt, bv = st.state_path(grid)
    cuts = np.unique(np.concatenate([[st.start, st.end], st.times, bt]))
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        n_hist = int(np.searchsorted(st.times, a, side="right"))
        k = np.searchsorted(bt, a, side="right")
        s = s0 if k == 0 else int(bv[k - 1])
        out.append((a, b, n_hist, s))
    return out


def qrh2_quadrature(params, st, fn):
    """Integrate fn(f_row_state, core_values) over the stream with composite Gauss-Legendre."""
    bmax = params.betas.max()
    total = 0.0
    for a, b, n_hist, s in qrh2_pieces(st, params.grid):
        x, w = _gl_nodes(a, b, bmax)
        lags = x[:, None] - st.times[None, :n_hist]
        ex = np.exp(-lags[:, :, None] * params.betas) * params.betas
        core = params.mu[None, :] + np.einsum("lku,nku->nl", params.alphas[:, st.kinds[:n_hist]], ex)
        total += float(w @ fn(params.f[:, s], core))
    return total


def qrh2_loglik_oracle(params, st):
    total = 0.0
    for t, k in zip(st.times, st.kinds):
        s = state_before(st, params.grid, t)
        total += np.log(params.f[k, s] * qrh2_core_direct(params, st, t)[k])
    total -= qrh2_quadrature(params, st, lambda f, core: (core * f[None, :]).sum(axis=1))
    return total


def qrh2_ls_oracle(params, st):
    ev = 0.0
    for t, k in zip(st.times, st.kinds):
        s = state_before(st, params.grid, t)
        ev += params.f[k, s] * qrh2_core_direct(params, st, t)[k]
    sq = qrh2_quadrature(params, st, lambda f, core: ((core * f[None, :]) ** 2).sum(axis=1))
    return sq - 2.0 * ev


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Recorder for acceptance criteria: ``acceptance(n, ok, detail)``
    stores one PASS/FAIL line (shown in the terminal summary) and asserts."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

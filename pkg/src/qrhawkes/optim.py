"""Projected Newton solver for non-negative log-linear intensity fits.

Every maximum-likelihood problem in this package splits by event type into
problems of the form

    maximise  sum_k log(x_s[state_k] + feats_k . x_a) - c_s . x_s - c_a . x_a
    subject to x_s >= 0, x_a >= 0

which is concave.  The solver is Bertsekas' two-metric projected Newton
method with an Armijo search along the projection arc.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse


@dataclass
class LogLinearProblem:
    state_idx: np.ndarray
    n_states: int
    feats: np.ndarray
    c_state: np.ndarray
    c_feat: np.ndarray
    _onehot: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.state_idx = np.asarray(self.state_idx, dtype=np.int64)
        feats = np.asarray(self.feats, dtype=float)
        if feats.ndim != 2:
            feats = feats.reshape(self.state_idx.size, -1)
        self.feats = feats
        self.c_state = np.asarray(self.c_state, dtype=float)
        self.c_feat = np.asarray(self.c_feat, dtype=float)
        n = self.state_idx.size
        self._onehot = scipy.sparse.csr_matrix(
            (np.ones(n), (self.state_idx, np.arange(n))), shape=(self.n_states, n)
        )

    @property
    def n_params(self):
        return self.n_states + self.feats.shape[1]

    def identified(self):
        """Coordinates that actually enter the objective."""
        counts = np.bincount(self.state_idx, minlength=self.n_states)
        s_ok = (self.c_state != 0) | (counts > 0)
        a_ok = (self.c_feat != 0) | np.any(self.feats != 0, axis=0)
        return np.concatenate([s_ok, a_ok])

    def rates(self, x):
        xs, xa = x[: self.n_states], x[self.n_states :]
        return xs[self.state_idx] + self.feats @ xa

    def value(self, x, z=None):
        z = self.rates(x) if z is None else z
        if np.any(z <= 0):
            return -np.inf
        return float(np.sum(np.log(z)) - self.c_state @ x[: self.n_states] - self.c_feat @ x[self.n_states :])

    def grad(self, x, z=None):
        z = self.rates(x) if z is None else z
        inv = 1.0 / z
        gs = self._onehot @ inv - self.c_state
        ga = self.feats.T @ inv - self.c_feat
        return np.concatenate([gs, ga])

    def neg_hessian(self, x, z=None):
        z = self.rates(x) if z is None else z
        w = 1.0 / (z * z)
        ns = self.n_states
        H = np.zeros((self.n_params, self.n_params))
        H[np.arange(ns), np.arange(ns)] = self._onehot @ w
        wf = self.feats * w[:, None]
        sa = self._onehot @ wf
        H[:ns, ns:] = sa
        H[ns:, :ns] = sa.T
        H[ns:, ns:] = self.feats.T @ wf
        return H


@dataclass
class SolveResult:
    x: np.ndarray
    value: float
    pg_norm: float
    iterations: int
    converged: bool
    trace: list


def projected_gradient(x, grad, free):
    """Projected gradient of a maximisation over x >= 0."""
    pg = np.where(x > 0, grad, np.maximum(grad, 0.0))
    return np.where(free, pg, 0.0)


def _newton_direction(H, rhs):
    n = rhs.size
    if n == 0:
        return rhs
    scale = max(np.max(np.abs(np.diag(H))), 1e-300)
    ridge = 1e-12 * scale
    try:
        c = scipy.linalg.cho_factor(H + ridge * np.eye(n), check_finite=False)
        return scipy.linalg.cho_solve(c, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        w, V = np.linalg.eigh(H)
        w = np.maximum(w, ridge)
        return V @ ((V.T @ rhs) / w)


def _arc_search(problem, x, f, g, d, free, sigma, max_halvings=60):
    """Armijo search along the projection arc x(t) = P(x + t d), with the
    sufficient-increase test measured on the actual displacement."""
    t = 1.0
    for _ in range(max_halvings):
        x_new = np.where(free, np.maximum(x + t * d, 0.0), x)
        z_new = problem.rates(x_new)
        f_new = problem.value(x_new, z_new)
        if np.isfinite(f_new) and f_new - f >= sigma * float(g @ (x_new - x)) and f_new > f:
            return x_new, z_new, f_new
        t *= 0.5
    return None, None, None


def maximize_nonneg(problem, x0, tol_abs, max_iter=200, sigma=1e-4):
    """Maximise a :class:`LogLinearProblem` over the non-negative orthant."""
    x = np.maximum(np.asarray(x0, dtype=float).copy(), 0.0)
    free = problem.identified()
    z = problem.rates(x)
    if np.any(z <= 0):
        # nudge baselines of states whose events would get zero intensity
        bump = np.zeros(problem.n_states)
        bad = problem.state_idx[z <= 0]
        pos = problem.c_state[bad] > 0
        bump[bad[pos]] = 1.0 / problem.c_state[bad[pos]]
        x[: problem.n_states] += bump
        z = problem.rates(x)
    f = problem.value(x, z)
    trace = [f]
    pg_norm = np.inf
    converged = False
    it = 0
    for it in range(max_iter + 1):
        g = problem.grad(x, z)
        pg = projected_gradient(x, g, free)
        pg_norm = float(np.max(np.abs(pg))) if pg.size else 0.0
        if pg_norm <= tol_abs:
            converged = True
            break
        if it == max_iter:
            break
        # minimisation view: F = -f, gradient -g
        gF = -g
        eps = min(1e-6, float(np.linalg.norm(x - np.maximum(x - gF, 0.0))))
        active = free & (x <= eps) & (gF > 0)
        fr = free & ~active
        H = problem.neg_hessian(x, z)
        d = np.zeros_like(x)
        d[fr] = _newton_direction(H[np.ix_(fr, fr)], -gF[fr])
        hd = np.diag(H)[active]
        d[active] = -gF[active] / np.where(hd > 0, hd, 1.0)
        x_new, z_new, f_new = _arc_search(problem, x, f, g, d, free, sigma)
        if x_new is None:
            # fall back to a diagonally scaled gradient step
            hd = np.diag(H)
            x_new, z_new, f_new = _arc_search(problem, x, f, g, g / np.where(hd > 0, hd, 1.0), free, sigma)
        if x_new is None:
            break
        x, z, f = x_new, z_new, f_new
        trace.append(f)
    return SolveResult(x=x, value=f, pg_norm=pg_norm, iterations=it, converged=converged, trace=trace)

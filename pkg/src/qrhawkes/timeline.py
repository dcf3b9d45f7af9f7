"""Merged event/state timeline shared by the QRH-I and QRH-II estimators.

A realization is a window ``[start, end]`` carrying typed events and a
piecewise-constant integer state.  The state may change at event times
(endogenous queue) or at arbitrary times (exogenous path).  The window is
cut into intervals at every event and every state change; on each interval
the state is fixed and the exponential traces

    g[m, u](t) = sum_{t_k^m < t} beta_u exp(-beta_u (t - t_k^m))

decay deterministically.  When an event and a state change share a
timestamp the event is processed first, so it sees the pre-change state.
Events sharing a timestamp do not excite each other (strict ``t_k < t``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import OrderingError


@njit(cache=True)
def _timeline_kernel(start, end, ev_t, ev_k, br_t, br_v, s0, betas, n_types):
    n_ev = ev_t.size
    n_br = br_t.size
    n_dec = betas.size
    n_iv = n_ev + n_br + 1
    iv_t0 = np.empty(n_iv)
    iv_dur = np.empty(n_iv)
    iv_state = np.empty(n_iv, dtype=np.int64)
    iv_g = np.empty((n_iv, n_types, n_dec))
    ev_g = np.empty((n_ev, n_types, n_dec))
    ev_state = np.empty(n_ev, dtype=np.int64)
    ev_iv = np.empty(n_ev, dtype=np.int64)
    g = np.zeros((n_types, n_dec))
    # jumps added at the current timestamp; excluded from simultaneous events
    acc = np.zeros((n_types, n_dec))
    t = start
    s = s0
    i = 0
    j = 0
    for iv in range(n_iv):
        is_event = False
        last = False
        if i < n_ev and (j >= n_br or ev_t[i] <= br_t[j]):
            nxt = ev_t[i]
            is_event = True
        elif j < n_br:
            nxt = br_t[j]
        else:
            nxt = end
            last = True
        dt = nxt - t
        if dt > 0:
            acc[:, :] = 0.0
        iv_t0[iv] = t
        iv_dur[iv] = dt
        iv_state[iv] = s
        for m in range(n_types):
            for u in range(n_dec):
                iv_g[iv, m, u] = g[m, u]
                g[m, u] *= np.exp(-betas[u] * dt)
        t = nxt
        if last:
            break
        if is_event:
            for m in range(n_types):
                for u in range(n_dec):
                    ev_g[i, m, u] = max(g[m, u] - acc[m, u], 0.0)
            ev_state[i] = s
            ev_iv[i] = iv
            k = ev_k[i]
            for u in range(n_dec):
                g[k, u] += betas[u]
                acc[k, u] += betas[u]
            i += 1
        else:
            s = br_v[j]
            j += 1
    return iv_t0, iv_dur, iv_state, iv_g, ev_g, ev_state, ev_iv


@dataclass
class Timeline:
    """Per-interval and per-event quantities for one realization.

    ``iv_g`` holds the traces right after the interval opens (post-jump),
    ``ev_g`` the left limits at each event.  ``ev_iv`` is the index of the
    interval that ends at each event.
    """

    start: float
    end: float
    betas: np.ndarray
    ev_kind: np.ndarray
    ev_time: np.ndarray
    ev_state: np.ndarray
    ev_g: np.ndarray
    ev_iv: np.ndarray
    iv_t0: np.ndarray
    iv_dur: np.ndarray
    iv_state: np.ndarray
    iv_g: np.ndarray

    @property
    def n_events(self):
        return self.ev_kind.size

    def iv_dG(self):
        """Integral of each trace over each interval, shape (M, D, U)."""
        b = self.betas
        w = -np.expm1(-np.multiply.outer(self.iv_dur, b)) / b
        return self.iv_g * w[:, None, :]


def _check_sorted(times, what):
    if times.size > 1:
        bad = np.flatnonzero(np.diff(times) < 0)
        if bad.size:
            k = int(bad[0]) + 1
            raise OrderingError(f"{what} times not non-decreasing at index {k}")


def build_timeline(start, end, times, kinds, n_types, betas, s0, brk_times=None, brk_values=None):
    times = np.ascontiguousarray(times, dtype=float)
    kinds = np.ascontiguousarray(kinds, dtype=np.int64)
    if times.shape != kinds.shape:
        raise ValueError("times and kinds must have the same length")
    _check_sorted(times, "event")
    if times.size and (times[0] < start or times[-1] > end):
        raise OrderingError("events fall outside the realization window")
    if kinds.size and (kinds.min() < 0 or kinds.max() >= n_types):
        raise ValueError(f"event kinds must lie in 0..{n_types - 1}")
    if brk_times is None:
        brk_times = np.empty(0)
        brk_values = np.empty(0, dtype=np.int64)
    brk_times = np.ascontiguousarray(brk_times, dtype=float)
    brk_values = np.ascontiguousarray(brk_values, dtype=np.int64)
    _check_sorted(brk_times, "state-change")
    keep = (brk_times >= start) & (brk_times <= end)
    brk_times, brk_values = brk_times[keep], brk_values[keep]
    betas = np.ascontiguousarray(betas, dtype=float)
    out = _timeline_kernel(
        float(start), float(end), times, kinds, brk_times, brk_values, int(s0), betas, int(n_types)
    )
    iv_t0, iv_dur, iv_state, iv_g, ev_g, ev_state, ev_iv = out
    return Timeline(
        start=float(start),
        end=float(end),
        betas=betas,
        ev_kind=kinds,
        ev_time=times,
        ev_state=ev_state,
        ev_g=ev_g,
        ev_iv=ev_iv,
        iv_t0=iv_t0,
        iv_dur=iv_dur,
        iv_state=iv_state,
        iv_g=iv_g,
    )

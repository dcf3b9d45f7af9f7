"""Model comparison, residual analysis and conditional-intensity summaries.

Everything here returns plain arrays or small dataclasses that serialize to
CSV/JSON; plotting is left to the caller.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc
from scipy.stats import kstwobign

from .errors import DomainError
from .lobdata import EventStream, Segment, StateGrid, imbalance, merge_paths
from .qrh1 import GATED, Qrh1Params, _segment_timeline
from .qrh2 import Qrh2Params
from .simulate import SimConfig, simulate_qrh1
from .timeline import build_timeline

MIN_STATE_EVENTS = 50


# ---------------------------------------------------------------------------
# information criteria and likelihood ratio


def information_criteria(L, k, N):
    """(AIC, BIC) = (2k - 2L, k ln N - 2L)."""
    if k < 0 or N <= 0:
        raise DomainError("need k >= 0 and N > 0")
    return 2.0 * k - 2.0 * L, k * np.log(N) - 2.0 * L


def chi2_sf(x, df):
    """Upper tail of the chi-square law, via the regularized incomplete gamma Q(df/2, x/2)."""
    if df <= 0:
        raise DomainError("degrees of freedom must be positive")
    x = np.asarray(x, dtype=float)
    out = gammaincc(0.5 * df, 0.5 * np.maximum(x, 0.0))
    return float(out) if out.ndim == 0 else out


def lr_test(L0, L1, df, rtol=1e-6):
    """Likelihood-ratio statistic 2 (L1 - L0) and its chi-square(df) p-value."""
    if df <= 0:
        raise DomainError("degrees of freedom must be positive")
    LR = 2.0 * (L1 - L0)
    if LR < -2.0 * rtol * max(abs(L0), abs(L1), 1.0):
        warnings.warn(f"nested fit has lower likelihood (LR = {LR:.6g}); optimization failure suspected",
                      RuntimeWarning, stacklevel=2)
    return LR, chi2_sf(max(LR, 0.0), df)


@dataclass
class ModelScore:
    name: str
    loglik: float
    n_params: int
    aic: float
    bic: float


@dataclass
class LRResult:
    null: str
    alt: str
    lr: float
    df: int
    p_value: float


@dataclass
class ComparisonReport:
    n_events: int
    models: list = field(default_factory=list)
    tests: list = field(default_factory=list)

    def to_dict(self):
        return {
            "n_events": self.n_events,
            "models": [vars(m) for m in self.models],
            "lr_tests": [vars(t) for t in self.tests],
        }


def compare_models(entries, n_events, pairs=None) -> ComparisonReport:
    """``entries``: iterable of (name, loglik, n_params).  ``pairs``: (null, alt)
    names; by default every pair where one model has fewer parameters.  The
    LR p-value is only meaningful for nested pairs, so callers that know the
    nesting should pass ``pairs`` explicitly."""
    rep = ComparisonReport(n_events=int(n_events))
    by_name = {}
    for name, L, k in entries:
        aic, bic = information_criteria(L, k, n_events)
        m = ModelScore(name, float(L), int(k), float(aic), float(bic))
        rep.models.append(m)
        by_name[name] = m
    if pairs is None:
        pairs = [(a.name, b.name) for a in rep.models for b in rep.models if a.n_params < b.n_params]
    for null, alt in pairs:
        m0, m1 = by_name[null], by_name[alt]
        df = m1.n_params - m0.n_params
        lr, p = lr_test(m0.loglik, m1.loglik, df)
        rep.tests.append(LRResult(null, alt, float(lr), int(df), float(p)))
    return rep


# ---------------------------------------------------------------------------
# compensators


@dataclass
class Realized:
    """Per-realization compensator bookkeeping.

    ``cum[k, l]`` is the type-l compensator from the realization start up to
    event k; ``lam[k, l]`` the left-limit intensity at event k; ``state[k]``
    the state just before event k.
    """

    start: float
    end: float
    times: np.ndarray
    kinds: np.ndarray
    state: np.ndarray
    cum: np.ndarray
    lam: np.ndarray
    iv_state: np.ndarray
    iv_dur: np.ndarray
    iv_comp: np.ndarray


def _realized_qrh1(params: Qrh1Params, seg: Segment) -> Realized:
    tl = _segment_timeline(seg, params.betas, params.Q_max)
    D = params.D
    A = params.alphas.reshape(D, -1)
    base = np.minimum(tl.iv_state, params.Q_max)
    dG = tl.iv_dG().reshape(tl.iv_dur.size, -1)
    comp = params.mu[:, base].T * tl.iv_dur[:, None] + dG @ A.T
    ev_base = np.minimum(tl.ev_state, params.Q_max)
    lam = params.mu[:, ev_base].T + tl.ev_g.reshape(tl.ev_kind.size, -1) @ A.T
    for l in GATED:
        comp[tl.iv_state == 0, l] = 0.0
        lam[tl.ev_state == 0, l] = 0.0
    cum = np.cumsum(comp, axis=0)
    return Realized(seg.start, seg.end, tl.ev_time, tl.ev_kind, tl.ev_state, cum[tl.ev_iv], lam,
                    tl.iv_state, tl.iv_dur, comp)


def _realized_qrh2(params: Qrh2Params, st: EventStream) -> Realized:
    s0, bt, bv = st.state_path(params.grid)
    tl = build_timeline(st.start, st.end, st.times, st.kinds, params.D, params.betas, s0, bt, bv)
    D = params.D
    A = params.alphas.reshape(D, -1)
    f_iv = params.f[:, tl.iv_state].T
    dG = tl.iv_dG().reshape(tl.iv_dur.size, -1)
    comp = f_iv * (params.mu[None, :] * tl.iv_dur[:, None] + dG @ A.T)
    lam = params.f[:, tl.ev_state].T * (params.mu[None, :] + tl.ev_g.reshape(tl.ev_kind.size, -1) @ A.T)
    cum = np.cumsum(comp, axis=0)
    return Realized(st.start, st.end, tl.ev_time, tl.ev_kind, tl.ev_state, cum[tl.ev_iv], lam,
                    tl.iv_state, tl.iv_dur, comp)


def realize(params, data):
    """Compensator bookkeeping for each segment (QRH-I) or day (QRH-II)."""
    if isinstance(data, (Segment, EventStream)):
        data = [data]
    if isinstance(params, Qrh1Params):
        return [_realized_qrh1(params, s) for s in data]
    if isinstance(params, Qrh2Params):
        return [_realized_qrh2(params, s) for s in data]
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


# ---------------------------------------------------------------------------
# time rescaling


def ks_exp1(x):
    """KS distance to Exp(1) and asymptotic p-value with the usual small-n correction."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n == 0:
        return np.nan, np.nan
    cdf = -np.expm1(-x)
    i = np.arange(1, n + 1)
    d = max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n))
    sn = np.sqrt(n)
    p = float(kstwobign.sf(d * (sn + 0.12 + 0.11 / sn)))
    return float(d), min(max(p, 0.0), 1.0)


@dataclass
class ResidualTest:
    kind: int
    residuals: np.ndarray
    ks: float
    p_value: float

    @property
    def n(self):
        return self.residuals.size


def time_rescaling_residuals(params, data) -> list:
    """Per type, compensator increments between consecutive events of that type
    within each realization, tested against Exp(1)."""
    reals = realize(params, data)
    out = []
    for l in range(params.D):
        res = []
        for r in reals:
            sel = r.kinds == l
            c = r.cum[sel, l]
            if c.size > 1:
                res.append(np.diff(c))
        res = np.concatenate(res) if res else np.empty(0)
        ks, p = ks_exp1(res)
        out.append(ResidualTest(l, res, ks, p))
    return out


def qq_pairs(sample_a, sample_b, n_quantiles=100):
    """Log-quantiles of two positive samples at levels (i - 1/2)/n, i = 1..n."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise DomainError("samples must be non-empty")
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("log quantiles need positive samples")
    levels = (np.arange(1, n_quantiles + 1) - 0.5) / n_quantiles
    qa = np.quantile(a, levels, method="inverted_cdf")
    qb = np.quantile(b, levels, method="inverted_cdf")
    return np.log(qa), np.log(qb)


# ---------------------------------------------------------------------------
# conditional intensities


@dataclass
class ConditionalTable:
    """Per (type, state) average intensity plus the counts behind it."""

    lam: np.ndarray  # (D, S), nan where the state saw no events
    counts: np.ndarray  # (D, S) events of each type in each state
    exposure: np.ndarray  # (S,) summed gaps ending in each state

    @property
    def state_counts(self):
        return self.counts.sum(axis=0)


def _gaps(r: Realized):
    prev = np.concatenate([[r.start], r.times[:-1]])
    return r.times - prev


def _state_index(r, params, n_states):
    s = r.state
    if isinstance(params, Qrh1Params):
        s = np.minimum(s, params.Q_max)
    if n_states is not None:
        s = np.minimum(s, n_states - 1)
    return s


def _n_states(params):
    return params.Q_max + 1 if isinstance(params, Qrh1Params) else params.grid.n_states


def empirical_conditional_intensity(params_or_dims, data, n_states=None) -> ConditionalTable:
    """Average intensity conditioned on the state just before each event.

    The total rate in state q is one over the mean gap ending in q; each type
    takes its share of the events in q.  Gaps start at the realization start
    for the first event.  ``params_or_dims`` only fixes the state space
    (a parameter object).
    """
    params = params_or_dims
    reals = realize(params, data)
    S = _n_states(params) if n_states is None else n_states
    D = params.D
    counts = np.zeros((D, S), dtype=np.int64)
    expo = np.zeros(S)
    for r in reals:
        s = _state_index(r, params, S)
        np.add.at(counts, (r.kinds, s), 1)
        expo += np.bincount(s, weights=_gaps(r), minlength=S)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(counts.sum(axis=0) > 0, counts / expo, np.nan)
    return ConditionalTable(lam, counts, expo)


def model_conditional_intensity(params, data, method="compensator", min_events=MIN_STATE_EVENTS):
    """Model counterpart of :func:`empirical_conditional_intensity` and the
    weighted relative errors Delta per type.

    ``method='compensator'`` averages the model intensity over the same gaps
    (integral of lambda over the gaps ending in q, divided by their length),
    which is the unbiased counterpart of the empirical estimator.
    ``method='events'`` averages the left-limit intensity over the events
    observed in q.  Returns ``(model_table, empirical_table, delta, excluded)``.
    """
    if method not in ("compensator", "events"):
        raise ValueError("method must be 'compensator' or 'events'")
    reals = realize(params, data)
    emp = empirical_conditional_intensity(params, data)
    S = emp.exposure.size
    D = params.D
    num = np.zeros((D, S))
    den = np.zeros(S)
    for r in reals:
        s = _state_index(r, params, S)
        if method == "compensator":
            c = np.vstack([np.zeros((1, D)), r.cum])
            np.add.at(num.T, s, np.diff(c, axis=0))
            den += np.bincount(s, weights=_gaps(r), minlength=S)
        else:
            np.add.at(num.T, s, r.lam)
            den += np.bincount(s, minlength=S)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(den > 0, num / den, np.nan)
    model = ConditionalTable(lam, emp.counts, emp.exposure)
    delta, excluded = weighted_relative_error(emp, model, min_events)
    return model, emp, delta, excluded


def weighted_relative_error(emp: ConditionalTable, model: ConditionalTable, min_events=MIN_STATE_EVENTS):
    """Delta_l = sum_q |emp - model| N_l(q) / sum_q emp N_l(q) over states with
    at least ``min_events`` events; also returns the excluded states."""
    keep = emp.state_counts >= min_events
    excluded = np.flatnonzero(~keep & (emp.state_counts > 0))
    D = emp.lam.shape[0]
    delta = np.full(D, np.nan)
    for l in range(D):
        w = emp.counts[l, keep]
        e = emp.lam[l, keep]
        m = model.lam[l, keep]
        den = np.sum(e * w)
        if den > 0:
            delta[l] = np.sum(np.abs(e - m) * w) / den
    return delta, excluded


def endogeneity_fraction(params: Qrh1Params, config: SimConfig = None, path=None):
    """e_l(q) = 1 - mu_l(q) / Lambda_l(q), with Lambda_l(q) the time-averaged
    intensity in state q along a long simulated path (integrated exactly).

    Returns ``(e, Lambda, occupation)``; entries for unvisited or gated states
    are nan.
    """
    if path is None:
        if config is None:
            raise ValueError("pass a SimConfig or a simulated path")
        path = simulate_qrh1(params, config)
    seg = path.segment() if hasattr(path, "segment") else path
    r = realize(params, seg)[0]
    nq = params.Q_max + 1
    base = np.minimum(r.iv_state, params.Q_max)
    occ = np.bincount(base, weights=r.iv_dur, minlength=nq)
    integ = np.zeros((params.D, nq))
    np.add.at(integ.T, base, r.iv_comp)
    with np.errstate(invalid="ignore", divide="ignore"):
        Lam = np.where(occ > 0, integ / occ, np.nan)
        e = 1.0 - params.mu / Lam
    e[~np.isfinite(e)] = np.nan
    for l in GATED:
        e[l, 0] = np.nan
    return e, Lam, occ


def _weighted_median(x, w):
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    c = np.cumsum(w)
    return float(x[np.searchsorted(c, 0.5 * c[-1], side="left")])


def f_vs_imbalance(params: Qrh2Params, streams):
    """Rows (state, ask bucket, bid bucket, median imbalance, f per type).

    The median imbalance of a state is taken over the time spent in it.
    """
    if isinstance(streams, EventStream):
        streams = [streams]
    grid = params.grid
    S = grid.n_states
    vals = [[] for _ in range(S)]
    wts = [[] for _ in range(S)]
    for st in streams:
        if st.qa is None or st.qb is None:
            raise DomainError("queue paths are needed to compute imbalances")
        times, qa, qb = merge_paths(st.qa, st.qb)
        nxt = np.concatenate([times[1:], [np.inf]])
        dur = np.clip(np.minimum(nxt, st.end) - np.maximum(times, st.start), 0.0, None)
        pos = dur > 0
        qa, qb, dur = qa[pos], qb[pos], dur[pos]
        s = grid.index(qa, qb)
        imb = imbalance(qb, qa)
        for k in range(S):
            sel = s == k
            vals[k].append(imb[sel])
            wts[k].append(dur[sel])
    rows = []
    for k in range(S):
        v = np.concatenate(vals[k])
        w = np.concatenate(wts[k])
        med = _weighted_median(v, w) if v.size else np.nan
        i, j = grid.buckets(k)
        rows.append((k, int(i) + 1, int(j) + 1, med, *params.f[:, k].tolist()))
    return rows

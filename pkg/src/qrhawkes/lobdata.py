"""Level-I order book ingestion and order-flow classification.

Input is a CSV file with header

    ts,bid_px,bid_sz,ask_px,ask_sz,trade_sz,trade_side

``ts`` is decimal seconds since the session open (microsecond resolution),
prices are integers in price units (an empty price field marks an unquoted
side), sizes are integer contracts.  A trade line (``trade_sz > 0``)
repeats the pre-trade book; the quote line that follows carries the
post-trade book.  ``trade_side`` names the book side whose liquidity was
consumed (``ask`` for a buyer-initiated trade).
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import (
    CrossedBookError,
    DegenerateGridError,
    DomainError,
    IncompleteBookError,
    MalformedLineError,
    OrderingError,
    SchemaError,
    UndefinedAESError,
)

COLUMNS = ("ts", "bid_px", "bid_sz", "ask_px", "ask_sz", "trade_sz", "trade_side")

BID, ASK = "bid", "ask"
SIDE_CODE = {"none": 0, BID: 1, ASK: 2}
SIDE_NAME = {v: k for k, v in SIDE_CODE.items()}

# 3-type scheme
L, C, M = 0, 1, 2
KINDS3 = ("L", "C", "M")

# 8-type scheme
P_UP, P_DOWN, L_A, L_B, C_A, C_B, M_A, M_B = range(8)
KINDS8 = ("P+", "P-", "La", "Lb", "Ca", "Cb", "Ma", "Mb")
_L8 = {ASK: L_A, BID: L_B}
_C8 = {ASK: C_A, BID: C_B}
_M8 = {ASK: M_A, BID: M_B}


@dataclass(frozen=True)
class RawRecord:
    ts: float
    bid_px: int
    bid_sz: int
    ask_px: int
    ask_sz: int
    trade_sz: int
    trade_side: str


@dataclass
class Records(Sequence):
    """Columnar store of raw records; indexing yields :class:`RawRecord`.

    Timestamps are kept as integer microseconds so files round-trip exactly.
    An unquoted side has price 0.
    """

    ts_us: np.ndarray
    bid_px: np.ndarray
    bid_sz: np.ndarray
    ask_px: np.ndarray
    ask_sz: np.ndarray
    trade_sz: np.ndarray
    trade_side: np.ndarray

    def __len__(self):
        return self.ts_us.size

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Records(*(getattr(self, c)[i] for c in _FIELDS))
        return RawRecord(
            ts=self.ts_us[i] / 1e6,
            bid_px=int(self.bid_px[i]),
            bid_sz=int(self.bid_sz[i]),
            ask_px=int(self.ask_px[i]),
            ask_sz=int(self.ask_sz[i]),
            trade_sz=int(self.trade_sz[i]),
            trade_side=SIDE_NAME[int(self.trade_side[i])],
        )

    def __iter__(self) -> Iterator[RawRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def ts(self):
        return self.ts_us / 1e6

    @classmethod
    def from_rows(cls, rows):
        """Build from (ts, bid_px, bid_sz, ask_px, ask_sz, trade_sz, trade_side) tuples."""
        rows = list(rows)
        ts = np.array([round(r[0] * 1_000_000) for r in rows], dtype=np.int64)
        cols = [np.array([r[k] or 0 for r in rows], dtype=np.int64) for k in range(1, 6)]
        side = np.array([SIDE_CODE[r[6]] for r in rows], dtype=np.int8)
        recs = cls(ts, *cols, side)
        validate_records(recs)
        return recs


_FIELDS = ("ts_us", "bid_px", "bid_sz", "ask_px", "ask_sz", "trade_sz", "trade_side")


def _line_of(idx):
    # header is line 1
    return int(idx) + 2


def _parse_ts(col: pd.Series) -> np.ndarray:
    ok = col.str.fullmatch(r"\d+(\.\d+)?")
    if not ok.all():
        raise MalformedLineError(_line_of(np.flatnonzero(~ok.to_numpy())[0]), "bad timestamp")
    parts = col.str.partition(".")
    whole = parts[0].astype(np.int64).to_numpy()
    frac = parts[2]
    extra = frac.str.slice(6)
    bad = extra.str.strip("0") != ""
    if bad.any():
        raise MalformedLineError(_line_of(np.flatnonzero(bad.to_numpy())[0]), "sub-microsecond timestamp")
    frac = frac.str.slice(0, 6).str.ljust(6, "0").astype(np.int64).to_numpy()
    return whole * 1_000_000 + frac


def _parse_int(col: pd.Series, name, allow_empty=False) -> np.ndarray:
    pattern = r"\d*" if allow_empty else r"\d+"
    ok = col.str.fullmatch(pattern)
    if not ok.all():
        raise MalformedLineError(_line_of(np.flatnonzero(~ok.to_numpy())[0]), f"bad {name} value")
    return col.replace("", "0").astype(np.int64).to_numpy()


def validate_records(recs: Records, line_offset=2):
    """Check ordering, book and trade invariants; raise with the first bad line."""
    n = len(recs)
    if n > 1:
        back = np.flatnonzero(np.diff(recs.ts_us) < 0)
        if back.size:
            raise OrderingError("timestamp goes backwards", line=int(back[0]) + 1 + line_offset)
    both = (recs.bid_px > 0) & (recs.ask_px > 0)
    crossed = np.flatnonzero(both & (recs.ask_px <= recs.bid_px))
    if crossed.size:
        raise CrossedBookError(int(crossed[0]) + line_offset, "crossed or locked book (ask_px <= bid_px)")
    mismatch = np.flatnonzero((recs.trade_side == 0) != (recs.trade_sz == 0))
    if mismatch.size:
        raise MalformedLineError(int(mismatch[0]) + line_offset, "trade_side must be none iff trade_sz is 0")


def parse_l1_csv(path) -> Records:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except pd.errors.ParserError as exc:
        raise MalformedLineError(0, str(exc)) from exc
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}; expected header {','.join(COLUMNS)}")
    extra = [c for c in df.columns if c not in COLUMNS]
    if extra:
        raise SchemaError(f"{path}: unexpected column(s) {extra}")
    df = df.apply(lambda s: s.str.strip())
    ts = _parse_ts(df["ts"])
    bid_px = _parse_int(df["bid_px"], "bid_px", allow_empty=True)
    ask_px = _parse_int(df["ask_px"], "ask_px", allow_empty=True)
    bid_sz = _parse_int(df["bid_sz"], "bid_sz", allow_empty=True)
    ask_sz = _parse_int(df["ask_sz"], "ask_sz", allow_empty=True)
    trade_sz = _parse_int(df["trade_sz"], "trade_sz", allow_empty=True)
    side_str = df["trade_side"].replace("", "none")
    known = side_str.isin(list(SIDE_CODE))
    if not known.all():
        raise MalformedLineError(_line_of(np.flatnonzero(~known.to_numpy())[0]), "bad trade_side")
    side = side_str.map(SIDE_CODE).to_numpy().astype(np.int8)
    recs = Records(ts, bid_px, bid_sz, ask_px, ask_sz, trade_sz, side)
    validate_records(recs)
    return recs


def atomic_write_text(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        # mkstemp creates 0600; use the mode a plain open() would give
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_ts(ts_us) -> np.ndarray:
    ts_us = np.asarray(ts_us, dtype=np.int64)
    whole = (ts_us // 1_000_000).astype(str)
    frac = np.char.zfill((ts_us % 1_000_000).astype(str), 6)
    return np.char.add(np.char.add(whole, "."), frac)


def write_l1_csv(recs: Records, path):
    px = lambda a: np.where(a > 0, a.astype(str), "")
    df = pd.DataFrame(
        {
            "ts": format_ts(recs.ts_us),
            "bid_px": px(recs.bid_px),
            "bid_sz": recs.bid_sz.astype(str),
            "ask_px": px(recs.ask_px),
            "ask_sz": recs.ask_sz.astype(str),
            "trade_sz": recs.trade_sz.astype(str),
            "trade_side": np.array([SIDE_NAME[i] for i in range(3)])[recs.trade_side],
        }
    )
    atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))


# ---------------------------------------------------------------------------
# piecewise-constant paths


@dataclass
class StepPath:
    """Right-continuous step function: ``values[i]`` holds from ``breakpoints[i]``.

    ``rec`` optionally records the raw-record index of each breakpoint, which
    disambiguates breakpoints sharing a timestamp.
    """

    breakpoints: np.ndarray
    values: np.ndarray
    rec: np.ndarray | None = None

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=float)
        self.values = np.asarray(self.values)
        if self.breakpoints.shape != self.values.shape:
            raise ValueError("breakpoints and values must have equal length")
        if self.breakpoints.size > 1 and np.any(np.diff(self.breakpoints) < 0):
            raise OrderingError("path breakpoints must be sorted")

    def value_at(self, t):
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        if np.any(idx < 0):
            raise DomainError("time precedes the first breakpoint")
        return self.values[idx]

    def compact(self):
        """Drop breakpoints that do not change the value."""
        if self.values.size == 0:
            return self
        keep = np.ones(self.values.size, dtype=bool)
        keep[1:] = self.values[1:] != self.values[:-1]
        rec = None if self.rec is None else self.rec[keep]
        return StepPath(self.breakpoints[keep], self.values[keep], rec)


@dataclass
class QueuePath(StepPath):
    side: str = ""


def merge_paths(a: StepPath, b: StepPath):
    """Union of breakpoints with both values evaluated at each one."""
    times = np.union1d(a.breakpoints, b.breakpoints)
    return times, a.value_at(times), b.value_at(times)


# ---------------------------------------------------------------------------
# reference price, AES, queue units


def _pref_per_record(recs: Records, tick=1):
    if np.any(recs.bid_px <= 0) or np.any(recs.ask_px <= 0):
        i = int(np.flatnonzero((recs.bid_px <= 0) | (recs.ask_px <= 0))[0])
        raise IncompleteBookError(f"record {i}: both sides must be quoted to define the reference price")
    spread = recs.ask_px - recs.bid_px
    if np.any(spread % tick):
        raise DomainError("spread is not a multiple of the tick")
    n_ticks = spread // tick
    mid = 0.5 * (recs.ask_px + recs.bid_px)
    pref = np.empty(len(recs))
    prev = np.nan
    half = 0.5 * tick
    for i in range(len(recs)):
        if n_ticks[i] % 2 == 1:
            p = mid[i]
        else:
            lo, hi = mid[i] - half, mid[i] + half
            if np.isnan(prev):
                p = lo
            else:
                p = lo if abs(lo - prev) <= abs(hi - prev) else hi
        pref[i] = p
        prev = p
    return pref


def compute_reference_price(recs: Records, tick=1) -> StepPath:
    """Reference-price path: midprice for odd spreads, else midprice -/+ tick/2
    (whichever is closer to the previous reference price; the lower one when
    there is no previous value)."""
    pref = _pref_per_record(recs, tick)
    path = StepPath(recs.ts, pref, rec=np.arange(len(recs)))
    return path.compact()


def bucket_queue(volume, aes):
    """Queue size in AES units: ceil(volume / aes), zero iff volume is zero."""
    if aes <= 0:
        raise DomainError("AES must be positive")
    v = np.asarray(volume, dtype=float)
    if np.any(v < 0):
        raise DomainError("queue volume must be non-negative")
    q = np.ceil(v / aes).astype(np.int64)
    return int(q) if q.ndim == 0 else q


def imbalance(q_b, q_a):
    qb = np.asarray(q_b, dtype=float)
    qa = np.asarray(q_a, dtype=float)
    tot = qb + qa
    if np.any(tot <= 0):
        raise DomainError("imbalance undefined when both queues are empty")
    out = (qb - qa) / tot
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# 3-type classification at the fixed-price levels Q-1 / Q+1


@dataclass(frozen=True)
class Event3:
    ts: float
    kind: str
    side: str
    size: int = 1
    q_after: int = 0
    rec: int = -1


@dataclass
class SideFlow:
    """Output of :func:`classify_events3` for one side."""

    side: str
    events: list
    queue: QueuePath
    volume: StepPath
    aes: float


def _level_volume(recs, pref, side, tick):
    if side == ASK:
        return np.where(recs.ask_px == pref + 0.5 * tick, recs.ask_sz, 0)
    return np.where(recs.bid_px == pref - 0.5 * tick, recs.bid_sz, 0)


def _scan3(recs: Records, pref, side, tick):
    """Yield (kind, rec, size, volume_after) for events, and relabel markers
    as (None, rec, 0, volume)."""
    vol = _level_volume(recs, pref, side, tick)
    code = SIDE_CODE[side]
    out = []
    if len(recs) == 0:
        return out
    cur = int(vol[0])
    cur_pref = pref[0]
    out.append((None, 0, 0, cur))
    for i in range(1, len(recs)):
        if recs.trade_sz[i] > 0:
            if recs.trade_side[i] == code and cur > 0:
                size = min(int(recs.trade_sz[i]), cur)
                cur -= size
                out.append((M, i, size, cur))
            continue
        if pref[i] != cur_pref:
            cur_pref = pref[i]
            cur = int(vol[i])
            out.append((None, i, 0, cur))
            continue
        d = int(vol[i]) - cur
        if d > 0:
            out.append((L, i, d, int(vol[i])))
        elif d < 0:
            out.append((C, i, -d, int(vol[i])))
        cur = int(vol[i])
    return out


def compute_aes(recs: Records, tick=1) -> float:
    """Average absolute size of all L/C/M events at the best fixed-price levels."""
    pref = _pref_per_record(recs, tick)
    sizes = [s for side in (BID, ASK) for k, _, s, _ in _scan3(recs, pref, side, tick) if k is not None]
    if not sizes:
        raise UndefinedAESError("no classified events; AES is undefined")
    return float(np.mean(sizes))


def classify_events3(recs: Records, side, aes=None, tick=1) -> SideFlow:
    """Classify size changes at the fixed-price level next to the reference price.

    Trade lines give ``M``; size increases at the level give ``L``; decreases
    without a trade give ``C``.  A change of reference price relabels the
    level and produces no event.
    """
    if side not in (BID, ASK):
        raise ValueError(f"side must be 'bid' or 'ask', got {side!r}")
    pref = _pref_per_record(recs, tick)
    if aes is None:
        aes = compute_aes(recs, tick)
    ts = recs.ts
    items = _scan3(recs, pref, side, tick)
    events = []
    bp, vals, rec = [], [], []
    for kind, i, size, v in items:
        q = bucket_queue(v, aes)
        if kind is not None:
            events.append(Event3(ts=float(ts[i]), kind=KINDS3[kind], side=side, size=size, q_after=q, rec=i))
        bp.append(ts[i])
        vals.append(v)
        rec.append(i)
    vol = StepPath(np.array(bp), np.array(vals, dtype=np.int64), np.array(rec))
    queue = QueuePath(vol.breakpoints, bucket_queue(vol.values, aes) if vals else np.array([], dtype=np.int64), vol.rec, side=side)
    return SideFlow(side=side, events=events, queue=queue, volume=vol, aes=aes)


@dataclass
class Segment:
    """One realization of the single-queue model: constant reference price.

    ``q0`` is the queue (AES units) at ``start``; ``q_after[k]`` the queue right
    after event ``k``.  ``kinds`` uses 0=L, 1=C, 2=M.
    """

    start: float
    end: float
    times: np.ndarray
    kinds: np.ndarray
    q0: int
    q_after: np.ndarray
    p_ref: float = float("nan")
    side: str = ""
    sizes: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.kinds = np.asarray(self.kinds, dtype=np.int64)
        self.q_after = np.asarray(self.q_after, dtype=np.int64)
        if self.sizes is None:
            self.sizes = np.ones(self.times.size, dtype=np.int64)
        if self.end < self.start:
            raise OrderingError("segment end precedes its start")
        if self.times.size and (self.times[0] < self.start or self.times[-1] > self.end):
            raise OrderingError("segment events fall outside [start, end]")

    @property
    def n_events(self):
        return self.times.size

    @property
    def length(self):
        return self.end - self.start

    @property
    def states(self):
        """Queue on each inter-event interval: [q0, q_after...], length N+1."""
        return np.concatenate([[self.q0], self.q_after]).astype(np.int64)

    @property
    def queue(self) -> QueuePath:
        return QueuePath(np.concatenate([[self.start], self.times]), self.states, side=self.side)

    def events(self):
        return [
            Event3(ts=float(t), kind=KINDS3[k], side=self.side, size=int(s), q_after=int(q))
            for t, k, s, q in zip(self.times, self.kinds, self.sizes, self.q_after)
        ]


def segment_by_pref(flow: SideFlow, pref: StepPath, end_time, min_events=20) -> list:
    """Cut a side's event flow into maximal constant-reference-price segments.

    A segment runs from one reference-price change to the next (the last one
    to ``end_time``); events stamped at or after the closing change are
    dropped.  Segments with fewer than ``min_events`` events are discarded.
    """
    if pref.rec is None:
        raise ValueError("reference-price path must carry record indices")
    cut_recs = pref.rec
    cut_times = pref.breakpoints
    ev_rec = np.array([e.rec for e in flow.events], dtype=np.int64)
    q_at = dict(zip(flow.queue.rec.tolist(), flow.queue.values.tolist()))
    segments = []
    for j in range(cut_recs.size):
        r0 = cut_recs[j]
        start = cut_times[j]
        if j + 1 < cut_recs.size:
            r1, end = cut_recs[j + 1], cut_times[j + 1]
        else:
            r1, end = np.iinfo(np.int64).max, float(end_time)
        lo = np.searchsorted(ev_rec, r0, side="left")
        hi = np.searchsorted(ev_rec, r1, side="left")
        evs = [e for e in flow.events[lo:hi] if e.ts < end or (j + 1 == cut_recs.size and e.ts <= end)]
        if len(evs) < min_events:
            continue
        segments.append(
            Segment(
                start=float(start),
                end=float(end),
                times=np.array([e.ts for e in evs]),
                kinds=np.array([KINDS3.index(e.kind) for e in evs]),
                q0=int(q_at[int(r0)]),
                q_after=np.array([e.q_after for e in evs]),
                p_ref=float(pref.values[j]),
                side=flow.side,
                sizes=np.array([e.size for e in evs]),
            )
        )
    return segments


def mean_realization_length(segments) -> float:
    s = np.array([seg.length if hasattr(seg, "length") else seg for seg in segments], dtype=float)
    if s.size == 0 or s.sum() <= 0:
        raise DomainError("need at least one segment of positive length")
    return float(np.mean(s**2) / np.mean(s))


# ---------------------------------------------------------------------------
# 8-type classification for the two-sided model


@dataclass(frozen=True)
class Event8:
    ts: float
    kind: str
    qa_after: int = 0
    qb_after: int = 0
    rec: int = -1


@dataclass
class EventStream:
    """One trading day of 8-type events with the best-queue paths.

    Either ``qa``/``qb`` (queue paths in AES units) or ``states`` (a path of
    grid-state indices, for exogenous replays) must be supplied.
    """

    start: float
    end: float
    times: np.ndarray
    kinds: np.ndarray
    qa: QueuePath | None = None
    qb: QueuePath | None = None
    states: StepPath | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.kinds = np.asarray(self.kinds, dtype=np.int64)
        if self.times.size and (self.times[0] < self.start or self.times[-1] > self.end):
            raise OrderingError("stream events fall outside [start, end]")

    @property
    def n_events(self):
        return self.times.size

    def state_path(self, grid=None):
        """Return (initial state, change times, new states)."""
        if self.states is not None:
            p = self.states
        else:
            if grid is None:
                raise ValueError("a StateGrid is needed to map queue sizes to states")
            times, qa, qb = merge_paths(self.qa, self.qb)
            p = StepPath(times, grid.index(qa, qb)).compact()
        if p.breakpoints.size == 0 or p.breakpoints[0] > self.start:
            raise DomainError("state path must cover the stream start")
        s0 = p.value_at(self.start)
        later = p.breakpoints > self.start
        return int(s0), p.breakpoints[later], p.values[later].astype(np.int64)


def _mid2(recs, i):
    return int(recs.ask_px[i]) + int(recs.bid_px[i])


def classify_events8(recs: Records, aes=None, tick=1):
    """Classify into P+, P-, La, Lb, Ca, Cb, Ma, Mb.

    A quote line that moves the midprice yields exactly one P event (stamped
    at the first pending trade, if any, else at the quote); trades pending
    before a quote that leaves the midprice unchanged become M events.
    Returns ``(events, qa_path, qb_path)`` with queues in AES units.
    """
    if np.any(recs.bid_px <= 0) or np.any(recs.ask_px <= 0):
        raise IncompleteBookError("both sides must be quoted for the 8-type scheme")
    if aes is None:
        aes = compute_aes(recs, tick)
    ts = recs.ts
    n = len(recs)
    events = []
    if n == 0:
        empty = QueuePath(np.empty(0), np.empty(0, dtype=np.int64))
        return events, empty, empty
    cur = {ASK: int(recs.ask_sz[0]), BID: int(recs.bid_sz[0])}
    px = {ASK: int(recs.ask_px[0]), BID: int(recs.bid_px[0])}
    bp, qa, qb, rec_idx = [ts[0]], [cur[ASK]], [cur[BID]], [0]
    pending = []

    def emit(t, kind, i):
        events.append(Event8(ts=float(t), kind=KINDS8[kind], qa_after=cur[ASK], qb_after=cur[BID], rec=i))
        bp.append(t)
        qa.append(cur[ASK])
        qb.append(cur[BID])
        rec_idx.append(i)

    for i in range(1, n):
        if recs.trade_sz[i] > 0:
            pending.append((ts[i], SIDE_NAME[int(recs.trade_side[i])], int(recs.trade_sz[i]), i))
            continue
        new_px = {ASK: int(recs.ask_px[i]), BID: int(recs.bid_px[i])}
        new_sz = {ASK: int(recs.ask_sz[i]), BID: int(recs.bid_sz[i])}
        mid_prev = px[ASK] + px[BID]
        mid_new = new_px[ASK] + new_px[BID]
        if mid_new != mid_prev:
            t = pending[0][0] if pending else ts[i]
            pending.clear()
            px, cur = new_px, new_sz
            emit(t, P_UP if mid_new > mid_prev else P_DOWN, i)
            continue
        traded = {ASK: False, BID: False}
        for t, s, size, j in pending:
            cur[s] = max(cur[s] - size, 0)
            traded[s] = True
            emit(t, _M8[s], j)
        pending.clear()
        for s in (ASK, BID):
            better = new_px[s] < px[s] if s == ASK else new_px[s] > px[s]
            if new_px[s] != px[s]:
                # opposite moves leave the midprice unchanged
                px[s] = new_px[s]
                cur[s] = new_sz[s]
                if better:
                    emit(ts[i], _L8[s], i)
                elif not traded[s]:
                    emit(ts[i], _C8[s], i)
                continue
            d = new_sz[s] - cur[s]
            cur[s] = new_sz[s]
            if d > 0:
                emit(ts[i], _L8[s], i)
            elif d < 0:
                emit(ts[i], _C8[s], i)
    # trailing trades without a following quote
    for t, s, size, j in pending:
        cur[s] = max(cur[s] - size, 0)
        emit(t, _M8[s], j)
    qa_path = QueuePath(np.array(bp), bucket_queue(np.array(qa), aes), np.array(rec_idx), side=ASK)
    qb_path = QueuePath(np.array(bp), bucket_queue(np.array(qb), aes), np.array(rec_idx), side=BID)
    return events, qa_path, qb_path


def stream_from_events8(events, qa_path, qb_path, start, end) -> EventStream:
    return EventStream(
        start=float(start),
        end=float(end),
        times=np.array([e.ts for e in events], dtype=float),
        kinds=np.array([KINDS8.index(e.kind) for e in events], dtype=np.int64),
        qa=qa_path,
        qb=qb_path,
    )


def post_jump_table(events) -> dict:
    """Empirical (q_a, q_b) right after P+ and P- events, for mechanical simulation."""
    out = {}
    for name in ("P+", "P-"):
        rows = [(e.qa_after, e.qb_after) for e in events if e.kind == name]
        out[name] = np.array(rows, dtype=np.int64).reshape(-1, 2)
    return out


# ---------------------------------------------------------------------------
# state grid


@dataclass
class StateGrid:
    """Quantile buckets per side; bucket i covers ]edges[i-1], edges[i]].

    ``ask_edges``/``bid_edges`` hold the ``n_buckets - 1`` interior edges.
    State index for (ask bucket i, bid bucket j), both 0-based, is
    ``i * n_buckets + j``; index 0 is the reference state (1, 1).
    """

    ask_edges: np.ndarray
    bid_edges: np.ndarray

    def __post_init__(self):
        self.ask_edges = np.asarray(self.ask_edges, dtype=float)
        self.bid_edges = np.asarray(self.bid_edges, dtype=float)
        if self.ask_edges.size != self.bid_edges.size:
            raise ValueError("both sides need the same number of buckets")
        for e in (self.ask_edges, self.bid_edges):
            if np.any(np.diff(e) <= 0):
                raise DegenerateGridError("grid edges must be strictly increasing")

    @property
    def n_buckets(self):
        return self.ask_edges.size + 1

    @property
    def n_states(self):
        return self.n_buckets**2

    def bucket_ask(self, q):
        return np.searchsorted(self.ask_edges, q, side="left")

    def bucket_bid(self, q):
        return np.searchsorted(self.bid_edges, q, side="left")

    def index(self, qa, qb):
        qa = np.asarray(qa)
        qb = np.asarray(qb)
        if np.any(qa <= 0) or np.any(qb <= 0):
            raise DomainError("grid states require strictly positive queues")
        return self.bucket_ask(qa) * self.n_buckets + self.bucket_bid(qb)

    def buckets(self, s):
        s = np.asarray(s)
        return s // self.n_buckets, s % self.n_buckets

    def intervals(self, side=ASK):
        e = self.ask_edges if side == ASK else self.bid_edges
        lo = np.concatenate([[0.0], e])
        hi = np.concatenate([e, [np.inf]])
        return list(zip(lo.tolist(), hi.tolist()))

    def to_dict(self):
        return {"ask_edges": self.ask_edges.tolist(), "bid_edges": self.bid_edges.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["ask_edges"], d["bid_edges"])

    @classmethod
    def single(cls):
        """One bucket per side: a state-independent model."""
        return cls(np.empty(0), np.empty(0))


def _side_edges(sizes, n_buckets, side):
    sizes = np.asarray(sizes, dtype=float)
    sizes = sizes[sizes > 0]
    if np.unique(sizes).size < n_buckets:
        raise DegenerateGridError(
            f"{side} side has {np.unique(sizes).size} distinct sizes, fewer than {n_buckets} buckets; "
            "use a smaller n_buckets"
        )
    probs = np.arange(1, n_buckets) / n_buckets
    edges = np.quantile(sizes, probs, method="inverted_cdf")
    if np.any(np.diff(edges) <= 0):
        raise DegenerateGridError(
            f"{side} side quantile edges {edges.tolist()} are not strictly increasing; use a smaller n_buckets"
        )
    return edges


def quantile_grid(ask_sizes, bid_sizes, n_buckets=5) -> StateGrid:
    """Per-side empirical quantile grid; boundary values fall in the lower bucket."""
    if n_buckets < 1:
        raise DomainError("n_buckets must be at least 1")
    return StateGrid(_side_edges(ask_sizes, n_buckets, ASK), _side_edges(bid_sizes, n_buckets, BID))

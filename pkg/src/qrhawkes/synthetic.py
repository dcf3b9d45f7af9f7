"""Synthetic level-I books driven by a known event script.

Used for the bundled sample data and as a classification oracle: every
scripted action produces exactly one 8-type event.
"""
from __future__ import annotations

import numpy as np

from .lobdata import Records


def synthetic_l1(seed=0, n_actions=5000, rate=2.0, p_move=0.03, mean_size=4.0, start_px=10_000, depth=(20, 80)):
    """Random two-sided book.  Returns ``(records, script)`` where ``script``
    lists ``(ts, kind)`` with kind in P+, P-, La, Lb, Ca, Cb, Ma, Mb.

    Sizes are geometric with the given mean; best queues never empty except
    through a price move, and the spread stays between one and two ticks.
    """
    rng = np.random.default_rng(seed)
    t_us = 0
    bid, ask = start_px, start_px + 1
    bsz, asz = (int(v) for v in rng.integers(*depth, size=2))
    rows = [(0.0, bid, bsz, ask, asz, 0, "none")]
    script = []
    p = 1.0 / mean_size

    def draw():
        return int(rng.geometric(p))

    while len(script) < n_actions:
        t_us += max(1, int(rng.exponential(1e6 / rate)))
        ts = t_us / 1e6
        side = "ask" if rng.random() < 0.5 else "bid"
        cur = asz if side == "ask" else bsz
        u = rng.random()
        if u < p_move:
            # queue depletion by a market order, or a new limit inside a two-tick spread
            if ask - bid >= 2 and rng.random() < 0.5:
                new = int(rng.integers(*depth))
                if side == "ask":
                    ask -= 1
                    asz = new
                    script.append((ts, "P-"))
                else:
                    bid += 1
                    bsz = new
                    script.append((ts, "P+"))
            else:
                rows.append((ts, bid, bsz, ask, asz, cur, side))
                new = int(rng.integers(*depth))
                if side == "ask":
                    ask += 1
                    asz = new
                    script.append((ts, "P+"))
                else:
                    bid -= 1
                    bsz = new
                    script.append((ts, "P-"))
            rows.append((ts, bid, bsz, ask, asz, 0, "none"))
            continue
        kind = rng.choice(["L", "C", "M"], p=[0.45, 0.4, 0.15])
        n = draw()
        if kind != "L" and n >= cur:
            kind = "L"
        label = kind + ("a" if side == "ask" else "b")
        if kind == "M":
            rows.append((ts, bid, bsz, ask, asz, n, side))
        d = n if kind == "L" else -n
        if side == "ask":
            asz += d
        else:
            bsz += d
        rows.append((ts, bid, bsz, ask, asz, 0, "none"))
        script.append((ts, label))
    return Records.from_rows(rows), script

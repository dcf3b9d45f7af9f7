"""Command-line front end: ``qrh preprocess | fit | simulate | diagnose | compare``.

Models: ``qr`` (queue-reactive), ``hawkes`` (3-type Hawkes), ``qrh1``,
``hawkes8`` (8-type Hawkes, the QRH-II model with f = 1), ``qrh2-mle`` and
``qrh2-ls``.  All commands read one JSON run configuration (``--config``)::

    {
      "inputs": ["day1.csv", "day2.csv"],   # level-I files, one per trading day
      "tick": 1,                            # price units per tick
      "decays": [60, 1500, 5500],           # 1/seconds
      "Q_max": 149,
      "n_buckets": 5,
      "min_events": 20,                     # shortest kept segment
      "tol": 1e-7,
      "max_iter": 200,
      "seed": 0,
      "out": "run",
      "sim": {"horizon": 3600, "burn_in": 0, "sample_interval": 30, "mode": "mechanical",
              "q0": 5, "q0_ab": [5, 5]}
    }

Relative paths are resolved against the configuration file.  ``--seed`` and
``--out`` override the file.  Exit codes: 0 success, 1 input error,
2 non-convergence, 3 internal inconsistency.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import diagnostics as dg
from .errors import ConvergenceError, DomainError, InconsistencyError, InputError, SchemaError
from .kernels import DecaySet, kernel_norms, stability_check
from .lobdata import (
    ASK,
    BID,
    KINDS3,
    KINDS8,
    EventStream,
    QueuePath,
    Segment,
    StateGrid,
    atomic_write_text,
    classify_events3,
    classify_events8,
    compute_aes,
    compute_reference_price,
    mean_realization_length,
    parse_l1_csv,
    post_jump_table,
    quantile_grid,
    segment_by_pref,
    stream_from_events8,
)
from .qrh1 import Qrh1Params, fit_hawkes3, fit_qr, fit_qrh1, loglik_qrh1, n_params_hawkes, n_params_qr
from .qrh2 import Qrh2Params, fit_qrh2_ls, fit_qrh2_mle, loglik_qrh2, mean_reversion_rate
from .simulate import SimConfig, invariant_distribution_qrh1, simulate_qrh1, simulate_qrh2

FLOAT_FMT = "%.17g"
DEFAULT_DECAYS = (60.0, 1500.0, 5500.0)
MODELS = ("qr", "hawkes", "qrh1", "hawkes8", "qrh2-mle", "qrh2-ls")
# (null, alternative) model kinds for which the likelihood-ratio test is valid
NESTED = (("qr", "qrh1"), ("hawkes", "qrh1"), ("hawkes8", "qrh2-mle"))


@dataclass
class RunConfig:
    inputs: list
    out: Path
    tick: int = 1
    decays: tuple = DEFAULT_DECAYS
    Q_max: int = 149
    n_buckets: int = 5
    min_events: int = 20
    tol: float = 1e-7
    max_iter: int = 200
    seed: int = 0
    sim: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, seed=None, out=None):
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise InputError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise SchemaError(f"{path}: unknown config key(s) {sorted(unknown)}")
        base = path.parent
        inputs = [base / p for p in raw.get("inputs", [])]
        for p in inputs:
            if not p.exists():
                raise InputError(f"input file not found: {p}")
        cfg = cls(
            inputs=inputs,
            out=Path(out) if out is not None else base / raw.get("out", "out"),
            tick=int(raw.get("tick", 1)),
            decays=tuple(float(b) for b in raw.get("decays", DEFAULT_DECAYS)),
            Q_max=int(raw.get("Q_max", 149)),
            n_buckets=int(raw.get("n_buckets", 5)),
            min_events=int(raw.get("min_events", 20)),
            tol=float(raw.get("tol", 1e-7)),
            max_iter=int(raw.get("max_iter", 200)),
            seed=int(seed if seed is not None else raw.get("seed", 0)),
            sim=dict(raw.get("sim", {})),
        )
        DecaySet(cfg.decays)
        if cfg.Q_max < 0 or cfg.n_buckets < 1 or cfg.tick < 1:
            raise DomainError("Q_max >= 0, n_buckets >= 1 and tick >= 1 are required")
        return cfg


# ---------------------------------------------------------------------------
# file helpers


def write_json(path, obj):
    # json writes floats with repr, the shortest string that round-trips exactly
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def write_csv(path, df: pd.DataFrame):
    atomic_write_text(path, df.to_csv(index=False, float_format=FLOAT_FMT, lineterminator="\n"))


def read_csv(path):
    if not Path(path).exists():
        raise InputError(f"missing file {path}; run the earlier pipeline step first")
    return pd.read_csv(path)


def load_model(path):
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"model file not found: {path}") from exc
    if d.get("model") == "qrh1":
        return Qrh1Params.from_dict(d)
    if d.get("model") == "qrh2":
        return Qrh2Params.from_dict(d)
    raise SchemaError(f"{path}: unknown model document")


def model_kind(params):
    if isinstance(params, Qrh2Params):
        return params.metadata.get("kind", "qrh2")
    return params.metadata.get("kind", "qrh1")


def model_n_params(params):
    kind = model_kind(params)
    if kind == "qr":
        return n_params_qr(params.D, params.Q_max)
    if kind in ("hawkes", "hawkes8"):
        return n_params_hawkes(params.D, params.U)
    return params.n_params()


# ---------------------------------------------------------------------------
# preprocessed data


def save_segments(out, segments_by_day):
    rows_s, rows_e = [], []
    for day, segs in segments_by_day:
        for j, seg in enumerate(segs):
            rows_s.append((day, seg.side, j, seg.start, seg.end, seg.p_ref, seg.q0, seg.n_events))
            for t, k, s, q in zip(seg.times, seg.kinds, seg.sizes, seg.q_after):
                rows_e.append((day, seg.side, j, t, KINDS3[k], s, q))
    write_csv(out / "segments.csv", pd.DataFrame(rows_s, columns=["day", "side", "segment", "start", "end", "p_ref", "q0", "n_events"]))
    write_csv(out / "events3.csv", pd.DataFrame(rows_e, columns=["day", "side", "segment", "ts", "kind", "size", "q_after"]))


def load_segments(out, side=None):
    segs = read_csv(Path(out) / "segments.csv")
    ev = read_csv(Path(out) / "events3.csv")
    groups = {key: g for key, g in ev.groupby(["day", "side", "segment"], sort=False)}
    result = []
    for r in segs.itertuples(index=False):
        if side is not None and r.side != side:
            continue
        g = groups.get((r.day, r.side, r.segment))
        if g is None:
            g = ev.iloc[:0]
        result.append(
            Segment(
                start=float(r.start), end=float(r.end), times=g["ts"].to_numpy(float),
                kinds=np.array([KINDS3.index(k) for k in g["kind"]], dtype=np.int64),
                q0=int(r.q0), q_after=g["q_after"].to_numpy(np.int64), p_ref=float(r.p_ref), side=r.side,
                sizes=g["size"].to_numpy(np.int64),
            )
        )
    return result


def save_streams(out, streams):
    rows_d, rows_e = [], []
    for day, st in streams:
        # queue paths from classification carry one value per event, in order
        if st.qa.values.size != st.n_events + 1 or st.qb.values.size != st.n_events + 1:
            raise InconsistencyError("queue paths do not align with the events")
        rows_d.append((day, st.start, st.end, int(st.qa.values[0]), int(st.qb.values[0])))
        qa, qb = st.qa.values[1:], st.qb.values[1:]
        for t, k, a, b in zip(st.times, st.kinds, qa, qb):
            rows_e.append((day, t, KINDS8[k], a, b))
    write_csv(out / "days.csv", pd.DataFrame(rows_d, columns=["day", "start", "end", "qa0", "qb0"]))
    write_csv(out / "events8.csv", pd.DataFrame(rows_e, columns=["day", "ts", "kind", "qa", "qb"]))


def load_streams(out):
    days = read_csv(Path(out) / "days.csv")
    ev = read_csv(Path(out) / "events8.csv")
    groups = {key: g for key, g in ev.groupby("day", sort=False)}
    streams = []
    for r in days.itertuples(index=False):
        g = groups.get(r.day, ev.iloc[:0])
        t = g["ts"].to_numpy(float)
        bp = np.concatenate([[r.start], t])
        streams.append(
            EventStream(
                float(r.start), float(r.end), t, np.array([KINDS8.index(k) for k in g["kind"]], dtype=np.int64),
                qa=QueuePath(bp, np.concatenate([[r.qa0], g["qa"].to_numpy(np.int64)]), side=ASK),
                qb=QueuePath(bp, np.concatenate([[r.qb0], g["qb"].to_numpy(np.int64)]), side=BID),
            )
        )
    return streams


def stream_grid(streams, n_buckets):
    """Quantile grid from the queue sizes seen at event times."""
    qa = np.concatenate([s.qa.values for s in streams])
    qb = np.concatenate([s.qb.values for s in streams])
    return quantile_grid(qa, qb, n_buckets)


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: RunConfig):
    if not cfg.inputs:
        raise InputError("config lists no input files")
    out = cfg.out
    seg_days, streams, summary = [], [], {"days": []}
    all_events8 = []
    for path in cfg.inputs:
        day = Path(path).stem
        try:
            recs = parse_l1_csv(path)
        except InputError as exc:
            raise InputError(f"{path}: {exc}") from exc
        if len(recs) < 2:
            raise InputError(f"{path}: need at least two records")
        aes = compute_aes(recs, cfg.tick)
        pref = compute_reference_price(recs, cfg.tick)
        end = float(recs.ts[-1])
        segs = []
        for side in (BID, ASK):
            flow = classify_events3(recs, side, aes=aes, tick=cfg.tick)
            segs += segment_by_pref(flow, pref, end, min_events=cfg.min_events)
        seg_days.append((day, segs))
        ev8, qa, qb = classify_events8(recs, aes=aes, tick=cfg.tick)
        all_events8 += ev8
        st = stream_from_events8(ev8, qa, qb, float(recs.ts[0]), end)
        streams.append((day, st))
        counts3 = {k: int(sum((s.kinds == i).sum() for s in segs)) for i, k in enumerate(KINDS3)}
        counts8 = {k: int((st.kinds == i).sum()) for i, k in enumerate(KINDS8)}
        pmoves = [e for e in ev8 if e.kind in ("P+", "P-")]
        summary["days"].append(
            {
                "day": day,
                "records": len(recs),
                "aes": aes,
                "segments": len(segs),
                "tau_m": mean_realization_length(segs) if segs else None,
                "events3": counts3,
                "events8": counts8,
                "mean_reversion": mean_reversion_rate(pmoves) if len(pmoves) > 1 else None,
            }
        )
    save_segments(out, seg_days)
    save_streams(out, streams)
    pj = post_jump_table(all_events8)
    write_json(out / "post_jump.json", {k: v.tolist() for k, v in pj.items()})
    write_json(out / "summary.json", summary)
    return 0


def _fit_report_doc(rep, params):
    stab = stability_check(params.alphas)
    flags = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in rep.flags.items()}
    return {
        "objective": rep.value,
        "grad_norm": rep.grad_norm,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "stability": stab.as_dict(),
        "n_params": model_n_params(params),
        "flags": flags,
    }


def cmd_fit(cfg: RunConfig, model: str):
    if model not in MODELS:
        raise InputError(f"--model must be one of {MODELS}")
    out = cfg.out
    converged = True
    if model in ("qr", "hawkes", "qrh1"):
        segs = load_segments(out)
        if not segs:
            raise InputError("no segments to fit; check min_events or the input data")
        if model == "qr":
            params = fit_qr(segs, cfg.Q_max, cfg.decays)
            params = params.replace(metadata={"kind": "qr"})
            L = loglik_qrh1(params, segs)
            doc = {"objective": L, "converged": True, "iterations": 0, "n_params": n_params_qr(3, cfg.Q_max),
                   "stability": stability_check(params.alphas).as_dict(),
                   "flags": {"mu_missing": int(params.mu_missing.sum())}}
        else:
            if model == "qrh1":
                rep = fit_qrh1(segs, cfg.decays, cfg.Q_max, tol=cfg.tol, max_iter=cfg.max_iter)
            else:
                rep = fit_hawkes3(segs, cfg.decays, cfg.Q_max, tol=cfg.tol, max_iter=cfg.max_iter)
            params = rep.params.replace(metadata={**rep.params.metadata, "kind": model})
            doc = _fit_report_doc(rep, params)
            converged = rep.converged
    else:
        streams = [s for _, s in _streams(out)]
        grid = StateGrid.single() if model == "hawkes8" else stream_grid(streams, cfg.n_buckets)
        if model == "hawkes8":
            rep = fit_qrh2_mle(streams, grid, cfg.decays, fix_f=True)
        elif model == "qrh2-mle":
            rep = fit_qrh2_mle(streams, grid, cfg.decays, max_sweeps=cfg.max_iter)
        else:
            rep = fit_qrh2_ls(streams, grid, cfg.decays, max_sweeps=cfg.max_iter)
        params = rep.params.replace(metadata={"kind": model})
        doc = _fit_report_doc(rep, params)
        converged = rep.converged
        D = params.D
        norms = kernel_norms(params.alphas)
        write_csv(out / f"kernel_norms_{model}.csv",
                  pd.DataFrame(norms, columns=list(KINDS8)).assign(type=list(KINDS8))[["type", *KINDS8]])
        rows = [(s, *map(int, grid.buckets(s)), *params.f[:, s]) for s in range(grid.n_states)]
        write_csv(out / f"f_table_{model}.csv",
                  pd.DataFrame(rows, columns=["state", "ask_bucket", "bid_bucket", *KINDS8]))
    write_json(out / f"model_{model}.json", params.to_dict())
    write_json(out / f"fit_{model}.json", doc)
    if not converged:
        raise ConvergenceError(f"{model} fit did not converge; best iterate saved to {out / f'model_{model}.json'}")
    return 0


def _streams(out):
    days = read_csv(Path(out) / "days.csv")
    return list(zip(days["day"], load_streams(out)))


def _sim_config(cfg: RunConfig, two_sided=False):
    # q0: single-queue start; q0_ab: (q_a, q_b) start of the two-sided model
    sim = cfg.sim
    if "horizon" not in sim:
        raise InputError("config 'sim' section needs a horizon")
    unknown = set(sim) - {"horizon", "burn_in", "sample_interval", "mode", "q0", "q0_ab"}
    if unknown:
        raise SchemaError(f"unknown sim key(s) {sorted(unknown)}")
    if two_sided:
        q0 = sim.get("q0_ab", (1, 1))
        if np.ndim(q0) != 1 or len(q0) != 2:
            raise SchemaError("sim.q0_ab must be a pair [q_a, q_b]")
    else:
        q0 = sim.get("q0", 1)
        if np.ndim(q0) != 0:
            raise SchemaError("sim.q0 must be a single queue size")
    return SimConfig(
        horizon=float(sim["horizon"]),
        seed=cfg.seed,
        burn_in=float(sim.get("burn_in", 0.0)),
        sample_interval=float(sim.get("sample_interval", 30.0)),
        q0=q0,
    )


def cmd_simulate(cfg: RunConfig, model_path):
    params = load_model(model_path)
    out = cfg.out
    name = Path(model_path).stem
    if isinstance(params, Qrh1Params):
        sc = _sim_config(cfg)
        path = simulate_qrh1(params, sc)
        q = path.queue.values[1:]
        write_csv(out / f"sim_{name}.csv", pd.DataFrame({"ts": path.times, "kind": [KINDS3[k] for k in path.kinds],
                                                         "q_after": q, "intensity": path.intensity}))
        inv = invariant_distribution_qrh1(params, sc)
        write_csv(out / f"invariant_{name}.csv",
                  pd.DataFrame({"state": np.arange(inv.pmf.size), "probability": inv.pmf, "stderr": inv.stderr}))
    else:
        mode = cfg.sim.get("mode", "mechanical")
        sc = _sim_config(cfg, two_sided=True)
        if mode == "mechanical":
            pj = json.loads((out / "post_jump.json").read_text()) if (out / "post_jump.json").exists() else None
            if pj is None:
                raise InputError("mechanical simulation needs post_jump.json from preprocess")
            path = simulate_qrh2(params, sc, "mechanical", post_jump={k: np.array(v) for k, v in pj.items()})
            qa, qb = path.qa.values[1:], path.qb.values[1:]
        else:
            st = load_streams(out)[0]
            path = simulate_qrh2(params, sc, "replay", state_path=st)
            qa = qb = np.full(path.n_events, -1)
        write_csv(out / f"sim_{name}.csv", pd.DataFrame({"ts": path.times, "kind": [KINDS8[k] for k in path.kinds],
                                                         "qa": qa, "qb": qb, "intensity": path.intensity}))
    return 0


def cmd_diagnose(cfg: RunConfig, model_path):
    params = load_model(model_path)
    out = cfg.out
    name = Path(model_path).stem
    if isinstance(params, Qrh1Params):
        data = load_segments(out)
        labels = KINDS3
    else:
        data = load_streams(out)
        labels = KINDS8
    res = dg.time_rescaling_residuals(params, data)
    write_csv(out / f"residuals_{name}.csv", pd.DataFrame(
        [(labels[r.kind], r.n, r.ks, r.p_value) for r in res], columns=["type", "n", "ks", "p_value"]))
    model, emp, delta, excluded = dg.model_conditional_intensity(params, data)
    rows = [(labels[l], s, emp.counts[l, s], emp.lam[l, s], model.lam[l, s])
            for l in range(params.D) for s in range(emp.exposure.size) if emp.counts[:, s].sum() > 0]
    write_csv(out / f"conditional_{name}.csv",
              pd.DataFrame(rows, columns=["type", "state", "n_events", "empirical", "model"]))
    doc = {"delta": dict(zip(labels, delta.tolist())), "excluded_states": excluded.tolist(),
           "min_state_events": dg.MIN_STATE_EVENTS}
    if isinstance(params, Qrh1Params):
        # inter-event times: data against a simulation matched segment by segment
        data_gaps, sim_gaps = [], []
        for j, seg in enumerate(data):
            data_gaps.append(np.diff(seg.times))
            p = simulate_qrh1(params, SimConfig(horizon=max(seg.length, 1e-9), seed=cfg.seed + j, q0=seg.q0))
            sim_gaps.append(np.diff(p.times))
        a = np.concatenate(data_gaps)
        b = np.concatenate(sim_gaps)
        a, b = a[a > 0], b[b > 0]
        if a.size and b.size:
            qa, qb = dg.qq_pairs(a, b)
            write_csv(out / f"qq_{name}.csv", pd.DataFrame({"log_q_data": qa, "log_q_model": qb}))
        if cfg.sim.get("horizon"):
            e, lam, occ = dg.endogeneity_fraction(params, _sim_config(cfg))
            rows = [(labels[l], q, occ[q], lam[l, q], e[l, q]) for l in range(3) for q in range(params.Q_max + 1)]
            write_csv(out / f"endogeneity_{name}.csv",
                      pd.DataFrame(rows, columns=["type", "state", "occupation", "Lambda", "e"]))
    else:
        rows = dg.f_vs_imbalance(params, data)
        write_csv(out / f"f_vs_imbalance_{name}.csv",
                  pd.DataFrame(rows, columns=["state", "ask_bucket", "bid_bucket", "median_imbalance", *KINDS8]))
    write_json(out / f"diagnose_{name}.json", doc)
    return 0


def cmd_compare(cfg: RunConfig, model_paths):
    if len(model_paths) < 2:
        raise InputError("compare needs at least two --model files")
    out = cfg.out
    entries = []
    kinds = {}
    n_events = None
    for mp in model_paths:
        params = load_model(mp)
        if isinstance(params, Qrh1Params):
            data = load_segments(out)
            n = sum(s.n_events for s in data)
            L = loglik_qrh1(params, data)
        else:
            data = load_streams(out)
            n = sum(s.n_events for s in data)
            L = loglik_qrh2(params, data)
        if n_events is not None and n != n_events:
            raise InputError("models in one comparison must be evaluated on the same events")
        n_events = n
        name = Path(mp).stem
        entries.append((name, L, model_n_params(params)))
        kinds.setdefault(model_kind(params), name)
    pairs = [(kinds[a], kinds[b]) for a, b in NESTED if a in kinds and b in kinds]
    rep = dg.compare_models(entries, n_events, pairs=pairs)
    write_json(out / "comparison.json", rep.to_dict())
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="qrh", description="Queue-reactive Hawkes toolkit for level-I order books")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the configured seed")
        sp.add_argument("--out", default=None, help="override the output directory")

    common(sub.add_parser("preprocess", help="classify events and cut segments"))
    sp = sub.add_parser("fit", help="fit one model to preprocessed data")
    common(sp)
    sp.add_argument("--model", required=True, choices=MODELS)
    for name, helptext in (("simulate", "simulate a fitted model"), ("diagnose", "residuals and conditional intensities")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--model", required=True, help="model JSON file")
    sp = sub.add_parser("compare", help="likelihood, AIC/BIC and LR tests across models")
    common(sp)
    sp.add_argument("--model", required=True, action="append", help="model JSON file (repeat)")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if args.command == "preprocess":
        return cmd_preprocess(cfg)
    if args.command == "fit":
        return cmd_fit(cfg, args.model)
    if args.command == "simulate":
        return cmd_simulate(cfg, args.model)
    if args.command == "diagnose":
        return cmd_diagnose(cfg, args.model)
    return cmd_compare(cfg, args.model)


def main(argv=None):
    try:
        return run(argv)
    except InputError as exc:
        print(f"qrh: input error: {exc}", file=sys.stderr)
        return 1
    except ConvergenceError as exc:
        print(f"qrh: {exc}", file=sys.stderr)
        return 2
    except InconsistencyError as exc:
        print(f"qrh: internal inconsistency: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are collected in
the "acceptance criteria" section of the terminal summary.
"""
import math
import time

import numpy as np
import pytest
from conftest import qrh1_loglik_oracle, random_qrh1_params, random_segment

from qrhawkes.diagnostics import chi2_sf, endogeneity_fraction, information_criteria, lr_test, time_rescaling_residuals
from qrhawkes.lobdata import EventStream, Segment, StateGrid, StepPath
from qrhawkes.qrh1 import (
    Qrh1Params,
    fit_qrh1,
    loglik_grad_qrh1,
    loglik_qrh1,
    n_params_hawkes,
    n_params_qr,
    n_params_qrh1,
    prepare_qrh1,
)
from qrhawkes.qrh2 import Qrh2Params, fit_qrh2_ls, loglik_grad_qrh2, loglik_qrh2, ls_objective, n_params_qrh2, precompute_ls
from qrhawkes.simulate import (
    SimConfig,
    generator_stationary,
    invariant_distribution_qrh1,
    qr_invariant,
    simulate_qrh1,
    simulate_qrh2,
    total_variation,
    truncated_generator,
)

BETAS = (1.0, 10.0)
GRID = StateGrid([2.0, 4.0], [2.0, 4.0])


def qrh1_truth(kernels=True):
    """D=3, U=2, 10 queue states; strong self-excitation plus C <- L."""
    q = np.arange(10)
    mu = np.vstack([1.0 - 0.04 * q, 0.25 + 0.07 * q, 0.15 + 0.04 * q])
    norms = np.array([[0.4, 0.0, 0.0], [0.2, 0.4, 0.0], [0.0, 0.0, 0.4]])
    if not kernels:
        norms = np.zeros((3, 3))
    return Qrh1Params(mu, np.stack([0.6 * norms, 0.4 * norms], axis=-1), BETAS)


def replay_states(rng, horizon, n_breaks):
    bt = np.sort(rng.uniform(0, horizon, n_breaks))
    bv = rng.integers(0, GRID.n_states, n_breaks)
    return StepPath(np.concatenate([[0.0], bt]), np.concatenate([[0], bv]))


def first_events_segment(path, n):
    seg = path.segment()
    assert seg.n_events > n
    return Segment(0.0, float(seg.times[n]), seg.times[:n], seg.kinds[:n], seg.q0, seg.q_after[:n])


def first_events_stream(path, n):
    st = path.stream()
    assert st.n_events > n
    return EventStream(0.0, float(st.times[n]), st.times[:n], st.kinds[:n], states=st.states)


# ---------------------------------------------------------------------------


def test_c01_loglik_recursion_vs_oracle(acceptance):
    rng = np.random.default_rng(1)
    cases = [(random_qrh1_params(rng), random_segment(rng, 1000)) for _ in range(50)]
    t0 = time.perf_counter()
    rec = [loglik_qrh1(p, [seg]) for p, seg in cases]
    elapsed = time.perf_counter() - t0
    ref = [qrh1_loglik_oracle(p, seg) for p, seg in cases]
    worst = max(abs(a - b) / abs(b) for a, b in zip(rec, ref))
    acceptance(1, worst <= 1e-6 and elapsed < 10.0,
               f"loglik recursion vs O(N^2) oracle, worst rel err {worst:.2e}, recursive time {elapsed:.2f} s")


# ---------------------------------------------------------------------------


def fd_check(fn, grad, x, h_rel=1e-6, h_min=1.0):
    """Worst per-coordinate |fd - g| / max(|g|, |fd|, 1) with central differences.

    The step has an absolute floor: below it, rounding in the objective
    (|L| ~ 1e3) dominates the difference quotient.
    """
    worst = 0.0
    for i in range(x.size):
        h = h_rel * max(abs(x[i]), h_min)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (fn(xp) - fn(xm)) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(grad[i]), abs(fd), 1.0))
    return worst


def test_c02_gradients_vs_finite_differences(acceptance):
    rng = np.random.default_rng(2)
    results = {}

    # QRH-I on a simulated segment of ~2000 events
    base = qrh1_truth()
    seg = simulate_qrh1(base, SimConfig(700.0, seed=21, q0=3)).segment()
    data = prepare_qrh1([seg], BETAS, base.Q_max)
    n_mu = base.mu.size
    worst = 0.0
    for _ in range(20):
        p = random_qrh1_params(rng, Q_max=9, betas=BETAS, scale=0.6)
        unflat = lambda x, p=p: p.replace(mu=x[:n_mu].reshape(p.mu.shape), alphas=x[n_mu:].reshape(p.alphas.shape))
        x = np.concatenate([p.mu.ravel(), p.alphas.ravel()])
        g = np.concatenate([a.ravel() for a in loglik_grad_qrh1(p, data)])
        worst = max(worst, fd_check(lambda y: loglik_qrh1(unflat(y), data), g, x))
    results["loglik_qrh1"] = worst

    # QRH-II on a replayed-state stream
    truth = Qrh2Params(np.full(8, 0.5), np.full((8, 8, 2), 0.01), BETAS, np.ones((8, 9)), GRID)
    st = simulate_qrh2(truth, SimConfig(400.0, seed=22), "replay",
                       state_path=replay_states(np.random.default_rng(23), 400.0, 200)).stream()
    cache = precompute_ls(st, BETAS, GRID)
    D, K = 8, 8 * 2

    def unvec(p, x):
        return p.replace(mu=x[:D], alphas=x[D:D + D * K].reshape(D, D, 2), f=x[D + D * K:].reshape(D, 9))

    for name, signed in (("loglik_qrh2", False), ("ls_objective", True)):
        worst = 0.0
        for _ in range(20):
            lo = -0.02 if signed else 0.0
            f = np.exp(rng.normal(0, 0.3, size=(D, 9)))
            p = Qrh2Params(rng.uniform(0.3, 1.0, D), rng.uniform(lo, 0.03, (D, D, 2)), BETAS, f, GRID, signed=signed)
            x = np.concatenate([p.mu, p.alphas.ravel(), p.f.ravel()])
            if signed:
                fn = lambda y, p=p: ls_objective(unvec(p, y), cache)[0]
                g = np.concatenate([a.ravel() for a in ls_objective(p, cache)[1]])
            else:
                fn = lambda y, p=p: loglik_qrh2(unvec(p, y), cache)
                g = np.concatenate([a.ravel() for a in loglik_grad_qrh2(p, cache)])
            worst = max(worst, fd_check(fn, g, x))
        results[name] = worst
    ok = all(v <= 1e-5 for v in results.values())
    acceptance(2, ok, "gradient vs central FD, worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in results.items()))


# ---------------------------------------------------------------------------


def test_c03_parameter_recovery(acceptance):
    t0 = time.perf_counter()
    truth = qrh1_truth()
    path = simulate_qrh1(truth, SimConfig(35_000.0, seed=3, q0=3))
    seg = path.segment()
    rep = fit_qrh1([seg], BETAS, truth.Q_max)
    elapsed = time.perf_counter() - t0
    true_n = truth.alphas.sum(axis=-1)
    est_n = rep.params.alphas.sum(axis=-1)
    nz = true_n > 0
    norm_err = float(np.max(np.abs(est_n[nz] / true_n[nz] - 1)))
    # zero kernels: estimate must stay within 10% of the largest norm
    zero_err = float(np.max(np.abs(est_n[~nz]))) / float(true_n.max())
    st = np.minimum(seg.states, truth.Q_max)
    entries = st[np.concatenate([[True], np.diff(st) != 0])]
    visits = np.bincount(entries, minlength=truth.Q_max + 1)
    rel = np.abs(rep.params.mu / truth.mu - 1)
    rel[1:, 0] = 0.0  # C and M are gated on the empty queue
    well = visits >= 1000
    mu_err = float(rel[:, well].max())
    ok = rep.converged and norm_err <= 0.10 and zero_err <= 0.10 and mu_err <= 0.15 and elapsed < 300
    acceptance(3, ok, f"{seg.n_events} events, norm rel err {norm_err:.3f}, zero-kernel {zero_err:.3f}, "
                      f"mu rel err {mu_err:.3f} on {int(well.sum())} states, {elapsed:.1f} s")


# ---------------------------------------------------------------------------


def lr_trial(params, seed):
    seg = simulate_qrh1(params, SimConfig(3000.0, seed=seed, q0=3)).segment()
    null = fit_qrh1([seg], BETAS, params.Q_max, alpha_zero=True)
    alt = fit_qrh1([seg], BETAS, params.Q_max)
    return lr_test(null.value, alt.value, n_params_qrh1(3, 9, 2) - n_params_qr(3, 9))[1]


def test_c04_lr_nesting(acceptance):
    p_qr = np.array([lr_trial(qrh1_truth(kernels=False), s) for s in range(50)])
    p_qrh = np.array([lr_trial(qrh1_truth(), 1000 + s) for s in range(50)])
    keep = float(np.mean(p_qr > 0.05))
    reject = float(np.mean(p_qrh < 1e-6))
    acceptance(4, keep >= 0.9 and reject == 1.0,
               f"QR data: not rejected at 5% in {keep:.0%}; QRH-I data: rejected at 1e-6 in {reject:.0%}")


# ---------------------------------------------------------------------------


def test_c05_invariant_distribution(acceptance):
    q = np.arange(31)
    mu = np.vstack([np.ones(31), 0.3 + 0.05 * q, 0.2 + 0.03 * q])
    p = Qrh1Params(mu, np.zeros((3, 3, 1)), (1.0,))
    pi = qr_invariant(mu)
    gen = generator_stationary(truncated_generator(mu))
    solve_err = float(np.max(np.abs(pi - gen)))
    est = invariant_distribution_qrh1(p, SimConfig(1e6, seed=5, burn_in=1000.0, sample_interval=1.0, q0=5))
    tv = total_variation(est.pmf, pi)
    acceptance(5, solve_err <= 1e-10 and tv <= 0.02,
               f"analytic vs generator max err {solve_err:.1e}, simulated TV {tv:.4f} over 1e6 s")


# ---------------------------------------------------------------------------


def qrh2_truth():
    mu = np.array([0.3, 0.3, 1.5, 0.8, 0.6, 0.6, 0.2, 0.2])
    a = np.zeros((8, 8, 2))
    for l in range(8):
        a[l, l] = [0.12, 0.08]
    f = np.exp(np.random.default_rng(0).normal(0, 0.25, (8, 9)))
    f[:, 0] = 1.0
    return mu, a, f


def test_c06_time_rescaling(acceptance):
    n = 10_000
    p1 = qrh1_truth()
    seg = first_events_segment(simulate_qrh1(p1, SimConfig(5000.0, seed=6, q0=3)), n)
    mu, a, f = qrh2_truth()
    a[2, 4] = [0.06, 0.04]
    p2 = Qrh2Params(mu, a, BETAS, f, GRID)
    path2 = simulate_qrh2(p2, SimConfig(3000.0, seed=7), "replay",
                          state_path=replay_states(np.random.default_rng(8), 3000.0, 600))
    st = first_events_stream(path2, n)
    self1 = min(r.p_value for r in time_rescaling_residuals(p1, seg))
    self2 = min(r.p_value for r in time_rescaling_residuals(p2, st))
    bad1 = max(r.p_value for r in time_rescaling_residuals(p1.replace(mu=2 * p1.mu), seg))
    bad2 = max(r.p_value for r in time_rescaling_residuals(p2.replace(mu=2 * p2.mu), st))
    ok = self1 > 0.01 and self2 > 0.01 and bad1 < 0.01 and bad2 < 0.01
    acceptance(6, ok, f"{n} events; min KS p self-sim QRH-I {self1:.3f}, QRH-II {self2:.3f}; "
                      f"max p with doubled mu {bad1:.1e}, {bad2:.1e}")


# ---------------------------------------------------------------------------


def test_c07_ls_negative_kernel(acceptance):
    mu, a, f = qrh2_truth()
    a[2, 4] = [-0.18, -0.12]  # La <- Ca, norm -0.3
    p = Qrh2Params(mu, a, BETAS, f, GRID, signed=True)
    est = []
    for seed in range(20):
        horizon = 12_000.0
        path = simulate_qrh2(p, SimConfig(horizon, seed=seed), "replay",
                             state_path=replay_states(np.random.default_rng(100 + seed), horizon, 900))
        rep = fit_qrh2_ls(path.stream(), GRID, BETAS)
        assert rep.converged
        est.append(float(rep.params.alphas[2, 4].sum()))
    est = np.array(est)
    signs = int(np.sum(est < 0))
    mag = float(np.max(np.abs(est / -0.3 - 1)))
    acceptance(7, signs == 20 and mag <= 0.2,
               f"sign recovered in {signs}/20, worst magnitude rel err {mag:.3f} (mean norm {est.mean():.3f})")


# ---------------------------------------------------------------------------


def test_c08_gauge_invariance(acceptance):
    rng = np.random.default_rng(9)
    mu, a, f = qrh2_truth()
    truth = Qrh2Params(mu, a, BETAS, f, GRID)
    st = simulate_qrh2(truth, SimConfig(4000.0, seed=10), "replay", state_path=replay_states(rng, 4000.0, 800)).stream()
    cache = precompute_ls(st, BETAS, GRID)
    worst = 0.0
    for _ in range(5):
        p = Qrh2Params(rng.uniform(0.2, 1.0, 8), rng.uniform(0, 0.05, (8, 8, 2)), BETAS,
                       np.exp(rng.normal(0, 0.4, (8, 9))), GRID)
        for c in (0.1, 10.0):
            q = p.rescaled(c)
            worst = max(worst, abs(loglik_qrh2(q, cache) - loglik_qrh2(p, cache)),
                        abs(ls_objective(q, cache)[0] - ls_objective(p, cache)[0]))
    acceptance(8, worst < 1e-9, f"{st.n_events} events, max |change| under c in (0.1, 10): {worst:.1e}")


# ---------------------------------------------------------------------------


def shown(x, sig):
    """Value as printed with ``sig`` significant digits."""
    return float(f"{x:.{sig - 1}e}")


def rounding_interval(shown_value, sig):
    e = math.floor(math.log10(abs(shown_value)))
    half = 0.5 * 10.0 ** (e - sig + 1)
    return shown_value - half, shown_value + half


def test_c09_structural_anchors(acceptance):
    counts = {
        "QR Bund": (n_params_qr(3, 149), 450),
        "QRH-I Bund": (n_params_qrh1(3, 149, 3), 477),
        "Hawkes-8": (n_params_hawkes(8, 3), 200),
        "QRH-II": (n_params_qrh2(8, 3, 25), 400),
    }
    objs = {
        "QRH-I Bund": Qrh1Params(np.ones((3, 150)), np.zeros((3, 3, 3)), (0.1, 1.0, 10.0)).n_params(),
        "QRH-II": Qrh2Params(np.ones(8), np.zeros((8, 8, 3)), (0.1, 1.0, 10.0), np.ones((8, 25)),
                             StateGrid([1, 2, 3, 4], [1, 2, 3, 4])).n_params(),
    }
    counts_ok = all(a == b for a, b in counts.values()) and all(v == counts[k][1] for k, v in objs.items())

    # QR / Bund row: L 2.046e7, AIC -4.093e7, BIC -4.092e7, k 450 (4 significant digits)
    k = 450
    lo, hi = rounding_interval(2.046e7, 4)
    aic_lo, aic_hi = rounding_interval(-4.093e7, 4)
    # L values consistent with both the shown L and the shown AIC = 2k - 2L
    L_lo, L_hi = max(lo, (2 * k - aic_hi) / 2), min(hi, (2 * k - aic_lo) / 2)
    L_mid = 0.5 * (L_lo + L_hi)
    aic_ok = L_lo < L_hi and shown(information_criteria(L_mid, k, 10**6)[0], 4) == -4.093e7
    # BIC = k log N - 2L: the sample sizes for which the shown BIC follows
    bic_lo, bic_hi = rounding_interval(-4.092e7, 4)
    logN = ((bic_lo + 2 * L_hi) / k, (bic_hi + 2 * L_lo) / k)
    N_test = math.exp(0.5 * (logN[0] + logN[1]))
    bic_ok = logN[0] < logN[1] and shown(information_criteria(L_mid, k, N_test)[1], 4) == -4.092e7
    # LR row: 2 (L_QRH - L_QR), df 27, p < 1e-16
    lr, p = lr_test(2.046e7, 2.055e8, 477 - 450)
    lr_ok = shown(lr, 2) == 3.7e8 and p < 1e-16 and chi2_sf(lr, 27) == p
    point_aic = shown(information_criteria(2.046e7, k, 10**6)[0], 4)
    ok = counts_ok and aic_ok and bic_ok and lr_ok
    acceptance(9, ok, f"counts {[v[0] for v in counts.values()]}; AIC consistent for L in "
                      f"({L_lo:.6g}, {L_hi:.6g}) (point L=2.046e7 gives {point_aic:.4g}); "
                      f"BIC for N in ({math.exp(logN[0]):.2g}, {math.exp(logN[1]):.2g}); LR {shown(lr, 2):.2g}")


# ---------------------------------------------------------------------------


def test_c10_endogeneity(acceptance):
    mu = np.array([[1.0], [0.0], [0.0]])
    a = np.zeros((3, 3, 1))
    a[0, 0, 0] = 0.5
    p = Qrh1Params(mu, a, (2.0,))
    e, Lam, _ = endogeneity_fraction(p, SimConfig(100_000.0, seed=11, q0=1))
    oracle = 1.0 - mu[0, 0] / (mu[0, 0] / (1.0 - 0.5))
    ok = abs(e[0, 0] - oracle) <= 0.03
    acceptance(10, ok, f"e = {e[0, 0]:.4f} vs analytic {oracle:.2f} (Lambda {Lam[0, 0]:.4f} vs 2.0)")

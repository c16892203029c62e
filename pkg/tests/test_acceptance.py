"""Acceptance suite: one test per criterion, each reporting PASS/FAIL.

The verdict lines are printed in the pytest terminal summary under
"acceptance criteria".
"""
import os
import time
import warnings

import numpy as np
import pytest

from grayboxid.harness import ExperimentPlan, identify, run_experiment
from grayboxid.lifting import LiftedVariables, assemble_H, build_lifted, extract, objective_h
from grayboxid.lifting import residual, vec
from grayboxid.ssmodel import fixtures, simulate
from grayboxid.subspace import SubspaceConfig, moesp

from conftest import random_structure, well_conditioned

SLACK = 1e-8
SNR_GRID = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
SWEEP_TRIALS = 20
# centers the NUN estimates are reported to fluctuate around
NUN_CENTERS = {
    "example1": np.array([-0.091, -0.304, 0.156, -0.018]),
    "example2": np.array([-0.143, 0.006, -0.340, 0.157]),
}
EXACT_INSTANCES = 20

# traces from criteria 3-6, checked for monotonicity in criterion 7
TRACES = {"dcp": [], "ami": []}


def _jobs():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


def _collect(results):
    for m in ("dcp", "ami"):
        r = results.get(m)
        if r is not None and r.trace is not None:
            TRACES[m].append(r.trace)


@pytest.fixture(scope="module")
def sweeps():
    fx = fixtures()
    out, seconds = {}, {}
    for name in ("example1", "example2"):
        plan = ExperimentPlan(fx[name], snr_grid=SNR_GRID, trials=SWEEP_TRIALS, base_seed=2024,
                              keep_traces=True)
        t0 = time.perf_counter()
        out[name] = run_experiment(plan, n_jobs=_jobs())
        seconds[name] = time.perf_counter() - t0
        for rec in out[name].records:
            _collect(rec.results)
    return out, seconds


def test_round_trip_extraction(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        tau, theta = rng.standard_normal(9), rng.standard_normal(4)
        ext = extract(assemble_H(LiftedVariables.from_rank_one(tau, theta)))
        worst = max(worst, np.abs(ext.theta - theta).max(), np.abs(vec(ext.T) - tau).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 5.0
    report(1, ok, f"round trip max error {worst:.2e} (< 1e-10), {elapsed:.2f} s (< 5 s)")
    assert ok


def test_vectorization_equivalence(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(1000):
            n, m, p, q = (int(x) for x in rng.integers(1, 4, size=4))
            s = random_structure(rng, n, m, p, q)
            ss_hat = random_structure(rng, n, m, p, 1).evaluate(rng.standard_normal(1))
            T, theta = rng.standard_normal((n, n)), rng.standard_normal(q)
            r = residual(build_lifted(s, ss_hat), LiftedVariables.from_rank_one(vec(T), theta))
            h = objective_h(s, ss_hat, theta, T)
            worst = max(worst, abs(r @ r - h) / h)
    ok = worst < 1e-10
    report(2, ok, f"max relative gap between h and lifted residual {worst:.2e} (< 1e-10)")
    assert ok


def test_noise_free_exact_recovery(fx, report):
    rng = np.random.default_rng(3)
    details, ok = [], True
    for name in ("example1", "example2"):
        s = fx[name]
        ss = s.evaluate(s.theta_true)
        errs, times, raw_ok = [], [], 0
        for _ in range(EXACT_INSTANCES):
            T = well_conditioned(rng, 3, 50.0)
            ss_hat = ss.transform(T)
            t0 = time.perf_counter()
            ident = identify(s, ss_hat, ("dcp",), basis="canonical")
            times.append(time.perf_counter() - t0)
            _collect(ident.results)
            th = ident["dcp"].theta
            errs.append(np.linalg.norm(th - s.theta_true) / np.linalg.norm(s.theta_true))
            # same instance solved in the raw random basis, for reference only
            raw = identify(s, ss_hat, ("dcp",))
            _collect(raw.results)
            raw_err = np.linalg.norm(raw["dcp"].theta - s.theta_true) / np.linalg.norm(s.theta_true)
            raw_ok += raw_err < 1e-6
        good = max(errs) < 1e-6 and max(times) < 30.0
        ok &= good
        details.append(f"{name}: max rel err {max(errs):.1e}, max {max(times):.1f} s; "
                       f"raw basis {raw_ok}/{EXACT_INSTANCES}")
    report(3, ok, "; ".join(details))
    assert ok


def test_noise_free_pipeline(fx, report):
    details, ok = [], True
    for name in ("example1", "example2"):
        plan = ExperimentPlan(fx[name], snr_grid=[None], trials=5, methods=("dcp",),
                              base_seed=4, keep_traces=True)
        res = run_experiment(plan)
        for rec in res.records:
            _collect(rec.results)
        value = res.rnmse_table()["dcp"][0]
        ok &= bool(value < 1e-4) and res.aggregate_rows()[0]["trials_used"] == 5
        details.append(f"{name} rNMSE {value:.1e}")
    report(4, ok, ", ".join(details) + " (< 1e-4)")
    assert ok


def _inversions(values):
    return int(np.sum(np.diff(values) >= 0))


def test_snr_sweep_trends(sweeps, report):
    results, seconds = sweeps
    details, ok = [], True
    for name, res in results.items():
        tab = res.rnmse_table()
        dcp, nun, ami = tab["dcp"], tab["nun"], tab["ami"]
        inv = _inversions(dcp)
        spread = nun.max() / nun.min() - 1.0
        ami_ge = bool(np.all(ami >= dcp))
        good = inv <= 1 and spread < 0.5 and ami_ge
        ok &= good
        details.append(
            f"{name}: DCP {np.array2string(dcp, precision=3)} ({inv} inversions); "
            f"NUN spread {100 * spread:.0f}%; AMI >= DCP {ami_ge}"
        )
    total = sum(seconds.values())
    ok &= total < 1800
    report(5, ok, " | ".join(details) + f" | {total / 60:.1f} min (< 30)")
    assert ok


def test_iteration_behavior(sweeps, report):
    results, _ = sweeps
    details, ok = [], True
    i50 = SNR_GRID.index(50.0)
    for name, res in results.items():
        recs = sorted((r for r in res.records if r.snr_index == i50), key=lambda r: r.trial)[:10]
        dcp_iters = [r.results["dcp"].iterations for r in recs]
        ami_fail = sum(r.results["ami"].status != "converged" for r in recs)
        med = float(np.median(dcp_iters))
        good = med <= 30 and ami_fail >= 7
        ok &= good
        details.append(f"{name}: DCP median {med:g} iterations (<= 30), "
                       f"AMI unconverged {ami_fail}/10 (>= 7)")
    report(6, ok, "; ".join(details))
    assert ok


def test_monotonicity(sweeps, report):
    # the sweeps fixture forces criteria 5-6 runs to exist before checking
    worst = {}
    bad = {}
    for m in ("dcp", "ami"):
        rises = [float(np.max(np.diff(t.objectives()), initial=-np.inf)) for t in TRACES[m]
                 if t.iterations > 1]
        worst[m] = max(rises) if rises else -np.inf
        bad[m] = sum(r > SLACK for r in rises)
    ok = bad["dcp"] == 0 and bad["ami"] == 0 and TRACES["dcp"] and TRACES["ami"]
    report(7, bool(ok), f"{len(TRACES['dcp'])} DCP runs, largest rise {worst['dcp']:.1e}; "
                        f"{len(TRACES['ami'])} AMI runs, largest rise {worst['ami']:.1e} "
                        f"(slack {SLACK:g})")
    assert ok


def test_nun_locality(sweeps, report):
    results, _ = sweeps
    details, ok = [], True
    for name, res in results.items():
        est = np.vstack([res.estimates(i, "nun") for i in range(len(SNR_GRID))])
        mean = est.mean(axis=0)
        dev = np.abs(mean - NUN_CENTERS[name])
        ok &= bool(np.all(dev <= 0.15))
        details.append(f"{name} NUN mean {np.array2string(mean, precision=3)}, "
                       f"max deviation {dev.max():.3f} (<= 0.15)")
    report(8, ok, "; ".join(details), soft=True)


def test_moesp_consistency(fx, report):
    s = fx["example1"]
    ss = s.evaluate(s.theta_true)
    sim = simulate(ss, np.random.default_rng(9).standard_normal((1, 400)))
    est = moesp(sim, SubspaceConfig(n=3)).system
    worst = max(
        np.linalg.norm(est.C @ np.linalg.matrix_power(est.A, k) @ est.B
                       - ss.C @ np.linalg.matrix_power(ss.A, k) @ ss.B)
        for k in range(10)
    )
    ok = worst < 1e-6
    report(9, ok, f"max Markov parameter error {worst:.1e} (< 1e-6)")
    assert ok


def test_unidentifiable_flagged(fx, report):
    s = fx["unidentifiable"]
    sim = simulate(s.evaluate(s.theta_true), np.random.default_rng(10).standard_normal((1, 400)))
    ident = identify(s, sim, ("dcp",))
    r = ident["dcp"]
    ok = r.status != "failed" and r.flagged
    report(10, ok, f"completed with status {r.status}; sigma2_ratio {r.sigma2_ratio:.2e}, "
                   f"cond(T) {r.cond_T:.1f}; flagged {r.flagged}")
    assert ok

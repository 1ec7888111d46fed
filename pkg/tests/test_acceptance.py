"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the terminal
summary, then asserts.
"""

import functools
import math
import time

import numpy as np
import pytest
from scipy import optimize

import oracles
from abcscale import synthetic
from abcscale import tokenizer as tk
from abcscale.abc_parser import parse_tune
from abcscale.compute_optimal import closed_form_allocation, loss_along_budget
from abcscale.corpus_metrics import repetition_rate
from abcscale.fitting import fit_law, huber, lbfgs_minimize, r_squared
from abcscale.laws import Law, LawParams, effective_data_continuous, value_and_grad
from abcscale.smt import alignment_violations, batch_convert, desynchronize, render_smt, synchronize
from conftest import ACCEPTANCE_RESULTS
from test_fitting import QUAD_B, QUAD_HESS, gradient_descent_oracle, minimal_memory_run


def record(label, passed, detail):
    ACCEPTANCE_RESULTS.append((label, bool(passed), detail))
    assert passed, f"{label}: {detail}"


@functools.lru_cache(maxsize=None)
def sms_fixture_fits():
    obs = synthetic.sms_observations(0)
    return {law: fit_law(law, obs) for law in ("sms", "nd", "chinchilla")}


def test_01_smt_round_trip():
    texts = synthetic.aligned_corpus(seed=2024, n_tunes=500, max_tracks=8, max_bars=64)
    tunes = [parse_tune(t) for t in texts]
    start = time.perf_counter()
    ok = sum(desynchronize(render_smt(synchronize(t))) == t for t in tunes)
    elapsed = time.perf_counter() - start
    record("1 SMT round trip", ok == len(tunes) and elapsed < 5.0,
           f"{ok}/{len(tunes)} identical in {elapsed:.2f} s")


def test_02_skip_rate():
    texts = synthetic.mixed_corpus(seed=1, n_tunes=1000, n_misaligned=10)
    _, report = batch_convert(parse_tune(t) for t in texts)
    rate = report.skipped / report.total
    record("2 skip behaviour", rate == 0.010 and report.skip_reasons == {"bar_count_mismatch": 10},
           f"skipped/total = {report.skipped}/{report.total} = {rate}")


def test_03_alignment_invariant():
    texts = synthetic.mixed_corpus(seed=3, n_tunes=500, n_misaligned=5)
    syncs, report = batch_convert(parse_tune(t) for t in texts)
    bad = alignment_violations(syncs)
    groups = sum(len(s.groups) for s in syncs)
    record("3 alignment invariant", bad == 0 and report.converted == len(syncs),
           f"{bad} violations over {groups} groups in {len(syncs)} tunes")


def test_04_tokenizer():
    lines = synthetic.corpus_lines(seed=4, n_lines=10_000)
    vocab = tk.train_bpe(lines, 500)
    again = tk.train_bpe(list(lines), 500)
    ok = sum(tk.decode(vocab, tk.encode(vocab, line)) == line for line in lines)
    same = vocab.merges == again.merges
    record("4 tokenizer", ok == len(lines) and same,
           f"{ok}/{len(lines)} lossless, merge lists identical: {same}")


def test_05_huber_continuity():
    delta = 1e-3
    gap = abs(huber(np.nextafter(delta, 1.0), delta) - huber(np.nextafter(delta, 0.0), delta))
    record("5 Huber continuity", gap < 1e-15, f"|h(d+) - h(d-)| = {gap:.3e}")


def test_06_r_squared():
    rng = np.random.default_rng(6)
    y = rng.standard_normal(50)
    perfect = r_squared(y, y)
    mean = r_squared(np.full_like(y, y.mean()), y)
    record("6 R-squared sanity", abs(perfect - 1.0) <= 1e-12 and abs(mean) <= 1e-12,
           f"perfect {perfect!r}, mean predictor {mean!r}")


def test_07_lbfgs():
    t0 = time.perf_counter()
    one_d = lbfgs_minimize(lambda x: float((x[0] - 3) ** 2), lambda x: np.array([2 * (x[0] - 3)]), [0.0])
    t1 = time.perf_counter()
    quad = lbfgs_minimize(lambda x: 0.5 * x @ QUAD_HESS @ x - QUAD_B @ x, lambda x: QUAD_HESS @ x - QUAD_B,
                          np.zeros(2))
    t2 = time.perf_counter()
    rosen = lbfgs_minimize(optimize.rosen, optimize.rosen_der, np.array([-1.2, 1.0]))
    t3 = time.perf_counter()
    cos, _ = minimal_memory_run(QUAD_HESS, QUAD_B)
    checks = {
        "1-D": abs(one_d.x[0] - 3) < 1e-6 and one_d.n_iter <= 50 and t1 - t0 < 1,
        "quadratic": np.max(np.abs(quad.x - gradient_descent_oracle(QUAD_HESS, QUAD_B))) < 1e-5 and t2 - t1 < 1,
        "rosenbrock": rosen.fun < 1e-8 and np.max(np.abs(rosen.x - 1)) < 1e-4 and t3 - t2 < 1,
        "cosine": cos > 0.99,
    }
    record("7 L-BFGS", all(checks.values()),
           ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
           + f" (rosenbrock f={rosen.fun:.1e}, cosine={cos:.4f})")


def test_08_effective_data():
    u = 1e9
    d = np.linspace(1e7, 5e9, 100)
    issues = []
    for k in (0.1, 0.5, 0.9, 0.999):
        if effective_data_continuous(u, u, k) != u:
            issues.append(f"identity k={k}")
        y = effective_data_continuous(u, d, k)
        if not np.all(np.diff(y) > 0):
            issues.append(f"monotone k={k}")
        if not np.all(np.diff(y, 2) <= 1e-12 * y[1:-1]):
            issues.append(f"concave k={k}")
    for dd in (0.5, 2.0, 37.0):
        near = effective_data_continuous(1.0, dd, 1 - 1e-9)
        if not abs(near - dd) / dd < 1e-6:
            issues.append(f"k->1 at D={dd}")
    record("8 effective-data properties", not issues, "zero violations" if not issues else "; ".join(issues))


def test_09_law_recovery():
    start = time.perf_counter()
    chin = fit_law("chinchilla", synthetic.chinchilla_observations(0, rel_noise=1e-3))
    of = sms_fixture_fits()["sms"].params.overfit
    elapsed = time.perf_counter() - start
    truth = synthetic.SMS_FIXTURE.overfit
    fitted = {"k_d": of.k_d, "k_n": of.k_n, "k_u": of.k_u}
    want = {"k_d": truth.k_d, "k_n": truth.k_n, "k_u": truth.k_u}
    signs = all(np.sign(fitted[k]) == np.sign(want[k]) for k in want)
    order = sorted(want, key=want.get) == sorted(fitted, key=fitted.get)
    ok = chin.test_r2 >= 0.99 and chin.test_huber_log <= 1e-5 and signs and order and elapsed < 60
    record("9 synthetic law recovery", ok,
           f"held-out R2 {chin.test_r2:.5f}, log-Huber {chin.test_huber_log:.2e}, "
           f"stage-2 signs {signs}, ordering {order}, {elapsed:.1f} s")


def test_10_law_ordering():
    fits = sms_fixture_fits()
    r2 = {k: v.test_r2 for k, v in fits.items()}
    ok = r2["sms"] > r2["nd"] > r2["chinchilla"]
    record("10 law-family ordering", ok,
           f"test R2 sms {r2['sms']:.4f} > nd {r2['nd']:.4f} > chinchilla {r2['chinchilla']:.4f}")


def test_11_compute_optimal():
    rng = np.random.default_rng(11)
    worst_n, worst_c, exact = 0.0, 0.0, True
    for _ in range(5):
        p = LawParams(Law.CHINCHILLA, a=10 ** rng.uniform(2, 4), b=10 ** rng.uniform(2, 4),
                      e=rng.uniform(1, 2), alpha=rng.uniform(0.2, 0.6), beta=rng.uniform(0.2, 0.6))
        flops = 10 ** rng.uniform(19, 23)
        res = closed_form_allocation(p, flops)
        n = np.geomspace(1e6, flops / 6, 10_000)
        i = int(np.argmin(loss_along_budget(p, flops, n)))
        assert 0 < i < n.size - 1, "grid optimum on the boundary"
        worst_n = max(worst_n, abs(n[i] / res.n_opt - 1))
        worst_c = max(worst_c, abs(6 * res.n_opt * res.d_opt / flops - 1))
        exact &= res.a_exp + res.b_exp == 1.0
    record("11 compute-optimal", worst_n < 0.01 and worst_c < 1e-9 and exact,
           f"max n_opt gap {worst_n:.2e}, max FLOPs gap {worst_c:.1e}, a+b==1: {exact}")


def test_12_repetition_rate():
    rate = repetition_rate(synthetic.pieces_with_repeats(seed=12, n_pieces=1000, n_with_repeat=443))
    record("12 repetition rate", rate == 0.443, f"rate {rate!r}")


@pytest.mark.parametrize("variant", list(Law))
def test_13_gradients(variant):
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(20):
        theta = oracles.random_theta(variant, rng)
        n, d, u = oracles.random_inputs(rng)
        _, g = value_and_grad(variant, theta, n, d, u)
        err = oracles.gradient_mismatch(g[0], theta, lambda t: value_and_grad(variant, t, n, d, u)[0][0])
        worst = max(worst, err)
    record(f"13 gradient check ({variant.value})", worst < 1e-4 and math.isfinite(worst),
           f"max relative mismatch {worst:.2e} over 20 points")

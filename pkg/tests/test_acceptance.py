"""Acceptance criteria C1-C10, one test each, with a pass/fail summary line."""

import json
import math
import time
from fractions import Fraction

import mpmath
import numpy as np
from scipy.special import erf

from pacsets.bounds import (
    Budget,
    BoundKind,
    Infeasible,
    PacParams,
    binomial_tail,
    direct_alpha,
    min_n_direct,
    min_n_vc,
    vc_alpha,
)
from pacsets.cli import main as cli_main
from pacsets.confset import ellipsoid_set, gaussian_radius_sq, interval_set, member
from pacsets.estimator import empirical_risk, fit_threshold
from pacsets.forecaster import LOG_2PI, CategoricalForecast, GaussianForecast, apply_temperature
from pacsets.harness import (
    CategoricalWorld,
    ExpScoreWorld,
    LinearGaussianDynamicsWorld,
    trial_rng,
    verify_pac,
)
from pacsets.trajectory import LinearGaussian, calibrate_trajectory, per_step_sets, rollout, sample_truth


def exact_tails(n, eps):
    e = Fraction(eps)
    acc, out = Fraction(0), []
    for i in range(n + 1):
        acc += math.comb(n, i) * e**i * (1 - e) ** (n - i)
        out.append(acc)
    return out


def test_c1_bound_oracle_equivalence(criterion):
    cases = [(n, eps, delta) for eps in (0.05, 0.1, 0.3) for delta in (0.01, 0.1, 0.5) for n in range(1, 51)]
    expected = {}
    for n, eps, delta in cases:
        tails = exact_tails(n, eps)
        expected[n, eps, delta] = max((k for k in range(n + 1) if tails[k] < Fraction(delta)), default=None)

    start = time.perf_counter()
    got = {}
    for n, eps, delta in cases:
        try:
            got[n, eps, delta] = direct_alpha(PacParams(eps, delta, n)).k_star
        except Infeasible:
            got[n, eps, delta] = None
    k = direct_alpha(PacParams(0.01, 1e-5, 20000)).k_star
    tail = binomial_tail(20000, 0.01, k)
    elapsed = time.perf_counter() - start

    mpmath.mp.dps = 50
    e = mpmath.mpf(0.01)
    ref = mpmath.fsum(mpmath.binomial(20000, i) * e**i * (1 - e) ** (20000 - i) for i in range(k + 1))
    rel = abs(tail - float(ref)) / float(ref)
    mismatches = [c for c in cases if got[c] != expected[c]]
    ok = not mismatches and rel <= 1e-9 and elapsed < 5.0
    criterion("C1", ok, f"grid mismatches={len(mismatches)}/{len(cases)}, n=20000 k*={k} rel.err={rel:.2e}, "
                        f"library time {elapsed:.3f}s")


def test_c2_sample_complexity(criterion):
    nd = min_n_direct(0.01, 1e-5)
    nv = min_n_vc(0.01, 1e-5)
    try:
        vc_alpha(PacParams(0.01, 1e-5, 20000))
        vc_infeasible = False
    except Infeasible:
        vc_infeasible = True
    ok = nd == 1146 and nv / nd > 50 and vc_infeasible
    criterion("C2", ok, f"min_n_direct={nd}, min_n_vc={nv}, ratio={nv / nd:.1f}, VC infeasible at n=20000: {vc_infeasible}")


def test_c3_pac_frequency(criterion):
    start = time.perf_counter()
    limit = 0.01 + 3 * math.sqrt(0.01 * 0.99 / 5000)
    world = ExpScoreWorld()
    rep = verify_pac(world, PacParams(0.05, 0.01, 1000), 5000, seed=20240101)
    n0 = min_n_direct(0.05, 0.01)
    rep0 = verify_pac(world, PacParams(0.05, 0.01, n0), 5000, seed=20240102)
    elapsed = time.perf_counter() - start
    ok = rep.failure_rate <= limit and rep0.k_star == 0 and rep0.failure_rate <= limit and elapsed < 60
    criterion("C3", ok, f"n=1000 failure_rate={rep.failure_rate:.4f}; n={n0} (k*={rep0.k_star}) "
                        f"failure_rate={rep0.failure_rate:.4f}; limit {limit:.4f}; {elapsed:.1f}s")


def _brute_min(scores, k):
    return min(-s for s in scores if sum(1 for v in scores if v < s) <= k)


def test_c4_constraint_and_minimality(criterion):
    rng = np.random.default_rng(44)
    bad = 0
    for i in range(1000):
        n = int(rng.integers(1, 201))
        if i % 2:
            scores = list(np.round(rng.normal(size=n) * 2, 1))  # many ties
        else:
            scores = list(-rng.exponential(size=n))
        k_star = int(rng.integers(0, n))
        fit = fit_threshold(scores, Budget(k_star, n, BoundKind.DIRECT))
        risk = empirical_risk(fit.threshold, scores)
        if not (risk == Fraction(fit.effective_k, n) <= Fraction(k_star, n)
                and fit.threshold.t == _brute_min(scores, k_star)):
            bad += 1
    traces = [
        (np.log([0.9, 0.8, 0.7, 0.05]), 1, -math.log(0.7), 1),
        (np.log([0.5, 0.5, 0.9]), 1, -math.log(0.5), 0),
        (np.log([0.3, 0.6]), 0, -math.log(0.3), 0),
    ]
    trace_ok = all(
        fit_threshold(s, Budget(k, len(s), BoundKind.DIRECT)).threshold.t == t
        and fit_threshold(s, Budget(k, len(s), BoundKind.DIRECT)).effective_k == ek
        for s, k, t, ek in traces
    )
    criterion("C4", bad == 0 and trace_ok, f"{bad}/1000 random sets violated; hand traces ok: {trace_ok}")


def test_c5_geometry(criterion):
    rng = np.random.default_rng(55)
    mem_bad = frob_bad = checked = 0
    for _ in range(10_000):
        d = int(rng.integers(1, 6))
        a = rng.normal(size=(d, d))
        f = GaussianForecast(rng.normal(size=d), a @ a.T + rng.uniform(0.1, 2) * np.eye(d))
        T = 0.5 * (d * LOG_2PI + f.logdet) + rng.uniform(-1, 6)
        y = f.mean + rng.normal(scale=2.0, size=d)
        r2 = gaussian_radius_sq(f.logdet, d, T)
        q = float((y - f.mean) @ np.linalg.solve(f.cov, y - f.mean))
        if abs(q - r2) > 1e-9 * max(1.0, abs(r2)):
            checked += 1
            mem_bad += member(f, T, y) != (q <= r2)
        e = ellipsoid_set(f, T)
        want = math.sqrt(r2 * np.trace(f.cov)) if r2 > 0 else 0.0
        frob_bad += abs(e.size - want) > 1e-8 * max(1.0, want)
    agree_bad = 0
    for _ in range(1000):
        s = rng.uniform(0.1, 4)
        f = GaussianForecast.scalar(rng.normal(), s)
        T = rng.uniform(-1, 5)
        y = f.mean[0] + rng.normal(scale=3 * s)
        e, iv = ellipsoid_set(f, T), interval_set(f, T)
        q = ((y - f.mean[0]) / s) ** 2
        if abs(q - e.radius_sq) > 1e-9:
            agree_bad += iv.contains(y) != (q <= e.radius_sq)
    n = 1_000_000
    mu, sigma, extra = 0.5, 1.7, 0.9
    T = math.log(sigma * math.sqrt(2 * math.pi)) + extra
    iv = interval_set(GaussianForecast.scalar(mu, sigma), T)
    ys = rng.normal(mu, sigma, size=n)
    cover = float(np.mean((ys >= iv.lo) & (ys <= iv.hi)))
    p = erf(math.sqrt(extra))
    z = abs(cover - p) / math.sqrt(p * (1 - p) / n)
    ok = mem_bad == 0 and checked > 9900 and frob_bad == 0 and agree_bad == 0 and z <= 3
    criterion("C5", ok, f"membership mismatches={mem_bad}/{checked}, Frobenius mismatches={frob_bad}, "
                        f"1-D agreement mismatches={agree_bad}, coverage z={z:.2f}")


def test_c6_calibration_recovery(criterion):
    taus = {}
    for gamma in (3.0, 1.0):
        w = CategoricalWorld(gamma=gamma, seed=6)
        taus[gamma] = w.fit_tau(w.sample(100_000, trial_rng(66, int(gamma))))
    x = CategoricalForecast.from_probs([1 / 3, 1 / 3, 1 / 3])
    xp = CategoricalForecast.from_probs([0.75, 0.25, 0.0])
    T = -math.log(2 / 5)
    fx, fxp = apply_temperature(x, 1e-4), apply_temperature(xp, 1e-4)
    achieved = ([y for y in range(3) if member(fx, T, y)] == []
                and [y for y in range(3) if member(fxp, T, y)] == [0, 1])
    # at tau = 1: every threshold between or at score breakpoints
    pts = sorted({float(v) for v in np.concatenate([x.log_probs, xp.log_probs]) if np.isfinite(v)})
    cands = pts + [(a + b) / 2 for a, b in zip(pts, pts[1:])] + [pts[0] - 1.0, pts[-1] + 1.0]
    impossible = not any(
        [y for y in range(3) if member(x, -c, y)] == [] and [y for y in range(3) if member(xp, -c, y)] == [0, 1]
        for c in cands
    )
    ok = 0.31 <= taus[3.0] <= 0.36 and 0.95 <= taus[1.0] <= 1.05 and achieved and impossible
    criterion("C6", ok, f"tau(gamma=3)={taus[3.0]:.4f}, tau(gamma=1)={taus[1.0]:.4f}, "
                        f"flattened pair achieved={achieved}, tau=1 pair impossible={impossible}")


def test_c7_baseline_invalidity(criterion):
    eps, delta, n, trials, m_test = 0.05, 0.05, 2000, 500, 10_000
    w = CategoricalWorld(gamma=3.0, seed=7)
    rng = trial_rng(77, 0)
    xs, ys = w.sample(m_test, rng)
    sets = w.baseline_sets(eps)
    base_err = float(np.mean([y not in sets[x] for x, y in zip(xs, ys)]))
    base_z = (base_err - eps) / math.sqrt(eps * (1 - eps) / m_test)
    k_star = direct_alpha(PacParams(eps, delta, n)).k_star
    valid = 0
    for i in range(trials):
        r = trial_rng(78, i)
        tau = w.fit_tau(w.sample(1000, r))
        fit = fit_threshold(w.log_scores(w.sample(n, r), tau), Budget(k_star, n, BoundKind.DIRECT))
        test_err = float(np.mean(w.log_scores(w.sample(m_test, r), tau) < -fit.threshold.t))
        valid += test_err <= eps
    need = 1 - delta - 3 * math.sqrt(delta * (1 - delta) / trials)
    ok = base_z > 3 and valid / trials >= need
    criterion("C7", ok, f"baseline test error={base_err:.4f} (z={base_z:.1f} above eps); "
                        f"pipeline valid in {valid}/{trials} trials (need >= {need:.4f})")


def test_c8_trajectory(criterion):
    H, d = 20, 2
    m = LinearGaussian.identity(d)
    tf = rollout(m, np.zeros(d), H)
    exact_cov = all(np.array_equal(tf.step_covs[t], (t + 1) * np.eye(d)) for t in range(H))
    T = 150.0
    ts = per_step_sets(tf, T)
    size_err = max(abs(e.size - math.sqrt(ts.radius_sq * 2 * t)) / math.sqrt(ts.radius_sq * 2 * t)
                   for t, e in enumerate(ts.steps, start=1))
    world = LinearGaussianDynamicsWorld(horizon=H, dim=d, mc_samples=1_000_000, seed=8)
    delta, trials = 0.05, 500
    rep = verify_pac(world, PacParams(0.1, delta, 1000), trials, calibrate=True, seed=88,
                     calibration_size=1000, workers=4)
    limit = delta + 3 * math.sqrt(delta * (1 - delta) / trials)
    rng = np.random.default_rng(888)
    rollouts = [(tf, sample_truth(m, np.zeros(d), H, rng)) for _ in range(10_000)]
    taus = calibrate_trajectory(rollouts)
    ok = exact_cov and size_err <= 1e-12 and rep.failure_rate <= limit and np.all((taus >= 0.9) & (taus <= 1.1))
    criterion("C8", ok, f"Sigma_t = tI exact: {exact_cov}; size rel.err={size_err:.1e}; "
                        f"failure_rate={rep.failure_rate:.4f} (limit {limit:.4f}); "
                        f"tau_t in [{taus.min():.3f}, {taus.max():.3f}]")


def test_c9_reduction(criterion):
    rng = np.random.default_rng(99)
    bad = total = 0
    for _ in range(200):
        n = int(rng.integers(1, 50))
        scores = list(np.round(rng.normal(size=n) * 2, 1))
        phi = [(-s, 1) for s in scores]
        for T in [-s for s in scores] + list(rng.normal(size=3) * 3):
            err = Fraction(sum(1 for t, lab in phi if int(t <= T) != lab), n)
            total += 1
            bad += err != empirical_risk(T, scores)
    criterion("C9", bad == 0, f"{bad}/{total} (dataset, threshold) pairs disagree")


def _cli(argv):
    try:
        return cli_main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


def _cli_suite(root, workers):
    root.mkdir()
    w = ["--workers", workers]
    sim = ["--world", "trajectory", "--horizon", 4, "--dim", 2, "--mc-samples", 20_000]
    outs = []
    for split, seed in (("cal", 1), ("val", 2), ("test", 3)):
        outs.append(root / f"{split}.jsonl")
        _cli(["simulate", *sim, "--n", 400, "--seed", seed, "--prefix", split, "-o", outs[-1], *w])
    cat = ["--world", "categorical"]
    outs.append(root / "ccal.jsonl")
    _cli(["simulate", *cat, "--n", 500, "--seed", 4, "--prefix", "c", "-o", outs[-1], *w])
    outs.append(root / "cval.jsonl")
    _cli(["simulate", *cat, "--n", 500, "--seed", 5, "--prefix", "v", "-o", outs[-1], *w])
    steps = [
        ["alpha", "--n", 2000, "--epsilon", 0.05, "--delta", 0.01],
        ["calibrate", "--input", root / "cal.jsonl"],
        ["fit", "--calibration", root / "cal.jsonl", "--validation", root / "val.jsonl",
         "--epsilon", 0.1, "--delta", 0.05],
        ["fit", "--calibration", root / "ccal.jsonl", "--validation", root / "cval.jsonl",
         "--epsilon", 0.1, "--delta", 0.05],
    ]
    codes = []
    for i, argv in enumerate(steps):
        outs.append(root / f"step{i}.json")
        codes.append(_cli([*argv, "--seed", 9, "-o", outs[-1], *w]))
    art = root / "step2.json"
    more = [
        ("sets.jsonl", ["predict", "--artifact", art, "--input", root / "test.jsonl", "--box"]),
        ("eval.json", ["eval", "--artifact", art, "--input", root / "test.jsonl"]),
        ("evals.json", ["eval", "--artifact", art, "--sets", root / "sets.jsonl"]),
        ("base.json", ["baseline", "--input", root / "test.jsonl", "--epsilon", 0.1]),
        ("report.csv", ["report", "--artifact", art, "--input", root / "test.jsonl"]),
        ("pac.json", ["verify-pac", "--world", "categorical", "--n", 300, "--epsilon", 0.1, "--delta", 0.1,
                      "--trials", 100, "--calibration-size", 300, "--records", root / "trials.csv"]),
        ("sweep.csv", ["sweep", "--world", "gaussian", "--dim", 2, "--n", 400]),
    ]
    for name, argv in more:
        outs.append(root / name)
        codes.append(_cli([*argv, "--seed", 9, "-o", outs[-1], *w]))
    outs.append(root / "trials.csv")
    return codes, {p.name: p.read_bytes() for p in outs}


def test_c10_cli_determinism(criterion, tmp_path):
    runs = [_cli_suite(tmp_path / name, workers) for name, workers in (("a", 1), ("b", 1), ("c", 4))]
    codes = [c for c, _ in runs]
    files = [f for _, f in runs]
    differing = sorted({k for f in files[1:] for k in f if f[k] != files[0][k]})
    ok = all(all(c == 0 for c in cs) for cs in codes) and not differing
    json.loads(files[0]["eval.json"])
    criterion("C10", ok, f"{len(files[0])} output files x 3 runs (workers 1, 1, 4); differing: {differing or 'none'}")

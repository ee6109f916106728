"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line that is printed at the end of the
session, then asserts. Tolerances and runtime budgets are the pinned ones.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import hashlib
import math
import time
from functools import lru_cache

import numpy as np

from conftest import ACCEPTANCE
from helpers import brute_force_posterior, gibbs_frequencies, instance, total_variation
from tcclust import cli
from tcclust.dataset import read_dataset, write_dataset
from tcclust.evaluation import (
    coverage_ratios,
    evaluate,
    linking_fraction,
    outlier_metrics,
    purity_and_coverage,
    shot_segmentation,
    significant_clusters,
    truth_tracks,
)
from tcclust.inference import FitConfig, InvariantError, check_state, component_posterior, fit, fit_online
from tcclust.model import (
    JUNK,
    JUNK_LABEL,
    NEW,
    HyperParams,
    ModelState,
    TrackletRecord,
    tccrf_predictive,
    tccrp_predictive,
)
from tcclust.synthesis import (
    SynthesisPlan,
    benchmark_hyper,
    generate_tccrp,
    recovery_benchmark,
    segment_benchmark,
)

SWEEPS, BURN_IN = 200, 50
RECOVERY_SEEDS = range(5)
OUTLIER_SEEDS = range(10)
SEGMENT_SEEDS = range(10)
C_VALUES = (5.0, 4.0, 3.0, 2.0)

# every fit in criteria 4-7 audits its state after each sweep; a violation
# raises and lands here instead of aborting the run
VIOLATIONS: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


@lru_cache(maxsize=None)
def benchmark(seed: int):
    return recovery_benchmark(seed)


@lru_cache(maxsize=None)
def offline(seed: int, c: float = 5.0):
    ds, ctx, _ = benchmark(seed)
    h = benchmark_hyper(c=c)
    try:
        res = fit(ds.features, ctx, FitConfig(n_sweeps=SWEEPS, burn_in=BURN_IN, seed=seed, hyper=h), check_every=1)
    except InvariantError as exc:
        VIOLATIONS.append(f"seed {seed} c={c}: {exc}")
        raise
    return res, evaluate(res.state, ds.records, ctx, h)


# -- 1 ---------------------------------------------------------------------------------------


def test_criterion_1_predictive_exactness():
    t0 = time.perf_counter()
    h = HyperParams.isotropic(1, alpha=1.0, beta=0.5)
    errs = []
    p = tccrp_predictive(ModelState.from_counts({1: 3, 2: 1}), {2}, h).normalized()
    errs += [abs(p[JUNK] - 1 / 9), abs(p[1] - 6 / 9), abs(p.get(2, 0.0)), abs(p[NEW] - 2 / 9)]
    p = tccrp_predictive(ModelState.from_counts({}), set(), h.replace(beta=1.0)).normalized()
    errs += [abs(p[JUNK] - 0.5), abs(p[NEW] - 0.5)]
    p = tccrp_predictive(ModelState.from_counts({1: 4}), {1}, h.replace(alpha=2.0, beta=2.0)).normalized()
    errs += [abs(p[JUNK] - 0.5), abs(p.get(1, 0.0)), abs(p[NEW] - 0.5)]
    hf = h.replace(beta=1.0, gamma=1.0)
    st_ = ModelState.from_counts({}, n_szc={2: {1: 2}}, seg_count={1: 1, 5: 3}, n_segments=3)
    w = tccrf_predictive(st_, 2, set(), hf).unnormalized()
    errs += [abs(w[JUNK] - 1), abs(w[1] - 2), abs(w[5] - 3), abs(w[NEW] - 1)]
    errs.append(abs(tccrf_predictive(st_, 2, set(), hf).prob(5) - 3 / 7))
    p = tccrf_predictive(ModelState.from_counts({}, n_szc={}, n_segments=1), 0, set(), hf.replace(beta=2.0)).normalized()
    errs += [abs(p[JUNK] - 2 / 3), abs(p[NEW] - 1 / 3)]
    w = tccrf_predictive(ModelState.from_counts({}, n_szc={0: {1: 5}, 1: {2: 1}}, n_segments=2), 0, set(), hf).unnormalized()
    errs.append(abs(w[1] / w[2] - 5.0))
    worst = max(errs)

    rng = np.random.default_rng(1)
    bad = 0
    n_tables = 10_000
    # a pool of concentration settings; validating a fresh HyperParams per table costs more than the check
    pool = [
        h.replace(alpha=float(a), beta=float(b), gamma=float(g))
        for a, b, g in zip(rng.uniform(0.1, 5, 64), rng.uniform(0.01, 5, 64), rng.uniform(0.1, 5, 64))
    ]
    sizes = rng.integers(0, 7, n_tables)
    values = rng.integers(1, 30, (n_tables, 6))
    order = np.argsort(rng.random((n_tables, 13)), axis=1) + 1
    n_conf = rng.integers(0, 4, n_tables)
    keep = rng.random((n_tables, 3, 6)) < 0.5
    seg_counts = rng.integers(1, 4, (n_tables, 6))
    segment = rng.integers(0, 3, n_tables)
    for t in range(n_tables):
        k = int(sizes[t])
        labels = order[t, :k].tolist()
        counts = dict(zip(labels, values[t, :k].tolist()))
        conflicts = set(order[t, 6 : 6 + n_conf[t]].tolist()) | ({JUNK} if t % 3 == 0 else set())
        hh = pool[t % len(pool)]
        if t % 2:
            p = tccrp_predictive(ModelState.from_counts(counts), conflicts, hh).normalized()
        else:
            n_szc = {s: {lab: v for j, (lab, v) in enumerate(counts.items()) if keep[t, s, j]} for s in range(3)}
            seg = dict(zip(labels, seg_counts[t, :k].tolist()))
            state = ModelState.from_counts({}, n_szc=n_szc, seg_count=seg, n_segments=3)
            p = tccrf_predictive(state, int(segment[t]), conflicts, hh).normalized()
        if abs(sum(p.values()) - 1.0) > 1e-12 or any(p.get(c, 0.0) != 0.0 for c in conflicts - {JUNK}):
            bad += 1
    elapsed = time.perf_counter() - t0
    record(
        1,
        worst <= 1e-12 and bad == 0 and elapsed < 1.0,
        f"max example error {worst:.1e} (tol 1e-12); {bad}/{n_tables} random tables violate normalization/masking; {elapsed:.2f}s (< 1s)",
    )


# -- 2 ---------------------------------------------------------------------------------------


def _quadrature_posterior(ys, mu, s0, s1):
    n = len(ys)
    mean0, var0 = component_posterior(n, np.array([sum(ys)]), HyperParams(mu=[mu], sigma0=[s0], sigma1=[s1]))
    sd = math.sqrt(var0[0])
    grid = np.linspace(mean0[0] - 14 * sd, mean0[0] + 14 * sd, 200_001)
    logf = -0.5 * (grid - mu) ** 2 / s0 - 0.5 * sum((y - grid) ** 2 for y in ys) / s1
    f = np.exp(logf - logf.max())
    z = np.trapezoid(f, grid)
    m = np.trapezoid(grid * f, grid) / z
    v = np.trapezoid((grid - m) ** 2 * f, grid) / z
    return m, v


def test_criterion_2_conjugate_posterior():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(0, 6))
        mu, s0, s1 = rng.normal(scale=2), rng.uniform(0.2, 5), rng.uniform(0.2, 5)
        ys = rng.normal(mu, 2.0, size=n).tolist()
        mean, var = component_posterior(n, np.array([sum(ys)]), HyperParams(mu=[mu], sigma0=[s0], sigma1=[s1]))
        qm, qv = _quadrature_posterior(ys, mu, s0, s1)
        worst = max(worst, abs(mean[0] - qm), abs(var[0] - qv))
    mean, var = component_posterior(1, np.array([2.0]), HyperParams.isotropic(1, sigma0=1.0, sigma1=1.0))
    hand = (mean[0], var[0]) == (1.0, 0.5)
    elapsed = time.perf_counter() - t0
    record(2, worst <= 1e-6 and hand and elapsed < 10, f"max |closed form - quadrature| {worst:.1e} (tol 1e-6); hand case mean 1.0 var 0.5: {hand}; {elapsed:.1f}s (< 10s)")


# -- 3 ---------------------------------------------------------------------------------------

SMALL_HYPER = HyperParams.isotropic(1, sigma0=16.0, sigma1=1.0, alpha=1.0, beta=0.5, kappa1=0.2, kappa2=0.6, thres=5)
SMALL_FEATURES = [0.0, 0.4, 7.0, 7.3]
SMALL_DISTANCES = [None, 1, 1, 12]
SMALL_SPANS = {
    "tccrp": [(0, 9), (10, 19), (10, 19), (30, 39)],
    "tccrf": [(0, 9), (10, 19), (12, 21), (30, 39)],
}


def test_criterion_3_small_instance_gibbs():
    t0 = time.perf_counter()
    tvs = {}
    for mode, spans in SMALL_SPANS.items():
        Y, ctx = instance(spans, SMALL_FEATURES, SMALL_HYPER, SMALL_DISTANCES)
        assert ctx.n_segments == 1
        exact = brute_force_posterior(Y, ctx, SMALL_HYPER, mode)
        try:
            emp = gibbs_frequencies(Y, ctx, SMALL_HYPER, mode, n_samples=100_000, burn_in=500, seed=3, check=True)
        except InvariantError as exc:
            VIOLATIONS.append(f"small {mode}: {exc}")
            raise
        tvs[mode] = total_variation(exact, emp)
    elapsed = time.perf_counter() - t0
    ok = all(tv <= 0.02 for tv in tvs.values()) and elapsed < 120
    record(3, ok, "TV " + ", ".join(f"{m} {tv:.4f}" for m, tv in tvs.items()) + f" (tol 0.02) over 1e5 samples; {elapsed:.0f}s (< 120s)")


# -- 4 ---------------------------------------------------------------------------------------


def test_criterion_4_synthetic_recovery():
    t0 = time.perf_counter()
    rows = []
    for seed in RECOVERY_SEEDS:
        _, rep = offline(seed)
        ok = (rep.purity or 0.0) >= 0.90 and rep.entity_coverage == 10 and rep.tracklet_coverage >= 0.85
        rows.append((seed, rep.purity, rep.entity_coverage, rep.tracklet_coverage, ok))
    elapsed = time.perf_counter() - t0
    good = sum(r[-1] for r in rows)
    detail = "; ".join(f"seed {s}: purity {p:.3f} entities {e} tracklets {t:.3f}" for s, p, e, t, _ in rows)
    record(4, good >= 4 and elapsed < 300, f"{good}/5 seeds meet purity>=0.90, entity_coverage=10, tracklet_coverage>=0.85 (need 4); {detail}; {elapsed:.0f}s (< 300s)")


# -- 5 ---------------------------------------------------------------------------------------


def test_criterion_5_segment_advantage():
    t0 = time.perf_counter()
    h = benchmark_hyper(gamma=3.0)
    purity = {"tccrf": [], "tccrp": []}
    for seed in SEGMENT_SEEDS:
        ds, ctx, _ = segment_benchmark(seed)
        assert ctx.n_segments == 8
        for mode in purity:
            try:
                res = fit(ds.features, ctx, FitConfig(n_sweeps=SWEEPS, burn_in=BURN_IN, seed=seed, mode=mode, hyper=h), check_every=1)
            except InvariantError as exc:
                VIOLATIONS.append(f"segment seed {seed} {mode}: {exc}")
                raise
            purity[mode].append(evaluate(res.state, ds.records, ctx, h).purity or 0.0)
    elapsed = time.perf_counter() - t0
    crf, crp = float(np.mean(purity["tccrf"])), float(np.mean(purity["tccrp"]))
    record(5, crf >= crp - 0.02 and elapsed < 600, f"mean purity TC-CRF {crf:.3f} vs TC-CRP {crp:.3f} (need >= TC-CRP - 0.02) over 10 seeds; {elapsed:.0f}s (< 600s)")


# -- 6 ---------------------------------------------------------------------------------------


def test_criterion_6_online_gap():
    t0 = time.perf_counter()
    h = benchmark_hyper()
    gaps = []
    for seed in RECOVERY_SEEDS:
        ds, ctx, _ = benchmark(seed)
        _, off = offline(seed)
        res = fit_online(ds.records, FitConfig(seed=seed, hyper=h))
        try:
            check_state(res.state, ctx, "tccrp", ds.features)
        except InvariantError as exc:
            VIOLATIONS.append(f"online seed {seed}: {exc}")
            raise
        on = evaluate(res.state, ds.records, ctx, h)
        gaps.append((off.purity or 0.0) - (on.purity or 0.0))
    # offline fits are shared with criterion 4; the budget covers the online passes
    elapsed = time.perf_counter() - t0
    record(6, max(gaps) <= 0.10 and elapsed < 300, "offline - online purity per seed " + ", ".join(f"{g:+.3f}" for g in gaps) + f" (need <= 0.10); {elapsed:.0f}s (< 300s)")


# -- 7 ---------------------------------------------------------------------------------------


def test_criterion_7_outlier_detection():
    t0 = time.perf_counter()
    picked = {c: 0 for c in C_VALUES}
    hits = {c: 0 for c in C_VALUES}
    for seed in OUTLIER_SEEDS:
        ds, _, _ = benchmark(seed)
        labels = [r.truth_label for r in ds.records]
        for c in C_VALUES:
            res, _ = offline(seed, c)
            _, h = outlier_metrics(res.state, labels)
            picked[c] += int(np.sum(res.state.z == JUNK))
            hits[c] += h
    elapsed = time.perf_counter() - t0
    precision = {c: hits[c] / picked[c] if picked[c] else float("nan") for c in C_VALUES}
    prec_ok = all(precision[a] >= precision[b] for a, b in zip(C_VALUES, C_VALUES[1:]))
    recall_ok = all(hits[a] <= hits[b] for a, b in zip(C_VALUES, C_VALUES[1:]))
    detail = ", ".join(f"c={c:g}: precision {precision[c]:.3f} recall* {hits[c]}" for c in C_VALUES)
    record(
        7,
        precision[5.0] >= 0.90 and prec_ok and recall_ok and elapsed < 600,
        f"{detail} (pooled over 10 seeds; need precision(c=5)>=0.90, precision non-increasing: {prec_ok}, recall* non-decreasing: {recall_ok}); {elapsed:.0f}s (< 600s)",
    )


# -- 8 ---------------------------------------------------------------------------------------


def test_criterion_8_constraints_and_linking():
    # noiseless data: no junk, close predecessors almost never change label
    h = benchmark_hyper(beta=1e-9, kappa1=0.001)
    plan = SynthesisPlan(2000, 25, seed=8, overlap_rate=0.05, min_separation=10.0, max_components=10)
    ds, ctx, truth = generate_tccrp(plan, h)
    assert not np.any(truth.z == JUNK)
    fit_h = benchmark_hyper(kappa1=0.001)
    try:
        res = fit(ds.features, ctx, FitConfig(n_sweeps=SWEEPS, burn_in=BURN_IN, seed=8, hyper=fit_h), check_every=1)
    except InvariantError as exc:
        VIOLATIONS.append(f"noiseless: {exc}")
        raise
    labels = [r.truth_label for r in ds.records]
    link, link_multi = linking_fraction(res.state, truth_tracks(labels, ctx, fit_h))
    ran = {3, 4, 5, 6, 7} <= set(ACCEPTANCE)
    record(
        8,
        not VIOLATIONS and ran and link >= 0.95,
        f"{len(VIOLATIONS)} invariant violations across every audited state of criteria 3-7 (ran: {ran}); "
        f"linking fraction on noiseless data {link:.3f} (need >= 0.95; without singletons {link_multi:.3f})",
    )


# -- 9 ---------------------------------------------------------------------------------------


def test_criterion_9_metric_fixtures():
    h = HyperParams.isotropic(1)
    checks = {}
    z = [1] * 10 + [2] * 10
    labels = ["A"] * 8 + ["B"] * 2 + ["A"] * 5 + ["B"] * 5
    kept, _ = significant_clusters(z, labels, h)
    checks["purity/coverage"] = purity_and_coverage(kept, labels, h) == (0.5, 1, 0.5)
    kept, _ = significant_clusters([1] * 10, ["A"] * 7 + ["B"] * 3, h)
    checks["inclusive 70%"] = kept[0].is_pure
    checks["outliers"] = outlier_metrics([0, 0, 0, 0], [JUNK_LABEL] * 3 + ["A"]) == (0.75, 3)
    conc, rep = coverage_ratios(14, 0.90, 67)
    checks["conciseness 14/67"] = conc == 14 / 67 and f"{conc:.2f}" == "0.21"
    checks["representativeness x100"] = f"{100 * rep:.2f}" == "1.34"
    checks["degenerate summary"] = coverage_ratios(1, 1.0, 1) == (1.0, 1.0)
    recs = [TrackletRecord(0, np.zeros(1), 1, 250), TrackletRecord(1, np.zeros(1), 201, 250)]
    shots = shot_segmentation([1, 2], recs, h)
    checks["shots"] = [(s.start, s.end) for s in shots.segments] == [(1, 200), (201, 250)] and shots.significant == [True, False]
    failed = [k for k, v in checks.items() if not v]
    record(9, not failed, f"{len(checks) - len(failed)}/{len(checks)} fixtures exact; conciseness(14, 67) = {conc:.4f} -> 0.21" + (f"; failed: {failed}" if failed else ""))


# -- 10 --------------------------------------------------------------------------------------


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_10_determinism_and_round_trip(tmp_path):
    same = {}
    for enc in ("text", "binary"):
        for j in (0, 1):
            assert cli.main(["generate", "--n", "500", "--dim", "5", "--seed", "7", "--encoding", enc, "--out", str(tmp_path / f"{enc}{j}.tcd")]) == 0
        same[f"generate {enc}"] = _digest(tmp_path / f"{enc}0.tcd") == _digest(tmp_path / f"{enc}1.tcd")
    for j in (0, 1):
        assert cli.main(["fit", "--data", str(tmp_path / "text0.tcd"), "--out", str(tmp_path / f"fit{j}"), "--sweeps", "30", "--burn-in", "5", "--seed", "4"]) == 0
    same["fit"] = all(_digest(tmp_path / "fit0" / f) == _digest(tmp_path / "fit1" / f) for f in ("assignments.csv", "atoms.csv", "trace.csv"))
    ds = read_dataset(tmp_path / "text0.tcd")
    for enc in ("text", "binary"):
        write_dataset(ds, tmp_path / f"rt.{enc}", enc)
        back = read_dataset(tmp_path / f"rt.{enc}")
        same[f"round trip {enc}"] = len(back.records) == len(ds.records) and all(a.same_as(b) for a, b in zip(ds.records, back.records))
    same["text == binary"] = all(a.same_as(b) for a, b in zip(read_dataset(tmp_path / "text0.tcd").records, read_dataset(tmp_path / "binary0.tcd").records))
    failed = [k for k, v in same.items() if not v]
    record(10, not failed, f"{len(same) - len(failed)}/{len(same)} byte-identical / exact checks" + (f"; failed: {failed}" if failed else ""))

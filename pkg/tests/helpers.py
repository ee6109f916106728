"""Shared builders and the brute-force posterior oracle used across tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

from tcclust.dataset import build_context
from tcclust.model import JUNK, HyperParams, TrackletRecord


def make_records(spans, features, distances=None, labels=None) -> list[TrackletRecord]:
    """Records from ``(start, end)`` spans; ``features`` is (N, d) or a length-N list of scalars."""
    Y = np.asarray(features, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    out = []
    for i, (s, e) in enumerate(spans):
        out.append(
            TrackletRecord(
                id=i,
                features=Y[i],
                start_frame=s,
                end_frame=e,
                distance=None if distances is None else distances[i],
                truth_label=None if labels is None else labels[i],
            )
        )
    return out


def instance(spans, features, hyper: HyperParams, distances=None):
    records = make_records(spans, features, distances)
    ctx = build_context(records, hyper)
    Y = np.stack([r.features for r in records])
    return Y, ctx


def canonical(z) -> tuple[int, ...]:
    """Relabel entity components by order of first appearance; junk stays 0."""
    order: dict[int, int] = {}
    out = []
    for k in z:
        k = int(k)
        if k == JUNK:
            out.append(0)
        else:
            out.append(order.setdefault(k, len(order) + 1))
    return tuple(out)


def _label_strings(n: int):
    """Every canonical labelling of n items with junk (0) allowed."""

    def rec(i, m, acc):
        if i == n:
            yield tuple(acc)
            return
        for k in range(m + 2):
            yield from rec(i + 1, max(m, k), acc + [k])

    yield from rec(0, 0, [])


def _log_mvn(y: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(cov)
    r = y - mean
    return float(-0.5 * (len(y) * math.log(2 * math.pi) + logdet + r @ np.linalg.solve(cov, r)))


def _p_change(i, ctx, hyper, mode):
    p = ctx.prev[i]
    if mode == "crp-baseline" or p is None:
        return 1.0
    if mode == "tccrf" and ctx.segment_of[p] != ctx.segment_of[i]:
        return 1.0
    return hyper.kappa1 if ctx.prev_distance[i] <= hyper.thres else hyper.kappa2


def brute_force_posterior(Y: np.ndarray, ctx, hyper: HyperParams, mode: str) -> dict:
    """Exact p((C, Z) | Y) over canonical labellings, by enumeration (d = 1 only).

    Component means are integrated out per cluster; the prior is the
    exchangeable changepoint partition used by the sampler, written out from
    first principles.
    """
    n = Y.shape[0]
    assert Y.shape[1] == 1
    y = Y[:, 0]
    mu, s0, s1 = float(hyper.mu[0]), float(hyper.sigma0[0]), float(hyper.sigma1[0])
    s2 = hyper.c * s1
    alpha, gamma = hyper.alpha, hyper.gamma
    beta = 0.0 if mode == "crp-baseline" else hyper.beta
    out = {}
    for z in _label_strings(n):
        for c in itertools.product((0, 1), repeat=n):
            lp = 0.0
            ok = True
            for i in range(n):
                if z[i] and any(z[j] == z[i] for j in ctx.conflict_sets[i]) and mode != "crp-baseline":
                    ok = False
                p1 = _p_change(i, ctx, hyper, mode)
                if c[i]:
                    ok &= p1 > 0
                    lp += math.log(p1) if p1 > 0 else 0.0
                else:
                    prev = ctx.prev[i]
                    ok &= p1 < 1 and prev is not None and z[prev] == z[i]
                    lp += math.log(1 - p1) if p1 < 1 else 0.0
            if mode == "crp-baseline" and 0 in z:
                ok = False
            if not ok:
                continue
            cps = [i for i in range(n) if c[i]]
            junk = sum(1 for i in cps if z[i] == 0)
            if junk and beta == 0:
                continue
            lp += junk * (math.log(beta) if junk else 0.0)
            labels = sorted(set(z) - {0})
            if mode == "tccrf":
                cells: dict = {}
                for i in cps:
                    if z[i]:
                        cells[(ctx.segment_of[i], z[i])] = cells.get((ctx.segment_of[i], z[i]), 0) + 1
                needed = {(ctx.segment_of[i], z[i]) for i in range(n) if z[i]}
                if needed - set(cells):
                    continue
                for k in labels:
                    per = [v for (s, kk), v in cells.items() if kk == k]
                    m = len(per)
                    lp += math.log(gamma) + m * math.log(alpha) + math.lgamma(m) + sum(math.lgamma(v) for v in per)
            else:
                counts = {k: sum(1 for i in cps if z[i] == k) for k in labels}
                if any(v == 0 for v in counts.values()):
                    continue
                lp += sum(math.log(alpha) + math.lgamma(v) for v in counts.values())
            M = len(cps)
            lp -= sum(math.log(alpha + beta + m) for m in range(M))
            for i in range(n):
                if z[i] == 0:
                    lp += -0.5 * (math.log(2 * math.pi * s2) + (y[i] - mu) ** 2 / s2)
            for k in labels:
                idx = [i for i in range(n) if z[i] == k]
                cov = s1 * np.eye(len(idx)) + s0 * np.ones((len(idx), len(idx)))
                lp += _log_mvn(y[idx], np.full(len(idx), mu), cov)
            out[(c, z)] = lp
    top = max(out.values())
    w = {k: math.exp(v - top) for k, v in out.items()}
    total = sum(w.values())
    return {k: v / total for k, v in w.items()}


def gibbs_frequencies(Y, ctx, hyper, mode, n_samples, burn_in=500, seed=0, check=False) -> dict:
    """Empirical (C, Z) frequencies from the sampler with fixed hyperparameters.

    With ``check`` every sampled state is audited and an ``InvariantError``
    propagates.
    """
    from tcclust.inference import GibbsSampler

    sampler = GibbsSampler(Y, ctx, hyper, mode, np.random.default_rng(seed))
    sampler.initialize()
    counts: dict = {}
    for t in range(burn_in + n_samples):
        sampler.sweep()
        if check:
            sampler.check()
        if t >= burn_in:
            key = (tuple(int(v) for v in sampler.state.c), canonical(sampler.state.z))
            counts[key] = counts.get(key, 0) + 1
    return {k: v / n_samples for k, v in counts.items()}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)

"""Blocked Gibbs sampling and single-pass inference for TC-CRP / TC-CRF.

Target distribution
-------------------
The sampler targets the joint over change flags ``C``, labels ``Z`` and the
means ``phi`` of occupied components::

    p(C, Z, phi, Y) ∝ prod_i p(C_i)
                      * beta^J0 * A(Z, C) / prod_{m < M} (alpha + beta + m)
                      * prod_k N(phi_k | mu, sigma0)
                      * prod_i N(Y_i | phi_{Z_i}, sigma1)   (sigma2 = c sigma1 for junk)
                      * [no two conflicting tracklets share an entity label]
                      * [C_i = 0 implies Z_i = Z_prev(i)]

with ``M`` the number of changepoints (``C_i = 1``) and ``J0`` how many of
them are junk. For TC-CRP ``A = alpha^K prod_k (n_zc_k - 1)!``; for TC-CRF
``A = prod_k gamma alpha^{m_k} (m_k - 1)! prod_s (n_szc_sk - 1)!`` where
``m_k`` is the number of segments in which ``k`` was drawn at a changepoint.

Its full conditional for one tracklet reproduces the predictive functions in
:mod:`tcclust.model` with counts taken over all other tracklets: junk
``beta``, a drawn component its changepoint count, a fresh one ``alpha``
(``alpha * seg_count`` / ``alpha * gamma`` for TC-CRF), normalised by
``alpha + beta + M_{-i}`` against the copy branch ``C_i = 0``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .dataset import StreamingContext
from .model import (
    JUNK,
    LOG_2PI,
    NEW,
    Component,
    ContractError,
    HyperParams,
    ModelState,
    SegmentTable,
    SequenceContext,
    TrackletRecord,
    log_gaussian,
)
from .synthesis import change_probability

MODES = ("tccrp", "tccrf", "crp-baseline")
SIGMA0_FLOOR = 1e-6


class InvariantError(RuntimeError):
    """Internal bookkeeping no longer matches the assignments."""


@dataclass
class FitConfig:
    n_sweeps: int = 200
    burn_in: int = 50
    seed: int = 0
    mode: str = "tccrp"
    online: bool = False
    online_samples_per_point: int = 1
    hyper_update_enabled: bool = True
    hyper: HyperParams | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_sweeps < 1 or not 0 <= self.burn_in < self.n_sweeps:
            raise ContractError("need n_sweeps >= 1 and 0 <= burn_in < n_sweeps")
        if self.online_samples_per_point < 1:
            raise ContractError("online_samples_per_point must be >= 1")


@dataclass
class FitResult:
    state: ModelState
    trace: np.ndarray
    sweep_seconds: np.ndarray
    hyper: HyperParams
    mode: str
    n_components: np.ndarray | None = None
    samples: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.n_components is None:
            self.n_components = np.full(len(self.trace), len(self.state.components), dtype=np.int64)

    @property
    def atoms(self) -> dict[int, np.ndarray]:
        return self.state.atoms()


# ---------------------------------------------------------------------------
# Closed-form pieces
# ---------------------------------------------------------------------------


def marginal_likelihood_new(y, hyper: HyperParams) -> float:
    """``log N(y | mu, sigma0 + sigma1)``: a fresh component with its mean integrated out."""
    return log_gaussian(y, hyper.mu, hyper.sigma0 + hyper.sigma1)


def component_posterior(n: int, sum_y: np.ndarray, hyper: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``phi_k`` given ``n`` assigned points summing to ``sum_y``."""
    var = 1.0 / (n / hyper.sigma1 + 1.0 / hyper.sigma0)
    mean = var * (sum_y / hyper.sigma1 + hyper.mu / hyper.sigma0)
    return mean, var


def resample_component(state: ModelState, k: int, hyper: HyperParams, rng: np.random.Generator) -> np.ndarray:
    comp = state.components[k]
    mean, var = component_posterior(comp.n, comp.sum_y, hyper)
    comp.phi = mean + np.sqrt(var) * rng.standard_normal(mean.shape[0])
    return comp.phi


def update_hyperparameters(state: ModelState, hyper: HyperParams) -> HyperParams:
    """Maximum-likelihood ``mu`` and ``sigma0`` from the occupied component means."""
    phis = [comp.phi for comp in state.components.values() if comp.n > 0]
    if len(phis) < 2:
        return hyper
    P = np.stack(phis)
    return hyper.replace(mu=P.mean(axis=0), sigma0=np.maximum(P.var(axis=0), SIGMA0_FLOOR))


def _log_d(m: int, hyper: HyperParams) -> float:
    """log prod_{j < m} (alpha + beta + j)."""
    ab = hyper.alpha + hyper.beta
    return math.lgamma(ab + m) - math.lgamma(ab)


def effective_hyper(hyper: HyperParams, mode: str) -> HyperParams:
    return hyper.replace(beta=0.0) if mode == "crp-baseline" else hyper


def log_prior(z: np.ndarray, c: np.ndarray, context: SequenceContext, hyper: HyperParams, mode: str) -> float:
    """Log of the (unnormalised) prior over ``(C, Z)`` targeted by the sampler."""
    hyper = effective_hyper(hyper, mode)
    n = len(z)
    lp = 0.0
    for i in range(n):
        k = int(z[i])
        if mode != "crp-baseline" and k != JUNK and any(int(z[j]) == k for j in context.conflict_sets[i]):
            return -math.inf
        if mode == "crp-baseline":
            if not c[i] or k == JUNK:
                return -math.inf
            continue
        p1 = change_probability(i, context, hyper, mode == "tccrf")
        if c[i]:
            if p1 == 0:
                return -math.inf
            lp += math.log(p1)
        else:
            p = context.prev[i]
            if p1 == 1 or p is None or int(z[p]) != k:
                return -math.inf
            lp += math.log1p(-p1)
    cps = [i for i in range(n) if c[i]]
    junk = sum(1 for i in cps if z[i] == JUNK)
    if junk:
        lp += junk * math.log(hyper.beta) if hyper.beta > 0 else -math.inf
    if mode == "tccrf":
        n_szc: dict[tuple[int, int], int] = {}
        for i in cps:
            if z[i] != JUNK:
                key = (context.segment_of[i], int(z[i]))
                n_szc[key] = n_szc.get(key, 0) + 1
        m: dict[int, int] = {}
        for (_, k), v in n_szc.items():
            lp += math.lgamma(v)
            m[k] = m.get(k, 0) + 1
        for k, mk in m.items():
            lp += math.log(hyper.gamma) + math.lgamma(mk) + mk * math.log(hyper.alpha) if hyper.gamma > 0 else -math.inf
    else:
        n_zc: dict[int, int] = {}
        for i in cps:
            if z[i] != JUNK:
                n_zc[int(z[i])] = n_zc.get(int(z[i]), 0) + 1
        for v in n_zc.values():
            lp += math.log(hyper.alpha) + math.lgamma(v)
    # every label must be rooted at a changepoint
    rooted = {(context.segment_of[i] if mode == "tccrf" else 0, int(z[i])) for i in cps}
    for i in range(n):
        if z[i] != JUNK and ((context.segment_of[i] if mode == "tccrf" else 0, int(z[i])) not in rooted):
            return -math.inf
    return lp - _log_d(len(cps), hyper)


def log_joint(state: ModelState, Y: np.ndarray, context: SequenceContext, hyper: HyperParams, mode: str) -> float:
    """Log of the full target ``p(C, Z, phi, Y)`` (up to a constant)."""
    lp = log_prior(state.z, state.c, context, hyper, mode)
    if not math.isfinite(lp):
        return lp
    for k, comp in state.components.items():
        if comp.n > 0:
            lp += log_gaussian(comp.phi, hyper.mu, hyper.sigma0)
    for i in range(len(state.z)):
        k = int(state.z[i])
        if k == JUNK:
            lp += log_gaussian(Y[i], hyper.mu, hyper.sigma2)
        else:
            lp += log_gaussian(Y[i], state.components[k].phi, hyper.sigma1)
    return lp


# ---------------------------------------------------------------------------
# Invariant checks
# ---------------------------------------------------------------------------


def check_state(state: ModelState, context: SequenceContext, mode: str, Y: np.ndarray | None = None) -> None:
    """Raise :class:`InvariantError` if counts or constraints are inconsistent."""
    z, c = state.z, state.c
    n = len(z)
    counts: dict[int, int] = {}
    n_zc: dict[int, int] = {}
    for i in range(n):
        k = int(z[i])
        if k != JUNK:
            counts[k] = counts.get(k, 0) + 1
            n_zc[k] = n_zc.get(k, 0) + int(c[i])
        if mode != "crp-baseline" and k != JUNK:
            for j in context.conflict_sets[i]:
                if int(z[j]) == k:
                    raise InvariantError(f"tracklets {i} and {j} overlap but share component {k}")
        if not c[i]:
            p = context.prev[i]
            if p is None or int(z[p]) != k:
                raise InvariantError(f"tracklet {i} has C=0 but differs from its predecessor")
    for k, comp in state.components.items():
        if comp.n != counts.get(k, 0) or comp.n_zc != n_zc.get(k, 0):
            raise InvariantError(f"component {k}: stored counts ({comp.n}, {comp.n_zc}) != recomputed")
        if Y is not None and comp.n and not np.allclose(comp.sum_y, Y[z == k].sum(axis=0), rtol=1e-9, atol=1e-6):
            raise InvariantError(f"component {k}: running sum drifted")
    missing = set(counts) - set(state.components)
    if missing:
        raise InvariantError(f"labels without a component entry: {sorted(missing)}")
    if sum(counts.values()) + int(np.sum(z == JUNK)) != n:
        raise InvariantError("assigned counts do not sum to N")
    if mode == "tccrf":
        segs = state.segments
        for i in range(n):
            k = int(z[i])
            if k != JUNK and k not in segs.active[context.segment_of[i]]:
                raise InvariantError(f"tracklet {i}: component {k} inactive in its segment")
        rec = [dict() for _ in range(context.n_segments)]
        for i in range(n):
            if c[i] and z[i] != JUNK:
                s = context.segment_of[i]
                rec[s][int(z[i])] = rec[s].get(int(z[i]), 0) + 1
        for s in range(context.n_segments):
            if {k: v for k, v in segs.n_szc[s].items() if v} != rec[s]:
                raise InvariantError(f"segment {s}: changepoint counts drifted")


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------


class GibbsSampler:
    """One Markov chain over ``(C, Z, phi)`` for a fixed dataset."""

    def __init__(self, Y: np.ndarray, context: SequenceContext, hyper: HyperParams, mode: str, rng: np.random.Generator):
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}")
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[0] == 0:
            raise ContractError("need a non-empty (N, d) feature matrix")
        if Y.shape[1] != hyper.dim:
            raise ContractError(f"feature dimension {Y.shape[1]} != hyperparameter dimension {hyper.dim}")
        if context.n != Y.shape[0]:
            raise ContractError("context and features disagree on N")
        self.Y = Y
        self.context = context
        self.mode = mode
        self.rng = rng
        self.segmented = mode == "tccrf"
        self.baseline = mode == "crp-baseline"
        n = Y.shape[0]
        self.state = ModelState(
            z=np.zeros(n, dtype=np.int64),
            c=np.ones(n, dtype=np.int8),
            segments=SegmentTable.empty(context.n_segments) if self.segmented else None,
        )
        self.seg_count: dict[int, int] = {}
        self.M = 0
        self._next_label = 1
        self.ll: dict[int, np.ndarray] = {}
        self.set_hyper(hyper)

    # -- hyperparameter-dependent caches -----------------------------------

    def set_hyper(self, hyper: HyperParams) -> None:
        self.hyper = effective_hyper(hyper, self.mode)
        h = self.hyper
        n = self.Y.shape[0]
        if self.baseline:
            self.p1 = [1.0] * n
        else:
            self.p1 = [change_probability(i, self.context, h, self.segmented) for i in range(n)]
        self.log_p1 = [math.log(p) if p > 0 else -math.inf for p in self.p1]
        self.log_p0 = [math.log1p(-p) if p < 1 else -math.inf for p in self.p1]
        self.ll_junk = [] if self.baseline else self._rows(h.mu, h.sigma2).tolist()
        self.ll_new = self._rows(h.mu, h.sigma0 + h.sigma1).tolist()
        self._post_var_new = 1.0 / (1.0 / h.sigma1 + 1.0 / h.sigma0)
        self._log_alpha = math.log(h.alpha)
        self._log_beta = math.log(h.beta) if h.beta > 0 else -math.inf
        self._log_ag = math.log(h.alpha * h.gamma) if h.gamma > 0 else -math.inf
        self._ab = h.alpha + h.beta

    def _rows(self, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
        r = self.Y - mean
        return -0.5 * (self.Y.shape[1] * LOG_2PI + np.log(var).sum() + (r * r / var).sum(axis=1))

    def refresh_likelihoods(self) -> None:
        comps = self.state.components
        self.ll = {}
        if not comps:
            return
        keys = list(comps)
        P = np.stack([comps[k].phi for k in keys])
        inv = 1.0 / self.hyper.sigma1
        const = -0.5 * (self.Y.shape[1] * LOG_2PI + np.log(self.hyper.sigma1).sum())
        quad = ((self.Y * self.Y) @ inv)[:, None] - 2.0 * (self.Y * inv) @ P.T + ((P * P) @ inv)[None, :]
        L = const - 0.5 * quad
        for j, k in enumerate(keys):
            self.ll[k] = L[:, j].tolist()

    def _ll_column(self, phi: np.ndarray) -> list[float]:
        return self._rows(phi, self.hyper.sigma1).tolist()

    # -- count bookkeeping ---------------------------------------------------

    def _remove(self, i: int) -> None:
        k = int(self.state.z[i])
        ci = int(self.state.c[i])
        if ci:
            self.M -= 1
        if k == JUNK:
            return
        comp = self.state.components[k]
        comp.n -= 1
        comp.sum_y -= self.Y[i]
        if ci:
            comp.n_zc -= 1
        if self.segmented:
            s = self.context.segment_of[i]
            segs = self.state.segments
            segs.members[s][k] -= 1
            if segs.members[s][k] == 0:
                del segs.members[s][k]
                segs.active[s].discard(k)
            if ci:
                segs.n_szc[s][k] -= 1
                if segs.n_szc[s][k] == 0:
                    del segs.n_szc[s][k]
                    self.seg_count[k] -= 1

    def _insert(self, i: int, k: int, ci: int) -> None:
        st = self.state
        st.z[i] = k
        st.c[i] = ci
        if ci:
            self.M += 1
        if k == JUNK:
            return
        comp = st.components[k]
        comp.n += 1
        comp.sum_y += self.Y[i]
        if ci:
            comp.n_zc += 1
        if self.segmented:
            s = self.context.segment_of[i]
            segs = st.segments
            segs.members[s][k] = segs.members[s].get(k, 0) + 1
            segs.active[s].add(k)
            if ci:
                v = segs.n_szc[s].get(k, 0)
                segs.n_szc[s][k] = v + 1
                if v == 0:
                    self.seg_count[k] = self.seg_count.get(k, 0) + 1

    def _new_component(self, i: int) -> int:
        h = self.hyper
        var = self._post_var_new
        mean = var * (self.Y[i] / h.sigma1 + h.mu / h.sigma0)
        phi = mean + np.sqrt(var) * self.rng.standard_normal(h.dim)
        k = self._next_label
        self._next_label += 1
        self.state.components[k] = Component(phi)
        self.ll[k] = self._ll_column(phi)
        return k

    # -- the blocked move ----------------------------------------------------

    def _change_weight(self, i: int, k: int, s: int) -> float:
        """Log prior weight of drawing existing label ``k`` at a changepoint."""
        comp = self.state.components[k]
        if self.segmented:
            v = self.state.segments.n_szc[s].get(k, 0)
            if v > 0:
                return math.log(v)
            m = self.seg_count.get(k, 0)
            return self._log_alpha + math.log(m) if m > 0 else self._log_ag
        if comp.n_zc > 0:
            return math.log(comp.n_zc)
        return self._log_alpha

    def site_table(self, i: int) -> list[tuple[int, int, float]]:
        """Candidate ``(C_i, Z_i, log weight)`` triples for tracklet ``i``.

        Must be called with ``i`` removed from the counts. ``Z_i = NEW`` marks a
        fresh component whose mean is integrated out.
        """
        st = self.state
        z = st.z
        ctx = self.context
        s = ctx.segment_of[i]
        blocked = set() if self.baseline else {int(z[j]) for j in ctx.conflict_sets[i]} - {JUNK}
        pin = None
        for j in ctx.successors[i]:
            if not st.c[j]:
                pin = int(z[j])
                break
        out: list[tuple[int, int, float]] = []
        p = ctx.prev[i]
        if p is not None and self.p1[i] < 1:
            kp = int(z[p])
            if (pin is None or pin == kp) and kp not in blocked:
                out.append((0, kp, self.log_p0[i] + self._ll(kp, i)))
        if self.p1[i] > 0:
            base = self.log_p1[i] - math.log(self._ab + self.M)
            if pin is not None:
                if pin not in blocked:
                    w = self._log_beta if pin == JUNK else self._change_weight(i, pin, s)
                    out.append((1, pin, base + w + self._ll(pin, i)))
            else:
                if not self.baseline:
                    out.append((1, JUNK, base + self._log_beta + self.ll_junk[i]))
                for k, comp in st.components.items():
                    if comp.n > 0 and k not in blocked:
                        out.append((1, k, base + self._change_weight(i, k, s) + self.ll[k][i]))
                w_new = self._log_ag if self.segmented else self._log_alpha
                out.append((1, NEW, base + w_new + self.ll_new[i]))
        return out

    def _ll(self, k: int, i: int) -> float:
        if k == JUNK:
            return self.ll_junk[i]
        return self.ll[k][i]

    def _draw(self, table: list[tuple[int, int, float]]) -> tuple[int, int]:
        top = max(t[2] for t in table)
        if top == -math.inf:
            raise InvariantError("no admissible (C, Z) for tracklet")
        ws = [math.exp(t[2] - top) for t in table]
        u = self.rng.random() * sum(ws)
        acc = 0.0
        for t, w in zip(table, ws):
            acc += w
            if u < acc:
                return t[0], t[1]
        return table[-1][0], table[-1][1]

    def resample_site(self, i: int) -> None:
        self._remove(i)
        ci, k = self._draw(self.site_table(i))
        if k == NEW:
            k = self._new_component(i)
        self._insert(i, k, ci)

    # -- sweeps --------------------------------------------------------------

    def initialize(self) -> None:
        """Sequential warm start: every tracklet opens a changepoint where allowed."""
        st = self.state
        n = len(st.z)
        ctx = self.context
        for i in range(n):
            s = ctx.segment_of[i]
            if self.p1[i] == 0:
                self._insert(i, int(st.z[ctx.prev[i]]), 0)
                continue
            blocked = set() if self.baseline else {int(st.z[j]) for j in ctx.conflict_sets[i] if j < i} - {JUNK}
            table = []
            if not self.baseline:
                table.append((1, JUNK, self._log_beta + self.ll_junk[i]))
            for k, comp in st.components.items():
                if comp.n > 0 and k not in blocked:
                    table.append((1, k, self._change_weight(i, k, s) + self.ll[k][i]))
            table.append((1, NEW, (self._log_ag if self.segmented else self._log_alpha) + self.ll_new[i]))
            _, k = self._draw(table)
            if k == NEW:
                k = self._new_component(i)
            self._insert(i, k, 1)
        self.resample_components()

    def resample_components(self) -> None:
        h = self.hyper
        for k, comp in self.state.components.items():
            if comp.n > 0:
                comp.sum_y = self.Y[self.state.z == k].sum(axis=0)
                resample_component(self.state, k, h, self.rng)
        self.refresh_likelihoods()

    def collect_garbage(self) -> None:
        dead = [k for k, comp in self.state.components.items() if comp.n == 0]
        for k in dead:
            del self.state.components[k]
            self.ll.pop(k, None)
            self.seg_count.pop(k, None)

    def sweep(self) -> None:
        for i in range(len(self.state.z)):
            self.resample_site(i)
        self.collect_garbage()
        self.resample_components()

    def log_joint(self) -> float:
        return log_joint(self.state, self.Y, self.context, self.hyper, self.mode)

    def check(self) -> None:
        check_state(self.state, self.context, self.mode, self.Y)
        if self.segmented:
            for k, m in self.seg_count.items():
                real = sum(1 for row in self.state.segments.n_szc if row.get(k, 0) > 0)
                if m != real:
                    raise InvariantError(f"component {k}: segment count {m} != {real}")
        if self.M != int(self.state.c.sum()):
            raise InvariantError("changepoint total drifted")


def blocked_resample_cz(sampler: GibbsSampler, i: int) -> ModelState:
    """Jointly resample ``(C_i, Z_i)`` in place."""
    sampler.resample_site(i)
    return sampler.state


def tccrf_resample_bz(sampler: GibbsSampler, i: int) -> ModelState:
    """TC-CRF site move: activation ``B_{S(i),k}`` and ``Z_i`` are drawn together."""
    if not sampler.segmented:
        raise ContractError("tccrf_resample_bz needs a sampler in tccrf mode")
    sampler.resample_site(i)
    return sampler.state


def _relabel(state: ModelState) -> ModelState:
    """Renumber entity components 1..K in order of first appearance."""
    order: dict[int, int] = {}
    for k in state.z.tolist():
        if k != JUNK and k not in order:
            order[k] = len(order) + 1
    z = np.array([order.get(k, JUNK) for k in state.z.tolist()], dtype=np.int64)
    comps = {order[k]: state.components[k] for k in order}
    segs = None
    if state.segments is not None:
        old = state.segments
        segs = SegmentTable(
            [{order[k]: v for k, v in row.items() if k in order} for row in old.n_szc],
            [{order[k]: v for k, v in row.items() if k in order} for row in old.members],
            [{order[k] for k in row if k in order} for row in old.active],
        )
    return ModelState(z=z, c=state.c.copy(), components=dict(sorted(comps.items())), segments=segs)


def fit(Y: np.ndarray, context: SequenceContext, config: FitConfig, keep_samples: bool = False, check_every: int = 0) -> FitResult:
    """Run ``config.n_sweeps`` Gibbs sweeps and return the final state."""
    if config.hyper is None:
        raise ContractError("FitConfig.hyper is required")
    if config.online:
        raise ContractError("use fit_online for single-pass inference")
    rng = np.random.default_rng(config.seed)
    sampler = GibbsSampler(Y, context, config.hyper, config.mode, rng)
    sampler.initialize()
    trace = np.zeros(config.n_sweeps)
    seconds = np.zeros(config.n_sweeps)
    n_comp = np.zeros(config.n_sweeps, dtype=np.int64)
    samples = []
    for t in range(config.n_sweeps):
        t0 = time.perf_counter()
        sampler.sweep()
        if config.hyper_update_enabled and t >= config.burn_in:
            sampler.set_hyper(update_hyperparameters(sampler.state, config.hyper.replace(
                mu=sampler.hyper.mu, sigma0=sampler.hyper.sigma0)))
            sampler.refresh_likelihoods()
        seconds[t] = time.perf_counter() - t0
        trace[t] = sampler.log_joint()
        n_comp[t] = len(sampler.state.components)
        if check_every and (t + 1) % check_every == 0:
            sampler.check()
        if keep_samples and t >= config.burn_in:
            samples.append((sampler.state.z.copy(), sampler.state.c.copy()))
    hyper = config.hyper.replace(mu=sampler.hyper.mu, sigma0=sampler.hyper.sigma0)
    return FitResult(_relabel(sampler.state), trace, seconds, hyper, config.mode, n_comp, samples)


# ---------------------------------------------------------------------------
# Single-pass inference
# ---------------------------------------------------------------------------


def fit_online(records: Iterable[TrackletRecord], config: FitConfig) -> FitResult:
    """One forward pass; each tracklet's ``(C, Z)`` is fixed once chosen.

    ``online_samples_per_point`` draws are taken from the blocked conditional
    and the most frequent pair is kept (ties go to the lowest component index,
    then to ``C = 0``). Component means are set to their posterior means. The
    trace holds one value: the summed log predictive weight of the choices.
    """
    if config.hyper is None:
        raise ContractError("FitConfig.hyper is required")
    mode = config.mode
    h = effective_hyper(config.hyper, mode)
    segmented = mode == "tccrf"
    baseline = mode == "crp-baseline"
    rng = np.random.default_rng(config.seed)
    stream = StreamingContext(h)
    z: list[int] = []
    c: list[int] = []
    comps: dict[int, Component] = {}
    n_szc: list[dict[int, int]] = []
    members: list[dict[int, int]] = []
    seg_count: dict[int, int] = {}
    seg_hist: list[int] = []
    M = 0
    score = 0.0
    ab = h.alpha + h.beta
    t0 = time.perf_counter()
    d = h.dim
    log_junk_norm = -0.5 * (d * LOG_2PI + np.log(h.sigma2).sum())
    log_new_norm = -0.5 * (d * LOG_2PI + np.log(h.sigma0 + h.sigma1).sum())
    log_one_norm = -0.5 * (d * LOG_2PI + np.log(h.sigma1).sum())
    for rec in records:
        y = np.asarray(rec.features, dtype=np.float64)
        if y.shape != (d,):
            raise ContractError(f"record {rec.id}: expected {d} features")
        prev, conflicts, dist, s = stream.push(rec)
        while len(n_szc) <= s:
            n_szc.append({})
            members.append({})
        if baseline or prev is None or (segmented and seg_hist[prev] != s):
            p1 = 1.0
        else:
            p1 = h.kappa1 if dist <= h.thres else h.kappa2
        blocked = set() if baseline else {z[j] for j in conflicts} - {JUNK}
        table: list[tuple[int, int, float]] = []
        if prev is not None and p1 < 1 and z[prev] not in blocked:
            kp = z[prev]
            table.append((0, kp, math.log1p(-p1) + _ll_online(y, kp, comps, h, log_junk_norm, log_one_norm)))
        if p1 > 0:
            base = math.log(p1) - math.log(ab + M)
            if not baseline and h.beta > 0:
                table.append((1, JUNK, base + math.log(h.beta) + _ll_online(y, JUNK, comps, h, log_junk_norm, log_one_norm)))
            for k, comp in comps.items():
                if k in blocked:
                    continue
                if segmented:
                    v = n_szc[s].get(k, 0)
                    w = math.log(v) if v else math.log(h.alpha * seg_count[k])
                else:
                    w = math.log(comp.n_zc)
                r = y - comp.phi
                table.append((1, k, base + w + log_one_norm - 0.5 * float((r * r / h.sigma1).sum())))
            w_new = h.alpha * (h.gamma if segmented else 1.0)
            r = y - h.mu
            lw = math.log(w_new) if w_new > 0 else -math.inf
            table.append((1, NEW, base + lw + log_new_norm - 0.5 * float((r * r / (h.sigma0 + h.sigma1)).sum())))
        top = max(t[2] for t in table)
        if top == -math.inf:
            raise InvariantError(f"record {rec.id}: no admissible assignment")
        ws = np.exp(np.array([t[2] for t in table]) - top)
        ws /= ws.sum()
        picks = rng.choice(len(table), size=config.online_samples_per_point, p=ws)
        tally = np.bincount(picks, minlength=len(table))
        ci, k, lw = table[select_mode(table, tally)]
        score += lw
        if k == NEW:
            k = len(comps) + 1
            comps[k] = Component(np.zeros(d))
        if ci:
            M += 1
        if k != JUNK:
            comp = comps[k]
            comp.n += 1
            comp.sum_y = comp.sum_y + y
            comp.n_zc += ci
            comp.phi = component_posterior(comp.n, comp.sum_y, h)[0]
            members[s][k] = members[s].get(k, 0) + 1
            if ci:
                v = n_szc[s].get(k, 0)
                n_szc[s][k] = v + 1
                if v == 0:
                    seg_count[k] = seg_count.get(k, 0) + 1
        z.append(k)
        c.append(ci)
        seg_hist.append(s)
    if not z:
        raise ContractError("empty stream")
    segs = None
    if segmented:
        segs = SegmentTable(n_szc, members, [set(row) for row in members])
    state = ModelState(np.array(z, dtype=np.int64), np.array(c, dtype=np.int8), comps, segs)
    elapsed = time.perf_counter() - t0
    return FitResult(state, np.array([score]), np.array([elapsed]), config.hyper, mode)


def select_mode(table: list[tuple[int, int, float]], tally) -> int:
    """Index of the most drawn candidate; ties go to the lowest component, then to C = 0."""
    return max(
        range(len(table)),
        key=lambda j: (tally[j], -(math.inf if table[j][1] == NEW else table[j][1]), -table[j][0]),
    )


def _ll_online(y, k, comps, h, log_junk_norm, log_one_norm) -> float:
    if k == JUNK:
        r = y - h.mu
        return log_junk_norm - 0.5 * float((r * r / h.sigma2).sum())
    r = y - comps[k].phi
    return log_one_norm - 0.5 * float((r * r / h.sigma1).sum())

"""Parameter and structure learning from partially observed trajectories.

EM alternates exact expected-statistics computation on the flattened
process with closed-form maximization (rates M/T, transition splits
M[x,x']/M[x]). Structural EM interleaves parameter updates with a full
per-variable parent-set search under a BIC score evaluated on expected
statistics; because cycles are allowed, the search decomposes over
variables and is exact for a bounded parent count.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .evidence import Evidence
from .inference import (
    DEFAULT_QUAD_TOL,
    ZeroProbabilityEvidenceError,
    expected_statistics_many,
    forward_backward,
    smoothed_marginal,
)
from .model import (
    DEFAULT_JOINT_CAP,
    Cim,
    CtbnModel,
    FamilyStatistics,
    _xlogy,
    amalgamate,
    family_tables,
)
from .statespace import StateSpace

__all__ = [
    "DEGENERATE_EPS",
    "EmConfig",
    "SemConfig",
    "FitResult",
    "random_parameters",
    "e_step",
    "m_step",
    "em",
    "score_dataset",
    "bic_score",
    "FlatFamilyProvider",
    "structure_search",
    "sem",
]

#: Statistic cells below this are treated as unvisited by the M-step.
DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class EmConfig:
    """Settings for EM runs.

    ``init`` chooses between starting from the provided model ("given") or
    from randomized parameters ("random": rates log-uniform over
    ``rate_range``, exit splits symmetric-Dirichlet), with ``restarts``
    independent starts keeping the best final likelihood.
    """

    max_iter: int = 200
    tol: float = 1e-6
    seed: int = 0
    rate_range: tuple[float, float] = (0.1, 10.0)
    freeze_initial: bool = False
    restarts: int = 3
    init: str = "random"
    quad_tol: float = DEFAULT_QUAD_TOL
    joint_cap: int = DEFAULT_JOINT_CAP
    bic_sample_size: str = "trajectories"

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("convergence threshold must be positive")
        lo, hi = self.rate_range
        if lo <= 0 or hi < lo:
            raise ValueError("rate range must be positive and ordered")
        if self.init not in ("given", "random"):
            raise ValueError("init must be 'given' or 'random'")
        if self.bic_sample_size not in ("trajectories", "total-time"):
            raise ValueError("bic_sample_size must be 'trajectories' or 'total-time'")


@dataclass(frozen=True)
class SemConfig:
    """Settings for structural EM: EM iterations between structure steps,
    the parent-count bound, and an optional per-variable candidate pool
    (default: all other variables)."""

    em: EmConfig = field(default_factory=EmConfig)
    max_parents: int = 2
    em_iters: int = 5
    candidates: Mapping[str, Sequence[str]] | None = None
    max_rounds: int = 30

    def __post_init__(self):
        if self.max_parents < 0:
            raise ValueError("max parents must be nonnegative")
        if self.em_iters < 1 or self.max_rounds < 1:
            raise ValueError("iteration counts must be positive")


@dataclass
class FitResult:
    """A fitted model with its observed-data log-likelihood trace (one entry
    per E-step, non-decreasing up to numerical slack), the final expected
    statistics and a convergence flag."""

    model: CtbnModel
    trace: tuple[float, ...]
    stats: FamilyStatistics
    converged: bool
    n_iter: int
    bic_trace: tuple[float, ...] | None = None

    @property
    def log_likelihood(self) -> float:
        return self.trace[-1]


def random_parameters(model: CtbnModel, rng: np.random.Generator, rate_range=(0.1, 10.0)) -> CtbnModel:
    """Randomize every CIM on its structural support: exit rates log-uniform
    over ``rate_range``, exit splits Dirichlet(1). Initial marginals are kept."""
    lo, hi = rate_range
    new_cims = {}
    for name in model.names:
        cim = model.cims[name]
        mats = np.zeros_like(cim.matrices)
        for u in range(cim.n_instantiations):
            for x in range(cim.dim):
                allowed = np.flatnonzero(cim.support[x])
                if allowed.size == 0:
                    continue
                q = math.exp(rng.uniform(math.log(lo), math.log(hi)))
                theta = rng.dirichlet(np.ones(allowed.size))
                mats[u, x, allowed] = q * theta
                mats[u, x, x] = -mats[u, x].sum()
        new_cims[name] = Cim(cim.parents, cim.parent_cards, mats, cim.support)
    return model.with_cims(new_cims)


_ESTEP_CHUNK = 512


def _flat_e_step(model: CtbnModel, dataset: Sequence[Evidence], quad_tol: float, cap: int):
    """One pass over the dataset: summed flat statistics, summed smoothed
    time-zero state marginals, and per-trajectory log-likelihoods."""
    q, space, p0 = amalgamate(model, cap)
    n = space.n_joint
    tbar = np.zeros(n)
    mbar = np.zeros((n, n))
    init_sums = {v.name: np.zeros(v.n_states) for v in model.variables}
    lls = []
    for lo in range(0, len(dataset), _ESTEP_CHUNK):
        chunk = dataset[lo : lo + _ESTEP_CHUNK]
        caches = []
        for off, ev in enumerate(chunk):
            cache = forward_backward(q, p0, ev)
            if cache.impossible:
                raise ZeroProbabilityEvidenceError(cache.dead_boundary, lo + off)
            caches.append(cache)
        try:
            stats = expected_statistics_many(caches, quad_tol)
        except ZeroProbabilityEvidenceError as exc:
            raise ZeroProbabilityEvidenceError(exc.boundary_index, lo + (exc.trajectory_index or 0)) from None
        g0 = np.stack([smoothed_marginal(c, 0.0) for c in caches]).sum(axis=0)
        for vi, var in enumerate(model.variables):
            init_sums[var.name] += space.variable_state_marginal(g0, vi)
        tbar += np.sum([s.dwell for s in stats], axis=0)
        mbar += np.sum([s.transitions for s in stats], axis=0)
        lls.extend(c.log_prob for c in caches)
    return space, tbar, mbar, init_sums, lls


def _aggregate_families(model: CtbnModel, space: StateSpace, tbar, mbar, init_sums, n_records) -> FamilyStatistics:
    time, trans = {}, {}
    for vi, var in enumerate(model.variables):
        parent_ids = tuple(space.index_of[p] for p in model.parents(var.name))
        t, m = family_tables(space, tbar, mbar, vi, parent_ids)
        time[var.name] = t
        trans[var.name] = m
    return FamilyStatistics(time=time, trans=trans, initial=init_sums, n_records=n_records)


def e_step(
    model: CtbnModel,
    dataset: Sequence[Evidence],
    quad_tol: float = DEFAULT_QUAD_TOL,
    joint_cap: int = DEFAULT_JOINT_CAP,
):
    """Expected per-family sufficient statistics of the dataset under the
    model's posterior over completions, plus the total observed-data
    log-likelihood."""
    if not dataset:
        space = model.space()
        stats = FamilyStatistics(
            time={v.name: np.zeros((_n_instantiations(model, v.name), v.dim)) for v in model.variables},
            trans={v.name: np.zeros((_n_instantiations(model, v.name), v.dim, v.dim)) for v in model.variables},
            initial={v.name: np.zeros(v.n_states) for v in model.variables},
            n_records=0,
        )
        return stats, 0.0
    space, tbar, mbar, init_sums, lls = _flat_e_step(model, dataset, quad_tol, joint_cap)
    stats = _aggregate_families(model, space, tbar, mbar, init_sums, len(dataset))
    return stats, math.fsum(lls)


def _n_instantiations(model: CtbnModel, name: str) -> int:
    return model.cims[name].n_instantiations


def score_dataset(
    model: CtbnModel, dataset: Sequence[Evidence], joint_cap: int = DEFAULT_JOINT_CAP
) -> list[float]:
    """Per-trajectory observed-data log-likelihoods (forward pass only)."""
    q, _, p0 = amalgamate(model, joint_cap)
    out = []
    for idx, ev in enumerate(dataset):
        cache = forward_backward(q, p0, ev)
        if cache.impossible:
            raise ZeroProbabilityEvidenceError(cache.dead_boundary, idx)
        out.append(cache.log_prob)
    return out


def _mstep_matrices(cim: Cim, t: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Maximize the expected transition likelihood: rates M[x,x'|u]/T[x|u].
    Unvisited rows (T below eps) keep their previous rates; rows with dwell
    but no exits get a uniform split of the (near-zero) exit rate."""
    new = np.zeros_like(cim.matrices)
    exits = m.sum(axis=2)
    for u in range(cim.n_instantiations):
        for x in range(cim.dim):
            allowed = cim.support[x]
            if not allowed.any():
                continue
            if t[u, x] < DEGENERATE_EPS:
                new[u, x, allowed] = cim.matrices[u, x, allowed]
            elif exits[u, x] < DEGENERATE_EPS:
                new[u, x, allowed] = (exits[u, x] / t[u, x]) / allowed.sum()
            else:
                new[u, x, allowed] = m[u, x, allowed] / t[u, x]
            new[u, x, x] = -new[u, x].sum()
    return new


def m_step(stats: FamilyStatistics, model: CtbnModel, freeze_initial: bool = False) -> CtbnModel:
    """Closed-form maximization given expected statistics. Also re-estimates
    the independent initial marginals from smoothed time-zero marginals
    unless frozen or absent."""
    new_cims = {}
    for name in model.names:
        cim = model.cims[name]
        new_cims[name] = Cim(
            cim.parents,
            cim.parent_cards,
            _mstep_matrices(cim, stats.time[name], stats.trans[name]),
            cim.support,
        )
    out = model.with_cims(new_cims)
    if not freeze_initial and stats.initial is not None and stats.n_records > 0:
        initial = {}
        for name in model.names:
            sums = stats.initial[name]
            total = sums.sum()
            initial[name] = sums / total if total > 0 else model.initial[name]
        out = out.with_initial(initial)
    return out


def _em_run(model: CtbnModel, dataset: Sequence[Evidence], config: EmConfig) -> FitResult:
    trace = []
    prev = None
    converged = False
    m_steps = 0
    while True:
        stats, ll = e_step(model, dataset, config.quad_tol, config.joint_cap)
        trace.append(ll)
        if prev is not None and (ll - prev) < config.tol * max(1.0, abs(prev)):
            converged = True
            break
        if m_steps >= config.max_iter:
            break
        model = m_step(stats, model, config.freeze_initial)
        m_steps += 1
        prev = ll
    return FitResult(model, tuple(trace), stats, converged, m_steps)


def em(model0: CtbnModel, dataset: Sequence[Evidence], config: EmConfig = EmConfig()) -> FitResult:
    """EM from the given model, or from ``config.restarts`` random
    parameterizations of its structure, keeping the best final likelihood.
    The likelihood trace is non-decreasing up to numerical slack."""
    if config.init == "given":
        return _em_run(model0, dataset, config)
    best = None
    for seq in np.random.SeedSequence(config.seed).spawn(max(1, config.restarts)):
        start = random_parameters(model0, np.random.default_rng(seq), config.rate_range)
        fit = _em_run(start, dataset, config)
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    return best


def _family_max_ll(t: np.ndarray, m: np.ndarray) -> float:
    """Expected transition log-likelihood of a family at its own maximizing
    parameters (rates M/T, splits M[x,x']/M[x])."""
    exits = m.sum(axis=-1)
    safe_t = np.where(t > 0, t, 1.0)
    ll = _xlogy(exits, np.where(t > 0, exits / safe_t, 0.0)).sum()
    ll -= exits.sum()
    safe_e = np.where(exits > 0, exits, 1.0)
    ll += _xlogy(m, m / safe_e[..., None]).sum()
    return float(ll)


def _effective_sample_size(config_mode: str, w: int, total_time: float | None) -> float:
    if config_mode == "total-time":
        if total_time is None or total_time <= 0:
            raise ValueError("total observation time required for the total-time BIC mode")
        return float(total_time)
    return float(w)


def bic_score(
    stats: FamilyStatistics,
    model: CtbnModel,
    w: int,
    sample_size: str = "trajectories",
    total_time: float | None = None,
):
    """BIC on expected statistics: for each family, the maximized expected
    transition log-likelihood minus (ln w)/2 times its free-parameter count.
    Returns (total, per-variable breakdown)."""
    if w < 1:
        raise ValueError("sample size must be at least 1")
    n_eff = _effective_sample_size(sample_size, w, total_time)
    per_family = {}
    for name in model.names:
        cim = model.cims[name]
        n_free = cim.n_instantiations * int(cim.support.sum())
        per_family[name] = _family_max_ll(stats.time[name], stats.trans[name]) - 0.5 * math.log(n_eff) * n_free
    return math.fsum(per_family.values()), per_family


@dataclass
class FlatFamilyProvider:
    """Re-aggregates one flat expected-statistics pass into the family tables
    of arbitrary candidate parent sets; this is what makes a full structure
    search per step affordable."""

    space: StateSpace
    flat_dwell: np.ndarray
    flat_trans: np.ndarray

    def family(self, name: str, parents: tuple[str, ...]):
        v = self.space.index_of[name]
        parent_ids = tuple(self.space.index_of[p] for p in parents)
        return family_tables(self.space, self.flat_dwell, self.flat_trans, v, parent_ids)


def structure_search(
    provider: FlatFamilyProvider,
    model: CtbnModel,
    max_parents: int,
    w: int,
    candidates: Mapping[str, Sequence[str]] | None = None,
    sample_size: str = "trajectories",
    total_time: float | None = None,
) -> dict:
    """Exact per-variable parent-set search maximizing the family BIC.

    Cycles are allowed, so each variable's choice is independent. Ties break
    toward the smaller set, then lexicographically.
    """
    n_eff = _effective_sample_size(sample_size, w, total_time)
    graph = {}
    for name in model.names:
        cim = model.cims[name]
        support_count = int(cim.support.sum())
        pool = sorted(candidates[name]) if candidates and name in candidates else sorted(
            n for n in model.names if n != name
        )
        best_set = None
        best_score = -math.inf
        for size in range(min(max_parents, len(pool)) + 1):
            for combo in itertools.combinations(pool, size):
                t, m = provider.family(name, combo)
                n_u = t.shape[0]
                score = _family_max_ll(t, m) - 0.5 * math.log(n_eff) * n_u * support_count
                if score > best_score:
                    best_score = score
                    best_set = combo
        graph[name] = best_set
    return graph


def _rebuild_for_graph(model: CtbnModel, graph: Mapping[str, tuple], provider: FlatFamilyProvider) -> CtbnModel:
    """Swap parent sets, parameterizing each new family by the M-step rule on
    its re-aggregated statistics (unvisited rows fall back to unit rates)."""
    new_cims = {}
    for name in model.names:
        parents = tuple(graph[name])
        old = model.cims[name]
        if parents == old.parents:
            new_cims[name] = old
            continue
        cards = tuple(model.by_name[p].n_states for p in parents)
        n_u = int(np.prod(cards)) if parents else 1
        t, m = provider.family(name, parents)
        fallback = np.zeros((n_u, old.dim, old.dim))
        for x in range(old.dim):
            allowed = old.support[x]
            if allowed.any():
                fallback[:, x, allowed] = 1.0 / allowed.sum()
                fallback[:, x, x] = -1.0
        stub = Cim(parents, cards, fallback, old.support)
        new_cims[name] = Cim(parents, cards, _mstep_matrices(stub, t, m), old.support)
    return model.with_cims(new_cims)


def sem(model0: CtbnModel, dataset: Sequence[Evidence], config: SemConfig = SemConfig()) -> FitResult:
    """Structural EM: alternate parameter updates with one full structure
    search per round. Each round runs ``em_iters`` EM iterations; the last
    iteration's flat expected statistics are re-aggregated to score every
    candidate parent set, so parameters and structure are maximized against
    the same posterior. Stops when the structure step no longer improves the
    BIC score (the recorded trace is non-decreasing) and finishes with a
    full EM pass on the selected structure."""
    em_cfg = config.em
    if em_cfg.init == "random":
        rng = np.random.default_rng(np.random.SeedSequence(em_cfg.seed))
        model = random_parameters(model0, rng, em_cfg.rate_range)
    else:
        model = model0
    w = len(dataset)
    graph = {name: model.parents(name) for name in model.names}
    bic_trace: list[float] = []
    converged = False
    total_time = math.fsum(ev.horizon for ev in dataset) if dataset else None
    n_eff = _effective_sample_size(em_cfg.bic_sample_size, w, total_time) if dataset else 1.0

    for _ in range(config.max_rounds):
        flat = None
        for _ in range(config.em_iters):
            space, tbar, mbar, init_sums, _ = _flat_e_step(model, dataset, em_cfg.quad_tol, em_cfg.joint_cap)
            stats = _aggregate_families(model, space, tbar, mbar, init_sums, w)
            flat = (space, tbar, mbar)
            model = m_step(stats, model, em_cfg.freeze_initial)
        provider = FlatFamilyProvider(*flat)
        new_graph = structure_search(
            provider, model, config.max_parents, w, config.candidates,
            em_cfg.bic_sample_size, total_time,
        )
        score = 0.0
        for name in model.names:
            t, m = provider.family(name, new_graph[name])
            n_u = t.shape[0]
            support_count = int(model.cims[name].support.sum())
            score += _family_max_ll(t, m) - 0.5 * math.log(n_eff) * n_u * support_count
        if bic_trace and score <= bic_trace[-1] + em_cfg.tol * max(1.0, abs(bic_trace[-1])):
            converged = True
            break
        bic_trace.append(score)
        if new_graph != graph:
            model = _rebuild_for_graph(model, new_graph, provider)
            graph = new_graph

    final = _em_run(model, dataset, replace(em_cfg, init="given"))
    return FitResult(
        final.model, final.trace, final.stats, converged and final.converged, final.n_iter,
        bic_trace=tuple(bic_trace),
    )

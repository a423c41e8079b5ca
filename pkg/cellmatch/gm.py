"""Graph matching with pairwise (quadratic) costs.

``solve_gm`` is a multi-start best-improvement local search seeded with the
linear assignment optimum; ``brute_force_gm`` enumerates every partial
injective map and is only meant as a reference for small instances.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .assignment import Matching, lap_from_instance
from .exceptions import ConfigError, TooLarge

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX = 8
PERTURB_FRACTION = 0.1
_IMPROVE_TOL = 1e-9


@dataclass(frozen=True)
class SolverConfig:
    restarts: int = 5
    max_sweeps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1 or self.max_sweeps < 1:
            raise ConfigError('restarts and max_sweeps must be >= 1')

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items()
                      if k in ('restarts', 'max_sweeps', 'seed')})


@dataclass(frozen=True, eq=False)
class GmSolution:
    matching: Matching
    objective: float
    iterations: int = 0
    restarts_used: int = 0
    quadratic_evaluations: int = 0


def _partners(inst, assign, i, exclude=()):
    """Matched left nodes sharing a quadratic term with ``i``."""
    ks = np.flatnonzero(assign >= 0)
    nb = inst.neighbors_of(i)
    if nb is not None:
        ks = np.intersect1d(ks, nb, assume_unique=True)
    drop = [i]
    drop.extend(exclude)
    return ks[~np.isin(ks, drop)]


def gm_objective(inst, m):
    """Sum of shifted linear costs plus quadratic costs over matched pairs
    i < j.

    Raises ForbiddenPair if ``m`` uses an assignment outside the allowed
    sets.
    """
    total = 0.0
    for i, s in m.pairs:
        total += inst.cost_of(i, s)
    if inst.quadratic is None or len(m) < 2:
        return float(total)
    assign = np.full(inst.n_left, -1, dtype=int)
    for i, s in m.pairs:
        assign[i] = s
    for i, s in m.pairs:
        ks = _partners(inst, assign, i)
        ks = ks[ks > i]
        if len(ks):
            total += float(inst.quadratic.incident(i, np.array([s]), ks,
                                                   assign[ks]).sum())
    return float(total)


def _term_mask(inst):
    """(L, L) bool: left pairs sharing a quadratic term."""
    L = inst.n_left
    if inst.neighbors is None:
        mask = np.ones((L, L), dtype=bool)
    else:
        mask = np.zeros((L, L), dtype=bool)
        for i, nb in enumerate(inst.neighbors):
            mask[i, nb] = True
    np.fill_diagonal(mask, False)
    return mask


class _LocalSearch:
    """Mutable assignment state for one restart.

    ``field[i, s]`` is the quadratic cost left node ``i`` would pay at
    right node ``s`` against every other matched node it shares a term
    with; it is rebuilt at the start of each sweep and updated per move.
    """

    def __init__(self, inst, matching):
        self.inst = inst
        self.assign = np.full(inst.n_left, -1, dtype=int)
        self.owner = np.full(inst.n_right, -1, dtype=int)
        for i, s in matching.pairs:
            self.assign[i] = s
            self.owner[s] = i
        self.linear = inst.linear_table()
        self.allowed = np.isfinite(self.linear)
        self.terms = _term_mask(inst)
        finite = self.linear[self.allowed]
        scale = float(np.abs(finite).max()) if finite.size else 1.0
        self.tol = _IMPROVE_TOL * max(1.0, scale)
        self.field = np.zeros(self.linear.shape)
        self.evaluations = 0

    def rebuild(self):
        self.field[:] = 0.0
        for k in np.flatnonzero(self.assign >= 0).tolist():
            self._add(k, self.assign[k], 1.0)

    def _add(self, k, t, sign):
        if self.inst.quadratic is None:
            return
        column = self.inst.quadratic.against(k, t)
        self.evaluations += column.size
        self.field += sign * np.where(self.terms[:, k, None], column, 0.0)

    def _pair(self, i, s, js, ts):
        if self.inst.quadratic is None:
            return np.zeros(len(js))
        self.evaluations += len(js)
        values = self.inst.quadratic.terms(i, s, js, ts)
        return np.where(self.terms[i, js], values, 0.0)

    def best_move(self, i):
        """Best (delta, move) for left node ``i``; move is ('relabel', s)
        with s = -1 for unassignment, or ('swap', j)."""
        a = int(self.assign[i])
        targets = self.inst.targets[i]
        lin, field = self.linear[i], self.field[i]
        current = lin[a] + field[a] if a >= 0 else 0.0
        best = (-current, ('relabel', -1)) if a >= 0 else (0.0, None)
        owners = self.owner[targets]
        free = targets[owners < 0]
        if len(free):
            values = lin[free] + field[free] - current
            k = int(np.argmin(values))
            if values[k] < best[0]:
                best = (float(values[k]), ('relabel', int(free[k])))
        if a < 0:
            return best
        taken = (owners >= 0) & (targets != a)
        bs, js = targets[taken], owners[taken]
        ok = self.allowed[js, a]
        bs, js = bs[ok], js[ok]
        if len(js) == 0:
            return best
        # field[i, b] and field[j, a] hold phantom terms against the
        # partner's old position; the old pair term sits in both fields
        old = (lin[a] + self.linear[js, bs] + field[a] + self.field[js, bs]
               - self._pair(i, a, js, bs))
        new = (lin[bs] + self.linear[js, a]
               + field[bs] - self._pair(i, bs, js, bs)
               + self.field[js, a] - self._pair(i, a, js, np.full(len(js), a))
               + self._pair(i, bs, js, np.full(len(js), a)))
        delta = new - old
        k = int(np.argmin(delta))
        if delta[k] < best[0]:
            best = (float(delta[k]), ('swap', int(js[k])))
        return best

    def apply(self, i, move):
        kind, arg = move
        a = int(self.assign[i])
        if kind == 'relabel':
            if a >= 0:
                self.owner[a] = -1
                self._add(i, a, -1.0)
            self.assign[i] = arg
            if arg >= 0:
                self.owner[arg] = i
                self._add(i, arg, 1.0)
        else:
            j = arg
            b = int(self.assign[j])
            self._add(i, a, -1.0)
            self._add(j, b, -1.0)
            self.assign[i], self.assign[j] = b, a
            self.owner[a], self.owner[b] = j, i
            self._add(i, b, 1.0)
            self._add(j, a, 1.0)

    def run(self, max_sweeps):
        sweeps = 0
        while sweeps < max_sweeps:
            sweeps += 1
            self.rebuild()
            improved = False
            for i in range(self.inst.n_left):
                delta, move = self.best_move(i)
                if move is not None and delta < -self.tol:
                    self.apply(i, move)
                    improved = True
            if not improved:
                break
        return sweeps

    def matching(self):
        pairs = [(i, int(s)) for i, s in enumerate(self.assign) if s >= 0]
        return Matching(tuple(pairs), self.inst.n_left, self.inst.n_right)


def _perturb(matching, rng):
    pairs = list(matching.pairs)
    if not pairs:
        return matching
    n_drop = max(1, int(round(PERTURB_FRACTION * len(pairs))))
    drop = set(rng.choice(len(pairs), size=n_drop, replace=False).tolist())
    kept = [p for k, p in enumerate(pairs) if k not in drop]
    return Matching(tuple(kept), matching.n_left, matching.n_right)


def solve_gm(inst, cfg=None):
    """Heuristic minimizer of the graph-matching objective.

    Restart 0 starts from the linear assignment optimum; restart k >= 1
    starts from it with about 10% of its pairs unassigned (seeded by
    ``[cfg.seed, k]``). The best objective wins, ties going to the lower
    restart.

    Parameters
    ----------
    inst : GmInstance
    cfg : SolverConfig, optional

    Returns
    -------
    GmSolution
    """
    cfg = cfg or SolverConfig()
    init, init_obj = lap_from_instance(inst)
    if inst.quadratic is None:
        return GmSolution(init, init_obj, 0, 0, 0)
    best = None
    sweeps = 0
    evaluations = 0
    for k in range(cfg.restarts):
        start = init
        if k > 0:
            start = _perturb(init, np.random.default_rng([cfg.seed, k]))
        search = _LocalSearch(inst, start)
        sweeps += search.run(cfg.max_sweeps)
        evaluations += search.evaluations
        matching = search.matching()
        objective = gm_objective(inst, matching)
        logger.debug('restart %d: objective %.6g, %d pairs', k, objective,
                     len(matching))
        if best is None or objective < best[1] - _IMPROVE_TOL:
            best = (matching, objective)
    return GmSolution(best[0], best[1], sweeps, cfg.restarts, evaluations)


def solve_instance(inst, cfg=None):
    """Linear assignment for linear instances, local search otherwise."""
    if inst.quadratic is None:
        matching, objective = lap_from_instance(inst)
        return GmSolution(matching, objective)
    return solve_gm(inst, cfg)


def brute_force_gm(inst):
    """Global optimum by depth-first enumeration of partial injective maps.

    Quadratic costs are non-negative, so the sum of the remaining negative
    linear minima bounds what is still reachable.
    """
    if max(inst.n_left, inst.n_right) > BRUTE_FORCE_MAX:
        raise TooLarge('brute force is limited to %d nodes per side, got %dx%d'
                       % (BRUTE_FORCE_MAX, inst.n_left, inst.n_right))
    n = inst.n_left
    quad = inst.quadratic_table()
    row_min = np.array([min(0.0, float(c.min())) if len(c) else 0.0
                        for c in inst.costs])
    tail = np.concatenate([np.cumsum(row_min[::-1])[::-1], [0.0]])
    best = {'objective': 0.0, 'assign': [-1] * n}
    assign = [-1] * n
    used = set()
    count = [0]

    def visit(i, value):
        count[0] += 1
        if i == n:
            if value < best['objective'] - 1e-12:
                best['objective'] = value
                best['assign'] = list(assign)
            return
        if value + tail[i] >= best['objective'] - 1e-12:
            return
        visit(i + 1, value)
        for s, c in zip(inst.targets[i].tolist(), inst.costs[i].tolist()):
            if s in used:
                continue
            extra = c + sum(quad[i, s, j, assign[j]]
                            for j in range(i) if assign[j] >= 0)
            assign[i] = s
            used.add(s)
            visit(i + 1, value + extra)
            used.discard(s)
            assign[i] = -1

    visit(0, 0.0)
    pairs = [(i, s) for i, s in enumerate(best['assign']) if s >= 0]
    matching = Matching(tuple(pairs), inst.n_left, inst.n_right)
    return GmSolution(matching, gm_objective(inst, matching), count[0], 0, 0)

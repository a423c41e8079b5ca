"""Multi-graph matching: pairwise fan-out, cycle consistency and
synchronization of pairwise matchings into a universe of cliques.

Nodes of the multi-graph are ``(worm index, nucleus position)``; a
MultiMatching stores one Matching per worm pair ``a < b`` with worm ``a`` on
the left.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

from .assignment import Matching
from .costs import CostParams, build_from_params
from .exceptions import InconsistentInput, MissingPair
from .gm import SolverConfig, solve_instance

logger = logging.getLogger(__name__)

EXACT_MAX_PAIRS = 600

CycleReport = namedtuple('CycleReport', ['inconsistent_triples',
                                         'total_triples_checked'])
SyncResult = namedtuple('SyncResult', ['universe', 'matching', 'retained'])
PairResult = namedtuple('PairResult', ['matching', 'objective', 'n_lin',
                                       'mask', 'pair_costs'])
AllPairsResult = namedtuple('AllPairsResult', ['matching', 'masks',
                                               'pair_costs', 'mean_n_lin'])


@dataclass(frozen=True, eq=False)
class MultiMatching:
    """Pairwise matchings between ``len(sizes)`` worms.

    ``pairwise[(a, b)]`` (a < b) maps positions of worm ``a`` to positions
    of worm ``b``; keys may cover only a subset of the worm pairs.
    """

    sizes: tuple
    pairwise: dict

    def __post_init__(self):
        object.__setattr__(self, 'sizes', tuple(int(n) for n in self.sizes))
        for (a, b), m in self.pairwise.items():
            if not a < b:
                raise ValueError('pair keys must satisfy a < b, got %r'
                                 % ((a, b),))
            if (m.n_left, m.n_right) != (self.sizes[a], self.sizes[b]):
                raise ValueError('matching %r does not fit worm sizes'
                                 % ((a, b),))

    @property
    def n_worms(self):
        return len(self.sizes)

    def get(self, a, b):
        """Matching oriented from ``a`` to ``b``, or None if absent."""
        if a < b:
            return self.pairwise.get((a, b))
        m = self.pairwise.get((b, a))
        return None if m is None else m.transposed()

    def require(self, a, b):
        m = self.get(a, b)
        if m is None:
            raise MissingPair('no matching between worms %d and %d' % (a, b))
        return m

    def total_matches(self):
        return sum(len(m) for m in self.pairwise.values())

    def edges(self):
        """Yield ``(a, b, i, s)`` for every stored match."""
        for (a, b) in sorted(self.pairwise):
            for i, s in self.pairwise[(a, b)].pairs:
                yield a, b, i, s

    def restrict(self, worm_indices):
        """Sub-multimatching on a subset of worms, re-indexed in the given
        order."""
        idx = list(worm_indices)
        pairwise = {}
        for na, nb in itertools.combinations(range(len(idx)), 2):
            m = self.get(idx[na], idx[nb])
            if m is not None:
                pairwise[(na, nb)] = m
        return MultiMatching(tuple(self.sizes[k] for k in idx), pairwise)


@dataclass(frozen=True, eq=False)
class Universe:
    """Disjoint cliques, each a map worm index -> nucleus position.

    Every nucleus of every worm belongs to exactly one clique when produced
    by ``synchronize``; ``filter`` may drop some.
    """

    sizes: tuple
    cliques: tuple

    def __post_init__(self):
        object.__setattr__(self, 'sizes', tuple(int(n) for n in self.sizes))
        cliques = tuple(dict(sorted(c.items())) for c in self.cliques)
        seen = set()
        for c in cliques:
            for w, k in c.items():
                if not (0 <= w < len(self.sizes) and 0 <= k < self.sizes[w]):
                    raise ValueError('clique member (%d, %d) out of range'
                                     % (w, k))
                if (w, k) in seen:
                    raise ValueError('cliques are not disjoint at (%d, %d)'
                                     % (w, k))
                seen.add((w, k))
        object.__setattr__(self, 'cliques', cliques)

    def __len__(self):
        return len(self.cliques)

    def clique_of(self):
        """Map ``(worm, position)`` -> clique index."""
        return {(w, k): q for q, c in enumerate(self.cliques)
                for w, k in c.items()}

    def filter(self, min_size):
        return Universe(self.sizes, tuple(c for c in self.cliques
                                          if len(c) >= min_size))

    def restrict(self, worm_indices):
        idx = list(worm_indices)
        remap = {w: n for n, w in enumerate(idx)}
        cliques = []
        for c in self.cliques:
            sub = {remap[w]: k for w, k in c.items() if w in remap}
            if sub:
                cliques.append(sub)
        return Universe(tuple(self.sizes[w] for w in idx), tuple(cliques))

    def induced_multimatching(self):
        """Pairwise matchings implied by the cliques, for every worm pair."""
        pairs = {key: [] for key in itertools.combinations(range(len(self.sizes)), 2)}
        for c in self.cliques:
            for (a, i), (b, s) in itertools.combinations(sorted(c.items()), 2):
                pairs[(a, b)].append((i, s))
        return MultiMatching(self.sizes, {
            (a, b): Matching(tuple(p), self.sizes[a], self.sizes[b])
            for (a, b), p in pairs.items()})


class UnionFind:
    """Disjoint sets over integers; the root of a set is its smallest
    member."""

    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        root = x
        while root != self.parent[root]:
            root = self.parent[root]
        while x != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return ra


def discrete_cycle_loss(mm):
    """Count broken transitive chains.

    For each worm triple a < b < c and each of its three rotations
    (a,b,c), (b,c,a), (c,a,b), every chain s -> t -> u through the first two
    matchings is checked against the direct matching of the first and last
    worm; a chain is broken unless that direct matching sends s to u.
    """
    inconsistent = 0
    total = 0
    for a, b, c in itertools.combinations(range(mm.n_worms), 3):
        for x, y, z in ((a, b, c), (b, c, a), (c, a, b)):
            xy = mm.require(x, y).forward()
            yz = mm.require(y, z).forward()
            xz = mm.require(x, z).forward()
            for s, t in xy.items():
                u = yz.get(t)
                if u is None:
                    continue
                total += 1
                if xz.get(s) != u:
                    inconsistent += 1
    return CycleReport(inconsistent, total)


def is_cycle_consistent(mm):
    """True when the connected components of the match graph are cliques
    with at most one nucleus per worm. Missing pairs count as empty."""
    offsets = np.concatenate([[0], np.cumsum(mm.sizes)])
    uf = UnionFind(int(offsets[-1]))
    for a, b, i, s in mm.edges():
        uf.union(offsets[a] + i, offsets[b] + s)
    members = {}
    for w, n in enumerate(mm.sizes):
        for k in range(n):
            members.setdefault(uf.find(offsets[w] + k), []).append((w, k))
    for group in members.values():
        worms = [w for w, _ in group]
        if len(set(worms)) != len(worms):
            return False
        for (a, i), (b, s) in itertools.combinations(group, 2):
            m = mm.get(a, b)
            if m is None or m.forward().get(i) != s:
                return False
    return True


def synchronization_loss(mm_in, mm_out):
    """Minus the number of input matches kept by a consistent output."""
    if not is_cycle_consistent(mm_out):
        raise InconsistentInput('output multimatching is not cycle consistent')
    kept = 0
    for (a, b), m in mm_in.pairwise.items():
        out = mm_out.get(a, b)
        if out is None:
            continue
        kept += len(set(m.pairs) & set(out.pairs))
    return -float(kept)


class _Nodes:
    """Global node numbering plus the mask lookup used in sparse mode."""

    def __init__(self, sizes, masks, sparse_mode):
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.worm = np.repeat(np.arange(len(sizes)), sizes)
        self.masks = masks or {}
        self.sparse = sparse_mode

    def node(self, w, k):
        return int(self.offsets[w] + k)

    def split(self, u):
        w = int(self.worm[u])
        return w, u - int(self.offsets[w])

    def allowed(self, u, v):
        if not self.sparse:
            return True
        (a, i), (b, s) = self.split(u), self.split(v)
        if a == b:
            return False
        if a > b:
            a, i, b, s = b, s, a, i
        mask = self.masks.get((a, b))
        return True if mask is None else bool(mask[i, s])


def _edge_list(mm, nodes, pair_costs):
    edges = []
    for (a, b) in sorted(mm.pairwise):
        m = mm.pairwise[(a, b)]
        costs = None if pair_costs is None else pair_costs.get((a, b))
        for k, (i, s) in enumerate(m.pairs):
            c = 0.0 if costs is None else float(costs[k])
            edges.append((nodes.node(a, i), nodes.node(b, s), c))
    return edges


def _greedy(nodes, node_ids, edges):
    """Greedy clique merging over one component.

    Clique pairs are merged in order of decreasing support (number of input
    matches joining them), then increasing mean cost, then root ids. Pairs
    that cannot merge stay blocked, since cliques only grow.
    """
    uf = UnionFind(int(nodes.offsets[-1]))
    members = {u: {int(nodes.worm[u]): u} for u in node_ids}
    links = {}
    adj = {u: set() for u in node_ids}
    for u, v, c in edges:
        key = (min(u, v), max(u, v))
        count, total = links.get(key, (0, 0.0))
        links[key] = (count + 1, total + c)
        adj[u].add(v)
        adj[v].add(u)
    heap = [(-n, tot / n, r1, r2) for (r1, r2), (n, tot) in links.items()]
    heapq.heapify(heap)
    blocked = set()
    while heap:
        neg, mean, r1, r2 = heapq.heappop(heap)
        if uf.find(r1) != r1 or uf.find(r2) != r2 or (r1, r2) in blocked:
            continue
        count, total = links.get((r1, r2), (0, 0.0))
        if count != -neg or total / count != mean:
            continue
        ma, mb = members[r1], members[r2]
        ok = not (set(ma) & set(mb))
        if ok and nodes.sparse:
            ok = all(nodes.allowed(u, v) for u in ma.values()
                     for v in mb.values())
        if not ok:
            blocked.add((r1, r2))
            continue
        root = uf.union(r1, r2)
        gone = r2 if root == r1 else r1
        members[root] = {**ma, **mb}
        del members[gone]
        del links[(r1, r2)]
        adj[root].discard(gone)
        for x in adj.pop(gone):
            if x == root:
                continue
            old = links.pop((min(gone, x), max(gone, x)))
            key = (min(root, x), max(root, x))
            count, total = links.get(key, (0, 0.0))
            links[key] = (count + old[0], total + old[1])
            was_blocked = (min(gone, x), max(gone, x)) in blocked
            adj[x].discard(gone)
            adj[x].add(root)
            adj[root].add(x)
            if was_blocked:
                blocked.add(key)
        for x in adj[root]:
            key = (min(root, x), max(root, x))
            if key in blocked:
                continue
            count, total = links[key]
            heapq.heappush(heap, (-count, total / count, key[0], key[1]))
    return list(members.values())


def _exact(nodes, node_ids, edges):
    """Maximum-retention consistent clustering of one component by MILP.

    Returns None when the solver does not report an optimum.
    """
    node_ids = sorted(node_ids)
    input_pairs = {(min(u, v), max(u, v)) for u, v, _ in edges}
    pairs = [(u, v) for u, v in itertools.combinations(node_ids, 2)
             if nodes.worm[u] != nodes.worm[v] and nodes.allowed(u, v)]
    index = {p: k for k, p in enumerate(pairs)}
    eps = 1.0 / (2.0 * (len(pairs) + 1))
    c = np.array([-1.0 if p in input_pairs else eps for p in pairs])

    rows, cols, vals = [], [], []
    n_rows = 0

    def add(terms):
        nonlocal n_rows
        for k, v in terms:
            rows.append(n_rows)
            cols.append(k)
            vals.append(v)
        n_rows += 1

    by_worm = {}
    for k, (u, v) in enumerate(pairs):
        by_worm.setdefault((u, int(nodes.worm[v])), []).append(k)
        by_worm.setdefault((v, int(nodes.worm[u])), []).append(k)
    for ks in by_worm.values():
        if len(ks) > 1:
            add([(k, 1.0) for k in ks])

    def var(u, v):
        return index.get((min(u, v), max(u, v)))

    for v in node_ids:
        for u, w in itertools.combinations(node_ids, 2):
            if v in (u, w):
                continue
            uv, vw = var(u, v), var(v, w)
            if uv is None or vw is None:
                continue
            uw = var(u, w)
            if uw is None:
                add([(uv, 1.0), (vw, 1.0)])
            else:
                add([(uv, 1.0), (vw, 1.0), (uw, -1.0)])

    n = len(pairs)
    constraints = []
    if n_rows:
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(n_rows, n))
        constraints.append(LinearConstraint(A, -np.inf, 1.0))
    res = milp(c, constraints=constraints, integrality=np.ones(n),
               bounds=Bounds(0, 1))
    if res.status != 0 or res.x is None:
        logger.warning('exact synchronization failed (%s); using greedy',
                       res.message)
        return None
    uf = UnionFind(int(nodes.offsets[-1]))
    for k, (u, v) in enumerate(pairs):
        if res.x[k] > 0.5:
            uf.union(u, v)
    groups = {}
    for u in node_ids:
        groups.setdefault(uf.find(u), {})[int(nodes.worm[u])] = u
    return list(groups.values())


def _is_feasible_clique(nodes, node_ids):
    """True when a component holds one node per worm and, in sparse mode,
    every pair of its nodes is allowed."""
    worms = nodes.worm[node_ids]
    if len(np.unique(worms)) != len(node_ids):
        return False
    return all(nodes.allowed(u, v)
               for u, v in itertools.combinations(node_ids, 2))


def synchronize(mm, mode='sparse', allowed=None, pair_costs=None,
                exact_max_pairs=EXACT_MAX_PAIRS):
    """Turn pairwise matchings into a cycle-consistent universe.

    Parameters
    ----------
    mm : MultiMatching
    mode : {'sparse', 'dense'}
        In sparse mode no output pair may be forbidden by ``allowed``.
    allowed : dict, optional
        ``(a, b) -> bool array (n_a, n_b)``; required in sparse mode. A
        missing key allows every pair of that worm pair.
    pair_costs : dict, optional
        ``(a, b) -> costs aligned with mm.pairwise[(a, b)].pairs``, used to
        order merges of equal support.
    exact_max_pairs : int
        Components whose candidate pair count does not exceed this are
        solved exactly; larger ones greedily.

    Returns
    -------
    SyncResult
        ``(universe, matching, retained)``.
    """
    if mode not in ('sparse', 'dense'):
        raise ValueError('mode must be sparse or dense, got %r' % mode)
    if mode == 'sparse' and allowed is None:
        raise ValueError('sparse synchronization needs the allowed masks')
    nodes = _Nodes(mm.sizes, allowed, mode == 'sparse')
    edges = _edge_list(mm, nodes, pair_costs)

    uf = UnionFind(int(nodes.offsets[-1]))
    for u, v, _ in edges:
        uf.union(u, v)
    components = {}
    for u in range(int(nodes.offsets[-1])):
        components.setdefault(uf.find(u), []).append(u)
    comp_edges = {}
    for e in edges:
        comp_edges.setdefault(uf.find(e[0]), []).append(e)

    groups = []
    n_exact = n_greedy = n_whole = 0
    for root in sorted(components):
        ids = components[root]
        if len(ids) == 1:
            groups.append({int(nodes.worm[ids[0]]): ids[0]})
            continue
        e = comp_edges[root]
        if _is_feasible_clique(nodes, ids):
            # every input match inside the component is kept
            groups.append({int(nodes.worm[u]): u for u in ids})
            n_whole += 1
            continue
        counts = np.bincount(nodes.worm[ids])
        n_candidates = (len(ids) * (len(ids) - 1) // 2
                        - int(np.sum(counts * (counts - 1) // 2)))
        result = None
        if n_candidates <= exact_max_pairs:
            result = _exact(nodes, ids, e)
            n_exact += 1
        if result is None:
            result = _greedy(nodes, ids, e)
            n_greedy += 1
        groups.extend(result)

    cliques = []
    for g in groups:
        clique = {}
        for w, u in g.items():
            clique[w] = nodes.split(u)[1]
        cliques.append(clique)
    cliques.sort(key=lambda c: min(nodes.node(w, k) for w, k in c.items()))
    universe = Universe(mm.sizes, tuple(cliques))
    out = universe.induced_multimatching()
    retained = int(-synchronization_loss(mm, out))
    logger.info('synchronized %d worms (%s): %d cliques, %d/%d matches kept, '
                '%d whole, %d exact and %d greedy components', mm.n_worms, mode,
                len(universe), retained, mm.total_matches(), n_whole, n_exact,
                n_greedy)
    return SyncResult(universe, out, retained)


def _pair_seed(seed, a, b):
    return int(np.random.SeedSequence([seed, a, b]).generate_state(1)[0])


def match_pair(a, b, params, solver_cfg=None, seed=0):
    """Build and solve the instance between worms ``a`` and ``b``."""
    solver_cfg = solver_cfg or SolverConfig()
    inst = build_from_params(a, b, params)
    cfg = SolverConfig(solver_cfg.restarts, solver_cfg.max_sweeps, seed)
    sol = solve_instance(inst, cfg)
    costs = np.array([inst.cost_of(i, s) + inst.c0
                      for i, s in sol.matching.pairs])
    return PairResult(sol.matching, sol.objective, inst.n_lin,
                      inst.allowed_mask(), costs)


def _solve_pair(a, b, wa, wb, params, solver_cfg, seed):
    return (a, b), match_pair(wa, wb, params, solver_cfg,
                              seed=_pair_seed(seed, a, b))


def solve_all_pairs(worms, params, solver_cfg=None, workers=1, seed=0):
    """Solve every worm pair a < b, fanned out over a joblib pool.

    Each pair gets its own solver seed derived from ``[seed, a, b]``, so the
    result does not depend on ``workers``.

    Returns
    -------
    AllPairsResult
        ``(matching, masks, pair_costs, mean_n_lin)`` where ``mean_n_lin``
        is the average number of allowed assignments per pairwise instance.
    """
    worms = list(worms)
    jobs = [delayed(_solve_pair)(a, b, worms[a], worms[b], params, solver_cfg,
                                 seed)
            for a, b in itertools.combinations(range(len(worms)), 2)]
    results = Parallel(n_jobs=workers)(jobs) if jobs else []
    pairwise, masks, costs = {}, {}, {}
    n_lin = 0
    for key, res in results:
        pairwise[key] = res.matching
        masks[key] = res.mask
        costs[key] = res.pair_costs
        n_lin += res.n_lin
    mean_n_lin = n_lin / len(results) if results else 0.0
    mm = MultiMatching(tuple(len(w) for w in worms), pairwise)
    return AllPairsResult(mm, masks, costs, mean_n_lin)


def incident_retained_counts(mm_in, mm_out):
    """Per worm, the number of its input matches kept in ``mm_out``."""
    counts = np.zeros(mm_in.n_worms, dtype=int)
    for (a, b), m in mm_in.pairwise.items():
        out = mm_out.get(a, b)
        if out is None:
            continue
        kept = len(set(m.pairs) & set(out.pairs))
        counts[a] += kept
        counts[b] += kept
    return counts


def select_reference_worm(worms, workers=1, seed=0):
    """Index of the worm with the most consistent matchings under unit
    covariances, unit weights and dense linear matching."""
    worms = list(worms)
    if len(worms) < 3:
        raise ValueError('reference selection needs at least 3 worms')
    params = CostParams.unlearned(quadratic=False)
    pairs = solve_all_pairs(worms, params, workers=workers, seed=seed)
    out = synchronize(pairs.matching, 'dense', pair_costs=pairs.pair_costs)
    counts = incident_retained_counts(pairs.matching, out.matching)
    best = int(np.argmax(counts))
    logger.info('reference worm %s (%d retained matches)',
                worms[best].worm_id, counts[best])
    return best

"""Gradient-free parameter learning.

A small Tree-structured Parzen Estimator (single and bi-objective), Pareto
utilities, and the three-stage schedule that learns the shared covariances
and the sparsity parameters from unlabeled worms.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from collections import namedtuple
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import truncnorm

from .costs import (DEFAULT_C0, CostParams, CostWeights, SharedCovariances,
                    SparsityParams)
from .exceptions import (CellmatchError, ConfigError, EmptySpace, NoFeasible,
                         StageFailed)
from .gm import SolverConfig
from .mgm import (discrete_cycle_loss, solve_all_pairs, synchronization_loss,
                  synchronize)

logger = logging.getLogger(__name__)

SIGMA_BOUNDS = (1.0, 200.0)
K_MIN_BOUNDS = (1, 30)
TAU_BOUNDS = (0.01, 10.0)
LOSS_KINDS = ('sync_sparse', 'discrete_cycle')

LearnResult = namedtuple('LearnResult', ['sigmas', 'sparsity', 'trials'])


@dataclass(frozen=True)
class Param:
    name: str
    low: float
    high: float
    log: bool = False
    integer: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise EmptySpace('%s: low must be < high, got [%r, %r]'
                             % (self.name, self.low, self.high))
        if self.log and self.low <= 0:
            raise EmptySpace('%s: log scale needs low > 0' % self.name)

    @property
    def bounds(self):
        """Bounds in the internal (possibly log) coordinate."""
        if self.log:
            return math.log(self.low), math.log(self.high)
        return float(self.low), float(self.high)

    def to_internal(self, value):
        return math.log(value) if self.log else float(value)

    def from_internal(self, u):
        value = math.exp(u) if self.log else float(u)
        value = min(max(value, self.low), self.high)
        if self.integer:
            value = int(min(max(round(value), math.ceil(self.low)),
                            math.floor(self.high)))
        return value


def _space(space):
    dims = tuple(space)
    if not dims:
        raise EmptySpace('search space has no dimensions')
    return dims


@dataclass(frozen=True)
class Trial:
    trial_id: int
    params: dict
    values: tuple
    stage: int = 0

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not all(math.isfinite(v) for v in values):
            raise ValueError('trial %d: objectives must be finite, got %s'
                             % (self.trial_id, values))
        object.__setattr__(self, 'values', values)

    def to_dict(self):
        return {'trial': self.trial_id, 'stage': self.stage,
                'params': dict(self.params), 'objectives': list(self.values)}


@dataclass(frozen=True)
class TpeConfig:
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError('gamma must lie in (0, 1]')
        if self.n_candidates < 1 or self.n_startup < 0:
            raise ConfigError('n_candidates must be >= 1, n_startup >= 0')


class _Parzen:
    """Mixture of Gaussians truncated to [low, high], one kernel per
    observation plus a broad prior kernel at the interval center."""

    def __init__(self, obs, low, high):
        obs = np.asarray(obs, dtype=float)
        width = high - low
        n = len(obs)
        prior_sigma = width
        if n > 1:
            # Scott's rule for one dimension
            sigma = 1.06 * np.std(obs, ddof=1) * n ** (-0.2)
        else:
            sigma = width
        sigma = max(sigma, width / min(100.0, 1.0 + n))
        self.mu = np.append(obs, 0.5 * (low + high))
        self.sigma = np.append(np.full(n, sigma), prior_sigma)
        self.a = (low - self.mu) / self.sigma
        self.b = (high - self.mu) / self.sigma

    def sample(self, rng, size):
        k = rng.integers(len(self.mu), size=size)
        return truncnorm.rvs(self.a[k], self.b[k], loc=self.mu[k],
                             scale=self.sigma[k], random_state=rng)

    def logpdf(self, x):
        lp = truncnorm.logpdf(np.asarray(x)[:, None], self.a, self.b,
                              loc=self.mu, scale=self.sigma)
        return logsumexp(lp, axis=1) - math.log(len(self.mu))


def _uniform(space, rng):
    out = {}
    for p in space:
        lo, hi = p.bounds
        out[p.name] = p.from_internal(rng.uniform(lo, hi))
    return out


def _checked(space, params):
    for p in space:
        v = params[p.name]
        assert p.low <= v <= p.high, (p.name, v)
    return params


def _suggest(good, bad, space, cfg, rng):
    score = np.zeros(cfg.n_candidates)
    cands = {}
    for p in space:
        lo, hi = p.bounds
        g = _Parzen([p.to_internal(t.params[p.name]) for t in good], lo, hi)
        b = _Parzen([p.to_internal(t.params[p.name]) for t in bad], lo, hi)
        x = np.clip(g.sample(rng, cfg.n_candidates), lo, hi)
        cands[p.name] = x
        score += g.logpdf(x) - b.logpdf(x)
    best = int(np.argmax(score))
    return {p.name: p.from_internal(cands[p.name][best]) for p in space}


def _rng(cfg, history):
    return np.random.default_rng([cfg.seed, len(history)])


def tpe_suggest(history, space, cfg=None):
    """Next parameter point for minimizing the first objective.

    The first ``cfg.n_startup`` points are uniform in the (log) bounds;
    afterwards the best ``ceil(gamma * n)`` trials form the good set and the
    candidate drawn from it with the largest good/bad density ratio wins.
    """
    cfg = cfg or TpeConfig()
    space = _space(space)
    history = list(history)
    rng = _rng(cfg, history)
    if not history or len(history) < cfg.n_startup:
        return _checked(space, _uniform(space, rng))
    ordered = sorted(history, key=lambda t: (t.values[0], t.trial_id))
    n_good = int(math.ceil(cfg.gamma * len(ordered)))
    return _checked(space, _suggest(ordered[:n_good], ordered[n_good:],
                                    space, cfg, rng))


def nondomination_ranks(points):
    """Rank 0 for the Pareto front, 1 for the front of the rest, ..."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    ranks = np.full(n, -1)
    if n == 0:
        return ranks
    dominated_by = (np.all(pts[None, :, :] <= pts[:, None, :], axis=2)
                    & np.any(pts[None, :, :] < pts[:, None, :], axis=2))
    rank = 0
    while np.any(ranks < 0):
        open_ = ranks < 0
        counts = np.sum(dominated_by & open_[None, :], axis=1)
        ranks[(counts == 0) & open_] = rank
        rank += 1
    return ranks


def _split_by_rank(history, cap):
    """Fill the good set rank by rank up to ``cap`` trials; a partially
    used rank is taken in lexicographic objective order, then trial id."""
    ranks = nondomination_ranks([t.values for t in history])
    order = sorted(range(len(history)),
                   key=lambda k: (ranks[k], history[k].values,
                                  history[k].trial_id))
    good = [history[k] for k in order[:cap]]
    bad = [history[k] for k in order[cap:]]
    return good, bad


def motpe_suggest(history, space, cfg=None):
    """Bi-objective variant of ``tpe_suggest`` splitting by nondomination
    rank."""
    cfg = cfg or TpeConfig()
    space = _space(space)
    history = list(history)
    rng = _rng(cfg, history)
    if not history or len(history) < cfg.n_startup:
        return _checked(space, _uniform(space, rng))
    good, bad = _split_by_rank(history, int(math.ceil(cfg.gamma * len(history))))
    return _checked(space, _suggest(good, bad, space, cfg, rng))


def pareto_front(trials):
    """Nondominated trials under minimization of both objectives.

    A sort by (f1, f2) followed by one sweep over the running minimum of
    f2; identical points are all kept.
    """
    trials = list(trials)
    order = sorted(range(len(trials)), key=lambda k: trials[k].values[:2])
    keep = []
    best_f2 = math.inf
    last = None
    for k in order:
        f1, f2 = trials[k].values[:2]
        if f2 < best_f2:
            keep.append(k)
            best_f2 = f2
            last = (f1, f2)
        elif (f1, f2) == last:
            keep.append(k)
    return [trials[k] for k in sorted(keep, key=lambda k: trials[k].trial_id)]


def stage2_select(front, cap=12000, band=0.0005):
    """Among trials with n_lin below ``cap`` and loss within ``band`` of the
    best loss, the one with the smallest n_lin (ties: lower trial id)."""
    feasible = [t for t in front if t.values[1] < cap]
    if not feasible:
        raise NoFeasible('no trial has n_lin below %g' % cap)
    best = min(t.values[0] for t in feasible)
    within = [t for t in feasible if t.values[0] <= best + band * abs(best)]
    return min(within, key=lambda t: (t.values[1], t.trial_id))


def best_so_far(trials):
    """Running best (by first objective) after each trial."""
    out = []
    best = None
    for t in trials:
        if best is None or t.values[0] < best.values[0]:
            best = t
        out.append(best)
    return out


def optimize(objective, space, n_trials, cfg=None, stage=0, callback=None,
             multi=False):
    """Run ``n_trials`` suggestions against ``objective``.

    ``objective`` maps a params dict to a float (or, with ``multi``, a pair
    of floats); ``callback`` receives every finished Trial.
    """
    cfg = cfg or TpeConfig()
    suggest = motpe_suggest if multi else tpe_suggest
    history = []
    for n in range(n_trials):
        params = suggest(history, space, cfg)
        values = objective(params)
        if not multi:
            values = (values,)
        trial = Trial(n, params, tuple(values), stage)
        history.append(trial)
        if callback is not None:
            callback(trial)
        logger.debug('stage %d trial %d: %s -> %s', stage, n, params,
                     trial.values)
    return history


@dataclass(frozen=True)
class LearnConfig:
    n_learn: int = 15
    trials_per_stage: tuple = (200, 200, 100)
    seed: int = 0
    n_lin_cap: float = 12000.0
    loss_band: float = 0.0005
    loss_kind: str = 'sync_sparse'
    c0: float = DEFAULT_C0
    workers: int = 1
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(restarts=1))
    tpe: TpeConfig = field(default_factory=TpeConfig)

    def __post_init__(self):
        if self.n_learn < 3:
            raise ConfigError('n_learn must be >= 3')
        if len(self.trials_per_stage) != 3 or min(self.trials_per_stage) < 1:
            raise ConfigError('trials_per_stage needs three positive counts')
        if self.n_lin_cap <= 0 or self.loss_band < 0:
            raise ConfigError('n_lin_cap must be > 0 and loss_band >= 0')
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError('loss_kind must be one of %s' % (LOSS_KINDS,))
        object.__setattr__(self, 'trials_per_stage',
                           tuple(int(n) for n in self.trials_per_stage))

    def to_dict(self):
        d = asdict(self)
        d['trials_per_stage'] = list(self.trials_per_stage)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if 'solver' in d:
            d['solver'] = SolverConfig.from_dict(d['solver'])
        if 'tpe' in d:
            d['tpe'] = TpeConfig(**d['tpe'])
        if 'trials_per_stage' in d:
            d['trials_per_stage'] = tuple(d['trials_per_stage'])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError('learn config: %s' % e)


def matching_loss(worms, params, loss_kind, solver_cfg=None, workers=1,
                  seed=0):
    """Self-supervised loss of all pairwise matchings among ``worms``.

    Returns
    -------
    loss : float
        Synchronization objective (sparse mode, lower is better) or the
        number of broken chains.
    mean_n_lin : float
        Average number of allowed assignments per pairwise instance.
    """
    pairs = solve_all_pairs(worms, params, solver_cfg, workers, seed)
    mean_n_lin = pairs.mean_n_lin
    if loss_kind == 'discrete_cycle':
        return float(discrete_cycle_loss(pairs.matching).inconsistent_triples), mean_n_lin
    out = synchronize(pairs.matching, 'sparse', pairs.masks, pairs.pair_costs)
    return synchronization_loss(pairs.matching, out.matching), mean_n_lin


def _seed(*keys):
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


class _TrialLog:
    """JSON-lines trial log; a no-op without a path."""

    def __init__(self, path):
        self.path = path
        if path is not None:
            open(path, 'w').close()

    def __call__(self, trial):
        if self.path is None:
            return
        with open(self.path, 'a') as f:
            f.write(json.dumps(trial.to_dict(), sort_keys=True) + '\n')


def _sigma_space(prefix):
    lo, hi = SIGMA_BOUNDS
    return [Param('%s_%s' % (prefix, axis), lo, hi, log=True)
            for axis in 'xyz']


def _triple(params, prefix):
    return tuple(params['%s_%s' % (prefix, axis)] for axis in 'xyz')


def learn_parameters(worms, cfg=None, log_path=None):
    """Learn shared covariances and sparsity parameters in three stages.

    1. TPE over the six centroid/radii variances; dense linear matching.
    2. Bi-objective TPE over (k_min, tau_cen, tau_rad) minimizing
       (loss, n_lin) with stage-1 variances frozen, then ``stage2_select``.
    3. TPE over the three offset variances; sparse quadratic matching.

    The first ``cfg.n_learn`` worms by id are used.

    Returns
    -------
    LearnResult
        ``(sigmas, sparsity, trials)``.
    """
    cfg = cfg or LearnConfig()
    worms = sorted(worms, key=lambda w: w.worm_id)[:cfg.n_learn]
    if len(worms) < 3:
        raise ConfigError('learning needs at least 3 worms, got %d' % len(worms))
    log = _TrialLog(log_path)
    unit = CostWeights()
    trials = []

    def tpe_for(stage):
        return TpeConfig(cfg.tpe.n_startup, cfg.tpe.gamma, cfg.tpe.n_candidates,
                         _seed(cfg.seed, stage))

    def loss(params, stage, counter):
        n = next(counter)
        return matching_loss(worms, params, cfg.loss_kind, cfg.solver,
                             cfg.workers, _seed(cfg.seed, stage, n))

    def run(stage, body):
        try:
            return body()
        except CellmatchError as e:
            if isinstance(e, StageFailed):
                raise
            raise StageFailed(stage, e) from e
        except (ValueError, RuntimeError, ArithmeticError) as e:
            raise StageFailed(stage, e) from e

    # stage 1
    counter1 = itertools.count()

    def stage1_params(p):
        return CostParams(SharedCovariances(_triple(p, 'sigma_cen'),
                                            _triple(p, 'sigma_rad')),
                          unit, None, cfg.c0, quadratic=False)

    space1 = _sigma_space('sigma_cen') + _sigma_space('sigma_rad')
    t1 = run(1, lambda: optimize(
        lambda p: loss(stage1_params(p), 1, counter1)[0], space1,
        cfg.trials_per_stage[0], tpe_for(1), stage=1, callback=log))
    trials.extend(t1)
    best1 = best_so_far(t1)[-1]
    sig_cen = _triple(best1.params, 'sigma_cen')
    sig_rad = _triple(best1.params, 'sigma_rad')
    logger.info('stage 1: loss %.6g, sigma_cen %s, sigma_rad %s',
                best1.values[0], sig_cen, sig_rad)

    # stage 2
    counter2 = itertools.count()
    space2 = [Param('k_min', K_MIN_BOUNDS[0], K_MIN_BOUNDS[1], integer=True),
              Param('tau_cen', TAU_BOUNDS[0], TAU_BOUNDS[1], log=True),
              Param('tau_rad', TAU_BOUNDS[0], TAU_BOUNDS[1], log=True)]
    sigmas12 = SharedCovariances(sig_cen, sig_rad)

    def stage2_params(p):
        return CostParams(sigmas12, unit,
                          SparsityParams(p['k_min'], p['tau_cen'], p['tau_rad']),
                          cfg.c0, quadratic=False)

    def stage2():
        t = optimize(lambda p: loss(stage2_params(p), 2, counter2), space2,
                     cfg.trials_per_stage[1], tpe_for(2), stage=2,
                     callback=log, multi=True)
        return t, stage2_select(pareto_front(t), cfg.n_lin_cap, cfg.loss_band)

    t2, chosen = run(2, stage2)
    trials.extend(t2)
    sparsity = SparsityParams(chosen.params['k_min'], chosen.params['tau_cen'],
                              chosen.params['tau_rad'])
    logger.info('stage 2: loss %.6g, n_lin %.1f, %s', chosen.values[0],
                chosen.values[1], sparsity)

    # stage 3
    counter3 = itertools.count()

    def stage3_params(p):
        return CostParams(SharedCovariances(sig_cen, sig_rad,
                                            _triple(p, 'sigma_off')),
                          unit, sparsity, cfg.c0, quadratic=True)

    t3 = run(3, lambda: optimize(
        lambda p: loss(stage3_params(p), 3, counter3)[0],
        _sigma_space('sigma_off'), cfg.trials_per_stage[2], tpe_for(3),
        stage=3, callback=log))
    trials.extend(t3)
    best3 = best_so_far(t3)[-1]
    sigmas = SharedCovariances(sig_cen, sig_rad, _triple(best3.params, 'sigma_off'))
    logger.info('stage 3: loss %.6g, sigma_off %s', best3.values[0],
                sigmas.sigma_off)
    return LearnResult(sigmas, sparsity, trials)

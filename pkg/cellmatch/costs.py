"""Gaussian matching costs.

Linear costs compare a source nucleus (or atlas entry) with a target
nucleus through centroid and radii Mahalanobis distances; quadratic costs
compare the offset vector between two source nuclei with the offset between
their two targets. Offsets are always taken as ``x_i - x_j``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import (ConfigError, ForbiddenPair, NonPositiveVariance,
                         SamePair, ZeroWeights)

logger = logging.getLogger(__name__)

DEFAULT_C0 = 10000.0
MGM_C0 = 40.0

_SQRT3 = math.sqrt(3.0)


def _positive3(name, value):
    arr = np.asarray(value, dtype=float).reshape(3)
    if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
        raise NonPositiveVariance('%s must be finite and > 0, got %s'
                                  % (name, arr.tolist()))
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class SharedCovariances:
    """Diagonal covariances shared by all nuclei (variance units)."""

    sigma_cen: tuple = (1.0, 1.0, 1.0)
    sigma_rad: tuple = (1.0, 1.0, 1.0)
    sigma_off: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ('sigma_cen', 'sigma_rad', 'sigma_off'):
            object.__setattr__(self, name, _positive3(name, getattr(self, name)))

    def scaled(self, gamma):
        return SharedCovariances(tuple(gamma * v for v in self.sigma_cen),
                                 tuple(gamma * v for v in self.sigma_rad),
                                 tuple(gamma * v for v in self.sigma_off))


@dataclass(frozen=True)
class CostWeights:
    lambda_cen: float = 1.0
    lambda_rad: float = 1.0
    lambda_off: float = 1.0

    def __post_init__(self):
        values = self.as_array()
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError('weights must be finite and >= 0, got %s'
                             % values.tolist())
        if not np.any(values > 0):
            raise ZeroWeights('all weights are zero')
        for name, v in zip(('lambda_cen', 'lambda_rad', 'lambda_off'), values):
            object.__setattr__(self, name, float(v))

    def as_array(self):
        return np.array([self.lambda_cen, self.lambda_rad, self.lambda_off],
                        dtype=float)

    @classmethod
    def from_sequence(cls, values):
        values = list(values)
        if len(values) != 3:
            raise ConfigError('expected three weights (cen, rad, off), got %d'
                              % len(values))
        return cls(*values)


@dataclass(frozen=True)
class SparsityParams:
    k_min: int
    tau_cen: float
    tau_rad: float

    def __post_init__(self):
        if int(self.k_min) < 1:
            raise ValueError('k_min must be >= 1, got %r' % self.k_min)
        if not (self.tau_cen > 0 and self.tau_rad > 0):
            raise ValueError('thresholds must be > 0')
        object.__setattr__(self, 'k_min', int(self.k_min))
        object.__setattr__(self, 'tau_cen', float(self.tau_cen))
        object.__setattr__(self, 'tau_rad', float(self.tau_rad))


ATLAS_SPARSITY = SparsityParams(k_min=6, tau_cen=8.0, tau_rad=12.0)


def _json_float(x):
    return None if x is None or math.isinf(x) else float(x)


def _from_json_float(x):
    return math.inf if x is None else float(x)


@dataclass(frozen=True)
class CostParams:
    """Everything needed to build a pairwise instance.

    ``sparsity=None`` means a dense instance. ``quadratic_neighbors=k``
    restricts quadratic terms to left nodes within each other's k nearest
    neighbours.
    """

    sigmas: SharedCovariances = field(default_factory=SharedCovariances)
    weights: CostWeights = field(default_factory=CostWeights)
    sparsity: SparsityParams | None = None
    c0: float = DEFAULT_C0
    quadratic: bool = True
    quadratic_neighbors: int | None = None

    @classmethod
    def unlearned(cls, **kwargs):
        return cls(SharedCovariances(), CostWeights(), **kwargs)

    def replace(self, **changes):
        d = dict(sigmas=self.sigmas, weights=self.weights,
                 sparsity=self.sparsity, c0=self.c0, quadratic=self.quadratic,
                 quadratic_neighbors=self.quadratic_neighbors)
        d.update(changes)
        return CostParams(**d)

    def to_dict(self):
        sp = self.sparsity
        return {
            'sigma_cen': list(self.sigmas.sigma_cen),
            'sigma_rad': list(self.sigmas.sigma_rad),
            'sigma_off': list(self.sigmas.sigma_off),
            'lambda': self.weights.as_array().tolist(),
            'k_min': None if sp is None else sp.k_min,
            'tau_cen': None if sp is None else _json_float(sp.tau_cen),
            'tau_rad': None if sp is None else _json_float(sp.tau_rad),
            'c0': float(self.c0),
            'quadratic': bool(self.quadratic),
            'dense': sp is None,
            'quadratic_neighbors': self.quadratic_neighbors,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            sigmas = SharedCovariances(d['sigma_cen'], d['sigma_rad'],
                                       d.get('sigma_off', (1.0, 1.0, 1.0)))
            weights = CostWeights.from_sequence(d.get('lambda', (1.0, 1.0, 1.0)))
            dense = d.get('dense', d.get('k_min') is None)
            sparsity = None
            if not dense:
                sparsity = SparsityParams(d['k_min'],
                                          _from_json_float(d.get('tau_cen')),
                                          _from_json_float(d.get('tau_rad')))
            return cls(sigmas, weights, sparsity,
                       float(d.get('c0', DEFAULT_C0)),
                       bool(d.get('quadratic', True)),
                       d.get('quadratic_neighbors'))
        except KeyError as e:
            raise ConfigError('cost parameters: missing key %s' % e)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError('cost parameters: %s' % e)


def mahalanobis(diff, sigma_diag):
    """Squared Mahalanobis distance under a diagonal covariance.

    Vectorized over leading dimensions of ``diff`` (last axis of length 3).
    """
    sigma = np.asarray(sigma_diag, dtype=float)
    if np.any(sigma <= 0):
        raise NonPositiveVariance('variances must be > 0, got %s'
                                  % sigma.tolist())
    diff = np.asarray(diff, dtype=float)
    out = np.sum(diff * diff / sigma, axis=-1)
    return float(out) if out.ndim == 0 else out


def mahalanobis_full(diff, precision):
    """Squared Mahalanobis distance ``diff^T P diff``; broadcasts over
    leading dimensions."""
    diff = np.asarray(diff, dtype=float)
    out = np.einsum('...k,...kl,...l->...', diff, precision, diff)
    return float(out) if out.ndim == 0 else out


def pairwise_mahalanobis(left, right, cov):
    """Distance table between every left and right point.

    Parameters
    ----------
    left : ndarray, shape (L, 3)
    right : ndarray, shape (S, 3)
    cov : array_like, shape (3,) or (L, 3, 3)
        Shared diagonal covariance, or one full covariance per left point.

    Returns
    -------
    ndarray, shape (L, S)
    """
    left = np.asarray(left, dtype=float).reshape(-1, 3)
    right = np.asarray(right, dtype=float).reshape(-1, 3)
    diff = left[:, None, :] - right[None, :, :]
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 1:
        return mahalanobis(diff, cov).reshape(len(left), len(right))
    precision = np.linalg.inv(cov)
    return np.einsum('lsk,lkm,lsm->ls', diff, precision, diff)


def _point(x):
    """(centroid, radii) of a Nucleus or an atlas entry."""
    if hasattr(x, 'mean_cen'):
        return x.mean_cen, x.mean_rad
    return x.centroid, x.radii


def linear_cost(i, s, weights, sigmas):
    """Weighted centroid plus radii distance between source ``i`` and
    target ``s``.

    ``sigmas`` is either a SharedCovariances or an atlas entry carrying its
    own ``cov_cen``/``cov_rad``.
    """
    ci, ri = _point(i)
    cs, rs = _point(s)
    if hasattr(sigmas, 'cov_cen'):
        d_cen = mahalanobis_full(ci - cs, np.linalg.inv(sigmas.cov_cen))
        d_rad = mahalanobis_full(ri - rs, np.linalg.inv(sigmas.cov_rad))
    else:
        d_cen = mahalanobis(ci - cs, sigmas.sigma_cen)
        d_rad = mahalanobis(ri - rs, sigmas.sigma_rad)
    return weights.lambda_cen * d_cen + weights.lambda_rad * d_rad


def quadratic_cost(i, j, s, t, weights, sigmas):
    """Offset-consistency cost of assigning i->s and j->t together."""
    if i.id == j.id or s.id == t.id:
        raise SamePair('quadratic cost needs two distinct nuclei on each side')
    diff = (i.centroid - j.centroid) - (s.centroid - t.centroid)
    return weights.lambda_off * mahalanobis(diff, sigmas.sigma_off)


def normalize_weights(weights):
    """Rescale to Euclidean norm sqrt(3), the length of (1, 1, 1)."""
    values = weights.as_array()
    norm = float(np.linalg.norm(values))
    if norm == 0:
        raise ZeroWeights('cannot normalize all-zero weights')
    return CostWeights(*(values * (_SQRT3 / norm)))


def weights_from_covariances(sigmas):
    """lambda := norm of each covariance diagonal, then normalized."""
    return normalize_weights(CostWeights(
        float(np.linalg.norm(sigmas.sigma_cen)),
        float(np.linalg.norm(sigmas.sigma_rad)),
        float(np.linalg.norm(sigmas.sigma_off))))


class SharedOffsetModel:
    """Quadratic costs between two worms under the shared offset covariance."""

    def __init__(self, left_cen, right_cen, sigma_off, lambda_off):
        self.left = np.asarray(left_cen, dtype=float)
        self.right = np.asarray(right_cen, dtype=float)
        self.sigma = np.asarray(sigma_off, dtype=float)
        self.lam = float(lambda_off)
        if np.any(self.sigma <= 0):
            raise NonPositiveVariance('sigma_off must be > 0')

    def incident(self, i, s, js, ts):
        """Costs c_{i s_a, j_b t_b} as an array of shape (len(s), len(js))."""
        left_off = self.left[i] - self.left[js]
        right_off = self.right[s][:, None, :] - self.right[ts][None, :, :]
        diff = left_off[None, :, :] - right_off
        return self.lam * np.sum(diff * diff / self.sigma, axis=-1)

    def against(self, k, t):
        """Costs c_{i s, k t} for every left i and right s, shape (L, S)."""
        diff = ((self.left - self.left[k])[:, None, :]
                - (self.right - self.right[t])[None, :, :])
        return self.lam * np.sum(diff * diff / self.sigma, axis=-1)

    def terms(self, i, s, js, ts):
        """Element-wise costs c_{i s_m, j_m t_m}; ``s`` may be a scalar."""
        diff = (self.left[i] - self.left[js]) - (self.right[s] - self.right[ts])
        return self.lam * np.sum(diff * diff / self.sigma, axis=-1)


class AtlasOffsetModel:
    """Quadratic costs from per-label-pair offset Gaussians of an atlas."""

    def __init__(self, mean_off, prec_off, right_cen, lambda_off):
        self.mean_off = mean_off
        self.prec_off = prec_off
        self.right = np.asarray(right_cen, dtype=float)
        self.lam = float(lambda_off)

    def incident(self, i, s, js, ts):
        right_off = self.right[s][:, None, :] - self.right[ts][None, :, :]
        diff = self.mean_off[i, js][None, :, :] - right_off
        return self.lam * np.einsum('sjk,jkl,sjl->sj', diff,
                                    self.prec_off[i, js], diff)

    def against(self, k, t):
        diff = (self.mean_off[:, k][:, None, :]
                - (self.right - self.right[t])[None, :, :])
        return self.lam * np.einsum('isk,ikl,isl->is', diff,
                                    self.prec_off[:, k], diff)

    def terms(self, i, s, js, ts):
        diff = self.mean_off[i, js] - (self.right[s] - self.right[ts])
        return self.lam * np.einsum('mk,mkl,ml->m', diff,
                                    self.prec_off[i, js], diff)


@dataclass(frozen=True, eq=False)
class GmInstance:
    """A sparse graph-matching problem between left and right node sets.

    ``targets[i]`` lists the allowed right nodes of left node ``i`` in
    ascending order and ``costs[i]`` the shifted linear costs
    ``C_is = c_is - c0`` aligned with them. ``neighbors[i]`` lists the left
    nodes sharing a quadratic term with ``i`` (None: all of them).
    """

    n_left: int
    n_right: int
    targets: tuple
    costs: tuple
    c0: float
    quadratic: object = None
    neighbors: tuple | None = None

    def __post_init__(self):
        if len(self.targets) != self.n_left or len(self.costs) != self.n_left:
            raise ValueError('instance rows do not match n_left')
        lookup = []
        for t, c in zip(self.targets, self.costs):
            if len(t) != len(c):
                raise ValueError('targets and costs differ in length')
            lookup.append(dict(zip(t.tolist(), c.tolist())))
        object.__setattr__(self, '_lookup', lookup)

    @property
    def n_lin(self):
        return int(sum(len(t) for t in self.targets))

    @property
    def has_quadratic(self):
        return self.quadratic is not None

    def is_allowed(self, i, s):
        return s in self._lookup[i]

    def cost_of(self, i, s):
        try:
            return self._lookup[i][s]
        except KeyError:
            raise ForbiddenPair('assignment (%d, %d) is not allowed' % (i, s))

    def neighbors_of(self, i):
        if self.neighbors is None:
            return None
        return self.neighbors[i]

    def has_term(self, i, j):
        if self.quadratic is None or i == j:
            return False
        return self.neighbors is None or j in self._neighbor_sets[i]

    def quadratic_cost(self, i, s, j, t):
        if not self.has_term(i, j):
            return 0.0
        if s == t:
            raise SamePair('targets must differ')
        return float(self.quadratic.incident(i, np.array([s]), np.array([j]),
                                             np.array([t]))[0, 0])

    @property
    def _neighbor_sets(self):
        sets = self.__dict__.get('_nsets')
        if sets is None:
            sets = [set(n.tolist()) for n in self.neighbors]
            object.__setattr__(self, '_nsets', sets)
        return sets

    def allowed_mask(self):
        mask = np.zeros((self.n_left, self.n_right), dtype=bool)
        for i, t in enumerate(self.targets):
            mask[i, t] = True
        return mask

    def linear_table(self):
        """Dense C table with +inf for forbidden assignments."""
        table = np.full((self.n_left, self.n_right), np.inf)
        for i, (t, c) in enumerate(zip(self.targets, self.costs)):
            table[i, t] = c
        return table

    def quadratic_table(self):
        """Materialized c_{is,jt} of shape (L, S, L, S); zero where no term
        exists. Meant for small instances only."""
        L, S = self.n_left, self.n_right
        table = np.zeros((L, S, L, S))
        if self.quadratic is None:
            return table
        every = np.arange(S)
        for i in range(L):
            for j in range(L):
                if self.has_term(i, j):
                    block = self.quadratic.incident(i, every,
                                                    np.full(S, j), every)
                    table[i, :, j, :] = block
                    table[i, every, j, every] = 0.0
        return table


def sparsity_mask(linear, d_cen, d_rad, sparsity):
    """Allowed assignments: both distances under threshold, plus the
    ``k_min`` cheapest targets of every left node."""
    linear = np.asarray(linear, dtype=float)
    if sparsity is None:
        return np.ones(linear.shape, dtype=bool)
    mask = (d_cen <= sparsity.tau_cen) & (d_rad <= sparsity.tau_rad)
    k = min(sparsity.k_min, linear.shape[1])
    if k > 0:
        best = np.argsort(linear, axis=1, kind='stable')[:, :k]
        np.put_along_axis(mask, best, True, axis=1)
    return mask


def knn_neighbors(points, k):
    """Symmetrized k-nearest-neighbour lists over ``points``."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n <= 1:
        return tuple(np.zeros(0, dtype=int) for _ in range(n))
    kk = min(k + 1, n)
    _, idx = cKDTree(points).query(points, k=kk)
    idx = np.asarray(idx).reshape(n, kk)
    sets = [set() for _ in range(n)]
    for i in range(n):
        for j in idx[i].tolist():
            if j != i:
                sets[i].add(j)
                sets[j].add(i)
    return tuple(np.array(sorted(s), dtype=int) for s in sets)


def make_instance(linear, mask, c0, quadratic=None, neighbors=None):
    """GmInstance from a dense linear cost table and an allowed mask."""
    linear = np.asarray(linear, dtype=float)
    n_left, n_right = linear.shape
    targets, costs = [], []
    for i in range(n_left):
        t = np.flatnonzero(mask[i])
        targets.append(t)
        costs.append(linear[i, t] - c0)
    return GmInstance(n_left, n_right, tuple(targets), tuple(costs), float(c0),
                      quadratic, neighbors)


def linear_distances(left_cen, left_rad, right_cen, right_rad, sigmas):
    """(d_cen, d_rad) tables under the shared covariances."""
    d_cen = pairwise_mahalanobis(left_cen, right_cen, sigmas.sigma_cen)
    d_rad = pairwise_mahalanobis(left_rad, right_rad, sigmas.sigma_rad)
    return d_cen, d_rad


def build_pairwise_instance(a, b, weights, sigmas, sparsity, c0,
                            quadratic=True, quadratic_neighbors=None):
    """Matching instance between worm ``a`` (left) and worm ``b`` (right).

    Parameters
    ----------
    a, b : Worm
        Pre-aligned worms.
    weights : CostWeights
    sigmas : SharedCovariances
    sparsity : SparsityParams or None
        None builds the dense instance.
    c0 : float
        Unassignment constant subtracted from every stored linear cost.
    quadratic : bool
        Attach the lazy offset model.
    quadratic_neighbors : int or None
        Restrict quadratic terms to symmetrized k-nearest left neighbours.

    Returns
    -------
    GmInstance
    """
    d_cen, d_rad = linear_distances(a.centroids, a.radii, b.centroids,
                                    b.radii, sigmas)
    linear = weights.lambda_cen * d_cen + weights.lambda_rad * d_rad
    mask = sparsity_mask(linear, d_cen, d_rad, sparsity)
    model = None
    neighbors = None
    if quadratic and weights.lambda_off > 0:
        model = SharedOffsetModel(a.centroids, b.centroids, sigmas.sigma_off,
                                  weights.lambda_off)
        if quadratic_neighbors is not None:
            neighbors = knn_neighbors(a.centroids, quadratic_neighbors)
    inst = make_instance(linear, mask, c0, model, neighbors)
    logger.debug('instance %s-%s: %dx%d, %d allowed', a.worm_id, b.worm_id,
                 inst.n_left, inst.n_right, inst.n_lin)
    return inst


def build_from_params(a, b, params):
    """``build_pairwise_instance`` with everything taken from CostParams."""
    return build_pairwise_instance(a, b, params.weights, params.sigmas,
                                   params.sparsity, params.c0,
                                   params.quadratic, params.quadratic_neighbors)

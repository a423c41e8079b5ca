"""Point-set primitives: nuclei and worms, ellipsoid fits, rigid
pre-alignment into a canonical frame and least-squares affine re-alignment.
"""
from __future__ import annotations

import logging
import math
from collections import namedtuple
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from .exceptions import DegenerateCloud, NoMatches

logger = logging.getLogger(__name__)

# radii are reported as two standard deviations of the point cloud per axis
RADII_SCALE = 2.0
# number of coarse candidates for the rotation about the head-tail axis
N_ROLL_CANDIDATES = 36

_RANK_TOL = 1e-10
_ORTHO_TOL = 1e-9
_DET_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Nucleus:
    """A segmented nucleus: centroid plus descending principal radii."""

    id: int
    centroid: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        centroid = np.asarray(self.centroid, dtype=float).reshape(3)
        radii = np.asarray(self.radii, dtype=float).reshape(3)
        if not np.all(np.isfinite(centroid)):
            raise ValueError('nucleus %r: centroid must be finite' % self.id)
        if not (radii[0] >= radii[1] >= radii[2] > 0):
            raise ValueError(
                'nucleus %r: radii must be positive and descending, got %s'
                % (self.id, radii.tolist()))
        object.__setattr__(self, 'id', int(self.id))
        object.__setattr__(self, 'centroid', centroid)
        object.__setattr__(self, 'radii', radii)


@dataclass(frozen=True, eq=False)
class Worm:
    """An instance: an ordered list of nuclei with optional ground truth.

    ``gt_labels`` maps nucleus id to label id and is only used for
    evaluation. Matchings refer to nuclei by their *position* in
    ``nuclei``; ids are kept for persistence.
    """

    worm_id: str
    nuclei: tuple
    gt_labels: dict | None = None

    def __post_init__(self):
        nuclei = tuple(self.nuclei)
        object.__setattr__(self, 'nuclei', nuclei)
        ids = [n.id for n in nuclei]
        if len(set(ids)) != len(ids):
            raise ValueError('worm %s: nucleus ids are not unique' % self.worm_id)
        if self.gt_labels is not None:
            labels = {int(k): int(v) for k, v in self.gt_labels.items()
                      if v is not None}
            unknown = set(labels) - set(ids)
            if unknown:
                raise ValueError('worm %s: labels given for unknown nuclei %s'
                                 % (self.worm_id, sorted(unknown)))
            if len(set(labels.values())) != len(labels):
                raise ValueError('worm %s: ground-truth labels are not injective'
                                 % self.worm_id)
            object.__setattr__(self, 'gt_labels', labels)

    @classmethod
    def from_arrays(cls, worm_id, centroids, radii, ids=None, labels=None):
        """Build a worm from (n, 3) arrays.

        ``labels`` is aligned with the rows; ``None`` or negative entries
        mark unlabeled nuclei. Passing ``labels=None`` gives an unlabeled
        worm.
        """
        centroids = np.asarray(centroids, dtype=float).reshape(-1, 3)
        radii = np.asarray(radii, dtype=float).reshape(-1, 3)
        if ids is None:
            ids = range(len(centroids))
        ids = [int(i) for i in ids]
        nuclei = tuple(Nucleus(i, c, r) for i, c, r in zip(ids, centroids, radii))
        gt = None
        if labels is not None:
            gt = {i: int(l) for i, l in zip(ids, labels)
                  if l is not None and int(l) >= 0}
        return cls(str(worm_id), nuclei, gt)

    def __len__(self):
        return len(self.nuclei)

    @cached_property
    def ids(self):
        return np.array([n.id for n in self.nuclei], dtype=int)

    @cached_property
    def centroids(self):
        if not self.nuclei:
            return np.zeros((0, 3))
        return np.vstack([n.centroid for n in self.nuclei])

    @cached_property
    def radii(self):
        if not self.nuclei:
            return np.zeros((0, 3))
        return np.vstack([n.radii for n in self.nuclei])

    @cached_property
    def position_of(self):
        return {n.id: k for k, n in enumerate(self.nuclei)}

    @property
    def is_labeled(self):
        return self.gt_labels is not None

    @cached_property
    def label_array(self):
        """Ground-truth label per position, -1 where unlabeled."""
        gt = self.gt_labels or {}
        return np.array([gt.get(n.id, -1) for n in self.nuclei], dtype=int)

    def with_centroids(self, centroids):
        centroids = np.asarray(centroids, dtype=float)
        nuclei = tuple(Nucleus(n.id, c, n.radii)
                       for n, c in zip(self.nuclei, centroids))
        return Worm(self.worm_id, nuclei, self.gt_labels)

    def transformed(self, tf):
        """Apply a rigid or affine transform to the centroids; radii are
        left untouched."""
        if not self.nuclei:
            return self
        return self.with_centroids(tf.apply(self.centroids))


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """x -> linear @ x + translation."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        linear = np.asarray(self.linear, dtype=float).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        if abs(np.linalg.det(linear)) <= _DET_TOL:
            raise DegenerateCloud('affine transform is not invertible')
        object.__setattr__(self, 'linear', linear)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.linear.T + self.translation

    def compose(self, first):
        """Return ``self o first`` (``first`` is applied before ``self``)."""
        return AffineTransform(self.linear @ first.linear,
                               self.linear @ first.translation + self.translation)

    def inverse(self):
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation)

    def to_dict(self):
        return {'linear': self.linear.ravel().tolist(),
                'translation': self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d['linear'], dtype=float).reshape(3, 3),
                   d['translation'])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A proper rotation followed by a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise ValueError('rotation is not orthonormal')
        if np.linalg.det(rotation) < 0:
            raise ValueError('rotation is a reflection')
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def as_affine(self):
        return AffineTransform(self.rotation, self.translation)

    def to_dict(self):
        return {'rotation': self.rotation.ravel().tolist(),
                'translation': self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d['rotation'], dtype=float).reshape(3, 3),
                   d['translation'])


RealignResult = namedtuple('RealignResult', ['worm', 'transform', 'residuals'])


def fit_ellipsoid(points):
    """Fit an ellipsoid to a point cloud by principal component analysis.

    Parameters
    ----------
    points : array_like, shape (n, 3)
        At least four non-coplanar points.

    Returns
    -------
    centroid : ndarray, shape (3,)
        Sample mean.
    radii : ndarray, shape (3,)
        ``RADII_SCALE`` times the square root of the covariance eigenvalues,
        descending.
    axes : ndarray, shape (3, 3)
        Orthonormal, right-handed; column k is the axis of ``radii[k]``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise DegenerateCloud('need at least 4 points in 3D, got shape %s'
                              % (pts.shape,))
    centroid = pts.mean(axis=0)
    cov = np.cov(pts - centroid, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind='stable')
    evals = evals[order]
    axes = evecs[:, order]
    if evals[0] <= 0 or evals[2] <= _RANK_TOL * evals[0]:
        raise DegenerateCloud('covariance has rank < 3')
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    radii = RADII_SCALE * np.sqrt(evals)
    return centroid, radii, axes


def _rotation_x(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[1.0, 0.0, 0.0],
                     [0.0, c, -s],
                     [0.0, s, c]])


def _mirror_score(points, bandwidth):
    """Kernel correlation between a cloud and its reflection in y = 0."""
    tree = cKDTree(points)
    mirrored = points * np.array([1.0, -1.0, 1.0])
    dist = tree.sparse_distance_matrix(cKDTree(mirrored), 5.0 * bandwidth,
                                       output_type='ndarray')
    if len(dist) == 0:
        return 0.0
    return float(np.exp(-0.5 * (dist['v'] / bandwidth) ** 2).sum())


def _symmetry_roll(points):
    """Roll angle about x in [0, pi) maximizing left-right mirror symmetry.

    The score is pi-periodic, so only half a turn is refined.
    """
    tree = cKDTree(points)
    nn, _ = tree.query(points, k=2)
    bandwidth = 0.5 * float(np.median(nn[:, 1]))
    if bandwidth <= 0:
        bandwidth = 1.0

    def neg_score(theta):
        return -_mirror_score(points @ _rotation_x(theta).T, bandwidth)

    step = 2.0 * math.pi / N_ROLL_CANDIDATES
    grid = [k * step for k in range(N_ROLL_CANDIDATES)]
    scores = [neg_score(t) for t in grid]
    best = grid[int(np.argmin(scores))]
    res = minimize_scalar(neg_score, bounds=(best - step, best + step),
                          method='bounded', options={'xatol': 1e-10})
    theta = float(res.x) if res.fun <= min(scores) else best
    return math.fmod(theta, math.pi) % math.pi


def prealign(worm):
    """Rigidly move a worm into the canonical frame.

    The barycenter goes to the origin and the longest principal axis of the
    centroid cloud to x. Signs are resolved so that the third central moment
    along x is non-negative (head-tail); the roll about x is the one
    maximizing left-right mirror symmetry, with the remaining half-turn
    ambiguity provisionally resolved by a non-negative third moment along z.
    The z moment is weak on near-symmetric bodies, so ``realign`` settles
    the half-turn against a reference (see ``half_turn``).

    Returns
    -------
    aligned : Worm
    tf : RigidTransform
        Maps input centroids to ``aligned`` centroids.
    """
    points = worm.centroids
    barycenter, _, axes = fit_ellipsoid(points)
    local = (points - barycenter) @ axes
    if np.sum(local[:, 0] ** 3) < 0:
        flip = np.diag([-1.0, -1.0, 1.0])
        axes = axes @ flip
        local = local @ flip

    theta = _symmetry_roll(local)
    rolled = local @ _rotation_x(theta).T
    if np.sum(rolled[:, 2] ** 3) < 0:
        theta += math.pi
    rotation = _rotation_x(theta) @ axes.T
    # re-orthonormalize against accumulated rounding
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    tf = RigidTransform(rotation, -rotation @ barycenter)
    logger.debug('prealign %s: roll %.4f rad', worm.worm_id, theta)
    return worm.transformed(tf), tf


def least_squares_affine(src, dst):
    """Affine map minimizing the summed squared distance of correspondences.

    Parameters
    ----------
    src, dst : array_like, shape (n, 3)
        Corresponding points, n >= 4, ``src`` not coplanar.

    Returns
    -------
    AffineTransform
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError('src and dst differ in length')
    if len(src) < 4:
        raise DegenerateCloud('need at least 4 correspondences, got %d' % len(src))
    if np.linalg.matrix_rank(src - src.mean(axis=0)) < 3:
        raise DegenerateCloud('source points are coplanar')
    design = np.hstack([src, np.ones((len(src), 1))])
    sol, _, rank, _ = np.linalg.lstsq(design, dst, rcond=None)
    if rank < 4:
        raise DegenerateCloud('normal matrix is singular')
    return AffineTransform(sol[:3].T, sol[3])


def fit_residual(tf, src, dst):
    """Sum of squared distances between ``tf(src)`` and ``dst``."""
    diff = tf.apply(src) - np.asarray(dst, dtype=float)
    return float(np.sum(diff ** 2))


def average_affine(transforms):
    """Element-wise mean of a collection of affine transforms."""
    transforms = list(transforms)
    if not transforms:
        return AffineTransform.identity()
    linear = np.mean([t.linear for t in transforms], axis=0)
    translation = np.mean([t.translation for t in transforms], axis=0)
    return AffineTransform(linear, translation)


def align_by_labels(worm, base):
    """Least-squares affine alignment of ``worm`` onto ``base`` through
    shared ground-truth labels.

    Returns
    -------
    aligned : Worm
    tf : AffineTransform
    residual : float
    """
    if not worm.is_labeled or not base.is_labeled:
        raise ValueError('align_by_labels needs labeled worms')
    base_pos = {l: base.position_of[i] for i, l in base.gt_labels.items()}
    src, dst = [], []
    for nid, label in sorted(worm.gt_labels.items()):
        if label in base_pos:
            src.append(worm.centroids[worm.position_of[nid]])
            dst.append(base.centroids[base_pos[label]])
    if len(src) < 4:
        raise NoMatches('worm %s shares %d labels with %s'
                        % (worm.worm_id, len(src), base.worm_id))
    tf = least_squares_affine(src, dst)
    return worm.transformed(tf), tf, fit_residual(tf, src, dst)


def half_turn(worm):
    """Rotate a worm by pi about the x axis through its barycenter.

    In the canonical frame this is the one pose ambiguity that the
    symmetry roll leaves open.

    Returns
    -------
    turned : Worm
    tf : RigidTransform
    """
    center = worm.centroids.mean(axis=0) if len(worm) else np.zeros(3)
    rotation = _rotation_x(math.pi)
    tf = RigidTransform(rotation, center - rotation @ center)
    return worm.transformed(tf), tf


def _reference_points(reference):
    from .atlas import Atlas

    if isinstance(reference, Atlas):
        return reference.mean_cen
    return reference.centroids


def _match_reference(reference, worm, params, solver_cfg, seed):
    """(pairs, objective) of one matching round."""
    from .atlas import Atlas, build_atlas_instance
    from .gm import solve_instance
    from .mgm import match_pair

    if isinstance(reference, Atlas):
        inst = build_atlas_instance(reference, worm, params.sparsity, params.c0)
        sol = solve_instance(inst, solver_cfg)
        matching, objective = sol.matching, sol.objective
    else:
        res = match_pair(reference, worm, params, solver_cfg, seed=seed)
        matching, objective = res.matching, res.objective
    pairs = np.asarray(matching.pairs, dtype=int).reshape(-1, 2)
    return pairs, objective


def orient(worm, reference, params, solver_cfg=None, seed=0):
    """Settle the half-turn pose ambiguity of ``worm`` against ``reference``.

    Both the worm and its ``half_turn`` are matched to ``reference`` (a Worm
    or an Atlas); the pose with the lower matching objective is kept.

    Returns
    -------
    worm : Worm
    tf : RigidTransform
        Identity or the half turn.
    pairs : ndarray
        Correspondences (reference index, worm index) of the kept pose.
    """
    pairs, objective = _match_reference(reference, worm, params,
                                           solver_cfg, seed)
    if len(worm) < 4:
        return worm, RigidTransform.identity(), pairs
    turned, flip = half_turn(worm)
    t_pairs, t_objective = _match_reference(reference, turned, params,
                                               solver_cfg, seed)
    if t_objective < objective and len(t_pairs) >= 4:
        logger.info('orient %s: half turn (objective %.6g < %.6g)',
                    worm.worm_id, t_objective, objective)
        return turned, flip, t_pairs
    return worm, RigidTransform.identity(), pairs


def realign(worm, reference, params, iterations=7, solver_cfg=None, seed=0,
            resolve_half_turn=True):
    """Alternate matching against ``reference`` and affine re-fitting.

    Each round matches the current worm to ``reference`` (a Worm, matched
    worm-to-worm with ``params``, or an Atlas, matched with its own
    per-label model), fits ``least_squares_affine`` on matched centroid
    pairs and applies it. With ``resolve_half_turn`` the first round also
    matches the worm turned by pi about its long axis (``half_turn``) and
    continues from whichever pose matches at the lower objective.

    Returns
    -------
    RealignResult
        ``worm`` is the transformed worm, ``transform`` the composed affine
        map from the input worm, ``residuals`` the fit residual per round.
    """
    if iterations < 1:
        raise ValueError('iterations must be >= 1')
    current = worm
    targets = _reference_points(reference)
    total = AffineTransform.identity()
    residuals = []
    for it in range(iterations):
        if it == 0 and resolve_half_turn:
            current, flip, pairs = orient(current, reference, params,
                                          solver_cfg, seed)
            total = flip.as_affine()
        else:
            pairs, _ = _match_reference(reference, current, params,
                                        solver_cfg, seed)
        if len(pairs) < 4:
            raise NoMatches('realign %s: round %d produced %d correspondences'
                            % (worm.worm_id, it, len(pairs)))
        src = current.centroids[pairs[:, 1]]
        dst = targets[pairs[:, 0]]
        tf = least_squares_affine(src, dst)
        residuals.append(fit_residual(tf, src, dst))
        current = current.transformed(tf)
        total = tf.compose(total)
        logger.debug('realign %s: round %d, %d pairs, residual %.4g',
                     worm.worm_id, it, len(pairs), residuals[-1])
    return RealignResult(current, total, residuals)

"""Gaussian atlases: per-label centroid/radii distributions plus pairwise
offset distributions, built from cliques (unsupervised) or from ground-truth
labels (supervised), and matching of worms against them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .costs import (ATLAS_SPARSITY, DEFAULT_C0, AtlasOffsetModel, CostWeights,
                    make_instance, normalize_weights, pairwise_mahalanobis,
                    sparsity_mask, weights_from_covariances)
from .exceptions import InsufficientSupport, MissingLabels, ZeroWeights
from .geometry import align_by_labels
from .gm import solve_instance

logger = logging.getLogger(__name__)

# diagonal regularization of every estimated covariance (length^2)
EPS = 1e-4
MIN_EMPIRICAL_SUPPORT = 3
SUPERVISED_WEIGHTS = (0.48, 0.34, 0.81)


@dataclass(frozen=True, eq=False)
class AtlasEntry:
    label: int
    mean_cen: np.ndarray
    cov_cen: np.ndarray
    mean_rad: np.ndarray
    cov_rad: np.ndarray
    support: int

    def __post_init__(self):
        for name in ('mean_cen', 'mean_rad'):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), float).reshape(3))
        for name in ('cov_cen', 'cov_rad'):
            cov = np.asarray(getattr(self, name), float).reshape(3, 3)
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError('entry %s: %s is not symmetric'
                                 % (self.label, name))
            if np.linalg.eigvalsh(cov)[0] < EPS * (1 - 1e-6):
                raise ValueError('entry %s: %s is below the regularization floor'
                                 % (self.label, name))
            object.__setattr__(self, name, cov)
        if int(self.support) < 1:
            raise ValueError('entry %s: support must be >= 1' % self.label)
        object.__setattr__(self, 'support', int(self.support))


@dataclass(frozen=True, eq=False)
class Atlas:
    """Per-label Gaussians plus offsets keyed ``(i, j)`` with ``i < j``.

    An offset describes ``x_i - x_j``. ``label_names`` maps entry index to
    a ground-truth label (or None when the entry stayed unlabeled).
    """

    entries: tuple
    offsets: dict
    weights: CostWeights
    label_names: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, 'entries', tuple(self.entries))
        object.__setattr__(self, 'weights', normalize_weights(self.weights))
        for (i, j) in self.offsets:
            if not i < j:
                raise ValueError('offset keys must satisfy i < j')

    def __len__(self):
        return len(self.entries)

    def with_weights(self, weights):
        return Atlas(self.entries, self.offsets, weights, self.label_names)

    def with_label_names(self, label_names):
        return Atlas(self.entries, self.offsets, self.weights, label_names)

    def offset(self, i, j):
        """(mean, cov) of ``x_i - x_j``."""
        if i < j:
            return self.offsets[(i, j)]
        mean, cov = self.offsets[(j, i)]
        return -mean, cov

    @cached_property
    def mean_cen(self):
        return np.array([e.mean_cen for e in self.entries]).reshape(-1, 3)

    @cached_property
    def mean_rad(self):
        return np.array([e.mean_rad for e in self.entries]).reshape(-1, 3)

    @cached_property
    def cov_cen(self):
        return np.array([e.cov_cen for e in self.entries]).reshape(-1, 3, 3)

    @cached_property
    def cov_rad(self):
        return np.array([e.cov_rad for e in self.entries]).reshape(-1, 3, 3)

    @cached_property
    def offset_arrays(self):
        """Dense ``(L, L, 3)`` offset means and ``(L, L, 3, 3)`` precisions;
        the diagonal holds zeros and identities."""
        L = len(self.entries)
        mean = np.zeros((L, L, 3))
        prec = np.tile(np.eye(3), (L, L, 1, 1))
        if self.offsets:
            keys = np.array(sorted(self.offsets), dtype=int)
            means = np.array([self.offsets[tuple(k)][0] for k in keys.tolist()])
            precs = np.linalg.inv(np.array([self.offsets[tuple(k)][1]
                                            for k in keys.tolist()]))
            mean[keys[:, 0], keys[:, 1]] = means
            mean[keys[:, 1], keys[:, 0]] = -means
            prec[keys[:, 0], keys[:, 1]] = precs
            prec[keys[:, 1], keys[:, 0]] = precs
        return mean, prec

    def label_map(self):
        if self.label_names is None:
            return {i: e.label for i, e in enumerate(self.entries)}
        return dict(self.label_names)


@dataclass(frozen=True)
class AccuracyReport:
    correct: int
    total: int
    unmatched: int

    @property
    def accuracy(self):
        return self.correct / self.total if self.total else 0.0

    @property
    def incorrect(self):
        return self.total - self.correct - self.unmatched

    @classmethod
    def combine(cls, reports):
        reports = list(reports)
        return cls(sum(r.correct for r in reports),
                   sum(r.total for r in reports),
                   sum(r.unmatched for r in reports))

    def to_dict(self):
        return {'correct': self.correct, 'total': self.total,
                'unmatched': self.unmatched, 'accuracy': self.accuracy}


def _stack_samples(groups, worms):
    """(L, N, 3) centroid and radii samples with NaN where a worm lacks
    the label. ``groups[q]`` maps worm index -> nucleus position."""
    L, N = len(groups), len(worms)
    cen = np.full((L, N, 3), np.nan)
    rad = np.full((L, N, 3), np.nan)
    for q, members in enumerate(groups):
        for w, k in members.items():
            cen[q, w] = worms[w].centroids[k]
            rad[q, w] = worms[w].radii[k]
    return cen, rad


def _gaussian(samples, fallback, what):
    """Empirical mean and regularized covariance of rows without NaN."""
    x = samples[~np.isnan(samples).any(axis=1)]
    n = len(x)
    mean = x.mean(axis=0)
    if n >= MIN_EMPIRICAL_SUPPORT:
        cov = np.cov(x, rowvar=False, ddof=1)
    elif fallback is not None:
        cov = np.array(fallback, dtype=float)
    else:
        raise InsufficientSupport('%s has %d samples, need %d'
                                  % (what, n, MIN_EMPIRICAL_SUPPORT))
    return mean, 0.5 * (cov + cov.T) + EPS * np.eye(3), n


def _offsets(cen, means, covs, fallback_off):
    """Offset Gaussians for every entry pair i < j.

    Pairs seen together in fewer than three worms fall back to the
    difference of means with ``fallback_off`` (a 3x3 covariance) or, when
    that is None, with ``cov_i + cov_j``.
    """
    L = len(cen)
    offsets = {}
    for i in range(L - 1):
        d = cen[i][None, :, :] - cen[i + 1:]
        valid = ~np.isnan(d).any(axis=2)
        count = valid.sum(axis=1)
        safe = np.where(valid[..., None], d, 0.0)
        mean = safe.sum(axis=1) / np.maximum(count, 1)[:, None]
        centered = np.where(valid[..., None], d - mean[:, None, :], 0.0)
        scatter = np.einsum('jnk,jnl->jkl', centered, centered)
        for k, j in enumerate(range(i + 1, L)):
            if count[k] >= MIN_EMPIRICAL_SUPPORT:
                m = mean[k]
                cov = scatter[k] / (count[k] - 1)
            else:
                m = means[i] - means[j]
                cov = (fallback_off if fallback_off is not None
                       else covs[i] + covs[j] - 2 * EPS * np.eye(3))
            offsets[(i, j)] = (m, 0.5 * (cov + cov.T) + EPS * np.eye(3))
    return offsets


def _build(labels, cen, rad, shared, with_offsets, what):
    fb_cen = fb_rad = fb_off = None
    if shared is not None:
        fb_cen = np.diag(shared.sigma_cen)
        fb_rad = np.diag(shared.sigma_rad)
        fb_off = np.diag(shared.sigma_off)
    entries = []
    for q, label in enumerate(labels):
        m_cen, c_cen, n = _gaussian(cen[q], fb_cen, '%s %s' % (what, label))
        m_rad, c_rad, _ = _gaussian(rad[q], fb_rad, '%s %s' % (what, label))
        entries.append(AtlasEntry(label, m_cen, c_cen, m_rad, c_rad, n))
    offsets = {}
    if with_offsets:
        means = np.array([e.mean_cen for e in entries]).reshape(-1, 3)
        covs = np.array([e.cov_cen for e in entries]).reshape(-1, 3, 3)
        offsets = _offsets(cen, means, covs, fb_off)
    return entries, offsets


def build_unsupervised_atlas(universe, worms, sigmas, min_support=1,
                             with_offsets=True):
    """Atlas with one entry per clique of ``universe``.

    Weights follow the learned shared covariances (norm of each diagonal,
    normalized). Cliques with fewer than three members take the shared
    covariances instead of empirical ones.
    """
    small = [q for q, c in enumerate(universe.cliques) if len(c) < min_support]
    if small:
        raise InsufficientSupport('%d cliques have fewer than %d members'
                                  % (len(small), min_support))
    if not len(universe):
        raise InsufficientSupport('universe has no cliques')
    cen, rad = _stack_samples(universe.cliques, worms)
    entries, offsets = _build(range(len(universe)), cen, rad, sigmas,
                              with_offsets, 'clique')
    atlas = Atlas(tuple(entries), offsets, weights_from_covariances(sigmas))
    logger.info('unsupervised atlas: %d entries from %d worms', len(atlas),
                len(worms))
    return atlas


def _require_labels(worms):
    for w in worms:
        if not w.is_labeled:
            raise MissingLabels('worm %s has no ground-truth labels'
                                % w.worm_id)


def build_supervised_atlas(worms, weights=None, sigmas=None,
                           with_offsets=True):
    """Atlas with one entry per ground-truth label, in ascending label
    order.

    Labels seen fewer than three times raise InsufficientSupport unless
    ``sigmas`` provides a shared fallback.
    """
    _require_labels(worms)
    labels = sorted({l for w in worms for l in w.gt_labels.values()})
    index = {l: q for q, l in enumerate(labels)}
    groups = [dict() for _ in labels]
    for n, w in enumerate(worms):
        for nid, label in w.gt_labels.items():
            groups[index[label]][n] = w.position_of[nid]
    cen, rad = _stack_samples(groups, worms)
    if weights is None:
        weights = CostWeights(*SUPERVISED_WEIGHTS)
    entries, offsets = _build(labels, cen, rad, sigmas, with_offsets, 'label')
    return Atlas(tuple(entries), offsets, weights,
                 {q: l for q, l in enumerate(labels)})


def assign_gt_labels(universe, worms):
    """Greedy transfer of ground-truth labels to cliques.

    The (clique, label) pair with the largest occurrence count wins (ties:
    lower label, then lower clique); the clique and the label are then
    retired. Retiring a label only removes its own occurrences from other
    cliques, so the counts of the remaining pairs never change and a single
    sorted pass suffices.

    Returns
    -------
    dict
        clique index -> label, or None for cliques left unlabeled.
    """
    _require_labels(worms)
    counts = {}
    for q, clique in enumerate(universe.cliques):
        for w, k in clique.items():
            label = worms[w].label_array[k]
            if label >= 0:
                counts[(q, int(label))] = counts.get((q, int(label)), 0) + 1
    order = sorted(counts, key=lambda qk: (-counts[qk], qk[1], qk[0]))
    result = {q: None for q in range(len(universe))}
    used = set()
    for q, label in order:
        if result[q] is None and label not in used:
            result[q] = label
            used.add(label)
    return result


def build_atlas_instance(atlas, worm, sp=ATLAS_SPARSITY, c0=DEFAULT_C0,
                         quadratic=True, weights=None):
    """GmInstance between atlas entries (left) and worm nuclei (right)
    under the per-entry covariances."""
    weights = weights or atlas.weights
    d_cen = pairwise_mahalanobis(atlas.mean_cen, worm.centroids, atlas.cov_cen)
    d_rad = pairwise_mahalanobis(atlas.mean_rad, worm.radii, atlas.cov_rad)
    linear = weights.lambda_cen * d_cen + weights.lambda_rad * d_rad
    mask = sparsity_mask(linear, d_cen, d_rad, sp)
    model = None
    if quadratic and weights.lambda_off > 0 and atlas.offsets:
        mean_off, prec_off = atlas.offset_arrays
        model = AtlasOffsetModel(mean_off, prec_off, worm.centroids,
                                 weights.lambda_off)
    return make_instance(linear, mask, c0, model)


def match_to_atlas(atlas, worm, sp=ATLAS_SPARSITY, c0=DEFAULT_C0,
                   solver_cfg=None, weights=None, quadratic=True):
    """Match a worm's nuclei to atlas entries; left = atlas, right = worm."""
    inst = build_atlas_instance(atlas, worm, sp, c0, quadratic, weights)
    return solve_instance(inst, solver_cfg).matching


def atlas_accuracy(matching, worm, label_map):
    """Fraction of the worm's nuclei matched to an entry carrying their own
    ground-truth label."""
    truth = worm.label_array
    correct = 0
    for i, s in matching.pairs:
        label = label_map.get(i)
        if label is not None and truth[s] >= 0 and truth[s] == label:
            correct += 1
    return AccuracyReport(correct, len(worm), len(worm) - len(matching))


def pre_atlas_accuracy(universe, label_map, worms):
    """Accuracy of the clique labels themselves; nuclei in unlabeled
    cliques or in no clique count as unmatched."""
    clique_of = universe.clique_of()
    correct = unmatched = total = 0
    for w, worm in enumerate(worms):
        truth = worm.label_array
        total += len(worm)
        for k in range(len(worm)):
            q = clique_of.get((w, k))
            label = None if q is None else label_map.get(q)
            if label is None:
                unmatched += 1
            elif truth[k] >= 0 and truth[k] == label:
                correct += 1
    return AccuracyReport(correct, total, unmatched)


def _mean_normalized_distance(atlas, worm):
    index = {e.label: q for q, e in enumerate(atlas.entries)}
    dists = []
    for k, label in enumerate(worm.label_array.tolist()):
        q = index.get(label)
        if label < 0 or q is None:
            continue
        diff = worm.centroids[k] - atlas.mean_cen[q]
        dists.append(np.sqrt(diff @ np.linalg.solve(atlas.cov_cen[q], diff)))
    return float(np.mean(dists)) if dists else np.inf


def select_supervised_base_worm(worms):
    """Base worm whose label-aligned atlas lies closest to the other worms
    on average; ties go to the lowest index."""
    worms = list(worms)
    _require_labels(worms)
    if len(worms) < 3:
        raise ValueError('base worm selection needs at least 3 worms')
    scores = []
    for b, base in enumerate(worms):
        aligned = [base if n == b else align_by_labels(w, base)[0]
                   for n, w in enumerate(worms)]
        atlas = build_supervised_atlas(aligned, with_offsets=False)
        scores.append(np.mean([_mean_normalized_distance(atlas, w)
                               for n, w in enumerate(aligned) if n != b]))
        logger.debug('base candidate %s: %.6g', base.worm_id, scores[-1])
    scores = np.array(scores)
    best = float(scores.min())
    return int(np.flatnonzero(scores <= best + 1e-9 * max(1.0, abs(best)))[0])


def tune_atlas_weights(atlas, worms, n_trials, seed=0, sp=ATLAS_SPARSITY,
                       c0=DEFAULT_C0, solver_cfg=None, tpe_cfg=None):
    """TPE search over (lambda_cen, lambda_rad, lambda_off) in [0, 1]^3
    maximizing mean atlas accuracy on labeled worms.

    Returns
    -------
    CostWeights
        Normalized best weights.
    """
    from .bopt import Param, TpeConfig, best_so_far, optimize

    _require_labels(worms)
    label_map = atlas.label_map()
    space = [Param('lambda_cen', 0.0, 1.0), Param('lambda_rad', 0.0, 1.0),
             Param('lambda_off', 0.0, 1.0)]

    def objective(p):
        try:
            w = CostWeights(p['lambda_cen'], p['lambda_rad'], p['lambda_off'])
        except ZeroWeights:
            return 0.0
        reports = [atlas_accuracy(match_to_atlas(atlas, worm, sp, c0,
                                                 solver_cfg, w), worm,
                                  label_map)
                   for worm in worms]
        return -float(np.mean([r.accuracy for r in reports]))

    cfg = tpe_cfg
    if cfg is None:
        cfg = TpeConfig(seed=seed)
    trials = optimize(objective, space, n_trials, cfg)
    best = best_so_far(trials)[-1]
    logger.info('tuned atlas weights: %s (accuracy %.4f)', best.params,
                -best.values[0])
    return normalize_weights(CostWeights(best.params['lambda_cen'],
                                         best.params['lambda_rad'],
                                         best.params['lambda_off']))

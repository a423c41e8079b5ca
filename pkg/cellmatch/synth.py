"""Synthetic stereotyped worms.

A ground-truth model places labeled nuclei inside an elongated ellipsoidal
body, bilaterally symmetric about y = 0, with the density skewed towards
+x and +z. Each sampled worm deforms the model with a smooth quadratic
displacement field, adds independent noise, drops and adds nuclei and
applies a small random rigid pose.
"""
from __future__ import annotations

import logging
from collections import namedtuple
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .exceptions import ConfigError, PackingFailed
from .geometry import Worm

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 10000
MEAN_RADII = (2.0, 1.6, 1.3)

Dataset = namedtuple('Dataset', ['model', 'train', 'test'])


@dataclass(frozen=True)
class GeneratorConfig:
    n_labels: int = 60
    body_length: float = 100.0
    body_width: float = 20.0
    body_height: float = 14.0
    centroid_noise_sigma: tuple = (0.8, 0.5, 0.5)
    radii_noise_sigma: tuple = (0.1, 0.1, 0.1)
    deformation_magnitude: float = 2.0
    dropout_prob: float = 0.02
    spurious_rate: float = 0.0
    rotation_jitter: float = 0.3
    translation_jitter: float = 10.0
    midline_fraction: float = 0.1
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_labels < 1:
            raise ConfigError('n_labels must be >= 1')
        if min(self.body_length, self.body_width, self.body_height) <= 0:
            raise ConfigError('body extents must be > 0')
        for name in ('centroid_noise_sigma', 'radii_noise_sigma'):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3 or min(value) < 0:
                raise ConfigError('%s must be three values >= 0' % name)
            object.__setattr__(self, name, value)
        if not 0 <= self.dropout_prob <= 1:
            raise ConfigError('dropout_prob must lie in [0, 1]')
        if self.spurious_rate < 0 or self.deformation_magnitude < 0:
            raise ConfigError('spurious_rate and deformation_magnitude must be >= 0')
        if self.rotation_jitter < 0 or self.translation_jitter < 0:
            raise ConfigError('pose jitter must be >= 0')
        if not 0 <= self.midline_fraction <= 1:
            raise ConfigError('midline_fraction must lie in [0, 1]')

    @classmethod
    def desk(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides):
        d = dict(n_labels=558, body_length=200.0, body_width=40.0,
                 body_height=28.0)
        d.update(overrides)
        return cls(**d)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return GeneratorConfig(**d)

    def to_dict(self):
        d = asdict(self)
        for name in ('centroid_noise_sigma', 'radii_noise_sigma'):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError('generator config: unknown keys %s'
                              % sorted(unknown))
        return cls(**d)

    @property
    def half_extents(self):
        return np.array([self.body_length, self.body_width,
                         self.body_height]) / 2.0


@dataclass(frozen=True, eq=False)
class GroundTruthModel:
    """Per-label mean centroids and radii; ``partner[l]`` is the mirror
    label of ``l`` or -1 on the midline."""

    means: np.ndarray
    radii: np.ndarray
    partner: np.ndarray
    config: GeneratorConfig

    @property
    def n_labels(self):
        return len(self.means)

    def to_dict(self):
        return {'means': self.means.tolist(), 'radii': self.radii.tolist(),
                'partner': self.partner.tolist(),
                'config': self.config.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d['means'], float).reshape(-1, 3),
                   np.asarray(d['radii'], float).reshape(-1, 3),
                   np.asarray(d['partner'], int),
                   GeneratorConfig.from_dict(d['config']))


def _body_point(rng, half):
    """Point inside the body ellipsoid with skewed x and z densities."""
    while True:
        x = (2.0 * rng.beta(1.5, 3.0) - 1.0) * half[0]
        z = (2.0 * rng.beta(1.5, 3.0) - 1.0) * half[2]
        y = rng.uniform(-half[1], half[1])
        if (x / half[0]) ** 2 + (y / half[1]) ** 2 + (z / half[2]) ** 2 <= 1.0:
            return np.array([x, y, z])


def make_ground_truth(cfg):
    """Sample label means with pairwise separation of at least twice the
    median mean radius.

    Raises
    ------
    PackingFailed
        When a label cannot be placed within ``MAX_ATTEMPTS`` draws.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    half = cfg.half_extents
    n = cfg.n_labels
    n_mid = int(round(cfg.midline_fraction * n))
    if (n - n_mid) % 2:
        n_mid += 1
    n_pairs = (n - n_mid) // 2

    scale = np.exp(rng.normal(0.0, 0.15, size=(n_pairs + n_mid, 1)))
    base = -np.sort(-(np.array(MEAN_RADII) * scale), axis=1)
    sep = 2.0 * float(np.median(base.mean(axis=1)))

    points = []

    def fits(p):
        if not points:
            return True
        d, _ = cKDTree(np.array(points)).query(p)
        return d >= sep

    means = []
    radii = []
    partner = []
    for k in range(n_pairs + n_mid):
        paired = k < n_pairs
        for attempt in range(MAX_ATTEMPTS):
            p = _body_point(rng, half)
            if paired:
                p[1] = abs(p[1])
                mirror = p * np.array([1.0, -1.0, 1.0])
                if 2 * p[1] >= sep and fits(p) and fits(mirror):
                    break
            else:
                p[1] = 0.0
                if fits(p):
                    break
        else:
            raise PackingFailed('could not place label %d with separation %.3g '
                                'after %d attempts' % (len(means), sep,
                                                       MAX_ATTEMPTS))
        if paired:
            l = len(means)
            means.extend([p, mirror])
            radii.extend([base[k], base[k]])
            partner.extend([l + 1, l])
            points.extend([p, mirror])
        else:
            means.append(p)
            radii.append(base[k])
            partner.append(-1)
            points.append(p)
    model = GroundTruthModel(np.array(means), np.array(radii),
                             np.array(partner, dtype=int), cfg)
    logger.debug('ground truth: %d labels, separation %.3g', n, sep)
    return model


def _monomials(points, half):
    u = points / half
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    return np.stack([x, y, z, x * x, y * y, z * z, x * y, x * z, y * z],
                    axis=1)


def centroid_variance(model, cfg=None):
    """Per-label, per-axis centroid variance of the deformation field plus
    independent noise (pose jitter excluded)."""
    cfg = cfg or model.config
    m = _monomials(model.means, cfg.half_extents)
    field_var = (cfg.deformation_magnitude / 3.0) ** 2 * np.sum(m * m, axis=1)
    noise = np.array(cfg.centroid_noise_sigma) ** 2
    return field_var[:, None] + noise[None, :]


def sample_worm(model, cfg, worm_seed, worm_id='worm'):
    """Draw one labeled worm from ``model``.

    Parameters
    ----------
    model : GroundTruthModel
    cfg : GeneratorConfig
    worm_seed : int or sequence of int
        Seed of this worm's random stream.
    worm_id : str

    Returns
    -------
    Worm
        Spurious nuclei carry no label.
    """
    rng = np.random.default_rng(worm_seed)
    half = cfg.half_extents
    n = model.n_labels
    coef = rng.normal(0.0, cfg.deformation_magnitude / 3.0, size=(9, 3))
    cen = (model.means + _monomials(model.means, half) @ coef
           + rng.normal(0.0, 1.0, size=(n, 3)) * np.array(cfg.centroid_noise_sigma))
    rad = model.radii + rng.normal(0.0, 1.0, size=(n, 3)) * np.array(cfg.radii_noise_sigma)
    rad = -np.sort(-np.maximum(rad, 0.05 * model.radii), axis=1)
    keep = rng.random(n) >= cfg.dropout_prob
    labels = list(np.flatnonzero(keep))
    cen, rad = cen[keep], rad[keep]

    n_spurious = int(rng.poisson(cfg.spurious_rate))
    if n_spurious:
        extra = np.array([_body_point(rng, half) for _ in range(n_spurious)])
        extra_rad = np.tile(np.median(model.radii, axis=0), (n_spurious, 1))
        cen = np.vstack([cen, extra])
        rad = np.vstack([rad, extra_rad])
        labels.extend([None] * n_spurious)

    rotvec = rng.normal(size=3)
    norm = np.linalg.norm(rotvec)
    angle = rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter)
    rotation = Rotation.from_rotvec(rotvec / norm * angle if norm > 0 else np.zeros(3))
    shift = rng.uniform(-cfg.translation_jitter, cfg.translation_jitter, size=3)
    if len(cen):
        cen = rotation.apply(cen) + shift

    order = rng.permutation(len(cen)) if cfg.shuffle else np.arange(len(cen))
    return Worm.from_arrays(worm_id, cen[order].reshape(-1, 3),
                            rad[order].reshape(-1, 3),
                            labels=[labels[k] for k in order])


def generate_dataset(cfg, n_train, n_test):
    """Ground truth plus ``n_train`` training and ``n_test`` test worms.

    Worm k of split s (1 train, 2 test) is seeded with ``[seed, s, k]``.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError('n_train and n_test must be >= 1')
    model = make_ground_truth(cfg)
    train = [sample_worm(model, cfg, [cfg.seed, 1, k], 'train_%03d' % k)
             for k in range(n_train)]
    test = [sample_worm(model, cfg, [cfg.seed, 2, k], 'test_%03d' % k)
            for k in range(n_test)]
    logger.info('generated %d train and %d test worms with %d labels',
                n_train, n_test, cfg.n_labels)
    return Dataset(model, train, test)

"""JSON persistence of worms, matchings, universes, atlases and reports.

Every document is written with sorted keys and no timestamps so that
identical runs produce identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os

import numpy as np

from . import __version__
from .assignment import Matching
from .atlas import Atlas, AtlasEntry
from .costs import CostWeights
from .exceptions import ConfigError
from .geometry import Nucleus, Worm
from .mgm import MultiMatching, Universe

logger = logging.getLogger(__name__)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def config_hash(config):
    """First 16 hex digits of the SHA-256 of the canonical JSON."""
    return hashlib.sha256(canonical_json(config).encode('utf-8')).hexdigest()[:16]


def meta(seed, config):
    return {'seed': int(seed), 'config_hash': config_hash(config),
            'version': __version__}


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError('cannot serialize %r' % type(o))


def write_json(path, obj):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(obj, f, sort_keys=True, indent=1, default=_default)
        f.write('\n')
    logger.debug('wrote %s', path)


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError('missing file: %s' % path)
    except json.JSONDecodeError as e:
        raise ConfigError('%s is not valid JSON: %s' % (path, e))


def worm_to_dict(worm):
    gt = worm.gt_labels or {}
    return {'worm_id': worm.worm_id,
            'nuclei': [{'id': n.id, 'centroid': n.centroid.tolist(),
                        'radii': n.radii.tolist(), 'gt_label': gt.get(n.id)}
                       for n in worm.nuclei]}


def worm_from_dict(d):
    try:
        nuclei = tuple(Nucleus(n['id'], n['centroid'], n['radii'])
                       for n in d['nuclei'])
        labels = {n['id']: n.get('gt_label') for n in d['nuclei']}
        has_labels = any(v is not None for v in labels.values())
        return Worm(str(d['worm_id']), nuclei, labels if has_labels else None)
    except (KeyError, TypeError) as e:
        raise ConfigError('malformed worm document: %s' % e)


def save_worms(directory, worms):
    for w in worms:
        write_json(os.path.join(directory, '%s.json' % w.worm_id),
                   worm_to_dict(w))


def load_worms(directory, prefix=''):
    """All ``<prefix>*.json`` worm files of a directory, sorted by name."""
    if not os.path.isdir(directory):
        raise ConfigError('no such directory: %s' % directory)
    names = sorted(n for n in os.listdir(directory)
                   if n.startswith(prefix) and n.endswith('.json'))
    worms = [worm_from_dict(read_json(os.path.join(directory, n)))
             for n in names]
    if not worms:
        raise ConfigError('no worm files in %s' % directory)
    return worms


def matching_to_dict(m, left_worm, right_worm, objective=None):
    return {'left_worm': left_worm, 'right_worm': right_worm,
            'pairs': [list(p) for p in m.pairs], 'objective': objective,
            'n_left': m.n_left, 'n_right': m.n_right}


def matching_from_dict(d):
    return Matching(tuple(tuple(p) for p in d['pairs']), d['n_left'],
                    d['n_right'])


def multimatching_to_dict(mm, worms):
    ids = [w.worm_id for w in worms]
    return {'worms': ids,
            'matchings': [matching_to_dict(mm.pairwise[k], ids[k[0]], ids[k[1]])
                          for k in sorted(mm.pairwise)]}


def multimatching_from_dict(d, worms):
    index = {w.worm_id: n for n, w in enumerate(worms)}
    pairwise = {}
    for m in d['matchings']:
        try:
            a, b = index[m['left_worm']], index[m['right_worm']]
        except KeyError as e:
            raise ConfigError('matching refers to unknown worm %s' % e)
        pairwise[(a, b)] = matching_from_dict(m)
    return MultiMatching(tuple(len(w) for w in worms), pairwise)


def universe_to_dict(universe, worms):
    """Cliques as lists of ``[worm_id, nucleus_id]``."""
    return {'cliques': [[[worms[w].worm_id, int(worms[w].nuclei[k].id)]
                         for w, k in c.items()]
                        for c in universe.cliques]}


def universe_from_dict(d, worms):
    index = {w.worm_id: n for n, w in enumerate(worms)}
    cliques = []
    for c in d['cliques']:
        clique = {}
        for worm_id, nid in c:
            w = index[worm_id]
            clique[w] = worms[w].position_of[nid]
        cliques.append(clique)
    return Universe(tuple(len(w) for w in worms), tuple(cliques))


def atlas_to_dict(atlas):
    names = atlas.label_names
    return {
        'entries': [{'label': int(e.label), 'mean_cen': e.mean_cen.tolist(),
                     'cov_cen': e.cov_cen.ravel().tolist(),
                     'mean_rad': e.mean_rad.tolist(),
                     'cov_rad': e.cov_rad.ravel().tolist(),
                     'support': e.support}
                    for e in atlas.entries],
        'offsets': {'%d-%d' % k: {'mean': v[0].tolist(),
                                  'cov': v[1].ravel().tolist()}
                    for k, v in sorted(atlas.offsets.items())},
        'weights': atlas.weights.as_array().tolist(),
        'label_names': None if names is None else
        {str(k): v for k, v in sorted(names.items())},
    }


def atlas_from_dict(d):
    try:
        entries = tuple(AtlasEntry(e['label'], e['mean_cen'],
                                   np.reshape(e['cov_cen'], (3, 3)),
                                   e['mean_rad'],
                                   np.reshape(e['cov_rad'], (3, 3)),
                                   e['support'])
                        for e in d['entries'])
        offsets = {}
        for key, v in d.get('offsets', {}).items():
            i, j = (int(x) for x in key.split('-'))
            offsets[(i, j)] = (np.asarray(v['mean'], float),
                               np.reshape(v['cov'], (3, 3)).astype(float))
        names = d.get('label_names')
        if names is not None:
            names = {int(k): v for k, v in names.items()}
        return Atlas(entries, offsets, CostWeights.from_sequence(d['weights']),
                     names)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError('malformed atlas document: %s' % e)

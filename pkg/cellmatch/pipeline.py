"""End-to-end pipelines composed from the library modules.

Every stage writes its artifact into the output directory; with
``RunConfig.resume`` a stage whose artifact already exists is loaded
instead of recomputed.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from joblib import Parallel, delayed

from . import io
from .atlas import (AccuracyReport, assign_gt_labels, atlas_accuracy,
                    build_supervised_atlas, build_unsupervised_atlas,
                    match_to_atlas, pre_atlas_accuracy,
                    select_supervised_base_worm, tune_atlas_weights)
from .bopt import LearnConfig, learn_parameters
from .costs import (ATLAS_SPARSITY, DEFAULT_C0, MGM_C0, CostParams,
                    CostWeights, build_from_params)
from .exceptions import CellmatchError, ConfigError, MissingLabels, StageFailed
from .geometry import (average_affine, align_by_labels, half_turn, prealign,
                       realign)
from .gm import SolverConfig
from .mgm import select_reference_worm, solve_all_pairs, synchronize
from .profiling import StageProfiler
from .synth import generate_dataset

logger = logging.getLogger(__name__)

MODELS = ('full', 'linear-dense', 'linear-sparse', 'unlearned-quadratic')
MODES = ('dense', 'sparse', 'skip-atlas')
SWEEP_SIZES = (5, 10, 15, 20)


@dataclass
class RunConfig:
    data_dir: str = 'data'
    out_dir: str = 'out'
    params_path: str | None = None
    learn: LearnConfig = field(default_factory=LearnConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    model: str = 'full'
    mode: str = 'dense'
    single_realign: bool = False
    atlas_lambda: tuple | None = None
    mgm_c0: float = MGM_C0
    realign_iterations: int = 7
    min_clique_size: int = 3
    tune_weights: int = 0
    resume: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError('model must be one of %s, got %r'
                              % (', '.join(MODELS), self.model))
        if self.mode not in MODES:
            raise ConfigError('mode must be one of %s, got %r'
                              % (', '.join(MODES), self.mode))
        if self.realign_iterations < 1 or self.min_clique_size < 1:
            raise ConfigError('realign_iterations and min_clique_size must be >= 1')
        if self.workers < 1 and self.workers != -1:
            raise ConfigError('workers must be >= 1 (or -1 for all CPUs)')
        if self.atlas_lambda is not None:
            self.atlas_lambda = tuple(float(v) for v in self.atlas_lambda)
            CostWeights.from_sequence(self.atlas_lambda)
        if self.params_path is not None and not os.path.isfile(self.params_path):
            raise ConfigError('cost parameter file not found: %s'
                              % self.params_path)

    def to_dict(self):
        d = asdict(self)
        d['learn'] = self.learn.to_dict()
        d['solver'] = self.solver.to_dict()
        if self.atlas_lambda is not None:
            d['atlas_lambda'] = list(self.atlas_lambda)
        return d

    def hashable(self):
        """Settings that influence results; paths, workers and resume do
        not."""
        d = self.to_dict()
        for key in ('data_dir', 'out_dir', 'params_path', 'workers', 'resume'):
            d.pop(key)
        d['learn'].pop('workers')
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError('run config: unknown keys %s' % sorted(unknown))
        d = dict(d)
        if 'learn' in d:
            d['learn'] = LearnConfig.from_dict(d['learn'])
        if 'solver' in d:
            d['solver'] = SolverConfig.from_dict(d['solver'])
        return cls(**d)


class Run(object):
    """Paths, profiler and resume logic shared by the stages of one run."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.profiler = StageProfiler()
        self.meta = io.meta(cfg.seed, cfg.hashable())
        os.makedirs(cfg.out_dir, exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.cfg.out_dir, *parts)

    def cached(self, *parts):
        p = self.path(*parts)
        return self.cfg.resume and os.path.exists(p)

    def stage(self, name, func, *args, **kwargs):
        """Run ``func`` inside a profiled stage; library failures are
        re-raised as StageFailed naming the stage."""
        with self.profiler.stage(name):
            try:
                return func(*args, **kwargs)
            except (StageFailed, ConfigError, MissingLabels):
                raise
            except CellmatchError as e:
                raise StageFailed(name, e) from e

    def write(self, name, doc):
        doc = dict(doc)
        doc['meta'] = self.meta
        io.write_json(self.path(name), doc)


def load_split(data_dir, split):
    return io.load_worms(os.path.join(data_dir, split))


def run_generate(cfg, out_dir, n_train, n_test):
    """Write a synthetic dataset: train/ and test/ worm files plus the
    ground-truth model."""
    dataset = generate_dataset(cfg, n_train, n_test)
    io.save_worms(os.path.join(out_dir, 'train'), dataset.train)
    io.save_worms(os.path.join(out_dir, 'test'), dataset.test)
    doc = dataset.model.to_dict()
    doc['meta'] = io.meta(cfg.seed, cfg.to_dict())
    io.write_json(os.path.join(out_dir, 'model.json'), doc)
    return dataset


def prealign_worms(worms):
    aligned, transforms = [], {}
    for w in worms:
        a, tf = prealign(w)
        aligned.append(a)
        transforms[w.worm_id] = tf.to_dict()
    return aligned, transforms


def realign_worms(worms, reference, params, iterations, solver_cfg, seed,
                  skip=None, workers=1):
    """Re-align every worm except ``skip`` (a worm id) onto ``reference``,
    one joblib task per worm."""
    todo = [w for w in worms if w.worm_id != skip]
    jobs = [delayed(realign)(w, reference, params, iterations, solver_cfg, seed)
            for w in todo]
    results = Parallel(n_jobs=workers)(jobs) if jobs else []
    done = {w.worm_id: res for w, res in zip(todo, results)}
    out, transforms = [], {}
    for w in worms:
        if w.worm_id not in done:
            out.append(w)
            continue
        out.append(done[w.worm_id].worm)
        transforms[w.worm_id] = done[w.worm_id].transform.to_dict()
    return out, transforms


def pair_masks(worms, params):
    """Allowed-assignment masks of every pairwise instance, without
    solving."""
    masks = {}
    for a in range(len(worms)):
        for b in range(a + 1, len(worms)):
            masks[(a, b)] = build_from_params(worms[a], worms[b],
                                              params).allowed_mask()
    return masks


def pairwise_params(model, learned):
    """Cost parameters of the training-set matching for a model variant.

    ``learned`` is a CostParams holding the learned covariances and
    sparsity (ignored for the unlearned variant).
    """
    if model == 'unlearned-quadratic':
        return CostParams.unlearned(quadratic=True)
    if model == 'linear-dense':
        return learned.replace(sparsity=None, quadratic=False)
    if model == 'linear-sparse':
        return learned.replace(quadratic=False)
    return learned.replace(quadratic=True)


def _accuracy_summary(reports):
    acc = [r.accuracy for r in reports]
    total = AccuracyReport.combine(reports)
    return {'mean': float(np.mean(acc)) if acc else 0.0,
            'std': float(np.std(acc)) if acc else 0.0,
            'pooled': total.to_dict()}


def _match_one(atlas, worm, iterations, solver_cfg, seed):
    atlas_params = CostParams(sparsity=ATLAS_SPARSITY, c0=DEFAULT_C0)
    aligned = realign(worm, atlas, atlas_params, iterations, solver_cfg,
                      seed).worm
    return aligned, match_to_atlas(atlas, aligned, ATLAS_SPARSITY, DEFAULT_C0,
                                   solver_cfg)


def _match_test(run, atlas, test, label_map):
    cfg = run.cfg
    jobs = [delayed(_match_one)(atlas, w, cfg.realign_iterations, cfg.solver,
                                cfg.seed) for w in test]
    results = Parallel(n_jobs=cfg.workers)(jobs) if jobs else []
    per_worm = {}
    reports = []
    matches = {}
    for w, (aligned, m) in zip(test, results):
        matches[w.worm_id] = io.matching_to_dict(m, 'atlas', w.worm_id)
        if w.is_labeled:
            r = atlas_accuracy(m, aligned, label_map)
            reports.append(r)
            per_worm[w.worm_id] = r.to_dict()
    return matches, per_worm, reports


def learn_stage(run, train):
    """Learned CostParams (unit weights), from file, cache or learning."""
    cfg = run.cfg
    if cfg.params_path is None and run.cached('params.json'):
        return CostParams.from_dict(io.read_json(run.path('params.json')))
    if cfg.params_path is not None:
        params = CostParams.from_dict(io.read_json(cfg.params_path))
    elif cfg.model == 'unlearned-quadratic':
        params = CostParams.unlearned()
    else:
        learn_cfg = cfg.learn
        if learn_cfg.workers != cfg.workers or learn_cfg.seed != cfg.seed:
            d = learn_cfg.to_dict()
            d.update(workers=cfg.workers, seed=cfg.seed)
            learn_cfg = LearnConfig.from_dict(d)
        result = learn_parameters(train, learn_cfg, run.path('trials.jsonl'))
        params = CostParams(result.sigmas, CostWeights(), result.sparsity,
                            DEFAULT_C0, True)
    doc = params.to_dict()
    doc['meta'] = run.meta
    io.write_json(run.path('params.json'), doc)
    return params


def run_unsupervised(cfg):
    """Prealign, pick a reference, re-align, learn, re-align again, match
    all training pairs, synchronize, build the atlas and match test worms.

    Returns the report dict (also written to ``report.json``).
    """
    run = Run(cfg)
    train = load_split(cfg.data_dir, 'train')
    test = load_split(cfg.data_dir, 'test')
    if len(train) < 3:
        raise ConfigError('the unsupervised pipeline needs at least 3 '
                          'training worms')

    if run.cached('aligned', 'train') and run.cached('aligned', 'test'):
        train = load_split(run.path('aligned'), 'train')
        test = load_split(run.path('aligned'), 'test')
        ref_doc = io.read_json(run.path('reference.json'))
        ref_index = [w.worm_id for w in train].index(ref_doc['reference'])
        params = learn_stage(run, train)
    else:
        train, _ = run.stage('prealign', prealign_worms, train)
        test, _ = run.stage('prealign-test', prealign_worms, test)
        ref_index = run.stage('reference', select_reference_worm, train,
                              cfg.workers, cfg.seed)
        ref = train[ref_index]
        run.write('reference.json', {'reference': ref.worm_id})
        unlearned = CostParams.unlearned(quadratic=False)
        train, _ = run.stage('realign-1', realign_worms, train, ref, unlearned,
                             cfg.realign_iterations, cfg.solver, cfg.seed,
                             skip=ref.worm_id, workers=cfg.workers)
        test, _ = run.stage('realign-1-test', realign_worms, test, ref,
                            unlearned, cfg.realign_iterations, cfg.solver,
                            cfg.seed, workers=cfg.workers)
        params = run.stage('learn', learn_stage, run, train)
        if not cfg.single_realign:
            learned = pairwise_params(cfg.model, params)
            train, _ = run.stage('realign-2', realign_worms, train, ref,
                                 learned, cfg.realign_iterations, cfg.solver,
                                 cfg.seed, skip=ref.worm_id,
                                 workers=cfg.workers)
            test, _ = run.stage('realign-2-test', realign_worms, test, ref,
                                learned, cfg.realign_iterations, cfg.solver,
                                cfg.seed, workers=cfg.workers)
        io.save_worms(run.path('aligned', 'train'), train)
        io.save_worms(run.path('aligned', 'test'), test)

    mgm_params = pairwise_params(cfg.model, params).replace(c0=cfg.mgm_c0)
    if run.cached('pairwise.json'):
        mm = io.multimatching_from_dict(io.read_json(run.path('pairwise.json')),
                                        train)
        pair_costs = None
        masks = pair_masks(train, mgm_params) if cfg.mode == 'sparse' else None
    else:
        pairs = run.stage('pairwise', solve_all_pairs, train, mgm_params,
                          cfg.solver, cfg.workers, cfg.seed)
        mm, pair_costs, masks = pairs.matching, pairs.pair_costs, pairs.masks
        run.write('pairwise.json', io.multimatching_to_dict(mm, train))

    sync_mode = 'sparse' if cfg.mode == 'sparse' else 'dense'
    sync = run.stage('synchronize', synchronize, mm, sync_mode, masks,
                     pair_costs)
    run.write('universe.json', io.universe_to_dict(sync.universe, train))

    labeled = all(w.is_labeled for w in train)
    report = {'reference': train[ref_index].worm_id,
              'model': cfg.model, 'mode': cfg.mode,
              'params': params.to_dict(),
              'retained_matches': sync.retained,
              'input_matches': mm.total_matches(),
              'n_cliques': len(sync.universe)}
    if labeled:
        clique_labels = assign_gt_labels(sync.universe, train)
        report['pre_atlas_accuracy'] = pre_atlas_accuracy(
            sync.universe, clique_labels, train).to_dict()

    if cfg.mode != 'skip-atlas':
        universe = sync.universe.filter(cfg.min_clique_size)
        atlas = run.stage('build-atlas', build_unsupervised_atlas, universe,
                          train, params.sigmas)
        if cfg.atlas_lambda is not None:
            atlas = atlas.with_weights(CostWeights.from_sequence(cfg.atlas_lambda))
        if labeled:
            atlas = atlas.with_label_names(assign_gt_labels(universe, train))
        io.write_json(run.path('atlas.json'), io.atlas_to_dict(atlas))
        matches, per_worm, reports = run.stage('match', _match_test, run,
                                               atlas, test, atlas.label_map())
        run.write('matches.json', {'matches': matches})
        if reports:
            report['atlas_accuracy'] = _accuracy_summary(reports)
            report['per_worm_accuracy'] = per_worm
    run.write('report.json', report)
    logger.info('profile:\n%s', run.profiler.summary())
    return report


def _require_all_labeled(worms, split):
    for w in worms:
        if not w.is_labeled:
            raise MissingLabels('%s worm %s has no ground-truth labels'
                                % (split, w.worm_id))


def _label_align(worm, base):
    """Label alignment onto ``base`` from the worm's own half-turn pose.

    A fit whose y-z block reverses orientation absorbed a half turn; the
    worm is turned and refit so the averaged transforms share one pose.
    """
    aligned, tf, _ = align_by_labels(worm, base)
    if np.trace(tf.linear[1:, 1:]) < 0:
        turned, _ = half_turn(worm)
        aligned, tf, _ = align_by_labels(turned, base)
        logger.info('label alignment of %s: half turn', worm.worm_id)
    return aligned, tf


def run_supervised(cfg):
    """Supervised atlas from label-aligned training worms, evaluated on test
    worms aligned with the average training transform."""
    run = Run(cfg)
    train = load_split(cfg.data_dir, 'train')
    test = load_split(cfg.data_dir, 'test')
    _require_all_labeled(train, 'training')
    if len(train) < 3:
        raise ConfigError('the supervised pipeline needs at least 3 '
                          'training worms')
    train, _ = run.stage('prealign', prealign_worms, train)
    test, _ = run.stage('prealign-test', prealign_worms, test)
    base_index = run.stage('base-worm', select_supervised_base_worm, train)
    base = train[base_index]
    aligned, transforms = [], []
    for n, w in enumerate(train):
        if n == base_index:
            aligned.append(w)
            continue
        a, tf = _label_align(w, base)
        aligned.append(a)
        transforms.append(tf)
    mean_tf = average_affine(transforms)
    test = [w.transformed(mean_tf) for w in test]

    weights = None
    if cfg.atlas_lambda is not None:
        weights = CostWeights.from_sequence(cfg.atlas_lambda)
    atlas = run.stage('build-atlas', build_supervised_atlas, aligned, weights)
    if cfg.tune_weights > 0:
        tuned = run.stage('tune-weights', tune_atlas_weights, atlas, aligned,
                          cfg.tune_weights, cfg.seed, ATLAS_SPARSITY,
                          DEFAULT_C0, cfg.solver)
        atlas = atlas.with_weights(tuned)
    io.write_json(run.path('atlas.json'), io.atlas_to_dict(atlas))
    matches, per_worm, reports = run.stage('match', _match_test, run, atlas,
                                           test, atlas.label_map())
    run.write('matches.json', {'matches': matches})
    report = {'base_worm': base.worm_id,
              'weights': atlas.weights.as_array().tolist()}
    if reports:
        report['atlas_accuracy'] = _accuracy_summary(reports)
        report['per_worm_accuracy'] = per_worm
    run.write('report.json', report)
    logger.info('profile:\n%s', run.profiler.summary())
    return report


def sweep_training_size(train, mm, params, mode, sizes=SWEEP_SIZES,
                        min_clique_size=3, solver_cfg=None):
    """Pre-atlas and atlas accuracy when only the first N training worms
    are used, reusing the stored pairwise matchings.

    Atlas accuracy is measured by matching the same N worms back to the
    atlas built from them.
    """
    rows = []
    for n in sizes:
        if n > len(train) or n < 3:
            continue
        worms = train[:n]
        sub = mm.restrict(range(n))
        masks = pair_masks(worms, params) if mode == 'sparse' else None
        sync = synchronize(sub, 'sparse' if mode == 'sparse' else 'dense', masks)
        row = {'n': n}
        labels = assign_gt_labels(sync.universe, worms)
        row['pre_atlas_accuracy'] = pre_atlas_accuracy(sync.universe, labels,
                                                       worms).accuracy
        universe = sync.universe.filter(min_clique_size)
        if len(universe):
            atlas = build_unsupervised_atlas(universe, worms, params.sigmas)
            label_map = assign_gt_labels(universe, worms)
            reports = [atlas_accuracy(match_to_atlas(atlas, w, ATLAS_SPARSITY,
                                                     DEFAULT_C0, solver_cfg),
                                      w, label_map)
                       for w in worms]
            row['atlas_accuracy'] = AccuracyReport.combine(reports).accuracy
        rows.append(row)
        logger.info('sweep N=%d: %s', n, row)
    return rows


def _plot(out_dir, sweep, per_worm):
    try:
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt
    except ImportError as e:
        print("matplotlib is needed for plotting; skipping plots.")
        print(e)
        return []
    written = []
    if sweep:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ns = [r['n'] for r in sweep]
        ax.plot(ns, [r['pre_atlas_accuracy'] for r in sweep], 'o-',
                label='pre-atlas')
        if all('atlas_accuracy' in r for r in sweep):
            ax.plot(ns, [r['atlas_accuracy'] for r in sweep], 's-',
                    label='atlas')
        ax.set_xlabel('training worms')
        ax.set_ylabel('accuracy')
        ax.legend(loc='lower right')
        path = os.path.join(out_dir, 'accuracy_vs_size.png')
        fig.savefig(path, dpi=100, metadata={'Software': None})
        plt.close(fig)
        written.append(path)
    if per_worm:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        names = sorted(per_worm)
        ax.bar(range(len(names)), [per_worm[n]['accuracy'] for n in names])
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=90, fontsize=6)
        ax.set_ylabel('accuracy')
        fig.tight_layout()
        path = os.path.join(out_dir, 'per_worm_accuracy.png')
        fig.savefig(path, dpi=100, metadata={'Software': None})
        plt.close(fig)
        written.append(path)
    return written


def run_evaluate(cfg, sizes=SWEEP_SIZES, plots=True):
    """Summaries, the training-size sweep and plots from a finished
    unsupervised run in ``cfg.out_dir``."""
    out = cfg.out_dir
    for name in ('report.json', 'pairwise.json', 'params.json'):
        if not os.path.isfile(os.path.join(out, name)):
            raise ConfigError('missing artifact %s in %s' % (name, out))
    report = io.read_json(os.path.join(out, 'report.json'))
    train = load_split(os.path.join(out, 'aligned'), 'train')
    mm = io.multimatching_from_dict(io.read_json(os.path.join(out, 'pairwise.json')),
                                    train)
    params = CostParams.from_dict(io.read_json(os.path.join(out, 'params.json')))
    mgm_params = pairwise_params(report.get('model', cfg.model), params)
    per_worm = report.get('per_worm_accuracy', {})
    sweep = []
    if all(w.is_labeled for w in train):
        sweep = sweep_training_size(train, mm, mgm_params.replace(c0=cfg.mgm_c0),
                                    report.get('mode', cfg.mode), sizes,
                                    cfg.min_clique_size, cfg.solver)
    acc = [v['accuracy'] for _, v in sorted(per_worm.items())]
    evaluation = {'per_worm_accuracy': per_worm,
                  'mean': float(np.mean(acc)) if acc else None,
                  'std': float(np.std(acc)) if acc else None,
                  'sweep': sweep,
                  'meta': report.get('meta')}
    io.write_json(os.path.join(out, 'evaluation.json'), evaluation)
    lines = ['worms evaluated: %d' % len(acc)]
    if acc:
        lines.append('atlas accuracy: %.4f +- %.4f' % (evaluation['mean'],
                                                       evaluation['std']))
    for row in sweep:
        line = 'N=%-3d pre-atlas %.4f' % (row['n'], row['pre_atlas_accuracy'])
        if 'atlas_accuracy' in row:
            line += '  atlas %.4f' % row['atlas_accuracy']
        lines.append(line)
    with open(os.path.join(out, 'summary.txt'), 'w') as f:
        f.write('\n'.join(lines) + '\n')
    if plots:
        _plot(out, sweep, per_worm)
    return evaluation

import dataclasses
import itertools
import json
import os
import tempfile
import unittest

import numpy as np

from cellmatch.bopt import (LearnConfig, Param, TpeConfig, Trial, _split_by_rank,
                            best_so_far, learn_parameters, matching_loss,
                            motpe_suggest, nondomination_ranks, optimize,
                            pareto_front, stage2_select, tpe_suggest)
from cellmatch.costs import (CostParams, CostWeights, SharedCovariances,
                             build_from_params)
from cellmatch.exceptions import ConfigError, EmptySpace, NoFeasible
from cellmatch.geometry import prealign
from cellmatch.gm import SolverConfig
from cellmatch.synth import GeneratorConfig, generate_dataset

from .oracles import pareto_indices, slow

SPACE = [Param('x', -5.0, 5.0), Param('y', -5.0, 5.0)]


def trials_from(points):
    return [Trial(k, {'x': 0.0, 'y': 0.0}, p) for k, p in enumerate(points)]


class TestParam(unittest.TestCase):

    def test_empty(self):
        with self.assertRaises(EmptySpace):
            Param('a', 1.0, 1.0)
        with self.assertRaises(EmptySpace):
            Param('a', 0.0, 1.0, log=True)
        with self.assertRaises(EmptySpace):
            tpe_suggest([], [])

    def test_integer_and_log(self):
        p = Param('k', 1, 30, integer=True)
        self.assertEqual(p.from_internal(4.4), 4)
        self.assertEqual(p.from_internal(99.0), 30)
        q = Param('s', 1.0, 200.0, log=True)
        self.assertAlmostEqual(q.from_internal(q.to_internal(17.0)), 17.0)


class TestSuggest(unittest.TestCase):

    def test_startup_is_uniform_and_reproducible(self):
        cfg = TpeConfig(seed=4)
        a = tpe_suggest([], SPACE, cfg)
        self.assertEqual(a, tpe_suggest([], SPACE, cfg))
        self.assertNotEqual(a, tpe_suggest([], SPACE, TpeConfig(seed=5)))
        for value in a.values():
            self.assertTrue(-5.0 <= value <= 5.0)

    def test_sphere(self):
        def sphere(p):
            return (p['x'] - 1.5) ** 2 + (p['y'] + 2.0) ** 2

        cfg = TpeConfig(seed=1)
        trials = optimize(sphere, SPACE, 80, cfg)
        startup = min(t.values[0] for t in trials[:cfg.n_startup])
        best = best_so_far(trials)[-1].values[0]
        self.assertLess(best, 1.0)
        self.assertLessEqual(best, startup)
        again = optimize(sphere, SPACE, 80, cfg)
        self.assertEqual([t.params for t in trials], [t.params for t in again])

    def test_motpe_with_constant_second_objective_is_tpe(self):
        rng = np.random.default_rng(2)
        history = [Trial(k, {'x': float(x), 'y': float(y)}, (float(x * x + y), 0.0))
                   for k, (x, y) in enumerate(rng.uniform(-5, 5, size=(20, 2)))]
        cfg = TpeConfig(seed=3)
        self.assertEqual(motpe_suggest(history, SPACE, cfg),
                         tpe_suggest(history, SPACE, cfg))

    def test_motpe_bounds(self):
        rng = np.random.default_rng(4)
        history = [Trial(k, {'x': float(x), 'y': float(y)}, (float(x), float(-x)))
                   for k, (x, y) in enumerate(rng.uniform(-5, 5, size=(15, 2)))]
        p = motpe_suggest(history, SPACE, TpeConfig(seed=0))
        self.assertTrue(all(-5.0 <= v <= 5.0 for v in p.values()))


class TestSuggestStatistics(unittest.TestCase):

    def test_good_cluster_hull(self):
        space = [Param('x', -5.0, 5.0), Param('y', -5.0, 5.0)]
        inside = 0
        for seed in range(100):
            rng = np.random.default_rng([seed, 17])
            good = rng.uniform(0.0, 3.0, size=(10, 2))
            bad = rng.uniform(-5.0, 5.0, size=(60, 2))
            bad = bad[~np.all((bad >= 0.0) & (bad <= 3.0), axis=1)][:30]
            history = [Trial(k, {'x': float(x), 'y': float(y)}, (float(k),))
                       for k, (x, y) in enumerate(np.vstack([good, bad]))]
            p = tpe_suggest(history, space, TpeConfig(seed=seed))
            lo, hi = good.min(axis=0), good.max(axis=0)
            point = np.array([p['x'], p['y']])
            inside += bool(np.all((point >= lo) & (point <= hi)))
        self.assertGreaterEqual(inside, 90)

    def test_motpe_concentrates_on_front(self):
        # the front of (x + y^2, 1 - x + y^2) is the segment y = 0
        space = [Param('x', 0.0, 1.0), Param('y', -1.0, 1.0)]

        def objectives(p):
            return (p['x'] + p['y'] ** 2, 1.0 - p['x'] + p['y'] ** 2)

        trials = optimize(objectives, space, 100, TpeConfig(seed=2), multi=True)
        startup = [abs(t.params['y']) for t in trials[:10]]
        late = [abs(t.params['y']) for t in trials[50:]]
        self.assertLess(np.median(late), 0.2)
        self.assertLess(np.median(late), np.median(startup))

    def test_motpe_on_a_line_front(self):
        space = [Param('x', 0.0, 1.0), Param('y', 0.0, 1.0)]
        trials = optimize(lambda p: (p['x'], 1.0 - p['x']), space, 100,
                          TpeConfig(seed=3), multi=True)
        # every point of this toy is nondominated
        self.assertEqual(len(pareto_front(trials)), 100)
        self.assertTrue(all(0.0 <= t.params['x'] <= 1.0 for t in trials))

    def test_good_set_fills_past_rank_one(self):
        # a chain: each trial dominates the next
        history = [Trial(k, {'x': 0.0, 'y': 0.0}, (float(k), float(k)))
                   for k in range(12)]
        good, bad = _split_by_rank(history, 3)
        ranks = nondomination_ranks([t.values for t in history])
        self.assertEqual([int(ranks[t.trial_id]) for t in good], [0, 1, 2])
        self.assertEqual(len(bad), 9)

    def test_partial_rank_order(self):
        history = trials_from([(3, 1), (1, 3), (2, 2), (4, 4)])
        good, _ = _split_by_rank(history, 2)
        self.assertEqual([t.trial_id for t in good], [1, 2])

    @slow
    def test_shifted_sphere_6d(self):
        center = np.array([1.5, -2.0, 0.5, 3.0, -1.0, -3.5])
        space = [Param('x%d' % d, -5.0, 5.0) for d in range(6)]

        def sphere(p):
            x = np.array([p['x%d' % d] for d in range(6)])
            return float(np.sum((x - center) ** 2))

        bests, startup = [], []
        for seed in range(10):
            cfg = TpeConfig(seed=seed)
            trials = optimize(sphere, space, 300, cfg)
            startup.extend(t.values[0] for t in trials[:cfg.n_startup])
            bests.append(best_so_far(trials)[-1].values[0])
        best = np.median(bests)
        self.assertLessEqual(best, 0.1 * np.median(startup))
        self.assertLessEqual(best, 0.1 * 10.0 ** 2)


class TestPareto(unittest.TestCase):

    def test_example(self):
        front = pareto_front(trials_from([(1, 3), (2, 2), (3, 1), (2, 3)]))
        self.assertEqual([t.trial_id for t in front], [0, 1, 2])

    def test_identical_points(self):
        front = pareto_front(trials_from([(1, 1), (1, 1), (2, 2)]))
        self.assertEqual([t.trial_id for t in front], [0, 1])

    def test_random_against_pairwise_scan(self):
        rng = np.random.default_rng(5)
        points = [tuple(map(float, p)) for p in rng.integers(0, 40, size=(1000, 2))]
        front = pareto_front(trials_from(points))
        self.assertEqual([t.trial_id for t in front], pareto_indices(points))

    def test_ranks(self):
        ranks = nondomination_ranks([(1, 3), (2, 2), (3, 1), (2, 3), (3, 3)])
        self.assertEqual(ranks.tolist(), [0, 0, 0, 1, 2])
        self.assertEqual(nondomination_ranks([(k, -k) for k in range(5)]).tolist(),
                         [0] * 5)
        self.assertEqual(len(nondomination_ranks([])), 0)


class TestStage2Select(unittest.TestCase):

    def test_example(self):
        front = trials_from([(-100.0, 5000.0), (-99.97, 2000.0), (-90.0, 100.0)])
        self.assertEqual(stage2_select(front).trial_id, 1)

    def test_cap(self):
        front = trials_from([(-100.0, 15000.0), (-99.0, 13000.0)])
        with self.assertRaises(NoFeasible):
            stage2_select(front)
        self.assertEqual(stage2_select(front, cap=14000).trial_id, 1)


class TestLearnConfig(unittest.TestCase):

    def test_round_trip(self):
        cfg = LearnConfig(n_learn=5, trials_per_stage=(3, 4, 5), seed=9,
                          loss_kind='discrete_cycle',
                          solver=SolverConfig(restarts=2))
        self.assertEqual(LearnConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))),
                         cfg)

    def test_validation(self):
        with self.assertRaises(ConfigError):
            LearnConfig(n_learn=2)
        with self.assertRaises(ConfigError):
            LearnConfig(loss_kind='other')
        with self.assertRaises(ConfigError):
            LearnConfig.from_dict({'bogus': 1})


class TestLearnParameters(unittest.TestCase):

    def setUp(self):
        cfg = GeneratorConfig(seed=6, n_labels=10)
        data = generate_dataset(cfg, 3, 1)
        self.worms = [prealign(w)[0] for w in data.train]

    def test_loss_kinds(self):
        params = CostParams.unlearned(quadratic=False)
        sync, n_lin = matching_loss(self.worms, params, 'sync_sparse')
        self.assertLessEqual(sync, 0.0)
        self.assertGreater(n_lin, 0)
        broken, _ = matching_loss(self.worms, params, 'discrete_cycle')
        self.assertGreaterEqual(broken, 0.0)

    def test_deterministic(self):
        cfg = LearnConfig(n_learn=3, trials_per_stage=(3, 3, 2), seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            log = os.path.join(tmp, 'trials.jsonl')
            first = learn_parameters(self.worms, cfg, log_path=log)
            with open(log) as f:
                lines = [json.loads(line) for line in f]
        second = learn_parameters(list(reversed(self.worms)), cfg)
        self.assertEqual(len(lines), 8)
        self.assertEqual([l['stage'] for l in lines], [1] * 3 + [2] * 3 + [3] * 2)
        self.assertEqual(first.sigmas, second.sigmas)
        self.assertEqual(first.sparsity, second.sparsity)
        self.assertEqual([t.values for t in first.trials],
                         [t.values for t in second.trials])

    def test_stage2_density_below_cap(self):
        cfg = LearnConfig(n_learn=3, trials_per_stage=(2, 8, 1), seed=4)
        first = learn_parameters(self.worms, cfg)
        n_lins = sorted(t.values[1] for t in first.trials if t.stage == 2)
        cap = n_lins[len(n_lins) // 2] + 0.5
        cfg = dataclasses.replace(cfg, n_lin_cap=cap)
        result = learn_parameters(self.worms, cfg)
        params = CostParams(SharedCovariances(result.sigmas.sigma_cen,
                                              result.sigmas.sigma_rad),
                            CostWeights(), result.sparsity, cfg.c0,
                            quadratic=False)
        worms = sorted(self.worms, key=lambda w: w.worm_id)
        n_lin = np.mean([build_from_params(a, b, params).n_lin
                         for a, b in itertools.combinations(worms, 2)])
        self.assertLess(n_lin, cap)
        self.assertTrue(any(abs(t.values[1] - n_lin) < 1e-9
                            for t in result.trials if t.stage == 2))

    def test_too_few_worms(self):
        with self.assertRaises(ConfigError):
            learn_parameters(self.worms[:2], LearnConfig(n_learn=3))


if __name__ == '__main__':
    unittest.main()

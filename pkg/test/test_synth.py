import unittest

import numpy as np
from scipy.spatial.distance import pdist

from cellmatch.exceptions import ConfigError
from cellmatch.synth import (GeneratorConfig, GroundTruthModel,
                             centroid_variance, generate_dataset,
                             make_ground_truth, sample_worm)


class TestGroundTruth(unittest.TestCase):

    def test_single_label(self):
        model = make_ground_truth(GeneratorConfig(n_labels=1))
        self.assertEqual(model.n_labels, 1)
        self.assertEqual(model.partner.tolist(), [-1])

    def test_seeded(self):
        a = make_ground_truth(GeneratorConfig(seed=3))
        b = make_ground_truth(GeneratorConfig(seed=3))
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.radii, b.radii)
        c = make_ground_truth(GeneratorConfig(seed=4))
        self.assertFalse(np.array_equal(a.means, c.means))

    def test_separation_and_symmetry(self):
        model = make_ground_truth(GeneratorConfig(seed=5))
        # the packing threshold is twice a median mean radius, never below
        # twice the smallest one
        floor = 2.0 * model.radii.mean(axis=1).min()
        self.assertGreaterEqual(pdist(model.means).min(), floor)
        for l, p in enumerate(model.partner.tolist()):
            if p < 0:
                self.assertEqual(model.means[l, 1], 0.0)
            else:
                self.assertEqual(model.partner[p], l)
                np.testing.assert_allclose(model.means[p],
                                           model.means[l] * [1, -1, 1])
        self.assertTrue(np.all(np.diff(model.radii, axis=1) <= 0))

    def test_dict_round_trip(self):
        model = make_ground_truth(GeneratorConfig(seed=6, n_labels=7))
        again = GroundTruthModel.from_dict(model.to_dict())
        np.testing.assert_array_equal(again.means, model.means)
        self.assertEqual(again.config, model.config)

    def test_full_scale_defaults(self):
        cfg = GeneratorConfig.full_scale(seed=1)
        self.assertEqual(cfg.n_labels, 558)
        self.assertEqual(GeneratorConfig.desk().n_labels, 60)


class TestSampleWorm(unittest.TestCase):

    def setUp(self):
        self.cfg = GeneratorConfig(seed=7, n_labels=20)
        self.model = make_ground_truth(self.cfg)

    def test_noise_free_gives_means(self):
        cfg = self.cfg.replace(centroid_noise_sigma=(0, 0, 0),
                               radii_noise_sigma=(0, 0, 0),
                               deformation_magnitude=0.0, dropout_prob=0.0,
                               rotation_jitter=0.0, translation_jitter=0.0,
                               shuffle=False)
        worm = sample_worm(self.model, cfg, [7, 1, 0])
        np.testing.assert_allclose(worm.centroids, self.model.means, atol=1e-9)
        np.testing.assert_allclose(worm.radii, self.model.radii, atol=1e-12)
        self.assertEqual(worm.label_array.tolist(), list(range(20)))

    def test_full_dropout(self):
        worm = sample_worm(self.model, self.cfg.replace(dropout_prob=1.0),
                           [7, 1, 0])
        self.assertEqual(len(worm), 0)

    def test_spurious_nuclei_unlabeled(self):
        cfg = self.cfg.replace(spurious_rate=20.0, dropout_prob=0.0)
        worm = sample_worm(self.model, cfg, [7, 1, 3])
        n_extra = len(worm) - 20
        self.assertGreater(n_extra, 0)
        self.assertEqual(int(np.sum(worm.label_array < 0)), n_extra)

    def test_centroid_variance(self):
        cfg = self.cfg.replace(rotation_jitter=0.0, translation_jitter=0.0,
                               dropout_prob=0.0, shuffle=False)
        samples = np.array([sample_worm(self.model, cfg, [7, 9, k]).centroids
                            for k in range(5000)])
        empirical = samples.var(axis=0, ddof=1)
        predicted = centroid_variance(self.model, cfg)
        np.testing.assert_allclose(empirical, predicted, rtol=0.1)


class TestDataset(unittest.TestCase):

    def test_distinct_worms(self):
        data = generate_dataset(GeneratorConfig(seed=8, n_labels=15), 5, 5)
        worms = data.train + data.test
        self.assertEqual(len({w.worm_id for w in worms}), 10)
        for a in range(10):
            for b in range(a + 1, 10):
                self.assertFalse(len(worms[a]) == len(worms[b])
                                 and np.array_equal(worms[a].centroids,
                                                    worms[b].centroids))

    def test_reproducible(self):
        cfg = GeneratorConfig(seed=9, n_labels=10)
        a = generate_dataset(cfg, 2, 1)
        b = generate_dataset(cfg, 2, 1)
        for x, y in zip(a.train + a.test, b.train + b.test):
            np.testing.assert_array_equal(x.centroids, y.centroids)
            self.assertEqual(x.gt_labels, y.gt_labels)

    def test_label_counts(self):
        cfg = GeneratorConfig(seed=10, n_labels=30, dropout_prob=0.1)
        data = generate_dataset(cfg, 50, 1)
        kept = np.mean([len(w) for w in data.train])
        self.assertAlmostEqual(kept / 30, 0.9, delta=0.03)
        for w in data.train:
            labels = w.label_array
            self.assertEqual(len(set(labels.tolist())), len(w))
            self.assertTrue(np.all((labels >= 0) & (labels < 30)))

    def test_bad_counts(self):
        with self.assertRaises(ConfigError):
            generate_dataset(GeneratorConfig(), 0, 1)

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            GeneratorConfig(dropout_prob=1.5)
        with self.assertRaises(ConfigError):
            GeneratorConfig.from_dict({'n_labels': 5, 'colour': 'red'})


if __name__ == '__main__':
    unittest.main()

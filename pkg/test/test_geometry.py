import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from cellmatch.costs import CostParams
from cellmatch.exceptions import DegenerateCloud, NoMatches
from cellmatch.geometry import (AffineTransform, Nucleus, RigidTransform,
                                Worm, align_by_labels, average_affine,
                                fit_ellipsoid, fit_residual, half_turn,
                                least_squares_affine, orient, prealign,
                                realign)
from cellmatch.synth import GeneratorConfig, make_ground_truth, sample_worm


def random_affine(rng):
    while True:
        linear = rng.normal(size=(3, 3)) + 2 * np.eye(3)
        if abs(np.linalg.det(linear)) > 0.1:
            return AffineTransform(linear, rng.normal(scale=5, size=3))


class TestNucleus(unittest.TestCase):

    def test_radii_must_descend(self):
        with self.assertRaises(ValueError):
            Nucleus(0, (0, 0, 0), (1.0, 2.0, 0.5))

    def test_radii_must_be_positive(self):
        with self.assertRaises(ValueError):
            Nucleus(0, (0, 0, 0), (1.0, 0.5, 0.0))


class TestWorm(unittest.TestCase):

    def test_from_arrays_labels(self):
        w = Worm.from_arrays('w', np.eye(3), np.ones((3, 3)),
                             labels=[4, None, -1])
        self.assertEqual(w.gt_labels, {0: 4})
        self.assertEqual(w.label_array.tolist(), [4, -1, -1])

    def test_duplicate_ids(self):
        with self.assertRaises(ValueError):
            Worm.from_arrays('w', np.zeros((2, 3)), np.ones((2, 3)), ids=[1, 1])

    def test_labels_injective(self):
        with self.assertRaises(ValueError):
            Worm.from_arrays('w', np.zeros((2, 3)), np.ones((2, 3)),
                             labels=[3, 3])

    def test_unlabeled(self):
        w = Worm.from_arrays('w', np.zeros((2, 3)), np.ones((2, 3)))
        self.assertFalse(w.is_labeled)
        self.assertEqual(len(w), 2)


class TestFitEllipsoid(unittest.TestCase):

    def test_unit_sphere(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10000, 3))
        pts = x / np.linalg.norm(x, axis=1)[:, None] * rng.random(10000)[:, None] ** (1 / 3)
        centroid, radii, axes = fit_ellipsoid(pts)
        np.testing.assert_allclose(centroid, 0, atol=0.02)
        self.assertLess((radii.max() - radii.min()) / radii.max(), 0.05)
        np.testing.assert_allclose(axes.T @ axes, np.eye(3), atol=1e-10)

    def test_box_vertices(self):
        corners = np.array(list(np.ndindex(2, 2, 2)), dtype=float) * 2 - 1
        centroid, radii, axes = fit_ellipsoid(corners * [4, 2, 1])
        np.testing.assert_allclose(np.abs(axes), np.eye(3), atol=1e-12)
        self.assertTrue(np.all(np.diff(radii) < 0))
        self.assertGreater(np.linalg.det(axes), 0)

    def test_known_covariance(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(100000, 3)) * [3, 2, 1]
        _, radii, _ = fit_ellipsoid(pts)
        np.testing.assert_allclose(radii, [6, 4, 2], rtol=0.05)

    def test_degenerate(self):
        with self.assertRaises(DegenerateCloud):
            fit_ellipsoid(np.zeros((3, 3)))
        with self.assertRaises(DegenerateCloud):
            fit_ellipsoid([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [2, 1, 0]])


class TestPrealign(unittest.TestCase):

    def setUp(self):
        cfg = GeneratorConfig(seed=3)
        self.model = make_ground_truth(cfg)
        self.worm = sample_worm(self.model, cfg, [3, 1, 0], 'w')

    def test_barycenter_at_origin(self):
        aligned, tf = prealign(self.worm)
        np.testing.assert_allclose(aligned.centroids.mean(axis=0), 0, atol=1e-9)
        self.assertIsInstance(tf, RigidTransform)
        np.testing.assert_allclose(tf.apply(self.worm.centroids),
                                   aligned.centroids, atol=1e-12)

    def test_already_canonical(self):
        aligned, _ = prealign(self.worm)
        again, tf = prealign(aligned)
        np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-4)
        np.testing.assert_allclose(again.centroids, aligned.centroids, atol=1e-3)

    def test_rotation_invariance(self):
        aligned, _ = prealign(self.worm)
        rot = RigidTransform(Rotation.from_euler('zyx', [1.0, -0.4, 2.1]).as_matrix(),
                             [5.0, -3.0, 12.0])
        moved, _ = prealign(self.worm.transformed(rot))
        np.testing.assert_allclose(moved.centroids, aligned.centroids, atol=1e-3)

    def test_radii_untouched(self):
        aligned, _ = prealign(self.worm)
        np.testing.assert_array_equal(aligned.radii, self.worm.radii)


class TestLeastSquaresAffine(unittest.TestCase):

    def test_identity(self):
        src = np.random.default_rng(0).normal(size=(10, 3))
        tf = least_squares_affine(src, src)
        np.testing.assert_allclose(tf.linear, np.eye(3), atol=1e-10)
        self.assertAlmostEqual(fit_residual(tf, src, src), 0.0, places=15)

    def test_recovers_planted_maps(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            planted = random_affine(rng)
            src = rng.normal(scale=10, size=(12, 3))
            tf = least_squares_affine(src, planted.apply(src))
            np.testing.assert_allclose(tf.linear, planted.linear, atol=1e-8)
            np.testing.assert_allclose(tf.translation, planted.translation,
                                       atol=1e-8)

    def test_noisy_matches_normal_equations(self):
        rng = np.random.default_rng(2)
        planted = random_affine(rng)
        src = rng.normal(scale=10, size=(50, 3))
        dst = planted.apply(src) + rng.normal(scale=0.1, size=(50, 3))
        tf = least_squares_affine(src, dst)
        design = np.hstack([src, np.ones((50, 1))])
        sol = np.linalg.pinv(design) @ dst
        np.testing.assert_allclose(tf.linear, sol[:3].T, atol=1e-9)
        np.testing.assert_allclose(tf.translation, sol[3], atol=1e-9)
        self.assertLess(np.abs(tf.linear - planted.linear).max(), 0.05)

    def test_too_few_points(self):
        with self.assertRaises(DegenerateCloud):
            least_squares_affine(np.eye(3), np.eye(3))

    def test_coplanar(self):
        src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
        with self.assertRaises(DegenerateCloud):
            least_squares_affine(src, src)


class TestTransforms(unittest.TestCase):

    def test_compose_and_inverse(self):
        rng = np.random.default_rng(4)
        f, g = random_affine(rng), random_affine(rng)
        pts = rng.normal(size=(5, 3))
        np.testing.assert_allclose(g.compose(f).apply(pts),
                                   g.apply(f.apply(pts)), atol=1e-10)
        np.testing.assert_allclose(f.inverse().apply(f.apply(pts)), pts,
                                   atol=1e-10)

    def test_singular(self):
        with self.assertRaises(DegenerateCloud):
            AffineTransform(np.zeros((3, 3)), np.zeros(3))

    def test_average(self):
        a = AffineTransform(np.eye(3), [2, 0, 0])
        b = AffineTransform(3 * np.eye(3), [0, 2, 0])
        avg = average_affine([a, b])
        np.testing.assert_allclose(avg.linear, 2 * np.eye(3))
        np.testing.assert_allclose(avg.translation, [1, 1, 0])

    def test_reflection_rejected(self):
        with self.assertRaises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class TestAlignByLabels(unittest.TestCase):

    def test_recovers_transform(self):
        rng = np.random.default_rng(5)
        base = Worm.from_arrays('base', rng.normal(scale=10, size=(8, 3)),
                                np.ones((8, 3)), labels=range(8))
        planted = random_affine(rng)
        moved = base.transformed(planted.inverse())
        aligned, tf, residual = align_by_labels(moved, base)
        np.testing.assert_allclose(aligned.centroids, base.centroids, atol=1e-8)
        self.assertLess(residual, 1e-12)

    def test_too_few_shared_labels(self):
        base = Worm.from_arrays('a', np.eye(4)[:, :3] + 1, np.ones((4, 3)),
                                labels=[0, 1, 2, 3])
        other = Worm.from_arrays('b', np.eye(4)[:, :3], np.ones((4, 3)),
                                 labels=[0, 1, 2, 9])
        with self.assertRaises(NoMatches):
            align_by_labels(other, base)


class TestRealign(unittest.TestCase):

    def setUp(self):
        cfg = GeneratorConfig(seed=11)
        self.cfg = cfg
        self.model = make_ground_truth(cfg)

    def test_identical_worm(self):
        w = sample_worm(self.model, self.cfg, [11, 1, 0], 'w')
        res = realign(w, w, CostParams.unlearned(quadratic=False), iterations=1)
        np.testing.assert_allclose(res.transform.linear, np.eye(3), atol=1e-8)
        np.testing.assert_allclose(res.transform.translation, 0, atol=1e-8)
        self.assertEqual(len(res.residuals), 1)

    def test_affine_copy(self):
        w = sample_worm(self.model, self.cfg.replace(shuffle=False),
                        [11, 1, 1], 'w')
        tf = AffineTransform(np.diag([1.02, 0.98, 1.01]) + 0.01, [0.3, -0.2, 0.1])
        ref = w.transformed(tf)
        res = realign(w, ref, CostParams.unlearned(quadratic=False),
                      iterations=1)
        np.testing.assert_allclose(res.transform.linear, tf.linear, atol=1e-6)
        np.testing.assert_allclose(res.transform.translation, tf.translation,
                                   atol=1e-6)

    def test_reduces_discrepancy(self):
        cfg = self.cfg.replace(dropout_prob=0.0, shuffle=False)
        a = prealign(sample_worm(self.model, cfg, [11, 1, 2], 'a'))[0]
        b = prealign(sample_worm(self.model, cfg, [11, 1, 3], 'b'))[0]
        before = np.linalg.norm(a.centroids - b.centroids, axis=1).mean()
        res = realign(a, b, CostParams.unlearned(quadratic=False))
        after = np.linalg.norm(res.worm.centroids - b.centroids, axis=1).mean()
        self.assertLess(after, before)


def yz_trace(tf):
    return float(np.trace(tf.linear[1:, 1:]))


class TestHalfTurn(unittest.TestCase):

    def setUp(self):
        self.cfg = GeneratorConfig.desk(seed=5)
        self.model = make_ground_truth(self.cfg)
        self.params = CostParams.unlearned(quadratic=False)

    def worm(self, k):
        w = sample_worm(self.model, self.cfg, [5, 1, k], 'w%d' % k)
        return prealign(w)[0]

    def posed_like(self, w, ref):
        """``w`` in the pose of ``ref``, settled with ground-truth labels."""
        if yz_trace(align_by_labels(w, ref)[1]) < 0:
            return half_turn(w)[0]
        return w

    def test_half_turn(self):
        w = self.worm(0)
        turned, tf = half_turn(w)
        np.testing.assert_allclose(tf.rotation, np.diag([1.0, -1.0, -1.0]),
                                   atol=1e-12)
        np.testing.assert_allclose(turned.centroids.mean(axis=0),
                                   w.centroids.mean(axis=0), atol=1e-9)
        again, _ = half_turn(turned)
        np.testing.assert_allclose(again.centroids, w.centroids, atol=1e-9)

    def test_orient_undoes_turn(self):
        ref = self.worm(0)
        w = self.posed_like(self.worm(1), ref)
        kept, tf, pairs = orient(w, ref, self.params)
        np.testing.assert_allclose(tf.rotation, np.eye(3))
        self.assertIs(kept, w)
        turned, _ = half_turn(w)
        back, tf, _ = orient(turned, ref, self.params)
        np.testing.assert_allclose(tf.rotation, np.diag([1.0, -1.0, -1.0]),
                                   atol=1e-12)
        np.testing.assert_allclose(back.centroids, w.centroids, atol=1e-9)
        self.assertGreaterEqual(len(pairs), 4)

    def label_distance(self, w, ref):
        at = {l: ref.centroids[ref.position_of[n]]
              for n, l in ref.gt_labels.items()}
        return np.median([np.linalg.norm(w.centroids[w.position_of[n]] - at[l])
                          for n, l in w.gt_labels.items() if l in at])

    def test_independent_worms_share_pose(self):
        ref = self.worm(0)
        for k in range(1, 9):
            w = self.posed_like(self.worm(k), ref)
            turn = k % 2 == 1
            if turn:
                w = half_turn(w)[0]
            res = realign(w, ref, self.params, iterations=2)
            # the composed map undoes exactly the planted turn
            self.assertEqual(yz_trace(res.transform) < 0, turn, w.worm_id)
            _, tf, _ = align_by_labels(res.worm, ref)
            self.assertGreater(yz_trace(tf), 0, w.worm_id)
            self.assertLess(self.label_distance(res.worm, ref),
                            self.label_distance(half_turn(res.worm)[0], ref),
                            w.worm_id)

    def test_turn_can_be_disabled(self):
        ref = self.worm(0)
        turned, _ = half_turn(self.posed_like(self.worm(1), ref))
        on = realign(turned, ref, self.params, iterations=1)
        off = realign(turned, ref, self.params, iterations=1,
                      resolve_half_turn=False)
        self.assertLess(yz_trace(on.transform), 0)
        self.assertLess(on.residuals[0], off.residuals[0])


if __name__ == '__main__':
    unittest.main()

import numpy as np
from django.test import SimpleTestCase, tag
from hypothesis import given
from hypothesis import settings as hyp_settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.neighbors import NearestCentroid

from fewshot.data_gen import make_blob_classes, sample_episode
from fewshot.errors import ConfigError, ShapeError
from fewshot.implanting import (
    MixSpace,
    MixSpec,
    PrototypeMetric,
    build_prototype_classifier,
    closed_set_pretrain,
    episode_loss_and_gradients,
    fit_base_head,
    implant_pretrain,
    mix_features,
    synthesize_episode,
)
from fewshot.nn_engine import embed

from .factories import random_model

vectors = arrays(np.float64, 5, elements=st.floats(-100, 100, allow_nan=False))


class MixTests(SimpleTestCase):
    @hyp_settings(max_examples=200, deadline=None)
    @given(vectors, vectors, st.floats(0.0, 1.0))
    def test_mix_lies_between_its_endpoints(self, x1, x2, lam):
        mixed = mix_features(x1, x2, lam)
        slack = 1e-9 * (1.0 + np.maximum(np.abs(x1), np.abs(x2)))
        self.assertTrue(np.all(mixed >= np.minimum(x1, x2) - slack))
        self.assertTrue(np.all(mixed <= np.maximum(x1, x2) + slack))

    def test_betweenness_over_many_draws(self):
        rng = np.random.default_rng(0)
        x1, x2 = rng.normal(size=(2, 10000, 3))
        lam = rng.uniform(size=(10000, 1))
        mixed = lam * x1 + (1 - lam) * x2
        for row in range(0, 10000, 997):
            assert_allclose(mix_features(x1[row], x2[row], float(lam[row, 0])), mixed[row])
        self.assertTrue(np.all(mixed >= np.minimum(x1, x2) - 1e-12))
        self.assertTrue(np.all(mixed <= np.maximum(x1, x2) + 1e-12))

    def test_unit_ratio_is_identity(self):
        x1, x2 = np.array([1.0, -2.0]), np.array([5.0, 7.0])
        assert_array_equal(mix_features(x1, x2, 1.0), x1)
        assert_array_equal(mix_features(x1, x2, 0.0), x2)

    def test_rejects_bad_inputs(self):
        with self.assertRaises(ShapeError):
            mix_features(np.ones(2), np.ones(3), 0.5)
        with self.assertRaises(ConfigError):
            mix_features(np.ones(2), np.ones(2), 1.5)

    def test_beta_sample_mean(self):
        draws = MixSpec(1.5, 1.5).sample(np.random.default_rng(0), 10000)
        self.assertTrue(0.49 <= draws.mean() <= 0.51)
        self.assertTrue(np.all((draws >= 0) & (draws <= 1)))

    def test_mix_spec_validation(self):
        with self.assertRaises(ConfigError):
            MixSpec(0.0, 1.5)


class SynthesisTests(SimpleTestCase):
    def setUp(self):
        self.classset = make_blob_classes(6, 4, 30, 5.0, 1.0, seed=0)
        self.episode = sample_episode(self.classset, 4, 3, 2, np.random.default_rng(0))

    def test_augmented_layout(self):
        aug = synthesize_episode(self.episode, MixSpec(), MixSpace.INPUT, None, np.random.default_rng(1))
        self.assertEqual(aug.way, 8)
        self.assertEqual(aug.synthesized_support.shape, (12, 4))
        self.assertEqual(aug.synthesized_query.shape, (8, 4))
        assert_array_equal(np.bincount(aug.support_labels), [3] * 8)
        assert_array_equal(np.bincount(aug.query_labels), [2] * 8)
        self.assertEqual(len({tuple(sorted(pair)) for pair in aug.pairs}), 4)
        self.assertTrue(all(a != b for a, b in aug.pairs))

    def test_synthesized_rows_mix_their_pair(self):
        aug = synthesize_episode(self.episode, MixSpec(), MixSpace.INPUT, None, np.random.default_rng(2))
        recipe, pool = aug.support_recipe, aug.pool_inputs
        pair_of = np.repeat(np.arange(4), 3)
        for row, synthetic in enumerate(aug.synthesized_support):
            a, b = aug.pairs[pair_of[row]]
            self.assertEqual(self.episode.support_labels[recipe.first[row]], a)
            self.assertEqual(self.episode.support_labels[recipe.second[row]], b)
            lam = recipe.lambdas[row]
            assert_allclose(synthetic, lam * pool[recipe.first[row]] + (1 - lam) * pool[recipe.second[row]])

    def test_query_synthesis_reads_only_query_rows(self):
        aug = synthesize_episode(self.episode, MixSpec(), MixSpace.INPUT, None, np.random.default_rng(3))
        support_rows = self.episode.support_inputs.shape[0]
        self.assertTrue(np.all(aug.query_recipe.first >= support_rows))
        self.assertTrue(np.all(aug.query_recipe.second >= support_rows))

    def test_embedding_space_needs_a_model(self):
        with self.assertRaises(ConfigError):
            synthesize_episode(self.episode, MixSpec(), MixSpace.EMBEDDING, None, np.random.default_rng(0))

    def test_two_way_episode_repeats_its_only_pair(self):
        episode = sample_episode(self.classset, 2, 2, 2, np.random.default_rng(4))
        aug = synthesize_episode(episode, MixSpec(), MixSpace.INPUT, None, np.random.default_rng(4))
        assert_array_equal(aug.pairs, [[0, 1], [0, 1]])


class PrototypeTests(SimpleTestCase):
    def test_matches_nearest_centroid(self):
        rng = np.random.default_rng(0)
        embeddings = rng.normal(size=(30, 4))
        labels = np.repeat(np.arange(3), 10)
        oracle = NearestCentroid().fit(embeddings, labels)
        assert_allclose(build_prototype_classifier(embeddings, labels), oracle.centroids_)

    def test_empty_class_is_rejected(self):
        with self.assertRaises(ConfigError):
            build_prototype_classifier(np.ones((2, 3)), np.array([0, 2]), 3)


class EpisodeGradientTests(SimpleTestCase):
    def _check(self, mix_space, metric):
        classset = make_blob_classes(5, 3, 20, 3.0, 1.0, seed=1)
        model = random_model([3, 6, 5, 4], seed=3)
        episode = sample_episode(classset, 3, 2, 2, np.random.default_rng(5))
        aug = synthesize_episode(episode, MixSpec(), mix_space, model, np.random.default_rng(6))
        _, _, grads = episode_loss_and_gradients(model, aug, metric)
        assert_array_equal(grads[-1].weight, 0.0)
        h = 1e-6
        for index in (0, 1, 2):
            layer = model.layers[index]
            for position in [(0, 0), (1, 2)]:
                saved = layer.weight[position]
                layer.weight[position] = saved + h
                upper = episode_loss_and_gradients(model, aug, metric)[0]
                layer.weight[position] = saved - h
                lower = episode_loss_and_gradients(model, aug, metric)[0]
                layer.weight[position] = saved
                numeric = (upper - lower) / (2 * h)
                analytic = grads[index].weight[position]
                self.assertLess(abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-4), 1e-4)

    def test_embedding_mix_dot_gradients(self):
        self._check(MixSpace.EMBEDDING, PrototypeMetric.DOT)

    def test_embedding_mix_cosine_gradients(self):
        self._check(MixSpace.EMBEDDING, PrototypeMetric.COSINE)

    def test_input_mix_dot_gradients(self):
        self._check(MixSpace.INPUT, PrototypeMetric.DOT)


class PretrainTests(SimpleTestCase):
    def setUp(self):
        self.classset = make_blob_classes(6, 4, 30, 5.0, 1.0, seed=0)
        self.model = random_model([4, 8, 6, 6], seed=0)

    def test_implanting_returns_a_trained_copy(self):
        before = self.model.clone()
        trained, log = implant_pretrain(self.model, self.classset, 4, 3, 2, 2, MixSpec(), 0.01, seed=0)
        self.assertTrue(self.model.equals(before))
        self.assertFalse(trained.equals(before))
        self.assertEqual([record.episode for record in log], [0, 1, 2, 3])
        self.assertTrue(all(0.0 <= record.query_acc <= 1.0 for record in log))

    def test_implanting_is_seeded(self):
        first, _ = implant_pretrain(self.model, self.classset, 3, 3, 2, 2, MixSpec(), 0.01, seed=4, momentum=0.9)
        second, _ = implant_pretrain(self.model, self.classset, 3, 3, 2, 2, MixSpec(), 0.01, seed=4, momentum=0.9)
        self.assertTrue(first.equals(second))

    def test_zero_episodes_is_a_no_op(self):
        trained, log = implant_pretrain(self.model, self.classset, 0, 3, 2, 2, MixSpec(), 0.01, seed=0)
        self.assertTrue(trained.equals(self.model))
        self.assertEqual(log, [])

    def test_implanting_needs_enough_base_classes(self):
        with self.assertRaises(ConfigError):
            implant_pretrain(self.model, self.classset.subset([0, 1]), 1, 3, 2, 2, MixSpec(), 0.01, seed=0)

    def test_closed_set_reduces_loss(self):
        _, log = closed_set_pretrain(
            self.model, self.classset, self.classset.class_ids, 15, 32, 0.01, 0.9, np.random.default_rng(0)
        )
        self.assertEqual(len(log), 15)
        self.assertLess(log[-1].loss, log[0].loss)

    def test_closed_set_needs_matching_head(self):
        with self.assertRaises(ShapeError):
            closed_set_pretrain(self.model, self.classset, [0, 1], 1, 8, 0.01, 0.0, np.random.default_rng(0))

    def test_base_head_starts_from_prototypes_and_keeps_the_backbone(self):
        ids = [0, 2, 4]
        fitted, log = fit_base_head(self.model, self.classset, ids, 0, 0.01, 16, np.random.default_rng(0))
        self.assertEqual(log, [])
        self.assertEqual(fitted.output_dim, 3)
        expected = np.array([embed(self.model, self.classset.train(class_id)).mean(axis=0) for class_id in ids])
        assert_allclose(fitted.head.weight, expected)
        trained, log = fit_base_head(self.model, self.classset, ids, 3, 0.01, 16, np.random.default_rng(0))
        self.assertEqual(len(log), 3)
        for index in range(self.model.layer_count - 1):
            assert_array_equal(trained.layers[index].weight, self.model.layers[index].weight)
        self.assertTrue(all(layer.tunable for layer in trained.layers))


@tag("slow")
class ImplantingProgressTests(SimpleTestCase):
    def test_query_accuracy_improves_over_training(self):
        gains = []
        for seed in range(5):
            classset = make_blob_classes(14, 16, 200, 5.0, 1.0, seed=seed)
            base = classset.subset(classset.class_ids[:6])
            model = random_model([16, 64, 32, 32, 6], seed=seed)
            _, log = implant_pretrain(model, base, 300, 5, 5, 15, MixSpec(), 0.005, seed=seed, momentum=0.9)
            first = np.mean([record.query_acc for record in log[:100]])
            last = np.mean([record.query_acc for record in log[-100:]])
            gains.append(last - first)
        self.assertGreater(np.median(gains), 0.0)
